use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::layers::{self, Argmax, BnCache, DropMask, LayerSpec, Mode, ReluMask};
use crate::nn::{init, Scalar, Tensor};
use crate::rng::Rng;

/// Where a node reads from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Src {
    Input,
    Node(usize),
}

#[derive(Debug, Clone)]
pub struct Node<T> {
    pub name: String,
    pub spec: LayerSpec,
    pub inputs: Vec<Src>,
    /// Per-sample output shape.
    pub output_shape: Vec<usize>,
    /// Trainable tensors: kernel/weights + bias, or gamma + beta.
    pub params: Vec<Tensor<T>>,
    /// Non-trainable state: batch-norm running mean and variance.
    pub state: Vec<Tensor<T>>,
}

/// A layer DAG with a single input and a single (last) output node.
#[derive(Debug, Clone)]
pub struct ModelGraph<T = f32> {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub nodes: Vec<Node<T>>,
    /// Fail with a numeric error naming the node whose output goes non-finite.
    pub check_finite: bool,
}

/// What a node keeps from forward for its backward pass.
enum Saved<T> {
    Nothing,
    Input(Arc<Tensor<T>>),
    Output(Arc<Tensor<T>>),
    Relu(ReluMask),
    Bn(BnCache<T>),
    Mask(DropMask<T>),
    Argmax(Argmax, Vec<usize>),
    Split(Vec<usize>),
}

pub struct ForwardPass<T> {
    pub output: Tensor<T>,
    saved: Vec<Saved<T>>,
}

impl<T: Scalar> ForwardPass<T> {
    /// Hash of every piecewise-linear choice made in the pass: max-pool
    /// winners and ReLU active sets. Equal hashes mean the loss is smooth
    /// along the segment between two parameter settings.
    pub fn switch_pattern(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for s in &self.saved {
            match s {
                Saved::Argmax(a, _) => a.hash(&mut h),
                Saved::Relu(mask) => mask.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }
}

/// Gradients aligned with [`ModelGraph::params_mut`].
pub type Gradients<T> = Vec<Vec<Tensor<T>>>;

pub struct GraphBuilder<T> {
    graph: ModelGraph<T>,
}

impl<T: Scalar> GraphBuilder<T> {
    pub fn new(name: &str, input_shape: &[usize]) -> Self {
        Self {
            graph: ModelGraph {
                name: name.to_string(),
                input_shape: input_shape.to_vec(),
                nodes: Vec::new(),
                check_finite: false,
            },
        }
    }

    fn shape_of(&self, src: Src) -> &[usize] {
        match src {
            Src::Input => &self.graph.input_shape,
            Src::Node(i) => &self.graph.nodes[i].output_shape,
        }
    }

    /// Appends a node, initialising weights with Glorot-uniform draws from `rng`.
    pub fn add(&mut self, name: &str, spec: LayerSpec, inputs: &[Src], rng: &mut Rng) -> Result<Src> {
        spec.validate()?;
        for &s in inputs {
            if let Src::Node(i) = s {
                if i >= self.graph.nodes.len() {
                    return Err(Error::Shape(format!("node {name} reads from unknown node {i}")));
                }
            }
        }
        let in_shapes: Vec<&[usize]> = inputs.iter().map(|&s| self.shape_of(s)).collect();
        let output_shape = spec
            .output_shape(&in_shapes)
            .map_err(|e| Error::Shape(format!("node {name}: {e}")))?;
        let param_shapes = spec.param_shapes(in_shapes.first().copied().unwrap_or(&[]));
        let (params, state) = match spec {
            LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. } => (
                vec![
                    init::glorot_uniform(&param_shapes[0], rng),
                    Tensor::zeros(&param_shapes[1]),
                ],
                Vec::new(),
            ),
            LayerSpec::BatchNorm => {
                let c = &param_shapes[0];
                (
                    vec![Tensor::full(c, T::one()), Tensor::zeros(c)],
                    vec![Tensor::zeros(c), Tensor::full(c, T::one())],
                )
            }
            _ => (Vec::new(), Vec::new()),
        };
        self.graph.nodes.push(Node {
            name: name.to_string(),
            spec,
            inputs: inputs.to_vec(),
            output_shape,
            params,
            state,
        });
        Ok(Src::Node(self.graph.nodes.len() - 1))
    }

    pub fn finish(self) -> Result<ModelGraph<T>> {
        let g = self.graph;
        if g.nodes.is_empty() {
            return Err(Error::Shape(format!("model {} has no nodes", g.name)));
        }
        // Every node except the last must feed something.
        let last = g.nodes.len() - 1;
        let mut used = vec![false; g.nodes.len()];
        for n in &g.nodes {
            for s in &n.inputs {
                if let Src::Node(i) = s {
                    used[*i] = true;
                }
            }
        }
        if let Some(dead) = (0..last).find(|&i| !used[i]) {
            return Err(Error::Shape(format!("node {} is not connected to the output", g.nodes[dead].name)));
        }
        Ok(g)
    }
}

impl<T: Scalar> ModelGraph<T> {
    pub fn output_shape(&self) -> &[usize] {
        &self.nodes.last().expect("non-empty graph").output_shape
    }

    pub fn param_count(&self) -> usize {
        self.nodes.iter().flat_map(|n| &n.params).map(Tensor::len).sum()
    }

    /// Nodes that read the graph input directly.
    pub fn branch_roots(&self) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].inputs.contains(&Src::Input)).collect()
    }

    /// Trainable tensors in a fixed order (node order, then parameter order).
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.nodes.iter_mut().flat_map(|n| n.params.iter_mut())
    }

    /// Trainable tensors followed per node by state, the order checkpoints use.
    pub fn all_tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.nodes.iter().flat_map(|n| n.params.iter().chain(&n.state))
    }

    pub fn all_tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.nodes.iter_mut().flat_map(|n| n.params.iter_mut().chain(n.state.iter_mut()))
    }

    pub fn cast<U: Scalar>(&self) -> ModelGraph<U> {
        ModelGraph {
            name: self.name.clone(),
            input_shape: self.input_shape.clone(),
            check_finite: self.check_finite,
            nodes: self
                .nodes
                .iter()
                .map(|n| Node {
                    name: n.name.clone(),
                    spec: n.spec,
                    inputs: n.inputs.clone(),
                    output_shape: n.output_shape.clone(),
                    params: n.params.iter().map(Tensor::cast).collect(),
                    state: n.state.iter().map(Tensor::cast).collect(),
                })
                .collect(),
        }
    }

    fn check_input(&self, batch: &Tensor<T>) -> Result<()> {
        let s = batch.shape();
        if s.is_empty() || s[1..] != self.input_shape[..] {
            return Err(Error::Shape(format!(
                "model {} input: expected N×{:?}, got {:?}",
                self.name, self.input_shape, s
            )));
        }
        Ok(())
    }

    /// Index of the last node that reads each node's output.
    fn last_uses(&self) -> Vec<usize> {
        let mut last = (0..self.nodes.len()).collect::<Vec<_>>();
        for (j, n) in self.nodes.iter().enumerate() {
            for s in &n.inputs {
                if let Src::Node(i) = s {
                    last[*i] = last[*i].max(j);
                }
            }
        }
        last
    }

    /// Inference-only pass (no saved activations). Batch statistics are still
    /// used and running statistics still updated when `mode` is train.
    pub fn predict(&mut self, batch: &Tensor<T>, mode: Mode, rng: &mut Rng) -> Result<Tensor<T>> {
        Ok(self.run(batch, mode, rng, false)?.output)
    }

    /// Forward pass keeping what [`ModelGraph::backward`] needs.
    pub fn forward(&mut self, batch: &Tensor<T>, mode: Mode, rng: &mut Rng) -> Result<ForwardPass<T>> {
        self.run(batch, mode, rng, true)
    }

    fn run(&mut self, batch: &Tensor<T>, mode: Mode, rng: &mut Rng, keep: bool) -> Result<ForwardPass<T>> {
        self.check_input(batch)?;
        let last_use = self.last_uses();
        let input = Arc::new(batch.clone());
        let mut values: Vec<Option<Arc<Tensor<T>>>> = vec![None; self.nodes.len()];
        let mut saved = Vec::with_capacity(self.nodes.len());
        let check_finite = self.check_finite;
        for j in 0..self.nodes.len() {
            let node = &mut self.nodes[j];
            let fetch = |values: &[Option<Arc<Tensor<T>>>], s: Src| match s {
                Src::Input => Arc::clone(&input),
                Src::Node(i) => Arc::clone(values[i].as_ref().expect("value freed before last use")),
            };
            // Release inputs whose last reader is this node so single-input
            // element-wise layers can work in place.
            let ins: Vec<Arc<Tensor<T>>> = node.inputs.iter().map(|&s| fetch(&values, s)).collect();
            for s in &node.inputs {
                if let Src::Node(i) = *s {
                    if last_use[i] == j {
                        values[i] = None;
                    }
                }
            }
            let name = node.name.clone();
            let ctx = |e: Error| Error::Shape(format!("node {name}: {e}"));
            let owned = |ins: Vec<Arc<Tensor<T>>>| {
                let x = ins.into_iter().next().expect("one input");
                Arc::try_unwrap(x).unwrap_or_else(|shared| (*shared).clone())
            };
            let (y, s) = match node.spec {
                LayerSpec::Conv2d { .. } => {
                    let y = layers::conv2d(&ins[0], &node.params[0], node.params[1].data()).map_err(ctx)?;
                    (y, if keep { Saved::Input(Arc::clone(&ins[0])) } else { Saved::Nothing })
                }
                LayerSpec::Dense { .. } => {
                    let y = layers::dense(&ins[0], &node.params[0], node.params[1].data()).map_err(ctx)?;
                    (y, if keep { Saved::Input(Arc::clone(&ins[0])) } else { Saved::Nothing })
                }
                LayerSpec::BatchNorm => {
                    let mut y = owned(ins);
                    let gamma = node.params[0].data();
                    let beta = node.params[1].data();
                    let [rm, rv] = &mut node.state[..] else { unreachable!("batchnorm state") };
                    let cache = layers::batchnorm_inplace(&mut y, gamma, beta, rm.data_mut(), rv.data_mut(), mode, keep)
                        .map_err(ctx)?;
                    (y, Saved::Bn(cache))
                }
                LayerSpec::Relu => {
                    let mut y = owned(ins);
                    let mask = layers::relu_inplace(&mut y);
                    (y, Saved::Relu(mask))
                }
                LayerSpec::SpatialDropout { rate } => {
                    let mut y = owned(ins);
                    let m = layers::spatial_dropout2d_inplace(&mut y, rate, rng, mode).map_err(ctx)?;
                    (y, Saved::Mask(m))
                }
                LayerSpec::Dropout { rate } => {
                    let mut y = owned(ins);
                    let m = layers::dropout_inplace(&mut y, rate, rng, mode);
                    (y, Saved::Mask(m))
                }
                LayerSpec::MaxPool2d { pool } => {
                    let (y, a) = layers::maxpool2d(&ins[0], pool).map_err(ctx)?;
                    (y, Saved::Argmax(a, ins[0].shape().to_vec()))
                }
                LayerSpec::GlobalMaxPool => {
                    let (y, a) = layers::global_max_pool(&ins[0]).map_err(ctx)?;
                    (y, Saved::Argmax(a, ins[0].shape().to_vec()))
                }
                LayerSpec::Softmax => {
                    let y = Arc::new(layers::softmax(&ins[0]).map_err(ctx)?);
                    let s = if keep { Saved::Output(Arc::clone(&y)) } else { Saved::Nothing };
                    (Arc::try_unwrap(y).unwrap_or_else(|shared| (*shared).clone()), s)
                }
                LayerSpec::Concat => {
                    let refs: Vec<&Tensor<T>> = ins.iter().map(|t| t.as_ref()).collect();
                    let y = layers::concat_channels(&refs).map_err(ctx)?;
                    (y, Saved::Split(ins.iter().map(|t| t.channels()).collect()))
                }
            };
            if check_finite && !y.all_finite() {
                return Err(Error::Numeric(format!("non-finite output at node {}", node.name)));
            }
            saved.push(if keep { s } else { Saved::Nothing });
            values[j] = Some(Arc::new(y));
        }
        let output = values.pop().flatten().expect("output node value");
        let output = Arc::try_unwrap(output).unwrap_or_else(|shared| (*shared).clone());
        Ok(ForwardPass { output, saved })
    }

    /// Backpropagates `d_output` (gradient w.r.t. the final node's output).
    pub fn backward(&self, pass: ForwardPass<T>, d_output: Tensor<T>) -> Result<Gradients<T>> {
        self.backprop(pass.saved, self.nodes.len() - 1, d_output)
    }

    /// Backpropagates a gradient taken w.r.t. the inputs of a final softmax,
    /// as produced by the fused softmax/cross-entropy loss.
    pub fn backward_from_logits(&self, pass: ForwardPass<T>, d_logits: Tensor<T>) -> Result<Gradients<T>> {
        let last = self.nodes.len() - 1;
        let node = &self.nodes[last];
        let (LayerSpec::Softmax, [Src::Node(src)]) = (node.spec, &node.inputs[..]) else {
            return Err(Error::InvalidArgument(format!("model {} does not end in softmax", self.name)));
        };
        let mut saved = pass.saved;
        saved.truncate(*src + 1);
        let mut grads = self.backprop(saved, *src, d_logits)?;
        grads.push(Vec::new());
        Ok(grads)
    }

    fn backprop(&self, mut saved: Vec<Saved<T>>, top: usize, d_top: Tensor<T>) -> Result<Gradients<T>> {
        let mut grads: Gradients<T> = vec![Vec::new(); top + 1];
        let mut upstream: Vec<Option<Tensor<T>>> = vec![None; top + 1];
        upstream[top] = Some(d_top);
        let accumulate = |slot: &mut Option<Tensor<T>>, g: Tensor<T>| match slot {
            Some(t) => t.add_assign(&g),
            None => *slot = Some(g),
        };
        for j in (0..=top).rev() {
            let Some(dy) = upstream[j].take() else { continue };
            let node = &self.nodes[j];
            let needs_input = node.inputs.iter().any(|s| matches!(s, Src::Node(_)));
            let saved_j = std::mem::replace(&mut saved[j], Saved::Nothing);
            let dxs: Vec<Tensor<T>> = match (node.spec, saved_j) {
                (LayerSpec::Conv2d { .. }, Saved::Input(x)) => {
                    let g = layers::conv2d_backward(&x, &node.params[0], &dy, needs_input)?;
                    grads[j] = vec![g.kernel, Tensor::from_vec(&[g.bias.len()], g.bias)?];
                    g.input.into_iter().collect()
                }
                (LayerSpec::Dense { .. }, Saved::Input(x)) => {
                    let g = layers::dense_backward(&x, &node.params[0], &dy)?;
                    grads[j] = vec![g.weights, Tensor::from_vec(&[g.bias.len()], g.bias)?];
                    vec![g.input]
                }
                (LayerSpec::BatchNorm, Saved::Bn(cache)) => {
                    let g = layers::batchnorm_backward_inplace(dy, node.params[0].data(), &cache);
                    let c = g.gamma.len();
                    grads[j] = vec![Tensor::from_vec(&[c], g.gamma)?, Tensor::from_vec(&[c], g.beta)?];
                    vec![g.input]
                }
                (LayerSpec::Relu, Saved::Relu(mask)) => vec![layers::relu_backward_inplace(dy, &mask)],
                (LayerSpec::SpatialDropout { .. }, Saved::Mask(m)) => {
                    vec![layers::spatial_dropout2d_backward_inplace(dy, &m)]
                }
                (LayerSpec::Dropout { .. }, Saved::Mask(m)) => vec![layers::dropout_backward_inplace(dy, &m)],
                (LayerSpec::MaxPool2d { .. } | LayerSpec::GlobalMaxPool, Saved::Argmax(a, shape)) => {
                    vec![layers::max_backward(&dy, &a, &shape)]
                }
                (LayerSpec::Softmax, Saved::Output(p)) => vec![layers::softmax_backward(&p, &dy)],
                (LayerSpec::Concat, Saved::Split(channels)) => layers::split_channels(&dy, &channels),
                (spec, _) => {
                    return Err(Error::InvalidArgument(format!(
                        "node {} ({}) has no saved forward state",
                        node.name,
                        spec.kind()
                    )))
                }
            };
            for (s, dx) in node.inputs.iter().zip(dxs) {
                if let Src::Node(i) = *s {
                    accumulate(&mut upstream[i], dx);
                }
            }
        }
        // Nodes without parameters still get an (empty) slot; fill parameterised
        // nodes that received no gradient with zeros.
        for (j, g) in grads.iter_mut().enumerate() {
            if g.is_empty() && !self.nodes[j].params.is_empty() {
                *g = self.nodes[j].params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            }
        }
        Ok(grads)
    }
}
