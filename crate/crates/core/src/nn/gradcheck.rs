//! Central finite-difference checks of analytic gradients in `f64`.
//!
//! Evaluations may report a switch pattern (max-pool winners, ReLU active
//! sets). A probe whose pattern changes within the step sits on a kink; such
//! probes are counted separately and re-checked with a much smaller step.

use rand::Rng as _;

use crate::models::{ModelGraph, N_CLASSES};
use crate::rng::SeedTree;

use super::layers::{self, Mode};
use super::loss::{categorical_crossentropy, one_hot};
use super::Tensor;

pub const STEP: f64 = 1e-5;
pub const KINK_STEP: f64 = 1e-7;
pub const TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub label: String,
    pub probes: usize,
    /// Probes found on a kink at [`STEP`].
    pub kinks: usize,
    /// Worst error over smooth probes at [`STEP`].
    pub max_error: f64,
    /// Worst error over kink probes at [`KINK_STEP`].
    pub max_kink_error: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_error <= TOLERANCE && self.max_kink_error <= TOLERANCE
    }
}

/// Relative error, falling back to absolute when the analytic value is tiny.
pub fn gradient_error(analytic: f64, numeric: f64) -> f64 {
    if analytic.abs() < 1e-8 {
        (numeric - analytic).abs()
    } else {
        (numeric - analytic).abs() / analytic.abs().max(numeric.abs())
    }
}

/// Checks `analytic[i]` for each `i` in `indices` against central
/// differences of a smooth `f` around `x`.
pub fn compare(
    label: &str,
    x: &[f64],
    analytic: &[f64],
    indices: impl IntoIterator<Item = usize>,
    mut f: impl FnMut(&[f64]) -> f64,
) -> GradCheck {
    compare_piecewise(label, x, analytic, indices, |d| (f(d), 0))
}

/// Like [`compare`], for an `f` that also returns its switch pattern.
pub fn compare_piecewise(
    label: &str,
    x: &[f64],
    analytic: &[f64],
    indices: impl IntoIterator<Item = usize>,
    mut f: impl FnMut(&[f64]) -> (f64, u64),
) -> GradCheck {
    assert_eq!(x.len(), analytic.len(), "{label}: gradient length");
    let (_, pattern) = f(x);
    let mut probe = x.to_vec();
    let mut eval = |i: usize, h: f64, probe: &mut Vec<f64>| {
        probe[i] = x[i] + h;
        let up = f(probe);
        probe[i] = x[i] - h;
        let down = f(probe);
        probe[i] = x[i];
        ((up.0 - down.0) / (2.0 * h), up.1 == pattern && down.1 == pattern)
    };
    let mut out = GradCheck {
        label: label.to_string(),
        probes: 0,
        kinks: 0,
        max_error: 0.0,
        max_kink_error: 0.0,
    };
    for i in indices {
        out.probes += 1;
        let (numeric, smooth) = eval(i, STEP, &mut probe);
        if smooth {
            out.max_error = out.max_error.max(gradient_error(analytic[i], numeric));
        } else {
            out.kinks += 1;
            let (fine, _) = eval(i, KINK_STEP, &mut probe);
            out.max_kink_error = out.max_kink_error.max(gradient_error(analytic[i], fine));
        }
    }
    out
}

fn rand_tensor(shape: &[usize], seeds: &SeedTree, name: &str) -> Tensor<f64> {
    let mut rng = seeds.rng(name);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn with(t: &Tensor<f64>, d: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(t.shape(), d.to_vec()).expect("shape")
}

/// Input and parameter gradients of every layer kind on small random
/// tensors, each through the scalar `Σ w ⊙ layer(x)`.
pub fn layer_suite(seed: u64) -> Vec<GradCheck> {
    let s = SeedTree::new(seed);
    let mut out = Vec::new();
    let all = |t: &Tensor<f64>| 0..t.len();

    let x = rand_tensor(&[2, 5, 4, 2], &s, "conv.x");
    for (kh, kw) in [(3, 3), (4, 1), (1, 4)] {
        let k = rand_tensor(&[kh, kw, 2, 3], &s, "conv.k");
        let b = vec![0.05, -0.1, 0.2];
        let w = rand_tensor(&[2, 5, 4, 3], &s, "conv.w");
        let g = layers::conv2d_backward(&x, &k, &w, true).expect("conv backward");
        let wl = |x: &Tensor<f64>, k: &Tensor<f64>, b: &[f64]| dot(&layers::conv2d(x, k, b).unwrap(), &w);
        let dx = g.input.expect("input gradient");
        out.push(compare(&format!("conv2d {kh}x{kw} input"), x.data(), dx.data(), all(&x), |d| wl(&with(&x, d), &k, &b)));
        out.push(compare(&format!("conv2d {kh}x{kw} kernel"), k.data(), g.kernel.data(), all(&k), |d| wl(&x, &with(&k, d), &b)));
        out.push(compare(&format!("conv2d {kh}x{kw} bias"), &b, &g.bias, 0..3, |d| wl(&x, &k, d)));
    }

    for (mode, tag) in [(Mode::Train { dropout: false }, "train"), (Mode::Infer, "infer")] {
        let x = rand_tensor(&[3, 2, 2, 4], &s, "bn.x");
        let gamma = vec![0.5, 0.8, 1.1, 1.4];
        let beta = vec![0.1, 0.0, -0.2, 0.3];
        let (rm, rv) = (vec![0.1, -0.1, 0.2, 0.0], vec![0.8, 1.2, 0.5, 2.0]);
        let w = rand_tensor(x.shape(), &s, "bn.w");
        let fwd = |x: &Tensor<f64>, g: &[f64], b: &[f64]| {
            layers::batchnorm(x, g, b, &mut rm.clone(), &mut rv.clone(), mode).unwrap()
        };
        let (_, cache) = fwd(&x, &gamma, &beta);
        let g = layers::batchnorm_backward(&w, &gamma, &cache);
        out.push(compare(&format!("batchnorm {tag} input"), x.data(), g.input.data(), all(&x), |d| {
            dot(&fwd(&with(&x, d), &gamma, &beta).0, &w)
        }));
        out.push(compare(&format!("batchnorm {tag} gamma"), &gamma, &g.gamma, 0..4, |d| dot(&fwd(&x, d, &beta).0, &w)));
        out.push(compare(&format!("batchnorm {tag} beta"), &beta, &g.beta, 0..4, |d| dot(&fwd(&x, &gamma, d).0, &w)));
    }

    let x = rand_tensor(&[4, 6], &s, "relu.x").map(|v| if v.abs() < 0.05 { 0.3 } else { v });
    let w = rand_tensor(&[4, 6], &s, "relu.w");
    let g = layers::relu_backward(&layers::relu(&x), &w);
    out.push(compare("relu input", x.data(), g.data(), all(&x), |d| dot(&layers::relu(&with(&x, d)), &w)));

    // Dropout masks are replayed from the same stream for every evaluation.
    let x = rand_tensor(&[2, 3, 3, 4], &s, "sd.x");
    let w = rand_tensor(x.shape(), &s, "sd.w");
    let sd = |x: &Tensor<f64>| layers::spatial_dropout2d(x, 0.5, &mut s.rng("sd.mask"), Mode::TRAIN).unwrap();
    let g = layers::spatial_dropout2d_backward(&w, &sd(&x).1);
    out.push(compare("spatial_dropout input", x.data(), g.data(), all(&x), |d| dot(&sd(&with(&x, d)).0, &w)));

    let x = rand_tensor(&[3, 10], &s, "do.x");
    let w = rand_tensor(x.shape(), &s, "do.w");
    let dr = |x: &Tensor<f64>| layers::dropout(x, 0.3, &mut s.rng("do.mask"), Mode::TRAIN);
    let g = layers::dropout_backward(&w, &dr(&x).1);
    out.push(compare("dropout input", x.data(), g.data(), all(&x), |d| dot(&dr(&with(&x, d)).0, &w)));

    let x = rand_tensor(&[2, 7, 9, 3], &s, "mp.x");
    for pool in [(4, 2), (2, 4)] {
        let (y, arg) = layers::maxpool2d(&x, pool).unwrap();
        let w = rand_tensor(y.shape(), &s, "mp.w");
        let g = layers::max_backward(&w, &arg, x.shape());
        out.push(compare(&format!("maxpool2d {}x{} input", pool.0, pool.1), x.data(), g.data(), all(&x), |d| {
            dot(&layers::maxpool2d(&with(&x, d), pool).unwrap().0, &w)
        }));
    }

    let x = rand_tensor(&[3, 4, 5, 2], &s, "gmp.x");
    let (y, arg) = layers::global_max_pool(&x).unwrap();
    let w = rand_tensor(y.shape(), &s, "gmp.w");
    let g = layers::max_backward(&w, &arg, x.shape());
    out.push(compare("global_maxpool input", x.data(), g.data(), all(&x), |d| {
        dot(&layers::global_max_pool(&with(&x, d)).unwrap().0, &w)
    }));

    let x = rand_tensor(&[3, 4], &s, "dense.x");
    let wt = rand_tensor(&[4, 3], &s, "dense.wt");
    let bias = vec![0.2, -0.1, 0.05];
    let w = rand_tensor(&[3, 3], &s, "dense.w");
    let g = layers::dense_backward(&x, &wt, &w).unwrap();
    let dl = |x: &Tensor<f64>, wt: &Tensor<f64>, b: &[f64]| dot(&layers::dense(x, wt, b).unwrap(), &w);
    out.push(compare("dense input", x.data(), g.input.data(), all(&x), |d| dl(&with(&x, d), &wt, &bias)));
    out.push(compare("dense weights", wt.data(), g.weights.data(), all(&wt), |d| dl(&x, &with(&wt, d), &bias)));
    out.push(compare("dense bias", &bias, &g.bias, 0..3, |d| dl(&x, &wt, d)));

    let x = rand_tensor(&[3, 5], &s, "softmax.x");
    let w = rand_tensor(&[3, 5], &s, "softmax.w");
    let g = layers::softmax_backward(&layers::softmax(&x).unwrap(), &w);
    out.push(compare("softmax input", x.data(), g.data(), all(&x), |d| dot(&layers::softmax(&with(&x, d)).unwrap(), &w)));

    let a = rand_tensor(&[2, 3, 3, 4], &s, "concat.a");
    let b = rand_tensor(&[2, 3, 3, 2], &s, "concat.b");
    let w = rand_tensor(&[2, 3, 3, 6], &s, "concat.w");
    let parts = layers::split_channels(&w, &[4, 2]);
    out.push(compare("concat first input", a.data(), parts[0].data(), all(&a), |d| {
        dot(&layers::concat_channels(&[&with(&a, d), &b]).unwrap(), &w)
    }));
    out.push(compare("concat second input", b.data(), parts[1].data(), all(&b), |d| {
        dot(&layers::concat_channels(&[&a, &with(&b, d)]).unwrap(), &w)
    }));

    let logits = rand_tensor(&[4, 6], &s, "ce.logits");
    let mut targets = rand_tensor(&[4, 6], &s, "ce.t").map(f64::abs);
    for row in targets.data_mut().chunks_exact_mut(6) {
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= sum);
    }
    let ce = |l: &Tensor<f64>| categorical_crossentropy(&layers::softmax(l).unwrap(), &targets).unwrap();
    let g = ce(&logits).1;
    out.push(compare("softmax+crossentropy logits", logits.data(), g.data(), all(&logits), |d| ce(&with(&logits, d)).0));
    out
}

/// Whole-model check through softmax and cross-entropy in train mode with
/// dropout off, probing `probes_per_tensor` random entries of every
/// trainable tensor.
pub fn model_check(model: &ModelGraph<f64>, x: &Tensor<f64>, labels: &[usize], probes_per_tensor: usize, seed: u64) -> Vec<GradCheck> {
    let targets = one_hot::<f64>(labels, N_CLASSES).expect("labels");
    let mode = Mode::Train { dropout: false };
    let no_dropout = SeedTree::new(0);
    let mut work = model.clone();
    let pass = work.forward(x, mode, &mut no_dropout.rng("d")).expect("forward");
    let (_, dlogits) = categorical_crossentropy(&pass.output, &targets).expect("loss");
    let grads: Vec<Tensor<f64>> = model.backward_from_logits(pass, dlogits).expect("backward").into_iter().flatten().collect();

    let mut names = Vec::new();
    for n in &model.nodes {
        for (i, _) in n.params.iter().enumerate() {
            names.push(format!("{} param {i}", n.name));
        }
    }
    let mut pick = SeedTree::new(seed).rng("probes");
    let mut out = Vec::new();
    for (ti, grad) in grads.iter().enumerate() {
        let base = model.clone().params_mut().nth(ti).expect("tensor").data().to_vec();
        let picks: Vec<usize> = (0..probes_per_tensor.min(grad.len())).map(|_| pick.random_range(0..grad.len())).collect();
        let loss = |d: &[f64]| {
            let mut m = model.clone();
            m.params_mut().nth(ti).expect("tensor").data_mut().copy_from_slice(d);
            let pass = m.forward(x, mode, &mut no_dropout.rng("d")).expect("forward");
            let value = categorical_crossentropy(&pass.output, &targets).expect("loss").0;
            (value, pass.switch_pattern())
        };
        out.push(compare_piecewise(&names[ti], &base, grad.data(), picks, loss));
    }
    out
}
