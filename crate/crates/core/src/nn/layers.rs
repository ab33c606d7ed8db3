//! Layer kernels over NHWC tensors: forward passes plus the matching
//! backward passes (input gradient and parameter gradients).
//!
//! Convolution and pooling use "same" padding throughout. For an extent `k`
//! the padding before is `(k - 1) / 2` and the rest goes after; pooling pads
//! `floor(total / 2)` before, and padded cells never win a max.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

use super::{Scalar, Tensor};

pub const BN_MOMENTUM: f64 = 0.99;
pub const BN_EPSILON: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; dropout only when `dropout` is set.
    Train { dropout: bool },
    /// Running statistics, no dropout.
    Infer,
}

impl Mode {
    pub const TRAIN: Mode = Mode::Train { dropout: true };

    pub fn is_train(self) -> bool {
        matches!(self, Mode::Train { .. })
    }

    fn dropout_active(self) -> bool {
        matches!(self, Mode::Train { dropout: true })
    }
}

/// Hyperparameters of one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    Conv2d { filters: usize, kernel: (usize, usize) },
    BatchNorm,
    Relu,
    /// Drops whole feature-map channels.
    SpatialDropout { rate: f64 },
    /// Drops individual elements.
    Dropout { rate: f64 },
    MaxPool2d { pool: (usize, usize) },
    GlobalMaxPool,
    Dense { units: usize },
    Softmax,
    Concat,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::BatchNorm => "batchnorm",
            LayerSpec::Relu => "relu",
            LayerSpec::SpatialDropout { .. } => "spatial_dropout",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::MaxPool2d { .. } => "maxpool2d",
            LayerSpec::GlobalMaxPool => "global_maxpool",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Softmax => "softmax",
            LayerSpec::Concat => "concat",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LayerSpec::Conv2d { filters, kernel } => filters > 0 && kernel.0 > 0 && kernel.1 > 0,
            LayerSpec::SpatialDropout { rate } | LayerSpec::Dropout { rate } => {
                (0.0..1.0).contains(&rate)
            }
            LayerSpec::MaxPool2d { pool } => pool.0 > 0 && pool.1 > 0,
            LayerSpec::Dense { units } => units > 0,
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid {self:?}")))
        }
    }

    /// Per-sample output shape (batch axis excluded).
    pub fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        let single = || -> Result<&[usize]> {
            match inputs {
                [one] => Ok(one),
                _ => Err(Error::Shape(format!("{} takes exactly one input", self.kind()))),
            }
        };
        let spatial = |s: &[usize]| -> Result<(usize, usize, usize)> {
            match *s {
                [h, w, c] => Ok((h, w, c)),
                _ => Err(Error::Shape(format!("{} needs H×W×C input, got {s:?}", self.kind()))),
            }
        };
        match *self {
            LayerSpec::Conv2d { filters, .. } => {
                let (h, w, _) = spatial(single()?)?;
                Ok(vec![h, w, filters])
            }
            LayerSpec::MaxPool2d { pool } => {
                let (h, w, c) = spatial(single()?)?;
                Ok(vec![h.div_ceil(pool.0), w.div_ceil(pool.1), c])
            }
            LayerSpec::GlobalMaxPool => {
                let (_, _, c) = spatial(single()?)?;
                Ok(vec![c])
            }
            LayerSpec::SpatialDropout { .. } => {
                spatial(single()?)?;
                Ok(single()?.to_vec())
            }
            LayerSpec::Dense { units } => match single()? {
                [_] => Ok(vec![units]),
                s => Err(Error::Shape(format!("dense needs flat input, got {s:?}"))),
            },
            LayerSpec::Softmax => match single()? {
                [k] => Ok(vec![*k]),
                s => Err(Error::Shape(format!("softmax needs flat input, got {s:?}"))),
            },
            LayerSpec::Concat => {
                let first = inputs
                    .first()
                    .ok_or_else(|| Error::Shape("concat needs at least one input".into()))?;
                let lead = &first[..first.len() - 1];
                let mut channels = 0;
                for s in inputs {
                    if s.len() != first.len() || &s[..s.len() - 1] != lead {
                        return Err(Error::Shape(format!("concat inputs disagree: {inputs:?}")));
                    }
                    channels += s[s.len() - 1];
                }
                let mut out = lead.to_vec();
                out.push(channels);
                Ok(out)
            }
            LayerSpec::BatchNorm | LayerSpec::Relu | LayerSpec::Dropout { .. } => {
                Ok(single()?.to_vec())
            }
        }
    }

    /// Shapes of the trainable parameters for a given per-sample input shape.
    pub fn param_shapes(&self, input: &[usize]) -> Vec<Vec<usize>> {
        let c = input.last().copied().unwrap_or(0);
        match *self {
            LayerSpec::Conv2d { filters, kernel } => {
                vec![vec![kernel.0, kernel.1, c, filters], vec![filters]]
            }
            LayerSpec::BatchNorm => vec![vec![c], vec![c]],
            LayerSpec::Dense { units } => vec![vec![c, units], vec![units]],
            _ => Vec::new(),
        }
    }
}

pub fn same_padding(extent: usize) -> (usize, usize) {
    let total = extent - 1;
    (total / 2, total - total / 2)
}

fn pool_padding(input: usize, pool: usize) -> usize {
    let out = input.div_ceil(pool);
    ((out - 1) * pool + pool).saturating_sub(input) / 2
}

struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
}

impl ConvGeom {
    fn of<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>) -> Result<(usize, Self)> {
        let (n, h, w, cin) = x.dims4()?;
        let (kh, kw, kc, cout) = kernel.dims4()?;
        if kc != cin {
            return Err(Error::Shape(format!(
                "conv2d kernel expects {kc} input channels, input has {cin}"
            )));
        }
        Ok((n, Self { h, w, cin, kh, kw, cout }))
    }

    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn positions(&self) -> usize {
        self.h * self.w
    }

    /// Column span `(j0, j1)` of kernel taps that land inside the input for
    /// output column `ow`.
    fn valid_taps(&self, ow: usize) -> (usize, usize) {
        let (pl, _) = same_padding(self.kw);
        let j0 = pl.saturating_sub(ow);
        let j1 = (self.w + pl - ow).min(self.kw);
        (j0, j1)
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (pt, _) = same_padding(g.kh);
    let (pl, _) = same_padding(g.kw);
    let k = g.patch_len();
    let span = g.kw * g.cin;
    for oh in 0..g.h {
        for ow in 0..g.w {
            let row = &mut cols[(oh * g.w + ow) * k..][..k];
            let (j0, j1) = g.valid_taps(ow);
            for i in 0..g.kh {
                let dst = &mut row[i * span..(i + 1) * span];
                let ih = (oh + i) as isize - pt as isize;
                if ih < 0 || ih >= g.h as isize || j0 >= j1 {
                    dst.fill(T::zero());
                    continue;
                }
                dst[..j0 * g.cin].fill(T::zero());
                dst[j1 * g.cin..].fill(T::zero());
                let iw0 = ow + j0 - pl;
                let src = (ih as usize * g.w + iw0) * g.cin;
                dst[j0 * g.cin..j1 * g.cin].copy_from_slice(&x[src..src + (j1 - j0) * g.cin]);
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (pt, _) = same_padding(g.kh);
    let (pl, _) = same_padding(g.kw);
    let k = g.patch_len();
    let span = g.kw * g.cin;
    for oh in 0..g.h {
        for ow in 0..g.w {
            let row = &cols[(oh * g.w + ow) * k..][..k];
            let (j0, j1) = g.valid_taps(ow);
            if j0 >= j1 {
                continue;
            }
            for i in 0..g.kh {
                let ih = (oh + i) as isize - pt as isize;
                if ih < 0 || ih >= g.h as isize {
                    continue;
                }
                let iw0 = ow + j0 - pl;
                let dst = (ih as usize * g.w + iw0) * g.cin;
                let src = &row[i * span + j0 * g.cin..i * span + j1 * g.cin];
                for (d, &s) in dx[dst..dst + src.len()].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
    }
}

/// Patch-matrix budget (elements) for one batched GEMM.
const COLS_BUDGET: usize = 1 << 21;

fn samples_per_chunk(g: &ConvGeom, n: usize) -> usize {
    (COLS_BUDGET / (g.positions() * g.patch_len()).max(1)).clamp(1, n.max(1))
}

/// Stride-1 cross-correlation with "same" zero padding plus bias.
/// `kernel` is `kh × kw × Cin × Cout`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>, bias: &[T]) -> Result<Tensor<T>> {
    let (n, g) = ConvGeom::of(x, kernel)?;
    if bias.len() != g.cout {
        return Err(Error::Shape(format!("conv2d bias has {} entries, need {}", bias.len(), g.cout)));
    }
    let (p, k) = (g.positions(), g.patch_len());
    let mut out = Tensor::zeros(&[n, g.h, g.w, g.cout]);
    let (in_per, out_per) = (p * g.cin, p * g.cout);
    let chunk = samples_per_chunk(&g, n);
    let mut cols = vec![T::zero(); chunk * p * k];
    for s0 in (0..n).step_by(chunk) {
        let s1 = (s0 + chunk).min(n);
        for s in s0..s1 {
            im2col(&x.data()[s * in_per..(s + 1) * in_per], &g, &mut cols[(s - s0) * p * k..][..p * k]);
        }
        let y = &mut out.data_mut()[s0 * out_per..s1 * out_per];
        T::gemm((s1 - s0) * p, k, g.cout, &cols, false, kernel.data(), false, T::zero(), y);
    }
    for pos in out.data_mut().chunks_exact_mut(g.cout) {
        for (v, &b) in pos.iter_mut().zip(bias) {
            *v += b;
        }
    }
    Ok(out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernel: Tensor<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    dy: &Tensor<T>,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let (n, g) = ConvGeom::of(x, kernel)?;
    if dy.shape() != [n, g.h, g.w, g.cout] {
        return Err(Error::Shape(format!("conv2d upstream gradient shape {:?}", dy.shape())));
    }
    let (p, k) = (g.positions(), g.patch_len());
    let mut dk = Tensor::zeros(kernel.shape());
    let mut db = vec![T::zero(); g.cout];
    for pos in dy.data().chunks_exact(g.cout) {
        for (b, &v) in db.iter_mut().zip(pos) {
            *b += v;
        }
    }
    let mut dx = need_input_grad.then(|| Tensor::zeros(x.shape()));
    let (in_per, out_per) = (p * g.cin, p * g.cout);
    let chunk = samples_per_chunk(&g, n);
    let mut cols = vec![T::zero(); chunk * p * k];
    for s0 in (0..n).step_by(chunk) {
        let s1 = (s0 + chunk).min(n);
        let rows = (s1 - s0) * p;
        let dys = &dy.data()[s0 * out_per..s1 * out_per];
        for s in s0..s1 {
            im2col(&x.data()[s * in_per..(s + 1) * in_per], &g, &mut cols[(s - s0) * p * k..][..p * k]);
        }
        T::gemm(k, rows, g.cout, &cols, true, dys, false, T::one(), dk.data_mut());
        if let Some(dx) = dx.as_mut() {
            T::gemm(rows, g.cout, k, dys, false, kernel.data(), true, T::zero(), &mut cols[..rows * k]);
            for s in s0..s1 {
                col2im(&cols[(s - s0) * p * k..][..p * k], &g, &mut dx.data_mut()[s * in_per..(s + 1) * in_per]);
            }
        }
    }
    Ok(ConvGrads {
        input: dx,
        kernel: dk,
        bias: db,
    })
}

/// Normalized activations (empty unless kept for backward) and
/// per-channel inverse standard deviations.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub train: bool,
}

/// Rows folded into `f64` at a time when summing per channel.
const SUM_BLOCK: usize = 256;

/// Per-channel sums of `f(row, channel)`-transformed values, accumulated in
/// short `T` blocks folded into `f64`.
fn channel_sums<T: Scalar, const K: usize>(data: &[T], c: usize, f: impl Fn(&[T], &mut [[T; K]])) -> Vec<[f64; K]> {
    let mut total = vec![[0.0f64; K]; c];
    let mut local = vec![[T::zero(); K]; c];
    for block in data.chunks(SUM_BLOCK * c) {
        local.iter_mut().for_each(|l| *l = [T::zero(); K]);
        for row in block.chunks_exact(c) {
            f(row, &mut local);
        }
        for (t, l) in total.iter_mut().zip(&local) {
            for q in 0..K {
                t[q] += l[q].to_f64().unwrap();
            }
        }
    }
    total
}

/// Batch normalization over the last axis.
pub fn batchnorm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &mut [T],
    running_var: &mut [T],
    mode: Mode,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let mut y = x.clone();
    let cache = batchnorm_inplace(&mut y, gamma, beta, running_mean, running_var, mode, true)?;
    Ok((y, cache))
}

/// [`batchnorm`] overwriting its input; `keep` retains the normalized
/// activations for the backward pass.
pub fn batchnorm_inplace<T: Scalar>(
    x: &mut Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &mut [T],
    running_var: &mut [T],
    mode: Mode,
    keep: bool,
) -> Result<BnCache<T>> {
    let c = x.channels();
    if gamma.len() != c || beta.len() != c || running_mean.len() != c || running_var.len() != c {
        return Err(Error::Shape(format!("batchnorm parameters do not match {c} channels")));
    }
    let count = x.len() / c.max(1);
    let (mean, var): (Vec<f64>, Vec<f64>) = if mode.is_train() {
        if count == 0 {
            return Err(Error::Empty("batchnorm on an empty batch in train mode".into()));
        }
        // Shifting by the first row keeps the one-pass variance stable.
        let pilot: Vec<T> = x.data()[..c].to_vec();
        let sums = channel_sums::<T, 2>(x.data(), c, |row, acc| {
            for ((a, &v), &p) in acc.iter_mut().zip(row).zip(&pilot) {
                let d = v - p;
                a[0] += d;
                a[1] += d * d;
            }
        });
        let m = count as f64;
        let (mut mean, mut var) = (vec![0.0; c], vec![0.0; c]);
        for ch in 0..c {
            let shift = sums[ch][0] / m;
            mean[ch] = pilot[ch].to_f64().unwrap() + shift;
            var[ch] = (sums[ch][1] / m - shift * shift).max(0.0);
        }
        for ch in 0..c {
            running_mean[ch] = T::lit(
                BN_MOMENTUM * running_mean[ch].to_f64().unwrap() + (1.0 - BN_MOMENTUM) * mean[ch],
            );
            running_var[ch] = T::lit(
                BN_MOMENTUM * running_var[ch].to_f64().unwrap() + (1.0 - BN_MOMENTUM) * var[ch],
            );
        }
        (mean, var)
    } else {
        (
            running_mean.iter().map(|v| v.to_f64().unwrap()).collect(),
            running_var.iter().map(|v| v.to_f64().unwrap()).collect(),
        )
    };
    let mean_t: Vec<T> = mean.iter().map(|&m| T::lit(m)).collect();
    let inv_std: Vec<T> = var.iter().map(|&v| T::lit(1.0 / (v + BN_EPSILON).sqrt())).collect();
    let mut xhat = Vec::new();
    if keep {
        xhat.reserve_exact(x.len());
        for row in x.data_mut().chunks_exact_mut(c) {
            for ch in 0..c {
                let h = (row[ch] - mean_t[ch]) * inv_std[ch];
                xhat.push(h);
                row[ch] = gamma[ch] * h + beta[ch];
            }
        }
    } else {
        for row in x.data_mut().chunks_exact_mut(c) {
            for ch in 0..c {
                row[ch] = gamma[ch] * ((row[ch] - mean_t[ch]) * inv_std[ch]) + beta[ch];
            }
        }
    }
    Ok(BnCache {
        xhat,
        inv_std,
        train: mode.is_train(),
    })
}

pub struct BnGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub fn batchnorm_backward<T: Scalar>(dy: &Tensor<T>, gamma: &[T], cache: &BnCache<T>) -> BnGrads<T> {
    batchnorm_backward_inplace(dy.clone(), gamma, cache)
}

/// [`batchnorm_backward`] reusing the upstream buffer for the input gradient.
pub fn batchnorm_backward_inplace<T: Scalar>(mut dy: Tensor<T>, gamma: &[T], cache: &BnCache<T>) -> BnGrads<T> {
    let c = gamma.len();
    let count = dy.len() / c.max(1);
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for (block, xblock) in dy.data().chunks(SUM_BLOCK * c).zip(cache.xhat.chunks(SUM_BLOCK * c)) {
        let (mut lg, mut lb) = (vec![T::zero(); c], vec![T::zero(); c]);
        for (g, xh) in block.chunks_exact(c).zip(xblock.chunks_exact(c)) {
            for ch in 0..c {
                lb[ch] += g[ch];
                lg[ch] += g[ch] * xh[ch];
            }
        }
        for ch in 0..c {
            dbeta[ch] += lb[ch].to_f64().unwrap();
            dgamma[ch] += lg[ch].to_f64().unwrap();
        }
    }
    let dgamma: Vec<T> = dgamma.into_iter().map(T::lit).collect();
    let dbeta: Vec<T> = dbeta.into_iter().map(T::lit).collect();
    let scale: Vec<T> = (0..c).map(|ch| gamma[ch] * cache.inv_std[ch]).collect();
    if cache.train {
        let inv_m = T::lit(1.0 / count as f64);
        let mean_db: Vec<T> = dbeta.iter().map(|&b| b * inv_m).collect();
        let mean_dg: Vec<T> = dgamma.iter().map(|&g| g * inv_m).collect();
        for (g, xh) in dy.data_mut().chunks_exact_mut(c).zip(cache.xhat.chunks_exact(c)) {
            for ch in 0..c {
                g[ch] = scale[ch] * (g[ch] - mean_db[ch] - xh[ch] * mean_dg[ch]);
            }
        }
    } else {
        for g in dy.data_mut().chunks_exact_mut(c) {
            for ch in 0..c {
                g[ch] *= scale[ch];
            }
        }
    }
    BnGrads {
        input: dy,
        gamma: dgamma,
        beta: dbeta,
    }
}

/// Positions where a ReLU passed its input through.
pub type ReluMask = Vec<bool>;

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    relu_inplace(&mut y);
    y
}

pub fn relu_inplace<T: Scalar>(x: &mut Tensor<T>) -> ReluMask {
    x.data_mut()
        .iter_mut()
        .map(|v| {
            let on = *v > T::zero();
            if !on {
                *v = T::zero();
            }
            on
        })
        .collect()
}

/// Gradient through ReLU given its output; zero where the input was `<= 0`.
pub fn relu_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mask: ReluMask = y.data().iter().map(|&v| v > T::zero()).collect();
    relu_backward_inplace(dy.clone(), &mask)
}

pub fn relu_backward_inplace<T: Scalar>(mut dy: Tensor<T>, mask: &ReluMask) -> Tensor<T> {
    for (g, &on) in dy.data_mut().iter_mut().zip(mask) {
        if !on {
            *g = T::zero();
        }
    }
    dy
}

/// Multiplicative dropout mask; `None` means identity. Spatial masks hold
/// one entry per (sample, channel), element-wise masks one per element.
pub type DropMask<T> = Option<Vec<T>>;

/// Zeroes whole channels per sample with probability `rate`, survivors
/// scaled by `1 / (1 - rate)`.
pub fn spatial_dropout2d<T: Scalar>(
    x: &Tensor<T>,
    rate: f64,
    rng: &mut Rng,
    mode: Mode,
) -> Result<(Tensor<T>, DropMask<T>)> {
    let mut y = x.clone();
    let mask = spatial_dropout2d_inplace(&mut y, rate, rng, mode)?;
    Ok((y, mask))
}

pub fn spatial_dropout2d_inplace<T: Scalar>(x: &mut Tensor<T>, rate: f64, rng: &mut Rng, mode: Mode) -> Result<DropMask<T>> {
    let (n, _, _, c) = x.dims4()?;
    if !mode.dropout_active() || rate == 0.0 {
        return Ok(None);
    }
    let keep = T::lit(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..n * c)
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect();
    apply_channel_mask(x, &mask);
    Ok(Some(mask))
}

fn apply_channel_mask<T: Scalar>(x: &mut Tensor<T>, mask: &[T]) {
    let (n, h, w, c) = x.dims4().expect("spatial dropout operates on NHWC");
    let per = h * w * c;
    for s in 0..n {
        let m = &mask[s * c..(s + 1) * c];
        for pos in x.data_mut()[s * per..(s + 1) * per].chunks_exact_mut(c) {
            for (v, &k) in pos.iter_mut().zip(m) {
                *v *= k;
            }
        }
    }
}

pub fn spatial_dropout2d_backward<T: Scalar>(dy: &Tensor<T>, mask: &DropMask<T>) -> Tensor<T> {
    spatial_dropout2d_backward_inplace(dy.clone(), mask)
}

pub fn spatial_dropout2d_backward_inplace<T: Scalar>(mut dy: Tensor<T>, mask: &DropMask<T>) -> Tensor<T> {
    if let Some(mask) = mask {
        apply_channel_mask(&mut dy, mask);
    }
    dy
}

/// Element-wise dropout for flat feature vectors.
pub fn dropout<T: Scalar>(x: &Tensor<T>, rate: f64, rng: &mut Rng, mode: Mode) -> (Tensor<T>, DropMask<T>) {
    let mut y = x.clone();
    let mask = dropout_inplace(&mut y, rate, rng, mode);
    (y, mask)
}

pub fn dropout_inplace<T: Scalar>(x: &mut Tensor<T>, rate: f64, rng: &mut Rng, mode: Mode) -> DropMask<T> {
    if !mode.dropout_active() || rate == 0.0 {
        return None;
    }
    let keep = T::lit(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..x.len())
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect();
    for (v, &k) in x.data_mut().iter_mut().zip(&mask) {
        *v *= k;
    }
    Some(mask)
}

pub fn dropout_backward<T: Scalar>(dy: &Tensor<T>, mask: &DropMask<T>) -> Tensor<T> {
    dropout_backward_inplace(dy.clone(), mask)
}

pub fn dropout_backward_inplace<T: Scalar>(mut dy: Tensor<T>, mask: &DropMask<T>) -> Tensor<T> {
    if let Some(mask) = mask {
        for (v, &k) in dy.data_mut().iter_mut().zip(mask) {
            *v *= k;
        }
    }
    dy
}

/// Flat input index chosen by each pooled output.
pub type Argmax = Vec<u32>;

/// Max pooling with stride equal to the window and "same" output size
/// `ceil(H / ph) × ceil(W / pw)`.
pub fn maxpool2d<T: Scalar>(x: &Tensor<T>, pool: (usize, usize)) -> Result<(Tensor<T>, Argmax)> {
    let (n, h, w, c) = x.dims4()?;
    let (ph, pw) = pool;
    let (oh, ow) = (h.div_ceil(ph), w.div_ceil(pw));
    let (pt, pl) = (pool_padding(h, ph), pool_padding(w, pw));
    let mut y = Tensor::zeros(&[n, oh, ow, c]);
    let mut arg = vec![0u32; n * oh * ow * c];
    let xd = x.data();
    let mut best = vec![T::neg_infinity(); c];
    let mut best_at = vec![0u32; c];
    for s in 0..n {
        for i in 0..oh {
            let r0 = (i * ph).saturating_sub(pt);
            let r1 = ((i + 1) * ph).saturating_sub(pt).min(h);
            for j in 0..ow {
                let c0 = (j * pw).saturating_sub(pl);
                let c1 = ((j + 1) * pw).saturating_sub(pl).min(w);
                best.fill(T::neg_infinity());
                best_at.fill(u32::MAX);
                for r in r0..r1 {
                    for q in c0..c1 {
                        let base = ((s * h + r) * w + q) * c;
                        for ch in 0..c {
                            let v = xd[base + ch];
                            if v > best[ch] || best_at[ch] == u32::MAX {
                                best[ch] = v;
                                best_at[ch] = (base + ch) as u32;
                            }
                        }
                    }
                }
                let o = ((s * oh + i) * ow + j) * c;
                y.data_mut()[o..o + c].copy_from_slice(&best);
                arg[o..o + c].copy_from_slice(&best_at);
            }
        }
    }
    Ok((y, arg))
}

/// Routes each pooled gradient to the input element that won the max.
pub fn max_backward<T: Scalar>(dy: &Tensor<T>, argmax: &Argmax, input_shape: &[usize]) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&g, &i) in dy.data().iter().zip(argmax) {
        d[i as usize] += g;
    }
    dx
}

/// Maximum over all spatial positions, `N×H×W×C → N×C`.
pub fn global_max_pool<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Argmax)> {
    let (n, h, w, c) = x.dims4()?;
    let mut y = Tensor::full(&[n, c], T::neg_infinity());
    let mut arg = vec![u32::MAX; n * c];
    let xd = x.data();
    for s in 0..n {
        let out = &mut y.data_mut()[s * c..(s + 1) * c];
        let at = &mut arg[s * c..(s + 1) * c];
        for p in 0..h * w {
            let base = (s * h * w + p) * c;
            for ch in 0..c {
                let v = xd[base + ch];
                if v > out[ch] || at[ch] == u32::MAX {
                    out[ch] = v;
                    at[ch] = (base + ch) as u32;
                }
            }
        }
    }
    Ok((y, arg))
}

/// `x · W + b` with `x: N×F`, `W: F×U`.
pub fn dense<T: Scalar>(x: &Tensor<T>, weights: &Tensor<T>, bias: &[T]) -> Result<Tensor<T>> {
    let (n, f) = x.dims2()?;
    let (wf, u) = weights.dims2()?;
    if wf != f || bias.len() != u {
        return Err(Error::Shape(format!(
            "dense: input has {f} features, weights {:?}, bias {}",
            weights.shape(),
            bias.len()
        )));
    }
    let mut y = Tensor::zeros(&[n, u]);
    T::gemm(n, f, u, x.data(), false, weights.data(), false, T::zero(), y.data_mut());
    for row in y.data_mut().chunks_exact_mut(u) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
    Ok(y)
}

pub struct DenseGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
}

pub fn dense_backward<T: Scalar>(x: &Tensor<T>, weights: &Tensor<T>, dy: &Tensor<T>) -> Result<DenseGrads<T>> {
    let (n, f) = x.dims2()?;
    let (_, u) = weights.dims2()?;
    if dy.shape() != [n, u] {
        return Err(Error::Shape(format!("dense upstream gradient shape {:?}", dy.shape())));
    }
    let mut dw = Tensor::zeros(weights.shape());
    T::gemm(f, n, u, x.data(), true, dy.data(), false, T::zero(), dw.data_mut());
    let mut db = vec![T::zero(); u];
    for row in dy.data().chunks_exact(u) {
        for (b, &g) in db.iter_mut().zip(row) {
            *b += g;
        }
    }
    let mut dx = Tensor::zeros(x.shape());
    T::gemm(n, u, f, dy.data(), false, weights.data(), true, T::zero(), dx.data_mut());
    Ok(DenseGrads {
        input: dx,
        weights: dw,
        bias: db,
    })
}

/// Row-wise softmax with max subtraction.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, k) = logits.dims2()?;
    let mut out = logits.clone();
    for row in out.data_mut().chunks_exact_mut(k) {
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Vector-Jacobian product of softmax given its output `p`.
pub fn softmax_backward<T: Scalar>(p: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let k = p.channels();
    let mut dx = dy.clone();
    for (row, pr) in dx.data_mut().chunks_exact_mut(k).zip(p.data().chunks_exact(k)) {
        let dot: T = row.iter().zip(pr).map(|(&g, &q)| g * q).sum();
        for (g, &q) in row.iter_mut().zip(pr) {
            *g = q * (*g - dot);
        }
    }
    dx
}

/// Concatenates along the last axis, preserving input order.
pub fn concat_channels<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::Shape("concat needs at least one input".into()))?;
    let lead = &first.shape()[..first.shape().len() - 1];
    let positions: usize = lead.iter().product();
    let mut total = 0;
    for t in inputs {
        let s = t.shape();
        if &s[..s.len() - 1] != lead {
            return Err(Error::Shape(format!(
                "concat inputs disagree: {:?} vs {:?}",
                first.shape(),
                s
            )));
        }
        total += t.channels();
    }
    let mut data = Vec::with_capacity(positions * total);
    for p in 0..positions {
        for t in inputs {
            let c = t.channels();
            data.extend_from_slice(&t.data()[p * c..(p + 1) * c]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Tensor::from_vec(&shape, data)
}

/// Splits a concatenated gradient back into per-input blocks.
pub fn split_channels<T: Scalar>(dy: &Tensor<T>, channels: &[usize]) -> Vec<Tensor<T>> {
    let total = dy.channels();
    let lead = &dy.shape()[..dy.shape().len() - 1];
    let positions: usize = lead.iter().product();
    let mut outs: Vec<Vec<T>> = channels.iter().map(|&c| Vec::with_capacity(positions * c)).collect();
    for p in 0..positions {
        let row = &dy.data()[p * total..(p + 1) * total];
        let mut off = 0;
        for (o, &c) in outs.iter_mut().zip(channels) {
            o.extend_from_slice(&row[off..off + c]);
            off += c;
        }
    }
    outs.into_iter()
        .zip(channels)
        .map(|(d, &c)| {
            let mut shape = lead.to_vec();
            shape.push(c);
            Tensor::from_vec(&shape, d).expect("split shape")
        })
        .collect()
}
