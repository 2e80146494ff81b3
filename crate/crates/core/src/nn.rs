//! Minimal dense building blocks with hand-written reverse passes.
//!
//! All parameters live in one flat `f64` vector; layers only hold offsets
//! into it. Activations are row-major `rows x width` matrices.

use rand::Rng;
use serde::{Deserialize, Serialize};

const LN_EPS: f64 = 1e-5;
const ACT_SLOPE: f64 = 1.702;

/// `c = beta * c + op(a) * op(b)`, with `op(a)` of shape `m x k` and
/// `op(b)` of shape `k x n`. Transposed operands are read through strides.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], trans_a: bool, b: &[f64], trans_b: bool, beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Smooth GELU-like activation `x * sigmoid(1.702 x)`.
#[inline]
pub fn act(x: f64) -> f64 {
    x * sigmoid(ACT_SLOPE * x)
}

#[inline]
pub fn act_grad(x: f64) -> f64 {
    let s = sigmoid(ACT_SLOPE * x);
    s + ACT_SLOPE * x * s * (1.0 - s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentKind {
    Weight { fan_in: usize },
    Bias,
    Gain,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub kind: SegmentKind,
}

/// Deterministic table of named parameter segments.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParamLayout {
    segments: Vec<Segment>,
    total: usize,
}

impl ParamLayout {
    fn alloc(&mut self, name: String, len: usize, kind: SegmentKind) -> usize {
        let offset = self.total;
        self.segments.push(Segment { name, offset, len, kind });
        self.total += len;
        offset
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Fan-in scaled uniform weights, unit gains, zero biases.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut params = vec![0.0; self.total];
        for seg in &self.segments {
            let slot = &mut params[seg.offset..seg.offset + seg.len];
            match seg.kind {
                SegmentKind::Weight { fan_in } => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    slot.iter_mut().for_each(|w| *w = rng.random_range(-bound..bound));
                }
                SegmentKind::Bias => {}
                SegmentKind::Gain => slot.fill(1.0),
            }
        }
        params
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    w: usize,
    b: usize,
}

impl Linear {
    pub fn new(layout: &mut ParamLayout, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = layout.alloc(format!("{name}.weight"), in_dim * out_dim, SegmentKind::Weight { fan_in: in_dim });
        let b = layout.alloc(format!("{name}.bias"), out_dim, SegmentKind::Bias);
        Self { in_dim, out_dim, w, b }
    }

    pub fn weight_offset(&self) -> usize {
        self.w
    }

    pub fn bias_offset(&self) -> usize {
        self.b
    }

    pub fn weight<'p>(&self, params: &'p [f64]) -> &'p [f64] {
        &params[self.w..self.w + self.in_dim * self.out_dim]
    }

    pub fn bias<'p>(&self, params: &'p [f64]) -> &'p [f64] {
        &params[self.b..self.b + self.out_dim]
    }

    /// Writes `x W + b` into `out` (`rows x out_dim`).
    pub fn forward_into(&self, params: &[f64], x: &[f64], rows: usize, out: &mut Vec<f64>) {
        out.clear();
        let bias = self.bias(params);
        for _ in 0..rows {
            out.extend_from_slice(bias);
        }
        gemm(rows, self.in_dim, self.out_dim, x, false, self.weight(params), false, 1.0, out);
    }

    pub fn forward(&self, params: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(rows * self.out_dim);
        self.forward_into(params, x, rows, &mut out);
        out
    }

    /// Accumulates parameter gradients and returns the input cotangent.
    pub fn backward(&self, params: &[f64], x: &[f64], dy: &[f64], rows: usize, grads: &mut [f64]) -> Vec<f64> {
        self.accumulate_param_grads(x, dy, rows, grads);
        let mut dx = vec![0.0; rows * self.in_dim];
        gemm(rows, self.out_dim, self.in_dim, dy, false, self.weight(params), true, 0.0, &mut dx);
        dx
    }

    pub fn accumulate_param_grads(&self, x: &[f64], dy: &[f64], rows: usize, grads: &mut [f64]) {
        let dw = &mut grads[self.w..self.w + self.in_dim * self.out_dim];
        gemm(self.in_dim, rows, self.out_dim, x, true, dy, false, 1.0, dw);
        let db = &mut grads[self.b..self.b + self.out_dim];
        for row in dy.chunks_exact(self.out_dim) {
            db.iter_mut().zip(row).for_each(|(g, d)| *g += d);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub dim: usize,
    g: usize,
    b: usize,
}

/// Saved normalized activations and per-row inverse deviations.
#[derive(Debug, Clone, Default)]
pub struct NormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(layout: &mut ParamLayout, name: &str, dim: usize) -> Self {
        let g = layout.alloc(format!("{name}.gain"), dim, SegmentKind::Gain);
        let b = layout.alloc(format!("{name}.bias"), dim, SegmentKind::Bias);
        Self { dim, g, b }
    }

    fn normalize_row(x: &[f64], xhat: &mut [f64]) -> f64 {
        let d = x.len() as f64;
        let mean = x.iter().sum::<f64>() / d;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        xhat.iter_mut().zip(x).for_each(|(o, v)| *o = (v - mean) * inv);
        inv
    }

    /// Normalizes then applies gain/bias in place, without a cache.
    pub fn apply_inplace(&self, params: &[f64], x: &mut [f64]) {
        let gain = &params[self.g..self.g + self.dim];
        let bias = &params[self.b..self.b + self.dim];
        let mut tmp = vec![0.0; self.dim];
        for row in x.chunks_exact_mut(self.dim) {
            Self::normalize_row(row, &mut tmp);
            for i in 0..self.dim {
                row[i] = gain[i] * tmp[i] + bias[i];
            }
        }
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> (Vec<f64>, NormCache) {
        let gain = &params[self.g..self.g + self.dim];
        let bias = &params[self.b..self.b + self.dim];
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = Vec::with_capacity(x.len() / self.dim);
        for (row, hat) in x.chunks_exact(self.dim).zip(xhat.chunks_exact_mut(self.dim)) {
            inv_std.push(Self::normalize_row(row, hat));
        }
        let y = xhat
            .chunks_exact(self.dim)
            .flat_map(|hat| hat.iter().zip(gain).zip(bias).map(|((h, g), b)| g * h + b))
            .collect();
        (y, NormCache { xhat, inv_std })
    }

    pub fn backward(&self, params: &[f64], cache: &NormCache, dy: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let d = self.dim;
        let gain = &params[self.g..self.g + d];
        let mut dx = vec![0.0; dy.len()];
        let mut dhat = vec![0.0; d];
        for ((dyr, hat), (dxr, inv)) in dy
            .chunks_exact(d)
            .zip(cache.xhat.chunks_exact(d))
            .zip(dx.chunks_exact_mut(d).zip(&cache.inv_std))
        {
            for i in 0..d {
                grads[self.g + i] += dyr[i] * hat[i];
                grads[self.b + i] += dyr[i];
                dhat[i] = dyr[i] * gain[i];
            }
            let sum: f64 = dhat.iter().sum();
            let dot: f64 = dhat.iter().zip(hat).map(|(a, b)| a * b).sum();
            let df = d as f64;
            for i in 0..d {
                dxr[i] = inv / df * (df * dhat[i] - sum - hat[i] * dot);
            }
        }
        dx
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ResBlock {
    norm: LayerNorm,
    linear: Linear,
}

/// `input -> depth x [h + Linear(act(LayerNorm(h)))] -> Linear(act(LayerNorm(h)))`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResidualMlp {
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
    input: Linear,
    blocks: Vec<ResBlock>,
    norm: LayerNorm,
    output: Linear,
}

#[derive(Debug, Clone, Default)]
struct BlockCache {
    norm: NormCache,
    pre_act: Vec<f64>,
    post_act: Vec<f64>,
}

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone, Default)]
pub struct MlpCache {
    rows: usize,
    input: Vec<f64>,
    blocks: Vec<BlockCache>,
    head: BlockCache,
}

/// Reusable buffers for the cache-free inference path.
#[derive(Debug, Clone, Default)]
pub struct MlpScratch {
    h: Vec<f64>,
    u: Vec<f64>,
    v: Vec<f64>,
}

impl ResidualMlp {
    pub fn new(layout: &mut ParamLayout, name: &str, in_dim: usize, hidden: usize, out_dim: usize, depth: usize) -> Self {
        let input = Linear::new(layout, &format!("{name}.in"), in_dim, hidden);
        let blocks = (0..depth)
            .map(|i| ResBlock {
                norm: LayerNorm::new(layout, &format!("{name}.block{i}.norm"), hidden),
                linear: Linear::new(layout, &format!("{name}.block{i}.linear"), hidden, hidden),
            })
            .collect();
        let norm = LayerNorm::new(layout, &format!("{name}.head.norm"), hidden);
        let output = Linear::new(layout, &format!("{name}.head.linear"), hidden, out_dim);
        Self { in_dim, hidden, out_dim, input, blocks, norm, output }
    }

    /// The input projection, exposed so callers can split it by column blocks.
    pub fn input_layer(&self) -> &Linear {
        &self.input
    }

    fn head_forward(norm: &LayerNorm, params: &[f64], h: &[f64]) -> BlockCache {
        let (pre_act, norm_cache) = norm.forward(params, h);
        let post_act = pre_act.iter().map(|&v| act(v)).collect();
        BlockCache { norm: norm_cache, pre_act, post_act }
    }

    pub fn forward(&self, params: &[f64], x: &[f64], rows: usize) -> (Vec<f64>, MlpCache) {
        let h0 = self.input.forward(params, x, rows);
        self.forward_from_hidden(params, x.to_vec(), h0, rows)
    }

    /// Continues a forward pass from a precomputed input projection `h0`.
    pub fn forward_from_hidden(&self, params: &[f64], input: Vec<f64>, h0: Vec<f64>, rows: usize) -> (Vec<f64>, MlpCache) {
        let mut h = h0;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let bc = Self::head_forward(&blk.norm, params, &h);
            let delta = blk.linear.forward(params, &bc.post_act, rows);
            h.iter_mut().zip(&delta).for_each(|(a, d)| *a += d);
            blocks.push(bc);
        }
        let head = Self::head_forward(&self.norm, params, &h);
        let y = self.output.forward(params, &head.post_act, rows);
        (y, MlpCache { rows, input, blocks, head })
    }

    /// Reverse pass. Returns the cotangent of the input projection output
    /// `h0` together with that of the raw input.
    pub fn backward(&self, params: &[f64], cache: &MlpCache, dy: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let dh0 = self.backward_to_hidden(params, cache, dy, grads);
        self.input.backward(params, &cache.input, &dh0, cache.rows, grads)
    }

    /// Reverse pass down to the input projection output, without touching
    /// the input layer's parameters.
    pub fn backward_to_hidden(&self, params: &[f64], cache: &MlpCache, dy: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let rows = cache.rows;
        let mut da = self.output.backward(params, &cache.head.post_act, dy, rows, grads);
        da.iter_mut().zip(&cache.head.pre_act).for_each(|(g, u)| *g *= act_grad(*u));
        let mut dh = self.norm.backward(params, &cache.head.norm, &da, grads);
        for (blk, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            let mut da = blk.linear.backward(params, &bc.post_act, &dh, rows, grads);
            da.iter_mut().zip(&bc.pre_act).for_each(|(g, u)| *g *= act_grad(*u));
            let dres = blk.norm.backward(params, &bc.norm, &da, grads);
            dh.iter_mut().zip(&dres).for_each(|(a, b)| *a += b);
        }
        dh
    }

    /// Accumulates the input layer's parameter gradients from `dh0`.
    pub fn input_param_grads(&self, cache: &MlpCache, dh0: &[f64], grads: &mut [f64]) {
        self.input.accumulate_param_grads(&cache.input, dh0, cache.rows, grads);
    }

    /// Inference from a precomputed input projection; `h0` is consumed as
    /// the working buffer. Returns the output rows.
    pub fn infer_from_hidden(&self, params: &[f64], h0: Vec<f64>, rows: usize, scratch: &mut MlpScratch) -> Vec<f64> {
        scratch.h = h0;
        for blk in &self.blocks {
            scratch.u.clear();
            scratch.u.extend_from_slice(&scratch.h);
            blk.norm.apply_inplace(params, &mut scratch.u);
            scratch.u.iter_mut().for_each(|v| *v = act(*v));
            blk.linear.forward_into(params, &scratch.u, rows, &mut scratch.v);
            scratch.h.iter_mut().zip(&scratch.v).for_each(|(h, v)| *h += v);
        }
        scratch.u.clear();
        scratch.u.extend_from_slice(&scratch.h);
        self.norm.apply_inplace(params, &mut scratch.u);
        scratch.u.iter_mut().for_each(|v| *v = act(*v));
        self.output.forward(params, &scratch.u, rows)
    }

    pub fn infer(&self, params: &[f64], x: &[f64], rows: usize, scratch: &mut MlpScratch) -> Vec<f64> {
        let h0 = self.input.forward(params, x, rows);
        self.infer_from_hidden(params, h0, rows, scratch)
    }
}
