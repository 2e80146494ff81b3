//! Conditional noise-prediction network `eps(theta, t, X)`.
//!
//! Three residual MLPs: one embeds `theta`, one embeds each observation of
//! the conditioning set (embeddings are mean pooled), and a trunk maps
//! `[theta_emb, X_emb, time_emb, onehot(|X|)]` to a noise estimate. The
//! score is `-eps / sqrt(1 - gamma_t)`.
//!
//! Pooling sums embeddings in a canonical order of the raw observation
//! rows, so the output is bit-identical under any permutation of the set.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{gemm, MlpCache, MlpScratch, ParamLayout, ResidualMlp};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub theta_dim: usize,
    pub x_dim: usize,
    /// Largest conditioning set the network accepts (1 for the fully factorized case).
    pub m_max: usize,
    pub hidden_dim: usize,
    pub emb_dim: usize,
    /// Residual blocks per MLP.
    pub depth: usize,
    pub time_emb_dim: usize,
}

impl NetworkConfig {
    pub fn new(theta_dim: usize, x_dim: usize, m_max: usize) -> Self {
        Self { theta_dim, x_dim, m_max, hidden_dim: 128, emb_dim: 64, depth: 3, time_emb_dim: 64 }
    }

    pub fn with_widths(mut self, hidden_dim: usize, emb_dim: usize, time_emb_dim: usize) -> Self {
        self.hidden_dim = hidden_dim;
        self.emb_dim = emb_dim;
        self.time_emb_dim = time_emb_dim;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.theta_dim, self.x_dim, self.m_max, self.hidden_dim, self.emb_dim, self.depth, self.time_emb_dim];
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("network dimensions must be positive: {self:?}")));
        }
        if !self.time_emb_dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("time_emb_dim must be even, got {}", self.time_emb_dim)));
        }
        Ok(())
    }

    fn context_dim(&self) -> usize {
        self.emb_dim + self.time_emb_dim + self.m_max
    }
}

/// Per-coordinate affine standardization `(x - shift) / scale` applied to
/// observations before encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsScaling {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl ObsScaling {
    pub fn identity(x_dim: usize) -> Self {
        Self { shift: vec![0.0; x_dim], scale: vec![1.0; x_dim] }
    }

    /// Mean and standard deviation of the given rows; constant coordinates
    /// keep unit scale.
    pub fn fit<'a>(rows: impl Iterator<Item = &'a [f64]>, x_dim: usize) -> Self {
        let mut n = 0usize;
        let mut mean = vec![0.0; x_dim];
        let mut m2 = vec![0.0; x_dim];
        for row in rows {
            n += 1;
            for i in 0..x_dim {
                let d = row[i] - mean[i];
                mean[i] += d / n as f64;
                m2[i] += d * (row[i] - mean[i]);
            }
        }
        if n < 2 {
            return Self::identity(x_dim);
        }
        let scale = m2
            .iter()
            .map(|v| {
                let sd = (v / (n - 1) as f64).sqrt();
                if sd > 1e-12 && sd.is_finite() {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { shift: mean, scale }
    }

    fn apply(&self, row: &[f64], out: &mut Vec<f64>) {
        out.extend(row.iter().zip(&self.shift).zip(&self.scale).map(|((x, s), c)| (x - s) / c));
    }
}

/// A conditioning set of one or more observations.
#[derive(Debug, Clone, PartialEq)]
pub struct SetInput {
    x_dim: usize,
    data: Vec<f64>,
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
}

impl SetInput {
    pub fn new(observations: &[Vec<f64>]) -> Result<Self> {
        let first = observations.first().ok_or_else(|| Error::InvalidArgument("empty observation set".into()))?;
        let x_dim = first.len();
        let mut data = Vec::with_capacity(x_dim * observations.len());
        for x in observations {
            if x.len() != x_dim {
                return Err(Error::DimensionMismatch { expected: x_dim, found: x.len() });
            }
            data.extend_from_slice(x);
        }
        Self::from_flat(x_dim, data)
    }

    pub fn from_flat(x_dim: usize, data: Vec<f64>) -> Result<Self> {
        if x_dim == 0 || data.is_empty() || !data.len().is_multiple_of(x_dim) {
            return Err(Error::InvalidArgument(format!("{} values do not form rows of width {x_dim}", data.len())));
        }
        Ok(Self { x_dim, data })
    }

    pub fn single(x: &[f64]) -> Self {
        Self { x_dim: x.len(), data: x.to_vec() }
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.x_dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn x_dim(&self) -> usize {
        self.x_dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.x_dim..(i + 1) * self.x_dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.x_dim)
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    /// Row indices sorted lexicographically by value.
    pub fn canonical_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| lexicographic(self.row(a), self.row(b)));
        idx
    }

    /// Lexicographic comparison of canonically ordered contents.
    pub fn canonical_cmp(&self, other: &Self) -> Ordering {
        let (a, b) = (self.canonical_order(), other.canonical_order());
        a.iter()
            .zip(&b)
            .map(|(&i, &j)| lexicographic(self.row(i), other.row(j)))
            .find(|o| o.is_ne())
            .unwrap_or_else(|| a.len().cmp(&b.len()))
    }
}

/// Sinusoidal level embedding: entry `2i` is `sin(t / 10000^(2i/dim))`,
/// entry `2i+1` the matching cosine.
pub fn time_embedding(t: usize, steps: usize, dim: usize) -> Result<Vec<f64>> {
    if !dim.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("time embedding dimension must be even, got {dim}")));
    }
    if t > steps {
        return Err(Error::IndexOutOfRange { t, steps });
    }
    Ok(time_embedding_unchecked(t, dim))
}

fn time_embedding_unchecked(t: usize, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let freq = 10000f64.powf(2.0 * i as f64 / dim as f64);
        let arg = t as f64 / freq;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Architecture {
    theta_enc: ResidualMlp,
    x_enc: ResidualMlp,
    trunk: ResidualMlp,
    layout: ParamLayout,
}

impl Architecture {
    fn new(cfg: &NetworkConfig) -> Self {
        let mut layout = ParamLayout::default();
        let (h, e) = (cfg.hidden_dim, cfg.emb_dim);
        let theta_enc = ResidualMlp::new(&mut layout, "theta_encoder", cfg.theta_dim, h, e, cfg.depth);
        let x_enc = ResidualMlp::new(&mut layout, "obs_encoder", cfg.x_dim, h, e, cfg.depth);
        let trunk = ResidualMlp::new(&mut layout, "trunk", e + cfg.context_dim(), h, cfg.theta_dim, cfg.depth);
        Self { theta_enc, x_enc, trunk, layout }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreNetwork {
    config: NetworkConfig,
    arch: Architecture,
    params: Vec<f64>,
    scaling: ObsScaling,
}

/// Pooled embedding of one conditioning set, reusable across `theta` and `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SetEncoding {
    n: usize,
    pooled: Vec<f64>,
}

impl SetEncoding {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
}

/// A batch of noised parameters with their levels and conditioning sets.
#[derive(Debug, Clone)]
pub struct NoisedBatch<'a> {
    /// Row-major `rows x theta_dim`.
    pub theta: Vec<f64>,
    pub levels: Vec<usize>,
    pub sets: Vec<&'a SetInput>,
}

impl NoisedBatch<'_> {
    pub fn rows(&self) -> usize {
        self.levels.len()
    }
}

/// Saved state of a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    rows: usize,
    theta_emb: Vec<f64>,
    theta_cache: MlpCache,
    obs_cache: MlpCache,
    /// Start offset of each example's observation rows in canonical order.
    seg_start: Vec<usize>,
    seg_len: Vec<usize>,
    context: Vec<f64>,
    trunk_cache: MlpCache,
}

impl ScoreNetwork {
    pub fn init<R: Rng + ?Sized>(config: NetworkConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let arch = Architecture::new(&config);
        let params = arch.layout.init(rng);
        Ok(Self { config, arch, params, scaling: ObsScaling::identity(config.x_dim) })
    }

    pub fn from_parts(config: NetworkConfig, params: Vec<f64>, scaling: ObsScaling) -> Result<Self> {
        config.validate()?;
        let arch = Architecture::new(&config);
        if params.len() != arch.layout.total() {
            return Err(Error::DimensionMismatch { expected: arch.layout.total(), found: params.len() });
        }
        if scaling.shift.len() != config.x_dim || scaling.scale.len() != config.x_dim {
            return Err(Error::DimensionMismatch { expected: config.x_dim, found: scaling.shift.len() });
        }
        Ok(Self { config, arch, params, scaling })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.arch.layout
    }

    pub fn scaling(&self) -> &ObsScaling {
        &self.scaling
    }

    pub fn set_scaling(&mut self, scaling: ObsScaling) -> Result<()> {
        if scaling.shift.len() != self.config.x_dim || scaling.scale.len() != self.config.x_dim {
            return Err(Error::DimensionMismatch { expected: self.config.x_dim, found: scaling.shift.len() });
        }
        self.scaling = scaling;
        Ok(())
    }

    fn check_set(&self, set: &SetInput) -> Result<()> {
        if set.x_dim() != self.config.x_dim {
            return Err(Error::DimensionMismatch { expected: self.config.x_dim, found: set.x_dim() });
        }
        if set.len() > self.config.m_max {
            return Err(Error::CardinalityOverflow { n: set.len(), m_max: self.config.m_max });
        }
        Ok(())
    }

    fn check_inputs(&self, theta: &[f64], t: usize, set: &SetInput, sch: &NoiseSchedule) -> Result<()> {
        if theta.len() != self.config.theta_dim {
            return Err(Error::DimensionMismatch { expected: self.config.theta_dim, found: theta.len() });
        }
        sch.check_level(t)?;
        self.check_set(set)
    }

    /// Writes `[pooled, time_emb(t), onehot(n)]` for one example.
    fn push_context(&self, pooled: &[f64], t: usize, n: usize, out: &mut Vec<f64>) {
        out.extend_from_slice(pooled);
        out.extend(time_embedding_unchecked(t, self.config.time_emb_dim));
        out.extend((1..=self.config.m_max).map(|k| if k == n { 1.0 } else { 0.0 }));
    }

    /// `bias + context * W_ctx` for each context row.
    fn trunk_context_projection(&self, context: &[f64], rows: usize) -> Vec<f64> {
        let input = self.arch.trunk.input_layer();
        let e = self.config.emb_dim;
        let h = self.config.hidden_dim;
        let w = input.weight(&self.params);
        let mut out = Vec::with_capacity(rows * h);
        for _ in 0..rows {
            out.extend_from_slice(input.bias(&self.params));
        }
        gemm(rows, self.config.context_dim(), h, context, false, &w[e * h..], false, 1.0, &mut out);
        out
    }

    fn add_theta_projection(&self, theta_emb: &[f64], rows: usize, h0: &mut [f64]) {
        let input = self.arch.trunk.input_layer();
        let (e, h) = (self.config.emb_dim, self.config.hidden_dim);
        gemm(rows, e, h, theta_emb, false, &input.weight(&self.params)[..e * h], false, 1.0, h0);
    }

    /// Encodes one conditioning set; the result is independent of row order.
    pub fn encode_set(&self, set: &SetInput) -> Result<SetEncoding> {
        self.check_set(set)?;
        let mut rows = Vec::with_capacity(set.flat().len());
        for i in set.canonical_order() {
            self.scaling.apply(set.row(i), &mut rows);
        }
        let emb = self.arch.x_enc.infer(&self.params, &rows, set.len(), &mut MlpScratch::default());
        Ok(SetEncoding { n: set.len(), pooled: mean_rows(&emb, self.config.emb_dim) })
    }

    /// Embeds a batch of `theta` rows.
    pub fn embed_theta(&self, theta: &[f64], rows: usize, scratch: &mut MlpScratch) -> Vec<f64> {
        self.arch.theta_enc.infer(&self.params, theta, rows, scratch)
    }

    /// Noise predictions for `rows` parameter embeddings sharing one set and level.
    pub fn eps_from_embedding(
        &self,
        theta_emb: &[f64],
        rows: usize,
        t: usize,
        set: &SetEncoding,
        scratch: &mut MlpScratch,
    ) -> Vec<f64> {
        let mut ctx = Vec::with_capacity(self.config.context_dim());
        self.push_context(&set.pooled, t, set.n, &mut ctx);
        let proj = self.trunk_context_projection(&ctx, 1);
        let mut h0 = Vec::with_capacity(rows * proj.len());
        for _ in 0..rows {
            h0.extend_from_slice(&proj);
        }
        self.add_theta_projection(theta_emb, rows, &mut h0);
        self.arch.trunk.infer_from_hidden(&self.params, h0, rows, scratch)
    }

    /// Sum over conditioning sets of the score at `rows` parameter rows, all
    /// at level `t`. The parameter embedding and its trunk projection are
    /// shared across sets; sets are summed in the given order.
    pub fn score_sum(
        &self,
        theta: &[f64],
        rows: usize,
        t: usize,
        sets: &[SetEncoding],
        sch: &NoiseSchedule,
        scratch: &mut MlpScratch,
    ) -> Result<Vec<f64>> {
        let d = self.config.theta_dim;
        if theta.len() != rows * d {
            return Err(Error::DimensionMismatch { expected: rows * d, found: theta.len() });
        }
        sch.check_level(t)?;
        let theta_emb = self.embed_theta(theta, rows, scratch);
        let h = self.config.hidden_dim;
        let mut base = vec![0.0; rows * h];
        self.add_theta_projection(&theta_emb, rows, &mut base);
        let mut ctx = Vec::with_capacity(self.config.context_dim());
        let mut total = vec![0.0; rows * d];
        for set in sets {
            ctx.clear();
            self.push_context(&set.pooled, t, set.n, &mut ctx);
            let proj = self.trunk_context_projection(&ctx, 1);
            let mut h0 = base.clone();
            for row in h0.chunks_exact_mut(h) {
                row.iter_mut().zip(&proj).for_each(|(a, p)| *a += p);
            }
            let eps = self.arch.trunk.infer_from_hidden(&self.params, h0, rows, scratch);
            total.iter_mut().zip(&eps).for_each(|(a, e)| *a += e);
        }
        let c = -1.0 / (1.0 - sch.gamma(t)).sqrt();
        total.iter_mut().for_each(|v| *v *= c);
        Ok(total)
    }

    /// Deterministic noise prediction for a single input.
    pub fn predict_eps(&self, theta: &[f64], t: usize, set: &SetInput, sch: &NoiseSchedule) -> Result<Vec<f64>> {
        self.check_inputs(theta, t, set, sch)?;
        let enc = self.encode_set(set)?;
        let mut scratch = MlpScratch::default();
        let emb = self.embed_theta(theta, 1, &mut scratch);
        Ok(self.eps_from_embedding(&emb, 1, t, &enc, &mut scratch))
    }

    /// Score estimate `-eps / sqrt(1 - gamma_t)`.
    pub fn score(&self, theta: &[f64], t: usize, set: &SetInput, sch: &NoiseSchedule) -> Result<Vec<f64>> {
        let eps = self.predict_eps(theta, t, set, sch)?;
        let c = (1.0 - sch.gamma(t)).sqrt();
        Ok(eps.into_iter().map(|e| -e / c).collect())
    }

    /// Gradient of `<upstream, predict_eps(..)>` with respect to the parameters.
    pub fn backward(
        &self,
        theta: &[f64],
        t: usize,
        set: &SetInput,
        sch: &NoiseSchedule,
        upstream: &[f64],
    ) -> Result<Vec<f64>> {
        self.check_inputs(theta, t, set, sch)?;
        if upstream.len() != self.config.theta_dim {
            return Err(Error::DimensionMismatch { expected: self.config.theta_dim, found: upstream.len() });
        }
        let batch = NoisedBatch { theta: theta.to_vec(), levels: vec![t], sets: vec![set] };
        let (_, tape) = self.forward_batch(&batch)?;
        Ok(self.backward_batch(&tape, upstream))
    }

    /// Batched forward pass that records what the reverse pass needs.
    pub fn forward_batch(&self, batch: &NoisedBatch<'_>) -> Result<(Vec<f64>, ForwardTape)> {
        let rows = batch.rows();
        let cfg = &self.config;
        if batch.theta.len() != rows * cfg.theta_dim || batch.sets.len() != rows {
            return Err(Error::DimensionMismatch { expected: rows * cfg.theta_dim, found: batch.theta.len() });
        }
        let (theta_emb, theta_cache) = self.arch.theta_enc.forward(&self.params, &batch.theta, rows);

        let mut obs = Vec::new();
        let mut seg_start = Vec::with_capacity(rows);
        let mut seg_len = Vec::with_capacity(rows);
        let mut total = 0;
        for set in &batch.sets {
            self.check_set(set)?;
            seg_start.push(total);
            seg_len.push(set.len());
            total += set.len();
            for i in set.canonical_order() {
                self.scaling.apply(set.row(i), &mut obs);
            }
        }
        let (obs_emb, obs_cache) = self.arch.x_enc.forward(&self.params, &obs, total);

        let e = cfg.emb_dim;
        let mut context = Vec::with_capacity(rows * cfg.context_dim());
        for r in 0..rows {
            let seg = &obs_emb[seg_start[r] * e..(seg_start[r] + seg_len[r]) * e];
            self.push_context(&mean_rows(seg, e), batch.levels[r], seg_len[r], &mut context);
        }
        let mut h0 = self.trunk_context_projection(&context, rows);
        self.add_theta_projection(&theta_emb, rows, &mut h0);
        let (out, trunk_cache) = self.arch.trunk.forward_from_hidden(&self.params, Vec::new(), h0, rows);
        let tape = ForwardTape { rows, theta_emb, theta_cache, obs_cache, seg_start, seg_len, context, trunk_cache };
        Ok((out, tape))
    }

    /// Reverse pass for `L = <upstream, output>` over a recorded batch.
    pub fn backward_batch(&self, tape: &ForwardTape, upstream: &[f64]) -> Vec<f64> {
        let cfg = &self.config;
        let (rows, e, h, c) = (tape.rows, cfg.emb_dim, cfg.hidden_dim, cfg.context_dim());
        let mut grads = vec![0.0; self.params.len()];
        let dh0 = self.arch.trunk.backward_to_hidden(&self.params, &tape.trunk_cache, upstream, &mut grads);

        // trunk input layer, split into its theta and context column blocks
        let input = *self.arch.trunk.input_layer();
        let (w_off, b_off) = (input.weight_offset(), input.bias_offset());
        gemm(e, rows, h, &tape.theta_emb, true, &dh0, false, 1.0, &mut grads[w_off..w_off + e * h]);
        gemm(c, rows, h, &tape.context, true, &dh0, false, 1.0, &mut grads[w_off + e * h..w_off + (e + c) * h]);
        for row in dh0.chunks_exact(h) {
            grads[b_off..b_off + h].iter_mut().zip(row).for_each(|(g, d)| *g += d);
        }
        let w = input.weight(&self.params);
        let mut d_theta_emb = vec![0.0; rows * e];
        gemm(rows, h, e, &dh0, false, &w[..e * h], true, 0.0, &mut d_theta_emb);
        let mut d_ctx = vec![0.0; rows * c];
        gemm(rows, h, c, &dh0, false, &w[e * h..], true, 0.0, &mut d_ctx);

        // mean pooling spreads the pooled cotangent evenly over the set
        let total: usize = tape.seg_len.iter().sum();
        let mut d_obs = vec![0.0; total * e];
        for r in 0..rows {
            let scale = 1.0 / tape.seg_len[r] as f64;
            let d_pool = &d_ctx[r * c..r * c + e];
            for j in tape.seg_start[r]..tape.seg_start[r] + tape.seg_len[r] {
                d_obs[j * e..(j + 1) * e].iter_mut().zip(d_pool).for_each(|(d, p)| *d = p * scale);
            }
        }
        let dh_obs = self.arch.x_enc.backward_to_hidden(&self.params, &tape.obs_cache, &d_obs, &mut grads);
        self.arch.x_enc.input_param_grads(&tape.obs_cache, &dh_obs, &mut grads);
        let dh_theta = self.arch.theta_enc.backward_to_hidden(&self.params, &tape.theta_cache, &d_theta_emb, &mut grads);
        self.arch.theta_enc.input_param_grads(&tape.theta_cache, &dh_theta, &mut grads);
        grads
    }
}

/// Column means of a `rows x width` matrix, summed in row order.
fn mean_rows(m: &[f64], width: usize) -> Vec<f64> {
    let rows = m.len() / width;
    let mut out = vec![0.0; width];
    for row in m.chunks_exact(width) {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
    out.iter_mut().for_each(|o| *o /= rows as f64);
    out
}
