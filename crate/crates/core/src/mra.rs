//! Multi-range attention: a transformer encoder layer run across the range
//! axis of every seed, followed by per-channel softmax fusion.
//!
//! For one seed with range features `X` (`G x C`, one row per radius):
//!
//! ```text
//! Q, K, V = X Wq + bq, X Wk + bk, X Wv + bv
//! A_h     = softmax_rows(Q_h K_h^T / sqrt(C / H))         per head h
//! H1      = LN1(X + concat_h(A_h V_h) Wo + bo)
//! F       = LN2(H1 + gelu(H1 W1 + b1) W2 + b2)
//! w[g,c]  = softmax over g of (F W)[g,c]
//! O[c]    = sum_g F[g,c] * w[g,c]
//! ```
//!
//! LayerNorm uses the biased variance with epsilon [`LN_EPS`]; GELU is the
//! tanh approximation. Everything runs in `f64`, and [`mra_backward`]
//! returns exact reverse-mode gradients of `O` with respect to `X` and
//! every parameter.

use std::hash::{Hash, Hasher};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grouping::MultiRangeFeatures;

pub const LN_EPS: f64 = 1e-5;
pub const DEFAULT_HEADS: usize = 4;

/// Dense `G x M x C` tensor, row-major `[g][m][c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub groups: usize,
    pub seeds: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(groups: usize, seeds: usize, channels: usize) -> Self {
        Tensor3 {
            groups,
            seeds,
            channels,
            data: vec![0.0; groups * seeds * channels],
        }
    }

    #[inline]
    pub fn index(&self, g: usize, m: usize, c: usize) -> usize {
        (g * self.seeds + m) * self.channels + c
    }

    #[inline]
    pub fn get(&self, g: usize, m: usize, c: usize) -> f64 {
        self.data[self.index(g, m, c)]
    }

    /// The `G x C` slice for one seed.
    fn seed_matrix(&self, m: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.groups, self.channels, |g, c| self.get(g, m, c))
    }

    fn from_seed_matrices(mats: &[DMatrix<f64>], groups: usize, channels: usize) -> Self {
        let mut t = Tensor3::zeros(groups, mats.len(), channels);
        for (m, mat) in mats.iter().enumerate() {
            for g in 0..groups {
                for c in 0..channels {
                    let i = t.index(g, m, c);
                    t.data[i] = mat[(g, c)];
                }
            }
        }
        t
    }
}

impl From<&MultiRangeFeatures> for Tensor3 {
    fn from(x: &MultiRangeFeatures) -> Self {
        Tensor3 {
            groups: x.groups,
            seeds: x.seeds,
            channels: x.channels,
            data: x.values.clone(),
        }
    }
}

/// Encoder and fusion weights. Matrices act on row vectors (`x W`).
#[derive(Debug, Clone, PartialEq)]
pub struct MraParams {
    pub heads: usize,
    pub wq: DMatrix<f64>,
    pub wk: DMatrix<f64>,
    pub wv: DMatrix<f64>,
    pub wo: DMatrix<f64>,
    pub bq: DVector<f64>,
    pub bk: DVector<f64>,
    pub bv: DVector<f64>,
    pub bo: DVector<f64>,
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
    pub ln1_gain: DVector<f64>,
    pub ln1_bias: DVector<f64>,
    pub ln2_gain: DVector<f64>,
    pub ln2_bias: DVector<f64>,
    /// Fusion projection, `C x C`.
    pub fusion_w: DMatrix<f64>,
}

impl MraParams {
    pub fn channels(&self) -> usize {
        self.wq.nrows()
    }

    pub fn ff_channels(&self) -> usize {
        self.w1.ncols()
    }

    /// All-zero parameters of the given shape (used for gradients).
    pub fn zeros(c: usize, c_ff: usize, heads: usize) -> Self {
        let m = |r, c| DMatrix::zeros(r, c);
        let v = DVector::zeros;
        MraParams {
            heads,
            wq: m(c, c),
            wk: m(c, c),
            wv: m(c, c),
            wo: m(c, c),
            bq: v(c),
            bk: v(c),
            bv: v(c),
            bo: v(c),
            w1: m(c, c_ff),
            b1: v(c_ff),
            w2: m(c_ff, c),
            b2: v(c),
            ln1_gain: v(c),
            ln1_bias: v(c),
            ln2_gain: v(c),
            ln2_bias: v(c),
            fusion_w: m(c, c),
        }
    }

    /// Every parameter array, in a fixed order.
    pub fn tensors(&self) -> [&[f64]; 17] {
        [
            self.wq.as_slice(),
            self.wk.as_slice(),
            self.wv.as_slice(),
            self.wo.as_slice(),
            self.bq.as_slice(),
            self.bk.as_slice(),
            self.bv.as_slice(),
            self.bo.as_slice(),
            self.w1.as_slice(),
            self.b1.as_slice(),
            self.w2.as_slice(),
            self.b2.as_slice(),
            self.ln1_gain.as_slice(),
            self.ln1_bias.as_slice(),
            self.ln2_gain.as_slice(),
            self.ln2_bias.as_slice(),
            self.fusion_w.as_slice(),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 17] {
        [
            self.wq.as_mut_slice(),
            self.wk.as_mut_slice(),
            self.wv.as_mut_slice(),
            self.wo.as_mut_slice(),
            self.bq.as_mut_slice(),
            self.bk.as_mut_slice(),
            self.bv.as_mut_slice(),
            self.bo.as_mut_slice(),
            self.w1.as_mut_slice(),
            self.b1.as_mut_slice(),
            self.w2.as_mut_slice(),
            self.b2.as_mut_slice(),
            self.ln1_gain.as_mut_slice(),
            self.ln1_bias.as_mut_slice(),
            self.ln2_gain.as_mut_slice(),
            self.ln2_bias.as_mut_slice(),
            self.fusion_w.as_mut_slice(),
        ]
    }

    pub const TENSOR_NAMES: [&'static str; 17] = [
        "wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo", "w1", "b1", "w2", "b2", "ln1_gain", "ln1_bias",
        "ln2_gain", "ln2_bias", "fusion_w",
    ];

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        let f = self.ff_channels();
        if self.heads == 0 || c == 0 || c % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "channels {c} not divisible by {} heads",
                self.heads
            )));
        }
        let square = [&self.wq, &self.wk, &self.wv, &self.wo, &self.fusion_w];
        let vecs = [
            &self.bq,
            &self.bk,
            &self.bv,
            &self.bo,
            &self.b2,
            &self.ln1_gain,
            &self.ln1_bias,
            &self.ln2_gain,
            &self.ln2_bias,
        ];
        if square.iter().any(|m| m.shape() != (c, c))
            || vecs.iter().any(|v| v.len() != c)
            || self.w1.shape() != (c, f)
            || self.b1.len() != f
            || self.w2.shape() != (f, c)
        {
            return Err(Error::Shape("inconsistent parameter shapes".into()));
        }
        if self.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("parameters".into()));
        }
        Ok(())
    }

    fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.heads.hash(&mut h);
        for t in self.tensors() {
            t.len().hash(&mut h);
            for v in t {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

/// Deterministic initialization: every projection entry is a standard normal
/// draw scaled by `1/sqrt(C)`; biases 0, layer-norm gains 1.
pub fn init_params(c: usize, c_ff: usize, heads: usize, seed: u64) -> Result<MraParams> {
    if heads == 0 || c == 0 || c_ff == 0 || c % heads != 0 {
        return Err(Error::InvalidArgument(format!(
            "invalid shape C={c}, C_ff={c_ff}, H={heads}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (c as f64).sqrt();
    let mut draw = |r: usize, k: usize| {
        let vals: Vec<f64> = (0..r * k)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        DMatrix::from_vec(r, k, vals)
    };
    let mut p = MraParams::zeros(c, c_ff, heads);
    p.wq = draw(c, c);
    p.wk = draw(c, c);
    p.wv = draw(c, c);
    p.wo = draw(c, c);
    p.w1 = draw(c, c_ff);
    p.w2 = draw(c_ff, c);
    p.fusion_w = draw(c, c);
    p.ln1_gain.fill(1.0);
    p.ln2_gain.fill(1.0);
    Ok(p)
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_A * x * x)
}

fn add_bias(m: &mut DMatrix<f64>, b: &DVector<f64>) {
    for mut row in m.row_iter_mut() {
        for (v, bias) in row.iter_mut().zip(b.iter()) {
            *v += bias;
        }
    }
}

fn col_sums(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum()))
}

/// Row-wise softmax with max subtraction.
fn softmax_rows(m: &mut DMatrix<f64>) {
    for mut row in m.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let s = row.sum();
        row /= s;
    }
}

/// Column-wise softmax (over the range axis) with max subtraction.
fn softmax_cols(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let max = col.max();
        col.apply(|v| *v = (*v - max).exp());
        let s = col.sum();
        col /= s;
    }
}

struct LayerNormCache {
    xhat: DMatrix<f64>,
    rstd: Vec<f64>,
}

fn layer_norm(y: &DMatrix<f64>, gain: &DVector<f64>, bias: &DVector<f64>) -> (DMatrix<f64>, LayerNormCache) {
    let c = y.ncols() as f64;
    let mut xhat = y.clone();
    let mut rstd = Vec::with_capacity(y.nrows());
    for mut row in xhat.row_iter_mut() {
        let mean = row.sum() / c;
        row.add_scalar_mut(-mean);
        let var = row.norm_squared() / c;
        let r = 1.0 / (var + LN_EPS).sqrt();
        row *= r;
        rstd.push(r);
    }
    let mut out = xhat.clone();
    for mut row in out.row_iter_mut() {
        for ((v, g), b) in row.iter_mut().zip(gain.iter()).zip(bias.iter()) {
            *v = *v * g + b;
        }
    }
    (out, LayerNormCache { xhat, rstd })
}

fn layer_norm_backward(
    d_out: &DMatrix<f64>,
    cache: &LayerNormCache,
    gain: &DVector<f64>,
    d_gain: &mut DVector<f64>,
    d_bias: &mut DVector<f64>,
) -> DMatrix<f64> {
    let c = d_out.ncols() as f64;
    *d_bias += col_sums(d_out);
    *d_gain += col_sums(&d_out.component_mul(&cache.xhat));
    let mut dx = d_out.clone();
    for (r, mut row) in dx.row_iter_mut().enumerate() {
        for (v, g) in row.iter_mut().zip(gain.iter()) {
            *v *= g;
        }
        let xhat = cache.xhat.row(r);
        let mean_d = row.sum() / c;
        let mean_dx = row.dot(&xhat) / c;
        for (k, v) in row.iter_mut().enumerate() {
            *v = cache.rstd[r] * (*v - mean_d - xhat[k] * mean_dx);
        }
    }
    dx
}

struct SeedTape {
    x: DMatrix<f64>,
    q: DMatrix<f64>,
    k: DMatrix<f64>,
    v: DMatrix<f64>,
    attn: Vec<DMatrix<f64>>,
    z: DMatrix<f64>,
    ln1: LayerNormCache,
    h1: DMatrix<f64>,
    pre_act: DMatrix<f64>,
    act: DMatrix<f64>,
    ln2: LayerNormCache,
    f: DMatrix<f64>,
    w: DMatrix<f64>,
}

/// Intermediates of one forward pass.
pub struct MraTape {
    fingerprint: u64,
    groups: usize,
    channels: usize,
    seeds: Vec<SeedTape>,
}

impl MraTape {
    pub fn seeds(&self) -> usize {
        self.seeds.len()
    }
}

pub struct MraOutput {
    /// Fused features, `M x C`.
    pub output: DMatrix<f64>,
    /// Encoded range features `F`.
    pub encoded: Tensor3,
    /// Fusion weights `w`, same layout as `encoded`.
    pub weights: Tensor3,
    pub tape: MraTape,
}

fn encode_seed(x: DMatrix<f64>, p: &MraParams) -> SeedTape {
    let c = p.channels();
    let dh = c / p.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut q = &x * &p.wq;
    add_bias(&mut q, &p.bq);
    let mut k = &x * &p.wk;
    add_bias(&mut k, &p.bk);
    let mut v = &x * &p.wv;
    add_bias(&mut v, &p.bv);
    let g = x.nrows();
    let mut z = DMatrix::zeros(g, c);
    let mut attn = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let qh = q.columns(h * dh, dh);
        let kh = k.columns(h * dh, dh);
        let vh = v.columns(h * dh, dh);
        let mut a = (qh * kh.transpose()) * scale;
        softmax_rows(&mut a);
        z.columns_mut(h * dh, dh).copy_from(&(&a * vh));
        attn.push(a);
    }
    let mut y1 = &z * &p.wo;
    add_bias(&mut y1, &p.bo);
    y1 += &x;
    let (h1, ln1) = layer_norm(&y1, &p.ln1_gain, &p.ln1_bias);
    let mut pre_act = &h1 * &p.w1;
    add_bias(&mut pre_act, &p.b1);
    let act = pre_act.map(gelu);
    let mut y2 = &act * &p.w2;
    add_bias(&mut y2, &p.b2);
    y2 += &h1;
    let (f, ln2) = layer_norm(&y2, &p.ln2_gain, &p.ln2_bias);
    let mut w = &f * &p.fusion_w;
    softmax_cols(&mut w);
    SeedTape {
        x,
        q,
        k,
        v,
        attn,
        z,
        ln1,
        h1,
        pre_act,
        act,
        ln2,
        f,
        w,
    }
}

/// Encodes and fuses every seed independently.
pub fn mra_forward(x: &Tensor3, params: &MraParams) -> Result<MraOutput> {
    params.validate()?;
    if x.groups == 0 {
        return Err(Error::Shape("need at least one range group".into()));
    }
    if x.channels != params.channels() || x.data.len() != x.groups * x.seeds * x.channels {
        return Err(Error::Shape(format!(
            "input has {} channels, parameters expect {}",
            x.channels,
            params.channels()
        )));
    }
    let seeds: Vec<SeedTape> = (0..x.seeds)
        .into_par_iter()
        .map(|m| encode_seed(x.seed_matrix(m), params))
        .collect();
    let mut output = DMatrix::zeros(x.seeds, x.channels);
    for (m, s) in seeds.iter().enumerate() {
        output.row_mut(m).copy_from(&col_sums(&s.f.component_mul(&s.w)).transpose());
    }
    let f: Vec<DMatrix<f64>> = seeds.iter().map(|s| s.f.clone()).collect();
    let w: Vec<DMatrix<f64>> = seeds.iter().map(|s| s.w.clone()).collect();
    Ok(MraOutput {
        output,
        encoded: Tensor3::from_seed_matrices(&f, x.groups, x.channels),
        weights: Tensor3::from_seed_matrices(&w, x.groups, x.channels),
        tape: MraTape {
            fingerprint: params.fingerprint(),
            groups: x.groups,
            channels: x.channels,
            seeds,
        },
    })
}

/// Gradients of a scalar loss through the encoder given `dF` for one seed.
fn encoder_backward(t: &SeedTape, d_f: DMatrix<f64>, p: &MraParams, grad: &mut MraParams) -> DMatrix<f64> {
    let c = p.channels();
    let dh = c / p.heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let d_y2 = layer_norm_backward(&d_f, &t.ln2, &p.ln2_gain, &mut grad.ln2_gain, &mut grad.ln2_bias);
    // y2 = h1 + act W2 + b2
    grad.w2 += t.act.transpose() * &d_y2;
    grad.b2 += col_sums(&d_y2);
    let d_act = &d_y2 * p.w2.transpose();
    let d_pre = d_act.zip_map(&t.pre_act, |d, x| d * gelu_grad(x));
    grad.w1 += t.h1.transpose() * &d_pre;
    grad.b1 += col_sums(&d_pre);
    let d_h1 = d_y2 + &d_pre * p.w1.transpose();

    let d_y1 = layer_norm_backward(&d_h1, &t.ln1, &p.ln1_gain, &mut grad.ln1_gain, &mut grad.ln1_bias);
    // y1 = x + z Wo + bo
    grad.wo += t.z.transpose() * &d_y1;
    grad.bo += col_sums(&d_y1);
    let d_z = &d_y1 * p.wo.transpose();

    let g = t.x.nrows();
    let mut d_q = DMatrix::zeros(g, c);
    let mut d_k = DMatrix::zeros(g, c);
    let mut d_v = DMatrix::zeros(g, c);
    for h in 0..p.heads {
        let a = &t.attn[h];
        let d_zh = d_z.columns(h * dh, dh);
        let vh = t.v.columns(h * dh, dh);
        let d_a = d_zh * vh.transpose();
        d_v.columns_mut(h * dh, dh).copy_from(&(a.transpose() * d_zh));
        // softmax over each row
        let mut d_s = d_a.component_mul(a);
        for (r, mut row) in d_s.row_iter_mut().enumerate() {
            let dot = row.sum();
            for (k, v) in row.iter_mut().enumerate() {
                *v -= a[(r, k)] * dot;
            }
        }
        d_s *= scale;
        d_q.columns_mut(h * dh, dh)
            .copy_from(&(&d_s * t.k.columns(h * dh, dh)));
        d_k.columns_mut(h * dh, dh)
            .copy_from(&(d_s.transpose() * t.q.columns(h * dh, dh)));
    }
    grad.wq += t.x.transpose() * &d_q;
    grad.wk += t.x.transpose() * &d_k;
    grad.wv += t.x.transpose() * &d_v;
    grad.bq += col_sums(&d_q);
    grad.bk += col_sums(&d_k);
    grad.bv += col_sums(&d_v);
    d_y1 + d_q * p.wq.transpose() + d_k * p.wk.transpose() + d_v * p.wv.transpose()
}

fn seed_backward(t: &SeedTape, d_out: DVector<f64>, p: &MraParams, grad: &mut MraParams) -> DMatrix<f64> {
    let g = t.f.nrows();
    let c = t.f.ncols();
    // O[c] = sum_g F[g,c] w[g,c]
    let mut d_f = DMatrix::from_fn(g, c, |r, k| d_out[k] * t.w[(r, k)]);
    let d_w = DMatrix::from_fn(g, c, |r, k| d_out[k] * t.f[(r, k)]);
    let mut d_logits = d_w.component_mul(&t.w);
    for (k, mut col) in d_logits.column_iter_mut().enumerate() {
        let dot = col.sum();
        for (r, v) in col.iter_mut().enumerate() {
            *v -= t.w[(r, k)] * dot;
        }
    }
    grad.fusion_w += t.f.transpose() * &d_logits;
    d_f += d_logits * p.fusion_w.transpose();
    encoder_backward(t, d_f, p, grad)
}

/// Reverse pass for `dO` (`M x C`). Errors if `params` differ from those
/// used by the forward pass that produced `tape`.
pub fn mra_backward(d_out: &DMatrix<f64>, tape: &MraTape, params: &MraParams) -> Result<(Tensor3, MraParams)> {
    if params.fingerprint() != tape.fingerprint {
        return Err(Error::StaleTape);
    }
    if d_out.shape() != (tape.seeds.len(), tape.channels) {
        return Err(Error::Shape(format!(
            "dO is {:?}, expected {:?}",
            d_out.shape(),
            (tape.seeds.len(), tape.channels)
        )));
    }
    let c = params.channels();
    let c_ff = params.ff_channels();
    let per_seed: Vec<(DMatrix<f64>, MraParams)> = tape
        .seeds
        .par_iter()
        .enumerate()
        .map(|(m, t)| {
            let mut grad = MraParams::zeros(c, c_ff, params.heads);
            let dx = seed_backward(t, d_out.row(m).transpose(), params, &mut grad);
            (dx, grad)
        })
        .collect();
    // sum in seed order so the result is independent of the thread count
    let mut grad = MraParams::zeros(c, c_ff, params.heads);
    let mut dx = Vec::with_capacity(per_seed.len());
    for (d, g) in per_seed {
        for (acc, part) in grad.tensors_mut().into_iter().zip(g.tensors()) {
            for (a, b) in acc.iter_mut().zip(part) {
                *a += b;
            }
        }
        dx.push(d);
    }
    Ok((Tensor3::from_seed_matrices(&dx, tape.groups, tape.channels), grad))
}

/// Settings for [`gradient_check`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub groups: usize,
    pub seeds: usize,
    pub channels: usize,
    pub heads: usize,
    /// Central-difference step.
    pub eps: f64,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            groups: 4,
            seeds: 8,
            channels: 16,
            heads: DEFAULT_HEADS,
            eps: 1e-5,
            floor: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub seed: u64,
    /// Entries compared (all parameters plus all inputs).
    pub entries: usize,
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Tensor holding the worst entry (`"x"` for the input).
    pub worst: String,
    /// Largest `|sum_g w - 1|` over (seed, channel).
    pub max_simplex_error: f64,
}

/// A random kernel instance: inputs, parameters with perturbed biases and
/// gains, and an upstream gradient, all drawn from `seed`.
pub fn random_instance(cfg: &GradCheckConfig, seed: u64) -> Result<(Tensor3, MraParams, DMatrix<f64>)> {
    let c = cfg.channels;
    let mut params = init_params(c, 2 * c, cfg.heads, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut normal = move || -> f64 { StandardNormal.sample(&mut rng) };
    {
        let t = params.tensors_mut();
        for (k, tensor) in t.into_iter().enumerate() {
            let name = MraParams::TENSOR_NAMES[k];
            if name.starts_with('b') || name.ends_with("bias") {
                tensor.iter_mut().for_each(|v| *v = 0.1 * normal());
            } else if name.ends_with("gain") {
                tensor.iter_mut().for_each(|v| *v = 1.0 + 0.1 * normal());
            }
        }
    }
    let mut x = Tensor3::zeros(cfg.groups, cfg.seeds, c);
    x.data.iter_mut().for_each(|v| *v = normal());
    let d_out = DMatrix::from_fn(cfg.seeds, c, |_, _| normal());
    Ok((x, params, d_out))
}

fn seed_loss(x: &Tensor3, m: usize, params: &MraParams, d_out: &DMatrix<f64>) -> f64 {
    let t = encode_seed(x.seed_matrix(m), params);
    let fused = col_sums(&t.f.component_mul(&t.w));
    fused.iter().zip(d_out.row(m).iter()).map(|(a, b)| a * b).sum()
}

fn probe_loss(x: &Tensor3, params: &MraParams, d_out: &DMatrix<f64>) -> f64 {
    (0..x.seeds).map(|m| seed_loss(x, m, params, d_out)).sum()
}

/// Compares every analytic gradient entry of `L = sum(dO * O)` against
/// central finite differences on one random instance.
pub fn gradient_check(cfg: &GradCheckConfig, seed: u64) -> Result<GradCheckReport> {
    let (mut x, mut params, d_out) = random_instance(cfg, seed)?;
    let out = mra_forward(&x, &params)?;
    let max_simplex_error = simplex_error(&out.weights);
    let (dx, grad) = mra_backward(&d_out, &out.tape, &params)?;

    let mut report = GradCheckReport {
        seed,
        entries: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: String::new(),
        max_simplex_error,
    };
    let mut record = |name: &str, analytic: f64, numeric: f64| {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(cfg.floor);
        report.entries += 1;
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = name.to_string();
        }
    };

    let two_eps = 2.0 * cfg.eps;
    let analytic = grad.tensors();
    for k in 0..analytic.len() {
        for i in 0..analytic[k].len() {
            let original = params.tensors()[k][i];
            params.tensors_mut()[k][i] = original + cfg.eps;
            let plus = probe_loss(&x, &params, &d_out);
            params.tensors_mut()[k][i] = original - cfg.eps;
            let minus = probe_loss(&x, &params, &d_out);
            params.tensors_mut()[k][i] = original;
            record(MraParams::TENSOR_NAMES[k], analytic[k][i], (plus - minus) / two_eps);
        }
    }
    // an input entry only reaches its own seed
    for g in 0..x.groups {
        for m in 0..x.seeds {
            for c in 0..x.channels {
                let i = x.index(g, m, c);
                let original = x.data[i];
                x.data[i] = original + cfg.eps;
                let plus = seed_loss(&x, m, &params, &d_out);
                x.data[i] = original - cfg.eps;
                let minus = seed_loss(&x, m, &params, &d_out);
                x.data[i] = original;
                record("x", dx.data[i], (plus - minus) / two_eps);
            }
        }
    }
    Ok(report)
}

/// With a single range the fusion weights are all 1, so the output must
/// equal the encoded features; returns the largest deviation.
pub fn single_range_identity_error(cfg: &GradCheckConfig, seed: u64) -> Result<f64> {
    let single = GradCheckConfig { groups: 1, ..*cfg };
    let (x, params, _) = random_instance(&single, seed)?;
    let out = mra_forward(&x, &params)?;
    let mut worst: f64 = 0.0;
    for m in 0..x.seeds {
        for c in 0..x.channels {
            worst = worst.max((out.output[(m, c)] - out.encoded.get(0, m, c)).abs());
        }
    }
    Ok(worst)
}

/// Largest deviation of `sum_g w[g, m, c]` from 1.
pub fn simplex_error(weights: &Tensor3) -> f64 {
    let mut worst: f64 = 0.0;
    for m in 0..weights.seeds {
        for c in 0..weights.channels {
            let s: f64 = (0..weights.groups).map(|g| weights.get(g, m, c)).sum();
            worst = worst.max((s - 1.0).abs());
        }
    }
    worst
}

/// Largest singular value by power iteration on `M^T M`.
pub fn spectral_norm(m: &DMatrix<f64>, iterations: usize) -> f64 {
    let mut v = DVector::from_element(m.ncols(), 1.0 / (m.ncols() as f64).sqrt());
    let mut sigma = 0.0;
    for _ in 0..iterations {
        let mv = m * &v;
        sigma = mv.norm();
        if sigma == 0.0 {
            return 0.0;
        }
        let w = m.transpose() * mv;
        let n = w.norm();
        v = w / n;
    }
    sigma
}
