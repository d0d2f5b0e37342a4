//! Fully factorized entropy model and the range coder that turns quantized
//! latents into bytes.
//!
//! Each latent channel `k` owns a monotone cumulative distribution
//! `c_k(v)` built from a small chain of positive-weight affine stages with
//! `tanh` gating, followed by a logistic sigmoid. The CDF is renormalized to
//! the finite support `[c_min - 0.5, c_max + 0.5]`, so it is exactly 0 and 1
//! at the support ends and every integer symbol in between has probability
//! `c_k(v + 0.5) - c_k(v - 0.5)`.

mod cdf;
mod range_coder;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{sigmoid, softplus, Var};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::tensor::Tensor;
use crate::transforms::LatentTensor;

pub use cdf::{build_cdf_tables, table_entropy, CdfTable, CDF_PRECISION, CDF_TOTAL};
pub use range_coder::{decode_latent, encode_latent, range_decode, range_encode, RangeDecoder, RangeEncoder};

/// Probabilities are never allowed below this value.
pub const LIKELIHOOD_FLOOR: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EntropyConfig {
    /// Number of affine stages in each channel's CDF network.
    pub stages: usize,
    /// Width of the hidden stages.
    pub width: usize,
    pub center_min: i32,
    pub center_max: i32,
}

impl Default for EntropyConfig {
    fn default() -> Self {
        Self {
            stages: 3,
            width: 3,
            center_min: -32,
            center_max: 31,
        }
    }
}

impl EntropyConfig {
    pub fn with_alphabet(center_min: i32, center_max: i32) -> Self {
        Self {
            center_min,
            center_max,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 || self.stages > 8 {
            return Err(Error::Config(format!("entropy stages = {}", self.stages)));
        }
        if self.stages > 1 && (self.width == 0 || self.width > 16) {
            return Err(Error::Config(format!("entropy width = {}", self.width)));
        }
        if self.center_min >= self.center_max {
            return Err(Error::Config(format!(
                "empty alphabet [{}, {}]",
                self.center_min, self.center_max
            )));
        }
        if self.alphabet_size() > (CDF_TOTAL as usize) / 4 {
            return Err(Error::Config(format!(
                "alphabet of {} symbols is too large for {}-bit tables",
                self.alphabet_size(),
                CDF_PRECISION
            )));
        }
        Ok(())
    }

    pub fn alphabet_size(&self) -> usize {
        (self.center_max - self.center_min + 1) as usize
    }

    /// `(low, high)` ends of the continuous support.
    pub fn support(&self) -> (f64, f64) {
        (self.center_min as f64 - 0.5, self.center_max as f64 + 0.5)
    }

    /// Layer widths `[1, w, ..., w, 1]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![1];
        d.extend(std::iter::repeat_n(self.width, self.stages - 1));
        d.push(1);
        d
    }

    pub fn params_per_channel(&self) -> usize {
        layout(self).last().map_or(0, |s| s.end())
    }
}

/// Parameter offsets of one stage inside a channel's block.
#[derive(Clone, Copy, Debug)]
struct Stage {
    din: usize,
    dout: usize,
    matrix: usize,
    bias: usize,
    gate: Option<usize>,
}

impl Stage {
    fn end(&self) -> usize {
        self.gate.map_or(self.bias + self.dout, |g| g + self.dout)
    }
}

fn layout(cfg: &EntropyConfig) -> Vec<Stage> {
    let dims = cfg.dims();
    let mut off = 0;
    let mut out = Vec::with_capacity(cfg.stages);
    for i in 0..cfg.stages {
        let (din, dout) = (dims[i], dims[i + 1]);
        let matrix = off;
        let bias = matrix + din * dout;
        let last = i + 1 == cfg.stages;
        let gate = (!last).then_some(bias + dout);
        let s = Stage {
            din,
            dout,
            matrix,
            bias,
            gate,
        };
        off = s.end();
        out.push(s);
    }
    out
}

/// Evaluates one channel's logit network with activation bookkeeping so the
/// gradient can be pulled back afterwards.
struct Net<'a> {
    stages: &'a [Stage],
    p: &'a [f64],
    /// Per stage: input activations followed by pre-gate outputs.
    acts: Vec<f64>,
    offsets: Vec<usize>,
    /// `softplus`, `sigmoid` and `tanh` of every parameter, computed once.
    soft: Vec<f64>,
    slope: Vec<f64>,
    gates: Vec<f64>,
}

impl<'a> Net<'a> {
    fn new(stages: &'a [Stage], p: &'a [f64]) -> Self {
        let mut offsets = Vec::with_capacity(stages.len());
        let mut n = 0;
        for s in stages {
            offsets.push(n);
            n += s.din + s.dout;
        }
        Self {
            stages,
            p,
            acts: vec![0.0; n],
            offsets,
            soft: p.iter().map(|&v| softplus(v)).collect(),
            slope: p.iter().map(|&v| sigmoid(v)).collect(),
            gates: p.iter().map(|v| v.tanh()).collect(),
        }
    }

    fn forward(&mut self, v: f64) -> f64 {
        let mut input = [0.0f64; 16];
        input[0] = v;
        let mut f = 0.0;
        for (s, &o) in self.stages.iter().zip(&self.offsets) {
            self.acts[o..o + s.din].copy_from_slice(&input[..s.din]);
            let mut next = [0.0f64; 16];
            for r in 0..s.dout {
                let mut z = self.p[s.bias + r];
                for c in 0..s.din {
                    z += self.soft[s.matrix + r * s.din + c] * input[c];
                }
                self.acts[o + s.din + r] = z;
                next[r] = match s.gate {
                    Some(g) => z + self.gates[g + r] * z.tanh(),
                    None => z,
                };
            }
            f = next[0];
            input = next;
        }
        f
    }

    /// Accumulates `gf * df/dparams` into `gp` and returns `df/dv`, using the
    /// activations of the latest [`Net::forward`] call.
    fn backward(&self, gf: f64, gp: &mut [f64]) -> f64 {
        let mut gout = [0.0f64; 16];
        gout[0] = gf;
        for (s, &o) in self.stages.iter().zip(&self.offsets).rev() {
            let mut gz = [0.0f64; 16];
            for r in 0..s.dout {
                let z = self.acts[o + s.din + r];
                gz[r] = match s.gate {
                    Some(g) => {
                        let ta = self.gates[g + r];
                        let tz = z.tanh();
                        gp[g + r] += gout[r] * tz * (1.0 - ta * ta);
                        gout[r] * (1.0 + ta * (1.0 - tz * tz))
                    }
                    None => gout[r],
                };
                gp[s.bias + r] += gz[r];
            }
            let mut gin = [0.0f64; 16];
            for r in 0..s.dout {
                for c in 0..s.din {
                    let i = s.matrix + r * s.din + c;
                    gp[i] += gz[r] * self.acts[o + c] * self.slope[i];
                    gin[c] += gz[r] * self.soft[i];
                }
            }
            gout = gin;
        }
        gout[0]
    }
}

/// `sigma(a) - sigma(b)` for `a >= b`, accurate in both tails.
#[inline]
fn sigmoid_diff(a: f64, b: f64) -> f64 {
    let s = if a + b > 0.0 { -1.0 } else { 1.0 };
    (sigmoid(s * a) - sigmoid(s * b)).abs()
}

#[inline]
fn sigmoid_slope(x: f64) -> f64 {
    sigmoid(x) * sigmoid(-x)
}

/// Per-channel monotone CDFs over the configured integer alphabet.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedModel {
    config: EntropyConfig,
    channels: usize,
    params: Vec<f64>,
}

/// Per-channel normalization data shared by every element of the channel.
struct ChannelNorm {
    f_lo: f64,
    f_hi: f64,
    z: f64,
}

impl FactorizedModel {
    pub fn new(config: EntropyConfig, channels: usize, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let want = channels * config.params_per_channel();
        if params.len() != want {
            return Err(Error::Config(format!(
                "entropy model for {channels} channels needs {want} parameters, got {}",
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("entropy model parameters"));
        }
        Ok(Self {
            config,
            channels,
            params,
        })
    }

    /// Default initialization: a wide, roughly logistic density centred near
    /// zero. Deterministic in `seed`.
    pub fn init_params(config: &EntropyConfig, channels: usize, seed: u64) -> Vec<f64> {
        const INIT_SCALE: f64 = 10.0;
        let stages = layout(config);
        let scale = INIT_SCALE.powf(1.0 / stages.len() as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = vec![0.0; channels * config.params_per_channel()];
        for block in out.chunks_mut(config.params_per_channel()) {
            for s in &stages {
                let raw = (1.0 / scale / s.dout as f64).exp_m1().ln();
                block[s.matrix..s.bias].fill(raw);
                for b in &mut block[s.bias..s.bias + s.dout] {
                    *b = rng.gen_range(-0.5..0.5);
                }
            }
        }
        out
    }

    pub fn init(config: EntropyConfig, channels: usize, seed: u64) -> Result<Self> {
        let params = Self::init_params(&config, channels, seed);
        Self::new(config, channels, params)
    }

    /// A model whose logit is `(v - location) / scale` up to ~1e-20: every
    /// channel is a discretized logistic distribution.
    pub fn logistic(config: EntropyConfig, channels: usize, scale: f64, location: f64) -> Result<Self> {
        config.validate()?;
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Config(format!("logistic scale {scale}")));
        }
        let inv_softplus = |x: f64| x.exp_m1().ln();
        let tiny = -50.0;
        let per = config.params_per_channel();
        let mut block = vec![0.0; per];
        for (i, s) in layout(&config).iter().enumerate() {
            block[s.matrix..s.bias].fill(tiny);
            block[s.matrix] = inv_softplus(if i == 0 { 1.0 / scale } else { 1.0 });
            if i == 0 {
                block[s.bias] = -location / scale;
            }
        }
        let params = block.iter().copied().cycle().take(per * channels).collect();
        Self::new(config, channels, params)
    }

    pub fn config(&self) -> &EntropyConfig {
        &self.config
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn into_params(self) -> Vec<f64> {
        self.params
    }

    fn channel_params(&self, k: usize) -> &[f64] {
        let per = self.config.params_per_channel();
        &self.params[k * per..(k + 1) * per]
    }

    /// Renormalized CDF `c_k(v)`; 0 below the support and 1 above it.
    pub fn cdf(&self, k: usize, v: f64) -> f64 {
        let (lo, hi) = self.config.support();
        let stages = layout(&self.config);
        let mut net = Net::new(&stages, self.channel_params(k));
        let f_lo = net.forward(lo);
        let f_hi = net.forward(hi);
        let f_v = net.forward(v.clamp(lo, hi));
        sigmoid_diff(f_v, f_lo) / sigmoid_diff(f_hi, f_lo)
    }

    /// Probability of every integer symbol of channel `k`, floored at
    /// [`LIKELIHOOD_FLOOR`].
    pub fn pmf(&self, k: usize) -> Vec<f64> {
        let stages = layout(&self.config);
        let mut net = Net::new(&stages, self.channel_params(k));
        let (lo, _) = self.config.support();
        let n = self.config.alphabet_size();
        let logits: Vec<f64> = (0..=n).map(|j| net.forward(lo + j as f64)).collect();
        let z = sigmoid_diff(logits[n], logits[0]);
        (0..n)
            .map(|j| (sigmoid_diff(logits[j + 1], logits[j]) / z).max(LIKELIHOOD_FLOOR))
            .collect()
    }

    /// Shannon entropy of channel `k`'s discrete distribution, in bits.
    pub fn entropy_bits(&self, k: usize) -> f64 {
        self.pmf(k)
            .iter()
            .map(|&p| if p > 0.0 { -p * p.log2() } else { 0.0 })
            .sum()
    }

    fn norm(&self, net: &mut Net<'_>) -> ChannelNorm {
        let (lo, hi) = self.config.support();
        let f_lo = net.forward(lo);
        let f_hi = net.forward(hi);
        ChannelNorm {
            f_lo,
            f_hi,
            z: sigmoid_diff(f_hi, f_lo),
        }
    }

    fn check_support(&self, values: &[f64]) -> Result<()> {
        let (lo, hi) = self.config.support();
        match values.iter().find(|v| !(**v >= lo && **v <= hi)) {
            None => Ok(()),
            Some(&value) => Err(Error::OutOfSupport { value, low: lo, high: hi }),
        }
    }

    /// Total estimated bits `sum -log2 p_k(y)` for a latent stack.
    pub fn estimate_rate(&self, y: &LatentTensor) -> Result<f64> {
        if y.channels != self.channels {
            return Err(Error::Dimension(format!(
                "latent has {} channels, entropy model has {}",
                y.channels, self.channels
            )));
        }
        Ok(self.channel_rates(&y.data, y.width * y.height)?.iter().sum())
    }

    /// Estimated bits per channel for channel-major `values` with
    /// `plane` elements per channel (and any number of batch entries).
    pub fn channel_rates(&self, values: &[f64], plane: usize) -> Result<Vec<f64>> {
        let (bits, _, _) = self.rate_and_grad(values, plane, false)?;
        Ok(bits)
    }

    /// Core rate evaluation. `values` is `[N, K, plane]` flattened. Returns
    /// per-channel bits and, when requested, gradients w.r.t. `values` and
    /// the parameters.
    fn rate_and_grad(&self, values: &[f64], plane: usize, grads: bool) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let k_count = self.channels;
        if plane == 0 || !values.len().is_multiple_of(plane * k_count) {
            return Err(Error::Dimension(format!(
                "{} values do not form [N, {k_count}, {plane}]",
                values.len()
            )));
        }
        self.check_support(values)?;
        let batch = values.len() / (plane * k_count);
        let per = self.config.params_per_channel();
        let stages = layout(&self.config);
        let (lo, hi) = self.config.support();
        let ln2 = std::f64::consts::LN_2;
        let cmin = f64::from(self.config.center_min);
        let alphabet = self.config.alphabet_size();
        let values_are_symbols = values.iter().all(|v| v.fract() == 0.0);

        struct ChannelOut {
            bits: f64,
            gp: Vec<f64>,
            gy: Vec<f64>,
        }
        let outs: Vec<ChannelOut> = (0..k_count)
            .into_par_iter()
            .map(|k| {
                let mut net = Net::new(&stages, self.channel_params(k));
                let norm = self.norm(&mut net);
                let mut gp = vec![0.0; if grads { per } else { 0 }];
                let mut gy = vec![0.0; if grads { batch * plane } else { 0 }];
                let mut bits = 0.0;
                let mut unfloored = 0usize;
                // Cost and gradient of one value, weighted by its multiplicity.
                let mut eval = |v: f64, weight: f64, gp: &mut [f64]| -> f64 {
                    let (u, l) = ((v + 0.5).min(hi), (v - 0.5).max(lo));
                    let f_u = if u >= hi { norm.f_hi } else { net.forward(u) };
                    let f_l = if l <= lo { norm.f_lo } else { net.forward(l) };
                    let d = sigmoid_diff(f_u, f_l);
                    let p = d / norm.z;
                    if !(p > LIKELIHOOD_FLOOR) {
                        bits -= weight * LIKELIHOOD_FLOOR.log2();
                        return 0.0;
                    }
                    bits -= weight * p.log2();
                    if !grads {
                        return 0.0;
                    }
                    unfloored += weight as usize;
                    // d(-log2 p) = -(dD / D - dZ / Z) / ln 2; the Z part is
                    // added once per channel below.
                    let scale = -1.0 / (ln2 * d);
                    let mut gv = 0.0;
                    net.forward(u);
                    let g = net.backward(weight * scale * sigmoid_slope(f_u), gp);
                    if u < hi {
                        gv += g / weight;
                    }
                    net.forward(l);
                    let g = net.backward(-weight * scale * sigmoid_slope(f_l), gp);
                    if l > lo {
                        gv += g / weight;
                    }
                    gv
                };
                let channel_values = (0..batch).flat_map(|n| {
                    let base = (n * k_count + k) * plane;
                    values[base..base + plane].iter().copied()
                });
                if values_are_symbols {
                    // Integer data: every occurrence of a symbol has the same
                    // cost, so evaluate each symbol once.
                    let mut counts = vec![0usize; alphabet];
                    for v in channel_values.clone() {
                        counts[(v - cmin) as usize] += 1;
                    }
                    let mut per_symbol = vec![0.0; alphabet];
                    for (s, &c) in counts.iter().enumerate() {
                        if c > 0 {
                            per_symbol[s] = eval(cmin + s as f64, c as f64, &mut gp);
                        }
                    }
                    if grads {
                        for (g, v) in gy.iter_mut().zip(channel_values) {
                            *g = per_symbol[(v - cmin) as usize];
                        }
                    }
                } else {
                    for (i, v) in channel_values.enumerate() {
                        let gv = eval(v, 1.0, &mut gp);
                        if grads {
                            gy[i] = gv;
                        }
                    }
                }
                if grads && unfloored > 0 {
                    let c = unfloored as f64 / (ln2 * norm.z);
                    net.forward(hi);
                    net.backward(c * sigmoid_slope(norm.f_hi), &mut gp);
                    net.forward(lo);
                    net.backward(-c * sigmoid_slope(norm.f_lo), &mut gp);
                }
                ChannelOut { bits, gp, gy }
            })
            .collect();

        let bits = outs.iter().map(|o| o.bits).collect();
        if !grads {
            return Ok((bits, Vec::new(), Vec::new()));
        }
        let mut gp = vec![0.0; per * k_count];
        let mut gy = vec![0.0; values.len()];
        for (k, o) in outs.into_iter().enumerate() {
            gp[k * per..(k + 1) * per].copy_from_slice(&o.gp);
            for n in 0..batch {
                let base = (n * k_count + k) * plane;
                gy[base..base + plane].copy_from_slice(&o.gy[n * plane..(n + 1) * plane]);
            }
        }
        Ok((bits, gy, gp))
    }

    /// One Adam step on the mean bits per symbol of `batch` (channel-major,
    /// `plane` elements per channel). Returns the rate before the step.
    pub fn fit_step(&mut self, batch: &[f64], plane: usize, opt: &mut Adam) -> Result<f64> {
        let (bits, _, mut gp) = self.rate_and_grad(batch, plane, true)?;
        let count = batch.len() as f64;
        gp.iter_mut().for_each(|g| *g /= count);
        opt.step(&mut self.params, &gp)?;
        Ok(bits.iter().sum::<f64>() / count)
    }
}

/// Differentiable rate term in bits. `y` is `[N, K, h, w]` and `params` the
/// flat entropy parameter vector for `K` channels.
pub fn rate_bits<'t>(config: &EntropyConfig, y: Var<'t>, params: Var<'t>) -> Result<Var<'t>> {
    let yv = y.value();
    let (_, k, h, w) = yv.dims4();
    let model = FactorizedModel::new(config.clone(), k, params.value().data().to_vec())?;
    let need = y.requires_grad() || params.requires_grad();
    let (bits, gy, gp) = model.rate_and_grad(yv.data(), h * w, need)?;
    let total: f64 = bits.iter().sum();
    let y_shape = yv.shape().to_vec();
    let p_len = model.params.len();
    Ok(y.tape().op(Tensor::scalar(total), &[y, params], move |g| {
        let s = g.item();
        vec![
            Tensor::new(&y_shape, gy.iter().map(|v| v * s).collect()),
            Tensor::new(&[p_len], gp.iter().map(|v| v * s).collect()),
        ]
    }))
}

/// Fits `model` to samples by full-batch Adam. Returns the final mean bits
/// per symbol.
pub fn fit_model(model: &mut FactorizedModel, batch: &[f64], plane: usize, steps: usize, lr: f64) -> Result<f64> {
    let mut opt = Adam::new(lr);
    for _ in 0..steps {
        model.fit_step(batch, plane, &mut opt)?;
    }
    let bits: f64 = model.channel_rates(batch, plane)?.iter().sum();
    Ok(bits / batch.len() as f64)
}
