//! Channel energy profiling, the two energy penalties, the compaction score
//! and closed-form bit allocation across latent channels.
//!
//! With latent channel variances `s_k`, the normalized energy fractions are
//! `A_k = s_k / sum_j s_j`. `B_k` is the gain from quantization noise in
//! channel `k` to reconstruction error per output sample.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::media_io::{stack, ImageTensor};
use crate::tensor::Tensor;
use crate::transforms::{analyze_batch, synthesis_graph, synthesize_batch, ArchitectureConfig, Backend, ModelParams};

/// Products `A_k B_k` below this are treated as this value in the score.
pub const SCORE_FLOOR: f64 = 1e-30;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BkMethod {
    /// Variance of the synthesis response to a constant-one latent channel.
    ConstantProbe,
    /// Per-sample energy of the synthesis impulse response (linear backend).
    ImpulseEnergy,
}

impl BkMethod {
    /// Default estimator for a backend.
    pub fn default_for(backend: Backend) -> Self {
        match backend {
            Backend::Linear => Self::ImpulseEnergy,
            Backend::Convolutional => Self::ConstantProbe,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyProfile {
    pub channel_variances: Vec<f64>,
    pub input_variance: f64,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub dominant: usize,
    pub bk_method: BkMethod,
}

impl EnergyProfile {
    /// Profiles a model on a batch of images.
    pub fn measure(
        batch: &[ImageTensor],
        params: &ModelParams,
        cfg: &ArchitectureConfig,
        bk_method: BkMethod,
        probe_size: usize,
    ) -> Result<Self> {
        let (channel_variances, a) = compute_ak(batch, params, cfg)?;
        let x = stack(batch)?;
        let input_variance = variance(x.data());
        let b = match bk_method {
            BkMethod::ConstantProbe => estimate_bk_probe(params, cfg, probe_size)?,
            BkMethod::ImpulseEnergy => estimate_bk_impulse(params, cfg)?,
        };
        Ok(Self {
            dominant: dominant_channel(&a),
            channel_variances,
            input_variance,
            a,
            b,
            bk_method,
        })
    }

    pub fn compaction_score(&self) -> f64 {
        compaction_score(&self.a, &self.b)
    }
}

fn variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
}

/// Per-channel population variance of `[N, K, h, w]` latents, pooled over
/// the batch and spatial positions.
pub fn channel_variances(y: &Tensor) -> Vec<f64> {
    let (n, k, h, w) = y.dims4();
    let plane = h * w;
    (0..k)
        .map(|ch| {
            let values: Vec<f64> = (0..n)
                .flat_map(|b| y.data()[(b * k + ch) * plane..(b * k + ch + 1) * plane].iter().copied())
                .collect();
            variance(&values)
        })
        .collect()
}

/// `A_k = s_k / sum_j s_j`.
pub fn normalize_energy(variances: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = variances.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Degenerate("latent channels carry no energy".into()));
    }
    Ok(variances.iter().map(|v| v / total).collect())
}

/// Channel variances and normalized fractions `A_k` of the analysis output.
pub fn compute_ak(batch: &[ImageTensor], params: &ModelParams, cfg: &ArchitectureConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Invalid("energy profile needs at least one image".into()));
    }
    let y = analyze_batch(&stack(batch)?, params, cfg)?;
    let v = channel_variances(&y);
    let a = normalize_energy(&v)?;
    Ok((v, a))
}

/// Index of the largest `A_k`; the lowest index wins ties.
pub fn dominant_channel(a: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in a.iter().enumerate() {
        if v > a[best] {
            best = i;
        }
    }
    best
}

/// Constant-probe `B_k`: for each channel, synthesize a `probe_size` square
/// latent that is one in channel `k` and zero elsewhere, and take the
/// variance of all output samples.
pub fn estimate_bk_probe(params: &ModelParams, cfg: &ArchitectureConfig, probe_size: usize) -> Result<Vec<f64>> {
    let k = cfg.latent_channels;
    let plane = probe_size * probe_size;
    if plane == 0 {
        return Err(Error::Invalid("probe size must be positive".into()));
    }
    let mut data = vec![0.0; k * k * plane];
    for ch in 0..k {
        data[(ch * k + ch) * plane..(ch * k + ch + 1) * plane].fill(1.0);
    }
    let out = synthesize_batch(&Tensor::new(&[k, k, probe_size, probe_size], data), params, cfg)?;
    let per = out.len() / k;
    Ok(out.data().chunks(per).map(variance).collect())
}

/// Impulse-energy `B_k` for the linear backend: squared norm of the
/// synthesis response to a unit impulse in channel `k`, divided by the number
/// of output samples one latent position covers.
pub fn estimate_bk_impulse(params: &ModelParams, cfg: &ArchitectureConfig) -> Result<Vec<f64>> {
    if cfg.backend != Backend::Linear {
        return Err(Error::Config("impulse-energy B_k needs the linear backend".into()));
    }
    let k = cfg.latent_channels;
    let mut data = vec![0.0; (k + 1) * k];
    for ch in 0..k {
        data[ch * k + ch] = 1.0;
    }
    let out = synthesize_batch(&Tensor::new(&[k + 1, k, 1, 1], data), params, cfg)?;
    let per = out.len() / (k + 1);
    let base = &out.data()[k * per..];
    Ok(out
        .data()
        .chunks(per)
        .take(k)
        .map(|resp| resp.iter().zip(base).map(|(r, b)| (r - b).powi(2)).sum::<f64>() / per as f64)
        .collect())
}

/// Shannon entropy `sum -A_k log2 A_k` of the energy distribution, with
/// `0 log 0 = 0`.
pub fn energy_entropy_penalty(a: &[f64]) -> f64 {
    a.iter().filter(|&&v| v > 0.0).map(|&v| v * (1.0 / v).log2()).sum()
}

/// `B[e]`.
pub fn bk_penalty(b: &[f64], e: usize) -> f64 {
    b[e]
}

/// `sum_k log(max(A_k B_k, 1e-30))`; lower means more compact.
pub fn compaction_score(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x * y).max(SCORE_FLOOR).ln()).sum()
}

/// Differentiable `A_k` of `[N, K, h, w]` latents.
pub fn energy_fractions_graph(y: Var<'_>) -> Var<'_> {
    let v = y.channel_variance();
    v.div_scalar(v.sum())
}

/// Differentiable [`energy_entropy_penalty`]. Zero entries contribute
/// nothing to the value or the gradient.
pub fn energy_entropy_graph(a: Var<'_>) -> Var<'_> {
    let av = a.value();
    let value = energy_entropy_penalty(av.data());
    let ln2 = std::f64::consts::LN_2;
    let grad: Vec<f64> = av
        .data()
        .iter()
        .map(|&v| if v > 0.0 { -(v.log2() + 1.0 / ln2) } else { 0.0 })
        .collect();
    let shape = av.shape().to_vec();
    a.tape().op(Tensor::scalar(value), &[a], move |g| {
        let s = g.item();
        vec![Tensor::new(&shape, grad.iter().map(|v| v * s).collect())]
    })
}

/// Differentiable constant-probe `B_k` for channel `k`, as a function of the
/// flat synthesis parameters `phi`.
pub fn bk_probe_graph<'t>(cfg: &ArchitectureConfig, phi: Var<'t>, k: usize, probe_size: usize) -> Var<'t> {
    let plane = probe_size * probe_size;
    let mut data = vec![0.0; cfg.latent_channels * plane];
    data[k * plane..(k + 1) * plane].fill(1.0);
    let probe = phi
        .tape()
        .constant(Tensor::new(&[1, cfg.latent_channels, probe_size, probe_size], data));
    synthesis_graph(cfg, probe, phi).variance()
}

/// Per-channel rates minimizing `sum_k c_k 2^(-2 R_k)` subject to
/// `sum_k alpha_k R_k = R`, where `c_k = B_k eps^2 A_k sigma_x^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct BitAllocation {
    /// Sample-count fractions actually used (renormalized when channels are
    /// excluded; zero for excluded channels).
    pub alpha: Vec<f64>,
    pub rates: Vec<f64>,
    pub total_rate: f64,
    pub epsilon: f64,
    /// Objective value at `rates`.
    pub predicted_min_variance: f64,
    /// Channels with zero energy or zero gain, given no bits.
    pub excluded: Vec<usize>,
}

/// Default `alpha_k = 1 / 4^n`: one latent channel has `1/4^n` as many
/// samples as the input pixel grid.
pub fn default_alpha(cfg: &ArchitectureConfig) -> Vec<f64> {
    vec![1.0 / (1u64 << (2 * cfg.units)) as f64; cfg.latent_channels]
}

/// Distortion `sum_k c_k 2^(-2 R_k)` of an arbitrary allocation.
pub fn allocation_objective(weights: &[f64], rates: &[f64]) -> f64 {
    weights.iter().zip(rates).map(|(c, r)| c * (-2.0 * r).exp2()).sum()
}

/// Per-channel distortion weights `c_k = B_k eps^2 A_k sigma_x^2`.
pub fn allocation_weights(profile: &EnergyProfile, epsilon: f64) -> Vec<f64> {
    profile
        .a
        .iter()
        .zip(&profile.b)
        .map(|(a, b)| b * epsilon * epsilon * a * profile.input_variance)
        .collect()
}

/// Closed-form solution: every active channel ends at the same marginal
/// distortion `c_k 2^(-2 R_k) = lambda alpha_k`, hence
/// `R_k = 0.5 log2(c_k / (lambda alpha_k))` with `lambda` fixed by the rate
/// constraint, and the minimum is `lambda sum_k alpha_k`. When
/// `sum_k alpha_k = 1` this equals
/// `prod_k (A_k B_k / alpha_k)^alpha_k eps^2 2^(-2R) sigma_x^2`.
pub fn optimal_bit_allocation(profile: &EnergyProfile, alpha: &[f64], rate: f64, epsilon: f64) -> Result<BitAllocation> {
    let weights = allocation_weights(profile, epsilon);
    allocate(&weights, alpha, rate, epsilon, false)
}

/// Like [`optimal_bit_allocation`] but never assigns negative rates: channels
/// that would go negative are switched off and the rest re-solved.
pub fn water_filling_allocation(profile: &EnergyProfile, alpha: &[f64], rate: f64, epsilon: f64) -> Result<BitAllocation> {
    let weights = allocation_weights(profile, epsilon);
    allocate(&weights, alpha, rate, epsilon, true)
}

/// Allocation from raw weights `c_k`.
pub fn allocate(weights: &[f64], alpha: &[f64], rate: f64, epsilon: f64, nonnegative: bool) -> Result<BitAllocation> {
    if weights.len() != alpha.len() || weights.is_empty() {
        return Err(Error::Dimension(format!("{} weights, {} alphas", weights.len(), alpha.len())));
    }
    if alpha.iter().any(|&a| !(a > 0.0)) {
        return Err(Error::Invalid("every alpha_k must be positive".into()));
    }
    if !(rate >= 0.0) || !(epsilon > 0.0) {
        return Err(Error::Invalid(format!("rate {rate}, epsilon {epsilon}")));
    }
    let k = weights.len();
    let alpha_total: f64 = alpha.iter().sum();
    let excluded: Vec<usize> = (0..k).filter(|&i| !(weights[i] > 0.0)).collect();
    if excluded.len() == k {
        return Err(Error::Degenerate("no channel has positive energy and gain".into()));
    }
    if !excluded.is_empty() {
        log::warn!("bit allocation excludes degenerate channels {excluded:?}");
    }
    let mut active: Vec<bool> = (0..k).map(|i| weights[i] > 0.0).collect();
    let mut used_alpha = vec![0.0; k];
    let mut rates = vec![0.0; k];
    loop {
        let active_total: f64 = (0..k).filter(|&i| active[i]).map(|i| alpha[i]).sum();
        let scale = if excluded.is_empty() { 1.0 } else { alpha_total / active_total };
        for i in 0..k {
            used_alpha[i] = if active[i] { alpha[i] * scale } else { 0.0 };
        }
        let sum_alpha: f64 = used_alpha.iter().sum();
        let log_lambda = ((0..k)
            .filter(|&i| active[i])
            .map(|i| used_alpha[i] * (weights[i] / used_alpha[i]).log2())
            .sum::<f64>()
            - 2.0 * rate)
            / sum_alpha;
        for i in 0..k {
            rates[i] = if active[i] {
                0.5 * ((weights[i] / used_alpha[i]).log2() - log_lambda)
            } else {
                0.0
            };
        }
        let negative: Vec<usize> = (0..k).filter(|&i| active[i] && rates[i] < 0.0).collect();
        if !nonnegative || negative.is_empty() {
            break;
        }
        // Switch off the weakest offending channel and re-solve; the
        // remaining budget is unchanged because inactive channels get 0.
        let worst = *negative
            .iter()
            .min_by(|&&a, &&b| rates[a].total_cmp(&rates[b]))
            .expect("nonempty");
        active[worst] = false;
    }
    let predicted = allocation_objective(weights, &rates);
    Ok(BitAllocation {
        alpha: used_alpha,
        rates,
        total_rate: rate,
        epsilon,
        predicted_min_variance: predicted,
        excluded,
    })
}

/// `prod_k (A_k B_k / alpha_k)^alpha_k eps^2 2^(-2R) sigma_x^2`, the minimum
/// of the allocation problem when `sum_k alpha_k = 1`.
pub fn product_form_minimum(profile: &EnergyProfile, alpha: &[f64], rate: f64, epsilon: f64) -> f64 {
    let log_prod: f64 = profile
        .a
        .iter()
        .zip(&profile.b)
        .zip(alpha)
        .map(|((a, b), al)| al * (a * b / al).log2())
        .sum();
    log_prod.exp2() * epsilon * epsilon * (-2.0 * rate).exp2() * profile.input_variance
}

/// Fits the shared constant `eps` of `sigma_q^2 / sigma_y^2 = eps^2 2^(-2R)`
/// by least squares in the log domain over `(R_k, ratio_k)` pairs.
pub fn fit_epsilon(pairs: &[(f64, f64)]) -> Result<f64> {
    let usable: Vec<f64> = pairs
        .iter()
        .filter(|(_, ratio)| *ratio > 0.0 && ratio.is_finite())
        .map(|(r, ratio)| ratio.log2() + 2.0 * r)
        .collect();
    if usable.is_empty() {
        return Err(Error::Degenerate("no usable (rate, distortion ratio) pairs".into()));
    }
    let mean = usable.iter().sum::<f64>() / usable.len() as f64;
    Ok((mean / 2.0).exp2())
}
