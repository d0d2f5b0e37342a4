//! Joint rate-distortion training of the transforms and the entropy model
//! with the two-phase energy penalty, and per-lambda fine-tuning.
//!
//! The loss is `J = lambda D + R + beta P` with `R` in bits per pixel. In
//! phase 1 `P` is the entropy of the latent energy distribution; once one
//! channel holds more than the switch threshold of the energy (or the phase-1
//! budget runs out) the dominant channel `e` is frozen and `P = B_e`.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::energy_compaction::{bk_probe_graph, dominant_channel, energy_entropy_graph, energy_fractions_graph};
use crate::entropy_model::rate_bits;
use crate::error::{Error, Result};
use crate::media_io::{stack, ImageTensor};
use crate::metrics::{distortion, DistortionKind};
use crate::optim::Adam;
use crate::quantization::{quantize_train_var, QuantMethod, QuantizerSpec};
use crate::tensor::Tensor;
use crate::transforms::{analysis_graph, synthesis_graph, ArchitectureConfig, ModelParams};

/// The lambda values of the rate ladder.
pub const LAMBDA_LADDER: [f64; 6] = [2.0, 4.0, 8.0, 16.0, 32.0, 64.0];

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub beta: f64,
    pub distortion: DistortionKind,
}

impl LossConfig {
    pub fn new(lambda: f64, beta: f64, distortion: DistortionKind) -> Result<Self> {
        let cfg = Self {
            lambda,
            beta,
            distortion,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be non-negative, got {}", self.beta)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSchedule {
    pub phase1_max_iters: usize,
    /// Phase 2 starts once `max A_k` exceeds this.
    pub phase_switch_threshold: f64,
    pub total_iters: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub quantizer: QuantMethod,
    /// Side of the square latent probe used for `B_e` in phase 2.
    pub probe_size: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            phase1_max_iters: 5000,
            phase_switch_threshold: 0.5,
            total_iters: 20_000,
            learning_rate: 1e-4,
            batch_size: 16,
            seed: 0,
            quantizer: QuantMethod::UniformNoise,
            probe_size: 8,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.phase1_max_iters > self.total_iters {
            return Err(Error::Config(format!(
                "phase-1 budget {} exceeds total {}",
                self.phase1_max_iters, self.total_iters
            )));
        }
        if self.batch_size == 0 || self.probe_size == 0 {
            return Err(Error::Config("batch and probe sizes must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate {}", self.learning_rate)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub d: f64,
    /// Bits per pixel.
    pub r: f64,
    pub p: f64,
    pub j: f64,
    pub phase: u8,
}

/// `J = lambda D + R + beta P` from an original, a reconstruction, a rate in
/// bits per pixel and a penalty value.
pub fn compute_loss(
    x: &ImageTensor,
    x_hat: &ImageTensor,
    rate_bpp: f64,
    penalty: f64,
    cfg: &LossConfig,
    phase: u8,
) -> Result<LossBreakdown> {
    if !rate_bpp.is_finite() || !penalty.is_finite() {
        return Err(Error::NonFinite("loss terms"));
    }
    let d = distortion(x, x_hat, cfg.distortion)?;
    Ok(combine(d, rate_bpp, penalty, cfg, phase))
}

fn combine(d: f64, r: f64, p: f64, cfg: &LossConfig, phase: u8) -> LossBreakdown {
    LossBreakdown {
        d,
        r,
        p,
        j: cfg.lambda * d + r + cfg.beta * p,
        phase,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub loss: LossBreakdown,
    pub max_a: f64,
}

pub const LOG_HEADER: &str = "iter,D,R,P,J,maxA,phase";

pub fn write_training_log(mut out: impl Write, rows: &[LogRow]) -> std::io::Result<()> {
    writeln!(out, "{LOG_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{:.9},{:.9},{:.9},{:.9},{:.9},{}",
            r.iter, r.loss.d, r.loss.r, r.loss.p, r.loss.j, r.max_a, r.loss.phase
        )?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PhaseSwitch {
    pub iter: usize,
    pub dominant: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Final parameters, or the last finite ones if training diverged.
    pub params: ModelParams,
    pub log: Vec<LogRow>,
    pub switch: Option<PhaseSwitch>,
    pub diverged_at: Option<usize>,
}

impl TrainOutcome {
    /// Turns a diverged run into an error.
    pub fn finished(self) -> Result<Self> {
        match self.diverged_at {
            Some(iter) => Err(Error::Diverged { iter }),
            None => Ok(self),
        }
    }
}

/// Which penalty a step uses.
#[derive(Clone, Copy, Debug)]
enum Penalty {
    Entropy,
    Gain(usize),
}

struct StepResult {
    loss: LossBreakdown,
    energy: Vec<f64>,
    grad: Vec<f64>,
}

/// Builds the loss graph for one batch and differentiates it.
#[allow(clippy::too_many_arguments)]
fn step(
    cfg: &ArchitectureConfig,
    params: &[f64],
    ranges: &[std::ops::Range<usize>; 3],
    x: &Tensor,
    loss_cfg: &LossConfig,
    quant: &QuantizerSpec,
    noise_seed: u64,
    penalty: Penalty,
    probe_size: usize,
) -> Result<StepResult> {
    let tape = Tape::new();
    let p = tape.leaf(Tensor::new(&[params.len()], params.to_vec()));
    let (n, _, h, w) = x.dims4();
    let pixels = (n * h * w) as f64;
    let parts = loss_graph(cfg, &tape, p, ranges, x, loss_cfg, quant, noise_seed, penalty, probe_size)?;
    let j = parts.j.item();
    let phase = match penalty {
        Penalty::Entropy => 1,
        Penalty::Gain(_) => 2,
    };
    let loss = LossBreakdown {
        d: parts.d,
        r: parts.bits / pixels,
        p: parts.p,
        j,
        phase,
    };
    if !j.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    let grads = tape.backward(parts.j);
    let grad = grads.get_or_zeros(p).into_data();
    Ok(StepResult {
        loss,
        energy: parts.energy,
        grad,
    })
}

struct GraphParts<'t> {
    j: Var<'t>,
    d: f64,
    bits: f64,
    p: f64,
    energy: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn loss_graph<'t>(
    cfg: &ArchitectureConfig,
    tape: &'t Tape,
    p: Var<'t>,
    ranges: &[std::ops::Range<usize>; 3],
    x: &Tensor,
    loss_cfg: &LossConfig,
    quant: &QuantizerSpec,
    noise_seed: u64,
    penalty: Penalty,
    probe_size: usize,
) -> Result<GraphParts<'t>> {
    let (n, _, h, w) = x.dims4();
    let pixels = (n * h * w) as f64;
    let theta = p.slice(ranges[0].clone(), &[ranges[0].len()]);
    let phi = p.slice(ranges[1].clone(), &[ranges[1].len()]);
    let psi = p.slice(ranges[2].clone(), &[ranges[2].len()]);
    let xv = tape.constant(x.clone());
    let y = analysis_graph(cfg, xv, theta);
    let y_tilde = quantize_train_var(y, quant, noise_seed)?;
    let x_hat = synthesis_graph(cfg, y_tilde, phi);
    let d = crate::metrics::distortion_graph(xv, x_hat, loss_cfg.distortion)?;
    let bits = rate_bits(&cfg.entropy, y_tilde, psi)?;
    let a = energy_fractions_graph(y);
    let energy = a.value().data().to_vec();
    let pen = match penalty {
        Penalty::Entropy => energy_entropy_graph(a),
        Penalty::Gain(e) => bk_probe_graph(cfg, phi, e, probe_size),
    };
    let j = d
        .scale(loss_cfg.lambda)
        .add(bits.scale(1.0 / pixels))
        .add(pen.scale(loss_cfg.beta));
    Ok(GraphParts {
        d: d.item(),
        bits: bits.item(),
        p: pen.item(),
        j,
        energy,
    })
}

fn noise_seed(seed: u64, iter: usize) -> u64 {
    seed ^ (iter as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn train_quantizer(cfg: &ArchitectureConfig, method: QuantMethod) -> QuantizerSpec {
    QuantizerSpec {
        method,
        center_min: cfg.entropy.center_min,
        center_max: cfg.entropy.center_max,
        ..QuantizerSpec::default()
    }
}

/// Runs the two-phase schedule from `init`. Deterministic given the inputs.
pub fn train(
    patches: &[ImageTensor],
    cfg: &ArchitectureConfig,
    init: &ModelParams,
    loss_cfg: &LossConfig,
    schedule: &TrainSchedule,
) -> Result<TrainOutcome> {
    run(patches, cfg, init, loss_cfg, schedule, true)
}

/// Continues training a pretrained model at a new lambda with `beta = 0`.
pub fn finetune_lambda(
    patches: &[ImageTensor],
    cfg: &ArchitectureConfig,
    pretrained: &ModelParams,
    lambda: f64,
    distortion: DistortionKind,
    schedule: &TrainSchedule,
) -> Result<TrainOutcome> {
    let loss_cfg = LossConfig::new(lambda, 0.0, distortion)?;
    run(patches, cfg, pretrained, &loss_cfg, schedule, false)
}

fn run(
    patches: &[ImageTensor],
    cfg: &ArchitectureConfig,
    init: &ModelParams,
    loss_cfg: &LossConfig,
    schedule: &TrainSchedule,
    two_phase: bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    init.check(cfg)?;
    loss_cfg.validate()?;
    schedule.validate()?;
    if patches.is_empty() {
        return Err(Error::Invalid("training needs at least one patch".into()));
    }
    for p in patches {
        patches[0].check_same_shape(p)?;
    }
    cfg.latent_dims(patches[0].width(), patches[0].height())?;
    let quant = train_quantizer(cfg, schedule.quantizer);
    let ranges = init.ranges();
    let mut params = init.flatten();
    let mut adam = Adam::new(schedule.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut log = Vec::with_capacity(schedule.total_iters);
    let mut switch = None;
    let mut penalty = Penalty::Entropy;
    let mut diverged_at = None;
    for iter in 0..schedule.total_iters {
        let batch: Vec<ImageTensor> = (0..schedule.batch_size)
            .map(|_| patches[rng.gen_range(0..patches.len())].clone())
            .collect();
        let x = stack(&batch)?;
        let seed = noise_seed(schedule.seed, iter);
        let result = match step(
            cfg,
            &params,
            &ranges,
            &x,
            loss_cfg,
            &quant,
            seed,
            penalty,
            schedule.probe_size,
        ) {
            Ok(r) => r,
            Err(Error::NonFinite(_)) => {
                log::error!("loss diverged at iteration {iter}; keeping the last finite parameters");
                diverged_at = Some(iter);
                break;
            }
            Err(e) => return Err(e),
        };
        let max_a = result.energy.iter().copied().fold(0.0, f64::max);
        log.push(LogRow {
            iter,
            loss: result.loss,
            max_a,
        });
        let mut next = params.clone();
        if adam.step(&mut next, &result.grad).is_err() || next.iter().any(|v| !v.is_finite()) {
            log::error!("update diverged at iteration {iter}; keeping the last finite parameters");
            diverged_at = Some(iter);
            break;
        }
        params = next;
        if two_phase && matches!(penalty, Penalty::Entropy) {
            let capped = iter + 1 >= schedule.phase1_max_iters;
            if max_a > schedule.phase_switch_threshold || capped {
                let dominant = dominant_channel(&result.energy);
                log::info!("phase 2 from iteration {} with dominant channel {dominant}", iter + 1);
                switch = Some(PhaseSwitch { iter: iter + 1, dominant });
                penalty = Penalty::Gain(dominant);
            }
        }
    }
    let mut out = init.unflatten(&params);
    out.version = init.version.wrapping_add(1);
    if schedule.total_iters == 0 {
        out = init.clone();
    }
    Ok(TrainOutcome {
        params: out,
        log,
        switch,
        diverged_at,
    })
}

/// Mean loss of `params` over `patches` with test-time rounding and a
/// zero penalty; used to compare runs.
pub fn evaluate_loss(
    patches: &[ImageTensor],
    cfg: &ArchitectureConfig,
    params: &ModelParams,
    loss_cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let x = stack(patches)?;
    let quant = train_quantizer(cfg, QuantMethod::Round);
    let tape = Tape::inference();
    let p = tape.constant(Tensor::new(&[params.flatten().len()], params.flatten()));
    let parts = loss_graph(cfg, &tape, p, &params.ranges(), &x, loss_cfg, &quant, 0, Penalty::Entropy, 1)?;
    let (n, _, h, w) = x.dims4();
    Ok(combine(parts.d, parts.bits / (n * h * w) as f64, parts.p, loss_cfg, 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference, gradient};
    use crate::synth::toy_patches;

    fn tiny_cfg() -> ArchitectureConfig {
        ArchitectureConfig {
            unit_channels: 4,
            latent_channels: 4,
            image_channels: 1,
            ..ArchitectureConfig::default()
        }
    }

    #[test]
    fn loss_arithmetic() {
        let cfg = LossConfig::new(8.0, 0.001, DistortionKind::Mse).unwrap();
        let b = combine(0.05, 0.4, 2.0, &cfg, 1);
        assert!((b.j - 0.802).abs() < 1e-12);
        let img = toy_patches(1, 16, 1, 0).unwrap().remove(0);
        let z = compute_loss(&img, &img, 0.0, 0.0, &cfg, 1).unwrap();
        assert_eq!(z.j, 0.0);
        for l in LAMBDA_LADDER {
            LossConfig::new(l, 0.0, DistortionKind::MsSsim).unwrap();
        }
        assert!(LossConfig::new(0.0, 0.0, DistortionKind::Mse).is_err());
        assert!(LossConfig::new(1.0, -1.0, DistortionKind::Mse).is_err());
    }

    #[test]
    fn zero_iterations_return_the_initialization() {
        let cfg = tiny_cfg();
        let init = ModelParams::init(&cfg, 4).unwrap();
        let schedule = TrainSchedule {
            phase1_max_iters: 0,
            total_iters: 0,
            ..TrainSchedule::default()
        };
        let patches = toy_patches(2, 16, 1, 0).unwrap();
        let loss = LossConfig::new(8.0, 0.001, DistortionKind::MsSsim).unwrap();
        let out = train(&patches, &cfg, &init, &loss, &schedule).unwrap();
        assert_eq!(out.params, init);
        assert!(out.log.is_empty());
    }

    #[test]
    fn codec_loss_gradient_matches_finite_differences() {
        let cfg = tiny_cfg();
        let init = ModelParams::init(&cfg, 8).unwrap();
        let x = stack(&toy_patches(1, 16, 1, 3).unwrap()).unwrap();
        let loss_cfg = LossConfig::new(8.0, 0.01, DistortionKind::Mse).unwrap();
        let quant = train_quantizer(&cfg, QuantMethod::UniformNoise);
        let ranges = init.ranges();
        let flat = init.flatten();
        for penalty in [Penalty::Entropy, Penalty::Gain(1)] {
            let eval = |p: &[f64]| {
                let tape = Tape::inference();
                let pv = tape.constant(Tensor::new(&[p.len()], p.to_vec()));
                loss_graph(&cfg, &tape, pv, &ranges, &x, &loss_cfg, &quant, 11, penalty, 4)
                    .unwrap()
                    .j
                    .item()
            };
            let (_, g) = gradient(&flat, |tape, p| {
                Ok(loss_graph(&cfg, tape, p, &ranges, &x, &loss_cfg, &quant, 11, penalty, 4)?.j)
            })
            .unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let coords: Vec<usize> = (0..12).map(|_| rng.gen_range(0..flat.len())).collect();
            let fd = finite_difference(&flat, &coords, 1e-4, eval);
            for (&i, n) in coords.iter().zip(&fd) {
                let rel = (g[i] - n).abs() / n.abs().max(1e-3);
                assert!(rel < 1e-4, "{penalty:?} coord {i}: {} vs {n}", g[i]);
            }
        }
    }

    #[test]
    fn training_reduces_the_loss_and_is_reproducible() {
        let cfg = tiny_cfg();
        let init = ModelParams::init(&cfg, 1).unwrap();
        let patches = toy_patches(16, 16, 1, 7).unwrap();
        let loss = LossConfig::new(16.0, 0.0, DistortionKind::Mse).unwrap();
        let schedule = TrainSchedule {
            phase1_max_iters: 50,
            total_iters: 150,
            learning_rate: 3e-3,
            batch_size: 4,
            seed: 9,
            ..TrainSchedule::default()
        };
        let a = train(&patches, &cfg, &init, &loss, &schedule).unwrap().finished().unwrap();
        let b = train(&patches, &cfg, &init, &loss, &schedule).unwrap();
        assert_eq!(a.params, b.params);
        let head: f64 = a.log[..10].iter().map(|r| r.loss.j).sum::<f64>() / 10.0;
        let tail: f64 = a.log[140..].iter().map(|r| r.loss.j).sum::<f64>() / 10.0;
        assert!(tail < 0.5 * head, "{head} -> {tail}");
        assert!(a.switch.is_some());
        let mut csv = Vec::new();
        write_training_log(&mut csv, &a.log).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with(LOG_HEADER));
        assert_eq!(text.lines().count(), 151);
    }
}
