//! Analysis transform `y = f(x)` and synthesis transform `x_hat = g(y_hat)`.
//!
//! Two backends share one parameter layout scheme:
//!
//! * **Convolutional**: `n` downsampling units of two convolutions each (the
//!   second with stride 2), mirrored on the synthesis side by a stride-1
//!   convolution followed by a stride-2 transposed convolution.
//! * **Linear**: a block transform on `2^n x 2^n` tiles with `K` basis
//!   vectors per tile, i.e. a classical critically-or-under-sampled subband
//!   coder. It is expressed as a single convolution whose kernel and stride
//!   both equal the tile size, so both backends run through the same
//!   differentiable operators.

mod model_file;

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::entropy_model::{EntropyConfig, FactorizedModel};
use crate::error::{Error, Result};
use crate::media_io::ImageTensor;
use crate::tensor::Tensor;

pub use model_file::{decode_model, encode_model, load_model, save_model, Model, MODEL_MAGIC, MODEL_VERSION};
pub(crate) use model_file::{read_config, write_config};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backend {
    Linear,
    Convolutional,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    /// Smooth leaky rectifier, slope 0.2 on negatives.
    SmoothLeaky,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchitectureConfig {
    pub backend: Backend,
    /// Number of downsampling units `n`; latents are `H / 2^n x W / 2^n`.
    pub units: usize,
    /// Latent channel count `K`.
    pub latent_channels: usize,
    /// Width of every hidden convolution layer.
    pub unit_channels: usize,
    pub kernel_size: usize,
    pub activation: Activation,
    /// 1 (grayscale) or 3 (RGB).
    pub image_channels: usize,
    pub entropy: EntropyConfig,
}

impl Default for ArchitectureConfig {
    /// Desk-scale convolutional model: `n = 2`, `K = 8`, 16 hidden channels.
    fn default() -> Self {
        Self {
            backend: Backend::Convolutional,
            units: 2,
            latent_channels: 8,
            unit_channels: 16,
            kernel_size: 3,
            activation: Activation::SmoothLeaky,
            image_channels: 3,
            entropy: EntropyConfig::default(),
        }
    }
}

/// One convolution (or transposed convolution) layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub transposed: bool,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub activation: bool,
}

impl LayerSpec {
    pub fn weight_len(&self) -> usize {
        self.in_channels * self.out_channels * self.kernel * self.kernel
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.out_channels
    }

    /// `[out, in, k, k]` for convolutions, `[in, out, k, k]` for transposed ones.
    pub fn weight_shape(&self) -> [usize; 4] {
        let (a, b) = if self.transposed {
            (self.in_channels, self.out_channels)
        } else {
            (self.out_channels, self.in_channels)
        };
        [a, b, self.kernel, self.kernel]
    }

    fn fan_in(&self) -> f64 {
        let taps = (self.in_channels * self.kernel * self.kernel) as f64;
        if self.transposed {
            taps / (self.stride * self.stride) as f64
        } else {
            taps
        }
    }
}

impl ArchitectureConfig {
    /// The configuration used for full-size experiments: `n = 3`, `K = 48`,
    /// 128-channel hidden layers.
    pub fn paper_scale() -> Self {
        Self {
            units: 3,
            latent_channels: 48,
            unit_channels: 128,
            ..Self::default()
        }
    }

    /// Block-transform backend with `2^units` tiles.
    pub fn linear(units: usize, latent_channels: usize, image_channels: usize) -> Self {
        Self {
            backend: Backend::Linear,
            units,
            latent_channels,
            unit_channels: 0,
            kernel_size: 1 << units,
            activation: Activation::Identity,
            image_channels,
            entropy: EntropyConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.units == 0 || self.units > 6 {
            return fail(format!("units = {} (expected 1..=6)", self.units));
        }
        if self.latent_channels == 0 {
            return fail("latent channel count must be at least 1".into());
        }
        if self.image_channels != 1 && self.image_channels != 3 {
            return fail(format!("image channels = {}", self.image_channels));
        }
        match self.backend {
            Backend::Convolutional => {
                if self.kernel_size.is_multiple_of(2) {
                    return fail(format!("kernel size {} must be odd", self.kernel_size));
                }
                if self.unit_channels == 0 {
                    return fail("unit channel count must be at least 1".into());
                }
            }
            Backend::Linear => {
                if self.kernel_size != self.block_size() {
                    return fail(format!(
                        "linear backend tile is {} but kernel size is {}",
                        self.block_size(),
                        self.kernel_size
                    ));
                }
                if self.activation != Activation::Identity {
                    return fail("linear backend cannot use a nonlinearity".into());
                }
            }
        }
        self.entropy.validate()
    }

    /// `2^n`, the total downsampling factor per axis.
    pub fn block_size(&self) -> usize {
        1 << self.units
    }

    /// Latent `(width, height)` for an input of the given size.
    pub fn latent_dims(&self, width: usize, height: usize) -> Result<(usize, usize)> {
        let b = self.block_size();
        if !width.is_multiple_of(b) || !height.is_multiple_of(b) || width == 0 || height == 0 {
            return Err(Error::Dimension(format!(
                "{width}x{height} input is not divisible by 2^{} = {b}",
                self.units
            )));
        }
        Ok((width / b, height / b))
    }

    pub fn analysis_layers(&self) -> Vec<LayerSpec> {
        match self.backend {
            Backend::Linear => vec![LayerSpec {
                transposed: false,
                in_channels: self.image_channels,
                out_channels: self.latent_channels,
                kernel: self.block_size(),
                stride: self.block_size(),
                pad: 0,
                activation: false,
            }],
            Backend::Convolutional => {
                let mut layers = Vec::with_capacity(2 * self.units);
                let mut ch = self.image_channels;
                let act = self.activation == Activation::SmoothLeaky;
                for u in 0..self.units {
                    let last = u + 1 == self.units;
                    layers.push(self.conv(ch, self.unit_channels, 1, false, act));
                    let out = if last { self.latent_channels } else { self.unit_channels };
                    layers.push(self.conv(self.unit_channels, out, 2, false, act && !last));
                    ch = out;
                }
                layers
            }
        }
    }

    pub fn synthesis_layers(&self) -> Vec<LayerSpec> {
        match self.backend {
            Backend::Linear => vec![LayerSpec {
                transposed: true,
                in_channels: self.latent_channels,
                out_channels: self.image_channels,
                kernel: self.block_size(),
                stride: self.block_size(),
                pad: 0,
                activation: false,
            }],
            Backend::Convolutional => {
                let mut layers = Vec::with_capacity(2 * self.units);
                let mut ch = self.latent_channels;
                let act = self.activation == Activation::SmoothLeaky;
                for u in 0..self.units {
                    let last = u + 1 == self.units;
                    layers.push(self.conv(ch, self.unit_channels, 1, false, act));
                    let out = if last { self.image_channels } else { self.unit_channels };
                    layers.push(self.conv(self.unit_channels, out, 2, true, act && !last));
                    ch = out;
                }
                layers
            }
        }
    }

    fn conv(&self, cin: usize, cout: usize, stride: usize, transposed: bool, activation: bool) -> LayerSpec {
        LayerSpec {
            transposed,
            in_channels: cin,
            out_channels: cout,
            kernel: self.kernel_size,
            stride,
            pad: self.kernel_size / 2,
            activation,
        }
    }

    pub fn analysis_param_count(&self) -> usize {
        self.analysis_layers().iter().map(LayerSpec::param_len).sum()
    }

    pub fn synthesis_param_count(&self) -> usize {
        self.synthesis_layers().iter().map(LayerSpec::param_len).sum()
    }

    pub fn entropy_param_count(&self) -> usize {
        self.latent_channels * self.entropy.params_per_channel()
    }
}

/// Trainable parameters of the whole codec.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// Analysis transform parameters (theta).
    pub analysis: Vec<f64>,
    /// Synthesis transform parameters (phi).
    pub synthesis: Vec<f64>,
    /// Factorized entropy model parameters.
    pub entropy: Vec<f64>,
    /// Free-form revision counter, bumped by training.
    pub version: u32,
}

impl ModelParams {
    /// Random initialization; deterministic in `seed`.
    pub fn init(cfg: &ArchitectureConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init_layers = |layers: &[LayerSpec], rng: &mut ChaCha8Rng| -> Vec<f64> {
            let mut out = Vec::new();
            for l in layers {
                let std = 1.0 / l.fan_in().sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                out.extend((0..l.weight_len()).map(|_| normal.sample(rng)));
                out.extend(std::iter::repeat_n(0.0, l.out_channels));
            }
            out
        };
        let analysis = init_layers(&cfg.analysis_layers(), &mut rng);
        let mut synthesis = init_layers(&cfg.synthesis_layers(), &mut rng);
        // Start the reconstruction at mid-gray rather than black; a near-zero
        // output leaves MS-SSIM training with almost no gradient. The linear
        // backend keeps zero biases so it stays exactly linear.
        if cfg.backend == Backend::Convolutional {
            let out_bias = synthesis.len() - cfg.image_channels;
            synthesis[out_bias..].fill(0.5);
        }
        let entropy = FactorizedModel::init_params(&cfg.entropy, cfg.latent_channels, seed ^ 0x5eed);
        Ok(Self {
            analysis,
            synthesis,
            entropy,
            version: 0,
        })
    }

    /// Linear backend whose analysis rows are the first `K` orthonormal DCT
    /// basis images scaled by `gain`, with synthesis scaled by `1 / gain`.
    /// When `K` equals the tile sample count the pair is an exact inverse.
    pub fn orthonormal_block(cfg: &ArchitectureConfig, gain: f64) -> Result<Self> {
        cfg.validate()?;
        if cfg.backend != Backend::Linear {
            return Err(Error::Config("orthonormal_block needs the linear backend".into()));
        }
        let b = cfg.block_size();
        let c = cfg.image_channels;
        let d = c * b * b;
        if cfg.latent_channels > d {
            return Err(Error::Config(format!(
                "{} basis vectors requested but a tile has only {d} samples",
                cfg.latent_channels
            )));
        }
        let basis_1d = |u: usize, y: usize| -> f64 {
            let alpha = if u == 0 { (1.0 / b as f64).sqrt() } else { (2.0 / b as f64).sqrt() };
            alpha * (std::f64::consts::PI * (2 * y + 1) as f64 * u as f64 / (2 * b) as f64).cos()
        };
        let mut freqs: Vec<(usize, usize)> = (0..b).flat_map(|u| (0..b).map(move |v| (u, v))).collect();
        freqs.sort_by_key(|&(u, v)| (u + v, u));
        let order: Vec<(usize, usize, usize)> = freqs
            .iter()
            .flat_map(|&(u, v)| (0..c).map(move |ch| (ch, u, v)))
            .take(cfg.latent_channels)
            .collect();
        let k = cfg.latent_channels;
        // Analysis weight [K, C, b, b]; synthesis weight [K, C, b, b] as well.
        let mut analysis = vec![0.0; k * d + k];
        let mut synthesis = vec![0.0; k * d + c];
        for (ki, &(ch, u, v)) in order.iter().enumerate() {
            for y in 0..b {
                for x in 0..b {
                    let val = basis_1d(u, y) * basis_1d(v, x);
                    let idx = ki * d + ch * b * b + y * b + x;
                    analysis[idx] = gain * val;
                    synthesis[idx] = val / gain;
                }
            }
        }
        Ok(Self {
            analysis,
            synthesis,
            entropy: FactorizedModel::init_params(&cfg.entropy, k, 0x5eed),
            version: 0,
        })
    }

    pub fn check(&self, cfg: &ArchitectureConfig) -> Result<()> {
        let expect = [
            ("analysis", self.analysis.len(), cfg.analysis_param_count()),
            ("synthesis", self.synthesis.len(), cfg.synthesis_param_count()),
            ("entropy", self.entropy.len(), cfg.entropy_param_count()),
        ];
        for (name, got, want) in expect {
            if got != want {
                return Err(Error::Config(format!(
                    "{name} parameter count {got} does not match configuration ({want})"
                )));
            }
        }
        if self.all().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model parameters"));
        }
        Ok(())
    }

    fn all(&self) -> impl Iterator<Item = &f64> {
        self.analysis.iter().chain(&self.synthesis).chain(&self.entropy)
    }

    /// Concatenation `[analysis | synthesis | entropy]`.
    pub fn flatten(&self) -> Vec<f64> {
        self.all().copied().collect()
    }

    /// Index ranges of the three blocks inside [`ModelParams::flatten`].
    pub fn ranges(&self) -> [Range<usize>; 3] {
        let a = self.analysis.len();
        let s = self.synthesis.len();
        let e = self.entropy.len();
        [0..a, a..a + s, a + s..a + s + e]
    }

    pub fn unflatten(&self, flat: &[f64]) -> ModelParams {
        let [a, s, e] = self.ranges();
        ModelParams {
            analysis: flat[a].to_vec(),
            synthesis: flat[s].to_vec(),
            entropy: flat[e].to_vec(),
            version: self.version,
        }
    }

    /// Rounds every parameter to `f32` precision, the storage precision of
    /// the model file.
    pub fn rounded_to_f32(&self) -> ModelParams {
        let r = |v: &Vec<f64>| v.iter().map(|&x| f64::from(x as f32)).collect();
        ModelParams {
            analysis: r(&self.analysis),
            synthesis: r(&self.synthesis),
            entropy: r(&self.entropy),
            version: self.version,
        }
    }
}

/// Latent stack `K x (H / 2^n) x (W / 2^n)`, stored planar.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTensor {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl LatentTensor {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Dimension(format!(
                "{width}x{height}x{channels} latent needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent values"));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn plane(&self, k: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[k * n..(k + 1) * n]
    }

    pub fn plane_mut(&mut self, k: usize) -> &mut [f64] {
        let n = self.width * self.height;
        &mut self.data[k * n..(k + 1) * n]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> LatentTensor {
        LatentTensor {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.channels, self.height, self.width], self.data.clone())
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (n, c, h, w) = t.dims4();
        if n != 1 {
            return Err(Error::Dimension(format!("batch of {n} is not a single latent")));
        }
        Self::new(w, h, c, t.data().to_vec())
    }
}

fn layer_vars<'t>(
    params: Var<'t>,
    offset: &mut usize,
    layer: &LayerSpec,
) -> (Var<'t>, Var<'t>) {
    let wlen = layer.weight_len();
    let w = params.slice(*offset..*offset + wlen, &layer.weight_shape());
    *offset += wlen;
    let b = params.slice(*offset..*offset + layer.out_channels, &[layer.out_channels]);
    *offset += layer.out_channels;
    (w, b)
}

fn run_layers<'t>(mut h: Var<'t>, params: Var<'t>, layers: &[LayerSpec]) -> Var<'t> {
    let mut offset = 0;
    for layer in layers {
        let (w, b) = layer_vars(params, &mut offset, layer);
        h = if layer.transposed {
            let (_, _, hh, ww) = h.value().dims4();
            h.conv_transpose2d(w, b, layer.stride, layer.pad, hh * layer.stride, ww * layer.stride)
        } else {
            h.conv2d(w, b, layer.stride, layer.pad)
        };
        if layer.activation {
            h = h.smooth_leaky_relu();
        }
    }
    h
}

/// Differentiable analysis transform: `[N, C, H, W] -> [N, K, H/2^n, W/2^n]`.
/// `theta` is the flat analysis parameter vector.
pub fn analysis_graph<'t>(cfg: &ArchitectureConfig, x: Var<'t>, theta: Var<'t>) -> Var<'t> {
    run_layers(x, theta, &cfg.analysis_layers())
}

/// Differentiable synthesis transform: `[N, K, h, w] -> [N, C, h 2^n, w 2^n]`.
pub fn synthesis_graph<'t>(cfg: &ArchitectureConfig, y: Var<'t>, phi: Var<'t>) -> Var<'t> {
    run_layers(y, phi, &cfg.synthesis_layers())
}

/// Batched analysis without gradient tracking.
pub fn analyze_batch(x: &Tensor, params: &ModelParams, cfg: &ArchitectureConfig) -> Result<Tensor> {
    let (_, c, h, w) = x.dims4();
    if c != cfg.image_channels {
        return Err(Error::Dimension(format!(
            "input has {c} channels, model expects {}",
            cfg.image_channels
        )));
    }
    cfg.latent_dims(w, h)?;
    params.check(cfg)?;
    let tape = Tape::inference();
    let theta = tape.constant(Tensor::new(&[params.analysis.len()], params.analysis.clone()));
    let y = analysis_graph(cfg, tape.constant(x.clone()), theta);
    let out = (*y.value()).clone();
    Ok(out)
}

/// Batched synthesis without gradient tracking.
pub fn synthesize_batch(y: &Tensor, params: &ModelParams, cfg: &ArchitectureConfig) -> Result<Tensor> {
    let (_, k, _, _) = y.dims4();
    if k != cfg.latent_channels {
        return Err(Error::Dimension(format!(
            "latent has {k} channels, model expects {}",
            cfg.latent_channels
        )));
    }
    params.check(cfg)?;
    let tape = Tape::inference();
    let phi = tape.constant(Tensor::new(&[params.synthesis.len()], params.synthesis.clone()));
    let x = synthesis_graph(cfg, tape.constant(y.clone()), phi);
    let out = (*x.value()).clone();
    Ok(out)
}

/// `y = f_theta(x)`.
pub fn analyze(x: &ImageTensor, params: &ModelParams, cfg: &ArchitectureConfig) -> Result<LatentTensor> {
    LatentTensor::from_tensor(&analyze_batch(&x.to_tensor(), params, cfg)?)
}

/// `x_hat = g_phi(y_hat)`. Output samples are not clamped.
pub fn synthesize(y: &LatentTensor, params: &ModelParams, cfg: &ArchitectureConfig) -> Result<ImageTensor> {
    ImageTensor::from_tensor(&synthesize_batch(&y.to_tensor(), params, cfg)?)
}
