//! Train-time quantization surrogates and test-time rounding.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::transforms::LatentTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMethod {
    Round,
    UniformNoise,
    SoftVector,
    StraightThrough,
}

impl std::str::FromStr for QuantMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "round" => Ok(Self::Round),
            "noise" | "uniformnoise" => Ok(Self::UniformNoise),
            "soft" | "softvector" => Ok(Self::SoftVector),
            "ste" | "straightthrough" => Ok(Self::StraightThrough),
            _ => Err(Error::Invalid(format!("unknown quantizer {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizerSpec {
    pub method: QuantMethod,
    /// Shaping parameter of the soft quantizer.
    pub sigma: f64,
    pub center_min: i32,
    pub center_max: i32,
}

impl Default for QuantizerSpec {
    fn default() -> Self {
        Self {
            method: QuantMethod::UniformNoise,
            sigma: 1.0,
            center_min: -32,
            center_max: 31,
        }
    }
}

impl QuantizerSpec {
    pub fn new(method: QuantMethod) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.center_min >= self.center_max {
            return Err(Error::Config(format!(
                "quantizer centers [{}, {}] are empty",
                self.center_min, self.center_max
            )));
        }
        if self.method == QuantMethod::SoftVector && !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("soft quantizer sigma {}", self.sigma)));
        }
        Ok(())
    }

    fn bounds(&self) -> (f64, f64) {
        (f64::from(self.center_min), f64::from(self.center_max))
    }
}

/// `round` with ties away from zero.
#[inline]
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

const NOISE_CHUNK: usize = 4096;

/// Uniform noise on `(-0.5, 0.5)` for element indices `0..len`. Element `i`
/// is the `i`-th 64-bit word of the ChaCha8 stream seeded with `seed`, so the
/// value depends only on `(seed, i)`.
pub fn uniform_noise(seed: u64, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    out.par_chunks_mut(NOISE_CHUNK).enumerate().for_each(|(c, chunk)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_word_pos(2 * (c * NOISE_CHUNK) as u128);
        for v in chunk {
            *v = unit_open(rng.next_u64()) - 0.5;
        }
    });
    out
}

/// Maps 64 random bits to the open interval `(0, 1)`.
#[inline]
fn unit_open(bits: u64) -> f64 {
    ((bits >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Soft quantizer value and derivative at `y`.
fn soft_vector(y: f64, sigma: f64, lo: i32, hi: i32) -> (f64, f64) {
    let nearest = y.round().clamp(f64::from(lo), f64::from(hi));
    let peak = -sigma * (y - nearest).powi(2);
    let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
    for c in lo..=hi {
        let c = f64::from(c);
        let w = (-sigma * (y - c).powi(2) - peak).exp();
        z += w;
        m1 += w * c;
        m2 += w * c * c;
    }
    let mean = m1 / z;
    // d/dy of the weighted mean is 2 sigma times the weighted variance.
    let var = (m2 / z - mean * mean).max(0.0);
    (mean, 2.0 * sigma * var)
}

/// Train-time quantization of plain values. Inputs are first clamped to the
/// center range.
pub fn quantize_train(y: &LatentTensor, spec: &QuantizerSpec, rng_seed: u64) -> Result<LatentTensor> {
    spec.validate()?;
    let (v, _) = quantize_values(&y.data, spec, rng_seed);
    LatentTensor::new(y.width, y.height, y.channels, v)
}

fn quantize_values(y: &[f64], spec: &QuantizerSpec, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let (lo, hi) = spec.bounds();
    let inside = |v: f64| if v >= lo && v <= hi { 1.0 } else { 0.0 };
    match spec.method {
        QuantMethod::Round => (y.iter().map(|&v| round_half_away(v.clamp(lo, hi))).collect(), vec![0.0; y.len()]),
        QuantMethod::StraightThrough => (
            y.iter().map(|&v| round_half_away(v.clamp(lo, hi))).collect(),
            y.iter().map(|&v| inside(v)).collect(),
        ),
        QuantMethod::UniformNoise => {
            let noise = uniform_noise(seed, y.len());
            (
                y.iter().zip(&noise).map(|(&v, u)| v.clamp(lo, hi) + u).collect(),
                y.iter().map(|&v| inside(v)).collect(),
            )
        }
        QuantMethod::SoftVector => y
            .par_iter()
            .map(|&v| soft_vector(v, spec.sigma, spec.center_min, spec.center_max))
            .unzip(),
    }
}

/// Differentiable train-time quantizer on a tape value.
pub fn quantize_train_var<'t>(y: Var<'t>, spec: &QuantizerSpec, rng_seed: u64) -> Result<Var<'t>> {
    spec.validate()?;
    let yv = y.value();
    let (values, slopes) = quantize_values(yv.data(), spec, rng_seed);
    let shape = yv.shape().to_vec();
    Ok(y.tape().op(Tensor::new(&shape, values), &[y], move |g| {
        vec![Tensor::new(&shape, g.data().iter().zip(&slopes).map(|(a, b)| a * b).collect())]
    }))
}

/// Test-time quantization: clamp to the center range, then round half away
/// from zero. Clamping is logged.
pub fn quantize_test(y: &LatentTensor, spec: &QuantizerSpec) -> LatentTensor {
    let (lo, hi) = spec.bounds();
    let clipped = y.data.iter().filter(|&&v| v < lo || v > hi).count();
    if clipped > 0 {
        log::warn!("{clipped} latent values outside [{lo}, {hi}] were clamped");
    }
    y.map(|v| round_half_away(v.clamp(lo, hi)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference, gradient};
    use proptest::prelude::*;

    fn latent(values: Vec<f64>) -> LatentTensor {
        let n = values.len();
        LatentTensor::new(n, 1, 1, values).unwrap()
    }

    #[test]
    fn noise_moments_match_uniform_distribution() {
        let y = LatentTensor::zeros(1000, 1000, 1);
        let q = quantize_train(&y, &QuantizerSpec::new(QuantMethod::UniformNoise), 7).unwrap();
        let n = q.data.len() as f64;
        let mean = q.data.iter().sum::<f64>() / n;
        let var = q.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.002, "mean {mean}");
        assert!((var * 12.0 - 1.0).abs() < 0.02, "var {var}");
        assert!(q.data.iter().all(|v| v.abs() < 0.5));
    }

    #[test]
    fn noise_depends_only_on_seed_and_index() {
        let long = uniform_noise(99, 10_000);
        let short = uniform_noise(99, 5000);
        assert_eq!(&long[..5000], &short[..]);
        assert_ne!(uniform_noise(100, 10), uniform_noise(99, 10));
    }

    #[test]
    fn soft_quantizer_examples() {
        let spec = QuantizerSpec {
            method: QuantMethod::SoftVector,
            sigma: 1e4,
            center_min: -8,
            center_max: 8,
        };
        let q = quantize_train(&latent(vec![3.0]), &spec, 0).unwrap();
        assert!((q.data[0] - 3.0).abs() < 1e-6);
        let two = QuantizerSpec {
            center_min: 0,
            center_max: 1,
            sigma: 3.0,
            ..spec
        };
        assert_eq!(quantize_train(&latent(vec![0.5]), &two, 0).unwrap().data[0], 0.5);
    }

    #[test]
    fn test_rounding_examples() {
        let spec = QuantizerSpec::default();
        let q = quantize_test(&latent(vec![0.4, -1.5, 1.5, -0.4, 7.0, 100.0, -40.2]), &spec);
        assert_eq!(q.data, vec![0.0, -2.0, 2.0, -0.0, 7.0, 31.0, -32.0]);
    }

    #[test]
    fn straight_through_forward_is_round_and_backward_is_identity() {
        let spec = QuantizerSpec::new(QuantMethod::StraightThrough);
        let y = vec![0.3, -1.7, 2.5, 4.49];
        let (value, grad) = gradient(&y, |_, p| {
            let q = quantize_train_var(p, &spec, 0)?;
            Ok(q.mul(p.tape().constant(Tensor::new(&[4], vec![1.0, 2.0, 3.0, 4.0]))).sum())
        })
        .unwrap();
        assert_eq!(value, 0.0 - 4.0 + 9.0 + 16.0);
        assert_eq!(grad, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn soft_quantizer_gradient_matches_finite_differences() {
        let spec = QuantizerSpec {
            method: QuantMethod::SoftVector,
            sigma: 2.0,
            center_min: -4,
            center_max: 4,
        };
        let y = vec![0.2, -1.3, 2.75, 3.9];
        let (_, grad) = gradient(&y, |_, p| Ok(quantize_train_var(p, &spec, 0)?.sum())).unwrap();
        let fd = finite_difference(&y, &[0, 1, 2, 3], 1e-6, |v| {
            quantize_train(&latent(v.to_vec()), &spec, 0).unwrap().data.iter().sum()
        });
        for (a, b) in grad.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    proptest! {
        #[test]
        fn rounding_error_is_at_most_half(v in -31.0f64..31.0) {
            let q = quantize_test(&latent(vec![v]), &QuantizerSpec::default());
            prop_assert!((q.data[0] - v).abs() <= 0.5);
            prop_assert_eq!(quantize_test(&q, &QuantizerSpec::default()), q);
        }

        #[test]
        fn sharp_soft_quantizer_converges_to_round(base in -7i32..7, offset in 0.05f64..0.45, up in any::<bool>()) {
            let v = f64::from(base) + if up { offset } else { -offset };
            let spec = QuantizerSpec { method: QuantMethod::SoftVector, sigma: 1e4, center_min: -8, center_max: 8 };
            let q = quantize_train(&latent(vec![v]), &spec, 0).unwrap();
            prop_assert!((q.data[0] - round_half_away(v)).abs() < 1e-3);
        }

        #[test]
        fn soft_quantizer_stays_inside_centers(v in -100.0f64..100.0, sigma in 0.01f64..50.0) {
            let spec = QuantizerSpec { method: QuantMethod::SoftVector, sigma, center_min: -5, center_max: 6 };
            let q = quantize_train(&latent(vec![v]), &spec, 0).unwrap().data[0];
            prop_assert!((-5.0..=6.0).contains(&q));
        }

        #[test]
        fn straight_through_forward_equals_round(v in -31.0f64..31.0, seed in any::<u64>()) {
            let spec = QuantizerSpec::new(QuantMethod::StraightThrough);
            let q = quantize_train(&latent(vec![v]), &spec, seed).unwrap();
            prop_assert_eq!(q.data[0], round_half_away(v));
        }
    }
}
