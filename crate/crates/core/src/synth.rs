//! Deterministic synthetic pictures and sequences for tests, benches and the
//! toy training task.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::media_io::{FrameSequence, ImageTensor};

/// A piecewise-smooth picture: a tilted gradient, a few soft-edged ellipses
/// and a faint oriented grating.
pub fn toy_image(width: usize, height: usize, channels: usize, seed: u64) -> Result<ImageTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: Vec<f64> = (0..channels).map(|_| rng.gen_range(0.2..0.8)).collect();
    let (gx, gy) = (rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4));
    let blobs: Vec<([f64; 4], Vec<f64>)> = (0..rng.gen_range(2..5))
        .map(|_| {
            let geom = [
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.08..0.35),
                rng.gen_range(0.08..0.35),
            ];
            let color = (0..channels).map(|_| rng.gen_range(-0.4..0.4)).collect();
            (geom, color)
        })
        .collect();
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let freq = rng.gen_range(0.1..0.5);
    let amp = rng.gen_range(0.0..0.08);
    let (w, h) = (width as f64, height as f64);
    ImageTensor::from_fn(width, height, channels, |c, y, x| {
        let (u, v) = (x as f64 / w, y as f64 / h);
        let mut s = base[c] + gx * (u - 0.5) + gy * (v - 0.5);
        for (g, color) in &blobs {
            let d = ((u - g[0]) / g[2]).powi(2) + ((v - g[1]) / g[3]).powi(2);
            s += color[c] / (1.0 + (8.0 * (d - 1.0)).exp());
        }
        s += amp * (freq * (x as f64 * angle.cos() + y as f64 * angle.sin())).sin();
        s.clamp(0.0, 1.0)
    })
}

/// `count` independent toy pictures.
pub fn toy_patches(count: usize, size: usize, channels: usize, seed: u64) -> Result<Vec<ImageTensor>> {
    (0..count)
        .map(|i| toy_image(size, size, channels, seed.wrapping_mul(1_000_003).wrapping_add(i as u64)))
        .collect()
}

/// Frames cropped from a wider toy picture with a window sliding `dx` pixels
/// to the right per frame.
pub fn translating_sequence(
    width: usize,
    height: usize,
    channels: usize,
    frames: usize,
    dx: usize,
    seed: u64,
) -> Result<FrameSequence> {
    let canvas = toy_image(width + dx * frames, height, channels, seed)?;
    let seq = (0..frames)
        .map(|t| canvas.crop(t * dx, 0, width, height).map(|f| f.quantized_8bit()))
        .collect::<Result<Vec<_>>>()?;
    FrameSequence::new(seq, 30.0)
}

/// `frames` copies of one toy picture.
pub fn static_sequence(width: usize, height: usize, channels: usize, frames: usize, seed: u64) -> Result<FrameSequence> {
    let img = toy_image(width, height, channels, seed)?.quantized_8bit();
    FrameSequence::new(vec![img; frames], 30.0)
}

/// Frames of independent uniform 8-bit noise.
pub fn noise_sequence(width: usize, height: usize, channels: usize, frames: usize, seed: u64) -> Result<FrameSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seq = (0..frames)
        .map(|_| {
            let data = (0..width * height * channels)
                .map(|_| f64::from(rng.gen_range(0u8..=255)) / 255.0)
                .collect();
            ImageTensor::new(width, height, channels, data)
        })
        .collect::<Result<Vec<_>>>()?;
    FrameSequence::new(seq, 30.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_are_deterministic_and_in_range() {
        let a = toy_image(40, 24, 3, 5).unwrap();
        assert_eq!(a, toy_image(40, 24, 3, 5).unwrap());
        assert_ne!(a, toy_image(40, 24, 3, 6).unwrap());
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn translation_shifts_content() {
        let seq = translating_sequence(16, 8, 1, 3, 2, 1).unwrap();
        let f = seq.frames();
        for y in 0..8 {
            for x in 0..14 {
                assert_eq!(f[1].get(0, y, x), f[0].get(0, y, x + 2));
            }
        }
    }
}
