//! The temporal layer: GOP sizing from temporal entropy, hierarchical
//! midpoint interpolation and residual coding through the image codec.
//!
//! The encoder runs the decoder's loop on its own reconstructions, so every
//! prediction it forms is exactly the one the decoder will form.

use std::collections::BTreeMap;

use crate::codec::{CodingMode, ImageCodec};
use crate::error::{Error, Result};
use crate::media_io::{FrameSequence, ImageTensor, SampleRange};
use crate::metrics::{mse, ms_ssim, msssim_to_db, psnr, RdPoint};

/// Low-motion anchor value of the temporal entropy (maps to the long GOP).
pub const ANCHOR_LOW_MOTION: f64 = 2.673;
/// High-motion anchor value of the temporal entropy (maps to the middle GOP).
pub const ANCHOR_HIGH_MOTION: f64 = 7.999;

#[derive(Clone, Debug, PartialEq)]
pub struct SchedulerConfig {
    /// Distance between the two frames whose difference sets `H_T`.
    pub tau: usize,
    pub lower: f64,
    pub upper: f64,
    /// GOP sizes for high, medium and low temporal entropy.
    pub gop_sizes: [usize; 3],
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            tau: 16,
            lower: 6.0,
            upper: 8.0,
            gop_sizes: [2, 8, 16],
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau == 0 {
            return Err(Error::Config("tau must be at least 1".into()));
        }
        if !(self.lower > 0.0 && self.lower < self.upper && self.upper.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < lower < upper, got {} and {}",
                self.lower, self.upper
            )));
        }
        if self.gop_sizes.iter().any(|&t| t < 2 || !t.is_power_of_two()) {
            return Err(Error::Config(format!("GOP sizes {:?} must be powers of two >= 2", self.gop_sizes)));
        }
        Ok(())
    }
}

/// Signed per-sample difference `xt - x0` in 8-bit code values.
pub fn temporal_residual(x0: &ImageTensor, xt: &ImageTensor) -> Result<Vec<i16>> {
    x0.check_same_shape(xt)?;
    let code = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as i16;
    Ok(x0.data().iter().zip(xt.data()).map(|(&a, &b)| code(b) - code(a)).collect())
}

/// Shannon entropy in bits of the histogram of difference values.
pub fn temporal_entropy(diff: &[i16]) -> f64 {
    if diff.is_empty() {
        return 0.0;
    }
    let mut hist = vec![0usize; 511];
    for &d in diff {
        hist[(d + 255) as usize] += 1;
    }
    let n = diff.len() as f64;
    hist.iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            p * (1.0 / p).log2()
        })
        .sum()
}

/// Step function of the temporal entropy, closed on the left of each interval.
pub fn select_gop_size(h_t: f64, cfg: &SchedulerConfig) -> usize {
    let [short, medium, long] = cfg.gop_sizes;
    if h_t >= cfg.upper {
        short
    } else if h_t >= cfg.lower {
        medium
    } else {
        long
    }
}

/// One interpolation: `target` is predicted from the frames `left` and `right`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Step {
    pub target: usize,
    pub left: usize,
    pub right: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GopPlan {
    pub size: usize,
    pub h_t: f64,
    pub steps: Vec<Step>,
}

/// Breadth-first midpoint recursion over `(0, size)`, in decode order.
pub fn build_schedule(size: usize) -> Result<Vec<Step>> {
    if size == 0 || !size.is_power_of_two() {
        return Err(Error::Config(format!("GOP size {size} is not a power of two")));
    }
    let mut steps = Vec::with_capacity(size.saturating_sub(1));
    let mut spans = vec![(0, size)];
    while spans[0].1 - spans[0].0 >= 2 {
        let mut next = Vec::with_capacity(spans.len() * 2);
        for (left, right) in spans {
            let target = (left + right) / 2;
            steps.push(Step { target, left, right });
            next.push((left, target));
            next.push((target, right));
        }
        spans = next;
    }
    Ok(steps)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InterpolatorKind {
    Average,
    /// Bilateral block matching: each block takes the symmetric displacement
    /// that best matches the two references and blends them half a vector
    /// either side.
    MotionCompensated,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InterpolatorConfig {
    pub kind: InterpolatorKind,
    pub block_size: usize,
    /// Largest displacement between the references, in pixels.
    pub search_range: usize,
}

impl Default for InterpolatorConfig {
    fn default() -> Self {
        Self {
            kind: InterpolatorKind::MotionCompensated,
            block_size: 8,
            search_range: 8,
        }
    }
}

impl InterpolatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 {
            return Err(Error::Config("interpolator block size must be positive".into()));
        }
        Ok(())
    }
}

pub fn interpolate(left: &ImageTensor, right: &ImageTensor, cfg: &InterpolatorConfig) -> Result<ImageTensor> {
    left.check_same_shape(right)?;
    cfg.validate()?;
    match cfg.kind {
        InterpolatorKind::Average => {
            let data = left.data().iter().zip(right.data()).map(|(a, b)| 0.5 * (a + b)).collect();
            Ok(ImageTensor::new(left.width(), left.height(), left.channels(), data)?.with_range(left.range()))
        }
        InterpolatorKind::MotionCompensated => Ok(motion_compensated(left, right, cfg)),
    }
}

fn inside(img: &ImageTensor, y: isize, x: isize) -> bool {
    (0..img.height() as isize).contains(&y) && (0..img.width() as isize).contains(&x)
}

fn sample(img: &ImageTensor, c: usize, y: isize, x: isize) -> f64 {
    let yc = y.clamp(0, img.height() as isize - 1) as usize;
    let xc = x.clamp(0, img.width() as isize - 1) as usize;
    img.get(c, yc, xc)
}

fn motion_compensated(left: &ImageTensor, right: &ImageTensor, cfg: &InterpolatorConfig) -> ImageTensor {
    let (w, h, ch) = (left.width(), left.height(), left.channels());
    let b = cfg.block_size;
    let r = cfg.search_range.div_ceil(2) as isize;
    // Candidates nearest the zero vector come first so ties keep small motion.
    let mut candidates: Vec<(isize, isize)> = (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dy, dx))).collect();
    candidates.sort_by_key(|&(dy, dx)| (dy.abs() + dx.abs(), dy.abs().max(dx.abs())));
    let mut out = vec![0.0; w * h * ch];
    for by in (0..h).step_by(b) {
        for bx in (0..w).step_by(b) {
            let (bh, bw) = (b.min(h - by), b.min(w - bx));
            let mut best = (f64::INFINITY, (0, 0));
            for &(dy, dx) in &candidates {
                // Mean difference over pixels both references actually contain.
                let (mut sad, mut n) = (0.0, 0usize);
                for y in by as isize..(by + bh) as isize {
                    for x in bx as isize..(bx + bw) as isize {
                        if !inside(left, y - dy, x - dx) || !inside(right, y + dy, x + dx) {
                            continue;
                        }
                        n += 1;
                        for c in 0..ch {
                            sad += (sample(left, c, y - dy, x - dx) - sample(right, c, y + dy, x + dx)).abs();
                        }
                    }
                }
                if n > 0 && sad / (n as f64) < best.0 {
                    best = (sad / n as f64, (dy, dx));
                }
            }
            let (dy, dx) = best.1;
            for y in by..by + bh {
                for x in bx..bx + bw {
                    let (yi, xi) = (y as isize, x as isize);
                    // Where one reference has no content, the other supplies it alone.
                    let (in_l, in_r) = (inside(left, yi - dy, xi - dx), inside(right, yi + dy, xi + dx));
                    for c in 0..ch {
                        let (l, r) = (sample(left, c, yi - dy, xi - dx), sample(right, c, yi + dy, xi + dx));
                        out[(c * h + y) * w + x] = match (in_l, in_r) {
                            (true, false) => l,
                            (false, true) => r,
                            _ => 0.5 * (l + r),
                        };
                    }
                }
            }
        }
    }
    ImageTensor::new(w, h, ch, out)
        .expect("shape preserved")
        .with_range(left.range())
}

/// Reconstructed frames of the active GOP, keyed by absolute frame index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReconBuffer {
    frames: BTreeMap<usize, ImageTensor>,
}

impl ReconBuffer {
    pub fn insert(&mut self, index: usize, frame: ImageTensor) {
        self.frames.insert(index, frame);
    }

    pub fn get(&self, index: usize) -> Result<&ImageTensor> {
        self.frames
            .get(&index)
            .ok_or_else(|| Error::Invalid(format!("frame {index} has not been reconstructed")))
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnitKind {
    /// A frame coded on its own. GOP anchors are always intra; an
    /// interpolated frame is refreshed this way when that beats its residual.
    Intra,
    /// An interpolated frame plus a coded residual. An empty payload means
    /// the encoder kept the prediction unchanged.
    Residual,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodedUnit {
    pub kind: UnitKind,
    pub frame: usize,
    pub payload: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodedGop {
    pub start: usize,
    pub plan: GopPlan,
    pub units: Vec<CodedUnit>,
}

impl CodedGop {
    pub fn payload_bits(&self) -> f64 {
        self.units.iter().map(|u| (u.payload.len() * 8) as f64).sum()
    }
}

/// Everything one pass of the interpolation loop produces.
#[derive(Clone, Debug, PartialEq)]
pub struct GopRecon {
    /// Reconstructions of frames `start..=start + size`.
    pub frames: Vec<ImageTensor>,
    /// Interpolated predictions keyed by absolute frame index.
    pub predictions: BTreeMap<usize, ImageTensor>,
}

fn combine(prediction: &ImageTensor, residual: Option<&ImageTensor>) -> ImageTensor {
    match residual {
        None => prediction.quantized_8bit(),
        Some(z) => {
            let data = prediction.data().iter().zip(z.data()).map(|(p, z)| p + z).collect();
            ImageTensor::new(prediction.width(), prediction.height(), prediction.channels(), data)
                .expect("shapes checked by the codec")
                .quantized_8bit()
        }
    }
}

fn intra_frames(start: usize, size: usize, inherited: bool) -> Vec<usize> {
    if inherited {
        vec![start + size]
    } else {
        vec![start, start + size]
    }
}

/// Codes frames `start..=start + frames.len() - 1` as one GOP. When
/// `inherited` is given it is the reconstruction of the shared first frame,
/// already coded by the previous GOP.
pub fn encode_gop(
    frames: &[ImageTensor],
    start: usize,
    h_t: f64,
    inherited: Option<&ImageTensor>,
    codec: &ImageCodec,
    interp: &InterpolatorConfig,
) -> Result<(CodedGop, GopRecon)> {
    if frames.len() < 2 {
        return Err(Error::Invalid("a GOP needs at least two frames".into()));
    }
    let size = frames.len() - 1;
    let steps = build_schedule(size)?;
    for f in &frames[1..] {
        frames[0].check_same_shape(f)?;
    }
    let mut buf = ReconBuffer::default();
    let mut units = Vec::with_capacity(frames.len());
    if let Some(prev) = inherited {
        frames[0].check_same_shape(prev)?;
        buf.insert(start, prev.clone());
    }
    for index in intra_frames(start, size, inherited.is_some()) {
        let enc = codec.encode(&frames[index - start], CodingMode::Intra)?;
        buf.insert(index, enc.recon);
        units.push(CodedUnit { kind: UnitKind::Intra, frame: index, payload: enc.payload });
    }
    // Predictions already as close to the source as the I-frames are keep no
    // residual; that is the quality the GOP is coded at.
    let mut target_mse = 0.0;
    for (k, index) in [start, start + size].into_iter().enumerate() {
        target_mse += mse(&frames[k * size], buf.get(index)?)? / 2.0;
    }
    let mut predictions = BTreeMap::new();
    for s in &steps {
        let (target, left, right) = (start + s.target, start + s.left, start + s.right);
        let pred = interpolate(buf.get(left)?, buf.get(right)?, interp)?;
        let x = &frames[s.target];
        let z = ImageTensor::new(
            x.width(),
            x.height(),
            x.channels(),
            x.data().iter().zip(pred.data()).map(|(a, b)| a - b).collect(),
        )?
        .with_range(SampleRange::Signed)
        .clamped();
        let skipped = combine(&pred, None);
        let skipped_mse = mse(x, &skipped)?;
        let (mut recon, mut payload, mut kind) = (skipped, Vec::new(), UnitKind::Residual);
        if skipped_mse > target_mse {
            // The best of prediction, coded residual and intra refresh.
            let mut best = skipped_mse;
            let enc = codec.encode(&z, CodingMode::Residual)?;
            let coded = combine(&pred, Some(&enc.recon));
            let coded_mse = mse(x, &coded)?;
            if coded_mse < best {
                (recon, payload, best) = (coded, enc.payload, coded_mse);
            }
            let enc = codec.encode(x, CodingMode::Intra)?;
            if mse(x, &enc.recon)? < best {
                (recon, payload, kind) = (enc.recon, enc.payload, UnitKind::Intra);
            }
        }
        buf.insert(target, recon);
        units.push(CodedUnit { kind, frame: target, payload });
        predictions.insert(target, pred);
    }
    let frames = (start..=start + size).map(|i| buf.get(i).cloned()).collect::<Result<_>>()?;
    let plan = GopPlan { size, h_t, steps };
    Ok((CodedGop { start, plan, units }, GopRecon { frames, predictions }))
}

/// Replays the interpolation loop from the coded units of one GOP.
#[allow(clippy::too_many_arguments)]
pub fn decode_gop(
    start: usize,
    size: usize,
    units: &[CodedUnit],
    inherited: Option<&ImageTensor>,
    dims: (usize, usize),
    codec: &ImageCodec,
    interp: &InterpolatorConfig,
) -> Result<GopRecon> {
    let steps = build_schedule(size)?;
    let intra = intra_frames(start, size, inherited.is_some());
    let expected: Vec<usize> = intra.iter().copied().chain(steps.iter().map(|s| start + s.target)).collect();
    let found: Vec<usize> = units.iter().map(|u| u.frame).collect();
    let anchors_intra = units.iter().take(intra.len()).all(|u| u.kind == UnitKind::Intra);
    if found != expected || !anchors_intra {
        return Err(Error::Invalid(format!(
            "GOP at frame {start} of size {size} has units for frames {found:?}, expected {expected:?} with intra anchors"
        )));
    }
    let (w, h) = dims;
    let mut buf = ReconBuffer::default();
    if let Some(prev) = inherited {
        buf.insert(start, prev.clone());
    }
    for u in &units[..intra.len()] {
        buf.insert(u.frame, codec.decode(&u.payload, w, h, CodingMode::Intra)?);
    }
    let mut predictions = BTreeMap::new();
    for (s, u) in steps.iter().zip(&units[intra.len()..]) {
        let pred = interpolate(buf.get(start + s.left)?, buf.get(start + s.right)?, interp)?;
        let recon = if u.kind == UnitKind::Intra {
            codec.decode(&u.payload, w, h, CodingMode::Intra)?
        } else if u.payload.is_empty() {
            combine(&pred, None)
        } else {
            let z = codec.decode(&u.payload, w, h, CodingMode::Residual)?;
            combine(&pred, Some(&z))
        };
        buf.insert(u.frame, recon);
        predictions.insert(u.frame, pred);
    }
    let frames = (start..=start + size).map(|i| buf.get(i).cloned()).collect::<Result<_>>()?;
    Ok(GopRecon { frames, predictions })
}

/// Where each GOP starts, its size and the temporal entropy that chose it.
pub fn plan_sequence(seq: &FrameSequence, cfg: &SchedulerConfig) -> Result<Vec<(usize, GopPlan)>> {
    cfg.validate()?;
    if seq.len() < 2 {
        return Err(Error::Invalid(format!("a video needs at least 2 frames, got {}", seq.len())));
    }
    let last = seq.len() - 1;
    let frames = seq.frames();
    let mut plans = Vec::new();
    let mut seg = 0;
    while seg < last {
        let end = (seg + cfg.tau).min(last);
        let h_t = temporal_entropy(&temporal_residual(&frames[seg], &frames[end])?);
        let chosen = select_gop_size(h_t, cfg);
        let mut pos = seg;
        while pos < end {
            let size = tail_size(chosen, end - pos, cfg);
            plans.push((pos, GopPlan { size, h_t, steps: build_schedule(size)? }));
            pos += size;
        }
        seg = end;
    }
    Ok(plans)
}

/// `chosen` if it fits, else the largest configured size that does, else the
/// largest power of two that does.
fn tail_size(chosen: usize, remaining: usize, cfg: &SchedulerConfig) -> usize {
    if chosen <= remaining {
        return chosen;
    }
    cfg.gop_sizes
        .iter()
        .copied()
        .filter(|&t| t <= remaining)
        .max()
        .unwrap_or(1 << remaining.ilog2())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedVideo {
    pub gops: Vec<CodedGop>,
    pub recon: Vec<ImageTensor>,
}

impl EncodedVideo {
    pub fn payload_bits(&self) -> f64 {
        self.gops.iter().map(CodedGop::payload_bits).sum()
    }
}

pub fn encode_sequence(
    seq: &FrameSequence,
    codec: &ImageCodec,
    sched: &SchedulerConfig,
    interp: &InterpolatorConfig,
) -> Result<EncodedVideo> {
    let plans = plan_sequence(seq, sched)?;
    encode_with_plans(seq, &plans, codec, interp)
}

/// Codes a sequence with every GOP forced to `size` (tails shrink as usual).
pub fn encode_fixed_gop(
    seq: &FrameSequence,
    size: usize,
    codec: &ImageCodec,
    interp: &InterpolatorConfig,
) -> Result<EncodedVideo> {
    let sched = SchedulerConfig {
        tau: size,
        gop_sizes: [size; 3],
        ..SchedulerConfig::default()
    };
    encode_sequence(seq, codec, &sched, interp)
}

fn encode_with_plans(
    seq: &FrameSequence,
    plans: &[(usize, GopPlan)],
    codec: &ImageCodec,
    interp: &InterpolatorConfig,
) -> Result<EncodedVideo> {
    let frames = seq.frames();
    let mut gops = Vec::with_capacity(plans.len());
    let mut recon: Vec<ImageTensor> = Vec::with_capacity(frames.len());
    for (start, plan) in plans {
        let (start, size) = (*start, plan.size);
        let (mut gop, out) = encode_gop(&frames[start..=start + size], start, plan.h_t, recon.last(), codec, interp)?;
        gop.plan = plan.clone();
        let skip = usize::from(!recon.is_empty());
        recon.extend(out.frames.into_iter().skip(skip));
        gops.push(gop);
    }
    Ok(EncodedVideo { gops, recon })
}

/// Rebuilds every frame from `(start, size, units)` records in order.
pub fn decode_sequence<'a>(
    gops: impl IntoIterator<Item = (usize, usize, &'a [CodedUnit])>,
    dims: (usize, usize),
    codec: &ImageCodec,
    interp: &InterpolatorConfig,
) -> Result<Vec<ImageTensor>> {
    let mut recon: Vec<ImageTensor> = Vec::new();
    for (start, size, units) in gops {
        let expected = recon.len().saturating_sub(1);
        if start != expected {
            return Err(Error::Invalid(format!("GOP starts at frame {start}, expected {expected}")));
        }
        let out = decode_gop(start, size, units, recon.last(), dims, codec, interp)?;
        let skip = usize::from(!recon.is_empty());
        recon.extend(out.frames.into_iter().skip(skip));
    }
    if recon.is_empty() {
        return Err(Error::Invalid("no GOPs to decode".into()));
    }
    Ok(recon)
}

/// Every frame coded on its own.
pub fn encode_all_intra(seq: &FrameSequence, codec: &ImageCodec) -> Result<(f64, Vec<ImageTensor>)> {
    let mut bits = 0.0;
    let mut recon = Vec::with_capacity(seq.len());
    for f in seq.frames() {
        let enc = codec.encode(f, CodingMode::Intra)?;
        bits += enc.bits();
        recon.push(enc.recon);
    }
    Ok((bits, recon))
}

/// Bits per pixel over all frames with per-frame quality averaged.
pub fn sequence_rd(label: &str, original: &[ImageTensor], recon: &[ImageTensor], bits: f64) -> Result<RdPoint> {
    if original.len() != recon.len() || original.is_empty() {
        return Err(Error::Dimension(format!(
            "{} source frames vs {} reconstructions",
            original.len(),
            recon.len()
        )));
    }
    let (mut s, mut p) = (0.0, 0.0);
    for (x, y) in original.iter().zip(recon) {
        s += ms_ssim(x, y)?;
        p += psnr(x, y)?;
    }
    let n = original.len() as f64;
    let pixels = (original[0].width() * original[0].height()) as f64 * n;
    Ok(RdPoint {
        label: label.to_string(),
        bpp: bits / pixels,
        ms_ssim: s / n,
        ms_ssim_db: msssim_to_db(s / n),
        psnr: p / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{noise_sequence, static_sequence, toy_image, translating_sequence};
    use crate::transforms::{ArchitectureConfig, Model, ModelParams};
    use proptest::prelude::*;

    fn codec() -> ImageCodec {
        let cfg = ArchitectureConfig {
            image_channels: 1,
            unit_channels: 4,
            latent_channels: 4,
            ..ArchitectureConfig::default()
        };
        ImageCodec::new(Model::new(cfg.clone(), ModelParams::init(&cfg, 5).unwrap()).unwrap())
    }

    /// Midpoints enumerated level by level from the span lengths.
    fn schedule_oracle(size: usize) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        let mut half = size / 2;
        while half >= 1 {
            let mut t = half;
            while t < size {
                out.push((t, t - half, t + half));
                t += 2 * half;
            }
            half /= 2;
        }
        out
    }

    #[test]
    fn residual_and_entropy_examples() {
        let a = toy_image(9, 7, 3, 1).unwrap().quantized_8bit();
        assert!(temporal_residual(&a, &a).unwrap().iter().all(|&d| d == 0));
        let dark = ImageTensor::constant(4, 4, 1, 10.0 / 255.0).unwrap();
        let up = dark.map(|v| v + 1.0 / 255.0);
        assert!(temporal_residual(&dark, &up).unwrap().iter().all(|&d| d == 1));
        let b = toy_image(9, 7, 3, 2).unwrap().quantized_8bit();
        let oracle: Vec<i16> = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| ((y * 255.0).round() - (x * 255.0).round()) as i16)
            .collect();
        assert_eq!(temporal_residual(&a, &b).unwrap(), oracle);
        assert!(temporal_residual(&a, &toy_image(9, 8, 3, 1).unwrap()).is_err());

        assert_eq!(temporal_entropy(&[0; 50]), 0.0);
        assert!((temporal_entropy(&[1, -1, 1, -1]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gop_size_boundaries_are_closed_on_the_left() {
        let cfg = SchedulerConfig::default();
        let eps = 1e-9;
        let cases = [
            (0.0, 16),
            (ANCHOR_LOW_MOTION, 16),
            (6.0 - eps, 16),
            (6.0, 8),
            (ANCHOR_HIGH_MOTION, 8),
            (8.0 - eps, 8),
            (8.0, 2),
            (9.0, 2),
        ];
        for (h, t) in cases {
            assert_eq!(select_gop_size(h, &cfg), t, "H_T = {h}");
        }
    }

    #[test]
    fn schedules_match_the_midpoint_recursion() {
        let s8: Vec<_> = build_schedule(8).unwrap().iter().map(|s| (s.target, s.left, s.right)).collect();
        assert_eq!(s8, [(4, 0, 8), (2, 0, 4), (6, 4, 8), (1, 0, 2), (3, 2, 4), (5, 4, 6), (7, 6, 8)]);
        assert_eq!(build_schedule(2).unwrap(), [Step { target: 1, left: 0, right: 2 }]);
        for size in [1, 2, 4, 8, 16, 32] {
            let s: Vec<_> = build_schedule(size).unwrap().iter().map(|s| (s.target, s.left, s.right)).collect();
            assert_eq!(s, schedule_oracle(size));
            // Every reference is a boundary or an earlier target.
            let mut known = vec![0, size];
            for &(t, l, r) in &s {
                assert!(known.contains(&l) && known.contains(&r));
                assert!(!known.contains(&t));
                known.push(t);
            }
            assert_eq!(known.len(), size + 1);
        }
        let s16 = build_schedule(16).unwrap();
        assert_eq!(s16.len(), 15);
        assert_eq!(s16[0], Step { target: 8, left: 0, right: 16 });
        assert!(s16[7..].iter().all(|s| s.target % 2 == 1));
        assert!(build_schedule(6).is_err());
        assert!(build_schedule(0).is_err());
    }

    #[test]
    fn interpolator_examples() {
        let avg = InterpolatorConfig { kind: InterpolatorKind::Average, ..Default::default() };
        let mc = InterpolatorConfig::default();
        let a = toy_image(20, 12, 3, 3).unwrap();
        for cfg in [&avg, &mc] {
            assert_eq!(interpolate(&a, &a, cfg).unwrap(), a);
        }
        let black = ImageTensor::constant(8, 8, 1, 0.0).unwrap();
        let white = ImageTensor::constant(8, 8, 1, 1.0).unwrap();
        assert!(interpolate(&black, &white, &avg).unwrap().data().iter().all(|&v| v == 0.5));
        assert!(interpolate(&a, &black, &avg).is_err());
    }

    #[test]
    fn motion_compensation_beats_averaging_on_translation() {
        // References 4 px apart with the true middle frame in between.
        let seq = translating_sequence(48, 32, 1, 3, 2, 7).unwrap();
        let f = seq.frames();
        let mc = InterpolatorConfig { search_range: 4, ..Default::default() };
        let avg = InterpolatorConfig { kind: InterpolatorKind::Average, ..Default::default() };
        let e_mc = mse(&f[1], &interpolate(&f[0], &f[2], &mc).unwrap()).unwrap();
        let e_avg = mse(&f[1], &interpolate(&f[0], &f[2], &avg).unwrap()).unwrap();
        assert!(e_mc < e_avg, "mc {e_mc} vs average {e_avg}");
    }

    #[test]
    fn recon_buffer_refuses_unreconstructed_frames() {
        let mut buf = ReconBuffer::default();
        assert!(buf.get(3).is_err());
        buf.insert(3, ImageTensor::constant(2, 2, 1, 0.5).unwrap());
        assert!(buf.get(3).is_ok() && buf.len() == 1);
    }

    #[test]
    fn gop_decode_reproduces_the_encoder_loop() {
        let c = codec();
        let seq = translating_sequence(24, 16, 1, 11, 1, 3).unwrap();
        let f = seq.frames();
        let interp = InterpolatorConfig::default();
        let (gop, enc) = encode_gop(&f[..9], 0, 0.0, None, &c, &interp).unwrap();
        assert_eq!(gop.units.len(), 9);
        let dec = decode_gop(0, 8, &gop.units, None, (24, 16), &c, &interp).unwrap();
        assert_eq!(dec, enc);
        assert_eq!(enc.predictions.len(), 7);

        // A size-2 GOP inheriting frame 8: one new I-frame and one prediction.
        let (g2, e2) = encode_gop(&f[8..], 8, 0.0, Some(&enc.frames[8]), &c, &interp).unwrap();
        let kinds: Vec<_> = g2.units.iter().map(|u| (u.kind, u.frame)).collect();
        assert_eq!(kinds, [(UnitKind::Intra, 10), (UnitKind::Residual, 9)]);
        assert_eq!(e2.predictions.len(), 1);
        let d2 = decode_gop(8, 2, &g2.units, Some(&enc.frames[8]), (24, 16), &c, &interp).unwrap();
        assert_eq!(d2, e2);

        // Units out of order are refused.
        let mut bad = gop.units.clone();
        bad.swap(2, 3);
        assert!(decode_gop(0, 8, &bad, None, (24, 16), &c, &interp).is_err());
    }

    #[test]
    fn static_gop_costs_little_more_than_one_intra_frame() {
        let c = codec();
        let seq = static_sequence(32, 32, 1, 17, 4).unwrap();
        let (gop, rec) = encode_gop(seq.frames(), 0, 0.0, None, &c, &InterpolatorConfig::default()).unwrap();
        let intra = (gop.units[0].payload.len() * 8) as f64;
        // Two I-frames of the same picture, and every residual skipped or tiny.
        let residual: f64 = gop.units[2..].iter().map(|u| (u.payload.len() * 8) as f64).sum();
        assert!(residual < 0.15 * intra, "residual bits {residual} vs intra {intra}");
        assert!(rec.frames[1..16].iter().all(|r| r == &rec.frames[0]));
    }

    #[test]
    fn interpolated_frames_decode_from_intra_refresh_units() {
        let c = codec();
        let interp = InterpolatorConfig::default();
        let (a, b) = (toy_image(32, 32, 1, 1).unwrap(), toy_image(32, 32, 1, 2).unwrap());
        let frames: Vec<ImageTensor> = (0..=8).map(|i| if i < 4 { a.clone() } else { b.clone() }).collect();
        let (mut gop, _) = encode_gop(&frames, 0, 8.0, None, &c, &interp).unwrap();
        let refresh = c.encode(&frames[4], CodingMode::Intra).unwrap();
        let mid = gop.units.iter_mut().find(|u| u.frame == 4).unwrap();
        (mid.kind, mid.payload) = (UnitKind::Intra, refresh.payload);
        let dec = decode_gop(0, 8, &gop.units, None, (32, 32), &c, &interp).unwrap();
        assert_eq!(dec.frames[4], refresh.recon);

        // Interpolated frames may be intra, but the anchors may not be residuals.
        gop.units[0].kind = UnitKind::Residual;
        assert!(decode_gop(0, 8, &gop.units, None, (32, 32), &c, &interp).is_err());
    }

    #[test]
    fn sequence_planning_examples() {
        let cfg = SchedulerConfig::default();
        let still = static_sequence(16, 16, 1, 17, 1).unwrap();
        let plans = plan_sequence(&still, &cfg).unwrap();
        assert_eq!(plans.len(), 1);
        assert_eq!((plans[0].0, plans[0].1.size, plans[0].1.h_t), (0, 16, 0.0));

        let noise = noise_sequence(32, 32, 1, 17, 2).unwrap();
        let plans = plan_sequence(&noise, &cfg).unwrap();
        assert!(plans[0].1.h_t >= cfg.upper, "noise H_T {}", plans[0].1.h_t);
        assert_eq!(plans.iter().map(|p| p.1.size).collect::<Vec<_>>(), [2; 8]);

        // 20 frames: one full segment, then a 3-frame remainder split 2 + 1.
        let plans = plan_sequence(&static_sequence(8, 8, 1, 20, 1).unwrap(), &cfg).unwrap();
        let layout: Vec<_> = plans.iter().map(|(s, p)| (*s, p.size)).collect();
        assert_eq!(layout, [(0, 16), (16, 2), (18, 1)]);
        assert!(plan_sequence(&static_sequence(8, 8, 1, 1, 1).unwrap(), &cfg).is_err());
    }

    #[test]
    fn sequence_round_trip_matches_the_encoder() {
        let c = codec();
        let interp = InterpolatorConfig::default();
        let seq = translating_sequence(24, 16, 1, 12, 1, 9).unwrap();
        let enc = encode_sequence(&seq, &c, &SchedulerConfig::default(), &interp).unwrap();
        assert_eq!(enc.recon.len(), 12);
        let dec = decode_sequence(
            enc.gops.iter().map(|g| (g.start, g.plan.size, g.units.as_slice())),
            (24, 16),
            &c,
            &interp,
        )
        .unwrap();
        assert_eq!(dec, enc.recon);
        let intra_count: usize = enc.gops.iter().flat_map(|g| &g.units).filter(|u| u.kind == UnitKind::Intra).count();
        assert_eq!(intra_count, enc.gops.len() + 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn gop_size_is_monotone_in_entropy(a in 0.0f64..10.0, b in 0.0f64..10.0) {
            let cfg = SchedulerConfig::default();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(select_gop_size(lo, &cfg) >= select_gop_size(hi, &cfg));
        }

        #[test]
        fn entropy_is_bounded_by_the_alphabet(diff in proptest::collection::vec(-255i16..=255, 1..400)) {
            let h = temporal_entropy(&diff);
            let mut distinct = diff.clone();
            distinct.sort_unstable();
            distinct.dedup();
            prop_assert!(h >= 0.0 && h <= (distinct.len() as f64).log2() + 1e-12);
        }
    }
}
