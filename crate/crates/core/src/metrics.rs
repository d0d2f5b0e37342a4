//! MS-SSIM, PSNR and rate-distortion bookkeeping.

use std::rc::Rc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::media_io::ImageTensor;
use crate::tensor::Tensor;

pub const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const WINDOW: usize = 11;
const WINDOW_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
/// Decibel values are capped here for identical inputs.
pub const DB_CAP: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistortionKind {
    MsSsim,
    Mse,
}

impl std::str::FromStr for DistortionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "msssim" => Ok(Self::MsSsim),
            "mse" => Ok(Self::Mse),
            _ => Err(Error::Invalid(format!("unknown distortion {s:?}"))),
        }
    }
}

/// One rate-distortion measurement.
#[derive(Clone, Debug, PartialEq)]
pub struct RdPoint {
    pub label: String,
    pub bpp: f64,
    pub ms_ssim: f64,
    pub ms_ssim_db: f64,
    pub psnr: f64,
}

impl RdPoint {
    pub fn measure(label: impl Into<String>, x: &ImageTensor, x_hat: &ImageTensor, bits: f64) -> Result<Self> {
        let s = ms_ssim(x, x_hat)?;
        Ok(Self {
            label: label.into(),
            bpp: bits / (x.width() * x.height()) as f64,
            ms_ssim: s,
            ms_ssim_db: msssim_to_db(s),
            psnr: psnr(x, x_hat)?,
        })
    }

    pub const CSV_HEADER: &'static str = "label,bpp,ms_ssim,ms_ssim_db,psnr";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.8},{:.4},{:.4}",
            self.label, self.bpp, self.ms_ssim, self.ms_ssim_db, self.psnr
        )
    }
}

fn gaussian_window() -> Rc<[f64]> {
    let c = (WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

/// Number of scales used for an image whose smaller side is `min_dim`:
/// the largest `s <= 5` with `min_dim >= 11 * 2^(s-1)`.
pub fn msssim_scales(min_dim: usize) -> usize {
    (1..=MSSSIM_WEIGHTS.len())
        .rev()
        .find(|&s| min_dim >= WINDOW << (s - 1))
        .unwrap_or(0)
}

/// Scale weights renormalized to sum to one.
pub fn msssim_weights(scales: usize) -> Vec<f64> {
    let w = &MSSSIM_WEIGHTS[..scales];
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

/// Differentiable MS-SSIM of two `[N, C, H, W]` batches on the unit range,
/// averaged over images and channels.
pub fn ms_ssim_graph<'t>(x: Var<'t>, y: Var<'t>) -> Result<Var<'t>> {
    let (xs, ys) = (x.value(), y.value());
    if xs.shape() != ys.shape() {
        return Err(Error::Dimension(format!("{:?} vs {:?}", xs.shape(), ys.shape())));
    }
    let (_, _, h, w) = xs.dims4();
    let scales = msssim_scales(h.min(w));
    if scales == 0 {
        return Err(Error::Dimension(format!("{w}x{h} is smaller than the {WINDOW}x{WINDOW} window")));
    }
    let weights = msssim_weights(scales);
    let win = gaussian_window();
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let (mut a, mut b) = (x, y);
    let mut product: Option<Var<'t>> = None;
    for (j, &wj) in weights.iter().enumerate() {
        let filt = |v: Var<'t>| v.separable_filter_valid(win.clone());
        let mu_a = filt(a);
        let mu_b = filt(b);
        let mu_aa = mu_a.square();
        let mu_bb = mu_b.square();
        let mu_ab = mu_a.mul(mu_b);
        let s_aa = filt(a.square()).sub(mu_aa);
        let s_bb = filt(b.square()).sub(mu_bb);
        let s_ab = filt(a.mul(b)).sub(mu_ab);
        let cs_map = s_ab.scale(2.0).add_scalar(c2).div(s_aa.add(s_bb).add_scalar(c2));
        let term = if j + 1 == scales {
            let l_map = mu_ab.scale(2.0).add_scalar(c1).div(mu_aa.add(mu_bb).add_scalar(c1));
            l_map.mul(cs_map).mean_hw()
        } else {
            cs_map.mean_hw()
        };
        let factor = term.relu().powf(wj);
        product = Some(match product {
            None => factor,
            Some(p) => p.mul(factor),
        });
        if j + 1 < scales {
            a = a.avg_pool2();
            b = b.avg_pool2();
        }
    }
    Ok(product.expect("at least one scale").mean())
}

/// MS-SSIM per channel, averaged over channels. Inputs on the unit range.
pub fn ms_ssim(x: &ImageTensor, x_hat: &ImageTensor) -> Result<f64> {
    x.check_same_shape(x_hat)?;
    if x.data() == x_hat.data() {
        return Ok(1.0);
    }
    let tape = Tape::inference();
    let v = ms_ssim_graph(tape.constant(x.to_tensor()), tape.constant(x_hat.to_tensor()))?.item();
    Ok(v.clamp(0.0, 1.0))
}

pub fn mse(x: &ImageTensor, x_hat: &ImageTensor) -> Result<f64> {
    x.check_same_shape(x_hat)?;
    let n = x.data().len() as f64;
    Ok(x.data().iter().zip(x_hat.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n)
}

pub fn distortion(x: &ImageTensor, x_hat: &ImageTensor, kind: DistortionKind) -> Result<f64> {
    match kind {
        DistortionKind::MsSsim => Ok(1.0 - ms_ssim(x, x_hat)?),
        DistortionKind::Mse => mse(x, x_hat),
    }
}

/// Differentiable distortion of two batches.
pub fn distortion_graph<'t>(x: Var<'t>, x_hat: Var<'t>, kind: DistortionKind) -> Result<Var<'t>> {
    match kind {
        DistortionKind::MsSsim => Ok(ms_ssim_graph(x, x_hat)?.neg().add_scalar(1.0)),
        DistortionKind::Mse => {
            if x.value().shape() != x_hat.value().shape() {
                return Err(Error::Dimension("distortion inputs differ in shape".into()));
            }
            Ok(x_hat.sub(x).square().mean())
        }
    }
}

/// `-10 log10(1 - s)`, capped at [`DB_CAP`].
pub fn msssim_to_db(s: f64) -> f64 {
    if s >= 1.0 {
        return DB_CAP;
    }
    (-10.0 * (1.0 - s).log10()).min(DB_CAP)
}

/// `10 log10(1 / MSE)` on the unit range, capped at [`DB_CAP`].
pub fn psnr(x: &ImageTensor, x_hat: &ImageTensor) -> Result<f64> {
    Ok(mse_to_psnr(mse(x, x_hat)?))
}

pub fn mse_to_psnr(m: f64) -> f64 {
    if m <= 0.0 {
        return DB_CAP;
    }
    (-10.0 * m.log10()).min(DB_CAP)
}

/// Tensor helper for batch-level MS-SSIM without gradients.
pub fn ms_ssim_batch(x: &Tensor, y: &Tensor) -> Result<f64> {
    let tape = Tape::inference();
    Ok(ms_ssim_graph(tape.constant(x.clone()), tape.constant(y.clone()))?.item())
}
