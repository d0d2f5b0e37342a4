//! The still-image codec: analysis, rounding, range coding of the latent and
//! synthesis. Reconstructions are clamped and snapped to 8-bit code values so
//! they can be stored losslessly and shared bit-exactly between encoder and
//! decoder.

use crate::entropy_model::{build_cdf_tables, decode_latent, encode_latent, CdfTable};
use crate::error::{Error, Result};
use crate::media_io::{ImageTensor, SampleRange};
use crate::metrics::{ms_ssim, msssim_to_db, psnr, RdPoint};
use crate::quantization::{quantize_test, QuantMethod, QuantizerSpec};
use crate::transforms::{analyze, synthesize, Model};

/// What a payload carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CodingMode {
    /// A picture in `[0, 1]`.
    Intra,
    /// A signed residual in `[-1, 1]`, coded as `(z + 1) / 2`.
    Residual,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedImage {
    pub payload: Vec<u8>,
    /// What the decoder will reproduce, in the input's sample range.
    pub recon: ImageTensor,
}

impl EncodedImage {
    pub fn bits(&self) -> f64 {
        (self.payload.len() * 8) as f64
    }
}

pub struct ImageCodec {
    model: Model,
    tables: Vec<CdfTable>,
    quant: QuantizerSpec,
}

impl ImageCodec {
    pub fn new(model: Model) -> Self {
        let tables = build_cdf_tables(&model.entropy_model());
        let quant = QuantizerSpec {
            method: QuantMethod::Round,
            center_min: model.config.entropy.center_min,
            center_max: model.config.entropy.center_max,
            ..QuantizerSpec::default()
        };
        Self { model, tables, quant }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    fn padded_dims(&self, width: usize, height: usize) -> (usize, usize) {
        let b = self.model.config.block_size();
        (width.div_ceil(b) * b, height.div_ceil(b) * b)
    }

    fn check_channels(&self, channels: usize) -> Result<()> {
        if channels != self.model.config.image_channels {
            return Err(Error::Dimension(format!(
                "image has {channels} channels, model expects {}",
                self.model.config.image_channels
            )));
        }
        Ok(())
    }

    /// Encodes an image in `mode`; residual inputs must use the signed range.
    pub fn encode(&self, img: &ImageTensor, mode: CodingMode) -> Result<EncodedImage> {
        self.check_channels(img.channels())?;
        let unit = match mode {
            CodingMode::Intra => img.clone(),
            CodingMode::Residual => img.map(|z| (z + 1.0) / 2.0).with_range(SampleRange::Unit),
        };
        let (pw, ph) = self.padded_dims(img.width(), img.height());
        let padded = unit.pad_edge(pw, ph)?;
        let y = analyze(&padded, &self.model.params, &self.model.config)?;
        let y_hat = quantize_test(&y, &self.quant);
        let payload = encode_latent(&y_hat, &self.tables)?;
        let recon = self.reconstruct(&y_hat, img.width(), img.height(), mode)?;
        Ok(EncodedImage { payload, recon })
    }

    pub fn decode(&self, payload: &[u8], width: usize, height: usize, mode: CodingMode) -> Result<ImageTensor> {
        let (pw, ph) = self.padded_dims(width, height);
        let (lw, lh) = self.model.config.latent_dims(pw, ph)?;
        let y_hat = decode_latent(payload, &self.tables, lw, lh)?;
        self.reconstruct(&y_hat, width, height, mode)
    }

    fn reconstruct(
        &self,
        y_hat: &crate::transforms::LatentTensor,
        width: usize,
        height: usize,
        mode: CodingMode,
    ) -> Result<ImageTensor> {
        let full = synthesize(y_hat, &self.model.params, &self.model.config)?;
        let unit = full.crop(0, 0, width, height)?.quantized_8bit();
        Ok(match mode {
            CodingMode::Intra => unit,
            CodingMode::Residual => unit.map(|u| 2.0 * u - 1.0).with_range(SampleRange::Signed),
        })
    }

    /// Codes every image and reports aggregate bits per pixel with mean
    /// quality scores.
    pub fn evaluate(&self, images: &[ImageTensor], label: &str) -> Result<RdPoint> {
        if images.is_empty() {
            return Err(Error::Invalid("empty evaluation set".into()));
        }
        let (mut bits, mut pixels, mut s, mut p) = (0.0, 0.0, 0.0, 0.0);
        for img in images {
            let enc = self.encode(img, CodingMode::Intra)?;
            bits += enc.bits();
            pixels += (img.width() * img.height()) as f64;
            s += ms_ssim(img, &enc.recon)?;
            p += psnr(img, &enc.recon)?;
        }
        let n = images.len() as f64;
        Ok(RdPoint {
            label: label.to_string(),
            bpp: bits / pixels,
            ms_ssim: s / n,
            ms_ssim_db: msssim_to_db(s / n),
            psnr: p / n,
        })
    }
}
