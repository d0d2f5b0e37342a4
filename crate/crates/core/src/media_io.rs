//! Still images, frame sequences, and training patches.
//!
//! Samples are stored planar (`C x H x W`) as `f64` in `[0, 1]`, or in
//! `[-1, 1]` for signed residual images.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use image::{ColorType, DynamicImage, ImageFormat};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Nominal sample domain of an [`ImageTensor`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleRange {
    /// `[0, 1]`, ordinary pictures.
    Unit,
    /// `[-1, 1]`, temporal residuals.
    Signed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    width: usize,
    height: usize,
    channels: usize,
    range: SampleRange,
    data: Vec<f64>,
}

impl ImageTensor {
    /// Builds an image from planar samples.
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Dimension(format!("{channels} channels (expected 1 or 3)")));
        }
        if width == 0 || height == 0 {
            return Err(Error::Dimension("empty image".into()));
        }
        if data.len() != width * height * channels {
            return Err(Error::Dimension(format!(
                "{width}x{height}x{channels} image needs {} samples, got {}",
                width * height * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image samples"));
        }
        Ok(Self {
            width,
            height,
            channels,
            range: SampleRange::Unit,
            data,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        f: impl Fn(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(width, height, channels, data)
    }

    pub fn constant(width: usize, height: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn with_range(mut self, range: SampleRange) -> Self {
        self.range = range;
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn range(&self) -> SampleRange {
        self.range
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn check_same_shape(&self, other: &ImageTensor) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageTensor {
        ImageTensor {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn clamped(&self) -> ImageTensor {
        let (lo, hi) = match self.range {
            SampleRange::Unit => (0.0, 1.0),
            SampleRange::Signed => (-1.0, 1.0),
        };
        self.map(|v| v.clamp(lo, hi))
    }

    /// Rounds samples to the nearest 8-bit code value.
    pub fn quantized_8bit(&self) -> ImageTensor {
        self.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
    }

    /// `[1, C, H, W]` tensor view.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.channels, self.height, self.width], self.data.clone())
    }

    /// Image from a `[1, C, H, W]` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (n, c, h, w) = t.dims4();
        if n != 1 {
            return Err(Error::Dimension(format!("batch of {n} is not a single image")));
        }
        Self::new(w, h, c, t.data().to_vec())
    }

    /// Crops the `w x h` window at `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<ImageTensor> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::Dimension(format!(
                "crop {w}x{h}+{x0}+{y0} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut out = ImageTensor::from_fn(w, h, self.channels, |c, y, x| self.get(c, y0 + y, x0 + x))?;
        out.range = self.range;
        Ok(out)
    }

    /// Extends the image to `w x h` by replicating the last row and column.
    pub fn pad_edge(&self, w: usize, h: usize) -> Result<ImageTensor> {
        let mut out = ImageTensor::from_fn(w, h, self.channels, |c, y, x| {
            self.get(c, y.min(self.height - 1), x.min(self.width - 1))
        })?;
        out.range = self.range;
        Ok(out)
    }
}

/// Stacks equally shaped images into an `[N, C, H, W]` tensor.
pub fn stack(images: &[ImageTensor]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Invalid("cannot stack an empty image list".into()))?;
    let mut data = Vec::with_capacity(images.len() * first.data.len());
    for img in images {
        first.check_same_shape(img)?;
        data.extend_from_slice(&img.data);
    }
    Ok(Tensor::new(
        &[images.len(), first.channels, first.height, first.width],
        data,
    ))
}

/// Ordered frames sharing one geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    frames: Vec<ImageTensor>,
    frame_rate: f64,
}

impl FrameSequence {
    pub fn new(frames: Vec<ImageTensor>, frame_rate: f64) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Invalid("empty frame sequence".into()))?;
        for (i, f) in frames.iter().enumerate() {
            if !first.same_shape(f) {
                return Err(Error::Dimension(format!(
                    "frame {i} is {}x{}x{}, frame 0 is {}x{}x{}",
                    f.width, f.height, f.channels, first.width, first.height, first.channels
                )));
            }
        }
        Ok(Self { frames, frame_rate })
    }

    pub fn frames(&self) -> &[ImageTensor] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<ImageTensor> {
        self.frames
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    pub fn channels(&self) -> usize {
        self.frames[0].channels
    }
}

fn map_image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => {
            Error::Truncated(path.display().to_string())
        }
        image::ImageError::IoError(io) => Error::io(path, io),
        image::ImageError::Unsupported(u) => Error::Unsupported(u.to_string()),
        other => Error::Image(format!("{}: {other}", path.display())),
    }
}

/// Loads an 8-bit PNG or binary PPM/PGM.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let reader = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    match reader.format() {
        Some(ImageFormat::Png) | Some(ImageFormat::Pnm) => {}
        other => {
            return Err(Error::Unsupported(format!(
                "{}: format {other:?} (expected PNG or PPM)",
                path.display()
            )))
        }
    }
    let img = reader.decode().map_err(|e| map_image_error(path, e))?;
    from_dynamic(img, &path.display().to_string())
}

fn from_dynamic(img: DynamicImage, what: &str) -> Result<ImageTensor> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let color = img.color();
    let (channels, raw): (usize, Vec<u8>) = match color {
        ColorType::L8 => (1, img.into_luma8().into_raw()),
        ColorType::La8 => (1, img.to_luma8().into_raw()),
        ColorType::Rgb8 => (3, img.into_rgb8().into_raw()),
        ColorType::Rgba8 => (3, img.to_rgb8().into_raw()),
        other => {
            return Err(Error::Unsupported(format!(
                "{what}: {other:?} has {} bits per channel; only 8-bit media is supported",
                other.bits_per_pixel() / u16::from(other.channel_count())
            )))
        }
    };
    let n = w * h;
    let mut data = vec![0.0; n * channels];
    for (i, px) in raw.chunks_exact(channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            data[c * n + i] = f64::from(v) / 255.0;
        }
    }
    ImageTensor::new(w, h, channels, data)
}

fn to_bytes_interleaved(img: &ImageTensor) -> Vec<u8> {
    let n = img.pixel_count();
    let mut out = vec![0u8; n * img.channels];
    for c in 0..img.channels {
        for (i, &v) in img.plane(c).iter().enumerate() {
            out[i * img.channels + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    out
}

/// Writes an image as PNG, or as binary PPM/PGM when the extension is
/// `.ppm`/`.pgm`/`.pnm`. Samples are rounded to 8 bits.
pub fn store_image(path: impl AsRef<Path>, img: &ImageTensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes_interleaved(img);
    let (w, h) = (img.width as u32, img.height as u32);
    let dynimg = if img.channels == 1 {
        DynamicImage::ImageLuma8(
            image::GrayImage::from_raw(w, h, bytes).expect("buffer sized from dimensions"),
        )
    } else {
        DynamicImage::ImageRgb8(
            image::RgbImage::from_raw(w, h, bytes).expect("buffer sized from dimensions"),
        )
    };
    let format = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase) {
        Some(ext) if ext == "ppm" || ext == "pgm" || ext == "pnm" => ImageFormat::Pnm,
        _ => ImageFormat::Png,
    };
    dynimg
        .save_with_format(path, format)
        .map_err(|e| map_image_error(path, e))
}

/// Loads a Y4M file or a directory of numbered PNG frames.
pub fn load_sequence(path: impl AsRef<Path>) -> Result<FrameSequence> {
    let path = path.as_ref();
    if path.is_dir() {
        load_png_directory(path)
    } else {
        load_y4m(path)
    }
}

fn frame_number(p: &Path) -> Option<u64> {
    let stem = p.file_stem()?.to_str()?;
    let digits: String = stem
        .chars()
        .rev()
        .skip_while(|c| !c.is_ascii_digit())
        .take_while(|c| c.is_ascii_digit())
        .collect();
    digits.chars().rev().collect::<String>().parse().ok()
}

fn load_png_directory(dir: &Path) -> Result<FrameSequence> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    files.sort_by(|a, b| frame_number(a).cmp(&frame_number(b)).then_with(|| a.cmp(b)));
    if files.is_empty() {
        return Err(Error::Invalid(format!("{}: no PNG frames", dir.display())));
    }
    let frames = files.iter().map(load_image).collect::<Result<Vec<_>>>()?;
    FrameSequence::new(frames, 25.0)
}

fn y4m_error(path: &Path, e: y4m::Error) -> Error {
    match e {
        y4m::Error::EOF => Error::Truncated(path.display().to_string()),
        y4m::Error::IoError(io) => Error::io(path, io),
        other => Error::Unsupported(format!("{}: {other:?}", path.display())),
    }
}

/// Bilinear upsampling of a chroma plane by `(sx, sy)` with centred siting.
fn upsample_plane(src: &[u8], cw: usize, ch: usize, w: usize, h: usize, sx: usize, sy: usize) -> Vec<f64> {
    let coord = |o: usize, s: usize, n: usize| -> (usize, usize, f64) {
        if s == 1 {
            return (o.min(n - 1), o.min(n - 1), 0.0);
        }
        let c = ((o as f64 + 0.5) / s as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = c.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, c - i0 as f64)
    };
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let (y0, y1, fy) = coord(y, sy, ch);
        for x in 0..w {
            let (x0, x1, fx) = coord(x, sx, cw);
            let p = |yy: usize, xx: usize| f64::from(src[yy * cw + xx]);
            let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
            let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

fn load_y4m(path: &Path) -> Result<FrameSequence> {
    use y4m::Colorspace as Cs;
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = y4m::decode(BufReader::new(file)).map_err(|e| y4m_error(path, e))?;
    let (w, h) = (dec.get_width(), dec.get_height());
    let cs = dec.get_colorspace();
    let (sx, sy, mono) = match cs {
        Cs::Cmono => (1, 1, true),
        Cs::C420 | Cs::C420jpeg | Cs::C420paldv | Cs::C420mpeg2 => (2, 2, false),
        Cs::C422 => (2, 1, false),
        Cs::C444 => (1, 1, false),
        other => {
            return Err(Error::Unsupported(format!(
                "{}: colorspace {other:?} is not 8-bit",
                path.display()
            )))
        }
    };
    let full_range = String::from_utf8_lossy(dec.get_raw_params()).contains("XCOLORRANGE=FULL");
    let rate = dec.get_framerate();
    let frame_rate = if rate.den == 0 { 25.0 } else { rate.num as f64 / rate.den as f64 };
    let (cw, ch) = (w.div_ceil(sx), h.div_ceil(sy));
    let mut frames = Vec::new();
    loop {
        let frame = match dec.read_frame() {
            Ok(f) => f,
            Err(y4m::Error::EOF) => break,
            Err(e) => return Err(y4m_error(path, e)),
        };
        let luma: Vec<f64> = frame.get_y_plane().iter().map(|&v| f64::from(v)).collect();
        if mono {
            let (off, scale) = if full_range { (0.0, 255.0) } else { (16.0, 219.0) };
            let data = luma.iter().map(|v| ((v - off) / scale).clamp(0.0, 1.0)).collect();
            frames.push(ImageTensor::new(w, h, 1, data)?);
            continue;
        }
        let cb = upsample_plane(frame.get_u_plane(), cw, ch, w, h, sx, sy);
        let cr = upsample_plane(frame.get_v_plane(), cw, ch, w, h, sx, sy);
        let n = w * h;
        let mut data = vec![0.0; 3 * n];
        for i in 0..n {
            let (y, u, v) = if full_range {
                (luma[i] / 255.0, (cb[i] - 128.0) / 255.0, (cr[i] - 128.0) / 255.0)
            } else {
                ((luma[i] - 16.0) / 219.0, (cb[i] - 128.0) / 224.0, (cr[i] - 128.0) / 224.0)
            };
            data[i] = (y + 1.402 * v).clamp(0.0, 1.0);
            data[n + i] = (y - 0.344_136 * u - 0.714_136 * v).clamp(0.0, 1.0);
            data[2 * n + i] = (y + 1.772 * u).clamp(0.0, 1.0);
        }
        frames.push(ImageTensor::new(w, h, 3, data)?);
    }
    FrameSequence::new(frames, frame_rate)
}

/// Writes a sequence as full-range Y4M (4:4:4, or mono for grayscale) when
/// the path ends in `.y4m`, otherwise as a directory of numbered PNGs.
pub fn store_sequence(path: impl AsRef<Path>, seq: &FrameSequence) -> Result<()> {
    let path = path.as_ref();
    let is_y4m = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("y4m"));
    if !is_y4m {
        fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
        for (i, f) in seq.frames.iter().enumerate() {
            store_image(path.join(format!("frame_{i:05}.png")), f)?;
        }
        return Ok(());
    }
    let (w, h) = (seq.width(), seq.height());
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let fps = (seq.frame_rate * 1000.0).round().max(1.0) as usize;
    let colorspace = if seq.channels() == 1 {
        y4m::Colorspace::Cmono
    } else {
        y4m::Colorspace::C444
    };
    let range = y4m::VendorExtensionString::new(b"COLORRANGE=FULL".to_vec())
        .map_err(|e| y4m_error(path, e))?;
    let mut enc = y4m::encode(w, h, y4m::Ratio::new(fps, 1000))
        .with_colorspace(colorspace)
        .append_vendor_extension(range)
        .write_header(BufWriter::new(file))
        .map_err(|e| y4m_error(path, e))?;
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let n = w * h;
    let mut planes = [vec![0u8; n], vec![128u8; n], vec![128u8; n]];
    for f in &seq.frames {
        if f.channels == 1 {
            for (d, &v) in planes[0].iter_mut().zip(f.plane(0)) {
                *d = q(v);
            }
        } else {
            for i in 0..n {
                let (r, g, b) = (f.data[i], f.data[n + i], f.data[2 * n + i]);
                let y = 0.299 * r + 0.587 * g + 0.114 * b;
                planes[0][i] = q(y);
                planes[1][i] = q((b - y) / 1.772 + 128.0 / 255.0);
                planes[2][i] = q((r - y) / 1.402 + 128.0 / 255.0);
            }
        }
        let (u, v) = if f.channels == 1 {
            (&[][..], &[][..])
        } else {
            (&planes[1][..], &planes[2][..])
        };
        let frame = y4m::Frame::new([&planes[0], u, v], None);
        enc.write_frame(&frame).map_err(|e| y4m_error(path, e))?;
    }
    Ok(())
}

/// Top-left offsets of every `size x size` window on a `stride` grid, in
/// raster order.
pub fn patch_offsets(width: usize, height: usize, size: usize, stride: usize) -> Result<Vec<(usize, usize)>> {
    if stride == 0 {
        return Err(Error::Invalid("patch stride must be at least 1".into()));
    }
    if size == 0 || size > width || size > height {
        return Err(Error::Dimension(format!(
            "patch size {size} exceeds {width}x{height} image"
        )));
    }
    let mut out = Vec::new();
    for y in (0..=height - size).step_by(stride) {
        for x in (0..=width - size).step_by(stride) {
            out.push((x, y));
        }
    }
    Ok(out)
}

/// Cuts `size x size` patches on a `stride` grid, shuffled by `rng_seed`.
pub fn extract_patches(img: &ImageTensor, size: usize, stride: usize, rng_seed: u64) -> Result<Vec<ImageTensor>> {
    let mut offsets = patch_offsets(img.width, img.height, size, stride)?;
    offsets.shuffle(&mut ChaCha8Rng::seed_from_u64(rng_seed));
    offsets
        .into_iter()
        .map(|(x, y)| img.crop(x, y, size, size))
        .collect()
}
