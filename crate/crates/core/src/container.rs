//! The `.stec` bitstream container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "STEC" | version u8 | mode u8 | width u32 | height u32 | channels u8
//! | architecture | model hash u64 | flags u8 [| model length u32 | model bytes]
//! image: unit
//! video: frame count u32 | frame rate q16 | tau u16 | lower q16 | upper q16
//!        | GOP sizes 3 x u16 | interpolator kind u8 | block u16 | search u16
//!        | GOP count u32 | per GOP: start u32 | size u16 | H_T q16 | unit count u16 | units
//! unit:  kind u8 | frame u32 | length u32 | payload | CRC-32 of the preceding unit bytes
//! trailer: CRC-32 of everything before it
//! ```
//!
//! `q16` values are unsigned 16.16 fixed point.

use std::path::Path;

use crate::bytes::{ByteReader, ByteWriter};
use crate::codec::{CodingMode, ImageCodec};
use crate::error::{Error, Result};
use crate::media_io::{FrameSequence, ImageTensor};
use crate::transforms::{decode_model, encode_model, read_config, write_config, ArchitectureConfig, Model};
use crate::video::{
    decode_sequence, encode_sequence, CodedUnit, EncodedVideo, InterpolatorConfig, InterpolatorKind, SchedulerConfig,
    UnitKind,
};

pub const CONTAINER_MAGIC: &[u8; 4] = b"STEC";
pub const CONTAINER_VERSION: u8 = 1;

const FLAG_EMBEDDED_MODEL: u8 = 1;

/// Unsigned 16.16 fixed point.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Q16(pub u32);

impl Q16 {
    pub fn from_f64(v: f64) -> Self {
        Q16((v.max(0.0) * 65536.0).round().min(u32::MAX as f64) as u32)
    }

    pub fn to_f64(self) -> f64 {
        f64::from(self.0) / 65536.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Header {
    pub width: u32,
    pub height: u32,
    pub channels: u8,
    pub config: ArchitectureConfig,
    pub model_hash: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GopRecord {
    pub start: u32,
    pub size: u16,
    pub h_t: Q16,
    pub units: Vec<CodedUnit>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoBody {
    pub frame_count: u32,
    pub frame_rate: Q16,
    pub tau: u16,
    pub lower: Q16,
    pub upper: Q16,
    pub gop_sizes: [u16; 3],
    pub interpolator: InterpolatorConfig,
    pub gops: Vec<GopRecord>,
}

impl VideoBody {
    pub fn scheduler(&self) -> SchedulerConfig {
        SchedulerConfig {
            tau: usize::from(self.tau),
            lower: self.lower.to_f64(),
            upper: self.upper.to_f64(),
            gop_sizes: self.gop_sizes.map(usize::from),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Body {
    Image(CodedUnit),
    Video(VideoBody),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub header: Header,
    /// A serialized model file, present only when archived alongside.
    pub model: Option<Vec<u8>>,
    pub body: Body,
}

fn narrow<T: TryFrom<usize>>(v: usize, what: &str) -> Result<T> {
    T::try_from(v).map_err(|_| Error::Invalid(format!("{what} {v} does not fit the container field")))
}

fn write_unit(w: &mut ByteWriter, u: &CodedUnit) -> Result<()> {
    let mut unit = ByteWriter::new();
    unit.u8(match u.kind {
        UnitKind::Intra => 0,
        UnitKind::Residual => 1,
    });
    unit.u32(narrow(u.frame, "frame index")?);
    unit.u32(narrow(u.payload.len(), "payload length")?);
    unit.bytes(&u.payload);
    let unit = unit.into_inner();
    w.bytes(&unit);
    w.u32(crc32fast::hash(&unit));
    Ok(())
}

fn read_unit(r: &mut ByteReader<'_>) -> Result<CodedUnit> {
    let begin = r.position();
    let kind = match r.u8()? {
        0 => UnitKind::Intra,
        1 => UnitKind::Residual,
        k => return Err(Error::Invalid(format!("unknown unit type {k}"))),
    };
    let frame = r.u32()? as usize;
    let len = r.u32()? as usize;
    let payload = r.take(len)?.to_vec();
    let covered = r.span(begin);
    if r.u32()? != crc32fast::hash(covered) {
        return Err(Error::Checksum("container unit"));
    }
    Ok(CodedUnit { kind, frame, payload })
}

pub fn write_container(c: &Container) -> Result<Vec<u8>> {
    let mut w = ByteWriter::new();
    w.bytes(CONTAINER_MAGIC);
    w.u8(CONTAINER_VERSION);
    w.u8(match c.body {
        Body::Image(_) => 0,
        Body::Video(_) => 1,
    });
    w.u32(c.header.width);
    w.u32(c.header.height);
    w.u8(c.header.channels);
    write_config(&mut w, &c.header.config);
    w.u64(c.header.model_hash);
    match &c.model {
        Some(m) => {
            w.u8(FLAG_EMBEDDED_MODEL);
            w.u32(narrow(m.len(), "model length")?);
            w.bytes(m);
        }
        None => w.u8(0),
    }
    match &c.body {
        Body::Image(unit) => write_unit(&mut w, unit)?,
        Body::Video(v) => {
            w.u32(v.frame_count);
            w.u32(v.frame_rate.0);
            w.u16(v.tau);
            w.u32(v.lower.0);
            w.u32(v.upper.0);
            for t in v.gop_sizes {
                w.u16(t);
            }
            w.u8(match v.interpolator.kind {
                InterpolatorKind::Average => 0,
                InterpolatorKind::MotionCompensated => 1,
            });
            w.u16(narrow(v.interpolator.block_size, "block size")?);
            w.u16(narrow(v.interpolator.search_range, "search range")?);
            w.u32(narrow(v.gops.len(), "GOP count")?);
            for g in &v.gops {
                w.u32(g.start);
                w.u16(g.size);
                w.u32(g.h_t.0);
                w.u16(narrow(g.units.len(), "unit count")?);
                for u in &g.units {
                    write_unit(&mut w, u)?;
                }
            }
        }
    }
    let mut bytes = w.into_inner();
    let crc = crc32fast::hash(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    Ok(bytes)
}

pub fn read_container(bytes: &[u8]) -> Result<Container> {
    let mut r = ByteReader::new(bytes, "container");
    if r.take(4)? != CONTAINER_MAGIC {
        return Err(Error::BadMagic { expected: "STEC" });
    }
    let version = r.u8()?;
    if version != CONTAINER_VERSION {
        return Err(Error::Version(version));
    }
    if bytes.len() < 9 {
        return Err(Error::Truncated("container: no room for the trailing checksum".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(trailer.try_into().expect("four bytes")) {
        return Err(Error::Checksum("container"));
    }
    let mut r = ByteReader::new(body, "container");
    r.take(5)?;
    let mode = r.u8()?;
    let header = Header {
        width: r.u32()?,
        height: r.u32()?,
        channels: r.u8()?,
        config: read_config(&mut r)?,
        model_hash: r.u64()?,
    };
    let model = match r.u8()? {
        0 => None,
        FLAG_EMBEDDED_MODEL => {
            let len = r.u32()? as usize;
            Some(r.take(len)?.to_vec())
        }
        f => return Err(Error::Invalid(format!("unknown container flags {f:#x}"))),
    };
    let body = match mode {
        0 => Body::Image(read_unit(&mut r)?),
        1 => {
            let frame_count = r.u32()?;
            let frame_rate = Q16(r.u32()?);
            let tau = r.u16()?;
            let lower = Q16(r.u32()?);
            let upper = Q16(r.u32()?);
            let gop_sizes = [r.u16()?, r.u16()?, r.u16()?];
            let kind = match r.u8()? {
                0 => InterpolatorKind::Average,
                1 => InterpolatorKind::MotionCompensated,
                k => return Err(Error::Invalid(format!("unknown interpolator {k}"))),
            };
            let interpolator = InterpolatorConfig {
                kind,
                block_size: usize::from(r.u16()?),
                search_range: usize::from(r.u16()?),
            };
            let count = r.u32()? as usize;
            let mut gops = Vec::with_capacity(count.min(r.remaining()));
            for _ in 0..count {
                let start = r.u32()?;
                let size = r.u16()?;
                let h_t = Q16(r.u32()?);
                let n = usize::from(r.u16()?);
                let units = (0..n).map(|_| read_unit(&mut r)).collect::<Result<_>>()?;
                gops.push(GopRecord { start, size, h_t, units });
            }
            Body::Video(VideoBody {
                frame_count,
                frame_rate,
                tau,
                lower,
                upper,
                gop_sizes,
                interpolator,
                gops,
            })
        }
        m => return Err(Error::Invalid(format!("unknown container mode {m}"))),
    };
    if r.remaining() != 0 {
        return Err(Error::Invalid(format!("{} unexpected bytes before the checksum", r.remaining())));
    }
    Ok(Container { header, model, body })
}

pub fn save_container(path: impl AsRef<Path>, c: &Container) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_container(c)?).map_err(|e| Error::io(path, e))
}

pub fn load_container(path: impl AsRef<Path>) -> Result<Container> {
    let path = path.as_ref();
    read_container(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

fn header_for(model: &Model, width: usize, height: usize, channels: usize) -> Result<Header> {
    Ok(Header {
        width: narrow(width, "width")?,
        height: narrow(height, "height")?,
        channels: narrow(channels, "channels")?,
        config: model.config.clone(),
        model_hash: model.hash(),
    })
}

impl Container {
    /// The model to decode with: `supplied` if given, else the embedded one.
    /// Either way its hash must match the header.
    pub fn resolve_model(&self, supplied: Option<&Model>) -> Result<Model> {
        let model = match (supplied, &self.model) {
            (Some(m), _) => m.clone(),
            (None, Some(bytes)) => decode_model(bytes)?,
            (None, None) => return Err(Error::Invalid("container has no embedded model; supply one".into())),
        };
        if model.hash() != self.header.model_hash {
            return Err(Error::ModelHash {
                expected: self.header.model_hash,
                actual: model.hash(),
            });
        }
        Ok(model)
    }
}

/// Encodes a picture; returns the container and the reconstruction the
/// decoder will produce.
pub fn encode_image(img: &ImageTensor, codec: &ImageCodec, embed_model: bool) -> Result<(Container, ImageTensor)> {
    let enc = codec.encode(img, CodingMode::Intra)?;
    let model = codec.model();
    let c = Container {
        header: header_for(model, img.width(), img.height(), img.channels())?,
        model: embed_model.then(|| encode_model(model)),
        body: Body::Image(CodedUnit {
            kind: UnitKind::Intra,
            frame: 0,
            payload: enc.payload,
        }),
    };
    Ok((c, enc.recon))
}

pub fn decode_image(c: &Container, model: Option<&Model>) -> Result<ImageTensor> {
    let Body::Image(unit) = &c.body else {
        return Err(Error::Invalid("container holds a video, not an image".into()));
    };
    if unit.kind != UnitKind::Intra {
        return Err(Error::Invalid("image container must hold an intra unit".into()));
    }
    let codec = ImageCodec::new(c.resolve_model(model)?);
    codec.decode(&unit.payload, c.header.width as usize, c.header.height as usize, CodingMode::Intra)
}

pub fn encode_video(
    seq: &FrameSequence,
    codec: &ImageCodec,
    sched: &SchedulerConfig,
    interp: &InterpolatorConfig,
    embed_model: bool,
) -> Result<(Container, EncodedVideo)> {
    let enc = encode_sequence(seq, codec, sched, interp)?;
    let model = codec.model();
    let gops = enc
        .gops
        .iter()
        .map(|g| {
            Ok(GopRecord {
                start: narrow(g.start, "GOP start")?,
                size: narrow(g.plan.size, "GOP size")?,
                h_t: Q16::from_f64(g.plan.h_t),
                units: g.units.clone(),
            })
        })
        .collect::<Result<_>>()?;
    let body = VideoBody {
        frame_count: narrow(seq.len(), "frame count")?,
        frame_rate: Q16::from_f64(seq.frame_rate()),
        tau: narrow(sched.tau, "tau")?,
        lower: Q16::from_f64(sched.lower),
        upper: Q16::from_f64(sched.upper),
        gop_sizes: [
            narrow(sched.gop_sizes[0], "GOP size")?,
            narrow(sched.gop_sizes[1], "GOP size")?,
            narrow(sched.gop_sizes[2], "GOP size")?,
        ],
        interpolator: interp.clone(),
        gops,
    };
    let c = Container {
        header: header_for(model, seq.width(), seq.height(), seq.channels())?,
        model: embed_model.then(|| encode_model(model)),
        body: Body::Video(body),
    };
    Ok((c, enc))
}

pub fn decode_video(c: &Container, model: Option<&Model>) -> Result<FrameSequence> {
    let Body::Video(v) = &c.body else {
        return Err(Error::Invalid("container holds an image, not a video".into()));
    };
    let codec = ImageCodec::new(c.resolve_model(model)?);
    let dims = (c.header.width as usize, c.header.height as usize);
    let frames = decode_sequence(
        v.gops.iter().map(|g| (g.start as usize, usize::from(g.size), g.units.as_slice())),
        dims,
        &codec,
        &v.interpolator,
    )?;
    if frames.len() != v.frame_count as usize {
        return Err(Error::Invalid(format!(
            "decoded {} frames, header declares {}",
            frames.len(),
            v.frame_count
        )));
    }
    FrameSequence::new(frames, v.frame_rate.to_f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{static_sequence, toy_image, translating_sequence};
    use crate::transforms::ModelParams;
    use proptest::prelude::*;

    fn model(seed: u64) -> Model {
        let cfg = ArchitectureConfig {
            image_channels: 1,
            unit_channels: 4,
            latent_channels: 4,
            ..ArchitectureConfig::default()
        };
        Model::new(cfg.clone(), ModelParams::init(&cfg, seed).unwrap()).unwrap()
    }

    fn video_container() -> (Container, EncodedVideo) {
        let codec = ImageCodec::new(model(1));
        // Zero motion and a tau of 4 give three GOPs of size 4 across 13 frames.
        let seq = static_sequence(16, 16, 1, 13, 2).unwrap();
        let sched = SchedulerConfig {
            tau: 4,
            gop_sizes: [2, 4, 4],
            ..SchedulerConfig::default()
        };
        encode_video(&seq, &codec, &sched, &InterpolatorConfig::default(), false).unwrap()
    }

    #[test]
    fn empty_image_payload_round_trips() {
        let m = model(1);
        let c = Container {
            header: header_for(&m, 4, 4, 1).unwrap(),
            model: None,
            body: Body::Image(CodedUnit {
                kind: UnitKind::Intra,
                frame: 0,
                payload: Vec::new(),
            }),
        };
        assert_eq!(read_container(&write_container(&c).unwrap()).unwrap(), c);
    }

    #[test]
    fn video_records_come_back_in_order() {
        let (c, enc) = video_container();
        let back = read_container(&write_container(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        let Body::Video(v) = &back.body else { panic!("expected video") };
        let starts: Vec<_> = v.gops.iter().map(|g| (g.start, g.size)).collect();
        assert_eq!(starts, [(0, 4), (4, 4), (8, 4)]);
        let decoded = decode_video(&back, Some(&model(1))).unwrap();
        assert_eq!(decoded.frames(), enc.recon.as_slice());
    }

    #[test]
    fn image_round_trip_with_an_embedded_model() {
        let codec = ImageCodec::new(model(2));
        let img = toy_image(21, 11, 1, 3).unwrap();
        let (c, recon) = encode_image(&img, &codec, true).unwrap();
        let back = read_container(&write_container(&c).unwrap()).unwrap();
        assert_eq!(decode_image(&back, None).unwrap(), recon);
        assert!(matches!(decode_image(&back, Some(&model(3))), Err(Error::ModelHash { .. })));
        let (bare, _) = encode_image(&img, &codec, false).unwrap();
        assert!(decode_image(&bare, None).is_err());
        assert!(decode_video(&bare, Some(&model(2))).is_err());
    }

    #[test]
    fn header_errors_are_explicit() {
        let (c, _) = video_container();
        let bytes = write_container(&c).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_container(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = CONTAINER_VERSION + 1;
        assert!(matches!(read_container(&bad), Err(Error::Version(v)) if v == CONTAINER_VERSION + 1));
        for cut in [0, 3, 5, 8, bytes.len() / 2, bytes.len() - 1] {
            assert!(read_container(&bytes[..cut]).is_err(), "truncated at {cut}");
        }
    }

    #[test]
    fn every_single_bit_flip_is_detected() {
        let codec = ImageCodec::new(model(4));
        let (c, _) = encode_image(&toy_image(16, 16, 1, 1).unwrap(), &codec, false).unwrap();
        let bytes = write_container(&c).unwrap();
        for bit in 0..bytes.len() * 8 {
            let mut bad = bytes.clone();
            bad[bit / 8] ^= 1 << (bit % 8);
            assert!(read_container(&bad).is_err(), "flip of bit {bit} went unnoticed");
        }
    }

    #[test]
    fn encodes_are_byte_identical_across_runs() {
        let a = write_container(&video_container().0).unwrap();
        let b = write_container(&video_container().0).unwrap();
        assert_eq!(a, b);
        let seq = translating_sequence(16, 16, 1, 5, 1, 1).unwrap();
        let codec = ImageCodec::new(model(1));
        let run = || {
            let (c, _) = encode_video(&seq, &codec, &SchedulerConfig::default(), &InterpolatorConfig::default(), true)
                .unwrap();
            write_container(&c).unwrap()
        };
        assert_eq!(run(), run());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn q16_round_trips_representable_values(raw in any::<u32>()) {
            prop_assert_eq!(Q16::from_f64(Q16(raw).to_f64()), Q16(raw));
        }

        #[test]
        fn arbitrary_units_round_trip(
            payloads in proptest::collection::vec(proptest::collection::vec(any::<u8>(), 0..40), 1..5),
            h in 0.0f64..9.0,
        ) {
            let m = model(1);
            let units: Vec<CodedUnit> = payloads
                .into_iter()
                .enumerate()
                .map(|(i, payload)| CodedUnit {
                    kind: if i == 0 { UnitKind::Intra } else { UnitKind::Residual },
                    frame: i,
                    payload,
                })
                .collect();
            let c = Container {
                header: header_for(&m, 8, 8, 1).unwrap(),
                model: None,
                body: Body::Video(VideoBody {
                    frame_count: units.len() as u32,
                    frame_rate: Q16::from_f64(25.0),
                    tau: 16,
                    lower: Q16::from_f64(6.0),
                    upper: Q16::from_f64(8.0),
                    gop_sizes: [2, 8, 16],
                    interpolator: InterpolatorConfig::default(),
                    gops: vec![GopRecord { start: 0, size: 2, h_t: Q16::from_f64(h), units }],
                }),
            };
            prop_assert_eq!(read_container(&write_container(&c).unwrap()).unwrap(), c);
        }
    }
}
