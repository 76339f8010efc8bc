//! File formats: 8-bit RGB images (PNG, binary PPM), depth maps (16-bit
//! grayscale PNG, binary PGM), dataset manifests and model checkpoints.
//!
//! Colour values map to tensors as `byte / 255`; tensors map back by clamping
//! to `[0, 1]` and rounding `v · 255` half-up. All writes go through a
//! temporary file in the destination directory followed by a rename.

pub mod checkpoint;
pub mod manifest;

use std::io::{Cursor, Write};
use std::path::Path;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use manifest::{
    read_manifest, write_manifest, DatasetManifest, ManifestEntry, SynthesisRecord,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Interleaved 8-bit RGB pixels, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rgb8Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Rgb8Image {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::dim(format!(
                "{} bytes do not form a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Rgb8Image {
            width,
            height,
            data,
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&b| dequantize(b)).collect();
        Tensor::from_vec(self.height, self.width, 3, data).expect("validated dimensions")
    }

    /// Clamps to `[0, 1]` and quantizes each channel.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.channels() != 3 {
            return Err(Error::dim(format!(
                "RGB image needs 3 channels, got {}",
                t.channels()
            )));
        }
        Ok(Rgb8Image {
            width: t.width(),
            height: t.height(),
            data: t.data().iter().map(|&v| quantize(v)).collect(),
        })
    }
}

#[inline]
pub fn dequantize(byte: u8) -> f64 {
    byte as f64 / 255.0
}

/// `round(clamp(v, 0, 1) · 255)` with ties rounding up. NaN maps to 0.
#[inline]
pub fn quantize(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Writes `bytes` to `path` via a sibling temporary file and rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

struct RawImage {
    width: usize,
    height: usize,
    channels: usize,
    /// Samples widened to u16; `max` is the largest representable value.
    samples: Vec<u16>,
    max: u16,
}

fn decode_png(path: &Path, bytes: &[u8]) -> Result<RawImage> {
    let mut cursor = Cursor::new(bytes);
    let fail = |cursor: &Cursor<&[u8]>, e: png::DecodingError| {
        Error::format(
            path,
            format!("PNG decode failed at byte {}: {e}", cursor.position()),
        )
    };
    let decoded = {
        let decoder = png::Decoder::new(&mut cursor);
        match decoder.read_info() {
            Ok(mut reader) => {
                let size = reader.output_buffer_size();
                match size {
                    Some(size) => {
                        let mut buf = vec![0; size];
                        reader.next_frame(&mut buf).map(|info| (info, buf))
                    }
                    None => {
                        return Err(Error::format(path, "PNG output buffer size overflow"));
                    }
                }
            }
            Err(e) => Err(e),
        }
    };
    let (info, buf) = decoded.map_err(|e| fail(&cursor, e))?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            return Err(Error::format(path, "indexed-colour PNG is not supported"));
        }
    };
    let (width, height) = (info.width as usize, info.height as usize);
    let (samples, max) = match info.bit_depth {
        png::BitDepth::Eight => (
            buf[..width * height * channels]
                .iter()
                .map(|&b| b as u16)
                .collect(),
            255,
        ),
        png::BitDepth::Sixteen => (
            buf[..width * height * channels * 2]
                .chunks_exact(2)
                .map(|b| u16::from_be_bytes([b[0], b[1]]))
                .collect(),
            u16::MAX,
        ),
        other => {
            return Err(Error::format(
                path,
                format!("unsupported PNG bit depth {other:?}"),
            ));
        }
    };
    Ok(RawImage {
        width,
        height,
        channels,
        samples,
        max,
    })
}

/// Parses a binary PNM header (`P5` or `P6`) and its raster.
fn decode_pnm(path: &Path, bytes: &[u8]) -> Result<RawImage> {
    let channels = match &bytes[..2.min(bytes.len())] {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err(Error::format(path, "not a binary PNM file (byte 0)")),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Whitespace and `#` comments between header fields.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => {
                    return Err(Error::format(
                        path,
                        format!("truncated PNM header at byte {pos}"),
                    ))
                }
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::format(path, format!("bad PNM header field at byte {start}")))?;
    }
    let [width, height, maxval] = fields;
    if maxval > u16::MAX as usize {
        return Err(Error::format(
            path,
            format!("PNM maxval {maxval} exceeds 65535"),
        ));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => {
            return Err(Error::format(
                path,
                format!("missing whitespace after PNM header at byte {pos}"),
            ))
        }
    }
    let bytes_per_sample = if maxval < 256 { 1 } else { 2 };
    let count = width * height * channels;
    let need = count * bytes_per_sample;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(Error::format(
            path,
            format!(
                "truncated PNM raster at byte {}: expected {need} bytes of pixel data",
                pos + raster.len()
            ),
        ));
    }
    let samples = if bytes_per_sample == 1 {
        raster[..need].iter().map(|&b| b as u16).collect()
    } else {
        raster[..need]
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]))
            .collect()
    };
    Ok(RawImage {
        width,
        height,
        channels,
        samples,
        max: maxval as u16,
    })
}

fn decode_any(path: &Path) -> Result<RawImage> {
    let bytes = read_bytes(path)?;
    if bytes.starts_with(b"\x89PNG") {
        decode_png(path, &bytes)
    } else if bytes.starts_with(b"P5") || bytes.starts_with(b"P6") {
        decode_pnm(path, &bytes)
    } else {
        Err(Error::format(
            path,
            "unrecognized image format at byte 0 (expected PNG or binary PNM)",
        ))
    }
}

/// Reads an 8-bit RGB PNG (alpha is dropped) or binary PPM.
pub fn read_rgb8(path: impl AsRef<Path>) -> Result<Rgb8Image> {
    let path = path.as_ref();
    let raw = decode_any(path)?;
    if raw.max != 255 || !(raw.channels == 3 || raw.channels == 4) {
        return Err(Error::format(
            path,
            format!(
                "expected 8-bit RGB, found {} channel(s) with max value {}",
                raw.channels, raw.max
            ),
        ));
    }
    let data = raw
        .samples
        .chunks_exact(raw.channels)
        .flat_map(|px| [px[0] as u8, px[1] as u8, px[2] as u8])
        .collect();
    Rgb8Image::new(raw.width, raw.height, data)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    Ok(read_rgb8(path)?.to_tensor())
}

/// Encodes by extension: `.ppm`/`.pnm` as binary PPM, anything else as PNG.
pub fn write_rgb8(image: &Rgb8Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let is_pnm = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm") || e.eq_ignore_ascii_case("pnm"));
    let bytes = if is_pnm {
        let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
        out.extend_from_slice(&image.data);
        out
    } else {
        encode_png(
            path,
            image.width,
            image.height,
            png::ColorType::Rgb,
            png::BitDepth::Eight,
            &image.data,
        )?
    };
    atomic_write(path, &bytes)
}

pub fn write_image(tensor: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    write_rgb8(&Rgb8Image::from_tensor(tensor)?, path)
}

fn encode_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    data: &[u8],
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let to_err = |e: png::EncodingError| Error::format(path, format!("PNG encode failed: {e}"));
    {
        let mut encoder = png::Encoder::new(&mut out, width as u32, height as u32);
        encoder.set_color(color);
        encoder.set_depth(depth);
        let mut writer = encoder.write_header().map_err(to_err)?;
        writer.write_image_data(data).map_err(to_err)?;
        writer.finish().map_err(to_err)?;
    }
    Ok(out)
}

/// A depth map normalized by its own value range.
#[derive(Debug, Clone)]
pub struct DepthMap {
    /// `H × W × 1`, values in `[0, 1]`.
    pub depth: Tensor,
    pub raw_min: u16,
    pub raw_max: u16,
    /// Set when every sample is equal; `depth` is then all zeros.
    pub constant: bool,
}

/// Reads a grayscale PNG (8 or 16 bit) or binary PGM and rescales it to
/// `[0, 1]` using the file's own minimum and maximum.
pub fn read_depth(path: impl AsRef<Path>) -> Result<DepthMap> {
    let path = path.as_ref();
    let raw = decode_any(path)?;
    if raw.channels != 1 {
        return Err(Error::format(
            path,
            format!(
                "depth map must be grayscale, found {} channels",
                raw.channels
            ),
        ));
    }
    let raw_min = *raw.samples.iter().min().expect("non-empty raster");
    let raw_max = *raw.samples.iter().max().expect("non-empty raster");
    let constant = raw_min == raw_max;
    if constant {
        log::warn!(
            "{}: constant depth map ({raw_min}); normalizing to zeros",
            path.display()
        );
    }
    let span = (raw_max - raw_min) as f64;
    let data = raw
        .samples
        .iter()
        .map(|&v| {
            if constant {
                0.0
            } else {
                (v - raw_min) as f64 / span
            }
        })
        .collect();
    Ok(DepthMap {
        depth: Tensor::from_vec(raw.height, raw.width, 1, data)?,
        raw_min,
        raw_max,
        constant,
    })
}

/// Writes a `[0, 1]` single-channel tensor as 16-bit grayscale, PNG or PGM
/// by extension.
pub fn write_depth(depth: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if depth.channels() != 1 {
        return Err(Error::dim("depth map must be single-channel"));
    }
    let samples: Vec<u16> = depth
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 65535.0 + 0.5).floor() as u16)
        .collect();
    write_gray16(&samples, depth.width(), depth.height(), path)
}

/// Writes raw 16-bit grayscale samples (PNG, or PGM for `.pgm`).
pub fn write_gray16(
    samples: &[u16],
    width: usize,
    height: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    if samples.len() != width * height {
        return Err(Error::dim("sample count does not match dimensions"));
    }
    let be: Vec<u8> = samples.iter().flat_map(|v| v.to_be_bytes()).collect();
    let is_pgm = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    let bytes = if is_pgm {
        let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
        out.extend_from_slice(&be);
        out
    } else {
        encode_png(
            path,
            width,
            height,
            png::ColorType::Grayscale,
            png::BitDepth::Sixteen,
            &be,
        )?
    };
    atomic_write(path, &bytes)
}
