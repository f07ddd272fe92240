//! Binary portable graymap (P5, 16-bit) and pixmap (P6, 8-bit) images.
//!
//! Depth is stored in millimetres, big-endian as the format requires.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Zero level of a signed improvement map.
pub const SIGNED_ZERO: u16 = 32768;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub maxval: u16,
    /// Row-major samples, channels interleaved.
    pub samples: Vec<u16>,
}

impl Image {
    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval > 255 {
            for s in &self.samples {
                out.extend_from_slice(&s.to_be_bytes());
            }
        } else {
            out.extend(self.samples.iter().map(|&s| s as u8));
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Image> {
        let mut p = HeaderParser { bytes, pos: 0 };
        let channels = match p.token()? {
            "P5" => 1,
            "P6" => 3,
            other => return Err(Error::Format(format!("unsupported magic {other:?}"))),
        };
        let width = p.number()?;
        let height = p.number()?;
        let maxval = p.number()?;
        if !(1..=65535).contains(&maxval) {
            return Err(Error::Format(format!("maxval {maxval} out of range")));
        }
        // exactly one whitespace byte separates the header from the raster
        p.pos += 1;
        let n = width * height * channels;
        let wide = maxval > 255;
        let raster = &bytes[p.pos.min(bytes.len())..];
        let expected = if wide { 2 * n } else { n };
        if raster.len() != expected {
            return Err(Error::Format(format!(
                "raster has {} bytes, expected {expected}",
                raster.len()
            )));
        }
        let samples: Vec<u16> = if wide {
            raster.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
        } else {
            raster.iter().map(|&b| u16::from(b)).collect()
        };
        if let Some(bad) = samples.iter().find(|&&s| usize::from(s) > maxval) {
            return Err(Error::Format(format!("sample {bad} exceeds maxval {maxval}")));
        }
        Ok(Image {
            width,
            height,
            channels,
            maxval: maxval as u16,
            samples,
        })
    }
}

struct HeaderParser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderParser<'a> {
    fn token(&mut self) -> Result<&'a str> {
        loop {
            match self.bytes.get(self.pos) {
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(_) => break,
                None => return Err(Error::Format("truncated header".into())),
            }
        }
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| Error::Format("header is not ASCII".into()))
    }

    fn number(&mut self) -> Result<usize> {
        let t = self.token()?;
        t.parse().map_err(|_| Error::Format(format!("bad header field {t:?}")))
    }
}

fn plane_dims(t: &Tensor, channels: usize) -> Result<(usize, usize)> {
    let (n, c, h, w) = t.dims4()?;
    if n != 1 || c != channels {
        return Err(Error::Shape {
            op: "image export",
            lhs: t.shape().to_vec(),
            rhs: vec![1, channels, h, w],
        });
    }
    Ok((h, w))
}

/// Depth `[1,1,H,W]` in metres to a 16-bit graymap in millimetres.
pub fn depth_to_pgm(depth: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = plane_dims(depth, 1)?;
    let samples = depth.data().iter().map(|&d| (d * 1000.0).round().clamp(0.0, 65535.0) as u16).collect();
    Ok(Image {
        width: w,
        height: h,
        channels: 1,
        maxval: u16::MAX,
        samples,
    }
    .encode())
}

/// Inverse of [`depth_to_pgm`], up to millimetre quantization.
pub fn pgm_to_depth(bytes: &[u8]) -> Result<Tensor> {
    let img = Image::decode(bytes)?;
    if img.channels != 1 {
        return Err(Error::Format("expected a graymap".into()));
    }
    let data = img.samples.iter().map(|&s| f64::from(s) / 1000.0).collect();
    Tensor::new(vec![1, 1, img.height, img.width], data)
}

/// Binary 0/1 mask `[1,1,H,W]` to an 8-bit graymap with levels 0 and 255.
pub fn mask_to_pgm(mask: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = plane_dims(mask, 1)?;
    let samples = mask.data().iter().map(|&m| if m != 0.0 { 255 } else { 0 }).collect();
    Ok(Image {
        width: w,
        height: h,
        channels: 1,
        maxval: 255,
        samples,
    }
    .encode())
}

/// RGB `[1,3,H,W]` in [0,1] to an 8-bit pixmap.
pub fn rgb_to_ppm(rgb: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = plane_dims(rgb, 3)?;
    let plane = h * w;
    let mut samples = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            samples.push((rgb.data()[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u16);
        }
    }
    Ok(Image {
        width: w,
        height: h,
        channels: 3,
        maxval: 255,
        samples,
    }
    .encode())
}

pub fn ppm_to_rgb(bytes: &[u8]) -> Result<Tensor> {
    let img = Image::decode(bytes)?;
    if img.channels != 3 {
        return Err(Error::Format("expected a pixmap".into()));
    }
    let plane = img.width * img.height;
    let max = f64::from(img.maxval);
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in img.samples.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = f64::from(px[c]) / max;
        }
    }
    Tensor::new(vec![1, 3, img.height, img.width], data)
}

/// Signed per-pixel improvement `|base - truth| - |refined - truth|` as a
/// 16-bit graymap centred on [`SIGNED_ZERO`]; brighter means improved.
#[derive(Debug, Clone, PartialEq)]
pub struct ImprovementMap {
    pub pgm: Vec<u8>,
    /// Metres represented by one grey level.
    pub metres_per_level: f64,
}

impl ImprovementMap {
    pub fn sidecar(&self) -> String {
        format!("zero_level {SIGNED_ZERO}\nmetres_per_level {:.9e}\n", self.metres_per_level)
    }
}

pub fn improvement_map(base: &Tensor, refined: &Tensor, truth: &Tensor) -> Result<ImprovementMap> {
    let (h, w) = plane_dims(truth, 1)?;
    if base.shape() != truth.shape() || refined.shape() != truth.shape() {
        return Err(Error::Shape {
            op: "improvement map",
            lhs: base.shape().to_vec(),
            rhs: refined.shape().to_vec(),
        });
    }
    let diff: Vec<f64> = (0..truth.len())
        .map(|i| {
            let d = truth.data()[i];
            (base.data()[i] - d).abs() - (refined.data()[i] - d).abs()
        })
        .collect();
    let peak = diff.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let half_range = f64::from(SIGNED_ZERO - 1);
    let metres_per_level = if peak > 0.0 { peak / half_range } else { 1.0 };
    let samples = diff
        .iter()
        .map(|v| (f64::from(SIGNED_ZERO) + v / metres_per_level).round().clamp(0.0, 65535.0) as u16)
        .collect();
    let pgm = Image {
        width: w,
        height: h,
        channels: 1,
        maxval: u16::MAX,
        samples,
    }
    .encode();
    Ok(ImprovementMap { pgm, metres_per_level })
}
