use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// RGB image, row-major `height x width x 3`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: Image,
    pub label: usize,
}

pub const CHANNELS: usize = 3;

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image", format!("empty image {width}x{height}")));
        }
        if pixels.len() != width * height * CHANNELS {
            return Err(Error::invalid(
                "image",
                format!(
                    "{width}x{height}x3 needs {} values, got {}",
                    width * height * CHANNELS,
                    pixels.len()
                ),
            ));
        }
        if let Some(i) = pixels.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid(
                "image",
                format!("pixel value {} at {i} outside [0, 1]", pixels[i]),
            ));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    /// `[H, W, 3]` tensor rescaled to `[-1, 1]`, the encoder's input range.
    pub fn to_signed_tensor(&self) -> Tensor {
        let data = self.pixels.iter().map(|v| 2.0 * v - 1.0).collect();
        Tensor::new(&[self.height, self.width, CHANNELS], data).expect("validated dimensions")
    }

    /// From a `[H, W, 3]` tensor already in `[0, 1]`.
    pub fn from_unit_tensor(t: &Tensor) -> Result<Self> {
        let &[h, w, c] = t.shape() else {
            return Err(Error::invalid(
                "image",
                format!("expected [H, W, 3], got {:?}", t.shape()),
            ));
        };
        if c != CHANNELS {
            return Err(Error::invalid("image", format!("expected 3 channels, got {c}")));
        }
        Self::new(w, h, t.to_vec())
    }

    /// 8-bit samples, round to nearest.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|v| (v * 255.0).round() as u8).collect()
    }

    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|&b| f64::from(b) / 255.0).collect())
    }

    /// Tiles equally sized images into a `cols`-wide grid; empty cells are black.
    pub fn grid(images: &[Image], cols: usize) -> Result<Image> {
        let first = images.first().ok_or_else(|| Error::invalid("grid", "no images"))?;
        let (w, h) = (first.width, first.height);
        if images.iter().any(|im| im.width != w || im.height != h) {
            return Err(Error::invalid("grid", "images differ in size"));
        }
        let cols = cols.max(1);
        let rows = images.len().div_ceil(cols);
        let (gw, gh) = (cols * w, rows * h);
        let mut pixels = vec![0.0; gw * gh * CHANNELS];
        for (i, im) in images.iter().enumerate() {
            let (ox, oy) = ((i % cols) * w, (i / cols) * h);
            for y in 0..h {
                let src = &im.pixels[y * w * CHANNELS..(y + 1) * w * CHANNELS];
                let start = ((oy + y) * gw + ox) * CHANNELS;
                pixels[start..start + w * CHANNELS].copy_from_slice(src);
            }
        }
        Image::new(gw, gh, pixels)
    }
}

/// Binary portable pixmap (P6, maxval 255).
pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.to_bytes());
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0usize;
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::format("ppm", 0, "missing P6 magic"));
    }
    pos += 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::format("ppm", pos as u64, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("ppm", pos as u64, "expected a decimal number"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format("ppm", start as u64, "number out of range"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::format("ppm", pos as u64, format!("unsupported maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::format("ppm", pos as u64, "zero dimension"));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => {
            return Err(Error::format(
                "ppm",
                pos as u64,
                "expected single whitespace before raster",
            ))
        }
    }
    let need = width * height * CHANNELS;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(Error::format(
            "ppm",
            bytes.len() as u64,
            format!("raster truncated: need {need} bytes, have {}", raster.len()),
        ));
    }
    Image::from_bytes(width, height, &raster[..need])
}

pub fn write_image(path: impl AsRef<Path>, image: &Image) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_ppm(image)).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes)
}
