//! 8-bit RGB images and the binary PPM (P6) format.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{contract, Error, Result};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    /// Row-major interleaved RGB.
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        contract!(
            pixels.len() == width * height * 3,
            "{width}x{height} RGB image needs {} bytes, got {}",
            width * height * 3,
            pixels.len()
        );
        Ok(Image { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// `(1, 3, h, w)` with values `p / 255`.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn(Shape::new(1, 3, self.height, self.width), |[_, c, y, x]| {
            T::of(self.pixels[(y * self.width + x) * 3 + c] as f64 / 255.0)
        })
    }

    /// Clamps to [0, 1] and rounds to the nearest 8-bit level.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        contract!(s.n == 1 && s.c == 3, "expected a (1, 3, h, w) tensor, got {s}");
        let mut pixels = vec![0u8; s.h * s.w * 3];
        for c in 0..3 {
            for (k, v) in t.plane(0, c).iter().enumerate() {
                pixels[k * 3 + c] = (v.f64().clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        Image::new(s.w, s.h, pixels)
    }

    pub fn encode_p6(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode_p6(bytes: &[u8]) -> Result<Self> {
        let mut r = HeaderReader { bytes, pos: 0 };
        if bytes.get(..2) != Some(b"P6".as_slice()) {
            return Err(Error::Parse { offset: 0, message: "expected P6 magic".into() });
        }
        r.pos = 2;
        let width = r.number("width")?;
        let height = r.number("height")?;
        let maxval = r.number("maxval")?;
        if maxval != 255 {
            return Err(Error::Parse { offset: r.pos, message: format!("maxval {maxval} unsupported, expected 255") });
        }
        // Exactly one whitespace byte separates the header from the raster.
        match bytes.get(r.pos) {
            Some(b) if b.is_ascii_whitespace() => r.pos += 1,
            _ => return Err(Error::Parse { offset: r.pos, message: "expected whitespace after maxval".into() }),
        }
        let needed = width
            .checked_mul(height)
            .and_then(|p| p.checked_mul(3))
            .ok_or_else(|| Error::Parse { offset: r.pos, message: "image dimensions overflow".into() })?;
        let available = bytes.len() - r.pos;
        if available < needed {
            return Err(Error::Truncated { offset: r.pos, needed, available });
        }
        Image::new(width, height, bytes[r.pos..r.pos + needed].to_vec())
    }
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let before = self.pos;
        self.skip_space();
        if self.pos == before {
            return Err(Error::Parse { offset: self.pos, message: format!("expected whitespace before {what}") });
        }
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .filter(|&v: &usize| v > 0)
            .ok_or_else(|| Error::Parse { offset: start, message: format!("expected positive integer {what}") })
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Contract(format!("{} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".{}.tmp", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = fs::File::create(&tmp)
        .and_then(|mut f| f.write_all(bytes).and_then(|_| f.sync_all()))
        .and_then(|_| fs::rename(&tmp, path));
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn load_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Image::decode_p6(&bytes)
}

pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    write_atomic(path, &img.encode_p6())
}
