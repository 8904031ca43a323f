//! Grayscale images on a row-major grid and plain PGM (P2) I/O.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    rows: usize,
    cols: usize,
    pixels: Vec<f64>,
}

impl ImageGrid {
    pub fn new(rows: usize, cols: usize, pixels: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument("image must have at least one pixel".into()));
        }
        if pixels.len() != rows * cols {
            return Err(Error::DimensionMismatch { expected: rows * cols, found: pixels.len() });
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("image intensities must be finite".into()));
        }
        Ok(Self { rows, cols, pixels })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.pixels[r * self.cols + c]
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    /// Parses a plain PGM; intensities are divided by the file's maxval.
    pub fn parse_pgm(text: &str) -> Result<Self> {
        let mut tokens = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or(""))
            .flat_map(str::split_whitespace);
        let bad = |m: &str| Error::ImageIo(format!("malformed PGM: {m}"));
        if tokens.next() != Some("P2") {
            return Err(bad("expected P2 magic"));
        }
        let mut header = [0usize; 3];
        for (slot, name) in header.iter_mut().zip(["width", "height", "maxval"]) {
            *slot = tokens
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| bad(&format!("missing {name}")))?;
        }
        let [cols, rows, maxval] = header;
        if maxval == 0 || maxval > 65535 {
            return Err(bad("maxval out of range"));
        }
        let mut pixels = Vec::with_capacity(rows * cols);
        for t in tokens {
            let v: usize = t.parse().map_err(|_| bad(&format!("bad sample {t:?}")))?;
            if v > maxval {
                return Err(bad("sample exceeds maxval"));
            }
            pixels.push(v as f64 / maxval as f64);
        }
        if pixels.len() != rows * cols {
            return Err(bad(&format!("expected {} samples, found {}", rows * cols, pixels.len())));
        }
        Self::new(rows, cols, pixels).map_err(|e| Error::ImageIo(e.to_string()))
    }

    /// Plain PGM text with maxval 255; intensities are clamped to `[0, 1]`.
    pub fn to_pgm(&self) -> String {
        let mut s = format!("P2\n{} {}\n255\n", self.cols, self.rows);
        for row in self.pixels.chunks(self.cols) {
            let line: Vec<String> = row.iter().map(|v| quantize(*v).to_string()).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }

    pub fn read_pgm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::ImageIo(format!("{}: {e}", path.display())))?;
        Self::parse_pgm(&text)
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_pgm())
            .map_err(|e| Error::ImageIo(format!("{}: {e}", path.display())))
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// A bright disk centred on a dark background. Edge pixels are anti-aliased
/// by 8×8 supersampling.
pub fn disk_phantom(rows: usize, cols: usize, background: f64, foreground: f64, radius: f64) -> ImageGrid {
    const SS: usize = 8;
    let (cr, cc) = (rows as f64 / 2.0, cols as f64 / 2.0);
    let mut pixels = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let mut inside = 0;
            for i in 0..SS {
                for j in 0..SS {
                    let y = r as f64 + (i as f64 + 0.5) / SS as f64 - cr;
                    let x = c as f64 + (j as f64 + 0.5) / SS as f64 - cc;
                    if x * x + y * y <= radius * radius {
                        inside += 1;
                    }
                }
            }
            let f = inside as f64 / (SS * SS) as f64;
            pixels.push(background + f * (foreground - background));
        }
    }
    ImageGrid::new(rows, cols, pixels).expect("phantom dimensions are positive")
}
