//! Grayscale sonar images and 8-bit PGM/PNG I/O.
//!
//! Intensities are stored as `f64` in `[0, 1]`. 8-bit files map to that
//! range by `v / 255`; writing maps back with round-to-nearest. PGM (binary
//! `P5`) is parsed and written here; PNG decoding is delegated to the
//! `image` crate and accepted only as 8-bit grayscale after conversion.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SonarImage {
    width: usize,
    height: usize,
    /// Row-major, `height * width` values in `[0, 1]`.
    intensities: Vec<f64>,
}

impl SonarImage {
    pub fn new(width: usize, height: usize, intensities: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidConfig(format!(
                "image dimensions must be nonzero, got {width}x{height}"
            )));
        }
        if intensities.len() != width * height {
            return Err(Error::Shape(format!(
                "{width}x{height} image needs {} intensities, got {}",
                width * height,
                intensities.len()
            )));
        }
        for (i, &v) in intensities.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Numeric(format!(
                    "intensity {v} at pixel {i} outside [0, 1]"
                )));
            }
        }
        Ok(SonarImage {
            width,
            height,
            intensities,
        })
    }

    pub fn constant(width: usize, height: usize, v: f64) -> Result<Self> {
        SonarImage::new(width, height, vec![v; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Intensity at column `x`, row `y`.
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        debug_assert!(x < self.width && y < self.height);
        self.intensities[y * self.width + x]
    }

    pub fn intensities(&self) -> &[f64] {
        &self.intensities
    }

    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        let vals = bytes.iter().map(|&b| b as f64 / 255.0).collect();
        SonarImage::new(width, height, vals)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.intensities
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut data = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        data.extend(self.to_bytes());
        fs::write(path, data).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let data =
            fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        parse_pgm(&data, &path.display().to_string())
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let img = image::ImageReader::open(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?
            .decode()
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        let luma = img.to_luma8();
        let (w, h) = (luma.width() as usize, luma.height() as usize);
        SonarImage::from_bytes(w, h, luma.as_raw())
    }

    /// Dispatches on file extension: `.pgm` or `.png` (case-insensitive).
    pub fn read_auto(path: &Path) -> Result<Self> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        match ext.as_deref() {
            Some("pgm") => SonarImage::read_pgm(path),
            Some("png") => SonarImage::read_png(path),
            _ => Err(Error::InvalidConfig(format!(
                "unsupported image extension on {:?} (expected .pgm or .png)",
                path
            ))),
        }
    }
}

/// Header tokenizer state: byte position plus the 1-based line number, so
/// parse errors can point at the offending line.
struct PgmCursor<'a> {
    data: &'a [u8],
    pos: usize,
    line: usize,
}

impl<'a> PgmCursor<'a> {
    fn new(data: &'a [u8]) -> Self {
        PgmCursor { data, pos: 0, line: 1 }
    }

    fn bump(&mut self) -> Option<u8> {
        let b = *self.data.get(self.pos)?;
        self.pos += 1;
        if b == b'\n' {
            self.line += 1;
        }
        Some(b)
    }

    /// Next whitespace-delimited token, skipping `#` comments.
    fn token(&mut self) -> Option<(String, usize)> {
        loop {
            let b = *self.data.get(self.pos)?;
            if b.is_ascii_whitespace() {
                self.bump();
            } else if b == b'#' {
                while let Some(b) = self.bump() {
                    if b == b'\n' {
                        break;
                    }
                }
            } else {
                break;
            }
        }
        let line = self.line;
        let mut tok = Vec::new();
        while let Some(&b) = self.data.get(self.pos) {
            if b.is_ascii_whitespace() {
                break;
            }
            tok.push(b);
            self.bump();
        }
        Some((String::from_utf8_lossy(&tok).into_owned(), line))
    }
}

fn parse_pgm(data: &[u8], path: &str) -> Result<SonarImage> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_string(),
        line,
        msg,
    };
    let mut cur = PgmCursor::new(data);
    let (magic, line) = cur
        .token()
        .ok_or_else(|| err(1, "empty file".into()))?;
    if magic != "P5" {
        return Err(err(line, format!("expected magic P5, got {magic:?}")));
    }
    let mut dims = [0usize; 3];
    for (i, name) in ["width", "height", "maxval"].iter().enumerate() {
        let (tok, line) = cur
            .token()
            .ok_or_else(|| err(cur.line, format!("missing {name}")))?;
        dims[i] = tok
            .parse()
            .map_err(|_| err(line, format!("bad {name} {tok:?}")))?;
    }
    let [width, height, maxval] = dims;
    if width == 0 || height == 0 {
        return Err(err(cur.line, format!("zero dimension {width}x{height}")));
    }
    if maxval != 255 {
        return Err(err(
            cur.line,
            format!("unsupported maxval {maxval}, only 255 is handled"),
        ));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match cur.bump() {
        Some(b) if b.is_ascii_whitespace() => {}
        _ => return Err(err(cur.line, "missing separator before raster".into())),
    }
    let raster = &data[cur.pos..];
    let expected = width * height;
    if raster.len() < expected {
        return Err(err(
            cur.line,
            format!("raster has {} bytes, expected {expected}", raster.len()),
        ));
    }
    SonarImage::from_bytes(width, height, &raster[..expected])
}
