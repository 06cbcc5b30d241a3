//! Synthetic sonar-like image generator.
//!
//! Each image mimics the three regions of a sonar snapshot: a speckled
//! reverberation background (exponentially distributed intensity), a bright
//! target whose shape encodes the class, and a dark acoustic shadow cast
//! behind the target at a fixed offset. Generation is deterministic: image
//! `i` draws from its own RNG stream derived from `(seed, i)`, so per-image
//! work can be reordered or parallelized without changing any pixel.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::SonarImage;
use crate::manifest::{split_dataset, DatasetManifest, ManifestEntry};

/// Target silhouette. Size ranges are fixed per shape and chosen so the
/// shapes stay separable by bright-region area alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Archetype {
    Disk,
    Bar,
    Ring,
}

/// Disk radius range in pixels.
const DISK_RADIUS: (f64, f64) = (14.0, 18.0);
/// Bar width/height ranges in pixels. Long and thin: its bright mass stays
/// far below the ring's, and its silhouette is anisotropic.
const BAR_WIDTH: (i64, i64) = (26, 34);
const BAR_HEIGHT: (i64, i64) = (5, 6);
/// Ring outer radius range and fixed band thickness in pixels.
const RING_OUTER: (f64, f64) = (16.0, 19.0);
const RING_BAND: f64 = 5.0;

/// Placement retries before giving up on a disjoint target/shadow pair.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 100;

impl Archetype {
    pub fn name(self) -> &'static str {
        match self {
            Archetype::Disk => "disk",
            Archetype::Bar => "bar",
            Archetype::Ring => "ring",
        }
    }
}

impl fmt::Display for Archetype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Archetype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disk" => Ok(Archetype::Disk),
            "bar" => Ok(Archetype::Bar),
            "ring" => Ok(Archetype::Ring),
            other => Err(Error::InvalidConfig(format!(
                "unknown shape {other:?}, expected disk/bar/ring"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub classes: Vec<Archetype>,
    /// Images to generate per class, aligned with `classes`.
    pub per_class: Vec<usize>,
    pub width: usize,
    pub height: usize,
    /// Uniform sampling range for the bright target intensity.
    pub target_intensity: (f64, f64),
    /// Uniform sampling range for the dark shadow intensity.
    pub shadow_intensity: (f64, f64),
    /// Shadow displacement in pixels; models a fixed ensonification
    /// direction, so it is shared by every image.
    pub shadow_offset: (i64, i64),
    /// Mean background intensity before clipping.
    pub speckle_mean: f64,
    /// 0 freezes the background at `speckle_mean`; 1 is full exponential
    /// speckle. Values in between interpolate the fluctuation about the mean.
    pub speckle_amp: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            classes: vec![Archetype::Disk, Archetype::Bar, Archetype::Ring],
            per_class: vec![40, 40, 40],
            width: 200,
            height: 200,
            target_intensity: (0.8, 1.0),
            shadow_intensity: (0.0, 0.1),
            shadow_offset: (40, 0),
            speckle_mean: 0.3,
            speckle_amp: 1.0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::InvalidConfig("no target classes".into()));
        }
        if self.per_class.len() != self.classes.len() {
            return Err(Error::InvalidConfig(format!(
                "{} per-class counts for {} classes",
                self.per_class.len(),
                self.classes.len()
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidConfig(format!(
                "empty image dims {}x{}",
                self.width, self.height
            )));
        }
        for (name, (lo, hi)) in [
            ("target intensity", self.target_intensity),
            ("shadow intensity", self.shadow_intensity),
        ] {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                return Err(Error::InvalidConfig(format!(
                    "{name} range ({lo}, {hi}) must satisfy 0 <= lo <= hi <= 1"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.speckle_mean) {
            return Err(Error::InvalidConfig(format!(
                "speckle mean {} outside [0, 1]",
                self.speckle_mean
            )));
        }
        if !self.speckle_amp.is_finite() || self.speckle_amp < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "speckle amplitude {} must be finite and >= 0",
                self.speckle_amp
            )));
        }
        Ok(())
    }

    pub fn total_images(&self) -> usize {
        self.per_class.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: SonarImage,
    /// Index into `SyntheticConfig::classes`.
    pub label: usize,
}

/// Pixel offsets of a concrete shape instance relative to its center,
/// plus the bounding half-extents (left, right, top, bottom).
struct Silhouette {
    pixels: Vec<(i64, i64)>,
    extents: (i64, i64, i64, i64),
}

fn rasterize(shape: Archetype, rng: &mut ChaCha8Rng) -> Silhouette {
    // Scan order is y-major so the pixel list is deterministic.
    let mut pixels = Vec::new();
    match shape {
        Archetype::Disk => {
            let r = rng.gen_range(DISK_RADIUS.0..=DISK_RADIUS.1);
            let e = r.floor() as i64;
            for dy in -e..=e {
                for dx in -e..=e {
                    if ((dx * dx + dy * dy) as f64) <= r * r {
                        pixels.push((dx, dy));
                    }
                }
            }
            Silhouette {
                pixels,
                extents: (e, e, e, e),
            }
        }
        Archetype::Bar => {
            let w = rng.gen_range(BAR_WIDTH.0..=BAR_WIDTH.1);
            let h = rng.gen_range(BAR_HEIGHT.0..=BAR_HEIGHT.1);
            let (left, top) = ((w - 1) / 2, (h - 1) / 2);
            let (right, bottom) = (w - 1 - left, h - 1 - top);
            for dy in -top..=bottom {
                for dx in -left..=right {
                    pixels.push((dx, dy));
                }
            }
            Silhouette {
                pixels,
                extents: (left, right, top, bottom),
            }
        }
        Archetype::Ring => {
            let outer = rng.gen_range(RING_OUTER.0..=RING_OUTER.1);
            let inner = outer - RING_BAND;
            let e = outer.floor() as i64;
            for dy in -e..=e {
                for dx in -e..=e {
                    let d2 = (dx * dx + dy * dy) as f64;
                    if d2 <= outer * outer && d2 > inner * inner {
                        pixels.push((dx, dy));
                    }
                }
            }
            Silhouette {
                pixels,
                extents: (e, e, e, e),
            }
        }
    }
}

fn uniform_in(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// RNG stream for image `index` under run seed `seed`. Giving every image
/// its own stream keeps outputs independent of generation order.
fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(index as u64).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

fn generate_one(config: &SyntheticConfig, seed: u64, index: usize, label: usize) -> Result<SonarImage> {
    let mut rng = image_rng(seed, index);
    let (w, h) = (config.width as i64, config.height as i64);

    // Draw order is part of the format: background field first, then shape
    // dims, target and shadow intensities, then placement attempts.
    let mut buf = Vec::with_capacity(config.width * config.height);
    for _ in 0..config.width * config.height {
        // Exponential via inversion; 1 - u avoids ln(0).
        let x = -(1.0 - rng.gen::<f64>()).ln();
        let v = config.speckle_mean * (1.0 + config.speckle_amp * (x - 1.0));
        buf.push(v.clamp(0.0, 1.0));
    }

    let shape = rasterize(config.classes[label], &mut rng);
    let target_v = uniform_in(&mut rng, config.target_intensity);
    let shadow_v = uniform_in(&mut rng, config.shadow_intensity);

    let (exl, exr, eyt, eyb) = shape.extents;
    let (dx, dy) = config.shadow_offset;
    // Center range keeping both the target and its shadow fully inside.
    let cx_lo = exl - dx.min(0);
    let cx_hi = w - 1 - exr - dx.max(0);
    let cy_lo = eyt - dy.min(0);
    let cy_hi = h - 1 - eyb - dy.max(0);
    if cx_lo > cx_hi || cy_lo > cy_hi {
        return Err(Error::InvalidConfig(format!(
            "a {} target with shadow offset ({dx}, {dy}) cannot fit in a {}x{} image",
            config.classes[label], config.width, config.height
        )));
    }

    for attempt in 1..=MAX_PLACEMENT_ATTEMPTS {
        let cx = rng.gen_range(cx_lo..=cx_hi);
        let cy = rng.gen_range(cy_lo..=cy_hi);
        let target: HashSet<(i64, i64)> = shape
            .pixels
            .iter()
            .map(|&(px, py)| (cx + px, cy + py))
            .collect();
        let disjoint = shape
            .pixels
            .iter()
            .all(|&(px, py)| !target.contains(&(cx + px + dx, cy + py + dy)));
        if !disjoint {
            if attempt == MAX_PLACEMENT_ATTEMPTS {
                return Err(Error::Placement { attempts: attempt });
            }
            continue;
        }
        for &(x, y) in &target {
            buf[(y * w + x) as usize] = target_v;
        }
        for &(px, py) in &shape.pixels {
            let (x, y) = (cx + px + dx, cy + py + dy);
            buf[(y * w + x) as usize] = shadow_v;
        }
        return SonarImage::new(config.width, config.height, buf);
    }
    unreachable!("loop returns or errors on the last attempt");
}

/// Generates `per_class[c]` images for each class `c`, grouped by class.
/// Image `i` depends only on `(config, seed, i)`.
pub fn synth_sonar(config: &SyntheticConfig, seed: u64) -> Result<Vec<LabeledImage>> {
    config.validate()?;
    let mut out = Vec::with_capacity(config.total_images());
    let mut index = 0;
    for (label, &count) in config.per_class.iter().enumerate() {
        for _ in 0..count {
            out.push(LabeledImage {
                image: generate_one(config, seed, index, label)?,
                label,
            });
            index += 1;
        }
    }
    Ok(out)
}

/// Generates a dataset, writes each image as PGM under `dir`, assigns
/// stratified splits, and writes `manifest.csv` alongside. Returns the
/// manifest. Image paths in the manifest are relative to `dir`.
pub fn write_dataset(
    config: &SyntheticConfig,
    seed: u64,
    dir: &Path,
    ratios: (f64, f64, f64),
    split_seed: u64,
) -> Result<DatasetManifest> {
    let dataset = synth_sonar(config, seed)?;
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let class_names: Vec<String> = config.classes.iter().map(|c| c.name().into()).collect();
    let labels: Vec<usize> = dataset.iter().map(|s| s.label).collect();
    let splits = split_dataset(&labels, &class_names, ratios, split_seed)?;

    let mut entries = Vec::with_capacity(dataset.len());
    for (i, sample) in dataset.iter().enumerate() {
        let name = format!("img_{i:04}_{}.pgm", class_names[sample.label]);
        sample.image.write_pgm(&dir.join(&name))?;
        entries.push(ManifestEntry {
            path: name,
            label: class_names[sample.label].clone(),
            split: splits[i],
        });
    }
    let manifest = DatasetManifest::new(class_names, entries)?;
    manifest.write_csv(&dir.join("manifest.csv"))?;
    Ok(manifest)
}
