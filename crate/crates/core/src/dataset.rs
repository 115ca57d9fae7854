//! Procedural training data, dataset manifests and seeded batching.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{load_pnm, save_pnm, Image};
use crate::prompt::PromptId;
use crate::rng::SeedStream;

pub const SUPPORTED_SIZES: [usize; 3] = [16, 32, 64];

/// Checkerboard cells alternate between exactly these two values.
pub const CHECKER_LEVELS: (f64, f64) = (0.1, 0.9);

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetItem {
    pub clean: Image,
    pub prompt: PromptId,
    pub tags: Vec<PromptId>,
}

/// Generates `n` grayscale `size`×`size` images, family `i % 8` for item `i`.
pub fn synth_dataset(seed: u64, n: usize, size: usize) -> Result<Vec<DatasetItem>> {
    if !SUPPORTED_SIZES.contains(&size) {
        return Err(Error::config(format!(
            "synthetic image size must be one of {SUPPORTED_SIZES:?}, got {size}"
        )));
    }
    if n == 0 {
        return Err(Error::config("dataset needs at least one item"));
    }
    let root = SeedStream::new(seed).split("data");
    (0..n)
        .map(|i| {
            let family = PromptId::family(i);
            let mut rng = root.index(i as u64).rng();
            Ok(DatasetItem {
                clean: render(family, size, &mut rng)?,
                prompt: family,
                tags: vec![PromptId::HighQuality],
            })
        })
        .collect()
}

/// Draws one image of the given content family.
pub fn render<R: Rng>(family: PromptId, size: usize, rng: &mut R) -> Result<Image> {
    let s = size as f64;
    let img = match family {
        PromptId::Gradient => {
            let angle = rng.random_range(0.0..2.0 * PI);
            let (dx, dy) = (angle.cos(), angle.sin());
            let (lo, hi) = (rng.random_range(0.05..0.35), rng.random_range(0.65..0.95));
            Image::from_fn(1, size, size, |_, y, x| {
                let u = ((x as f64 + 0.5) / s - 0.5) * dx + ((y as f64 + 0.5) / s - 0.5) * dy;
                let t = (u / std::f64::consts::SQRT_2 + 0.5).clamp(0.0, 1.0);
                lo + (hi - lo) * t
            })?
        }
        PromptId::Checkerboard => {
            let cell = [2usize, 4, 8][rng.random_range(0..3)].min(size / 2);
            let (ox, oy) = (rng.random_range(0..cell), rng.random_range(0..cell));
            let (a, b) = CHECKER_LEVELS;
            Image::from_fn(1, size, size, |_, y, x| {
                if ((x + ox) / cell + (y + oy) / cell) % 2 == 0 {
                    a
                } else {
                    b
                }
            })?
        }
        PromptId::Blobs => {
            let k = rng.random_range(2..=4);
            let blobs: Vec<(f64, f64, f64, f64)> = (0..k)
                .map(|_| {
                    (
                        rng.random_range(0.15..0.85) * s,
                        rng.random_range(0.15..0.85) * s,
                        rng.random_range(0.06..0.16) * s,
                        rng.random_range(0.4..0.8),
                    )
                })
                .collect();
            Image::from_fn(1, size, size, |_, y, x| {
                let v: f64 = blobs
                    .iter()
                    .map(|&(cx, cy, r, amp)| {
                        let d2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
                        amp * (-d2 / (2.0 * r * r)).exp()
                    })
                    .sum();
                (0.1 + v).min(0.95)
            })?
        }
        PromptId::Stripes => {
            let angle = rng.random_range(0.0..PI);
            let period = rng.random_range(0.15..0.35) * s;
            let phase = rng.random_range(0.0..2.0 * PI);
            Image::from_fn(1, size, size, |_, y, x| {
                let u = x as f64 * angle.cos() + y as f64 * angle.sin();
                0.5 + 0.35 * (2.0 * PI * u / period + phase).sin()
            })?
        }
        PromptId::Rings => {
            let (cx, cy) = (rng.random_range(0.3..0.7) * s, rng.random_range(0.3..0.7) * s);
            let period = rng.random_range(0.12..0.25) * s;
            Image::from_fn(1, size, size, |_, y, x| {
                let r = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
                0.5 + 0.35 * (2.0 * PI * r / period).cos()
            })?
        }
        PromptId::Texture => {
            let waves: Vec<(f64, f64, f64)> = (0..3)
                .map(|_| {
                    (
                        rng.random_range(1.0..4.0) * 2.0 * PI / s,
                        rng.random_range(1.0..4.0) * 2.0 * PI / s,
                        rng.random_range(0.0..2.0 * PI),
                    )
                })
                .collect();
            Image::from_fn(1, size, size, |_, y, x| {
                let v: f64 = waves
                    .iter()
                    .map(|&(fx, fy, p)| (fx * x as f64 + p).sin() * (fy * y as f64).cos())
                    .sum();
                0.5 + 0.13 * v
            })?
        }
        PromptId::Disk => {
            let (cx, cy) = (rng.random_range(0.35..0.65) * s, rng.random_range(0.35..0.65) * s);
            let r = rng.random_range(0.15..0.32) * s;
            let bright = rng.random_bool(0.5);
            let (fg, bg) = if bright { (0.85, 0.15) } else { (0.15, 0.85) };
            Image::from_fn(1, size, size, |_, y, x| {
                let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
                if d <= r {
                    fg
                } else {
                    bg
                }
            })?
        }
        PromptId::Cross => {
            let cx = rng.random_range(size / 4..3 * size / 4);
            let cy = rng.random_range(size / 4..3 * size / 4);
            let half = rng.random_range(1..=(size / 16).max(1) + 1);
            Image::from_fn(1, size, size, |_, y, x| {
                if x.abs_diff(cx) <= half || y.abs_diff(cy) <= half {
                    0.8
                } else {
                    0.2
                }
            })?
        }
        other => {
            return Err(Error::config(format!(
                "{other} is a quality token, not a content family"
            )))
        }
    };
    Ok(img.clamped())
}

/// Seeded mini-batches over a dataset, reshuffled every epoch. The final
/// short batch of each epoch is emitted. The iterator never ends; callers take
/// as many batches as they need.
pub struct Batches<'a> {
    data: &'a [DatasetItem],
    batch: usize,
    stream: SeedStream,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

pub fn batches(data: &[DatasetItem], batch: usize, seed: u64) -> Result<Batches<'_>> {
    if data.is_empty() {
        return Err(Error::config("cannot batch an empty dataset"));
    }
    if batch == 0 || batch > data.len() {
        return Err(Error::config(format!(
            "batch size {batch} must be in 1..={}",
            data.len()
        )));
    }
    let stream = SeedStream::new(seed).split("batches");
    Ok(Batches {
        data,
        batch,
        stream,
        epoch: 0,
        order: epoch_order(data.len(), stream, 0),
        cursor: 0,
    })
}

fn epoch_order(n: usize, stream: SeedStream, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream.index(epoch).rng());
    order
}

/// Where a [`Batches`] stream stands; enough to resume it exactly.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPosition {
    pub epoch: u64,
    pub cursor: usize,
}

impl<'a> Batches<'a> {
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn position(&self) -> BatchPosition {
        BatchPosition {
            epoch: self.epoch,
            cursor: self.cursor,
        }
    }

    pub fn seek(&mut self, pos: BatchPosition) -> Result<()> {
        if pos.cursor > self.data.len() {
            return Err(Error::config(format!(
                "batch cursor {} beyond dataset of {}",
                pos.cursor,
                self.data.len()
            )));
        }
        if pos.epoch != self.epoch {
            self.order = epoch_order(self.data.len(), self.stream, pos.epoch);
            self.epoch = pos.epoch;
        }
        self.cursor = pos.cursor;
        Ok(())
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.data.len().div_ceil(self.batch)
    }

    /// Next batch as dataset indices.
    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.cursor >= self.order.len() {
            self.epoch += 1;
            self.order = epoch_order(self.data.len(), self.stream, self.epoch);
            self.cursor = 0;
        }
        let end = (self.cursor + self.batch).min(self.order.len());
        let idx = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        idx
    }
}

impl<'a> Iterator for Batches<'a> {
    type Item = Vec<&'a DatasetItem>;

    fn next(&mut self) -> Option<Self::Item> {
        let data = self.data;
        Some(self.next_indices().into_iter().map(|i| &data[i]).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub prompt: PromptId,
    pub tags: Vec<PromptId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub items: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `<index>.pgm` files plus `manifest.json` into `dir`.
pub fn write_dataset(dir: &Path, items: &[DatasetItem]) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let width = items.len().to_string().len().max(4);
    let mut entries = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let ext = if item.clean.channels() == 1 { "pgm" } else { "ppm" };
        let file = format!("{i:0width$}.{ext}");
        save_pnm(&item.clean, dir.join(&file))?;
        entries.push(ManifestEntry {
            file,
            prompt: item.prompt,
            tags: item.tags.clone(),
        });
    }
    let manifest = Manifest { items: entries };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<Vec<DatasetItem>> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    manifest
        .items
        .into_iter()
        .map(|e| {
            Ok(DatasetItem {
                clean: load_pnm(dir.join(&e.file))?,
                prompt: e.prompt,
                tags: e.tags,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seek_resumes_the_stream() {
        let data = synth_dataset(1, 10, 16).unwrap();
        let mut a = batches(&data, 4, 3).unwrap();
        for _ in 0..5 {
            a.next_indices();
        }
        let pos = a.position();
        let rest: Vec<Vec<usize>> = (0..7).map(|_| a.next_indices()).collect();
        let mut b = batches(&data, 4, 3).unwrap();
        b.seek(pos).unwrap();
        let again: Vec<Vec<usize>> = (0..7).map(|_| b.next_indices()).collect();
        assert_eq!(rest, again);
        assert!(b.seek(BatchPosition { epoch: 0, cursor: 11 }).is_err());
    }

    #[test]
    fn deterministic_in_seed() {
        let a = synth_dataset(3, 24, 16).unwrap();
        let b = synth_dataset(3, 24, 16).unwrap();
        assert_eq!(a, b);
        let c = synth_dataset(4, 24, 16).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn round_robin_families() {
        let data = synth_dataset(0, 800, 32).unwrap();
        for fam in PromptId::FAMILIES {
            assert_eq!(data.iter().filter(|d| d.prompt == fam).count(), 100);
        }
        assert!(data.iter().all(|d| d.tags == vec![PromptId::HighQuality]));
    }

    #[test]
    fn checkerboard_histogram_is_bimodal() {
        let data = synth_dataset(11, 64, 32).unwrap();
        let mut bins = [0usize; 10];
        let mut total = 0;
        for item in data.iter().filter(|d| d.prompt == PromptId::Checkerboard) {
            for &p in item.clean.pixels() {
                bins[((p * 10.0) as usize).min(9)] += 1;
                total += 1;
            }
        }
        // all mass in the bins holding 0.1 and 0.9, split roughly evenly
        assert_eq!(bins[1] + bins[9], total);
        let frac = bins[1] as f64 / total as f64;
        assert!((0.4..=0.6).contains(&frac), "{frac}");
    }

    #[test]
    fn pixels_in_unit_range_and_square() {
        for size in SUPPORTED_SIZES {
            for item in synth_dataset(5, 16, size).unwrap() {
                assert_eq!(item.clean.dims(), (1, size, size));
                assert!(item.clean.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
            }
        }
    }

    #[test]
    fn rejects_bad_config() {
        assert!(synth_dataset(0, 4, 24).is_err());
        assert!(synth_dataset(0, 0, 32).is_err());
        assert!(batches(&[], 1, 0).is_err());
        let data = synth_dataset(0, 3, 16).unwrap();
        assert!(batches(&data, 4, 0).is_err());
    }

    #[test]
    fn batch_sizes_and_epoch_coverage() {
        let data = synth_dataset(1, 10, 16).unwrap();
        let mut it = batches(&data, 4, 9).unwrap();
        let sizes: Vec<usize> = (0..3).map(|_| it.next_indices().len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);

        // every epoch is a permutation of the dataset
        let mut it = batches(&data, 3, 2).unwrap();
        for _ in 0..3 {
            let mut seen: Vec<usize> = (0..it.batches_per_epoch())
                .flat_map(|_| it.next_indices())
                .collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..10).collect::<Vec<_>>());
        }
    }

    #[test]
    fn same_seed_same_order() {
        let data = synth_dataset(1, 10, 16).unwrap();
        let a: Vec<Vec<usize>> = {
            let mut it = batches(&data, 4, 5).unwrap();
            (0..9).map(|_| it.next_indices()).collect()
        };
        let mut it = batches(&data, 4, 5).unwrap();
        let b: Vec<Vec<usize>> = (0..9).map(|_| it.next_indices()).collect();
        assert_eq!(a, b);
        let items: Vec<&DatasetItem> = batches(&data, 4, 5).unwrap().next().unwrap();
        assert_eq!(items.len(), 4);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = synth_dataset(2, 9, 16).unwrap();
        let manifest = write_dataset(dir.path(), &data).unwrap();
        assert_eq!(manifest.items[1].prompt, PromptId::Checkerboard);
        let json = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        assert!(json.contains("\"prompt\": \"checkerboard\""));
        assert!(json.contains("\"tags\": ["));
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 9);
        for (a, b) in back.iter().zip(&data) {
            assert_eq!(a.prompt, b.prompt);
            assert_eq!(a.clean.to_bytes(), b.clean.to_bytes());
        }
    }
}
