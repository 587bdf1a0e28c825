//! Synthetic segmentation data, dataset directories and batching.
//!
//! A dataset directory holds `images/NNNN.tdae` (f32, `H x W x C`),
//! `masks/NNNN.tdae` (u8, `H x W`) and a `manifest.json`.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use transdae_tensor::{Scalar, Tensor};

use crate::error::{Context, Error, Result};
use crate::io::{read_mask, read_tensor_file, write_mask, write_tensor};
use crate::metrics::LabelMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Rectangle,
    Ring,
}

/// Ratio of inner to outer radius for rings.
pub const RING_INNER: f64 = 0.55;

/// A shape placed on the pixel grid; coordinates are in pixels, with pixel
/// `(y, x)` covering `[y, y+1) x [x, x+1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacedShape {
    pub kind: ShapeKind,
    pub class: u8,
    pub center: (f64, f64),
    /// Radius for disks and rings (outer radius); half-extents `(hy, hx)` for rectangles.
    pub size: (f64, f64),
}

impl PlacedShape {
    /// Whether the pixel centre `(y + 0.5, x + 0.5)` lies inside.
    pub fn covers(&self, y: usize, x: usize) -> bool {
        let dy = y as f64 + 0.5 - self.center.0;
        let dx = x as f64 + 0.5 - self.center.1;
        match self.kind {
            ShapeKind::Disk => dy * dy + dx * dx <= self.size.0 * self.size.0,
            ShapeKind::Ring => {
                let r2 = dy * dy + dx * dx;
                let inner = RING_INNER * self.size.0;
                r2 <= self.size.0 * self.size.0 && r2 >= inner * inner
            }
            ShapeKind::Rectangle => dy.abs() <= self.size.0 && dx.abs() <= self.size.1,
        }
    }

    /// Continuous area of the shape.
    pub fn area(&self) -> f64 {
        let r = self.size.0;
        match self.kind {
            ShapeKind::Disk => PI * r * r,
            ShapeKind::Ring => PI * r * r * (1.0 - RING_INNER * RING_INNER),
            ShapeKind::Rectangle => 4.0 * self.size.0 * self.size.1,
        }
    }

    /// Continuous perimeter (both edges for rings).
    pub fn perimeter(&self) -> f64 {
        let r = self.size.0;
        match self.kind {
            ShapeKind::Disk => 2.0 * PI * r,
            ShapeKind::Ring => 2.0 * PI * r * (1.0 + RING_INNER),
            ShapeKind::Rectangle => 4.0 * (self.size.0 + self.size.1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    /// `(height, width)`.
    pub size: (usize, usize),
    pub num_classes: usize,
    pub in_channels: usize,
    /// Inclusive range of shapes drawn per image.
    pub shapes_per_image: (usize, usize),
    /// Object diameter as a fraction of the shorter image side.
    pub scale: (f64, f64),
    pub noise_std: f64,
    pub kinds: Vec<ShapeKind>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            size: (64, 64),
            num_classes: 4,
            in_channels: 1,
            shapes_per_image: (2, 4),
            scale: (0.04, 0.5),
            noise_std: 0.1,
            kinds: vec![ShapeKind::Disk, ShapeKind::Rectangle, ShapeKind::Ring],
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.size.0 == 0 || self.size.1 == 0 {
            return bad(format!("image size {:?} has a zero side", self.size));
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return bad(format!("num_classes {} outside 2..=255", self.num_classes));
        }
        if self.in_channels == 0 {
            return bad("in_channels must be positive".into());
        }
        let (lo, hi) = self.shapes_per_image;
        if lo > hi {
            return bad(format!("shapes_per_image range {lo}..={hi} is empty"));
        }
        let (slo, shi) = self.scale;
        if !(slo > 0.0 && slo <= shi && shi <= 1.0) {
            return bad(format!("scale range {slo}..{shi} must lie in (0, 1]"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std {} must be finite and >= 0", self.noise_std));
        }
        if self.kinds.is_empty() {
            return bad("no shape kinds enabled".into());
        }
        Ok(())
    }

    /// Mean image intensity of class `c`: evenly spaced in `[0, 1]`,
    /// background at 0. Channel `k` is scaled by `1 / (k + 1)`.
    pub fn intensity(&self, class: u8, channel: usize) -> f64 {
        f64::from(class) / (self.num_classes - 1) as f64 / (channel + 1) as f64
    }
}

/// One image with its label mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `(H, W, C)`.
    pub image: Tensor<f32>,
    pub mask: LabelMask,
    pub shapes: Vec<PlacedShape>,
}

/// Draws `count` samples. Sample `i` depends only on `(spec, i)`.
pub fn synth_generate(spec: &SynthSpec, count: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    (0..count).map(|i| synth_sample(spec, i as u64)).collect()
}

fn synth_sample(spec: &SynthSpec, index: u64) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let (h, w) = spec.size;
    let side = h.min(w) as f64;
    let n = rng.random_range(spec.shapes_per_image.0..=spec.shapes_per_image.1);
    let mut shapes = Vec::with_capacity(n);
    for _ in 0..n {
        let class = rng.random_range(1..spec.num_classes) as u8;
        let kind = spec.kinds[rng.random_range(0..spec.kinds.len())];
        let diameter = rng.random_range(spec.scale.0..=spec.scale.1) * side;
        let r = diameter / 2.0;
        let size = match kind {
            ShapeKind::Rectangle => (r, r * rng.random_range(0.5..=1.0)),
            _ => (r, r),
        };
        let center = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
        shapes.push(PlacedShape {
            kind,
            class,
            center,
            size,
        });
    }
    let mut labels = vec![0u8; h * w];
    for s in &shapes {
        for y in 0..h {
            for x in 0..w {
                if s.covers(y, x) {
                    labels[y * w + x] = s.class;
                }
            }
        }
    }
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(e.to_string()))?;
    let c = spec.in_channels;
    let image = Tensor::from_fn([h, w, c], |i| {
        let v = spec.intensity(labels[i / c], i % c);
        let n = if spec.noise_std > 0.0 {
            noise.sample(&mut rng)
        } else {
            0.0
        };
        (v + n) as f32
    });
    Ok(Sample {
        image,
        mask: LabelMask::new(vec![h, w], labels)?,
        shapes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub count: usize,
    pub size: (usize, usize),
    pub in_channels: usize,
    pub num_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
}

/// Images and masks held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn from_samples(samples: Vec<Sample>, num_classes: usize, synth: Option<SynthSpec>) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Contract("dataset is empty".into()))?;
        let s = first.image.shape();
        let (h, w, c) = (s[0], s[1], s[2]);
        for (i, smp) in samples.iter().enumerate() {
            if smp.image.shape() != [h, w, c] || smp.mask.shape() != [h, w] {
                return Err(Error::Contract(format!(
                    "sample {i}: image {:?} / mask {:?} differ from {:?}",
                    smp.image.shape(),
                    smp.mask.shape(),
                    [h, w, c]
                )));
            }
            smp.mask.check_classes(num_classes).at(format!("sample {i}"))?;
        }
        Ok(Dataset {
            manifest: Manifest {
                count: samples.len(),
                size: (h, w),
                in_channels: c,
                num_classes,
                synth,
            },
            samples,
        })
    }

    pub fn synthesize(spec: &SynthSpec, count: usize) -> Result<Self> {
        Self::from_samples(synth_generate(spec, count)?, spec.num_classes, Some(spec.clone()))
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn masks(&self) -> Vec<LabelMask> {
        self.samples.iter().map(|s| s.mask.clone()).collect()
    }

    /// Stacks the selected images into `(b, H, W, C)`.
    pub fn images<T: Scalar>(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let (h, w) = self.manifest.size;
        let c = self.manifest.in_channels;
        let mut data = Vec::with_capacity(indices.len() * h * w * c);
        for &i in indices {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| Error::Contract(format!("sample index {i} out of range")))?;
            data.extend(s.image.data().iter().map(|&v| T::from_f64(f64::from(v))));
        }
        Ok(Tensor::new(vec![indices.len(), h, w, c], data)?)
    }

    /// Flattened labels of the selected masks, in pixel order.
    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices
            .iter()
            .flat_map(|&i| self.samples[i].mask.data().iter().map(|&v| usize::from(v)))
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("images"))?;
        fs::create_dir_all(dir.join("masks"))?;
        for (i, s) in self.samples.iter().enumerate() {
            write_tensor(&dir.join("images").join(file_name(i)), &s.image)?;
            write_mask(&dir.join("masks").join(file_name(i)), &s.mask)?;
        }
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&self.manifest)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        let mut samples = Vec::with_capacity(manifest.count);
        for i in 0..manifest.count {
            let name = file_name(i);
            let image = read_tensor_file(&dir.join("images").join(&name))
                .and_then(|f| f.to_tensor_lossy::<f32>())
                .at(format!("images/{name}"))?;
            let mask = read_mask(&dir.join("masks").join(&name)).at(format!("masks/{name}"))?;
            samples.push(Sample {
                image,
                mask,
                shapes: Vec::new(),
            });
        }
        let ds = Dataset::from_samples(samples, manifest.num_classes, manifest.synth.clone())?;
        if ds.manifest.size != manifest.size || ds.manifest.in_channels != manifest.in_channels {
            return Err(Error::Contract(format!(
                "manifest declares {:?}x{} but images are {:?}x{}",
                manifest.size, manifest.in_channels, ds.manifest.size, ds.manifest.in_channels
            )));
        }
        Ok(ds)
    }
}

pub fn file_name(index: usize) -> String {
    format!("{index:04}.tdae")
}

/// Splits `0..len` into batches of `batch_size`, the last possibly shorter.
/// With a seed the order is shuffled deterministically.
pub fn batch_iter(len: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Result<Vec<Vec<usize>>> {
    if len == 0 {
        return Err(Error::Contract("cannot batch an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_of_four_over_ten() {
        let b = batch_iter(10, 4, Some(3)).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(b, batch_iter(10, 4, Some(3)).unwrap());
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(matches!(batch_iter(0, 4, None), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_size_spec_is_rejected() {
        let spec = SynthSpec {
            size: (0, 8),
            ..Default::default()
        };
        assert!(matches!(synth_generate(&spec, 1), Err(Error::Config(_))));
    }

    #[test]
    fn labels_stay_below_class_count() {
        let spec = SynthSpec {
            num_classes: 3,
            ..Default::default()
        };
        for s in synth_generate(&spec, 5).unwrap() {
            assert!(s.mask.max_label() < 3);
        }
    }
}
