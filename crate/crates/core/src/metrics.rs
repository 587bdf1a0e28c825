//! Dice overlap and Hausdorff distances between label masks.

use serde::de::{MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Integer class ids on a 2-D `(H, W)` or 3-D `(D, H, W)` grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl LabelMask {
    pub fn new(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        if !(shape.len() == 2 || shape.len() == 3) || shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "label masks are (H, W) or (D, H, W) with positive sides, got {shape:?}"
            )));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Dimension(format!(
                "mask shape {shape:?} needs {} labels, got {}",
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(LabelMask { shape, data })
    }

    pub fn from_fn(shape: Vec<usize>, f: impl FnMut(usize) -> u8) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, (0..n).map(f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn max_label(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Errors if any label is `>= num_classes`.
    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        match self.data.iter().find(|&&v| usize::from(v) >= num_classes) {
            Some(v) => Err(Error::Contract(format!(
                "label {v} out of range for {num_classes} classes"
            ))),
            None => Ok(()),
        }
    }

    /// Count of pixels labelled `cls`.
    pub fn area(&self, cls: u8) -> usize {
        self.data.iter().filter(|&&v| v == cls).count()
    }

    fn coords(&self, flat: usize) -> [usize; 3] {
        let (_, h, w) = self.dims3();
        [flat / (h * w), (flat / w) % h, flat % w]
    }

    fn dims3(&self) -> (usize, usize, usize) {
        match *self.shape {
            [h, w] => (1, h, w),
            [d, h, w] => (d, h, w),
            _ => unreachable!("validated in new"),
        }
    }

    /// Pixels of class `cls` with at least one neighbour (8-connected in 2-D,
    /// 26-connected in 3-D) outside the class. Positions outside the image
    /// count as outside the class.
    pub fn boundary(&self, cls: u8) -> Vec<[usize; 3]> {
        let (d, h, w) = self.dims3();
        let is_3d = self.shape.len() == 3;
        let inside = |z: isize, y: isize, x: isize| -> bool {
            z >= 0
                && y >= 0
                && x >= 0
                && (z as usize) < d
                && (y as usize) < h
                && (x as usize) < w
                && self.data[(z as usize * h + y as usize) * w + x as usize] == cls
        };
        let dz: &[isize] = if is_3d { &[-1, 0, 1] } else { &[0] };
        let mut out = Vec::new();
        for (i, &v) in self.data.iter().enumerate() {
            if v != cls {
                continue;
            }
            let [z, y, x] = self.coords(i).map(|c| c as isize);
            let edge = dz.iter().any(|&oz| {
                (-1..=1).any(|oy| (-1..=1).any(|ox| !inside(z + oz, y + oy, x + ox)))
            });
            if edge {
                out.push([z as usize, y as usize, x as usize]);
            }
        }
        out
    }
}

fn check_shapes(pred: &LabelMask, gt: &LabelMask) -> Result<()> {
    if pred.shape != gt.shape {
        return Err(Error::Dimension(format!(
            "prediction {:?} and ground truth {:?} differ in shape",
            pred.shape, gt.shape
        )));
    }
    Ok(())
}

/// `2 |A n B| / (|A| + |B|)`, and 1 when both sets are empty.
pub fn dice(pred: &LabelMask, gt: &LabelMask, cls: u8) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.data.iter().zip(&gt.data) {
        let (ip, it) = (p == cls, t == cls);
        a += ip as usize;
        b += it as usize;
        both += (ip && it) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (a + b) as f64)
}

/// Which statistic of the boundary distances to report.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HausdorffKind {
    /// Largest nearest-boundary distance in either direction.
    Max,
    /// 95th percentile (linear interpolation) of both directed distance sets pooled.
    P95,
}

fn euclid(a: [usize; 3], b: [usize; 3]) -> f64 {
    a.iter()
        .zip(&b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// For every point of `from`, the distance to its nearest point in `to`.
fn directed(from: &[[usize; 3]], to: &[[usize; 3]]) -> Vec<f64> {
    from.iter()
        .map(|&a| to.iter().map(|&b| euclid(a, b)).fold(f64::INFINITY, f64::min))
        .collect()
}

/// Linear-interpolation percentile of unsorted values, `q` in `[0, 100]`.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

/// Hausdorff distance between the class-`cls` boundaries of `pred` and `gt`,
/// in pixel units. `None` when either set is empty.
pub fn hausdorff(pred: &LabelMask, gt: &LabelMask, cls: u8, kind: HausdorffKind) -> Result<Option<f64>> {
    check_shapes(pred, gt)?;
    let a = pred.boundary(cls);
    let b = gt.boundary(cls);
    if a.is_empty() || b.is_empty() {
        return Ok(None);
    }
    let mut d = directed(&a, &b);
    d.extend(directed(&b, &a));
    Ok(Some(match kind {
        HausdorffKind::Max => d.iter().copied().fold(0.0, f64::max),
        HausdorffKind::P95 => percentile(&mut d, 95.0),
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub dice: f64,
    /// Mean over volumes where the distance is defined; absent if none.
    pub hd: Option<f64>,
    pub hd95: Option<f64>,
}

/// Per-class scores for the foreground classes plus their means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(with = "ordered_map")]
    pub per_class: Vec<(String, ClassMetrics)>,
    pub mean_dice: f64,
    pub mean_hd: Option<f64>,
    pub mean_hd95: Option<f64>,
    pub volumes: usize,
}

impl EvalReport {
    pub fn class(&self, name: &str) -> Option<&ClassMetrics> {
        self.per_class.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }
}

fn mean_defined(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values
        .into_iter()
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn default_class_name(cls: usize) -> String {
    format!("class{cls}")
}

/// Scores every foreground class (`1..num_classes`) on every volume and
/// averages across volumes. Class `c` is reported as `names[c]` when given.
pub fn evaluate(
    preds: &[LabelMask],
    gts: &[LabelMask],
    num_classes: usize,
    names: Option<&[String]>,
) -> Result<EvalReport> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::Contract(format!(
            "{} predictions for {} ground-truth volumes",
            preds.len(),
            gts.len()
        )));
    }
    if !(2..=256).contains(&num_classes) {
        return Err(Error::Contract(format!("cannot evaluate {num_classes} classes")));
    }
    if let Some(n) = names {
        if n.len() != num_classes {
            return Err(Error::Contract(format!(
                "{} class names for {num_classes} classes",
                n.len()
            )));
        }
    }
    for (p, t) in preds.iter().zip(gts) {
        if p.shape != t.shape {
            return Err(Error::Contract(format!(
                "prediction {:?} and ground truth {:?} differ in shape",
                p.shape, t.shape
            )));
        }
    }
    let mut per_class = Vec::with_capacity(num_classes - 1);
    for cls in 1..num_classes {
        let c = cls as u8;
        let mut dices = Vec::with_capacity(preds.len());
        let mut hds = Vec::with_capacity(preds.len());
        let mut hd95s = Vec::with_capacity(preds.len());
        for (p, t) in preds.iter().zip(gts) {
            dices.push(dice(p, t, c)?);
            hds.push(hausdorff(p, t, c, HausdorffKind::Max)?);
            hd95s.push(hausdorff(p, t, c, HausdorffKind::P95)?);
        }
        let name = names.map_or_else(|| default_class_name(cls), |n| n[cls].clone());
        per_class.push((
            name,
            ClassMetrics {
                dice: dices.iter().sum::<f64>() / dices.len() as f64,
                hd: mean_defined(hds),
                hd95: mean_defined(hd95s),
            },
        ));
    }
    let mean_dice = per_class.iter().map(|(_, m)| m.dice).sum::<f64>() / per_class.len() as f64;
    Ok(EvalReport {
        mean_hd: mean_defined(per_class.iter().map(|(_, m)| m.hd)),
        mean_hd95: mean_defined(per_class.iter().map(|(_, m)| m.hd95)),
        mean_dice,
        per_class,
        volumes: preds.len(),
    })
}

/// Dice averaged over foreground classes and then over volumes. Cheaper than
/// [`evaluate`] since no distances are computed.
pub fn mean_foreground_dice(preds: &[LabelMask], gts: &[LabelMask], num_classes: usize) -> Result<f64> {
    if preds.len() != gts.len() || preds.is_empty() || num_classes < 2 {
        return Err(Error::Contract(format!(
            "{} predictions for {} ground-truth volumes over {num_classes} classes",
            preds.len(),
            gts.len()
        )));
    }
    let mut total = 0.0;
    for (p, t) in preds.iter().zip(gts) {
        for cls in 1..num_classes {
            total += dice(p, t, cls as u8)?;
        }
    }
    Ok(total / (preds.len() * (num_classes - 1)) as f64)
}

/// A `Vec<(String, T)>` stored as a JSON object, preserving order.
mod ordered_map {
    use super::*;
    use std::fmt;
    use std::marker::PhantomData;

    pub fn serialize<S: Serializer, T: Serialize>(v: &[(String, T)], s: S) -> Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(v.len()))?;
        for (k, val) in v {
            map.serialize_entry(k, val)?;
        }
        map.end()
    }

    pub fn deserialize<'de, D, T>(d: D) -> Result<Vec<(String, T)>, D::Error>
    where
        D: Deserializer<'de>,
        T: Deserialize<'de>,
    {
        struct V<T>(PhantomData<T>);
        impl<'de, T: Deserialize<'de>> Visitor<'de> for V<T> {
            type Value = Vec<(String, T)>;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a map")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<Self::Value, A::Error> {
                let mut out = Vec::new();
                while let Some(entry) = access.next_entry()? {
                    out.push(entry);
                }
                Ok(out)
            }
        }
        d.deserialize_map(V(PhantomData))
    }
}
