//! Independent reference implementations shared by the integration tests.
//! Everything here is plain loops over `Vec<f64>`, with no use of the tape.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use transdae::metrics::LabelMask;
use transdae_tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Row-major `rows x cols` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        Mat {
            rows,
            cols,
            data: (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    pub fn from_tensor(t: &Tensor<f64>) -> Self {
        let s = t.shape();
        let cols = *s.last().unwrap();
        Mat {
            rows: t.numel() / cols,
            cols,
            data: t.data().to_vec(),
        }
    }

    pub fn tensor(&self) -> Tensor<f64> {
        Tensor::new(vec![self.rows, self.cols], self.data.clone()).unwrap()
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        let mut data = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c * self.rows + r] = self.at(r, c);
            }
        }
        Mat {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows);
        let mut data = vec![0.0; self.rows * other.cols];
        for i in 0..self.rows {
            for j in 0..other.cols {
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += self.at(i, k) * other.at(k, j);
                }
                data[i * other.cols + j] = acc;
            }
        }
        Mat {
            rows: self.rows,
            cols: other.cols,
            data,
        }
    }

    pub fn scale(&self, s: f64) -> Mat {
        Mat {
            data: self.data.iter().map(|v| v * s).collect(),
            ..self.clone()
        }
    }

    /// Softmax of every row.
    pub fn softmax_rows(&self) -> Mat {
        let mut out = self.clone();
        for r in 0..self.rows {
            let row = &mut out.data[r * self.cols..(r + 1) * self.cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for v in row.iter_mut() {
                *v = (*v - m).exp() / z;
            }
        }
        out
    }

    /// `x W + b` with `W` given as `(in, out)`.
    pub fn affine(&self, w: &Mat, b: &[f64]) -> Mat {
        let mut y = self.matmul(w);
        for row in y.data.chunks_mut(y.cols) {
            for (v, bias) in row.iter_mut().zip(b) {
                *v += bias;
            }
        }
        y
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `softmax(q k^T * scale) v`, row by row.
pub fn attention(q: &Mat, k: &Mat, v: &Mat, scale: f64) -> Mat {
    q.matmul(&k.transpose()).scale(scale).softmax_rows().matmul(v)
}

/// Foreground pixel coordinates of `cls`.
fn points(m: &LabelMask, cls: u8) -> Vec<(f64, f64)> {
    let s = m.shape();
    let w = s[s.len() - 1];
    m.data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == cls)
        .map(|(i, _)| ((i / w) as f64, (i % w) as f64))
        .collect()
}

/// Pixels of `cls` with at least one 8-neighbour (or the image border)
/// outside the class.
pub fn boundary_2d(m: &LabelMask, cls: u8) -> Vec<(f64, f64)> {
    let s = m.shape();
    let (h, w) = (s[0] as i64, s[1] as i64);
    let get = |y: i64, x: i64| -> Option<u8> {
        (y >= 0 && x >= 0 && y < h && x < w).then(|| m.data()[(y * w + x) as usize])
    };
    points(m, cls)
        .into_iter()
        .filter(|&(y, x)| {
            let (y, x) = (y as i64, x as i64);
            (-1..=1).any(|dy| (-1..=1).any(|dx| get(y + dy, x + dx) != Some(cls)))
        })
        .collect()
}

pub fn brute_dice(a: &LabelMask, b: &LabelMask, cls: u8) -> f64 {
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        na += (x == cls) as usize;
        nb += (y == cls) as usize;
        inter += (x == cls && y == cls) as usize;
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    }
}

/// All directed boundary-to-boundary distances in both directions.
pub fn brute_surface_distances(a: &LabelMask, b: &LabelMask, cls: u8) -> Option<Vec<f64>> {
    let pa = boundary_2d(a, cls);
    let pb = boundary_2d(b, cls);
    if pa.is_empty() || pb.is_empty() {
        return None;
    }
    let nearest = |p: &(f64, f64), set: &[(f64, f64)]| {
        set.iter()
            .map(|q| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min)
    };
    let mut d: Vec<f64> = pa.iter().map(|p| nearest(p, &pb)).collect();
    d.extend(pb.iter().map(|p| nearest(p, &pa)));
    Some(d)
}

pub fn brute_hd(a: &LabelMask, b: &LabelMask, cls: u8) -> Option<f64> {
    brute_surface_distances(a, b, cls).map(|d| d.into_iter().fold(0.0, f64::max))
}

/// 95th percentile with linear interpolation between order statistics.
pub fn brute_hd95(a: &LabelMask, b: &LabelMask, cls: u8) -> Option<f64> {
    brute_surface_distances(a, b, cls).map(|mut d| {
        d.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let pos = 0.95 * (d.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        d[lo] + (d[hi] - d[lo]) * (pos - lo as f64)
    })
}

/// Random blobby mask: a few random rectangles of random classes.
pub fn random_mask(rng: &mut impl Rng, h: usize, w: usize, classes: u8) -> LabelMask {
    let mut data = vec![0u8; h * w];
    for _ in 0..rng.random_range(0..5) {
        let cls = rng.random_range(1..classes);
        let (y0, x0) = (rng.random_range(0..h), rng.random_range(0..w));
        let (y1, x1) = (rng.random_range(y0..h) + 1, rng.random_range(x0..w) + 1);
        for y in y0..y1 {
            for x in x0..x1 {
                data[y * w + x] = cls;
            }
        }
    }
    // sprinkle isolated pixels so boundaries are irregular
    for _ in 0..rng.random_range(0..6) {
        let i = rng.random_range(0..h * w);
        data[i] = rng.random_range(0..classes);
    }
    LabelMask::new(vec![h, w], data).unwrap()
}
