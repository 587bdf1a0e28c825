//! FLOP and wall-time measurements of the three attention kernels.
//!
//! Each kernel starts from already-projected queries, keys and values, since
//! the input and output projections are common to all three and linear in
//! the token count:
//!
//! * `standard`: `softmax(Q K^T / sqrt(d)) V`, single head.
//! * `efficient`: `softmax_c(Q) (softmax_n(K)^T V)` with `d_k = d / 2`.
//! * `reduced`: `K`, `V` regrouped by `R` and projected back to `d`, then
//!   multi-head attention of `n` queries against `n / R` keys.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use transdae_tensor::{Graph, Tensor, Var};

use crate::attention::{efficient_attention_core, multi_head_attention_core, standard_attention, Normalization};
use crate::error::{Error, Result};
use crate::nn::Linear;

pub const CSV_HEADER: &str = "kernel,n,d,R,flops,wall_ns";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    Standard,
    Efficient,
    Reduced,
}

impl Kernel {
    pub const ALL: [Kernel; 3] = [Kernel::Standard, Kernel::Efficient, Kernel::Reduced];

    pub fn name(self) -> &'static str {
        match self {
            Kernel::Standard => "standard",
            Kernel::Efficient => "efficient",
            Kernel::Reduced => "reduced",
        }
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Kernel::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown kernel {s:?}")))
    }
}

/// One benchmark measurement; `ratio` is 1 for kernels without reduction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchRow {
    pub kernel: Kernel,
    pub n: usize,
    pub d: usize,
    pub ratio: usize,
    pub flops: u64,
    pub wall_ns: u128,
}

impl BenchRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.kernel, self.n, self.d, self.ratio, self.flops, self.wall_ns
        )
    }
}

/// FLOPs the graph counter should report for one kernel evaluation.
///
/// Matmuls count `2 m k n`, elementwise ops one per output, softmax five per
/// element; reshapes and transposes are free.
pub fn analytic_flops(kernel: Kernel, n: usize, d: usize, ratio: usize, heads: usize) -> u64 {
    let (n, d, r, h) = (n as u64, d as u64, ratio as u64, heads as u64);
    match kernel {
        Kernel::Standard => 2 * n * n * d + n * n + 5 * n * n + 2 * n * n * d,
        Kernel::Efficient => {
            let dk = d / 2;
            5 * n * dk + 5 * n * dk + 2 * dk * n * d + 2 * n * dk * d
        }
        Kernel::Reduced => {
            let m = n / r;
            let reduce = if r > 1 { 2 * (2 * m * (d * r) * d + m * d) } else { 0 };
            reduce + dominant_flops(n as usize, d as usize, ratio) + n * m * h + 5 * n * m * h
        }
    }
}

/// The score and weighted-sum matmuls of reduced attention: `4 n (n / R) d`.
pub fn dominant_flops(n: usize, d: usize, ratio: usize) -> u64 {
    4 * (n * (n / ratio) * d) as u64
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Builds the kernel on a fresh graph; returns the graph, its output and the
/// nanoseconds spent in the kernel itself.
fn build(kernel: Kernel, n: usize, d: usize, ratio: usize, heads: usize, seed: u64) -> Result<(Graph<f64>, Var, u128)> {
    if n < 2 || d < 2 || !d.is_multiple_of(2) {
        return Err(Error::Config(format!("benchmark needs n >= 2 and even d >= 2, got n={n}, d={d}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let (start, out) = match kernel {
        Kernel::Standard => {
            let q = g.constant(random(&[n, d], &mut rng));
            let k = g.constant(random(&[n, d], &mut rng));
            let v = g.constant(random(&[n, d], &mut rng));
            g.reset_flops();
            let start = Instant::now();
            (start, standard_attention(&mut g, q, k, v, 1.0 / (d as f64).sqrt())?)
        }
        Kernel::Efficient => {
            let q = g.constant(random(&[n, d / 2], &mut rng));
            let k = g.constant(random(&[n, d / 2], &mut rng));
            let v = g.constant(random(&[n, d], &mut rng));
            g.reset_flops();
            let start = Instant::now();
            (start, efficient_attention_core(&mut g, q, k, v, Normalization::Softmax)?)
        }
        Kernel::Reduced => {
            if ratio == 0 || !n.is_multiple_of(ratio) {
                return Err(Error::Config(format!("reduction ratio {ratio} does not divide n={n}")));
            }
            let q = g.constant(random(&[1, n, d], &mut rng));
            let k = g.constant(random(&[1, n, d], &mut rng));
            let v = g.constant(random(&[1, n, d], &mut rng));
            let reduce = (ratio > 1).then(|| {
                let w = g.constant(random(&[d * ratio, d], &mut rng).map(|x| x / (d * ratio) as f64));
                let b = g.constant(random(&[d], &mut rng));
                Linear::new(w, Some(b))
            });
            g.reset_flops();
            let start = Instant::now();
            let (k, v) = match reduce {
                Some(lin) => {
                    let k = g.reshape(k, &[1, n / ratio, d * ratio])?;
                    let v = g.reshape(v, &[1, n / ratio, d * ratio])?;
                    (lin.forward(&mut g, k)?, lin.forward(&mut g, v)?)
                }
                None => (k, v),
            };
            (start, multi_head_attention_core(&mut g, q, k, v, heads)?)
        }
    };
    let elapsed = start.elapsed().as_nanos();
    Ok((g, out, elapsed))
}

/// Measured FLOPs of the dominant reduced-attention term only.
pub fn measured_dominant_flops(n: usize, d: usize, ratio: usize, heads: usize, seed: u64) -> Result<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::<f64>::new();
    let q = g.constant(random(&[1, n, d], &mut rng));
    let k = g.constant(random(&[1, n / ratio, d], &mut rng));
    let v = g.constant(random(&[1, n / ratio, d], &mut rng));
    g.reset_flops();
    multi_head_attention_core(&mut g, q, k, v, heads)?;
    Ok(g.flops_of(transdae_tensor::OpKind::MatMul))
}

/// Runs one kernel `reps` times; reports the counter's FLOPs and the fastest wall time.
pub fn measure(kernel: Kernel, n: usize, d: usize, ratio: usize, heads: usize, reps: usize, seed: u64) -> Result<BenchRow> {
    let ratio = if kernel == Kernel::Reduced { ratio } else { 1 };
    let mut best = u128::MAX;
    let mut flops = 0;
    for _ in 0..reps.max(1) {
        let (g, _, ns) = build(kernel, n, d, ratio, heads, seed)?;
        best = best.min(ns);
        flops = g.flops();
    }
    Ok(BenchRow {
        kernel,
        n,
        d,
        ratio,
        flops,
        wall_ns: best,
    })
}

/// Least-squares slope of `log y` against `log x`.
pub fn fit_exponent(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Contract("exponent fit needs at least two points".into()));
    }
    if xs.iter().chain(ys).any(|&v| v <= 0.0) {
        return Err(Error::Contract("exponent fit needs positive values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let mx = lx.iter().sum::<f64>() / lx.len() as f64;
    let my = ly.iter().sum::<f64>() / ly.len() as f64;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Contract("exponent fit needs distinct x values".into()));
    }
    Ok(sxy / sxx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioSummary {
    pub ratio: usize,
    /// Dominant-term FLOPs at this ratio over those at `R = 1`, at the largest `n`.
    pub dominant_ratio: f64,
    /// Whole-kernel FLOPs ratio, including the reduction projection.
    pub total_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    /// Fitted FLOP exponent in `n`, per kernel (reduced at its first ratio).
    pub flop_exponents: Vec<(Kernel, usize, f64)>,
    pub wall_exponents: Vec<(Kernel, usize, f64)>,
    pub reduction: Vec<RatioSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub summary: BenchSummary,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.csv());
            s.push('\n');
        }
        s
    }
}

/// Measures every kernel at every `n`, the reduced kernel at every ratio, and
/// fits scaling exponents.
pub fn run_bench(ns: &[usize], d: usize, ratios: &[usize], heads: usize, reps: usize, seed: u64) -> Result<BenchReport> {
    if ns.len() < 2 || ns.iter().any(|&n| n < 2) {
        return Err(Error::Config("bench needs at least two token counts, each >= 2".into()));
    }
    if ratios.is_empty() {
        return Err(Error::Config("bench needs at least one reduction ratio".into()));
    }
    let mut rows = Vec::new();
    let mut flop_exponents = Vec::new();
    let mut wall_exponents = Vec::new();
    let configs: Vec<(Kernel, usize)> = [(Kernel::Standard, 1), (Kernel::Efficient, 1)]
        .into_iter()
        .chain(ratios.iter().map(|&r| (Kernel::Reduced, r)))
        .collect();
    let xs: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
    for (kernel, ratio) in configs {
        let series = ns
            .iter()
            .map(|&n| measure(kernel, n, d, ratio, heads, reps, seed))
            .collect::<Result<Vec<_>>>()?;
        let flops: Vec<f64> = series.iter().map(|r| r.flops as f64).collect();
        let walls: Vec<f64> = series.iter().map(|r| r.wall_ns.max(1) as f64).collect();
        flop_exponents.push((kernel, ratio, fit_exponent(&xs, &flops)?));
        wall_exponents.push((kernel, ratio, fit_exponent(&xs, &walls)?));
        rows.extend(series);
    }
    let n_max = *ns.iter().max().expect("non-empty");
    let base_dom = measured_dominant_flops(n_max, d, 1, heads, seed)? as f64;
    let base_total = measure(Kernel::Reduced, n_max, d, 1, heads, 1, seed)?.flops as f64;
    let reduction = ratios
        .iter()
        .map(|&r| {
            Ok(RatioSummary {
                ratio: r,
                dominant_ratio: measured_dominant_flops(n_max, d, r, heads, seed)? as f64 / base_dom,
                total_ratio: measure(Kernel::Reduced, n_max, d, r, heads, 1, seed)?.flops as f64 / base_total,
            })
        })
        .collect::<Result<_>>()?;
    Ok(BenchReport {
        rows,
        summary: BenchSummary {
            flop_exponents,
            wall_exponents,
            reduction,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counter_matches_analytic_model() {
        for kernel in Kernel::ALL {
            for (n, r) in [(16, 1), (32, 2), (64, 4)] {
                let row = measure(kernel, n, 8, r, 2, 1, 0).unwrap();
                assert_eq!(row.flops, analytic_flops(kernel, n, 8, row.ratio, 2), "{kernel} n={n} R={r}");
            }
        }
    }

    #[test]
    fn exponent_of_exact_power_law() {
        let xs = [2.0, 4.0, 8.0, 16.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(1.5)).collect();
        assert!((fit_exponent(&xs, &ys).unwrap() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn csv_layout() {
        let row = BenchRow {
            kernel: Kernel::Reduced,
            n: 64,
            d: 8,
            ratio: 4,
            flops: 10,
            wall_ns: 5,
        };
        assert_eq!(row.csv(), "reduced,64,8,4,10,5");
    }
}
