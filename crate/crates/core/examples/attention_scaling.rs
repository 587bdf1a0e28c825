//! Counts floating-point work and wall time of the attention kernels as the
//! token count grows, then fits log-log slopes.
//!
//! Usage: `attention_scaling [max_n]` (default 1024). CSV goes to stdout.

use transdae::bench::run_bench;

fn main() -> transdae::Result<()> {
    let max_n: usize = std::env::args().nth(1).map_or(1024, |a| a.parse().expect("max_n must be a number"));
    let ns: Vec<usize> = std::iter::successors(Some(64), |n| Some(n * 2)).take_while(|&n| n <= max_n).collect();
    let report = run_bench(&ns, 32, &[1, 2, 4], 1, 3, 0)?;
    print!("{}", report.to_csv());
    for (kernel, ratio, slope) in &report.summary.flop_exponents {
        eprintln!("flop exponent {kernel:?} R={ratio}: {slope:.3}");
    }
    for (kernel, ratio, slope) in &report.summary.wall_exponents {
        eprintln!("wall exponent {kernel:?} R={ratio}: {slope:.3}");
    }
    for r in &report.summary.reduction {
        eprintln!("R={}: dominant-term ratio {:.3}, total ratio {:.3}", r.ratio, r.dominant_ratio, r.total_ratio);
    }
    Ok(())
}
