use std::io::Write;

use stcflow::train::bench_litemul;

use crate::error::{CliError, CliResult, Context};
use crate::BenchArgs;

fn parse_size(s: &str) -> CliResult<(usize, usize)> {
    let bad = || CliError::usage(format!("size `{s}` is not of the form MxN"));
    let (m, n) = s.trim().split_once(['x', 'X']).ok_or_else(bad)?;
    let m = m.parse().map_err(|_| bad())?;
    let n = n.parse().map_err(|_| bad())?;
    if m == 0 || n == 0 {
        return Err(bad());
    }
    Ok((m, n))
}

pub fn run(args: &BenchArgs) -> CliResult<()> {
    let sizes = args
        .sizes
        .iter()
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_size(s))
        .collect::<CliResult<Vec<_>>>()?;
    if sizes.is_empty() {
        return Err(CliError::usage("--sizes lists no sizes"));
    }
    if args.factors.is_empty() || args.factors.contains(&0) {
        return Err(CliError::usage("--factors must list positive factors"));
    }
    if args.trials == 0 {
        return Err(CliError::usage("--trials must be >= 1"));
    }
    let records = bench_litemul(&sizes, &args.factors, args.trials)?;

    println!("{:>6} {:>5} {:>3} {:>14} {:>8} {:>10} {:>8}", "M", "N", "s", "FLOPs", "ratio", "ms", "SSIM");
    for r in &records {
        println!(
            "{:>6} {:>5} {:>3} {:>14} {:>8.4} {:>10.3} {:>8.4}",
            r.m, r.n, r.s, r.flops, r.flop_ratio, r.wall_ms, r.ssim
        );
    }
    if let Some(out) = &args.out {
        let mut text = Vec::new();
        for r in &records {
            serde_json::to_writer(&mut text, r).expect("plain data");
            text.write_all(b"\n")?;
        }
        std::fs::write(out, text).context(|| format!("cannot write {}", out.display()))?;
    }
    Ok(())
}
