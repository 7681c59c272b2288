use std::collections::BTreeSet;
use std::path::Path;

use serde::Serialize;
use stcflow::flow::read_flo;
use stcflow::metrics::{evaluate, EvalReport};

use crate::error::{CliError, CliResult, Context};
use crate::EvalArgs;

#[derive(Serialize)]
struct Row {
    file: String,
    #[serde(flatten)]
    report: EvalReport,
}

fn flo_names(dir: &Path) -> CliResult<BTreeSet<String>> {
    let entries = std::fs::read_dir(dir).context(|| format!("cannot list {}", dir.display()))?;
    let mut names = BTreeSet::new();
    for e in entries {
        let path = e?.path();
        if path.is_file() && path.extension().is_some_and(|x| x == "flo") {
            names.insert(path.file_name().expect("listed file").to_string_lossy().into_owned());
        }
    }
    Ok(names)
}

pub fn run(args: &EvalArgs) -> CliResult<()> {
    let pred = flo_names(&args.pred_dir)?;
    let gt = flo_names(&args.gt_dir)?;
    if pred != gt {
        let missing: Vec<_> = gt.difference(&pred).cloned().collect();
        let extra: Vec<_> = pred.difference(&gt).cloned().collect();
        return Err(CliError::usage(format!(
            "file sets differ: missing predictions {missing:?}, unmatched predictions {extra:?}"
        )));
    }
    if gt.is_empty() {
        return Err(CliError::usage(format!("no .flo files in {}", args.gt_dir.display())));
    }

    let mut rows = Vec::with_capacity(gt.len());
    for name in &gt {
        let p = args.pred_dir.join(name);
        let g = args.gt_dir.join(name);
        let pf = read_flo(&p).context(|| p.display().to_string())?;
        let gf = read_flo(&g).context(|| g.display().to_string())?;
        let report = evaluate(&pf, &gf, None).context(|| name.clone())?;
        rows.push(Row {
            file: name.clone(),
            report,
        });
    }
    // pixel-weighted over the whole set
    let count: usize = rows.iter().map(|r| r.report.count).sum();
    let weighted = |f: fn(&EvalReport) -> f64| rows.iter().map(|r| f(&r.report) * r.report.count as f64).sum::<f64>() / count as f64;
    let total = Row {
        file: "all".into(),
        report: EvalReport {
            aee: weighted(|r| r.aee),
            fl_all: weighted(|r| r.fl_all),
            count,
        },
    };

    let width = rows.iter().map(|r| r.file.len()).max().unwrap_or(0).max(4);
    println!("{:<width$}  {:>10}  {:>8}  {:>10}", "file", "AEE", "Fl-all", "pixels");
    for r in rows.iter().chain(std::iter::once(&total)) {
        println!(
            "{:<width$}  {:>10.4}  {:>7.2}%  {:>10}",
            r.file,
            r.report.aee,
            100.0 * r.report.fl_all,
            r.report.count
        );
    }
    if let Some(out) = &args.out {
        rows.push(total);
        std::fs::write(out, serde_json::to_string_pretty(&rows).expect("plain data"))
            .context(|| format!("cannot write {}", out.display()))?;
    }
    Ok(())
}
