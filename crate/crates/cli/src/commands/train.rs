use std::fs;
use std::time::Instant;

use serde::Serialize;
use stcflow::checkpoint;
use stcflow::metrics::EvalReport;
use stcflow::network::{count_parameters, init_params};
use stcflow::train::{evaluate_samples, generate_synthetic, train_from, write_log, LogEntry};

use super::{CheckpointHeader, CHECKPOINT_FILE, CONFIG_FILE, LOG_FILE, SUMMARY_FILE};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult, Context};
use crate::TrainArgs;

#[derive(Serialize)]
struct Summary {
    steps: usize,
    parameters: usize,
    final_loss: f64,
    train: EvalReport,
}

pub fn run(args: &TrainArgs) -> CliResult<()> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(steps) = args.steps {
        cfg.train.steps = steps;
    }
    let out = args
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| CliError::usage("no output directory: pass --out or set output_dir in the config"))?;
    cfg.output_dir = Some(out.clone());
    cfg.validate()?;

    let data = generate_synthetic::<f32>(
        cfg.data.pairs,
        (cfg.data.height, cfg.data.width),
        cfg.data.seed,
        &cfg.data.motion,
    )?;
    let params = init_params::<f32>(&cfg.network, cfg.train.seed)?;
    let parameters = count_parameters(&cfg.network, &params)?;

    fs::create_dir_all(&out).context(|| format!("cannot create {}", out.display()))?;
    fs::write(out.join(CONFIG_FILE), cfg.to_toml())?;
    eprintln!(
        "training {parameters} parameters on {} pairs of {}x{} for {} steps",
        cfg.data.pairs, cfg.data.height, cfg.data.width, cfg.train.steps
    );

    let every = (cfg.train.steps / 20).max(1);
    let start = Instant::now();
    let mut log: Vec<LogEntry> = Vec::with_capacity(cfg.train.steps);
    let outcome = train_from(&cfg.network, &cfg.loss, &data, &cfg.train, params, |e| {
        if e.step % every == 0 || e.step == cfg.train.steps {
            eprintln!(
                "step {:>6}  loss {:>12.5}  lr {:.2e}  {:.1}s",
                e.step,
                e.total_loss,
                e.lr,
                start.elapsed().as_secs_f64()
            );
        }
        log.push(e.clone());
    });
    // the log up to a divergence is still worth keeping
    write_log(out.join(LOG_FILE), &log)?;
    let outcome = outcome?;

    // identical runs give identical checkpoints wherever they are written
    let header = CheckpointHeader {
        network: cfg.network.clone(),
        steps: cfg.train.steps,
        run: RunConfig {
            output_dir: None,
            ..cfg.clone()
        },
    };
    checkpoint::save(out.join(CHECKPOINT_FILE), &header, &outcome.params)?;
    let train = evaluate_samples(&cfg.network, &outcome.params, &data)?;
    let summary = Summary {
        steps: cfg.train.steps,
        parameters,
        final_loss: log.last().map_or(f64::NAN, |e| e.total_loss),
        train,
    };
    fs::write(out.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary).expect("plain data"))?;
    println!(
        "train AEE {:.4} px, Fl-all {:.2}% after {} steps; outputs in {}",
        train.aee,
        100.0 * train.fl_all,
        cfg.train.steps,
        out.display()
    );
    Ok(())
}
