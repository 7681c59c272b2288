//! End-to-end runs of the `stcflow` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stcflow::flow::{load_rgb, read_flo, save_rgb_png, write_flo, FlowField};
use stcflow::layers::seeded_rng;
use stcflow::train::{generate_one, SyntheticSpec};
use stcflow::{Tensor32, Tensor64};

const TINY: &str = r#"
[network]
toy_scale = 16
max_displacement = 2

[train]
steps = 10
lr = 1e-3
batch_size = 2
seed = 3

[data]
pairs = 2
"#;

fn stcflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stcflow"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes `text` as `name` in `dir` and returns the path.
fn file(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn train_tiny(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let cfg = file(dir, "tiny.toml", TINY);
    let out = dir.join(name);
    let mut args = vec!["train", "--config", s(&cfg), "--out", s(&out)];
    args.extend_from_slice(extra);
    let o = stcflow(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn save_frame(t: &Tensor64, path: &Path) {
    save_rgb_png(t, path).unwrap();
}

#[test]
fn selftest_lists_every_invariant_as_passing() {
    let o = stcflow(&["selftest", "--trials", "10"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines.len() > 15);
    let (summary, checks) = lines.split_last().unwrap();
    assert!(checks.iter().all(|l| l.starts_with("PASS")), "{text}");
    assert!(summary.ends_with("invariants hold"));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&stcflow(&["frobnicate"])), 1);
    assert_eq!(code(&stcflow(&["infer", "--ckpt", "x"])), 1);
    assert_eq!(code(&stcflow(&["--help"])), 0);
    // no output directory anywhere
    assert_eq!(code(&stcflow(&["train", "--steps", "1"])), 1);
}

#[test]
fn bad_configs_are_rejected_before_any_output() {
    let dir = tempfile::tempdir().unwrap();
    for (i, doc) in ["[train]\nstepz = 3", "[data]\nheight = 100", "not toml ["].iter().enumerate() {
        let cfg = file(dir.path(), &format!("bad{i}.toml"), doc);
        let out = dir.path().join(format!("out{i}"));
        let o = stcflow(&["train", "--config", s(&cfg), "--out", s(&out)]);
        assert_eq!(code(&o), 1, "{doc}");
        assert!(!out.exists(), "{doc}");
        assert_eq!(code(&stcflow(&["print-config", "--config", s(&cfg)])), 1);
    }
    let missing = dir.path().join("missing.toml");
    assert_eq!(code(&stcflow(&["train", "--config", s(&missing), "--out", s(dir.path())])), 1);
}

#[test]
fn training_writes_checkpoint_log_and_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_tiny(dir.path(), "run", &[]);
    for f in ["checkpoint.stcf", "log.jsonl", "config.toml", "summary.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let log = fs::read_to_string(out.join("log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 10);
    let last: serde_json::Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
    assert_eq!(last["step"], 10);
    assert!(last["total_loss"].as_f64().unwrap().is_finite());

    // the snapshot alone reproduces the run
    let snapshot = out.join("config.toml");
    let again = dir.path().join("again");
    let o = stcflow(&["train", "--config", s(&snapshot), "--out", s(&again)]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(out.join("log.jsonl")).unwrap(), fs::read(again.join("log.jsonl")).unwrap());
    assert_eq!(
        fs::read(out.join("checkpoint.stcf")).unwrap(),
        fs::read(again.join("checkpoint.stcf")).unwrap()
    );
}

#[test]
fn seeds_control_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let a = train_tiny(dir.path(), "a", &["--seed", "7"]);
    let b = train_tiny(dir.path(), "b", &["--seed", "7"]);
    let c = train_tiny(dir.path(), "c", &["--seed", "8"]);
    let log = |p: &Path| fs::read(p.join("log.jsonl")).unwrap();
    assert_eq!(log(&a), log(&b));
    assert_ne!(log(&a), log(&c));
    let snapshot = fs::read_to_string(a.join("config.toml")).unwrap();
    assert!(snapshot.contains("seed = 7"), "{snapshot}");
}

#[test]
fn inference_pads_and_crops_arbitrary_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_tiny(dir.path(), "run", &["--steps", "2"]);
    let mut rng = seeded_rng(1);
    let (f1, f2) = (dir.path().join("f1.png"), dir.path().join("f2.png"));
    save_frame(&Tensor64::uniform(&[3, 436, 1024], 0.0, 1.0, &mut rng), &f1);
    save_frame(&Tensor64::uniform(&[3, 436, 1024], 0.0, 1.0, &mut rng), &f2);
    let flo = dir.path().join("out/flow.flo");
    let viz = dir.path().join("out/flow.png");
    let ckpt = run.join("checkpoint.stcf");
    let o = stcflow(&[
        "infer", "--ckpt", s(&ckpt), "--frame1", s(&f1), "--frame2", s(&f2), "--out-flo", s(&flo), "--out-viz", s(&viz),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let flow = read_flo(&flo).unwrap();
    assert_eq!((flow.height(), flow.width()), (436, 1024));
    assert!(flow.tensor().data().iter().all(|v| v.is_finite()));
    assert_eq!(load_rgb::<f32>(&viz).unwrap().shape(), &[3, 436, 1024]);
}

#[test]
fn inference_failures_leave_no_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("f.png");
    save_frame(&Tensor64::uniform(&[3, 64, 64], 0.0, 1.0, &mut seeded_rng(2)), &f);
    let flo = dir.path().join("flow.flo");
    let viz = dir.path().join("flow.png");
    let corrupt = file(dir.path(), "corrupt.stcf", "STCFCKPT but not really");
    let small = dir.path().join("small.png");
    save_frame(&Tensor64::zeros(&[3, 32, 32]), &small);
    let run = train_tiny(dir.path(), "run", &["--steps", "1"]);
    let good = run.join("checkpoint.stcf");
    let missing = dir.path().join("missing.stcf");
    let cases: [(&Path, &Path); 4] = [(&missing, &f), (&corrupt, &f), (&good, &small), (&good, &missing)];
    for (ckpt, frame2) in cases {
        let o = stcflow(&[
            "infer", "--ckpt", s(ckpt), "--frame1", s(&f), "--frame2", s(frame2), "--out-flo", s(&flo), "--out-viz", s(&viz),
        ]);
        assert_eq!(code(&o), 1, "{ckpt:?} {frame2:?}");
        assert!(!flo.exists() && !viz.exists());
    }
}

#[test]
fn identical_frames_give_little_motion_after_training() {
    // enough synthetic pairs that the model learns to match rather than memorize
    let dir = tempfile::tempdir().unwrap();
    let cfg = file(
        dir.path(),
        "gen.toml",
        "[network]\ntoy_scale = 8\n[train]\nsteps = 300\nlr = 1e-3\nseed = 1\n[data]\npairs = 256\n[data.motion]\nmax_flow = 6.0\n",
    );
    let run = dir.path().join("run");
    assert_eq!(code(&stcflow(&["train", "--config", s(&cfg), "--out", s(&run)])), 0);

    let mut spec = SyntheticSpec::default();
    spec.max_flow = 6.0;
    let moving = generate_one::<f64>(987_654, (64, 64), &spec).unwrap();
    let frame = dir.path().join("frame.png");
    save_frame(&moving.pair.frame1, &frame);
    let flo = dir.path().join("still.flo");
    let o = stcflow(&["infer", "--ckpt", s(&run.join("checkpoint.stcf")), "--frame1", s(&frame), "--frame2", s(&frame), "--out-flo", s(&flo)]);
    assert_eq!(code(&o), 0);
    let flow = read_flo(&flo).unwrap();
    let mean = |f: &FlowField<f32>| {
        let n = f.height() * f.width();
        (0..n).map(|i| (f.tensor().data()[i] as f64).hypot(f.tensor().data()[n + i] as f64)).sum::<f64>() / n as f64
    };
    let typical = mean(&moving.gt_flow.cast());
    let still = mean(&flow);
    eprintln!("identical frames: mean {still:.3} px; ground truth of the moving pair: {typical:.3} px");
    assert!(still < 0.5 * typical, "identical frames: {still:.3} px, typical motion {typical:.3} px");
}

fn flow_file(dir: &Path, name: &str, t: Tensor32) {
    write_flo(&FlowField::new(t).unwrap(), dir.join(name)).unwrap();
}

#[test]
fn evaluation_matches_pointwise_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, gt) = (dir.path().join("pred"), dir.path().join("gt"));
    fs::create_dir_all(&pred).unwrap();
    fs::create_dir_all(&gt).unwrap();
    let mut rng = seeded_rng(4);
    // per file: gt, and pred offset by a known vector
    let offsets = [(3.0f32, 4.0f32), (0.5, 0.0), (0.0, -2.0)];
    let mut sum_epe = 0.0f64;
    let mut outliers = 0usize;
    let mut count = 0usize;
    for (k, &(du, dv)) in offsets.iter().enumerate() {
        let (h, w) = (5 + k, 7);
        let g: Tensor32 = Tensor64::uniform(&[2, h, w], -30.0, 30.0, &mut rng).cast();
        let p = Tensor32::from_fn(&[2, h, w], |i| g.at3(i[0], i[1], i[2]) + if i[0] == 0 { du } else { dv });
        for y in 0..h {
            for x in 0..w {
                let e = ((p.at3(0, y, x) - g.at3(0, y, x)) as f64).hypot((p.at3(1, y, x) - g.at3(1, y, x)) as f64);
                let m = (g.at3(0, y, x) as f64).hypot(g.at3(1, y, x) as f64);
                sum_epe += e;
                outliers += usize::from(e > 3.0 && e > 0.05 * m);
                count += 1;
            }
        }
        flow_file(&gt, &format!("f{k}.flo"), g);
        flow_file(&pred, &format!("f{k}.flo"), p);
    }
    let table = dir.path().join("table.json");
    let o = stcflow(&["eval", "--pred-dir", s(&pred), "--gt-dir", s(&gt), "--out", s(&table)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows: Vec<serde_json::Value> = serde_json::from_str(&fs::read_to_string(&table).unwrap()).unwrap();
    assert_eq!(rows.len(), 4);
    let all = &rows[3];
    assert_eq!(all["file"], "all");
    assert_eq!(all["count"], count);
    assert!((all["aee"].as_f64().unwrap() - sum_epe / count as f64).abs() < 1e-5);
    assert!((all["fl_all"].as_f64().unwrap() - outliers as f64 / count as f64).abs() < 1e-12);
    // the first file is off by a 3-4-5 triangle everywhere
    assert!((rows[0]["aee"].as_f64().unwrap() - 5.0).abs() < 1e-5);
    assert!(stdout(&o).contains("all"));

    let o = stcflow(&["eval", "--pred-dir", s(&gt), "--gt-dir", s(&gt)]);
    assert_eq!(code(&o), 0);
    let last = stdout(&o).lines().last().unwrap().to_string();
    let fields: Vec<&str> = last.split_whitespace().collect();
    assert_eq!(&fields[..3], &["all", "0.0000", "0.00%"]);

    fs::remove_file(pred.join("f1.flo")).unwrap();
    assert_eq!(code(&stcflow(&["eval", "--pred-dir", s(&pred), "--gt-dir", s(&gt)])), 1);
    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    assert_eq!(code(&stcflow(&["eval", "--pred-dir", s(&empty), "--gt-dir", s(&empty)])), 1);
}

#[test]
fn bench_reports_polyphase_flop_ratios() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench.jsonl");
    let o = stcflow(&["bench", "--sizes", "64x8,32x4", "--factors", "1,2,4", "--trials", "1", "--out", s(&out)]);
    assert_eq!(code(&o), 0);
    let records: Vec<serde_json::Value> = fs::read_to_string(&out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(records.len(), 6);
    for r in &records {
        let s = r["s"].as_f64().unwrap();
        assert_eq!(r["flop_ratio"].as_f64().unwrap(), 1.0 / s, "{r}");
        let ssim = r["ssim"].as_f64().unwrap();
        assert!(ssim <= 1.0 && (s > 1.0 || ssim == 1.0), "{r}");
    }

    assert_eq!(code(&stcflow(&["bench", "--sizes", ""])), 1);
    assert_eq!(code(&stcflow(&["bench", "--sizes", "64"])), 1);
    assert_eq!(code(&stcflow(&["bench", "--factors", "0"])), 1);
}

#[test]
fn printed_defaults_are_a_valid_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = stcflow(&["print-config"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    for section in ["[network]", "[loss]", "[train]", "[data]", "[data.motion]"] {
        assert!(text.contains(section), "{section}");
    }
    let cfg = file(dir.path(), "defaults.toml", &text);
    let again = stcflow(&["print-config", "--config", s(&cfg)]);
    assert_eq!(stdout(&again), text);
}
