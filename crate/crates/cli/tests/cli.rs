use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use deepbreg::io::read_portable_grid;

const SMALL: &str = r#"
[testbed]
rows = 16
cols = 16
experiments = 16

[constraints]
sets = [{ kind = "box", lo = -1.0, hi = 1.0 }, { kind = "l1", radius = 120.0 }]

[net]
latent_dim = 16
stages = 2

[em]
tuples = 4
rounds = 4
bregman_steps = 4
eta = 1e-3
ramp_rounds = 2

[sgld]
steps = 5

[stats]
samples = 100
write_samples = 2
"#;

fn deepbreg(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deepbreg"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, extra: &str) {
    fs::write(dir.join(name), format!("{SMALL}\n{extra}")).unwrap();
}

/// `SMALL` with some keys of one table replaced.
fn small_with(table: &str, keys: &str) -> String {
    SMALL.replacen(&format!("[{table}]\n"), &format!("[{table}]\n{keys}\n"), 1)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn gen_small(dir: &Path) {
    write_config(dir, "small.toml", "");
    let o = deepbreg(&["gen", "--config", "small.toml", "--out", "bank"], dir);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn check_passes_and_injected_fault_names_dot_test() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("empty.toml"), "").unwrap();
    let o = deepbreg(&["check", "--config", "empty.toml"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("sgld_variance"));

    let o = deepbreg(&["check", "--inject-adjoint-sign-error"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("dot_test"));
}

#[test]
fn usage_and_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = deepbreg(&["invert", "--bank", "missing", "--out", "x"], d);
    assert_eq!(o.status.code(), Some(2));

    fs::write(d.join("bad.toml"), "[testbed]\nsampling_fraction = 2.0\n").unwrap();
    let o = deepbreg(&["gen", "--config", "bad.toml", "--out", "x"], d);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("testbed.sampling_fraction"));

    fs::write(d.join("typo.toml"), "[em]\nround = 3\n").unwrap();
    let o = deepbreg(&["gen", "--config", "typo.toml", "--out", "x"], d);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("round"));

    let o = deepbreg(&["stats", "--checkpoint", "missing", "--out", "x"], d);
    assert_eq!(o.status.code(), Some(2));

    let o = deepbreg(&["frobnicate"], d);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergent_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_small(d);
    fs::write(d.join("wild.toml"), small_with("em", "eta = 1e6").replacen("eta = 1e-3\n", "", 1)).unwrap();
    let o = deepbreg(&["train", "--config", "wild.toml", "--bank", "bank", "--out", "tr"], d);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    // the last completed round is still on disk
    assert!(d.join("tr/checkpoint/weights.dpnw").is_file());
}

#[test]
fn gen_prints_target_snr_and_writes_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_small(d);
    let o = deepbreg(&["gen", "--config", "small.toml", "--out", "bank2"], d);
    assert!(stdout(&o).contains("SNR: -11.3700 dB"), "{}", stdout(&o));
    let resolved = fs::read_to_string(d.join("bank/config.toml")).unwrap();
    assert!(resolved.contains("snr_db = -11.37"));
    // the resolved config reproduces the run on its own
    let o = deepbreg(&["gen", "--config", "bank/config.toml", "--out", "bank3"], d);
    assert!(o.status.success());
    for f in ["manifest.txt", "truth.pgrd", "data.pgrd"] {
        assert_eq!(fs::read(d.join("bank").join(f)).unwrap(), fs::read(d.join("bank3").join(f)).unwrap());
    }
}

#[test]
fn noise_free_bank_is_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("clean.toml"), small_with("testbed", "snr_db = inf\ngamma = 0.0")).unwrap();
    let o = deepbreg(&["gen", "--config", "clean.toml", "--out", "bank"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("SNR: inf dB"), "{}", stdout(&o));
    // the true model is feasible, so the data misfit can be driven to zero
    let tb = deepbreg::testbed::read_testbed(&d.join("bank")).unwrap();
    let misfit = deepbreg::bregman::eval_lsq_objective(&tb.bank.experiments, &tb.truth.delta_m).unwrap();
    assert!(misfit < 1e-20, "{misfit}");

    let o = deepbreg(&["invert", "--config", "clean.toml", "--bank", "bank", "--out", "inv"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let trace = fs::read_to_string(d.join("inv/trace.csv")).unwrap();
    let res: Vec<f64> = trace.lines().skip(1).map(|l| l.split(',').nth(3).unwrap().parse().unwrap()).collect();
    let early: f64 = res[..50].iter().sum::<f64>() / 50.0;
    let late: f64 = res[res.len() - 50..].iter().sum::<f64>() / 50.0;
    assert!(late < 0.25 * early, "{early} -> {late}");
}

#[test]
fn zero_iterations_give_zero_grids() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_small(d);
    fs::write(d.join("zero.toml"), format!("{SMALL}\n[bregman]\niterations = 0\n")).unwrap();
    let o = deepbreg(&["invert", "--config", "zero.toml", "--bank", "bank", "--out", "inv"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["primal.pgrd", "dual.pgrd"] {
        assert!(read_portable_grid(&d.join("inv").join(f)).unwrap().as_slice().iter().all(|&v| v == 0.0));
    }
    assert_eq!(fs::read_to_string(d.join("inv/trace.csv")).unwrap().lines().count(), 1);
}

#[test]
fn zero_rounds_write_initial_checkpoint_only() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_small(d);
    fs::write(d.join("r0.toml"), small_with("em", "rounds = 0").replacen("rounds = 4\n", "", 1)).unwrap();
    let o = deepbreg(&["train", "--config", "r0.toml", "--bank", "bank", "--out", "tr"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(d.join("tr/checkpoint/weights.dpnw").is_file());
    assert_eq!(fs::read_to_string(d.join("tr/rounds.csv")).unwrap().lines().count(), 1);
    let tuples = fs::read_to_string(d.join("tr/checkpoint/tuples.csv")).unwrap();
    assert!(tuples.lines().skip(1).all(|l| l.starts_with("0,")));
}

#[test]
fn degenerate_training_trace_matches_invert() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_small(d);
    let cfg = small_with("em", "tuples = 1\nrounds = 10\nbregman_steps = 7\nlambda_initial = 0.0\nlambda_final = 0.0\neta = 0.0\nseed = 9")
        .replacen("tuples = 4\nrounds = 4\nbregman_steps = 4\neta = 1e-3\n", "", 1)
        .replacen("steps = 5", "steps = 0", 1)
        + "\n[bregman]\niterations = 70\nseed = 9\n";
    fs::write(d.join("deg.toml"), cfg).unwrap();
    let o = deepbreg(&["train", "--config", "deg.toml", "--bank", "bank", "--out", "tr"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = deepbreg(&["invert", "--config", "deg.toml", "--bank", "bank", "--out", "inv"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let a = fs::read_to_string(d.join("tr/trace_000.csv")).unwrap();
    let b = fs::read_to_string(d.join("inv/trace.csv")).unwrap();
    assert_eq!(a.lines().count(), 71);
    assert_eq!(a, b);
    assert_eq!(
        fs::read(d.join("tr/checkpoint/tuple_000_primal.pgrd")).unwrap(),
        fs::read(d.join("inv/primal.pgrd")).unwrap()
    );
}

fn dir_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(p) = stack.pop() {
        for e in fs::read_dir(&p).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_small(d);
    let o = deepbreg(&["train", "--config", "small.toml", "--bank", "bank", "--out", "full"], d);
    assert!(o.status.success(), "{}", stderr(&o));

    fs::write(d.join("short.toml"), small_with("em", "rounds = 2").replacen("rounds = 4\n", "", 1)).unwrap();
    let o = deepbreg(&["train", "--config", "short.toml", "--bank", "bank", "--out", "part"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = deepbreg(&["train", "--config", "small.toml", "--bank", "bank", "--out", "part", "--resume"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("rounds 2..4"));
    assert_eq!(dir_files(&d.join("full")), dir_files(&d.join("part")));
}

#[test]
fn stats_rejects_single_sample_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_small(d);
    let o = deepbreg(&["train", "--config", "small.toml", "--bank", "bank", "--out", "tr"], d);
    assert!(o.status.success(), "{}", stderr(&o));

    fs::write(d.join("one.toml"), small_with("stats", "samples = 1").replacen("samples = 100\n", "", 1)).unwrap();
    let o = deepbreg(&["stats", "--config", "one.toml", "--checkpoint", "tr", "--out", "st"], d);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("stats.samples"));

    for out in ["st1", "st2"] {
        let o = deepbreg(&["stats", "--config", "small.toml", "--checkpoint", "tr", "--bank", "bank", "--out", out], d);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(dir_files(&d.join("st1")), dir_files(&d.join("st2")));
    let hist = fs::read_to_string(d.join("st1/hist_prior.csv")).unwrap();
    assert!(hist.starts_with("row,col,bin_lo,bin_hi,count\n"));
    // two probes, 40 bins each, 100 samples per probe
    let counts: Vec<usize> = hist.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(counts.len(), 80);
    assert_eq!(counts.iter().sum::<usize>(), 200);
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_small(d);
    let o = deepbreg(&["invert", "--config", "small.toml", "--bank", "bank", "--out", "a", "--seed", "11"], d);
    assert!(o.status.success());
    assert!(fs::read_to_string(d.join("a/config.toml")).unwrap().contains("seed = 11"));
    let o = deepbreg(&["invert", "--config", "small.toml", "--bank", "bank", "--out", "b"], d);
    assert!(o.status.success());
    assert_ne!(fs::read(d.join("a/trace.csv")).unwrap(), fs::read(d.join("b/trace.csv")).unwrap());
}
