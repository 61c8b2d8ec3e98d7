use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use samstm::checkpoint::Checkpoint;
use samstm::tasks::{read_episodes, validate, TaskKind};
use samstm::train::{flop_counters, AttnKind, MetricsLog};
use samstm::Tensor;

fn samstm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_samstm"))
        .args(args)
        .env_remove("SAMSTM_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small STM so debug-build training stays fast.
const TINY: [&str; 8] = [
    "--set",
    "d=8",
    "--set",
    "n_r=4",
    "--set",
    "n_q=1",
    "--set",
    "lstm_hidden=8",
];

#[test]
fn gen_writes_validated_deterministic_files() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ep"), dir.path().join("b.ep"));
    for out in [&a, &b] {
        let o = samstm(&["gen", "--task", "copy", "--count", "10", "--seed", "7", "--out", p(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("10 copy episodes"));
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    let eps = read_episodes(&text).unwrap();
    assert_eq!(eps.len(), 10);
    for ep in &eps {
        validate(ep).unwrap();
    }
}

#[test]
fn gen_seed_falls_back_to_env() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ep"), dir.path().join("b.ep"));
    let o = samstm(&["gen", "--task", "assoc", "--count", "3", "--seed", "11", "--out", p(&a)]);
    assert!(o.status.success());
    let o = Command::new(env!("CARGO_BIN_EXE_samstm"))
        .args(["gen", "--task", "assoc", "--count", "3", "--out", p(&b)])
        .env("SAMSTM_SEED", "11")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn gen_rar_records_meta() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.ep");
    let o = samstm(&[
        "gen",
        "--task",
        "rar",
        "--items",
        "4",
        "--vecs",
        "2",
        "--bits",
        "8",
        "--count",
        "5",
        "--seed",
        "1",
        "--out",
        p(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let eps = read_episodes(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(eps.len(), 5);
    for ep in &eps {
        assert_eq!(ep.task, TaskKind::Rar);
        assert_eq!(ep.meta_usize("I").unwrap(), 4);
        assert_eq!(ep.meta_usize("V").unwrap(), 2);
        assert_eq!(ep.meta_usize("w").unwrap(), 8);
        validate(ep).unwrap();
    }
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = samstm(&["gen", "--task", "bogus", "--out", p(&dir.path().join("x.ep"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("unknown task"));
    assert_eq!(samstm(&[]).status.code(), Some(1));
    assert_eq!(samstm(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(samstm(&["check-props", "--prop", "9"]).status.code(), Some(1));
    assert_eq!(samstm(&["bench", "--sweep", "4,x"]).status.code(), Some(1));
    assert_eq!(samstm(&["--help"]).status.code(), Some(0));
}

#[test]
fn check_props_single_and_all() {
    let o = samstm(&["check-props", "--prop", "1", "--trials", "100"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = stdout(&o);
    assert!(s.starts_with("PASS prop 1"), "{s}");
    assert!(s.contains("100 trials"));

    let o = samstm(&["check-props", "--prop", "3"]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("PASS prop 3"));

    let o = samstm(&["check-props", "--prop", "all", "--trials", "20"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = stdout(&o);
    assert_eq!(s.lines().filter(|l| l.starts_with("PASS prop")).count(), 6, "{s}");
    assert!(s.contains("6 of 6 suites passed"));

    let o = samstm(&["check-props", "--prop", "lemma1", "--trials", "3", "--verbose"]);
    assert_eq!(
        stdout(&o)
            .lines()
            .filter(|l| l.starts_with("  prop lemma1 trial"))
            .count(),
        3
    );
}

#[test]
fn bench_default_sweep_matches_counters() {
    let o = samstm(&["bench", "--reps", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = stdout(&o);
    for n_kv in [4, 8, 16] {
        for (tag, kind) in [("dpa", AttnKind::Dpa), ("opa", AttnKind::Opa)] {
            let r = flop_counters(kind, 2, n_kv, 16, 16).unwrap();
            let row = s
                .lines()
                .find(|l| {
                    let f: Vec<&str> = l.split_whitespace().collect();
                    f.len() > 2 && f[0] == tag && f[1] == n_kv.to_string()
                })
                .unwrap_or_else(|| panic!("no {tag} row for n_kv={n_kv}:\n{s}"));
            let f: Vec<&str> = row.split_whitespace().collect();
            assert_eq!(f[2], r.measured.adds.to_string());
            assert_eq!(f[3], r.measured.mults.to_string());
            assert_eq!(f[4], r.measured.storage.to_string());
        }
    }
    assert_eq!(s.matches("multiply ratio").count(), 3);
}

#[test]
fn train_writes_metrics_and_checkpoint_then_eval_and_rank_read_them() {
    let dir = tempfile::tempdir().unwrap();
    let (metrics, ck) = (dir.path().join("m.csv"), dir.path().join("ck.bin"));
    let mut args = vec![
        "train",
        "--preset",
        "copy",
        "--iterations",
        "4",
        "--eval-interval",
        "2",
        "--eval-episodes",
        "8",
        "--batch",
        "4",
        "--metrics",
        p(&metrics),
        "--checkpoint",
        p(&ck),
        "--quiet",
    ];
    args.extend(TINY);
    let o = samstm(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = MetricsLog::from_csv(&fs::read_to_string(&metrics).unwrap()).unwrap();
    assert_eq!(log.records.iter().map(|r| r.iteration).collect::<Vec<_>>(), vec![2, 4]);

    let o = samstm(&["eval", "--checkpoint", p(&ck), "--episodes", "8"]);
    assert!(o.status.success(), "{}", stderr(&o));
    // the held-out set is the training run's, so eval reproduces the last record
    let want = format!("loss {:.5}", log.last().unwrap().loss);
    assert!(stdout(&o).contains(&want), "{} vs {want}", stdout(&o));

    let o = samstm(&["rank", "--checkpoint", p(&ck), "--param", "G2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = stdout(&o);
    assert!(s.contains("upper bound 4"), "{s}");
    let r: f64 = s.split_whitespace().nth(2).unwrap().parse().unwrap();
    assert!((1.0..=4.0).contains(&r), "{r}");

    let o = samstm(&["rank", "--checkpoint", p(&ck), "--param", "nope"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("g2"), "{}", stderr(&o));
}

#[test]
fn zero_lr_gives_flat_loss() {
    let dir = tempfile::tempdir().unwrap();
    let metrics = dir.path().join("m.csv");
    let mut args = vec![
        "train",
        "--task",
        "copy",
        "--lr",
        "0",
        "--iterations",
        "6",
        "--eval-interval",
        "2",
        "--eval-episodes",
        "8",
        "--batch",
        "2",
        "--metrics",
        p(&metrics),
        "--quiet",
    ];
    args.extend(TINY);
    let o = samstm(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = MetricsLog::from_csv(&fs::read_to_string(&metrics).unwrap()).unwrap();
    assert_eq!(log.records.len(), 3);
    assert!(log.records.iter().all(|r| r.loss == log.records[0].loss));
}

#[test]
fn lstm_baseline_trains_from_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, metrics) = (dir.path().join("run.cfg"), dir.path().join("m.csv"));
    fs::write(
        &cfg,
        "# baseline\npreset = copy\nmodel = lstm\nlstm_hidden = 8\niterations = 2\neval_interval = 1\neval_episodes = 4\nbatch = 2\n",
    )
    .unwrap();
    let o = samstm(&["train", "--config", p(&cfg), "--metrics", p(&metrics)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("training lstm on copy"));
    assert_eq!(
        MetricsLog::from_csv(&fs::read_to_string(&metrics).unwrap())
            .unwrap()
            .records
            .len(),
        2
    );
}

#[test]
fn bad_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "task = copy\nlearning_rate = 0.1\n").unwrap();
    let o = samstm(&["train", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn divergence_exits_two() {
    let mut args = vec![
        "train",
        "--task",
        "copy",
        "--lr",
        "1e308",
        "--iterations",
        "3",
        "--batch",
        "2",
        "--quiet",
    ];
    args.extend(TINY);
    let o = samstm(&args);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("diverged"));
}

#[test]
fn rank_of_rank_one_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r1.bin");
    let u = Tensor::vector(&[1.0, -2.0, 0.5, 3.0]);
    let v = Tensor::vector(&[0.3, 1.0, -1.0, 2.0, 0.7, -0.2]);
    let ck = Checkpoint {
        meta: Vec::new(),
        tensors: vec![("g2".into(), Tensor::outer(&u, &v).unwrap())],
    };
    ck.save(&path).unwrap();
    let o = samstm(&["rank", "--checkpoint", p(&path)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = stdout(&o);
    let r: f64 = s.split_whitespace().nth(2).unwrap().parse().unwrap();
    assert!((r - 1.0).abs() < 1e-6, "{s}");
    assert!(s.contains("upper bound 4"));
}
