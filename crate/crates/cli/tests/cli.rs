use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mlman::data::synthetic::{generate, SyntheticSpec};
use mlman::data::{Instance, Split};
use mlman::training::EvalSpec;
use mlman::{AblationSpec, Error, ModelDims, ParameterSet};
use mlman_cli::commands::{self, EvalArgs};
use mlman_cli::{ExperimentConfig, HeatmapRecord};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TINY: &str = "\
max_steps = 4
eval_every = 2
eval_episodes = 5
log_every = 1
n_train = 5
r = 2
pos_dim = 2
channels = 4
hidden = 3
max_distance = 5
";

fn mlman(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mlman"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("config.txt");
    fs::write(&path, format!("{TINY}output_dir = out\n{extra}")).unwrap();
    path
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "repetitions = 2\n");
    let o = mlman(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("out");
    for f in [
        "config.txt",
        "metrics.jsonl",
        "report.json",
        "model-0.ckpt",
        "model-1.ckpt",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let metrics = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 8);
    assert!(metrics
        .lines()
        .next()
        .unwrap()
        .starts_with("{\"rep\":0,\"step\":1,"));
    let resolved = ExperimentConfig::load(out.join("config.txt")).unwrap();
    assert_eq!(resolved.repetitions, 2);
    assert!(String::from_utf8_lossy(&o.stdout).contains("over 2 run(s)"));
}

#[test]
fn exit_codes_distinguish_failures() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "ablation_id = 11\n");
    let o = mlman(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("ablation"), "{}", stderr(&o));

    let o = mlman(&["train", "--config", "/nonexistent/config.txt"]);
    assert_eq!(o.status.code(), Some(3));

    let o = mlman(&["train", "--ablation-id", "0"]);
    assert_eq!(o.status.code(), Some(2));

    let good = dir.path().join("good");
    fs::create_dir(&good).unwrap();
    let cfg = tiny_config(&good, "");
    let ckpt = dir.path().join("random.ckpt");
    let c = cfg.to_str().unwrap();
    let o = mlman(&[
        "init",
        "--config",
        c,
        "--ablation-id",
        "1",
        "--out",
        ckpt.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = mlman(&[
        "distance",
        "--config",
        c,
        "--ablation-id",
        "1",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--k",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("K >= 2"));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "k = 2\n");
    let c = cfg.to_str().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = mlman(&[
            "train",
            "--config",
            c,
            "--output-dir",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["metrics.jsonl", "model-0.ckpt", "report.json"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn corrupted_checkpoint_is_a_checkpoint_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "ablation_id = 1\n");
    let c = cfg.to_str().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    assert!(
        mlman(&["init", "--config", c, "--out", ckpt.to_str().unwrap()])
            .status
            .success()
    );
    let text = fs::read_to_string(&ckpt)
        .unwrap()
        .replace("dim channels 4", "dim channels 5");
    fs::write(&ckpt, text).unwrap();
    let o = mlman(&[
        "eval",
        "--config",
        c,
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("checkpoint"), "{}", stderr(&o));
    let e = commands::load_checkpoint(&ckpt).unwrap_err();
    assert!(matches!(e, Error::Checkpoint(_)));
}

#[test]
fn single_episode_accuracy_is_zero_or_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::load(tiny_config(dir.path(), "")).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    commands::init(&cfg, &ckpt).unwrap();
    let records = dir.path().join("records.jsonl");
    for seed in 0..5 {
        let args = EvalArgs {
            n: 5,
            k: 1,
            episodes: 1,
            seed,
            split: None,
            ablation_id: None,
        };
        let e = commands::eval(&cfg, &ckpt, args, Some(&records)).unwrap();
        assert!(e.accuracy == 0.0 || e.accuracy == 1.0);
        assert_eq!(fs::read_to_string(&records).unwrap().lines().count(), 1);
    }
}

#[test]
fn synthetic_files_drive_training() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = mlman(&[
        "synth",
        "--out",
        data.to_str().unwrap(),
        "--seed",
        "3",
        "--instances",
        "10",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let c = data.join("config.txt");
    let mut args = vec!["train", "--config", c.to_str().unwrap()];
    let pairs: Vec<String> = TINY
        .lines()
        .flat_map(|l| {
            let (k, v) = l.split_once(" = ").unwrap();
            [format!("--{}", k.replace('_', "-")), v.to_string()]
        })
        .collect();
    args.extend(pairs.iter().map(String::as_str));
    let o = mlman(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(data.join("runs").join("model-0.ckpt").exists());

    let cfg = ExperimentConfig::load(&c).unwrap();
    let loaded = commands::load_data(&cfg).unwrap();
    let generated = generate(
        &SyntheticSpec {
            instances_per_relation: 10,
            ..SyntheticSpec::default()
        },
        3,
    )
    .unwrap();
    assert!(loaded.dev.iter().eq(generated.eval.iter()));
}

#[test]
fn ablate_one_id_matches_train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::load(tiny_config(dir.path(), "")).unwrap();
    cfg.output_dir = dir.path().join("train");
    let trained = commands::train(&cfg).unwrap();
    cfg.output_dir = dir.path().join("ablate");
    let rows = commands::ablate(&cfg, &[1]).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].mean, trained.report.mean);
    let tsv = fs::read_to_string(cfg.output_dir.join("ablation.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 2);
    assert_eq!(
        fs::read(dir.path().join("train/model-0.ckpt")).unwrap(),
        fs::read(cfg.output_dir.join("ablation-1/model-0.ckpt")).unwrap()
    );
}

#[test]
fn ablate_table_rows_match_ids() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_config(dir.path(), "");
    let c = cfg_path.to_str().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    assert!(
        mlman(&["init", "--config", c, "--out", ckpt.to_str().unwrap()])
            .status
            .success()
    );
    let o = mlman(&[
        "ablate",
        "--config",
        c,
        "--ids",
        "1-3,8",
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = String::from_utf8_lossy(&o.stdout).into_owned();
    assert_eq!(table.lines().count(), 5, "{table}");
    let o = mlman(&[
        "ablate",
        "--config",
        c,
        "--ids",
        "9",
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(3),
        "a width-mismatched variant is a checkpoint error"
    );
}

#[test]
fn heatmap_columns_sum_to_one_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_config(dir.path(), "");
    let c = cfg_path.to_str().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    assert!(
        mlman(&["init", "--config", c, "--out", ckpt.to_str().unwrap()])
            .status
            .success()
    );
    let tsv = dir.path().join("h.tsv");
    let pgm = dir.path().join("h.pgm");
    let o = mlman(&[
        "heatmap",
        "--config",
        c,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--query",
        "P020:0",
        "--support",
        "P021:1",
        "--out",
        tsv.to_str().unwrap(),
        "--pgm",
        pgm.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let h = HeatmapRecord::parse_tsv(&fs::read_to_string(&tsv).unwrap()).unwrap();
    assert_eq!(h.query_tokens.len(), h.weights.len());
    for s in h.column_sums() {
        assert!((s - 1.0).abs() < 1e-6);
    }
    assert!(fs::read_to_string(&pgm).unwrap().starts_with("P2\n"));
    let again = HeatmapRecord::parse_tsv(&h.to_tsv()).unwrap();
    for (a, b) in again
        .weights
        .iter()
        .flatten()
        .zip(h.weights.iter().flatten())
    {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn one_token_query_gives_an_all_ones_row() {
    let data = generate(&SyntheticSpec::default(), 0).unwrap();
    let spec = AblationSpec::preset(1).unwrap();
    let dims = ModelDims {
        channels: 6,
        hidden: 3,
        ..ModelDims::default()
    };
    let params =
        ParameterSet::init(dims, &spec.variant, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let query = Instance::new(vec!["e1".into()], 0, 0, 0).unwrap();
    let support = &data.eval.instances(0)[0];
    let h = commands::heatmap(&params, &spec, &data.embeddings, &query, support).unwrap();
    assert_eq!(h.weights.len(), 1);
    assert!(h.weights[0].iter().all(|&w| w == 1.0));
}

#[test]
fn more_ways_is_harder() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::parse(
        "max_steps = 400\neval_every = 0\neval_episodes = 50\nn_train = 5\nchannels = 16\nhidden = 8\nloss_form = nll\n",
    )
    .unwrap();
    cfg.output_dir = dir.path().to_path_buf();
    let artifacts = commands::train(&cfg).unwrap();
    let ckpt = &artifacts.checkpoints[0];
    let acc = |n| {
        let args = EvalArgs {
            n,
            k: 1,
            episodes: 500,
            seed: 77,
            split: Some(Split::Train),
            ablation_id: None,
        };
        commands::eval(&cfg, ckpt, args, None).unwrap().accuracy
    };
    let (five, ten) = (acc(5), acc(10));
    assert!(ten <= five, "10-way {ten} > 5-way {five}");
    assert!(five > 0.5, "model did not train: {five}");
}

#[test]
fn distance_rejects_one_shot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::load(tiny_config(dir.path(), "")).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    commands::init(&cfg, &ckpt).unwrap();
    let spec = EvalSpec {
        n: 5,
        k: 1,
        episodes: 3,
        seed: 0,
    };
    assert!(matches!(
        commands::distance(&cfg, &ckpt, spec, None),
        Err(Error::Contract(_))
    ));
    let d = commands::distance(&cfg, &ckpt, EvalSpec { k: 2, ..spec }, None).unwrap();
    assert!(d.is_finite() && d >= 0.0);
}
