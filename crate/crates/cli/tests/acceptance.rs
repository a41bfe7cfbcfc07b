//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use mlman::data::synthetic::{generate, SyntheticSpec};
use mlman::data::{sample_episode, Corpus, EmbeddingTable, Episode};
use mlman::encoder::{encode_instance, Dropout};
use mlman::matching::{concat_support, local_match, match_score};
use mlman::tensor::Tape;
use mlman::training::{episode_forward, evaluate, objective, EvalSpec, Forward, LossForm};
use mlman::{AblationSpec, ModelDims, ParameterSet, Variant};
use mlman_cli::commands;
use mlman_cli::ExperimentConfig;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn config(text: &str, out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::parse(text).expect("acceptance config parses");
    cfg.output_dir = out.to_path_buf();
    cfg
}

fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 0.2 - 0.1
}

// 1 ------------------------------------------------------------------------

fn tiny_dims() -> ModelDims {
    ModelDims {
        word_dim: 5,
        pos_dim: 2,
        channels: 4,
        hidden: 3,
        window: 3,
        max_distance: 5,
    }
}

fn tiny_corpus() -> (Corpus, EmbeddingTable) {
    let spec = SyntheticSpec {
        train_relations: 4,
        eval_relations: 1,
        instances_per_relation: 6,
        entities: 8,
        fillers: 4,
        outer_gap: 1,
        inner_gap: 0,
        word_dim: 5,
    };
    let d = generate(&spec, 21).unwrap();
    (d.train, d.embeddings)
}

fn objective_value(
    params: &ParameterSet,
    variant: &Variant,
    episode: &Episode,
    emb: &EmbeddingTable,
    track: bool,
) -> (f64, Option<ParameterSet>) {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, variant, track).unwrap();
    let fwd = Forward {
        params: &bound,
        dims: params.dims,
        variant: *variant,
        embeddings: emb,
        dropout: Dropout::train(0.2),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let obj = objective(&mut tape, &fwd, episode, LossForm::AsWritten, 1.0, &mut rng).unwrap();
    let j = tape.value(obj.j).item();
    if !track {
        return (j, None);
    }
    let grads = tape.backward(obj.j).unwrap();
    let mut out = params.clone();
    out.zero_grad();
    out.accumulate(&bound, &grads);
    (j, Some(out))
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let (corpus, emb) = tiny_corpus();
    let variant = AblationSpec::preset(1).unwrap().variant;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut params = ParameterSet::init(tiny_dims(), &variant, &mut rng).unwrap();
    for t in [
        &mut params.conv_bias,
        &mut params.lstm_fwd.bias,
        &mut params.lstm_bwd.bias,
    ] {
        t.data_mut().iter_mut().for_each(|x| *x = uniform(&mut rng));
    }
    let episode = sample_episode(&corpus, 2, 2, 1, &mut rng).unwrap();
    let longest = episode
        .support
        .iter()
        .flatten()
        .chain(episode.queries.iter().map(|q| &q.instance))
        .map(|i| i.len())
        .max()
        .unwrap();
    let analytic = objective_value(&params, &variant, &episode, &emb, true)
        .1
        .unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for t in 0..params.named().len() {
        for i in 0..params.named()[t].1.len() {
            let mut plus = params.clone();
            plus.tensors_mut()[t].data_mut()[i] += h;
            let mut minus = params.clone();
            minus.tensors_mut()[t].data_mut()[i] -= h;
            let numeric = (objective_value(&plus, &variant, &episode, &emb, false).0
                - objective_value(&minus, &variant, &episode, &emb, false).0)
                / (2.0 * h);
            let exact = analytic.named()[t].1.grad().unwrap()[i];
            worst = worst.max((exact - numeric).abs() / exact.abs().max(numeric.abs()).max(1e-6));
            checked += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst < 1e-4 && secs < 60.0 && longest <= 6,
        format!(
            "max relative error {worst:.2e} over {checked} parameters, T <= {longest}, {secs:.1}s"
        ),
    )
}

// 2 ------------------------------------------------------------------------

fn normalization() -> Outcome {
    let data = generate(&SyntheticSpec::default(), 3).unwrap();
    let variant = AblationSpec::preset(1).unwrap().variant;
    let dims = ModelDims {
        channels: 8,
        hidden: 4,
        ..ModelDims::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = [0.0f64; 4];
    let mut bump = |slot: usize, sum: f64| worst[slot] = worst[slot].max((sum - 1.0).abs());
    for _ in 0..100 {
        let params = ParameterSet::init(dims, &variant, &mut rng).unwrap();
        let episode = sample_episode(&data.train, 5, 3, 2, &mut rng).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, &variant, false).unwrap();
        let fwd = Forward {
            params: &bound,
            dims,
            variant,
            embeddings: &data.embeddings,
            dropout: Dropout::OFF,
        };
        let graph = episode_forward(&mut tape, &fwd, &episode, &mut rng).unwrap();
        for &p in &graph.probs {
            bump(2, tape.value(p).data().iter().sum());
        }
        for m in graph.matches.iter().flatten() {
            bump(
                3,
                tape.value(m.weights.expect("attention weights"))
                    .data()
                    .iter()
                    .sum(),
            );
        }
        for q in &episode.queries {
            let qc = encode_instance(
                &mut tape,
                q.instance,
                &data.embeddings,
                &bound,
                &dims,
                Dropout::OFF,
                &mut rng,
            )
            .unwrap();
            for class in &episode.support {
                let contexts: Vec<_> = class
                    .iter()
                    .map(|s| {
                        encode_instance(
                            &mut tape,
                            s,
                            &data.embeddings,
                            &bound,
                            &dims,
                            Dropout::OFF,
                            &mut rng,
                        )
                        .unwrap()
                    })
                    .collect();
                let (c, _) = concat_support(&mut tape, &contexts).unwrap();
                let lm = local_match(&mut tape, qc, c).unwrap();
                let rows = tape.value(lm.query_weights);
                let (r, k) = rows.dims2().unwrap();
                for i in 0..r {
                    bump(0, rows.row(i).iter().sum());
                }
                let cols = tape.value(lm.support_weights);
                for j in 0..k {
                    bump(1, (0..r).map(|i| cols.at2(i, j)).sum());
                }
            }
        }
    }
    check(
        worst.iter().all(|&w| w <= 1e-12),
        format!(
            "max |sum - 1|: query rows {:.1e}, support columns {:.1e}, class probabilities {:.1e}, prototype weights {:.1e}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

// 3 ------------------------------------------------------------------------

fn weight_tying() -> Outcome {
    let data = generate(&SyntheticSpec::default(), 4).unwrap();
    let variant = AblationSpec::preset(1).unwrap().variant;
    let dims = ModelDims {
        channels: 8,
        hidden: 4,
        ..ModelDims::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut pairs = 0;
    for _ in 0..50 {
        let params = ParameterSet::init(dims, &variant, &mut rng).unwrap();
        let episode = sample_episode(&data.eval, 5, 1, 1, &mut rng).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, &variant, false).unwrap();
        let fwd = Forward {
            params: &bound,
            dims,
            variant,
            embeddings: &data.embeddings,
            dropout: Dropout::OFF,
        };
        let graph = episode_forward(&mut tape, &fwd, &episode, &mut rng).unwrap();
        for (pair_row, match_row) in graph.pairs.iter().zip(&graph.matches) {
            for (pair, m) in pair_row.iter().zip(match_row) {
                let instance =
                    match_score(&mut tape, pair.supports[0], pair.query, &bound.matcher).unwrap();
                let diff = (tape.value(m.score).item() - tape.value(instance).item()).abs();
                worst = worst.max(diff);
                pairs += 1;
            }
        }
    }
    check(
        worst <= 1e-12,
        format!("max |class - instance| {worst:.1e} over {pairs} pairs"),
    )
}

// 4 and 5 ------------------------------------------------------------------

const LEARNABILITY: &str = "\
seed = 1
synthetic_seed = 11
ablation_id = 1
k = 1
n_train = 20
r = 5
channels = 32
hidden = 16
max_steps = 2000
eval_every = 0
eval_episodes = 1000
log_every = 100
";

fn learnability(out: &Path) -> (Outcome, Option<PathBuf>) {
    let start = Instant::now();
    let cfg = config(LEARNABILITY, out);
    let vocab = SyntheticSpec::default().vocabulary_size();
    let artifacts = match commands::train(&cfg) {
        Ok(a) => a,
        Err(e) => return (Err(e.to_string()), None),
    };
    let secs = start.elapsed().as_secs_f64();
    let run = &artifacts.report.runs[0];
    (
        check(
            run.accuracy >= 0.95 && secs < 600.0 && vocab <= 200,
            format!(
                "5-way 1-shot accuracy {:.4} after {} steps ({secs:.0}s, vocabulary {vocab})",
                run.accuracy, cfg.train.max_steps
            ),
        ),
        Some(artifacts.checkpoints[0].clone()),
    )
}

fn ablation_collapse(out: &Path, checkpoint: Option<&Path>) -> Outcome {
    let checkpoint = checkpoint.ok_or("no trained checkpoint (criterion 5 did not produce one)")?;
    let cfg = config(LEARNABILITY, out);
    let spec = EvalSpec {
        n: 5,
        k: 1,
        episodes: 1000,
        seed: 404,
    };
    let ids: Vec<u8> = (1..=7).collect();
    let results =
        commands::ablate_checkpoint(&cfg, checkpoint, &ids, spec).map_err(|e| e.to_string())?;
    let reference = &results[0].1.records;
    let mut worst = 0.0f64;
    for (_, evaluation) in &results[1..] {
        for (a, b) in reference.iter().zip(&evaluation.records) {
            for (x, y) in a.scores.iter().zip(&b.scores) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    let accuracies: Vec<String> = results
        .iter()
        .map(|(r, _)| format!("{:.3}", r.mean))
        .collect();
    check(
        worst <= 1e-9 && results.iter().all(|(_, e)| e.records.len() == 1000),
        format!(
            "max score difference {worst:.1e}; accuracies {}",
            accuracies.join(" ")
        ),
    )
}

// 6 ------------------------------------------------------------------------

fn regularizer_effect(out: &Path) -> Outcome {
    let mut lines = Vec::new();
    let mut wins = 0;
    for seed in 0..3u64 {
        let mut d = [0.0; 2];
        for (slot, lambda) in [1.0, 0.0].into_iter().enumerate() {
            let text = format!(
                "seed = {seed}\nsynthetic_seed = {}\nablation_id = 1\nlambda = {lambda}\nk = 5\nn_train = 5\n\
                 channels = 32\nhidden = 16\nmax_steps = 500\neval_every = 0\neval_episodes = 50\nlog_every = 100\n",
                100 + seed
            );
            let cfg = config(&text, &out.join(format!("seed{seed}-lambda{lambda}")));
            let artifacts = commands::train(&cfg).map_err(|e| e.to_string())?;
            let spec = EvalSpec {
                n: 5,
                k: 5,
                episodes: 100,
                seed: 9,
            };
            d[slot] = commands::distance(&cfg, &artifacts.checkpoints[0], spec, None)
                .map_err(|e| e.to_string())?;
        }
        wins += usize::from(d[0] < d[1]);
        lines.push(format!("seed {seed}: {:.4} vs {:.4}", d[0], d[1]));
    }
    check(
        wins == 3,
        format!("D(lambda=1) vs D(lambda=0): {}", lines.join("; ")),
    )
}

// 7 ------------------------------------------------------------------------

fn euclidean_variants(out: &Path) -> Outcome {
    let o = Command::new(env!("CARGO_BIN_EXE_mlman"))
        .args([
            "ablate",
            "--ids",
            "8,10",
            "--max-steps",
            "200",
            "--n-train",
            "5",
            "--channels",
            "16",
            "--hidden",
            "8",
            "--eval-every",
            "0",
            "--eval-episodes",
            "200",
            "--output-dir",
            out.to_str().unwrap(),
        ])
        .output()
        .map_err(|e| e.to_string())?;
    let stdout = String::from_utf8_lossy(&o.stdout);
    let tsv = fs::read_to_string(out.join("ablation.tsv")).unwrap_or_default();
    let ids: Vec<&str> = tsv
        .lines()
        .skip(1)
        .filter_map(|l| l.split('\t').next())
        .collect();
    let rows: Vec<String> = tsv
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            format!("{}={}", f[0], f.get(2).unwrap_or(&"?"))
        })
        .collect();
    check(
        o.status.success() && ids == ["8", "10"] && stdout.lines().count() == 3,
        format!("exit {:?}, table rows {}", o.status.code(), rows.join(" ")),
    )
}

// 8 ------------------------------------------------------------------------

fn chance_level() -> Outcome {
    let data = generate(&SyntheticSpec::default(), 8).unwrap();
    let variant = AblationSpec::preset(1).unwrap().variant;
    let dims = ModelDims {
        channels: 32,
        hidden: 16,
        ..ModelDims::default()
    };
    let episodes = 10_000;
    let mut correct = 0.0;
    for e in 0..episodes {
        let params =
            ParameterSet::init(dims, &variant, &mut ChaCha8Rng::seed_from_u64(1_000 + e)).unwrap();
        let spec = EvalSpec {
            n: 5,
            k: 1,
            episodes: 1,
            seed: e,
        };
        correct += evaluate(&params, &variant, &data.eval, &data.embeddings, spec)
            .map_err(|err| err.to_string())?
            .accuracy;
    }
    let accuracy = correct / episodes as f64;
    check(
        (accuracy - 0.2).abs() <= 0.02,
        format!("accuracy {accuracy:.4} over {episodes} episodes, parameters redrawn per episode"),
    )
}

// 9 ------------------------------------------------------------------------

fn determinism(out: &Path) -> Outcome {
    let dirs = [out.join("a"), out.join("b")];
    for dir in &dirs {
        let o = Command::new(env!("CARGO_BIN_EXE_mlman"))
            .args([
                "train",
                "--k",
                "2",
                "--n-train",
                "5",
                "--max-steps",
                "100",
                "--eval-every",
                "50",
                "--eval-episodes",
                "50",
                "--log-every",
                "10",
                "--channels",
                "16",
                "--hidden",
                "8",
                "--repetitions",
                "2",
                "--seed",
                "5",
                "--output-dir",
                dir.to_str().unwrap(),
            ])
            .output()
            .map_err(|e| e.to_string())?;
        if !o.status.success() {
            return Err(String::from_utf8_lossy(&o.stderr).into_owned());
        }
    }
    let files = [
        "metrics.jsonl",
        "model-5.ckpt",
        "model-6.ckpt",
        "report.json",
    ];
    let mut same = 0;
    let mut bytes = 0;
    for f in files {
        let a = fs::read(dirs[0].join(f)).map_err(|e| format!("{f}: {e}"))?;
        let b = fs::read(dirs[1].join(f)).map_err(|e| format!("{f}: {e}"))?;
        bytes += a.len();
        same += usize::from(a == b);
    }
    check(
        same == files.len(),
        format!(
            "{same}/{} artifacts byte-identical ({bytes} bytes)",
            files.len()
        ),
    )
}

// 10 -----------------------------------------------------------------------

fn non_reproduction() -> Outcome {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../README.md");
    let text = fs::read_to_string(&path).map_err(|e| format!("README.md: {e}"))?;
    let lower = text.to_lowercase();
    let required = [
        "not reproduced",
        "82.98",
        "fewrel",
        "glove",
        "10 repetitions",
    ];
    let missing: Vec<&str> = required
        .iter()
        .copied()
        .filter(|k| !lower.contains(k))
        .collect();
    check(
        missing.is_empty(),
        if missing.is_empty() {
            "README declares the full-scale results out of reach and gives the recipe".into()
        } else {
            format!("README lacks {missing:?}")
        },
    )
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    })
}

fn main() {
    let scratch = tempfile::tempdir().expect("scratch directory");
    let root = scratch.path();
    let mut results: Vec<(u8, &str, Outcome)> = Vec::new();
    results.push((1, "gradient correctness", guarded(gradient_check)));
    results.push((2, "normalization invariants", guarded(normalization)));
    results.push((3, "weight tying at K=1", guarded(weight_tying)));
    let mut checkpoint = None;
    let learn = guarded(|| {
        let (outcome, ckpt) = learnability(&root.join("learn"));
        checkpoint = ckpt;
        outcome
    });
    results.push((
        4,
        "K=1 ablation collapse",
        guarded(|| ablation_collapse(&root.join("collapse"), checkpoint.as_deref())),
    ));
    results.push((5, "synthetic learnability", learn));
    results.push((
        6,
        "regularizer effect on D",
        guarded(|| regularizer_effect(&root.join("distance"))),
    ));
    results.push((
        7,
        "euclidean ablation runs",
        guarded(|| euclidean_variants(&root.join("euclid"))),
    ));
    results.push((8, "chance level", guarded(chance_level)));
    results.push((
        9,
        "determinism",
        guarded(|| determinism(&root.join("determinism"))),
    ));
    results.push((10, "explicit non-reproduction", guarded(non_reproduction)));

    let mut failed = 0;
    for (id, name, outcome) in &results {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {id:>2} {tag}  {name}: {detail}");
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
