//! Subcommand implementations. Each returns its result and writes its
//! artifacts; printing is left to the binary.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use mlman::data::synthetic::{generate, SyntheticSpec};
use mlman::data::{ensure_disjoint, load_corpus, load_embeddings, Corpus, Instance, Split};
use mlman::encoder::{encode_instance, Dropout};
use mlman::matching::attention_map;
use mlman::tensor::Tape;
use mlman::training::{
    distance_statistic, evaluate, run_repetitions, DataBundle, EvalSpec, Evaluation, MetricsRecord,
    RepetitionReport, Trainer,
};
use mlman::{AblationSpec, Error, ParameterSet, Result};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{DataSource, ExperimentConfig};
use crate::heatmap::HeatmapRecord;

pub fn load_data(cfg: &ExperimentConfig) -> Result<DataBundle> {
    let word_dim = cfg.train.dims.word_dim;
    match &cfg.data {
        DataSource::Synthetic {
            seed,
            instances,
            outer_gap,
            inner_gap,
        } => {
            let spec = SyntheticSpec {
                instances_per_relation: *instances,
                outer_gap: *outer_gap,
                inner_gap: *inner_gap,
                word_dim,
                ..SyntheticSpec::default()
            };
            let d = generate(&spec, *seed)?;
            Ok(DataBundle {
                train: d.train,
                dev: d.eval,
                test: None,
                embeddings: d.embeddings,
            })
        }
        DataSource::Files {
            train,
            dev,
            test,
            embeddings,
        } => {
            let train = load_corpus(train, Split::Train)?;
            let dev = load_corpus(dev, Split::Dev)?;
            let test = test
                .as_ref()
                .map(|p| load_corpus(p, Split::Test))
                .transpose()?;
            let mut all = vec![&train, &dev];
            all.extend(test.as_ref());
            ensure_disjoint(&all)?;
            let mut vocab = train.vocabulary();
            vocab.extend(dev.vocabulary());
            if let Some(t) = &test {
                vocab.extend(t.vocabulary());
            }
            let embeddings = load_embeddings(embeddings, word_dim, Some(&vocab))?;
            Ok(DataBundle {
                train,
                dev,
                test,
                embeddings,
            })
        }
    }
}

/// Picks a corpus by split; without a split, the test corpus if present,
/// otherwise the validation corpus.
pub fn corpus(data: &DataBundle, split: Option<Split>) -> Result<&Corpus> {
    match split {
        Some(Split::Train) => Ok(&data.train),
        Some(Split::Dev) => Ok(&data.dev),
        Some(Split::Test) => data
            .test
            .as_ref()
            .ok_or_else(|| Error::Config("no test_path configured".into())),
        None => Ok(data.test.as_ref().unwrap_or(&data.dev)),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn checkpoint_meta(cfg: &ExperimentConfig, seed: u64) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("ablation_id".to_string(), cfg.train.ablation_id.to_string()),
        ("loss_form".to_string(), cfg.train.loss_form.to_string()),
        ("seed".to_string(), seed.to_string()),
    ])
}

#[derive(Serialize)]
struct MetricsLine<'a> {
    rep: usize,
    #[serde(flatten)]
    record: &'a MetricsRecord,
}

#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub report: RepetitionReport,
    pub metrics: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub report_path: PathBuf,
}

/// Trains `cfg.repetitions` models into `cfg.output_dir`: the resolved
/// config, a JSON-lines metrics stream, one checkpoint per repetition, and a
/// JSON report.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainArtifacts> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    train_on(cfg, &data)
}

pub fn train_on(cfg: &ExperimentConfig, data: &DataBundle) -> Result<TrainArtifacts> {
    let out = &cfg.output_dir;
    create_dir(out)?;
    write_file(&out.join("config.txt"), &cfg.to_text())?;
    let metrics = out.join("metrics.jsonl");
    let file = fs::File::create(&metrics).map_err(|e| Error::io(&metrics, e))?;
    let mut writer = BufWriter::new(file);
    let (report, models) =
        run_repetitions(&cfg.train, data, cfg.repetitions, &mut |rep, record| {
            let line = serde_json::to_string(&MetricsLine { rep, record })
                .map_err(|e| Error::Contract(e.to_string()))?;
            writeln!(writer, "{line}").map_err(|e| Error::io(&metrics, e))
        })?;
    writer.flush().map_err(|e| Error::io(&metrics, e))?;
    let mut checkpoints = Vec::with_capacity(models.len());
    for (run, params) in report.runs.iter().zip(&models) {
        let path = out.join(format!("model-{}.ckpt", run.seed));
        params.save(&path, &checkpoint_meta(cfg, run.seed))?;
        checkpoints.push(path);
    }
    let report_path = out.join("report.json");
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Contract(e.to_string()))?;
    write_file(&report_path, &(json + "\n"))?;
    Ok(TrainArtifacts {
        report,
        metrics,
        checkpoints,
        report_path,
    })
}

/// Writes an untrained checkpoint initialized from `cfg.train.seed`.
pub fn init(cfg: &ExperimentConfig, path: &Path) -> Result<ParameterSet> {
    let params = Trainer::new(cfg.train.clone())?.params;
    params.save(path, &checkpoint_meta(cfg, cfg.train.seed))?;
    Ok(params)
}

/// A checkpoint and the ablation preset it was trained under (preset 1 when
/// the checkpoint does not say).
pub fn load_checkpoint(path: &Path) -> Result<(ParameterSet, AblationSpec)> {
    let (params, meta) = ParameterSet::load(path)?;
    let id = match meta.get("ablation_id") {
        Some(v) => v
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad ablation_id `{v}`")))?,
        None => 1,
    };
    Ok((params, AblationSpec::preset(id)?))
}

#[derive(Debug, Clone, Copy)]
pub struct EvalArgs {
    pub n: usize,
    pub k: usize,
    pub episodes: usize,
    pub seed: u64,
    pub split: Option<Split>,
    /// Preset whose forward path is used; defaults to the checkpoint's.
    pub ablation_id: Option<u8>,
}

pub fn eval(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    args: EvalArgs,
    records: Option<&Path>,
) -> Result<Evaluation> {
    let data = load_data(cfg)?;
    let (params, spec) = load_checkpoint(checkpoint)?;
    let spec = match args.ablation_id {
        Some(id) => AblationSpec::preset(id)?,
        None => spec,
    };
    let evaluation = evaluate(
        &params,
        &spec.variant,
        corpus(&data, args.split)?,
        &data.embeddings,
        EvalSpec {
            n: args.n,
            k: args.k,
            episodes: args.episodes,
            seed: args.seed,
        },
    )?;
    if let Some(path) = records {
        write_records(path, &evaluation)?;
    }
    Ok(evaluation)
}

pub fn write_records(path: &Path, evaluation: &Evaluation) -> Result<()> {
    let mut text = String::new();
    for r in &evaluation.records {
        text.push_str(&serde_json::to_string(r).map_err(|e| Error::Contract(e.to_string()))?);
        text.push('\n');
    }
    write_file(path, &text)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub id: u8,
    pub label: String,
    pub mean: f64,
    pub std: f64,
}

pub fn parse_ids(text: &str) -> Result<Vec<u8>> {
    let mut ids = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let range = match part.split_once('-') {
            Some((a, b)) => {
                let a: u8 = a
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad id `{part}`")))?;
                let b: u8 = b
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad id `{part}`")))?;
                a..=b
            }
            None => {
                let a: u8 = part
                    .parse()
                    .map_err(|_| Error::Config(format!("bad id `{part}`")))?;
                a..=a
            }
        };
        for id in range {
            AblationSpec::preset(id)?;
            ids.push(id);
        }
    }
    if ids.is_empty() {
        return Err(Error::Config("no ablation ids given".into()));
    }
    Ok(ids)
}

/// Trains and tests every preset in `ids` on identical seeds. Each preset's
/// artifacts go to `<output_dir>/ablation-<id>`; the table is written to
/// `<output_dir>/ablation.tsv`.
pub fn ablate(cfg: &ExperimentConfig, ids: &[u8]) -> Result<Vec<AblationRow>> {
    let data = load_data(cfg)?;
    let mut rows = Vec::with_capacity(ids.len());
    for &id in ids {
        let mut run = cfg.clone();
        run.train.ablation_id = id;
        run.output_dir = cfg.output_dir.join(format!("ablation-{id}"));
        run.validate()?;
        let artifacts = train_on(&run, &data)?;
        rows.push(AblationRow {
            id,
            label: AblationSpec::preset(id)?.label().to_string(),
            mean: artifacts.report.mean,
            std: artifacts.report.std,
        });
    }
    write_file(&cfg.output_dir.join("ablation.tsv"), &ablation_tsv(&rows))?;
    Ok(rows)
}

/// Evaluates one checkpoint under the forward path of every preset in `ids`.
pub fn ablate_checkpoint(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    ids: &[u8],
    spec: EvalSpec,
) -> Result<Vec<(AblationRow, Evaluation)>> {
    let data = load_data(cfg)?;
    let (params, _) = load_checkpoint(checkpoint)?;
    let test = corpus(&data, None)?;
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        let preset = AblationSpec::preset(id)?;
        let evaluation = evaluate(&params, &preset.variant, test, &data.embeddings, spec)?;
        out.push((
            AblationRow {
                id,
                label: preset.label().to_string(),
                mean: evaluation.accuracy,
                std: 0.0,
            },
            evaluation,
        ));
    }
    create_dir(&cfg.output_dir)?;
    let rows: Vec<_> = out.iter().map(|(r, _)| r.clone()).collect();
    write_file(&cfg.output_dir.join("ablation.tsv"), &ablation_tsv(&rows))?;
    Ok(out)
}

pub fn ablation_tsv(rows: &[AblationRow]) -> String {
    let mut out = String::from("id\tmodel\tmean\tstd\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{:.4}\t{:.4}\n",
            r.id, r.label, r.mean, r.std
        ));
    }
    out
}

/// Human-readable table of accuracies as percentages.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(5).max(5);
    let mut out = format!("{:>2}  {:<width$}  accuracy (%)\n", "id", "model");
    for r in rows {
        out.push_str(&format!(
            "{:>2}  {:<width$}  {:.2} ± {:.2}\n",
            r.id,
            r.label,
            100.0 * r.mean,
            100.0 * r.std
        ));
    }
    out
}

pub fn distance(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    spec: EvalSpec,
    split: Option<Split>,
) -> Result<f64> {
    let data = load_data(cfg)?;
    let (params, preset) = load_checkpoint(checkpoint)?;
    distance_statistic(
        &params,
        &preset.variant,
        corpus(&data, split)?,
        &data.embeddings,
        spec,
    )
}

/// `RELATION:INDEX`, e.g. `P021:3`.
pub fn find_instance<'a>(corpus: &'a Corpus, reference: &str) -> Result<&'a Instance> {
    let (name, index) = reference
        .rsplit_once(':')
        .ok_or_else(|| Error::Config(format!("instance `{reference}` is not RELATION:INDEX")))?;
    let index: usize = index
        .parse()
        .map_err(|_| Error::Config(format!("bad instance index in `{reference}`")))?;
    let rel = corpus
        .relation_names()
        .iter()
        .position(|r| r == name)
        .ok_or_else(|| {
            Error::Config(format!(
                "no relation `{name}` in the {} split",
                corpus.split
            ))
        })?;
    corpus
        .instances(rel)
        .get(index)
        .ok_or_else(|| Error::Config(format!("relation `{name}` has no instance {index}")))
}

/// Attention of the support tokens over the query tokens, computed from
/// the encoded contexts of the two instances.
pub fn heatmap(
    params: &ParameterSet,
    preset: &AblationSpec,
    embeddings: &mlman::data::EmbeddingTable,
    query: &Instance,
    support: &Instance,
) -> Result<HeatmapRecord> {
    let params = params.adapted_to(&preset.variant)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, &preset.variant, false)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let q = encode_instance(
        &mut tape,
        query,
        embeddings,
        &bound,
        &params.dims,
        Dropout::OFF,
        &mut rng,
    )?;
    let s = encode_instance(
        &mut tape,
        support,
        embeddings,
        &bound,
        &params.dims,
        Dropout::OFF,
        &mut rng,
    )?;
    let weights = attention_map(tape.value(q), tape.value(s))?;
    HeatmapRecord::new(query.tokens.clone(), support.tokens.clone(), &weights)
}

/// Writes `train.json`, `dev.json`, `embeddings.txt`, and a `config.txt`
/// that trains on them.
pub fn synth(dir: &Path, spec: &SyntheticSpec, seed: u64) -> Result<ExperimentConfig> {
    create_dir(dir)?;
    let d = generate(spec, seed)?;
    let json = |c: &Corpus| {
        serde_json::to_string(&c.to_json()).map_err(|e| Error::Contract(e.to_string()))
    };
    write_file(&dir.join("train.json"), &json(&d.train)?)?;
    write_file(&dir.join("dev.json"), &json(&d.eval)?)?;
    write_file(&dir.join("embeddings.txt"), &d.embeddings.to_text())?;
    let mut cfg = ExperimentConfig {
        data: DataSource::Files {
            train: "train.json".into(),
            dev: "dev.json".into(),
            test: None,
            embeddings: "embeddings.txt".into(),
        },
        output_dir: "runs".into(),
        ..ExperimentConfig::default()
    };
    cfg.train.dims.word_dim = spec.word_dim;
    write_file(&dir.join("config.txt"), &cfg.to_text())?;
    Ok(cfg)
}

/// Process exit status for an error: 2 configuration, 3 data, 4 runtime.
pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::Config(_) => 2,
        Error::Ingestion { .. }
        | Error::Validation { .. }
        | Error::EmbeddingFormat { .. }
        | Error::Sampling(_)
        | Error::Checkpoint(_)
        | Error::Io { .. }
        | Error::Json { .. } => 3,
        Error::Dimension { .. }
        | Error::EmptySequence { .. }
        | Error::Contract(_)
        | Error::NonFinite { .. } => 4,
    }
}
