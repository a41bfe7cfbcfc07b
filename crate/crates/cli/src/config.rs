//! Flat `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored. Every key may appear at most
//! once; unknown keys are rejected. Relative paths resolve against the
//! directory of the file they were read from.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mlman::data::synthetic::SyntheticSpec;
use mlman::training::{LossForm, TrainConfig};
use mlman::{AblationSpec, Error, Result};

/// Where corpora and word vectors come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic {
        seed: u64,
        instances: usize,
        outer_gap: usize,
        inner_gap: usize,
    },
    Files {
        train: PathBuf,
        dev: PathBuf,
        test: Option<PathBuf>,
        embeddings: PathBuf,
    },
}

impl DataSource {
    /// Generated corpora with default proportions.
    pub fn synthetic(seed: u64) -> Self {
        let d = SyntheticSpec::default();
        DataSource::Synthetic {
            seed,
            instances: d.instances_per_relation,
            outer_gap: d.outer_gap,
            inner_gap: d.inner_gap,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub repetitions: usize,
    pub data: DataSource,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            train: TrainConfig::default(),
            repetitions: 1,
            data: DataSource::synthetic(0),
            output_dir: PathBuf::from("runs"),
        }
    }
}

/// Every recognized key, in the order [`ExperimentConfig::to_text`] writes them.
pub const KEYS: &[&str] = &[
    "seed",
    "repetitions",
    "ablation_id",
    "incon",
    "tying",
    "aggregation",
    "local_matching",
    "class_metric",
    "loss_form",
    "n_train",
    "n_eval",
    "k",
    "r",
    "lr",
    "decay_rate",
    "decay_every",
    "lambda",
    "dropout",
    "max_steps",
    "eval_every",
    "eval_episodes",
    "log_every",
    "word_dim",
    "pos_dim",
    "channels",
    "hidden",
    "window",
    "max_distance",
    "data",
    "synthetic_seed",
    "synthetic_instances",
    "synthetic_outer_gap",
    "synthetic_inner_gap",
    "train_path",
    "dev_path",
    "test_path",
    "embeddings_path",
    "output_dir",
];

const ABLATION_FLAGS: &[&str] = &[
    "incon",
    "tying",
    "aggregation",
    "local_matching",
    "class_metric",
];

fn num<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = `{value}`: {e}")))
}

/// Raw values collected before they are applied.
#[derive(Debug, Default)]
struct Staged {
    flags: Vec<(String, String)>,
    data: Option<String>,
    synthetic: [Option<String>; 4],
    paths: [Option<PathBuf>; 4],
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_in(text, Path::new(""))
    }

    /// Parses `text`, resolving relative paths against `base`.
    pub fn parse_in(text: &str, base: &Path) -> Result<Self> {
        let mut seen: Vec<String> = Vec::new();
        let mut pairs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if seen.iter().any(|k| k == key) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key `{key}`",
                    lineno + 1
                )));
            }
            seen.push(key.to_string());
            pairs.push((key.to_string(), value.to_string()));
        }
        let mut cfg = ExperimentConfig::default();
        cfg.apply(&pairs, base)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_in(&text, path.parent().unwrap_or(Path::new("")))
    }

    /// Applies `key = value` overrides in order, then validates.
    pub fn apply(&mut self, pairs: &[(String, String)], base: &Path) -> Result<()> {
        let mut staged = Staged::default();
        if let DataSource::Synthetic {
            seed,
            instances,
            outer_gap,
            inner_gap,
        } = &self.data
        {
            staged.synthetic = [
                Some(seed.to_string()),
                Some(instances.to_string()),
                Some(outer_gap.to_string()),
                Some(inner_gap.to_string()),
            ];
        }
        if let DataSource::Files {
            train,
            dev,
            test,
            embeddings,
        } = &self.data
        {
            staged.paths = [
                Some(train.clone()),
                Some(dev.clone()),
                test.clone(),
                Some(embeddings.clone()),
            ];
            staged.data = Some("files".into());
        }
        let t = &mut self.train;
        for (key, value) in pairs {
            let (key, value) = (key.as_str(), value.as_str());
            match key {
                "seed" => t.seed = num(key, value)?,
                "repetitions" => self.repetitions = num(key, value)?,
                "ablation_id" => t.ablation_id = num(key, value)?,
                k if ABLATION_FLAGS.contains(&k) => {
                    staged.flags.push((key.to_string(), value.to_string()))
                }
                "loss_form" => t.loss_form = value.parse::<LossForm>()?,
                "n_train" => t.n_train = num(key, value)?,
                "n_eval" => t.n_eval = num(key, value)?,
                "k" => t.k = num(key, value)?,
                "r" => t.r = num(key, value)?,
                "lr" => t.lr = num(key, value)?,
                "decay_rate" => t.decay_rate = num(key, value)?,
                "decay_every" => t.decay_every = num(key, value)?,
                "lambda" => t.lambda = num(key, value)?,
                "dropout" => t.dropout = num(key, value)?,
                "max_steps" => t.max_steps = num(key, value)?,
                "eval_every" => t.eval_every = num(key, value)?,
                "eval_episodes" => t.eval_episodes = num(key, value)?,
                "log_every" => t.log_every = num(key, value)?,
                "word_dim" => t.dims.word_dim = num(key, value)?,
                "pos_dim" => t.dims.pos_dim = num(key, value)?,
                "channels" => t.dims.channels = num(key, value)?,
                "hidden" => t.dims.hidden = num(key, value)?,
                "window" => t.dims.window = num(key, value)?,
                "max_distance" => t.dims.max_distance = num(key, value)?,
                "data" => staged.data = Some(value.to_string()),
                "synthetic_seed" => staged.synthetic[0] = Some(value.to_string()),
                "synthetic_instances" => staged.synthetic[1] = Some(value.to_string()),
                "synthetic_outer_gap" => staged.synthetic[2] = Some(value.to_string()),
                "synthetic_inner_gap" => staged.synthetic[3] = Some(value.to_string()),
                "train_path" => staged.paths[0] = Some(base.join(value)),
                "dev_path" => staged.paths[1] = Some(base.join(value)),
                "test_path" => staged.paths[2] = Some(base.join(value)),
                "embeddings_path" => staged.paths[3] = Some(base.join(value)),
                "output_dir" => self.output_dir = base.join(value),
                other => return Err(Error::Config(format!("unknown key `{other}`"))),
            }
        }
        if !staged.flags.is_empty() {
            let mut pairs = vec![("ablation_id", t.ablation_id.to_string())];
            pairs.extend(staged.flags.iter().map(|(k, v)| (k.as_str(), v.clone())));
            AblationSpec::from_pairs(pairs.iter().map(|(k, v)| (*k, v.as_str())))?;
        }
        self.data = match staged.data.as_deref().unwrap_or("synthetic") {
            "synthetic" => {
                let d = SyntheticSpec::default();
                let [seed, n, outer, inner] = &staged.synthetic;
                let get = |v: &Option<String>, k: &str, d: usize| -> Result<usize> {
                    v.as_deref().map_or(Ok(d), |v| num(k, v))
                };
                DataSource::Synthetic {
                    seed: seed
                        .as_deref()
                        .map_or(Ok(0), |v| num("synthetic_seed", v))?,
                    instances: get(n, "synthetic_instances", d.instances_per_relation)?,
                    outer_gap: get(outer, "synthetic_outer_gap", d.outer_gap)?,
                    inner_gap: get(inner, "synthetic_inner_gap", d.inner_gap)?,
                }
            }
            "files" => {
                let [train, dev, test, embeddings] = staged.paths;
                let need = |p: Option<PathBuf>, k: &str| {
                    p.ok_or_else(|| Error::Config(format!("data = files requires {k}")))
                };
                DataSource::Files {
                    train: need(train, "train_path")?,
                    dev: need(dev, "dev_path")?,
                    test,
                    embeddings: need(embeddings, "embeddings_path")?,
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "data must be `synthetic` or `files`, got `{other}`"
                )))
            }
        };
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        Ok(())
    }

    pub fn ablation(&self) -> Result<AblationSpec> {
        self.train.ablation()
    }

    /// Serializes every key; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("seed", t.seed.to_string());
        put("repetitions", self.repetitions.to_string());
        match AblationSpec::preset(t.ablation_id) {
            Ok(spec) => spec.to_pairs().into_iter().for_each(|(k, v)| put(k, v)),
            Err(_) => put("ablation_id", t.ablation_id.to_string()),
        }
        put("loss_form", t.loss_form.to_string());
        put("n_train", t.n_train.to_string());
        put("n_eval", t.n_eval.to_string());
        put("k", t.k.to_string());
        put("r", t.r.to_string());
        put("lr", t.lr.to_string());
        put("decay_rate", t.decay_rate.to_string());
        put("decay_every", t.decay_every.to_string());
        put("lambda", t.lambda.to_string());
        put("dropout", t.dropout.to_string());
        put("max_steps", t.max_steps.to_string());
        put("eval_every", t.eval_every.to_string());
        put("eval_episodes", t.eval_episodes.to_string());
        put("log_every", t.log_every.to_string());
        put("word_dim", t.dims.word_dim.to_string());
        put("pos_dim", t.dims.pos_dim.to_string());
        put("channels", t.dims.channels.to_string());
        put("hidden", t.dims.hidden.to_string());
        put("window", t.dims.window.to_string());
        put("max_distance", t.dims.max_distance.to_string());
        match &self.data {
            DataSource::Synthetic {
                seed,
                instances,
                outer_gap,
                inner_gap,
            } => {
                put("data", "synthetic".into());
                put("synthetic_seed", seed.to_string());
                put("synthetic_instances", instances.to_string());
                put("synthetic_outer_gap", outer_gap.to_string());
                put("synthetic_inner_gap", inner_gap.to_string());
            }
            DataSource::Files {
                train,
                dev,
                test,
                embeddings,
            } => {
                put("data", "files".into());
                put("train_path", train.display().to_string());
                put("dev_path", dev.display().to_string());
                if let Some(test) = test {
                    put("test_path", test.display().to_string());
                }
                put("embeddings_path", embeddings.display().to_string());
            }
        }
        put("output_dir", self.output_dir.display().to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn every_preset_round_trips() {
        for spec in AblationSpec::all() {
            let mut cfg = ExperimentConfig::default();
            cfg.train.ablation_id = spec.id;
            cfg.train.lambda = 0.5;
            let text = cfg.to_text();
            assert!(text.contains(&format!("tying = {}", spec.to_pairs()[2].1)));
            let back = ExperimentConfig::parse(&text).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.ablation().unwrap(), spec);
        }
    }

    #[test]
    fn files_round_trip() {
        let cfg = ExperimentConfig {
            data: DataSource::Files {
                train: "/d/train.json".into(),
                dev: "/d/val.json".into(),
                test: None,
                embeddings: "/d/glove.txt".into(),
            },
            ..ExperimentConfig::default()
        };
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn comments_blanks_and_relative_paths() {
        let text = "# header\n\ndata = files\ntrain_path = a.json  # inline\ndev_path = b.json\nembeddings_path = /abs/e.txt\n";
        let cfg = ExperimentConfig::parse_in(text, Path::new("/base")).unwrap();
        assert_eq!(
            cfg.data,
            DataSource::Files {
                train: "/base/a.json".into(),
                dev: "/base/b.json".into(),
                test: None,
                embeddings: "/abs/e.txt".into(),
            }
        );
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "ablation_id = 11",
            "ablation_id = 0",
            "bogus = 1",
            "k = 1\nk = 2",
            "k = one",
            "just words",
            "ablation_id = 1\ntying = untied",
            "data = files",
            "data = ftp",
            "repetitions = 0",
            "loss_form = hinge",
        ] {
            assert!(
                matches!(ExperimentConfig::parse(text), Err(Error::Config(_))),
                "accepted {text:?}"
            );
        }
    }

    #[test]
    fn keys_cover_serialization() {
        let cfg = ExperimentConfig::default();
        for line in cfg.to_text().lines() {
            let key = line.split(" = ").next().unwrap();
            assert!(KEYS.contains(&key), "{key}");
        }
    }
}
