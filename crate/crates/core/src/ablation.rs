//! The ten model variants of the ablation study.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Whether instance-level and class-level matching share `W2` and `v`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tying {
    Shared,
    Untied,
}

/// How the support-instance vectors of a class become its prototype.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Attention,
    Max,
    Mean,
}

/// Local matching variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalMatching {
    /// Query matched against all supports of a class concatenated.
    Full,
    /// Query matched against each support separately, results averaged.
    NoConcat,
    /// No local matching; query and supports are encoded independently.
    NoLocalMatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassMetric {
    Mlp,
    Euclidean,
}

/// Forward-path switches of a variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub tying: Tying,
    pub aggregation: Aggregation,
    pub local: LocalMatching,
    pub metric: ClassMetric,
}

impl Variant {
    pub const FULL: Variant = Variant {
        tying: Tying::Shared,
        aggregation: Aggregation::Attention,
        local: LocalMatching::Full,
        metric: ClassMetric::Mlp,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub id: u8,
    /// Whether the inconsistency term contributes to the objective.
    pub incon: bool,
    pub variant: Variant,
}

const LABELS: [&str; 10] = [
    "MLMAN",
    "-J_incon",
    "IM(shared -> untied)",
    "IA(att. -> max.)",
    "IA(att. -> ave.)",
    "IA(att. -> ave.) -J_incon",
    "LM(-concatenation)",
    "CM(MLP -> ED)",
    "-LM",
    "-LM CM(MLP -> ED)",
];

impl AblationSpec {
    pub fn preset(id: u8) -> Result<Self> {
        use Aggregation::*;
        use ClassMetric::*;
        use LocalMatching::*;
        use Tying::*;
        let (incon, tying, aggregation, local, metric) = match id {
            1 => (true, Shared, Attention, Full, Mlp),
            2 => (false, Shared, Attention, Full, Mlp),
            3 => (true, Untied, Attention, Full, Mlp),
            4 => (true, Shared, Max, Full, Mlp),
            5 => (true, Shared, Mean, Full, Mlp),
            6 => (false, Shared, Mean, Full, Mlp),
            7 => (false, Shared, Mean, NoConcat, Mlp),
            8 => (false, Shared, Mean, Full, Euclidean),
            9 => (false, Shared, Mean, NoLocalMatch, Mlp),
            10 => (false, Shared, Mean, NoLocalMatch, Euclidean),
            other => {
                return Err(Error::Config(format!(
                    "ablation id must be in 1..=10, got {other}"
                )))
            }
        };
        Ok(AblationSpec {
            id,
            incon,
            variant: Variant {
                tying,
                aggregation,
                local,
                metric,
            },
        })
    }

    pub fn all() -> Vec<AblationSpec> {
        (1..=10).map(|id| Self::preset(id).unwrap()).collect()
    }

    pub fn label(&self) -> &'static str {
        LABELS[self.id as usize - 1]
    }

    /// Flag set as `key=value` pairs.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let v = &self.variant;
        vec![
            ("ablation_id", self.id.to_string()),
            ("incon", self.incon.to_string()),
            ("tying", snake(&v.tying)),
            ("aggregation", snake(&v.aggregation)),
            ("local_matching", snake(&v.local)),
            ("class_metric", snake(&v.metric)),
        ]
    }

    /// Inverse of [`AblationSpec::to_pairs`]; the flags must agree with the
    /// preset named by `ablation_id`.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let pairs: Vec<_> = pairs.into_iter().collect();
        let id = pairs
            .iter()
            .find(|(k, _)| *k == "ablation_id")
            .ok_or_else(|| Error::Config("missing ablation_id".into()))?
            .1
            .parse::<u8>()
            .map_err(|e| Error::Config(format!("ablation_id: {e}")))?;
        let spec = Self::preset(id)?;
        let expected = spec.to_pairs();
        for (k, v) in pairs {
            if let Some((_, want)) = expected.iter().find(|(ek, _)| *ek == k) {
                if want != v {
                    return Err(Error::Config(format!(
                        "ablation {id} has {k}={want}, got {v}"
                    )));
                }
            }
        }
        Ok(spec)
    }
}

impl fmt::Display for AblationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({})", self.id, self.label())
    }
}

fn snake<T: Serialize>(x: &T) -> String {
    serde_json::to_value(x)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

macro_rules! from_str_via_serde {
    ($($t:ty),*) => {$(
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                serde_json::from_value(serde_json::Value::String(s.to_string()))
                    .map_err(|_| Error::Config(format!("unknown {} `{s}`", stringify!($t))))
            }
        }
    )*};
}

from_str_via_serde!(Tying, Aggregation, LocalMatching, ClassMetric);
