//! Token-level attention matrices as tab-separated text and PGM rasters.

use std::fmt::Write as _;

use mlman::tensor::Tensor;
use mlman::{Error, Result};

/// Weights of support tokens over query tokens. Row `i` belongs to query
/// token `i`, column `j` to support token `j`; every column sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapRecord {
    pub query_tokens: Vec<String>,
    pub support_tokens: Vec<String>,
    pub weights: Vec<Vec<f64>>,
}

fn clean(token: &str) -> String {
    token.replace(['\t', '\n', '\r'], " ")
}

impl HeatmapRecord {
    pub fn new(
        query_tokens: Vec<String>,
        support_tokens: Vec<String>,
        weights: &Tensor,
    ) -> Result<Self> {
        let (rows, cols) = weights.dims2()?;
        if rows != query_tokens.len() || cols != support_tokens.len() {
            return Err(Error::Contract(format!(
                "{rows}x{cols} weights for {} query and {} support tokens",
                query_tokens.len(),
                support_tokens.len()
            )));
        }
        Ok(HeatmapRecord {
            query_tokens,
            support_tokens,
            weights: (0..rows).map(|r| weights.row(r).to_vec()).collect(),
        })
    }

    pub fn column_sums(&self) -> Vec<f64> {
        (0..self.support_tokens.len())
            .map(|j| self.weights.iter().map(|row| row[j]).sum())
            .collect()
    }

    /// Header row of support tokens, then one row per query token. Tabs and
    /// newlines inside tokens become spaces.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for t in &self.support_tokens {
            out.push('\t');
            out.push_str(&clean(t));
        }
        out.push('\n');
        for (token, row) in self.query_tokens.iter().zip(&self.weights) {
            out.push_str(&clean(token));
            for w in row {
                let _ = write!(out, "\t{w}");
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_tsv(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Config(format!("heatmap: {m}"));
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let support_tokens: Vec<String> = header
            .strip_prefix('\t')
            .ok_or_else(|| bad("header must start with a tab".into()))?
            .split('\t')
            .map(str::to_string)
            .collect();
        let mut query_tokens = Vec::new();
        let mut weights = Vec::new();
        for (i, line) in lines.enumerate() {
            let mut fields = line.split('\t');
            query_tokens.push(fields.next().unwrap_or_default().to_string());
            let row = fields
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|e| bad(format!("row {}: {e}", i + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            if row.len() != support_tokens.len() {
                return Err(bad(format!(
                    "row {} has {} values, expected {}",
                    i + 1,
                    row.len(),
                    support_tokens.len()
                )));
            }
            weights.push(row);
        }
        Ok(HeatmapRecord {
            query_tokens,
            support_tokens,
            weights,
        })
    }

    /// Plain-text greyscale image, `cell` pixels per weight, darker for
    /// larger weights.
    pub fn to_pgm(&self, cell: usize) -> String {
        let cell = cell.max(1);
        let rows = self.query_tokens.len();
        let cols = self.support_tokens.len();
        let mut out = format!("P2\n{} {}\n255\n", cols * cell, rows * cell);
        for row in &self.weights {
            let line: Vec<String> = row
                .iter()
                .flat_map(|&w| {
                    let shade = 255 - (w.clamp(0.0, 1.0) * 255.0).round() as u8;
                    std::iter::repeat(shade.to_string()).take(cell)
                })
                .collect();
            let line = line.join(" ");
            for _ in 0..cell {
                out.push_str(&line);
                out.push('\n');
            }
        }
        out
    }
}
