//! On-disk example format: one JSON object per line, plus a parser for the
//! human-readable prefix expression strings used in those records.

use std::io::{BufRead, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{BinaryOp, Expr, UnaryOp};
use crate::generator::Example;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub dim: usize,
    pub expr_prefix: Vec<String>,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub seed: u64,
}

impl DatasetRecord {
    pub fn from_example(seed: u64, ex: &Example) -> DatasetRecord {
        let mut tokens = Vec::new();
        ex.function.expr.prefix_tokens(&mut tokens);
        DatasetRecord {
            dim: ex.function.dim,
            expr_prefix: tokens,
            x: ex.samples.x.clone(),
            y: ex.samples.y.clone(),
            mu: ex.samples.mu.clone(),
            sigma: ex.samples.sigma.clone(),
            seed,
        }
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("prefix parse error at token {pos} (`{token}`): {reason}")]
    Prefix { pos: usize, token: String, reason: String },
}

pub fn write_jsonl<'a, W: Write>(
    mut w: W,
    records: impl IntoIterator<Item = &'a DatasetRecord>,
) -> Result<(), DatasetError> {
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| DatasetError::Json { line: 0, source: e })?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<DatasetRecord>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| DatasetError::Json { line: i + 1, source: e })?,
        );
    }
    Ok(out)
}

/// Parse a whitespace-separated prefix token string: operator names, `x<d>`
/// variables, `<>` placeholders (slots, numbered in prefix order) and decimal
/// constants.
pub fn parse_prefix_str(s: &str) -> Result<Arc<Expr>, DatasetError> {
    let tokens: Vec<&str> = s.split_whitespace().collect();
    let mut pos = 0usize;
    let mut next_slot = 0usize;
    let e = parse_tokens(&tokens, &mut pos, &mut next_slot)?;
    if pos != tokens.len() {
        return Err(DatasetError::Prefix {
            pos,
            token: tokens[pos].to_string(),
            reason: "dangling tokens".into(),
        });
    }
    Ok(e)
}

fn parse_tokens(
    tokens: &[&str],
    pos: &mut usize,
    next_slot: &mut usize,
) -> Result<Arc<Expr>, DatasetError> {
    let err = |pos: usize, token: &str, reason: &str| DatasetError::Prefix {
        pos,
        token: token.to_string(),
        reason: reason.into(),
    };
    let Some(&tok) = tokens.get(*pos) else {
        return Err(err(*pos, "<eof>", "truncated expression"));
    };
    *pos += 1;
    if let Some(op) = BinaryOp::ALL.iter().find(|o| o.name() == tok) {
        let a = parse_tokens(tokens, pos, next_slot)?;
        let b = parse_tokens(tokens, pos, next_slot)?;
        return Ok(Expr::binary(*op, a, b));
    }
    if let Some(op) = UnaryOp::ALL.iter().find(|o| o.name() == tok) {
        let c = parse_tokens(tokens, pos, next_slot)?;
        return Ok(Expr::unary(*op, c));
    }
    if tok == "<>" {
        let k = *next_slot;
        *next_slot += 1;
        return Ok(Arc::new(Expr::Slot(k)));
    }
    if let Some(d) = tok.strip_prefix('x').and_then(|d| d.parse::<usize>().ok()) {
        if d == 0 {
            return Err(err(*pos - 1, tok, "variable indices are 1-based"));
        }
        return Ok(Expr::var(d));
    }
    match tok.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Expr::constant(v)),
        _ => Err(err(*pos - 1, tok, "unknown token")),
    }
}
