//! Hybrid symbolic-numeric tokenization.
//!
//! Floats become (sign, mantissa, exponent) token triples with a 4 significant
//! digit mantissa; expressions serialize in prefix order with operators and
//! variables as single tokens. Encoder and decoder vocabularies are disjoint:
//! the encoder sees numeric tokens only, the decoder mixes numeric and
//! symbolic tokens.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{BinaryOp, Expr, Skeleton, UnaryOp};
use crate::generator::SampleSet;

pub const EXP_MIN: i32 = -100;
pub const EXP_MAX: i32 = 100;

/// A float as a (sign, mantissa, exponent) triple: value = sign * m * 10^e,
/// m in 0..=9999 (normalized to 4 digits unless the value is zero).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FloatTriple {
    pub negative: bool,
    pub mantissa: u16,
    pub exponent: i32,
}

impl FloatTriple {
    pub fn value(self) -> f64 {
        let v = self.mantissa as f64 * 10f64.powi(self.exponent);
        if self.negative {
            -v
        } else {
            v
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TokenError {
    #[error("cannot encode non-finite value {0}")]
    NonFinite(f64),
    #[error("exponent {0} outside E{EXP_MIN}..E{EXP_MAX}; caller must rescale")]
    ExponentOutOfRange(i32),
    #[error("parse error at position {pos}: {reason}")]
    Parse { pos: usize, reason: String },
}

/// Round to 4 significant digits and split into a token triple.
/// Zero canonicalizes to (+, 0, E0).
pub fn encode_float(v: f64) -> Result<FloatTriple, TokenError> {
    if !v.is_finite() {
        return Err(TokenError::NonFinite(v));
    }
    if v == 0.0 {
        return Ok(FloatTriple { negative: false, mantissa: 0, exponent: 0 });
    }
    let negative = v < 0.0;
    let a = v.abs();
    let mut e10 = a.log10().floor() as i32;
    let mut m = (a / 10f64.powi(e10 - 3)).round();
    if m >= 10000.0 {
        m /= 10.0;
        m = m.round();
        e10 += 1;
    }
    let exponent = e10 - 3;
    if !(EXP_MIN..=EXP_MAX).contains(&exponent) {
        return Err(TokenError::ExponentOutOfRange(exponent));
    }
    Ok(FloatTriple { negative, mantissa: m as u16, exponent })
}

/// Round to 4 significant digits (the value `encode_float` reconstructs).
pub fn round_to_4_digits(v: f64) -> f64 {
    match encode_float(v) {
        Ok(t) => t.value(),
        Err(_) => v,
    }
}

/// Decoder-side token alphabet. Numeric tokens reuse the same surface syntax
/// as the encoder but are assigned distinct ids by [`Vocab`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Token {
    Bos,
    Eos,
    Pad,
    /// Padding triple filler for empty input dimensions (encoder only).
    PadFloat,
    Plus,
    Minus,
    Mantissa(u16),
    Exponent(i32),
    Binary(BinaryOp),
    Unary(UnaryOp),
    Var(usize),
    /// Constant placeholder (skeleton mode).
    Hole,
}

impl Token {
    pub fn surface(&self) -> String {
        match self {
            Token::Bos => "<bos>".into(),
            Token::Eos => "<eos>".into(),
            Token::Pad => "<pad>".into(),
            Token::PadFloat => "<padf>".into(),
            Token::Plus => "+".into(),
            Token::Minus => "-".into(),
            Token::Mantissa(m) => format!("{m}"),
            Token::Exponent(e) => format!("E{e}"),
            Token::Binary(op) => op.name().into(),
            Token::Unary(op) => op.name().into(),
            Token::Var(d) => format!("x{d}"),
            Token::Hole => "<>".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncodeMode {
    /// Full end-to-end targets: constants expand to 3 numeric tokens.
    E2e,
    /// Skeleton targets: every constant becomes the placeholder token.
    SkeletonMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SeqRole {
    EncoderInput,
    DecoderTarget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub tokens: Vec<u32>,
    pub role: SeqRole,
}

/// Encoder and decoder vocabularies with disjoint id spaces.
///
/// Ids are assigned deterministically from `d_max`, so two vocabularies built
/// with the same `d_max` are identical.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    pub d_max: usize,
    encoder_tokens: Vec<Token>,
    decoder_tokens: Vec<Token>,
    #[serde(skip)]
    encoder_ids: HashMap<Token, u32>,
    #[serde(skip)]
    decoder_ids: HashMap<Token, u32>,
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.d_max == other.d_max
            && self.encoder_tokens == other.encoder_tokens
            && self.decoder_tokens == other.decoder_tokens
    }
}

fn numeric_tokens() -> Vec<Token> {
    let mut t = vec![Token::Plus, Token::Minus];
    t.extend((0..=9999u16).map(Token::Mantissa));
    t.extend((EXP_MIN..=EXP_MAX).map(Token::Exponent));
    t
}

impl Vocab {
    pub fn new(d_max: usize) -> Vocab {
        let mut encoder_tokens = vec![Token::Pad, Token::PadFloat];
        encoder_tokens.extend(numeric_tokens());

        let mut decoder_tokens = vec![Token::Pad, Token::Bos, Token::Eos];
        decoder_tokens.extend(numeric_tokens());
        decoder_tokens.extend(BinaryOp::ALL.map(Token::Binary));
        decoder_tokens.extend(UnaryOp::ALL.map(Token::Unary));
        decoder_tokens.extend((1..=d_max).map(Token::Var));
        decoder_tokens.push(Token::Hole);

        let mut v = Vocab {
            d_max,
            encoder_tokens,
            decoder_tokens,
            encoder_ids: HashMap::new(),
            decoder_ids: HashMap::new(),
        };
        v.rebuild_index();
        v
    }

    fn rebuild_index(&mut self) {
        self.encoder_ids = self
            .encoder_tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        self.decoder_ids = self
            .decoder_tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
    }

    pub fn encoder_size(&self) -> usize {
        self.encoder_tokens.len()
    }

    pub fn decoder_size(&self) -> usize {
        self.decoder_tokens.len()
    }

    pub fn encoder_id(&self, t: &Token) -> u32 {
        self.encoder_ids[t]
    }

    pub fn decoder_id(&self, t: &Token) -> u32 {
        self.decoder_ids[t]
    }

    pub fn decoder_token(&self, id: u32) -> Option<&Token> {
        self.decoder_tokens.get(id as usize)
    }

    pub fn bos(&self) -> u32 {
        self.decoder_id(&Token::Bos)
    }

    pub fn eos(&self) -> u32 {
        self.decoder_id(&Token::Eos)
    }

    pub fn decoder_pad(&self) -> u32 {
        self.decoder_id(&Token::Pad)
    }

    pub fn encoder_pad(&self) -> u32 {
        self.encoder_id(&Token::Pad)
    }

    /// Versioned text manifest: one `surface<TAB>id` line per token.
    pub fn manifest(&self) -> String {
        let mut out = String::from("symreg-vocab v1\n");
        out.push_str(&format!("d_max\t{}\n", self.d_max));
        out.push_str("[encoder]\n");
        for (i, t) in self.encoder_tokens.iter().enumerate() {
            out.push_str(&format!("{}\t{}\n", t.surface(), i));
        }
        out.push_str("[decoder]\n");
        for (i, t) in self.decoder_tokens.iter().enumerate() {
            out.push_str(&format!("{}\t{}\n", t.surface(), i));
        }
        out
    }

    fn float_tokens(&self, v: f64) -> Result<[Token; 3], TokenError> {
        let t = encode_float(v)?;
        Ok([
            if t.negative { Token::Minus } else { Token::Plus },
            Token::Mantissa(t.mantissa),
            Token::Exponent(t.exponent),
        ])
    }

    /// Prefix-order expression encoding for decoder targets (without BOS/EOS).
    pub fn expr_tokens(&self, expr: &Expr, mode: EncodeMode) -> Result<Vec<Token>, TokenError> {
        let mut out = Vec::new();
        self.push_expr(expr, mode, &mut out)?;
        Ok(out)
    }

    fn push_expr(
        &self,
        expr: &Expr,
        mode: EncodeMode,
        out: &mut Vec<Token>,
    ) -> Result<(), TokenError> {
        match expr {
            Expr::Const(c) => match mode {
                EncodeMode::E2e => out.extend(self.float_tokens(*c)?),
                EncodeMode::SkeletonMode => out.push(Token::Hole),
            },
            Expr::Slot(_) => out.push(Token::Hole),
            Expr::Var(d) => out.push(Token::Var(*d)),
            Expr::Unary(op, c) => {
                out.push(Token::Unary(*op));
                self.push_expr(c, mode, out)?;
            }
            Expr::Binary(op, a, b) => {
                out.push(Token::Binary(*op));
                self.push_expr(a, mode, out)?;
                self.push_expr(b, mode, out)?;
            }
        }
        Ok(())
    }

    pub fn encode_expr(&self, expr: &Expr, mode: EncodeMode) -> Result<TokenSeq, TokenError> {
        let tokens = self.expr_tokens(expr, mode)?;
        Ok(TokenSeq {
            tokens: tokens.iter().map(|t| self.decoder_id(t)).collect(),
            role: SeqRole::DecoderTarget,
        })
    }

    /// Parse a decoder token-id sequence back into an expression. Hole tokens
    /// become `Slot` nodes numbered in prefix order, so skeleton-mode outputs
    /// parse into skeleton trees.
    pub fn decode_expr(&self, seq: &[u32]) -> Result<Arc<Expr>, TokenError> {
        let mut pos = 0usize;
        let mut next_slot = 0usize;
        let expr = self.parse_expr(seq, &mut pos, &mut next_slot, 0)?;
        if pos != seq.len() {
            return Err(TokenError::Parse { pos, reason: "dangling tokens after expression".into() });
        }
        Ok(expr)
    }

    fn parse_expr(
        &self,
        seq: &[u32],
        pos: &mut usize,
        next_slot: &mut usize,
        depth: usize,
    ) -> Result<Arc<Expr>, TokenError> {
        if depth > 512 {
            return Err(TokenError::Parse { pos: *pos, reason: "expression too deep".into() });
        }
        let err = |pos: usize, reason: &str| TokenError::Parse { pos, reason: reason.into() };
        let tok = seq
            .get(*pos)
            .and_then(|id| self.decoder_token(*id))
            .ok_or_else(|| err(*pos, "truncated sequence (arity underflow)"))?
            .clone();
        *pos += 1;
        match tok {
            Token::Var(d) => Ok(Expr::var(d)),
            Token::Hole => {
                let k = *next_slot;
                *next_slot += 1;
                Ok(Arc::new(Expr::Slot(k)))
            }
            Token::Plus | Token::Minus => {
                let negative = tok == Token::Minus;
                let m = match seq.get(*pos).and_then(|id| self.decoder_token(*id)) {
                    Some(Token::Mantissa(m)) => *m,
                    _ => return Err(err(*pos, "expected mantissa token")),
                };
                *pos += 1;
                let e = match seq.get(*pos).and_then(|id| self.decoder_token(*id)) {
                    Some(Token::Exponent(e)) => *e,
                    _ => return Err(err(*pos, "expected exponent token")),
                };
                *pos += 1;
                Ok(Expr::constant(FloatTriple { negative, mantissa: m, exponent: e }.value()))
            }
            Token::Unary(op) => {
                let c = self.parse_expr(seq, pos, next_slot, depth + 1)?;
                Ok(Expr::unary(op, c))
            }
            Token::Binary(op) => {
                let a = self.parse_expr(seq, pos, next_slot, depth + 1)?;
                let b = self.parse_expr(seq, pos, next_slot, depth + 1)?;
                Ok(Expr::binary(op, a, b))
            }
            other => Err(err(*pos - 1, &format!("unexpected token `{}`", other.surface()))),
        }
    }

    /// Parse a decoder sequence that is expected to be a skeleton.
    pub fn decode_skeleton(&self, seq: &[u32]) -> Result<Skeleton, TokenError> {
        Ok(Skeleton::from_tree(self.decode_expr(seq)?))
    }

    /// One row of 3*(d_max+1) encoder token ids per point, laid out as the
    /// x_1..x_D triples, pad triples up to d_max, then the y triple.
    pub fn encode_points(&self, s: &SampleSet) -> Result<Vec<Vec<u32>>, TokenError> {
        let dim = s.dim();
        let pad = self.encoder_id(&Token::PadFloat);
        let mut rows = Vec::with_capacity(s.len());
        for i in 0..s.len() {
            let mut row = Vec::with_capacity(3 * (self.d_max + 1));
            for d in 0..self.d_max {
                if d < dim {
                    for t in self.float_tokens(s.x[i][d])? {
                        row.push(self.encoder_id(&t));
                    }
                } else {
                    row.extend([pad, pad, pad]);
                }
            }
            for t in self.float_tokens(s.y[i])? {
                row.push(self.encoder_id(&t));
            }
            rows.push(row);
        }
        Ok(rows)
    }

    /// Human-readable surface forms for a decoder id sequence.
    pub fn surfaces(&self, seq: &[u32]) -> Vec<String> {
        seq.iter()
            .map(|id| {
                self.decoder_token(*id)
                    .map(|t| t.surface())
                    .unwrap_or_else(|| format!("<bad:{id}>"))
            })
            .collect()
    }
}

// Rebuild the hash indexes after deserialization.
impl Vocab {
    pub fn reindex(mut self) -> Vocab {
        self.rebuild_index();
        self
    }
}
