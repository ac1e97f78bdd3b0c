//! Prompt tokenisation, sinusoidal positional encoding and graph/prompt
//! token fusion.
//!
//! The vocabulary is the finite prompt-template language: template words,
//! the bucket tokens `<user>` / `<time>`, the literals 1..=20 for k, and
//! `<unk>` for everything else. Prompt embeddings are trainable.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";
pub const USER_BUCKET: &str = "<user>";
pub const TIME_BUCKET: &str = "<time>";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptVocab {
    pub token_to_id: BTreeMap<String, usize>,
    pub unk_id: usize,
}

impl PromptVocab {
    /// Build the vocabulary from a prompt template. Deterministic:
    /// tokens are sorted before ids are assigned.
    pub fn build(template: &str) -> PromptVocab {
        let instantiated = instantiate_template(template, 1, "u", 0, 0);
        let mut tokens: Vec<String> = split_tokens(&instantiated);
        tokens.push(UNK.to_string());
        tokens.push(USER_BUCKET.to_string());
        tokens.push(TIME_BUCKET.to_string());
        for k in 1..=20 {
            tokens.push(k.to_string());
        }
        tokens.sort();
        tokens.dedup();
        let token_to_id: BTreeMap<String, usize> = tokens
            .into_iter()
            .enumerate()
            .map(|(i, t)| (t, i))
            .collect();
        let unk_id = token_to_id[UNK];
        PromptVocab { token_to_id, unk_id }
    }

    pub fn len(&self) -> usize {
        self.token_to_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_to_id.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        *self.token_to_id.get(token).unwrap_or(&self.unk_id)
    }

    /// Tokenise text into vocabulary ids. Errors on empty/whitespace text.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let tokens = split_tokens(text);
        if tokens.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        Ok(tokens.iter().map(|t| self.id(t)).collect())
    }
}

/// Lowercase and split on whitespace/punctuation boundaries. Angle-bracket
/// groups like `<user>` stay intact as single tokens.
pub fn split_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        if c == '<' {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
            let mut group = String::from('<');
            for g in chars.by_ref() {
                group.push(g.to_ascii_lowercase());
                if g == '>' {
                    break;
                }
            }
            out.push(group);
        } else if c.is_alphanumeric() {
            current.extend(c.to_lowercase());
        } else if !current.is_empty() {
            out.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

/// Fill the template placeholders {K}, {U}, {T1}, {T2}. K keeps its
/// literal up to 20; user ids and timestamps map to bucket tokens so the
/// vocabulary stays finite.
pub fn instantiate_template(template: &str, k: usize, _user: &str, _t1: i64, _t2: i64) -> String {
    let k_token = if k <= 20 {
        k.to_string()
    } else {
        UNK.to_string()
    };
    template
        .replace("{K}", &k_token)
        .replace("{U}", USER_BUCKET)
        .replace("{T1}", TIME_BUCKET)
        .replace("{T2}", TIME_BUCKET)
}

/// Fixed sinusoidal positional encoding:
/// (pos, 2i) = sin(pos / 10000^(2i/d)), (pos, 2i+1) = cos(same).
pub fn positional_encoding(length: usize, d: usize) -> Result<Array2<f64>> {
    assert!(length >= 1);
    if d % 2 != 0 {
        return Err(Error::OddDimension(d));
    }
    let mut pe = Array2::zeros((length, d));
    for pos in 0..length {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe[[pos, 2 * i]] = angle.sin();
            pe[[pos, 2 * i + 1]] = angle.cos();
        }
    }
    Ok(pe)
}

/// Plain-matrix fusion: rows = [G; P] + positional encoding. The tape
/// path in the pipeline mirrors this with differentiable ops.
pub fn fuse_tokens(g: &Array2<f64>, p: &Array2<f64>) -> Result<Array2<f64>> {
    if g.ncols() != p.ncols() {
        return Err(Error::WidthMismatch {
            left: g.ncols(),
            right: p.ncols(),
        });
    }
    let cat = ndarray::concatenate(ndarray::Axis(0), &[g.view(), p.view()]).unwrap();
    let pe = positional_encoding(cat.nrows(), cat.ncols())?;
    Ok(cat + pe)
}
