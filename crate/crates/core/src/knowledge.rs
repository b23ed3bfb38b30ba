//! Token-to-embedding store backed by a pretrained table, with trainable
//! fallback slots for label tokens the table does not cover.
//!
//! Table file format: UTF-8 text, one line per token, the token followed
//! by `d_kg` space-separated decimals (Numberbatch-compatible layout).

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::store::ParameterStore;
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenRole {
    Keyword,
    Label,
}

#[derive(Debug)]
pub struct KnowledgeStore<S: Scalar> {
    pretrained: HashMap<String, DenseTensor<S>>,
    fallback: BTreeMap<String, DenseTensor<S>>,
    d_kg: usize,
}

impl<S: Scalar> KnowledgeStore<S> {
    pub fn new(d_kg: usize) -> Self {
        KnowledgeStore {
            pretrained: HashMap::new(),
            fallback: BTreeMap::new(),
            d_kg,
        }
    }

    pub fn d_kg(&self) -> usize {
        self.d_kg
    }

    pub fn n_pretrained(&self) -> usize {
        self.pretrained.len()
    }

    /// Adds (or replaces) a frozen pretrained embedding.
    pub fn insert_pretrained(&mut self, token: &str, values: Vec<S>) -> Result<()> {
        if values.len() != self.d_kg {
            return Err(Error::validation(
                "embedding",
                format!("token {token:?} has width {}, expected {}", values.len(), self.d_kg),
            ));
        }
        self.pretrained
            .insert(token.to_string(), DenseTensor::new(vec![self.d_kg], values)?);
        Ok(())
    }

    /// Resolves a token. Matched tokens return their frozen pretrained
    /// vector. Unmatched label tokens get a trainable fallback, created in
    /// `params` on first use; unmatched keywords return `None` and the
    /// caller skips them.
    pub fn lookup(
        &mut self,
        params: &mut ParameterStore<S>,
        token: &str,
        role: TokenRole,
    ) -> Result<Option<DenseTensor<S>>> {
        if let Some(t) = self.pretrained.get(token) {
            return Ok(Some(t.clone()));
        }
        match role {
            TokenRole::Keyword => {
                log::warn!("keyword token {token:?} has no pretrained embedding; skipping");
                Ok(None)
            }
            TokenRole::Label => {
                if let Some(t) = self.fallback.get(token) {
                    return Ok(Some(t.clone()));
                }
                let name = format!("kg_fallback.{token}");
                let tensor = params.init_weight(&name, vec![self.d_kg])?;
                self.fallback.insert(token.to_string(), tensor.clone());
                Ok(Some(tensor))
            }
        }
    }

    /// Read-only resolution; fallbacks must already exist.
    pub fn get(&self, token: &str) -> Option<DenseTensor<S>> {
        self.pretrained
            .get(token)
            .or_else(|| self.fallback.get(token))
            .cloned()
    }

    /// Plain-data snapshot of the pretrained table, sorted by token.
    pub fn to_raw(&self) -> Vec<(String, Vec<S>)> {
        let mut rows: Vec<(String, Vec<S>)> = self
            .pretrained
            .iter()
            .map(|(k, v)| (k.clone(), v.to_vec()))
            .collect();
        rows.sort_by(|a, b| a.0.cmp(&b.0));
        rows
    }

    pub fn from_raw(d_kg: usize, rows: &[(String, Vec<S>)]) -> Result<Self> {
        let mut store = KnowledgeStore::new(d_kg);
        for (token, values) in rows {
            store.insert_pretrained(token, values.clone())?;
        }
        Ok(store)
    }
}

pub fn load_embedding_table<S: Scalar>(path: &Path, d_kg: usize) -> Result<KnowledgeStore<S>> {
    let reader = BufReader::new(File::open(path)?);
    let mut store = KnowledgeStore::new(d_kg);
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts.next().ok_or(Error::Parse {
            line: lineno + 1,
            detail: "empty embedding line".into(),
        })?;
        let values: Vec<S> = parts
            .map(|p| {
                p.parse::<f64>().map(S::from_f64).map_err(|e| Error::Parse {
                    line: lineno + 1,
                    detail: format!("bad decimal {p:?}: {e}"),
                })
            })
            .collect::<Result<_>>()?;
        if values.len() != d_kg {
            return Err(Error::Parse {
                line: lineno + 1,
                detail: format!(
                    "token {token:?} has {} values, expected {d_kg}",
                    values.len()
                ),
            });
        }
        store.insert_pretrained(token, values)?;
    }
    Ok(store)
}

pub fn save_embedding_table<S: Scalar>(store: &KnowledgeStore<S>, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for (token, values) in store.to_raw() {
        write!(out, "{token}")?;
        for v in values {
            write!(out, " {}", v.as_f64())?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}
