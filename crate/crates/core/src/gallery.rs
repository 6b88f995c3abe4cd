//! Append-only gallery of frozen embeddings and the retrieval metrics
//! computed against it.
//!
//! Each session appends one block of records extracted with that session's
//! model. Blocks are never rewritten; a SHA-256 digest taken at append time
//! lets any later reader prove it.

use std::collections::{BTreeSet, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{contract, Result};
use crate::model::{EmbeddingNet, ModelState};
use crate::tensor::{dot, norm, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub item_id: u64,
    pub class: u32,
    pub session: usize,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub session: usize,
    pub start: usize,
    pub len: usize,
    /// Hex SHA-256 of the block's records at append time.
    pub hash: String,
}

/// Item to embed into a gallery block.
#[derive(Debug, Clone, Copy)]
pub struct GalleryItem<'a> {
    pub item_id: u64,
    pub class: u32,
    pub x: &'a [f64],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GallerySet {
    records: Vec<EmbeddingRecord>,
    blocks: Vec<BlockInfo>,
}

pub fn hash_records(records: &[EmbeddingRecord]) -> String {
    let mut h = Sha256::new();
    for r in records {
        h.update(r.item_id.to_le_bytes());
        h.update(r.class.to_le_bytes());
        h.update((r.session as u64).to_le_bytes());
        for v in &r.embedding {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

impl GallerySet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn blocks(&self) -> &[BlockInfo] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last_session(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.session)
    }

    pub fn block_records(&self, session: usize) -> Option<&[EmbeddingRecord]> {
        let b = self.blocks.iter().find(|b| b.session == session)?;
        Some(&self.records[b.start..b.start + b.len])
    }

    /// Embeds `items` with `net` and appends them as the block of `session`,
    /// which must directly follow the last block.
    pub fn extract_and_append(&mut self, net: &EmbeddingNet, items: &[GalleryItem<'_>], session: usize) -> Result<()> {
        if session != self.last_session() + 1 {
            return Err(contract(format!(
                "gallery holds sessions up to {}, cannot append session {session}",
                self.last_session()
            )));
        }
        let mut ids: HashSet<u64> = self.records.iter().map(|r| r.item_id).collect();
        for it in items {
            if !ids.insert(it.item_id) {
                return Err(contract(format!("item {} is already in the gallery", it.item_id)));
            }
        }
        let start = self.records.len();
        if !items.is_empty() {
            let rows: Vec<&[f64]> = items.iter().map(|i| i.x).collect();
            let emb = net.embed_batch(&Tensor::from_rows(&rows)?)?;
            for (it, e) in items.iter().zip(emb.rows()) {
                self.records.push(EmbeddingRecord {
                    item_id: it.item_id,
                    class: it.class,
                    session,
                    embedding: e.to_vec(),
                });
            }
        }
        let hash = hash_records(&self.records[start..]);
        self.blocks.push(BlockInfo { session, start, len: items.len(), hash });
        Ok(())
    }

    /// Recomputes every block digest and compares it with the stored one.
    pub fn audit(&self) -> Result<()> {
        for b in &self.blocks {
            let now = hash_records(&self.records[b.start..b.start + b.len]);
            if now != b.hash {
                return Err(contract(format!("gallery block of session {} was modified", b.session)));
            }
        }
        Ok(())
    }

    pub fn block_hashes(&self) -> Vec<(usize, String)> {
        self.blocks.iter().map(|b| (b.session, b.hash.clone())).collect()
    }

    pub fn retrieve(&self, query: &[f64], k: usize) -> Result<Vec<Hit>> {
        retrieve(&self.records, query, k)
    }
}

/// One retrieval result: index into the searched records.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub index: usize,
    pub similarity: f64,
}

fn cosine(q: &[f64], q_norm: f64, g: &[f64]) -> f64 {
    dot(q, g) / (q_norm * norm(g)).max(f64::MIN_POSITIVE)
}

/// Top-`k` records by descending cosine similarity; ties go to the earlier
/// record.
pub fn retrieve(records: &[EmbeddingRecord], query: &[f64], k: usize) -> Result<Vec<Hit>> {
    if records.is_empty() {
        return Err(contract("retrieval from an empty gallery"));
    }
    if k == 0 {
        return Err(contract("retrieval needs k >= 1"));
    }
    let qn = norm(query);
    let mut hits: Vec<Hit> = records
        .iter()
        .enumerate()
        .map(|(index, r)| Hit { index, similarity: cosine(query, qn, &r.embedding) })
        .collect();
    let order = |a: &Hit, b: &Hit| {
        b.similarity
            .partial_cmp(&a.similarity)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.index.cmp(&b.index))
    };
    let k = k.min(hits.len());
    if k < hits.len() {
        hits.select_nth_unstable_by(k - 1, order);
        hits.truncate(k);
    }
    hits.sort_by(order);
    Ok(hits)
}

/// Query for recall evaluation.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub embedding: &'a [f64],
    pub class: u32,
}

/// Recall@k for each `k` in `ks`: the fraction of queries with at least one
/// same-class record among the top k.
pub fn recall_at_ks(records: &[EmbeddingRecord], queries: &[Query<'_>], ks: &[usize]) -> Result<Vec<f64>> {
    if queries.is_empty() {
        return Err(contract("recall needs at least one query"));
    }
    let kmax = ks.iter().copied().max().unwrap_or(1);
    let first_hits: Vec<Option<usize>> = queries
        .par_iter()
        .map(|q| {
            let hits = retrieve(records, q.embedding, kmax)?;
            Ok(hits.iter().position(|h| records[h.index].class == q.class))
        })
        .collect::<Result<_>>()?;
    Ok(ks
        .iter()
        .map(|&k| first_hits.iter().filter(|p| p.is_some_and(|p| p < k)).count() as f64 / queries.len() as f64)
        .collect())
}

pub fn recall_at_k(records: &[EmbeddingRecord], queries: &[Query<'_>], k: usize) -> Result<f64> {
    Ok(recall_at_ks(records, queries, &[k])?[0])
}

/// Mean of per-session recalls.
pub fn average_recall(per_session: &[f64]) -> Result<f64> {
    if per_session.is_empty() {
        return Err(contract("average recall over zero sessions"));
    }
    Ok(per_session.iter().sum::<f64>() / per_session.len() as f64)
}

/// Predicted class for a normalized embedding: argmax of cosine logits,
/// ties resolved to the lowest class id.
pub fn predict(model: &ModelState, weights: &Tensor, embedding: &[f64]) -> u32 {
    let mut best: Option<(u32, f64)> = None;
    for (row, &class) in weights.rows().zip(&model.head.registry) {
        let s = dot(row, embedding);
        best = match best {
            Some((bc, bs)) if bs > s || (bs == s && bc < class) => Some((bc, bs)),
            _ => Some((class, s)),
        };
    }
    best.map(|b| b.0).expect("classifier has at least one class")
}

/// Fraction of items whose predicted class equals the label.
pub fn classification_accuracy(model: &ModelState, items: &[(&[f64], u32)]) -> Result<f64> {
    if items.is_empty() {
        return Err(contract("accuracy over zero items"));
    }
    let registered: BTreeSet<u32> = model.head.registry.iter().copied().collect();
    if let Some((_, c)) = items.iter().find(|(_, c)| !registered.contains(c)) {
        return Err(contract(format!("class {c} is not registered")));
    }
    let rows: Vec<&[f64]> = items.iter().map(|(x, _)| *x).collect();
    let emb = model.embed_batch(&Tensor::from_rows(&rows)?)?;
    let w = model.head.normalized();
    let correct = emb.rows().zip(items).filter(|(e, (_, c))| predict(model, &w, e) == *c).count();
    Ok(correct as f64 / items.len() as f64)
}
