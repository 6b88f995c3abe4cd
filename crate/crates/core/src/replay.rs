//! Replayed data and replayed embeddings.
//!
//! [`ReplayBuffer`] keeps a budgeted set of raw exemplar inputs shared by all
//! sessions. [`CentroidStore`] keeps, per class, the mean frozen gallery
//! embedding of every session the class appeared in, and their aggregate
//! `𝓔_c` used as a fixed attractor during later sessions.

use std::collections::BTreeMap;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::model::EmbeddingNet;
use crate::rng::Rng;
use crate::tensor::{squared_distance, Tensor};

/// How per-session class means are combined into a centroid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CentroidDivisor {
    /// Mean over the sessions in which the class appeared.
    #[default]
    ContributingSessions,
    /// Sum of per-session means divided by the number of sessions so far.
    AllSessions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionContribution {
    pub session: usize,
    pub mean: Vec<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCentroid {
    pub centroid: Vec<f64>,
    pub contributions: Vec<SessionContribution>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CentroidStore {
    pub divisor: CentroidDivisor,
    classes: BTreeMap<u32, ClassCentroid>,
    last_session: usize,
}

fn mean_of<'a>(vectors: impl IntoIterator<Item = &'a [f64]>, dim: usize) -> (Vec<f64>, usize) {
    let mut acc = vec![0.0; dim];
    let mut count = 0;
    for v in vectors {
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
        count += 1;
    }
    for a in acc.iter_mut() {
        *a /= count.max(1) as f64;
    }
    (acc, count)
}

impl CentroidStore {
    pub fn new(divisor: CentroidDivisor) -> Self {
        CentroidStore { divisor, ..Default::default() }
    }

    pub fn get(&self, class: u32) -> Option<&[f64]> {
        self.classes.get(&class).map(|c| c.centroid.as_slice())
    }

    pub fn class(&self, class: u32) -> Option<&ClassCentroid> {
        self.classes.get(&class)
    }

    pub fn classes(&self) -> impl Iterator<Item = u32> + '_ {
        self.classes.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn last_session(&self) -> usize {
        self.last_session
    }

    /// Records session `session`'s per-class means of the frozen embeddings
    /// and refreshes the aggregates. Earlier contributions are never edited.
    pub fn update_centroids(
        &mut self,
        session_embeddings: &BTreeMap<u32, Vec<Vec<f64>>>,
        session: usize,
    ) -> Result<()> {
        if session <= self.last_session {
            return Err(contract(format!(
                "centroids already hold session {}, cannot add session {session}",
                self.last_session
            )));
        }
        if let Some((c, _)) = session_embeddings.iter().find(|(_, v)| v.is_empty()) {
            return Err(contract(format!("class {c} has no embeddings in session {session}")));
        }
        for (&c, vectors) in session_embeddings {
            let dim = vectors[0].len();
            let (mean, count) = mean_of(vectors.iter().map(|v| v.as_slice()), dim);
            let entry = self
                .classes
                .entry(c)
                .or_insert_with(|| ClassCentroid { centroid: Vec::new(), contributions: Vec::new() });
            entry.contributions.push(SessionContribution { session, mean, count });
        }
        self.last_session = session;
        let keys: Vec<u32> = self.classes.keys().copied().collect();
        for c in keys {
            let centroid = self.recompute(c).expect("class present");
            self.classes.get_mut(&c).unwrap().centroid = centroid;
        }
        Ok(())
    }

    /// Aggregate recomputed from the stored per-session means.
    pub fn recompute(&self, class: u32) -> Option<Vec<f64>> {
        let entry = self.classes.get(&class)?;
        let dim = entry.contributions.first()?.mean.len();
        let mut acc = vec![0.0; dim];
        for contrib in &entry.contributions {
            for (a, m) in acc.iter_mut().zip(&contrib.mean) {
                *a += m;
            }
        }
        let divisor = match self.divisor {
            CentroidDivisor::ContributingSessions => entry.contributions.len(),
            CentroidDivisor::AllSessions => self.last_session,
        };
        for a in acc.iter_mut() {
            *a /= divisor as f64;
        }
        Some(acc)
    }
}

/// One selected replay item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub item_id: u64,
    pub x: Vec<f64>,
    pub class: u32,
    pub session: usize,
    /// Squared distance to the class mean at selection time.
    pub distance: f64,
    /// Position in the class's nearest-to-mean ordering (0 = nearest).
    pub rank: usize,
}

/// Borrowed input item for exemplar mining.
#[derive(Debug, Clone, Copy)]
pub struct MiningItem<'a> {
    pub item_id: u64,
    pub x: &'a [f64],
    pub class: u32,
}

/// Per class: rank items by distance to the class mean in the current
/// embedding space, then sample `per_class_quota` of them uniformly from the
/// `min(pool_factor · quota, class size)` nearest. Output is ordered by class
/// and then by rank.
pub fn mine_exemplars(
    net: &EmbeddingNet,
    items: &[MiningItem<'_>],
    per_class_quota: usize,
    pool_factor: usize,
    session: usize,
    rng: &mut Rng,
) -> Result<Vec<Exemplar>> {
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, it) in items.iter().enumerate() {
        by_class.entry(it.class).or_default().push(i);
    }
    let mut out = Vec::new();
    if per_class_quota == 0 {
        return Ok(out);
    }
    for (class, members) in by_class {
        let rows: Vec<&[f64]> = members.iter().map(|&i| items[i].x).collect();
        let emb = net.embed_batch(&Tensor::from_rows(&rows)?)?;
        let (mean, _) = mean_of(emb.rows(), net.embed_dim());
        let mut order: Vec<(f64, usize)> =
            emb.rows().enumerate().map(|(k, e)| (squared_distance(e, &mean), k)).collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

        let chosen: Vec<usize> = if per_class_quota >= members.len() {
            (0..members.len()).collect()
        } else {
            let pool = (pool_factor.max(1) * per_class_quota).min(members.len());
            let mut picked = index::sample(rng, pool, per_class_quota).into_vec();
            picked.sort_unstable();
            picked
        };
        for rank in chosen {
            let (distance, k) = order[rank];
            let it = &items[members[k]];
            out.push(Exemplar { item_id: it.item_id, x: it.x.to_vec(), class, session, distance, rank });
        }
    }
    Ok(out)
}

/// Budgeted exemplar store shared by all sessions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    pub budget: usize,
    entries: Vec<Exemplar>,
}

impl ReplayBuffer {
    pub fn new(budget: usize) -> Self {
        ReplayBuffer { budget, entries: Vec::new() }
    }

    pub fn entries(&self) -> &[Exemplar] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn class_counts(&self) -> BTreeMap<u32, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.entries {
            *counts.entry(e.class).or_insert(0) += 1;
        }
        counts
    }

    pub fn quota(&self, classes_known: usize) -> usize {
        if classes_known == 0 {
            0
        } else {
            self.budget / classes_known
        }
    }

    /// Merges `new_exemplars` and trims every class to
    /// `floor(budget / classes_known)` entries, keeping the lowest
    /// distance-to-mean ranks (earlier session first on equal rank).
    pub fn rebalance(&mut self, new_exemplars: Vec<Exemplar>, classes_known: usize) {
        let mut by_class: BTreeMap<u32, Vec<Exemplar>> = BTreeMap::new();
        for e in self.entries.drain(..).chain(new_exemplars) {
            by_class.entry(e.class).or_default().push(e);
        }
        let quota = self.quota(classes_known.max(by_class.len()));
        for (_, mut members) in by_class {
            members.sort_by(|a, b| a.rank.cmp(&b.rank).then(a.session.cmp(&b.session)));
            members.truncate(quota);
            self.entries.extend(members);
        }
        debug_assert!(self.entries.len() <= self.budget);
    }
}
