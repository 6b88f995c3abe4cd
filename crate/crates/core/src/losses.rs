//! Training objective over one mini-batch.
//!
//! * discrimination: normalized-softmax cross-entropy with temperature `T`;
//! * model coherence: triplet hinge between the student embedding of an
//!   anchor, the teacher embedding of the same anchor (positive) and the
//!   teacher embedding of the hardest negative in the batch;
//! * data coherence: squared distance of embeddings to fixed class
//!   centroids, current items of old-and-current classes plus replayed items.
//!
//! `total = l_c + alpha·l_m + beta·l_d`; only `l_c` is used while no
//! teacher exists.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::model::{embed_on_tape, logits_on_tape, ModelSnapshot, ModelState, ModelVars};
use crate::replay::CentroidStore;
use crate::tape::{GradTape, Gradients, Var};
use crate::tensor::{squared_distance, Tensor};

/// A mini-batch: current-session items and replayed exemplars.
#[derive(Debug, Clone, Default)]
pub struct BatchView<'a> {
    pub current: Vec<(&'a [f64], u32)>,
    pub replayed: Vec<(&'a [f64], u32)>,
}

impl<'a> BatchView<'a> {
    pub fn len(&self) -> usize {
        self.current.len() + self.replayed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn items(&self) -> impl Iterator<Item = (&'a [f64], u32, bool)> + '_ {
        self.current
            .iter()
            .map(|&(x, y)| (x, y, false))
            .chain(self.replayed.iter().map(|&(x, y)| (x, y, true)))
    }

    pub fn inputs(&self) -> Result<Tensor> {
        let rows: Vec<&[f64]> = self.items().map(|(x, _, _)| x).collect();
        Tensor::from_rows(&rows)
    }

    pub fn classes(&self) -> Vec<u32> {
        self.items().map(|(_, y, _)| y).collect()
    }
}

/// `pi`: old classes also present in the current session. `gamma`: all old
/// classes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClassIndexSets {
    pub pi: BTreeSet<u32>,
    pub gamma: BTreeSet<u32>,
}

impl ClassIndexSets {
    pub fn new(previous: &BTreeSet<u32>, current: &BTreeSet<u32>) -> Self {
        ClassIndexSets { pi: previous.intersection(current).copied().collect(), gamma: previous.clone() }
    }
}

/// Weights and mining switches for one evaluation of the objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub margin: f64,
    pub temperature: f64,
    /// Replayed items may serve as hardest negatives.
    pub negatives_include_replayed: bool,
    /// Replayed items act as triplet anchors.
    pub anchors_include_replayed: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 10.0,
            beta: 1.0,
            margin: 0.1,
            temperature: 0.05,
            negatives_include_replayed: true,
            anchors_include_replayed: true,
        }
    }
}

impl LossConfig {
    pub fn from_hyper(h: &crate::model::Hyperparameters) -> Self {
        LossConfig {
            alpha: h.alpha,
            beta: h.beta,
            margin: h.margin,
            temperature: h.temperature,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_c: f64,
    pub l_m: f64,
    pub l_d_inner: f64,
    pub l_d_outer: f64,
    pub l_d: f64,
    pub total: f64,
    /// Anchors that found a negative.
    pub triplets: usize,
    /// Triplets whose hinge is active.
    pub active_hinges: usize,
    pub inner_terms: usize,
    pub outer_terms: usize,
}

/// Term selector for evaluation and gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerm {
    Discrimination,
    ModelCoherence,
    DataCoherence,
    Total,
}

impl LossTerm {
    pub const ALL: [LossTerm; 4] =
        [LossTerm::Discrimination, LossTerm::ModelCoherence, LossTerm::DataCoherence, LossTerm::Total];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Discrimination => "l_c",
            LossTerm::ModelCoherence => "l_m",
            LossTerm::DataCoherence => "l_d",
            LossTerm::Total => "total",
        }
    }
}

/// Index of the candidate with a class other than `anchor_class` that is
/// nearest (squared Euclidean) to `student_anchor`. Candidates are teacher
/// embeddings. Ties go to the lowest index; `None` without negatives.
pub fn mine_hardest_negative(student_anchor: &[f64], candidates: &[(&[f64], u32)], anchor_class: u32) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &(emb, class)) in candidates.iter().enumerate() {
        if class == anchor_class {
            continue;
        }
        let d = squared_distance(student_anchor, emb);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i)
}

/// Tape state shared by all terms of one batch.
pub struct BatchGraph {
    pub tape: GradTape,
    pub vars: ModelVars,
    pub embeddings: Var,
    classes: Vec<u32>,
    replayed: Vec<bool>,
}

impl BatchGraph {
    pub fn new(model: &ModelState, batch: &BatchView<'_>) -> Result<Self> {
        if batch.len() < 2 {
            return Err(contract(format!("mini-batch needs at least 2 items, got {}", batch.len())));
        }
        let mut tape = GradTape::new();
        let vars = model.bind(&mut tape);
        let xs = tape.constant(batch.inputs()?);
        let embeddings = embed_on_tape(&mut tape, &vars, xs)?;
        Ok(BatchGraph {
            tape,
            vars,
            embeddings,
            classes: batch.classes(),
            replayed: batch.items().map(|(_, _, r)| r).collect(),
        })
    }

    fn n(&self) -> f64 {
        self.classes.len() as f64
    }

    pub fn discrimination(&mut self, model: &ModelState, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(contract(format!("temperature must be > 0, got {temperature}")));
        }
        let labels = model.head.label_indices(&self.classes)?;
        let logits = logits_on_tape(&mut self.tape, &self.vars, self.embeddings, temperature)?;
        self.tape.softmax_cross_entropy(logits, &labels)
    }

    /// Returns the term plus (triplets, active hinges).
    pub fn model_coherence(
        &mut self,
        teacher: &ModelSnapshot,
        batch: &BatchView<'_>,
        cfg: &LossConfig,
    ) -> Result<(Var, usize, usize)> {
        let teacher_emb = teacher.embed_batch(&batch.inputs()?)?;
        let student = self.tape.value(self.embeddings).clone();
        let candidates: Vec<(&[f64], u32)> = teacher_emb
            .rows()
            .zip(&self.classes)
            .zip(&self.replayed)
            .filter(|(_, &r)| cfg.negatives_include_replayed || !r)
            .map(|((e, &c), _)| (e, c))
            .collect();
        let candidate_rows: Vec<usize> = (0..self.classes.len())
            .filter(|&i| cfg.negatives_include_replayed || !self.replayed[i])
            .collect();

        let d = student.dims2().1;
        let mut negatives = teacher_emb.clone();
        let mut mask = vec![0.0; self.classes.len()];
        let mut triplets = 0;
        for (a, s) in student.rows().enumerate() {
            if self.replayed[a] && !cfg.anchors_include_replayed {
                continue;
            }
            if let Some(k) = mine_hardest_negative(s, &candidates, self.classes[a]) {
                let src = teacher_emb.row(candidate_rows[k]).to_vec();
                negatives.data_mut()[a * d..(a + 1) * d].copy_from_slice(&src);
                mask[a] = 1.0;
                triplets += 1;
            }
        }

        let t = &mut self.tape;
        let pos = t.constant(teacher_emb);
        let neg = t.constant(negatives);
        let dp = t.sub(self.embeddings, pos)?;
        let dp = t.square(dp);
        let dp = t.row_sum(dp);
        let dn = t.sub(self.embeddings, neg)?;
        let dn = t.square(dn);
        let dn = t.row_sum(dn);
        let diff = t.sub(dp, dn)?;
        let shifted = t.add_scalar(diff, cfg.margin);
        let hinge = t.relu(shifted);
        let active = t
            .value(shifted)
            .data()
            .iter()
            .zip(&mask)
            .filter(|(v, m)| **m > 0.0 && **v > 0.0)
            .count();
        let maskv = t.constant(Tensor::vector(mask));
        let masked = t.mul(hinge, maskv)?;
        let total = t.sum(masked);
        let n = self.n();
        Ok((self.tape.scale(total, 1.0 / n), triplets, active))
    }

    /// Returns (inner sum, outer sum, l_d, inner terms, outer terms).
    pub fn data_coherence(
        &mut self,
        centroids: &CentroidStore,
        sets: &ClassIndexSets,
    ) -> Result<(Var, Var, Var, usize, usize)> {
        let d = self.tape.value(self.embeddings).dims2().1;
        let rows = self.classes.len();
        let mut targets = vec![0.0; rows * d];
        let mut inner_mask = vec![0.0; rows];
        let mut outer_mask = vec![0.0; rows];
        for (i, (&c, &r)) in self.classes.iter().zip(&self.replayed).enumerate() {
            let selected = if r { sets.gamma.contains(&c) } else { sets.pi.contains(&c) };
            if !selected {
                continue;
            }
            let centroid = centroids
                .get(c)
                .ok_or_else(|| contract(format!("no centroid stored for class {c}")))?;
            if centroid.len() != d {
                return Err(crate::error::dimension(format!(
                    "centroid of class {c} has {} dims, embeddings have {d}",
                    centroid.len()
                )));
            }
            targets[i * d..(i + 1) * d].copy_from_slice(centroid);
            if r {
                outer_mask[i] = 1.0;
            } else {
                inner_mask[i] = 1.0;
            }
        }
        let inner_terms = inner_mask.iter().filter(|&&m| m > 0.0).count();
        let outer_terms = outer_mask.iter().filter(|&&m| m > 0.0).count();

        let t = &mut self.tape;
        let target = t.constant(Tensor::new(vec![rows, d], targets)?);
        let diff = t.sub(self.embeddings, target)?;
        let sq = t.square(diff);
        let per_row = t.row_sum(sq);
        let im = t.constant(Tensor::vector(inner_mask));
        let om = t.constant(Tensor::vector(outer_mask));
        let inner = t.mul(per_row, im)?;
        let inner = t.sum(inner);
        let outer = t.mul(per_row, om)?;
        let outer = t.sum(outer);
        let both = t.add(inner, outer)?;
        let n = self.n();
        let l_d = self.tape.scale(both, 1.0 / n);
        Ok((inner, outer, l_d, inner_terms, outer_terms))
    }
}

/// `l_c + alpha·l_m + beta·l_d`, in the order the tape accumulates it.
pub fn weighted_total(l_c: f64, l_m: f64, l_d: f64, alpha: f64, beta: f64) -> f64 {
    l_c + alpha * l_m + beta * l_d
}

/// Inputs besides the model that the objective depends on.
#[derive(Clone, Copy)]
pub struct LossContext<'a> {
    pub teacher: Option<&'a ModelSnapshot>,
    pub centroids: Option<&'a CentroidStore>,
    pub sets: &'a ClassIndexSets,
    pub config: &'a LossConfig,
}

/// Builds the selected term on a fresh tape. Returns the graph, the loss
/// node and the value report.
pub fn build(
    term: LossTerm,
    model: &ModelState,
    batch: &BatchView<'_>,
    ctx: LossContext<'_>,
) -> Result<(BatchGraph, Var, LossReport)> {
    let cfg = ctx.config;
    let mut g = BatchGraph::new(model, batch)?;
    let mut report = LossReport::default();

    let need_c = matches!(term, LossTerm::Discrimination | LossTerm::Total);
    let need_m = match term {
        LossTerm::ModelCoherence => true,
        LossTerm::Total => ctx.teacher.is_some() && cfg.alpha != 0.0,
        _ => false,
    };
    let need_d = match term {
        LossTerm::DataCoherence => true,
        LossTerm::Total => ctx.teacher.is_some() && cfg.beta != 0.0,
        _ => false,
    };

    let lc = if need_c {
        let v = g.discrimination(model, cfg.temperature)?;
        report.l_c = g.tape.value(v).item();
        Some(v)
    } else {
        None
    };
    let lm = if need_m {
        let teacher = ctx.teacher.ok_or_else(|| contract("model coherence needs a teacher"))?;
        let (v, triplets, active) = g.model_coherence(teacher, batch, cfg)?;
        report.l_m = g.tape.value(v).item();
        report.triplets = triplets;
        report.active_hinges = active;
        Some(v)
    } else {
        None
    };
    let ld = if need_d {
        let centroids = ctx.centroids.ok_or_else(|| contract("data coherence needs a centroid store"))?;
        let (inner, outer, v, ni, no) = g.data_coherence(centroids, ctx.sets)?;
        report.l_d_inner = g.tape.value(inner).item();
        report.l_d_outer = g.tape.value(outer).item();
        report.l_d = g.tape.value(v).item();
        report.inner_terms = ni;
        report.outer_terms = no;
        Some(v)
    } else {
        None
    };

    let out = match term {
        LossTerm::Discrimination => lc.unwrap(),
        LossTerm::ModelCoherence => lm.unwrap(),
        LossTerm::DataCoherence => ld.unwrap(),
        LossTerm::Total => {
            let mut acc = lc.unwrap();
            if let Some(v) = lm {
                let w = g.tape.scale(v, cfg.alpha);
                acc = g.tape.add(acc, w)?;
            }
            if let Some(v) = ld {
                let w = g.tape.scale(v, cfg.beta);
                acc = g.tape.add(acc, w)?;
            }
            acc
        }
    };
    report.total = g.tape.value(out).item();
    Ok((g, out, report))
}

pub fn loss_intra_discrimination(model: &ModelState, batch: &BatchView<'_>, temperature: f64) -> Result<f64> {
    let mut g = BatchGraph::new(model, batch)?;
    let v = g.discrimination(model, temperature)?;
    Ok(g.tape.value(v).item())
}

pub fn loss_neighbor_model_coherence(
    model: &ModelState,
    teacher: &ModelSnapshot,
    batch: &BatchView<'_>,
    cfg: &LossConfig,
) -> Result<f64> {
    let mut g = BatchGraph::new(model, batch)?;
    let (v, _, _) = g.model_coherence(teacher, batch, cfg)?;
    Ok(g.tape.value(v).item())
}

/// Data-coherence values: inner sum, outer sum and `(inner + outer) / n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataCoherence {
    pub inner: f64,
    pub outer: f64,
    pub total: f64,
}

pub fn loss_inter_data_coherence(
    model: &ModelState,
    batch: &BatchView<'_>,
    centroids: &CentroidStore,
    sets: &ClassIndexSets,
) -> Result<DataCoherence> {
    let mut g = BatchGraph::new(model, batch)?;
    let (inner, outer, total, _, _) = g.data_coherence(centroids, sets)?;
    Ok(DataCoherence {
        inner: g.tape.value(inner).item(),
        outer: g.tape.value(outer).item(),
        total: g.tape.value(total).item(),
    })
}

pub fn total_loss(model: &ModelState, batch: &BatchView<'_>, ctx: LossContext<'_>) -> Result<LossReport> {
    Ok(build(LossTerm::Total, model, batch, ctx)?.2)
}

pub fn total_loss_and_gradients(
    model: &ModelState,
    batch: &BatchView<'_>,
    ctx: LossContext<'_>,
) -> Result<(LossReport, Gradients)> {
    let (g, out, report) = build(LossTerm::Total, model, batch, ctx)?;
    let grads = g.tape.backward(out)?;
    Ok((report, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Hyperparameters;
    use std::collections::BTreeMap;

    fn model(input_dim: usize, classes: u32) -> ModelState {
        let h = Hyperparameters { embed_dim: 4, hidden_dim: 6, seed: 5, ..Default::default() };
        let mut m = ModelState::new(input_dim, h).unwrap();
        m.register_classes(&(0..classes).collect()).unwrap();
        m
    }

    #[test]
    fn hardest_negative_examples() {
        let a = [0.0, 0.0];
        let c1 = [1.0, 0.0];
        assert_eq!(mine_hardest_negative(&a, &[(&c1, 2)], 1), Some(0));
        assert_eq!(mine_hardest_negative(&a, &[(&c1, 1)], 1), None);
        let far = [0.5f64.sqrt(), 0.0];
        let near = [0.1f64.sqrt(), 0.0];
        let same = [0.0, 0.0];
        assert_eq!(mine_hardest_negative(&a, &[(&same, 1), (&far, 2), (&near, 3)], 1), Some(2));
        // ties resolve to the lowest index
        assert_eq!(mine_hardest_negative(&a, &[(&near, 2), (&near, 3)], 1), Some(0));
    }

    #[test]
    fn hardest_negative_matches_exhaustive_scan() {
        use rand::Rng as _;
        let mut rng = crate::rng::derive(21, 0);
        for _ in 0..50 {
            let cands: Vec<(Vec<f64>, u32)> = (0..8)
                .map(|_| ((0..3).map(|_| rng.random_range(-1.0..1.0)).collect(), rng.random_range(0..3)))
                .collect();
            let anchor: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let view: Vec<(&[f64], u32)> = cands.iter().map(|(e, c)| (e.as_slice(), *c)).collect();
            let got = mine_hardest_negative(&anchor, &view, 0);
            let mut want = None;
            let mut best = f64::INFINITY;
            for (i, (e, c)) in cands.iter().enumerate() {
                let d: f64 = anchor.iter().zip(e).map(|(a, b)| (a - b).powi(2)).sum();
                if *c != 0 && d < best {
                    best = d;
                    want = Some(i);
                }
            }
            assert_eq!(got, want);
        }
    }

    #[test]
    fn unregistered_label_is_rejected() {
        let m = model(3, 2);
        let x = [0.1, 0.2, 0.3];
        let batch = BatchView { current: vec![(&x, 0), (&x, 7)], replayed: vec![] };
        assert!(matches!(loss_intra_discrimination(&m, &batch, 0.05), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn single_item_batch_is_rejected() {
        let m = model(3, 2);
        let x = [0.1, 0.2, 0.3];
        let batch = BatchView { current: vec![(&x, 0)], replayed: vec![] };
        assert!(loss_intra_discrimination(&m, &batch, 0.05).is_err());
    }

    #[test]
    fn missing_centroid_is_rejected() {
        let m = model(3, 3);
        let x = [0.1, 0.2, 0.3];
        let batch = BatchView { current: vec![(&x, 0)], replayed: vec![(&x, 1)] };
        let sets = ClassIndexSets { pi: BTreeSet::new(), gamma: [1].into() };
        let store = CentroidStore::default();
        assert!(loss_inter_data_coherence(&m, &batch, &store, &sets).is_err());
    }

    #[test]
    fn data_coherence_is_batch_order_invariant() {
        let m = model(3, 3);
        let xs: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64 * 0.3, -0.2, 0.7 - i as f64 * 0.1]).collect();
        let mut store = CentroidStore::default();
        let mut e = BTreeMap::new();
        e.insert(0, vec![vec![0.5, 0.5, 0.5, 0.5]]);
        e.insert(1, vec![vec![-0.5, 0.5, 0.5, -0.5]]);
        store.update_centroids(&e, 1).unwrap();
        let sets = ClassIndexSets { pi: [0].into(), gamma: [0, 1].into() };
        let fwd = BatchView {
            current: vec![(&xs[0], 0), (&xs[1], 2), (&xs[2], 0)],
            replayed: vec![(&xs[3], 1), (&xs[4], 0)],
        };
        let rev = BatchView {
            current: vec![(&xs[2], 0), (&xs[1], 2), (&xs[0], 0)],
            replayed: vec![(&xs[4], 0), (&xs[3], 1)],
        };
        let a = loss_inter_data_coherence(&m, &fwd, &store, &sets).unwrap();
        let b = loss_inter_data_coherence(&m, &rev, &store, &sets).unwrap();
        assert!((a.total - b.total).abs() < 1e-12);
    }
}
