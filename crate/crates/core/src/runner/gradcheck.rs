use std::collections::{BTreeMap, BTreeSet};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::losses::{build, BatchView, ClassIndexSets, LossConfig, LossContext, LossTerm};
use crate::model::{Hyperparameters, ModelSnapshot, ModelState, PARAM_NAMES};
use crate::replay::{CentroidDivisor, CentroidStore};
use crate::rng::{self, Rng};
use crate::tape::finite_difference;
use crate::tensor::{squared_distance, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckConfig {
    pub instances: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub max_embed_dim: usize,
    pub max_batch: usize,
    /// Distance from any non-differentiable point below which an instance
    /// is redrawn.
    pub kink_margin: f64,
    /// Gradient norms below `norm_floor · max(1, |loss|)` are compared in
    /// absolute terms: central-difference round-off grows with |loss|.
    pub norm_floor: f64,
    /// Weights used for the total.
    pub alpha: f64,
    pub beta: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            instances: 100,
            seed: 0,
            step: 1e-5,
            tolerance: 1e-4,
            max_embed_dim: 8,
            max_batch: 6,
            kink_margin: 1e-4,
            norm_floor: 1e-5,
            alpha: 10.0,
            beta: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermCheck {
    pub term: String,
    pub max_relative_error: f64,
    /// Parameter tensor and instance where the maximum occurred.
    pub worst_param: String,
    pub worst_instance: usize,
    pub tensors_checked: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub instances: usize,
    pub redrawn: usize,
    pub tolerance: f64,
    pub terms: Vec<TermCheck>,
    pub wall_seconds: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.terms.iter().all(|t| t.max_relative_error < self.tolerance)
    }
}

struct Instance {
    model: ModelState,
    teacher: ModelSnapshot,
    centroids: CentroidStore,
    sets: ClassIndexSets,
    current: Vec<(Vec<f64>, u32)>,
    replayed: Vec<(Vec<f64>, u32)>,
    loss: LossConfig,
}

impl Instance {
    fn batch(&self) -> BatchView<'_> {
        BatchView {
            current: self.current.iter().map(|(x, c)| (x.as_slice(), *c)).collect(),
            replayed: self.replayed.iter().map(|(x, c)| (x.as_slice(), *c)).collect(),
        }
    }

    fn ctx(&self) -> LossContext<'_> {
        LossContext { teacher: Some(&self.teacher), centroids: Some(&self.centroids), sets: &self.sets, config: &self.loss }
    }
}

fn random_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn draw_instance(rng: &mut Rng, cfg: &GradCheckConfig) -> Result<Instance> {
    let input_dim = rng.random_range(2..=6);
    let embed_dim = rng.random_range(2..=cfg.max_embed_dim.max(2));
    let hyper = Hyperparameters {
        embed_dim,
        hidden_dim: rng.random_range(3..=8),
        seed: rng.random(),
        ..Default::default()
    };
    let num_classes: u32 = rng.random_range(2..=4);
    let all: BTreeSet<u32> = (0..num_classes).collect();
    let mut model = ModelState::new(input_dim, hyper.clone())?;
    model.register_classes(&all)?;
    // Zero biases let the normalized output ignore the scale of a lone
    // active hidden unit, which leaves gradients that are pure round-off.
    for b in [&mut model.net.b1, &mut model.net.b2] {
        for v in b.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    let teacher_hyper = Hyperparameters { seed: rng.random(), ..hyper };
    let teacher = ModelState::new(input_dim, teacher_hyper)?.snapshot(1);

    let previous: BTreeSet<u32> = (0..num_classes.div_ceil(2)).collect();
    let current: BTreeSet<u32> = all.iter().copied().filter(|_| rng.random_bool(0.7)).collect();
    let current = if current.is_empty() { all.clone() } else { current };
    let mut block = BTreeMap::new();
    for &c in &previous {
        block.insert(c, vec![random_vec(rng, embed_dim), random_vec(rng, embed_dim)]);
    }
    let mut centroids = CentroidStore::new(CentroidDivisor::ContributingSessions);
    centroids.update_centroids(&block, 1)?;

    let batch = rng.random_range(2..=cfg.max_batch.max(2));
    let replayed_n = rng.random_range(0..batch);
    let cur: Vec<u32> = current.iter().copied().collect();
    let prev: Vec<u32> = previous.iter().copied().collect();
    let current_items =
        (0..batch - replayed_n).map(|_| (random_vec(rng, input_dim), cur[rng.random_range(0..cur.len())])).collect();
    let replayed_items =
        (0..replayed_n).map(|_| (random_vec(rng, input_dim), prev[rng.random_range(0..prev.len())])).collect();
    Ok(Instance {
        model,
        teacher,
        centroids,
        sets: ClassIndexSets::new(&previous, &current),
        current: current_items,
        replayed: replayed_items,
        loss: LossConfig { alpha: cfg.alpha, beta: cfg.beta, ..LossConfig::default() },
    })
}

/// True when a step of size `margin` could cross a ReLU boundary, a hinge
/// boundary or change which negative is mined.
fn near_kink(inst: &Instance, margin: f64) -> Result<bool> {
    let batch = inst.batch();
    let xs = batch.inputs()?;
    if inst.model.net.hidden_preactivation(&xs)?.data().iter().any(|z| z.abs() < margin) {
        return Ok(true);
    }
    let student = inst.model.embed_batch(&xs)?;
    let teacher = inst.teacher.embed_batch(&xs)?;
    let classes = batch.classes();
    for (a, s) in student.rows().enumerate() {
        let mut dists: Vec<f64> = teacher
            .rows()
            .zip(&classes)
            .filter(|(_, &c)| c != classes[a])
            .map(|(t, _)| squared_distance(s, t))
            .collect();
        if dists.is_empty() {
            continue;
        }
        dists.sort_by(f64::total_cmp);
        if dists.len() > 1 && dists[1] - dists[0] < margin {
            return Ok(true);
        }
        let hinge = squared_distance(s, teacher.row(a)) - dists[0] + inst.loss.margin;
        if hinge.abs() < margin {
            return Ok(true);
        }
    }
    Ok(false)
}

fn loss_value(term: LossTerm, inst: &Instance, model: &ModelState) -> f64 {
    match build(term, model, &inst.batch(), inst.ctx()) {
        Ok((g, out, _)) => g.tape.value(out).item(),
        Err(_) => f64::NAN,
    }
}

fn tensor_relative_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    let diff: f64 = analytic.data().iter().zip(numeric.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let na = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb = numeric.data().iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

/// Compares tape gradients with central differences for each loss term and
/// the weighted total, on randomly drawn small instances.
pub fn grad_check_suite(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if cfg.max_embed_dim < 2 || cfg.max_batch < 2 || cfg.instances == 0 {
        return Err(contract("gradient check needs embed_dim >= 2, batch >= 2 and at least one instance"));
    }
    let started = std::time::Instant::now();
    let mut rng = rng::derive(cfg.seed, rng::stream::GRADCHECK);
    let mut terms: Vec<TermCheck> = LossTerm::ALL
        .iter()
        .map(|t| TermCheck {
            term: t.name().to_string(),
            max_relative_error: 0.0,
            worst_param: String::new(),
            worst_instance: 0,
            tensors_checked: 0,
        })
        .collect();
    let mut redrawn = 0;
    for instance in 0..cfg.instances {
        let inst = loop {
            let inst = draw_instance(&mut rng, cfg)?;
            if !near_kink(&inst, cfg.kink_margin)? {
                break inst;
            }
            redrawn += 1;
        };
        for (ti, &term) in LossTerm::ALL.iter().enumerate() {
            let (g, out, _) = build(term, &inst.model, &inst.batch(), inst.ctx())?;
            let floor = cfg.norm_floor * g.tape.value(out).item().abs().max(1.0);
            let grads = g.tape.backward(out)?;
            for p in 0..PARAM_NAMES.len() {
                let base = inst.model.params()[p].clone();
                let analytic = grads.get(crate::tape::ParamId(p)).clone();
                let mut probe_model = inst.model.clone();
                let numeric = finite_difference(&base, cfg.step, |probe| {
                    *probe_model.params_mut()[p] = probe.clone();
                    loss_value(term, &inst, &probe_model)
                });
                let err = tensor_relative_error(&analytic, &numeric, floor);
                let tc = &mut terms[ti];
                tc.tensors_checked += 1;
                if !(err <= tc.max_relative_error) {
                    tc.max_relative_error = err;
                    tc.worst_param = PARAM_NAMES[p].to_string();
                    tc.worst_instance = instance;
                }
            }
        }
    }
    Ok(GradCheckReport {
        instances: cfg.instances,
        redrawn,
        tolerance: cfg.tolerance,
        terms,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}
