use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::time::Instant;

use rand::seq::{index, SliceRandom};

use super::config::{LossToggles, Method, RunConfig};
use super::report::{LossSummary, RunReport, SessionMetrics};
use crate::checkpoint::Checkpoint;
use crate::dataset::{Dataset, Item};
use crate::error::{contract, Result};
use crate::gallery::{self, GalleryItem, GallerySet, Query};
use crate::losses::{self, BatchView, ClassIndexSets, LossConfig, LossContext};
use crate::model::{ModelSnapshot, ModelState, Sgd};
use crate::replay::{mine_exemplars, CentroidStore, MiningItem, ReplayBuffer};
use crate::rng;
use crate::sessions::{sample_validation_queries, SessionPlan};
use crate::tensor::Tensor;

pub const RECALL_KS: [usize; 3] = [1, 2, 4];

/// Mutable state carried from one session to the next.
#[derive(Debug, Clone)]
pub struct RunState {
    pub model: ModelState,
    pub replay: ReplayBuffer,
    pub centroids: CentroidStore,
    pub gallery: GallerySet,
    pub completed_sessions: usize,
}

impl RunState {
    pub fn new(model: ModelState, budget: usize, cfg: &RunConfig) -> Self {
        RunState {
            model,
            replay: ReplayBuffer::new(budget),
            centroids: CentroidStore::new(cfg.centroid_divisor),
            gallery: GallerySet::new(),
            completed_sessions: 0,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            self.completed_sessions,
            self.model.clone(),
            self.replay.clone(),
            self.centroids.clone(),
            self.gallery.clone(),
        )
    }
}

/// Read-only inputs of a run.
pub struct SessionContext<'a> {
    pub dataset: &'a Dataset,
    pub index: HashMap<u64, &'a Item>,
    pub plan: &'a SessionPlan,
    pub config: &'a RunConfig,
}

impl<'a> SessionContext<'a> {
    pub fn new(dataset: &'a Dataset, plan: &'a SessionPlan, config: &'a RunConfig) -> Self {
        SessionContext { dataset, index: dataset.index(), plan, config }
    }

    fn item(&self, id: u64) -> &'a Item {
        self.index[&id]
    }

    fn gallery_items(&self, ids: &[u64]) -> Vec<GalleryItem<'a>> {
        ids.iter()
            .map(|&id| {
                let it = self.item(id);
                GalleryItem { item_id: id, class: it.class, x: &it.x }
            })
            .collect()
    }

    fn test_items(&self, classes: &BTreeSet<u32>) -> Vec<&'a Item> {
        self.dataset.test().filter(|i| classes.contains(&i.class)).collect()
    }
}

fn embed_items(model: &ModelState, items: &[&Item]) -> Result<Tensor> {
    let rows: Vec<&[f64]> = items.iter().map(|i| i.x.as_slice()).collect();
    model.embed_batch(&Tensor::from_rows(&rows)?)
}

/// Recall@{1,2,4} of `queries` (embedded by `model`) against `records`.
fn evaluate_recall(
    model: &ModelState,
    records: &[gallery::EmbeddingRecord],
    queries: &[&Item],
) -> Result<Vec<f64>> {
    let emb = embed_items(model, queries)?;
    let qs: Vec<Query> =
        emb.rows().zip(queries).map(|(e, it)| Query { embedding: e, class: it.class }).collect();
    gallery::recall_at_ks(records, &qs, &RECALL_KS)
}

fn accuracy(model: &ModelState, items: &[&Item]) -> Result<f64> {
    let pairs: Vec<(&[f64], u32)> = items.iter().map(|i| (i.x.as_slice(), i.class)).collect();
    gallery::classification_accuracy(model, &pairs)
}

/// Running means of the loss report over an epoch.
#[derive(Default)]
struct EpochAccumulator {
    sum: LossSummary,
    batches: usize,
}

impl EpochAccumulator {
    fn add(&mut self, r: &losses::LossReport) {
        self.sum.total += r.total;
        self.sum.l_c += r.l_c;
        self.sum.l_m += r.l_m;
        self.sum.l_d += r.l_d;
        self.batches += 1;
    }

    fn finish(self, epoch: usize, validation_r1: Option<f64>) -> LossSummary {
        let n = self.batches.max(1) as f64;
        LossSummary {
            epoch,
            total: self.sum.total / n,
            l_c: self.sum.l_c / n,
            l_m: self.sum.l_m / n,
            l_d: self.sum.l_d / n,
            batches: self.batches,
            validation_r1,
        }
    }
}

struct EpochPlan<'a> {
    train: &'a [u64],
    toggles: LossToggles,
    loss_cfg: LossConfig,
    teacher: Option<&'a ModelSnapshot>,
    sets: &'a ClassIndexSets,
    replay_slots: usize,
}

/// One pass over `train` in shuffled mini-batches, each topped up with
/// replayed exemplars.
fn run_epoch(
    ctx: &SessionContext<'_>,
    state: &mut RunState,
    opt: &mut Sgd,
    ep: &EpochPlan<'_>,
    rng: &mut rng::Rng,
) -> Result<EpochAccumulator> {
    let n = ctx.config.hyper.batch_size;
    let current_slots = n - ep.replay_slots;
    let mut order: Vec<u64> = ep.train.to_vec();
    order.shuffle(rng);
    let mut acc = EpochAccumulator::default();
    let replay_entries = state.replay.entries().to_vec();
    for chunk in order.chunks(current_slots) {
        let current: Vec<(&[f64], u32)> = chunk
            .iter()
            .map(|&id| {
                let it = ctx.item(id);
                (it.x.as_slice(), it.class)
            })
            .collect();
        let take = ep.replay_slots.min(replay_entries.len());
        let replayed: Vec<(&[f64], u32)> = if take > 0 {
            index::sample(rng, replay_entries.len(), take)
                .into_iter()
                .map(|i| (replay_entries[i].x.as_slice(), replay_entries[i].class))
                .collect()
        } else {
            Vec::new()
        };
        let batch = BatchView { current, replayed };
        if batch.len() < 2 {
            continue;
        }
        let lctx = LossContext {
            teacher: ep.teacher,
            centroids: if ep.toggles.use_d { Some(&state.centroids) } else { None },
            sets: ep.sets,
            config: &ep.loss_cfg,
        };
        let (report, grads) = losses::total_loss_and_gradients(&state.model, &batch, lctx)?;
        opt.step(&mut state.model, &grads);
        acc.add(&report);
    }
    Ok(acc)
}

/// Trains session `j` (1-based) and freezes its gallery block.
pub fn train_session(ctx: &SessionContext<'_>, state: &mut RunState, j: usize) -> Result<SessionMetrics> {
    if j != state.completed_sessions + 1 || j > ctx.plan.len() {
        return Err(contract(format!(
            "session {j} requested after {} completed sessions of {}",
            state.completed_sessions,
            ctx.plan.len()
        )));
    }
    let cfg = ctx.config;
    let hyper = &cfg.hyper;
    let toggles = cfg.effective_toggles();
    let session = ctx.plan.session(j);

    let teacher = (j >= 2).then(|| state.model.snapshot(j - 1));
    state.model.register_classes(&ctx.plan.classes_to_register(j))?;

    let previous = ctx.plan.seen_classes(j - 1);
    let sets = ClassIndexSets::new(&previous, &session.classes);
    let mut loss_cfg = LossConfig::from_hyper(hyper);
    loss_cfg.alpha = if toggles.use_m { hyper.alpha } else { 0.0 };
    loss_cfg.beta = if toggles.use_d { hyper.beta } else { 0.0 };
    loss_cfg.negatives_include_replayed = cfg.negatives_include_replayed;
    loss_cfg.anchors_include_replayed = cfg.anchors_include_replayed;

    let replay_slots = if toggles.use_replay_data && !state.replay.is_empty() {
        ((hyper.batch_size as f64 * cfg.replay_batch_fraction).round() as usize).min(hyper.batch_size - 1)
    } else {
        0
    };
    let ep = EpochPlan {
        train: &session.train_ids,
        toggles,
        loss_cfg,
        teacher: teacher.as_ref(),
        sets: &sets,
        replay_slots,
    };

    let val_items: Vec<&Item> = ctx.plan.validation_queries(j).into_iter().map(|id| ctx.item(id)).collect();
    let session_gallery = ctx.gallery_items(&session.train_ids);

    let mut opt = Sgd::new(hyper);
    let mut best: Option<(f64, usize, ModelState)> = None;
    let mut epochs = Vec::with_capacity(hyper.epochs_per_session);
    for epoch in 1..=hyper.epochs_per_session {
        let mut rng = rng::derive_indexed(cfg.seed, rng::stream::SHUFFLE, (j * 100_000 + epoch) as u64);
        let acc = run_epoch(ctx, state, &mut opt, &ep, &mut rng)?;
        let val_r1 = if val_items.is_empty() {
            None
        } else {
            let mut candidate = state.gallery.clone();
            candidate.extract_and_append(&state.model.net, &session_gallery, j)?;
            let r1 = evaluate_recall(&state.model, candidate.records(), &val_items)?[0];
            if best.as_ref().is_none_or(|(b, _, _)| r1 > *b) {
                best = Some((r1, epoch, state.model.clone()));
            }
            Some(r1)
        };
        epochs.push(acc.finish(epoch, val_r1));
    }
    let (selected_epoch, validation_r1) = match best {
        Some((r1, epoch, model)) => {
            state.model = model;
            (epoch, Some(r1))
        }
        None => (hyper.epochs_per_session, None),
    };

    state.gallery.extract_and_append(&state.model.net, &session_gallery, j)?;

    let seen_now = ctx.plan.seen_classes(j);
    if toggles.use_replay_data && state.replay.budget > 0 {
        let quota = state.replay.quota(seen_now.len());
        let items: Vec<MiningItem> =
            session_gallery.iter().map(|g| MiningItem { item_id: g.item_id, x: g.x, class: g.class }).collect();
        let mut rng = rng::derive_indexed(cfg.seed, rng::stream::EXEMPLARS, j as u64);
        let exemplars = mine_exemplars(&state.model.net, &items, quota, cfg.candidate_pool_factor, j, &mut rng)?;
        state.replay.rebalance(exemplars, seen_now.len());
    }

    let mut block: BTreeMap<u32, Vec<Vec<f64>>> = BTreeMap::new();
    for r in state.gallery.block_records(j).unwrap_or(&[]) {
        block.entry(r.class).or_default().push(r.embedding.clone());
    }
    state.centroids.update_centroids(&block, j)?;
    state.completed_sessions = j;

    let queries = ctx.test_items(&ctx.plan.query_classes(j));
    let recalls = evaluate_recall(&state.model, state.gallery.records(), &queries)?;
    Ok(SessionMetrics {
        session: j,
        recall: recalls,
        accuracy: accuracy(&state.model, &queries)?,
        selected_epoch,
        validation_r1,
        train_items: session.train_ids.len(),
        validation_items: val_items.len(),
        test_queries: queries.len(),
        gallery_size: state.gallery.len(),
        replay_size: state.replay.len(),
        epochs,
    })
}

/// Upper bound: one model on every training item, gallery re-extracted with
/// it for every session's evaluation.
fn run_joint(ctx: &SessionContext<'_>, state: &mut RunState) -> Result<Vec<SessionMetrics>> {
    let cfg = ctx.config;
    let hyper = &cfg.hyper;
    let plan = ctx.plan;
    state.model.register_classes(&plan.classes)?;
    let all_train: Vec<u64> = plan.sessions.iter().flat_map(|s| s.train_ids.iter().copied()).collect();
    let val_items: Vec<&Item> = plan.validation_queries(plan.len()).into_iter().map(|id| ctx.item(id)).collect();
    let all_gallery = ctx.gallery_items(&all_train);
    let sets = ClassIndexSets::default();
    let mut loss_cfg = LossConfig::from_hyper(hyper);
    loss_cfg.alpha = 0.0;
    loss_cfg.beta = 0.0;
    let ep = EpochPlan {
        train: &all_train,
        toggles: LossToggles::NONE,
        loss_cfg,
        teacher: None,
        sets: &sets,
        replay_slots: 0,
    };
    let mut opt = Sgd::new(hyper);
    let mut best: Option<(f64, usize, ModelState)> = None;
    let mut epochs = Vec::new();
    for epoch in 1..=hyper.epochs_per_session {
        let mut rng = rng::derive_indexed(cfg.seed, rng::stream::SHUFFLE, epoch as u64);
        let acc = run_epoch(ctx, state, &mut opt, &ep, &mut rng)?;
        let val_r1 = if val_items.is_empty() {
            None
        } else {
            let mut g = GallerySet::new();
            g.extract_and_append(&state.model.net, &all_gallery, 1)?;
            let r1 = evaluate_recall(&state.model, g.records(), &val_items)?[0];
            if best.as_ref().is_none_or(|(b, _, _)| r1 > *b) {
                best = Some((r1, epoch, state.model.clone()));
            }
            Some(r1)
        };
        epochs.push(acc.finish(epoch, val_r1));
    }
    let (selected_epoch, validation_r1) = match best {
        Some((r1, epoch, model)) => {
            state.model = model;
            (epoch, Some(r1))
        }
        None => (hyper.epochs_per_session, None),
    };

    let mut out = Vec::with_capacity(plan.len());
    for s in &plan.sessions {
        state.gallery.extract_and_append(&state.model.net, &ctx.gallery_items(&s.train_ids), s.index)?;
        let mut block: BTreeMap<u32, Vec<Vec<f64>>> = BTreeMap::new();
        for r in state.gallery.block_records(s.index).unwrap_or(&[]) {
            block.entry(r.class).or_default().push(r.embedding.clone());
        }
        state.centroids.update_centroids(&block, s.index)?;
        state.completed_sessions = s.index;
        let queries = ctx.test_items(&plan.query_classes(s.index));
        out.push(SessionMetrics {
            session: s.index,
            recall: evaluate_recall(&state.model, state.gallery.records(), &queries)?,
            accuracy: accuracy(&state.model, &queries)?,
            selected_epoch,
            validation_r1,
            train_items: s.train_ids.len(),
            validation_items: val_items.len(),
            test_queries: queries.len(),
            gallery_size: state.gallery.len(),
            replay_size: 0,
            epochs: if s.index == plan.len() { std::mem::take(&mut epochs) } else { Vec::new() },
        });
    }
    Ok(out)
}

/// Builds the plan and runs every session. Returns the report together with
/// the final state.
pub fn run_experiment_with_state(config: &RunConfig) -> Result<(RunReport, RunState)> {
    config.validate()?;
    let started = Instant::now();
    let dataset = config.dataset.load(config.seed)?;
    let mut split_rng = rng::derive(config.seed, rng::stream::SPLIT);
    let plan = config.setup.split(&dataset, &mut split_rng)?;
    let mut val_rng = rng::derive(config.seed, rng::stream::VALIDATION);
    let accumulate = !config.setup.is_blurry();
    let plan = sample_validation_queries(plan, config.validation, accumulate, &dataset, &mut val_rng)?;
    if let Some(s) = plan.sessions.iter().find(|s| s.train_ids.is_empty()) {
        return Err(contract(format!("session {} has no training items", s.index)));
    }

    let mut hyper = config.hyper.clone();
    hyper.seed = config.seed;
    let model = ModelState::new(dataset.dim, hyper)?;
    let budget = config.replay_budget.resolve(plan.total_train());
    let mut state = RunState::new(model, budget, config);
    let ctx = SessionContext::new(&dataset, &plan, config);

    let sessions = match config.method {
        Method::Joint => run_joint(&ctx, &mut state)?,
        Method::Cvs | Method::Finetune => {
            let mut out = Vec::with_capacity(plan.len());
            for j in 1..=plan.len() {
                out.push(train_session(&ctx, &mut state, j)?);
            }
            out
        }
    };
    state.gallery.audit()?;
    let report = RunReport::new(config, &plan, sessions, &state.gallery, started.elapsed().as_secs_f64())?;
    Ok((report, state))
}

pub fn run_experiment(config: &RunConfig) -> Result<RunReport> {
    Ok(run_experiment_with_state(config)?.0)
}
