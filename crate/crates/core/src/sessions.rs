//! Session-split protocols and validation-query sampling.
//!
//! * Disjoint: classes partitioned across sessions.
//! * Blurry: every class has a major session receiving `major_fraction` of
//!   its items; the rest is spread over the other sessions.
//! * General (S, C, M, L): S classes first, C fresh classes per later
//!   session, and M% of each later session's items drawn from held-back
//!   pools of previously seen classes.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{contract, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Setup {
    Disjoint { sessions: usize },
    Blurry { sessions: usize, major_fraction: f64 },
    General { initial: usize, increment: usize, old_percent: f64, sessions: usize },
}

impl Setup {
    pub fn name(&self) -> &'static str {
        match self {
            Setup::Disjoint { .. } => "disjoint",
            Setup::Blurry { .. } => "blurry",
            Setup::General { .. } => "general",
        }
    }

    pub fn num_sessions(&self) -> usize {
        match *self {
            Setup::Disjoint { sessions } | Setup::Blurry { sessions, .. } | Setup::General { sessions, .. } => sessions,
        }
    }

    pub fn is_blurry(&self) -> bool {
        matches!(self, Setup::Blurry { .. })
    }

    /// Builds the plan for this setup.
    pub fn split(&self, ds: &Dataset, rng: &mut Rng) -> Result<SessionPlan> {
        match *self {
            Setup::Disjoint { sessions } => disjoint_split(ds, sessions, rng),
            Setup::Blurry { sessions, major_fraction } => blurry_split(ds, sessions, major_fraction, rng),
            Setup::General { initial, increment, old_percent, sessions } => {
                general_split(ds, initial, increment, old_percent, sessions, rng)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    /// 1-based.
    pub index: usize,
    pub train_ids: Vec<u64>,
    /// Items withheld from this session's allocation as validation queries.
    pub validation_ids: Vec<u64>,
    /// Classes with at least one item in this session's allocation.
    pub classes: BTreeSet<u32>,
    /// Classes first seen in this session.
    pub new_classes: BTreeSet<u32>,
}

impl Session {
    fn new(index: usize) -> Self {
        Session {
            index,
            train_ids: Vec::new(),
            validation_ids: Vec::new(),
            classes: BTreeSet::new(),
            new_classes: BTreeSet::new(),
        }
    }

    /// Training items plus withheld validation items.
    pub fn allocation(&self) -> BTreeSet<u64> {
        self.train_ids.iter().chain(&self.validation_ids).copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionPlan {
    pub setup: Setup,
    pub sessions: Vec<Session>,
    /// All classes the plan covers.
    pub classes: BTreeSet<u32>,
    /// Validation queries grow with the sessions (disjoint, general) instead
    /// of being one fixed set (blurry).
    pub accumulate_validation: bool,
}

impl SessionPlan {
    fn new(setup: Setup, sessions: Vec<Session>) -> Self {
        let classes = sessions.iter().flat_map(|s| s.classes.iter().copied()).collect();
        let accumulate_validation = !setup.is_blurry();
        SessionPlan { setup, sessions, classes, accumulate_validation }
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    pub fn session(&self, index: usize) -> &Session {
        &self.sessions[index - 1]
    }

    /// Union of class sets of sessions `1..=index`.
    pub fn seen_classes(&self, index: usize) -> BTreeSet<u32> {
        self.sessions[..index].iter().flat_map(|s| s.classes.iter().copied()).collect()
    }

    /// Classes whose test items are queried after session `index`: all
    /// classes for blurry, the classes seen so far otherwise.
    pub fn query_classes(&self, index: usize) -> BTreeSet<u32> {
        if self.setup.is_blurry() {
            self.classes.clone()
        } else {
            self.seen_classes(index)
        }
    }

    /// Classes to add to the classifier head when session `index` starts.
    /// Blurry registers everything at session 1.
    pub fn classes_to_register(&self, index: usize) -> BTreeSet<u32> {
        if self.setup.is_blurry() {
            return if index == 1 { self.classes.clone() } else { BTreeSet::new() };
        }
        let before = self.seen_classes(index - 1);
        self.session(index).classes.difference(&before).copied().collect()
    }

    /// Validation queries visible while training session `index`.
    pub fn validation_queries(&self, index: usize) -> Vec<u64> {
        let upto = if self.accumulate_validation { index } else { self.sessions.len() };
        let mut out: Vec<u64> = self.sessions[..upto].iter().flat_map(|s| s.validation_ids.iter().copied()).collect();
        out.sort_unstable();
        out
    }

    pub fn total_train(&self) -> usize {
        self.sessions.iter().map(|s| s.train_ids.len()).sum()
    }
}

fn shuffled_classes(ds: &Dataset, rng: &mut Rng) -> Vec<u32> {
    let mut classes: Vec<u32> = ds.classes().into_iter().collect();
    classes.shuffle(rng);
    classes
}

/// Sizes of `n` items split into `parts` groups, remainder to the earliest.
fn even_sizes(n: usize, parts: usize) -> Vec<usize> {
    (0..parts).map(|i| n / parts + usize::from(i < n % parts)).collect()
}

pub fn disjoint_split(ds: &Dataset, num_sessions: usize, rng: &mut Rng) -> Result<SessionPlan> {
    let classes = shuffled_classes(ds, rng);
    if num_sessions == 0 || num_sessions > classes.len() {
        return Err(contract(format!(
            "cannot split {} classes into {num_sessions} disjoint sessions",
            classes.len()
        )));
    }
    let by_class = ds.train_ids_by_class();
    let mut sessions = Vec::with_capacity(num_sessions);
    let mut cursor = 0;
    for (i, size) in even_sizes(classes.len(), num_sessions).into_iter().enumerate() {
        let mut s = Session::new(i + 1);
        for &c in &classes[cursor..cursor + size] {
            s.classes.insert(c);
            s.new_classes.insert(c);
            s.train_ids.extend(&by_class[&c]);
        }
        s.train_ids.sort_unstable();
        cursor += size;
        sessions.push(s);
    }
    Ok(SessionPlan::new(Setup::Disjoint { sessions: num_sessions }, sessions))
}

pub fn blurry_split(ds: &Dataset, num_sessions: usize, major_fraction: f64, rng: &mut Rng) -> Result<SessionPlan> {
    if !(major_fraction > 0.0 && major_fraction <= 1.0) {
        return Err(contract(format!("major fraction must lie in (0, 1], got {major_fraction}")));
    }
    let classes = shuffled_classes(ds, rng);
    if num_sessions == 0 || num_sessions > classes.len() {
        return Err(contract(format!(
            "cannot give {num_sessions} sessions distinct major classes out of {}",
            classes.len()
        )));
    }
    let by_class = ds.train_ids_by_class();
    let mut sessions: Vec<Session> = (1..=num_sessions).map(Session::new).collect();
    let mut cursor = 0;
    for (major, size) in even_sizes(classes.len(), num_sessions).into_iter().enumerate() {
        for &c in &classes[cursor..cursor + size] {
            let mut ids = by_class[&c].clone();
            ids.shuffle(rng);
            let n = ids.len();
            let major_count = if num_sessions == 1 { n } else { (major_fraction * n as f64).round() as usize };
            let minor_total = n - major_count;
            let minors = num_sessions - 1;
            if major_count == 0 || (major_fraction < 1.0 && minors > 0 && minor_total < minors) {
                return Err(contract(format!(
                    "class {c} with {n} items cannot be split {major_fraction:.3}/{:.3} over {num_sessions} sessions",
                    1.0 - major_fraction
                )));
            }
            let mut rest = ids.split_off(major_count);
            sessions[major].train_ids.extend(&ids);
            sessions[major].classes.insert(c);
            if minors > 0 {
                let others = (0..num_sessions).filter(|&s| s != major);
                for (s, k) in others.zip(even_sizes(minor_total, minors)) {
                    let tail = rest.split_off(k);
                    if !rest.is_empty() {
                        sessions[s].classes.insert(c);
                    }
                    sessions[s].train_ids.extend(&rest);
                    rest = tail;
                }
            }
        }
        cursor += size;
    }
    let mut seen = BTreeSet::new();
    for s in sessions.iter_mut() {
        s.train_ids.sort_unstable();
        s.new_classes = s.classes.difference(&seen).copied().collect();
        seen.extend(s.classes.iter().copied());
    }
    Ok(SessionPlan::new(Setup::Blurry { sessions: num_sessions, major_fraction }, sessions))
}

/// Items a class keeps for its introduction session.
const MIN_INTRO_ITEMS: usize = 2;

pub fn general_split(
    ds: &Dataset,
    initial: usize,
    increment: usize,
    old_percent: f64,
    num_sessions: usize,
    rng: &mut Rng,
) -> Result<SessionPlan> {
    let setup = Setup::General { initial, increment, old_percent, sessions: num_sessions };
    if num_sessions == 0 || initial == 0 {
        return Err(contract("general setup needs S >= 1 and L >= 1"));
    }
    if !(0.0..100.0).contains(&old_percent) {
        return Err(contract(format!("old-class percentage must lie in [0, 100), got {old_percent}")));
    }
    let classes = shuffled_classes(ds, rng);
    let needed = initial + increment * (num_sessions - 1);
    if needed > classes.len() {
        return Err(contract(format!(
            "(S={initial}, C={increment}, L={num_sessions}) needs {needed} classes, dataset has {}",
            classes.len()
        )));
    }
    let by_class = ds.train_ids_by_class();
    let mut intro: Vec<Vec<u32>> = vec![classes[..initial].to_vec()];
    for i in 1..num_sessions {
        let start = initial + increment * (i - 1);
        intro.push(classes[start..start + increment].to_vec());
    }
    let size = |c: u32| by_class[&c].len();

    // Later sessions are resolved first: a session's new-item count depends
    // on how much of its classes the sessions after it hold back.
    let ratio = old_percent / (100.0 - old_percent);
    let mut held: HashMap<u32, usize> = HashMap::new();
    let mut draws: BTreeMap<u32, Vec<(usize, usize)>> = BTreeMap::new();
    for s in (1..num_sessions).rev() {
        let new_items: usize = intro[s].iter().map(|&c| size(c) - held.get(&c).copied().unwrap_or(0)).sum();
        let mut demand = (new_items as f64 * ratio).round() as usize;
        let eligible: Vec<u32> = intro[..s].iter().flatten().copied().collect();
        let mut taken: Vec<usize> = vec![0; eligible.len()];
        while demand > 0 {
            let mut progressed = false;
            for (k, &c) in eligible.iter().enumerate() {
                if demand == 0 {
                    break;
                }
                let h = held.entry(c).or_insert(0);
                if size(c) - *h > MIN_INTRO_ITEMS {
                    *h += 1;
                    taken[k] += 1;
                    demand -= 1;
                    progressed = true;
                }
            }
            if !progressed {
                return Err(contract(format!(
                    "session {}: old-class pools cannot supply {demand} more items",
                    s + 1
                )));
            }
        }
        for (k, &c) in eligible.iter().enumerate() {
            if taken[k] > 0 {
                draws.entry(c).or_default().push((s, taken[k]));
            }
        }
    }

    let mut sessions: Vec<Session> = (1..=num_sessions).map(Session::new).collect();
    for (s, cls) in intro.iter().enumerate() {
        for &c in cls {
            let ids = &by_class[&c];
            let keep = ids.len() - held.get(&c).copied().unwrap_or(0);
            sessions[s].train_ids.extend(&ids[..keep]);
            sessions[s].classes.insert(c);
            sessions[s].new_classes.insert(c);
            let mut cursor = keep;
            let mut later = draws.get(&c).cloned().unwrap_or_default();
            later.sort_unstable();
            for (t, k) in later {
                sessions[t].train_ids.extend(&ids[cursor..cursor + k]);
                sessions[t].classes.insert(c);
                cursor += k;
            }
            debug_assert_eq!(cursor, ids.len());
        }
    }
    for s in sessions.iter_mut() {
        s.train_ids.sort_unstable();
    }
    Ok(SessionPlan::new(setup, sessions))
}

/// How many validation queries to withhold per class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationSpec {
    Fraction(f64),
    PerClass(usize),
}

impl ValidationSpec {
    fn count(self, class_size: usize) -> usize {
        match self {
            ValidationSpec::Fraction(f) => (f * class_size as f64).round() as usize,
            ValidationSpec::PerClass(n) => n,
        }
    }
}

/// Withholds per-class validation queries from training. With `accumulate`
/// every session draws from its own allocation; otherwise one fixed portion
/// is drawn per class from the whole training set.
pub fn sample_validation_queries(
    mut plan: SessionPlan,
    spec: ValidationSpec,
    accumulate: bool,
    ds: &Dataset,
    rng: &mut Rng,
) -> Result<SessionPlan> {
    if let ValidationSpec::Fraction(f) = spec {
        if !(0.0..1.0).contains(&f) {
            return Err(contract(format!("validation fraction must lie in [0, 1), got {f}")));
        }
    }
    let class_of: HashMap<u64, u32> = ds.items.iter().map(|i| (i.id, i.class)).collect();
    let pick = |members: &[u64], rng: &mut Rng, what: &str, class: u32| -> Result<Vec<u64>> {
        let k = spec.count(members.len());
        if k == 0 {
            return Ok(Vec::new());
        }
        if k >= members.len() {
            return Err(contract(format!(
                "class {class} {what} has {} items, cannot withhold {k} and keep one for training",
                members.len()
            )));
        }
        Ok(index::sample(rng, members.len(), k).into_iter().map(|i| members[i]).collect())
    };

    let mut withheld: HashSet<u64> = HashSet::new();
    if accumulate {
        for s in plan.sessions.iter_mut() {
            let mut by_class: BTreeMap<u32, Vec<u64>> = BTreeMap::new();
            for &id in &s.train_ids {
                by_class.entry(class_of[&id]).or_default().push(id);
            }
            for (c, members) in by_class {
                let chosen = pick(&members, rng, &format!("in session {}", s.index), c)?;
                s.validation_ids.extend(&chosen);
                withheld.extend(chosen);
            }
        }
    } else {
        let mut by_class: BTreeMap<u32, Vec<u64>> = BTreeMap::new();
        for s in &plan.sessions {
            for &id in &s.train_ids {
                by_class.entry(class_of[&id]).or_default().push(id);
            }
        }
        for (c, mut members) in by_class {
            members.sort_unstable();
            withheld.extend(pick(&members, rng, "in the training set", c)?);
        }
        for s in plan.sessions.iter_mut() {
            s.validation_ids.extend(s.train_ids.iter().filter(|id| withheld.contains(id)));
        }
    }
    for s in plan.sessions.iter_mut() {
        s.train_ids.retain(|id| !withheld.contains(id));
        s.validation_ids.sort_unstable();
    }
    plan.accumulate_validation = accumulate;
    Ok(plan)
}
