//! Feature-vector datasets: synthetic generator, binary container and CSV
//! import.
//!
//! Binary layout (little-endian):
//!
//! ```text
//! magic  "CEDS"        4 bytes
//! version u32          = 1
//! num_items u64
//! dim u32
//! num_classes u32
//! records × num_items:
//!     id u64, class u32, split u8 (0 train, 1 test), features f32 × dim
//! ```

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::rng::{self, Rng};

pub const MAGIC: &[u8; 4] = b"CEDS";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub id: u64,
    pub class: u32,
    pub split: Split,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub items: Vec<Item>,
}

impl Dataset {
    /// Checks unique ids, consistent dims and that every class has at least
    /// one train and one test item.
    pub fn new(dim: usize, items: Vec<Item>) -> Result<Self> {
        let mut ids = HashSet::with_capacity(items.len());
        let mut seen: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
        for it in &items {
            if !ids.insert(it.id) {
                return Err(contract(format!("duplicate item id {}", it.id)));
            }
            if it.x.len() != dim {
                return Err(crate::error::dimension(format!(
                    "item {} has {} features, dataset dim is {dim}",
                    it.id,
                    it.x.len()
                )));
            }
            let e = seen.entry(it.class).or_default();
            match it.split {
                Split::Train => e.0 += 1,
                Split::Test => e.1 += 1,
            }
        }
        if let Some((c, _)) = seen.iter().find(|(_, (tr, te))| *tr == 0 || *te == 0) {
            return Err(contract(format!("class {c} needs at least one train and one test item")));
        }
        Ok(Dataset { dim, items })
    }

    pub fn classes(&self) -> BTreeSet<u32> {
        self.items.iter().map(|i| i.class).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.classes().len()
    }

    pub fn train(&self) -> impl Iterator<Item = &Item> {
        self.items.iter().filter(|i| i.split == Split::Train)
    }

    pub fn test(&self) -> impl Iterator<Item = &Item> {
        self.items.iter().filter(|i| i.split == Split::Test)
    }

    /// Train item ids per class, ascending.
    pub fn train_ids_by_class(&self) -> BTreeMap<u32, Vec<u64>> {
        let mut out: BTreeMap<u32, Vec<u64>> = BTreeMap::new();
        for it in self.train() {
            out.entry(it.class).or_default().push(it.id);
        }
        for v in out.values_mut() {
            v.sort_unstable();
        }
        out
    }

    pub fn index(&self) -> std::collections::HashMap<u64, &Item> {
        self.items.iter().map(|i| (i.id, i)).collect()
    }

    pub fn write_binary(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.items.len() as u64).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.num_classes() as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(13 + 4 * self.dim);
        for it in &self.items {
            buf.clear();
            buf.extend_from_slice(&it.id.to_le_bytes());
            buf.extend_from_slice(&it.class.to_le_bytes());
            buf.push(match it.split {
                Split::Train => 0,
                Split::Test => 1,
            });
            for v in &it.x {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_binary(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad dataset magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let num_items = read_u64(&mut r)? as usize;
        let dim = read_u32(&mut r)? as usize;
        let num_classes = read_u32(&mut r)? as usize;
        let mut items = Vec::with_capacity(num_items.min(1 << 24));
        let mut feat = vec![0u8; 4 * dim];
        for _ in 0..num_items {
            let id = read_u64(&mut r)?;
            let class = read_u32(&mut r)?;
            let mut split = [0u8; 1];
            r.read_exact(&mut split)?;
            let split = match split[0] {
                0 => Split::Train,
                1 => Split::Test,
                other => return Err(Error::Format(format!("item {id}: bad split tag {other}"))),
            };
            r.read_exact(&mut feat)?;
            let x = feat
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            items.push(Item { id, class, split, x });
        }
        let ds = Dataset::new(dim, items)?;
        if ds.num_classes() != num_classes {
            return Err(Error::Format(format!(
                "header says {num_classes} classes, records hold {}",
                ds.num_classes()
            )));
        }
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_binary(f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_binary(f)
    }

    /// Reads `id,class,f0,...,fD` rows (an optional header row is skipped)
    /// and assigns an 80/20 train/test split per class from `seed`.
    pub fn read_csv(r: impl Read, seed: u64) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(r);
        let mut rows: Vec<(u64, u32, Vec<f64>)> = Vec::new();
        for (line, rec) in reader.records().enumerate() {
            let rec = rec?;
            let Ok(id) = rec.get(0).unwrap_or("").parse::<u64>() else {
                if line == 0 {
                    continue;
                }
                return Err(Error::Format(format!("csv line {}: bad id", line + 1)));
            };
            let class = rec
                .get(1)
                .and_then(|s| s.parse::<u32>().ok())
                .ok_or_else(|| Error::Format(format!("csv line {}: bad class", line + 1)))?;
            let x = rec
                .iter()
                .skip(2)
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Format(format!("csv line {}: {e}", line + 1)))?;
            rows.push((id, class, x));
        }
        let dim = rows.first().map_or(0, |r| r.2.len());
        let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, r) in rows.iter().enumerate() {
            by_class.entry(r.1).or_default().push(i);
        }
        let mut split = vec![Split::Train; rows.len()];
        let mut rng = rng::derive(seed, rng::stream::DATASET);
        for members in by_class.values() {
            let mut order = members.clone();
            order.shuffle(&mut rng);
            for &i in order.iter().take(test_count(members.len())) {
                split[i] = Split::Test;
            }
        }
        let items = rows
            .into_iter()
            .zip(split)
            .map(|((id, class, x), split)| Item { id, class, split, x })
            .collect();
        Dataset::new(dim, items)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// 20% of a class goes to test, at least one item each side.
fn test_count(n: usize) -> usize {
    ((n as f64 * 0.2).round() as usize).clamp(1, n.saturating_sub(1).max(1))
}

/// Parameters of the Gaussian-cluster generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub per_class: usize,
    /// Within-class standard deviation per coordinate.
    pub spread: f64,
    /// Mean shift per phase along a class-specific direction.
    pub drift: f64,
    /// Number of drift phases; items of a class are spread evenly over them
    /// in id order.
    pub phases: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { num_classes: 20, dim: 32, per_class: 100, spread: 0.3, drift: 0.0, phases: 5, seed: 0 }
    }
}

fn unit_gaussian(rng: &mut Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = crate::tensor::norm(&v);
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Gaussian clusters with means on the unit sphere. Features are rounded to
/// f32 precision so the binary container round-trips exactly.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.num_classes == 0 || spec.dim == 0 || spec.per_class < 2 {
        return Err(contract("synthetic dataset needs classes > 0, dim > 0 and per_class >= 2"));
    }
    if !(spec.spread >= 0.0) || !spec.drift.is_finite() {
        return Err(contract("spread must be >= 0 and drift finite"));
    }
    let mut rng = rng::derive(spec.seed, rng::stream::DATASET);
    let phases = spec.phases.max(1);
    let mut items = Vec::with_capacity(spec.num_classes * spec.per_class);
    let n_test = test_count(spec.per_class);
    for c in 0..spec.num_classes {
        let mean = unit_gaussian(&mut rng, spec.dim);
        let direction = unit_gaussian(&mut rng, spec.dim);
        let mut order: Vec<usize> = (0..spec.per_class).collect();
        order.shuffle(&mut rng);
        let test: HashSet<usize> = order.into_iter().take(n_test).collect();
        for k in 0..spec.per_class {
            let phase = (k * phases / spec.per_class) as f64;
            let x = (0..spec.dim)
                .map(|d| {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    let v = mean[d] + spec.drift * phase * direction[d] + spec.spread * noise;
                    v as f32 as f64
                })
                .collect();
            items.push(Item {
                id: (c * spec.per_class + k) as u64,
                class: c as u32,
                split: if test.contains(&k) { Split::Test } else { Split::Train },
                x,
            });
        }
    }
    Dataset::new(spec.dim, items)
}
