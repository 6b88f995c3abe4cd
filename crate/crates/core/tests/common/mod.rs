#![allow(dead_code)]

use contembed_core::gallery::EmbeddingRecord;
use contembed_core::model::{ClassifierHead, EmbeddingNet};
use contembed_core::{Hyperparameters, ModelState, Tensor};

/// Net whose embedding is `normalize(A x)`: the hidden layer holds
/// `relu(x)` and `relu(-x)` and the output layer recombines them through A.
pub fn linear_net(a: &[Vec<f64>]) -> EmbeddingNet {
    let d = a.len();
    let mut w1 = vec![0.0; d * 2 * d];
    for i in 0..d {
        w1[i * 2 * d + i] = 1.0;
        w1[i * 2 * d + d + i] = -1.0;
    }
    let mut w2 = vec![0.0; 2 * d * d];
    for (r, row) in a.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            // output r = sum_c a[r][c] x_c
            w2[c * d + r] = v;
            w2[(d + c) * d + r] = -v;
        }
    }
    EmbeddingNet {
        w1: Tensor::new(vec![d, 2 * d], w1).unwrap(),
        b1: Tensor::zeros(&[2 * d]),
        w2: Tensor::new(vec![2 * d, d], w2).unwrap(),
        b2: Tensor::zeros(&[d]),
    }
}

pub fn identity(d: usize) -> Vec<Vec<f64>> {
    (0..d).map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

/// Model with a hand-set head: `rows[k]` belongs to `classes[k]`.
pub fn model_with_head(net: EmbeddingNet, classes: &[u32], rows: &[Vec<f64>], temperature: f64) -> ModelState {
    let d = net.embed_dim();
    let hyper = Hyperparameters { embed_dim: d, hidden_dim: 2 * d, temperature, ..Default::default() };
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    ModelState {
        net,
        head: ClassifierHead { weights: Tensor::new(vec![rows.len(), d], flat).unwrap(), registry: classes.to_vec() },
        hyper,
    }
}

pub fn normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

/// Normalized-softmax cross-entropy evaluated directly.
pub fn softmax_oracle(model: &ModelState, items: &[(Vec<f64>, u32)], t: f64) -> f64 {
    let rows: Vec<Vec<f64>> = model.head.weights.rows().map(normalize).collect();
    let mut total = 0.0;
    for (x, y) in items {
        let f = model.net.embed(x).unwrap();
        let logits: Vec<f64> = rows.iter().map(|w| dot(w, &f) / t).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        let k = model.head.registry.iter().position(|c| c == y).unwrap();
        total += lse - logits[k];
    }
    total / items.len() as f64
}

/// Hinge sum evaluated with an exhaustive negative scan.
pub fn triplet_oracle(student: &ModelState, teacher: &ModelState, items: &[(Vec<f64>, u32)], margin: f64) -> f64 {
    let s: Vec<Vec<f64>> = items.iter().map(|(x, _)| student.net.embed(x).unwrap()).collect();
    let t: Vec<Vec<f64>> = items.iter().map(|(x, _)| teacher.net.embed(x).unwrap()).collect();
    let mut sum = 0.0;
    for a in 0..items.len() {
        let mut best: Option<(usize, f64)> = None;
        for n in 0..items.len() {
            if items[n].1 == items[a].1 {
                continue;
            }
            let d = sq_dist(&s[a], &t[n]);
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some((n, d));
            }
        }
        if let Some((_, dn)) = best {
            sum += (sq_dist(&s[a], &t[a]) - dn + margin).max(0.0);
        }
    }
    sum / items.len() as f64
}

/// Full stable sort of every record by descending cosine similarity.
pub fn ranking_oracle(records: &[EmbeddingRecord], q: &[f64]) -> Vec<(usize, f64)> {
    let qn = dot(q, q).sqrt();
    let mut all: Vec<(usize, f64)> = records
        .iter()
        .enumerate()
        .map(|(i, r)| (i, dot(q, &r.embedding) / (qn * dot(&r.embedding, &r.embedding).sqrt())))
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    all
}

pub fn recall_oracle(records: &[EmbeddingRecord], queries: &[(Vec<f64>, u32)], k: usize) -> f64 {
    let mut hits = 0;
    for (q, c) in queries {
        let ranked = ranking_oracle(records, q);
        if ranked.iter().take(k).any(|(i, _)| records[*i].class == *c) {
            hits += 1;
        }
    }
    hits as f64 / queries.len() as f64
}

/// Independent forward pass: x W1 + b1, ReLU, W2 + b2, normalize.
pub fn forward(m: &ModelState, x: &[f64]) -> Vec<f64> {
    let (w1, b1, w2, b2) = (&m.net.w1, &m.net.b1, &m.net.w2, &m.net.b2);
    let (din, h) = (w1.shape()[0], w1.shape()[1]);
    let e = w2.shape()[1];
    let hidden: Vec<f64> = (0..h)
        .map(|j| ((0..din).map(|i| x[i] * w1.data()[i * h + j]).sum::<f64>() + b1.data()[j]).max(0.0))
        .collect();
    let out: Vec<f64> = (0..e).map(|k| (0..h).map(|j| hidden[j] * w2.data()[j * e + k]).sum::<f64>() + b2.data()[k]).collect();
    let n = dot(&out, &out).sqrt();
    if n < 1e-12 {
        // all-dead hidden layer with zero bias: the clamped zero vector
        return out.iter().map(|v| v / 1e-12).collect();
    }
    normalize(&out)
}

pub fn accuracy_oracle(m: &ModelState, items: &[(Vec<f64>, u32)]) -> f64 {
    let rows: Vec<Vec<f64>> = m.head.weights.rows().map(normalize).collect();
    let mut correct = 0;
    for (x, y) in items {
        let f = forward(m, x);
        let mut scored: Vec<(u32, f64)> = m.head.registry.iter().zip(&rows).map(|(c, w)| (*c, dot(w, &f))).collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        if scored[0].0 == *y {
            correct += 1;
        }
    }
    correct as f64 / items.len() as f64
}
