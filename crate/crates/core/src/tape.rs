//! Reverse-mode differentiation over a linear tape.
//!
//! Forward ops append a node holding the computed value and the ids of its
//! inputs. `backward` walks the nodes in exact reverse order and returns the
//! gradient for every registered parameter. Constants get no accumulator.

use crate::error::{contract, Result};
use crate::tensor::{kernels, norm, Tensor};

/// Guard used by every l2 normalization in the crate.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    AddRowBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Square(Var),
    RowSum(Var),
    Sum(Var),
    L2NormalizeRows(Var, f64),
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Gradient for each registered parameter, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }
}

#[derive(Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
    params: Vec<Var>,
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn num_ops(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Registers a trainable leaf; its gradient is reported by `backward`.
    pub fn param(&mut self, value: Tensor) -> (Var, ParamId) {
        let id = ParamId(self.params.len());
        let v = self.push(value, Op::Param);
        self.params.push(v);
        (v, id)
    }

    /// Leaf without a gradient accumulator.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = kernels::transpose(self.value(a))?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let out = kernels::add_row_bias(self.value(a), self.value(bias))?;
        Ok(self.push(out, Op::AddRowBias(a, bias)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::zip_with(self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::zip_with(self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::zip_with(self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = kernels::map(self.value(a), |x| x * k);
        self.push(out, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let out = kernels::map(self.value(a), |x| x + k);
        self.push(out, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = kernels::relu(self.value(a));
        self.push(out, Op::Relu(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = kernels::map(self.value(a), |x| x * x);
        self.push(out, Op::Square(a))
    }

    /// m×n → m.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let out = kernels::row_sum(self.value(a));
        self.push(out, Op::RowSum(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = kernels::sum(self.value(a));
        self.push(out, Op::Sum(a))
    }

    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let out = kernels::l2_normalize_rows(self.value(a), eps);
        self.push(out, Op::L2NormalizeRows(a, eps))
    }

    /// Scalar mean cross-entropy of row-wise softmax against `labels`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = kernels::softmax_cross_entropy(self.value(logits), labels)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs },
        ))
    }

    /// Gradients of the scalar `loss` with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param => {
                    adj[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let ga = kernels::matmul(&g, &kernels::transpose(bv)?)?;
                    let gb = kernels::matmul(&kernels::transpose(av)?, &g)?;
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::Transpose(a) => {
                    accumulate(&mut adj, *a, kernels::transpose(&g)?);
                }
                Op::AddRowBias(a, bias) => {
                    let (_, c) = g.dims2();
                    let mut gb = vec![0.0; c];
                    for row in g.rows() {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    let gb = Tensor::new(self.value(*bias).shape().to_vec(), gb)?;
                    accumulate(&mut adj, *a, g);
                    accumulate(&mut adj, *bias, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *b, kernels::map(&g, |x| -x));
                    accumulate(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = kernels::zip_with(&g, self.value(*b), |x, y| x * y)?;
                    let gb = kernels::zip_with(&g, self.value(*a), |x, y| x * y)?;
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::Scale(a, k) => {
                    let k = *k;
                    accumulate(&mut adj, *a, kernels::map(&g, |x| x * k));
                }
                Op::AddScalar(a) => accumulate(&mut adj, *a, g),
                Op::Relu(a) => {
                    let ga = kernels::zip_with(&g, self.value(*a), |x, v| if v > 0.0 { x } else { 0.0 })?;
                    accumulate(&mut adj, *a, ga);
                }
                Op::Square(a) => {
                    let ga = kernels::zip_with(&g, self.value(*a), |x, v| 2.0 * v * x)?;
                    accumulate(&mut adj, *a, ga);
                }
                Op::RowSum(a) => {
                    let av = self.value(*a);
                    let (_, c) = av.dims2();
                    let data = g.data().iter().flat_map(|&x| std::iter::repeat_n(x, c)).collect();
                    accumulate(&mut adj, *a, Tensor::new(av.shape().to_vec(), data)?);
                }
                Op::Sum(a) => {
                    let av = self.value(*a);
                    let gv = g.item();
                    accumulate(&mut adj, *a, Tensor::new(av.shape().to_vec(), vec![gv; av.len()])?);
                }
                Op::L2NormalizeRows(a, eps) => {
                    let input = self.value(*a);
                    let out = &node.value;
                    let (_, c) = input.dims2();
                    let mut ga = Vec::with_capacity(input.len());
                    for ((x, u), gr) in input.rows().zip(out.rows()).zip(g.rows()) {
                        let n = norm(x);
                        if n >= *eps {
                            // (I - u uᵀ) g / ‖x‖
                            let proj: f64 = u.iter().zip(gr).map(|(a, b)| a * b).sum();
                            ga.extend(gr.iter().zip(u).map(|(gi, ui)| (gi - ui * proj) / n));
                        } else {
                            ga.extend(gr.iter().map(|gi| gi / eps));
                        }
                        debug_assert_eq!(x.len(), c);
                    }
                    accumulate(&mut adj, *a, Tensor::new(input.shape().to_vec(), ga)?);
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    let scale = g.item() / labels.len() as f64;
                    let (_, c) = probs.dims2();
                    let mut gl = probs.clone();
                    for (i, &y) in labels.iter().enumerate() {
                        gl.data_mut()[i * c + y] -= 1.0;
                    }
                    for v in gl.data_mut() {
                        *v *= scale;
                    }
                    accumulate(&mut adj, *logits, gl);
                }
            }
        }

        let grads = self
            .params
            .iter()
            .map(|p| adj[p.0].take().unwrap_or_else(|| Tensor::zeros(self.value(*p).shape())))
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate(adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut adj[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Tape-free matrix product.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    kernels::matmul(a, b)
}

/// `v / max(‖v‖₂, eps)` for a vector (or each row of a matrix).
pub fn l2_normalize(v: &Tensor, eps: f64) -> Tensor {
    kernels::l2_normalize_rows(v, eps)
}

pub fn relu(v: &Tensor) -> Tensor {
    kernels::relu(v)
}

/// Tape-free backward entry point.
pub fn backward(tape: &GradTape, loss: Var) -> Result<Gradients> {
    tape.backward(loss)
}

/// Central-difference derivative of `f` with respect to every entry of `x`.
pub fn finite_difference(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    out
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn rand_tensor(rng: &mut crate::rng::Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.data()[i * k + p] * b.data()[p * n + j];
                }
                out.data_mut()[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_orthogonal() {
        let eye = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let m = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&eye, &m).unwrap(), m);

        let a = Tensor::from_rows(&[[1.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[[0.0], [5.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = crate::rng::derive(7, 0);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let got = matmul(&a, &b).unwrap();
        let want = naive_matmul(&a, &b);
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn normalize_examples() {
        let out = l2_normalize(&Tensor::vector(vec![3.0, 4.0]), NORM_EPS);
        assert!((out.data()[0] - 0.6).abs() < 1e-15);
        assert!((out.data()[1] - 0.8).abs() < 1e-15);
        let zero = l2_normalize(&Tensor::vector(vec![0.0, 0.0]), NORM_EPS);
        assert_eq!(zero.data(), &[0.0, 0.0]);
    }

    #[test]
    fn relu_examples() {
        assert_eq!(relu(&Tensor::vector(vec![-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(relu(&Tensor::vector(vec![-3.0, -0.5])).data(), &[0.0, 0.0]);
    }

    /// Builds `sum(w ⊙ op(p))` with fixed random weights so every output
    /// coordinate contributes to the checked gradient.
    fn check_unary(
        seed: u64,
        shape: &[usize],
        skip_near_zero: bool,
        op: impl Fn(&mut GradTape, Var) -> Var,
    ) {
        let mut rng = crate::rng::derive(seed, 1);
        let mut x = rand_tensor(&mut rng, shape);
        if skip_near_zero {
            for v in x.data_mut() {
                if v.abs() < 1e-4 {
                    *v = 0.5;
                }
            }
        }
        let w = rand_tensor(&mut rng, shape);
        let eval = |p: &Tensor| {
            let mut t = GradTape::new();
            let (pv, _) = t.param(p.clone());
            let y = op(&mut t, pv);
            let wv = t.constant(w.clone());
            let m = t.mul(y, wv).unwrap();
            let s = t.sum(m);
            (t, s)
        };
        let (t, s) = eval(&x);
        let g = t.backward(s).unwrap();
        let fd = finite_difference(&x, 1e-5, |p| {
            let (t, s) = eval(p);
            t.value(s).item()
        });
        for (a, n) in g.get(ParamId(0)).data().iter().zip(fd.data()) {
            assert!(relative_error(*a, *n, 1e-8) < 1e-6, "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn normalize_gradient_matches_finite_differences() {
        for seed in 0..20 {
            check_unary(seed, &[5], false, |t, v| t.l2_normalize_rows(v, NORM_EPS));
            check_unary(seed, &[3, 4], false, |t, v| t.l2_normalize_rows(v, NORM_EPS));
        }
    }

    #[test]
    fn relu_gradient_matches_finite_differences() {
        for seed in 0..20 {
            check_unary(seed, &[7], true, |t, v| t.relu(v));
        }
    }

    #[test]
    fn backward_trivial_cases() {
        let mut t = GradTape::new();
        let (p, id) = t.param(Tensor::from_rows(&[[1.0, -2.0, 3.0], [0.5, 0.0, 4.0]]).unwrap());
        let s = t.sum(p);
        let g = t.backward(s).unwrap();
        assert!(g.get(id).data().iter().all(|&v| v == 1.0));

        let mut t = GradTape::new();
        let pv = Tensor::vector(vec![1.5, -2.0, 0.25]);
        let (p, id) = t.param(pv.clone());
        let sq = t.square(p);
        let s = t.sum(sq);
        let g = t.backward(s).unwrap();
        for (gv, v) in g.get(id).data().iter().zip(pv.data()) {
            assert_eq!(*gv, 2.0 * v);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = GradTape::new();
        let (p, _) = t.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(p), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_accumulator() {
        let mut t = GradTape::new();
        let (p, _) = t.param(Tensor::vector(vec![1.0, 2.0]));
        let c = t.constant(Tensor::vector(vec![3.0, 1.0]));
        let d = t.sub(p, c).unwrap();
        let sq = t.square(d);
        let s = t.sum(sq);
        let g = t.backward(s).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.get(ParamId(0)).data(), &[-4.0, 2.0]);
    }

    #[test]
    fn two_layer_net_matches_finite_differences() {
        for seed in 0..10 {
            let mut rng = crate::rng::derive(seed, 2);
            let x = rand_tensor(&mut rng, &[4, 3]);
            let params = vec![
                rand_tensor(&mut rng, &[3, 5]),
                rand_tensor(&mut rng, &[5]),
                rand_tensor(&mut rng, &[5, 2]),
            ];
            let labels = [0usize, 1, 1, 0];
            let eval = |ps: &[Tensor]| {
                let mut t = GradTape::new();
                let xv = t.constant(x.clone());
                let (w1, _) = t.param(ps[0].clone());
                let (b1, _) = t.param(ps[1].clone());
                let (w2, _) = t.param(ps[2].clone());
                let h = t.matmul(xv, w1).unwrap();
                let h = t.add_row_bias(h, b1).unwrap();
                let h = t.relu(h);
                let o = t.matmul(h, w2).unwrap();
                let o = t.l2_normalize_rows(o, NORM_EPS);
                let o = t.scale(o, 4.0);
                let l = t.softmax_cross_entropy(o, &labels).unwrap();
                (t, l)
            };
            let (t, l) = eval(&params);
            let g = t.backward(l).unwrap();
            for (pi, p) in params.iter().enumerate() {
                let fd = finite_difference(p, 1e-5, |probe| {
                    let mut ps = params.clone();
                    ps[pi] = probe.clone();
                    let (t, l) = eval(&ps);
                    t.value(l).item()
                });
                for (a, n) in g.get(ParamId(pi)).data().iter().zip(fd.data()) {
                    assert!(relative_error(*a, *n, 1e-6) < 1e-4, "param {pi}: {a} vs {n}");
                }
            }
        }
    }
}
