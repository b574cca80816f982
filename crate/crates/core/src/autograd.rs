//! Minimal reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] with seed gradients for chosen outputs (loss gradients
//! are computed in closed form by the loss functions) propagates them to all
//! leaves. Leaves bound to trainable parameters carry their parameter index so
//! gradients can be gathered afterwards.

use crate::matrix::{Matrix, Real};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    /// `op(a) · op(b)`.
    MatMul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
    },
    Add(Var, Var),
    /// Adds a `1 × cols` row to every row.
    AddRow {
        a: Var,
        row: Var,
    },
    Scale(Var, T),
    Relu(Var),
    /// Elementwise product with a constant (dropout or padding masks).
    MulConst(Var, Matrix<T>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix<T>,
        rstd: Vec<T>,
    },
    /// Row softmax; masked columns are exactly zero in the output.
    Softmax(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    /// Rows become concatenated windows `x[t - k/2 .. t + k/2]`, zero padded.
    Im2Col {
        x: Var,
        kernel: usize,
    },
    SliceCols {
        a: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    RepeatRows {
        a: Var,
        n: usize,
    },
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    param: Option<usize>,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; gradients flow into it but are not collected.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf bound to trainable parameter `index`.
    pub fn param(&mut self, index: usize, value: &Matrix<T>) -> Var {
        let v = self.push(value.clone(), Op::Leaf);
        self.nodes[v.0].param = Some(index);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    pub fn matmul_t(&mut self, a: Var, trans_a: bool, b: Var, trans_b: bool) -> Var {
        let value = Matrix::matmul_t(self.value(a), trans_a, self.value(b), trans_b);
        self.push(
            value,
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(value, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "bias must be a single row");
        assert_eq!(r.cols(), self.value(a).cols(), "bias width mismatch");
        let mut value = self.value(a).clone();
        let bias = r.row(0).to_vec();
        for i in 0..value.rows() {
            for (v, &b) in value.row_mut(i).iter_mut().zip(&bias) {
                *v += b;
            }
        }
        self.push(value, Op::AddRow { a, row })
    }

    /// `x · w + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|v| v * s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu(a))
    }

    pub fn mul_const(&mut self, a: Var, mask: Matrix<T>) -> Var {
        assert_eq!(mask.shape(), self.value(a).shape(), "mask shape mismatch");
        let mut value = self.value(a).clone();
        for (v, &m) in value.as_mut_slice().iter_mut().zip(mask.as_slice()) {
            *v *= m;
        }
        self.push(value, Op::MulConst(a, mask))
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` (each `1 × cols`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let eps = T::from_f64_lossy(LAYER_NORM_EPS);
        let n = T::from_usize(cols).unwrap();
        let mut xhat = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let s = T::one() / (var + eps).sqrt();
            rstd.push(s);
            for (dst, &v) in xhat.row_mut(r).iter_mut().zip(row) {
                *dst = (v - mean) * s;
            }
        }
        let g = self.value(gamma).row(0).to_vec();
        let b = self.value(beta).row(0).to_vec();
        let mut value = xhat.clone();
        for r in 0..rows {
            for ((v, &gi), &bi) in value.row_mut(r).iter_mut().zip(&g).zip(&b) {
                *v = *v * gi + bi;
            }
        }
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Row softmax. Columns with `key_mask[c] == false` receive zero weight.
    pub fn softmax_rows(&mut self, a: Var, key_mask: Option<&[bool]>) -> Var {
        let av = self.value(a);
        let (rows, cols) = av.shape();
        if let Some(m) = key_mask {
            assert_eq!(m.len(), cols, "key mask length mismatch");
        }
        let keep = |c: usize| key_mask.is_none_or(|m| m[c]);
        let mut value = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let row = av.row(r);
            let max = (0..cols)
                .filter(|&c| keep(c))
                .map(|c| row[c])
                .fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                continue;
            }
            let out = value.row_mut(r);
            let mut sum = T::zero();
            for c in 0..cols {
                if keep(c) {
                    let e = (row[c] - max).exp();
                    out[c] = e;
                    sum += e;
                }
            }
            let inv = T::one() / sum;
            for v in out.iter_mut() {
                *v *= inv;
            }
        }
        self.push(value, Op::Softmax(a))
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut value = Matrix::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            value.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Window unfolding for a same-padded 1-D convolution with odd `kernel`.
    pub fn im2col(&mut self, x: Var, kernel: usize) -> Var {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let half = kernel / 2;
        let mut value = Matrix::zeros(rows, kernel * cols);
        for t in 0..rows {
            let out = value.row_mut(t);
            for o in 0..kernel {
                let src = t + o;
                if src < half || src - half >= rows {
                    continue;
                }
                out[o * cols..(o + 1) * cols].copy_from_slice(xv.row(src - half));
            }
        }
        self.push(value, Op::Im2Col { x, kernel })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let av = self.value(a);
        assert!(start + width <= av.cols(), "column slice out of range");
        let value = Matrix::from_fn(av.rows(), width, |r, c| av.get(r, start + c));
        self.push(value, Op::SliceCols { a, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "row count mismatch in concat");
            for r in 0..rows {
                value.row_mut(r)[offset..offset + pv.cols()].copy_from_slice(pv.row(r));
            }
            offset += pv.cols();
        }
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    /// Each row repeated `n` times in place.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Var {
        let av = self.value(a);
        let mut value = Matrix::zeros(av.rows() * n, av.cols());
        for r in 0..av.rows() {
            for k in 0..n {
                value.row_mut(r * n + k).copy_from_slice(av.row(r));
            }
        }
        self.push(value, Op::RepeatRows { a, n })
    }

    /// Propagates `seeds` (gradients of a scalar objective w.r.t. the given
    /// nodes) back through the graph.
    pub fn backward(&self, seeds: &[(Var, Matrix<T>)]) -> Gradients<T> {
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(g.shape(), self.value(*v).shape(), "seed shape mismatch");
            accumulate(&mut grads, *v, g.clone());
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(grad) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &grad, &mut grads);
            grads[i] = Some(grad);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, grad: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                // C = op(A) op(B); dop(A) = dC op(B)^T, dop(B) = op(A)^T dC
                let ga = if *trans_a {
                    Matrix::matmul_t(bv, *trans_b, grad, true)
                } else {
                    Matrix::matmul_t(grad, false, bv, !*trans_b)
                };
                accumulate(grads, *a, ga);
                let gb = if *trans_b {
                    Matrix::matmul_t(grad, true, av, *trans_a)
                } else {
                    Matrix::matmul_t(av, !*trans_a, grad, false)
                };
                accumulate(grads, *b, gb);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, grad.clone());
                accumulate(grads, *b, grad.clone());
            }
            Op::AddRow { a, row } => {
                accumulate(grads, *a, grad.clone());
                let mut g = Matrix::zeros(1, grad.cols());
                for r in 0..grad.rows() {
                    for (d, &v) in g.row_mut(0).iter_mut().zip(grad.row(r)) {
                        *d += v;
                    }
                }
                accumulate(grads, *row, g);
            }
            Op::Scale(a, s) => {
                let s = *s;
                accumulate(grads, *a, grad.map(|v| v * s));
            }
            Op::Relu(a) => {
                let mut g = grad.clone();
                for (d, &y) in g.as_mut_slice().iter_mut().zip(node.value.as_slice()) {
                    if y <= T::zero() {
                        *d = T::zero();
                    }
                }
                accumulate(grads, *a, g);
            }
            Op::MulConst(a, mask) => {
                let mut g = grad.clone();
                for (d, &m) in g.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                    *d *= m;
                }
                accumulate(grads, *a, g);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (rows, cols) = grad.shape();
                let g = self.value(*gamma).row(0);
                let n = T::from_usize(cols).unwrap();
                let mut dgamma = Matrix::zeros(1, cols);
                let mut dbeta = Matrix::zeros(1, cols);
                let mut dx = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    let dy = grad.row(r);
                    let xh = xhat.row(r);
                    let mut sum_dxh = T::zero();
                    let mut sum_dxh_xh = T::zero();
                    for c in 0..cols {
                        let dxh = dy[c] * g[c];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh[c];
                        dgamma.row_mut(0)[c] += dy[c] * xh[c];
                        dbeta.row_mut(0)[c] += dy[c];
                    }
                    let out = dx.row_mut(r);
                    for c in 0..cols {
                        let dxh = dy[c] * g[c];
                        out[c] = rstd[r] * (dxh - sum_dxh / n - xh[c] * sum_dxh_xh / n);
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gamma, dgamma);
                accumulate(grads, *beta, dbeta);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut g = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let dr = grad.row(r);
                    let dot: T = yr.iter().zip(dr).map(|(&p, &d)| p * d).sum();
                    for (o, (&p, &d)) in g.row_mut(r).iter_mut().zip(yr.iter().zip(dr)) {
                        *o = p * (d - dot);
                    }
                }
                accumulate(grads, *a, g);
            }
            Op::Gather { table, ids } => {
                let tv = self.value(*table);
                let mut g = Matrix::zeros(tv.rows(), tv.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for (d, &v) in g.row_mut(id).iter_mut().zip(grad.row(r)) {
                        *d += v;
                    }
                }
                accumulate(grads, *table, g);
            }
            Op::Im2Col { x, kernel } => {
                let (rows, cols) = self.value(*x).shape();
                let half = kernel / 2;
                let mut g = Matrix::zeros(rows, cols);
                for t in 0..rows {
                    let src_row = grad.row(t);
                    for o in 0..*kernel {
                        let src = t + o;
                        if src < half || src - half >= rows {
                            continue;
                        }
                        for (d, &v) in g
                            .row_mut(src - half)
                            .iter_mut()
                            .zip(&src_row[o * cols..(o + 1) * cols])
                        {
                            *d += v;
                        }
                    }
                }
                accumulate(grads, *x, g);
            }
            Op::SliceCols { a, start } => {
                let (rows, cols) = self.value(*a).shape();
                let width = grad.cols();
                let mut g = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    g.row_mut(r)[*start..*start + width].copy_from_slice(grad.row(r));
                }
                accumulate(grads, *a, g);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let g = Matrix::from_fn(grad.rows(), w, |r, c| grad.get(r, offset + c));
                    accumulate(grads, p, g);
                    offset += w;
                }
            }
            Op::RepeatRows { a, n } => {
                let (rows, cols) = self.value(*a).shape();
                let mut g = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    for k in 0..*n {
                        for (d, &v) in g.row_mut(r).iter_mut().zip(grad.row(r * n + k)) {
                            *d += v;
                        }
                    }
                }
                accumulate(grads, *a, g);
            }
        }
    }

    /// Parameter-bound leaves as `(param index, node)` pairs.
    pub fn param_nodes(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, Var(i))))
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads[v.0].as_ref()
    }

    /// Adds every parameter leaf's gradient into `out[param index]`.
    pub fn accumulate_params(&self, graph: &Graph<T>, out: &mut [Matrix<T>]) {
        for (p, v) in graph.param_nodes() {
            if let Some(g) = self.get(v) {
                out[p].add_assign(g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Checks d(sum(w ⊙ f(inputs)))/d(inputs) against central differences.
    fn check(inputs: Vec<Matrix<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|m| g.constant(m.clone())).collect();
        let out = build(&mut g, &vars);
        let weights = random(g.value(out).rows(), g.value(out).cols(), &mut rng);
        let objective = |inputs: &[Matrix<f64>]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|m| g.constant(m.clone())).collect();
            let out = build(&mut g, &vars);
            g.value(out)
                .as_slice()
                .iter()
                .zip(weights.as_slice())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let grads = g.backward(&[(out, weights.clone())]);
        let eps = 1e-6;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads
                .get(vars[k])
                .cloned()
                .unwrap_or(Matrix::zeros(input.rows(), input.cols()));
            for idx in 0..input.len() {
                let mut plus = inputs.clone();
                plus[k].as_mut_slice()[idx] += eps;
                let mut minus = inputs.clone();
                minus[k].as_mut_slice()[idx] -= eps;
                let numeric = (objective(&plus) - objective(&minus)) / (2.0 * eps);
                let a = analytic.as_slice()[idx];
                assert!(
                    (a - numeric).abs() < 1e-6 * (1.0 + numeric.abs()),
                    "input {k} entry {idx}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn matmul_gradients_all_transpose_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = if ta {
                random(4, 3, &mut rng)
            } else {
                random(3, 4, &mut rng)
            };
            let b = if tb {
                random(2, 4, &mut rng)
            } else {
                random(4, 2, &mut rng)
            };
            check(vec![a, b], |g, v| g.matmul_t(v[0], ta, v[1], tb));
        }
    }

    #[test]
    fn layer_norm_and_softmax_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(3, 5, &mut rng);
        let gamma = random(1, 5, &mut rng);
        let beta = random(1, 5, &mut rng);
        check(vec![x.clone(), gamma, beta], |g, v| {
            g.layer_norm(v[0], v[1], v[2])
        });
        check(vec![x.clone()], |g, v| g.softmax_rows(v[0], None));
        check(vec![x], |g, v| {
            g.softmax_rows(v[0], Some(&[true, false, true, true, false]))
        });
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(5, 3, &mut rng);
        let table = random(4, 3, &mut rng);
        let row = random(1, 3, &mut rng);
        check(vec![x.clone()], |g, v| g.im2col(v[0], 3));
        check(vec![x.clone()], |g, v| g.im2col(v[0], 9));
        check(vec![x.clone()], |g, v| g.repeat_rows(v[0], 3));
        check(vec![x.clone(), row], |g, v| {
            let a = g.slice_cols(v[0], 1, 2);
            let b = g.slice_cols(v[0], 0, 1);
            let c = g.concat_cols(&[a, b]);
            let c = g.add_row(c, v[1]);
            let c = g.scale(c, 0.5);
            g.relu(c)
        });
        check(vec![table], |g, v| g.gather_rows(v[0], &[2, 0, 2, 3]));
    }

    #[test]
    fn masked_softmax_rows_are_stochastic() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Matrix::from_fn(3, 4, |r, c| (r * c) as f64));
        let p = g.softmax_rows(x, Some(&[true, true, false, true]));
        for r in 0..3 {
            let row = g.value(p).row(r);
            assert_eq!(row[2], 0.0);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn im2col_layout() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Matrix::from_fn(3, 1, |r, _| r as f64 + 1.0));
        let y = g.im2col(x, 3);
        assert_eq!(
            g.value(y).as_slice(),
            &[0.0, 1.0, 2.0, 1.0, 2.0, 3.0, 2.0, 3.0, 0.0]
        );
    }
}
