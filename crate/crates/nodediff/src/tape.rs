//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] is a single-use computation graph: leaves are inserted with
//! [`Tape::leaf`] or [`Tape::constant`], operations evaluate eagerly and
//! record their inputs, and [`Tape::backward`] accumulates gradients of a
//! scalar (1x1) output with respect to every differentiable leaf. Everything
//! is single-threaded and deterministic.
//!
//! The op set is exactly what the encoder/decoder GNNs, the attention score
//! networks, and the losses need; pair interactions are expressed through
//! `gather_rows` / `segment_sum_rows` so edge features live in `(N^2) x d`
//! matrices without materializing dense aggregation operators.

use std::rc::Rc;

use ndarray::{concatenate, s, Array2, Axis};

pub type VarId = usize;

#[derive(Clone)]
#[allow(dead_code)]
enum Op {
    Leaf,
    MatMul(VarId, VarId),
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    /// Row-broadcast add: `a (n x m) + b (1 x m)`.
    AddRow(VarId, VarId),
    /// Row-broadcast multiply: `a (n x m) * b (1 x m)`.
    MulRow(VarId, VarId),
    Scale(VarId, f64),
    AddConst(VarId, Rc<Array2<f64>>),
    Sigmoid(VarId),
    Silu(VarId),
    Softplus(VarId),
    Square(VarId),
    SoftmaxRows(VarId),
    LogSoftmaxRows(VarId),
    LayerNorm {
        x: VarId,
        gamma: VarId,
        beta: VarId,
    },
    ConcatCols(VarId, VarId),
    ConcatRows(VarId, VarId),
    SliceRows(VarId, usize, usize),
    SliceCols(VarId, usize, usize),
    Transpose(VarId),
    GatherRows(VarId, Rc<Vec<usize>>),
    SegmentSumRows {
        x: VarId,
        segments: Rc<Vec<usize>>,
    },
    SumAll(VarId),
}

pub struct Tape {
    vals: Vec<Array2<f64>>,
    ops: Vec<Op>,
    needs_grad: Vec<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            vals: Vec::new(),
            ops: Vec::new(),
            needs_grad: Vec::new(),
        }
    }

    fn push(&mut self, val: Array2<f64>, op: Op, needs_grad: bool) -> VarId {
        self.vals.push(val);
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        self.vals.len() - 1
    }

    fn ng(&self, id: VarId) -> bool {
        self.needs_grad[id]
    }

    pub fn leaf(&mut self, val: Array2<f64>, needs_grad: bool) -> VarId {
        self.push(val, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, val: Array2<f64>) -> VarId {
        self.leaf(val, false)
    }

    pub fn value(&self, id: VarId) -> &Array2<f64> {
        &self.vals[id]
    }

    pub fn shape(&self, id: VarId) -> (usize, usize) {
        self.vals[id].dim()
    }

    /// Total elements held by the tape; used by the memory-scaling check.
    pub fn total_elements(&self) -> usize {
        self.vals.iter().map(|v| v.len()).sum()
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let val = self.vals[a].dot(&self.vals[b]);
        self.push(val, Op::MatMul(a, b), self.ng(a) || self.ng(b))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let val = &self.vals[a] + &self.vals[b];
        self.push(val, Op::Add(a, b), self.ng(a) || self.ng(b))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let val = &self.vals[a] - &self.vals[b];
        self.push(val, Op::Sub(a, b), self.ng(a) || self.ng(b))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let val = &self.vals[a] * &self.vals[b];
        self.push(val, Op::Mul(a, b), self.ng(a) || self.ng(b))
    }

    pub fn add_row(&mut self, a: VarId, row: VarId) -> VarId {
        debug_assert_eq!(self.vals[row].nrows(), 1);
        let val = &self.vals[a] + &self.vals[row].row(0);
        self.push(val, Op::AddRow(a, row), self.ng(a) || self.ng(row))
    }

    pub fn mul_row(&mut self, a: VarId, row: VarId) -> VarId {
        debug_assert_eq!(self.vals[row].nrows(), 1);
        let val = &self.vals[a] * &self.vals[row].row(0);
        self.push(val, Op::MulRow(a, row), self.ng(a) || self.ng(row))
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let val = &self.vals[a] * c;
        self.push(val, Op::Scale(a, c), self.ng(a))
    }

    pub fn add_const(&mut self, a: VarId, c: Array2<f64>) -> VarId {
        let val = &self.vals[a] + &c;
        self.push(val, Op::AddConst(a, Rc::new(c)), self.ng(a))
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        let val = self.vals[a].mapv(sigmoid_scalar);
        self.push(val, Op::Sigmoid(a), self.ng(a))
    }

    pub fn silu(&mut self, a: VarId) -> VarId {
        let val = self.vals[a].mapv(|x| x * sigmoid_scalar(x));
        self.push(val, Op::Silu(a), self.ng(a))
    }

    /// Numerically stable `ln(1 + e^x)`.
    pub fn softplus(&mut self, a: VarId) -> VarId {
        let val = self.vals[a].mapv(|x| x.max(0.0) + (-x.abs()).exp().ln_1p());
        self.push(val, Op::Softplus(a), self.ng(a))
    }

    pub fn square(&mut self, a: VarId) -> VarId {
        let val = self.vals[a].mapv(|x| x * x);
        self.push(val, Op::Square(a), self.ng(a))
    }

    pub fn softmax_rows(&mut self, a: VarId) -> VarId {
        let val = softmax_rows_arr(&self.vals[a]);
        self.push(val, Op::SoftmaxRows(a), self.ng(a))
    }

    pub fn log_softmax_rows(&mut self, a: VarId) -> VarId {
        let mut val = self.vals[a].clone();
        for mut row in val.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
            row.mapv_inplace(|x| x - lse);
        }
        self.push(val, Op::LogSoftmaxRows(a), self.ng(a))
    }

    const LN_EPS: f64 = 1e-5;

    /// Per-row layer normalization with learnable affine parameters
    /// (`gamma`, `beta` are 1 x m).
    pub fn layer_norm(&mut self, x: VarId, gamma: VarId, beta: VarId) -> VarId {
        let xv = &self.vals[x];
        let m = xv.ncols() as f64;
        let mut val = xv.clone();
        for mut row in val.rows_mut() {
            let mean = row.sum() / m;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / m;
            let inv = 1.0 / (var + Self::LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
        }
        let val = &val * &self.vals[gamma].row(0) + &self.vals[beta].row(0);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(val, Op::LayerNorm { x, gamma, beta }, ng)
    }

    pub fn concat_cols(&mut self, a: VarId, b: VarId) -> VarId {
        let val = concatenate![Axis(1), self.vals[a].view(), self.vals[b].view()];
        self.push(val, Op::ConcatCols(a, b), self.ng(a) || self.ng(b))
    }

    pub fn concat_rows(&mut self, a: VarId, b: VarId) -> VarId {
        let val = concatenate![Axis(0), self.vals[a].view(), self.vals[b].view()];
        self.push(val, Op::ConcatRows(a, b), self.ng(a) || self.ng(b))
    }

    pub fn slice_rows(&mut self, a: VarId, start: usize, end: usize) -> VarId {
        let val = self.vals[a].slice(s![start..end, ..]).to_owned();
        self.push(val, Op::SliceRows(a, start, end), self.ng(a))
    }

    pub fn slice_cols(&mut self, a: VarId, start: usize, end: usize) -> VarId {
        let val = self.vals[a].slice(s![.., start..end]).to_owned();
        self.push(val, Op::SliceCols(a, start, end), self.ng(a))
    }

    pub fn transpose(&mut self, a: VarId) -> VarId {
        let val = self.vals[a].t().to_owned();
        self.push(val, Op::Transpose(a), self.ng(a))
    }

    /// `out[k, :] = a[indices[k], :]`.
    pub fn gather_rows(&mut self, a: VarId, indices: Rc<Vec<usize>>) -> VarId {
        let av = &self.vals[a];
        let mut val = Array2::zeros((indices.len(), av.ncols()));
        for (k, &i) in indices.iter().enumerate() {
            val.row_mut(k).assign(&av.row(i));
        }
        self.push(val, Op::GatherRows(a, indices), self.ng(a))
    }

    /// `out[s, :] = sum over rows k with segments[k] == s of a[k, :]`.
    pub fn segment_sum_rows(
        &mut self,
        a: VarId,
        segments: Rc<Vec<usize>>,
        num_segments: usize,
    ) -> VarId {
        let av = &self.vals[a];
        debug_assert_eq!(av.nrows(), segments.len());
        let mut val = Array2::zeros((num_segments, av.ncols()));
        for (k, &seg) in segments.iter().enumerate() {
            let mut row = val.row_mut(seg);
            row += &av.row(k);
        }
        self.push(val, Op::SegmentSumRows { x: a, segments }, self.ng(a))
    }

    /// Sum of all entries as a 1x1 matrix.
    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let val = Array2::from_elem((1, 1), self.vals[a].sum());
        self.push(val, Op::SumAll(a), self.ng(a))
    }

    pub fn mean_all(&mut self, a: VarId) -> VarId {
        let n = self.vals[a].len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Accumulate gradients of the scalar `loss` (must be 1x1) into every
    /// differentiable ancestor. Returns one gradient slot per tape variable.
    pub fn backward(&mut self, loss: VarId) -> Gradients {
        assert_eq!(self.vals[loss].dim(), (1, 1), "loss must be a 1x1 matrix");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.vals.len()];
        grads[loss] = Some(Array2::from_elem((1, 1), 1.0));

        for id in (0..=loss).rev() {
            if !self.needs_grad[id] {
                continue;
            }
            let Some(gout) = grads[id].take() else {
                continue;
            };
            self.accumulate(id, &gout, &mut grads);
            grads[id] = Some(gout);
        }
        Gradients { grads }
    }

    fn accumulate(&self, id: VarId, gout: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let needs = &self.needs_grad;
        let mut bump = |target: VarId, delta: Array2<f64>| {
            if !needs[target] {
                return;
            }
            match &mut grads[target] {
                Some(g) => *g += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.ops[id] {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                bump(*a, gout.dot(&self.vals[*b].t()));
                bump(*b, self.vals[*a].t().dot(gout));
            }
            Op::Add(a, b) => {
                bump(*a, gout.clone());
                bump(*b, gout.clone());
            }
            Op::Sub(a, b) => {
                bump(*a, gout.clone());
                bump(*b, -gout.clone());
            }
            Op::Mul(a, b) => {
                bump(*a, gout * &self.vals[*b]);
                bump(*b, gout * &self.vals[*a]);
            }
            Op::AddRow(a, row) => {
                bump(*a, gout.clone());
                bump(*row, gout.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MulRow(a, row) => {
                bump(*a, gout * &self.vals[*row].row(0));
                bump(
                    *row,
                    (gout * &self.vals[*a]).sum_axis(Axis(0)).insert_axis(Axis(0)),
                );
            }
            Op::Scale(a, c) => bump(*a, gout * *c),
            Op::AddConst(a, _) => bump(*a, gout.clone()),
            Op::Sigmoid(a) => {
                let y = &self.vals[id];
                bump(*a, gout * &(y * &(1.0 - y)));
            }
            Op::Silu(a) => {
                let d = self.vals[*a].mapv(|x| {
                    let s = sigmoid_scalar(x);
                    s * (1.0 + x * (1.0 - s))
                });
                bump(*a, gout * &d);
            }
            Op::Softplus(a) => {
                let d = self.vals[*a].mapv(sigmoid_scalar);
                bump(*a, gout * &d);
            }
            Op::Square(a) => {
                bump(*a, gout * &(2.0 * &self.vals[*a]));
            }
            Op::SoftmaxRows(a) => {
                let y = &self.vals[id];
                let mut gin = gout * y;
                for (mut grow, yrow) in gin.rows_mut().into_iter().zip(y.rows()) {
                    let dot = grow.sum();
                    grow.zip_mut_with(&yrow, |g, &yv| *g -= dot * yv);
                }
                bump(*a, gin);
            }
            Op::LogSoftmaxRows(a) => {
                let soft = self.vals[id].mapv(f64::exp);
                let mut gin = gout.clone();
                for (mut grow, srow) in gin.rows_mut().into_iter().zip(soft.rows()) {
                    let total = grow.sum();
                    grow.zip_mut_with(&srow, |g, &s| *g -= total * s);
                }
                bump(*a, gin);
            }
            Op::LayerNorm { x, gamma, beta } => {
                let xv = &self.vals[*x];
                let m = xv.ncols() as f64;
                let gam = self.vals[*gamma].row(0).to_owned();
                let mut gin = Array2::zeros(xv.dim());
                let mut dgamma = Array2::zeros((1, xv.ncols()));
                let mut dbeta = Array2::zeros((1, xv.ncols()));
                for (r, xrow) in xv.rows().into_iter().enumerate() {
                    let mean = xrow.sum() / m;
                    let var = xrow.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / m;
                    let inv = 1.0 / (var + Self::LN_EPS).sqrt();
                    let xhat: Vec<f64> = xrow.iter().map(|&v| (v - mean) * inv).collect();
                    let grow = gout.row(r);
                    let g: Vec<f64> = grow
                        .iter()
                        .zip(gam.iter())
                        .map(|(&go, &ga)| go * ga)
                        .collect();
                    let gmean = g.iter().sum::<f64>() / m;
                    let gxhat = g.iter().zip(&xhat).map(|(&gv, &xh)| gv * xh).sum::<f64>() / m;
                    for c in 0..xv.ncols() {
                        gin[(r, c)] = inv * (g[c] - gmean - xhat[c] * gxhat);
                        dgamma[(0, c)] += grow[c] * xhat[c];
                        dbeta[(0, c)] += grow[c];
                    }
                }
                bump(*x, gin);
                bump(*gamma, dgamma);
                bump(*beta, dbeta);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.vals[*a].ncols();
                bump(*a, gout.slice(s![.., ..ca]).to_owned());
                bump(*b, gout.slice(s![.., ca..]).to_owned());
            }
            Op::ConcatRows(a, b) => {
                let ra = self.vals[*a].nrows();
                bump(*a, gout.slice(s![..ra, ..]).to_owned());
                bump(*b, gout.slice(s![ra.., ..]).to_owned());
            }
            Op::SliceRows(a, start, end) => {
                let mut gin = Array2::zeros(self.vals[*a].dim());
                gin.slice_mut(s![*start..*end, ..]).assign(gout);
                bump(*a, gin);
            }
            Op::SliceCols(a, start, end) => {
                let mut gin = Array2::zeros(self.vals[*a].dim());
                gin.slice_mut(s![.., *start..*end]).assign(gout);
                bump(*a, gin);
            }
            Op::Transpose(a) => bump(*a, gout.t().to_owned()),
            Op::GatherRows(a, indices) => {
                let mut gin = Array2::zeros(self.vals[*a].dim());
                for (k, &i) in indices.iter().enumerate() {
                    let mut row = gin.row_mut(i);
                    row += &gout.row(k);
                }
                bump(*a, gin);
            }
            Op::SegmentSumRows { x, segments } => {
                let mut gin = Array2::zeros(self.vals[*x].dim());
                for (k, &seg) in segments.iter().enumerate() {
                    gin.row_mut(k).assign(&gout.row(seg));
                }
                bump(*x, gin);
            }
            Op::SumAll(a) => {
                let g = gout[(0, 0)];
                bump(*a, Array2::from_elem(self.vals[*a].dim(), g));
            }
        }
    }
}

pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: VarId) -> Option<&Array2<f64>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient for `id`, or zeros of the given shape when the variable did
    /// not influence the loss.
    pub fn get_or_zeros(&self, id: VarId, shape: (usize, usize)) -> Array2<f64> {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Array2::zeros(shape),
        }
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows_arr(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - max).exp());
        let total = row.sum();
        row.mapv_inplace(|x| x / total);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central finite differences of `f` with respect to leaf `which`.
    fn finite_diff(
        f: &dyn Fn(&[Array2<f64>]) -> f64,
        leaves: &[Array2<f64>],
        which: usize,
    ) -> Array2<f64> {
        let h = 1e-6;
        let mut grad = Array2::zeros(leaves[which].dim());
        for idx in 0..leaves[which].len() {
            let (r, c) = (idx / leaves[which].ncols(), idx % leaves[which].ncols());
            let mut plus = leaves.to_vec();
            plus[which][(r, c)] += h;
            let mut minus = leaves.to_vec();
            minus[which][(r, c)] -= h;
            grad[(r, c)] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        grad
    }

    fn check_grads(f: &dyn Fn(&mut Tape, &[VarId]) -> VarId, leaves: Vec<Array2<f64>>) {
        let eval = |arrays: &[Array2<f64>]| -> f64 {
            let mut tape = Tape::new();
            let ids: Vec<VarId> = arrays.iter().map(|a| tape.leaf(a.clone(), true)).collect();
            let out = f(&mut tape, &ids);
            tape.value(out)[(0, 0)]
        };
        let mut tape = Tape::new();
        let ids: Vec<VarId> = leaves.iter().map(|a| tape.leaf(a.clone(), true)).collect();
        let out = f(&mut tape, &ids);
        let grads = tape.backward(out);
        for (w, &id) in ids.iter().enumerate() {
            let analytic = grads.get_or_zeros(id, leaves[w].dim());
            let numeric = finite_diff(&eval, &leaves, w);
            for (a, n) in analytic.iter().zip(numeric.iter()) {
                let denom = a.abs().max(n.abs()).max(1e-6);
                assert!(
                    (a - n).abs() / denom < 1e-4,
                    "leaf {w}: analytic {a} vs numeric {n}"
                );
            }
        }
    }

    #[test]
    fn matmul_chain_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let leaves = vec![
            rand_mat(&mut rng, 3, 4),
            rand_mat(&mut rng, 4, 2),
            rand_mat(&mut rng, 1, 2),
        ];
        check_grads(
            &|t, ids| {
                let h = t.matmul(ids[0], ids[1]);
                let h = t.add_row(h, ids[2]);
                let h = t.silu(h);
                let sq = t.square(h);
                t.sum_all(sq)
            },
            leaves,
        );
    }

    #[test]
    fn softmax_and_layernorm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let leaves = vec![
            rand_mat(&mut rng, 4, 5),
            rand_mat(&mut rng, 1, 5),
            rand_mat(&mut rng, 1, 5),
        ];
        check_grads(
            &|t, ids| {
                let ln = t.layer_norm(ids[0], ids[1], ids[2]);
                let sm = t.softmax_rows(ln);
                let lg = t.log_softmax_rows(sm);
                let m = t.mul(sm, lg);
                t.sum_all(m)
            },
            leaves,
        );
    }

    #[test]
    fn gather_segment_concat_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let leaves = vec![rand_mat(&mut rng, 4, 3), rand_mat(&mut rng, 4, 3)];
        let idx = Rc::new(vec![0usize, 2, 1, 3, 3, 0]);
        let seg = Rc::new(vec![0usize, 0, 1, 1, 2, 2]);
        check_grads(
            &|t, ids| {
                let g = t.gather_rows(ids[0], idx.clone());
                let g2 = t.gather_rows(ids[1], idx.clone());
                let cat = t.concat_cols(g, g2);
                let agg = t.segment_sum_rows(cat, seg.clone(), 3);
                let sp = t.softplus(agg);
                let sg = t.sigmoid(sp);
                t.sum_all(sg)
            },
            leaves,
        );
    }

    #[test]
    fn slices_transpose_rows_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let leaves = vec![rand_mat(&mut rng, 5, 4), rand_mat(&mut rng, 1, 4)];
        check_grads(
            &|t, ids| {
                let top = t.slice_rows(ids[0], 0, 2);
                let bottom = t.slice_rows(ids[0], 2, 5);
                let btop = t.mul_row(top, ids[1]);
                let tt = t.transpose(btop);
                let prod = t.matmul(bottom, tt);
                let left = t.slice_cols(prod, 0, 1);
                let right = t.slice_cols(prod, 1, 2);
                let s = t.sub(left, right);
                let sq = t.square(s);
                t.sum_all(sq)
            },
            leaves,
        );
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Array2::from_elem((2, 2), 2.0), true);
        let c = tape.constant(Array2::from_elem((2, 2), 3.0));
        let m = tape.mul(a, c);
        let loss = tape.sum_all(m);
        let grads = tape.backward(loss);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(a).unwrap(), &Array2::from_elem((2, 2), 3.0));
    }

    #[test]
    fn fan_out_accumulates() {
        // y = sum(a * a + a) ; dy/da = 2a + 1
        let mut tape = Tape::new();
        let a = tape.leaf(Array2::from_elem((2, 3), 1.5), true);
        let sq = tape.mul(a, a);
        let s = tape.add(sq, a);
        let loss = tape.sum_all(s);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(a).unwrap(), &Array2::from_elem((2, 3), 4.0));
    }
}
