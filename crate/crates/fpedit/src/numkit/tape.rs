//! Reverse-mode automatic differentiation over matrix-valued primitives.
//!
//! A [`GradTape`] records a forward computation as a flat list of nodes,
//! each holding its value and the primitive that produced it. Calling
//! [`GradTape::gradient`] on a scalar node walks the list backwards and
//! accumulates adjoints. The op set is exactly what the toy transformer
//! needs — matmul, transpose, add, scale, GELU, layer norm, causal
//! softmax, embedding gather, column slice/concat, row replacement, and
//! a fused cross-entropy head.
//!
//! Replaying a tape re-executes the same kernels in the same order, so a
//! replayed value is bit-identical to the recorded one.

use crate::error::{Error, Result};
use crate::numkit::kernels;
use crate::numkit::Matrix;

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Slot, Slot),
    Transpose(Slot),
    Add(Slot, Slot),
    Scale(Slot, f64),
    Gelu(Slot),
    LayerNorm { x: Slot, gain: Slot, bias: Slot },
    CausalSoftmax(Slot),
    Gather { table: Slot, ids: Vec<usize> },
    SliceCols { x: Slot, start: usize, len: usize },
    ConcatCols(Vec<Slot>),
    ReplaceRow { base: Slot, row: usize, value: Slot },
    CrossEntropy { logits: Slot, targets: Vec<(usize, usize)>, mean: bool },
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`GradTape::gradient`]. Slots that the loss does
/// not depend on have no entry; treat that as a zero gradient.
pub struct Gradients {
    adj: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, slot: Slot) -> Option<&Matrix> {
        self.adj.get(slot.0).and_then(|m| m.as_ref())
    }
}

impl GradTape {
    pub fn new() -> GradTape {
        GradTape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, slot: Slot) -> Result<&Matrix> {
        self.check(slot)?;
        Ok(&self.nodes[slot.0].value)
    }

    /// Scalar convenience accessor for 1x1 nodes (losses).
    pub fn scalar(&self, slot: Slot) -> Result<f64> {
        let v = self.value(slot)?;
        if v.shape() != (1, 1) {
            return Err(Error::usage(format!("slot holds a {}x{} value, not a scalar", v.rows(), v.cols())));
        }
        Ok(v.get(0, 0))
    }

    fn check(&self, slot: Slot) -> Result<()> {
        if slot.0 >= self.nodes.len() {
            return Err(Error::usage(format!(
                "slot {} was never recorded on this tape (len {})",
                slot.0,
                self.nodes.len()
            )));
        }
        Ok(())
    }

    fn push(&mut self, op: Op) -> Result<Slot> {
        let value = eval_op(&op, &|i| &self.nodes[i].value)?;
        self.nodes.push(Node { value, op });
        Ok(Slot(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Matrix) -> Slot {
        self.nodes.push(Node { value, op: Op::Leaf });
        Slot(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Slot, b: Slot) -> Result<Slot> {
        self.check(a)?;
        self.check(b)?;
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Slot) -> Result<Slot> {
        self.check(a)?;
        self.push(Op::Transpose(a))
    }

    pub fn add(&mut self, a: Slot, b: Slot) -> Result<Slot> {
        self.check(a)?;
        self.check(b)?;
        self.push(Op::Add(a, b))
    }

    pub fn scale(&mut self, a: Slot, c: f64) -> Result<Slot> {
        self.check(a)?;
        self.push(Op::Scale(a, c))
    }

    pub fn gelu(&mut self, a: Slot) -> Result<Slot> {
        self.check(a)?;
        self.push(Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: Slot, gain: Slot, bias: Slot) -> Result<Slot> {
        self.check(x)?;
        self.check(gain)?;
        self.check(bias)?;
        self.push(Op::LayerNorm { x, gain, bias })
    }

    pub fn causal_softmax(&mut self, a: Slot) -> Result<Slot> {
        self.check(a)?;
        self.push(Op::CausalSoftmax(a))
    }

    pub fn gather(&mut self, table: Slot, ids: &[usize]) -> Result<Slot> {
        self.check(table)?;
        let rows = self.nodes[table.0].value.rows();
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!("gather id {bad} out of range for {rows} rows")));
        }
        self.push(Op::Gather { table, ids: ids.to_vec() })
    }

    pub fn slice_cols(&mut self, x: Slot, start: usize, len: usize) -> Result<Slot> {
        self.check(x)?;
        let cols = self.nodes[x.0].value.cols();
        if start + len > cols {
            return Err(Error::invalid(format!(
                "slice {start}..{} out of range for {cols} columns",
                start + len
            )));
        }
        self.push(Op::SliceCols { x, start, len })
    }

    pub fn concat_cols(&mut self, parts: &[Slot]) -> Result<Slot> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_cols needs at least one part".to_string()));
        }
        for &p in parts {
            self.check(p)?;
        }
        self.push(Op::ConcatCols(parts.to_vec()))
    }

    pub fn replace_row(&mut self, base: Slot, row: usize, value: Slot) -> Result<Slot> {
        self.check(base)?;
        self.check(value)?;
        let b = &self.nodes[base.0].value;
        let v = &self.nodes[value.0].value;
        if row >= b.rows() {
            return Err(Error::invalid(format!("row {row} out of range for {} rows", b.rows())));
        }
        if v.shape() != (1, b.cols()) {
            return Err(Error::invalid(format!(
                "replacement row must be 1x{}, got {}x{}",
                b.cols(),
                v.rows(),
                v.cols()
            )));
        }
        self.push(Op::ReplaceRow { base, row, value })
    }

    pub fn cross_entropy(&mut self, logits: Slot, targets: &[(usize, usize)], mean: bool) -> Result<Slot> {
        self.check(logits)?;
        self.push(Op::CrossEntropy { logits, targets: targets.to_vec(), mean })
    }

    /// Reverse pass from a scalar loss node. Returns one adjoint per
    /// recorded node; leaves the loss does not depend on stay `None`.
    pub fn gradient(&self, loss: Slot) -> Result<Gradients> {
        self.check(loss)?;
        let lv = &self.nodes[loss.0].value;
        if lv.shape() != (1, 1) {
            return Err(Error::usage(format!(
                "gradient needs a scalar loss, slot holds {}x{}",
                lv.rows(),
                lv.cols()
            )));
        }
        let mut adj: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Matrix::from_vec(1, 1, vec![1.0]).unwrap());

        for i in (0..=loss.0).rev() {
            let g = match adj[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(i, &g, &mut adj)?;
            adj[i] = Some(g);
        }
        Ok(Gradients { adj })
    }

    fn backward_node(&self, i: usize, g: &Matrix, adj: &mut [Option<Matrix>]) -> Result<()> {
        let val = |s: Slot| &self.nodes[s.0].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = g.matmul(&val(*b).transpose())?;
                let db = val(*a).transpose().matmul(g)?;
                accumulate(adj, *a, da)?;
                accumulate(adj, *b, db)?;
            }
            Op::Transpose(a) => {
                accumulate(adj, *a, g.transpose())?;
            }
            Op::Add(a, b) => {
                accumulate(adj, *a, g.clone())?;
                accumulate(adj, *b, g.clone())?;
            }
            Op::Scale(a, c) => {
                accumulate(adj, *a, g.scale(*c))?;
            }
            Op::Gelu(a) => {
                let x = val(*a);
                let mut da = g.clone();
                for (dv, &xv) in da.data_mut().iter_mut().zip(x.data().iter()) {
                    *dv *= kernels::gelu_prime(xv);
                }
                accumulate(adj, *a, da)?;
            }
            Op::LayerNorm { x, gain, bias } => {
                let xm = val(*x);
                let gm = val(*gain);
                let d = xm.cols() as f64;
                let mut dx = Matrix::zeros(xm.rows(), xm.cols());
                let mut dgain = Matrix::zeros(1, xm.cols());
                let mut dbias = Matrix::zeros(1, xm.cols());
                for r in 0..xm.rows() {
                    let row = xm.row(r);
                    let (mean, var) = kernels::row_mean_var(row);
                    let inv = 1.0 / (var + kernels::LN_EPS).sqrt();
                    let grow = g.row(r);
                    // xhat and the two reduction terms of the LN backward.
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    let mut dxhat = vec![0.0; row.len()];
                    for c in 0..row.len() {
                        let xhat = (row[c] - mean) * inv;
                        dgain.row_mut(0)[c] += grow[c] * xhat;
                        dbias.row_mut(0)[c] += grow[c];
                        let dh = grow[c] * gm.get(0, c);
                        dxhat[c] = dh;
                        sum_dxhat += dh;
                        sum_dxhat_xhat += dh * xhat;
                    }
                    let drow = dx.row_mut(r);
                    for c in 0..row.len() {
                        let xhat = (row[c] - mean) * inv;
                        drow[c] = inv * (dxhat[c] - sum_dxhat / d - xhat * sum_dxhat_xhat / d);
                    }
                }
                accumulate(adj, *x, dx)?;
                accumulate(adj, *gain, dgain)?;
                accumulate(adj, *bias, dbias)?;
            }
            Op::CausalSoftmax(a) => {
                let p = &self.nodes[i].value;
                let mut da = Matrix::zeros(p.rows(), p.cols());
                for r in 0..p.rows() {
                    let prow = &p.row(r)[..=r];
                    let grow = &g.row(r)[..=r];
                    let dot: f64 = prow.iter().zip(grow.iter()).map(|(&pv, &gv)| pv * gv).sum();
                    let drow = da.row_mut(r);
                    for c in 0..=r {
                        drow[c] = prow[c] * (grow[c] - dot);
                    }
                }
                accumulate(adj, *a, da)?;
            }
            Op::Gather { table, ids } => {
                let t = val(*table);
                let mut dt = Matrix::zeros(t.rows(), t.cols());
                for (r, &id) in ids.iter().enumerate() {
                    let grow = g.row(r);
                    let trow = dt.row_mut(id);
                    for c in 0..grow.len() {
                        trow[c] += grow[c];
                    }
                }
                accumulate(adj, *table, dt)?;
            }
            Op::SliceCols { x, start, len } => {
                let xm = val(*x);
                let mut dx = Matrix::zeros(xm.rows(), xm.cols());
                for r in 0..xm.rows() {
                    dx.row_mut(r)[*start..start + len].copy_from_slice(g.row(r));
                }
                accumulate(adj, *x, dx)?;
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = val(p);
                    let mut dp = Matrix::zeros(pv.rows(), pv.cols());
                    for r in 0..pv.rows() {
                        dp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + pv.cols()]);
                    }
                    offset += pv.cols();
                    accumulate(adj, p, dp)?;
                }
            }
            Op::ReplaceRow { base, row, value } => {
                let mut dbase = g.clone();
                for v in dbase.row_mut(*row) {
                    *v = 0.0;
                }
                accumulate(adj, *base, dbase)?;
                accumulate(adj, *value, Matrix::row_vector(g.row(*row)))?;
            }
            Op::CrossEntropy { logits, targets, mean } => {
                let lm = val(*logits);
                let coeff = g.get(0, 0) * if *mean { 1.0 / targets.len() as f64 } else { 1.0 };
                let mut dl = Matrix::zeros(lm.rows(), lm.cols());
                for &(row, class) in targets {
                    let probs = kernels::softmax(lm.row(row));
                    let drow = dl.row_mut(row);
                    for c in 0..probs.len() {
                        drow[c] += coeff * probs[c];
                    }
                    drow[class] -= coeff;
                }
                accumulate(adj, *logits, dl)?;
            }
        }
        Ok(())
    }

    /// Recompute every node from the recorded leaves, in recording order,
    /// and return the value at `slot`. Identical kernels and identical
    /// order make the result bit-equal to the original forward pass.
    pub fn replay_value(&self, slot: Slot) -> Result<Matrix> {
        self.check(slot)?;
        let mut values: Vec<Matrix> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Leaf => node.value.clone(),
                op => eval_op(op, &|i| &values[i])?,
            };
            values.push(v);
        }
        Ok(values[slot.0].clone())
    }
}

fn accumulate(adj: &mut [Option<Matrix>], slot: Slot, delta: Matrix) -> Result<()> {
    match &mut adj[slot.0] {
        Some(existing) => existing.axpy(1.0, &delta),
        none => {
            *none = Some(delta);
            Ok(())
        }
    }
}

/// Single forward evaluation of one op; `get` resolves input slots to
/// already-computed values. Recording and replay both call this.
fn eval_op<'a>(op: &Op, get: &dyn Fn(usize) -> &'a Matrix) -> Result<Matrix> {
    match op {
        Op::Leaf => Err(Error::usage("leaf nodes carry their own value".to_string())),
        Op::MatMul(a, b) => get(a.0).matmul(get(b.0)),
        Op::Transpose(a) => Ok(get(a.0).transpose()),
        Op::Add(a, b) => get(a.0).add(get(b.0)),
        Op::Scale(a, c) => Ok(get(a.0).scale(*c)),
        Op::Gelu(a) => Ok(kernels::gelu_matrix(get(a.0))),
        Op::LayerNorm { x, gain, bias } => kernels::layer_norm(get(x.0), get(gain.0), get(bias.0)),
        Op::CausalSoftmax(a) => kernels::causal_softmax(get(a.0)),
        Op::Gather { table, ids } => {
            let t = get(table.0);
            let mut out = Matrix::zeros(ids.len(), t.cols());
            for (r, &id) in ids.iter().enumerate() {
                out.row_mut(r).copy_from_slice(t.row(id));
            }
            Ok(out)
        }
        Op::SliceCols { x, start, len } => {
            let xm = get(x.0);
            let mut out = Matrix::zeros(xm.rows(), *len);
            for r in 0..xm.rows() {
                out.row_mut(r).copy_from_slice(&xm.row(r)[*start..start + len]);
            }
            Ok(out)
        }
        Op::ConcatCols(parts) => {
            let total: usize = parts.iter().map(|&p| get(p.0).cols()).sum();
            let rows = get(parts[0].0).rows();
            for &p in parts {
                if get(p.0).rows() != rows {
                    return Err(Error::invalid("concat_cols parts disagree on row count".to_string()));
                }
            }
            let mut out = Matrix::zeros(rows, total);
            let mut offset = 0;
            for &p in parts {
                let pv = get(p.0);
                for r in 0..rows {
                    out.row_mut(r)[offset..offset + pv.cols()].copy_from_slice(pv.row(r));
                }
                offset += pv.cols();
            }
            Ok(out)
        }
        Op::ReplaceRow { base, row, value } => {
            let mut out = get(base.0).clone();
            out.row_mut(*row).copy_from_slice(get(value.0).row(0));
            Ok(out)
        }
        Op::CrossEntropy { logits, targets, mean } => {
            let loss = kernels::cross_entropy(get(logits.0), targets, *mean)?;
            Matrix::from_vec(1, 1, vec![loss])
        }
    }
}

/// Central finite differences of a scalar function, the reference
/// gradient for everything differentiable in this crate.
pub fn finite_difference_gradient<F>(mut f: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive".to_string()));
    }
    let mut work = theta.to_vec();
    let mut grad = vec![0.0; theta.len()];
    for i in 0..theta.len() {
        work[i] = theta[i] + h;
        let fp = f(&work)?;
        work[i] = theta[i] - h;
        let fm = f(&work)?;
        work[i] = theta[i];
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::matrix::randn_matrix;
    use rand::SeedableRng;

    #[test]
    fn quadratic_form_gradient() {
        // loss = x^T x at x = (1, 2): gradient 2x = (2, 4).
        let mut tape = GradTape::new();
        let x = tape.leaf(Matrix::col_vector(&[1.0, 2.0]));
        let xt = tape.transpose(x).unwrap();
        let loss = tape.matmul(xt, x).unwrap();
        assert_eq!(tape.scalar(loss).unwrap(), 5.0);
        let grads = tape.gradient(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut tape = GradTape::new();
        let logits = tape.leaf(Matrix::row_vector(&[0.2, -1.0, 0.5]));
        let loss = tape.cross_entropy(logits, &[(0, 2)], true).unwrap();
        let grads = tape.gradient(loss).unwrap();
        let p = kernels::softmax(&[0.2, -1.0, 0.5]);
        let g = grads.get(logits).unwrap();
        assert!((g.get(0, 0) - p[0]).abs() < 1e-14);
        assert!((g.get(0, 1) - p[1]).abs() < 1e-14);
        assert!((g.get(0, 2) - (p[2] - 1.0)).abs() < 1e-14);
    }

    /// Dense-op composite program checked against central differences.
    #[test]
    fn composite_program_matches_finite_differences() {
        let n = 3;
        let run = |a_data: &[f64], g_data: &[f64]| -> Result<f64> {
            let mut tape = GradTape::new();
            let a = tape.leaf(Matrix::from_vec(n, n, a_data.to_vec())?);
            let b = tape.leaf(Matrix::from_vec(
                n,
                n,
                vec![0.5, -0.2, 0.1, 0.3, 0.8, -0.4, -0.6, 0.2, 0.9],
            )?);
            let gain = tape.leaf(Matrix::row_vector(g_data));
            let bias = tape.leaf(Matrix::row_vector(&[0.1, -0.2, 0.3]));
            let c = tape.matmul(a, b)?;
            let d = tape.gelu(c)?;
            let e = tape.layer_norm(d, gain, bias)?;
            let s = tape.causal_softmax(e)?;
            let loss = tape.cross_entropy(s, &[(0, 0), (1, 1), (2, 0)], true)?;
            tape.scalar(loss)
        };

        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(21);
        let a0 = randn_matrix(n, n, 1.0, &mut rng);
        let g0 = [1.1, 0.9, 1.3];

        // Tape gradient.
        let mut tape = GradTape::new();
        let a = tape.leaf(a0.clone());
        let b = tape.leaf(
            Matrix::from_vec(n, n, vec![0.5, -0.2, 0.1, 0.3, 0.8, -0.4, -0.6, 0.2, 0.9]).unwrap(),
        );
        let gain = tape.leaf(Matrix::row_vector(&g0));
        let bias = tape.leaf(Matrix::row_vector(&[0.1, -0.2, 0.3]));
        let c = tape.matmul(a, b).unwrap();
        let d = tape.gelu(c).unwrap();
        let e = tape.layer_norm(d, gain, bias).unwrap();
        let s = tape.causal_softmax(e).unwrap();
        let loss = tape.cross_entropy(s, &[(0, 0), (1, 1), (2, 0)], true).unwrap();
        let grads = tape.gradient(loss).unwrap();

        let fd_a = finite_difference_gradient(
            |th| run(th, &g0),
            a0.data(),
            1e-5,
        )
        .unwrap();
        let ga = grads.get(a).unwrap();
        for (i, &fd) in fd_a.iter().enumerate() {
            assert!((ga.data()[i] - fd).abs() < 1e-6, "dA[{i}]: {} vs {}", ga.data()[i], fd);
        }

        let fd_g = finite_difference_gradient(|th| run(a0.data(), th), &g0, 1e-5).unwrap();
        let gg = grads.get(gain).unwrap();
        for (i, &fd) in fd_g.iter().enumerate() {
            assert!((gg.data()[i] - fd).abs() < 1e-6, "dgain[{i}]");
        }
    }

    /// Structural ops (gather, slice, concat, replace_row, add, scale)
    /// against central differences.
    #[test]
    fn structural_program_matches_finite_differences() {
        let run = |t_data: &[f64], r_data: &[f64]| -> Result<f64> {
            let mut tape = GradTape::new();
            let table = tape.leaf(Matrix::from_vec(4, 4, t_data.to_vec())?);
            let rrow = tape.leaf(Matrix::row_vector(r_data));
            let x = tape.gather(table, &[2, 0, 2])?;
            let left = tape.slice_cols(x, 0, 2)?;
            let right = tape.slice_cols(x, 2, 2)?;
            let swapped = tape.concat_cols(&[right, left])?;
            let patched = tape.replace_row(swapped, 1, rrow)?;
            let scaled = tape.scale(x, 0.5)?;
            let y = tape.add(patched, scaled)?;
            let loss = tape.cross_entropy(y, &[(0, 3), (1, 0), (2, 2)], false)?;
            tape.scalar(loss)
        };

        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(33);
        let t0 = randn_matrix(4, 4, 1.0, &mut rng);
        let r0 = [0.4, -0.3, 0.2, 0.7];

        let mut tape = GradTape::new();
        let table = tape.leaf(t0.clone());
        let rrow = tape.leaf(Matrix::row_vector(&r0));
        let x = tape.gather(table, &[2, 0, 2]).unwrap();
        let left = tape.slice_cols(x, 0, 2).unwrap();
        let right = tape.slice_cols(x, 2, 2).unwrap();
        let swapped = tape.concat_cols(&[right, left]).unwrap();
        let patched = tape.replace_row(swapped, 1, rrow).unwrap();
        let scaled = tape.scale(x, 0.5).unwrap();
        let y = tape.add(patched, scaled).unwrap();
        let loss = tape.cross_entropy(y, &[(0, 3), (1, 0), (2, 2)], false).unwrap();
        let grads = tape.gradient(loss).unwrap();

        let fd_t = finite_difference_gradient(|th| run(th, &r0), t0.data(), 1e-5).unwrap();
        let gt = grads.get(table).unwrap();
        for (i, &fd) in fd_t.iter().enumerate() {
            assert!((gt.data()[i] - fd).abs() < 1e-6, "dtable[{i}]");
        }

        let fd_r = finite_difference_gradient(|th| run(t0.data(), th), &r0, 1e-5).unwrap();
        let gr = grads.get(rrow).unwrap();
        for (i, &fd) in fd_r.iter().enumerate() {
            assert!((gr.data()[i] - fd).abs() < 1e-6, "drow[{i}]");
        }
    }

    #[test]
    fn replay_is_bit_exact() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(9);
        let mut tape = GradTape::new();
        let a = tape.leaf(randn_matrix(4, 4, 1.0, &mut rng));
        let b = tape.leaf(randn_matrix(4, 4, 1.0, &mut rng));
        let c = tape.matmul(a, b).unwrap();
        let d = tape.gelu(c).unwrap();
        let s = tape.causal_softmax(d).unwrap();
        let loss = tape.cross_entropy(s, &[(0, 1), (3, 2)], true).unwrap();
        let recorded = tape.scalar(loss).unwrap();
        let replayed = tape.replay_value(loss).unwrap().get(0, 0);
        assert_eq!(recorded.to_bits(), replayed.to_bits());
    }

    #[test]
    fn gradient_rejects_non_scalar_loss() {
        let mut tape = GradTape::new();
        let a = tape.leaf(Matrix::zeros(2, 2));
        assert!(matches!(tape.gradient(a), Err(crate::Error::Usage(_))));
    }

    #[test]
    fn foreign_slot_is_a_usage_error() {
        let mut t1 = GradTape::new();
        let a = t1.leaf(Matrix::zeros(1, 1));
        let _b = t1.leaf(Matrix::zeros(1, 1));
        let t2 = GradTape::new();
        assert!(matches!(t2.value(a), Err(crate::Error::Usage(_))));
        assert!(matches!(t2.gradient(a), Err(crate::Error::Usage(_))));
    }

    #[test]
    fn unused_leaf_has_no_adjoint() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Matrix::col_vector(&[1.0, 2.0]));
        let unused = tape.leaf(Matrix::col_vector(&[9.0]));
        let xt = tape.transpose(x).unwrap();
        let loss = tape.matmul(xt, x).unwrap();
        let grads = tape.gradient(loss).unwrap();
        assert!(grads.get(unused).is_none());
    }

    #[test]
    fn finite_difference_on_simple_functions() {
        let g = finite_difference_gradient(|x| Ok(x[0] * x[0]), &[3.0], 1e-6).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
        let c = finite_difference_gradient(|_| Ok(7.0), &[1.0, 2.0], 1e-6).unwrap();
        assert_eq!(c, vec![0.0, 0.0]);
        assert!(finite_difference_gradient(|_| Ok(0.0), &[1.0], 0.0).is_err());
    }
}
