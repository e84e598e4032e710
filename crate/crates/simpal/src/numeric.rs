//! Dense double-precision matrices and reverse-mode gradients for the
//! fixed layer set used by the model: affine, ReLU, log-softmax,
//! negative-log-likelihood mean, and scalar averaging.
//!
//! A [`Tape`] records the forward pass; [`Tape::backward`] replays it to
//! produce exact partial derivatives of a scalar with respect to every
//! leaf. [`grad_check`] is the independent finite-difference oracle.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
}

/// Row-major dense matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericError> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(NumericError::Shape(format!(
                "{}x{} matrix needs {} entries, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericError> {
        let r = rows.len();
        let c = rows.first().map_or(0, |v| v.len());
        if rows.iter().any(|v| v.len() != c) {
            return Err(NumericError::Shape("ragged rows".into()));
        }
        Self::new(r, c, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, NumericError> {
        if self.cols != other.rows {
            return Err(NumericError::Shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let orow = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }
}

/// Numerically stable softmax with max subtraction.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Row-wise log-softmax via log-sum-exp, never log of a softmax output.
pub fn log_softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    v.iter().map(|x| x - lse).collect()
}

pub type NodeId = usize;

enum Op {
    Leaf,
    /// C = A B
    MatMul(NodeId, NodeId),
    /// C = X + 1 b, with b a 1xN row broadcast over the rows of X.
    AddRowBroadcast(NodeId, NodeId),
    Relu(NodeId),
    LogSoftmaxRows(NodeId),
    /// Scalar: -(1/B) sum_b X[b, labels[b]] on a log-probability matrix.
    NllMean(NodeId, Vec<usize>),
    /// Scalar: mean of scalar nodes.
    MeanOfScalars(Vec<NodeId>),
    /// Row gather: C[k, .] = X[indices[k], .]
    SelectRows(NodeId, Vec<usize>),
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Single-use record of one forward pass. Build the graph through the
/// op methods, then call [`Tape::backward`] on the scalar root.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, m: Matrix) -> NodeId {
        self.push(m, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id].value.data[0]
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericError> {
        let v = self.nodes[a].value.matmul(&self.nodes[b].value)?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn add_row_broadcast(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, NumericError> {
        let xm = &self.nodes[x].value;
        let bm = &self.nodes[bias].value;
        if bm.rows != 1 || bm.cols != xm.cols {
            return Err(NumericError::Shape(format!(
                "bias 1x{} against {}x{}",
                bm.cols, xm.rows, xm.cols
            )));
        }
        let mut v = xm.clone();
        for r in 0..v.rows {
            for c in 0..v.cols {
                v.data[r * v.cols + c] += bm.data[c];
            }
        }
        Ok(self.push(v, Op::AddRowBroadcast(x, bias)))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut v = self.nodes[x].value.clone();
        for e in v.data.iter_mut() {
            if *e < 0.0 {
                *e = 0.0;
            }
        }
        self.push(v, Op::Relu(x))
    }

    pub fn log_softmax_rows(&mut self, x: NodeId) -> NodeId {
        let xm = &self.nodes[x].value;
        let mut v = Matrix::zeros(xm.rows, xm.cols);
        for r in 0..xm.rows {
            let ls = log_softmax(xm.row(r));
            v.data[r * xm.cols..(r + 1) * xm.cols].copy_from_slice(&ls);
        }
        self.push(v, Op::LogSoftmaxRows(x))
    }

    pub fn nll_mean(&mut self, logp: NodeId, labels: &[usize]) -> Result<NodeId, NumericError> {
        let xm = &self.nodes[logp].value;
        if labels.len() != xm.rows {
            return Err(NumericError::Shape(format!(
                "{} labels for {} rows",
                labels.len(),
                xm.rows
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= xm.cols) {
            return Err(NumericError::Shape(format!(
                "label {} out of range for {} classes",
                bad, xm.cols
            )));
        }
        let b = xm.rows as f64;
        let s = labels
            .iter()
            .enumerate()
            .map(|(r, &y)| -xm.get(r, y))
            .sum::<f64>()
            / b;
        let v = Matrix::new(1, 1, vec![s]).unwrap();
        Ok(self.push(v, Op::NllMean(logp, labels.to_vec())))
    }

    pub fn mean_of_scalars(&mut self, ids: &[NodeId]) -> NodeId {
        let s = ids.iter().map(|&i| self.scalar(i)).sum::<f64>() / ids.len() as f64;
        let v = Matrix::new(1, 1, vec![s]).unwrap();
        self.push(v, Op::MeanOfScalars(ids.to_vec()))
    }

    pub fn select_rows(&mut self, x: NodeId, indices: &[usize]) -> Result<NodeId, NumericError> {
        let xm = &self.nodes[x].value;
        if let Some(&bad) = indices.iter().find(|&&i| i >= xm.rows) {
            return Err(NumericError::Shape(format!(
                "row index {} out of range for {} rows",
                bad, xm.rows
            )));
        }
        let mut v = Matrix::zeros(indices.len(), xm.cols);
        for (k, &i) in indices.iter().enumerate() {
            v.data[k * xm.cols..(k + 1) * xm.cols].copy_from_slice(xm.row(i));
        }
        Ok(self.push(v, Op::SelectRows(x, indices.to_vec())))
    }

    /// Reverse pass. Returns one gradient per node, aligned with NodeIds;
    /// the root is seeded with 1 and must be a 1x1 scalar.
    pub fn backward(&self, root: NodeId) -> Result<Vec<Matrix>, NumericError> {
        let rv = &self.nodes[root].value;
        if rv.rows != 1 || rv.cols != 1 {
            return Err(NumericError::Shape("backward root must be scalar".into()));
        }
        if !rv.data[0].is_finite() {
            return Err(NumericError::NonFinite("loss"));
        }
        let mut grads: Vec<Matrix> = self
            .nodes
            .iter()
            .map(|n| Matrix::zeros(n.value.rows, n.value.cols))
            .collect();
        grads[root].data[0] = 1.0;

        for id in (0..=root).rev() {
            let g = grads[id].clone();
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = g.matmul(&self.nodes[*b].value.transpose())?;
                    let db = self.nodes[*a].value.transpose().matmul(&g)?;
                    accumulate(&mut grads[*a], &da);
                    accumulate(&mut grads[*b], &db);
                }
                Op::AddRowBroadcast(x, bias) => {
                    accumulate(&mut grads[*x], &g);
                    let gb = &mut grads[*bias];
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            gb.data[c] += g.data[r * g.cols + c];
                        }
                    }
                }
                Op::Relu(x) => {
                    let xv = &self.nodes[*x].value;
                    let gx = &mut grads[*x];
                    for (i, &xe) in xv.data.iter().enumerate() {
                        if xe > 0.0 {
                            gx.data[i] += g.data[i];
                        }
                    }
                }
                Op::LogSoftmaxRows(x) => {
                    // dX = dY - softmax(X) * rowsum(dY)
                    let xv = &self.nodes[*x].value;
                    let gx = &mut grads[*x];
                    for r in 0..xv.rows {
                        let p = softmax(xv.row(r));
                        let rowsum: f64 = g.row(r).iter().sum();
                        for c in 0..xv.cols {
                            gx.data[r * xv.cols + c] += g.get(r, c) - p[c] * rowsum;
                        }
                    }
                }
                Op::NllMean(x, labels) => {
                    let gs = g.data[0];
                    let b = labels.len() as f64;
                    let gx = &mut grads[*x];
                    for (r, &y) in labels.iter().enumerate() {
                        gx.data[r * gx.cols + y] -= gs / b;
                    }
                }
                Op::MeanOfScalars(ids) => {
                    let gs = g.data[0] / ids.len() as f64;
                    for &i in ids {
                        grads[i].data[0] += gs;
                    }
                }
                Op::SelectRows(x, indices) => {
                    let gx = &mut grads[*x];
                    for (k, &i) in indices.iter().enumerate() {
                        for c in 0..g.cols {
                            gx.data[i * gx.cols + c] += g.get(k, c);
                        }
                    }
                }
            }
        }
        Ok(grads)
    }
}

fn accumulate(dst: &mut Matrix, src: &Matrix) {
    for (d, s) in dst.data.iter_mut().zip(&src.data) {
        *d += s;
    }
}

/// Central finite-difference oracle. `f` evaluates the loss and its
/// analytic gradients at the given parameter tensors; only the loss value
/// is used for the numeric side. Returns the max relative error
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
pub fn grad_check<F>(f: F, params: &[Matrix], step: f64) -> Result<f64, NumericError>
where
    F: Fn(&[Matrix]) -> Result<(f64, Vec<Matrix>), NumericError>,
{
    assert!(step > 0.0);
    let (loss, analytic) = f(params)?;
    if !loss.is_finite() {
        return Err(NumericError::NonFinite("loss"));
    }
    let mut worst = 0.0f64;
    let mut work: Vec<Matrix> = params.to_vec();
    for (t, p) in params.iter().enumerate() {
        for i in 0..p.data.len() {
            let orig = p.data[i];
            work[t].data[i] = orig + step;
            let (lp, _) = f(&work)?;
            work[t].data[i] = orig - step;
            let (lm, _) = f(&work)?;
            work[t].data[i] = orig;
            if !lp.is_finite() || !lm.is_finite() {
                return Err(NumericError::NonFinite("perturbed loss"));
            }
            let numeric = (lp - lm) / (2.0 * step);
            let a = analytic[t].data[i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let i = Matrix::identity(2);
        assert_eq!(i.matmul(&a).unwrap(), a);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let z = Matrix::zeros(2, 2);
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(z.matmul(&a).unwrap(), Matrix::zeros(2, 2));
    }

    #[test]
    fn matmul_shape_mismatch_rejected() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn softmax_symmetry_and_exact_case() {
        let p = softmax(&[0.0, 0.0]);
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);
        let q = softmax(&[0.0, 3.0f64.ln()]);
        assert!((q[0] - 0.25).abs() < 1e-12);
        assert!((q[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        let v = [1.0, -2.0, 0.5];
        let a = softmax(&v);
        let b = softmax(&v.map(|x| x + 123.4));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_large_logits_stable() {
        let p = softmax(&[1e4, 1e4 - 1.0]);
        assert!(p.iter().all(|x| x.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn grad_check_quadratic() {
        // loss = 0.5 * ||W||^2, exact gradient W
        let w = Matrix::from_rows(&[vec![0.1, -0.2], vec![0.3, 0.4]]).unwrap();
        let err = grad_check(
            |ps| {
                let w = &ps[0];
                let loss = 0.5 * w.data().iter().map(|x| x * x).sum::<f64>();
                Ok((loss, vec![w.clone()]))
            },
            &[w],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-10, "err = {err}");
    }

    #[test]
    fn grad_check_constant_loss() {
        let w = Matrix::zeros(2, 2);
        let err = grad_check(|ps| Ok((7.0, vec![Matrix::zeros(ps[0].rows(), ps[0].cols())])), &[w], 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn tape_nll_matches_hand_value() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::from_rows(&[vec![0.0, 3.0f64.ln()]]).unwrap());
        let lp = tape.log_softmax_rows(x);
        let loss = tape.nll_mean(lp, &[1]).unwrap();
        assert!((tape.scalar(loss) - (-(0.75f64.ln()))).abs() < 1e-12);
    }

    #[test]
    fn tape_backward_through_all_ops() {
        // Small affine + relu + log-softmax + nll graph checked against
        // finite differences.
        let w = Matrix::from_rows(&[vec![0.4, -0.2, 0.7], vec![-0.5, 0.9, 0.1]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.05, -0.1, 0.2]]).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, -0.3], vec![0.2, 0.8], vec![-1.1, 0.4]]).unwrap();
        let labels = vec![0usize, 2, 1];
        let eval = |ps: &[Matrix]| -> Result<(f64, Vec<Matrix>), NumericError> {
            let mut tape = Tape::new();
            let wid = tape.leaf(ps[0].clone());
            let bid = tape.leaf(ps[1].clone());
            let xid = tape.leaf(x.clone());
            let sel = tape.select_rows(xid, &[0, 1, 2])?;
            let z = tape.matmul(sel, wid)?;
            let z = tape.add_row_broadcast(z, bid)?;
            let z = tape.relu(z);
            let lp = tape.log_softmax_rows(z);
            let l = tape.nll_mean(lp, &labels)?;
            let root = tape.mean_of_scalars(&[l]);
            let grads = tape.backward(root)?;
            Ok((tape.scalar(root), vec![grads[wid].clone(), grads[bid].clone()]))
        };
        let err = grad_check(eval, &[w, b], 1e-5).unwrap();
        assert!(err < 1e-6, "err = {err}");
    }
}
