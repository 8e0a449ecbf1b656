//! Minimal reverse-mode differentiation over [`Matrix`] values.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order and the backward sweep is a single reverse pass.

use crate::error::{MuserError, Result};

use super::matrix::{
    dot, matmul_at_unchecked, matmul_bt_unchecked, matmul_unchecked, softmax_rows_unchecked,
    softmax_slice, Axis, Matrix,
};

/// Handle to a node on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Exp(Var),
    Tanh(Var),
    Square(Var),
    SoftmaxRows(Var),
    MeanRows(Var),
    SelectRow(Var, usize),
    StackRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    L2NormalizeRows(Var, f64),
    CrossEntropyDiag(Var, Axis),
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Records a scalar-valued computation so its gradient with respect to every
/// leaf can be recovered.
#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

/// Gradients of one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`; leaves the computation never touched get zeros.
    pub fn get(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

fn shape_err(op: &'static str, a: &Matrix, b: &Matrix) -> MuserError {
    MuserError::Shape {
        op,
        left: a.shape_str(),
        right: b.shape_str(),
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Registers an input or parameter.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(shape_err("matmul", av, bv));
        }
        let out = matmul_unchecked(av, bv);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(shape_err("matmul_bt", av, bv));
        }
        let out = matmul_bt_unchecked(av, bv);
        Ok(self.push(out, Op::MatMulBt(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("add", av, bv));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(shape_err("add_row", av, rv));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        self.push(out, Op::Scale(a, c))
    }

    /// Multiplies every entry of `a` by the `1×1` node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.shape() != (1, 1) {
            return Err(shape_err("mul_scalar", self.value(a), sv));
        }
        let k = sv.get(0, 0);
        let out = self.value(a).map(|v| v * k);
        Ok(self.push(out, Op::MulScalar(a, s)))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * v);
        self.push(out, Op::Square(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows_unchecked(self.value(a));
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Column-wise mean, giving a `1×n` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rows() == 0 {
            return Err(MuserError::invalid("mean_rows over zero rows"));
        }
        let mut out = vec![0.0; av.cols()];
        for r in 0..av.rows() {
            for (o, v) in out.iter_mut().zip(av.row(r)) {
                *o += v;
            }
        }
        let n = av.rows() as f64;
        out.iter_mut().for_each(|o| *o /= n);
        Ok(self.push(Matrix::row_vector(out), Op::MeanRows(a)))
    }

    pub fn select_row(&mut self, a: Var, row: usize) -> Result<Var> {
        let av = self.value(a);
        if row >= av.rows() {
            return Err(MuserError::invalid(format!(
                "select_row {row} out of range for {}",
                av.shape_str()
            )));
        }
        let out = Matrix::row_vector(av.row(row).to_vec());
        Ok(self.push(out, Op::SelectRow(a, row)))
    }

    /// Stacks `1×n` rows into a `k×n` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let values: Vec<&[f64]> = rows
            .iter()
            .map(|&r| {
                let v = self.value(r);
                if v.rows() != 1 {
                    Err(MuserError::invalid(format!(
                        "stack_rows expects 1xn rows, got {}",
                        v.shape_str()
                    )))
                } else {
                    Ok(v.data())
                }
            })
            .collect::<Result<_>>()?;
        let out = Matrix::from_rows(&values)?;
        Ok(self.push(out, Op::StackRows(rows.to_vec())))
    }

    /// Embedding lookup: row `k` of the output is row `ids[k]` of `table`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= tv.rows()) {
            return Err(MuserError::invalid(format!(
                "row id {bad} out of range for table {}",
                tv.shape_str()
            )));
        }
        let rows: Vec<&[f64]> = ids.iter().map(|&i| tv.row(i)).collect();
        let out = if rows.is_empty() {
            Matrix::zeros(0, tv.cols())
        } else {
            Matrix::from_rows(&rows)?
        };
        Ok(self.push(out, Op::GatherRows(table, ids.to_vec())))
    }

    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let out = super::matrix::l2_normalize_rows_unchecked(self.value(a), eps);
        self.push(out, Op::L2NormalizeRows(a, eps))
    }

    /// Scalar cross-entropy with the diagonal as targets.
    pub fn cross_entropy_diag(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let loss = super::matrix::cross_entropy_diag(self.value(a), axis)?;
        Ok(self.push(Matrix::scalar(loss), Op::CrossEntropyDiag(a, axis)))
    }

    /// Gradient of the `1×1` node `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(MuserError::invalid(format!(
                "backward needs a scalar loss, got {}",
                lv.shape_str()
            )));
        }
        lv.check_finite("backward loss")?;
        self.backward_seeded(loss, Matrix::scalar(1.0))
    }

    /// Backward sweep starting from an arbitrary upstream gradient.
    pub fn backward_seeded(&self, output: Var, seed: Matrix) -> Result<Gradients> {
        if seed.shape() != self.value(output).shape() {
            return Err(shape_err("backward_seeded", self.value(output), &seed));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    accumulate(&mut grads, *a, matmul_bt_unchecked(&g, bv));
                    accumulate(&mut grads, *b, matmul_at_unchecked(av, &g));
                }
                Op::MatMulBt(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    accumulate(&mut grads, *a, matmul_unchecked(&g, bv));
                    accumulate(&mut grads, *b, matmul_at_unchecked(&g, av));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::AddRow(a, row) => {
                    let mut sums = vec![0.0; g.cols()];
                    for r in 0..g.rows() {
                        for (s, v) in sums.iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                    accumulate(&mut grads, *row, Matrix::row_vector(sums));
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, g.map(|v| v * c));
                }
                Op::MulScalar(a, s) => {
                    let k = self.value(*s).get(0, 0);
                    let gs = dot(g.data(), self.value(*a).data());
                    accumulate(&mut grads, *s, Matrix::scalar(gs));
                    accumulate(&mut grads, *a, g.map(|v| v * k));
                }
                Op::Exp(a) => {
                    accumulate(&mut grads, *a, hadamard(&g, &node.value, |g, y| g * y));
                }
                Op::Tanh(a) => {
                    accumulate(
                        &mut grads,
                        *a,
                        hadamard(&g, &node.value, |g, y| g * (1.0 - y * y)),
                    );
                }
                Op::Square(a) => {
                    accumulate(
                        &mut grads,
                        *a,
                        hadamard(&g, self.value(*a), |g, x| 2.0 * g * x),
                    );
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let inner = dot(g.row(r), y.row(r));
                        for ((o, gv), yv) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r))
                        {
                            *o = yv * (gv - inner);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::MeanRows(a) => {
                    let av = self.value(*a);
                    let n = av.rows() as f64;
                    let ga = Matrix::from_fn(av.rows(), av.cols(), |_, c| g.get(0, c) / n);
                    accumulate(&mut grads, *a, ga);
                }
                Op::SelectRow(a, row) => {
                    let av = self.value(*a);
                    let mut ga = Matrix::zeros(av.rows(), av.cols());
                    ga.row_mut(*row).copy_from_slice(g.data());
                    accumulate(&mut grads, *a, ga);
                }
                Op::StackRows(rows) => {
                    for (k, r) in rows.iter().enumerate() {
                        accumulate(&mut grads, *r, Matrix::row_vector(g.row(k).to_vec()));
                    }
                }
                Op::GatherRows(table, ids) => {
                    let tv = self.value(*table);
                    let mut gt = Matrix::zeros(tv.rows(), tv.cols());
                    for (k, &id) in ids.iter().enumerate() {
                        for (o, v) in gt.row_mut(id).iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::L2NormalizeRows(a, eps) => {
                    let av = self.value(*a);
                    let y = &node.value;
                    let mut ga = Matrix::zeros(av.rows(), av.cols());
                    for r in 0..av.rows() {
                        let norm = dot(av.row(r), av.row(r)).sqrt();
                        let out = ga.row_mut(r);
                        if norm > *eps {
                            let inner = dot(g.row(r), y.row(r));
                            for ((o, gv), yv) in out.iter_mut().zip(g.row(r)).zip(y.row(r)) {
                                *o = (gv - yv * inner) / norm;
                            }
                        } else {
                            for (o, gv) in out.iter_mut().zip(g.row(r)) {
                                *o = gv / eps;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::CrossEntropyDiag(a, axis) => {
                    let upstream = g.get(0, 0);
                    let av = self.value(*a);
                    let n = av.rows();
                    let scale = upstream / n as f64;
                    let ga = match axis {
                        Axis::Rows => {
                            let mut p = softmax_rows_unchecked(av);
                            for i in 0..n {
                                let v = p.get(i, i);
                                p.set(i, i, v - 1.0);
                            }
                            p.map(|v| v * scale)
                        }
                        Axis::Cols => {
                            let mut p = av.transpose();
                            for i in 0..n {
                                softmax_slice(p.row_mut(i));
                                let v = p.get(i, i);
                                p.set(i, i, v - 1.0);
                            }
                            p.transpose().map(|v| v * scale)
                        }
                    };
                    accumulate(&mut grads, *a, ga);
                }
            }
            grads[idx] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn hadamard(g: &Matrix, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = g
        .data()
        .iter()
        .zip(other.data())
        .map(|(&a, &b)| f(a, b))
        .collect();
    Matrix::new(g.rows(), g.cols(), data).expect("same shape")
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::central_difference;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Checks the tape gradient of `build` with respect to its single input
    /// against central differences.
    fn check_op(input: Matrix, build: impl Fn(&mut GradTape, Var) -> Var) {
        let eval = |m: &Matrix| {
            let mut t = GradTape::new();
            let x = t.leaf(m.clone());
            let out = build(&mut t, x);
            t.value(out).get(0, 0)
        };
        let mut tape = GradTape::new();
        let x = tape.leaf(input.clone());
        let out = build(&mut tape, x);
        let analytic = tape.backward(out).unwrap().get(x);
        let numeric = central_difference(&input, 1e-6, eval);
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
            assert!(rel < 1e-6, "analytic {a} numeric {n}");
        }
    }

    fn sum_weighted(t: &mut GradTape, v: Var) -> Var {
        // Contract with a fixed random matrix so every output entry matters.
        let shape = t.value(v).shape();
        let w = t.leaf(random(shape.1, 1, 99));
        let col = t.matmul(v, w).unwrap();
        let ones = t.leaf(Matrix::filled(1, shape.0, 1.0));
        t.matmul(ones, col).unwrap()
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        check_op(random(3, 4, 1), |t, x| {
            let y = t.tanh(x);
            sum_weighted(t, y)
        });
        check_op(random(3, 4, 2), |t, x| {
            let y = t.square(x);
            sum_weighted(t, y)
        });
        check_op(random(3, 4, 3), |t, x| {
            let y = t.exp(x);
            let z = t.scale(y, -0.7);
            sum_weighted(t, z)
        });
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        check_op(random(4, 5, 4), |t, x| {
            let y = t.softmax_rows(x);
            sum_weighted(t, y)
        });
        check_op(random(4, 5, 5), |t, x| {
            let y = t.mean_rows(x).unwrap();
            sum_weighted(t, y)
        });
        check_op(random(4, 5, 6), |t, x| {
            let y = t.l2_normalize_rows(x, 1e-12);
            sum_weighted(t, y)
        });
        check_op(random(4, 3, 7), |t, x| {
            let a = t.select_row(x, 2).unwrap();
            let b = t.select_row(x, 0).unwrap();
            let s = t.stack_rows(&[a, b, a]).unwrap();
            sum_weighted(t, s)
        });
        check_op(random(5, 3, 8), |t, x| {
            let g = t.gather_rows(x, &[4, 1, 4, 0]).unwrap();
            sum_weighted(t, g)
        });
    }

    #[test]
    fn binary_ops_match_finite_differences() {
        let other = random(4, 3, 10);
        check_op(random(2, 4, 9), |t, x| {
            let w = t.leaf(other.clone());
            let y = t.matmul(x, w).unwrap();
            sum_weighted(t, y)
        });
        check_op(random(4, 3, 11), |t, x| {
            let a = t.leaf(random(2, 4, 12));
            let y = t.matmul(a, x).unwrap();
            sum_weighted(t, y)
        });
        check_op(random(3, 4, 13), |t, x| {
            let y = t.matmul_bt(x, x).unwrap();
            sum_weighted(t, y)
        });
        check_op(random(1, 4, 14), |t, x| {
            let a = t.leaf(random(3, 4, 15));
            let y = t.add_row(a, x).unwrap();
            let z = t.add(y, a).unwrap();
            let zz = t.square(z);
            sum_weighted(t, zz)
        });
        check_op(random(1, 1, 16), |t, s| {
            let a = t.leaf(random(3, 3, 17));
            let e = t.exp(s);
            let y = t.mul_scalar(a, e).unwrap();
            t.cross_entropy_diag(y, Axis::Rows).unwrap()
        });
    }

    #[test]
    fn cross_entropy_both_axes_match_finite_differences() {
        for axis in [Axis::Rows, Axis::Cols] {
            check_op(random(5, 5, 20).map(|v| 3.0 * v), |t, x| {
                t.cross_entropy_diag(x, axis).unwrap()
            });
        }
    }

    #[test]
    fn untouched_leaves_get_zero_gradient() {
        let mut t = GradTape::new();
        let unused = t.leaf(random(2, 2, 1));
        let x = t.leaf(random(2, 2, 2));
        let l = t.cross_entropy_diag(x, Axis::Rows).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(unused), Matrix::zeros(2, 2));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = GradTape::new();
        let x = t.leaf(random(2, 2, 1));
        assert!(t.backward(x).is_err());
    }
}
