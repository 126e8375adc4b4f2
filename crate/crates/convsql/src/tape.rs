//! Reverse-mode automatic differentiation on `f64` matrices.
//!
//! Every forward pass builds a [`Tape`]: an append-only arena of nodes, each
//! holding its value and the operation that produced it. [`Tape::backward`]
//! walks the arena in reverse and accumulates gradients for every parameter
//! leaf. All math is double precision so analytic gradients can be validated
//! against central finite differences at tight tolerances.
//!
//! The tape is single-threaded by construction (`Rc` + `RefCell`). Distinct
//! forward passes use distinct tapes; parameters are shared copy-on-write via
//! [`ParamSet`].

use std::cell::RefCell;
use std::collections::HashMap;
use std::ops::Range;
use std::rc::Rc;

use ndarray::{Array2, Axis};
use rand::Rng;

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Index of a parameter tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named collection of trainable tensors.
///
/// Values are `Rc`-shared with tapes: reading a parameter onto a tape is a
/// pointer copy, and the optimizer's in-place update clones lazily only if a
/// live tape still holds the old version.
#[derive(Clone)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Rc<Array2<f64>>>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Registers a tensor initialized uniformly in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn register(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..=bound));
        self.register_with(name, data)
    }

    /// Registers a tensor with explicit initial values.
    pub fn register_with(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name `{name}`"
        );
        self.names.push(name);
        self.values.push(Rc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        Rc::make_mut(&mut self.values[id.0])
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> &Array2<f64> {
        let id = self
            .id_by_name(name)
            .unwrap_or_else(|| panic!("no parameter named `{name}`"));
        self.value(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array2<f64>)> {
        self.names
            .iter()
            .zip(self.values.iter())
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v.as_ref()))
    }

    /// Total number of scalar entries across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-parameter gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(self) -> Vec<Option<Array2<f64>>> {
        self.grads
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    Add(usize, usize),
    /// `(m,n) + (1,n)` with the row vector broadcast over rows.
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// Multiply every entry by a `(1,1)` tape scalar.
    MulScalar(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, Range<usize>),
    Row(usize, usize),
    Sigmoid(usize),
    Tanh(usize),
    LeakyRelu(usize, f64),
    /// Row-wise softmax. The mask (if any) is folded into the stored value:
    /// disallowed entries are exactly zero, which is all backward needs.
    Softmax(usize),
    MeanRows(usize),
    SumAll(usize),
    /// Sum of selected columns of a `(1,n)` row, yielding `(1,1)`.
    SumCols(usize, Vec<usize>),
    Ln(usize),
    /// Row lookup: parent is a `(V,e)` table, output is `(k,e)`.
    GatherRows(usize, Vec<usize>),
}

struct Node {
    value: Rc<Array2<f64>>,
    op: Op,
}

/// Computation graph arena. See module docs.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    param_nodes: RefCell<HashMap<ParamId, Var>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            param_nodes: RefCell::new(HashMap::new()),
        }
    }

    fn push(&self, value: Array2<f64>, op: Op) -> Var {
        debug_assert!(value.iter().all(|x| x.is_finite()), "non-finite tape value");
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var(nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Value of a node (cheap `Rc` clone).
    pub fn value(&self, v: Var) -> Rc<Array2<f64>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let val = &self.nodes.borrow()[v.0].value;
        (val.nrows(), val.ncols())
    }

    /// Constant leaf: participates in forward math, receives no gradient.
    pub fn constant(&self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn zeros(&self, rows: usize, cols: usize) -> Var {
        self.constant(Array2::zeros((rows, cols)))
    }

    /// Parameter leaf. Repeated reads of the same parameter share one node so
    /// gradients accumulate in a single slot.
    pub fn param(&self, params: &ParamSet, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.borrow().get(&id) {
            return v;
        }
        let value = Rc::clone(&params.values[id.0]);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Param(id),
        });
        let v = Var(nodes.len() - 1);
        self.param_nodes.borrow_mut().insert(id, v);
        v
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.dim(), vb.dim(), "add: shape mismatch");
        self.push(va.as_ref() + vb.as_ref(), Op::Add(a.0, b.0))
    }

    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.nrows(), 1, "add_row: rhs must be a row vector");
        assert_eq!(va.ncols(), vr.ncols(), "add_row: width mismatch");
        self.push(va.as_ref() + &vr.row(0), Op::AddRow(a.0, row.0))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.dim(), vb.dim(), "sub: shape mismatch");
        self.push(va.as_ref() - vb.as_ref(), Op::Sub(a.0, b.0))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.dim(), vb.dim(), "mul: shape mismatch");
        self.push(va.as_ref() * vb.as_ref(), Op::Mul(a.0, b.0))
    }

    /// Multiply all entries of `a` by the `(1,1)` scalar node `s`.
    pub fn mul_scalar(&self, a: Var, s: Var) -> Var {
        let (va, vs) = (self.value(a), self.value(s));
        assert_eq!(vs.dim(), (1, 1), "mul_scalar: scalar must be (1,1)");
        self.push(va.as_ref() * vs[(0, 0)], Op::MulScalar(a.0, s.0))
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        let va = self.value(a);
        self.push(va.as_ref() * k, Op::Scale(a.0, k))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(
            va.ncols(),
            vb.nrows(),
            "matmul: inner dimension mismatch ({}x{}) . ({}x{})",
            va.nrows(),
            va.ncols(),
            vb.nrows(),
            vb.ncols()
        );
        self.push(va.dot(vb.as_ref()), Op::MatMul(a.0, b.0))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let va = self.value(a);
        self.push(va.t().to_owned(), Op::Transpose(a.0))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: empty input");
        let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let rows = vals[0].nrows();
        assert!(
            vals.iter().all(|v| v.nrows() == rows),
            "concat_cols: row mismatch"
        );
        let cols: usize = vals.iter().map(|v| v.ncols()).sum();
        let mut out = Array2::zeros((rows, cols));
        let mut at = 0;
        for v in &vals {
            out.slice_mut(ndarray::s![.., at..at + v.ncols()])
                .assign(v.as_ref());
            at += v.ncols();
        }
        self.push(out, Op::ConcatCols(parts.iter().map(|p| p.0).collect()))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows: empty input");
        let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let cols = vals[0].ncols();
        assert!(
            vals.iter().all(|v| v.ncols() == cols),
            "concat_rows: column mismatch"
        );
        let rows: usize = vals.iter().map(|v| v.nrows()).sum();
        let mut out = Array2::zeros((rows, cols));
        let mut at = 0;
        for v in &vals {
            out.slice_mut(ndarray::s![at..at + v.nrows(), ..])
                .assign(v.as_ref());
            at += v.nrows();
        }
        self.push(out, Op::ConcatRows(parts.iter().map(|p| p.0).collect()))
    }

    pub fn slice_cols(&self, a: Var, range: Range<usize>) -> Var {
        let va = self.value(a);
        assert!(range.end <= va.ncols(), "slice_cols: out of bounds");
        let out = va.slice(ndarray::s![.., range.clone()]).to_owned();
        self.push(out, Op::SliceCols(a.0, range))
    }

    pub fn row(&self, a: Var, i: usize) -> Var {
        let va = self.value(a);
        assert!(i < va.nrows(), "row: index out of bounds");
        let out = va.row(i).to_owned().insert_axis(Axis(0));
        self.push(out, Op::Row(a.0, i))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let va = self.value(a);
        self.push(va.mapv(|x| 1.0 / (1.0 + (-x).exp())), Op::Sigmoid(a.0))
    }

    pub fn tanh(&self, a: Var) -> Var {
        let va = self.value(a);
        self.push(va.mapv(f64::tanh), Op::Tanh(a.0))
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        let va = self.value(a);
        self.push(
            va.mapv(|x| if x > 0.0 { x } else { slope * x }),
            Op::LeakyRelu(a.0, slope),
        )
    }

    /// Row-wise softmax over all entries.
    pub fn softmax_rows(&self, a: Var) -> Var {
        self.softmax_impl(a, None)
    }

    /// Row-wise softmax restricted to `mask`-allowed entries; disallowed
    /// entries are exactly zero in the output. Panics if any row has no
    /// allowed entry.
    pub fn masked_softmax_rows(&self, a: Var, mask: Rc<Array2<bool>>) -> Var {
        self.softmax_impl(a, Some(mask))
    }

    fn softmax_impl(&self, a: Var, mask: Option<Rc<Array2<bool>>>) -> Var {
        let va = self.value(a);
        if let Some(m) = &mask {
            assert_eq!(m.dim(), va.dim(), "masked softmax: mask shape mismatch");
        }
        let (rows, cols) = va.dim();
        let mut out = Array2::zeros((rows, cols));
        for r in 0..rows {
            let allowed = |c: usize| mask.as_ref().is_none_or(|m| m[(r, c)]);
            let mut max = f64::NEG_INFINITY;
            for c in 0..cols {
                if allowed(c) && va[(r, c)] > max {
                    max = va[(r, c)];
                }
            }
            assert!(
                max.is_finite(),
                "softmax: row {r} has no allowed entries"
            );
            let mut denom = 0.0;
            for c in 0..cols {
                if allowed(c) {
                    let e = (va[(r, c)] - max).exp();
                    out[(r, c)] = e;
                    denom += e;
                }
            }
            for c in 0..cols {
                out[(r, c)] /= denom;
            }
        }
        self.push(out, Op::Softmax(a.0))
    }

    pub fn mean_rows(&self, a: Var) -> Var {
        let va = self.value(a);
        assert!(va.nrows() > 0, "mean_rows: empty input");
        let mean = va.mean_axis(Axis(0)).unwrap().insert_axis(Axis(0));
        self.push(mean, Op::MeanRows(a.0))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let va = self.value(a);
        self.push(Array2::from_elem((1, 1), va.sum()), Op::SumAll(a.0))
    }

    /// Sum of the selected columns of a `(1,n)` row vector.
    pub fn sum_cols(&self, a: Var, cols: Vec<usize>) -> Var {
        let va = self.value(a);
        assert_eq!(va.nrows(), 1, "sum_cols: input must be a row vector");
        assert!(!cols.is_empty(), "sum_cols: empty column set");
        let s: f64 = cols.iter().map(|&c| va[(0, c)]).sum();
        self.push(Array2::from_elem((1, 1), s), Op::SumCols(a.0, cols))
    }

    pub fn ln(&self, a: Var) -> Var {
        let va = self.value(a);
        assert!(va.iter().all(|&x| x > 0.0), "ln: non-positive input");
        self.push(va.mapv(f64::ln), Op::Ln(a.0))
    }

    pub fn gather_rows(&self, table: Var, indices: &[usize]) -> Var {
        let vt = self.value(table);
        assert!(!indices.is_empty(), "gather_rows: empty index list");
        let mut out = Array2::zeros((indices.len(), vt.ncols()));
        for (k, &i) in indices.iter().enumerate() {
            assert!(i < vt.nrows(), "gather_rows: index {i} out of bounds");
            out.row_mut(k).assign(&vt.row(i));
        }
        self.push(out, Op::GatherRows(table.0, indices.to_vec()))
    }

    /// Scalar value of a `(1,1)` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "scalar: node is not (1,1)");
        val[(0, 0)]
    }

    /// Backpropagates from the `(1,1)` node `loss`, returning gradients for
    /// every parameter leaf on the tape. `param_count` sizes the result.
    pub fn backward(&self, loss: Var, param_count: usize) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.dim(), (1, 1), "backward: loss not (1,1)");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        fn acc(slot: &mut Option<Array2<f64>>, g: &Array2<f64>) {
            match slot {
                Some(existing) => *existing += g,
                None => *slot = Some(g.clone()),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(pid) => {
                    // restore: param grads are read out at the end
                    grads[i] = Some(g);
                    let _ = pid;
                    continue;
                }
                Op::Add(a, b) => {
                    acc(&mut grads[*a], &g);
                    acc(&mut grads[*b], &g);
                }
                Op::AddRow(a, b) => {
                    acc(&mut grads[*a], &g);
                    let colsum = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads[*b], &colsum);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads[*a], &g);
                    acc(&mut grads[*b], &(-&g));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    acc(&mut grads[*a], &(&g * vb.as_ref()));
                    acc(&mut grads[*b], &(&g * va.as_ref()));
                }
                Op::MulScalar(a, s) => {
                    let (va, vs) = (&nodes[*a].value, &nodes[*s].value);
                    acc(&mut grads[*a], &(&g * vs[(0, 0)]));
                    let ds = (&g * va.as_ref()).sum();
                    acc(&mut grads[*s], &Array2::from_elem((1, 1), ds));
                }
                Op::Scale(a, k) => {
                    acc(&mut grads[*a], &(&g * *k));
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    acc(&mut grads[*a], &g.dot(&vb.t()));
                    acc(&mut grads[*b], &va.t().dot(&g));
                }
                Op::Transpose(a) => {
                    acc(&mut grads[*a], &g.t().to_owned());
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let w = nodes[p].value.ncols();
                        let piece = g.slice(ndarray::s![.., at..at + w]).to_owned();
                        acc(&mut grads[p], &piece);
                        at += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let h = nodes[p].value.nrows();
                        let piece = g.slice(ndarray::s![at..at + h, ..]).to_owned();
                        acc(&mut grads[p], &piece);
                        at += h;
                    }
                }
                Op::SliceCols(a, range) => {
                    let va = &nodes[*a].value;
                    let mut da = Array2::zeros(va.dim());
                    da.slice_mut(ndarray::s![.., range.clone()]).assign(&g);
                    acc(&mut grads[*a], &da);
                }
                Op::Row(a, r) => {
                    let va = &nodes[*a].value;
                    let mut da = Array2::zeros(va.dim());
                    da.row_mut(*r).assign(&g.row(0));
                    acc(&mut grads[*a], &da);
                }
                Op::Sigmoid(a) => {
                    let y = node.value.as_ref();
                    acc(&mut grads[*a], &(&g * &(y * &(1.0 - y))));
                }
                Op::Tanh(a) => {
                    let y = node.value.as_ref();
                    acc(&mut grads[*a], &(&g * &(1.0 - y * y)));
                }
                Op::LeakyRelu(a, slope) => {
                    let va = &nodes[*a].value;
                    let dx = va.mapv(|x| if x > 0.0 { 1.0 } else { *slope });
                    acc(&mut grads[*a], &(&g * &dx));
                }
                Op::Softmax(a) => {
                    // dX = Y ⊙ (dY − rowsum(dY ⊙ Y)); masked entries have Y = 0.
                    let y = node.value.as_ref();
                    let gy = &g * y;
                    let rowsum = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let dx = y * &(&g - &rowsum);
                    acc(&mut grads[*a], &dx);
                }
                Op::MeanRows(a) => {
                    let va = &nodes[*a].value;
                    let m = va.nrows() as f64;
                    let mut da = Array2::zeros(va.dim());
                    for mut row in da.rows_mut() {
                        row.assign(&(&g.row(0) / m));
                    }
                    acc(&mut grads[*a], &da);
                }
                Op::SumAll(a) => {
                    let va = &nodes[*a].value;
                    acc(&mut grads[*a], &Array2::from_elem(va.dim(), g[(0, 0)]));
                }
                Op::SumCols(a, cols) => {
                    let va = &nodes[*a].value;
                    let mut da = Array2::zeros(va.dim());
                    for &c in cols {
                        da[(0, c)] += g[(0, 0)];
                    }
                    acc(&mut grads[*a], &da);
                }
                Op::Ln(a) => {
                    let va = &nodes[*a].value;
                    acc(&mut grads[*a], &(&g / va.as_ref()));
                }
                Op::GatherRows(a, indices) => {
                    let va = &nodes[*a].value;
                    let mut da = Array2::zeros(va.dim());
                    for (k, &idx) in indices.iter().enumerate() {
                        let mut row = da.row_mut(idx);
                        row += &g.row(k);
                    }
                    acc(&mut grads[*a], &da);
                }
            }
        }

        let mut by_param: Vec<Option<Array2<f64>>> = vec![None; param_count];
        for (i, node) in nodes.iter().enumerate() {
            if let Op::Param(pid) = node.op {
                if let Some(g) = grads.get_mut(i).and_then(Option::take) {
                    by_param[pid.0] = Some(g);
                }
            }
        }
        Gradients { grads: by_param }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences over every entry of every parameter.
    fn finite_diff_check(
        params: &mut ParamSet,
        forward: impl Fn(&Tape, &ParamSet) -> Var,
        tol: f64,
    ) {
        let tape = Tape::new();
        let loss = forward(&tape, params);
        let grads = tape.backward(loss, params.len());
        let eps = 1e-5;
        for pid in 0..params.len() {
            let (rows, cols) = {
                let v = params.value(ParamId(pid));
                (v.nrows(), v.ncols())
            };
            for r in 0..rows {
                for c in 0..cols {
                    let orig = params.value(ParamId(pid))[(r, c)];
                    params.value_mut(ParamId(pid))[(r, c)] = orig + eps;
                    let t1 = Tape::new();
                    let lp = t1.scalar(forward(&t1, params));
                    params.value_mut(ParamId(pid))[(r, c)] = orig - eps;
                    let t2 = Tape::new();
                    let lm = t2.scalar(forward(&t2, params));
                    params.value_mut(ParamId(pid))[(r, c)] = orig;
                    let numeric = (lp - lm) / (2.0 * eps);
                    let analytic = grads
                        .get(ParamId(pid))
                        .map(|g| g[(r, c)])
                        .unwrap_or(0.0);
                    let denom = analytic.abs().max(numeric.abs()).max(1e-3);
                    let rel = (analytic - numeric).abs() / denom;
                    assert!(
                        rel < tol,
                        "param {pid} entry ({r},{c}): analytic {analytic} vs numeric {numeric}"
                    );
                }
            }
        }
    }

    #[test]
    fn matmul_values() {
        let tape = Tape::new();
        let a = tape.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let b = tape.constant(array![[5.0], [6.0]]);
        let c = tape.matmul(a, b);
        assert_eq!(tape.value(c).as_ref(), &array![[17.0], [39.0]]);
    }

    #[test]
    fn gradients_through_mixed_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = ParamSet::new();
        let w = params.register("w", 3, 4, 3, &mut rng);
        let b = params.register("b", 1, 4, 4, &mut rng);
        let u = params.register("u", 4, 2, 4, &mut rng);
        finite_diff_check(
            &mut params,
            |tape, ps| {
                let x = tape.constant(array![[0.3, -0.2, 0.5], [0.1, 0.9, -0.4]]);
                let w = tape.param(ps, w);
                let b = tape.param(ps, b);
                let u = tape.param(ps, u);
                let h = tape.add_row(tape.matmul(x, w), b);
                let h = tape.leaky_relu(h, 0.01);
                let y = tape.tanh(tape.matmul(h, u));
                let s = tape.softmax_rows(y);
                tape.sum_cols(tape.row(s, 0), vec![0])
            },
            1e-5,
        );
    }

    #[test]
    fn gradients_through_masked_softmax_and_gather() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = ParamSet::new();
        let table = params.register("table", 5, 3, 3, &mut rng);
        let w = params.register("w", 3, 4, 3, &mut rng);
        let mask = Rc::new(array![
            [true, false, true, true],
            [true, true, false, true]
        ]);
        finite_diff_check(
            &mut params,
            |tape, ps| {
                let t = tape.param(ps, table);
                let w = tape.param(ps, w);
                let e = tape.gather_rows(t, &[1, 4]);
                let scores = tape.matmul(e, w);
                let a = tape.masked_softmax_rows(scores, Rc::clone(&mask));
                let picked = tape.mul(a, a);
                let total = tape.sum_all(picked);
                tape.ln(total)
            },
            1e-5,
        );
    }

    #[test]
    fn masked_softmax_zeroes_disallowed_and_normalizes() {
        let tape = Tape::new();
        let x = tape.constant(array![[1.0, 2.0, 3.0], [0.5, -1.0, 2.0]]);
        let mask = Rc::new(array![[true, false, true], [true, true, true]]);
        let s = tape.masked_softmax_rows(x, mask);
        let v = tape.value(s);
        assert_eq!(v[(0, 1)], 0.0);
        for r in 0..2 {
            let sum: f64 = (0..3).map(|c| v[(r, c)]).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn param_nodes_are_shared_within_a_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ParamSet::new();
        let w = params.register("w", 2, 2, 2, &mut rng);
        let tape = Tape::new();
        let a = tape.param(&params, w);
        let b = tape.param(&params, w);
        assert_eq!(a, b);
        // y = sum(W + W) => dW = 2 * ones
        let y = tape.sum_all(tape.add(a, b));
        let grads = tape.backward(y, params.len());
        let gw = grads.get(w).unwrap();
        assert!(gw.iter().all(|&g| (g - 2.0).abs() < 1e-12));
    }

    #[test]
    #[should_panic(expected = "no allowed entries")]
    fn fully_masked_row_panics() {
        let tape = Tape::new();
        let x = tape.constant(array![[1.0, 2.0]]);
        let mask = Rc::new(array![[false, false]]);
        tape.masked_softmax_rows(x, mask);
    }
}
