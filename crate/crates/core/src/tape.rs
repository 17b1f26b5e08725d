//! Reverse-mode differentiation over row-major matrices.
//!
//! Every value on a [`Tape`] is a `rows × cols` matrix. Operations append a
//! node holding the forward value and enough bookkeeping to run the adjoint
//! pass; [`Tape::backward`] walks the nodes in reverse creation order.
//!
//! Segment operations (`seg_*`) reduce consecutive row ranges described by a
//! [`Segments`] offset table, which is how neighborhoods of variable size are
//! pooled without padding.

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// CSR-style row ranges: segment `s` covers rows `offsets[s]..offsets[s + 1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segments(Rc<[usize]>);

impl Segments {
    pub fn from_offsets(offsets: Vec<usize>) -> Result<Self> {
        if offsets.is_empty() || offsets[0] != 0 {
            return Err(Error::Invalid("segment offsets must start at 0".into()));
        }
        if offsets.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Invalid(
                "segment offsets must be non-decreasing".into(),
            ));
        }
        Ok(Self(offsets.into()))
    }

    /// `count` segments of exactly `size` rows each.
    pub fn uniform(count: usize, size: usize) -> Self {
        Self((0..=count).map(|s| s * size).collect::<Vec<_>>().into())
    }

    pub fn count(&self) -> usize {
        self.0.len() - 1
    }

    pub fn total(&self) -> usize {
        *self.0.last().unwrap()
    }

    pub fn range(&self, s: usize) -> core::ops::Range<usize> {
        self.0[s]..self.0[s + 1]
    }

    pub fn offsets(&self) -> &[usize] {
        &self.0
    }
}

const NO_SOURCE: usize = usize::MAX;
/// Sigmoid inputs are clamped to this magnitude before exponentiation.
pub const SIGMOID_CLAMP: f64 = 40.0;

enum Op {
    Leaf,
    Param,
    Linear { x: Var, w: Var, b: Option<Var> },
    LeakyRelu { x: Var, slope: f64 },
    Sigmoid { x: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulCol { x: Var, col: Var },
    Concat(Vec<Var>),
    Gather { x: Var, idx: Rc<[usize]> },
    SegMax { x: Var, argmax: Vec<usize> },
    SegSoftmax { x: Var, seg: Segments },
    SegWeightedSum { w: Var, v: Var, seg: Segments },
    RowNorm { x: Var },
    Abs { x: Var },
    Sum { x: Var },
    Mean { x: Var },
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
}

/// A single-threaded differentiation tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient with respect to any recorded value, `None` if unreached.
    pub fn of(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Parameters that were read on the tape, with their gradients
    /// (zero-filled when the parameter did not reach the loss).
    pub fn params(&self) -> impl Iterator<Item = (ParamId, Option<&[f64]>)> + '_ {
        self.params
            .iter()
            .map(move |&(id, v)| (id, self.grads[v.0].as_deref()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].rows
    }

    pub fn cols(&self, v: Var) -> usize {
        self.nodes[v.0].cols
    }

    /// Scalar value of a 1×1 node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if rows * cols != data.len() {
            return Err(Error::ShapeMismatch {
                op: "constant",
                left: vec![rows, cols],
                right: vec![data.len()],
            });
        }
        Ok(self.push(rows, cols, data, Op::Leaf))
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.push(rows, cols, vec![0.0; rows * cols], Op::Leaf)
    }

    /// Records a parameter read. Repeated reads of the same parameter share
    /// one node so their adjoints accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(Some(v)) = self.param_vars.get(id.index()) {
            return *v;
        }
        let t = store.value(id);
        let (rows, cols) = t.matrix_dims();
        let v = self.push(rows, cols, t.data().to_vec(), Op::Param);
        if self.param_vars.len() <= id.index() {
            self.param_vars.resize(id.index() + 1, None);
        }
        self.param_vars[id.index()] = Some(v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(Error::ShapeMismatch {
                op,
                left: vec![da.0, da.1],
                right: vec![db.0, db.1],
            });
        }
        Ok(da)
    }

    /// `x · wᵀ + b` for `x: n×in`, `w: out×in`, `b: 1×out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, inp) = self.dims(x);
        let (out, w_in) = self.dims(w);
        if inp != w_in {
            return Err(Error::ShapeMismatch {
                op: "linear",
                left: vec![n, inp],
                right: vec![out, w_in],
            });
        }
        if let Some(b) = b {
            if self.dims(b) != (1, out) {
                let (br, bc) = self.dims(b);
                return Err(Error::ShapeMismatch {
                    op: "linear bias",
                    left: vec![1, out],
                    right: vec![br, bc],
                });
            }
        }
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        // Row-times-transpose as a sum of scaled weight columns, which keeps
        // the inner loop free of a reduction.
        let mut wt = vec![0.0; inp * out];
        for o in 0..out {
            for i in 0..inp {
                wt[i * out + o] = wv[o * inp + i];
            }
        }
        let mut y = match b {
            Some(b) => {
                let bv = &self.nodes[b.0].value;
                let mut y = Vec::with_capacity(n * out);
                for _ in 0..n {
                    y.extend_from_slice(bv);
                }
                y
            }
            None => vec![0.0; n * out],
        };
        if out > 0 {
            for (r, yr) in y.chunks_exact_mut(out).enumerate() {
                let xr = &xv[r * inp..(r + 1) * inp];
                for (i, &xi) in xr.iter().enumerate() {
                    axpy(xi, &wt[i * out..(i + 1) * out], yr);
                }
            }
        }
        Ok(self.push(n, out, y, Op::Linear { x, w, b }))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let (r, c) = self.dims(x);
        let y = self.nodes[x.0]
            .value
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect();
        self.push(r, c, y, Op::LeakyRelu { x, slope })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let y = self.nodes[x.0].value.iter().map(|&v| sigmoid(v)).collect();
        self.push(r, c, y, Op::Sigmoid { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("add", a, b)?;
        let y = zip_map(&self.nodes[a.0].value, &self.nodes[b.0].value, |p, q| p + q);
        Ok(self.push(r, c, y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("sub", a, b)?;
        let y = zip_map(&self.nodes[a.0].value, &self.nodes[b.0].value, |p, q| p - q);
        Ok(self.push(r, c, y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("mul", a, b)?;
        let y = zip_map(&self.nodes[a.0].value, &self.nodes[b.0].value, |p, q| p * q);
        Ok(self.push(r, c, y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let (r, c) = self.dims(a);
        let y = self.nodes[a.0].value.iter().map(|v| v * k).collect();
        self.push(r, c, y, Op::Scale(a, k))
    }

    /// Scales row `r` of `x` by `col[r]`.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.dims(col) != (r, 1) {
            let (cr, cc) = self.dims(col);
            return Err(Error::ShapeMismatch {
                op: "mul_col",
                left: vec![r, 1],
                right: vec![cr, cc],
            });
        }
        let xv = &self.nodes[x.0].value;
        let cv = &self.nodes[col.0].value;
        let mut y = Vec::with_capacity(r * c);
        for i in 0..r {
            y.extend(xv[i * c..(i + 1) * c].iter().map(|v| v * cv[i]));
        }
        Ok(self.push(r, c, y, Op::MulCol { x, col }))
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Empty { op: "concat" });
        };
        let rows = self.rows(first);
        let mut cols = 0;
        for &p in parts {
            if self.rows(p) != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: vec![rows],
                    right: vec![self.rows(p)],
                });
            }
            cols += self.cols(p);
        }
        let mut y = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let n = &self.nodes[p.0];
                y.extend_from_slice(&n.value[r * n.cols..(r + 1) * n.cols]);
            }
        }
        Ok(self.push(rows, cols, y, Op::Concat(parts.to_vec())))
    }

    /// Row gather: output row `k` is input row `idx[k]`.
    pub fn gather(&mut self, x: Var, idx: impl Into<Rc<[usize]>>) -> Result<Var> {
        let idx: Rc<[usize]> = idx.into();
        let (r, c) = self.dims(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::IndexOutOfRange {
                op: "gather",
                index: bad,
                len: r,
            });
        }
        let xv = &self.nodes[x.0].value;
        let mut y = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            y.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        Ok(self.push(idx.len(), c, y, Op::Gather { x, idx }))
    }

    fn check_segments(&self, op: &'static str, x: Var, seg: &Segments) -> Result<()> {
        if self.rows(x) != seg.total() {
            return Err(Error::ShapeMismatch {
                op,
                left: vec![self.rows(x)],
                right: vec![seg.total()],
            });
        }
        Ok(())
    }

    /// Componentwise max over each segment; empty segments yield zeros.
    /// Ties resolve to the earliest row.
    pub fn seg_max(&mut self, x: Var, seg: &Segments) -> Result<Var> {
        self.check_segments("seg_max", x, seg)?;
        let c = self.cols(x);
        let xv = &self.nodes[x.0].value;
        let s_count = seg.count();
        let mut y = vec![0.0; s_count * c];
        let mut argmax = vec![NO_SOURCE; s_count * c];
        for s in 0..s_count {
            let range = seg.range(s);
            if range.is_empty() {
                continue;
            }
            let ys = &mut y[s * c..(s + 1) * c];
            let am = &mut argmax[s * c..(s + 1) * c];
            ys.copy_from_slice(&xv[range.start * c..(range.start + 1) * c]);
            am.iter_mut().for_each(|a| *a = range.start);
            for row in range.start + 1..range.end {
                let xr = &xv[row * c..(row + 1) * c];
                for k in 0..c {
                    if xr[k] > ys[k] {
                        ys[k] = xr[k];
                        am[k] = row;
                    }
                }
            }
        }
        Ok(self.push(s_count, c, y, Op::SegMax { x, argmax }))
    }

    /// Softmax of a column vector within each segment, using max-subtraction.
    pub fn seg_softmax(&mut self, x: Var, seg: &Segments) -> Result<Var> {
        self.check_segments("seg_softmax", x, seg)?;
        if self.cols(x) != 1 {
            return Err(Error::ShapeMismatch {
                op: "seg_softmax",
                left: vec![self.rows(x), 1],
                right: vec![self.rows(x), self.cols(x)],
            });
        }
        let xv = &self.nodes[x.0].value;
        let mut y = vec![0.0; xv.len()];
        for s in 0..seg.count() {
            let range = seg.range(s);
            if !range.is_empty() {
                softmax_into(&xv[range.clone()], &mut y[range]);
            }
        }
        let rows = y.len();
        Ok(self.push(
            rows,
            1,
            y,
            Op::SegSoftmax {
                x,
                seg: seg.clone(),
            },
        ))
    }

    /// `out[s] = Σ_{k ∈ s} w[k] · v[k]` for `w: E×1`, `v: E×C`.
    pub fn seg_weighted_sum(&mut self, w: Var, v: Var, seg: &Segments) -> Result<Var> {
        self.check_segments("seg_weighted_sum", v, seg)?;
        if self.dims(w) != (seg.total(), 1) {
            let (r, c) = self.dims(w);
            return Err(Error::ShapeMismatch {
                op: "seg_weighted_sum",
                left: vec![seg.total(), 1],
                right: vec![r, c],
            });
        }
        let c = self.cols(v);
        let wv = &self.nodes[w.0].value;
        let vv = &self.nodes[v.0].value;
        let mut y = vec![0.0; seg.count() * c];
        for s in 0..seg.count() {
            let ys = &mut y[s * c..(s + 1) * c];
            for k in seg.range(s) {
                axpy(wv[k], &vv[k * c..(k + 1) * c], ys);
            }
        }
        Ok(self.push(
            seg.count(),
            c,
            y,
            Op::SegWeightedSum {
                w,
                v,
                seg: seg.clone(),
            },
        ))
    }

    /// Euclidean norm of each row, as an `n×1` column.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let xv = &self.nodes[x.0].value;
        let y = (0..r)
            .map(|i| libm::sqrt(dot(&xv[i * c..(i + 1) * c], &xv[i * c..(i + 1) * c])))
            .collect();
        self.push(r, 1, y, Op::RowNorm { x })
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let y = self.nodes[x.0]
            .value
            .iter()
            .map(|v| libm::fabs(*v))
            .collect();
        self.push(r, c, y, Op::Abs { x })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.iter().sum();
        self.push(1, 1, vec![s], Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.nodes[x.0].value.len();
        if n == 0 {
            return Err(Error::Empty { op: "mean" });
        }
        let s: f64 = self.nodes[x.0].value.iter().sum();
        Ok(self.push(1, 1, vec![s / n as f64], Op::Mean { x }))
    }

    /// Runs the adjoint pass from a 1×1 loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let (r, c) = self.dims(loss);
        if (r, c) != (1, 1) {
            return Err(Error::NotScalar(vec![r, c]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf | Op::Param => {}
                Op::Linear { x, w, b } => {
                    let (n, inp) = self.dims(*x);
                    let out = node.cols;
                    let xv = &self.nodes[x.0].value;
                    let wv = &self.nodes[w.0].value;
                    {
                        let dx = slot(&mut grads, *x, n * inp);
                        for r in 0..n {
                            let dxr = &mut dx[r * inp..(r + 1) * inp];
                            for o in 0..out {
                                let go = g[r * out + o];
                                if go != 0.0 {
                                    axpy(go, &wv[o * inp..(o + 1) * inp], dxr);
                                }
                            }
                        }
                    }
                    {
                        let dw = slot(&mut grads, *w, out * inp);
                        for r in 0..n {
                            let xr = &xv[r * inp..(r + 1) * inp];
                            for o in 0..out {
                                let go = g[r * out + o];
                                if go != 0.0 {
                                    axpy(go, xr, &mut dw[o * inp..(o + 1) * inp]);
                                }
                            }
                        }
                    }
                    if let Some(b) = b {
                        let db = slot(&mut grads, *b, out);
                        for gr in g.chunks_exact(out.max(1)) {
                            for (d, v) in db.iter_mut().zip(gr) {
                                *d += v;
                            }
                        }
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    let xv = &self.nodes[x.0].value;
                    let dx = slot(&mut grads, *x, g.len());
                    for ((d, gi), xi) in dx.iter_mut().zip(&g).zip(xv) {
                        *d += if *xi > 0.0 { *gi } else { slope * gi };
                    }
                }
                Op::Sigmoid { x } => {
                    let xv = &self.nodes[x.0].value;
                    let yv = &node.value;
                    let dx = slot(&mut grads, *x, g.len());
                    for k in 0..g.len() {
                        if libm::fabs(xv[k]) < SIGMOID_CLAMP {
                            dx[k] += g[k] * yv[k] * (1.0 - yv[k]);
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(slot(&mut grads, *a, g.len()), &g, 1.0);
                    add_into(slot(&mut grads, *b, g.len()), &g, 1.0);
                }
                Op::Sub(a, b) => {
                    add_into(slot(&mut grads, *a, g.len()), &g, 1.0);
                    add_into(slot(&mut grads, *b, g.len()), &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    {
                        let da = slot(&mut grads, *a, g.len());
                        for k in 0..g.len() {
                            da[k] += g[k] * bv[k];
                        }
                    }
                    let db = slot(&mut grads, *b, g.len());
                    for k in 0..g.len() {
                        db[k] += g[k] * av[k];
                    }
                }
                Op::Scale(a, k) => add_into(slot(&mut grads, *a, g.len()), &g, *k),
                Op::MulCol { x, col } => {
                    let (r, c) = (node.rows, node.cols);
                    let xv = &self.nodes[x.0].value;
                    let cv = &self.nodes[col.0].value;
                    {
                        let dx = slot(&mut grads, *x, r * c);
                        for i in 0..r {
                            for k in 0..c {
                                dx[i * c + k] += g[i * c + k] * cv[i];
                            }
                        }
                    }
                    let dc = slot(&mut grads, *col, r);
                    for i in 0..r {
                        dc[i] += dot(&g[i * c..(i + 1) * c], &xv[i * c..(i + 1) * c]);
                    }
                }
                Op::Concat(parts) => {
                    let rows = node.rows;
                    let mut start = 0;
                    for &p in parts {
                        let pc = self.cols(p);
                        let dp = slot(&mut grads, p, rows * pc);
                        for r in 0..rows {
                            let src = &g[r * node.cols + start..r * node.cols + start + pc];
                            add_into(&mut dp[r * pc..(r + 1) * pc], src, 1.0);
                        }
                        start += pc;
                    }
                }
                Op::Gather { x, idx } => {
                    let (xr, c) = self.dims(*x);
                    let dx = slot(&mut grads, *x, xr * c);
                    for (k, &i) in idx.iter().enumerate() {
                        add_into(&mut dx[i * c..(i + 1) * c], &g[k * c..(k + 1) * c], 1.0);
                    }
                }
                Op::SegMax { x, argmax } => {
                    let (xr, c) = self.dims(*x);
                    let dx = slot(&mut grads, *x, xr * c);
                    for (k, &src) in argmax.iter().enumerate() {
                        if src != NO_SOURCE {
                            dx[src * c + k % c] += g[k];
                        }
                    }
                }
                Op::SegSoftmax { x, seg } => {
                    let yv = &node.value;
                    let dx = slot(&mut grads, *x, yv.len());
                    for s in 0..seg.count() {
                        let range = seg.range(s);
                        let inner: f64 = range.clone().map(|k| yv[k] * g[k]).sum();
                        for k in range {
                            dx[k] += yv[k] * (g[k] - inner);
                        }
                    }
                }
                Op::SegWeightedSum { w, v, seg } => {
                    let c = self.cols(*v);
                    let wv = &self.nodes[w.0].value;
                    let vv = &self.nodes[v.0].value;
                    {
                        let dw = slot(&mut grads, *w, seg.total());
                        for s in 0..seg.count() {
                            let gs = &g[s * c..(s + 1) * c];
                            for k in seg.range(s) {
                                dw[k] += dot(gs, &vv[k * c..(k + 1) * c]);
                            }
                        }
                    }
                    let dv = slot(&mut grads, *v, seg.total() * c);
                    for s in 0..seg.count() {
                        let gs = &g[s * c..(s + 1) * c];
                        for k in seg.range(s) {
                            axpy(wv[k], gs, &mut dv[k * c..(k + 1) * c]);
                        }
                    }
                }
                Op::RowNorm { x } => {
                    let (r, c) = self.dims(*x);
                    let xv = &self.nodes[x.0].value;
                    let yv = &node.value;
                    let dx = slot(&mut grads, *x, r * c);
                    for i in 0..r {
                        if yv[i] > 0.0 {
                            let k = g[i] / yv[i];
                            axpy(k, &xv[i * c..(i + 1) * c], &mut dx[i * c..(i + 1) * c]);
                        }
                    }
                }
                Op::Abs { x } => {
                    let xv = &self.nodes[x.0].value;
                    let dx = slot(&mut grads, *x, g.len());
                    for k in 0..g.len() {
                        if xv[k] > 0.0 {
                            dx[k] += g[k];
                        } else if xv[k] < 0.0 {
                            dx[k] -= g[k];
                        }
                    }
                }
                Op::Sum { x } => {
                    let n = self.nodes[x.0].value.len();
                    let dx = slot(&mut grads, *x, n);
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
                Op::Mean { x } => {
                    let n = self.nodes[x.0].value.len();
                    let k = g[0] / n as f64;
                    let dx = slot(&mut grads, *x, n);
                    dx.iter_mut().for_each(|d| *d += k);
                }
            }
            grads[id] = Some(g);
        }

        let params = self
            .param_vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId::from_index(i), v)))
            .collect();
        Ok(Gradients { grads, params })
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, len: usize) -> &'a mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for k in 0..chunks {
        for lane in 0..4 {
            acc[lane] += a[4 * k + lane] * b[4 * k + lane];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for k in 4 * chunks..a.len() {
        s += a[k] * b[k];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn add_into(dst: &mut [f64], src: &[f64], k: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += k * s;
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&p, &q)| f(p, q)).collect()
}

/// Logistic function with the input clamped to `±SIGMOID_CLAMP`.
pub fn sigmoid(x: f64) -> f64 {
    let x = x.clamp(-SIGMOID_CLAMP, SIGMOID_CLAMP);
    1.0 / (1.0 + libm::exp(-x))
}

fn softmax_into(x: &[f64], y: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = libm::exp(xi - m);
        total += *yi;
    }
    for yi in y.iter_mut() {
        *yi /= total;
    }
}

/// Numerically stable softmax of a plain slice.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Empty { op: "softmax" });
    }
    if let Some(bad) = logits.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(alloc::format!("softmax logit {bad}")));
    }
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    Ok(out)
}
