//! Tape-based reverse-mode differentiation over small dense matrices.
//!
//! A [`Tape`] is rebuilt for every forward pass. Parameters live in a
//! [`ParamStore`]; the tape copies their values into leaves and
//! [`Tape::accumulate`] adds the resulting gradients back into the store.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_FORMAT: &str = "busgraph-params/1";

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, T::zero())
    }

    pub fn filled(rows: usize, cols: usize, v: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn scalar(v: T) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matmul(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm_nn(self, other, &mut out, T::zero());
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix<T> {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    fn add_assign(&mut self, other: &Matrix<T>) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `c = a · b + beta c`
fn gemm_nn<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, c: &mut Matrix<T>, beta: T) {
    T::gemm(
        a.rows,
        a.cols,
        b.cols,
        T::one(),
        &a.data,
        a.cols as isize,
        1,
        &b.data,
        b.cols as isize,
        1,
        beta,
        &mut c.data,
        c.cols as isize,
        1,
    );
}

/// `c += a · bᵀ`
fn gemm_nt_acc<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, c: &mut Matrix<T>) {
    T::gemm(
        a.rows,
        a.cols,
        b.rows,
        T::one(),
        &a.data,
        a.cols as isize,
        1,
        &b.data,
        1,
        b.cols as isize,
        T::one(),
        &mut c.data,
        c.cols as isize,
        1,
    );
}

/// `c += aᵀ · b`
fn gemm_tn_acc<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, c: &mut Matrix<T>) {
    T::gemm(
        a.cols,
        a.rows,
        b.cols,
        T::one(),
        &a.data,
        1,
        a.cols as isize,
        &b.data,
        b.cols as isize,
        1,
        T::one(),
        &mut c.data,
        c.cols as isize,
        1,
    );
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Handle to a stored parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// `(destination row, source row)` pairs of a segment sum.
pub type Pairs = Rc<Vec<(u32, u32)>>;

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AffineScalar(Var, T),
    Hadamard(Var, Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Log(Var),
    Clamp(Var, T, T),
    SegmentSum(Var, Pairs),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Mean(Var),
    Affine(Vec<(Var, Var)>, Option<Var>),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn shape_err(what: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::ShapeMismatch(format!("{what}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, m: Matrix<T>) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// Leaf that receives a gradient (readable from [`Grads::wrt`]).
    pub fn variable(&mut self, m: Matrix<T>) -> Var {
        self.push(m, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err("add", x.shape(), y.shape()));
        }
        let mut v = x.clone();
        v.add_assign(y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    /// Adds a `1 × cols` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xm, bm) = (self.value(x), self.value(b));
        if bm.rows != 1 || bm.cols != xm.cols {
            return Err(shape_err("add_row", xm.shape(), bm.shape()));
        }
        let mut v = xm.clone();
        for r in 0..v.rows {
            for (a, &c) in v.data[r * v.cols..(r + 1) * v.cols].iter_mut().zip(&bm.data) {
                *a += c;
            }
        }
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(v, Op::AddRow(x, b), ng))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let mut v = self.value(x).clone();
        v.data.iter_mut().for_each(|a| *a *= c);
        let ng = self.ng(x);
        self.push(v, Op::Scale(x, c), ng)
    }

    /// `a·x + b` elementwise.
    pub fn affine_scalar(&mut self, x: Var, a: T, b: T) -> Var {
        let mut v = self.value(x).clone();
        v.data.iter_mut().for_each(|e| *e = a * *e + b);
        let ng = self.ng(x);
        self.push(v, Op::AffineScalar(x, a), ng)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err("hadamard", x.shape(), y.shape()));
        }
        let data = x.data.iter().zip(&y.data).map(|(&p, &q)| p * q).collect();
        let v = Matrix {
            rows: x.rows,
            cols: x.cols,
            data,
        };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Hadamard(a, b), ng))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let mut v = self.value(x).clone();
        v.data.iter_mut().for_each(|a| {
            if *a < T::zero() {
                *a *= slope
            }
        });
        let ng = self.ng(x);
        self.push(v, Op::LeakyRelu(x, slope), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        v.data.iter_mut().for_each(|a| *a = sigmoid(*a));
        let ng = self.ng(x);
        self.push(v, Op::Sigmoid(x), ng)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        v.data.iter_mut().for_each(|a| *a = a.ln());
        let ng = self.ng(x);
        self.push(v, Op::Log(x), ng)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let mut v = self.value(x).clone();
        v.data.iter_mut().for_each(|a| *a = a.max(lo).min(hi));
        let ng = self.ng(x);
        self.push(v, Op::Clamp(x, lo, hi), ng)
    }

    /// `out[dst] += x[src]` for every pair; `out` has `n_out` rows.
    pub fn segment_sum(&mut self, x: Var, pairs: Pairs, n_out: usize) -> Result<Var> {
        let xm = self.value(x);
        let d = xm.cols;
        if let Some(&(dst, src)) = pairs
            .iter()
            .find(|&&(dst, src)| dst as usize >= n_out || src as usize >= xm.rows)
        {
            return Err(Error::ShapeMismatch(format!(
                "segment pair ({dst}, {src}) outside {n_out} x {} rows",
                xm.rows
            )));
        }
        let mut v = Matrix::zeros(n_out, d);
        for &(dst, src) in pairs.iter() {
            let (dst, src) = (dst as usize, src as usize);
            for j in 0..d {
                v.data[dst * d + j] += xm.data[src * d + j];
            }
        }
        let ng = self.ng(x);
        Ok(self.push(v, Op::SegmentSum(x, pairs), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            if m.cols != cols {
                return Err(shape_err("concat_rows", (rows, cols), m.shape()));
            }
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Matrix { rows, cols, data }, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows;
        let mut cols = 0;
        for &p in parts {
            let m = self.value(p);
            if m.rows != rows {
                return Err(shape_err("concat_cols", (rows, cols), m.shape()));
            }
            cols += m.cols;
        }
        let mut v = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            for r in 0..rows {
                v.data[r * cols + off..r * cols + off + m.cols].copy_from_slice(m.row(r));
            }
            off += m.cols;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Mean of all entries as a `1 × 1` matrix.
    pub fn mean(&mut self, x: Var) -> Var {
        let m = self.value(x);
        let n = T::from_usize(m.len()).expect("length fits");
        let s = m.data.iter().fold(T::zero(), |a, &b| a + b);
        let ng = self.ng(x);
        self.push(Matrix::scalar(s / n), Op::Mean(x), ng)
    }

    /// `Σ_r x_r · w_r + b`, accumulated term by term in the given order.
    pub fn affine(&mut self, terms: &[(Var, Var)], bias: Option<Var>) -> Result<Var> {
        let (rows, cols) = {
            let (x, w) = (self.value(terms[0].0), self.value(terms[0].1));
            (x.rows, w.cols)
        };
        let mut v = Matrix::zeros(rows, cols);
        if let Some(b) = bias {
            let bm = self.value(b);
            if bm.rows != 1 || bm.cols != cols {
                return Err(shape_err("affine bias", (rows, cols), bm.shape()));
            }
            for r in 0..rows {
                v.data[r * cols..(r + 1) * cols].copy_from_slice(&bm.data);
            }
        }
        for &(x, w) in terms {
            let (xm, wm) = (self.value(x), self.value(w));
            if xm.rows != rows || wm.cols != cols || xm.cols != wm.rows {
                return Err(shape_err("affine term", xm.shape(), wm.shape()));
            }
            gemm_nn(xm, wm, &mut v, T::one());
        }
        let ng = terms.iter().any(|&(x, w)| self.ng(x) || self.ng(w)) || bias.is_some_and(|b| self.ng(b));
        Ok(self.push(v, Op::Affine(terms.to_vec(), bias), ng))
    }

    /// Hash of the sign pattern at every non-smooth point (leaky-ReLU
    /// inputs and clamp bounds). Two passes with equal signatures took the
    /// same linear piece everywhere.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for n in &self.nodes {
            match n.op {
                Op::LeakyRelu(x, _) => {
                    for &a in &self.nodes[x.0].value.data {
                        (a < T::zero()).hash(&mut h);
                    }
                }
                Op::Clamp(x, lo, hi) => {
                    for &a in &self.nodes[x.0].value.data {
                        ((a < lo) as u8 + 2 * (a > hi) as u8).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from a `1 × 1` output.
    pub fn backward(&self, out: Var) -> Grads<T> {
        let mut g: Vec<Option<Matrix<T>>> = vec![None; self.nodes.len()];
        g[out.0] = Some(Matrix::filled(
            self.value(out).rows,
            self.value(out).cols,
            T::one(),
        ));
        for i in (0..=out.0).rev() {
            let Some(gi) = g[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &gi, &mut g);
            g[i] = Some(gi);
        }
        Grads { grads: g }
    }

    fn slot<'a>(&self, g: &'a mut [Option<Matrix<T>>], v: Var) -> Option<&'a mut Matrix<T>> {
        if !self.ng(v) {
            return None;
        }
        let (r, c) = self.value(v).shape();
        Some(g[v.0].get_or_insert_with(|| Matrix::zeros(r, c)))
    }

    fn propagate(&self, node: &Node<T>, gi: &Matrix<T>, g: &mut [Option<Matrix<T>>]) {
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (am, bm) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.slot(g, *a) {
                    gemm_nt_acc(gi, bm, ga);
                }
                if let Some(gb) = self.slot(g, *b) {
                    gemm_tn_acc(am, gi, gb);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.slot(g, v) {
                        gv.add_assign(gi);
                    }
                }
            }
            Op::AddRow(x, b) => {
                if let Some(gx) = self.slot(g, *x) {
                    gx.add_assign(gi);
                }
                if let Some(gb) = self.slot(g, *b) {
                    add_column_sums(gi, gb);
                }
            }
            Op::Scale(x, c) | Op::AffineScalar(x, c) => {
                if let Some(gx) = self.slot(g, *x) {
                    for (a, &b) in gx.data.iter_mut().zip(&gi.data) {
                        *a += *c * b;
                    }
                }
            }
            Op::Hadamard(a, b) => {
                let (am, bm) = (self.value(*a).clone(), self.value(*b).clone());
                if let Some(ga) = self.slot(g, *a) {
                    for ((s, &u), &v) in ga.data.iter_mut().zip(&gi.data).zip(&bm.data) {
                        *s += u * v;
                    }
                }
                if let Some(gb) = self.slot(g, *b) {
                    for ((s, &u), &v) in gb.data.iter_mut().zip(&gi.data).zip(&am.data) {
                        *s += u * v;
                    }
                }
            }
            Op::LeakyRelu(x, slope) => {
                let xm = self.value(*x).clone();
                if let Some(gx) = self.slot(g, *x) {
                    for ((s, &u), &a) in gx.data.iter_mut().zip(&gi.data).zip(&xm.data) {
                        *s += if a < T::zero() { *slope * u } else { u };
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                if let Some(gx) = self.slot(g, *x) {
                    for ((s, &u), &p) in gx.data.iter_mut().zip(&gi.data).zip(&y.data) {
                        *s += u * p * (T::one() - p);
                    }
                }
            }
            Op::Log(x) => {
                let xm = self.value(*x).clone();
                if let Some(gx) = self.slot(g, *x) {
                    for ((s, &u), &a) in gx.data.iter_mut().zip(&gi.data).zip(&xm.data) {
                        *s += u / a;
                    }
                }
            }
            Op::Clamp(x, lo, hi) => {
                let xm = self.value(*x).clone();
                if let Some(gx) = self.slot(g, *x) {
                    for ((s, &u), &a) in gx.data.iter_mut().zip(&gi.data).zip(&xm.data) {
                        if a >= *lo && a <= *hi {
                            *s += u;
                        }
                    }
                }
            }
            Op::SegmentSum(x, pairs) => {
                if let Some(gx) = self.slot(g, *x) {
                    let d = gx.cols;
                    for &(dst, src) in pairs.iter() {
                        let (dst, src) = (dst as usize, src as usize);
                        for j in 0..d {
                            gx.data[src * d + j] += gi.data[dst * d + j];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(gp) = self.slot(g, p) {
                        for (s, &u) in gp.data.iter_mut().zip(&gi.data[off..off + n]) {
                            *s += u;
                        }
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let cols = gi.cols;
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols;
                    if let Some(gp) = self.slot(g, p) {
                        for r in 0..gp.rows {
                            for j in 0..w {
                                gp.data[r * w + j] += gi.data[r * cols + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::Mean(x) => {
                let n = T::from_usize(self.value(*x).len()).expect("length fits");
                let share = gi.data[0] / n;
                if let Some(gx) = self.slot(g, *x) {
                    gx.data.iter_mut().for_each(|s| *s += share);
                }
            }
            Op::Affine(terms, bias) => {
                for &(x, w) in terms {
                    if let Some(gx) = self.slot(g, x) {
                        gemm_nt_acc(gi, self.value(w), gx);
                    }
                    if let Some(gw) = self.slot(g, w) {
                        gemm_tn_acc(self.value(x), gi, gw);
                    }
                }
                if let Some(b) = bias {
                    if let Some(gb) = self.slot(g, *b) {
                        add_column_sums(gi, gb);
                    }
                }
            }
        }
    }

    /// Adds the gradients of every parameter leaf into the store.
    pub fn accumulate(&self, grads: &Grads<T>, store: &mut ParamStore<T>) {
        for (i, n) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(gm)) = (&n.op, &grads.grads[i]) {
                store.params[id.0].grad.add_assign(gm);
            }
        }
    }
}

fn add_column_sums<T: Scalar>(g: &Matrix<T>, out: &mut Matrix<T>) {
    for r in 0..g.rows {
        for (s, &u) in out.data.iter_mut().zip(g.row(r)) {
            *s += u;
        }
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Gradients of one backward sweep.
#[derive(Debug, Clone)]
pub struct Grads<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn wrt(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads[v.0].as_ref()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Matrix<T>,
    pub grad: Matrix<T>,
    m: Vec<T>,
    v: Vec<T>,
}

/// Named parameters with gradients and Adam moments.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            step: 0,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix<T>) -> ParamId {
        let n = value.len();
        self.params.push(Param {
            name: name.into(),
            grad: Matrix::zeros(value.rows, value.cols),
            value,
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn n_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Matrix<T> {
        &self.params[id.0].grad
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Bias-corrected Adam update; clears gradients afterwards.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let f = T::from_f64_lossy;
        let (b1, b2) = (f(cfg.beta1), f(cfg.beta2));
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        let (lr, eps, wd) = (f(cfg.lr), f(cfg.eps), f(cfg.weight_decay));
        for p in &mut self.params {
            for i in 0..p.value.data.len() {
                let g = p.grad.data[i] + wd * p.value.data[i];
                p.m[i] = b1 * p.m[i] + (T::one() - b1) * g;
                p.v[i] = b2 * p.v[i] + (T::one() - b2) * g * g;
                let mh = p.m[i] / c1;
                let vh = p.v[i] / c2;
                p.value.data[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        self.zero_grad();
    }

    /// Text checkpoint: versioned header, caller metadata lines prefixed by
    /// `#`, then per parameter a `name rows cols` line and a value line.
    pub fn to_text(&self, metadata: &[String]) -> String {
        let mut s = format!(
            "# {CHECKPOINT_FORMAT} scalar={} params={} step={}\n",
            T::NAME,
            self.params.len(),
            self.step
        );
        for m in metadata {
            s.push_str(&format!("# {m}\n"));
        }
        for p in &self.params {
            s.push_str(&format!("{} {} {}\n", p.name, p.value.rows, p.value.cols));
            let vals: Vec<String> = p.value.data.iter().map(|v| format!("{v:?}")).collect();
            s.push_str(&vals.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path, metadata: &[String]) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(self.to_text(metadata).as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    /// Parses a checkpoint, returning the store and its metadata lines.
    pub fn from_reader(r: impl BufRead) -> Result<(Self, Vec<String>)> {
        let what = "checkpoint";
        let mut lines = r.lines().enumerate();
        let mut next = || -> Result<Option<(usize, String)>> {
            match lines.next() {
                None => Ok(None),
                Some((i, l)) => l
                    .map(|l| Some((i + 1, l)))
                    .map_err(|e| Error::parse(what, i + 1, e.to_string())),
            }
        };
        let (_, header) = next()?.ok_or_else(|| Error::parse(what, 1, "empty file"))?;
        let rest = header
            .strip_prefix(&format!("# {CHECKPOINT_FORMAT} "))
            .ok_or_else(|| Error::parse(what, 1, "missing or unsupported format header"))?;
        let mut scalar = "";
        let mut count = None;
        let mut step = 0;
        for kv in rest.split(' ') {
            match kv.split_once('=') {
                Some(("scalar", v)) => scalar = v,
                Some(("params", v)) => count = v.parse::<usize>().ok(),
                Some(("step", v)) => step = v.parse().map_err(|_| Error::parse(what, 1, "bad step"))?,
                _ => return Err(Error::parse(what, 1, format!("unexpected header field {kv:?}"))),
            }
        }
        if scalar != T::NAME {
            return Err(Error::parse(what, 1, format!("stored as {scalar}, loading as {}", T::NAME)));
        }
        let count = count.ok_or_else(|| Error::parse(what, 1, "missing parameter count"))?;
        let mut store = ParamStore::new();
        store.step = step;
        let mut metadata = Vec::new();
        while store.len() < count {
            let (i, line) = next()?.ok_or_else(|| Error::parse(what, 0, "truncated file"))?;
            if let Some(m) = line.strip_prefix("# ") {
                metadata.push(m.to_string());
                continue;
            }
            let f: Vec<&str> = line.split(' ').collect();
            let dims = (f.len() == 3)
                .then(|| Some((f[1].parse::<usize>().ok()?, f[2].parse::<usize>().ok()?)))
                .flatten();
            let (rows, cols) = dims.ok_or_else(|| Error::parse(what, i, "expected `name rows cols`"))?;
            let name = f[0].to_string();
            let (j, vals) = next()?.ok_or_else(|| Error::parse(what, i + 1, "missing values"))?;
            let data = vals
                .split(' ')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<f64>().map(T::from_f64_lossy))
                .collect::<std::result::Result<Vec<T>, _>>()
                .map_err(|_| Error::parse(what, j, "bad value"))?;
            let m = Matrix::from_vec(rows, cols, data).map_err(|_| Error::parse(what, j, "wrong value count"))?;
            store.add(name, m);
        }
        Ok((store, metadata))
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<String>)> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(BufReader::new(file))
    }

    /// Copies values from a store with identical names and shapes.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::ShapeMismatch("parameter counts differ".into()));
        }
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::ShapeMismatch(format!("parameter {} does not match {}", a.name, b.name)));
            }
            a.value.data.clone_from(&b.value.data);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub h: f64,
    /// Entries sampled per parameter (all entries when smaller).
    pub samples_per_param: usize,
    /// Denominator floor of the relative error. Below ~1e-6 the central
    /// difference of an O(1) loss at h = 1e-5 is dominated by round-off
    /// (about eps * |loss| / h), so smaller entries are compared absolutely.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            samples_per_param: 6,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Entries whose ±h perturbation crossed a kink and were not compared.
    pub skipped_kinks: usize,
}

/// Central finite differences against the analytic gradient of the scalar
/// built by `f`, over sampled parameter entries.
pub fn grad_check<F>(store: &mut ParamStore<f64>, f: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let base_sig = tape.kink_signature();
    let grads = tape.backward(out);
    let mut analytic = ParamStore::new();
    for id in store.ids() {
        let p = store.param(id);
        analytic.add(p.name.clone(), Matrix::zeros(p.value.rows, p.value.cols));
    }
    tape.accumulate(&grads, &mut analytic);

    let eval = |store: &ParamStore<f64>| -> Result<(f64, u64)> {
        let mut t = Tape::new();
        let o = f(&mut t, store)?;
        Ok((t.value(o).data[0], t.kink_signature()))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped_kinks: 0,
    };
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let n = store.value(id).len();
        let entries: Vec<usize> = if n <= cfg.samples_per_param {
            (0..n).collect()
        } else {
            (0..cfg.samples_per_param).map(|_| rng.gen_range(0..n)).collect()
        };
        for i in entries {
            let orig = store.value(id).data[i];
            store.value_mut(id).data[i] = orig + cfg.h;
            let (plus, s1) = eval(store)?;
            store.value_mut(id).data[i] = orig - cfg.h;
            let (minus, s2) = eval(store)?;
            store.value_mut(id).data[i] = orig;
            if s1 != base_sig || s2 != base_sig {
                report.skipped_kinks += 1;
                continue;
            }
            let fd = (plus - minus) / (2.0 * cfg.h);
            let a = analytic.grad(id).data[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(cfg.abs_floor);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((store.param(id).name.clone(), i));
            }
        }
    }
    Ok(report)
}
