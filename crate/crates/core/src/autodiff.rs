//! Minimal dense reverse-mode differentiation over `f64` matrices.
//!
//! Network code is written once against the [`Graph`] trait and runs on two
//! backends: [`Eval`] computes values only, [`Tape`] records every operation
//! so that [`Tape::backward`] can return parameter gradients.

use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{concatenate, s, Array2, Axis};

pub type Mat = Array2<f64>;

/// A named trainable matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Mat,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Mat) -> Self {
        Self { name: name.into(), value }
    }

    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self::new(name, Mat::zeros((rows, cols)))
    }

    fn key(&self) -> usize {
        self as *const Param as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Exp,
    Square,
    LeakyRelu(f64),
}

impl Unary {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Unary::Tanh => x.tanh(),
            Unary::Exp => x.exp(),
            Unary::Square => x * x,
            Unary::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    #[inline]
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Exp => y,
            Unary::Square => 2.0 * x,
            Unary::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
        }
    }
}

/// Operations shared by the value-only and recording backends.
pub trait Graph<'p> {
    type Node: Clone;

    fn constant(&mut self, value: Mat) -> Self::Node;
    fn param(&mut self, p: &'p Param) -> Self::Node;
    fn value<'a>(&'a self, node: &'a Self::Node) -> &'a Mat;

    fn matmul(&mut self, a: &Self::Node, b: &Self::Node) -> Self::Node;
    /// Elementwise sum; `b` may be a single row broadcast over `a`.
    fn add(&mut self, a: &Self::Node, b: &Self::Node) -> Self::Node;
    fn sub(&mut self, a: &Self::Node, b: &Self::Node) -> Self::Node;
    fn mul(&mut self, a: &Self::Node, b: &Self::Node) -> Self::Node;
    /// `scale * a + shift`, elementwise.
    fn affine(&mut self, a: &Self::Node, scale: f64, shift: f64) -> Self::Node;
    fn unary(&mut self, a: &Self::Node, f: Unary) -> Self::Node;
    fn concat_cols(&mut self, parts: &[Self::Node]) -> Self::Node;
    fn slice_cols(&mut self, a: &Self::Node, start: usize, len: usize) -> Self::Node;
    fn concat_rows(&mut self, parts: &[Self::Node]) -> Self::Node;
    fn slice_rows(&mut self, a: &Self::Node, start: usize, len: usize) -> Self::Node;
    /// Sum of every entry, as a 1x1 matrix.
    fn sum(&mut self, a: &Self::Node) -> Self::Node;
    /// Per-row sum, as a column.
    fn sum_cols(&mut self, a: &Self::Node) -> Self::Node;
    /// Fused GRU update from input projections `xp` and hidden projections
    /// `hp` (both `rows x 3H`, gate order reset, update, candidate) and the
    /// previous state `h`: `n + u * (h - n)` with
    /// `n = tanh(xp_n + r * hp_n)`.
    fn gru_update(&mut self, xp: &Self::Node, hp: &Self::Node, h: &Self::Node) -> Self::Node;

    fn mean(&mut self, a: &Self::Node) -> Self::Node {
        let n = self.value(a).len() as f64;
        let total = self.sum(a);
        self.affine(&total, 1.0 / n, 0.0)
    }

    fn scalar(&mut self, a: &Self::Node) -> f64 {
        let v = self.value(a);
        debug_assert_eq!(v.len(), 1);
        v[[0, 0]]
    }
}

fn broadcast_add(a: &Mat, b: &Mat) -> Mat {
    if a.dim() == b.dim() {
        a + b
    } else {
        assert!(
            b.nrows() == 1 && b.ncols() == a.ncols(),
            "add: shapes {:?} and {:?} do not broadcast",
            a.dim(),
            b.dim()
        );
        a + &b.row(0)
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Returns the new state and the saved gates `[r, u, n]`.
fn gru_forward(xp: &Mat, hp: &Mat, h: &Mat) -> (Mat, Mat) {
    let (rows, hd) = h.dim();
    assert_eq!(xp.dim(), (rows, 3 * hd), "gru_update: input projection shape");
    assert_eq!(hp.dim(), (rows, 3 * hd), "gru_update: hidden projection shape");
    let mut out = Mat::zeros((rows, hd));
    let mut gates = Mat::zeros((rows, 3 * hd));
    for b in 0..rows {
        let (x, y, hb) = (xp.row(b), hp.row(b), h.row(b));
        let mut g = gates.row_mut(b);
        let mut o = out.row_mut(b);
        for k in 0..hd {
            let r = sigmoid(x[k] + y[k]);
            let u = sigmoid(x[hd + k] + y[hd + k]);
            // tanh(a) = 2 sigmoid(2a) - 1
            let n = 2.0 * sigmoid(2.0 * (x[2 * hd + k] + r * y[2 * hd + k])) - 1.0;
            g[k] = r;
            g[hd + k] = u;
            g[2 * hd + k] = n;
            o[k] = n + u * (hb[k] - n);
        }
    }
    (out, gates)
}

fn map_unary(a: &Mat, f: Unary) -> Mat {
    a.mapv(|x| f.apply(x))
}

fn cat_cols(parts: &[&Mat]) -> Mat {
    let views: Vec<_> = parts.iter().map(|m| m.view()).collect();
    concatenate(Axis(1), &views).expect("concat_cols: row counts differ")
}

fn cat_rows(parts: &[&Mat]) -> Mat {
    let views: Vec<_> = parts.iter().map(|m| m.view()).collect();
    concatenate(Axis(0), &views).expect("concat_rows: column counts differ")
}

/// Value-only backend.
#[derive(Default)]
pub struct Eval {
    params: HashMap<usize, Rc<Mat>>,
}

impl Eval {
    pub fn new() -> Self {
        Self::default()
    }
}

impl<'p> Graph<'p> for Eval {
    type Node = Rc<Mat>;

    fn constant(&mut self, value: Mat) -> Rc<Mat> {
        Rc::new(value)
    }

    fn param(&mut self, p: &'p Param) -> Rc<Mat> {
        self.params
            .entry(p.key())
            .or_insert_with(|| Rc::new(p.value.clone()))
            .clone()
    }

    fn value<'a>(&'a self, node: &'a Rc<Mat>) -> &'a Mat {
        node
    }

    fn matmul(&mut self, a: &Rc<Mat>, b: &Rc<Mat>) -> Rc<Mat> {
        Rc::new(a.dot(&**b))
    }

    fn add(&mut self, a: &Rc<Mat>, b: &Rc<Mat>) -> Rc<Mat> {
        Rc::new(broadcast_add(a, b))
    }

    fn sub(&mut self, a: &Rc<Mat>, b: &Rc<Mat>) -> Rc<Mat> {
        Rc::new(&**a - &**b)
    }

    fn mul(&mut self, a: &Rc<Mat>, b: &Rc<Mat>) -> Rc<Mat> {
        Rc::new(&**a * &**b)
    }

    fn affine(&mut self, a: &Rc<Mat>, scale: f64, shift: f64) -> Rc<Mat> {
        Rc::new(a.mapv(|x| scale * x + shift))
    }

    fn unary(&mut self, a: &Rc<Mat>, f: Unary) -> Rc<Mat> {
        Rc::new(map_unary(a, f))
    }

    fn concat_cols(&mut self, parts: &[Rc<Mat>]) -> Rc<Mat> {
        let refs: Vec<&Mat> = parts.iter().map(|p| &**p).collect();
        Rc::new(cat_cols(&refs))
    }

    fn slice_cols(&mut self, a: &Rc<Mat>, start: usize, len: usize) -> Rc<Mat> {
        Rc::new(a.slice(s![.., start..start + len]).to_owned())
    }

    fn concat_rows(&mut self, parts: &[Rc<Mat>]) -> Rc<Mat> {
        let refs: Vec<&Mat> = parts.iter().map(|p| &**p).collect();
        Rc::new(cat_rows(&refs))
    }

    fn slice_rows(&mut self, a: &Rc<Mat>, start: usize, len: usize) -> Rc<Mat> {
        Rc::new(a.slice(s![start..start + len, ..]).to_owned())
    }

    fn sum(&mut self, a: &Rc<Mat>) -> Rc<Mat> {
        Rc::new(Mat::from_elem((1, 1), a.sum()))
    }

    fn sum_cols(&mut self, a: &Rc<Mat>) -> Rc<Mat> {
        Rc::new(a.sum_axis(Axis(1)).insert_axis(Axis(1)))
    }

    fn gru_update(&mut self, xp: &Rc<Mat>, hp: &Rc<Mat>, h: &Rc<Mat>) -> Rc<Mat> {
        Rc::new(gru_forward(xp, hp, h).0)
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Unary(Var, Unary),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Sum(Var),
    SumCols(Var),
    /// Inputs `xp`, `hp`, `h` and the saved gates `[r, u, n]`.
    GruUpdate(Var, Var, Var, Mat),
}

struct TapeNode {
    value: Mat,
    op: Op,
}

/// Recording backend.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<TapeNode>,
    params: HashMap<usize, Var>,
}

/// Parameter gradients produced by [`Tape::backward`], keyed by parameter identity.
#[derive(Debug, Default)]
pub struct Gradients {
    by_param: HashMap<usize, Mat>,
}

impl Gradients {
    /// Gradient of `p`, or `None` when `p` did not take part in the computation.
    pub fn get(&self, p: &Param) -> Option<&Mat> {
        self.by_param.get(&p.key())
    }

    /// Gradient of `p`, zero-filled when `p` was unused.
    pub fn get_or_zero(&self, p: &Param) -> Mat {
        self.get(p)
            .cloned()
            .unwrap_or_else(|| Mat::zeros(p.value.dim()))
    }

    /// Adds `g` into the gradient of `p`.
    pub fn accumulate(&mut self, p: &Param, g: &Mat) {
        match self.by_param.get_mut(&p.key()) {
            Some(existing) => *existing += g,
            None => {
                self.by_param.insert(p.key(), g.clone());
            }
        }
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

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(TapeNode { value, op });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Gradients of the scalar `loss` with respect to every parameter
    /// registered on this tape.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.val(loss).len(), 1, "backward: loss must be a scalar");
        let mut grads: Vec<Option<Mat>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Mat::ones((1, 1)));

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.val(*b).t());
                    let gb = self.val(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    let gb = if self.val(*b).dim() == g.dim() {
                        g.clone()
                    } else {
                        g.sum_axis(Axis(0)).insert_axis(Axis(0))
                    };
                    acc(&mut grads, *b, gb);
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.val(*b);
                    let gb = &g * self.val(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Affine(a, scale) => {
                    acc(&mut grads, *a, g * *scale);
                }
                Op::Unary(a, f) => {
                    let mut ga = g;
                    ndarray::Zip::from(&mut ga)
                        .and(self.val(*a))
                        .and(&node.value)
                        .for_each(|gi, &x, &y| *gi *= f.derivative(x, y));
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.val(*p).ncols();
                        acc(&mut grads, *p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Mat::zeros(self.val(*a).dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let h = self.val(*p).nrows();
                        acc(&mut grads, *p, g.slice(s![start..start + h, ..]).to_owned());
                        start += h;
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Mat::zeros(self.val(*a).dim());
                    ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let ga = Mat::from_elem(self.val(*a).dim(), g[[0, 0]]);
                    acc(&mut grads, *a, ga);
                }
                Op::SumCols(a) => {
                    let (r, c) = self.val(*a).dim();
                    let mut ga = Mat::zeros((r, c));
                    for (mut row, gi) in ga.rows_mut().into_iter().zip(g.iter()) {
                        row.fill(*gi);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::GruUpdate(xp, hp, h, gates) => {
                    let (rows, hd) = g.dim();
                    let hv = self.val(*h);
                    let hpv = self.val(*hp);
                    let mut gx = Mat::zeros((rows, 3 * hd));
                    let mut gh = Mat::zeros((rows, 3 * hd));
                    let mut gprev = Mat::zeros((rows, hd));
                    for b in 0..rows {
                        for k in 0..hd {
                            let (r, u, n) = (gates[[b, k]], gates[[b, hd + k]], gates[[b, 2 * hd + k]]);
                            let gi = g[[b, k]];
                            gprev[[b, k]] = gi * u;
                            let du = gi * (hv[[b, k]] - n);
                            let dn = gi * (1.0 - u) * (1.0 - n * n);
                            let dr = dn * hpv[[b, 2 * hd + k]] * r * (1.0 - r);
                            let du = du * u * (1.0 - u);
                            gx[[b, k]] = dr;
                            gx[[b, hd + k]] = du;
                            gx[[b, 2 * hd + k]] = dn;
                            gh[[b, k]] = dr;
                            gh[[b, hd + k]] = du;
                            gh[[b, 2 * hd + k]] = dn * r;
                        }
                    }
                    acc(&mut grads, *xp, gx);
                    acc(&mut grads, *hp, gh);
                    acc(&mut grads, *h, gprev);
                }
            }
        }

        let mut by_param = HashMap::with_capacity(self.params.len());
        for (&key, var) in &self.params {
            if let Some(Some(g)) = grads.get_mut(var.0).map(Option::take) {
                by_param.insert(key, g);
            }
        }
        Gradients { by_param }
    }
}

impl<'p> Graph<'p> for Tape {
    type Node = Var;

    fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    fn param(&mut self, p: &'p Param) -> Var {
        if let Some(v) = self.params.get(&p.key()) {
            return *v;
        }
        let v = self.push(p.value.clone(), Op::Leaf);
        self.params.insert(p.key(), v);
        v
    }

    fn value<'a>(&'a self, node: &'a Var) -> &'a Mat {
        self.val(*node)
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Var {
        let v = self.val(*a).dot(self.val(*b));
        self.push(v, Op::MatMul(*a, *b))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Var {
        let v = broadcast_add(self.val(*a), self.val(*b));
        self.push(v, Op::Add(*a, *b))
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Var {
        let v = self.val(*a) - self.val(*b);
        self.push(v, Op::Sub(*a, *b))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Var {
        let v = self.val(*a) * self.val(*b);
        self.push(v, Op::Mul(*a, *b))
    }

    fn affine(&mut self, a: &Var, scale: f64, shift: f64) -> Var {
        let v = self.val(*a).mapv(|x| scale * x + shift);
        self.push(v, Op::Affine(*a, scale))
    }

    fn unary(&mut self, a: &Var, f: Unary) -> Var {
        let v = map_unary(self.val(*a), f);
        self.push(v, Op::Unary(*a, f))
    }

    fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let refs: Vec<&Mat> = parts.iter().map(|p| self.val(*p)).collect();
        let v = cat_cols(&refs);
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    fn slice_cols(&mut self, a: &Var, start: usize, len: usize) -> Var {
        let v = self.val(*a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols(*a, start))
    }

    fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let refs: Vec<&Mat> = parts.iter().map(|p| self.val(*p)).collect();
        let v = cat_rows(&refs);
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    fn slice_rows(&mut self, a: &Var, start: usize, len: usize) -> Var {
        let v = self.val(*a).slice(s![start..start + len, ..]).to_owned();
        self.push(v, Op::SliceRows(*a, start))
    }

    fn sum(&mut self, a: &Var) -> Var {
        let v = Mat::from_elem((1, 1), self.val(*a).sum());
        self.push(v, Op::Sum(*a))
    }

    fn sum_cols(&mut self, a: &Var) -> Var {
        let v = self.val(*a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::SumCols(*a))
    }

    fn gru_update(&mut self, xp: &Var, hp: &Var, h: &Var) -> Var {
        let (v, gates) = gru_forward(self.val(*xp), self.val(*hp), self.val(*h));
        self.push(v, Op::GruUpdate(*xp, *hp, *h, gates))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central finite differences of `f` with respect to every entry of `p`.
    fn numeric_grad(p: &mut Param, f: &dyn Fn(&Param) -> f64) -> Mat {
        let h = 1e-6;
        let mut out = Mat::zeros(p.value.dim());
        for idx in 0..p.value.len() {
            let (r, c) = (idx / p.value.ncols(), idx % p.value.ncols());
            let orig = p.value[[r, c]];
            p.value[[r, c]] = orig + h;
            let up = f(p);
            p.value[[r, c]] = orig - h;
            let down = f(p);
            p.value[[r, c]] = orig;
            out[[r, c]] = (up - down) / (2.0 * h);
        }
        out
    }

    fn composite<'p, G: Graph<'p>>(g: &mut G, w: &'p Param, b: &'p Param) -> G::Node {
        let x = g.constant(array![[0.3, -1.2, 0.5], [1.1, 0.2, -0.7]]);
        let wv = g.param(w);
        let bv = g.param(b);
        let h = g.matmul(&x, &wv);
        let h = g.add(&h, &bv);
        let t = g.unary(&h, Unary::Tanh);
        let s = g.unary(&h, Unary::Sigmoid);
        let m = g.mul(&t, &s);
        let left = g.slice_cols(&m, 0, 1);
        let right = g.slice_cols(&m, 1, 1);
        let d = g.sub(&left, &right);
        let both = g.concat_rows(&[d.clone(), left]);
        let e = g.unary(&both, Unary::Exp);
        let sq = g.unary(&e, Unary::Square);
        let lr = g.unary(&sq, Unary::LeakyRelu(0.1));
        let rows = g.sum_cols(&lr);
        let cc = g.concat_cols(&[rows.clone(), rows]);
        let top = g.slice_rows(&cc, 1, 2);
        let a = g.affine(&top, 0.5, 2.0);
        g.mean(&a)
    }

    #[test]
    fn tape_matches_finite_differences() {
        let mut w = Param::new("w", array![[0.2, -0.4], [0.7, 0.1], [-0.3, 0.5]]);
        let mut b = Param::new("b", array![[0.05, -0.02]]);
        let (gw, gb) = {
            let mut tape = Tape::new();
            let loss = composite(&mut tape, &w, &b);
            let grads = tape.backward(loss);
            (grads.get(&w).unwrap().clone(), grads.get(&b).unwrap().clone())
        };
        let bc = b.clone();
        let nw = numeric_grad(&mut w, &|w| {
            let mut g = Eval::new();
            let n = composite(&mut g, w, &bc);
            g.scalar(&n)
        });
        let wc = w.clone();
        let nb = numeric_grad(&mut b, &|b| {
            let mut g = Eval::new();
            let n = composite(&mut g, &wc, b);
            g.scalar(&n)
        });
        for (a, n) in gw.iter().zip(nw.iter()).chain(gb.iter().zip(nb.iter())) {
            assert!((a - n).abs() < 1e-7 * (1.0 + n.abs()), "{a} vs {n}");
        }
    }

    #[test]
    fn shared_param_accumulates() {
        let w = Param::new("w", array![[2.0]]);
        let mut tape = Tape::new();
        let a = tape.param(&w);
        let b = tape.param(&w);
        let y = tape.mul(&a, &b);
        let grads = tape.backward(y);
        assert_eq!(grads.get(&w).unwrap()[[0, 0]], 4.0);
    }

    #[test]
    fn unused_param_has_no_gradient() {
        let w = Param::new("w", array![[2.0]]);
        let unused = Param::new("u", array![[1.0]]);
        let mut tape = Tape::new();
        let a = tape.param(&w);
        let _ = tape.param(&unused);
        let y = tape.sum(&a);
        let grads = tape.backward(y);
        assert!(grads.get(&unused).is_none());
        assert_eq!(grads.get_or_zero(&unused)[[0, 0]], 0.0);
    }

    #[test]
    fn eval_and_tape_agree() {
        let w = Param::new("w", array![[0.2, -0.4], [0.7, 0.1], [-0.3, 0.5]]);
        let b = Param::new("b", array![[0.05, -0.02]]);
        let mut e = Eval::new();
        let ne = composite(&mut e, &w, &b);
        let mut t = Tape::new();
        let nt = composite(&mut t, &w, &b);
        assert_eq!(e.scalar(&ne), t.scalar(&nt));
    }

    /// The fused update written with primitive ops.
    fn gru_reference<'p, G: Graph<'p>>(g: &mut G, xp: &G::Node, hp: &G::Node, h: &G::Node) -> G::Node {
        let hd = g.value(h).ncols();
        let xr = g.slice_cols(xp, 0, 2 * hd);
        let hr = g.slice_cols(hp, 0, 2 * hd);
        let ru = g.add(&xr, &hr);
        let ru = g.unary(&ru, Unary::Sigmoid);
        let r = g.slice_cols(&ru, 0, hd);
        let u = g.slice_cols(&ru, hd, hd);
        let xn = g.slice_cols(xp, 2 * hd, hd);
        let hn = g.slice_cols(hp, 2 * hd, hd);
        let gated = g.mul(&r, &hn);
        let n = g.add(&xn, &gated);
        let n = g.unary(&n, Unary::Tanh);
        let diff = g.sub(h, &n);
        let keep = g.mul(&u, &diff);
        g.add(&n, &keep)
    }

    fn gru_loss<'p, G: Graph<'p>>(g: &mut G, xp: &'p Param, hp: &'p Param, h: &'p Param, fused: bool) -> G::Node {
        let (a, b, c) = (g.param(xp), g.param(hp), g.param(h));
        let out = if fused { g.gru_update(&a, &b, &c) } else { gru_reference(g, &a, &b, &c) };
        let w = g.constant(Mat::from_shape_fn(g.value(&out).dim(), |(i, j)| 0.3 + 0.2 * i as f64 - 0.1 * j as f64));
        let y = g.mul(&out, &w);
        let y = g.unary(&y, Unary::Square);
        g.sum(&y)
    }

    #[test]
    fn fused_gru_matches_reference_and_differences() {
        let xp = Param::new("xp", Mat::from_shape_fn((2, 6), |(i, j)| ((i * 6 + j) as f64 * 0.7).sin()));
        let hp = Param::new("hp", Mat::from_shape_fn((2, 6), |(i, j)| ((i * 6 + j) as f64 * 1.3).cos()));
        let h = Param::new("h", Mat::from_shape_fn((2, 2), |(i, j)| 0.4 * i as f64 - 0.3 * j as f64));
        let mut t = Tape::new();
        let fused = gru_loss(&mut t, &xp, &hp, &h, true);
        let mut r = Tape::new();
        let reference = gru_loss(&mut r, &xp, &hp, &h, false);
        assert!((t.scalar(&fused) - r.scalar(&reference)).abs() < 1e-14);
        let gf = t.backward(fused);
        let gr = r.backward(reference);
        let mut params = [xp.clone(), hp.clone(), h.clone()];
        for i in 0..3 {
            let (a, b) = (gf.get(&[&xp, &hp, &h][i]).unwrap(), gr.get(&[&xp, &hp, &h][i]).unwrap());
            assert!((a - b).iter().all(|d| d.abs() < 1e-12));
            let others = params.clone();
            let numeric = numeric_grad(&mut params[i], &|p| {
                let mut set = others.clone();
                set[i] = p.clone();
                let mut e = Eval::new();
                let v = gru_loss(&mut e, &set[0], &set[1], &set[2], true);
                e.scalar(&v)
            });
            assert!((a - &numeric).iter().all(|d| d.abs() < 1e-7), "{a} vs {numeric}");
        }
    }
}
