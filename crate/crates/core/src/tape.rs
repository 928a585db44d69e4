//! A small reverse-mode differentiation tape over dense `f64` matrices.
//!
//! Only the operations the codec networks need are provided. Values are
//! reference counted so that, with recording disabled, intermediates are
//! dropped as soon as the forward pass no longer needs them.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Lower bound on the standard deviation used by [`Tape::standardize`].
pub const STD_FLOOR: f64 = 1e-8;

/// A value on the tape. `id == None` marks a constant.
#[derive(Clone, Debug)]
pub struct Var {
    id: Option<usize>,
    value: Rc<Mat>,
}

impl Var {
    pub fn value(&self) -> &Mat {
        &self.value
    }

    pub fn rows(&self) -> usize {
        self.value.nrows()
    }

    pub fn cols(&self) -> usize {
        self.value.ncols()
    }

    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }
}

#[derive(Debug)]
enum Op {
    Param(usize),
    MatMul(Var, Var),
    AddBias(Var, Var),
    AddBlockRows(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Rc<Mat>),
    Identity(Var),
    Relu(Var),
    Gelu(Var),
    ConcatCols(Vec<Var>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        block: usize,
        scale: f64,
        rho: Rc<Vec<f64>>,
    },
    Standardize {
        x: Var,
        active: Rc<Vec<bool>>,
        std: f64,
        floored: bool,
    },
    Softmax(Var),
    LogSoftmax(Var),
    WeightedSum(Var, Rc<Mat>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Rc<Mat>,
}

/// Recording context for one forward pass.
#[derive(Debug)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
}

/// Batch statistics returned by [`Tape::standardize`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Tape {
    /// A tape that records operations for a backward pass.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A tape that only evaluates; every result is a constant.
    pub fn inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, value: Mat, tracked: bool) -> Var {
        let value = Rc::new(value);
        if !(self.recording && tracked) {
            return Var { id: None, value };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value: Rc::clone(&value),
        });
        Var {
            id: Some(nodes.len() - 1),
            value,
        }
    }

    pub fn constant(&self, value: Mat) -> Var {
        Var {
            id: None,
            value: Rc::new(value),
        }
    }

    /// Leaf for parameter `index`; its gradient is reported by [`Tape::backward`].
    pub fn param(&self, index: usize, value: &Mat) -> Var {
        self.push(Op::Param(index), value.clone(), true)
    }

    pub fn matmul(&self, a: &Var, b: &Var) -> Var {
        let out = a.value.dot(&*b.value);
        self.push(Op::MatMul(a.clone(), b.clone()), out, a.is_tracked() || b.is_tracked())
    }

    /// `a + bias` with a `1 x k` bias broadcast over rows.
    pub fn add_bias(&self, a: &Var, bias: &Var) -> Var {
        let out = &*a.value + &*bias.value;
        self.push(Op::AddBias(a.clone(), bias.clone()), out, a.is_tracked() || bias.is_tracked())
    }

    /// Adds row `r % B` of the `B x k` matrix `pos` to row `r` of `a`.
    pub fn add_block_rows(&self, a: &Var, pos: &Var) -> Var {
        let block = pos.rows();
        let mut out = (*a.value).clone();
        for (r, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            row += &pos.value.row(r % block);
        }
        self.push(Op::AddBlockRows(a.clone(), pos.clone()), out, a.is_tracked() || pos.is_tracked())
    }

    pub fn add(&self, a: &Var, b: &Var) -> Var {
        let out = &*a.value + &*b.value;
        self.push(Op::Add(a.clone(), b.clone()), out, a.is_tracked() || b.is_tracked())
    }

    pub fn scale(&self, a: &Var, c: f64) -> Var {
        let out = &*a.value * c;
        self.push(Op::Scale(a.clone(), c), out, a.is_tracked())
    }

    /// Element-wise product with a constant matrix of the same shape.
    pub fn mul_const(&self, a: &Var, c: Mat) -> Var {
        let out = &*a.value * &c;
        self.push(Op::MulConst(a.clone(), Rc::new(c)), out, a.is_tracked())
    }

    /// `a + c` for a constant `c` of the same shape.
    pub fn add_const(&self, a: &Var, c: &Mat) -> Var {
        let out = &*a.value + c;
        self.push(Op::Identity(a.clone()), out, a.is_tracked())
    }

    pub fn relu(&self, a: &Var) -> Var {
        let out = a.value.mapv(|x| x.max(0.0));
        self.push(Op::Relu(a.clone()), out, a.is_tracked())
    }

    /// GeLU, tanh approximation.
    pub fn gelu(&self, a: &Var) -> Var {
        let out = a.value.mapv(gelu);
        self.push(Op::Gelu(a.clone()), out, a.is_tracked())
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let rows = parts[0].rows();
        let width: usize = parts.iter().map(Var::cols).sum();
        let mut out = Mat::zeros((rows, width));
        let mut c = 0;
        for p in parts {
            out.slice_mut(s![.., c..c + p.cols()]).assign(&*p.value);
            c += p.cols();
        }
        let tracked = parts.iter().any(Var::is_tracked);
        self.push(Op::ConcatCols(parts.to_vec()), out, tracked)
    }

    /// Block-diagonal masked self-attention.
    ///
    /// Rows are grouped into consecutive blocks of `block` rows (one block
    /// per session). For every active row `j` (a receiving check node) the
    /// coefficients `rho[j][i] = softmax_i(scale * q_j . k_i)` range over
    /// all rows `i` of its block, and the output row is `sum_i rho[j][i] v_i`.
    /// Inactive rows output zero and have no coefficients.
    ///
    /// Returns the output and the coefficients, laid out as
    /// `rho[(b * block + j) * block + i]`.
    pub fn attention(&self, q: &Var, k: &Var, v: &Var, active: &[bool], block: usize, scale: f64) -> (Var, Rc<Vec<f64>>) {
        let n = q.rows();
        let d = v.cols();
        let mut out = Mat::zeros((n, d));
        let mut rho = vec![0.0; n * block];
        for b in 0..n / block {
            let r0 = b * block;
            let qb = q.value.slice(s![r0..r0 + block, ..]);
            let kb = k.value.slice(s![r0..r0 + block, ..]);
            let vb = v.value.slice(s![r0..r0 + block, ..]);
            if !active[r0..r0 + block].iter().any(|&a| a) {
                continue;
            }
            let scores = qb.dot(&kb.t());
            for j in 0..block {
                if !active[r0 + j] {
                    continue;
                }
                let row = scores.row(j);
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let w = &mut rho[(r0 + j) * block..(r0 + j + 1) * block];
                let mut z = 0.0;
                for (wi, &sc) in w.iter_mut().zip(row.iter()) {
                    *wi = (scale * (sc - mx)).exp();
                    z += *wi;
                }
                w.iter_mut().for_each(|wi| *wi /= z);
                let mut orow = out.row_mut(r0 + j);
                for (i, &wi) in w.iter().enumerate() {
                    orow.scaled_add(wi, &vb.row(i));
                }
            }
        }
        let rho = Rc::new(rho);
        let tracked = q.is_tracked() || k.is_tracked() || v.is_tracked();
        let var = self.push(
            Op::Attention {
                q: q.clone(),
                k: k.clone(),
                v: v.clone(),
                block,
                scale,
                rho: Rc::clone(&rho),
            },
            out,
            tracked,
        );
        (var, rho)
    }

    /// Standardizes the active entries of a column vector to zero mean and
    /// unit variance using their own statistics; inactive entries become 0.
    pub fn standardize(&self, x: &Var, active: &[bool]) -> (Var, BatchStats) {
        let vals = x.value.column(0);
        let count = active.iter().filter(|&&a| a).count();
        let (mean, var) = if count == 0 {
            (0.0, 0.0)
        } else {
            let mean = vals.iter().zip(active).filter(|(_, &a)| a).map(|(v, _)| v).sum::<f64>() / count as f64;
            let var = vals
                .iter()
                .zip(active)
                .filter(|(_, &a)| a)
                .map(|(v, _)| (v - mean).powi(2))
                .sum::<f64>()
                / count as f64;
            (mean, var)
        };
        let raw_std = var.sqrt();
        let floored = !(raw_std > STD_FLOOR);
        let std = if floored { STD_FLOOR } else { raw_std };
        let mut out = Mat::zeros((x.rows(), 1));
        for (o, (v, &a)) in out.iter_mut().zip(vals.iter().zip(active)) {
            if a {
                *o = (v - mean) / std;
            }
        }
        let var = self.push(
            Op::Standardize {
                x: x.clone(),
                active: Rc::new(active.to_vec()),
                std,
                floored,
            },
            out,
            x.is_tracked(),
        );
        (var, BatchStats { mean, std, count })
    }

    /// Row-wise softmax.
    pub fn softmax(&self, a: &Var) -> Var {
        let mut out = (*a.value).clone();
        for mut row in out.axis_iter_mut(Axis(0)) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - mx).exp());
            let z = row.sum();
            row /= z;
        }
        self.push(Op::Softmax(a.clone()), out, a.is_tracked())
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&self, a: &Var) -> Var {
        let mut out = (*a.value).clone();
        for mut row in out.axis_iter_mut(Axis(0)) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            row -= lse;
        }
        self.push(Op::LogSoftmax(a.clone()), out, a.is_tracked())
    }

    /// Scalar `sum(a .* w)` as a `1 x 1` matrix.
    pub fn weighted_sum(&self, a: &Var, w: Mat) -> Var {
        let total = Zip::from(&*a.value).and(&w).fold(0.0, |acc, x, y| acc + x * y);
        let out = Mat::from_elem((1, 1), total);
        self.push(Op::WeightedSum(a.clone(), Rc::new(w)), out, a.is_tracked())
    }

    /// Gradients of the scalar `root` with respect to every parameter leaf,
    /// indexed by parameter index. Parameters that did not influence `root`
    /// get `None`.
    pub fn backward(&self, root: &Var, num_params: usize) -> Vec<Option<Mat>> {
        let mut param_grads: Vec<Option<Mat>> = vec![None; num_params];
        let Some(root_id) = root.id else {
            return param_grads;
        };
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Mat>> = vec![None; root_id + 1];
        grads[root_id] = Some(Mat::ones(root.value.raw_dim()));

        fn acc(grads: &mut [Option<Mat>], v: &Var, g: Mat) {
            if let Some(id) = v.id {
                match &mut grads[id] {
                    Some(existing) => *existing += &g,
                    slot => *slot = Some(g),
                }
            }
        }

        for id in (0..=root_id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.op {
                Op::Param(index) => match &mut param_grads[*index] {
                    Some(existing) => *existing += &g,
                    slot => *slot = Some(g),
                },
                Op::MatMul(a, b) => {
                    if a.is_tracked() {
                        acc(&mut grads, a, g.dot(&b.value.t()));
                    }
                    if b.is_tracked() {
                        acc(&mut grads, b, a.value.t().dot(&g));
                    }
                }
                Op::AddBias(a, bias) => {
                    if bias.is_tracked() {
                        acc(&mut grads, bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    acc(&mut grads, a, g);
                }
                Op::AddBlockRows(a, pos) => {
                    if pos.is_tracked() {
                        let block = pos.rows();
                        let mut gp = Mat::zeros(pos.value.raw_dim());
                        for (r, row) in g.axis_iter(Axis(0)).enumerate() {
                            let mut dst = gp.row_mut(r % block);
                            dst += &row;
                        }
                        acc(&mut grads, pos, gp);
                    }
                    acc(&mut grads, a, g);
                }
                Op::Add(a, b) => {
                    if b.is_tracked() {
                        acc(&mut grads, b, g.clone());
                    }
                    acc(&mut grads, a, g);
                }
                Op::Scale(a, c) => acc(&mut grads, a, g * *c),
                Op::MulConst(a, c) => acc(&mut grads, a, g * &**c),
                Op::Identity(a) => acc(&mut grads, a, g),
                Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(&*a.value).for_each(|gi, &x| {
                        if x <= 0.0 {
                            *gi = 0.0;
                        }
                    });
                    acc(&mut grads, a, ga);
                }
                Op::Gelu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(&*a.value).for_each(|gi, &x| *gi *= gelu_grad(x));
                    acc(&mut grads, a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut c = 0;
                    for p in parts {
                        if p.is_tracked() {
                            acc(&mut grads, p, g.slice(s![.., c..c + p.cols()]).to_owned());
                        }
                        c += p.cols();
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    block,
                    scale,
                    rho,
                } => {
                    let block = *block;
                    let n = q.rows();
                    let mut gq = Mat::zeros(q.value.raw_dim());
                    let mut gk = Mat::zeros(k.value.raw_dim());
                    let mut gv = Mat::zeros(v.value.raw_dim());
                    for b in 0..n / block {
                        let r0 = b * block;
                        let rb = ndarray::ArrayView2::from_shape((block, block), &rho[r0 * block..(r0 + block) * block])
                            .expect("attention coefficient block");
                        if rb.iter().all(|&w| w == 0.0) {
                            continue;
                        }
                        let gb = g.slice(s![r0..r0 + block, ..]);
                        let vb = v.value.slice(s![r0..r0 + block, ..]);
                        let qb = q.value.slice(s![r0..r0 + block, ..]);
                        let kb = k.value.slice(s![r0..r0 + block, ..]);
                        // out = rho . v
                        gv.slice_mut(s![r0..r0 + block, ..]).assign(&rb.t().dot(&gb));
                        let grho = gb.dot(&vb.t());
                        let mut gs = Mat::zeros((block, block));
                        for j in 0..block {
                            let dot: f64 = (0..block).map(|i| rb[[j, i]] * grho[[j, i]]).sum();
                            for i in 0..block {
                                gs[[j, i]] = scale * rb[[j, i]] * (grho[[j, i]] - dot);
                            }
                        }
                        gq.slice_mut(s![r0..r0 + block, ..]).assign(&gs.dot(&kb));
                        gk.slice_mut(s![r0..r0 + block, ..]).assign(&gs.t().dot(&qb));
                    }
                    if q.is_tracked() {
                        acc(&mut grads, q, gq);
                    }
                    if k.is_tracked() {
                        acc(&mut grads, k, gk);
                    }
                    if v.is_tracked() {
                        acc(&mut grads, v, gv);
                    }
                }
                Op::Standardize {
                    x,
                    active,
                    std,
                    floored,
                } => {
                    let out = &node.value;
                    let count = active.iter().filter(|&&a| a).count();
                    let mut gx = Mat::zeros(x.value.raw_dim());
                    if count > 0 {
                        let n = count as f64;
                        let mut mean_g = 0.0;
                        let mut mean_gy = 0.0;
                        for ((gi, yi), &a) in g.iter().zip(out.iter()).zip(active.iter()) {
                            if a {
                                mean_g += gi;
                                mean_gy += gi * yi;
                            }
                        }
                        mean_g /= n;
                        mean_gy /= n;
                        for ((dst, (gi, yi)), &a) in gx.iter_mut().zip(g.iter().zip(out.iter())).zip(active.iter()) {
                            if a {
                                *dst = if *floored {
                                    (gi - mean_g) / std
                                } else {
                                    (gi - mean_g - yi * mean_gy) / std
                                };
                            }
                        }
                    }
                    acc(&mut grads, x, gx);
                }
                Op::Softmax(a) => {
                    let p = &node.value;
                    let mut ga = Mat::zeros(p.raw_dim());
                    for ((mut dst, prow), grow) in ga.axis_iter_mut(Axis(0)).zip(p.axis_iter(Axis(0))).zip(g.axis_iter(Axis(0))) {
                        let dot = prow.dot(&grow);
                        Zip::from(&mut dst).and(&prow).and(&grow).for_each(|d, &pi, &gi| *d = pi * (gi - dot));
                    }
                    acc(&mut grads, a, ga);
                }
                Op::LogSoftmax(a) => {
                    let lp = &node.value;
                    let mut ga = g;
                    for (mut grow, lrow) in ga.axis_iter_mut(Axis(0)).zip(lp.axis_iter(Axis(0))) {
                        let total = grow.sum();
                        Zip::from(&mut grow).and(&lrow).for_each(|gi, &l| *gi -= l.exp() * total);
                    }
                    acc(&mut grads, a, ga);
                }
                Op::WeightedSum(a, w) => {
                    let c = g[[0, 0]];
                    acc(&mut grads, a, &**w * c);
                }
            }
        }
        param_grads
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}
