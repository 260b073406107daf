//! Reverse-mode autodiff over n-dimensional float arrays.
//!
//! A [`Tape`] records a computation as a flat list of nodes; [`Tape::backward`]
//! walks the list in reverse accumulating gradients into leaf variables.
//! The engine is generic over the element type so the training path runs in
//! `f32` while gradient checks run the identical graph in `f64`.
//!
//! Determinism contract: every kernel reduces in fixed index order and
//! parallel sections write disjoint output regions, so repeated runs on the
//! same platform are bit-identical regardless of thread count.

mod kernels;
pub use kernels::{area_downsample, bilinear_resize};

use ndarray::{ArrayD, Axis, Ix1, Ix2, IxDyn};
use num_traits::Float;

/// Element type of the compute tape. Implemented for `f32` and `f64`.
pub trait Scalar:
    ndarray::NdFloat + num_traits::Float + num_traits::FromPrimitive + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64_(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64_(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64_(self) -> f64 {
        self
    }
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Axis-aligned region a gate patch is expanded into, in map pixels.
#[derive(Debug, Clone, Copy)]
pub struct PatchRegion {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

pub(crate) enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Min(Var, Var),
    Max(Var, Var),
    Scale(Var, T),
    AddScalar(Var, T),
    Relu(Var),
    Silu(Var),
    Sigmoid(Var),
    Tanh(Var),
    /// ln(p'/(1-p')), p' = clamp(p, eps, 1-eps); zero gradient where clamped.
    LogitClamped(Var, T),
    SoftmaxLast(Var),
    MatMul(Var, Var),
    /// [m,n] + broadcast row [n]
    AddRow(Var, Var),
    Transpose2(Var),
    Reshape(Var),
    SliceCols(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MeanAll(Var),
    SumAll(Var),
    AddN(Vec<Var>),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        dilation: usize,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        invstd: Vec<T>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        invstd: Vec<T>,
    },
    LayerNormLast {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        invstd: Vec<T>,
    },
    BilinearResize(Var, usize, usize),
    /// rows of logits -> expectation of softmax against bin indices 0..B-1
    SoftmaxExpect {
        x: Var,
        softmax: ArrayD<T>,
    },
    /// distribution focal loss over rows with continuous bin targets
    DflLoss {
        x: Var,
        targets: Vec<T>,
        softmax: ArrayD<T>,
        norm: T,
    },
    /// sum(w * bce_with_logits(z, a)) / norm
    BceMean {
        z: Var,
        target: ArrayD<T>,
        weight: Option<ArrayD<T>>,
        norm: T,
    },
    /// sum(w * smooth_l1(pred - target)) / norm
    SmoothL1 {
        pred: Var,
        target: ArrayD<T>,
        weight: Option<ArrayD<T>>,
        delta: T,
        norm: T,
    },
    /// expand k gate patches [A,g,g] into box regions of an [A,H,W] map,
    /// combining by elementwise max over a `base`-filled map
    GateCompose {
        patches: Vec<Var>,
        regions: Vec<PatchRegion>,
        base: T,
        eps: T,
        winner: Vec<i32>,
        clamped: Vec<bool>,
    },
}

pub struct Tape<T: Scalar> {
    values: Vec<ArrayD<T>>,
    ops: Vec<Op<T>>,
    requires: Vec<bool>,
}

/// Gradients with respect to leaf variables after a backward pass.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the backward root with respect to `v`; zeros if the
    /// variable did not influence the root.
    pub fn get(&self, v: Var, tape: &Tape<T>) -> ArrayD<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => ArrayD::zeros(tape.values[v.0].raw_dim()),
        }
    }

    pub fn get_opt(&self, v: Var) -> Option<&ArrayD<T>> {
        self.grads[v.0].as_ref()
    }
}

fn add_into<T: Scalar>(slot: &mut Option<ArrayD<T>>, contrib: ArrayD<T>) {
    match slot {
        Some(g) => *g += &contrib,
        None => *slot = Some(contrib),
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            ops: Vec::new(),
            requires: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.values[v.0]
    }

    pub fn scalar_value(&self, v: Var) -> T {
        let val = &self.values[v.0];
        debug_assert_eq!(val.len(), 1);
        val.iter().next().copied().unwrap()
    }

    fn push(&mut self, value: ArrayD<T>, op: Op<T>, requires: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.requires.push(requires);
        Var(self.values.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    fn req_any(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.requires[v.0])
    }

    /// New trainable leaf.
    pub fn leaf(&mut self, value: ArrayD<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// New constant (stop-gradient) leaf.
    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.values[a.0].shape(), self.values[b.0].shape());
        let v = &self.values[a.0] + &self.values[b.0];
        let r = self.req_any(&[a, b]);
        self.push(v, Op::Add(a, b), r)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.values[a.0] - &self.values[b.0];
        let r = self.req_any(&[a, b]);
        self.push(v, Op::Sub(a, b), r)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.values[a.0] * &self.values[b.0];
        let r = self.req_any(&[a, b]);
        self.push(v, Op::Mul(a, b), r)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = &self.values[a.0] / &self.values[b.0];
        let r = self.req_any(&[a, b]);
        self.push(v, Op::Div(a, b), r)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        let v = ndarray::Zip::from(&self.values[a.0])
            .and(&self.values[b.0])
            .map_collect(|&x, &y| if x <= y { x } else { y });
        let r = self.req_any(&[a, b]);
        self.push(v, Op::Min(a, b), r)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        let v = ndarray::Zip::from(&self.values[a.0])
            .and(&self.values[b.0])
            .map_collect(|&x, &y| if x >= y { x } else { y });
        let r = self.req_any(&[a, b]);
        self.push(v, Op::Max(a, b), r)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.values[a.0].mapv(|x| x * s);
        let r = self.req(a);
        self.push(v, Op::Scale(a, s), r)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.values[a.0].mapv(|x| x + s);
        let r = self.req(a);
        self.push(v, Op::AddScalar(a, s), r)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(|x| if x > T::zero() { x } else { T::zero() });
        let r = self.req(a);
        self.push(v, Op::Relu(a), r)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(|x| x * sigmoid_s(x));
        let r = self.req(a);
        self.push(v, Op::Silu(a), r)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(sigmoid_s);
        let r = self.req(a);
        self.push(v, Op::Sigmoid(a), r)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(|x| x.tanh());
        let r = self.req(a);
        self.push(v, Op::Tanh(a), r)
    }

    pub fn logit_clamped(&mut self, a: Var, eps: T) -> Var {
        let one = T::one();
        let v = self.values[a.0].mapv(|p| {
            let p = p.max(eps).min(one - eps);
            (p / (one - p)).ln()
        });
        let r = self.req(a);
        self.push(v, Op::LogitClamped(a, eps), r)
    }

    pub fn softmax_last(&mut self, a: Var) -> Var {
        let v = kernels::softmax_last(&self.values[a.0]);
        let r = self.req(a);
        self.push(v, Op::SoftmaxLast(a), r)
    }

    // ---- linear algebra / shape ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.values[a.0].view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.values[b.0].view().into_dimensionality::<Ix2>().unwrap();
        let v = av.dot(&bv).into_dyn();
        let r = self.req_any(&[a, b]);
        self.push(v, Op::MatMul(a, b), r)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let av = self.values[a.0].view().into_dimensionality::<Ix2>().unwrap();
        let rv = self.values[row.0].view().into_dimensionality::<Ix1>().unwrap();
        let v = (&av + &rv).into_dyn();
        let r = self.req_any(&[a, row]);
        self.push(v, Op::AddRow(a, row), r)
    }

    pub fn transpose2(&mut self, a: Var) -> Var {
        let av = self.values[a.0].view().into_dimensionality::<Ix2>().unwrap();
        let v = av.t().as_standard_layout().to_owned().into_dyn();
        let r = self.req(a);
        self.push(v, Op::Transpose2(a), r)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.values[a.0]
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        let r = self.req(a);
        self.push(v, Op::Reshape(a), r)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.values[a.0].view().into_dimensionality::<Ix2>().unwrap();
        let v = av
            .slice(ndarray::s![.., start..start + len])
            .as_standard_layout()
            .to_owned()
            .into_dyn();
        let r = self.req(a);
        self.push(v, Op::SliceCols(a, start, len), r)
    }

    pub fn gather_rows(&mut self, a: Var, rows: Vec<usize>) -> Var {
        let av = self.values[a.0].view().into_dimensionality::<Ix2>().unwrap();
        let mut v = ndarray::Array2::<T>::zeros((rows.len(), av.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            v.row_mut(i).assign(&av.row(r));
        }
        let r = self.req(a);
        self.push(v.into_dyn(), Op::GatherRows(a, rows), r)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts
            .iter()
            .map(|p| self.values[p.0].view().into_dimensionality::<Ix2>().unwrap())
            .collect();
        let v = ndarray::concatenate(Axis(0), &views).unwrap().into_dyn();
        let r = self.req_any(parts);
        self.push(v, Op::ConcatRows(parts.to_vec()), r)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts
            .iter()
            .map(|p| self.values[p.0].view().into_dimensionality::<Ix2>().unwrap())
            .collect();
        let v = ndarray::concatenate(Axis(1), &views).unwrap().into_dyn();
        let r = self.req_any(parts);
        self.push(v, Op::ConcatCols(parts.to_vec()), r)
    }

    // ---- reductions ----

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = T::from_usize(self.values[a.0].len()).unwrap();
        let v = ArrayD::from_elem(IxDyn(&[]), self.values[a.0].sum() / n);
        let r = self.req(a);
        self.push(v, Op::MeanAll(a), r)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = ArrayD::from_elem(IxDyn(&[]), self.values[a.0].sum());
        let r = self.req(a);
        self.push(v, Op::SumAll(a), r)
    }

    /// Sum of same-shaped variables (used to combine scalar losses).
    pub fn add_n(&mut self, parts: &[Var]) -> Var {
        let mut v = self.values[parts[0].0].clone();
        for p in &parts[1..] {
            v += &self.values[p.0];
        }
        let r = self.req_any(parts);
        self.push(v, Op::AddN(parts.to_vec()), r)
    }

    // ---- backward ----

    /// Backpropagate from a scalar root. Returns per-variable gradients;
    /// intermediate gradients are consumed during the sweep, leaf gradients
    /// are retained.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let mut grads: Vec<Option<ArrayD<T>>> = (0..self.values.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::from_elem(self.values[root.0].raw_dim(), T::one()));

        for i in (0..=root.0).rev() {
            if grads[i].is_none() || !self.requires[i] {
                continue;
            }
            if matches!(self.ops[i], Op::Leaf) {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.backward_node(i, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn backward_node(&self, i: usize, g: &ArrayD<T>, grads: &mut [Option<ArrayD<T>>]) {
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.req(*a) {
                    add_into(&mut grads[a.0], g.clone());
                }
                if self.req(*b) {
                    add_into(&mut grads[b.0], g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.req(*a) {
                    add_into(&mut grads[a.0], g.clone());
                }
                if self.req(*b) {
                    add_into(&mut grads[b.0], g.mapv(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.req(*a) {
                    add_into(&mut grads[a.0], g * &self.values[b.0]);
                }
                if self.req(*b) {
                    add_into(&mut grads[b.0], g * &self.values[a.0]);
                }
            }
            Op::Div(a, b) => {
                let bv = &self.values[b.0];
                if self.req(*a) {
                    add_into(&mut grads[a.0], g / bv);
                }
                if self.req(*b) {
                    let av = &self.values[a.0];
                    let d = ndarray::Zip::from(g)
                        .and(av)
                        .and(bv)
                        .map_collect(|&g, &a, &b| -g * a / (b * b));
                    add_into(&mut grads[b.0], d);
                }
            }
            Op::Min(a, b) => {
                self.minmax_backward(*a, *b, i, g, grads, true);
            }
            Op::Max(a, b) => {
                self.minmax_backward(*a, *b, i, g, grads, false);
            }
            Op::Scale(a, s) => {
                if self.req(*a) {
                    add_into(&mut grads[a.0], g.mapv(|x| x * *s));
                }
            }
            Op::AddScalar(a, _) => {
                if self.req(*a) {
                    add_into(&mut grads[a.0], g.clone());
                }
            }
            Op::Relu(a) => {
                if self.req(*a) {
                    let d = ndarray::Zip::from(g)
                        .and(&self.values[a.0])
                        .map_collect(|&g, &x| if x > T::zero() { g } else { T::zero() });
                    add_into(&mut grads[a.0], d);
                }
            }
            Op::Silu(a) => {
                if self.req(*a) {
                    let d = ndarray::Zip::from(g)
                        .and(&self.values[a.0])
                        .map_collect(|&g, &x| {
                            let s = sigmoid_s(x);
                            g * (s + x * s * (T::one() - s))
                        });
                    add_into(&mut grads[a.0], d);
                }
            }
            Op::Sigmoid(a) => {
                if self.req(*a) {
                    let d = ndarray::Zip::from(g)
                        .and(&self.values[i])
                        .map_collect(|&g, &y| g * y * (T::one() - y));
                    add_into(&mut grads[a.0], d);
                }
            }
            Op::Tanh(a) => {
                if self.req(*a) {
                    let d = ndarray::Zip::from(g)
                        .and(&self.values[i])
                        .map_collect(|&g, &y| g * (T::one() - y * y));
                    add_into(&mut grads[a.0], d);
                }
            }
            Op::LogitClamped(a, eps) => {
                if self.req(*a) {
                    let one = T::one();
                    let d = ndarray::Zip::from(g)
                        .and(&self.values[a.0])
                        .map_collect(|&g, &p| {
                            if p > *eps && p < one - *eps {
                                g / (p * (one - p))
                            } else {
                                T::zero()
                            }
                        });
                    add_into(&mut grads[a.0], d);
                }
            }
            Op::SoftmaxLast(a) => {
                if self.req(*a) {
                    add_into(&mut grads[a.0], kernels::softmax_last_backward(&self.values[i], g));
                }
            }
            Op::MatMul(a, b) => {
                let av = self.values[a.0].view().into_dimensionality::<Ix2>().unwrap();
                let bv = self.values[b.0].view().into_dimensionality::<Ix2>().unwrap();
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                if self.req(*a) {
                    add_into(&mut grads[a.0], gv.dot(&bv.t()).into_dyn());
                }
                if self.req(*b) {
                    add_into(&mut grads[b.0], av.t().dot(&gv).into_dyn());
                }
            }
            Op::AddRow(a, row) => {
                if self.req(*a) {
                    add_into(&mut grads[a.0], g.clone());
                }
                if self.req(*row) {
                    let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                    add_into(&mut grads[row.0], gv.sum_axis(Axis(0)).into_dyn());
                }
            }
            Op::Transpose2(a) => {
                if self.req(*a) {
                    let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                    add_into(
                        &mut grads[a.0],
                        gv.t().as_standard_layout().to_owned().into_dyn(),
                    );
                }
            }
            Op::Reshape(a) => {
                if self.req(*a) {
                    let old = self.values[a.0].raw_dim();
                    add_into(
                        &mut grads[a.0],
                        g.clone().into_shape_with_order(old).unwrap(),
                    );
                }
            }
            Op::SliceCols(a, start, len) => {
                if self.req(*a) {
                    let mut d = ArrayD::<T>::zeros(self.values[a.0].raw_dim());
                    let mut dv = d.view_mut().into_dimensionality::<Ix2>().unwrap();
                    let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                    dv.slice_mut(ndarray::s![.., *start..start + len]).assign(&gv);
                    add_into(&mut grads[a.0], d);
                }
            }
            Op::GatherRows(a, rows) => {
                if self.req(*a) {
                    let mut d = ArrayD::<T>::zeros(self.values[a.0].raw_dim());
                    let mut dv = d.view_mut().into_dimensionality::<Ix2>().unwrap();
                    let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                    for (i, &r) in rows.iter().enumerate() {
                        let mut row = dv.row_mut(r);
                        row += &gv.row(i);
                    }
                    add_into(&mut grads[a.0], d);
                }
            }
            Op::ConcatRows(parts) => {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut off = 0usize;
                for p in parts {
                    let n = self.values[p.0].shape()[0];
                    if self.req(*p) {
                        let gp = gv
                            .slice(ndarray::s![off..off + n, ..])
                            .as_standard_layout()
                            .to_owned()
                            .into_dyn();
                        add_into(&mut grads[p.0], gp);
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut off = 0usize;
                for p in parts {
                    let n = self.values[p.0].shape()[1];
                    if self.req(*p) {
                        let gp = gv
                            .slice(ndarray::s![.., off..off + n])
                            .as_standard_layout()
                            .to_owned()
                            .into_dyn();
                        add_into(&mut grads[p.0], gp);
                    }
                    off += n;
                }
            }
            Op::MeanAll(a) => {
                if self.req(*a) {
                    let n = T::from_usize(self.values[a.0].len()).unwrap();
                    let gs = *g.iter().next().unwrap() / n;
                    add_into(&mut grads[a.0], ArrayD::from_elem(self.values[a.0].raw_dim(), gs));
                }
            }
            Op::SumAll(a) => {
                if self.req(*a) {
                    let gs = *g.iter().next().unwrap();
                    add_into(&mut grads[a.0], ArrayD::from_elem(self.values[a.0].raw_dim(), gs));
                }
            }
            Op::AddN(parts) => {
                for p in parts {
                    if self.req(*p) {
                        add_into(&mut grads[p.0], g.clone());
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                dilation,
            } => {
                kernels::conv2d_backward(
                    &self.values[x.0],
                    &self.values[w.0],
                    g,
                    *stride,
                    *pad,
                    *dilation,
                    if self.req(*x) { Some(x.0) } else { None },
                    if self.req(*w) { Some(w.0) } else { None },
                    b.filter(|bv| self.req(*bv)).map(|bv| bv.0),
                    grads,
                );
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                mean,
                invstd,
            } => {
                kernels::batchnorm_backward(
                    &self.values[x.0],
                    &self.values[gamma.0],
                    g,
                    mean,
                    invstd,
                    if self.req(*x) { Some(x.0) } else { None },
                    if self.req(*gamma) { Some(gamma.0) } else { None },
                    if self.req(*beta) { Some(beta.0) } else { None },
                    grads,
                );
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                invstd,
            } => {
                kernels::batchnorm_eval_backward(
                    &self.values[x.0],
                    &self.values[gamma.0],
                    g,
                    mean,
                    invstd,
                    if self.req(*x) { Some(x.0) } else { None },
                    if self.req(*gamma) { Some(gamma.0) } else { None },
                    if self.req(*beta) { Some(beta.0) } else { None },
                    grads,
                );
            }
            Op::LayerNormLast {
                x,
                gamma,
                beta,
                mean,
                invstd,
            } => {
                kernels::layernorm_backward(
                    &self.values[x.0],
                    &self.values[gamma.0],
                    g,
                    mean,
                    invstd,
                    if self.req(*x) { Some(x.0) } else { None },
                    if self.req(*gamma) { Some(gamma.0) } else { None },
                    if self.req(*beta) { Some(beta.0) } else { None },
                    grads,
                );
            }
            Op::BilinearResize(a, _, _) => {
                if self.req(*a) {
                    let shape = self.values[a.0].shape();
                    add_into(
                        &mut grads[a.0],
                        kernels::bilinear_resize_backward(g, shape[2], shape[3]),
                    );
                }
            }
            Op::SoftmaxExpect { x, softmax } => {
                if self.req(*x) {
                    add_into(
                        &mut grads[x.0],
                        kernels::softmax_expect_backward(softmax, &self.values[i], g),
                    );
                }
            }
            Op::DflLoss {
                x,
                targets,
                softmax,
                norm,
            } => {
                if self.req(*x) {
                    let gs = *g.iter().next().unwrap();
                    add_into(
                        &mut grads[x.0],
                        kernels::dfl_backward(softmax, targets, gs / *norm),
                    );
                }
            }
            Op::BceMean {
                z,
                target,
                weight,
                norm,
            } => {
                if self.req(*z) {
                    let gs = *g.iter().next().unwrap() / *norm;
                    let mut d = ndarray::Zip::from(&self.values[z.0])
                        .and(target)
                        .map_collect(|&z, &a| (sigmoid_s(z) - a) * gs);
                    if let Some(w) = weight {
                        d *= w;
                    }
                    add_into(&mut grads[z.0], d);
                }
            }
            Op::SmoothL1 {
                pred,
                target,
                weight,
                delta,
                norm,
            } => {
                if self.req(*pred) {
                    let gs = *g.iter().next().unwrap() / *norm;
                    let mut d = ndarray::Zip::from(&self.values[pred.0])
                        .and(target)
                        .map_collect(|&p, &t| {
                            let e = p - t;
                            let de = if e.abs() < *delta { e / *delta } else { e.signum() };
                            de * gs
                        });
                    if let Some(w) = weight {
                        d *= w;
                    }
                    add_into(&mut grads[pred.0], d);
                }
            }
            Op::GateCompose {
                patches,
                regions,
                winner,
                clamped,
                ..
            } => {
                kernels::gate_compose_backward(
                    g,
                    patches,
                    regions,
                    winner,
                    clamped,
                    &self.values,
                    &self.requires,
                    grads,
                );
            }
        }
    }

    fn minmax_backward(
        &self,
        a: Var,
        b: Var,
        i: usize,
        g: &ArrayD<T>,
        grads: &mut [Option<ArrayD<T>>],
        is_min: bool,
    ) {
        // ties route to the first operand
        let av = &self.values[a.0];
        let bv = &self.values[b.0];
        if self.req(a) {
            let d = ndarray::Zip::from(g)
                .and(av)
                .and(bv)
                .map_collect(|&g, &x, &y| {
                    let take_a = if is_min { x <= y } else { x >= y };
                    if take_a {
                        g
                    } else {
                        T::zero()
                    }
                });
            add_into(&mut grads[a.0], d);
        }
        if self.req(b) {
            let d = ndarray::Zip::from(g)
                .and(av)
                .and(bv)
                .map_collect(|&g, &x, &y| {
                    let take_a = if is_min { x <= y } else { x >= y };
                    if take_a {
                        T::zero()
                    } else {
                        g
                    }
                });
            add_into(&mut grads[b.0], d);
        }
        let _ = i;
    }
}

pub(crate) fn sigmoid_s<T: Scalar>(x: T) -> T {
    let one = T::one();
    if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

/// Numerically stable scalar BCE-with-logits term.
pub(crate) fn bce_term<T: Scalar>(z: T, a: T) -> T {
    // max(z,0) - z*a + ln(1 + exp(-|z|))
    let zero = T::zero();
    let m = if z > zero { z } else { zero };
    m - z * a + (T::one() + (-z.abs()).exp()).ln()
}

impl<T: Scalar> Tape<T> {
    // ---- fused NN / loss ops (constructors live here, kernels in kernels.rs) ----

    /// 2-D convolution, NCHW inputs, OIHW weights.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> Var {
        let v = kernels::conv2d_forward(
            &self.values[x.0],
            &self.values[w.0],
            b.map(|b| &self.values[b.0]),
            stride,
            pad,
            dilation,
        );
        let mut vars = vec![x, w];
        if let Some(b) = b {
            vars.push(b);
        }
        let r = self.req_any(&vars);
        self.push(
            v,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                dilation,
            },
            r,
        )
    }

    /// Batch normalization using per-batch statistics. Returns the output
    /// var plus the batch (mean, var) per channel for running-stat updates.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> (Var, Vec<T>, Vec<T>) {
        let (v, mean, var, invstd) = kernels::batchnorm_forward(
            &self.values[x.0],
            &self.values[gamma.0],
            &self.values[beta.0],
            eps,
        );
        let r = self.req_any(&[x, gamma, beta]);
        let out = self.push(
            v,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                mean: mean.clone(),
                invstd,
            },
            r,
        );
        (out, mean, var)
    }

    /// Batch normalization using fixed (running) statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Var {
        let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let v = kernels::batchnorm_eval_forward(
            &self.values[x.0],
            &self.values[gamma.0],
            &self.values[beta.0],
            mean,
            &invstd,
        );
        let r = self.req_any(&[x, gamma, beta]);
        self.push(
            v,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                invstd,
            },
            r,
        )
    }

    /// Layer norm over the last axis of a 2-D input.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let (v, mean, invstd) = kernels::layernorm_forward(
            &self.values[x.0],
            &self.values[gamma.0],
            &self.values[beta.0],
            eps,
        );
        let r = self.req_any(&[x, gamma, beta]);
        self.push(
            v,
            Op::LayerNormLast {
                x,
                gamma,
                beta,
                mean,
                invstd,
            },
            r,
        )
    }

    /// Bilinear resize of an NCHW tensor to (oh, ow), half-pixel centers.
    pub fn bilinear_resize(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let v = kernels::bilinear_resize(&self.values[x.0], oh, ow);
        let r = self.req(x);
        self.push(v, Op::BilinearResize(x, oh, ow), r)
    }

    /// Rows of logits -> sum_j softmax_j * j (expectation over bin indices).
    pub fn softmax_expect(&mut self, x: Var) -> Var {
        let softmax = kernels::softmax_last(&self.values[x.0]);
        let v = kernels::softmax_expect_value(&softmax);
        let r = self.req(x);
        self.push(v, Op::SoftmaxExpect { x, softmax }, r)
    }

    /// Distribution focal loss: rows of logits vs continuous targets in
    /// [0, bins-1]; mean over rows.
    pub fn dfl_loss(&mut self, x: Var, targets: &[T]) -> Var {
        let softmax = kernels::softmax_last(&self.values[x.0]);
        let rows = targets.len();
        let norm = T::from_usize(rows.max(1)).unwrap();
        let v = kernels::dfl_value(&softmax, targets, norm);
        let r = self.req(x);
        self.push(
            v,
            Op::DflLoss {
                x,
                targets: targets.to_vec(),
                softmax,
                norm,
            },
            r,
        )
    }

    /// Weighted binary cross-entropy with logits: sum(w * bce) / norm.
    pub fn bce_with_logits(
        &mut self,
        z: Var,
        target: ArrayD<T>,
        weight: Option<ArrayD<T>>,
        norm: T,
    ) -> Var {
        let mut total = T::zero();
        match &weight {
            Some(w) => {
                ndarray::Zip::from(&self.values[z.0])
                    .and(&target)
                    .and(w)
                    .for_each(|&z, &a, &w| total = total + w * bce_term(z, a));
            }
            None => {
                ndarray::Zip::from(&self.values[z.0])
                    .and(&target)
                    .for_each(|&z, &a| total = total + bce_term(z, a));
            }
        }
        let v = ArrayD::from_elem(IxDyn(&[]), total / norm);
        let r = self.req(z);
        self.push(
            v,
            Op::BceMean {
                z,
                target,
                weight,
                norm,
            },
            r,
        )
    }

    /// Weighted smooth-L1: sum(w * huber(pred - target, delta)) / norm.
    pub fn smooth_l1(
        &mut self,
        pred: Var,
        target: ArrayD<T>,
        weight: Option<ArrayD<T>>,
        delta: T,
        norm: T,
    ) -> Var {
        let half = T::from_f64(0.5);
        let mut total = T::zero();
        let term = |p: T, t: T| {
            let e = (p - t).abs();
            if e < delta {
                half * e * e / delta
            } else {
                e - half * delta
            }
        };
        match &weight {
            Some(w) => {
                ndarray::Zip::from(&self.values[pred.0])
                    .and(&target)
                    .and(w)
                    .for_each(|&p, &t, &w| total = total + w * term(p, t));
            }
            None => {
                ndarray::Zip::from(&self.values[pred.0])
                    .and(&target)
                    .for_each(|&p, &t| total = total + term(p, t));
            }
        }
        let v = ArrayD::from_elem(IxDyn(&[]), total / norm);
        let r = self.req(pred);
        self.push(
            v,
            Op::SmoothL1 {
                pred,
                target,
                weight,
                delta,
                norm,
            },
            r,
        )
    }

    /// Expand per-entry gate patches `[A,g,g]` into their box regions of an
    /// `[A,H,W]` map initialized to `base`; overlaps combine by elementwise
    /// max (ties keep the earlier entry, the base wins ties against patches).
    /// The result is clamped to [eps, 1-eps].
    pub fn gate_compose(
        &mut self,
        patches: &[Var],
        regions: &[PatchRegion],
        categories: usize,
        height: usize,
        width: usize,
        base: T,
        eps: T,
    ) -> Var {
        let patch_vals: Vec<&ArrayD<T>> = patches.iter().map(|p| &self.values[p.0]).collect();
        let (v, winner, clamped) = kernels::gate_compose_forward(
            &patch_vals,
            regions,
            categories,
            height,
            width,
            base,
            eps,
        );
        let r = self.req_any(patches);
        self.push(
            v,
            Op::GateCompose {
                patches: patches.to_vec(),
                regions: regions.to_vec(),
                base,
                eps,
                winner,
                clamped,
            },
            r,
        )
    }
}
