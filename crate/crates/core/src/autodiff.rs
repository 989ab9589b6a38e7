//! Tape-based reverse-mode automatic differentiation over 2-D f64 tensors.
//!
//! Forward values are computed eagerly as ops are recorded; `backward` walks
//! the tape in reverse and accumulates exact gradients. The op set is the
//! minimum needed by the unrolled pilot-controller graph, plus one
//! domain-specific op (`pilot_response`) that evaluates the complex received
//! pilot against a constant per-batch channel payload so that gradients flow
//! only into the RIS coefficients.

use ndarray::{s, Array2, Axis};
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorRef(usize);

/// Constant per-batch channel data consumed by `pilot_response`. All fields
/// are pre-scaled so the op output is already normalized: `v` and `direct`
/// carry the factor `sqrt(P_u)·x / pilot_scale`, the noise carries
/// `1 / pilot_scale`.
#[derive(Debug, Clone)]
pub struct PilotPayload {
    /// (B, M) scaled cascade, real and imaginary parts.
    pub v_re: Array2<f64>,
    pub v_im: Array2<f64>,
    /// Length-B scaled direct terms.
    pub d_re: Vec<f64>,
    pub d_im: Vec<f64>,
    /// (B, L) scaled noise draws.
    pub n_re: Array2<f64>,
    pub n_im: Array2<f64>,
}

impl PilotPayload {
    pub fn batch(&self) -> usize {
        self.v_re.nrows()
    }
    pub fn elements(&self) -> usize {
        self.v_re.ncols()
    }
    pub fn pilots_per_stage(&self) -> usize {
        self.n_re.ncols()
    }

    fn validate(&self) {
        let b = self.batch();
        assert_eq!(self.v_im.dim(), self.v_re.dim(), "pilot payload v parts");
        assert_eq!(self.d_re.len(), b, "pilot payload direct length");
        assert_eq!(self.d_im.len(), b, "pilot payload direct length");
        assert_eq!(self.n_im.dim(), self.n_re.dim(), "pilot payload noise parts");
        assert_eq!(self.n_re.nrows(), b, "pilot payload noise rows");
    }
}

#[derive(Clone)]
enum Op {
    Leaf,
    MatMul(TensorRef, TensorRef),
    Add(TensorRef, TensorRef),
    /// Row-broadcast add of a (1, n) bias.
    AddBias(TensorRef, TensorRef),
    Mul(TensorRef, TensorRef),
    ConcatCols(TensorRef, TensorRef),
    NarrowCols(TensorRef, usize, usize),
    Tanh(TensorRef),
    Sigmoid(TensorRef),
    Relu(TensorRef),
    Scale(TensorRef, f64),
    TileRows(TensorRef),
    Sum(TensorRef),
    UnitProjection(TensorRef),
    PilotResponse(TensorRef, Arc<PilotPayload>),
    /// (pred, label): mean over rows of the squared row L2 distance.
    MseLoss(TensorRef, TensorRef),
}

struct Node {
    op: Op,
    value: Array2<f64>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    by_node: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, t: TensorRef) -> Option<&Array2<f64>> {
        self.by_node[t.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn value(&self, t: TensorRef) -> &Array2<f64> {
        &self.nodes[t.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Array2<f64>, needs_grad: bool) -> TensorRef {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        TensorRef(self.nodes.len() - 1)
    }

    fn needs(&self, t: TensorRef) -> bool {
        self.nodes[t.0].needs_grad
    }

    pub fn leaf(&mut self, value: Array2<f64>, requires_grad: bool) -> TensorRef {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> TensorRef {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        let (ar, ac) = self.value(a).dim();
        let (br, bc) = self.value(b).dim();
        assert_eq!(ac, br, "matmul inner dims {ar}x{ac} . {br}x{bc}");
        let v = self.value(a).dot(self.value(b));
        self.push(Op::MatMul(a, b), v, self.needs(a) || self.needs(b))
    }

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shapes");
        let v = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), v, self.needs(a) || self.needs(b))
    }

    pub fn add_bias(&mut self, a: TensorRef, bias: TensorRef) -> TensorRef {
        let (_, ac) = self.value(a).dim();
        let (br, bc) = self.value(bias).dim();
        assert_eq!((br, bc), (1, ac), "bias must be (1, {ac}), got ({br}, {bc})");
        let v = self.value(a) + &self.value(bias).row(0);
        self.push(Op::AddBias(a, bias), v, self.needs(a) || self.needs(bias))
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "mul shapes");
        let v = self.value(a) * self.value(b);
        self.push(Op::Mul(a, b), v, self.needs(a) || self.needs(b))
    }

    pub fn concat_cols(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        let (ar, ac) = self.value(a).dim();
        let (br, bc) = self.value(b).dim();
        assert_eq!(ar, br, "concat_cols row counts");
        let mut v = Array2::zeros((ar, ac + bc));
        v.slice_mut(s![.., ..ac]).assign(self.value(a));
        v.slice_mut(s![.., ac..]).assign(self.value(b));
        self.push(Op::ConcatCols(a, b), v, self.needs(a) || self.needs(b))
    }

    pub fn narrow_cols(&mut self, a: TensorRef, start: usize, len: usize) -> TensorRef {
        let (_, ac) = self.value(a).dim();
        assert!(start + len <= ac, "narrow_cols {start}+{len} > {ac}");
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(Op::NarrowCols(a, start, len), v, self.needs(a))
    }

    pub fn tanh(&mut self, a: TensorRef) -> TensorRef {
        let v = self.value(a).mapv(f64::tanh);
        self.push(Op::Tanh(a), v, self.needs(a))
    }

    pub fn sigmoid(&mut self, a: TensorRef) -> TensorRef {
        let v = self.value(a).mapv(stable_sigmoid);
        self.push(Op::Sigmoid(a), v, self.needs(a))
    }

    pub fn relu(&mut self, a: TensorRef) -> TensorRef {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(Op::Relu(a), v, self.needs(a))
    }

    pub fn scale(&mut self, a: TensorRef, factor: f64) -> TensorRef {
        let v = self.value(a).mapv(|x| x * factor);
        self.push(Op::Scale(a, factor), v, self.needs(a))
    }

    pub fn tile_rows(&mut self, a: TensorRef, rows: usize) -> TensorRef {
        let (ar, ac) = self.value(a).dim();
        assert_eq!(ar, 1, "tile_rows input must have one row");
        let mut v = Array2::zeros((rows, ac));
        for mut r in v.rows_mut() {
            r.assign(&self.value(a).row(0));
        }
        self.push(Op::TileRows(a), v, self.needs(a))
    }

    pub fn sum(&mut self, a: TensorRef) -> TensorRef {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(Op::Sum(a), v, self.needs(a))
    }

    /// Consecutive column pairs (a, b) rescaled to unit modulus. A pair with
    /// modulus below 1e-12 becomes (1, 0) and passes no gradient.
    pub fn unit_projection(&mut self, a: TensorRef) -> TensorRef {
        let (_, ac) = self.value(a).dim();
        assert_eq!(ac % 2, 0, "unit_projection needs an even column count");
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            for m in 0..ac / 2 {
                let (re, im) = (row[2 * m], row[2 * m + 1]);
                let r = (re * re + im * im).sqrt();
                if r < 1e-12 {
                    row[2 * m] = 1.0;
                    row[2 * m + 1] = 0.0;
                } else {
                    row[2 * m] = re / r;
                    row[2 * m + 1] = im / r;
                }
            }
        }
        self.push(Op::UnitProjection(a), v, self.needs(a))
    }

    /// theta: (B, L·2M) unit-modulus pairs laid out (Re, Im) per element,
    /// element-major inside each pilot l. Output: (B, 2L) with columns
    /// 0..L = Re(pilot_l), L..2L = Im(pilot_l).
    pub fn pilot_response(&mut self, theta: TensorRef, payload: Arc<PilotPayload>) -> TensorRef {
        payload.validate();
        let b = payload.batch();
        let m = payload.elements();
        let l = payload.pilots_per_stage();
        let (tr, tc) = self.value(theta).dim();
        assert_eq!((tr, tc), (b, l * 2 * m), "pilot_response theta shape");

        let mut out = Array2::zeros((b, 2 * l));
        {
            let th = self.value(theta);
            for bi in 0..b {
                for li in 0..l {
                    let mut acc_re = payload.d_re[bi];
                    let mut acc_im = payload.d_im[bi];
                    let base = li * 2 * m;
                    for mi in 0..m {
                        let tre = th[(bi, base + 2 * mi)];
                        let tim = th[(bi, base + 2 * mi + 1)];
                        let vre = payload.v_re[(bi, mi)];
                        let vim = payload.v_im[(bi, mi)];
                        acc_re += vre * tre - vim * tim;
                        acc_im += vre * tim + vim * tre;
                    }
                    out[(bi, li)] = acc_re + payload.n_re[(bi, li)];
                    out[(bi, l + li)] = acc_im + payload.n_im[(bi, li)];
                }
            }
        }
        let needs = self.needs(theta);
        self.push(Op::PilotResponse(theta, payload), out, needs)
    }

    pub fn mse_loss(&mut self, pred: TensorRef, label: TensorRef) -> TensorRef {
        assert_eq!(
            self.value(pred).dim(),
            self.value(label).dim(),
            "mse_loss shapes"
        );
        let b = self.value(pred).nrows() as f64;
        let diff = self.value(pred) - self.value(label);
        let v = Array2::from_elem((1, 1), diff.mapv(|x| x * x).sum() / b);
        self.push(
            Op::MseLoss(pred, label),
            v,
            self.needs(pred) || self.needs(label),
        )
    }

    /// Reverse pass from a scalar (1,1) node.
    pub fn backward(&self, loss: TensorRef) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let da = g.dot(&self.nodes[b.0].value.t());
                        accumulate(&mut grads[a.0], da);
                    }
                    if self.needs(*b) {
                        let db = self.nodes[a.0].value.t().dot(&g);
                        accumulate(&mut grads[b.0], db);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], g.clone());
                    }
                }
                Op::AddBias(a, bias) => {
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if self.needs(*bias) {
                        let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads[bias.0], db);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], &g * &self.nodes[b.0].value);
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], &g * &self.nodes[a.0].value);
                    }
                }
                Op::ConcatCols(a, b) => {
                    let ac = self.nodes[a.0].value.ncols();
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], g.slice(s![.., ..ac]).to_owned());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], g.slice(s![.., ac..]).to_owned());
                    }
                }
                Op::NarrowCols(a, start, len) => {
                    let mut da = Array2::zeros(self.nodes[a.0].value.dim());
                    da.slice_mut(s![.., *start..*start + *len]).assign(&g);
                    accumulate(&mut grads[a.0], da);
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[i].value;
                    accumulate(&mut grads[a.0], &g * &y.mapv(|t| 1.0 - t * t));
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[i].value;
                    accumulate(&mut grads[a.0], &g * &y.mapv(|s| s * (1.0 - s)));
                }
                Op::Relu(a) => {
                    let x = &self.nodes[a.0].value;
                    accumulate(&mut grads[a.0], &g * &x.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 }));
                }
                Op::Scale(a, f) => {
                    accumulate(&mut grads[a.0], g.mapv(|x| x * f));
                }
                Op::TileRows(a) => {
                    let da = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[a.0], da);
                }
                Op::Sum(a) => {
                    let da = Array2::from_elem(self.nodes[a.0].value.dim(), g[(0, 0)]);
                    accumulate(&mut grads[a.0], da);
                }
                Op::UnitProjection(a) => {
                    let x = &self.nodes[a.0].value;
                    let mut da = Array2::zeros(x.dim());
                    let pairs = x.ncols() / 2;
                    for bi in 0..x.nrows() {
                        for m in 0..pairs {
                            let re = x[(bi, 2 * m)];
                            let im = x[(bi, 2 * m + 1)];
                            let r2 = re * re + im * im;
                            let r = r2.sqrt();
                            if r < 1e-12 {
                                continue;
                            }
                            let r3 = r2 * r;
                            let gre = g[(bi, 2 * m)];
                            let gim = g[(bi, 2 * m + 1)];
                            da[(bi, 2 * m)] = (gre * im * im - gim * re * im) / r3;
                            da[(bi, 2 * m + 1)] = (gim * re * re - gre * re * im) / r3;
                        }
                    }
                    accumulate(&mut grads[a.0], da);
                }
                Op::PilotResponse(theta, payload) => {
                    let b = payload.batch();
                    let m = payload.elements();
                    let l = payload.pilots_per_stage();
                    let mut dt = Array2::zeros((b, l * 2 * m));
                    for bi in 0..b {
                        for li in 0..l {
                            let gre = g[(bi, li)];
                            let gim = g[(bi, l + li)];
                            let base = li * 2 * m;
                            for mi in 0..m {
                                let vre = payload.v_re[(bi, mi)];
                                let vim = payload.v_im[(bi, mi)];
                                dt[(bi, base + 2 * mi)] = gre * vre + gim * vim;
                                dt[(bi, base + 2 * mi + 1)] = gim * vre - gre * vim;
                            }
                        }
                    }
                    accumulate(&mut grads[theta.0], dt);
                }
                Op::MseLoss(pred, label) => {
                    let p = &self.nodes[pred.0].value;
                    let lab = &self.nodes[label.0].value;
                    let scale = 2.0 * g[(0, 0)] / p.nrows() as f64;
                    let d = (p - lab).mapv(|x| x * scale);
                    if self.needs(*pred) {
                        accumulate(&mut grads[pred.0], d.clone());
                    }
                    if self.needs(*label) {
                        accumulate(&mut grads[label.0], d.mapv(|x| -x));
                    }
                }
            }
            grads[i] = Some(g);
        }
        Gradients { by_node: grads }
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, inc: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &inc,
        None => *slot = Some(inc),
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Bias-corrected Adam over a fixed list of parameter tensors.
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step_count: u64,
    first_moment: Vec<Array2<f64>>,
    second_moment: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64, shapes: &[(usize, usize)]) -> Adam {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            first_moment: shapes.iter().map(|&d| Array2::zeros(d)).collect(),
            second_moment: shapes.iter().map(|&d| Array2::zeros(d)).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moments(&self) -> &[Array2<f64>] {
        &self.first_moment
    }

    pub fn second_moments(&self) -> &[Array2<f64>] {
        &self.second_moment
    }

    /// Reinstates a previously captured optimizer state (for resumes).
    pub fn restore(
        &mut self,
        step_count: u64,
        first: Vec<Array2<f64>>,
        second: Vec<Array2<f64>>,
    ) {
        assert_eq!(first.len(), self.first_moment.len(), "moment count");
        assert_eq!(second.len(), self.second_moment.len(), "moment count");
        for (a, b) in first.iter().zip(&self.first_moment) {
            assert_eq!(a.dim(), b.dim(), "moment shape");
        }
        for (a, b) in second.iter().zip(&self.second_moment) {
            assert_eq!(a.dim(), b.dim(), "moment shape");
        }
        self.step_count = step_count;
        self.first_moment = first;
        self.second_moment = second;
    }

    /// Applies one update. `grads[i] = None` leaves parameter i untouched by
    /// the gradient (its moments still decay via the zero gradient).
    pub fn step(&mut self, params: &mut [&mut Array2<f64>], grads: &[Option<&Array2<f64>>]) {
        assert_eq!(params.len(), self.first_moment.len(), "param count");
        assert_eq!(params.len(), grads.len(), "grad count");
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            match grads[i] {
                Some(g) => {
                    assert_eq!(g.dim(), params[i].dim(), "grad shape for param {i}");
                    m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
                    v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
                }
                None => {
                    m.mapv_inplace(|m| self.beta1 * m);
                    v.mapv_inplace(|v| self.beta2 * v);
                }
            }
            let lr = self.learning_rate;
            let eps = self.epsilon;
            ndarray::Zip::from(&mut *params[i])
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let mh = m / bc1;
                    let vh = v / bc2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                });
        }
    }
}
