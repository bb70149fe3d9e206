//! A small reverse-mode tape over the compute kernels. Forward methods
//! evaluate eagerly and record just enough to run the chain rule backward.
//!
//! Inference and training share this forward path: inference inserts
//! parameters as constant leaves and simply never calls `backward`.

use ndarray::{Array1, ArrayD, ArrayView1, ArrayView4, Ix1, Ix4};

use super::kernels::{self, NormStats, PadMode, PROB_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

enum Op {
    Leaf,
    Pad { x: ValueId, p: usize, mode: PadMode },
    Conv2d { x: ValueId, w: ValueId, b: ValueId, stride: usize },
    InstanceNorm { x: ValueId, gamma: ValueId, beta: ValueId, stats: NormStats },
    LeakyRelu { x: ValueId, slope: f32 },
    Tanh { x: ValueId },
    Sigmoid { x: ValueId },
    Add { a: ValueId, b: ValueId },
    Affine { x: ValueId, scale: f32 },
    ChannelAffine { x: ValueId, scale: Array1<f32> },
    Upsample2 { x: ValueId },
    SampleMean { x: ValueId },
    NegLogMean { x: ValueId },
    NegLog1mMean { x: ValueId },
    SqDiffMean { a: ValueId, b: ValueId },
    WeightedSum { terms: Vec<(ValueId, f32)> },
}

struct Node {
    value: ArrayD<f32>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn view4(v: &ArrayD<f32>) -> ArrayView4<f32> {
    v.view().into_dimensionality::<Ix4>().expect("expected a 4-d value")
}

fn view1(v: &ArrayD<f32>) -> ArrayView1<f32> {
    v.view().into_dimensionality::<Ix1>().expect("expected a 1-d value")
}

fn scalar_value(v: f64) -> ArrayD<f32> {
    ndarray::arr0(v as f32).into_dyn()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: ArrayD<f32>, op: Op, needs_grad: bool) -> ValueId {
        self.nodes.push(Node { value, op, needs_grad });
        ValueId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[ValueId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    /// Inserts a leaf. `needs_grad` marks trainable parameters; constants
    /// (inputs, frozen weights) never accumulate gradients.
    pub fn leaf(&mut self, value: ArrayD<f32>, needs_grad: bool) -> ValueId {
        self.push(value, Op::Leaf, needs_grad)
    }

    pub fn value(&self, id: ValueId) -> &ArrayD<f32> {
        &self.nodes[id.0].value
    }

    pub fn value4(&self, id: ValueId) -> ArrayView4<f32> {
        view4(&self.nodes[id.0].value)
    }

    pub fn value1(&self, id: ValueId) -> ArrayView1<f32> {
        view1(&self.nodes[id.0].value)
    }

    pub fn scalar(&self, id: ValueId) -> f32 {
        let v = &self.nodes[id.0].value;
        assert_eq!(v.len(), 1, "expected a scalar value");
        *v.iter().next().unwrap()
    }

    pub fn pad(&mut self, x: ValueId, p: usize, mode: PadMode) -> ValueId {
        let value = kernels::pad(self.value4(x), p, mode).into_dyn();
        let needs = self.any_grad(&[x]);
        self.push(value, Op::Pad { x, p, mode }, needs)
    }

    pub fn conv2d(&mut self, x: ValueId, w: ValueId, b: ValueId, stride: usize) -> ValueId {
        let value =
            kernels::conv2d_fwd(self.value4(x), self.value4(w), self.value1(b), stride).into_dyn();
        let needs = self.any_grad(&[x, w, b]);
        self.push(value, Op::Conv2d { x, w, b, stride }, needs)
    }

    pub fn instance_norm(&mut self, x: ValueId, gamma: ValueId, beta: ValueId, eps: f32) -> ValueId {
        let (value, stats) =
            kernels::instance_norm_fwd(self.value4(x), self.value1(gamma), self.value1(beta), eps);
        let needs = self.any_grad(&[x, gamma, beta]);
        self.push(value.into_dyn(), Op::InstanceNorm { x, gamma, beta, stats }, needs)
    }

    pub fn leaky_relu(&mut self, x: ValueId, slope: f32) -> ValueId {
        let value = kernels::leaky_relu_fwd(self.value4(x), slope).into_dyn();
        let needs = self.any_grad(&[x]);
        self.push(value, Op::LeakyRelu { x, slope }, needs)
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        self.leaky_relu(x, 0.0)
    }

    pub fn tanh(&mut self, x: ValueId) -> ValueId {
        let value = kernels::tanh_fwd(self.value4(x)).into_dyn();
        let needs = self.any_grad(&[x]);
        self.push(value, Op::Tanh { x }, needs)
    }

    pub fn sigmoid(&mut self, x: ValueId) -> ValueId {
        let value = kernels::sigmoid_fwd(self.value4(x)).into_dyn();
        let needs = self.any_grad(&[x]);
        self.push(value, Op::Sigmoid { x }, needs)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let value = (&self.nodes[a.0].value + &self.nodes[b.0].value).into_dyn();
        let needs = self.any_grad(&[a, b]);
        self.push(value, Op::Add { a, b }, needs)
    }

    /// y = scale * x + shift, elementwise.
    pub fn affine(&mut self, x: ValueId, scale: f32, shift: f32) -> ValueId {
        let value = self.nodes[x.0].value.mapv(|v| scale * v + shift);
        let needs = self.any_grad(&[x]);
        self.push(value, Op::Affine { x, scale }, needs)
    }

    /// y[n,c,...] = scale[c] * x[n,c,...] + shift[c], with constant
    /// per-channel coefficients (used for input normalization).
    pub fn channel_affine(&mut self, x: ValueId, scale: Array1<f32>, shift: Array1<f32>) -> ValueId {
        let xv = self.value4(x);
        let (n, c, h, w) = xv.dim();
        assert_eq!(scale.len(), c);
        assert_eq!(shift.len(), c);
        let mut value = xv.to_owned();
        for ci in 0..c {
            let (sc, sh) = (scale[ci], shift[ci]);
            value
                .slice_mut(ndarray::s![.., ci, .., ..])
                .mapv_inplace(|v| sc * v + sh);
        }
        let _ = (n, h, w);
        let needs = self.any_grad(&[x]);
        self.push(value.into_dyn(), Op::ChannelAffine { x, scale }, needs)
    }

    pub fn upsample2(&mut self, x: ValueId) -> ValueId {
        let value = kernels::upsample2_fwd(self.value4(x)).into_dyn();
        let needs = self.any_grad(&[x]);
        self.push(value, Op::Upsample2 { x }, needs)
    }

    /// (N, C, H, W) -> (N,): mean over channels and space per sample.
    pub fn sample_mean(&mut self, x: ValueId) -> ValueId {
        let value = kernels::sample_mean(self.value4(x)).into_dyn();
        let needs = self.any_grad(&[x]);
        self.push(value, Op::SampleMean { x }, needs)
    }

    /// (N,) -> scalar: -mean(log p), with p clamped into [eps, 1-eps].
    pub fn neg_log_mean(&mut self, x: ValueId) -> ValueId {
        let xv = view1(&self.nodes[x.0].value);
        let n = xv.len() as f64;
        let v = -xv
            .iter()
            .map(|&p| (p.clamp(PROB_EPS, 1.0 - PROB_EPS) as f64).ln())
            .sum::<f64>()
            / n;
        let needs = self.any_grad(&[x]);
        self.push(scalar_value(v), Op::NegLogMean { x }, needs)
    }

    /// (N,) -> scalar: -mean(log(1 - p)), with p clamped into [eps, 1-eps].
    pub fn neg_log1m_mean(&mut self, x: ValueId) -> ValueId {
        let xv = view1(&self.nodes[x.0].value);
        let n = xv.len() as f64;
        let v = -xv
            .iter()
            .map(|&p| (1.0 - p.clamp(PROB_EPS, 1.0 - PROB_EPS) as f64).ln())
            .sum::<f64>()
            / n;
        let needs = self.any_grad(&[x]);
        self.push(scalar_value(v), Op::NegLog1mMean { x }, needs)
    }

    /// Mean of (a - b)^2 over every element.
    pub fn sq_diff_mean(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.shape(), bv.shape(), "shape mismatch in squared distance");
        let m = av.len() as f64;
        let v = av
            .iter()
            .zip(bv.iter())
            .map(|(&x, &y)| ((x - y) as f64).powi(2))
            .sum::<f64>()
            / m;
        let needs = self.any_grad(&[a, b]);
        self.push(scalar_value(v), Op::SqDiffMean { a, b }, needs)
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(ValueId, f32)]) -> ValueId {
        let v: f64 = terms
            .iter()
            .map(|&(id, c)| self.scalar(id) as f64 * c as f64)
            .sum();
        let ids: Vec<ValueId> = terms.iter().map(|t| t.0).collect();
        let needs = self.any_grad(&ids);
        self.push(scalar_value(v), Op::WeightedSum { terms: terms.to_vec() }, needs)
    }

    /// Reverse pass from a scalar root. Returns per-node gradients; only
    /// leaves flagged `needs_grad` (and the interior nodes feeding them)
    /// are populated.
    pub fn backward(&self, root: ValueId) -> Gradients {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<ArrayD<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ndarray::arr0(1.0f32).into_dyn());

        for i in (0..=root.0).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = grads[i].take().expect("checked above");
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    // keep leaf gradients for the caller
                    grads[i] = Some(g);
                    continue;
                }
                Op::Pad { x, p, mode } => {
                    if self.nodes[x.0].needs_grad {
                        let (h, w) = {
                            let d = self.value4(*x).dim();
                            (d.2, d.3)
                        };
                        let dx = kernels::pad_adjoint(view4(&g), *p, *mode, h, w);
                        self.accum(&mut grads, *x, dx.into_dyn());
                    }
                }
                Op::Conv2d { x, w, b, stride } => {
                    let gy = view4(&g);
                    if self.nodes[w.0].needs_grad || self.nodes[b.0].needs_grad {
                        let k = self.value4(*w).dim().2;
                        let (dw, db) =
                            kernels::conv2d_bwd_weights(gy, self.value4(*x), *stride, k);
                        if self.nodes[w.0].needs_grad {
                            self.accum(&mut grads, *w, dw.into_dyn());
                        }
                        if self.nodes[b.0].needs_grad {
                            self.accum(&mut grads, *b, db.into_dyn());
                        }
                    }
                    if self.nodes[x.0].needs_grad {
                        let (h, w_in) = {
                            let d = self.value4(*x).dim();
                            (d.2, d.3)
                        };
                        let dx = kernels::conv2d_bwd_input(gy, self.value4(*w), *stride, h, w_in);
                        self.accum(&mut grads, *x, dx.into_dyn());
                    }
                }
                Op::InstanceNorm { x, gamma, beta, stats } => {
                    let (dx, dgamma, dbeta) = kernels::instance_norm_bwd(
                        view4(&g),
                        self.value4(*x),
                        self.value1(*gamma),
                        stats,
                    );
                    if self.nodes[x.0].needs_grad {
                        self.accum(&mut grads, *x, dx.into_dyn());
                    }
                    if self.nodes[gamma.0].needs_grad {
                        self.accum(&mut grads, *gamma, dgamma.into_dyn());
                    }
                    if self.nodes[beta.0].needs_grad {
                        self.accum(&mut grads, *beta, dbeta.into_dyn());
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    if self.nodes[x.0].needs_grad {
                        let dx = kernels::leaky_relu_bwd(view4(&g), view4(&node.value), *slope);
                        self.accum(&mut grads, *x, dx.into_dyn());
                    }
                }
                Op::Tanh { x } => {
                    if self.nodes[x.0].needs_grad {
                        let dx = kernels::tanh_bwd(view4(&g), view4(&node.value));
                        self.accum(&mut grads, *x, dx.into_dyn());
                    }
                }
                Op::Sigmoid { x } => {
                    if self.nodes[x.0].needs_grad {
                        let dx = kernels::sigmoid_bwd(view4(&g), view4(&node.value));
                        self.accum(&mut grads, *x, dx.into_dyn());
                    }
                }
                Op::Add { a, b } => {
                    if self.nodes[a.0].needs_grad {
                        self.accum(&mut grads, *a, g.clone());
                    }
                    if self.nodes[b.0].needs_grad {
                        self.accum(&mut grads, *b, g.clone());
                    }
                }
                Op::Affine { x, scale } => {
                    if self.nodes[x.0].needs_grad {
                        self.accum(&mut grads, *x, g.mapv(|v| v * scale));
                    }
                }
                Op::ChannelAffine { x, scale } => {
                    if self.nodes[x.0].needs_grad {
                        let mut dx = view4(&g).to_owned();
                        for ci in 0..scale.len() {
                            let sc = scale[ci];
                            dx.slice_mut(ndarray::s![.., ci, .., ..]).mapv_inplace(|v| v * sc);
                        }
                        self.accum(&mut grads, *x, dx.into_dyn());
                    }
                }
                Op::Upsample2 { x } => {
                    if self.nodes[x.0].needs_grad {
                        let dx = kernels::upsample2_bwd(view4(&g));
                        self.accum(&mut grads, *x, dx.into_dyn());
                    }
                }
                Op::SampleMean { x } => {
                    if self.nodes[x.0].needs_grad {
                        let xv = self.value4(*x);
                        let (n, c, h, w) = xv.dim();
                        let gv = view1(&g);
                        let m = (c * h * w) as f32;
                        let mut dx = ndarray::Array4::<f32>::zeros((n, c, h, w));
                        for ni in 0..n {
                            dx.slice_mut(ndarray::s![ni, .., .., ..]).fill(gv[ni] / m);
                        }
                        self.accum(&mut grads, *x, dx.into_dyn());
                    }
                }
                Op::NegLogMean { x } => {
                    if self.nodes[x.0].needs_grad {
                        let xv = view1(&self.nodes[x.0].value);
                        let n = xv.len() as f32;
                        let gs = g.iter().next().copied().unwrap();
                        let dx = xv.mapv(|p| {
                            if (PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
                                -gs / (n * p)
                            } else {
                                0.0
                            }
                        });
                        self.accum(&mut grads, *x, dx.into_dyn());
                    }
                }
                Op::NegLog1mMean { x } => {
                    if self.nodes[x.0].needs_grad {
                        let xv = view1(&self.nodes[x.0].value);
                        let n = xv.len() as f32;
                        let gs = g.iter().next().copied().unwrap();
                        let dx = xv.mapv(|p| {
                            if (PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
                                gs / (n * (1.0 - p))
                            } else {
                                0.0
                            }
                        });
                        self.accum(&mut grads, *x, dx.into_dyn());
                    }
                }
                Op::SqDiffMean { a, b } => {
                    let gs = g.iter().next().copied().unwrap();
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let m = av.len() as f32;
                    if self.nodes[a.0].needs_grad {
                        let mut da = av - bv;
                        da.mapv_inplace(|v| v * 2.0 * gs / m);
                        self.accum(&mut grads, *a, da);
                    }
                    if self.nodes[b.0].needs_grad {
                        let mut db = bv - av;
                        db.mapv_inplace(|v| v * 2.0 * gs / m);
                        self.accum(&mut grads, *b, db);
                    }
                }
                Op::WeightedSum { terms } => {
                    let gs = g.iter().next().copied().unwrap();
                    for &(id, c) in terms {
                        if self.nodes[id.0].needs_grad {
                            let delta = self.nodes[id.0].value.mapv(|_| 0.0f32) + (gs * c);
                            self.accum(&mut grads, id, delta);
                        }
                    }
                }
            }
        }
        Gradients { grads }
    }

    fn accum(&self, grads: &mut [Option<ArrayD<f32>>], id: ValueId, delta: ArrayD<f32>) {
        match &mut grads[id.0] {
            Some(existing) => *existing += &delta,
            slot @ None => *slot = Some(delta),
        }
    }
}

pub struct Gradients {
    grads: Vec<Option<ArrayD<f32>>>,
}

impl Gradients {
    pub fn take(&mut self, id: ValueId) -> Option<ArrayD<f32>> {
        self.grads[id.0].take()
    }

    pub fn get(&self, id: ValueId) -> Option<&ArrayD<f32>> {
        self.grads[id.0].as_ref()
    }
}
