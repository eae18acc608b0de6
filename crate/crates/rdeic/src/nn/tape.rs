//! Define-by-run reverse-mode differentiation over dense tensors.
//!
//! A `Tape` is an arena of nodes built fresh for every forward pass;
//! `backward` walks it in reverse and accumulates gradients for the
//! parameter leaves. Only the ops the codec networks need are
//! implemented. Everything is generic over the element type so the same
//! graph code runs at f32 for training and at f64 for gradient checks.

use std::collections::HashMap;

use ndarray::{Array2, Array4, ArrayD, Axis, IxDyn};

use crate::element::Element;

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param(usize),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Silu(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Erf(NodeId),
    Ln(NodeId),
    MaxScalar(NodeId, f64),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    },
    Upsample2(NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    ConcatC(NodeId, NodeId),
    AddChan {
        x: NodeId,
        bias: NodeId,
    },
    GatherRows {
        table: NodeId,
        idx: Vec<usize>,
    },
    NchwToVecs(NodeId),
    VecsToNchw {
        x: NodeId,
        dims: [usize; 4],
    },
    Crop2d(NodeId),
    SumAll(NodeId),
}

struct Node<E: Element> {
    value: ArrayD<E>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<E: Element> {
    nodes: Vec<Node<E>>,
}

/// Parameter gradients keyed by parameter-store index.
pub struct Gradients<E: Element> {
    pub by_param: HashMap<usize, ArrayD<E>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<E> {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].value.len(), 1);
        self.nodes[id].value.iter().next().unwrap().into_f64()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    fn push(&mut self, value: ArrayD<E>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    // -- leaves ------------------------------------------------------------

    pub fn constant(&mut self, value: ArrayD<E>) -> NodeId {
        self.push(value, Op::Const, false)
    }

    pub fn param(&mut self, store_idx: usize, value: ArrayD<E>) -> NodeId {
        self.push(value, Op::Param(store_idx), true)
    }

    pub fn scalar_const(&mut self, v: f64) -> NodeId {
        self.constant(ArrayD::from_elem(IxDyn(&[]), E::from_f64(v)))
    }

    // -- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add shape");
        let v = &self.nodes[a].value + &self.nodes[b].value;
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "sub shape");
        let v = &self.nodes[a].value - &self.nodes[b].value;
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "mul shape");
        let v = &self.nodes[a].value * &self.nodes[b].value;
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), g)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "div shape");
        let v = &self.nodes[a].value / &self.nodes[b].value;
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Div(a, b), g)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let es = E::from_f64(s);
        let v = self.nodes[a].value.mapv(|x| x * es);
        let g = self.ng(a);
        self.push(v, Op::Scale(a, s), g)
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let es = E::from_f64(s);
        let v = self.nodes[a].value.mapv(|x| x + es);
        let g = self.ng(a);
        self.push(v, Op::AddScalar(a), g)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.mul(a, a)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x * sigmoid(x));
        let g = self.ng(a);
        self.push(v, Op::Silu(a), g)
    }

    pub fn sigmoid_act(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(sigmoid);
        let g = self.ng(a);
        self.push(v, Op::Sigmoid(a), g)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(softplus);
        let g = self.ng(a);
        self.push(v, Op::Softplus(a), g)
    }

    pub fn erf(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x.erf());
        let g = self.ng(a);
        self.push(v, Op::Erf(a), g)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x.ln());
        let g = self.ng(a);
        self.push(v, Op::Ln(a), g)
    }

    pub fn max_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let es = E::from_f64(s);
        let v = self.nodes[a].value.mapv(|x| if x > es { x } else { es });
        let g = self.ng(a);
        self.push(v, Op::MaxScalar(a, s), g)
    }

    // -- structured --------------------------------------------------------

    /// 2-D convolution, square kernel, symmetric zero padding.
    /// `x`: (B, Cin, H, W); `w`: (Cout, Cin, K, K); `b`: (Cout).
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> NodeId {
        let v = conv2d_forward(
            &self.nodes[x].value,
            &self.nodes[w].value,
            &self.nodes[b].value,
            stride,
            pad,
        );
        let g = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(v, Op::Conv2d { x, w, b, stride, pad }, g)
    }

    /// Nearest-neighbor 2x spatial upsampling.
    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let xv = as4(&self.nodes[x].value);
        let (b, c, h, w) = xv.dim();
        let mut out = Array4::<E>::zeros((b, c, 2 * h, 2 * w));
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let v = xv[(bi, ci, y, xx)];
                        out[(bi, ci, 2 * y, 2 * xx)] = v;
                        out[(bi, ci, 2 * y, 2 * xx + 1)] = v;
                        out[(bi, ci, 2 * y + 1, 2 * xx)] = v;
                        out[(bi, ci, 2 * y + 1, 2 * xx + 1)] = v;
                    }
                }
            }
        }
        let g = self.ng(x);
        self.push(out.into_dyn(), Op::Upsample2(x), g)
    }

    /// `x`: (B, Din) · `w`: (Din, Dout) + `b`: (Dout).
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xv = as2(&self.nodes[x].value);
        let wv = as2(&self.nodes[w].value);
        let bv = as1(&self.nodes[b].value);
        let mut out = xv.dot(&wv);
        out += &bv.view().insert_axis(Axis(0));
        let g = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(out.into_dyn(), Op::Linear { x, w, b }, g)
    }

    /// Concatenate along the channel axis of (B, C, H, W) tensors.
    pub fn concat_c(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = as4(&self.nodes[a].value);
        let bv = as4(&self.nodes[b].value);
        let v = ndarray::concatenate(Axis(1), &[av.view(), bv.view()]).expect("concat");
        let v = v.as_standard_layout().to_owned();
        let g = self.ng(a) || self.ng(b);
        self.push(v.into_dyn(), Op::ConcatC(a, b), g)
    }

    /// Add a per-sample channel vector (B, C) across spatial dims of (B, C, H, W).
    pub fn add_chan(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let xv = as4(&self.nodes[x].value);
        let bv = as2(&self.nodes[bias].value);
        let (b, c, h, w) = xv.dim();
        assert_eq!(bv.dim(), (b, c), "add_chan shape");
        let mut out = xv.to_owned();
        for bi in 0..b {
            for ci in 0..c {
                let add = bv[(bi, ci)];
                out.slice_mut(ndarray::s![bi, ci, .., ..]).mapv_inplace(|v| v + add);
            }
        }
        let _ = (h, w);
        let g = self.ng(x) || self.ng(bias);
        self.push(out.into_dyn(), Op::AddChan { x, bias }, g)
    }

    /// Gather rows of a (V, D) table; gradient scatter-adds into the table.
    pub fn gather_rows(&mut self, table: NodeId, idx: Vec<usize>) -> NodeId {
        let tv = as2(&self.nodes[table].value);
        let d = tv.ncols();
        let mut out = Array2::<E>::zeros((idx.len(), d));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&tv.row(i));
        }
        let g = self.ng(table);
        self.push(out.into_dyn(), Op::GatherRows { table, idx }, g)
    }

    /// (B, C, H, W) -> (B*H*W, C) spatial-position vectors.
    pub fn nchw_to_vecs(&mut self, x: NodeId) -> NodeId {
        let xv = as4(&self.nodes[x].value);
        let (b, c, h, w) = xv.dim();
        let mut out = Array2::<E>::zeros((b * h * w, c));
        for bi in 0..b {
            for y in 0..h {
                for xx in 0..w {
                    let row = (bi * h + y) * w + xx;
                    for ci in 0..c {
                        out[(row, ci)] = xv[(bi, ci, y, xx)];
                    }
                }
            }
        }
        let g = self.ng(x);
        self.push(out.into_dyn(), Op::NchwToVecs(x), g)
    }

    /// Inverse of [`Tape::nchw_to_vecs`].
    pub fn vecs_to_nchw(&mut self, x: NodeId, dims: [usize; 4]) -> NodeId {
        let xv = as2(&self.nodes[x].value);
        let [b, c, h, w] = dims;
        assert_eq!(xv.dim(), (b * h * w, c), "vecs_to_nchw shape");
        let mut out = Array4::<E>::zeros((b, c, h, w));
        for bi in 0..b {
            for y in 0..h {
                for xx in 0..w {
                    let row = (bi * h + y) * w + xx;
                    for ci in 0..c {
                        out[(bi, ci, y, xx)] = xv[(row, ci)];
                    }
                }
            }
        }
        let g = self.ng(x);
        self.push(out.into_dyn(), Op::VecsToNchw { x, dims }, g)
    }

    /// Keep the top-left (h, w) spatial window of a (B, C, H, W) tensor.
    pub fn crop2d(&mut self, x: NodeId, h: usize, w: usize) -> NodeId {
        let xv = as4(&self.nodes[x].value);
        let (_, _, xh, xw) = xv.dim();
        assert!(h <= xh && w <= xw, "crop2d target exceeds input");
        if h == xh && w == xw {
            return x;
        }
        let v = xv.slice(ndarray::s![.., .., ..h, ..w]).to_owned();
        let g = self.ng(x);
        self.push(v.into_dyn(), Op::Crop2d(x), g)
    }

    /// Sum of all elements, as a 0-d node.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: E = self.nodes[a].value.iter().copied().sum();
        let g = self.ng(a);
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::SumAll(a), g)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a].value.len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.sub(a, b);
        let sq = self.square(d);
        self.mean_all(sq)
    }

    /// Sum of squared differences over all elements.
    pub fn sse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.sub(a, b);
        let sq = self.square(d);
        self.sum_all(sq)
    }

    // -- backward ----------------------------------------------------------

    pub fn backward(&mut self, loss: NodeId) -> Gradients<E> {
        assert_eq!(
            self.nodes[loss].value.len(),
            1,
            "backward requires a scalar loss"
        );
        let mut grads: Vec<Option<ArrayD<E>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(ArrayD::from_elem(self.nodes[loss].value.raw_dim(), E::one()));
        let mut by_param = HashMap::new();

        for id in (0..=loss).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[id].op {
                Op::Const => {}
                Op::Param(idx) => {
                    by_param
                        .entry(*idx)
                        .and_modify(|acc: &mut ArrayD<E>| *acc += &g)
                        .or_insert(g);
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    self.accum(&mut grads, a, g.clone());
                    self.accum(&mut grads, b, g);
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    self.accum(&mut grads, a, g.clone());
                    self.accum(&mut grads, b, g.mapv(|v| -v));
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = &g * &self.nodes[b].value;
                    let gb = &g * &self.nodes[a].value;
                    self.accum(&mut grads, a, ga);
                    self.accum(&mut grads, b, gb);
                }
                Op::Div(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = &g / &self.nodes[b].value;
                    let bb = &self.nodes[b].value * &self.nodes[b].value;
                    let gb = -(&g * &self.nodes[a].value) / bb;
                    self.accum(&mut grads, a, ga);
                    self.accum(&mut grads, b, gb);
                }
                Op::Scale(a, s) => {
                    let (a, es) = (*a, E::from_f64(*s));
                    self.accum(&mut grads, a, g.mapv(|v| v * es));
                }
                Op::AddScalar(a) => {
                    let a = *a;
                    self.accum(&mut grads, a, g);
                }
                Op::Silu(a) => {
                    let a = *a;
                    let d = self.nodes[a].value.mapv(|x| {
                        let s = sigmoid(x);
                        s * (E::one() + x * (E::one() - s))
                    });
                    self.accum(&mut grads, a, g * d);
                }
                Op::Sigmoid(a) => {
                    let a = *a;
                    let d = self.nodes[id].value.mapv(|s| s * (E::one() - s));
                    self.accum(&mut grads, a, g * d);
                }
                Op::Softplus(a) => {
                    let a = *a;
                    let d = self.nodes[a].value.mapv(sigmoid);
                    self.accum(&mut grads, a, g * d);
                }
                Op::Erf(a) => {
                    let a = *a;
                    let c = E::from_f64(2.0 / std::f64::consts::PI.sqrt());
                    let d = self.nodes[a].value.mapv(|x| c * (-x * x).exp());
                    self.accum(&mut grads, a, g * d);
                }
                Op::Ln(a) => {
                    let a = *a;
                    let d = self.nodes[a].value.mapv(|x| x.recip());
                    self.accum(&mut grads, a, g * d);
                }
                Op::MaxScalar(a, s) => {
                    let (a, es) = (*a, E::from_f64(*s));
                    let d = self.nodes[a].value.mapv(|x| if x > es { E::one() } else { E::zero() });
                    self.accum(&mut grads, a, g * d);
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (x, w, b, stride, pad) = (*x, *w, *b, *stride, *pad);
                    let (gx, gw, gb) = conv2d_backward(
                        &self.nodes[x].value,
                        &self.nodes[w].value,
                        &g,
                        stride,
                        pad,
                        self.ng(x),
                        self.ng(w) || self.ng(b),
                    );
                    if let Some(gx) = gx {
                        self.accum(&mut grads, x, gx);
                    }
                    if let Some(gw) = gw {
                        self.accum(&mut grads, w, gw);
                    }
                    if let Some(gb) = gb {
                        self.accum(&mut grads, b, gb);
                    }
                }
                Op::Upsample2(a) => {
                    let a = *a;
                    let gv = as4(&g);
                    let (bsz, c, h2, w2) = gv.dim();
                    let (h, w) = (h2 / 2, w2 / 2);
                    let mut gx = Array4::<E>::zeros((bsz, c, h, w));
                    for bi in 0..bsz {
                        for ci in 0..c {
                            for y in 0..h {
                                for xx in 0..w {
                                    gx[(bi, ci, y, xx)] = gv[(bi, ci, 2 * y, 2 * xx)]
                                        + gv[(bi, ci, 2 * y, 2 * xx + 1)]
                                        + gv[(bi, ci, 2 * y + 1, 2 * xx)]
                                        + gv[(bi, ci, 2 * y + 1, 2 * xx + 1)];
                                }
                            }
                        }
                    }
                    self.accum(&mut grads, a, gx.into_dyn());
                }
                Op::Linear { x, w, b } => {
                    let (x, w, b) = (*x, *w, *b);
                    let gv = as2(&g);
                    if self.ng(x) {
                        let wv = as2(&self.nodes[w].value);
                        let gx = gv.dot(&wv.t());
                        self.accum(&mut grads, x, gx.into_dyn());
                    }
                    if self.ng(w) {
                        let xv = as2(&self.nodes[x].value);
                        let gw = xv.t().dot(&gv);
                        self.accum(&mut grads, w, gw.into_dyn());
                    }
                    if self.ng(b) {
                        let gb = gv.sum_axis(Axis(0));
                        self.accum(&mut grads, b, gb.into_dyn());
                    }
                }
                Op::ConcatC(a, b) => {
                    let (a, b) = (*a, *b);
                    let ca = self.shape(a)[1];
                    let gv = as4(&g);
                    let ga = gv.slice(ndarray::s![.., ..ca, .., ..]).to_owned();
                    let gb = gv.slice(ndarray::s![.., ca.., .., ..]).to_owned();
                    self.accum(&mut grads, a, ga.into_dyn());
                    self.accum(&mut grads, b, gb.into_dyn());
                }
                Op::AddChan { x, bias } => {
                    let (x, bias) = (*x, *bias);
                    if self.ng(x) {
                        self.accum(&mut grads, x, g.clone());
                    }
                    if self.ng(bias) {
                        let gv = as4(&g);
                        let gb = gv.sum_axis(Axis(3)).sum_axis(Axis(2));
                        self.accum(&mut grads, bias, gb.into_dyn());
                    }
                }
                Op::GatherRows { table, idx } => {
                    let table = *table;
                    let idx = idx.clone();
                    let tv_shape = self.shape(table).to_vec();
                    let gv = as2(&g);
                    let mut gt = Array2::<E>::zeros((tv_shape[0], tv_shape[1]));
                    for (r, &i) in idx.iter().enumerate() {
                        let mut row = gt.row_mut(i);
                        row += &gv.row(r);
                    }
                    self.accum(&mut grads, table, gt.into_dyn());
                }
                Op::NchwToVecs(a) => {
                    let a = *a;
                    let dims4 = self.shape(a).to_vec();
                    let gv = as2(&g);
                    let (b, c, h, w) = (dims4[0], dims4[1], dims4[2], dims4[3]);
                    let mut ga = Array4::<E>::zeros((b, c, h, w));
                    for bi in 0..b {
                        for y in 0..h {
                            for xx in 0..w {
                                let row = (bi * h + y) * w + xx;
                                for ci in 0..c {
                                    ga[(bi, ci, y, xx)] = gv[(row, ci)];
                                }
                            }
                        }
                    }
                    self.accum(&mut grads, a, ga.into_dyn());
                }
                Op::VecsToNchw { x, dims } => {
                    let (x, dims) = (*x, *dims);
                    let gv = as4(&g);
                    let [b, c, h, w] = dims;
                    let mut ga = Array2::<E>::zeros((b * h * w, c));
                    for bi in 0..b {
                        for y in 0..h {
                            for xx in 0..w {
                                let row = (bi * h + y) * w + xx;
                                for ci in 0..c {
                                    ga[(row, ci)] = gv[(bi, ci, y, xx)];
                                }
                            }
                        }
                    }
                    self.accum(&mut grads, x, ga.into_dyn());
                }
                Op::Crop2d(x) => {
                    let x = *x;
                    let dims = self.shape(x).to_vec();
                    let gv = as4(&g);
                    let (_, _, gh, gw) = gv.dim();
                    let mut ga = Array4::<E>::zeros((dims[0], dims[1], dims[2], dims[3]));
                    ga.slice_mut(ndarray::s![.., .., ..gh, ..gw]).assign(&gv);
                    self.accum(&mut grads, x, ga.into_dyn());
                }
                Op::SumAll(a) => {
                    let a = *a;
                    let gs = g.iter().next().copied().unwrap();
                    let ga = ArrayD::from_elem(self.nodes[a].value.raw_dim(), gs);
                    self.accum(&mut grads, a, ga);
                }
            }
        }
        Gradients { by_param }
    }

    fn accum(&self, grads: &mut [Option<ArrayD<E>>], id: NodeId, g: ArrayD<E>) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut grads[id] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }
}

#[inline]
fn sigmoid<E: Element>(x: E) -> E {
    (E::one() + (-x).exp()).recip()
}

#[inline]
fn softplus<E: Element>(x: E) -> E {
    // max(x, 0) + ln(1 + exp(-|x|)), numerically stable at both tails
    let m = if x > E::zero() { x } else { E::zero() };
    m + ((-x.abs()).exp() + E::one()).ln()
}

fn as4<E: Element>(a: &ArrayD<E>) -> ndarray::ArrayView4<'_, E> {
    a.view().into_dimensionality().expect("expected 4-d tensor")
}

fn as2<E: Element>(a: &ArrayD<E>) -> ndarray::ArrayView2<'_, E> {
    a.view().into_dimensionality().expect("expected 2-d tensor")
}

fn as1<E: Element>(a: &ArrayD<E>) -> ndarray::ArrayView1<'_, E> {
    a.view().into_dimensionality().expect("expected 1-d tensor")
}

// ---------------------------------------------------------------------------
// conv2d kernels (im2col + matmul)
// ---------------------------------------------------------------------------

fn out_dim(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

fn im2col<E: Element>(
    x: &ndarray::ArrayView4<'_, E>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array2<E> {
    let (b, cin, h, w) = x.dim();
    let oh = out_dim(h, k, stride, pad);
    let ow = out_dim(w, k, stride, pad);
    let mut col = Array2::<E>::zeros((b * oh * ow, cin * k * k));
    {
        let xs = x.as_slice().expect("contiguous input");
        let cs = col.as_slice_mut().unwrap();
        let row_len = cin * k * k;
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((bi * oh + oy) * ow + ox) * row_len;
                    for ci in 0..cin {
                        let x_base = (bi * cin + ci) * h * w;
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let col_base = row + (ci * k + ky) * k;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let x_row = x_base + iy as usize * w;
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                cs[col_base + kx] = xs[x_row + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im<E: Element>(
    dcol: &Array2<E>,
    dims: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<E> {
    let (b, cin, h, w) = dims;
    let oh = out_dim(h, k, stride, pad);
    let ow = out_dim(w, k, stride, pad);
    let mut dx = Array4::<E>::zeros((b, cin, h, w));
    {
        let ds = dcol.as_slice().expect("contiguous dcol");
        let xs = dx.as_slice_mut().unwrap();
        let row_len = cin * k * k;
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((bi * oh + oy) * ow + ox) * row_len;
                    for ci in 0..cin {
                        let x_base = (bi * cin + ci) * h * w;
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let x_row = x_base + iy as usize * w;
                            let col_base = row + (ci * k + ky) * k;
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                xs[x_row + ix as usize] = xs[x_row + ix as usize] + ds[col_base + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

fn conv2d_forward<E: Element>(
    x: &ArrayD<E>,
    w: &ArrayD<E>,
    b: &ArrayD<E>,
    stride: usize,
    pad: usize,
) -> ArrayD<E> {
    let xv = as4(x);
    let wv = as4(w);
    let bv = as1(b);
    let (bsz, cin, h, wd) = xv.dim();
    let (cout, cin_w, k, k2) = wv.dim();
    assert_eq!(cin, cin_w, "conv2d channel mismatch");
    assert_eq!(k, k2, "square kernels only");
    assert_eq!(bv.len(), cout, "conv2d bias length");
    let oh = out_dim(h, k, stride, pad);
    let ow = out_dim(wd, k, stride, pad);

    let col = im2col(&xv, k, stride, pad);
    let wmat = wv.to_shape((cout, cin * k * k)).unwrap();
    let out2 = col.dot(&wmat.t()); // (B*OH*OW, Cout)

    let mut out = Array4::<E>::zeros((bsz, cout, oh, ow));
    {
        let os = out.as_slice_mut().unwrap();
        let o2 = out2.as_slice().unwrap();
        for bi in 0..bsz {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((bi * oh + oy) * ow + ox) * cout;
                    for co in 0..cout {
                        os[((bi * cout + co) * oh + oy) * ow + ox] = o2[row + co] + bv[co];
                    }
                }
            }
        }
    }
    out.into_dyn()
}

#[allow(clippy::type_complexity)]
fn conv2d_backward<E: Element>(
    x: &ArrayD<E>,
    w: &ArrayD<E>,
    dout: &ArrayD<E>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<ArrayD<E>>, Option<ArrayD<E>>, Option<ArrayD<E>>) {
    let xv = as4(x);
    let wv = as4(w);
    let dv = as4(dout);
    let (bsz, cin, h, wd) = xv.dim();
    let (cout, _, k, _) = wv.dim();
    let (_, _, oh, ow) = dv.dim();

    // dout as (B*OH*OW, Cout)
    let mut d2 = Array2::<E>::zeros((bsz * oh * ow, cout));
    {
        let ds = d2.as_slice_mut().unwrap();
        let dv_s = dv.as_slice().expect("contiguous dout");
        for bi in 0..bsz {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        ds[(((bi * oh + oy) * ow + ox) * cout) + co] =
                            dv_s[((bi * cout + co) * oh + oy) * ow + ox];
                    }
                }
            }
        }
    }

    let dx = if need_dx {
        let wmat = wv.to_shape((cout, cin * k * k)).unwrap();
        let dcol = d2.dot(&wmat);
        Some(col2im(&dcol, (bsz, cin, h, wd), k, stride, pad).into_dyn())
    } else {
        None
    };

    let (dw, db) = if need_dw {
        let col = im2col(&xv, k, stride, pad);
        let dwmat = d2.t().dot(&col); // (Cout, Cin*K*K)
        let dw = dwmat
            .into_shape_with_order((cout, cin, k, k))
            .unwrap()
            .into_dyn();
        let db = d2.sum_axis(Axis(0)).into_dyn();
        (Some(dw), Some(db))
    } else {
        (None, None)
    };

    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::IxDyn;

    fn randn(seed: u64, dims: &[usize]) -> ArrayD<f64> {
        rng::normal_tensor(&mut rng::seeded(seed), dims)
    }

    /// Central-difference check of d(sum(f(x)))/dx for a single-input op.
    fn check_unary(
        build: impl Fn(&mut Tape<f64>, NodeId) -> NodeId,
        x0: ArrayD<f64>,
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let x = tape.param(0, x0.clone());
        let y = build(&mut tape, x);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss);
        let g = &grads.by_param[&0];

        let eps = 1e-6;
        for flat in 0..x0.len().min(24) {
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            xp.as_slice_mut().unwrap()[flat] += eps;
            xm.as_slice_mut().unwrap()[flat] -= eps;
            let fp = {
                let mut t = Tape::new();
                let x = t.constant(xp);
                let y = build(&mut t, x);
                let l = t.sum_all(y);
                t.scalar(l)
            };
            let fm = {
                let mut t = Tape::new();
                let x = t.constant(xm);
                let y = build(&mut t, x);
                let l = t.sum_all(y);
                t.scalar(l)
            };
            let num = (fp - fm) / (2.0 * eps);
            let ana = g.as_slice().unwrap()[flat];
            let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-8);
            assert!(rel < tol, "flat {flat}: analytic {ana}, numeric {num}");
        }
    }

    #[test]
    fn unary_op_gradients() {
        let x = randn(1, &[2, 3]);
        check_unary(|t, x| t.silu(x), x.clone(), 1e-7);
        check_unary(|t, x| t.sigmoid_act(x), x.clone(), 1e-7);
        check_unary(|t, x| t.softplus(x), x.clone(), 1e-7);
        check_unary(|t, x| t.erf(x), x.clone(), 1e-7);
        check_unary(|t, x| t.square(x), x.clone(), 1e-7);
        check_unary(|t, x| t.scale(x, -2.5), x.clone(), 1e-7);
        check_unary(|t, x| t.add_scalar(x, 0.7), x, 1e-7);
        let pos = randn(2, &[6]).mapv(|v: f64| v.abs() + 0.5);
        check_unary(|t, x| t.ln(x), pos, 1e-6);
    }

    #[test]
    fn binary_op_gradients() {
        let a0 = randn(3, &[2, 4]);
        let b0 = randn(4, &[2, 4]).mapv(|v| v + 3.0); // keep divisor away from 0
        for mode in 0..4 {
            let mut tape = Tape::new();
            let a = tape.param(0, a0.clone());
            let b = tape.param(1, b0.clone());
            let y = match mode {
                0 => tape.add(a, b),
                1 => tape.sub(a, b),
                2 => tape.mul(a, b),
                _ => tape.div(a, b),
            };
            let loss = tape.sum_all(y);
            let grads = tape.backward(loss);
            let eps = 1e-6;
            for (pi, p0) in [(0usize, &a0), (1usize, &b0)] {
                for flat in 0..p0.len() {
                    let run = |delta: f64| {
                        let mut ap = a0.clone();
                        let mut bp = b0.clone();
                        if pi == 0 {
                            ap.as_slice_mut().unwrap()[flat] += delta;
                        } else {
                            bp.as_slice_mut().unwrap()[flat] += delta;
                        }
                        let mut t = Tape::new();
                        let a = t.constant(ap);
                        let b = t.constant(bp);
                        let y = match mode {
                            0 => t.add(a, b),
                            1 => t.sub(a, b),
                            2 => t.mul(a, b),
                            _ => t.div(a, b),
                        };
                        let l = t.sum_all(y);
                        t.scalar(l)
                    };
                    let num = (run(eps) - run(-eps)) / (2.0 * eps);
                    let ana = grads.by_param[&pi].as_slice().unwrap()[flat];
                    let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-8);
                    assert!(rel < 1e-6, "mode {mode} param {pi} flat {flat}");
                }
            }
        }
    }

    #[test]
    fn conv2d_matches_direct_convolution() {
        // Oracle: naive quadruple-loop convolution.
        let x = randn(5, &[2, 3, 6, 5]);
        let w = randn(6, &[4, 3, 3, 3]);
        let b = randn(7, &[4]);
        for (stride, pad) in [(1usize, 1usize), (2, 1), (1, 0), (2, 0)] {
            let got = conv2d_forward(&x, &w, &b, stride, pad);
            let xv = as4(&x);
            let wv = as4(&w);
            let bv = as1(&b);
            let gv = as4(&got);
            let (bsz, cin, h, wd) = xv.dim();
            let oh = out_dim(h, 3, stride, pad);
            let ow = out_dim(wd, 3, stride, pad);
            assert_eq!(gv.dim(), (bsz, 4, oh, ow));
            for bi in 0..bsz {
                for co in 0..4 {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = bv[co];
                            for ci in 0..cin {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize
                                        {
                                            continue;
                                        }
                                        acc += xv[(bi, ci, iy as usize, ix as usize)]
                                            * wv[(co, ci, ky, kx)];
                                    }
                                }
                            }
                            let d: f64 = acc - gv[(bi, co, oy, ox)];
                            assert!(d.abs() < 1e-12, "s={stride} p={pad}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn conv2d_gradients_finite_difference() {
        let x0 = randn(8, &[2, 2, 5, 5]);
        let w0 = randn(9, &[3, 2, 3, 3]);
        let b0 = randn(10, &[3]);
        for (stride, pad) in [(1usize, 1usize), (2, 1)] {
            let mut tape = Tape::new();
            let x = tape.param(0, x0.clone());
            let w = tape.param(1, w0.clone());
            let b = tape.param(2, b0.clone());
            let y = tape.conv2d(x, w, b, stride, pad);
            let sq = tape.square(y);
            let loss = tape.sum_all(sq);
            let grads = tape.backward(loss);
            let eps = 1e-6;
            let eval = |xa: &ArrayD<f64>, wa: &ArrayD<f64>, ba: &ArrayD<f64>| {
                let mut t = Tape::new();
                let x = t.constant(xa.clone());
                let w = t.constant(wa.clone());
                let b = t.constant(ba.clone());
                let y = t.conv2d(x, w, b, stride, pad);
                let sq = t.square(y);
                let l = t.sum_all(sq);
                t.scalar(l)
            };
            for (pi, p0) in [(0usize, &x0), (1, &w0), (2, &b0)] {
                let g = &grads.by_param[&pi];
                let step = p0.len() / 7 + 1;
                for flat in (0..p0.len()).step_by(step) {
                    let mut pp = p0.clone();
                    let mut pm = p0.clone();
                    pp.as_slice_mut().unwrap()[flat] += eps;
                    pm.as_slice_mut().unwrap()[flat] -= eps;
                    let (fp, fm) = match pi {
                        0 => (eval(&pp, &w0, &b0), eval(&pm, &w0, &b0)),
                        1 => (eval(&x0, &pp, &b0), eval(&x0, &pm, &b0)),
                        _ => (eval(&x0, &w0, &pp), eval(&x0, &w0, &pm)),
                    };
                    let num = (fp - fm) / (2.0 * eps);
                    let ana = g.as_slice().unwrap()[flat];
                    let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-8);
                    assert!(rel < 1e-6, "param {pi} flat {flat}: {ana} vs {num}");
                }
            }
        }
    }

    #[test]
    fn structured_op_gradients() {
        // upsample2, linear, concat_c, add_chan, gather, vec reshapes
        let x0 = randn(11, &[1, 2, 3, 3]);
        check_unary(
            |t, x| {
                let u = t.upsample2(x);
                t.square(u)
            },
            x0,
            1e-6,
        );

        let x0 = randn(12, &[3, 4]);
        let w0 = randn(13, &[4, 2]);
        let b0 = randn(14, &[2]);
        let mut tape = Tape::new();
        let x = tape.param(0, x0.clone());
        let w = tape.param(1, w0.clone());
        let b = tape.param(2, b0.clone());
        let y = tape.linear(x, w, b);
        let sq = tape.square(y);
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss);
        let eps = 1e-6;
        let eval = |xa: &ArrayD<f64>, wa: &ArrayD<f64>, ba: &ArrayD<f64>| {
            let mut t = Tape::new();
            let x = t.constant(xa.clone());
            let w = t.constant(wa.clone());
            let b = t.constant(ba.clone());
            let y = t.linear(x, w, b);
            let sq = t.square(y);
            let l = t.sum_all(sq);
            t.scalar(l)
        };
        for (pi, p0) in [(0usize, &x0), (1, &w0), (2, &b0)] {
            for flat in 0..p0.len() {
                let mut pp = p0.clone();
                let mut pm = p0.clone();
                pp.as_slice_mut().unwrap()[flat] += eps;
                pm.as_slice_mut().unwrap()[flat] -= eps;
                let (fp, fm) = match pi {
                    0 => (eval(&pp, &w0, &b0), eval(&pm, &w0, &b0)),
                    1 => (eval(&x0, &pp, &b0), eval(&x0, &pm, &b0)),
                    _ => (eval(&x0, &w0, &pp), eval(&x0, &w0, &pm)),
                };
                let num = (fp - fm) / (2.0 * eps);
                let ana = grads.by_param[&pi].as_slice().unwrap()[flat];
                let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-8);
                assert!(rel < 1e-6, "linear param {pi} flat {flat}");
            }
        }

        // gather + reshape round trip keeps gradients aligned
        let table0 = randn(15, &[5, 3]);
        let mut tape = Tape::new();
        let table = tape.param(0, table0.clone());
        let picked = tape.gather_rows(table, vec![0, 2, 2, 4]);
        let sq = tape.square(picked);
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss);
        let g = &grads.by_param[&0];
        // Row 2 picked twice: gradient 4*v, rows 0 and 4 once: 2*v, rows 1,3 zero.
        let t2 = as2(&table0);
        let g2 = as2(g);
        for c in 0..3 {
            assert!((g2[(0, c)] - 2.0 * t2[(0, c)]).abs() < 1e-12);
            assert!((g2[(2, c)] - 4.0 * t2[(2, c)]).abs() < 1e-12);
            assert!((g2[(4, c)] - 2.0 * t2[(4, c)]).abs() < 1e-12);
            assert!(g2[(1, c)].abs() == 0.0 && g2[(3, c)].abs() == 0.0);
        }
    }

    #[test]
    fn vec_reshape_round_trip() {
        let x0 = randn(16, &[2, 3, 4, 5]);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(x0.clone());
        let v = tape.nchw_to_vecs(x);
        assert_eq!(tape.shape(v), &[2 * 4 * 5, 3]);
        let back = tape.vecs_to_nchw(v, [2, 3, 4, 5]);
        assert_eq!(tape.value(back), &x0);
    }

    #[test]
    fn constants_receive_no_gradient_work() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(randn(17, &[4]));
        let b = tape.constant(randn(18, &[4]));
        let y = tape.mul(a, b);
        let loss = tape.sum_all(y);
        assert!(!tape.nodes[loss].needs_grad);
        let grads = tape.backward(loss);
        assert!(grads.by_param.is_empty());
    }

    #[test]
    fn concat_and_add_chan_gradients() {
        let a0 = randn(19, &[2, 2, 3, 3]);
        let b0 = randn(20, &[2, 3, 3, 3]);
        let bias0 = randn(21, &[2, 5]);
        let mut tape = Tape::new();
        let a = tape.param(0, a0.clone());
        let b = tape.param(1, b0.clone());
        let bias = tape.param(2, bias0.clone());
        let cat = tape.concat_c(a, b);
        let shifted = tape.add_chan(cat, bias);
        let sq = tape.square(shifted);
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss);
        let eps = 1e-6;
        let eval = |aa: &ArrayD<f64>, ba: &ArrayD<f64>, ca: &ArrayD<f64>| {
            let mut t = Tape::new();
            let a = t.constant(aa.clone());
            let b = t.constant(ba.clone());
            let c = t.constant(ca.clone());
            let cat = t.concat_c(a, b);
            let sh = t.add_chan(cat, c);
            let sq = t.square(sh);
            let l = t.sum_all(sq);
            t.scalar(l)
        };
        for (pi, p0) in [(0usize, &a0), (1, &b0), (2, &bias0)] {
            for flat in (0..p0.len()).step_by(3) {
                let mut pp = p0.clone();
                let mut pm = p0.clone();
                pp.as_slice_mut().unwrap()[flat] += eps;
                pm.as_slice_mut().unwrap()[flat] -= eps;
                let (fp, fm) = match pi {
                    0 => (eval(&pp, &b0, &bias0), eval(&pm, &b0, &bias0)),
                    1 => (eval(&a0, &pp, &bias0), eval(&a0, &pm, &bias0)),
                    _ => (eval(&a0, &b0, &pp), eval(&a0, &b0, &pm)),
                };
                let num = (fp - fm) / (2.0 * eps);
                let ana = grads.by_param[&pi].as_slice().unwrap()[flat];
                let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-8);
                assert!(rel < 1e-6, "param {pi} flat {flat}");
            }
        }
    }

    #[test]
    fn quadratic_loss_gradient_is_exact() {
        // d/dx sum((x - c)^2) = 2(x - c), exact up to roundoff in f64.
        let x0 = randn(22, &[8]);
        let c0 = randn(23, &[8]);
        let mut tape = Tape::new();
        let x = tape.param(0, x0.clone());
        let c = tape.constant(c0.clone());
        let loss = tape.sse(x, c);
        let grads = tape.backward(loss);
        let g = &grads.by_param[&0];
        for i in 0..8 {
            let expect = 2.0 * (x0.as_slice().unwrap()[i] - c0.as_slice().unwrap()[i]);
            assert!((g.as_slice().unwrap()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn scalar_loss_required() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(0, randn(24, &[2, 2]));
        let y = tape.square(x);
        let l = tape.sum_all(y);
        assert_eq!(tape.value(l).ndim(), 0);
        assert!((tape.scalar(l)
            - tape.value(x).iter().map(|v| v * v).sum::<f64>())
        .abs()
            < 1e-12);
        let _ = IxDyn(&[]);
    }
}
