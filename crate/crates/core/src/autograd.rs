//! Tape-based reverse-mode differentiation over `f64` n-d arrays.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and returns the
//! gradient of that scalar with respect to every node that was built from a
//! leaf marked `requires_grad`. The op set is deliberately narrow: exactly what
//! the codec, the denoiser and the attention refinement need.
//!
//! Shape mismatches inside the graph are programming errors and panic; public
//! entry points validate user-provided shapes before building a graph.

use std::cell::RefCell;
use std::sync::Arc;

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayD, ArrayView2, ArrayViewMut2, IxDyn};

pub type Array = ArrayD<f64>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Silu(usize),
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    AddChannel(usize, usize),
    ConcatChannels(usize, usize),
    Upsample2x(usize),
    ToTokens(usize),
    FromTokens(usize),
    Bmm {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    SoftmaxLast(usize),
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Narrow0 {
        a: usize,
        start: usize,
    },
    Concat0(Vec<usize>),
    Column {
        a: usize,
        batch: usize,
        col: usize,
    },
    SpatialFilter {
        a: usize,
        height: usize,
        width: usize,
        kernel: Arc<Vec<f64>>,
    },
    Max(usize),
    Stack(Vec<usize>),
}

struct Node {
    value: Arc<Array>,
    op: Op,
    requires_grad: bool,
}

/// Operation tape. One graph per forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Array> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }
}

fn standard(value: Array) -> Array {
    if value.is_standard_layout() {
        value
    } else {
        value.as_standard_layout().into_owned()
    }
}

fn from_vec(shape: &[usize], data: Vec<f64>) -> Array {
    Array::from_shape_vec(IxDyn(shape), data).expect("shape/data length agree")
}

fn sl(a: &Array) -> &[f64] {
    a.as_slice().expect("graph values are contiguous")
}

fn dims4(a: &Array) -> (usize, usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 4, "expected rank-4 tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

fn dims3(a: &Array) -> (usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 3, "expected rank-3 tensor, got {s:?}");
    (s[0], s[1], s[2])
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Half-sample symmetric index folding: `.. b a | a b c .. | c b ..`.
pub(crate) fn fold_index(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Leaf sharing an existing buffer.
    pub fn leaf_shared(&self, value: Arc<Array>, requires_grad: bool) -> Var<'_> {
        let value = if value.is_standard_layout() {
            value
        } else {
            Arc::new(standard((*value).clone()))
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub fn leaf(&self, value: Array, requires_grad: bool) -> Var<'_> {
        self.push(standard(value), Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Array) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn variable(&self, value: Array) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(from_vec(&[], vec![value]))
    }

    fn value_of(&self, id: usize) -> Arc<Array> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse pass from a single-element node.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let n = loss.id + 1;
        let mut grads: Vec<Option<Array>> = vec![None; nodes.len()];
        assert_eq!(
            nodes[loss.id].value.len(),
            1,
            "backward requires a single-element output"
        );
        if !nodes[loss.id].requires_grad {
            return Gradients { grads };
        }
        grads[loss.id] = Some(Array::ones(nodes[loss.id].value.raw_dim()));

        for id in (0..n).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            let mut acc = |target: usize, delta: Array| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(existing) => *existing += &delta,
                    slot @ None => *slot = Some(delta),
                }
            };
            let val = |i: usize| -> &Array { &nodes[i].value };
            let req = |i: usize| nodes[i].requires_grad;

            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, -g);
                }
                Op::Mul(a, b) => {
                    if req(*a) {
                        acc(*a, &g * val(*b));
                    }
                    if req(*b) {
                        acc(*b, &g * val(*a));
                    }
                }
                Op::Scale(a, c) => acc(*a, g * *c),
                Op::AddScalar(a) => acc(*a, g),
                Op::Silu(a) => {
                    let x = val(*a);
                    let d = ndarray::Zip::from(x).and(&g).map_collect(|&x, &g| {
                        let s = sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    });
                    acc(*a, d);
                }
                Op::Sum(a) => {
                    let gv = g.iter().next().copied().unwrap_or(0.0);
                    acc(*a, Array::from_elem(val(*a).raw_dim(), gv));
                }
                Op::Mean(a) => {
                    let x = val(*a);
                    let gv = g.iter().next().copied().unwrap_or(0.0) / x.len() as f64;
                    acc(*a, Array::from_elem(x.raw_dim(), gv));
                }
                Op::Reshape(a) => {
                    let shape = val(*a).shape().to_vec();
                    acc(*a, from_vec(&shape, g.into_raw_vec_and_offset().0));
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                } => {
                    let (gx, gw, gb) = conv2d_backward(
                        val(*x),
                        val(*w),
                        &g,
                        *stride,
                        *pad,
                        req(*x),
                        req(*w),
                        b.map(req).unwrap_or(false),
                    );
                    if let Some(gx) = gx {
                        acc(*x, gx);
                    }
                    if let Some(gw) = gw {
                        acc(*w, gw);
                    }
                    if let (Some(b), Some(gb)) = (b, gb) {
                        acc(*b, gb);
                    }
                }
                Op::Linear { x, w, b } => {
                    let xv = val(*x);
                    let wv = val(*w);
                    let (m, k) = (xv.shape()[0], xv.shape()[1]);
                    let nout = wv.shape()[1];
                    let g2 = ArrayView2::from_shape((m, nout), sl(&g)).unwrap();
                    if req(*x) {
                        let w2 = ArrayView2::from_shape((k, nout), sl(wv)).unwrap();
                        acc(*x, g2.dot(&w2.t()).into_dyn());
                    }
                    if req(*w) {
                        let x2 = ArrayView2::from_shape((m, k), sl(xv)).unwrap();
                        acc(*w, x2.t().dot(&g2).into_dyn());
                    }
                    if let Some(b) = b {
                        if req(*b) {
                            acc(*b, g2.sum_axis(ndarray::Axis(0)).into_dyn());
                        }
                    }
                }
                Op::AddChannel(x, v) => {
                    acc(*x, g.clone());
                    if req(*v) {
                        let (bn, c, h, w) = dims4(&g);
                        let gs = sl(&g);
                        let hw = h * w;
                        let mut out = vec![0.0; bn * c];
                        for (i, o) in out.iter_mut().enumerate() {
                            *o = gs[i * hw..(i + 1) * hw].iter().sum();
                        }
                        acc(*v, from_vec(&[bn, c], out));
                    }
                }
                Op::ConcatChannels(a, b) => {
                    let (bn, c, h, w) = dims4(&g);
                    let c1 = val(*a).shape()[1];
                    let c2 = c - c1;
                    let hw = h * w;
                    let gs = sl(&g);
                    let mut ga = Vec::with_capacity(bn * c1 * hw);
                    let mut gb = Vec::with_capacity(bn * c2 * hw);
                    for bi in 0..bn {
                        let base = bi * c * hw;
                        ga.extend_from_slice(&gs[base..base + c1 * hw]);
                        gb.extend_from_slice(&gs[base + c1 * hw..base + c * hw]);
                    }
                    acc(*a, from_vec(&[bn, c1, h, w], ga));
                    acc(*b, from_vec(&[bn, c2, h, w], gb));
                }
                Op::Upsample2x(a) => {
                    let (bn, c, h, w) = dims4(val(*a));
                    let gs = sl(&g);
                    let mut out = vec![0.0; bn * c * h * w];
                    let w2 = 2 * w;
                    for p in 0..bn * c {
                        for y in 0..2 * h {
                            for x in 0..w2 {
                                out[p * h * w + (y / 2) * w + x / 2] +=
                                    gs[p * 4 * h * w + y * w2 + x];
                            }
                        }
                    }
                    acc(*a, from_vec(&[bn, c, h, w], out));
                }
                Op::ToTokens(a) => {
                    let (bn, c, h, w) = dims4(val(*a));
                    acc(*a, tokens_to_channels(sl(&g), bn, c, h, w));
                }
                Op::FromTokens(a) => {
                    let (bn, c, h, w) = dims4(&g);
                    acc(*a, channels_to_tokens(sl(&g), bn, c, h, w));
                }
                Op::Bmm { a, b, trans_b } => {
                    let (ga, gb) = bmm_backward(val(*a), val(*b), &g, *trans_b, req(*a), req(*b));
                    if let Some(ga) = ga {
                        acc(*a, ga);
                    }
                    if let Some(gb) = gb {
                        acc(*b, gb);
                    }
                }
                Op::SoftmaxLast(a) => {
                    let y = &node.value;
                    let n = *y.shape().last().unwrap();
                    let ys = sl(y);
                    let gs = sl(&g);
                    let mut out = vec![0.0; ys.len()];
                    for r in 0..ys.len() / n.max(1) {
                        let row = r * n..(r + 1) * n;
                        let dot: f64 = ys[row.clone()]
                            .iter()
                            .zip(&gs[row.clone()])
                            .map(|(y, g)| y * g)
                            .sum();
                        for i in row {
                            out[i] = ys[i] * (gs[i] - dot);
                        }
                    }
                    acc(*a, from_vec(y.shape(), out));
                }
                Op::Embedding { table, ids } => {
                    let t = val(*table);
                    let d = t.shape()[1];
                    let mut out = vec![0.0; t.len()];
                    let gs = sl(&g);
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            out[id * d + j] += gs[row * d + j];
                        }
                    }
                    acc(*table, from_vec(t.shape(), out));
                }
                Op::Narrow0 { a, start } => {
                    let av = val(*a);
                    let inner: usize = av.shape()[1..].iter().product();
                    let mut out = vec![0.0; av.len()];
                    out[start * inner..start * inner + g.len()].copy_from_slice(sl(&g));
                    acc(*a, from_vec(av.shape(), out));
                }
                Op::Concat0(parts) => {
                    let gs = sl(&g);
                    let mut offset = 0;
                    for &p in parts {
                        let pv = val(p);
                        let len = pv.len();
                        if req(p) {
                            acc(p, from_vec(pv.shape(), gs[offset..offset + len].to_vec()));
                        }
                        offset += len;
                    }
                }
                Op::Column { a, batch, col } => {
                    let av = val(*a);
                    let (_, m, n) = dims3(av);
                    let mut out = vec![0.0; av.len()];
                    for (r, gv) in sl(&g).iter().enumerate() {
                        out[batch * m * n + r * n + col] = *gv;
                    }
                    acc(*a, from_vec(av.shape(), out));
                }
                Op::SpatialFilter {
                    a,
                    height,
                    width,
                    kernel,
                } => {
                    let out = spatial_filter(sl(&g), *height, *width, kernel, true);
                    acc(*a, from_vec(val(*a).shape(), out));
                }
                Op::Max(a) => {
                    let av = val(*a);
                    let idx = argmax(sl(av));
                    let mut out = vec![0.0; av.len()];
                    out[idx] = g.iter().next().copied().unwrap_or(0.0);
                    acc(*a, from_vec(av.shape(), out));
                }
                Op::Stack(parts) => {
                    for (i, &p) in parts.iter().enumerate() {
                        let shape = val(p).shape().to_vec();
                        acc(p, from_vec(&shape, vec![g[[i]]]));
                    }
                }
            }
        }
        Gradients { grads }
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn channels_to_tokens(x: &[f64], bn: usize, c: usize, h: usize, w: usize) -> Array {
    let hw = h * w;
    let mut out = vec![0.0; x.len()];
    for b in 0..bn {
        for ch in 0..c {
            for p in 0..hw {
                out[b * hw * c + p * c + ch] = x[b * c * hw + ch * hw + p];
            }
        }
    }
    from_vec(&[bn, hw, c], out)
}

fn tokens_to_channels(x: &[f64], bn: usize, c: usize, h: usize, w: usize) -> Array {
    let hw = h * w;
    let mut out = vec![0.0; x.len()];
    for b in 0..bn {
        for p in 0..hw {
            for ch in 0..c {
                out[b * c * hw + ch * hw + p] = x[b * hw * c + p * c + ch];
            }
        }
    }
    from_vec(&[bn, c, h, w], out)
}

/// Separable-free 2D filtering with symmetric boundary folding. With
/// `transpose` the adjoint operator is applied (used for the reverse pass).
pub(crate) fn spatial_filter(
    input: &[f64],
    height: usize,
    width: usize,
    kernel: &[f64],
    transpose: bool,
) -> Vec<f64> {
    let k = (kernel.len() as f64).sqrt() as usize;
    let r = (k / 2) as isize;
    let mut out = vec![0.0; height * width];
    for y in 0..height {
        for x in 0..width {
            for dy in -r..=r {
                let sy = fold_index(y as isize + dy, height);
                for dx in -r..=r {
                    let sx = fold_index(x as isize + dx, width);
                    let wgt = kernel[((dy + r) as usize) * k + (dx + r) as usize];
                    if transpose {
                        out[sy * width + sx] += wgt * input[y * width + x];
                    } else {
                        out[y * width + x] += wgt * input[sy * width + sx];
                    }
                }
            }
        }
    }
    out
}

fn conv_out(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    col: &mut [f64],
) {
    let hwo = ho * wo;
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut col[row * hwo..(row + 1) * hwo];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        dst[oy * wo..(oy + 1) * wo].fill(0.0);
                        continue;
                    }
                    let src = &x[ch * h * w + iy as usize * w..];
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        dst[oy * wo + ox] = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    col: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    x: &mut [f64],
) {
    let hwo = ho * wo;
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &col[row * hwo..(row + 1) * hwo];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[ch * h * w + iy as usize * w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_forward(x: &Array, w: &Array, b: Option<&Array>, stride: usize, pad: usize) -> Array {
    let (bn, c, h, wd) = dims4(x);
    let (o, ci, k, k2) = dims4(w);
    assert_eq!(c, ci, "conv2d channel mismatch");
    assert_eq!(k, k2, "conv2d expects square kernels");
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(wd, k, stride, pad);
    let ckk = c * k * k;
    let hwo = ho * wo;
    let direct = k == 1 && stride == 1 && pad == 0;
    let mut col = if direct { Vec::new() } else { vec![0.0; ckk * hwo] };
    let mut out = vec![0.0; bn * o * hwo];
    let xs = sl(x);
    let wv = ArrayView2::from_shape((o, ckk), sl(w)).unwrap();
    for bi in 0..bn {
        let xb = &xs[bi * c * h * wd..(bi + 1) * c * h * wd];
        let colv = if direct {
            ArrayView2::from_shape((ckk, hwo), xb).unwrap()
        } else {
            im2col(xb, c, h, wd, k, stride, pad, ho, wo, &mut col);
            ArrayView2::from_shape((ckk, hwo), &col[..]).unwrap()
        };
        let mut ov =
            ArrayViewMut2::from_shape((o, hwo), &mut out[bi * o * hwo..(bi + 1) * o * hwo])
                .unwrap();
        general_mat_mul(1.0, &wv, &colv, 0.0, &mut ov);
        if let Some(b) = b {
            for (oc, bias) in sl(b).iter().enumerate() {
                ov.row_mut(oc).mapv_inplace(|v| v + bias);
            }
        }
    }
    from_vec(&[bn, o, ho, wo], out)
}

type ConvGrads = (Option<Array>, Option<Array>, Option<Array>);

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    x: &Array,
    w: &Array,
    g: &Array,
    stride: usize,
    pad: usize,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> ConvGrads {
    let (bn, c, h, wd) = dims4(x);
    let (o, _, k, _) = dims4(w);
    let (_, _, ho, wo) = dims4(g);
    let ckk = c * k * k;
    let hwo = ho * wo;
    let direct = k == 1 && stride == 1 && pad == 0;
    let xs = sl(x);
    let gs = sl(g);
    let wv = ArrayView2::from_shape((o, ckk), sl(w)).unwrap();
    let mut gx = need_x.then(|| vec![0.0; x.len()]);
    let mut gw = need_w.then(|| ndarray::Array2::<f64>::zeros((o, ckk)));
    let mut gb = need_b.then(|| vec![0.0; o]);
    let mut col = vec![0.0; ckk * hwo];
    let mut gcol = ndarray::Array2::<f64>::zeros((ckk, hwo));
    for bi in 0..bn {
        let gout = ArrayView2::from_shape((o, hwo), &gs[bi * o * hwo..(bi + 1) * o * hwo]).unwrap();
        if let Some(gw) = gw.as_mut() {
            let xb = &xs[bi * c * h * wd..(bi + 1) * c * h * wd];
            let colv = if direct {
                ArrayView2::from_shape((ckk, hwo), xb).unwrap()
            } else {
                im2col(xb, c, h, wd, k, stride, pad, ho, wo, &mut col);
                ArrayView2::from_shape((ckk, hwo), &col[..]).unwrap()
            };
            general_mat_mul(1.0, &gout, &colv.t(), 1.0, gw);
        }
        if let Some(gb) = gb.as_mut() {
            for (oc, acc) in gb.iter_mut().enumerate() {
                *acc += gout.row(oc).sum();
            }
        }
        if let Some(gx) = gx.as_mut() {
            general_mat_mul(1.0, &wv.t(), &gout, 0.0, &mut gcol);
            let dst = &mut gx[bi * c * h * wd..(bi + 1) * c * h * wd];
            let gc = gcol.as_slice().unwrap();
            if direct {
                for (d, s) in dst.iter_mut().zip(gc) {
                    *d += s;
                }
            } else {
                col2im(gc, c, h, wd, k, stride, pad, ho, wo, dst);
            }
        }
    }
    (
        gx.map(|v| from_vec(x.shape(), v)),
        gw.map(|v| v.into_shape_with_order(IxDyn(w.shape())).unwrap()),
        gb.map(|v| from_vec(&[o], v)),
    )
}

fn bmm_forward(a: &Array, b: &Array, trans_b: bool) -> Array {
    let (bn, m, k) = dims3(a);
    let (bb, r, s) = dims3(b);
    assert_eq!(bn, bb, "bmm batch mismatch");
    let (kb, n) = if trans_b { (s, r) } else { (r, s) };
    assert_eq!(k, kb, "bmm inner dimension mismatch");
    let mut out = vec![0.0; bn * m * n];
    let (as_, bs) = (sl(a), sl(b));
    for i in 0..bn {
        let av = ArrayView2::from_shape((m, k), &as_[i * m * k..(i + 1) * m * k]).unwrap();
        let bv = ArrayView2::from_shape((r, s), &bs[i * r * s..(i + 1) * r * s]).unwrap();
        let mut ov =
            ArrayViewMut2::from_shape((m, n), &mut out[i * m * n..(i + 1) * m * n]).unwrap();
        if trans_b {
            general_mat_mul(1.0, &av, &bv.t(), 0.0, &mut ov);
        } else {
            general_mat_mul(1.0, &av, &bv, 0.0, &mut ov);
        }
    }
    from_vec(&[bn, m, n], out)
}

fn bmm_backward(
    a: &Array,
    b: &Array,
    g: &Array,
    trans_b: bool,
    need_a: bool,
    need_b: bool,
) -> (Option<Array>, Option<Array>) {
    let (bn, m, k) = dims3(a);
    let (_, r, s) = dims3(b);
    let n = g.shape()[2];
    let (as_, bs, gs) = (sl(a), sl(b), sl(g));
    let mut ga = need_a.then(|| vec![0.0; a.len()]);
    let mut gb = need_b.then(|| vec![0.0; b.len()]);
    for i in 0..bn {
        let av = ArrayView2::from_shape((m, k), &as_[i * m * k..(i + 1) * m * k]).unwrap();
        let bv = ArrayView2::from_shape((r, s), &bs[i * r * s..(i + 1) * r * s]).unwrap();
        let gv = ArrayView2::from_shape((m, n), &gs[i * m * n..(i + 1) * m * n]).unwrap();
        if let Some(ga) = ga.as_mut() {
            let mut dst =
                ArrayViewMut2::from_shape((m, k), &mut ga[i * m * k..(i + 1) * m * k]).unwrap();
            if trans_b {
                general_mat_mul(1.0, &gv, &bv, 0.0, &mut dst);
            } else {
                general_mat_mul(1.0, &gv, &bv.t(), 0.0, &mut dst);
            }
        }
        if let Some(gb) = gb.as_mut() {
            let mut dst =
                ArrayViewMut2::from_shape((r, s), &mut gb[i * r * s..(i + 1) * r * s]).unwrap();
            if trans_b {
                general_mat_mul(1.0, &gv.t(), &av, 0.0, &mut dst);
            } else {
                general_mat_mul(1.0, &av.t(), &gv, 0.0, &mut dst);
            }
        }
    }
    (
        ga.map(|v| from_vec(a.shape(), v)),
        gb.map(|v| from_vec(b.shape(), v)),
    )
}

fn softmax_rows(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(n).zip(out.chunks_mut(n)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Arc<Array> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Value of a single-element node.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on a tensor with {} elements", v.len());
        v.iter().next().copied().unwrap()
    }

    fn unary(&self, value: Array, op: Op) -> Var<'g> {
        let rg = self.graph.needs(&[self.id]);
        self.graph.push(value, op, rg)
    }

    fn binary(&self, other: Var<'g>, value: Array, op: Op) -> Var<'g> {
        let rg = self.graph.needs(&[self.id, other.id]);
        self.graph.push(value, op, rg)
    }

    fn same_shape(&self, other: &Var<'g>, what: &str) -> (Arc<Array>, Arc<Array>) {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.shape(), b.shape(), "{what}: shape mismatch");
        (a, b)
    }

    pub fn add(&self, other: Var<'g>) -> Var<'g> {
        let (a, b) = self.same_shape(&other, "add");
        self.binary(other, &*a + &*b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'g>) -> Var<'g> {
        let (a, b) = self.same_shape(&other, "sub");
        self.binary(other, &*a - &*b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'g>) -> Var<'g> {
        let (a, b) = self.same_shape(&other, "mul");
        self.binary(other, &*a * &*b, Op::Mul(self.id, other.id))
    }

    pub fn scale(&self, c: f64) -> Var<'g> {
        let a = self.value();
        self.unary(&*a * c, Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'g> {
        let a = self.value();
        self.unary(&*a + c, Op::AddScalar(self.id))
    }

    pub fn silu(&self) -> Var<'g> {
        let a = self.value();
        self.unary(a.mapv(|x| x * sigmoid(x)), Op::Silu(self.id))
    }

    pub fn sum(&self) -> Var<'g> {
        let a = self.value();
        self.unary(from_vec(&[], vec![a.sum()]), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'g> {
        let a = self.value();
        let m = a.sum() / a.len() as f64;
        self.unary(from_vec(&[], vec![m]), Op::Mean(self.id))
    }

    /// Mean of squared differences.
    pub fn mse(&self, target: Var<'g>) -> Var<'g> {
        let d = self.sub(target);
        d.mul(d).mean()
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'g> {
        let a = self.value();
        assert_eq!(
            shape.iter().product::<usize>(),
            a.len(),
            "reshape to {shape:?} from {:?}",
            a.shape()
        );
        self.unary(from_vec(shape, sl(&a).to_vec()), Op::Reshape(self.id))
    }

    /// 2D convolution, NCHW input and OIHW weights.
    pub fn conv2d(&self, w: Var<'g>, b: Option<Var<'g>>, stride: usize, pad: usize) -> Var<'g> {
        let xv = self.value();
        let wv = w.value();
        let bv = b.map(|b| b.value());
        let out = conv2d_forward(&xv, &wv, bv.as_deref(), stride, pad);
        let mut ids = vec![self.id, w.id];
        if let Some(b) = b {
            ids.push(b.id);
        }
        let rg = self.graph.needs(&ids);
        self.graph.push(
            out,
            Op::Conv2d {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
                stride,
                pad,
            },
            rg,
        )
    }

    /// `x [M, K] · w [K, N] + b [N]`.
    pub fn linear(&self, w: Var<'g>, b: Option<Var<'g>>) -> Var<'g> {
        let xv = self.value();
        let wv = w.value();
        assert_eq!(xv.ndim(), 2, "linear expects a matrix input");
        let (m, k) = (xv.shape()[0], xv.shape()[1]);
        assert_eq!(wv.shape()[0], k, "linear inner dimension mismatch");
        let n = wv.shape()[1];
        let x2 = ArrayView2::from_shape((m, k), sl(&xv)).unwrap();
        let w2 = ArrayView2::from_shape((k, n), sl(&wv)).unwrap();
        let mut out = x2.dot(&w2);
        let mut ids = vec![self.id, w.id];
        if let Some(b) = b {
            let bv = b.value();
            out += &ArrayView2::from_shape((1, n), sl(&bv)).unwrap();
            ids.push(b.id);
        }
        let rg = self.graph.needs(&ids);
        self.graph.push(
            out.into_dyn(),
            Op::Linear {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
            },
            rg,
        )
    }

    /// Broadcast-add a `[B, C]` vector over the spatial axes of `[B, C, H, W]`.
    pub fn add_channel(&self, v: Var<'g>) -> Var<'g> {
        let xv = self.value();
        let vv = v.value();
        let (bn, c, h, w) = dims4(&xv);
        assert_eq!(vv.shape(), &[bn, c], "add_channel shape mismatch");
        let mut out = sl(&xv).to_vec();
        let hw = h * w;
        for (i, add) in sl(&vv).iter().enumerate() {
            for o in &mut out[i * hw..(i + 1) * hw] {
                *o += add;
            }
        }
        self.binary(v, from_vec(&[bn, c, h, w], out), Op::AddChannel(self.id, v.id))
    }

    pub fn concat_channels(&self, other: Var<'g>) -> Var<'g> {
        let a = self.value();
        let b = other.value();
        let (bn, c1, h, w) = dims4(&a);
        let (bn2, c2, h2, w2) = dims4(&b);
        assert_eq!((bn, h, w), (bn2, h2, w2), "concat_channels mismatch");
        let hw = h * w;
        let mut out = Vec::with_capacity(a.len() + b.len());
        for bi in 0..bn {
            out.extend_from_slice(&sl(&a)[bi * c1 * hw..(bi + 1) * c1 * hw]);
            out.extend_from_slice(&sl(&b)[bi * c2 * hw..(bi + 1) * c2 * hw]);
        }
        self.binary(
            other,
            from_vec(&[bn, c1 + c2, h, w], out),
            Op::ConcatChannels(self.id, other.id),
        )
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2x(&self) -> Var<'g> {
        let a = self.value();
        let (bn, c, h, w) = dims4(&a);
        let xs = sl(&a);
        let mut out = vec![0.0; a.len() * 4];
        for p in 0..bn * c {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    out[p * 4 * h * w + y * 2 * w + x] = xs[p * h * w + (y / 2) * w + x / 2];
                }
            }
        }
        self.unary(from_vec(&[bn, c, 2 * h, 2 * w], out), Op::Upsample2x(self.id))
    }

    /// `[B, C, H, W] -> [B, H*W, C]`.
    pub fn to_tokens(&self) -> Var<'g> {
        let a = self.value();
        let (bn, c, h, w) = dims4(&a);
        self.unary(channels_to_tokens(sl(&a), bn, c, h, w), Op::ToTokens(self.id))
    }

    /// `[B, H*W, C] -> [B, C, H, W]`.
    pub fn from_tokens(&self, h: usize, w: usize) -> Var<'g> {
        let a = self.value();
        let (bn, hw, c) = dims3(&a);
        assert_eq!(hw, h * w, "from_tokens spatial mismatch");
        self.unary(tokens_to_channels(sl(&a), bn, c, h, w), Op::FromTokens(self.id))
    }

    /// Batched matmul `[B, M, K] · [B, K, N]`, or `· [B, N, K]ᵀ` with `trans_b`.
    pub fn bmm(&self, other: Var<'g>, trans_b: bool) -> Var<'g> {
        let out = bmm_forward(&self.value(), &other.value(), trans_b);
        self.binary(
            other,
            out,
            Op::Bmm {
                a: self.id,
                b: other.id,
                trans_b,
            },
        )
    }

    /// Softmax over the last axis. Rows that are entirely `-inf` map to zeros.
    pub fn softmax_last(&self) -> Var<'g> {
        let a = self.value();
        let n = *a.shape().last().expect("softmax on a scalar");
        let out = softmax_rows(sl(&a), n);
        self.unary(from_vec(a.shape(), out), Op::SoftmaxLast(self.id))
    }

    /// Gather rows of a `[V, D]` table.
    pub fn embedding(&self, ids: &[usize]) -> Var<'g> {
        let t = self.value();
        let d = t.shape()[1];
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&sl(&t)[id * d..(id + 1) * d]);
        }
        self.unary(
            from_vec(&[ids.len(), d], out),
            Op::Embedding {
                table: self.id,
                ids: ids.to_vec(),
            },
        )
    }

    /// Slice `len` entries of the leading axis starting at `start`.
    pub fn narrow0(&self, start: usize, len: usize) -> Var<'g> {
        let a = self.value();
        assert!(start + len <= a.shape()[0], "narrow0 out of range");
        let inner: usize = a.shape()[1..].iter().product();
        let mut shape = a.shape().to_vec();
        shape[0] = len;
        let data = sl(&a)[start * inner..(start + len) * inner].to_vec();
        self.unary(from_vec(&shape, data), Op::Narrow0 { a: self.id, start })
    }

    /// Concatenate along the leading axis.
    pub fn concat0(parts: &[Var<'g>]) -> Var<'g> {
        let graph = parts[0].graph;
        let first = parts[0].value();
        let mut shape = first.shape().to_vec();
        shape[0] = 0;
        let mut data = Vec::new();
        for p in parts {
            let v = p.value();
            assert_eq!(v.shape()[1..], first.shape()[1..], "concat0 trailing shape");
            shape[0] += v.shape()[0];
            data.extend_from_slice(sl(&v));
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = graph.needs(&ids);
        graph.push(from_vec(&shape, data), Op::Concat0(ids), rg)
    }

    /// Column `col` of batch entry `batch` of a `[B, M, N]` tensor, as `[M]`.
    pub fn column(&self, batch: usize, col: usize) -> Var<'g> {
        let a = self.value();
        let (bn, m, n) = dims3(&a);
        assert!(batch < bn && col < n, "column index out of range");
        let xs = sl(&a);
        let data = (0..m).map(|r| xs[batch * m * n + r * n + col]).collect();
        self.unary(
            from_vec(&[m], data),
            Op::Column {
                a: self.id,
                batch,
                col,
            },
        )
    }

    /// Filter a flattened `height x width` map with a square odd-sized kernel,
    /// folding indices symmetrically at the borders.
    pub fn spatial_filter(&self, height: usize, width: usize, kernel: Arc<Vec<f64>>) -> Var<'g> {
        let a = self.value();
        assert_eq!(a.len(), height * width, "spatial_filter size mismatch");
        let out = spatial_filter(sl(&a), height, width, &kernel, false);
        self.unary(
            from_vec(a.shape(), out),
            Op::SpatialFilter {
                a: self.id,
                height,
                width,
                kernel,
            },
        )
    }

    /// Maximum element, as a scalar.
    pub fn max(&self) -> Var<'g> {
        let a = self.value();
        let m = sl(&a)[argmax(sl(&a))];
        self.unary(from_vec(&[], vec![m]), Op::Max(self.id))
    }

    /// Stack single-element nodes into a vector.
    pub fn stack(parts: &[Var<'g>]) -> Var<'g> {
        let graph = parts[0].graph;
        let data: Vec<f64> = parts.iter().map(|p| p.item()).collect();
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = graph.needs(&ids);
        graph.push(from_vec(&[parts.len()], data), Op::Stack(ids), rg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Array {
        let n = shape.iter().product();
        from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of d(f)/d(input) for a scalar-valued graph builder.
    fn check_grad<F>(input: Array, f: F)
    where
        F: for<'g> Fn(&'g Graph, Var<'g>) -> Var<'g>,
    {
        let g = Graph::new();
        let x = g.variable(input.clone());
        let y = f(&g, x);
        let grads = g.backward(y);
        let analytic = grads.get(x).cloned().unwrap_or_else(|| Array::zeros(input.raw_dim()));
        let h = 1e-6;
        for i in 0..input.len() {
            let mut plus = input.clone();
            plus.as_slice_mut().unwrap()[i] += h;
            let mut minus = input.clone();
            minus.as_slice_mut().unwrap()[i] -= h;
            let gp = Graph::new();
            let fp = f(&gp, gp.constant(plus)).item();
            let gm = Graph::new();
            let fm = f(&gm, gm.constant(minus)).item();
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[i];
            assert!(
                (a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                "component {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let wt = random(&[1, 3, 3, 3], &mut rng);
        check_grad(random(&[2, 2, 5, 5], &mut rng), |g, x| {
            let wv = g.constant(w.clone());
            let bv = g.constant(b.clone());
            let y = x.conv2d(wv, Some(bv), 2, 1);
            let t = g.constant(Array::ones(IxDyn(&[2, 3, 3, 3])) * 0.3);
            y.mul(y).add(t).sum()
        });
        let x = random(&[2, 2, 5, 5], &mut rng);
        check_grad(w.clone(), |g, wv| {
            let xv = g.constant(x.clone());
            let y = xv.conv2d(wv, None, 1, 1);
            y.mul(y).mean()
        });
        check_grad(random(&[1, 3, 4, 4], &mut rng), |g, x| {
            let y = x.conv2d(g.constant(wt.clone()), None, 1, 0);
            y.silu().sum()
        });
    }

    #[test]
    fn attention_ops_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let k = random(&[2, 3, 4], &mut rng);
        check_grad(random(&[2, 5, 4], &mut rng), |g, q| {
            let kv = g.constant(k.clone());
            let logits = q.bmm(kv, true).scale(0.5);
            let attn = logits.softmax_last();
            let out = attn.bmm(kv, false);
            out.mul(out).sum()
        });
        check_grad(random(&[2, 3, 4], &mut rng), |g, kv| {
            let q = g.constant(Array::ones(IxDyn(&[2, 5, 4])));
            q.bmm(kv, true).softmax_last().column(1, 2).max()
        });
    }

    #[test]
    fn layout_ops_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let other = random(&[2, 1, 2, 2], &mut rng);
        let weights = random(&[2, 3, 4, 4], &mut rng);
        check_grad(random(&[2, 2, 2, 2], &mut rng), |g, x| {
            let cat = x.concat_channels(g.constant(other.clone()));
            let up = cat.upsample2x();
            let tok = up.to_tokens().from_tokens(4, 4);
            tok.mul(g.constant(weights.clone())).sum()
        });
        check_grad(random(&[3, 2], &mut rng), |g, v| {
            let x = g.constant(Array::ones(IxDyn(&[3, 2, 2, 2])));
            let y = x.add_channel(v);
            y.mul(y).sum()
        });
        check_grad(random(&[4, 3], &mut rng), |g, table| {
            let e = table.embedding(&[0, 2, 2, 1]);
            let w = g.constant(Array::ones(IxDyn(&[3, 2])));
            e.linear(w, None).silu().sum()
        });
    }

    #[test]
    fn filter_and_reductions_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let kernel = Arc::new(vec![0.05, 0.1, 0.05, 0.1, 0.4, 0.1, 0.05, 0.1, 0.05]);
        let weights = random(&[12], &mut rng);
        check_grad(random(&[12], &mut rng), |g, x| {
            let y = x.spatial_filter(3, 4, kernel.clone());
            y.mul(g.constant(weights.clone())).sum()
        });
        check_grad(random(&[4, 3], &mut rng), |_, x| {
            let a = x.narrow0(1, 2).reshape(&[6]).softmax_last().max();
            let b = x.narrow0(0, 1).reshape(&[3]).mean();
            Var::stack(&[a, b]).scale(-1.0).add_scalar(1.0).max()
        });
        check_grad(random(&[2, 3], &mut rng), |_, x| {
            let y = Var::concat0(&[x, x.narrow0(0, 1)]);
            y.mse(y.scale(0.5))
        });
    }

    #[test]
    fn softmax_masks_negative_infinity() {
        let g = Graph::new();
        let x = g.constant(from_vec(&[1, 3], vec![0.0, f64::NEG_INFINITY, 0.0]));
        let y = x.softmax_last().value();
        assert_eq!(y.as_slice().unwrap(), &[0.5, 0.0, 0.5]);
        let all = g.constant(from_vec(&[2], vec![f64::NEG_INFINITY; 2]));
        assert_eq!(all.softmax_last().value().as_slice().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let g = Graph::new();
        let w = g.constant(Array::ones(IxDyn(&[2, 1, 1, 1])));
        let x = g.variable(Array::ones(IxDyn(&[1, 1, 2, 2])));
        let y = x.conv2d(w, None, 1, 0).sum();
        let grads = g.backward(y);
        assert!(grads.get(w).is_none());
        assert_eq!(grads.get(x).unwrap().sum(), 8.0);
    }

    #[test]
    fn fold_index_is_half_sample_symmetric() {
        let folded: Vec<usize> = (-3..7).map(|i| fold_index(i, 4)).collect();
        assert_eq!(folded, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
    }
}
