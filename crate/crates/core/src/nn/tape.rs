//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so the tape is already a topological
//! order and the backward pass is a single reverse sweep. Results whose inputs do
//! not require gradients are stored as constants and keep no saved buffers.

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Silu(Var),
    Relu(Var),
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        cols: Vec<f64>,
    },
    AvgPool2(Var),
    Upsample2(Var),
    ChannelNorm {
        input: Var,
        inv_std: Vec<f64>,
    },
    AddChannel(Var, Var),
    Concat(Var, Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Variance floor of [`Tape::channel_norm`].
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// `c = a * b + beta * c` for row-major operands, with optional transposition of the
/// stored `a` (`[k, m]` when transposed) and `b` (`[n, k]` when transposed).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    // SAFETY: strides describe matrices that lie inside the checked slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Unfolds one `[C, H, W]` image into `[C * 9, H * W]` columns of 3x3 zero-padded patches.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, cols: &mut [f64]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for oy in 0..h {
                    let sy = oy as isize + ky as isize - 1;
                    let out = &mut row[oy * w..(oy + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let sx = ox as isize + kx as isize - 1;
                        *o = if sx < 0 || sx >= w as isize {
                            0.0
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, x: &mut [f64]) {
    let hw = h * w;
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for oy in 0..h {
                    let sy = oy as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut x[ci * hw + sy as usize * w..][..w];
                    for ox in 0..w {
                        let sx = ox as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] += row[oy * w + ox];
                        }
                    }
                }
            }
        }
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

fn dims4(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(shape_err(op, format!("expected [N, C, H, W], got {s:?}"))),
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        ref s => Err(shape_err(op, format!("expected a matrix, got {s:?}"))),
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf that requires gradients.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        for g in self.grads.iter_mut().flatten() {
            g.fill(0.0);
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_map(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_map("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_map("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_map("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.map(a, |x| c * x);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| x * x);
        self.push(v, Op::Square(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| x * sigmoid(x));
        self.push(v, Op::Silu(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| x.max(0.0));
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(shape_err("mean", "empty tensor".into()));
        }
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        Ok(self.push(Tensor::scalar(m), Op::Mean(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} cannot be viewed as {shape:?}", t.shape()),
            ));
        }
        let v = Tensor::from_parts(shape.to_vec(), t.data().to_vec());
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul", self.value(a))?;
        let (k2, n) = dims2("matmul", self.value(b))?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    /// Adds a `[n]` bias to every row of a `[m, n]` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = dims2("add_row_bias", self.value(x))?;
        if self.value(bias).shape() != [n] {
            return Err(shape_err(
                "add_row_bias",
                format!("bias {:?} for {n} columns", self.value(bias).shape()),
            ));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::AddRowBias(x, bias),
            &[x, bias],
        ))
    }

    /// 3x3 convolution, stride 1, zero padding 1. Weight `[Cout, Cin, 3, 3]`, bias `[Cout]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (n, cin, h, w) = dims4("conv2d", self.value(input))?;
        let (cout, wcin, kh, kw) = dims4("conv2d", self.value(weight))?;
        if wcin != cin || kh != 3 || kw != 3 {
            return Err(shape_err(
                "conv2d",
                format!(
                    "weight {:?} does not match {cin} input channels with a 3x3 kernel",
                    self.value(weight).shape()
                ),
            ));
        }
        if self.value(bias).shape() != [cout] {
            return Err(shape_err(
                "conv2d",
                format!("bias {:?} for {cout} output channels", self.value(bias).shape()),
            ));
        }
        let hw = h * w;
        let ck = cin * 9;
        let keep = [input, weight, bias]
            .iter()
            .any(|v| self.nodes[v.0].requires_grad);
        let mut cols = vec![0.0; if keep { n * ck * hw } else { ck * hw }];
        let mut out = vec![0.0; n * cout * hw];
        {
            let x = self.value(input).data();
            let wt = self.value(weight).data();
            let b = self.value(bias).data();
            for s in 0..n {
                let col = if keep {
                    &mut cols[s * ck * hw..(s + 1) * ck * hw]
                } else {
                    &mut cols[..]
                };
                im2col(&x[s * cin * hw..(s + 1) * cin * hw], cin, h, w, col);
                let o = &mut out[s * cout * hw..(s + 1) * cout * hw];
                for (co, plane) in o.chunks_mut(hw).enumerate() {
                    plane.fill(b[co]);
                }
                gemm(cout, ck, hw, wt, false, col, false, 1.0, o);
            }
        }
        if !keep {
            cols = Vec::new();
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, cout, h, w], out),
            Op::Conv2d {
                input,
                weight,
                bias,
                cols,
            },
            &[input, weight, bias],
        ))
    }

    /// 2x2 average pooling; spatial sizes must be even.
    pub fn avgpool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4("avgpool2", self.value(x))?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err("avgpool2", format!("odd spatial size {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for i in 0..oh {
                for j in 0..ow {
                    let a = plane[2 * i * w + 2 * j];
                    let b = plane[2 * i * w + 2 * j + 1];
                    let c2 = plane[(2 * i + 1) * w + 2 * j];
                    let d = plane[(2 * i + 1) * w + 2 * j + 1];
                    dst[i * ow + j] = 0.25 * (a + b + c2 + d);
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, c, oh, ow], out),
            Op::AvgPool2(x),
            &[x],
        ))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4("upsample2", self.value(x))?;
        let (oh, ow) = (2 * h, 2 * w);
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            let plane = &src[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for i in 0..oh {
                for j in 0..ow {
                    dst[i * ow + j] = plane[(i / 2) * w + j / 2];
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, c, oh, ow], out),
            Op::Upsample2(x),
            &[x],
        ))
    }

    /// Normalizes each `(sample, channel)` plane to zero mean and unit variance.
    pub fn channel_norm(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4("channel_norm", self.value(x))?;
        let m = h * w;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; n * c];
        for p in 0..n * c {
            let plane = &src[p * m..(p + 1) * m];
            let mean = plane.iter().sum::<f64>() / m as f64;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[p] = is;
            for (o, v) in out[p * m..(p + 1) * m].iter_mut().zip(plane) {
                *o = (v - mean) * is;
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, c, h, w], out),
            Op::ChannelNorm { input: x, inv_std },
            &[x],
        ))
    }

    /// Adds a per-sample, per-channel value `[N, C]` across every pixel of `[N, C, H, W]`.
    pub fn add_channel(&mut self, x: Var, e: Var) -> Result<Var> {
        let (n, c, h, w) = dims4("add_channel", self.value(x))?;
        if self.value(e).shape() != [n, c] {
            return Err(shape_err(
                "add_channel",
                format!("embedding {:?} for [{n}, {c}, ..]", self.value(e).shape()),
            ));
        }
        let m = h * w;
        let ev = self.value(e).data();
        let mut out = self.value(x).data().to_vec();
        for (p, plane) in out.chunks_mut(m).enumerate() {
            for v in plane {
                *v += ev[p];
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, c, h, w], out),
            Op::AddChannel(x, e),
            &[x, e],
        ))
    }

    /// Concatenates along axis 1; all other axes must agree.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(shape_err("concat", format!("{sa:?} with {sb:?}")));
        }
        let inner: usize = sa[2..].iter().product();
        let (ca, cb) = (sa[1] * inner, sb[1] * inner);
        let mut shape = sa.to_vec();
        shape[1] += sb[1];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(da.len() + db.len());
        for s in 0..sa[0] {
            out.extend_from_slice(&da[s * ca..(s + 1) * ca]);
            out.extend_from_slice(&db[s * cb..(s + 1) * cb]);
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat(a, b), &[a, b]))
    }

    /// Reverse sweep from a scalar `loss`, accumulating into every leaf that
    /// requires gradients. Calling it again without [`Tape::zero_grad`] adds on top.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Ok(());
        }
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);

        // Adds a contribution into the adjoint of `v`, allocating it on first use.
        fn slot<'a>(adj: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
            let node = &nodes[v.0];
            if !node.requires_grad {
                return None;
            }
            Some(adj[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &nodes[i];
            match &node.op {
                Op::Leaf => {
                    if node.requires_grad {
                        match &mut grads[i] {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                            slot @ None => *slot = Some(g),
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if let Some(d) = slot(&mut adj, nodes, v) {
                            d.iter_mut().zip(&g).for_each(|(d, g)| *d += g);
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if let Some(d) = slot(&mut adj, nodes, *a) {
                        d.iter_mut().zip(&g).for_each(|(d, g)| *d += g);
                    }
                    if let Some(d) = slot(&mut adj, nodes, *b) {
                        d.iter_mut().zip(&g).for_each(|(d, g)| *d -= g);
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if let Some(d) = slot(&mut adj, nodes, *a) {
                        for ((d, g), y) in d.iter_mut().zip(&g).zip(vb) {
                            *d += g * y;
                        }
                    }
                    if let Some(d) = slot(&mut adj, nodes, *b) {
                        for ((d, g), x) in d.iter_mut().zip(&g).zip(va) {
                            *d += g * x;
                        }
                    }
                }
                Op::Scale(a, c) => {
                    if let Some(d) = slot(&mut adj, nodes, *a) {
                        d.iter_mut().zip(&g).for_each(|(d, g)| *d += c * g);
                    }
                }
                Op::Square(a) => {
                    let x = nodes[a.0].value.data();
                    if let Some(d) = slot(&mut adj, nodes, *a) {
                        for ((d, g), x) in d.iter_mut().zip(&g).zip(x) {
                            *d += 2.0 * x * g;
                        }
                    }
                }
                Op::Sum(a) => {
                    if let Some(d) = slot(&mut adj, nodes, *a) {
                        d.iter_mut().for_each(|d| *d += g[0]);
                    }
                }
                Op::Mean(a) => {
                    let scale = g[0] / nodes[a.0].value.len() as f64;
                    if let Some(d) = slot(&mut adj, nodes, *a) {
                        d.iter_mut().for_each(|d| *d += scale);
                    }
                }
                Op::Silu(a) => {
                    let x = nodes[a.0].value.data();
                    if let Some(d) = slot(&mut adj, nodes, *a) {
                        for ((d, g), &x) in d.iter_mut().zip(&g).zip(x) {
                            let s = sigmoid(x);
                            *d += g * s * (1.0 + x * (1.0 - s));
                        }
                    }
                }
                Op::Relu(a) => {
                    let x = nodes[a.0].value.data();
                    if let Some(d) = slot(&mut adj, nodes, *a) {
                        for ((d, g), &x) in d.iter_mut().zip(&g).zip(x) {
                            if x > 0.0 {
                                *d += g;
                            }
                        }
                    }
                }
                Op::Reshape(a) => {
                    if let Some(d) = slot(&mut adj, nodes, *a) {
                        d.iter_mut().zip(&g).for_each(|(d, g)| *d += g);
                    }
                }
                Op::MatMul(a, b) => {
                    let ta = &nodes[a.0].value;
                    let tb = &nodes[b.0].value;
                    let (m, k) = (ta.shape()[0], ta.shape()[1]);
                    let n = tb.shape()[1];
                    if let Some(d) = slot(&mut adj, nodes, *a) {
                        gemm(m, n, k, &g, false, tb.data(), true, 1.0, d);
                    }
                    if let Some(d) = slot(&mut adj, nodes, *b) {
                        gemm(k, m, n, ta.data(), true, &g, false, 1.0, d);
                    }
                }
                Op::AddRowBias(x, bias) => {
                    let n = nodes[bias.0].value.len();
                    if let Some(d) = slot(&mut adj, nodes, *x) {
                        d.iter_mut().zip(&g).for_each(|(d, g)| *d += g);
                    }
                    if let Some(d) = slot(&mut adj, nodes, *bias) {
                        for row in g.chunks(n) {
                            d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                        }
                    }
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    cols,
                } => {
                    let xs = nodes[input.0].value.shape();
                    let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let cout = nodes[weight.0].value.shape()[0];
                    let hw = h * w;
                    let ck = cin * 9;
                    if let Some(d) = slot(&mut adj, nodes, *bias) {
                        for s in 0..n {
                            for (co, plane) in g[s * cout * hw..(s + 1) * cout * hw]
                                .chunks(hw)
                                .enumerate()
                            {
                                d[co] += plane.iter().sum::<f64>();
                            }
                        }
                    }
                    if let Some(d) = slot(&mut adj, nodes, *weight) {
                        for s in 0..n {
                            let gs = &g[s * cout * hw..(s + 1) * cout * hw];
                            let col = &cols[s * ck * hw..(s + 1) * ck * hw];
                            gemm(cout, hw, ck, gs, false, col, true, 1.0, d);
                        }
                    }
                    if nodes[input.0].requires_grad {
                        let wt = nodes[weight.0].value.data();
                        let mut dcol = vec![0.0; ck * hw];
                        let d = slot(&mut adj, nodes, *input).expect("input requires grad");
                        for s in 0..n {
                            let gs = &g[s * cout * hw..(s + 1) * cout * hw];
                            gemm(ck, cout, hw, wt, true, gs, false, 0.0, &mut dcol);
                            col2im(&dcol, cin, h, w, &mut d[s * cin * hw..(s + 1) * cin * hw]);
                        }
                    }
                }
                Op::AvgPool2(x) => {
                    let xs = nodes[x.0].value.shape();
                    let (h, w) = (xs[2], xs[3]);
                    let (oh, ow) = (h / 2, w / 2);
                    if let Some(d) = slot(&mut adj, nodes, *x) {
                        for (p, gp) in g.chunks(oh * ow).enumerate() {
                            let plane = &mut d[p * h * w..(p + 1) * h * w];
                            for i in 0..h {
                                for j in 0..w {
                                    plane[i * w + j] += 0.25 * gp[(i / 2) * ow + j / 2];
                                }
                            }
                        }
                    }
                }
                Op::Upsample2(x) => {
                    let xs = nodes[x.0].value.shape();
                    let (h, w) = (xs[2], xs[3]);
                    let ow = 2 * w;
                    if let Some(d) = slot(&mut adj, nodes, *x) {
                        for (p, gp) in g.chunks(4 * h * w).enumerate() {
                            let plane = &mut d[p * h * w..(p + 1) * h * w];
                            for i in 0..2 * h {
                                for j in 0..ow {
                                    plane[(i / 2) * w + j / 2] += gp[i * ow + j];
                                }
                            }
                        }
                    }
                }
                Op::ChannelNorm { input, inv_std } => {
                    let xs = nodes[input.0].value.shape();
                    let m = xs[2] * xs[3];
                    let yhat = node.value.data();
                    if let Some(d) = slot(&mut adj, nodes, *input) {
                        for (p, &is) in inv_std.iter().enumerate() {
                            let gp = &g[p * m..(p + 1) * m];
                            let yp = &yhat[p * m..(p + 1) * m];
                            let mean_g = gp.iter().sum::<f64>() / m as f64;
                            let mean_gy =
                                gp.iter().zip(yp).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                            for ((dv, gv), yv) in d[p * m..(p + 1) * m].iter_mut().zip(gp).zip(yp) {
                                *dv += is * (gv - mean_g - yv * mean_gy);
                            }
                        }
                    }
                }
                Op::AddChannel(x, e) => {
                    let xs = nodes[x.0].value.shape();
                    let m = xs[2] * xs[3];
                    if let Some(d) = slot(&mut adj, nodes, *x) {
                        d.iter_mut().zip(&g).for_each(|(d, g)| *d += g);
                    }
                    if let Some(d) = slot(&mut adj, nodes, *e) {
                        for (p, plane) in g.chunks(m).enumerate() {
                            d[p] += plane.iter().sum::<f64>();
                        }
                    }
                }
                Op::Concat(a, b) => {
                    let sa = nodes[a.0].value.shape();
                    let sb = nodes[b.0].value.shape();
                    let inner: usize = sa[2..].iter().product();
                    let (ca, cb) = (sa[1] * inner, sb[1] * inner);
                    if let Some(d) = slot(&mut adj, nodes, *a) {
                        for s in 0..sa[0] {
                            let src = &g[s * (ca + cb)..s * (ca + cb) + ca];
                            d[s * ca..(s + 1) * ca]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, g)| *d += g);
                        }
                    }
                    if let Some(d) = slot(&mut adj, nodes, *b) {
                        for s in 0..sa[0] {
                            let src = &g[s * (ca + cb) + ca..(s + 1) * (ca + cb)];
                            d[s * cb..(s + 1) * cb]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, g)| *d += g);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_zero_is_identity() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2, 2], &[1.0, -2.0, 3.5, 0.25]));
        let z = tape.constant(Tensor::zeros(vec![2, 2]));
        let y = tape.add(x, z).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn impulse_kernel_reproduces_input() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..16).map(|i| i as f64 * 0.5 - 3.0).collect();
        let x = tape.constant(t(&[1, 1, 4, 4], &data));
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = tape.constant(t(&[1, 1, 3, 3], &k));
        let b = tape.constant(Tensor::zeros(vec![1]));
        let y = tape.conv2d(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn mean_square_value_and_grad() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[3.0, 4.0]));
        let sq = tape.square(x);
        let loss = tape.mean(sq).unwrap();
        assert_eq!(tape.value(loss).item().unwrap(), 12.5);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn sum_grad_is_ones_and_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::full(vec![2, 3, 1], 0.7));
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0; 6]);
        tape.zero_grad();
        assert_eq!(tape.grad(x).unwrap(), &[0.0; 6]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(vec![3]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::zeros(vec![2, 3]));
        let b = tape.param(Tensor::zeros(vec![2, 3]));
        match tape.matmul(a, b) {
            Err(Error::Shape { op, .. }) => assert_eq!(op, "matmul"),
            other => panic!("{other:?}"),
        }
        let c = tape.param(Tensor::zeros(vec![3, 2]));
        match tape.add(a, c) {
            Err(Error::Shape { op, .. }) => assert_eq!(op, "add"),
            other => panic!("{other:?}"),
        }
        let img = tape.param(Tensor::zeros(vec![1, 1, 3, 3]));
        match tape.avgpool2(img) {
            Err(Error::Shape { op, .. }) => assert_eq!(op, "avgpool2"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn constants_do_not_record_gradients() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.square(a);
        let l = tape.sum(b);
        assert!(!tape.requires_grad(l));
        tape.backward(l).unwrap();
        assert!(tape.grad(a).is_none());
    }
}
