//! Eager computation tape with reverse-mode differentiation.
//!
//! Every forward operation appends a node holding its output value and
//! whatever the backward pass needs (inputs are referenced by node index,
//! max-pool remembers its argmax). `backward` walks the tape in reverse and
//! accumulates gradients; parameter leaves route their gradient into a
//! [`ParamStore`] by name.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::tensor::{ParamStore, TensorF};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param {
        name: String,
    },
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu {
        x: Var,
    },
    Conv2d {
        img: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Concat {
        parts: Vec<Var>,
    },
    Mse {
        a: Var,
        b: Var,
    },
    /// The 8-entry pairwise log-distance descriptor, differentiable in the
    /// landmark coordinates it reads.
    GeometryDescriptor {
        shape: Var,
        m: usize,
        n: usize,
        root: usize,
        eps: f64,
    },
    /// Zero-pad a rank-1 input into a larger shape (backward slices it off).
    PadReshape {
        x: Var,
    },
    /// Rank change without data change.
    Flatten {
        x: Var,
    },
}

struct Node {
    op: Op,
    value: TensorF,
}

/// Forward recording plus reverse-mode gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_cache: HashMap<String, Var>,
}

/// Entries of the pairwise geometry descriptor, shared by the tape op and
/// the plain (non-differentiated) evaluation path.
///
/// Layout: [log|xm-xn|, log|ym-yn|, log|xm-xr|, log|ym-yr|,
///          log|xn-xm|, log|yn-ym|, log|xn-xr|, log|yn-yr|],
/// each entry computed as ln(max(|delta|, eps)).
pub fn descriptor_entries(coords: &[f64], m: usize, n: usize, root: usize, eps: f64) -> [f64; 8] {
    let clamped_log = |d: f64| d.abs().max(eps).ln();
    let (xm, ym) = (coords[2 * m], coords[2 * m + 1]);
    let (xn, yn) = (coords[2 * n], coords[2 * n + 1]);
    let (xr, yr) = (coords[2 * root], coords[2 * root + 1]);
    [
        clamped_log(xm - xn),
        clamped_log(ym - yn),
        clamped_log(xm - xr),
        clamped_log(ym - yr),
        clamped_log(xn - xm),
        clamped_log(yn - ym),
        clamped_log(xn - xr),
        clamped_log(yn - yr),
    ]
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &TensorF {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: TensorF) -> Var {
        debug_assert!(value.all_finite(), "non-finite tensor out of {op:?}");
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf.
    pub fn input(&mut self, value: TensorF) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Parameter leaf. The current value is copied onto the tape once per
    /// name; repeated requests return the same node so gradients fan in.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_cache.get(name) {
            return Ok(v);
        }
        let value = store.value(name)?.clone();
        let var = self.push(
            Op::Param {
                name: name.to_string(),
            },
            value,
        );
        self.param_cache.insert(name.to_string(), var);
        Ok(var)
    }

    /// Affine map `W x + b` for rank-1 `x`. `W` is `[out, in]` row-major.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.value(x), self.value(w), self.value(b));
        if ws.shape().len() != 2 {
            return Err(Error::shape("dense weight must be rank 2", ws.shape(), &[]));
        }
        let (out_dim, in_dim) = (ws.shape()[0], ws.shape()[1]);
        if xs.len() != in_dim {
            return Err(Error::shape("dense input", xs.shape(), ws.shape()));
        }
        if bs.len() != out_dim {
            return Err(Error::shape("dense bias", bs.shape(), ws.shape()));
        }
        let xv = xs.values();
        let wv = ws.values();
        let mut out = bs.values().to_vec();
        for (o, out_val) in out.iter_mut().enumerate() {
            let row = &wv[o * in_dim..(o + 1) * in_dim];
            let mut acc = 0.0;
            for (wi, xi) in row.iter().zip(xv) {
                acc += wi * xi;
            }
            *out_val += acc;
        }
        Ok(self.push(Op::Dense { x, w, b }, TensorF::vector(out)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = TensorF::new(
            self.value(x).shape().to_vec(),
            self.value(x).values().iter().map(|&v| v.max(0.0)).collect(),
        )
        .expect("same shape");
        self.push(Op::Relu { x }, value)
    }

    /// Valid-padding cross-correlation. `img` is `[c_in, h, w]`, `kernel`
    /// `[c_out, c_in, kh, kw]`, `bias` `[c_out]`.
    pub fn conv2d(&mut self, img: Var, kernel: Var, bias: Var, stride: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::Input("conv stride must be positive".into()));
        }
        let (is, ks, bs) = (self.value(img), self.value(kernel), self.value(bias));
        if is.shape().len() != 3 || ks.shape().len() != 4 {
            return Err(Error::shape("conv2d ranks", is.shape(), ks.shape()));
        }
        let (c_in, h, w) = (is.shape()[0], is.shape()[1], is.shape()[2]);
        let (c_out, kc, kh, kw) = (ks.shape()[0], ks.shape()[1], ks.shape()[2], ks.shape()[3]);
        if kc != c_in {
            return Err(Error::shape("conv2d channels", is.shape(), ks.shape()));
        }
        if kh > h || kw > w {
            return Err(Error::shape("conv kernel exceeds input", ks.shape(), is.shape()));
        }
        if bs.len() != c_out {
            return Err(Error::shape("conv bias", bs.shape(), ks.shape()));
        }
        let oh = (h - kh) / stride + 1;
        let ow = (w - kw) / stride + 1;
        let iv = is.values();
        let kv = ks.values();
        let mut out = vec![0.0; c_out * oh * ow];
        for o in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bs.values()[o];
                    for c in 0..c_in {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let ip = c * h * w + (oy * stride + dy) * w + (ox * stride + dx);
                                let kp = ((o * c_in + c) * kh + dy) * kw + dx;
                                acc += iv[ip] * kv[kp];
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        let value = TensorF::new(vec![c_out, oh, ow], out)?;
        Ok(self.push(
            Op::Conv2d {
                img,
                kernel,
                bias,
                stride,
            },
            value,
        ))
    }

    /// 2x2 max-pool with stride 2 on `[c, h, w]`; trailing odd rows/columns
    /// are dropped. Ties resolve to the first element in row-major order.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x);
        if xs.shape().len() != 3 {
            return Err(Error::shape("maxpool input must be rank 3", xs.shape(), &[]));
        }
        let (c, h, w) = (xs.shape()[0], xs.shape()[1], xs.shape()[2]);
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::shape("maxpool input too small", xs.shape(), &[2, 2]));
        }
        let xv = xs.values();
        let mut out = vec![0.0; c * oh * ow];
        let mut argmax = vec![0usize; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = ch * h * w + (oy * 2) * w + ox * 2;
                    let mut best = xv[best_idx];
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = ch * h * w + (oy * 2 + dy) * w + (ox * 2 + dx);
                            if xv[idx] > best {
                                best = xv[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let op = (ch * oh + oy) * ow + ox;
                    out[op] = best;
                    argmax[op] = best_idx;
                }
            }
        }
        let value = TensorF::new(vec![c, oh, ow], out)?;
        Ok(self.push(Op::MaxPool2 { x, argmax }, value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                "add",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let values = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x + y)
            .collect();
        let value = TensorF::new(self.value(a).shape().to_vec(), values)?;
        Ok(self.push(Op::Add { a, b }, value))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = TensorF::new(
            self.value(x).shape().to_vec(),
            self.value(x).values().iter().map(|v| v * factor).collect(),
        )
        .expect("same shape");
        self.push(Op::Scale { x, factor }, value)
    }

    /// Concatenate rank-1 tensors in order.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Usage("concat of zero parts".into()));
        }
        let mut values = Vec::new();
        for &p in parts {
            values.extend_from_slice(self.value(p).values());
        }
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
            },
            TensorF::vector(values),
        ))
    }

    /// Sum of squared differences (squared L2 distance), a scalar node.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                "mse",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let sum: f64 = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(Op::Mse { a, b }, TensorF::scalar(sum)))
    }

    /// Pairwise geometry descriptor read out of a flat `[2L]` shape vector.
    pub fn geometry_descriptor(
        &mut self,
        shape: Var,
        m: usize,
        n: usize,
        root: usize,
        eps: f64,
    ) -> Result<Var> {
        let coords = self.value(shape);
        let l = coords.len() / 2;
        if !coords.len().is_multiple_of(2) {
            return Err(Error::Input("shape vector length must be even".into()));
        }
        if m == n {
            return Err(Error::Usage("descriptor pair indices must differ".into()));
        }
        if m >= l || n >= l || root >= l {
            return Err(Error::Input(format!(
                "descriptor indices ({m},{n},root {root}) out of range for {l} landmarks"
            )));
        }
        if eps <= 0.0 {
            return Err(Error::Input("descriptor eps must be positive".into()));
        }
        let entries = descriptor_entries(coords.values(), m, n, root, eps);
        Ok(self.push(
            Op::GeometryDescriptor {
                shape,
                m,
                n,
                root,
                eps,
            },
            TensorF::vector(entries.to_vec()),
        ))
    }

    /// Zero-pad a rank-1 tensor into `shape` (row-major prefix copy).
    pub fn pad_reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        let xs = self.value(x);
        if xs.len() > n {
            return Err(Error::shape("pad_reshape target too small", xs.shape(), &shape));
        }
        let mut values = vec![0.0; n];
        values[..xs.len()].copy_from_slice(xs.values());
        Ok(self.push(Op::PadReshape { x }, TensorF::new(shape, values)?))
    }

    pub fn flatten(&mut self, x: Var) -> Var {
        let value = TensorF::vector(self.value(x).values().to_vec());
        self.push(Op::Flatten { x }, value)
    }

    /// Reverse pass from a scalar `loss` node; returns per-node gradients.
    fn backward(&self, loss: Var) -> Result<Vec<Option<TensorF>>> {
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward on an empty tape".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage("loss var does not belong to this tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Usage("backward requires a scalar loss".into()));
        }
        let mut grads: Vec<Option<TensorF>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(TensorF::scalar(1.0));

        let add_grad = |grads: &mut Vec<Option<TensorF>>, v: Var, delta: &[f64], shape: &[usize]| {
            let slot = &mut grads[v.0];
            match slot {
                Some(g) => {
                    for (a, d) in g.values_mut().iter_mut().zip(delta) {
                        *a += d;
                    }
                }
                None => {
                    *slot = Some(
                        TensorF::new(shape.to_vec(), delta.to_vec()).expect("shape matches delta"),
                    );
                }
            }
        };

        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let gv = g.values();
            match &self.nodes[idx].op {
                Op::Leaf | Op::Param { .. } => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Dense { x, w, b } => {
                    let xs = self.value(*x);
                    let ws = self.value(*w);
                    let (out_dim, in_dim) = (ws.shape()[0], ws.shape()[1]);
                    let mut gx = vec![0.0; in_dim];
                    let mut gw = vec![0.0; out_dim * in_dim];
                    for o in 0..out_dim {
                        let go = gv[o];
                        let row = &ws.values()[o * in_dim..(o + 1) * in_dim];
                        for i in 0..in_dim {
                            gx[i] += go * row[i];
                            gw[o * in_dim + i] = go * xs.values()[i];
                        }
                    }
                    add_grad(&mut grads, *x, &gx, xs.shape());
                    add_grad(&mut grads, *w, &gw, ws.shape());
                    add_grad(&mut grads, *b, gv, self.value(*b).shape());
                }
                Op::Relu { x } => {
                    let xs = self.value(*x);
                    let gx: Vec<f64> = xs
                        .values()
                        .iter()
                        .zip(gv)
                        .map(|(&v, &d)| if v > 0.0 { d } else { 0.0 })
                        .collect();
                    add_grad(&mut grads, *x, &gx, xs.shape());
                }
                Op::Conv2d {
                    img,
                    kernel,
                    bias,
                    stride,
                } => {
                    let is = self.value(*img);
                    let ks = self.value(*kernel);
                    let (c_in, h, w) = (is.shape()[0], is.shape()[1], is.shape()[2]);
                    let (c_out, _, kh, kw) =
                        (ks.shape()[0], ks.shape()[1], ks.shape()[2], ks.shape()[3]);
                    let (oh, ow) = (
                        (h - kh) / stride + 1,
                        (w - kw) / stride + 1,
                    );
                    let mut gi = vec![0.0; is.len()];
                    let mut gk = vec![0.0; ks.len()];
                    let mut gb = vec![0.0; c_out];
                    for o in 0..c_out {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let go = gv[(o * oh + oy) * ow + ox];
                                gb[o] += go;
                                for c in 0..c_in {
                                    for dy in 0..kh {
                                        for dx in 0..kw {
                                            let ip = c * h * w
                                                + (oy * stride + dy) * w
                                                + (ox * stride + dx);
                                            let kp = ((o * c_in + c) * kh + dy) * kw + dx;
                                            gi[ip] += go * ks.values()[kp];
                                            gk[kp] += go * is.values()[ip];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    add_grad(&mut grads, *img, &gi, is.shape());
                    add_grad(&mut grads, *kernel, &gk, ks.shape());
                    add_grad(&mut grads, *bias, &gb, self.value(*bias).shape());
                }
                Op::MaxPool2 { x, argmax } => {
                    let xs = self.value(*x);
                    let mut gx = vec![0.0; xs.len()];
                    for (op, &src) in argmax.iter().enumerate() {
                        gx[src] += gv[op];
                    }
                    add_grad(&mut grads, *x, &gx, xs.shape());
                }
                Op::Add { a, b } => {
                    add_grad(&mut grads, *a, gv, self.value(*a).shape());
                    add_grad(&mut grads, *b, gv, self.value(*b).shape());
                }
                Op::Scale { x, factor } => {
                    let gx: Vec<f64> = gv.iter().map(|d| d * factor).collect();
                    add_grad(&mut grads, *x, &gx, self.value(*x).shape());
                }
                Op::Concat { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        add_grad(&mut grads, p, &gv[offset..offset + n], self.value(p).shape());
                        offset += n;
                    }
                }
                Op::Mse { a, b } => {
                    let av = self.value(*a).values();
                    let bv = self.value(*b).values();
                    let go = gv[0];
                    let ga: Vec<f64> = av
                        .iter()
                        .zip(bv)
                        .map(|(x, y)| 2.0 * (x - y) * go)
                        .collect();
                    let gb: Vec<f64> = ga.iter().map(|d| -d).collect();
                    add_grad(&mut grads, *a, &ga, self.value(*a).shape());
                    add_grad(&mut grads, *b, &gb, self.value(*b).shape());
                }
                Op::GeometryDescriptor {
                    shape,
                    m,
                    n,
                    root,
                    eps,
                } => {
                    let coords = self.value(*shape);
                    let mut gs = vec![0.0; coords.len()];
                    // d/da ln(max(|a-b|, eps)) = 1/(a-b) when |a-b| > eps, else 0.
                    let mut route = |a: usize, b: usize, go: f64| {
                        let d = coords.values()[a] - coords.values()[b];
                        if d.abs() > *eps {
                            gs[a] += go / d;
                            gs[b] -= go / d;
                        }
                    };
                    let (xm, ym) = (2 * m, 2 * m + 1);
                    let (xn, yn) = (2 * n, 2 * n + 1);
                    let (xr, yr) = (2 * root, 2 * root + 1);
                    route(xm, xn, gv[0]);
                    route(ym, yn, gv[1]);
                    route(xm, xr, gv[2]);
                    route(ym, yr, gv[3]);
                    route(xn, xm, gv[4]);
                    route(yn, ym, gv[5]);
                    route(xn, xr, gv[6]);
                    route(yn, yr, gv[7]);
                    add_grad(&mut grads, *shape, &gs, coords.shape());
                }
                Op::PadReshape { x } => {
                    let n = self.value(*x).len();
                    add_grad(&mut grads, *x, &gv[..n], self.value(*x).shape());
                }
                Op::Flatten { x } => {
                    add_grad(&mut grads, *x, gv, self.value(*x).shape());
                }
            }
            grads[idx] = Some(g);
        }
        Ok(grads)
    }

    /// Backward pass that accumulates parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param { name } = &node.op {
                if let Some(g) = &grads[idx] {
                    store.accumulate_grad(name, g)?;
                }
            }
        }
        Ok(())
    }

    /// Gradient of `loss` with respect to an arbitrary node, if it is on the
    /// loss path.
    pub fn grad_of(&self, loss: Var, target: Var) -> Result<Option<TensorF>> {
        let mut grads = self.backward(loss)?;
        Ok(grads[target.0].take())
    }
}

/// Run a backward pass from `loss`, apply one SGD step at `lr`, then zero
/// the gradients.
pub fn backward_and_step(
    tape: &Tape,
    loss: Var,
    store: &mut ParamStore,
    lr: f64,
) -> Result<()> {
    tape.backward_into(loss, store)?;
    store.sgd_step(lr);
    store.zero_grads();
    Ok(())
}
