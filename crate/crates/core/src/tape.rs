//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a Wengert list: every operation appends a node holding its
//! output values and a record of its inputs. Nodes are only ever appended after
//! their inputs, so the list is already in topological order and
//! [`Graph::backward`] is a single reverse sweep that visits each node once.
//! Gradient contributions are summed in that fixed order.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which side of the current step the far convolution tap reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvDirection {
    /// Far tap at `t - dilation`, zero frames before the start.
    Causal,
    /// Far tap at `t + dilation`, zero frames past the end.
    AntiCausal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Sigmoid,
    Exp,
    Softplus,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Affine {
        x: Var,
        w: Var,
        b: Var,
        cin: usize,
        cout: usize,
    },
    Conv {
        x: Var,
        k: Var,
        bias: Option<Var>,
        batch: usize,
        time: usize,
        cin: usize,
        cout: usize,
        dilation: usize,
        dir: ConvDirection,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: f64,
    },
    Unary {
        a: Var,
        kind: Unary,
    },
    ClampMin {
        a: Var,
        floor: f64,
    },
    MulConst {
        a: Var,
        c: Vec<f64>,
    },
    MaskRows {
        a: Var,
        mask: Vec<f64>,
        width: usize,
    },
    Concat {
        a: Var,
        b: Var,
        ca: usize,
        cb: usize,
    },
    GaussianLogpdf {
        x: Var,
        mean: Var,
        log_var: Var,
        d: usize,
    },
    KlDiag {
        mq: Var,
        lq: Var,
        mp: Var,
        lp: Var,
        d: usize,
    },
    SumLast {
        a: Var,
        d: usize,
    },
    Sum {
        a: Var,
    },
    Reshape {
        a: Var,
    },
}

#[derive(Clone, Debug)]
struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Operation tape for one forward/backward pass.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` when `var` does not influence the loss through differentiable paths.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

fn check_finite(op: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn last_extent(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].values
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Copies a node out as a standalone tensor (without gradient slot).
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.values.clone()).expect("graph nodes are well-formed")
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].values[0]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, values: Vec<f64>, op: Op, needs_grad: bool) -> Result<Var> {
        check_finite(op_name, &values)?;
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.nodes.push(Node {
            shape,
            values,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a tensor as a leaf. Gradients flow to it iff it requires them.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            values: t.values().to_vec(),
            op: Op::Leaf,
            needs_grad: t.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a non-differentiable leaf.
    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, values: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, values)?;
        Ok(self.leaf(&t))
    }

    /// `out[..., j] = sum_i x[..., i] * w[i, j] + b[j]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if ws.len() != 2 || bs.len() != 1 || xs.is_empty() {
            return Err(Error::shape(format!("affine: x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let (cin, cout) = (ws[0], ws[1]);
        if last_extent(xs) != cin || bs[0] != cout {
            return Err(Error::shape(format!("affine: x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = cout;
        let rows = self.nodes[x.0].values.len() / cin;
        let mut out = vec![0.0; rows * cout];
        {
            let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
            par::for_each_row(&mut out, cout, |r, row| {
                row.copy_from_slice(bv);
                let xr = &xv[r * cin..(r + 1) * cin];
                for (i, &xi) in xr.iter().enumerate() {
                    if xi == 0.0 {
                        continue;
                    }
                    let wr = &wv[i * cout..(i + 1) * cout];
                    for (o, &wij) in row.iter_mut().zip(wr) {
                        *o += xi * wij;
                    }
                }
            });
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push("affine", shape, out, Op::Affine { x, w, b, cin, cout }, needs)
    }

    /// Width-2 dilated convolution over `[B, T, C_in]` with kernel `[2, C_in, C_out]`.
    ///
    /// Tap 0 reads the far frame (`t - dilation` or `t + dilation`), tap 1 the
    /// current frame. Out-of-range far frames read zeros.
    pub fn conv1d(&mut self, x: Var, kernel: Var, bias: Option<Var>, dilation: usize, dir: ConvDirection) -> Result<Var> {
        if dilation == 0 {
            return Err(Error::config("conv1d: dilation must be positive"));
        }
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if xs.len() != 3 || ks.len() != 3 || ks[0] != 2 || ks[1] != xs[2] {
            return Err(Error::shape(format!("conv1d: input {xs:?}, kernel {ks:?}")));
        }
        let (batch, time, cin, cout) = (xs[0], xs[1], xs[2], ks[2]);
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::shape(format!("conv1d: bias {:?} for {cout} outputs", self.shape(b))));
            }
        }
        let mut out = vec![0.0; batch * time * cout];
        {
            let xv = self.value(x);
            let kv = self.value(kernel);
            let bv = bias.map(|b| self.value(b));
            let (far_k, cur_k) = kv.split_at(cin * cout);
            par::for_each_row(&mut out, cout, |r, row| {
                let (bi, t) = (r / time, r % time);
                match bv {
                    Some(bv) => row.copy_from_slice(bv),
                    None => row.iter_mut().for_each(|v| *v = 0.0),
                }
                let mut tap = |src: usize, k: &[f64]| {
                    let xr = &xv[(bi * time + src) * cin..(bi * time + src + 1) * cin];
                    for (i, &xi) in xr.iter().enumerate() {
                        if xi == 0.0 {
                            continue;
                        }
                        for (o, &kij) in row.iter_mut().zip(&k[i * cout..(i + 1) * cout]) {
                            *o += xi * kij;
                        }
                    }
                };
                if let Some(src) = far_source(t, time, dilation, dir) {
                    tap(src, far_k);
                }
                tap(t, cur_k);
            });
        }
        let needs = self.needs(x) || self.needs(kernel) || bias.is_some_and(|b| self.needs(b));
        self.push(
            "conv1d",
            vec![batch, time, cout],
            out,
            Op::Conv {
                x,
                k: kernel,
                bias,
                batch,
                time,
                cin,
                cout,
                dilation,
                dir,
            },
            needs,
        )
    }

    pub fn conv1d_causal(&mut self, x: Var, kernel: Var, bias: Option<Var>, dilation: usize) -> Result<Var> {
        self.conv1d(x, kernel, bias, dilation, ConvDirection::Causal)
    }

    fn broadcast_binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>)> {
        let (an, bn) = (self.value(a).len(), self.value(b).len());
        let (av, bv) = (self.value(a), self.value(b));
        if self.shape(a) == self.shape(b) {
            Ok((self.shape(a).to_vec(), av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()))
        } else if bn == 1 {
            Ok((self.shape(a).to_vec(), av.iter().map(|&x| f(x, bv[0])).collect()))
        } else if an == 1 {
            Ok((self.shape(b).to_vec(), bv.iter().map(|&y| f(av[0], y)).collect()))
        } else {
            Err(Error::shape(format!("{name}: {:?} vs {:?}", self.shape(a), self.shape(b))))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        self.push("add", shape, out, Op::Add { a, b }, needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        let needs = self.needs(a) || self.needs(b);
        self.push("sub", shape, out, Op::Sub { a, b }, needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        self.push("mul", shape, out, Op::Mul { a, b }, needs)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let needs = self.needs(a);
        self.push("scale", self.shape(a).to_vec(), out, Op::Scale { a, c }, needs)
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Result<Var> {
        let f: fn(f64) -> f64 = match kind {
            Unary::Tanh => f64::tanh,
            Unary::Sigmoid => sigmoid,
            Unary::Exp => f64::exp,
            Unary::Softplus => softplus,
        };
        let name = match kind {
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Exp => "exp",
            Unary::Softplus => "softplus",
        };
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let needs = self.needs(a);
        self.push(name, self.shape(a).to_vec(), out, Op::Unary { a, kind }, needs)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Exp)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Softplus)
    }

    /// `max(a, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x.max(floor)).collect();
        let needs = self.needs(a);
        self.push("clamp_min", self.shape(a).to_vec(), out, Op::ClampMin { a, floor }, needs)
    }

    /// Elementwise product with a constant buffer of the same extent.
    pub fn mul_const(&mut self, a: Var, c: Vec<f64>) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(Error::shape(format!("mul_const: {} constants for {:?}", c.len(), self.shape(a))));
        }
        let out = self.value(a).iter().zip(&c).map(|(&x, &y)| x * y).collect();
        let needs = self.needs(a);
        self.push("mul_const", self.shape(a).to_vec(), out, Op::MulConst { a, c }, needs)
    }

    /// Scales every trailing-axis row of `a` by `mask[row]`.
    pub fn mask_rows(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        let width = last_extent(self.shape(a));
        if mask.len() * width != self.value(a).len() {
            return Err(Error::shape(format!("mask_rows: {} rows for {:?}", mask.len(), self.shape(a))));
        }
        let out = self
            .value(a)
            .chunks(width)
            .zip(&mask)
            .flat_map(|(row, &m)| row.iter().map(move |&x| x * m))
            .collect();
        let needs = self.needs(a);
        self.push("mask_rows", self.shape(a).to_vec(), out, Op::MaskRows { a, mask, width }, needs)
    }

    /// Concatenates along the trailing axis; leading extents must agree.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::shape(format!("concat_last: {sa:?} vs {sb:?}")));
        }
        let (ca, cb) = (last_extent(sa), last_extent(sb));
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        let out = self
            .value(a)
            .chunks(ca)
            .zip(self.value(b).chunks(cb))
            .flat_map(|(ra, rb)| ra.iter().chain(rb).copied())
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push("concat_last", shape, out, Op::Concat { a, b, ca, cb }, needs)
    }

    fn same_shapes(&self, name: &str, vars: &[Var]) -> Result<Vec<usize>> {
        let s0 = self.shape(vars[0]);
        if vars.iter().any(|&v| self.shape(v) != s0) {
            let shapes: Vec<_> = vars.iter().map(|&v| self.shape(v).to_vec()).collect();
            return Err(Error::shape(format!("{name}: mismatched shapes {shapes:?}")));
        }
        Ok(s0.to_vec())
    }

    /// Diagonal Gaussian log density, summed over the trailing axis.
    pub fn gaussian_logpdf(&mut self, x: Var, mean: Var, log_var: Var) -> Result<Var> {
        let shape = self.same_shapes("gaussian_logpdf", &[x, mean, log_var])?;
        let d = last_extent(&shape);
        let (xv, mv, lv) = (self.value(x), self.value(mean), self.value(log_var));
        let out = (0..xv.len() / d)
            .map(|r| {
                (r * d..(r + 1) * d)
                    .map(|i| {
                        let diff = xv[i] - mv[i];
                        -HALF_LN_2PI - 0.5 * lv[i] - 0.5 * diff * diff * (-lv[i]).exp()
                    })
                    .sum()
            })
            .collect();
        let needs = self.needs(x) || self.needs(mean) || self.needs(log_var);
        let out_shape = shape[..shape.len().saturating_sub(1)].to_vec();
        self.push("gaussian_logpdf", out_shape, out, Op::GaussianLogpdf { x, mean, log_var, d }, needs)
    }

    /// `KL(N(mq, e^lq) || N(mp, e^lp))` for diagonal Gaussians, summed over the trailing axis.
    pub fn kl_diag_gaussian(&mut self, mq: Var, lq: Var, mp: Var, lp: Var) -> Result<Var> {
        let shape = self.same_shapes("kl_diag_gaussian", &[mq, lq, mp, lp])?;
        let d = last_extent(&shape);
        let (mqv, lqv, mpv, lpv) = (self.value(mq), self.value(lq), self.value(mp), self.value(lp));
        let out = (0..mqv.len() / d)
            .map(|r| {
                (r * d..(r + 1) * d)
                    .map(|i| {
                        let diff = mqv[i] - mpv[i];
                        0.5 * ((lpv[i] - lqv[i]) + (lqv[i] - lpv[i]).exp() + diff * diff * (-lpv[i]).exp() - 1.0)
                    })
                    .sum()
            })
            .collect();
        let needs = [mq, lq, mp, lp].iter().any(|&v| self.needs(v));
        let out_shape = shape[..shape.len().saturating_sub(1)].to_vec();
        self.push("kl_diag_gaussian", out_shape, out, Op::KlDiag { mq, lq, mp, lp, d }, needs)
    }

    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = last_extent(&shape);
        let out = self.value(a).chunks(d).map(|r| r.iter().sum()).collect();
        let needs = self.needs(a);
        let out_shape = shape[..shape.len().saturating_sub(1)].to_vec();
        self.push("sum_last", out_shape, out, Op::SumLast { a, d }, needs)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        let needs = self.needs(a);
        self.push("sum", Vec::new(), vec![s], Op::Sum { a }, needs)
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.value(a).len() || shape.contains(&0) {
            return Err(Error::shape(format!("reshape: {:?} to {shape:?}", self.shape(a))));
        }
        let out = self.value(a).to_vec();
        let needs = self.needs(a);
        self.push("reshape", shape, out, Op::Reshape { a }, needs)
    }

    /// Runs the reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!("backward: loss has shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.needs(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for g in grads.iter().flatten() {
            check_finite("backward", g)?;
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let acc = |v: Var, grads: &mut [Option<Vec<f64>>], f: &dyn Fn(&mut [f64])| {
            if !self.needs(v) {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].values.len()]);
            f(buf);
        };
        match node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b, cin, cout } => {
                let rows = g.len() / cout;
                let (xv, wv) = (self.value(x), self.value(w));
                acc(x, grads, &|dx| {
                    par::for_each_row(dx, cin, |r, row| {
                        let gr = &g[r * cout..(r + 1) * cout];
                        for (i, d) in row.iter_mut().enumerate() {
                            let wr = &wv[i * cout..(i + 1) * cout];
                            *d += gr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
                        }
                    })
                });
                acc(w, grads, &|dw| {
                    par::for_each_row(dw, cout, |i, row| {
                        for r in 0..rows {
                            let xi = xv[r * cin + i];
                            if xi == 0.0 {
                                continue;
                            }
                            for (d, &gv) in row.iter_mut().zip(&g[r * cout..(r + 1) * cout]) {
                                *d += xi * gv;
                            }
                        }
                    })
                });
                acc(b, grads, &|db| {
                    for gr in g.chunks(cout) {
                        db.iter_mut().zip(gr).for_each(|(d, v)| *d += v);
                    }
                });
            }
            Op::Conv {
                x,
                k,
                bias,
                batch,
                time,
                cin,
                cout,
                dilation,
                dir,
            } => {
                let (xv, kv) = (self.value(x), self.value(k));
                let (far_k, cur_k) = kv.split_at(cin * cout);
                acc(x, grads, &|dx| {
                    par::for_each_row(dx, cin, |r, row| {
                        let (bi, s) = (r / time, r % time);
                        let mut tap = |t: usize, k: &[f64]| {
                            let gr = &g[(bi * time + t) * cout..(bi * time + t + 1) * cout];
                            for (i, d) in row.iter_mut().enumerate() {
                                *d += gr.iter().zip(&k[i * cout..(i + 1) * cout]).map(|(a, b)| a * b).sum::<f64>();
                            }
                        };
                        tap(s, cur_k);
                        if let Some(t) = far_reader(s, time, dilation, dir) {
                            tap(t, far_k);
                        }
                    })
                });
                acc(k, grads, &|dk| {
                    par::for_each_row(dk, cout, |r, row| {
                        let (which, i) = (r / cin, r % cin);
                        for bi in 0..batch {
                            for t in 0..time {
                                let src = if which == 0 {
                                    match far_source(t, time, dilation, dir) {
                                        Some(s) => s,
                                        None => continue,
                                    }
                                } else {
                                    t
                                };
                                let xi = xv[(bi * time + src) * cin + i];
                                if xi == 0.0 {
                                    continue;
                                }
                                let gr = &g[(bi * time + t) * cout..(bi * time + t + 1) * cout];
                                for (d, &gv) in row.iter_mut().zip(gr) {
                                    *d += xi * gv;
                                }
                            }
                        }
                    })
                });
                if let Some(b) = bias {
                    acc(b, grads, &|db| {
                        for gr in g.chunks(cout) {
                            db.iter_mut().zip(gr).for_each(|(d, v)| *d += v);
                        }
                    });
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                // Scalar operands receive the summed adjoint.
                let reduce = |s: f64, buf: &mut [f64]| {
                    if buf.len() == g.len() {
                        buf.iter_mut().zip(g).for_each(|(d, gv)| *d += s * gv);
                    } else {
                        buf[0] += s * g.iter().sum::<f64>();
                    }
                };
                acc(a, grads, &|da| reduce(1.0, da));
                acc(b, grads, &|db| reduce(sign, db));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(a), self.value(b));
                let pick = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };
                acc(a, grads, &|da| {
                    if da.len() == g.len() {
                        da.iter_mut().enumerate().for_each(|(i, d)| *d += g[i] * pick(bv, i));
                    } else {
                        da[0] += g.iter().enumerate().map(|(i, gv)| gv * pick(bv, i)).sum::<f64>();
                    }
                });
                acc(b, grads, &|db| {
                    if db.len() == g.len() {
                        db.iter_mut().enumerate().for_each(|(i, d)| *d += g[i] * pick(av, i));
                    } else {
                        db[0] += g.iter().enumerate().map(|(i, gv)| gv * pick(av, i)).sum::<f64>();
                    }
                });
            }
            Op::Scale { a, c } => acc(a, grads, &|da| da.iter_mut().zip(g).for_each(|(d, gv)| *d += c * gv)),
            Op::Unary { a, kind } => {
                let (xv, yv) = (self.value(a), &node.values);
                acc(a, grads, &|da| {
                    for i in 0..da.len() {
                        let local = match kind {
                            Unary::Tanh => 1.0 - yv[i] * yv[i],
                            Unary::Sigmoid => yv[i] * (1.0 - yv[i]),
                            Unary::Exp => yv[i],
                            Unary::Softplus => sigmoid(xv[i]),
                        };
                        da[i] += g[i] * local;
                    }
                });
            }
            Op::ClampMin { a, floor } => {
                let xv = self.value(a);
                acc(a, grads, &|da| {
                    for i in 0..da.len() {
                        if xv[i] > floor {
                            da[i] += g[i];
                        }
                    }
                });
            }
            Op::MulConst { a, ref c } => acc(a, grads, &|da| da.iter_mut().zip(g.iter().zip(c)).for_each(|(d, (gv, cv))| *d += gv * cv)),
            Op::MaskRows { a, ref mask, width } => acc(a, grads, &|da| {
                for (r, &m) in mask.iter().enumerate() {
                    for j in r * width..(r + 1) * width {
                        da[j] += g[j] * m;
                    }
                }
            }),
            Op::Concat { a, b, ca, cb } => {
                let w = ca + cb;
                acc(a, grads, &|da| {
                    for (dr, gr) in da.chunks_mut(ca).zip(g.chunks(w)) {
                        dr.iter_mut().zip(&gr[..ca]).for_each(|(d, v)| *d += v);
                    }
                });
                acc(b, grads, &|db| {
                    for (dr, gr) in db.chunks_mut(cb).zip(g.chunks(w)) {
                        dr.iter_mut().zip(&gr[ca..]).for_each(|(d, v)| *d += v);
                    }
                });
            }
            Op::GaussianLogpdf { x, mean, log_var, d } => {
                let (xv, mv, lv) = (self.value(x), self.value(mean), self.value(log_var));
                let scaled = |i: usize| (xv[i] - mv[i]) * (-lv[i]).exp();
                acc(x, grads, &|dx| (0..dx.len()).for_each(|i| dx[i] -= g[i / d] * scaled(i)));
                acc(mean, grads, &|dm| (0..dm.len()).for_each(|i| dm[i] += g[i / d] * scaled(i)));
                acc(log_var, grads, &|dl| {
                    (0..dl.len()).for_each(|i| {
                        let diff = xv[i] - mv[i];
                        dl[i] += g[i / d] * (-0.5 + 0.5 * diff * diff * (-lv[i]).exp());
                    })
                });
            }
            Op::KlDiag { mq, lq, mp, lp, d } => {
                let (mqv, lqv, mpv, lpv) = (self.value(mq), self.value(lq), self.value(mp), self.value(lp));
                let dmean = |i: usize| (mqv[i] - mpv[i]) * (-lpv[i]).exp();
                acc(mq, grads, &|dv| (0..dv.len()).for_each(|i| dv[i] += g[i / d] * dmean(i)));
                acc(mp, grads, &|dv| (0..dv.len()).for_each(|i| dv[i] -= g[i / d] * dmean(i)));
                acc(lq, grads, &|dv| (0..dv.len()).for_each(|i| dv[i] += g[i / d] * 0.5 * ((lqv[i] - lpv[i]).exp() - 1.0)));
                acc(lp, grads, &|dv| {
                    (0..dv.len()).for_each(|i| {
                        let diff = mqv[i] - mpv[i];
                        dv[i] += g[i / d] * 0.5 * (1.0 - (lqv[i] - lpv[i]).exp() - diff * diff * (-lpv[i]).exp());
                    })
                });
            }
            Op::SumLast { a, d } => acc(a, grads, &|da| (0..da.len()).for_each(|i| da[i] += g[i / d])),
            Op::Sum { a } => acc(a, grads, &|da| da.iter_mut().for_each(|v| *v += g[0])),
            Op::Reshape { a } => acc(a, grads, &|da| da.iter_mut().zip(g).for_each(|(d, v)| *d += v)),
        }
    }
}

/// Source frame of the far tap for output `t`, if in range.
fn far_source(t: usize, time: usize, dilation: usize, dir: ConvDirection) -> Option<usize> {
    match dir {
        ConvDirection::Causal => t.checked_sub(dilation),
        ConvDirection::AntiCausal => Some(t + dilation).filter(|&s| s < time),
    }
}

/// Output frame whose far tap reads source frame `s`, if any.
fn far_reader(s: usize, time: usize, dilation: usize, dir: ConvDirection) -> Option<usize> {
    match dir {
        ConvDirection::Causal => Some(s + dilation).filter(|&t| t < time),
        ConvDirection::AntiCausal => s.checked_sub(dilation),
    }
}

/// `-0.5 * ln(2 * pi)`, the log density of a standard normal at its mean.
pub fn standard_normal_log_density_at_mean() -> f64 {
    -0.5 * (2.0 * PI).ln()
}
