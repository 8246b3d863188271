//! Differentiable tensor ops: elementwise math, affine layers, shape
//! surgery, reductions. Convolution and normalization live in their own
//! modules.

use super::tape::{check_same_tape, BackwardOp, GradSink, NodeId, Var};
use super::{Real, Tensor};
use crate::error::{Error, Result};
use crate::par;

const PAR_CHUNK: usize = 1 << 14;

fn zip_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T + Sync) -> Vec<T> {
    debug_assert_eq!(a.len(), b.len());
    let mut out = vec![T::zero(); a.len()];
    par::for_each_chunk_mut(&mut out, PAR_CHUNK, |ci, chunk| {
        let lo = ci * PAR_CHUNK;
        for (i, o) in chunk.iter_mut().enumerate() {
            *o = f(a[lo + i], b[lo + i]);
        }
    });
    out
}

fn unary_map<T: Real>(a: &[T], f: impl Fn(T) -> T + Sync) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    par::for_each_chunk_mut(&mut out, PAR_CHUNK, |ci, chunk| {
        let lo = ci * PAR_CHUNK;
        for (i, o) in chunk.iter_mut().enumerate() {
            *o = f(a[lo + i]);
        }
    });
    out
}

fn require_same_shape<T: Real>(a: &Var<T>, b: &Var<T>) -> Result<Vec<usize>> {
    let sa = a.shape();
    if sa != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            sa,
            b.shape()
        )));
    }
    Ok(sa)
}

// ---------------------------------------------------------------- add / sub

struct AddBack {
    a: NodeId,
    b: NodeId,
    shape: Vec<usize>,
    sign_b: f64,
}

impl<T: Real> BackwardOp<T> for AddBack {
    fn backward(&self, g: &Tensor<T>, sink: &mut GradSink<T>) {
        sink.add_to(self.a, &self.shape, |dst| {
            for (d, &v) in dst.iter_mut().zip(g.data()) {
                *d += v;
            }
        });
        let s = T::from_f64(self.sign_b);
        sink.add_to(self.b, &self.shape, |dst| {
            for (d, &v) in dst.iter_mut().zip(g.data()) {
                *d += s * v;
            }
        });
    }
}

pub fn add<T: Real>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    check_same_tape(a, b)?;
    let shape = require_same_shape(a, b)?;
    let out = zip_map(a.value().data(), b.value().data(), |x, y| x + y);
    let needs = a.needs_grad() || b.needs_grad();
    Ok(a.tape().push(
        Tensor::from_vec(&shape, out)?,
        needs,
        needs.then(|| {
            Box::new(AddBack {
                a: a.id(),
                b: b.id(),
                shape: shape.clone(),
                sign_b: 1.0,
            }) as Box<dyn BackwardOp<T>>
        }),
    ))
}

pub fn sub<T: Real>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    check_same_tape(a, b)?;
    let shape = require_same_shape(a, b)?;
    let out = zip_map(a.value().data(), b.value().data(), |x, y| x - y);
    let needs = a.needs_grad() || b.needs_grad();
    Ok(a.tape().push(
        Tensor::from_vec(&shape, out)?,
        needs,
        needs.then(|| {
            Box::new(AddBack {
                a: a.id(),
                b: b.id(),
                shape: shape.clone(),
                sign_b: -1.0,
            }) as Box<dyn BackwardOp<T>>
        }),
    ))
}

// --------------------------------------------------------------------- mul

struct MulBack<T: Real> {
    a: NodeId,
    b: NodeId,
    av: std::rc::Rc<Tensor<T>>,
    bv: std::rc::Rc<Tensor<T>>,
}

impl<T: Real> BackwardOp<T> for MulBack<T> {
    fn backward(&self, g: &Tensor<T>, sink: &mut GradSink<T>) {
        sink.add_to(self.a, self.av.shape(), |dst| {
            for ((d, &v), &b) in dst.iter_mut().zip(g.data()).zip(self.bv.data()) {
                *d += v * b;
            }
        });
        sink.add_to(self.b, self.bv.shape(), |dst| {
            for ((d, &v), &a) in dst.iter_mut().zip(g.data()).zip(self.av.data()) {
                *d += v * a;
            }
        });
    }
}

pub fn mul<T: Real>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    check_same_tape(a, b)?;
    let shape = require_same_shape(a, b)?;
    let out = zip_map(a.value().data(), b.value().data(), |x, y| x * y);
    let needs = a.needs_grad() || b.needs_grad();
    Ok(a.tape().push(
        Tensor::from_vec(&shape, out)?,
        needs,
        needs.then(|| {
            Box::new(MulBack {
                a: a.id(),
                b: b.id(),
                av: a.value(),
                bv: b.value(),
            }) as Box<dyn BackwardOp<T>>
        }),
    ))
}

// ------------------------------------------------------------ scale / neg

struct ScaleBack<T: Real> {
    a: NodeId,
    c: T,
    shape: Vec<usize>,
}

impl<T: Real> BackwardOp<T> for ScaleBack<T> {
    fn backward(&self, g: &Tensor<T>, sink: &mut GradSink<T>) {
        let c = self.c;
        sink.add_to(self.a, &self.shape, |dst| {
            for (d, &v) in dst.iter_mut().zip(g.data()) {
                *d += c * v;
            }
        });
    }
}

pub fn scale<T: Real>(a: &Var<T>, c: T) -> Var<T> {
    let out = unary_map(a.value().data(), |x| x * c);
    let shape = a.shape();
    let needs = a.needs_grad();
    a.tape().push(
        Tensor::from_vec(&shape, out).unwrap(),
        needs,
        needs.then(|| {
            Box::new(ScaleBack {
                a: a.id(),
                c,
                shape: shape.clone(),
            }) as Box<dyn BackwardOp<T>>
        }),
    )
}

pub fn neg<T: Real>(a: &Var<T>) -> Var<T> {
    scale(a, -T::one())
}

pub fn add_scalar<T: Real>(a: &Var<T>, c: T) -> Var<T> {
    let out = unary_map(a.value().data(), |x| x + c);
    let shape = a.shape();
    let needs = a.needs_grad();
    a.tape().push(
        Tensor::from_vec(&shape, out).unwrap(),
        needs,
        needs.then(|| {
            Box::new(ScaleBack {
                a: a.id(),
                c: T::one(),
                shape: shape.clone(),
            }) as Box<dyn BackwardOp<T>>
        }),
    )
}

// ------------------------------------------------------------- activations

enum Act {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
}

struct ActBack<T: Real> {
    a: NodeId,
    act: Act,
    input: std::rc::Rc<Tensor<T>>,
    output: Tensor<T>,
}

impl<T: Real> BackwardOp<T> for ActBack<T> {
    fn backward(&self, g: &Tensor<T>, sink: &mut GradSink<T>) {
        sink.add_to(self.a, self.input.shape(), |dst| match self.act {
            Act::Relu => {
                for ((d, &v), &x) in dst.iter_mut().zip(g.data()).zip(self.input.data()) {
                    if x > T::zero() {
                        *d += v;
                    }
                }
            }
            Act::LeakyRelu(slope) => {
                let s = T::from_f64(slope);
                for ((d, &v), &x) in dst.iter_mut().zip(g.data()).zip(self.input.data()) {
                    *d += if x > T::zero() { v } else { s * v };
                }
            }
            Act::Sigmoid => {
                for ((d, &v), &y) in dst.iter_mut().zip(g.data()).zip(self.output.data()) {
                    *d += v * y * (T::one() - y);
                }
            }
        });
    }
}

fn activation<T: Real>(a: &Var<T>, act: Act) -> Var<T> {
    let out = match act {
        Act::Relu => unary_map(a.value().data(), |x| x.max(T::zero())),
        Act::LeakyRelu(slope) => {
            let s = T::from_f64(slope);
            unary_map(a.value().data(), |x| if x > T::zero() { x } else { s * x })
        }
        Act::Sigmoid => unary_map(a.value().data(), |x| {
            T::one() / (T::one() + (-x).exp())
        }),
    };
    let shape = a.shape();
    let out = Tensor::from_vec(&shape, out).unwrap();
    let needs = a.needs_grad();
    let op = needs.then(|| {
        Box::new(ActBack {
            a: a.id(),
            act,
            input: a.value(),
            output: out.clone(),
        }) as Box<dyn BackwardOp<T>>
    });
    a.tape().push(out, needs, op)
}

pub fn relu<T: Real>(a: &Var<T>) -> Var<T> {
    activation(a, Act::Relu)
}

pub fn leaky_relu<T: Real>(a: &Var<T>, slope: f64) -> Var<T> {
    activation(a, Act::LeakyRelu(slope))
}

pub fn sigmoid<T: Real>(a: &Var<T>) -> Var<T> {
    activation(a, Act::Sigmoid)
}

// ------------------------------------------------------------------ clamps

struct ClampScalarBack<T: Real> {
    a: NodeId,
    lo: T,
    hi: T,
    input: std::rc::Rc<Tensor<T>>,
}

impl<T: Real> BackwardOp<T> for ClampScalarBack<T> {
    fn backward(&self, g: &Tensor<T>, sink: &mut GradSink<T>) {
        sink.add_to(self.a, self.input.shape(), |dst| {
            for ((d, &v), &x) in dst.iter_mut().zip(g.data()).zip(self.input.data()) {
                if x > self.lo && x < self.hi {
                    *d += v;
                }
            }
        });
    }
}

/// Clamp to `[lo, hi]` with subgradient zero outside the open interval.
pub fn clamp_scalar<T: Real>(a: &Var<T>, lo: T, hi: T) -> Var<T> {
    let out = unary_map(a.value().data(), |x| x.max(lo).min(hi));
    let shape = a.shape();
    let needs = a.needs_grad();
    a.tape().push(
        Tensor::from_vec(&shape, out).unwrap(),
        needs,
        needs.then(|| {
            Box::new(ClampScalarBack {
                a: a.id(),
                lo,
                hi,
                input: a.value(),
            }) as Box<dyn BackwardOp<T>>
        }),
    )
}

struct ClampBoundsBack<T: Real> {
    a: NodeId,
    lo: Tensor<T>,
    hi: Tensor<T>,
    input: std::rc::Rc<Tensor<T>>,
}

impl<T: Real> BackwardOp<T> for ClampBoundsBack<T> {
    fn backward(&self, g: &Tensor<T>, sink: &mut GradSink<T>) {
        sink.add_to(self.a, self.input.shape(), |dst| {
            for i in 0..dst.len() {
                let x = self.input.data()[i];
                if x > self.lo.data()[i] && x < self.hi.data()[i] {
                    dst[i] += g.data()[i];
                }
            }
        });
    }
}

/// Per-element clamp against constant bound tensors (the bounds carry no
/// gradient). Used by the advection limiter.
pub fn clamp_bounds<T: Real>(a: &Var<T>, lo: Tensor<T>, hi: Tensor<T>) -> Result<Var<T>> {
    let shape = a.shape();
    if lo.shape() != shape.as_slice() || hi.shape() != shape.as_slice() {
        return Err(Error::ShapeMismatch("clamp bounds shape".into()));
    }
    let av = a.value();
    let mut out = vec![T::zero(); av.numel()];
    for i in 0..out.len() {
        out[i] = av.data()[i].max(lo.data()[i]).min(hi.data()[i]);
    }
    let needs = a.needs_grad();
    Ok(a.tape().push(
        Tensor::from_vec(&shape, out)?,
        needs,
        needs.then(|| {
            Box::new(ClampBoundsBack {
                a: a.id(),
                lo,
                hi,
                input: a.value(),
            }) as Box<dyn BackwardOp<T>>
        }),
    ))
}

/// Elementwise multiply by a constant tensor (0/1 wall masks and the like).
pub fn mask_mul<T: Real>(a: &Var<T>, mask: Tensor<T>) -> Result<Var<T>> {
    let shape = a.shape();
    if mask.shape() != shape.as_slice() {
        return Err(Error::ShapeMismatch("mask shape".into()));
    }
    let m = a.tape().constant(mask);
    mul(a, &m)
}

// -------------------------------------------------------------- reductions

struct SumBack {
    a: NodeId,
    shape: Vec<usize>,
    scale: f64,
}

impl<T: Real> BackwardOp<T> for SumBack {
    fn backward(&self, g: &Tensor<T>, sink: &mut GradSink<T>) {
        let gv = g.item() * T::from_f64(self.scale);
        sink.add_to(self.a, &self.shape, |dst| {
            for d in dst.iter_mut() {
                *d += gv;
            }
        });
    }
}

pub fn sum<T: Real>(a: &Var<T>) -> Var<T> {
    let s = par::sum_chunked(a.value().data());
    let needs = a.needs_grad();
    a.tape().push(
        Tensor::scalar(s),
        needs,
        needs.then(|| {
            Box::new(SumBack {
                a: a.id(),
                shape: a.shape(),
                scale: 1.0,
            }) as Box<dyn BackwardOp<T>>
        }),
    )
}

pub fn mean<T: Real>(a: &Var<T>) -> Var<T> {
    let n = a.value().numel();
    let s = par::sum_chunked(a.value().data()) / T::from_usize(n);
    let needs = a.needs_grad();
    a.tape().push(
        Tensor::scalar(s),
        needs,
        needs.then(|| {
            Box::new(SumBack {
                a: a.id(),
                shape: a.shape(),
                scale: 1.0 / n as f64,
            }) as Box<dyn BackwardOp<T>>
        }),
    )
}

struct SumSqVsBack<T: Real> {
    a: NodeId,
    pred: std::rc::Rc<Tensor<T>>,
    target: Tensor<T>,
}

impl<T: Real> BackwardOp<T> for SumSqVsBack<T> {
    fn backward(&self, g: &Tensor<T>, sink: &mut GradSink<T>) {
        let gv = g.item();
        let two = T::from_f64(2.0);
        sink.add_to(self.a, self.pred.shape(), |dst| {
            for ((d, &p), &t) in dst
                .iter_mut()
                .zip(self.pred.data())
                .zip(self.target.data())
            {
                *d += two * (p - t) * gv;
            }
        });
    }
}

/// Sum of squared differences against a constant target.
pub fn sum_sq_vs<T: Real>(pred: &Var<T>, target: &Tensor<T>) -> Result<Var<T>> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "pred {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let pv = pred.value();
    let n = pv.numel();
    let n_chunks = n.div_ceil(par::REDUCE_CHUNK);
    let partials = par::map_indices(n_chunks, |ci| {
        let lo = ci * par::REDUCE_CHUNK;
        let hi = (lo + par::REDUCE_CHUNK).min(n);
        let mut s = T::zero();
        for i in lo..hi {
            let d = pv.data()[i] - target.data()[i];
            s += d * d;
        }
        s
    });
    let mut s = T::zero();
    for p in partials {
        s += p;
    }
    let needs = pred.needs_grad();
    Ok(pred.tape().push(
        Tensor::scalar(s),
        needs,
        needs.then(|| {
            Box::new(SumSqVsBack {
                a: pred.id(),
                pred: pred.value(),
                target: target.clone(),
            }) as Box<dyn BackwardOp<T>>
        }),
    ))
}

/// Mean squared error against a constant target.
pub fn mse_vs<T: Real>(pred: &Var<T>, target: &Tensor<T>) -> Result<Var<T>> {
    let n = pred.value().numel();
    let ss = sum_sq_vs(pred, target)?;
    Ok(scale(&ss, T::one() / T::from_usize(n)))
}

// ------------------------------------------------------------------ linear

/// `y = x @ w^T [+ b]`, parallel over row blocks; the weight-gradient
/// reduction over rows is merged in fixed block order.
fn gemm_x_wt<T: Real>(x: &[T], n: usize, fin: usize, w: &[T], fout: usize, y: &mut [T]) {
    const BLK: usize = 1024;
    let n_blocks = n.div_ceil(BLK).max(1);
    // split y into row blocks; each job owns a disjoint region
    let blocks: Vec<(usize, &mut [T])> = {
        let mut v = Vec::with_capacity(n_blocks);
        let mut rest = y;
        let mut row = 0;
        while row < n {
            let rows = BLK.min(n - row);
            let (head, tail) = rest.split_at_mut(rows * fout);
            v.push((row, head));
            rest = tail;
            row += rows;
        }
        v
    };
    let do_block = |(row0, yblk): &mut (usize, &mut [T])| {
        let rows = yblk.len() / fout;
        T::gemm(
            rows,
            fin,
            fout,
            T::one(),
            &x[*row0 * fin..],
            fin as isize,
            1,
            w,
            1,
            fin as isize,
            T::zero(),
            yblk,
            fout as isize,
            1,
        );
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        let mut blocks = blocks;
        blocks.par_iter_mut().for_each(do_block);
    }
    #[cfg(not(feature = "parallel"))]
    {
        let mut blocks = blocks;
        blocks.iter_mut().for_each(do_block);
    }
}

struct LinearBack<T: Real> {
    x: NodeId,
    w: NodeId,
    b: Option<NodeId>,
    xv: std::rc::Rc<Tensor<T>>,
    wv: std::rc::Rc<Tensor<T>>,
    n: usize,
    fin: usize,
    fout: usize,
}

impl<T: Real> BackwardOp<T> for LinearBack<T> {
    fn backward(&self, g: &Tensor<T>, sink: &mut GradSink<T>) {
        let (n, fin, fout) = (self.n, self.fin, self.fout);
        if sink.wants(self.x) {
            // dX = dY @ W
            let mut dx = vec![T::zero(); n * fin];
            const BLK: usize = 1024;
            let mut blocks: Vec<(usize, &mut [T])> = Vec::new();
            let mut rest = dx.as_mut_slice();
            let mut row = 0;
            while row < n {
                let rows = BLK.min(n - row);
                let (head, tail) = rest.split_at_mut(rows * fin);
                blocks.push((row, head));
                rest = tail;
                row += rows;
            }
            let wv = self.wv.data();
            let gd = g.data();
            let do_block = |(row0, dxblk): &mut (usize, &mut [T])| {
                let rows = dxblk.len() / fin;
                T::gemm(
                    rows,
                    fout,
                    fin,
                    T::one(),
                    &gd[*row0 * fout..],
                    fout as isize,
                    1,
                    wv,
                    fin as isize,
                    1,
                    T::zero(),
                    dxblk,
                    fin as isize,
                    1,
                );
            };
            #[cfg(feature = "parallel")]
            {
                use rayon::prelude::*;
                blocks.par_iter_mut().for_each(do_block);
            }
            #[cfg(not(feature = "parallel"))]
            blocks.iter_mut().for_each(do_block);
            sink.add_tensor(self.x, Tensor::from_vec(&[n, fin], dx).unwrap());
        }
        if sink.wants(self.w) {
            // dW = dY^T @ X, reduced over rows in fixed block order
            const BLK: usize = 8192;
            let jobs = n.div_ceil(BLK).max(1);
            let xv = self.xv.data();
            let gd = g.data();
            let dw = par::scatter_merge(fout * fin, jobs, |j, buf| {
                let row0 = j * BLK;
                let rows = BLK.min(n - row0);
                T::gemm(
                    fout,
                    rows,
                    fin,
                    T::one(),
                    &gd[row0 * fout..],
                    1,
                    fout as isize,
                    &xv[row0 * fin..],
                    fin as isize,
                    1,
                    T::one(),
                    buf,
                    fin as isize,
                    1,
                );
            });
            sink.add_tensor(self.w, Tensor::from_vec(&[fout, fin], dw).unwrap());
        }
        if let Some(b) = self.b {
            if sink.wants(b) {
                let gd = g.data();
                sink.add_to(b, &[fout], |dst| {
                    for r in 0..n {
                        for (c, d) in dst.iter_mut().enumerate() {
                            *d += gd[r * fout + c];
                        }
                    }
                });
            }
        }
    }
}

/// Affine layer: `x:[N,F_in] @ w:[F_out,F_in]^T + b:[F_out]`.
pub fn linear<T: Real>(x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>) -> Result<Var<T>> {
    check_same_tape(x, w)?;
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
        return Err(Error::ShapeMismatch(format!(
            "linear: x {:?} w {:?}",
            xs, ws
        )));
    }
    let (n, fin, fout) = (xs[0], xs[1], ws[0]);
    if let Some(b) = b {
        check_same_tape(x, b)?;
        if b.shape() != [fout] {
            return Err(Error::ShapeMismatch("linear bias".into()));
        }
    }
    let mut y = vec![T::zero(); n * fout];
    gemm_x_wt(x.value().data(), n, fin, w.value().data(), fout, &mut y);
    if let Some(b) = b {
        let bv = b.value();
        par::for_each_chunk_mut(&mut y, fout, |_, row| {
            for (v, &bi) in row.iter_mut().zip(bv.data()) {
                *v += bi;
            }
        });
    }
    let needs = x.needs_grad() || w.needs_grad() || b.is_some_and(|b| b.needs_grad());
    Ok(x.tape().push(
        Tensor::from_vec(&[n, fout], y)?,
        needs,
        needs.then(|| {
            Box::new(LinearBack {
                x: x.id(),
                w: w.id(),
                b: b.map(|b| b.id()),
                xv: x.value(),
                wv: w.value(),
                n,
                fin,
                fout,
            }) as Box<dyn BackwardOp<T>>
        }),
    ))
}

// ---------------------------------------------------------- concat / slice

struct ConcatBack {
    parents: Vec<(NodeId, Vec<usize>, usize)>, // (id, shape, axis length)
    axis: usize,
    outer: usize,
    inner: usize,
}

impl<T: Real> BackwardOp<T> for ConcatBack {
    fn backward(&self, g: &Tensor<T>, sink: &mut GradSink<T>) {
        let total_axis: usize = self.parents.iter().map(|p| p.2).sum();
        let mut offset = 0;
        for (id, shape, alen) in &self.parents {
            if sink.wants(*id) {
                let (alen, offset) = (*alen, offset);
                let (inner, total_axis) = (self.inner, total_axis);
                sink.add_to(*id, shape, |dst| {
                    for o in 0..self.outer {
                        let src_base = (o * total_axis + offset) * inner;
                        let dst_base = o * alen * inner;
                        for i in 0..alen * inner {
                            dst[dst_base + i] += g.data()[src_base + i];
                        }
                    }
                });
            }
            offset += alen;
        }
    }
}

/// Concatenate along `axis`; all other dims must match.
pub fn concat<T: Real>(vars: &[&Var<T>], axis: usize) -> Result<Var<T>> {
    if vars.is_empty() {
        return Err(Error::InvalidArg("concat of nothing".into()));
    }
    let base = vars[0].shape();
    if axis >= base.len() {
        return Err(Error::InvalidArg(format!("concat axis {axis}")));
    }
    let mut axis_total = 0;
    for v in vars {
        check_same_tape(vars[0], v)?;
        let s = v.shape();
        if s.len() != base.len() {
            return Err(Error::ShapeMismatch("concat rank".into()));
        }
        for (d, (&a, &b)) in s.iter().zip(base.iter()).enumerate() {
            if d != axis && a != b {
                return Err(Error::ShapeMismatch(format!(
                    "concat dim {d}: {a} vs {b}"
                )));
            }
        }
        axis_total += s[axis];
    }
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let mut out_shape = base.clone();
    out_shape[axis] = axis_total;
    let mut out = vec![T::zero(); outer * axis_total * inner];
    let mut offset = 0;
    for v in vars {
        let s = v.shape();
        let alen = s[axis];
        let val = v.value();
        for o in 0..outer {
            let dst_base = (o * axis_total + offset) * inner;
            let src_base = o * alen * inner;
            out[dst_base..dst_base + alen * inner]
                .copy_from_slice(&val.data()[src_base..src_base + alen * inner]);
        }
        offset += alen;
    }
    let needs = vars.iter().any(|v| v.needs_grad());
    let parents: Vec<(NodeId, Vec<usize>, usize)> = vars
        .iter()
        .map(|v| (v.id(), v.shape(), v.shape()[axis]))
        .collect();
    Ok(vars[0].tape().push(
        Tensor::from_vec(&out_shape, out)?,
        needs,
        needs.then(|| {
            Box::new(ConcatBack {
                parents,
                axis,
                outer,
                inner,
            }) as Box<dyn BackwardOp<T>>
        }),
    ))
}

struct SliceBack {
    a: NodeId,
    src_shape: Vec<usize>,
    axis_len: usize,
    start: usize,
    len: usize,
    outer: usize,
    inner: usize,
}

impl<T: Real> BackwardOp<T> for SliceBack {
    fn backward(&self, g: &Tensor<T>, sink: &mut GradSink<T>) {
        sink.add_to(self.a, &self.src_shape, |dst| {
            for o in 0..self.outer {
                let dst_base = (o * self.axis_len + self.start) * self.inner;
                let src_base = o * self.len * self.inner;
                for i in 0..self.len * self.inner {
                    dst[dst_base + i] += g.data()[src_base + i];
                }
            }
        });
    }
}

/// Take `len` entries starting at `start` along `axis`.
pub fn slice<T: Real>(a: &Var<T>, axis: usize, start: usize, len: usize) -> Result<Var<T>> {
    let s = a.shape();
    if axis >= s.len() || start + len > s[axis] {
        return Err(Error::InvalidArg(format!(
            "slice {start}..{} of axis {axis} in {:?}",
            start + len,
            s
        )));
    }
    let outer: usize = s[..axis].iter().product();
    let inner: usize = s[axis + 1..].iter().product();
    let mut out_shape = s.clone();
    out_shape[axis] = len;
    let val = a.value();
    let mut out = vec![T::zero(); outer * len * inner];
    for o in 0..outer {
        let src_base = (o * s[axis] + start) * inner;
        let dst_base = o * len * inner;
        out[dst_base..dst_base + len * inner]
            .copy_from_slice(&val.data()[src_base..src_base + len * inner]);
    }
    let needs = a.needs_grad();
    Ok(a.tape().push(
        Tensor::from_vec(&out_shape, out)?,
        needs,
        needs.then(|| {
            Box::new(SliceBack {
                a: a.id(),
                src_shape: s.clone(),
                axis_len: s[axis],
                start,
                len,
                outer,
                inner,
            }) as Box<dyn BackwardOp<T>>
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ad::Tape;

    #[test]
    fn square_gradient() {
        // loss = x^2 at x = 3 -> dloss/dx = 6
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let loss = mul(&x, &x).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&x).unwrap().item(), 6.0);
    }

    #[test]
    fn gradient_accumulates_over_both_paths() {
        // y = x*a + x*b -> dy/dx = a + b
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let a = tape.constant(Tensor::scalar(3.0));
        let b = tape.constant(Tensor::scalar(5.0));
        let y = add(&mul(&x, &a).unwrap(), &mul(&x, &b).unwrap()).unwrap();
        let grads = tape.backward(&y).unwrap();
        assert_eq!(grads.wrt(&x).unwrap().item(), 8.0);
    }

    #[test]
    fn detached_tensor_contributes_no_gradient() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let d = x.detach();
        let y = mul(&d, &d).unwrap();
        let grads = tape.backward(&y).unwrap();
        assert!(grads.wrt(&x).is_none());
    }

    #[test]
    fn second_backward_rejected() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0), true);
        let y = mul(&x, &x).unwrap();
        tape.backward(&y).unwrap();
        assert!(tape.backward(&y).is_err());
    }

    #[test]
    fn linear_identity() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(
            Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
            false,
        );
        let eye = Tensor::from_vec(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let w = tape.leaf(eye, false);
        let y = linear(&x, &w, None).unwrap();
        assert_eq!(y.value().data(), x.value().data());
    }

    #[test]
    fn linear_scalar_gradients() {
        // y = w*x + b with 1x1 shapes: dy/dw = x
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 1], vec![4.0]).unwrap(), true);
        let w = tape.leaf(Tensor::from_vec(&[1, 1], vec![2.5]).unwrap(), true);
        let b = tape.leaf(Tensor::from_vec(&[1], vec![0.5]).unwrap(), true);
        let y = linear(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.value().data()[0], 10.5);
        let loss = sum(&y);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&w).unwrap().data()[0], 4.0);
        assert_eq!(grads.wrt(&x).unwrap().data()[0], 2.5);
        assert_eq!(grads.wrt(&b).unwrap().data()[0], 1.0);
    }

    #[test]
    fn concat_slice_roundtrip() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.leaf(Tensor::from_vec(&[2, 2], vec![1., 2., 3., 4.]).unwrap(), true);
        let b = tape.leaf(Tensor::from_vec(&[2, 1], vec![5., 6.]).unwrap(), true);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.value().data(), &[1., 2., 5., 3., 4., 6.]);
        let back = slice(&c, 1, 2, 1).unwrap();
        assert_eq!(back.value().data(), &[5., 6.]);
        let loss = sum(&back);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&b).unwrap().data(), &[1., 1.]);
        assert!(grads.wrt(&a).is_none());
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
        assert_eq!(relu(&x).value().data(), &[0.0, 0.0, 2.0]);
        let s = sigmoid(&tape.constant(Tensor::scalar(0.0)));
        assert_eq!(s.item(), 0.5);
    }
}
