//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Values are immutable once recorded. Every op appends a node holding the
//! result plus (when some input is grad-connected) a backward closure that
//! scatters contributions to its parents. Node order is creation order, so
//! replaying the tape backwards visits a valid reverse topological order and
//! a single thread of control yields bit-identical gradients run to run.

use std::cell::RefCell;
use std::rc::Rc;

use crate::conv::{conv_forward, conv_grad_input, conv_grad_kernel, deconv_geom, ConvGeom, Padding};
use crate::error::{Error, Result};
use crate::linalg::{gemm, gemm_a_bt, gemm_at_b};
use crate::scalar::Scalar;
use crate::tensor::{broadcast_shape, broadcast_src_index, Tensor};

type BackFn<E> = Box<dyn Fn(&Tensor<E>, &mut GradSink<E>)>;

struct Node<E: Scalar> {
    grad_connected: bool,
    backward: Option<BackFn<E>>,
}

struct TapeInner<E: Scalar> {
    nodes: Vec<Node<E>>,
}

/// Recording context for one forward pass. Clone handles freely; they share
/// the same underlying tape.
pub struct Tape<E: Scalar> {
    inner: Rc<RefCell<TapeInner<E>>>,
}

impl<E: Scalar> Clone for Tape<E> {
    fn clone(&self) -> Self {
        Tape { inner: Rc::clone(&self.inner) }
    }
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a tensor recorded on a tape.
pub struct Var<E: Scalar> {
    tape: Tape<E>,
    id: usize,
    value: Rc<Tensor<E>>,
}

impl<E: Scalar> Clone for Var<E> {
    fn clone(&self) -> Self {
        Var { tape: self.tape.clone(), id: self.id, value: Rc::clone(&self.value) }
    }
}

/// Gradient accumulator indexed by node id.
pub struct GradSink<E: Scalar> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Scalar> GradSink<E> {
    fn accum(&mut self, id: usize, contribution: Tensor<E>) {
        match &mut self.grads[id] {
            Some(existing) => {
                debug_assert_eq!(existing.shape(), contribution.shape());
                for (dst, src) in existing.data_mut().iter_mut().zip(contribution.data()) {
                    *dst += *src;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }
}

/// Gradients of one scalar loss with respect to every tape node.
pub struct Gradients<E: Scalar> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Scalar> Gradients<E> {
    /// Gradient for `var`; zero tensor of matching shape if no path reached it.
    pub fn of(&self, var: &Var<E>) -> Tensor<E> {
        match self.grads.get(var.id) {
            Some(Some(g)) => g.clone(),
            _ => Tensor::zeros(var.shape()),
        }
    }

    pub fn take(&mut self, var: &Var<E>) -> Tensor<E> {
        match self.grads.get_mut(var.id).and_then(Option::take) {
            Some(g) => g,
            None => Tensor::zeros(var.shape()),
        }
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape { inner: Rc::new(RefCell::new(TapeInner { nodes: Vec::new() })) }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<E>, grad_connected: bool, backward: Option<BackFn<E>>) -> Var<E> {
        let value = Rc::new(value);
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node { grad_connected, backward });
        Var { tape: self.clone(), id, value }
    }

    /// Record a leaf. Gradients are produced for it iff `requires_grad`.
    pub fn leaf(&self, value: Tensor<E>, requires_grad: bool) -> Var<E> {
        self.push(value, requires_grad, None)
    }

    /// Convenience: non-differentiable constant.
    pub fn constant(&self, value: Tensor<E>) -> Var<E> {
        self.leaf(value, false)
    }

    /// Reverse pass from a scalar loss. Gradient accumulation across fan-out
    /// is additive in reverse node order.
    pub fn backward(&self, loss: &Var<E>) -> Result<Gradients<E>> {
        if !Rc::ptr_eq(&loss.tape.inner, &self.inner) {
            return Err(Error::contract("loss recorded on a different tape"));
        }
        if loss.value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward() needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let inner = self.inner.borrow();
        let mut sink = GradSink { grads: (0..inner.nodes.len()).map(|_| None).collect() };
        sink.grads[loss.id] = Some(Tensor::full(loss.shape(), E::one()));
        for id in (0..=loss.id).rev() {
            let node = &inner.nodes[id];
            if node.backward.is_none() {
                continue;
            }
            let Some(gout) = sink.grads[id].take() else { continue };
            if let Some(back) = &node.backward {
                back(&gout, &mut sink);
            }
        }
        Ok(Gradients { grads: sink.grads })
    }
}

// ── Var accessors ────────────────────────────────────────────────────

impl<E: Scalar> Var<E> {
    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    pub fn value(&self) -> &Tensor<E> {
        &self.value
    }

    pub fn tape(&self) -> &Tape<E> {
        &self.tape
    }

    pub fn grad_connected(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].grad_connected
    }

    pub fn item_f64(&self) -> Result<f64> {
        Ok(self.value.item()?.to_f64())
    }

    fn same_tape(&self, other: &Var<E>) -> Result<()> {
        if Rc::ptr_eq(&self.tape.inner, &other.tape.inner) {
            Ok(())
        } else {
            Err(Error::contract("operands recorded on different tapes"))
        }
    }
}

// ── elementwise helpers ──────────────────────────────────────────────

/// Evaluate a broadcast binary op; `f` the value map, `dfa`/`dfb` the
/// partials with respect to each operand at the broadcast element pair.
fn broadcast_apply<E: Scalar>(
    a: &Tensor<E>,
    b: &Tensor<E>,
    out_shape: &[usize],
    f: impl Fn(E, E) -> E,
) -> Tensor<E> {
    let numel: usize = out_shape.iter().product();
    if a.shape() == out_shape && b.shape() == out_shape {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(out_shape, data).expect("shape consistent");
    }
    // trailing-suffix fast path: b broadcast over leading axes of a
    if a.shape() == out_shape && is_suffix(b.shape(), out_shape) && b.numel() > 0 {
        let bl = b.numel();
        let mut data = Vec::with_capacity(numel);
        for chunk in a.data().chunks(bl) {
            data.extend(chunk.iter().zip(b.data()).map(|(&x, &y)| f(x, y)));
        }
        return Tensor::new(out_shape, data).expect("shape consistent");
    }
    let mut data = Vec::with_capacity(numel);
    for i in 0..numel {
        let av = a.data()[broadcast_src_index(i, out_shape, a.shape())];
        let bv = b.data()[broadcast_src_index(i, out_shape, b.shape())];
        data.push(f(av, bv));
    }
    Tensor::new(out_shape, data).expect("shape consistent")
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

impl<E: Scalar> Var<E> {
    fn binary(
        &self,
        other: &Var<E>,
        f: impl Fn(E, E) -> E + 'static,
        dfa: impl Fn(E, E) -> E + 'static,
        dfb: impl Fn(E, E) -> E + 'static,
    ) -> Result<Var<E>> {
        self.same_tape(other)?;
        let out_shape = broadcast_shape(self.shape(), other.shape())?;
        let out = broadcast_apply(&self.value, &other.value, &out_shape, &f);
        let connected = self.grad_connected() || other.grad_connected();
        let backward: Option<BackFn<E>> = if connected {
            let a = Rc::clone(&self.value);
            let b = Rc::clone(&other.value);
            let (aid, bid) = (self.id, other.id);
            let (a_conn, b_conn) = (self.grad_connected(), other.grad_connected());
            let out_shape = out_shape.clone();
            Some(Box::new(move |gout, sink| {
                let numel = gout.numel();
                let full_a = a.shape() == out_shape.as_slice();
                let full_b = b.shape() == out_shape.as_slice();
                if a_conn {
                    let mut da = Tensor::zeros(a.shape());
                    for i in 0..numel {
                        let ia = if full_a { i } else { broadcast_src_index(i, &out_shape, a.shape()) };
                        let ib = if full_b { i } else { broadcast_src_index(i, &out_shape, b.shape()) };
                        da.data_mut()[ia] += gout.data()[i] * dfa(a.data()[ia], b.data()[ib]);
                    }
                    sink.accum(aid, da);
                }
                if b_conn {
                    let mut db = Tensor::zeros(b.shape());
                    for i in 0..numel {
                        let ia = if full_a { i } else { broadcast_src_index(i, &out_shape, a.shape()) };
                        let ib = if full_b { i } else { broadcast_src_index(i, &out_shape, b.shape()) };
                        db.data_mut()[ib] += gout.data()[i] * dfb(a.data()[ia], b.data()[ib]);
                    }
                    sink.accum(bid, db);
                }
            }))
        } else {
            None
        };
        Ok(self.tape.push(out, connected, backward))
    }

    fn unary(
        &self,
        f: impl Fn(E) -> E,
        // derivative as a function of (input, output)
        df: impl Fn(E, E) -> E + 'static,
    ) -> Var<E> {
        let out = self.value.map(&f);
        let connected = self.grad_connected();
        let backward: Option<BackFn<E>> = if connected {
            let a = Rc::clone(&self.value);
            let o = Rc::new(out.clone());
            let aid = self.id;
            Some(Box::new(move |gout, sink| {
                let data = gout
                    .data()
                    .iter()
                    .zip(a.data().iter().zip(o.data()))
                    .map(|(&g, (&x, &y))| g * df(x, y))
                    .collect();
                sink.accum(aid, Tensor::new(a.shape(), data).expect("same shape"));
            }))
        } else {
            None
        };
        self.tape.push(out, connected, backward)
    }

    pub fn add(&self, other: &Var<E>) -> Result<Var<E>> {
        self.binary(other, |x, y| x + y, |_, _| E::one(), |_, _| E::one())
    }

    pub fn sub(&self, other: &Var<E>) -> Result<Var<E>> {
        self.binary(other, |x, y| x - y, |_, _| E::one(), |_, _| -E::one())
    }

    pub fn mul(&self, other: &Var<E>) -> Result<Var<E>> {
        self.binary(other, |x, y| x * y, |_, y| y, |x, _| x)
    }

    pub fn neg(&self) -> Var<E> {
        self.unary(|x| -x, |_, _| -E::one())
    }

    pub fn exp(&self) -> Result<Var<E>> {
        let out = self.unary(|x| x.exp(), |_, y| y);
        if !out.value().all_finite() {
            return Err(Error::domain("exp overflow produced non-finite values"));
        }
        Ok(out)
    }

    pub fn ln(&self) -> Result<Var<E>> {
        if self.value.data().iter().any(|&v| v <= E::zero() || !v.is_finite()) {
            return Err(Error::domain("ln requires strictly positive finite inputs"));
        }
        Ok(self.unary(|x| x.ln(), |x, _| E::one() / x))
    }

    pub fn sigmoid(&self) -> Var<E> {
        self.unary(
            |x| E::one() / (E::one() + (-x).exp()),
            |_, y| y * (E::one() - y),
        )
    }

    pub fn tanh(&self) -> Var<E> {
        self.unary(|x| x.tanh(), |_, y| E::one() - y * y)
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<E> {
        let s = E::from_f64(slope);
        self.unary(
            move |x| if x >= E::zero() { x } else { s * x },
            move |x, _| if x >= E::zero() { E::one() } else { s },
        )
    }

    /// Clamp with pass-through gradient strictly inside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var<E> {
        let (lo, hi) = (E::from_f64(lo), E::from_f64(hi));
        self.unary(
            move |x| x.max_val(lo).min_val(hi),
            move |x, _| if x > lo && x < hi { E::one() } else { E::zero() },
        )
    }

    pub fn mul_scalar(&self, k: f64) -> Var<E> {
        let kk = E::from_f64(k);
        self.unary(move |x| x * kk, move |_, _| kk)
    }

    pub fn add_scalar(&self, k: f64) -> Var<E> {
        let kk = E::from_f64(k);
        self.unary(move |x| x + kk, |_, _| E::one())
    }

    pub fn square(&self) -> Var<E> {
        let two = E::from_f64(2.0);
        self.unary(|x| x * x, move |x, _| two * x)
    }
}

// ── matmul / conv ────────────────────────────────────────────────────

impl<E: Scalar> Var<E> {
    /// [m,k] x [k,n] -> [m,n]
    pub fn matmul(&self, other: &Var<E>) -> Result<Var<E>> {
        self.same_tape(other)?;
        let (ashape, bshape) = (self.shape(), other.shape());
        if ashape.len() != 2 || bshape.len() != 2 {
            return Err(Error::shape(format!(
                "matmul needs 2-d operands, got {:?} x {:?}",
                ashape, bshape
            )));
        }
        let (m, k) = (ashape[0], ashape[1]);
        let (k2, n) = (bshape[0], bshape[1]);
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dims differ: {:?} x {:?}",
                ashape, bshape
            )));
        }
        let mut out = vec![E::zero(); m * n];
        gemm(self.value.data(), other.value.data(), &mut out, m, k, n);
        let connected = self.grad_connected() || other.grad_connected();
        let backward: Option<BackFn<E>> = if connected {
            let a = Rc::clone(&self.value);
            let b = Rc::clone(&other.value);
            let (aid, bid) = (self.id, other.id);
            let (a_conn, b_conn) = (self.grad_connected(), other.grad_connected());
            Some(Box::new(move |gout, sink| {
                if a_conn {
                    let mut da = vec![E::zero(); m * k];
                    gemm_a_bt(gout.data(), b.data(), &mut da, m, k, n);
                    sink.accum(aid, Tensor::new(&[m, k], da).expect("shape"));
                }
                if b_conn {
                    let mut db = vec![E::zero(); k * n];
                    gemm_at_b(a.data(), gout.data(), &mut db, m, k, n);
                    sink.accum(bid, Tensor::new(&[k, n], db).expect("shape"));
                }
            }))
        } else {
            None
        };
        Ok(self.tape.push(Tensor::new(&[m, n], out)?, connected, backward))
    }

    /// Cross-correlation of NHWC input with [kh,kw,C,F] kernel.
    pub fn conv2d(&self, kernel: &Var<E>, stride: usize, padding: Padding) -> Result<Var<E>> {
        self.same_tape(kernel)?;
        let g = ConvGeom::resolve(self.shape(), kernel.shape(), stride, padding)?;
        let out = conv_forward(self.value.data(), kernel.value.data(), &g);
        let out = Tensor::new(&g.out_shape(), out)?;
        let connected = self.grad_connected() || kernel.grad_connected();
        let backward = self.conv_backward(kernel, g, false, connected);
        Ok(self.tape.push(out, connected, backward))
    }

    /// Transposed convolution: input [N,h,w,F], kernel [kh,kw,C,F],
    /// output [N,(h-1)*stride+kh,(w-1)*stride+kw,C]. Adjoint of `conv2d`
    /// with the same kernel and valid padding.
    pub fn deconv2d(&self, kernel: &Var<E>, stride: usize) -> Result<Var<E>> {
        self.same_tape(kernel)?;
        let g = deconv_geom(self.shape(), kernel.shape(), stride)?;
        let out = conv_grad_input(self.value.data(), kernel.value.data(), &g);
        let out = Tensor::new(&[g.n, g.h, g.w, g.c], out)?;
        let connected = self.grad_connected() || kernel.grad_connected();
        let backward = self.conv_backward(kernel, g, true, connected);
        Ok(self.tape.push(out, connected, backward))
    }

    fn conv_backward(
        &self,
        kernel: &Var<E>,
        g: ConvGeom,
        transposed: bool,
        connected: bool,
    ) -> Option<BackFn<E>> {
        if !connected {
            return None;
        }
        let input = Rc::clone(&self.value);
        let kval = Rc::clone(&kernel.value);
        let kshape = kernel.shape().to_vec();
        let in_shape = self.shape().to_vec();
        let (iid, kid) = (self.id, kernel.id);
        let (i_conn, k_conn) = (self.grad_connected(), kernel.grad_connected());
        Some(Box::new(move |gout, sink| {
            if transposed {
                if i_conn {
                    let di = conv_forward(gout.data(), kval.data(), &g);
                    sink.accum(iid, Tensor::new(&in_shape, di).expect("shape"));
                }
                if k_conn {
                    let dk = conv_grad_kernel(gout.data(), input.data(), &g);
                    sink.accum(kid, Tensor::new(&kshape, dk).expect("shape"));
                }
            } else {
                if i_conn {
                    let di = conv_grad_input(gout.data(), kval.data(), &g);
                    sink.accum(iid, Tensor::new(&in_shape, di).expect("shape"));
                }
                if k_conn {
                    let dk = conv_grad_kernel(input.data(), gout.data(), &g);
                    sink.accum(kid, Tensor::new(&kshape, dk).expect("shape"));
                }
            }
        }))
    }
}

// ── reductions and shape ops ─────────────────────────────────────────

impl<E: Scalar> Var<E> {
    pub fn sum_all(&self) -> Var<E> {
        let total: E = self.value.data().iter().copied().sum();
        let connected = self.grad_connected();
        let backward: Option<BackFn<E>> = if connected {
            let shape = self.shape().to_vec();
            let aid = self.id;
            Some(Box::new(move |gout, sink| {
                let g = gout.data()[0];
                sink.accum(aid, Tensor::full(&shape, g));
            }))
        } else {
            None
        };
        self.tape.push(Tensor::scalar(total), connected, backward)
    }

    pub fn mean_all(&self) -> Var<E> {
        let n = self.numel().max(1);
        self.sum_all().mul_scalar(1.0 / n as f64)
    }

    /// Reduce everything but the leading batch axis: [N, ...] -> [N].
    pub fn sum_per_sample(&self) -> Result<Var<E>> {
        if self.shape().is_empty() {
            return Err(Error::shape("sum_per_sample needs a batch axis".to_string()));
        }
        let n = self.shape()[0];
        let block = self.numel() / n.max(1);
        let mut out = vec![E::zero(); n];
        for (i, chunk) in self.value.data().chunks(block).enumerate() {
            out[i] = chunk.iter().copied().sum();
        }
        let connected = self.grad_connected();
        let backward: Option<BackFn<E>> = if connected {
            let shape = self.shape().to_vec();
            let aid = self.id;
            Some(Box::new(move |gout, sink| {
                let numel: usize = shape.iter().product();
                let block = numel / shape[0].max(1);
                let mut da = Vec::with_capacity(numel);
                for &g in gout.data() {
                    da.extend(std::iter::repeat(g).take(block));
                }
                sink.accum(aid, Tensor::new(&shape, da).expect("shape"));
            }))
        } else {
            None
        };
        Ok(self.tape.push(Tensor::new(&[n], out)?, connected, backward))
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Var<E>> {
        let out = self.value.reshaped(new_shape)?;
        let connected = self.grad_connected();
        let backward: Option<BackFn<E>> = if connected {
            let shape = self.shape().to_vec();
            let aid = self.id;
            Some(Box::new(move |gout, sink| {
                sink.accum(aid, gout.reshaped(&shape).expect("same numel"));
            }))
        } else {
            None
        };
        Ok(self.tape.push(out, connected, backward))
    }

    /// Space-to-depth: [N,H,W,C] -> [N,H/2,W/2,4C]. Output channel s*C + c
    /// carries subpixel s in fixed (TL, TR, BL, BR) order.
    pub fn squeeze2x2(&self) -> Result<Var<E>> {
        let out = squeeze_tensor(&self.value)?;
        let connected = self.grad_connected();
        let backward: Option<BackFn<E>> = if connected {
            let aid = self.id;
            Some(Box::new(move |gout, sink| {
                sink.accum(aid, unsqueeze_tensor(gout).expect("inverse layout"));
            }))
        } else {
            None
        };
        Ok(self.tape.push(out, connected, backward))
    }

    /// Depth-to-space inverse of `squeeze2x2`.
    pub fn unsqueeze2x2(&self) -> Result<Var<E>> {
        let out = unsqueeze_tensor(&self.value)?;
        let connected = self.grad_connected();
        let backward: Option<BackFn<E>> = if connected {
            let aid = self.id;
            Some(Box::new(move |gout, sink| {
                sink.accum(aid, squeeze_tensor(gout).expect("inverse layout"));
            }))
        } else {
            None
        };
        Ok(self.tape.push(out, connected, backward))
    }

    /// Crop a spatial window from an NHWC tensor; gradient zero-pads back.
    pub fn crop2d(&self, top: usize, left: usize, out_h: usize, out_w: usize) -> Result<Var<E>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::shape(format!("crop2d expects NHWC, got {:?}", s)));
        }
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        if top + out_h > h || left + out_w > w {
            return Err(Error::shape(format!(
                "crop window {}x{}+{}+{} exceeds input {}x{}",
                out_h, out_w, top, left, h, w
            )));
        }
        let mut out = Vec::with_capacity(n * out_h * out_w * c);
        for img in 0..n {
            for y in 0..out_h {
                let row = ((img * h + top + y) * w + left) * c;
                out.extend_from_slice(&self.value.data()[row..row + out_w * c]);
            }
        }
        let connected = self.grad_connected();
        let backward: Option<BackFn<E>> = if connected {
            let aid = self.id;
            let in_shape = s.to_vec();
            Some(Box::new(move |gout, sink| {
                let (n, h, w, c) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
                let mut da = Tensor::zeros(&in_shape);
                for img in 0..n {
                    for y in 0..out_h {
                        let dst = ((img * h + top + y) * w + left) * c;
                        let src = (img * out_h + y) * out_w * c;
                        da.data_mut()[dst..dst + out_w * c]
                            .copy_from_slice(&gout.data()[src..src + out_w * c]);
                    }
                }
                sink.accum(aid, da);
            }))
        } else {
            None
        };
        Ok(self.tape.push(Tensor::new(&[n, out_h, out_w, c], out)?, connected, backward))
    }
}

// ── squeeze primitives (shared with non-tape callers) ────────────────

pub fn squeeze_tensor<E: Scalar>(t: &Tensor<E>) -> Result<Tensor<E>> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("squeeze expects NHWC, got {:?}", s)));
    }
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("squeeze needs even extents, got {}x{}", h, w)));
    }
    let (oh, ow, oc) = (h / 2, w / 2, 4 * c);
    let mut out = vec![E::zero(); t.numel()];
    let data = t.data();
    for img in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let dst = ((img * oh + oy) * ow + ox) * oc;
                // subpixel order: TL, TR, BL, BR
                for (si, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                    let src = ((img * h + 2 * oy + dy) * w + 2 * ox + dx) * c;
                    out[dst + si * c..dst + (si + 1) * c].copy_from_slice(&data[src..src + c]);
                }
            }
        }
    }
    Tensor::new(&[n, oh, ow, oc], out)
}

pub fn unsqueeze_tensor<E: Scalar>(t: &Tensor<E>) -> Result<Tensor<E>> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("unsqueeze expects NHWC, got {:?}", s)));
    }
    let (n, oh, ow, oc) = (s[0], s[1], s[2], s[3]);
    if oc % 4 != 0 {
        return Err(Error::shape(format!("unsqueeze needs 4k channels, got {}", oc)));
    }
    let (h, w, c) = (oh * 2, ow * 2, oc / 4);
    let mut out = vec![E::zero(); t.numel()];
    let data = t.data();
    for img in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let src = ((img * oh + oy) * ow + ox) * oc;
                for (si, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                    let dst = ((img * h + 2 * oy + dy) * w + 2 * ox + dx) * c;
                    out[dst..dst + c].copy_from_slice(&data[src + si * c..src + (si + 1) * c]);
                }
            }
        }
    }
    Tensor::new(&[n, h, w, c], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], vals: &[f64]) -> Tensor<f64> {
        Tensor::from_f64s(shape, vals).unwrap()
    }

    #[test]
    fn exp_known_constants() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[2], &[0.0, 1.0]), false);
        let y = x.exp().unwrap();
        assert!((y.value().data()[0] - 1.0).abs() < 1e-15);
        assert!((y.value().data()[1] - std::f64::consts::E).abs() < 1e-15);
    }

    #[test]
    fn mul_hand_arithmetic() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(t64(&[2], &[2.0, 3.0]), false);
        let b = tape.leaf(t64(&[2], &[4.0, 5.0]), false);
        let c = a.mul(&b).unwrap();
        assert_eq!(c.value().data(), &[8.0, 15.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[1], &[0.0]), false);
        assert_eq!(x.sigmoid().value().data(), &[0.5]);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]), false);
        let b = tape.leaf(Tensor::zeros(&[4]), false);
        assert!(matches!(a.add(&b), Err(Error::Shape(_))));
    }

    #[test]
    fn ln_domain_violation() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(t64(&[2], &[1.0, -1.0]), false);
        assert!(matches!(a.ln(), Err(Error::Domain(_))));
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[3], &[1.0, 2.0, 3.0]), true);
        let loss = x.sum_all();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.of(&x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[2], &[1.0, 2.0]), true);
        let loss = x.mul(&x).unwrap().sum_all();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.of(&x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[2], &[1.0, 2.0]), true);
        assert!(matches!(tape.backward(&x), Err(Error::Contract(_))));
    }

    #[test]
    fn fanout_accumulates_additively() {
        // loss = sum(x) + sum(x * x); dx = 1 + 2x
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[2], &[3.0, -1.0]), true);
        let loss = x.sum_all().add(&x.square().sum_all()).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.of(&x).data(), &[7.0, -1.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[2], &[1.0, 2.0]), true);
        let y = tape.leaf(t64(&[3], &[1.0, 2.0, 3.0]), true);
        let loss = x.sum_all();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.of(&y).shape(), &[3]);
        assert_eq!(grads.of(&y).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let tape = Tape::<f64>::new();
        let eye = tape.leaf(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), false);
        let m = tape.leaf(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
        let p = eye.matmul(&m).unwrap();
        assert_eq!(p.value().data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.leaf(t64(&[1, 2], &[1.0, 2.0]), false);
        let b = tape.leaf(t64(&[2, 1], &[3.0, 4.0]), false);
        assert_eq!(a.matmul(&b).unwrap().value().data(), &[11.0]);

        let bad = tape.leaf(Tensor::zeros(&[3, 2]), false);
        assert!(matches!(a.matmul(&bad), Err(Error::Shape(_))));
    }

    #[test]
    fn broadcast_channel_bias_grad() {
        // y = x + bias([C]); d bias = sum over N,H,W
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 1, 2, 3]), false);
        let bias = tape.leaf(t64(&[3], &[1.0, 2.0, 3.0]), true);
        let y = x.add(&bias).unwrap();
        assert_eq!(y.shape(), &[2, 1, 2, 3]);
        let loss = y.sum_all();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.of(&bias).data(), &[4.0, 4.0, 4.0]);
    }

    #[test]
    fn squeeze_subpixel_order_contract() {
        // distinct values in a 2x2x1 input map to channels (TL, TR, BL, BR)
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[1, 2, 2, 1], &[10.0, 20.0, 30.0, 40.0]), false);
        let y = x.squeeze2x2().unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 4]);
        assert_eq!(y.value().data(), &[10.0, 20.0, 30.0, 40.0]);
    }

    #[test]
    fn squeeze_roundtrip_and_multiset() {
        let mut rng = crate::rng::SeedRng::from_seed(3);
        let tape = Tape::<f64>::new();
        let t = rng.normal_tensor::<f64>(&[2, 4, 4, 1]);
        let x = tape.leaf(t.clone(), false);
        let y = x.squeeze2x2().unwrap();
        assert_eq!(y.shape(), &[2, 2, 2, 4]);
        let mut a = t.data().to_vec();
        let mut b = y.value().data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
        let back = y.unsqueeze2x2().unwrap();
        assert_eq!(back.value().data(), t.data());
    }

    #[test]
    fn squeeze_rejects_odd_extents() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[1, 3, 4, 1]), false);
        assert!(matches!(x.squeeze2x2(), Err(Error::Shape(_))));
    }

    #[test]
    fn crop_grad_zero_pads() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0]), true);
        let y = x.crop2d(0, 1, 2, 1).unwrap();
        assert_eq!(y.value().data(), &[2.0, 4.0]);
        let grads = tape.backward(&y.sum_all()).unwrap();
        assert_eq!(grads.of(&x).data(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn identical_seeds_identical_graph_values() {
        let run = || {
            let mut rng = crate::rng::SeedRng::from_seed(99);
            let tape = Tape::<f32>::new();
            let x = tape.leaf(rng.normal_tensor::<f32>(&[4, 7]), true);
            let w = tape.leaf(rng.normal_tensor::<f32>(&[7, 3]), true);
            let y = x.matmul(&w).unwrap().tanh().sum_all();
            let grads = tape.backward(&y).unwrap();
            (
                y.value().data().to_vec(),
                grads.of(&x).data().to_vec(),
                grads.of(&w).data().to_vec(),
            )
        };
        assert_eq!(run(), run());
    }
}
