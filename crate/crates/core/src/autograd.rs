//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation on a [`Var`] records its parents and a closure that maps
//! the output gradient to parent gradients. Nodes whose parents carry no
//! gradient are recorded as constants, so inference builds no graph.

use std::collections::HashSet;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock, RwLockReadGuard};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{col2im, im2col, ConvGeometry, Tensor};

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>> + Send + Sync>;

struct Node<T: Scalar> {
    value: RwLock<Tensor<T>>,
    grad: Mutex<Option<Tensor<T>>>,
    parents: Vec<Var<T>>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// A tensor-valued node of the computation graph.
pub struct Var<T: Scalar>(Arc<Node<T>>);

impl<T: Scalar> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Arc::clone(&self.0))
    }
}

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Scalar> Var<T> {
    /// A trainable leaf.
    pub fn parameter(value: Tensor<T>) -> Self {
        Self::leaf(value, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::leaf(value, false)
    }

    fn leaf(value: Tensor<T>, requires_grad: bool) -> Self {
        Var(Arc::new(Node {
            value: RwLock::new(value),
            grad: Mutex::new(None),
            parents: Vec::new(),
            backward: None,
            requires_grad,
        }))
    }

    fn from_op(
        value: Tensor<T>,
        parents: Vec<Var<T>>,
        backward: impl Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>> + Send + Sync + 'static,
    ) -> Self {
        if parents.iter().any(|p| p.0.requires_grad) {
            Var(Arc::new(Node {
                value: RwLock::new(value),
                grad: Mutex::new(None),
                parents,
                backward: Some(Box::new(backward)),
                requires_grad: true,
            }))
        } else {
            Self::constant(value)
        }
    }

    pub fn value(&self) -> RwLockReadGuard<'_, Tensor<T>> {
        self.0.value.read()
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn item(&self) -> T {
        self.value().data()[0]
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.0.grad.lock().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock() = None;
    }

    /// Overwrite the stored value (optimizer updates, checkpoint loads).
    pub fn set_value(&self, value: Tensor<T>) {
        *self.0.value.write() = value;
    }

    pub fn update(&self, f: impl FnOnce(&mut Tensor<T>)) {
        f(&mut self.0.value.write());
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::constant(self.to_tensor())
    }

    pub fn ptr_eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    /// Back-propagate from a one-element node. Gradients accumulate on every
    /// trainable leaf reachable from `self`.
    pub fn backward(&self) {
        assert_eq!(self.value().len(), 1, "backward needs a scalar output");
        if !self.0.requires_grad {
            return;
        }
        let order = self.topological_order();
        *self.0.grad.lock() = Some(Tensor::full(&self.shape(), T::one()));
        for node in order.iter().rev() {
            let Some(backward) = node.0.backward.as_ref() else {
                continue;
            };
            let Some(grad) = node.0.grad.lock().take() else {
                continue;
            };
            let parent_grads = backward(&grad);
            debug_assert_eq!(parent_grads.len(), node.0.parents.len());
            for (parent, pg) in node.0.parents.iter().zip(parent_grads) {
                if !parent.0.requires_grad {
                    continue;
                }
                if let Some(pg) = pg {
                    let mut slot = parent.0.grad.lock();
                    match slot.as_mut() {
                        Some(acc) => acc.add_assign(&pg),
                        None => *slot = Some(pg),
                    }
                }
            }
        }
    }

    fn topological_order(&self) -> Vec<Var<T>> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack: Vec<(Var<T>, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            let key = Arc::as_ptr(&node.0) as usize;
            if expanded {
                order.push(node);
                continue;
            }
            if !seen.insert(key) {
                continue;
            }
            stack.push((node.clone(), true));
            for p in &node.0.parents {
                if p.0.requires_grad && !seen.contains(&(Arc::as_ptr(&p.0) as usize)) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }

    // ---- elementwise ----

    pub fn add(&self, other: &Var<T>) -> Var<T> {
        let value = self.value().zip_map(&other.value(), |a, b| a + b);
        Var::from_op(value, vec![self.clone(), other.clone()], |g| {
            vec![Some(g.clone()), Some(g.clone())]
        })
    }

    pub fn sub(&self, other: &Var<T>) -> Var<T> {
        let value = self.value().zip_map(&other.value(), |a, b| a - b);
        Var::from_op(value, vec![self.clone(), other.clone()], |g| {
            vec![Some(g.clone()), Some(g.map(|x| -x))]
        })
    }

    pub fn mul(&self, other: &Var<T>) -> Var<T> {
        let (a, b) = (self.to_tensor(), other.to_tensor());
        let value = a.zip_map(&b, |x, y| x * y);
        Var::from_op(value, vec![self.clone(), other.clone()], move |g| {
            vec![
                Some(g.zip_map(&b, |gi, bi| gi * bi)),
                Some(g.zip_map(&a, |gi, ai| gi * ai)),
            ]
        })
    }

    pub fn scale(&self, s: T) -> Var<T> {
        let value = self.value().map(|x| x * s);
        Var::from_op(value, vec![self.clone()], move |g| vec![Some(g.map(|x| x * s))])
    }

    /// `a * x + b`
    pub fn affine(&self, a: T, b: T) -> Var<T> {
        let value = self.value().map(|x| a * x + b);
        Var::from_op(value, vec![self.clone()], move |g| vec![Some(g.map(|x| x * a))])
    }

    pub fn relu(&self) -> Var<T> {
        self.leaky_relu(T::zero())
    }

    pub fn leaky_relu(&self, slope: T) -> Var<T> {
        let x = self.to_tensor();
        let value = x.map(|v| if v > T::zero() { v } else { v * slope });
        Var::from_op(value, vec![self.clone()], move |g| {
            vec![Some(g.zip_map(&x, |gi, v| if v > T::zero() { gi } else { gi * slope }))]
        })
    }

    pub fn tanh(&self) -> Var<T> {
        let y = self.value().map(|v| v.tanh());
        let out = y.clone();
        Var::from_op(y, vec![self.clone()], move |g| {
            vec![Some(g.zip_map(&out, |gi, t| gi * (T::one() - t * t)))]
        })
    }

    pub fn sigmoid(&self) -> Var<T> {
        let y = self.value().map(sigmoid);
        let out = y.clone();
        Var::from_op(y, vec![self.clone()], move |g| {
            vec![Some(g.zip_map(&out, |gi, s| gi * s * (T::one() - s)))]
        })
    }

    /// Sum of two one-element nodes is just `add`; this sums many.
    pub fn sum_all(items: &[Var<T>]) -> Var<T> {
        let mut it = items.iter();
        let first = it.next().expect("sum of zero terms").clone();
        it.fold(first, |acc, v| acc.add(v))
    }

    // ---- structural ----

    /// Concatenate rank-4 nodes along the channel axis.
    pub fn concat_channels(items: &[&Var<T>]) -> Result<Var<T>> {
        let tensors: Vec<Tensor<T>> = items.iter().map(|v| v.to_tensor()).collect();
        let (n, _, h, w) = tensors[0].dims4();
        let mut chans = Vec::with_capacity(tensors.len());
        for t in &tensors {
            let (tn, tc, th, tw) = t.dims4();
            if (tn, th, tw) != (n, h, w) {
                return Err(Error::Shape(format!(
                    "channel concat mismatch {:?} vs {:?}",
                    t.shape(),
                    tensors[0].shape()
                )));
            }
            chans.push(tc);
        }
        let total: usize = chans.iter().sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total * plane);
        for s in 0..n {
            for (t, &c) in tensors.iter().zip(&chans) {
                data.extend_from_slice(&t.data()[s * c * plane..(s + 1) * c * plane]);
            }
        }
        let value = Tensor::from_vec(&[n, total, h, w], data)?;
        let parents = items.iter().map(|v| (*v).clone()).collect();
        Ok(Var::from_op(value, parents, move |g| {
            let mut grads: Vec<Vec<T>> = chans.iter().map(|&c| Vec::with_capacity(n * c * plane)).collect();
            for s in 0..n {
                let mut off = s * total * plane;
                for (k, &c) in chans.iter().enumerate() {
                    grads[k].extend_from_slice(&g.data()[off..off + c * plane]);
                    off += c * plane;
                }
            }
            grads
                .into_iter()
                .zip(&chans)
                .map(|(d, &c)| Some(Tensor::from_vec(&[n, c, h, w], d).unwrap()))
                .collect()
        }))
    }

    /// Select channels `[start, start + count)` of a rank-4 node.
    pub fn narrow_channels(&self, start: usize, count: usize) -> Var<T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        assert!(start + count <= c, "channel range out of bounds");
        let plane = h * w;
        let mut data = Vec::with_capacity(n * count * plane);
        for s in 0..n {
            let base = (s * c + start) * plane;
            data.extend_from_slice(&x.data()[base..base + count * plane]);
        }
        drop(x);
        let value = Tensor::from_vec(&[n, count, h, w], data).unwrap();
        Var::from_op(value, vec![self.clone()], move |g| {
            let mut full = Tensor::zeros(&[n, c, h, w]);
            for s in 0..n {
                let base = (s * c + start) * plane;
                full.data_mut()[base..base + count * plane]
                    .copy_from_slice(&g.data()[s * count * plane..(s + 1) * count * plane]);
            }
            vec![Some(full)]
        })
    }

    // ---- convolution ----

    /// 2-D convolution; `weight` is `[out, in, k, k]`, `bias` is `[out]`.
    pub fn conv2d(
        &self,
        weight: &Var<T>,
        bias: Option<&Var<T>>,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> Result<Var<T>> {
        let x = self.to_tensor();
        let w = weight.to_tensor();
        let (n, c, h, wd) = x.dims4();
        let wshape = w.shape().to_vec();
        if wshape.len() != 4 || wshape[1] != c || wshape[2] != wshape[3] {
            return Err(Error::Shape(format!(
                "conv weight {wshape:?} incompatible with input {:?}",
                x.shape()
            )));
        }
        let (o, k) = (wshape[0], wshape[2]);
        let g = ConvGeometry::new(c, h, wd, k, stride, pad, dilation)?;
        let (rows, cols_n) = (g.col_rows(), g.col_cols());
        let mut out = Tensor::zeros(&[n, o, g.out_height, g.out_width]);
        let mut cols = vec![T::zero(); rows * cols_n];
        for s in 0..n {
            im2col(&g, x.sample(s), &mut cols);
            let dst = &mut out.data_mut()[s * o * cols_n..(s + 1) * o * cols_n];
            T::gemm(o, rows, cols_n, T::one(), w.data(), false, &cols, false, T::zero(), dst);
        }
        if let Some(b) = bias {
            add_channel_bias(&mut out, b.value().data());
        }
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let has_bias = bias.is_some();
        let need_dx = self.requires_grad();
        Ok(Var::from_op(out, parents, move |gout| {
            let mut dw = Tensor::zeros(w.shape());
            let mut dx = if need_dx { Some(Tensor::zeros(x.shape())) } else { None };
            let mut cols = vec![T::zero(); rows * cols_n];
            let mut dcols = vec![T::zero(); rows * cols_n];
            for s in 0..n {
                let gs = gout.sample(s);
                im2col(&g, x.sample(s), &mut cols);
                T::gemm(
                    o,
                    cols_n,
                    rows,
                    T::one(),
                    gs,
                    false,
                    &cols,
                    true,
                    T::one(),
                    dw.data_mut(),
                );
                if let Some(dx) = dx.as_mut() {
                    T::gemm(
                        rows,
                        o,
                        cols_n,
                        T::one(),
                        w.data(),
                        true,
                        gs,
                        false,
                        T::zero(),
                        &mut dcols,
                    );
                    let per = c * h * wd;
                    col2im(&g, &dcols, &mut dx.data_mut()[s * per..(s + 1) * per]);
                }
            }
            let mut grads = vec![dx, Some(dw)];
            if has_bias {
                grads.push(Some(channel_sums(gout)));
            }
            grads
        }))
    }

    /// Transposed convolution; `weight` is `[in, out, k, k]`. Output size is
    /// `(h - 1) * stride - 2 * pad + k`.
    pub fn conv_transpose2d(
        &self,
        weight: &Var<T>,
        bias: Option<&Var<T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<T>> {
        let x = self.to_tensor();
        let w = weight.to_tensor();
        let (n, cin, h, wd) = x.dims4();
        let wshape = w.shape().to_vec();
        if wshape.len() != 4 || wshape[0] != cin || wshape[2] != wshape[3] {
            return Err(Error::Shape(format!(
                "transposed conv weight {wshape:?} incompatible with input {:?}",
                x.shape()
            )));
        }
        let (cout, k) = (wshape[1], wshape[2]);
        let oh = ((h - 1) * stride + k)
            .checked_sub(2 * pad)
            .ok_or_else(|| Error::Shape("transposed conv padding too large".into()))?;
        let ow = ((wd - 1) * stride + k)
            .checked_sub(2 * pad)
            .ok_or_else(|| Error::Shape("transposed conv padding too large".into()))?;
        // The convolution whose adjoint this is maps (cout, oh, ow) -> (h, wd).
        let g = ConvGeometry::new(cout, oh, ow, k, stride, pad, 1)?;
        if (g.out_height, g.out_width) != (h, wd) {
            return Err(Error::Shape(format!(
                "transposed conv geometry mismatch: {h}x{wd} -> {oh}x{ow}"
            )));
        }
        let (rows, plane) = (g.col_rows(), h * wd);
        let out_per = cout * oh * ow;
        let mut out = Tensor::zeros(&[n, cout, oh, ow]);
        let mut cols = vec![T::zero(); rows * plane];
        for s in 0..n {
            T::gemm(
                rows,
                cin,
                plane,
                T::one(),
                w.data(),
                true,
                x.sample(s),
                false,
                T::zero(),
                &mut cols,
            );
            col2im(&g, &cols, &mut out.data_mut()[s * out_per..(s + 1) * out_per]);
        }
        if let Some(b) = bias {
            add_channel_bias(&mut out, b.value().data());
        }
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let has_bias = bias.is_some();
        let need_dx = self.requires_grad();
        Ok(Var::from_op(out, parents, move |gout| {
            let mut dw = Tensor::zeros(w.shape());
            let mut dx = if need_dx { Some(Tensor::zeros(x.shape())) } else { None };
            let mut dcols = vec![T::zero(); rows * plane];
            for s in 0..n {
                im2col(&g, gout.sample(s), &mut dcols);
                T::gemm(
                    cin,
                    plane,
                    rows,
                    T::one(),
                    x.sample(s),
                    false,
                    &dcols,
                    true,
                    T::one(),
                    dw.data_mut(),
                );
                if let Some(dx) = dx.as_mut() {
                    let per = cin * plane;
                    T::gemm(
                        cin,
                        rows,
                        plane,
                        T::one(),
                        w.data(),
                        false,
                        &dcols,
                        false,
                        T::zero(),
                        &mut dx.data_mut()[s * per..(s + 1) * per],
                    );
                }
            }
            let mut grads = vec![dx, Some(dw)];
            if has_bias {
                grads.push(Some(channel_sums(gout)));
            }
            grads
        }))
    }

    /// Per-sample, per-channel normalization over the spatial plane.
    pub fn instance_norm(&self, eps: T) -> Var<T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let plane = h * w;
        let pn = T::from_usize(plane).unwrap();
        let mut y = Tensor::zeros(x.shape());
        let mut inv_std = Vec::with_capacity(n * c);
        for (src, dst) in x.data().chunks(plane).zip(y.data_mut().chunks_mut(plane)) {
            let mean = src.iter().copied().sum::<T>() / pn;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / pn;
            let is = T::one() / (var + eps).sqrt();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * is;
            }
            inv_std.push(is);
        }
        drop(x);
        let yhat = y.clone();
        Var::from_op(y, vec![self.clone()], move |g| {
            let mut dx = Tensor::zeros(g.shape());
            for (((gp, yp), dp), &is) in g
                .data()
                .chunks(plane)
                .zip(yhat.data().chunks(plane))
                .zip(dx.data_mut().chunks_mut(plane))
                .zip(&inv_std)
            {
                let mg = gp.iter().copied().sum::<T>() / pn;
                let mgy = gp.iter().zip(yp).map(|(&a, &b)| a * b).sum::<T>() / pn;
                for ((d, &gi), &yi) in dp.iter_mut().zip(gp).zip(yp) {
                    *d = is * (gi - mg - yi * mgy);
                }
            }
            vec![Some(dx)]
        })
    }

    // ---- reductions / losses ----

    /// Mean absolute difference over all elements.
    pub fn l1(&self, target: &Var<T>) -> Var<T> {
        let (a, b) = (self.to_tensor(), target.to_tensor());
        assert_eq!(a.shape(), b.shape(), "l1 shape mismatch");
        let count = T::from_usize(a.len()).unwrap();
        let value = a.zip_map(&b, |x, y| (x - y).abs()).sum() / count;
        Var::from_op(Tensor::scalar(value), vec![self.clone(), target.clone()], move |g| {
            let s = g.data()[0] / count;
            let da = a.zip_map(&b, |x, y| s * sign(x - y));
            let db = da.map(|v| -v);
            vec![Some(da), Some(db)]
        })
    }

    /// `-mean(log(clamp(p, eps, 1 - eps)))`
    pub fn neg_mean_log(&self, eps: T) -> Var<T> {
        self.log_loss(eps, false)
    }

    /// `-mean(log(1 - clamp(p, eps, 1 - eps)))`
    pub fn neg_mean_log1m(&self, eps: T) -> Var<T> {
        self.log_loss(eps, true)
    }

    fn log_loss(&self, eps: T, complement: bool) -> Var<T> {
        let p = self.to_tensor();
        let count = T::from_usize(p.len()).unwrap();
        let hi = T::one() - eps;
        let value = p
            .data()
            .iter()
            .map(|&v| {
                let q = v.max(eps).min(hi);
                -(if complement { T::one() - q } else { q }).ln()
            })
            .sum::<T>()
            / count;
        Var::from_op(Tensor::scalar(value), vec![self.clone()], move |g| {
            let s = g.data()[0] / count;
            vec![Some(p.map(|v| {
                if v < eps || v > hi {
                    T::zero()
                } else if complement {
                    s / (T::one() - v)
                } else {
                    -s / v
                }
            }))]
        })
    }

    /// Soft Dice loss over softmax probabilities of `[n, k, h, w]` logits.
    ///
    /// Per sample: `1 - mean_c (2 sum(p t) + s) / (sum p + sum t + s)` over
    /// classes `first_class..k`; a class with zero target and zero predicted
    /// mass is left out of the mean. The loss is averaged over the batch.
    pub fn softmax_dice_loss(&self, labels: &[u8], first_class: usize, smooth: T) -> Var<T> {
        let probs = softmax_channels(&self.value());
        let (n, k, h, w) = probs.dims4();
        assert_eq!(labels.len(), n * h * w, "label count mismatch");
        let (loss, dprobs) = soft_dice_with_grad(&probs, labels, first_class, smooth);
        Var::from_op(Tensor::scalar(loss), vec![self.clone()], move |g| {
            let s = g.data()[0];
            // softmax Jacobian-vector product per pixel
            let plane = h * w;
            let mut dx = Tensor::zeros(probs.shape());
            for b in 0..n {
                for px in 0..plane {
                    let idx = |c: usize| (b * k + c) * plane + px;
                    let dot: T = (0..k).map(|c| dprobs.data()[idx(c)] * probs.data()[idx(c)]).sum();
                    for c in 0..k {
                        let p = probs.data()[idx(c)];
                        dx.data_mut()[idx(c)] = s * p * (dprobs.data()[idx(c)] - dot);
                    }
                }
            }
            vec![Some(dx)]
        })
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn add_channel_bias<T: Scalar>(out: &mut Tensor<T>, bias: &[T]) {
    let (n, c, h, w) = out.dims4();
    let plane = h * w;
    for s in 0..n {
        for (ch, &b) in bias.iter().enumerate().take(c) {
            let base = (s * c + ch) * plane;
            for v in &mut out.data_mut()[base..base + plane] {
                *v += b;
            }
        }
    }
}

fn channel_sums<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = g.dims4();
    let plane = h * w;
    let mut db = vec![T::zero(); c];
    for s in 0..n {
        for (ch, acc) in db.iter_mut().enumerate() {
            let base = (s * c + ch) * plane;
            *acc += g.data()[base..base + plane].iter().copied().sum::<T>();
        }
    }
    Tensor::from_vec(&[c], db).unwrap()
}

/// Numerically stable softmax over the channel axis of an NCHW tensor.
pub fn softmax_channels<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, k, h, w) = x.dims4();
    let plane = h * w;
    let mut out = Tensor::zeros(x.shape());
    for b in 0..n {
        for px in 0..plane {
            let idx = |c: usize| (b * k + c) * plane + px;
            let m = (0..k).map(|c| x.data()[idx(c)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for c in 0..k {
                let e = (x.data()[idx(c)] - m).exp();
                out.data_mut()[idx(c)] = e;
                z += e;
            }
            for c in 0..k {
                out.data_mut()[idx(c)] /= z;
            }
        }
    }
    out
}

/// Soft Dice loss of per-pixel class probabilities against hard labels,
/// together with its gradient with respect to the probabilities.
pub fn soft_dice_with_grad<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[u8],
    first_class: usize,
    smooth: T,
) -> (T, Tensor<T>) {
    let (n, k, h, w) = probs.dims4();
    let plane = h * w;
    let two = T::lit(2.0);
    let mut grad = Tensor::zeros(probs.shape());
    let mut total = T::zero();
    for b in 0..n {
        let lab = &labels[b * plane..(b + 1) * plane];
        let mut terms = Vec::new();
        for c in first_class..k {
            let p = &probs.data()[(b * k + c) * plane..(b * k + c + 1) * plane];
            let mut inter = T::zero();
            let mut sp = T::zero();
            let mut st = T::zero();
            for (&pi, &li) in p.iter().zip(lab) {
                let t = if li as usize == c { T::one() } else { T::zero() };
                inter += pi * t;
                sp += pi;
                st += t;
            }
            if st == T::zero() && sp == T::zero() {
                continue;
            }
            terms.push((c, inter, sp, st));
        }
        if terms.is_empty() {
            continue;
        }
        let m = T::from_usize(terms.len()).unwrap();
        let nb = T::from_usize(n).unwrap();
        let mut dice_sum = T::zero();
        for &(c, inter, sp, st) in &terms {
            let num = two * inter + smooth;
            let den = sp + st + smooth;
            dice_sum += num / den;
            // d(loss)/dp_i = -(1/m)(1/n) * (2 t_i den - num) / den^2
            let g = &mut grad.data_mut()[(b * k + c) * plane..(b * k + c + 1) * plane];
            for (gi, &li) in g.iter_mut().zip(lab) {
                let t = if li as usize == c { T::one() } else { T::zero() };
                *gi = -(two * t * den - num) / (den * den) / m / nb;
            }
        }
        total += T::one() - dice_sum / m;
    }
    (total / T::from_usize(n).unwrap(), grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference check of d(f)/d(input) for a scalar-valued graph.
    fn check(input: Tensor<f64>, f: impl Fn(&Var<f64>) -> Var<f64>) {
        let x = Var::parameter(input.clone());
        f(&x).backward();
        let analytic = x.grad().unwrap();
        let h = 1e-6;
        for i in 0..input.len() {
            let mut plus = input.clone();
            plus.data_mut()[i] += h;
            let mut minus = input.clone();
            minus.data_mut()[i] -= h;
            let fp = f(&Var::constant(plus)).item();
            let fm = f(&Var::constant(minus)).item();
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[i];
            assert!(
                (a - numeric).abs() <= 1e-4 * a.abs().max(numeric.abs()) + 1e-7,
                "element {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }

    fn dot(v: &Var<f64>, seed: u64) -> Var<f64> {
        // mean |v*r + 100| is linear in v*r near the origin, so this is a
        // smooth random projection
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = rand_tensor(&v.shape(), &mut rng);
        let shifted = v.mul(&Var::constant(r)).affine(1.0, 100.0);
        shifted.l1(&Var::constant(Tensor::zeros(&v.shape())))
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&[2, 3, 6, 5], &mut rng);
        let w = rand_tensor(&[4, 3, 3, 3], &mut rng);
        let b = rand_tensor(&[4], &mut rng);
        for &(stride, pad, dil) in &[(1, 1, 1), (2, 1, 1), (1, 2, 2)] {
            let (wv, bv) = (Var::constant(w.clone()), Var::constant(b.clone()));
            check(x.clone(), |xv| {
                dot(&xv.conv2d(&wv, Some(&bv), stride, pad, dil).unwrap(), 3)
            });
            let xv = Var::constant(x.clone());
            check(w.clone(), |wv| {
                dot(&xv.conv2d(wv, Some(&bv), stride, pad, dil).unwrap(), 3)
            });
            let wv = Var::constant(w.clone());
            check(b.clone(), |bv| {
                dot(&xv.conv2d(&wv, Some(bv), stride, pad, dil).unwrap(), 3)
            });
        }
    }

    #[test]
    fn conv_transpose_gradients_and_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&[2, 3, 4, 4], &mut rng);
        let w = rand_tensor(&[3, 2, 4, 4], &mut rng);
        let y = Var::constant(x.clone())
            .conv_transpose2d(&Var::constant(w.clone()), None, 2, 1)
            .unwrap();
        assert_eq!(y.shape(), vec![2, 2, 8, 8]);
        let wv = Var::constant(w.clone());
        check(x.clone(), |xv| dot(&xv.conv_transpose2d(&wv, None, 2, 1).unwrap(), 5));
        let xv = Var::constant(x);
        check(w, |wv| dot(&xv.conv_transpose2d(wv, None, 2, 1).unwrap(), 5));
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&[1, 2, 8, 8], &mut rng);
        let w = rand_tensor(&[3, 2, 4, 4], &mut rng);
        let y = rand_tensor(&[1, 3, 4, 4], &mut rng);
        let cx = Var::constant(x.clone())
            .conv2d(&Var::constant(w.clone()), None, 2, 1, 1)
            .unwrap();
        let lhs: f64 = cx.value().data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let ty = Var::constant(y)
            .conv_transpose2d(&Var::constant(w), None, 2, 1)
            .unwrap();
        let rhs: f64 = ty.value().data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn norm_activation_and_concat_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&[2, 3, 4, 4], &mut rng);
        check(x.clone(), |v| dot(&v.instance_norm(1e-5), 7));
        check(x.clone(), |v| dot(&v.tanh(), 7));
        check(x.clone(), |v| dot(&v.sigmoid(), 7));
        check(x.clone(), |v| dot(&v.leaky_relu(0.2), 7));
        let other = Var::constant(rand_tensor(&[2, 1, 4, 4], &mut rng));
        check(x.clone(), |v| {
            dot(&Var::concat_channels(&[v, &other]).unwrap().narrow_channels(1, 3), 8)
        });
    }

    #[test]
    fn loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = Tensor::from_vec(&[1, 1, 3, 3], (0..9).map(|_| rng.gen_range(0.1..0.9)).collect()).unwrap();
        check(p.clone(), |v| v.neg_mean_log(1e-7));
        check(p.clone(), |v| v.neg_mean_log1m(1e-7));
        let t = Var::constant(rand_tensor(&[1, 1, 3, 3], &mut rng));
        check(p.clone(), |v| v.l1(&t));
        let logits = rand_tensor(&[2, 4, 3, 3], &mut rng);
        let labels: Vec<u8> = (0..18).map(|_| rng.gen_range(0..4)).collect();
        check(logits, |v| v.softmax_dice_loss(&labels, 1, 1.0));
    }

    #[test]
    fn constants_build_no_graph() {
        let a = Var::constant(Tensor::<f32>::zeros(&[1, 1, 2, 2]));
        let b = a.relu().tanh();
        assert!(!b.requires_grad());
    }
}
