//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to [`Var`]s during a forward
//! pass together with a vector-Jacobian-product closure. [`Tape::backward`]
//! replays the record in reverse. Parameters are leaves whose gradients
//! persist on the tape and accumulate across repeated backward calls.
//!
//! A tape created with [`Tape::inference`] records nothing: values flow
//! through the same code path but no closures or intermediate buffers are
//! retained.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{contract, Result};
use crate::ops::{self, conv, norm, pointwise, resample, ConvGeometry};
use crate::tensor::{Real, Shape, Tensor};

/// Vector-Jacobian product of one recorded op. Receives the upstream
/// gradient and a mask of which inputs need a gradient; returns one entry
/// per input.
pub type Vjp<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Real> {
    inputs: Vec<usize>,
    vjp: Option<Vjp<T>>,
    shape: Shape,
}

pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    leaf_grads: RefCell<Vec<Option<Tensor<T>>>>,
    recording: bool,
}

/// A value bound to a tape. Cloning is cheap (the tensor is shared).
#[derive(Clone)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: Option<usize>,
    value: Rc<Tensor<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Tape::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            leaf_grads: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A tape that never records; for forward-only evaluation.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Tape::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        let value = Rc::new(value);
        if !self.recording {
            return Var { tape: self, id: None, value };
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            inputs: Vec::new(),
            vjp: None,
            shape: value.shape(),
        });
        self.leaf_grads.borrow_mut().push(None);
        Var { tape: self, id: Some(id), value }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        Var {
            tape: self,
            id: None,
            value: Rc::new(value),
        }
    }

    /// Records `value = f(inputs)` with the given VJP. The closure builder is
    /// only invoked when at least one input carries a gradient.
    pub fn record<'t>(
        &'t self,
        inputs: &[&Var<'t, T>],
        value: Tensor<T>,
        make_vjp: impl FnOnce() -> Vjp<T>,
    ) -> Var<'t, T> {
        let ids: Vec<Option<usize>> = inputs.iter().map(|v| v.id).collect();
        if !self.recording || ids.iter().all(Option::is_none) {
            return self.constant(value);
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            inputs: ids.iter().map(|i| i.unwrap_or(usize::MAX)).collect(),
            vjp: Some(make_vjp()),
            shape: value.shape(),
        });
        self.leaf_grads.borrow_mut().push(None);
        Var {
            tape: self,
            id: Some(id),
            value: Rc::new(value),
        }
    }

    /// Propagates `d loss / d node` to every leaf, accumulating into the
    /// leaves' stored gradients.
    pub fn backward(&self, loss: &Var<'_, T>) -> Result<()> {
        contract!(
            loss.value.shape() == Shape::scalar(),
            "backward needs a scalar loss, got shape {}",
            loss.value.shape()
        );
        let Some(root) = loss.id else {
            return Ok(());
        };
        let nodes = self.nodes.borrow();
        let mut adj: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        adj[root] = Some(Tensor::scalar(T::one()));
        let mut leaf_grads = self.leaf_grads.borrow_mut();
        for i in (0..=root).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &nodes[i];
            match &node.vjp {
                None => match &mut leaf_grads[i] {
                    Some(acc) => acc.accumulate(&g),
                    slot @ None => *slot = Some(g),
                },
                Some(vjp) => {
                    let mask: Vec<bool> = node.inputs.iter().map(|&p| p != usize::MAX).collect();
                    let grads = vjp(&g, &mask);
                    debug_assert_eq!(grads.len(), node.inputs.len());
                    for (&p, pg) in node.inputs.iter().zip(grads) {
                        let (true, Some(pg)) = (p != usize::MAX, pg) else { continue };
                        debug_assert_eq!(pg.shape(), nodes[p].shape, "gradient shape for node {p}");
                        match &mut adj[p] {
                            Some(acc) => acc.accumulate(&pg),
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Accumulated gradient of a leaf; zeros if it never received one.
    pub fn grad(&self, var: &Var<'_, T>) -> Option<Tensor<T>> {
        let id = var.id?;
        let stored = self.leaf_grads.borrow()[id].clone();
        Some(stored.unwrap_or_else(|| Tensor::zeros(var.value.shape())))
    }

    pub fn zero_grad(&self) {
        self.leaf_grads.borrow_mut().iter_mut().for_each(|g| *g = None);
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn node_id(&self) -> Option<usize> {
        self.id
    }

    pub fn requires_grad(&self) -> bool {
        self.id.is_some()
    }

    pub(crate) fn rc(&self) -> Rc<Tensor<T>> {
        Rc::clone(&self.value)
    }

    /// Scalar value of a 1×1×1×1 var.
    pub fn item(&self) -> T {
        self.value.data()[0]
    }
}

/// Gradient slot helper: `Some(f())` when `need` is set.
#[inline]
pub(crate) fn when<T>(need: bool, f: impl FnOnce() -> T) -> Option<T> {
    need.then(f)
}

pub fn conv2d<'t, T: Real>(
    x: &Var<'t, T>,
    w: &Var<'t, T>,
    b: Option<&Var<'t, T>>,
    geom: ConvGeometry,
) -> Result<Var<'t, T>> {
    let y = conv::conv2d(x.value(), w.value(), b.map(|b| b.value()), geom)?;
    let mut inputs = vec![x, w];
    inputs.extend(b);
    let (xv, wv) = (x.rc(), w.rc());
    Ok(x.tape.record(&inputs, y, move || {
        Box::new(move |g, need| {
            let mut out = vec![
                when(need[0], || conv::conv2d_input_grad(g, &wv, xv.shape(), geom).expect("shapes checked")),
                when(need[1], || conv::conv2d_weight_grad(&xv, g, wv.shape(), geom).expect("shapes checked")),
            ];
            if need.len() == 3 {
                out.push(when(need[2], || conv::bias_grad(g)));
            }
            out
        })
    }))
}

pub fn conv_transpose2d<'t, T: Real>(
    x: &Var<'t, T>,
    w: &Var<'t, T>,
    b: Option<&Var<'t, T>>,
    stride: usize,
    padding: usize,
) -> Result<Var<'t, T>> {
    let y = conv::conv_transpose2d(x.value(), w.value(), b.map(|b| b.value()), stride, padding)?;
    let mut inputs = vec![x, w];
    inputs.extend(b);
    let (xv, wv) = (x.rc(), w.rc());
    let geom = ConvGeometry::new(stride, padding, 1);
    Ok(x.tape.record(&inputs, y, move || {
        Box::new(move |g, need| {
            // y = A^T x, so dx = A g and dW follows with roles swapped.
            let mut out = vec![
                when(need[0], || conv::conv2d(g, &wv, None, geom).expect("shapes checked")),
                when(need[1], || conv::conv2d_weight_grad(g, &xv, wv.shape(), geom).expect("shapes checked")),
            ];
            if need.len() == 3 {
                out.push(when(need[2], || conv::bias_grad(g)));
            }
            out
        })
    }))
}

pub fn leaky_relu<'t, T: Real>(x: &Var<'t, T>, slope: T) -> Var<'t, T> {
    let y = pointwise::leaky_relu(x.value(), slope);
    let xv = x.rc();
    x.tape.record(&[x], y, move || {
        Box::new(move |g, _| vec![Some(pointwise::leaky_relu_grad(&xv, g, slope))])
    })
}

pub fn sigmoid<'t, T: Real>(x: &Var<'t, T>) -> Var<'t, T> {
    let y = Rc::new(pointwise::sigmoid(x.value()));
    let yv = Rc::clone(&y);
    x.tape.record(&[x], (*y).clone(), move || {
        Box::new(move |g, _| vec![Some(pointwise::sigmoid_grad(&yv, g))])
    })
}

pub fn add<'t, T: Real>(x: &Var<'t, T>, y: &Var<'t, T>) -> Result<Var<'t, T>> {
    let v = pointwise::add(x.value(), y.value())?;
    Ok(x.tape.record(&[x, y], v, || {
        Box::new(|g, need| vec![when(need[0], || g.clone()), when(need[1], || g.clone())])
    }))
}

pub fn sub<'t, T: Real>(x: &Var<'t, T>, y: &Var<'t, T>) -> Result<Var<'t, T>> {
    let v = pointwise::sub(x.value(), y.value())?;
    Ok(x.tape.record(&[x, y], v, || {
        Box::new(|g, need| vec![when(need[0], || g.clone()), when(need[1], || g.scale(-T::one()))])
    }))
}

pub fn mul<'t, T: Real>(x: &Var<'t, T>, y: &Var<'t, T>) -> Result<Var<'t, T>> {
    let v = pointwise::mul(x.value(), y.value())?;
    let (xv, yv) = (x.rc(), y.rc());
    Ok(x.tape.record(&[x, y], v, move || {
        Box::new(move |g, need| {
            vec![
                when(need[0], || pointwise::mul(g, &yv).expect("same shape")),
                when(need[1], || pointwise::mul(g, &xv).expect("same shape")),
            ]
        })
    }))
}

pub fn scale<'t, T: Real>(x: &Var<'t, T>, k: T) -> Var<'t, T> {
    x.tape
        .record(&[x], x.value().scale(k), move || Box::new(move |g, _| vec![Some(g.scale(k))]))
}

pub fn abs<'t, T: Real>(x: &Var<'t, T>) -> Var<'t, T> {
    let xv = x.rc();
    x.tape.record(&[x], x.value().map(T::abs), move || {
        Box::new(move |g, _| {
            let sign = |v: T| {
                if v > T::zero() {
                    T::one()
                } else if v < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            };
            vec![Some(xv.zip_map(g, |v, gv| sign(v) * gv).expect("same shape"))]
        })
    })
}

/// Reinterprets the data under a new shape of equal size.
pub fn reshape<'t, T: Real>(x: &Var<'t, T>, shape: Shape) -> Result<Var<'t, T>> {
    let from = x.shape();
    let y = x.value().clone().reshape(shape)?;
    Ok(x.tape.record(&[x], y, move || {
        Box::new(move |g, _| vec![Some(g.clone().reshape(from).expect("same size"))])
    }))
}

/// Sum of all elements, as a scalar var.
pub fn sum<'t, T: Real>(x: &Var<'t, T>) -> Var<'t, T> {
    let shape = x.shape();
    x.tape.record(&[x], Tensor::scalar(x.value().sum()), move || {
        Box::new(move |g, _| vec![Some(Tensor::full(shape, g.data()[0]))])
    })
}

pub fn concat_channels<'t, T: Real>(xs: &[&Var<'t, T>]) -> Result<Var<'t, T>> {
    let values: Vec<&Tensor<T>> = xs.iter().map(|v| v.value()).collect();
    let y = pointwise::concat_channels(&values)?;
    let widths: Vec<usize> = xs.iter().map(|v| v.shape().c).collect();
    Ok(xs[0].tape.record(xs, y, move || {
        Box::new(move |g, need| {
            pointwise::split_channels(g, &widths)
                .expect("widths match")
                .into_iter()
                .zip(need)
                .map(|(t, &n)| n.then_some(t))
                .collect()
        })
    }))
}

pub fn resize_half<'t, T: Real>(x: &Var<'t, T>) -> Result<Var<'t, T>> {
    let y = resample::resize_half(x.value())?;
    Ok(x.tape.record(&[x], y, || {
        Box::new(|g, _| vec![Some(resample::resize_half_grad(g))])
    }))
}

pub fn resize_double<'t, T: Real>(x: &Var<'t, T>) -> Result<Var<'t, T>> {
    let y = resample::resize_double(x.value())?;
    Ok(x.tape.record(&[x], y, || {
        Box::new(|g, _| vec![Some(resample::resize_double_grad(g))])
    }))
}

/// Batch normalization with batch statistics. Returns the normalized var
/// and the updated running statistics.
pub fn batch_norm_train<'t, T: Real>(
    x: &Var<'t, T>,
    gamma: &Var<'t, T>,
    beta: &Var<'t, T>,
    running: &norm::RunningStats<T>,
    eps: T,
    momentum: T,
) -> Result<(Var<'t, T>, norm::RunningStats<T>)> {
    let (y, cache, next) = norm::batch_norm_train(x.value(), gamma.value(), beta.value(), running, eps, momentum)?;
    let gv = gamma.rc();
    let var = x.tape.record(&[x, gamma, beta], y, move || {
        Box::new(move |g, need| {
            let (dx, dgamma, dbeta) = norm::batch_norm_train_grad(g, &gv, &cache);
            vec![
                need[0].then_some(dx),
                need[1].then_some(dgamma.reshape(gv.shape()).expect("channel count")),
                need[2].then_some(dbeta.reshape(gv.shape()).expect("channel count")),
            ]
        })
    });
    Ok((var, next))
}

/// Batch normalization with frozen running statistics.
pub fn batch_norm_eval<'t, T: Real>(
    x: &Var<'t, T>,
    gamma: &Var<'t, T>,
    beta: &Var<'t, T>,
    running: &norm::RunningStats<T>,
    eps: T,
) -> Result<Var<'t, T>> {
    let y = norm::batch_norm_eval(x.value(), gamma.value(), beta.value(), running, eps)?;
    let xv = x.rc();
    let istd: Vec<T> = running.var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mean = running.mean.data().to_vec();
    let gv = gamma.rc();
    Ok(x.tape.record(&[x, gamma, beta], y, move || {
        Box::new(move |g, need| {
            let s = g.shape();
            let scale: Vec<T> = gv.data().iter().zip(&istd).map(|(&a, &b)| a * b).collect();
            let zero = vec![T::zero(); s.c];
            let dx = when(need[0], || norm::channel_affine(g, &scale, &zero));
            let mut dgamma = vec![T::zero(); s.c];
            let mut dbeta = vec![T::zero(); s.c];
            if need[1] || need[2] {
                for n in 0..s.n {
                    for c in 0..s.c {
                        let gp = g.plane(n, c);
                        let xp = xv.plane(n, c);
                        dbeta[c] += gp.iter().copied().sum::<T>();
                        dgamma[c] += gp
                            .iter()
                            .zip(xp)
                            .map(|(&gg, &xx)| gg * (xx - mean[c]) * istd[c])
                            .sum::<T>();
                    }
                }
            }
            let cs = gv.shape();
            vec![
                dx,
                when(need[1], || Tensor::from_vec(cs, dgamma).expect("channel count")),
                when(need[2], || Tensor::from_vec(cs, dbeta).expect("channel count")),
            ]
        })
    }))
}

/// Real part of the forward 2-D DFT.
pub fn fft2_re<'t, T: Real>(x: &Var<'t, T>) -> Var<'t, T> {
    let (re, _) = ops::fft2(x.value());
    // d/dx of Re(F x) applied to g is Re(F g) (the cosine kernel is symmetric).
    x.tape.record(&[x], re, || Box::new(|g, _| vec![Some(ops::fft2(g).0)]))
}

/// Imaginary part of the forward 2-D DFT.
pub fn fft2_im<'t, T: Real>(x: &Var<'t, T>) -> Var<'t, T> {
    let (_, im) = ops::fft2(x.value());
    x.tape.record(&[x], im, || Box::new(|g, _| vec![Some(ops::fft2(g).1)]))
}
