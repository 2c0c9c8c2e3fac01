//! Named parameter sets and the forward-pass binding context.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::autodiff::{self, Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{ConvGeometry, NormMode, RunningStats, BN_EPS, BN_MOMENTUM};
use crate::tensor::{Real, Shape, Tensor};

const RUNNING_MEAN: &str = ".running_mean";
const RUNNING_VAR: &str = ".running_var";

/// Whether a parameter name denotes a trainable tensor (as opposed to a
/// batch-norm running statistic).
pub fn is_trainable(name: &str) -> bool {
    !(name.ends_with(RUNNING_MEAN) || name.ends_with(RUNNING_VAR))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `U(-1/√fan_in, 1/√fan_in)`.
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Shape,
    pub init: Init,
}

/// Ordered list of parameter declarations for one model configuration.
#[derive(Clone, Debug, Default)]
pub struct Layout {
    decls: Vec<ParamDecl>,
}

impl Layout {
    pub fn new() -> Self {
        Layout::default()
    }

    pub fn decls(&self) -> &[ParamDecl] {
        &self.decls
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Shape, init: Init) {
        self.decls.push(ParamDecl {
            name: name.into(),
            shape,
            init,
        });
    }

    /// Weight `(c_out, c_in/groups, kh, kw)` plus bias.
    pub fn conv(&mut self, name: &str, c_in: usize, c_out: usize, kh: usize, kw: usize, groups: usize) {
        let fan_in = c_in / groups * kh * kw;
        self.push(
            format!("{name}.weight"),
            Shape::new(c_out, c_in / groups, kh, kw),
            Init::Uniform { fan_in },
        );
        self.push(format!("{name}.bias"), Shape::new(1, c_out, 1, 1), Init::Zeros);
    }

    /// Transposed conv weight `(c_in, c_out, k, k)` plus bias.
    pub fn conv_transpose(&mut self, name: &str, c_in: usize, c_out: usize, k: usize) {
        self.push(
            format!("{name}.weight"),
            Shape::new(c_in, c_out, k, k),
            Init::Uniform { fan_in: c_in * k * k },
        );
        self.push(format!("{name}.bias"), Shape::new(1, c_out, 1, 1), Init::Zeros);
    }

    pub fn batch_norm(&mut self, name: &str, c: usize) {
        let s = Shape::new(1, c, 1, 1);
        self.push(format!("{name}.gamma"), s, Init::Ones);
        self.push(format!("{name}.beta"), s, Init::Zeros);
        self.push(format!("{name}{RUNNING_MEAN}"), s, Init::Zeros);
        self.push(format!("{name}{RUNNING_VAR}"), s, Init::Ones);
    }

    /// Two 3×3 convolutions with an activation between them.
    pub fn fout(&mut self, name: &str, c_in: usize, c_out: usize) {
        self.conv(&format!("{name}.conv1"), c_in, c_out, 3, 3, 1);
        self.conv(&format!("{name}.conv2"), c_out, c_out, 3, 3, 1);
    }

    pub fn trainable_count(&self) -> usize {
        self.decls
            .iter()
            .filter(|d| is_trainable(&d.name))
            .map(|d| d.shape.numel())
            .sum()
    }

    /// Materializes every declared tensor, drawing uniform weights from `rng`
    /// in declaration order.
    pub fn materialize<T: Real>(&self, rng: &mut impl Rng) -> ModelParams<T> {
        let mut params = ModelParams::new();
        for d in &self.decls {
            let t = match d.init {
                Init::Zeros => Tensor::zeros(d.shape),
                Init::Ones => Tensor::full(d.shape, T::one()),
                Init::Uniform { fan_in } => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let data = (0..d.shape.numel())
                        .map(|_| T::of(rng.random_range(-bound..bound)))
                        .collect();
                    Tensor::from_vec(d.shape, data).expect("declared shape")
                }
            };
            params.insert(d.name.clone(), t);
        }
        params
    }
}

/// Named tensors of one model, ordered by name.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModelParams<T: Real = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ModelParams<T> {
    pub fn new() -> Self {
        ModelParams {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: String, t: Tensor<T>) -> Option<Tensor<T>> {
        self.tensors.insert(name, t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.iter().filter(|(k, _)| is_trainable(k))
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.trainable().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Checks that the name set and shapes match a layout exactly. Reports
    /// the first unknown name, then the first missing one.
    pub fn check_layout(&self, layout: &Layout) -> Result<()> {
        let declared: HashMap<&str, Shape> =
            layout.decls().iter().map(|d| (d.name.as_str(), d.shape)).collect();
        for (name, t) in self.iter() {
            match declared.get(name) {
                None => return Err(Error::UnknownParameter(name.to_string())),
                Some(&s) if s != t.shape() => {
                    return Err(Error::Contract(format!(
                        "parameter {name} has shape {} but the configuration declares {s}",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(d) = layout.decls().iter().find(|d| !self.contains(&d.name)) {
            return Err(Error::MissingParameter {
                missing: d.name.clone(),
            });
        }
        Ok(())
    }
}

/// Switches used by the forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions<T> {
    pub mode: NormMode,
    pub slope: T,
    /// Replace every batch norm with the identity.
    pub use_bn: bool,
    /// Skip the activation inside two-conv mappings. Only meaningful for
    /// pass-through checks of the blocks.
    pub bypass_activation: bool,
}

/// Binds a [`ModelParams`] set onto a tape for one forward pass.
pub struct Ctx<'t, 'p, T: Real> {
    tape: &'t Tape<T>,
    params: &'p ModelParams<T>,
    bound: RefCell<HashMap<String, Var<'t, T>>>,
    stats: RefCell<BTreeMap<String, Tensor<T>>>,
    pub opts: ForwardOptions<T>,
}

impl<'t, 'p, T: Real> Ctx<'t, 'p, T> {
    pub fn new(tape: &'t Tape<T>, params: &'p ModelParams<T>, opts: ForwardOptions<T>) -> Self {
        Ctx {
            tape,
            params,
            bound: RefCell::new(HashMap::new()),
            stats: RefCell::new(BTreeMap::new()),
            opts,
        }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// The tape leaf for a parameter, created on first use.
    pub fn p(&self, name: &str) -> Result<Var<'t, T>> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(v.clone());
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::MissingParameter { missing: name.to_string() })?;
        let v = if is_trainable(name) {
            self.tape.param(t.clone())
        } else {
            self.tape.constant(t.clone())
        };
        self.bound.borrow_mut().insert(name.to_string(), v.clone());
        Ok(v)
    }

    /// Every bound trainable parameter, by name.
    pub fn bound_params(&self) -> Vec<(String, Var<'t, T>)> {
        let mut v: Vec<_> = self
            .bound
            .borrow()
            .iter()
            .filter(|(k, _)| is_trainable(k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }

    /// Gradients of every trainable parameter after [`Tape::backward`];
    /// parameters that were never used get zeros.
    pub fn gradients(&self) -> ModelParams<T> {
        let bound = self.bound.borrow();
        let mut grads = ModelParams::new();
        for (name, t) in self.params.trainable() {
            let g = bound
                .get(name)
                .and_then(|v| self.tape.grad(v))
                .unwrap_or_else(|| Tensor::zeros(t.shape()));
            grads.insert(name.to_string(), g);
        }
        grads
    }

    /// Running statistics produced by train-mode batch norms.
    pub fn take_stat_updates(&self) -> BTreeMap<String, Tensor<T>> {
        std::mem::take(&mut *self.stats.borrow_mut())
    }

    pub fn conv(&self, x: &Var<'t, T>, name: &str, geom: ConvGeometry) -> Result<Var<'t, T>> {
        let w = self.p(&format!("{name}.weight"))?;
        let b = self.p(&format!("{name}.bias"))?;
        autodiff::conv2d(x, &w, Some(&b), geom)
    }

    /// Same-padded stride-1 convolution whose kernel size is read from the weight.
    pub fn conv_same(&self, x: &Var<'t, T>, name: &str, groups: usize) -> Result<Var<'t, T>> {
        let w = self.p(&format!("{name}.weight"))?;
        let b = self.p(&format!("{name}.bias"))?;
        let s = w.shape();
        autodiff::conv2d(x, &w, Some(&b), ConvGeometry::same(s.h, s.w, groups))
    }

    pub fn conv_transpose(&self, x: &Var<'t, T>, name: &str, stride: usize, padding: usize) -> Result<Var<'t, T>> {
        let w = self.p(&format!("{name}.weight"))?;
        let b = self.p(&format!("{name}.bias"))?;
        autodiff::conv_transpose2d(x, &w, Some(&b), stride, padding)
    }

    pub fn act(&self, x: &Var<'t, T>) -> Var<'t, T> {
        if self.opts.bypass_activation {
            x.clone()
        } else {
            autodiff::leaky_relu(x, self.opts.slope)
        }
    }

    pub fn batch_norm(&self, x: &Var<'t, T>, name: &str) -> Result<Var<'t, T>> {
        if !self.opts.use_bn {
            return Ok(x.clone());
        }
        let gamma = self.p(&format!("{name}.gamma"))?;
        let beta = self.p(&format!("{name}.beta"))?;
        let mean_name = format!("{name}{RUNNING_MEAN}");
        let var_name = format!("{name}{RUNNING_VAR}");
        let running = RunningStats {
            mean: self.p(&mean_name)?.value().clone(),
            var: self.p(&var_name)?.value().clone(),
        };
        let eps = T::of(BN_EPS);
        match self.opts.mode {
            NormMode::Train => {
                let (y, next) =
                    autodiff::batch_norm_train(x, &gamma, &beta, &running, eps, T::of(BN_MOMENTUM))?;
                let mut stats = self.stats.borrow_mut();
                stats.insert(mean_name, next.mean);
                stats.insert(var_name, next.var);
                Ok(y)
            }
            NormMode::Eval => autodiff::batch_norm_eval(x, &gamma, &beta, &running, eps),
        }
    }

    /// `conv2(act(conv1(x)))` with 3×3 kernels.
    pub fn fout(&self, x: &Var<'t, T>, name: &str) -> Result<Var<'t, T>> {
        let h = self.conv_same(x, &format!("{name}.conv1"), 1)?;
        let h = self.act(&h);
        self.conv_same(&h, &format!("{name}.conv2"), 1)
    }
}

/// Writes running-stat updates back into a parameter set.
pub fn apply_stat_updates<T: Real>(params: &mut ModelParams<T>, updates: BTreeMap<String, Tensor<T>>) {
    for (k, v) in updates {
        if let Some(slot) = params.get_mut(&k) {
            *slot = v;
        }
    }
}
