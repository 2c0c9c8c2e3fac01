//! Adam training loop, evaluation and checkpoints.

pub mod checkpoint;

use std::fmt;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, AdamState, Checkpoint, SamplerState, TrainingState,
};

use crate::autodiff::Tape;
use crate::data::{derive_seed, pyramid, synth::reflect, Manifest};
use crate::error::{contract, Error, Result};
use crate::metrics::{self, MetricReport};
use crate::network::{self, ModelConfig, MIN_INPUT_SIZE};
use crate::objectives::{total_loss, SpectralNorm, DEFAULT_LAMBDA};
use crate::ops::NormMode;
use crate::params::{apply_stat_updates, Ctx, ForwardOptions, ModelParams};
use crate::tensor::{Shape, Tensor};

/// Stream id mixed into the training seed for the batch sampler.
const SAMPLER_STREAM: u64 = 0x5A3D_17;
const CROP_STREAM: u64 = 0xC409;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub lambda: f64,
    /// Seeds both parameter initialization and batch sampling.
    pub seed: u64,
    /// Evaluate on the held-out set every this many iterations; 0 disables.
    pub eval_every: u64,
    pub checkpoint_path: Option<PathBuf>,
    /// Save every this many iterations; the final state is always saved.
    pub checkpoint_every: u64,
    /// Cosine-decay floor; `lr / 100` when unset.
    pub lr_min: Option<f64>,
    /// Train on random square crops of this size instead of whole images.
    pub crop: Option<usize>,
    pub spectral_norm: SpectralNorm,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 4,
            iterations: 1000,
            lambda: DEFAULT_LAMBDA,
            seed: 0,
            eval_every: 0,
            checkpoint_path: None,
            checkpoint_every: 0,
            lr_min: None,
            crop: None,
            spectral_norm: SpectralNorm::ReIm,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return cfg(format!("lr must be positive, got {}", self.lr));
        }
        if self.iterations < 1 {
            return cfg("iterations must be at least 1".into());
        }
        if self.batch_size < 1 {
            return cfg("batch_size must be at least 1".into());
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return cfg(format!("betas must lie in [0, 1), got ({}, {})", self.beta1, self.beta2));
        }
        if !(self.eps > 0.0) {
            return cfg(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return cfg(format!("lambda must be non-negative, got {}", self.lambda));
        }
        let lr_min = self.lr_min();
        if !(lr_min >= 0.0 && lr_min <= self.lr) {
            return cfg(format!("lr_min must lie in [0, lr], got {lr_min}"));
        }
        if let Some(c) = self.crop {
            if c == 0 || c % 8 != 0 {
                return cfg(format!("crop size must be a positive multiple of 8, got {c}"));
            }
        }
        Ok(())
    }

    pub fn lr_min(&self) -> f64 {
        self.lr_min.unwrap_or(self.lr / 100.0)
    }

    /// Learning rate of 0-based step `i`: cosine from `lr` down to `lr_min`
    /// at the last step.
    pub fn lr_at(&self, i: u64) -> f64 {
        if self.iterations <= 1 {
            return self.lr;
        }
        let p = (i.min(self.iterations - 1)) as f64 / (self.iterations - 1) as f64;
        let lo = self.lr_min();
        lo + 0.5 * (self.lr - lo) * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

/// One Adam update with bias correction at 1-based step `t`.
///
/// Only trainable parameters are touched; `grads` must cover exactly those.
pub fn adam_step(
    params: &mut ModelParams<f32>,
    grads: &ModelParams<f32>,
    state: &mut AdamState,
    t: u64,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    contract!(t >= 1, "Adam step counter starts at 1");
    contract!(
        grads.len() == params.trainable().count() && grads.names().all(|n| params.contains(n)),
        "gradient set does not match the trainable parameters"
    );
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for (name, g) in grads.iter() {
        let p = params.get_mut(name).ok_or_else(|| Error::MissingParameter { missing: name.into() })?;
        let m = state.m.get_mut(name).ok_or_else(|| Error::MissingParameter { missing: format!("moment {name}") })?;
        let v = state.v.get_mut(name).ok_or_else(|| Error::MissingParameter { missing: format!("moment {name}") })?;
        contract!(p.shape() == g.shape() && m.shape() == g.shape() && v.shape() == g.shape(), "shape mismatch for {name}");
        for (((pk, mk), vk), &gk) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
            let g = gk as f64;
            let m_new = b1 * *mk as f64 + (1.0 - b1) * g;
            let v_new = b2 * *vk as f64 + (1.0 - b2) * g * g;
            *mk = m_new as f32;
            *vk = v_new as f32;
            let update = lr * (m_new / c1) / ((v_new / c2).sqrt() + cfg.eps);
            *pk = (*pk as f64 - update) as f32;
        }
    }
    Ok(())
}

/// Full-resolution `(blurred, sharp)` tensors of shape `(1, 3, h, w)`.
#[derive(Clone, Debug, Default)]
pub struct PairSet {
    pub names: Vec<String>,
    pub pairs: Vec<(Tensor<f32>, Tensor<f32>)>,
}

impl PairSet {
    pub fn from_manifest(manifest: &Manifest) -> Result<Self> {
        let mut set = PairSet::default();
        for e in &manifest.entries {
            let (b, s) = manifest.load_pair(e)?;
            contract!(
                b.width() == s.width() && b.height() == s.height(),
                "{} and {} differ in size",
                e.blur,
                e.sharp
            );
            let stem = e.blur.trim_end_matches(".ppm").trim_end_matches("_blur").to_string();
            set.names.push(stem);
            set.pairs.push((b.to_tensor(), s.to_tensor()));
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Loss breakdown of one optimization step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    /// 1-based index of the step just taken.
    pub iteration: u64,
    pub l_cont: f64,
    pub l_msfr: f64,
    pub l_total: f64,
    pub lr: f64,
}

impl fmt::Display for LogRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {} {}", self.iteration, self.l_cont, self.l_msfr, self.l_total, self.lr)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Event {
    Step(LogRow),
    Eval { iteration: u64, mean: MetricReport },
    Saved { iteration: u64, path: PathBuf },
}

pub struct Trainer {
    pub model: ModelConfig,
    pub cfg: TrainConfig,
    pub params: ModelParams<f32>,
    pub state: TrainingState,
}

impl Trainer {
    pub fn new(model: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        model.validate()?;
        cfg.validate()?;
        let params = network::build::<f32>(&model, cfg.seed)?;
        let state = TrainingState {
            adam: AdamState::zeros_like(&params),
            iteration: 0,
            sampler: SamplerState { seed: derive_seed(cfg.seed, SAMPLER_STREAM), cursor: 0 },
        };
        Ok(Trainer { model, cfg, params, state })
    }

    /// Continues from a saved training state.
    pub fn resume(ckpt: Checkpoint, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let state = ckpt
            .training
            .ok_or_else(|| Error::Config("checkpoint holds no optimizer state to resume from".into()))?;
        Ok(Trainer { model: ckpt.config, cfg, params: ckpt.params, state })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint { config: self.model.clone(), params: self.params.clone(), training: Some(self.state.clone()) }
    }

    pub fn is_done(&self) -> bool {
        self.state.iteration >= self.cfg.iterations
    }

    /// Indices and crop offsets of the next batch, advancing the sampler.
    fn next_batch(&mut self, data: &PairSet) -> Result<Tensor2> {
        let n = data.len() as u64;
        contract!(n > 0, "training set is empty");
        let mut blurred = Vec::with_capacity(self.cfg.batch_size);
        let mut sharp = Vec::with_capacity(self.cfg.batch_size);
        let mut perm_epoch = u64::MAX;
        let mut perm: Vec<usize> = Vec::new();
        for _ in 0..self.cfg.batch_size {
            let pos = self.state.sampler.cursor;
            let epoch = pos / n;
            if epoch != perm_epoch {
                perm = (0..data.len()).collect();
                perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.state.sampler.seed, epoch)));
                perm_epoch = epoch;
            }
            let (b, s) = &data.pairs[perm[(pos % n) as usize]];
            let (b, s) = match self.cfg.crop {
                Some(c) if c < b.shape().h || c < b.shape().w => {
                    let sh = b.shape();
                    contract!(c <= sh.h && c <= sh.w, "crop {c} exceeds image {}x{}", sh.h, sh.w);
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.state.sampler.seed ^ CROP_STREAM, pos));
                    let y = rng.random_range(0..=sh.h - c);
                    let x = rng.random_range(0..=sh.w - c);
                    (b.crop(y, x, c, c)?, s.crop(y, x, c, c)?)
                }
                _ => (b.clone(), s.clone()),
            };
            blurred.push(b);
            sharp.push(s);
            self.state.sampler.cursor += 1;
        }
        Ok((Tensor::stack_batch(&blurred)?, Tensor::stack_batch(&sharp)?))
    }

    /// One forward/backward/update cycle.
    pub fn step(&mut self, data: &PairSet) -> Result<LogRow> {
        contract!(!self.is_done(), "training already finished {} iterations", self.cfg.iterations);
        let (blurred, sharp) = self.next_batch(data)?;
        let targets = pyramid(sharp)?;
        let i = self.state.iteration;
        let lr = self.cfg.lr_at(i);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.params, ForwardOptions::for_config(&self.model, NormMode::Train));
        let input = tape.constant(blurred);
        let out = network::forward(&ctx, &self.model, &input)?;
        let (loss, report) = total_loss(&out.scales, &targets, self.cfg.lambda, self.cfg.spectral_norm)?;
        if !report.l_total.is_finite() {
            if let Some(path) = &self.cfg.checkpoint_path {
                let mut diag = path.clone().into_os_string();
                diag.push(".nan");
                save_checkpoint(&self.checkpoint(), &PathBuf::from(diag))?;
            }
            return Err(Error::NonFinite(format!("loss at iteration {}", i + 1)));
        }
        tape.backward(&loss)?;
        let grads = ctx.gradients();
        let stats = ctx.take_stat_updates();
        drop(ctx);
        adam_step(&mut self.params, &grads, &mut self.state.adam, i + 1, lr, &self.cfg)?;
        apply_stat_updates(&mut self.params, stats);
        self.state.iteration += 1;
        Ok(LogRow {
            iteration: self.state.iteration,
            l_cont: report.l_cont,
            l_msfr: report.l_msfr,
            l_total: report.l_total,
            lr,
        })
    }

    fn save(&self, sink: &mut dyn FnMut(Event)) -> Result<()> {
        if let Some(path) = &self.cfg.checkpoint_path {
            save_checkpoint(&self.checkpoint(), path)?;
            sink(Event::Saved { iteration: self.state.iteration, path: path.clone() });
        }
        Ok(())
    }

    /// Steps until `cfg.iterations`, reporting progress through `sink`.
    pub fn run(&mut self, data: &PairSet, held_out: Option<&PairSet>, sink: &mut dyn FnMut(Event)) -> Result<()> {
        while !self.is_done() {
            let row = self.step(data)?;
            sink(Event::Step(row));
            let it = self.state.iteration;
            if let Some(eval) = held_out.filter(|_| self.cfg.eval_every > 0 && it % self.cfg.eval_every == 0) {
                let (_, mean) = evaluate(&self.params, &self.model, eval)?;
                sink(Event::Eval { iteration: it, mean });
            }
            if self.cfg.checkpoint_every > 0 && it % self.cfg.checkpoint_every == 0 && !self.is_done() {
                self.save(sink)?;
            }
        }
        self.save(sink)
    }
}

type Tensor2 = (Tensor<f32>, Tensor<f32>);

/// Reflect-pads at the bottom and right so both sides are multiples of 8 and
/// at least [`MIN_INPUT_SIZE`].
pub fn pad_for_network(x: &Tensor<f32>) -> Tensor<f32> {
    let s = x.shape();
    let grow = |n: usize| (n.div_ceil(8) * 8).max(MIN_INPUT_SIZE);
    let (h, w) = (grow(s.h), grow(s.w));
    if (h, w) == (s.h, s.w) {
        return x.clone();
    }
    Tensor::from_fn(Shape::new(s.n, s.c, h, w), |[n, c, y, xx]| {
        x.at(n, c, reflect(y as isize, s.h), reflect(xx as isize, s.w))
    })
}

/// Full-resolution restoration of a `(1, 3, h, w)` image of any size,
/// clamped to [0, 1].
pub fn restore(params: &ModelParams<f32>, model: &ModelConfig, blurred: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = blurred.shape();
    contract!(s.n == 1 && s.c == 3 && s.h > 0 && s.w > 0, "expected a (1, 3, h, w) image, got {s}");
    let padded = pad_for_network(blurred);
    let [full, _, _] = network::infer(params, model, &padded)?;
    Ok(full.crop(0, 0, s.h, s.w)?.map(|v| v.clamp(0.0, 1.0)))
}

/// Metrics of `f(blurred)` against sharp for every pair, plus their mean.
pub fn evaluate_with(
    data: &PairSet,
    mut f: impl FnMut(&Tensor<f32>) -> Result<Tensor<f32>>,
) -> Result<(Vec<MetricReport>, MetricReport)> {
    let reports = data
        .pairs
        .iter()
        .map(|(b, s)| metrics::evaluate_pair(&f(b)?, s))
        .collect::<Result<Vec<_>>>()?;
    let mean = MetricReport::mean(&reports).ok_or_else(|| Error::Contract("nothing to evaluate".into()))?;
    Ok((reports, mean))
}

/// Metrics of the model's full-scale output on every pair.
pub fn evaluate(
    params: &ModelParams<f32>,
    model: &ModelConfig,
    data: &PairSet,
) -> Result<(Vec<MetricReport>, MetricReport)> {
    evaluate_with(data, |b| restore(params, model, b))
}
