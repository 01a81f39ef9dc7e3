//! Losses, metrics, Adam and the early-stopping training loop.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::WindowDataset;
use crate::error::{Error, Result};
use crate::model::Petformer;
use crate::nn::{Bound, ForwardCtx, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SmoothL1,
    L2,
    L1,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::SmoothL1, LossKind::L2, LossKind::L1];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::SmoothL1 => "smooth_l1",
            LossKind::L2 => "l2",
            LossKind::L1 => "l1",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        LossKind::ALL.into_iter().find(|k| k.as_str() == norm).ok_or_else(|| {
            Error::config(
                "loss",
                format!("unknown value `{s}`, expected one of smooth_l1, l2, l1"),
            )
        })
    }
}

fn check_pair(op: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Contract(format!(
            "{op}: prediction {a:?} and target {b:?} differ in shape"
        )));
    }
    Ok(())
}

/// Mean over all elements of the piecewise `0.5·x²` (|x| < 1) / `|x| − 0.5`.
pub fn smooth_l1_loss<'t>(pred: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    check_pair("smooth_l1", &pred.shape(), &target.shape())?;
    Ok(pred.sub(target)?.smooth_l1().mean_all())
}

pub fn mse_loss<'t>(pred: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    check_pair("mse", &pred.shape(), &target.shape())?;
    Ok(pred.sub(target)?.square().mean_all())
}

pub fn l1_loss<'t>(pred: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    check_pair("l1", &pred.shape(), &target.shape())?;
    Ok(pred.sub(target)?.abs().mean_all())
}

pub fn loss<'t>(kind: LossKind, pred: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    match kind {
        LossKind::SmoothL1 => smooth_l1_loss(pred, target),
        LossKind::L2 => mse_loss(pred, target),
        LossKind::L1 => l1_loss(pred, target),
    }
}

pub fn mse(target: &[f64], pred: &[f64]) -> Result<f64> {
    check_pair("mse", &[target.len()], &[pred.len()])?;
    if target.is_empty() {
        return Err(Error::Contract("mse of empty arrays".into()));
    }
    Ok(target.iter().zip(pred).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / target.len() as f64)
}

pub fn mae(target: &[f64], pred: &[f64]) -> Result<f64> {
    check_pair("mae", &[target.len()], &[pred.len()])?;
    if target.is_empty() {
        return Err(Error::Contract("mae of empty arrays".into()));
    }
    Ok(target.iter().zip(pred).map(|(a, b)| (a - b).abs()).sum::<f64>() / target.len() as f64)
}

/// Error summary over a set of windows; `n` counts windows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub seed: u64,
    pub loss: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-4,
            patience: 5,
            seed: 2023,
            loss: LossKind::SmoothL1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience", "must be at least 1"));
        }
        // zero is allowed: it freezes the parameters, which is useful for checks
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::config(
                "learning_rate",
                format!("{} must be finite and nonnegative", self.learning_rate),
            ));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

impl Adam {
    pub fn new() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// First moment of parameter `index`, once it has received a gradient.
    pub fn first_moment(&self, index: usize) -> Option<&[f64]> {
        self.m.get(index).and_then(|m| m.as_deref())
    }

    /// Applies one update. `grads[i]` belongs to `store.entries()[i]`;
    /// `None` entries (buffers, unreached parameters) are left untouched.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for (entry, g) in store.entries().iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != entry.value.shape() {
                    return Err(Error::Contract(format!("gradient shape mismatch for `{}`", entry.name)));
                }
                if !g.all_finite() {
                    return Err(Error::NonFiniteGradient {
                        param: entry.name.clone(),
                    });
                }
            }
        }
        self.m.resize(store.len(), None);
        self.v.resize(store.len(), None);
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (entry, g)) in store.entries_mut().iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let n = g.numel();
            let m = self.m[i].get_or_insert_with(|| vec![0.0; n]);
            let v = self.v[i].get_or_insert_with(|| vec![0.0; n]);
            for (((p, &gi), mi), vi) in entry
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Anything trainable by [`train`]: a parameter store plus a differentiable
/// map from `[B, l, d]` windows to `[B, h, d]` forecasts.
pub trait Forecaster {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn forward<'t>(&self, params: &Bound<'t>, x: Var<'t>, ctx: &mut ForwardCtx) -> Result<Var<'t>>;

    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let params = self.params().bind(&tape);
        let y = self.forward(&params, tape.constant(x.clone()), &mut ForwardCtx::eval())?;
        Ok(y.value().as_ref().clone())
    }
}

impl Forecaster for Petformer {
    fn params(&self) -> &ParamStore {
        Petformer::params(self)
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        Petformer::params_mut(self)
    }

    fn forward<'t>(&self, params: &Bound<'t>, x: Var<'t>, ctx: &mut ForwardCtx) -> Result<Var<'t>> {
        Petformer::forward(self, params, x, ctx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (0 = initial parameters).
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    /// Set when training aborted on a non-finite loss or gradient; the model
    /// then holds the last good parameters.
    pub diverged: Option<Error>,
}

/// Scores `forecast` on every window in chronological order.
pub fn evaluate_with<F>(data: &WindowDataset, batch_size: usize, mut forecast: F) -> Result<Metrics>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    if data.is_empty() {
        return Err(Error::Data("no evaluation windows".into()));
    }
    let (mut sq, mut abs, mut count) = (0.0, 0.0, 0usize);
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk);
        let pred = forecast(&x, y.shape()[1])?;
        check_pair("evaluate", pred.shape(), y.shape())?;
        for (p, t) in pred.data().iter().zip(y.data()) {
            sq += (p - t) * (p - t);
            abs += (p - t).abs();
        }
        count += y.numel();
    }
    Ok(Metrics {
        mse: sq / count as f64,
        mae: abs / count as f64,
        n: data.len(),
    })
}

/// Inference-mode metrics of `model` (dropout off, running normalization
/// statistics).
pub fn evaluate<M: Forecaster>(model: &M, data: &WindowDataset, batch_size: usize) -> Result<Metrics> {
    evaluate_with(data, batch_size, |x, _| model.predict(x))
}

/// Forecasts every horizon step as the last observed look-back value.
pub fn repeat_last_value(x: &Tensor, horizon: usize) -> Tensor {
    let shape = x.shape();
    let (b, l, d) = (shape[0], shape[1], shape[2]);
    let mut out = Vec::with_capacity(b * horizon * d);
    for s in 0..b {
        let last = &x.data()[(s * l + l - 1) * d..(s * l + l) * d];
        for _ in 0..horizon {
            out.extend_from_slice(last);
        }
    }
    Tensor::new(&[b, horizon, d], out).expect("baseline shape")
}

pub fn evaluate_repeat_last(data: &WindowDataset, batch_size: usize) -> Result<Metrics> {
    evaluate_with(data, batch_size, |x, h| Ok(repeat_last_value(x, h)))
}

/// Seeded epoch loop with early stopping on validation MSE. On return the
/// model holds the parameters of the best validation epoch.
pub fn train<M: Forecaster>(
    model: &mut M,
    train_set: &WindowDataset,
    val_set: &WindowDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("no training windows".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Data("no validation windows".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new();
    let mut best_store = model.params().clone();
    let mut best_val = evaluate(model, val_set, cfg.batch_size)?.mse;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = train_set.batch(chunk);
            let tape = Tape::new();
            let params = model.params().bind(&tape);
            let mut ctx = ForwardCtx::training(rng);
            let step = (|| {
                let pred = model.forward(&params, tape.constant(x), &mut ctx)?;
                let l = loss(cfg.loss, pred, tape.constant(y))?;
                let value = l.value().item();
                if !value.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        reason: format!("training loss became {value}"),
                    });
                }
                let grads = params.gradients(&tape.backward(l)?);
                Ok((value, grads))
            })();
            let updates = ctx.take_updates();
            rng = ctx.into_rng();
            let (value, grads) = match step {
                Ok(ok) => ok,
                Err(e @ Error::Diverged { .. }) => {
                    return Ok(abort(model, best_store, history, best_epoch, best_val, e))
                }
                Err(e) => return Err(e),
            };
            match adam.step(model.params_mut(), &grads, cfg.learning_rate) {
                Ok(()) => {}
                Err(Error::NonFiniteGradient { param }) => {
                    let e = Error::Diverged {
                        epoch,
                        reason: format!("non-finite gradient for `{param}`"),
                    };
                    return Ok(abort(model, best_store, history, best_epoch, best_val, e));
                }
                Err(e) => return Err(e),
            }
            model.params_mut().apply_updates(updates);
            loss_sum += value * chunk.len() as f64;
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let val_loss = evaluate(model, val_set, cfg.batch_size)?.mse;
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr: cfg.learning_rate,
        });
        log::info!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");
        if !val_loss.is_finite() {
            let e = Error::Diverged {
                epoch,
                reason: format!("validation loss became {val_loss}"),
            };
            return Ok(abort(model, best_store, history, best_epoch, best_val, e));
        }
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_store = model.params().clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                model.params_mut().load_from(&best_store)?;
                return Ok(TrainOutcome {
                    history,
                    best_epoch,
                    best_val_loss: best_val,
                    stopped_early: epoch < cfg.epochs,
                    diverged: None,
                });
            }
        }
    }
    model.params_mut().load_from(&best_store)?;
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val_loss: best_val,
        stopped_early: false,
        diverged: None,
    })
}

fn abort<M: Forecaster>(
    model: &mut M,
    best: ParamStore,
    history: Vec<EpochRecord>,
    best_epoch: usize,
    best_val: f64,
    err: Error,
) -> TrainOutcome {
    log::error!("{err}");
    model
        .params_mut()
        .load_from(&best)
        .expect("snapshot taken from the same model");
    TrainOutcome {
        history,
        best_epoch,
        best_val_loss: best_val,
        stopped_early: true,
        diverged: Some(err),
    }
}
