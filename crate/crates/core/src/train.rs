//! Adam, EMA shadow weights and the train/validate loop.

use std::fs;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::checkpoint::save_params_checkpoint;
use crate::data::{Role, SessionRecord};
use crate::error::{DatError, Result};
use crate::metrics::{evaluate_sessions, EvalReport, LossKind};
use crate::model::DatModel;
use crate::nn::RunMode;
use crate::params::{Gradients, ParamStore};
use crate::segmentation::{extract_series, extract_window, make_segments, Segment};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub ema_decay: f64,
    pub seed: u64,
    pub loss: LossKind,
    /// Log a progress line every this many batches; 0 disables.
    pub report_every: usize,
    /// Decoupled weight decay; 0 disables.
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-5,
            batch_size: 128,
            epochs: 50,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            ema_decay: 0.999,
            seed: 0,
            loss: LossKind::Mse,
            report_every: 0,
            weight_decay: 0.0,
            grad_clip: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DatError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay must be in [0, 1), got {}", self.ema_decay));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("Adam betas must be in [0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be > 0, got {}", self.adam_eps));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return bad("weight_decay and grad_clip must be >= 0".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamParams {
    pub fn new(lr: f64) -> Self {
        AdamParams {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl From<&TrainConfig> for AdamParams {
    fn from(c: &TrainConfig) -> Self {
        AdamParams {
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.adam_eps,
            weight_decay: c.weight_decay,
        }
    }
}

/// Adam moment buffers, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam step.
///
/// A parameter whose gradient is exactly zero everywhere has its moments
/// decayed but is not moved, so a step with an all-zero gradient leaves θ
/// untouched. Non-finite gradients abort before anything is modified.
pub fn adam_step(params: &mut ParamStore, grads: &Gradients, state: &mut OptimizerState, hp: &AdamParams) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(DatError::InvalidArgument(format!(
            "optimizer has {} buffers and {} gradients for {} parameters",
            state.m.len(),
            grads.len(),
            params.len()
        )));
    }
    let ids: Vec<_> = params.ids().collect();
    for &id in &ids {
        let g = grads.get(id);
        if g.shape() != params.get(id).shape() {
            return Err(DatError::shape("adam_step", g.shape(), params.get(id).shape()));
        }
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(DatError::Numeric(format!("non-finite gradient in {}[{i}]", params.name(id))));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for id in ids {
        let k = id.index();
        let g = grads.get(id).data();
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        let moving = g.iter().any(|x| *x != 0.0);
        for i in 0..g.len() {
            m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
            v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
        }
        if !moving {
            continue;
        }
        let theta = params.get_mut(id).data_mut();
        for i in 0..g.len() {
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            theta[i] -= hp.lr * (mhat / (vhat.sqrt() + hp.eps) + hp.weight_decay * theta[i]);
        }
    }
    Ok(())
}

/// Scales `grads` so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for k in 0..grads.len() {
            grads.get_mut(crate::params::ParamId(k)).data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Exponential moving average of the parameters.
#[derive(Clone, Debug)]
pub struct Ema {
    shadow: ParamStore,
    decay: f64,
}

impl Ema {
    pub fn new(params: &ParamStore, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(DatError::Config(format!("ema decay must be in [0, 1), got {decay}")));
        }
        Ok(Ema {
            shadow: params.clone(),
            decay,
        })
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn shadow(&self) -> &ParamStore {
        &self.shadow
    }

    pub fn into_shadow(self) -> ParamStore {
        self.shadow
    }

    /// `shadow ← decay·shadow + (1 − decay)·θ`
    pub fn update(&mut self, params: &ParamStore) -> Result<()> {
        self.shadow.check_compatible(params)?;
        let d = self.decay;
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let src = params.get(id).data();
            for (s, p) in self.shadow.get_mut(id).data_mut().iter_mut().zip(src) {
                *s = d * *s + (1.0 - d) * p;
            }
        }
        Ok(())
    }
}

pub fn ema_update(ema: &mut Ema, params: &ParamStore) -> Result<()> {
    ema.update(params)
}

/// Evaluates with the EMA weights swapped in, then swaps θ back.
pub fn evaluate_with_ema(model: &mut DatModel, ema: &Ema, sessions: &[SessionRecord]) -> Result<EvalReport> {
    let mut swap = ema.shadow.clone();
    model.params_mut().swap_values(&mut swap)?;
    let report = evaluate_sessions(model, sessions);
    model.params_mut().swap_values(&mut swap)?;
    report
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// NaN when there is no validation data.
    pub val_ccc: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_ccc\n");
    for r in history {
        out.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, r.val_ccc));
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// 1-based epoch with the best validation CCC (the last epoch without
    /// validation data).
    pub best_epoch: usize,
    pub best_val_ccc: f64,
    /// EMA weights at the best epoch.
    pub best_params: ParamStore,
    pub ema: Ema,
}

/// A training example: one segment of one labelled session.
#[derive(Clone, Copy, Debug)]
struct Item {
    session: usize,
    segment: Segment,
}

fn collect_items(model: &DatModel, sessions: &[SessionRecord]) -> Result<Vec<Item>> {
    let cfg = model.config();
    let mut items = Vec::new();
    for (i, s) in sessions.iter().enumerate() {
        s.role(Role::Target)?.features.check_dims(&cfg.feature_dims)?;
        if s.labels().is_none() {
            continue;
        }
        if cfg.uses_partner() && s.partner.is_none() {
            return Err(DatError::Data(format!("session {} has no partner features", s.session_id)));
        }
        for segment in make_segments(s.num_frames(), cfg.core_len, cfg.context_len)? {
            items.push(Item { session: i, segment });
        }
    }
    if items.is_empty() {
        return Err(DatError::Data("no labelled training sessions".into()));
    }
    Ok(items)
}

/// Seed for a derived stream; keeps shuffling and dropout independent.
fn sub_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((a << 32) ^ b);
    rand::RngCore::next_u64(&mut rng)
}

/// Forward + backward over one batch; returns the loss and gradients.
pub(crate) fn batch_gradients(
    model: &DatModel,
    sessions: &[SessionRecord],
    batch: &[(usize, Segment)],
    loss: LossKind,
    mode: &mut RunMode,
) -> Result<(f64, Gradients)> {
    let mut tape = Tape::new(model.params());
    let mut outputs = Vec::with_capacity(batch.len());
    let mut labels = Vec::new();
    let mut weights = Vec::new();
    for &(si, seg) in batch {
        let session = &sessions[si];
        let target = extract_window(session, &seg, Role::Target)?;
        let partner = if model.config().uses_partner() {
            Some(extract_window(session, &seg, Role::Partner)?)
        } else {
            None
        };
        outputs.push(model.forward(&mut tape, mode, &target, partner.as_ref())?);
        let y = session
            .labels()
            .ok_or_else(|| DatError::Data(format!("session {} has no labels", session.session_id)))?;
        labels.extend(extract_series(y, &seg));
        weights.extend(seg.core_mask());
    }
    let pred = if outputs.len() == 1 { outputs[0] } else { tape.concat(&outputs, 0)? };
    let l = loss.apply(&mut tape, pred, &labels, &weights)?;
    let value = tape.value(l).data()[0];
    tape.backward(l)?;
    Ok((value, tape.param_grads()))
}

/// Trains `model` in place. θ ends at its last-step value; checkpoints and
/// validation use the EMA weights. With `out_dir`, writes `best.json`,
/// `last.json` (plus blobs) and `history.csv` there.
pub fn train(
    model: &mut DatModel,
    train_sessions: &[SessionRecord],
    val_sessions: &[SessionRecord],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let items = collect_items(model, train_sessions)?;
    let has_val = val_sessions.iter().any(|s| s.labels().is_some());
    let hp = AdamParams::from(cfg);
    let mut state = OptimizerState::new(model.params());
    let mut ema = Ema::new(model.params(), cfg.ema_decay)?;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ParamStore)> = None;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| DatError::io(dir, e))?;
    }
    info!(
        "training {} parameters on {} segments from {} sessions",
        model.param_count(),
        items.len(),
        train_sessions.len()
    );

    let mut order: Vec<(usize, Segment)> = items.iter().map(|it| (it.session, it.segment)).collect();
    for epoch in 1..=cfg.epochs {
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 1, epoch as u64));
        order.sort_by_key(|(s, seg)| (*s, seg.index));
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut mode = RunMode::train(sub_seed(cfg.seed, 2 + epoch as u64, b as u64));
            let diverged = |e: DatError| match e {
                DatError::NonFinite { op, index } => DatError::Numeric(format!(
                    "diverged at epoch {epoch} batch {b}: non-finite value in {op}[{index}]"
                )),
                DatError::Numeric(m) => DatError::Numeric(format!("diverged at epoch {epoch} batch {b}: {m}")),
                other => other,
            };
            let (loss, mut grads) =
                batch_gradients(model, train_sessions, batch, cfg.loss, &mut mode).map_err(diverged)?;
            if !loss.is_finite() {
                return Err(DatError::Numeric(format!("diverged at epoch {epoch} batch {b}: loss {loss}")));
            }
            if cfg.grad_clip > 0.0 {
                clip_grad_norm(&mut grads, cfg.grad_clip);
            }
            adam_step(model.params_mut(), &grads, &mut state, &hp).map_err(diverged)?;
            ema.update(model.params())?;
            loss_sum += loss;
            batches += 1;
            if cfg.report_every > 0 && (b + 1) % cfg.report_every == 0 {
                info!("epoch {epoch} batch {} loss {loss:.6}", b + 1);
            }
        }
        let train_loss = loss_sum / batches as f64;
        let val_ccc = if has_val {
            evaluate_with_ema(model, &ema, val_sessions)?.mean_ccc
        } else {
            f64::NAN
        };
        info!("epoch {epoch}: train_loss {train_loss:.6} val_ccc {val_ccc:.4}");
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_ccc,
        });
        let improved = match &best {
            None => true,
            Some((_, b, _)) => !has_val || val_ccc > *b,
        };
        if improved {
            best = Some((epoch, val_ccc, ema.shadow().clone()));
            if let Some(dir) = out_dir {
                save_params_checkpoint(&dir.join("best.json"), model.config(), ema.shadow())?;
            }
        }
        if let Some(dir) = out_dir {
            save_params_checkpoint(&dir.join("last.json"), model.config(), ema.shadow())?;
            let path = dir.join("history.csv");
            fs::write(&path, history_csv(&history)).map_err(|e| DatError::io(&path, e))?;
        }
    }
    let (best_epoch, best_val_ccc, best_params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val_ccc,
        best_params,
        ema,
    })
}
