//! MSE, concordance correlation and per-session evaluation.
//!
//! All moments are population (1/n) moments, in both the metric and the
//! differentiable loss.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::{Role, SessionRecord};
use crate::error::{DatError, Result};
use crate::model::DatModel;
use crate::segmentation::{extract_window, make_segments, reassemble};

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(DatError::InvalidArgument(format!(
            "series lengths differ: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    Ok(())
}

/// Mean squared error over the frames selected by `mask` (all when `None`).
pub fn mse(pred: &[f64], label: &[f64], mask: Option<&[bool]>) -> Result<f64> {
    check_pair(pred, label)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for i in 0..pred.len() {
        if mask.is_none_or(|m| m[i]) {
            sum += (pred[i] - label[i]).powi(2);
            n += 1;
        }
    }
    if n == 0 {
        return Err(DatError::InvalidArgument("mse: mask selects no frames".into()));
    }
    Ok(sum / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ccc {
    pub value: f64,
    /// Both series constant with equal means; `value` is then defined as 0.
    pub degenerate: bool,
}

/// Arithmetic mean; exact for a constant series, so its deviations are 0.
fn mean(x: &[f64]) -> f64 {
    if x.iter().all(|v| *v == x[0]) {
        return x[0];
    }
    x.iter().sum::<f64>() / x.len() as f64
}

/// Lin's concordance correlation coefficient
/// `2·cov(x, y) / (var x + var y + (mean x − mean y)²)`.
pub fn ccc(x: &[f64], y: &[f64]) -> Result<Ccc> {
    check_pair(x, y)?;
    if x.len() < 2 {
        return Err(DatError::InvalidArgument(format!("ccc needs >= 2 frames, got {}", x.len())));
    }
    let n = x.len() as f64;
    let (mx, my) = (mean(x), mean(y));
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
        cxy += (a - mx) * (b - my);
    }
    let denom = (vx + vy) / n + (mx - my) * (mx - my);
    if denom == 0.0 {
        return Ok(Ccc { value: 0.0, degenerate: true });
    }
    Ok(Ccc {
        value: (2.0 * cxy / n) / denom,
        degenerate: false,
    })
}

/// Pearson correlation; `None` when either series is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
        cxy += (a - mx) * (b - my);
    }
    (vx > 0.0 && vy > 0.0).then(|| cxy / (vx * vy).sqrt())
}

fn mask_weights(n: usize, mask: Option<&[bool]>) -> Result<Vec<f64>> {
    match mask {
        None => Ok(vec![1.0; n]),
        Some(m) if m.len() == n => Ok(m.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect()),
        Some(m) => Err(DatError::InvalidArgument(format!("mask has {} entries for {n} frames", m.len()))),
    }
}

/// Differentiable MSE of `pred` against constant labels.
pub fn mse_loss(tape: &mut Tape, pred: Var, label: &[f64], mask: Option<&[bool]>) -> Result<Var> {
    let w = mask_weights(tape.value(pred).numel(), mask)?;
    tape.mse(pred, label, &w)
}

/// Differentiable `1 − CCC` of `pred` against constant labels.
pub fn ccc_loss(tape: &mut Tape, pred: Var, label: &[f64], mask: Option<&[bool]>) -> Result<Var> {
    let w = mask_weights(tape.value(pred).numel(), mask)?;
    tape.ccc_loss(pred, label, &w)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    Ccc,
}

impl LossKind {
    /// Loss over the frames with nonzero weight.
    pub fn apply(self, tape: &mut Tape, pred: Var, label: &[f64], weights: &[f64]) -> Result<Var> {
        match self {
            LossKind::Mse => tape.mse(pred, label, weights),
            LossKind::Ccc => tape.ccc_loss(pred, label, weights),
        }
    }
}

/// Anything that maps a whole session to per-frame predictions.
pub trait SessionPredictor {
    fn predict_session(&self, session: &SessionRecord) -> Result<Vec<f64>>;
}

impl SessionPredictor for DatModel {
    /// Segment, predict each window, stitch cores back together. Predictions
    /// are clamped to `[0, 1]`.
    fn predict_session(&self, session: &SessionRecord) -> Result<Vec<f64>> {
        let cfg = self.config();
        let t = session.num_frames();
        let segments = make_segments(t, cfg.core_len, cfg.context_len)?;
        let mut preds = Vec::with_capacity(segments.len());
        for seg in &segments {
            let target = extract_window(session, seg, Role::Target)?;
            let partner = if cfg.uses_partner() {
                Some(extract_window(session, seg, Role::Partner)?)
            } else {
                None
            };
            preds.push(self.predict_window(&target, partner.as_ref())?);
        }
        reassemble(&preds, &segments, t)
    }
}

/// Returns the session's own labels.
#[derive(Clone, Copy, Debug, Default)]
pub struct LabelOracle;

impl SessionPredictor for LabelOracle {
    fn predict_session(&self, session: &SessionRecord) -> Result<Vec<f64>> {
        session
            .labels()
            .map(<[f64]>::to_vec)
            .ok_or_else(|| DatError::Data(format!("session {} has no labels", session.session_id)))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConstantPredictor(pub f64);

impl SessionPredictor for ConstantPredictor {
    fn predict_session(&self, session: &SessionRecord) -> Result<Vec<f64>> {
        Ok(vec![self.0; session.num_frames()])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionScore {
    pub session_id: String,
    pub ccc: f64,
    pub mse: f64,
    pub frames: usize,
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sessions: Vec<SessionScore>,
    pub mean_ccc: f64,
    pub mean_mse: f64,
    /// Sessions skipped because they carry no labels.
    pub skipped: Vec<String>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `session_id,ccc` with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("session_id,ccc\n");
        for s in &self.sessions {
            out.push_str(&format!("{},{}\n", s.session_id, s.ccc));
        }
        out
    }
}

/// Per-session CCC and MSE of clamped predictions against full-length labels,
/// then the arithmetic mean across sessions.
pub fn evaluate_sessions(predictor: &dyn SessionPredictor, sessions: &[SessionRecord]) -> Result<EvalReport> {
    let mut scores = Vec::new();
    let mut skipped = Vec::new();
    for session in sessions {
        let Some(labels) = session.labels() else {
            warn!("session {} has no labels; skipped", session.session_id);
            skipped.push(session.session_id.clone());
            continue;
        };
        let pred: Vec<f64> = predictor
            .predict_session(session)?
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        let c = ccc(&pred, labels)?;
        if c.degenerate {
            warn!("session {}: constant predictions and labels; ccc set to 0", session.session_id);
        }
        scores.push(SessionScore {
            session_id: session.session_id.clone(),
            ccc: c.value,
            mse: mse(&pred, labels, None)?,
            frames: labels.len(),
            degenerate: c.degenerate,
        });
    }
    if scores.is_empty() {
        return Err(DatError::Data("no labelled sessions to evaluate".into()));
    }
    let n = scores.len() as f64;
    Ok(EvalReport {
        mean_ccc: scores.iter().map(|s| s.ccc).sum::<f64>() / n,
        mean_mse: scores.iter().map(|s| s.mse).sum::<f64>() / n,
        sessions: scores,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[0.3, 0.7], &[0.3, 0.7], None).unwrap(), 0.0);
        assert_eq!(mse(&[0.0, 0.0], &[1.0, 1.0], None).unwrap(), 1.0);
        assert_eq!(mse(&[0.0, 5.0], &[1.0, 1.0], Some(&[true, false])).unwrap(), 1.0);
        assert!(mse(&[0.0], &[1.0], Some(&[false])).is_err());
    }

    #[test]
    fn ccc_examples() {
        let x = [0.1, 0.5, 0.2, 0.9];
        assert!((ccc(&x, &x).unwrap().value - 1.0).abs() < 1e-15);
        assert_eq!(ccc(&x, &[0.4; 4]).unwrap().value, 0.0);
        let c = ccc(&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0]).unwrap();
        assert!((c.value - 4.0 / 7.0).abs() < 1e-12);
        assert!(ccc(&[1.0], &[1.0]).is_err());
        assert!(ccc(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn degenerate_ccc_is_flagged_zero() {
        let c = ccc(&[0.5; 3], &[0.5; 3]).unwrap();
        assert_eq!(c, Ccc { value: 0.0, degenerate: true });
        let c = ccc(&[0.5; 3], &[0.2; 3]).unwrap();
        assert_eq!(c, Ccc { value: 0.0, degenerate: false });
    }

    #[test]
    fn ccc_loss_values() {
        let store = crate::params::ParamStore::new();
        let mut tape = Tape::new(&store);
        let label = [0.1, 0.4, 0.35, 0.8];
        let p = tape.leaf(crate::tensor::Tensor::vector(label.to_vec()));
        let l = ccc_loss(&mut tape, p, &label, None).unwrap();
        assert!(tape.value(l).data()[0].abs() < 1e-15);
        let c = tape.leaf(crate::tensor::Tensor::vector(vec![0.5; 4]));
        let l = ccc_loss(&mut tape, c, &label, None).unwrap();
        assert_eq!(tape.value(l).data()[0], 1.0);
        assert!(ccc_loss(&mut tape, c, &label, Some(&[true, false, false, false])).is_err());
    }
}
