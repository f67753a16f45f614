//! Synthetic dyadic sessions with a known latent engagement signal.
//!
//! The target latent is a clipped mean-reverting walk smoothed by a centred
//! moving average. The partner latent mixes the target latent with an
//! independent walk. Each stream observes `[e_t, ė_t, 1]` through a fixed
//! random matrix (fixed per generator seed, role and stream) plus Gaussian
//! noise, so the same mapping holds across every session of one seed.
//!
//! All generated values are rounded to `f32` so that DATF storage is lossless.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::session::{Role, RoleData, SessionRecord};
use crate::error::{DatError, Result};
use crate::features::{FeatureBundle, FeatureDims, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub sessions: usize,
    pub frames: usize,
    pub seed: u64,
    /// Mean-reversion rate κ toward 0.5.
    pub kappa: f64,
    /// Latent innovation scale σ_e.
    pub latent_noise: f64,
    /// Centred moving-average window w.
    pub smooth_window: usize,
    /// Partner coupling ρ_p in [−1, 1].
    pub partner_coupling: f64,
    /// Observation noise σ_x.
    pub obs_noise: f64,
    /// Scale of the observation matrices: entries are N(0, gain²/dim), so
    /// each stream's signal energy is independent of its width.
    pub obs_gain: f64,
    /// 0 for continuous labels, otherwise the number of label levels.
    pub quantize_levels: usize,
    pub feature_dims: FeatureDims,
    pub frame_rate_hz: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            sessions: 5,
            frames: 2000,
            seed: 0,
            kappa: 0.05,
            latent_noise: 0.05,
            smooth_window: 9,
            partner_coupling: 0.6,
            obs_noise: 0.5,
            obs_gain: 2.5,
            quantize_levels: 0,
            feature_dims: FeatureDims::default(),
            frame_rate_hz: 25.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DatError::Config(format!("synth: {m}")));
        if self.frames == 0 {
            return bad("frames must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.kappa) {
            return bad("kappa must be in [0, 1]");
        }
        if !(self.latent_noise >= 0.0 && self.obs_noise >= 0.0 && self.obs_gain >= 0.0) {
            return bad("noise scales and obs_gain must be >= 0");
        }
        if self.smooth_window == 0 {
            return bad("smooth_window must be >= 1");
        }
        if !(-1.0..=1.0).contains(&self.partner_coupling) {
            return bad("partner_coupling must be in [-1, 1]");
        }
        if self.quantize_levels == 1 {
            return bad("quantize_levels must be 0 or >= 2");
        }
        if Stream::ALL.iter().any(|s| self.feature_dims.get(*s) == 0) {
            return bad("feature dims must be positive");
        }
        Ok(())
    }
}

fn round32(v: f64) -> f64 {
    v as f32 as f64
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Clipped mean-reverting walk followed by a centred moving average.
fn latent_walk(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut raw = Vec::with_capacity(cfg.frames);
    let mut e: f64 = rng.random_range(0.2..0.8);
    for _ in 0..cfg.frames {
        raw.push(e);
        e = (e + cfg.kappa * (0.5 - e) + cfg.latent_noise * normal(rng)).clamp(0.0, 1.0);
    }
    let half = cfg.smooth_window / 2;
    let extra = (cfg.smooth_window + 1) % 2; // even windows lean right
    (0..cfg.frames)
        .map(|t| {
            let lo = t.saturating_sub(half);
            let hi = (t + half + extra).min(cfg.frames - 1);
            raw[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

fn quantize(v: f64, levels: usize) -> f64 {
    if levels == 0 {
        return v;
    }
    let k = (levels - 1) as f64;
    (v * k).round() / k
}

/// The fixed `dim × 3` observation matrix of one (seed, role, stream).
pub fn observation_matrix(seed: u64, role: Role, stream: Stream, dim: usize, gain: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let role_idx = match role {
        Role::Target => 0,
        Role::Partner => 1,
    };
    rng.set_stream(1 << 40 | (role_idx << 8) | stream.index() as u64);
    Tensor::randn(&[dim, 3], gain / (dim as f64).sqrt(), &mut rng)
}

fn observe(
    cfg: &SynthConfig,
    role: Role,
    latent: &[f64],
    rng: &mut ChaCha8Rng,
) -> FeatureBundle {
    let streams = Stream::ALL.map(|s| {
        let dim = cfg.feature_dims.get(s);
        let a = observation_matrix(cfg.seed, role, s, dim, cfg.obs_gain);
        let mut data = Vec::with_capacity(latent.len() * dim);
        for t in 0..latent.len() {
            let e = latent[t];
            let de = if t == 0 { 0.0 } else { latent[t] - latent[t - 1] };
            for j in 0..dim {
                let clean = a.get2(j, 0) * e + a.get2(j, 1) * de + a.get2(j, 2);
                data.push(round32(clean + cfg.obs_noise * normal(rng)));
            }
        }
        Tensor::new(vec![latent.len(), dim], data).expect("stream shape")
    });
    FeatureBundle::new(streams).expect("equal lengths")
}

/// Generates session `index`; fully determined by `(cfg.seed, index)`.
pub fn synth_session(cfg: &SynthConfig, index: usize) -> Result<SessionRecord> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let target_latent = latent_walk(cfg, &mut rng);
    let independent = latent_walk(cfg, &mut rng);
    let rho = cfg.partner_coupling;
    let partner_latent: Vec<f64> = target_latent
        .iter()
        .zip(&independent)
        .map(|(e, u)| (rho * e + (1.0 - rho.abs()) * u).clamp(0.0, 1.0))
        .collect();
    let target_features = observe(cfg, Role::Target, &target_latent, &mut rng);
    let partner_features = observe(cfg, Role::Partner, &partner_latent, &mut rng);
    let labels = |l: &[f64]| l.iter().map(|v| round32(quantize(*v, cfg.quantize_levels))).collect();
    Ok(SessionRecord {
        session_id: format!("synth_{:04}", index),
        frame_rate_hz: cfg.frame_rate_hz,
        feature_dims: cfg.feature_dims,
        target: RoleData {
            features: target_features,
            labels: Some(labels(&target_latent)),
        },
        partner: Some(RoleData {
            features: partner_features,
            labels: Some(labels(&partner_latent)),
        }),
    })
}

/// Sessions `0..cfg.sessions`.
pub fn synth_sessions(cfg: &SynthConfig) -> Result<Vec<SessionRecord>> {
    (0..cfg.sessions).map(|i| synth_session(cfg, i)).collect()
}

/// Sessions `offset..offset + count`, e.g. for a held-out split drawn from
/// the same generator.
pub fn synth_range(cfg: &SynthConfig, offset: usize, count: usize) -> Result<Vec<SessionRecord>> {
    (offset..offset + count).map(|i| synth_session(cfg, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            frames: 300,
            feature_dims: FeatureDims::uniform(6),
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_and_index_dependent() {
        let cfg = small();
        assert_eq!(synth_session(&cfg, 3).unwrap(), synth_session(&cfg, 3).unwrap());
        assert_ne!(synth_session(&cfg, 3).unwrap(), synth_session(&cfg, 4).unwrap());
    }

    #[test]
    fn noiseless_continuous_labels_equal_latent() {
        let cfg = SynthConfig { obs_noise: 0.0, ..small() };
        let s = synth_session(&cfg, 0).unwrap();
        let labels = s.labels().unwrap();
        let a = observation_matrix(cfg.seed, Role::Target, Stream::Clip, 6, cfg.obs_gain);
        let x = s.target.features.get(Stream::Clip);
        for t in 1..labels.len() {
            // labels are the f32-rounded latent, so the affine map holds to f32 precision
            let de = labels[t] - labels[t - 1];
            for j in 0..6 {
                let want = a.get2(j, 0) * labels[t] + a.get2(j, 1) * de + a.get2(j, 2);
                assert!((x.get2(t, j) - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn quantized_labels_on_lattice() {
        let cfg = SynthConfig { quantize_levels: 25, ..small() };
        let s = synth_session(&cfg, 1).unwrap();
        for v in s.labels().unwrap() {
            let k = (v * 24.0).round();
            assert_eq!(*v, (k / 24.0) as f32 as f64);
            assert!((0.0..=24.0).contains(&k));
        }
    }

    #[test]
    fn labels_bounded_and_session_valid() {
        let cfg = SynthConfig { latent_noise: 0.5, partner_coupling: -1.0, ..small() };
        let s = synth_session(&cfg, 2).unwrap();
        s.validate().unwrap();
        let p = s.partner.as_ref().unwrap().labels.as_ref().unwrap();
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn invalid_config() {
        assert!(synth_session(&SynthConfig { partner_coupling: 1.5, ..small() }, 0).is_err());
        assert!(synth_session(&SynthConfig { quantize_levels: 1, ..small() }, 0).is_err());
    }
}
