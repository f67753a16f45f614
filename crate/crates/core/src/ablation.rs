//! Component ablations: the four ±MGF/±DAE arms and a depth-matched pair.

use std::fmt;
use std::fs;
use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::SessionRecord;
use crate::error::{DatError, Result};
use crate::model::{param_count, DatModel, ModelConfig, ModelVariant};
use crate::train::{history_csv, train};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// Per-stream encoders only: no group encoders, no partner.
    Baseline,
    Dae,
    Mgf,
    MgfDae,
    /// MGF without the DAE, encoders two layers deep.
    NoDaeDepth2,
    /// MGF + DAE with single-layer encoders.
    DaeDepth1,
}

impl Arm {
    pub const COMPONENTS: [Arm; 4] = [Arm::Baseline, Arm::Dae, Arm::Mgf, Arm::MgfDae];
    pub const DEPTH_PAIR: [Arm; 2] = [Arm::NoDaeDepth2, Arm::DaeDepth1];
    pub const ALL: [Arm; 6] = [
        Arm::Baseline,
        Arm::Dae,
        Arm::Mgf,
        Arm::MgfDae,
        Arm::NoDaeDepth2,
        Arm::DaeDepth1,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Dae => "+DAE",
            Arm::Mgf => "+MGF",
            Arm::MgfDae => "+MGF+DAE",
            Arm::NoDaeDepth2 => "no-DAE-depth2",
            Arm::DaeDepth1 => "DAE-depth1",
        }
    }

    /// `base` with this arm's component switches applied.
    pub fn configure(self, base: &ModelConfig) -> ModelConfig {
        let (use_mgf, use_dae, depth) = match self {
            Arm::Baseline => (false, false, 1),
            Arm::Dae => (false, true, 1),
            Arm::Mgf => (true, false, 1),
            Arm::MgfDae => (true, true, 1),
            Arm::NoDaeDepth2 => (true, false, 2),
            Arm::DaeDepth1 => (true, true, 1),
        };
        ModelConfig {
            variant: ModelVariant::Dat,
            use_mgf,
            use_dae,
            encoder_depth: depth,
            ..base.clone()
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: Arm,
    pub params: usize,
    /// Best validation CCC over the run (EMA weights).
    pub val_ccc: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: Arm,
    pub params: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 with a single seed.
    pub sd: f64,
    pub runs: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// `arm,params,val_ccc,seed`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("arm,params,val_ccc,seed\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.arm, r.params, r.val_ccc, r.seed));
        }
        out
    }

    pub fn summary(&self) -> Vec<ArmSummary> {
        let mut arms: Vec<Arm> = Vec::new();
        for r in &self.rows {
            if !arms.contains(&r.arm) {
                arms.push(r.arm);
            }
        }
        arms.into_iter()
            .map(|arm| {
                let rows: Vec<&AblationRow> = self.rows.iter().filter(|r| r.arm == arm).collect();
                let n = rows.len() as f64;
                let mean = rows.iter().map(|r| r.val_ccc).sum::<f64>() / n;
                let sd = if rows.len() > 1 {
                    (rows.iter().map(|r| (r.val_ccc - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
                } else {
                    0.0
                };
                ArmSummary {
                    arm,
                    params: rows[0].params,
                    mean,
                    sd,
                    runs: rows.len(),
                }
            })
            .collect()
    }

    /// `arm,params,mean_val_ccc,sd_val_ccc,runs`
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("arm,params,mean_val_ccc,sd_val_ccc,runs\n");
        for s in self.summary() {
            out.push_str(&format!("{},{},{},{},{}\n", s.arm, s.params, s.mean, s.sd, s.runs));
        }
        out
    }

    /// Aligned plain-text table of the summary.
    pub fn render(&self) -> String {
        let mut out = format!("{:<16} {:>12} {:>18}\n", "arm", "params", "val CCC");
        for s in self.summary() {
            out.push_str(&format!(
                "{:<16} {:>12} {:>10.4} ± {:.4}\n",
                s.arm.name(),
                s.params,
                s.mean,
                s.sd
            ));
        }
        out
    }

    pub fn val_ccc(&self, arm: Arm, seed: u64) -> Option<f64> {
        self.rows.iter().find(|r| r.arm == arm && r.seed == seed).map(|r| r.val_ccc)
    }
}

/// Trains every arm under each seed with otherwise identical settings.
/// The seed drives both parameter initialisation and training randomness.
/// With `out_dir`, each run's history goes to `<out_dir>/<arm>_seed<k>.csv`
/// and the tables to `ablation.csv` and `summary.csv`.
pub fn run_ablate(
    train_sessions: &[SessionRecord],
    val_sessions: &[SessionRecord],
    base: &RunConfig,
    arms: &[Arm],
    seeds: &[u64],
    out_dir: Option<&Path>,
) -> Result<AblationTable> {
    if !val_sessions.iter().any(|s| s.labels().is_some()) {
        return Err(DatError::Data("ablation needs labelled validation sessions".into()));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| DatError::io(dir, e))?;
    }
    let mut table = AblationTable::default();
    for &seed in seeds {
        for &arm in arms {
            let mut cfg = base.clone();
            cfg.model = arm.configure(&base.model);
            cfg.model.init_seed = seed;
            cfg.train.seed = seed;
            let mut model = DatModel::new(cfg.model.clone())?;
            let params = param_count(&cfg.model);
            info!("ablation arm {arm} seed {seed}: {params} parameters");
            let outcome = train(&mut model, train_sessions, val_sessions, &cfg.train, None)?;
            if let Some(dir) = out_dir {
                let file = format!("{}_seed{seed}.csv", arm_file_stem(arm));
                let path = dir.join(file);
                fs::write(&path, history_csv(&outcome.history)).map_err(|e| DatError::io(&path, e))?;
            }
            info!("ablation arm {arm} seed {seed}: val ccc {:.4}", outcome.best_val_ccc);
            table.rows.push(AblationRow {
                arm,
                params,
                val_ccc: outcome.best_val_ccc,
                seed,
            });
        }
    }
    if let Some(dir) = out_dir {
        for (name, text) in [("ablation.csv", table.to_csv()), ("summary.csv", table.summary_csv())] {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| DatError::io(&path, e))?;
        }
    }
    Ok(table)
}

fn arm_file_stem(arm: Arm) -> &'static str {
    match arm {
        Arm::Baseline => "baseline",
        Arm::Dae => "dae",
        Arm::Mgf => "mgf",
        Arm::MgfDae => "mgf_dae",
        Arm::NoDaeDepth2 => "no_dae_depth2",
        Arm::DaeDepth1 => "dae_depth1",
    }
}
