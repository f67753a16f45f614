//! Trains the desk preset on synthetic sessions and prints per-epoch progress.
//!
//! `cargo run --release -p dat-core --example desk_run -- [epochs] [seed] [key=value ...]`

use std::time::Instant;

use dat_core::config::{Preset, RunConfig};
use dat_core::data::{synth_range, SynthConfig};
use dat_core::metrics::evaluate_sessions;
use dat_core::model::DatModel;
use dat_core::train::train;

fn main() -> dat_core::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let epochs: usize = args.first().and_then(|a| a.parse().ok()).unwrap_or(10);
    let seed: u64 = args.get(1).and_then(|a| a.parse().ok()).unwrap_or(0);
    let mut cfg = RunConfig::preset(Preset::Desk);
    cfg.train.epochs = epochs;
    cfg.train.seed = seed;
    cfg.model.init_seed = seed;
    cfg.apply_overrides(&args[2.min(args.len())..])?;
    let synth = SynthConfig::default();
    let train_s = synth_range(&synth, 0, 5)?;
    let val_s = synth_range(&synth, 5, 1)?;
    cfg.model.feature_dims = synth.feature_dims;
    print!("{}", cfg.to_text());
    let mut model = DatModel::new(cfg.model.clone())?;
    println!("params {}", model.param_count());
    let start = Instant::now();
    let out = train(&mut model, &train_s, &val_s, &cfg.train, None)?;
    for r in &out.history {
        println!("{},{:.5},{:.4}", r.epoch, r.train_loss, r.val_ccc);
    }
    let raw = evaluate_sessions(&model, &val_s)?;
    println!(
        "best epoch {} val ccc {:.4}; raw-θ val ccc {:.4}; {:.1}s",
        out.best_epoch,
        out.best_val_ccc,
        raw.mean_ccc,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
