//! Times forward + backward for desk-preset batches on synthetic data.

use std::time::Instant;

use dat_core::config::{Preset, RunConfig};
use dat_core::data::{synth_range, Role, SynthConfig};
use dat_core::model::DatModel;
use dat_core::nn::RunMode;
use dat_core::segmentation::{extract_series, extract_window, make_segments};
use dat_core::Tape;

fn main() -> dat_core::Result<()> {
    let batches: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(3);
    let cfg = RunConfig::preset(Preset::Desk);
    let synth = SynthConfig { frames: 400, ..SynthConfig::default() };
    let s = &synth_range(&synth, 0, 1)?[0];
    let model = DatModel::new(cfg.model.clone())?;
    let segs = make_segments(s.num_frames(), 32, 32)?;
    for _ in 0..batches {
        let t0 = Instant::now();
        let mut tape = Tape::new(model.params());
        let mut mode = RunMode::train(0);
        let mut outs = Vec::new();
        let (mut y, mut w) = (Vec::new(), Vec::new());
        for seg in segs.iter().cycle().take(16) {
            let tw = extract_window(s, seg, Role::Target)?;
            let pw = extract_window(s, seg, Role::Partner)?;
            outs.push(model.forward(&mut tape, &mut mode, &tw, Some(&pw))?);
            y.extend(extract_series(s.labels().unwrap(), seg));
            w.extend(seg.core_mask());
        }
        let p = tape.concat(&outs, 0)?;
        let l = tape.mse(p, &y, &w)?;
        let t1 = Instant::now();
        tape.backward(l)?;
        let _g = tape.param_grads();
        println!("forward {:.3}s backward {:.3}s nodes {}", (t1 - t0).as_secs_f64(), t1.elapsed().as_secs_f64(), tape.len());
    }
    Ok(())
}
