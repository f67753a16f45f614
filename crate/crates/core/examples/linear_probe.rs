//! Least-squares probe from per-frame target features to labels: fit on the
//! first sessions, report CCC on the held-out one. Gauges synthetic-task
//! difficulty.
//!
//! `cargo run --release -p dat-core --example linear_probe -- [obs_gain] [ridge]`

use dat_core::data::{synth_range, Role, SessionRecord, SynthConfig};
use dat_core::features::Stream;
use dat_core::metrics::ccc;
use nalgebra::{DMatrix, DVector};

fn design(sessions: &[SessionRecord]) -> (DMatrix<f64>, DVector<f64>) {
    let dims = sessions[0].feature_dims.total() + 1;
    let rows: usize = sessions.iter().map(|s| s.num_frames()).sum();
    let mut x = DMatrix::zeros(rows, dims);
    let mut y = DVector::zeros(rows);
    let mut r = 0;
    for s in sessions {
        let f = &s.role(Role::Target).unwrap().features;
        for t in 0..s.num_frames() {
            let mut c = 0;
            for st in Stream::ALL {
                for v in f.get(st).row(t) {
                    x[(r, c)] = *v;
                    c += 1;
                }
            }
            x[(r, c)] = 1.0;
            y[r] = s.labels().unwrap()[t];
            r += 1;
        }
    }
    (x, y)
}

fn main() -> dat_core::Result<()> {
    let args: Vec<f64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let cfg = SynthConfig {
        obs_gain: args.first().copied().unwrap_or(1.0),
        ..SynthConfig::default()
    };
    let ridge = args.get(1).copied().unwrap_or(0.0);
    let train = synth_range(&cfg, 0, 5)?;
    let val = synth_range(&cfg, 5, 1)?;
    let (x, y) = design(&train);
    let mut xtx = x.tr_mul(&x);
    for i in 0..xtx.nrows() - 1 {
        xtx[(i, i)] += ridge;
    }
    let w = xtx.cholesky().expect("spd").solve(&x.tr_mul(&y));
    let (xv, yv) = design(&val);
    let pred = &xv * &w;
    let p: Vec<f64> = pred.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let yv: Vec<f64> = yv.iter().copied().collect();
    println!("obs_gain {} ridge {ridge}: val ccc {:.4}", cfg.obs_gain, ccc(&p, &yv)?.value);
    // same probe with predictions averaged over a 31-frame window
    let k = 15usize;
    let sm: Vec<f64> = (0..p.len())
        .map(|t| {
            let (a, b) = (t.saturating_sub(k), (t + k + 1).min(p.len()));
            p[a..b].iter().sum::<f64>() / (b - a) as f64
        })
        .collect();
    println!("  smoothed: {:.4}", ccc(&sm, &yv)?.value);
    Ok(())
}
