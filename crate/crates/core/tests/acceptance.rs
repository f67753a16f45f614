//! Acceptance run: one line per criterion, non-zero exit if any fails.
//!
//! Criteria 5 to 7 train desk-preset models on the default synthetic data and
//! take 30 to 45 minutes on one core.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use dat_core::ablation::Arm;
use dat_core::config::{Preset, RunConfig};
use dat_core::data::{read_matrix, synth_range, write_matrix, SessionRecord, SynthConfig};
use dat_core::features::{FeatureBundle, Stream};
use dat_core::gradcheck::{run_suite, toy_model_config};
use dat_core::metrics::ccc;
use dat_core::model::DatModel;
use dat_core::nn::RunMode;
use dat_core::segmentation::{extract_series, make_segments, reassemble};
use dat_core::train::{adam_step, evaluate_with_ema, train, AdamParams, Ema, OptimizerState, TrainOutcome};
use dat_core::{Gradients, ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Epoch budget for the desk runs in criteria 6 and 7.
const DESK_EPOCHS: usize = 20;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn two_pass_ccc(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    2.0 * sxy / n / (sxx / n + syy / n + (mx - my) * (mx - my))
}

fn bits(params: &ParamStore) -> Vec<u64> {
    params.iter().flat_map(|(_, _, t)| t.data().iter().map(|v| v.to_bits())).collect()
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let cases = run_suite(0).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let worst = cases.iter().map(|c| c.report.max_rel_err).fold(0.0, f64::max);
    let pass = worst < 1e-4 && cases.iter().all(|c| c.passed()) && secs < 60.0;
    outcome(pass, format!("{} cases, max rel err {worst:.2e}, {secs:.1}s", cases.len()))
}

fn ccc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(2..500);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.5 * v + rng.random_range(-1.0..2.0)).collect();
        worst = worst.max((ccc(&x, &y).unwrap().value - two_pass_ccc(&x, &y)).abs());
    }
    let ref_err = (ccc(&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0]).unwrap().value - 4.0 / 7.0).abs();
    let x = [0.2, 0.9, 0.4, 0.6];
    let trivial = ccc(&x, &x).unwrap().value == 1.0 && ccc(&x, &[0.3; 4]).unwrap().value == 0.0;
    outcome(
        worst < 1e-10 && ref_err < 1e-12 && trivial,
        format!("max |diff| {worst:.1e} over 100 series, 4/7 error {ref_err:.1e}"),
    )
}

fn segmentation_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut short, mut ragged, mut ok) = (0, 0, 0);
    for i in 0..200 {
        let s = rng.random_range(1..64);
        let l = rng.random_range(0..48);
        // A quarter of the cases are shorter than one core.
        let t = if i % 4 == 0 { rng.random_range(1..=s) } else { rng.random_range(1..2000) };
        short += usize::from(t < s);
        ragged += usize::from(t % s != 0);
        let labels: Vec<f64> = (0..t).map(|_| rng.random()).collect();
        let segs = make_segments(t, s, l).unwrap();
        let windows: Vec<Vec<f64>> = segs.iter().map(|g| extract_series(&labels, g)).collect();
        ok += usize::from(reassemble(&windows, &segs, t).unwrap() == labels);
    }
    outcome(ok == 200, format!("{ok}/200 exact ({short} with T < s, {ragged} with T mod s != 0)"))
}

fn shape_contract() -> Outcome {
    let cfg = RunConfig::preset(Preset::PaperNoxi).model;
    let model = DatModel::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let w = cfg.window_len();
    let mut bundle = || {
        FeatureBundle::new(Stream::ALL.map(|s| Tensor::randn(&[w, cfg.feature_dims.get(s)], 1.0, &mut rng))).unwrap()
    };
    let (target, partner) = (bundle(), bundle());
    let mut tape = Tape::new(model.params());
    let out = model.dat_forward(&mut tape, &mut RunMode::eval(), &target, Some(&partner)).unwrap();
    let shapes = [
        tape.shape(out.fused.audio).to_vec(),
        tape.shape(out.fused.video).to_vec(),
        tape.shape(out.head_input).to_vec(),
        tape.shape(out.output).to_vec(),
    ];
    let expect = [vec![96, 1024], vec![96, 1536], vec![96, 2560], vec![96, 1]];
    let pass = cfg.d == 512 && w == 96 && shapes == expect;
    outcome(pass, format!("d {} window {w}: audio/video/head/out {shapes:?}", cfg.d))
}

fn desk_data() -> (Vec<SessionRecord>, Vec<SessionRecord>) {
    let synth = SynthConfig::default();
    (synth_range(&synth, 0, 5).unwrap(), synth_range(&synth, 5, 1).unwrap())
}

fn desk_config(seed: u64, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::preset(Preset::Desk);
    cfg.model.feature_dims = SynthConfig::default().feature_dims;
    cfg.model.init_seed = seed;
    cfg.train.seed = seed;
    cfg.train.epochs = epochs;
    cfg
}

fn run_desk(cfg: &RunConfig, data: &(Vec<SessionRecord>, Vec<SessionRecord>), out: Option<&Path>) -> (DatModel, TrainOutcome) {
    let mut model = DatModel::new(cfg.model.clone()).unwrap();
    let result = train(&mut model, &data.0, &data.1, &cfg.train, out).unwrap();
    (model, result)
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn determinism(data: &(Vec<SessionRecord>, Vec<SessionRecord>)) -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = desk_config(0, 3);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let (ma, ra) = run_desk(&cfg, data, Some(&a));
    let (mb, rb) = run_desk(&cfg, data, Some(&b));
    let hist = |r: &TrainOutcome| {
        r.history.iter().flat_map(|e| [e.train_loss.to_bits(), e.val_ccc.to_bits()]).collect::<Vec<_>>()
    };
    let (fa, fb) = (dir_bytes(&a), dir_bytes(&b));
    let pass = hist(&ra) == hist(&rb) && bits(ma.params()) == bits(mb.params()) && fa == fb;
    outcome(pass, format!("3 epochs twice; {} output files compared byte for byte", fa.len()))
}

fn end_to_end(data: &(Vec<SessionRecord>, Vec<SessionRecord>)) -> (Outcome, f64) {
    let start = Instant::now();
    let (_, r) = run_desk(&desk_config(0, DESK_EPOCHS), data, None);
    let secs = start.elapsed().as_secs_f64();
    let first = r.history[0].train_loss;
    let best10 = r.history.iter().take(10).map(|e| e.train_loss).fold(f64::INFINITY, f64::min);
    let drop = 1.0 - best10 / first;
    let pass = r.best_val_ccc >= 0.6 && secs <= 900.0 && drop >= 0.5;
    let detail = format!(
        "val CCC {:.4} (best epoch {} of {DESK_EPOCHS}), {secs:.0}s, train loss down {:.0}% within 10 epochs",
        r.best_val_ccc,
        r.best_epoch,
        100.0 * drop
    );
    (outcome(pass, detail), r.best_val_ccc)
}

fn ablation(data: &(Vec<SessionRecord>, Vec<SessionRecord>), full_seed0: f64) -> Outcome {
    let mut full = vec![full_seed0];
    let mut base = Vec::new();
    for seed in 0..3u64 {
        if seed > 0 {
            let mut cfg = desk_config(seed, DESK_EPOCHS);
            cfg.model = Arm::MgfDae.configure(&cfg.model);
            full.push(run_desk(&cfg, data, None).1.best_val_ccc);
        }
        let mut cfg = desk_config(seed, DESK_EPOCHS);
        cfg.model = Arm::Baseline.configure(&cfg.model);
        base.push(run_desk(&cfg, data, None).1.best_val_ccc);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let wins = full.iter().zip(&base).filter(|(f, b)| f >= b).count();
    let pass = mean(&full) >= mean(&base) && wins >= 2;
    outcome(
        pass,
        format!(
            "+MGF+DAE {full:.4?} mean {:.4}; baseline {base:.4?} mean {:.4}; full wins {wins}/3",
            mean(&full),
            mean(&base)
        ),
    )
}

fn ema_and_adam() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = toy_model_config();
    let mut model = DatModel::new(cfg.clone()).unwrap();
    let session = dat_core::data::synth_session(
        &SynthConfig {
            sessions: 1,
            frames: 30,
            feature_dims: cfg.feature_dims,
            ..SynthConfig::default()
        },
        0,
    )
    .unwrap();
    let mut ema = Ema::new(model.params(), 0.9).unwrap();
    let ids: Vec<_> = model.params().ids().collect();
    for &id in &ids {
        model.params_mut().get_mut(id).data_mut().iter_mut().for_each(|v| *v += 0.01);
    }
    ema.update(model.params()).unwrap();
    let before = bits(model.params());
    evaluate_with_ema(&mut model, &ema, &[session]).unwrap();
    let swap_ok = bits(model.params()) == before;

    let lr = 1e-3;
    let mut params = model.params().clone();
    let mut grads = Gradients::zeros_like(&params);
    for &id in &ids {
        for g in grads.get_mut(id).data_mut() {
            *g = rng.random_range(0.01..1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        }
    }
    let start = params.clone();
    let mut state = OptimizerState::new(&params);
    adam_step(&mut params, &grads, &mut state, &AdamParams::new(lr)).unwrap();
    let mut worst: f64 = 0.0;
    for ((_, _, a), (_, _, b)) in params.iter().zip(start.iter()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            worst = worst.max(((x - y).abs() - lr).abs() / lr);
        }
    }

    let zeros = Gradients::zeros_like(&params);
    let held = bits(&params);
    adam_step(&mut params, &zeros, &mut state, &AdamParams::new(lr)).unwrap();
    let mut fresh = OptimizerState::new(&start);
    let mut untouched = start.clone();
    adam_step(&mut untouched, &zeros, &mut fresh, &AdamParams::new(lr)).unwrap();
    let noop = bits(&params) == held && bits(&untouched) == bits(&start);

    outcome(
        swap_ok && worst < 0.01 && noop,
        format!("EMA swap bitwise {swap_ok}; first step |dθ|/lr off by at most {:.3}%; zero-grad no-op {noop}", 100.0 * worst),
    )
}

fn datf_round_trip() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut ok = 0;
    for i in 0..1000 {
        let (r, c) = match i {
            0 => (0, 5),
            1 => (1, 1),
            _ => (rng.random_range(0..40), rng.random_range(1..40)),
        };
        // Exponent field capped below 128: every value is finite, subnormals included.
        let data: Vec<f64> = (0..r * c).map(|_| f64::from(f32::from_bits(rng.random::<u32>() & 0xbfff_ffff))).collect();
        let m = Tensor::new(vec![r, c], data).unwrap();
        let p = tmp.path().join(format!("{i}.datf"));
        write_matrix(&p, &m).unwrap();
        let back = read_matrix(&p).unwrap();
        let same = back.shape() == m.shape() && back.data().iter().zip(m.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        ok += usize::from(same);
    }
    outcome(ok == 1000, format!("{ok}/1000 matrices bitwise, including 0x5 and 1x1"))
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, o: Outcome| {
        println!("criterion {n} {name}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    };
    report(1, "gradient suite", gradient_suite());
    report(2, "ccc oracle", ccc_oracle());
    report(3, "segmentation identity", segmentation_identity());
    report(4, "shape contract", shape_contract());
    report(8, "ema and optimizer", ema_and_adam());
    report(9, "datf format", datf_round_trip());
    let data = desk_data();
    report(5, "determinism", determinism(&data));
    let (e2e, full_seed0) = end_to_end(&data);
    report(6, "end-to-end learning", e2e);
    report(7, "directional ablation", ablation(&data, full_seed0));
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
