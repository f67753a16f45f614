//! `dat`: synthetic data, training, evaluation, prediction, gradient checks
//! and ablations for the dialogue-aware transformer.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data or format error,
//! 3 numerical failure. Errors go to stderr as `error[<kind>]: <message>`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use dat_core::ablation::{run_ablate, Arm};
use dat_core::checkpoint::{load_checkpoint, Checkpoint};
use dat_core::config::{parse_dims, Preset, RunConfig};
use dat_core::data::{load_session, load_sessions, save_session, synth_session, SessionRecord, SynthConfig};
use dat_core::gradcheck::run_suite;
use dat_core::metrics::{evaluate_sessions, SessionPredictor};
use dat_core::model::DatModel;
use dat_core::train::train;
use dat_core::DatError;

#[derive(Parser, Debug)]
#[command(name = "dat", version, about = "Dialogue-aware transformer for frame-level engagement estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic dyadic sessions.
    Synth(SynthArgs),
    /// Train a model and write checkpoints and history.
    Train(TrainArgs),
    /// Score a checkpoint on labelled sessions.
    Eval(EvalArgs),
    /// Write per-frame predictions for one session.
    Predict(PredictArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Train the component ablation arms and the depth-matched pair.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    sessions: usize,
    #[arg(long, default_value_t = 2000)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// 0 for continuous labels.
    #[arg(long, default_value_t = 0)]
    quantize_levels: usize,
    /// Index of the first session, for held-out splits from the same generator.
    #[arg(long, default_value_t = 0)]
    first_index: usize,
    /// Stream widths as E,W,C,OF,OP.
    #[arg(long)]
    feature_dims: Option<String>,
    #[arg(long)]
    obs_noise: Option<f64>,
    #[arg(long)]
    partner_coupling: Option<f64>,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    #[arg(long, value_parser = parse_preset, default_value = "desk")]
    preset: Preset,
    /// Flat `key = value` config file applied over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override applied last; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Seeds both initialisation and training.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// JSON report, or `session_id,ccc` CSV when the name ends in `.csv`.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    session: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Number of seeds, 0..n.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    /// Comma-separated subset of arms: baseline, dae, mgf, mgf_dae,
    /// no_dae_depth2, dae_depth1.
    #[arg(long)]
    arms: Option<String>,
    #[command(flatten)]
    config: ConfigArgs,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e: DatError| e.to_string())
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    kind: &'static str,
    msg: String,
}

impl From<DatError> for Failure {
    fn from(e: DatError) -> Self {
        let (code, kind) = if e.is_numeric() {
            (3, "numeric")
        } else if e.is_data() || matches!(e, DatError::Shape { .. }) {
            (2, "data")
        } else if matches!(e, DatError::Config(_) | DatError::InvalidArgument(_)) {
            (1, "usage")
        } else {
            (3, "numeric")
        };
        Failure {
            code,
            kind,
            msg: e.to_string(),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn resolve(args: &ConfigArgs) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::preset(args.preset);
    if let Some(path) = &args.config {
        cfg.apply_file(path)?;
    }
    cfg.apply_overrides(&args.set)?;
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
        cfg.model.init_seed = s;
    }
    Ok(cfg)
}

/// Stream widths come from the data; the printed config reflects them.
fn adopt_dims(cfg: &mut RunConfig, sessions: &[SessionRecord]) -> CliResult {
    let dims = sessions[0].feature_dims;
    if let Some(s) = sessions.iter().find(|s| s.feature_dims != dims) {
        return Err(DatError::Data(format!(
            "session {} has feature dims {:?}, expected {:?}",
            s.session_id, s.feature_dims, dims
        ))
        .into());
    }
    if cfg.model.feature_dims != dims {
        info!("using feature dims {dims:?} from the data");
        cfg.model.feature_dims = dims;
    }
    cfg.validate()?;
    Ok(())
}

fn print_config(title: &str, cfg: &RunConfig) {
    println!("# {title}");
    for line in cfg.to_text().lines() {
        println!("#   {line}");
    }
}

fn write_text(path: &Path, text: &str) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| DatError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| DatError::io(path, e).into())
}

fn cmd_synth(a: SynthArgs) -> CliResult {
    let mut cfg = SynthConfig {
        sessions: a.sessions,
        frames: a.frames,
        seed: a.seed,
        quantize_levels: a.quantize_levels,
        ..SynthConfig::default()
    };
    if let Some(d) = &a.feature_dims {
        cfg.feature_dims = parse_dims(d)?;
    }
    if let Some(v) = a.obs_noise {
        cfg.obs_noise = v;
    }
    if let Some(v) = a.partner_coupling {
        cfg.partner_coupling = v;
    }
    cfg.validate()?;
    println!("# synth config (seed {})", cfg.seed);
    let json = serde_json::to_string(&cfg).map_err(DatError::from)?;
    println!("#   {json}");
    fs::create_dir_all(&a.out).map_err(|e| DatError::io(&a.out, e))?;
    for i in a.first_index..a.first_index + a.sessions {
        let s = synth_session(&cfg, i)?;
        let dir = a.out.join(&s.session_id);
        save_session(&dir, &s)?;
        println!("wrote {} ({} frames)", dir.display(), s.num_frames());
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let mut cfg = resolve(&a.config)?;
    let train_sessions = load_sessions(&a.data)?;
    let val_sessions = match &a.val {
        Some(v) => load_sessions(v)?,
        None => Vec::new(),
    };
    adopt_dims(&mut cfg, &train_sessions)?;
    print_config(&format!("train config (preset {}, seed {})", a.config.preset, cfg.train.seed), &cfg);
    fs::create_dir_all(&a.out).map_err(|e| DatError::io(&a.out, e))?;
    write_text(&a.out.join("config.txt"), &cfg.to_text())?;
    let mut model = DatModel::new(cfg.model.clone())?;
    println!("parameters {}", model.param_count());
    let outcome = train(&mut model, &train_sessions, &val_sessions, &cfg.train, Some(&a.out))?;
    for r in &outcome.history {
        println!("epoch {} train_loss {:.6} val_ccc {:.4}", r.epoch, r.train_loss, r.val_ccc);
    }
    println!(
        "best epoch {} val_ccc {:.4}; checkpoints in {}",
        outcome.best_epoch,
        outcome.best_val_ccc,
        a.out.display()
    );
    Ok(())
}

fn describe_checkpoint(ckpt: &Checkpoint) {
    match ckpt {
        Checkpoint::LabelOracle => println!("# checkpoint: label oracle"),
        Checkpoint::Model(m) => {
            println!("# checkpoint model config (init seed {})", m.config().init_seed);
            let json = serde_json::to_string(m.config()).unwrap_or_default();
            println!("#   {json}");
        }
    }
}

fn cmd_eval(a: EvalArgs) -> CliResult {
    let ckpt = load_checkpoint(&a.ckpt)?;
    describe_checkpoint(&ckpt);
    let sessions = load_sessions(&a.data)?;
    let report = evaluate_sessions(&ckpt, &sessions)?;
    for s in &report.sessions {
        println!("{} ccc {:.6} mse {:.6}", s.session_id, s.ccc, s.mse);
    }
    for s in &report.skipped {
        println!("{s} skipped (no labels)");
    }
    println!("mean_ccc {:.6} mean_mse {:.6}", report.mean_ccc, report.mean_mse);
    if let Some(path) = &a.report {
        let text = if path.extension().is_some_and(|e| e == "csv") {
            report.to_csv()
        } else {
            report.to_json()? + "\n"
        };
        write_text(path, &text)?;
    }
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> CliResult {
    let ckpt = load_checkpoint(&a.ckpt)?;
    describe_checkpoint(&ckpt);
    let session = load_session(&a.session)?;
    let pred = ckpt.predict_session(&session)?;
    let mut out = String::from("frame_index,prediction\n");
    for (i, p) in pred.iter().enumerate() {
        out.push_str(&format!("{i},{}\n", p.clamp(0.0, 1.0)));
    }
    write_text(&a.out, &out)?;
    println!("wrote {} predictions to {}", pred.len(), a.out.display());
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> CliResult {
    println!("# gradcheck seed {}", a.seed);
    let cases = run_suite(a.seed)?;
    let mut worst: f64 = 0.0;
    let mut failed = Vec::new();
    for c in &cases {
        let (name, idx) = c.report.worst.clone().unwrap_or_default();
        println!(
            "{:<20} max_rel_err {:.3e} tol {:.0e} checked {:>5} worst {name}[{idx}] {}",
            c.name,
            c.report.max_rel_err,
            c.tol,
            c.report.checked,
            if c.passed() { "ok" } else { "FAIL" }
        );
        worst = worst.max(c.report.max_rel_err);
        if !c.passed() {
            failed.push(c.name);
        }
    }
    println!("max rel err {worst:.3e}");
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure {
            code: 3,
            kind: "numeric",
            msg: format!("gradient check failed: {}", failed.join(", ")),
        })
    }
}

fn parse_arm(s: &str) -> CliResult<Arm> {
    Ok(match s.trim() {
        "baseline" => Arm::Baseline,
        "dae" => Arm::Dae,
        "mgf" => Arm::Mgf,
        "mgf_dae" => Arm::MgfDae,
        "no_dae_depth2" => Arm::NoDaeDepth2,
        "dae_depth1" => Arm::DaeDepth1,
        other => return Err(DatError::Config(format!("unknown arm {other:?}")).into()),
    })
}

fn cmd_ablate(a: AblateArgs) -> CliResult {
    let mut cfg = resolve(&a.config)?;
    let train_sessions = load_sessions(&a.data)?;
    let val_sessions = load_sessions(&a.val)?;
    adopt_dims(&mut cfg, &train_sessions)?;
    let arms = match &a.arms {
        Some(list) => list.split(',').map(parse_arm).collect::<CliResult<Vec<_>>>()?,
        None => Arm::ALL.to_vec(),
    };
    if a.seeds == 0 {
        return Err(DatError::Config("--seeds must be >= 1".into()).into());
    }
    let seeds: Vec<u64> = (0..a.seeds).collect();
    print_config(&format!("ablation base config (preset {}, seeds {seeds:?})", a.config.preset), &cfg);
    let table = run_ablate(&train_sessions, &val_sessions, &cfg, &arms, &seeds, Some(&a.out))?;
    print!("{}", table.to_csv());
    print!("{}", table.render());
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            eprint!("{}", e.render());
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error[{}]: {}", f.kind, f.msg);
            ExitCode::from(f.code)
        }
    }
}
