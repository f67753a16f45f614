//! Central finite-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Tape, Var};
use crate::config::{Preset, RunConfig};
use crate::error::{DatError, Result};
use crate::features::{FeatureBundle, FeatureDims, Stream};
use crate::metrics::LossKind;
use crate::model::{DaeLayer, DatModel, ModelConfig, ModelVariant};
use crate::nn::{LayerDims, MultiHeadAttention, RunMode, TransformerEncoderLayer};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Denominator floor of [`relative_error`]. Gradients that are zero by
/// construction (an attention key bias, for one) otherwise turn rounding noise
/// in the finite difference into large relative errors.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn eval_loss<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new(store);
    let loss = f(&mut tape)?;
    let v = tape.value(loss);
    if v.numel() != 1 {
        return Err(DatError::Tape(format!("grad_check needs a scalar, got {:?}", v.shape())));
    }
    Ok(v.data()[0])
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences with step `h`.
///
/// Every parameter tensor contributes at least one coordinate; remaining
/// samples (up to `samples` total) are drawn uniformly over all scalars. When
/// the store has no more than `samples` scalars, every coordinate is checked.
/// `f` must be deterministic.
pub fn grad_check<F>(
    store: &mut ParamStore,
    f: F,
    h: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let grads = {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape)?;
        tape.backward(loss)?;
        tape.param_grads()
    };

    let ids: Vec<_> = store.ids().collect();
    let sizes: Vec<usize> = ids.iter().map(|id| store.get(*id).numel()).collect();
    let total: usize = sizes.iter().sum();
    let mut coords = Vec::new();
    if total <= samples {
        for (p, n) in sizes.iter().enumerate() {
            coords.extend((0..*n).map(|i| (p, i)));
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (p, n) in sizes.iter().enumerate() {
            if *n > 0 {
                coords.push((p, rng.random_range(0..*n)));
            }
        }
        while coords.len() < samples {
            let mut flat = rng.random_range(0..total);
            let mut p = 0;
            while flat >= sizes[p] {
                flat -= sizes[p];
                p += 1;
            }
            coords.push((p, flat));
        }
    }

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    for (p, i) in coords {
        let id = ids[p];
        let name = store.name(id).to_string();
        let orig = store.get(id).data()[i];
        let at = |store: &mut ParamStore, v: f64| -> Result<f64> {
            store.get_mut(id).data_mut()[i] = v;
            let out = eval_loss(store, &f);
            store.get_mut(id).data_mut()[i] = orig;
            match out {
                Ok(y) if y.is_finite() => Ok(y),
                Ok(_) | Err(DatError::NonFinite { .. }) => Err(DatError::Numeric(format!(
                    "non-finite loss when perturbing {name}[{i}]"
                ))),
                Err(e) => Err(e),
            }
        };
        let plus = at(store, orig + h)?;
        let minus = at(store, orig - h)?;
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = grads.get(id).data()[i];
        if !analytic.is_finite() {
            return Err(DatError::Numeric(format!("non-finite analytic gradient at {name}[{i}]")));
        }
        let err = relative_error(analytic, numeric);
        if report.worst.is_none() || err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some((name, i));
        }
        report.checked += 1;
    }
    Ok(report)
}


/// One case of the finite-difference suite.
#[derive(Clone, Debug)]
pub struct SuiteCase {
    pub name: &'static str,
    pub tol: f64,
    pub report: GradCheckReport,
}

impl SuiteCase {
    pub fn passed(&self) -> bool {
        self.report.passes(self.tol)
    }
}

/// Step for single-op cases.
pub const SUITE_STEP: f64 = 1e-5;
/// Step for layer- and model-level cases, where rounding noise in deep
/// forward passes outweighs the O(h²) truncation error.
pub const DEEP_STEP: f64 = 1e-4;

/// The toy model used for whole-model checks: d=8, two heads, a window of
/// four frames (s=2, l=1) and small stream widths. Dropout is off.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        d: 8,
        heads: 2,
        ffn_mult: 2,
        dropout: 0.0,
        core_len: 2,
        context_len: 1,
        feature_dims: FeatureDims {
            opensmile: 3,
            w2vbert: 5,
            clip: 4,
            openface: 6,
            openpose: 2,
        },
        max_len: 64,
        ..ModelConfig::default()
    }
}

/// The desk preset model over a four-frame window, dropout off.
pub fn desk_width_config() -> ModelConfig {
    ModelConfig {
        dropout: 0.0,
        core_len: 2,
        context_len: 1,
        ..RunConfig::preset(Preset::Desk).model
    }
}

fn random_bundle(len: usize, dims: &FeatureDims, rng: &mut ChaCha8Rng) -> FeatureBundle {
    FeatureBundle::new(Stream::ALL.map(|s| Tensor::randn(&[len, dims.get(s)], 1.0, rng))).expect("equal rows")
}

/// Moves every parameter off its initial value so zero biases and unit
/// gains are not special points.
fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            let n: f64 = StandardNormal.sample(rng);
            *v += 0.1 * n;
        }
    }
}

fn weighted_sum(tape: &mut Tape, x: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    // a fixed random projection keeps the loss from being symmetric in x
    let w = Tensor::randn(tape.shape(x), 1.0, rng);
    let w = tape.constant(w);
    let p = tape.mul(x, w)?;
    tape.mean(p)
}

fn model_case(
    name: &'static str,
    cfg: ModelConfig,
    samples: usize,
    seed: u64,
    loss: LossKind,
) -> Result<SuiteCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = DatModel::new(ModelConfig { init_seed: seed, ..cfg })?;
    let l = model.config().window_len();
    let dims = model.config().feature_dims;
    let target = random_bundle(l, &dims, &mut rng);
    let partner = random_bundle(l, &dims, &mut rng);
    let labels: Vec<f64> = (0..l).map(|_| rng.random_range(0.0..1.0)).collect();
    let weights = vec![1.0; l];
    let mut store = model.params().clone();
    jitter(&mut store, &mut rng);
    let report = grad_check(
        &mut store,
        |tape| {
            let out = model.forward(tape, &mut RunMode::eval(), &target, Some(&partner))?;
            loss.apply(tape, out, &labels, &weights)
        },
        DEEP_STEP,
        samples,
        seed,
    )?;
    Ok(SuiteCase { name, tol: 1e-4, report })
}

/// The full finite-difference suite: core ops, attention, encoder layer,
/// MGF, DAE, both losses and whole models. Dropout is off everywhere.
pub fn run_suite(seed: u64) -> Result<Vec<SuiteCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    let h = SUITE_STEP;

    // sum(A·B)
    {
        let mut store = ParamStore::new();
        let a = store.add("A", Tensor::randn(&[3, 4], 1.0, &mut rng));
        let b = store.add("B", Tensor::randn(&[4, 5], 1.0, &mut rng));
        let report = grad_check(
            &mut store,
            |tape| {
                let (a, b) = (tape.param(a), tape.param(b));
                let c = tape.matmul(a, b)?;
                tape.sum(c)
            },
            h,
            usize::MAX,
            seed,
        )?;
        cases.push(SuiteCase { name: "matmul", tol: 1e-6, report });
    }

    // layer norm on 4×8, gelu and softmax on random inputs
    {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::randn(&[4, 8], 1.0, &mut rng));
        let g = store.add("gamma", Tensor::randn(&[8], 1.0, &mut rng));
        let b = store.add("beta", Tensor::randn(&[8], 1.0, &mut rng));
        let mut prng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let proj = Tensor::randn(&[4, 8], 1.0, &mut prng);
        let report = grad_check(
            &mut store,
            |tape| {
                let (x, g, b) = (tape.param(x), tape.param(g), tape.param(b));
                let y = tape.layer_norm(x, g, b, 1e-5)?;
                let w = tape.constant(proj.clone());
                let p = tape.mul(y, w)?;
                tape.sum(p)
            },
            h,
            usize::MAX,
            seed,
        )?;
        cases.push(SuiteCase { name: "layer_norm", tol: 1e-5, report });
    }
    for (name, which) in [("gelu", 0), ("softmax", 1)] {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::randn(&[4, 6], 1.5, &mut rng));
        let proj = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let report = grad_check(
            &mut store,
            |tape| {
                let x = tape.param(x);
                let y = if which == 0 { tape.gelu(x)? } else { tape.softmax(x, 1)? };
                let w = tape.constant(proj.clone());
                let p = tape.mul(y, w)?;
                tape.sum(p)
            },
            h,
            usize::MAX,
            seed,
        )?;
        cases.push(SuiteCase { name, tol: 1e-5, report });
    }

    // self-attention on 8×16 with four heads
    {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::randn(&[8, 16], 1.0, &mut rng));
        let attn = MultiHeadAttention::new(&mut store, "attn", 16, 4, 0.0, &mut rng)?;
        jitter(&mut store, &mut rng);
        let prng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let report = grad_check(
            &mut store,
            |tape| {
                let x = tape.param(x);
                let y = attn.forward(tape, &mut RunMode::eval(), x, x)?;
                weighted_sum(tape, y, &mut prng.clone())
            },
            DEEP_STEP,
            usize::MAX,
            seed,
        )?;
        cases.push(SuiteCase { name: "attention", tol: 1e-5, report });
    }

    // one pre-norm encoder layer at L=4, D=8
    {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::randn(&[4, 8], 1.0, &mut rng));
        let dims = LayerDims { dim: 8, heads: 2, ffn_mult: 4, dropout: 0.0, eps: 1e-5 };
        let layer = TransformerEncoderLayer::new(&mut store, "enc", dims, &mut rng)?;
        jitter(&mut store, &mut rng);
        let prng = ChaCha8Rng::seed_from_u64(seed ^ 3);
        let report = grad_check(
            &mut store,
            |tape| {
                let x = tape.param(x);
                let y = layer.forward(tape, &mut RunMode::eval(), x)?;
                weighted_sum(tape, y, &mut prng.clone())
            },
            DEEP_STEP,
            usize::MAX,
            seed,
        )?;
        cases.push(SuiteCase { name: "encoder_layer", tol: 1e-5, report });
    }

    // one dialogue-aware layer at L=4, D=16, w.r.t. both inputs
    {
        let mut store = ParamStore::new();
        let xt = store.add("x_target", Tensor::randn(&[4, 16], 1.0, &mut rng));
        let xi = store.add("x_partner", Tensor::randn(&[4, 16], 1.0, &mut rng));
        let dims = LayerDims { dim: 16, heads: 4, ffn_mult: 4, dropout: 0.0, eps: 1e-5 };
        let layer = DaeLayer::new(&mut store, "dae", dims, &mut rng)?;
        jitter(&mut store, &mut rng);
        let prng = ChaCha8Rng::seed_from_u64(seed ^ 4);
        let report = grad_check(
            &mut store,
            |tape| {
                let (t, p) = (tape.param(xt), tape.param(xi));
                let y = layer.forward(tape, &mut RunMode::eval(), t, p)?;
                weighted_sum(tape, y, &mut prng.clone())
            },
            DEEP_STEP,
            usize::MAX,
            seed,
        )?;
        cases.push(SuiteCase { name: "dae_layer", tol: 1e-4, report });
    }

    // modality-group fusion of one role
    {
        let model = DatModel::new(ModelConfig { init_seed: seed, ..toy_model_config() })?;
        let bundle = random_bundle(4, &model.config().feature_dims, &mut rng);
        let mut store = model.params().clone();
        jitter(&mut store, &mut rng);
        let prng = ChaCha8Rng::seed_from_u64(seed ^ 5);
        let report = grad_check(
            &mut store,
            |tape| {
                let g = model.mgf_forward(tape, &mut RunMode::eval(), &bundle, false)?;
                let x = tape.concat(&[g.audio, g.video], 1)?;
                weighted_sum(tape, x, &mut prng.clone())
            },
            DEEP_STEP,
            200,
            seed,
        )?;
        cases.push(SuiteCase { name: "mgf", tol: 1e-4, report });
    }

    // losses on a 64-frame batch with some frames masked out
    for (name, kind) in [("mse_loss", LossKind::Mse), ("ccc_loss", LossKind::Ccc)] {
        let mut store = ParamStore::new();
        let p = store.add("pred", Tensor::uniform(&[64, 1], 1.0, &mut rng));
        let labels: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
        let weights: Vec<f64> = (0..64).map(|i| if i % 5 == 0 { 0.0 } else { 1.0 }).collect();
        let report = grad_check(
            &mut store,
            |tape| {
                let p = tape.param(p);
                kind.apply(tape, p, &labels, &weights)
            },
            h,
            usize::MAX,
            seed,
        )?;
        cases.push(SuiteCase { name, tol: 1e-5, report });
    }

    cases.push(model_case("dat_model_mse", toy_model_config(), 100, seed, LossKind::Mse)?);
    cases.push(model_case("dat_model_ccc", toy_model_config(), 100, seed, LossKind::Ccc)?);
    cases.push(model_case("desk_width_model", desk_width_config(), 100, seed, LossKind::Mse)?);
    cases.push(model_case(
        "six_encoder_model",
        ModelConfig { variant: ModelVariant::SixEncoder, ..toy_model_config() },
        100,
        seed,
        LossKind::Mse,
    )?);
    Ok(cases)
}
