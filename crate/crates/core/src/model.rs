//! The dialogue-aware transformer and its ablation variants.
//!
//! Data flow for one window of `L` frames (`d` = unified width):
//!
//! ```text
//! target streams ──► MGF ──► A_T [L×2d], V_T [L×3d] ─┐
//!                                                     ├─► DAE(audio), DAE(video) ─► concat [L×5d] ─► MLP ─► [L×1]
//! partner streams ─► MGF ──► A_I [L×2d], V_I [L×3d] ─┘
//! ```
//!
//! MGF projects each stream to `d`, runs one encoder stack per stream, then
//! concatenates the audio (E, W) and video (C, OF, OP) groups and runs one
//! encoder stack per group. A DAE layer uses the partner's group features as
//! attention queries against the target's normalised features.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{DatError, Result};
use crate::features::{FeatureBundle, FeatureDims, Stream};
use crate::nn::{
    FeedForward, LayerDims, LayerNorm, Linear, MultiHeadAttention, PositionalEncoding, RunMode,
    TransformerEncoderLayer,
};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    /// MGF + DAE graph, with `use_mgf` / `use_dae` switching modules off.
    Dat,
    /// Five per-stream encoders, concatenation, one fusion encoder, MLP.
    SixEncoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    /// Unified projection width `d`.
    pub d: usize,
    /// Number of stacked DAE layers `N`.
    pub dae_layers: usize,
    /// Layers per encoder stack (per-stream, group and fusion encoders).
    pub encoder_depth: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    /// Core (stride) length `s`.
    pub core_len: usize,
    /// Context length `l` on each side of the core.
    pub context_len: usize,
    pub feature_dims: FeatureDims,
    pub use_mgf: bool,
    pub use_dae: bool,
    pub share_mgf_weights: bool,
    pub use_positional: bool,
    /// Hidden width of the prediction head; `None` means `d`.
    pub head_hidden: Option<usize>,
    pub ln_eps: f64,
    pub max_len: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: ModelVariant::Dat,
            d: 512,
            dae_layers: 1,
            encoder_depth: 1,
            heads: 8,
            ffn_mult: 4,
            dropout: 0.2,
            core_len: 32,
            context_len: 32,
            feature_dims: FeatureDims::default(),
            use_mgf: true,
            use_dae: true,
            share_mgf_weights: false,
            use_positional: true,
            head_hidden: None,
            ln_eps: 1e-5,
            max_len: 1024,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn window_len(&self) -> usize {
        self.core_len + 2 * self.context_len
    }

    pub fn head_hidden(&self) -> usize {
        self.head_hidden.unwrap_or(self.d)
    }

    /// True when the model consumes the partner's streams.
    pub fn uses_partner(&self) -> bool {
        self.variant == ModelVariant::Dat && self.use_dae
    }

    fn has_partner_stack(&self) -> bool {
        self.uses_partner() && !self.share_mgf_weights
    }

    fn has_group_encoders(&self) -> bool {
        self.variant == ModelVariant::Dat && self.use_mgf
    }

    fn layer_dims(&self, dim: usize) -> LayerDims {
        LayerDims {
            dim,
            heads: self.heads,
            ffn_mult: self.ffn_mult,
            dropout: self.dropout,
            eps: self.ln_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DatError::Config(m));
        if self.d == 0 || self.heads == 0 {
            return bad("d and heads must be positive".into());
        }
        let widths: &[usize] = match self.variant {
            ModelVariant::Dat => &[1, 2, 3],
            ModelVariant::SixEncoder => &[1, 5],
        };
        for m in widths {
            if (m * self.d) % self.heads != 0 {
                return bad(format!("heads = {} must divide {} (= {m}·d)", self.heads, m * self.d));
            }
        }
        if self.core_len == 0 {
            return bad("core length s must be >= 1".into());
        }
        if self.encoder_depth == 0 || self.ffn_mult == 0 {
            return bad("encoder_depth and ffn_mult must be >= 1".into());
        }
        if self.uses_partner() && self.dae_layers == 0 {
            return bad("use_dae requires dae_layers >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        if !(self.ln_eps > 0.0) {
            return bad("ln_eps must be > 0".into());
        }
        if Stream::ALL.iter().any(|s| self.feature_dims.get(*s) == 0) {
            return bad("feature dims must be positive".into());
        }
        if self.head_hidden == Some(0) {
            return bad("head_hidden must be positive".into());
        }
        if self.use_positional && self.window_len() > self.max_len {
            return bad(format!(
                "window length {} exceeds max_len {}",
                self.window_len(),
                self.max_len
            ));
        }
        Ok(())
    }
}

/// Closed-form number of trainable scalars for `cfg`.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let d = cfg.d;
    let enc = |w: usize| TransformerEncoderLayer::param_count(w, cfg.ffn_mult);
    let dae = |w: usize| DaeLayer::param_count(w, cfg.ffn_mult);
    let stack = |groups: bool| {
        let per_stream: usize = Stream::ALL
            .iter()
            .map(|s| Linear::param_count(cfg.feature_dims.get(*s), d) + cfg.encoder_depth * enc(d))
            .sum();
        let grouped = if groups { cfg.encoder_depth * (enc(2 * d) + enc(3 * d)) } else { 0 };
        per_stream + grouped
    };
    let hh = cfg.head_hidden();
    let head = Linear::param_count(5 * d, hh) + Linear::param_count(hh, 1);
    match cfg.variant {
        ModelVariant::Dat => {
            let stacks = stack(cfg.use_mgf) * if cfg.has_partner_stack() { 2 } else { 1 };
            let daes = if cfg.uses_partner() { cfg.dae_layers * (dae(2 * d) + dae(3 * d)) } else { 0 };
            stacks + daes + head
        }
        ModelVariant::SixEncoder => stack(false) + cfg.encoder_depth * enc(5 * d) + head,
    }
}

/// Per-role modality-group fusion stack.
#[derive(Clone, Debug)]
pub struct MgfStack {
    pub projections: Vec<Linear>,
    pub stream_encoders: Vec<Vec<TransformerEncoderLayer>>,
    pub audio_encoders: Vec<TransformerEncoderLayer>,
    pub video_encoders: Vec<TransformerEncoderLayer>,
}

/// Group-level MGF outputs for one role.
#[derive(Clone, Copy, Debug)]
pub struct GroupedFeatures {
    /// `[L × 2d]`
    pub audio: Var,
    /// `[L × 3d]`
    pub video: Var,
}

impl MgfStack {
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &ModelConfig,
        groups: bool,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        let d = cfg.d;
        let mut projections = Vec::new();
        let mut stream_encoders = Vec::new();
        for s in Stream::ALL {
            let name = format!("{prefix}.{}", s.file_stem());
            projections.push(Linear::new(store, &format!("{name}.proj"), cfg.feature_dims.get(s), d, rng));
            let layers = (0..cfg.encoder_depth)
                .map(|i| TransformerEncoderLayer::new(store, &format!("{name}.enc{i}"), cfg.layer_dims(d), rng))
                .collect::<Result<Vec<_>>>()?;
            stream_encoders.push(layers);
        }
        let group = |store: &mut ParamStore, rng: &mut dyn RngCore, tag: &str, w: usize| {
            if !groups {
                return Ok(Vec::new());
            }
            (0..cfg.encoder_depth)
                .map(|i| TransformerEncoderLayer::new(store, &format!("{prefix}.{tag}.enc{i}"), cfg.layer_dims(w), rng))
                .collect::<Result<Vec<_>>>()
        };
        let audio_encoders = group(store, rng, "audio", 2 * d)?;
        let video_encoders = group(store, rng, "video", 3 * d)?;
        Ok(MgfStack {
            projections,
            stream_encoders,
            audio_encoders,
            video_encoders,
        })
    }

    /// Projection, optional positions and per-stream encoders for one stream.
    fn encode_stream(
        &self,
        tape: &mut Tape,
        mode: &mut RunMode,
        bundle: &FeatureBundle,
        s: Stream,
        pe: Option<&PositionalEncoding>,
    ) -> Result<Var> {
        let x = tape.constant(bundle.get(s).clone());
        let mut x = self.projections[s.index()].forward(tape, x)?;
        if let Some(pe) = pe {
            x = pe.add_positional(tape, x, true)?;
        }
        for layer in &self.stream_encoders[s.index()] {
            x = layer.forward(tape, mode, x)?;
        }
        Ok(x)
    }

    /// Encodes all five streams and returns them in [`Stream::ALL`] order.
    pub fn encode_streams(
        &self,
        tape: &mut Tape,
        mode: &mut RunMode,
        bundle: &FeatureBundle,
        pe: Option<&PositionalEncoding>,
    ) -> Result<Vec<Var>> {
        Stream::ALL
            .iter()
            .map(|s| self.encode_stream(tape, mode, bundle, *s, pe))
            .collect()
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        mode: &mut RunMode,
        bundle: &FeatureBundle,
        pe: Option<&PositionalEncoding>,
    ) -> Result<GroupedFeatures> {
        let enc = self.encode_streams(tape, mode, bundle, pe)?;
        let mut audio = tape.concat(&enc[..2], 1)?;
        let mut video = tape.concat(&enc[2..], 1)?;
        for layer in &self.audio_encoders {
            audio = layer.forward(tape, mode, audio)?;
        }
        for layer in &self.video_encoders {
            video = layer.forward(tape, mode, video)?;
        }
        Ok(GroupedFeatures { audio, video })
    }
}

/// One dialogue-aware encoder layer:
///
/// ```text
/// T'  = Norm(T)
/// T'' = CrossAttn(Q = I, K = T', V = T') + T
/// out = T'' + FFN(Norm(T''))
/// ```
///
/// The partner query `I` is not normalised and the residual adds the raw `T`.
#[derive(Clone, Debug)]
pub struct DaeLayer {
    pub norm_target: LayerNorm,
    pub cross: MultiHeadAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl DaeLayer {
    pub fn new(store: &mut ParamStore, name: &str, dims: LayerDims, rng: &mut dyn RngCore) -> Result<Self> {
        Ok(DaeLayer {
            norm_target: LayerNorm::new(store, &format!("{name}.norm1"), dims.dim, dims.eps),
            cross: MultiHeadAttention::new(store, &format!("{name}.cross"), dims.dim, dims.heads, dims.dropout, rng)?,
            norm_ffn: LayerNorm::new(store, &format!("{name}.norm2"), dims.dim, dims.eps),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dims.dim, dims.ffn_mult, dims.dropout, rng),
        })
    }

    pub fn param_count(dim: usize, ffn_mult: usize) -> usize {
        2 * LayerNorm::param_count(dim) + MultiHeadAttention::param_count(dim) + FeedForward::param_count(dim, ffn_mult)
    }

    pub fn forward(&self, tape: &mut Tape, mode: &mut RunMode, target: Var, partner: Var) -> Result<Var> {
        if tape.shape(target) != tape.shape(partner) {
            return Err(DatError::shape("dae_layer", tape.shape(target), tape.shape(partner)));
        }
        let normed = self.norm_target.forward(tape, target)?;
        let attended = self.cross.forward(tape, mode, partner, normed)?;
        let mid = tape.add(attended, target)?;
        let n = self.norm_ffn.forward(tape, mid)?;
        let f = self.ffn.forward(tape, mode, n)?;
        tape.add(mid, f)
    }
}

/// `Linear(5d → h) → GELU → dropout → Linear(h → 1)`.
#[derive(Clone, Debug)]
pub struct PredictionHead {
    pub hidden: Linear,
    pub out: Linear,
    pub dropout: f64,
}

impl PredictionHead {
    pub fn forward(&self, tape: &mut Tape, mode: &mut RunMode, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, x)?;
        let h = tape.gelu(h)?;
        let h = mode.dropout(tape, h, self.dropout)?;
        self.out.forward(tape, h)
    }
}

/// Named intermediate values of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutputs {
    /// Target group features after MGF (`A_T`, `V_T`).
    pub target_groups: GroupedFeatures,
    /// Final target features entering the head (`A^O_T`, `V^O_T`); equal to
    /// `target_groups` when the DAE is off.
    pub fused: GroupedFeatures,
    /// `[L × 5d]`
    pub head_input: Var,
    /// `[L × 1]`, unclamped.
    pub output: Var,
}

/// Scale applied to the output layer's initial weights.
pub const HEAD_OUT_GAIN: f64 = 0.05;
/// Initial output bias.
pub const HEAD_OUT_BIAS: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct DatModel {
    config: ModelConfig,
    params: ParamStore,
    target_mgf: MgfStack,
    partner_mgf: Option<MgfStack>,
    audio_dae: Vec<DaeLayer>,
    video_dae: Vec<DaeLayer>,
    fusion: Vec<TransformerEncoderLayer>,
    head: PredictionHead,
    positions: Option<PositionalEncoding>,
}

impl DatModel {
    /// Builds the model with freshly initialised parameters drawn from
    /// `config.init_seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let cfg = &config;
        let d = cfg.d;
        let target_mgf = MgfStack::new(&mut store, "target", cfg, cfg.has_group_encoders(), &mut rng)?;
        let partner_mgf = if cfg.has_partner_stack() {
            Some(MgfStack::new(&mut store, "partner", cfg, cfg.has_group_encoders(), &mut rng)?)
        } else {
            None
        };
        let (mut audio_dae, mut video_dae) = (Vec::new(), Vec::new());
        if cfg.uses_partner() {
            for i in 0..cfg.dae_layers {
                audio_dae.push(DaeLayer::new(&mut store, &format!("dae.audio{i}"), cfg.layer_dims(2 * d), &mut rng)?);
            }
            for i in 0..cfg.dae_layers {
                video_dae.push(DaeLayer::new(&mut store, &format!("dae.video{i}"), cfg.layer_dims(3 * d), &mut rng)?);
            }
        }
        let fusion = if cfg.variant == ModelVariant::SixEncoder {
            (0..cfg.encoder_depth)
                .map(|i| TransformerEncoderLayer::new(&mut store, &format!("fusion.enc{i}"), cfg.layer_dims(5 * d), &mut rng))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let hh = cfg.head_hidden();
        let head = PredictionHead {
            hidden: Linear::new(&mut store, "head.hidden", 5 * d, hh, &mut rng),
            out: Linear::new(&mut store, "head.out", hh, 1, &mut rng),
            dropout: cfg.dropout,
        };
        // Start near the middle of the label range.
        store.get_mut(head.out.weight).data_mut().iter_mut().for_each(|w| *w *= HEAD_OUT_GAIN);
        store.get_mut(head.out.bias).data_mut().fill(HEAD_OUT_BIAS);
        let positions = cfg.use_positional.then(|| PositionalEncoding::new(cfg.max_len, d));
        Ok(DatModel {
            config,
            params: store,
            target_mgf,
            partner_mgf,
            audio_dae,
            video_dae,
            fusion,
            head,
            positions,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn target_mgf(&self) -> &MgfStack {
        &self.target_mgf
    }

    pub fn partner_mgf(&self) -> &MgfStack {
        self.partner_mgf.as_ref().unwrap_or(&self.target_mgf)
    }

    pub fn audio_dae(&self) -> &[DaeLayer] {
        &self.audio_dae
    }

    pub fn video_dae(&self) -> &[DaeLayer] {
        &self.video_dae
    }

    pub fn positions(&self) -> Option<&PositionalEncoding> {
        self.positions.as_ref()
    }

    /// Modality-group fusion for one role.
    pub fn mgf_forward(
        &self,
        tape: &mut Tape,
        mode: &mut RunMode,
        bundle: &FeatureBundle,
        partner_role: bool,
    ) -> Result<GroupedFeatures> {
        bundle.check_dims(&self.config.feature_dims)?;
        let stack = if partner_role { self.partner_mgf() } else { &self.target_mgf };
        stack.forward(tape, mode, bundle, self.positions.as_ref())
    }

    /// Full DAT forward. `partner` is required when the DAE is enabled.
    pub fn dat_forward(
        &self,
        tape: &mut Tape,
        mode: &mut RunMode,
        target: &FeatureBundle,
        partner: Option<&FeatureBundle>,
    ) -> Result<ForwardOutputs> {
        if self.config.variant != ModelVariant::Dat {
            return Err(DatError::InvalidArgument("dat_forward on a six-encoder model".into()));
        }
        if let Some(p) = partner {
            if p.len() != target.len() {
                return Err(DatError::InvalidArgument(format!(
                    "target window has {} frames but partner has {}",
                    target.len(),
                    p.len()
                )));
            }
        }
        let target_groups = self.mgf_forward(tape, mode, target, false)?;
        let fused = if self.config.uses_partner() {
            let partner = partner.ok_or_else(|| {
                DatError::InvalidArgument("the dialogue-aware encoder needs partner features".into())
            })?;
            let partner_groups = self.mgf_forward(tape, mode, partner, true)?;
            let mut audio = target_groups.audio;
            for layer in &self.audio_dae {
                audio = layer.forward(tape, mode, audio, partner_groups.audio)?;
            }
            let mut video = target_groups.video;
            for layer in &self.video_dae {
                video = layer.forward(tape, mode, video, partner_groups.video)?;
            }
            GroupedFeatures { audio, video }
        } else {
            target_groups
        };
        let head_input = tape.concat(&[fused.audio, fused.video], 1)?;
        let output = self.head.forward(tape, mode, head_input)?;
        Ok(ForwardOutputs {
            target_groups,
            fused,
            head_input,
            output,
        })
    }

    /// Six-encoder baseline: per-stream encoders, concatenation, fusion
    /// encoder, MLP. Partner features are not used.
    pub fn baseline_forward(&self, tape: &mut Tape, mode: &mut RunMode, target: &FeatureBundle) -> Result<Var> {
        if self.config.variant != ModelVariant::SixEncoder {
            return Err(DatError::InvalidArgument("baseline_forward on a DAT model".into()));
        }
        target.check_dims(&self.config.feature_dims)?;
        let enc = self.target_mgf.encode_streams(tape, mode, target, self.positions.as_ref())?;
        let mut x = tape.concat(&enc, 1)?;
        for layer in &self.fusion {
            x = layer.forward(tape, mode, x)?;
        }
        self.head.forward(tape, mode, x)
    }

    /// Unclamped `[L × 1]` prediction for either variant.
    pub fn forward(
        &self,
        tape: &mut Tape,
        mode: &mut RunMode,
        target: &FeatureBundle,
        partner: Option<&FeatureBundle>,
    ) -> Result<Var> {
        match self.config.variant {
            ModelVariant::Dat => Ok(self.dat_forward(tape, mode, target, partner)?.output),
            ModelVariant::SixEncoder => self.baseline_forward(tape, mode, target),
        }
    }

    /// Inference on one window: eval mode, predictions clamped to `[0, 1]`.
    pub fn predict_window(&self, target: &FeatureBundle, partner: Option<&FeatureBundle>) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.params);
        let out = self.forward(&mut tape, &mut RunMode::eval(), target, partner)?;
        Ok(tape.value(out).data().iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    /// Rebuilds an identically-shaped model around `params`.
    pub fn with_params(&self, params: ParamStore) -> Result<Self> {
        self.params.check_compatible(&params)?;
        let mut m = self.clone();
        m.params = params;
        Ok(m)
    }
}
