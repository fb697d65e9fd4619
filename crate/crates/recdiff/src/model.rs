//! Full recommender assembly: graph encoders plus the social diffusion
//! denoiser, fused scoring, the joint training objective, and the ablation
//! variants.

use std::sync::Arc;

use ndarray::{s, Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{
    diffusion_loss_mixed, denoise_inference, forward_closed_form, DenoiserNet, DiffusionLossMode,
    NoiseSchedule, TimeEmbedding,
};
use crate::encoder::{encode_interaction, encode_social, EncodeOpts};
use crate::error::{Error, Result};
use crate::graph::{build_bipartite, build_social, InteractionMatrix, SocialMatrix, SparseGraph};
use crate::params::{embedding_init, linear_init, ParamId, ParamStore};
use crate::rng::stream_rng;
use crate::tape::{Tape, Var};

/// Model variants: the full method and its ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    /// "-D": keeps both encoders, fuses the raw social embedding, no
    /// diffusion module or loss.
    NoDiffusion,
    /// "-S": interaction encoder only.
    NoSocial,
    /// Diffusion replaced by a two-layer denoising autoencoder trained to
    /// reconstruct randomly masked social embeddings.
    Dae,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "-D" | "no-diffusion" | "noD" => Ok(Variant::NoDiffusion),
            "-S" | "no-social" | "noS" => Ok(Variant::NoSocial),
            "dae" | "DAE" => Ok(Variant::Dae),
            other => Err(Error::Config(format!(
                "unknown variant '{other}' (expected full, -D, -S, or dae)"
            ))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoDiffusion => "-D",
            Variant::NoSocial => "-S",
            Variant::Dae => "dae",
        }
    }

    fn uses_social(&self) -> bool {
        !matches!(self, Variant::NoSocial)
    }

    fn uses_diffusion(&self) -> bool {
        matches!(self, Variant::Full)
    }
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Embedding width d.
    pub d: usize,
    /// Time-step embedding width d'.
    pub d_time: usize,
    /// GCN propagation layers L.
    pub layers: usize,
    /// Diffusion steps T.
    pub t_max: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Diffusion-loss weight.
    pub lambda1: f64,
    /// Decoupled weight decay over all trainable parameters.
    pub lambda2: f64,
    pub tau: f64,
    pub s_max: f64,
    pub s_min: f64,
    /// Reverse steps at inference; 0 means "use t_max".
    pub inference_steps: usize,
    pub loss_mode: DiffusionLossMode,
    /// Enable the per-layer d x d transform in the encoders.
    pub use_weight_transform: bool,
    /// Share the user rows of the interaction table as the social layer-0
    /// embeddings instead of keeping an independent table.
    pub share_social_base: bool,
    /// Fixed sinusoidal time embedding instead of the learned table.
    pub sinusoidal_time: bool,
    /// LeakyReLU slope for the denoiser activation.
    pub activation_slope: f64,
    /// Denoiser hidden width H; 0 means "use d".
    pub hidden: usize,
    /// DAE coordinate mask rate.
    pub dae_mask_rate: f64,
    /// Re-inject posterior noise between reverse steps at inference.
    pub stochastic_inference: bool,
    /// Reuse one sampled step per user for both the diffusion loss and the
    /// Eq.-13-style fusion term; when false an independent draw is used for
    /// the fusion.
    pub reuse_fusion_step: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            d: 64,
            d_time: 16,
            layers: 2,
            t_max: 50,
            lr: 0.001,
            batch_size: 2048,
            lambda1: 1.0,
            lambda2: 1e-5,
            tau: 0.1,
            s_max: 0.99,
            s_min: 0.1,
            inference_steps: 0,
            loss_mode: DiffusionLossMode::Elbo,
            use_weight_transform: false,
            share_social_base: false,
            sinusoidal_time: false,
            activation_slope: 0.2,
            hidden: 0,
            dae_mask_rate: 0.3,
            stochastic_inference: false,
            reuse_fusion_step: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 1 {
            return Err(Error::Config("embedding width d must be >= 1".into()));
        }
        if self.layers < 1 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.dae_mask_rate) {
            return Err(Error::Config("dae mask rate must lie in [0, 1)".into()));
        }
        if self.variant.uses_diffusion() {
            if self.d_time < 1 {
                return Err(Error::Config("time embedding width must be >= 1".into()));
            }
            if self.inference_steps > self.t_max {
                return Err(Error::Config(format!(
                    "inference steps {} exceed T={}",
                    self.inference_steps, self.t_max
                )));
            }
            // surfaces invalid (T, s, tau) combinations early
            NoiseSchedule::build(self.t_max, self.s_max, self.s_min, self.tau)?;
        }
        Ok(())
    }

    pub fn hidden_width(&self) -> usize {
        if self.hidden == 0 {
            self.d
        } else {
            self.hidden
        }
    }

    pub fn effective_inference_steps(&self) -> usize {
        if self.inference_steps == 0 {
            self.t_max
        } else {
            self.inference_steps
        }
    }

    /// Canonical flat key=value rendering; echoed into reports and hashed
    /// into run identifiers. Keys are sorted.
    pub fn canonical_text(&self) -> String {
        let mut kv = vec![
            ("activation_slope", format!("{}", self.activation_slope)),
            ("batch_size", format!("{}", self.batch_size)),
            ("d", format!("{}", self.d)),
            ("d_time", format!("{}", self.d_time)),
            ("dae_mask_rate", format!("{}", self.dae_mask_rate)),
            ("hidden", format!("{}", self.hidden)),
            ("inference_steps", format!("{}", self.inference_steps)),
            ("lambda1", format!("{}", self.lambda1)),
            ("lambda2", format!("{}", self.lambda2)),
            ("layers", format!("{}", self.layers)),
            (
                "loss_mode",
                match self.loss_mode {
                    DiffusionLossMode::Elbo => "elbo".to_string(),
                    DiffusionLossMode::ReconOnly => "recon-only".to_string(),
                },
            ),
            ("lr", format!("{}", self.lr)),
            ("reuse_fusion_step", format!("{}", self.reuse_fusion_step)),
            ("s_max", format!("{}", self.s_max)),
            ("s_min", format!("{}", self.s_min)),
            ("share_social_base", format!("{}", self.share_social_base)),
            ("sinusoidal_time", format!("{}", self.sinusoidal_time)),
            ("stochastic_inference", format!("{}", self.stochastic_inference)),
            ("t_max", format!("{}", self.t_max)),
            ("tau", format!("{}", self.tau)),
            ("use_weight_transform", format!("{}", self.use_weight_transform)),
            ("variant", self.variant.label().to_string()),
        ];
        kv.sort_by(|a, b| a.0.cmp(b.0));
        let mut out = String::new();
        for (k, v) in kv {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// Parse the canonical key=value rendering produced by
    /// [`ModelConfig::canonical_text`].
    pub fn from_canonical_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad config line {}: {line}", lineno + 1)))?;
            cfg.set_key(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    /// Apply a single key=value setting; shared by config files and the
    /// checkpoint loader.
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse::<T>()
                .map_err(|_| Error::Config(format!("bad value '{value}' for {key}")))
        }
        match key {
            "variant" => self.variant = Variant::parse(value)?,
            "d" => self.d = num(key, value)?,
            "d_time" => self.d_time = num(key, value)?,
            "layers" => self.layers = num(key, value)?,
            "t_max" => self.t_max = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lambda1" => self.lambda1 = num(key, value)?,
            "lambda2" => self.lambda2 = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "s_max" => self.s_max = num(key, value)?,
            "s_min" => self.s_min = num(key, value)?,
            "inference_steps" => self.inference_steps = num(key, value)?,
            "loss_mode" => {
                self.loss_mode = match value {
                    "elbo" => DiffusionLossMode::Elbo,
                    "recon-only" => DiffusionLossMode::ReconOnly,
                    other => {
                        return Err(Error::Config(format!(
                            "unknown loss mode '{other}' (expected elbo or recon-only)"
                        )))
                    }
                }
            }
            "use_weight_transform" => self.use_weight_transform = num(key, value)?,
            "share_social_base" => self.share_social_base = num(key, value)?,
            "sinusoidal_time" => self.sinusoidal_time = num(key, value)?,
            "activation_slope" => self.activation_slope = num(key, value)?,
            "hidden" => self.hidden = num(key, value)?,
            "dae_mask_rate" => self.dae_mask_rate = num(key, value)?,
            "stochastic_inference" => self.stochastic_inference = num(key, value)?,
            "reuse_fusion_step" => self.reuse_fusion_step = num(key, value)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }
}

/// Elementwise fusion of the interaction-side user embedding with the
/// denoised social embedding.
pub fn fuse_user(e_u_r: &Array1<f64>, denoised: &Array1<f64>) -> Result<Array1<f64>> {
    if e_u_r.len() != denoised.len() {
        return Err(Error::Shape {
            op: "fuse_user",
            detail: format!("{} vs {}", e_u_r.len(), denoised.len()),
        });
    }
    Ok(e_u_r + denoised)
}

/// Interaction score: dot product of a fused user vector and an item vector.
pub fn score(user: &Array1<f64>, item: &Array1<f64>) -> f64 {
    user.dot(item)
}

/// Numerically-stable pairwise ranking loss `-log sigmoid(pos - neg)`,
/// computed as `softplus(-(pos - neg))`.
pub fn bpr_loss(r_pos: f64, r_neg: f64) -> f64 {
    let x = -(r_pos - r_neg);
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// One training batch: sampled (user, positive, negative) triplets plus the
/// pre-drawn diffusion randomness, kept explicit so the loss is a pure
/// function of parameters given a batch.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub users: Vec<usize>,
    pub pos_items: Vec<usize>,
    pub neg_items: Vec<usize>,
    /// Per-row sampled diffusion step, 1..=T. Empty when unused.
    pub t: Vec<usize>,
    /// Standard Gaussian draws, one row per triplet. 0 x 0 when unused.
    pub noise: Array2<f64>,
    /// Independent draw for the fusion term when step reuse is disabled.
    pub fusion_t: Vec<usize>,
    pub fusion_noise: Array2<f64>,
    /// DAE input mask (1 keeps a coordinate, 0 drops it).
    pub dae_mask: Option<Array2<f64>>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }
}

/// Where the social side of the fused user vector comes from. The full
/// variant uses the denoiser output; the raw override exists for the -D
/// equivalence diagnostic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionSource {
    VariantDefault,
    RawSocial,
}

/// Loss pieces recorded on a tape.
pub struct LossVars {
    pub total: Var,
    pub bpr: Var,
    pub diffusion: Option<Var>,
}

/// Scalar loss values extracted from a step.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: f64,
    pub bpr: f64,
    pub diffusion: f64,
}

struct DaeNet {
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

/// The assembled recommender over one dataset.
pub struct RecDiffModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub num_users: usize,
    pub num_items: usize,
    g_r: Arc<SparseGraph>,
    g_s: Option<Arc<SparseGraph>>,
    schedule: Option<NoiseSchedule>,
    e0_r: ParamId,
    e0_s: Option<ParamId>,
    w_r: Vec<ParamId>,
    w_s: Vec<ParamId>,
    denoiser: Option<DenoiserNet>,
    dae: Option<DaeNet>,
    /// Master seed for eval-time stochastic sampling, when enabled.
    seed: u64,
}

impl RecDiffModel {
    /// Build a model over the training interactions and (unless -S) the
    /// social graph. Parameters are initialized from the seed's "init"
    /// stream in registration order.
    pub fn new(
        cfg: ModelConfig,
        train_interactions: &InteractionMatrix,
        social: Option<&SocialMatrix>,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let num_users = train_interactions.num_users;
        let num_items = train_interactions.num_items;
        let g_r = Arc::new(build_bipartite(train_interactions));
        let g_s = if cfg.variant.uses_social() {
            let sm = social.ok_or_else(|| {
                Error::Config(format!(
                    "variant {} needs social data but none was provided",
                    cfg.variant.label()
                ))
            })?;
            if sm.num_users != num_users {
                return Err(Error::Data(format!(
                    "social graph has {} users, interactions have {}",
                    sm.num_users, num_users
                )));
            }
            Some(Arc::new(build_social(sm)))
        } else {
            None
        };

        let mut rng = stream_rng(seed, "init");
        let mut store = ParamStore::new();
        let e0_r = store.add("e0_r", embedding_init(num_users + num_items, cfg.d, &mut rng));
        let e0_s = if cfg.variant.uses_social() && !cfg.share_social_base {
            Some(store.add("e0_s", embedding_init(num_users, cfg.d, &mut rng)))
        } else {
            None
        };
        let mut w_r = Vec::new();
        let mut w_s = Vec::new();
        if cfg.use_weight_transform {
            for l in 0..cfg.layers {
                w_r.push(store.add(&format!("w_r_{l}"), linear_init(cfg.d, cfg.d, &mut rng)));
            }
            if cfg.variant.uses_social() {
                for l in 0..cfg.layers {
                    w_s.push(store.add(&format!("w_s_{l}"), linear_init(cfg.d, cfg.d, &mut rng)));
                }
            }
        }

        let (schedule, denoiser) = if cfg.variant.uses_diffusion() {
            let sched = NoiseSchedule::build(cfg.t_max, cfg.s_max, cfg.s_min, cfg.tau)?;
            let h = cfg.hidden_width();
            let time_emb = if cfg.sinusoidal_time {
                TimeEmbedding::Sinusoidal(crate::diffusion::sinusoidal_table(
                    cfg.t_max, cfg.d_time,
                ))
            } else {
                TimeEmbedding::Learned(store.add(
                    "time_emb",
                    embedding_init(cfg.t_max + 1, cfg.d_time, &mut rng),
                ))
            };
            let net = DenoiserNet {
                time_emb,
                fc1_w: store.add("den_fc1_w", linear_init(cfg.d + cfg.d_time, h, &mut rng)),
                fc1_b: store.add("den_fc1_b", Array2::zeros((1, h))),
                fc2_w: store.add("den_fc2_w", linear_init(h, cfg.d, &mut rng)),
                fc2_b: store.add("den_fc2_b", Array2::zeros((1, cfg.d))),
                activation_slope: cfg.activation_slope,
            };
            (Some(sched), Some(net))
        } else {
            (None, None)
        };

        let dae = if cfg.variant == Variant::Dae {
            let h = cfg.hidden_width();
            Some(DaeNet {
                fc1_w: store.add("dae_fc1_w", linear_init(cfg.d, h, &mut rng)),
                fc1_b: store.add("dae_fc1_b", Array2::zeros((1, h))),
                fc2_w: store.add("dae_fc2_w", linear_init(h, cfg.d, &mut rng)),
                fc2_b: store.add("dae_fc2_b", Array2::zeros((1, cfg.d))),
            })
        } else {
            None
        };

        Ok(Self {
            cfg,
            store,
            num_users,
            num_items,
            g_r,
            g_s,
            schedule,
            e0_r,
            e0_s,
            w_r,
            w_s,
            denoiser,
            dae,
            seed,
        })
    }

    pub fn schedule(&self) -> Option<&NoiseSchedule> {
        self.schedule.as_ref()
    }

    pub fn denoiser(&self) -> Option<&DenoiserNet> {
        self.denoiser.as_ref()
    }

    pub fn interaction_graph(&self) -> &Arc<SparseGraph> {
        &self.g_r
    }

    fn encode_opts(&self) -> EncodeOpts {
        EncodeOpts::new(self.cfg.layers)
    }

    fn leaf_weights(&self, tape: &mut Tape, ids: &[ParamId]) -> Option<Vec<Var>> {
        if ids.is_empty() {
            None
        } else {
            Some(ids.iter().map(|&id| tape.param(&self.store, id)).collect())
        }
    }

    /// Record the full interaction-side embedding table E^r on the tape.
    fn encode_r(&self, tape: &mut Tape) -> Result<Var> {
        let e0 = tape.param(&self.store, self.e0_r);
        let w = self.leaf_weights(tape, &self.w_r);
        encode_interaction(tape, &self.g_r, e0, w.as_deref(), self.encode_opts())
    }

    /// Record the social-side embedding table E^s on the tape.
    fn encode_s(&self, tape: &mut Tape) -> Result<Var> {
        let g_s = self.g_s.as_ref().expect("social graph required");
        let e0 = match self.e0_s {
            Some(id) => tape.param(&self.store, id),
            None => {
                // shared base: social layer-0 is the user block of e0_r
                let full = tape.param(&self.store, self.e0_r);
                let idx: Vec<usize> = (0..self.num_users).collect();
                tape.gather_rows(full, &idx)?
            }
        };
        let w = self.leaf_weights(tape, &self.w_s);
        encode_social(tape, g_s, e0, w.as_deref(), self.encode_opts())
    }

    fn dae_forward(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        let dae = self.dae.as_ref().expect("dae net required");
        let w1 = tape.param(&self.store, dae.fc1_w);
        let b1 = tape.param(&self.store, dae.fc1_b);
        let z1 = tape.matmul(input, w1)?;
        let z1 = tape.add_row_bias(z1, b1)?;
        let a1 = tape.leaky_relu(z1, self.cfg.activation_slope);
        let w2 = tape.param(&self.store, dae.fc2_w);
        let b2 = tape.param(&self.store, dae.fc2_b);
        let z2 = tape.matmul(a1, w2)?;
        tape.add_row_bias(z2, b2)
    }

    /// Record the joint loss for one batch. The batch carries all random
    /// draws, so the result is a deterministic function of the parameters.
    pub fn build_loss(&self, tape: &mut Tape, batch: &TrainBatch) -> Result<LossVars> {
        self.build_loss_with_fusion(tape, batch, FusionSource::VariantDefault)
    }

    /// Diagnostic entry allowing the full variant's fusion term to be
    /// swapped for the raw social embedding (the -D wiring).
    pub fn build_loss_with_fusion(
        &self,
        tape: &mut Tape,
        batch: &TrainBatch,
        fusion: FusionSource,
    ) -> Result<LossVars> {
        if batch.is_empty() {
            return Err(Error::Config("empty training batch".into()));
        }
        if batch.pos_items.len() != batch.len() || batch.neg_items.len() != batch.len() {
            return Err(Error::Shape {
                op: "build_loss",
                detail: "triplet arrays must share one length".into(),
            });
        }
        let e_r = self.encode_r(tape)?;
        let e_u_r = tape.gather_rows(e_r, &batch.users)?;
        let pos_idx: Vec<usize> = batch.pos_items.iter().map(|&v| self.num_users + v).collect();
        let neg_idx: Vec<usize> = batch.neg_items.iter().map(|&v| self.num_users + v).collect();
        let e_pos = tape.gather_rows(e_r, &pos_idx)?;
        let e_neg = tape.gather_rows(e_r, &neg_idx)?;

        let mut diffusion_term: Option<Var> = None;
        let social_term: Option<Var> = match self.cfg.variant {
            Variant::NoSocial => None,
            Variant::NoDiffusion => {
                let e_s = self.encode_s(tape)?;
                Some(tape.gather_rows(e_s, &batch.users)?)
            }
            Variant::Dae => {
                let e_s = self.encode_s(tape)?;
                let e_u_s = tape.gather_rows(e_s, &batch.users)?;
                let mask = batch
                    .dae_mask
                    .as_ref()
                    .ok_or_else(|| Error::Config("dae variant needs a mask in the batch".into()))?;
                let mask_var = tape.constant(mask.clone());
                let masked = tape.mul(e_u_s, mask_var)?;
                let recon = self.dae_forward(tape, masked)?;
                let diff = tape.sub(recon, e_u_s)?;
                let sq = tape.row_sq_norm(diff);
                diffusion_term = Some(tape.mean(sq));
                Some(recon)
            }
            Variant::Full => {
                let sched = self.schedule.as_ref().expect("full variant has a schedule");
                let net = self.denoiser.as_ref().expect("full variant has a denoiser");
                let e_s = self.encode_s(tape)?;
                let e_u_s = tape.gather_rows(e_s, &batch.users)?;
                let et = forward_closed_form(tape, e_u_s, &batch.t, &batch.noise, sched)?;
                let e0_hat = net.predict_e0(tape, &self.store, et, &batch.t, sched)?;
                diffusion_term = Some(diffusion_loss_mixed(
                    tape,
                    e_u_s,
                    e0_hat,
                    &batch.t,
                    sched,
                    self.cfg.loss_mode,
                )?);
                match fusion {
                    FusionSource::RawSocial => Some(e_u_s),
                    FusionSource::VariantDefault => {
                        if self.cfg.reuse_fusion_step {
                            Some(e0_hat)
                        } else {
                            let et2 = forward_closed_form(
                                tape,
                                e_u_s,
                                &batch.fusion_t,
                                &batch.fusion_noise,
                                sched,
                            )?;
                            Some(net.predict_e0(
                                tape,
                                &self.store,
                                et2,
                                &batch.fusion_t,
                                sched,
                            )?)
                        }
                    }
                }
            }
        };

        let fused = match social_term {
            Some(s) => tape.add(e_u_r, s)?,
            None => e_u_r,
        };
        let pos_prod = tape.mul(fused, e_pos)?;
        let pos_scores = tape.row_sum(pos_prod);
        let neg_prod = tape.mul(fused, e_neg)?;
        let neg_scores = tape.row_sum(neg_prod);
        let margin = tape.sub(pos_scores, neg_scores)?;
        let neg_margin = tape.scale(margin, -1.0);
        let per_pair = tape.softplus(neg_margin);
        let bpr = tape.mean(per_pair);

        let total = match diffusion_term {
            Some(dl) if self.cfg.lambda1 != 0.0 => {
                let weighted = tape.scale(dl, self.cfg.lambda1);
                tape.add(bpr, weighted)?
            }
            _ => bpr,
        };
        Ok(LossVars { total, bpr, diffusion: diffusion_term })
    }

    /// Forward + backward for one batch: fills the store's gradient
    /// buffers (after zeroing) and returns the scalar loss parts.
    pub fn loss_and_grads(&mut self, batch: &TrainBatch) -> Result<LossParts> {
        let mut tape = Tape::new();
        let vars = self.build_loss(&mut tape, batch)?;
        tape.backward(vars.total)?;
        self.store.zero_grads();
        tape.accumulate_param_grads(&mut self.store);
        Ok(LossParts {
            total: tape.scalar(vars.total),
            bpr: tape.scalar(vars.bpr),
            diffusion: vars.diffusion.map(|v| tape.scalar(v)).unwrap_or(0.0),
        })
    }

    /// Evaluation-time embeddings: fused user vectors (full reverse-pass
    /// denoising for the full variant) and interaction-side item vectors.
    pub fn eval_embeddings(&self) -> Result<EvalEmbeddings> {
        let mut tape = Tape::new();
        let e_r = self.encode_r(&mut tape)?;
        let e_r_val = tape.value(e_r).clone();
        let user_base = e_r_val.slice(s![..self.num_users, ..]).to_owned();
        let item_vecs = e_r_val.slice(s![self.num_users.., ..]).to_owned();

        let social = match self.cfg.variant {
            Variant::NoSocial => None,
            Variant::NoDiffusion => {
                let e_s = self.encode_s(&mut tape)?;
                Some(tape.value(e_s).clone())
            }
            Variant::Dae => {
                let e_s = self.encode_s(&mut tape)?;
                let recon = self.dae_forward(&mut tape, e_s)?;
                Some(tape.value(recon).clone())
            }
            Variant::Full => {
                let e_s = self.encode_s(&mut tape)?;
                let e_s_val = tape.value(e_s).clone();
                Some(self.denoise_all_users(&e_s_val)?)
            }
        };
        drop(tape);

        let user_vecs = match social {
            Some(s) => user_base + &s,
            None => user_base,
        };
        Ok(EvalEmbeddings { user_vecs, item_vecs })
    }

    /// Run the iterative reverse pass over every user row, chunked so the
    /// tape footprint stays bounded on large user sets.
    fn denoise_all_users(&self, e_s: &Array2<f64>) -> Result<Array2<f64>> {
        let sched = self.schedule.as_ref().expect("schedule");
        let net = self.denoiser.as_ref().expect("denoiser");
        let steps = self.cfg.effective_inference_steps();
        let mut out = Array2::zeros(e_s.raw_dim());
        let chunk = 8192;
        let mut rng = stream_rng(self.seed, "eval-stochastic");
        let mut row = 0;
        while row < e_s.nrows() {
            let hi = (row + chunk).min(e_s.nrows());
            let mut tape = Tape::new();
            let v = tape.constant(e_s.slice(s![row..hi, ..]).to_owned());
            let denoised = denoise_inference(
                &mut tape,
                &self.store,
                v,
                net,
                sched,
                steps,
                if self.cfg.stochastic_inference {
                    Some(&mut rng)
                } else {
                    None::<&mut ChaCha8Rng>
                },
            )?;
            out.slice_mut(s![row..hi, ..]).assign(tape.value(denoised));
            row = hi;
        }
        Ok(out)
    }

    /// Sample the per-row diffusion randomness for a batch of `users`.
    pub fn draw_batch_randomness(
        &self,
        users: &[usize],
        pos_items: Vec<usize>,
        neg_items: Vec<usize>,
        rng: &mut impl Rng,
    ) -> TrainBatch {
        let b = users.len();
        let (t, noise, fusion_t, fusion_noise) = if self.cfg.variant.uses_diffusion() {
            let t_max = self.cfg.t_max;
            let t: Vec<usize> = (0..b).map(|_| rng.random_range(1..=t_max)).collect();
            let noise = crate::diffusion::gaussian_like(b, self.cfg.d, rng);
            if self.cfg.reuse_fusion_step {
                (t, noise, Vec::new(), Array2::zeros((0, 0)))
            } else {
                let t2: Vec<usize> = (0..b).map(|_| rng.random_range(1..=t_max)).collect();
                let n2 = crate::diffusion::gaussian_like(b, self.cfg.d, rng);
                (t, noise, t2, n2)
            }
        } else {
            (Vec::new(), Array2::zeros((0, 0)), Vec::new(), Array2::zeros((0, 0)))
        };
        let dae_mask = if self.cfg.variant == Variant::Dae {
            let keep = 1.0 - self.cfg.dae_mask_rate;
            Some(Array2::from_shape_fn((b, self.cfg.d), |_| {
                if rng.random::<f64>() < keep {
                    1.0
                } else {
                    0.0
                }
            }))
        } else {
            None
        };
        TrainBatch {
            users: users.to_vec(),
            pos_items,
            neg_items,
            t,
            noise,
            fusion_t,
            fusion_noise,
            dae_mask,
        }
    }
}

/// Dense evaluation-ready embeddings.
pub struct EvalEmbeddings {
    pub user_vecs: Array2<f64>,
    pub item_vecs: Array2<f64>,
}

impl EvalEmbeddings {
    /// Scores of every item for one user.
    pub fn user_scores(&self, user: usize) -> Array1<f64> {
        self.item_vecs.dot(&self.user_vecs.row(user))
    }
}
