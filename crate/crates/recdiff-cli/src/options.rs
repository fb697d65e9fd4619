//! Run-configuration resolution: defaults, then an optional flat
//! key=value config file, then command-line flags (flags win). The fully
//! resolved configuration is echoed into every report.

use std::path::{Path, PathBuf};

use clap::Args;

use recdiff::data::{load_edge_lists, DatasetBundle};
use recdiff::error::{Error, Result};
use recdiff::graph::SocialMatrix;
use recdiff::model::{ModelConfig, Variant};
use recdiff::train::{SplitSpec, TrainSettings};

#[derive(Args, Clone)]
pub struct CommonArgs {
    /// Dataset directory containing interactions.txt and social.txt.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Explicit interactions edge-list path (overrides --data).
    #[arg(long)]
    pub interactions: Option<PathBuf>,
    /// Explicit social edge-list path (overrides --data).
    #[arg(long)]
    pub social: Option<PathBuf>,
    /// Flat key=value config file; flags override file entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for reports and checkpoints.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master seed for init, split, and training streams.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Separate split seed (defaults to the master seed).
    #[arg(long = "split-seed")]
    pub split_seed: Option<u64>,

    /// Model variant: full, -D, -S, or dae.
    #[arg(long, allow_hyphen_values = true)]
    pub variant: Option<String>,
    /// Embedding width d.
    #[arg(long)]
    pub d: Option<usize>,
    /// Time-step embedding width d'.
    #[arg(long = "d-time")]
    pub d_time: Option<usize>,
    /// GCN layers L.
    #[arg(long)]
    pub layers: Option<usize>,
    /// Diffusion steps T.
    #[arg(long = "T")]
    pub t_max: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long = "batch-size")]
    pub batch_size: Option<usize>,
    /// Diffusion-loss weight.
    #[arg(long)]
    pub lambda1: Option<f64>,
    /// Weight decay.
    #[arg(long)]
    pub lambda2: Option<f64>,
    /// Noise-scale factor multiplying the schedule endpoints.
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long = "s-max")]
    pub s_max: Option<f64>,
    #[arg(long = "s-min")]
    pub s_min: Option<f64>,
    /// Reverse steps at inference (0 = T).
    #[arg(long = "inference-steps")]
    pub inference_steps: Option<usize>,
    /// Diffusion loss form: elbo or recon-only.
    #[arg(long = "loss")]
    pub loss_mode: Option<String>,
    /// Enable the per-layer transform in the encoders.
    #[arg(long = "weight-transform")]
    pub weight_transform: bool,
    /// Share the interaction table's user rows as social layer-0.
    #[arg(long = "share-social-base")]
    pub share_social_base: bool,
    /// Use the fixed sinusoidal time table.
    #[arg(long = "sinusoidal-time")]
    pub sinusoidal_time: bool,
    /// Denoiser hidden width (0 = d).
    #[arg(long)]
    pub hidden: Option<usize>,
    /// DAE coordinate mask rate.
    #[arg(long = "dae-mask-rate")]
    pub dae_mask_rate: Option<f64>,
    /// Re-inject posterior noise during inference.
    #[arg(long = "stochastic-inference")]
    pub stochastic_inference: bool,

    /// Maximum training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Early-stopping patience (epochs).
    #[arg(long)]
    pub patience: Option<usize>,
    /// Validate every this many epochs.
    #[arg(long = "eval-every")]
    pub eval_every: Option<usize>,
    /// Metric cutoffs, e.g. 10,20,40.
    #[arg(long = "N", value_delimiter = ',')]
    pub ns: Option<Vec<usize>>,
    /// Rank validation items at test time instead of masking them.
    #[arg(long = "include-valid")]
    pub include_valid: bool,
    /// Log per-epoch progress to stderr.
    #[arg(long)]
    pub log: bool,
}

/// Fully resolved run options.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub model: ModelConfig,
    pub seed: u64,
    pub split_seed: u64,
    pub epochs: usize,
    pub patience: usize,
    pub eval_every: usize,
    pub eval_ns: Vec<usize>,
    pub include_valid: bool,
    pub log: bool,
    pub out: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub interactions: Option<PathBuf>,
    pub social: Option<PathBuf>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            seed: 0,
            split_seed: 0,
            epochs: 100,
            patience: 20,
            eval_every: 1,
            eval_ns: vec![10, 20, 40],
            include_valid: false,
            log: false,
            out: None,
            data_dir: None,
            interactions: None,
            social: None,
        }
    }
}

impl RunOptions {
    /// Apply one key=value pair; model keys are tried first, then the
    /// run-level keys.
    fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        let model_try = self.model.set_key(key, value);
        if model_try.is_ok() {
            return Ok(());
        }
        let parse_u64 =
            |v: &str| v.parse::<u64>().map_err(|_| Error::Config(format!("bad value for {key}")));
        let parse_usize = |v: &str| {
            v.parse::<usize>().map_err(|_| Error::Config(format!("bad value for {key}")))
        };
        match key {
            "seed" => self.seed = parse_u64(value)?,
            "split_seed" => self.split_seed = parse_u64(value)?,
            "epochs" => self.epochs = parse_usize(value)?,
            "patience" => self.patience = parse_usize(value)?,
            "eval_every" => self.eval_every = parse_usize(value)?,
            "include_valid" => {
                self.include_valid = value
                    .parse::<bool>()
                    .map_err(|_| Error::Config(format!("bad value for {key}")))?
            }
            "eval_ns" => {
                let ns: std::result::Result<Vec<usize>, _> =
                    value.split(',').map(|t| t.trim().parse::<usize>()).collect();
                self.eval_ns =
                    ns.map_err(|_| Error::Config(format!("bad cutoff list '{value}'")))?;
            }
            "dataset" => {} // informational; recorded but not interpreted
            _ => return model_try,
        }
        Ok(())
    }

    /// Resolve defaults <- config file <- flags.
    pub fn resolve(args: &CommonArgs) -> Result<Self> {
        let mut o = RunOptions::default();
        if let Some(path) = &args.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    Error::Config(format!(
                        "{}:{}: expected key=value, got '{line}'",
                        path.display(),
                        lineno + 1
                    ))
                })?;
                o.set_key(k.trim(), v.trim())?;
            }
        }

        if let Some(v) = &args.variant {
            o.model.variant = Variant::parse(v)?;
        }
        macro_rules! take {
            ($field:ident, $target:expr) => {
                if let Some(v) = args.$field {
                    $target = v;
                }
            };
        }
        take!(d, o.model.d);
        take!(d_time, o.model.d_time);
        take!(layers, o.model.layers);
        take!(t_max, o.model.t_max);
        take!(lr, o.model.lr);
        take!(batch_size, o.model.batch_size);
        take!(lambda1, o.model.lambda1);
        take!(lambda2, o.model.lambda2);
        take!(tau, o.model.tau);
        take!(s_max, o.model.s_max);
        take!(s_min, o.model.s_min);
        take!(inference_steps, o.model.inference_steps);
        take!(hidden, o.model.hidden);
        take!(dae_mask_rate, o.model.dae_mask_rate);
        if let Some(m) = &args.loss_mode {
            o.model.set_key("loss_mode", m)?;
        }
        if args.weight_transform {
            o.model.use_weight_transform = true;
        }
        if args.share_social_base {
            o.model.share_social_base = true;
        }
        if args.sinusoidal_time {
            o.model.sinusoidal_time = true;
        }
        if args.stochastic_inference {
            o.model.stochastic_inference = true;
        }

        if let Some(v) = args.seed {
            o.seed = v;
            o.split_seed = v;
        }
        take!(split_seed, o.split_seed);
        take!(epochs, o.epochs);
        take!(patience, o.patience);
        take!(eval_every, o.eval_every);
        if let Some(ns) = &args.ns {
            o.eval_ns = ns.clone();
        }
        if args.include_valid {
            o.include_valid = true;
        }
        if args.log {
            o.log = true;
        }
        o.out = args.out.clone();
        o.data_dir = args.data.clone();
        o.interactions = args.interactions.clone();
        o.social = args.social.clone();

        o.model.validate()?;
        if o.eval_ns.is_empty() {
            return Err(Error::Config("need at least one metric cutoff".into()));
        }
        Ok(o)
    }

    /// Parse options back from the text stored in a checkpoint.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut o = RunOptions::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("bad stored config line {}: {line}", lineno + 1))
            })?;
            o.set_key(k.trim(), v.trim())?;
        }
        o.model.validate()?;
        Ok(o)
    }

    /// Canonical echo of the resolved run configuration.
    pub fn to_text(&self) -> String {
        let mut out = self.model.canonical_text();
        out.push_str(&format!("epochs={}\n", self.epochs));
        out.push_str(&format!("eval_every={}\n", self.eval_every));
        out.push_str(&format!(
            "eval_ns={}\n",
            self.eval_ns.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(",")
        ));
        out.push_str(&format!("include_valid={}\n", self.include_valid));
        out.push_str(&format!("patience={}\n", self.patience));
        out.push_str(&format!("seed={}\n", self.seed));
        out.push_str(&format!("split_seed={}\n", self.split_seed));
        out
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec { seed: self.split_seed, ..Default::default() }
    }

    pub fn settings(&self) -> TrainSettings {
        TrainSettings {
            epochs: self.epochs,
            patience: self.patience,
            eval_every: self.eval_every,
            eval_ns: self.eval_ns.clone(),
            primary_n: 20,
            seed: self.seed,
            log: self.log,
        }
    }

    pub fn load_bundle(&self) -> Result<DatasetBundle> {
        load_bundle_from(
            self.data_dir.as_deref(),
            self.interactions.as_deref(),
            self.social.as_deref(),
            self.model.variant == Variant::NoSocial,
        )
    }
}

/// Resolve dataset paths and load. When the variant needs no social data
/// a missing social file degrades to an empty social matrix.
pub fn load_bundle_from(
    data_dir: Option<&Path>,
    interactions: Option<&Path>,
    social: Option<&Path>,
    social_optional: bool,
) -> Result<DatasetBundle> {
    let inter_path = match (interactions, data_dir) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(d)) => d.join("interactions.txt"),
        (None, None) => {
            return Err(Error::Config(
                "no dataset given: pass --data DIR or --interactions FILE".into(),
            ))
        }
    };
    let social_path = match (social, data_dir) {
        (Some(p), _) => Some(p.to_path_buf()),
        (None, Some(d)) => {
            let p = d.join("social.txt");
            p.is_file().then_some(p)
        }
        (None, None) => None,
    };
    match social_path {
        Some(sp) => load_edge_lists(&inter_path, &sp),
        None if social_optional => {
            // interactions only; synthesize an empty social matrix
            let text = std::fs::read_to_string(&inter_path)
                .map_err(|e| Error::Data(format!("cannot read {}: {e}", inter_path.display())))?;
            let mut users = std::collections::BTreeSet::new();
            let mut items = std::collections::BTreeSet::new();
            let mut pairs_raw = Vec::new();
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let mut it = line.split_whitespace();
                let a: u64 = it
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| Error::Data(format!("{}:{}: malformed line", inter_path.display(), lineno + 1)))?;
                let b: u64 = it
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| Error::Data(format!("{}:{}: malformed line", inter_path.display(), lineno + 1)))?;
                users.insert(a);
                items.insert(b);
                pairs_raw.push((a, b));
            }
            if pairs_raw.is_empty() {
                return Err(Error::Data(format!("{}: no edges found", inter_path.display())));
            }
            let user_map: Vec<u64> = users.into_iter().collect();
            let item_map: Vec<u64> = items.into_iter().collect();
            let pairs: Vec<(usize, usize)> = pairs_raw
                .iter()
                .map(|&(u, v)| {
                    (
                        user_map.binary_search(&u).unwrap(),
                        item_map.binary_search(&v).unwrap(),
                    )
                })
                .collect();
            let interactions = recdiff::graph::InteractionMatrix::from_pairs(
                user_map.len(),
                item_map.len(),
                pairs,
            )?;
            let social = SocialMatrix::from_edges(user_map.len(), [])?;
            Ok(DatasetBundle {
                name: inter_path
                    .parent()
                    .and_then(|p| p.file_name())
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "dataset".into()),
                interactions,
                social,
                provenance: format!("interactions={} social=(none)", inter_path.display()),
                user_map,
                item_map,
            })
        }
        None => Err(Error::Data(
            "social edge list not found; pass --social FILE or use --variant -S".into(),
        )),
    }
}
