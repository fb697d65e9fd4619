//! Command-line pipeline driver: train, eval, robustness, sweep, synth.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data error,
//! 3 training divergence.

mod options;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;

use recdiff::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use recdiff::data::{generate_synthetic, write_edge_lists, SyntheticSpec};
use recdiff::error::{Error, Result};
use recdiff::model::{RecDiffModel, Variant};
use recdiff::report::{epoch_log_header, epoch_log_row, fmt6, format_table, metrics_rows, write_records};
use recdiff::sweep::{robustness_experiment, run_once, sweep, SweepGrid};
use recdiff::train::evaluate_model;

use options::{load_bundle_from, CommonArgs, RunOptions};

#[derive(Parser)]
#[command(
    name = "recdiff",
    about = "Social recommendation with hidden-space diffusion denoising",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint plus per-epoch reports.
    Train(TrainArgs),
    /// Evaluate a saved checkpoint.
    Eval(EvalArgs),
    /// Fake-edge robustness experiment over variants and noise ratios.
    Robustness(RobustnessArgs),
    /// Hyperparameter sweep over a config grid.
    Sweep(SweepArgs),
    /// Generate a planted-community synthetic dataset.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint produced by `recdiff train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory (interactions.txt / social.txt).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    interactions: Option<PathBuf>,
    #[arg(long)]
    social: Option<PathBuf>,
    /// Cutoffs, e.g. 10,20,40.
    #[arg(long = "N", value_delimiter = ',')]
    ns: Option<Vec<usize>>,
    /// Rank validation items too instead of masking them.
    #[arg(long)]
    include_valid: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RobustnessArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Noise ratios, e.g. 0,0.2,0.5.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    ratios: Option<Vec<f64>>,
    /// Variants to compare, e.g. full,-D.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    variants: Option<Vec<String>>,
    /// Number of seeds (seed, seed+1, ...).
    #[arg(long, default_value_t = 3)]
    seeds: usize,
    /// Run cells sequentially instead of in parallel.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Grid over embedding width, e.g. 32,64.
    #[arg(long = "grid-d", value_delimiter = ',')]
    grid_d: Option<Vec<usize>>,
    /// Grid over diffusion steps, e.g. 20,50,100.
    #[arg(long = "grid-T", value_delimiter = ',')]
    grid_t: Option<Vec<usize>>,
    /// Grid over the noise-scale factor, e.g. 1,0.1,0.01,0.001.
    #[arg(long = "grid-tau", value_delimiter = ',')]
    grid_tau: Option<Vec<f64>>,
    /// Grid over time-embedding width.
    #[arg(long = "grid-d-time", value_delimiter = ',')]
    grid_d_time: Option<Vec<usize>>,
    /// Grid over learning rate.
    #[arg(long = "grid-lr", value_delimiter = ',')]
    grid_lr: Option<Vec<f64>>,
    /// Grid over the diffusion-loss weight.
    #[arg(long = "grid-lambda1", value_delimiter = ',')]
    grid_lambda1: Option<Vec<f64>>,
    /// Run cells sequentially instead of in parallel.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    users: usize,
    #[arg(long, default_value_t = 400)]
    items: usize,
    /// Number of planted communities.
    #[arg(long = "K", default_value_t = 4)]
    communities: usize,
    #[arg(long = "intra-p", default_value_t = 0.1)]
    intra_p: f64,
    #[arg(long = "inter-p", default_value_t = 0.005)]
    inter_p: f64,
    #[arg(long = "items-per-community", default_value_t = 80)]
    items_per_community: usize,
    #[arg(long = "pool-interactions", default_value_t = 5)]
    pool_interactions: usize,
    #[arg(long = "noise-interactions", default_value_t = 1)]
    noise_interactions: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for interactions.txt and social.txt.
    #[arg(long)]
    out: PathBuf,
}

fn ensure_out(dir: &Option<PathBuf>) -> Result<Option<PathBuf>> {
    if let Some(d) = dir {
        std::fs::create_dir_all(d)?;
        Ok(Some(d.clone()))
    } else {
        Ok(None)
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let opts = RunOptions::resolve(&args.common)?;
    let bundle = opts.load_bundle()?;
    let out_dir = ensure_out(&opts.out)?;
    println!("# resolved configuration\n{}", opts.to_text());

    let run = run_once(&bundle, &opts.model, &opts.split_spec(), &opts.settings(), !opts.include_valid)?;
    let ns = &opts.settings().eval_ns;

    let header = epoch_log_header(ns);
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let rows: Vec<Vec<String>> =
        run.outcome.records.iter().map(|r| epoch_log_row(r, ns)).collect();
    let final_rows = metrics_rows(opts.model.variant.label(), &run.test);

    println!(
        "{}",
        format_table(&["variant", "N", "recall", "ndcg"], &final_rows)
    );
    println!(
        "best epoch {} | mean epoch time {:.3}s | users evaluated {} | config {}",
        run.outcome.best_epoch,
        run.outcome.mean_epoch_time_s,
        run.users_evaluated,
        run.config_hash
    );

    if let Some(dir) = out_dir {
        write_records(&dir.join("train_log.tsv"), &header_refs, &rows)?;
        let mut final_recs = vec![];
        for r in &final_rows {
            final_recs.push(r.clone());
        }
        write_records(&dir.join("report.tsv"), &["variant", "N", "recall", "ndcg"], &final_recs)?;
        std::fs::write(dir.join("config.txt"), opts.to_text())?;
        let rng = rand_chacha::ChaCha8Rng::seed_from_u64(opts.seed);
        let ckpt = Checkpoint::from_model(
            &run.model,
            run.outcome.best_epoch as u64,
            None,
            &rng,
        );
        let mut stored = ckpt;
        stored.config_text = opts.to_text();
        save_checkpoint(&dir.join("model.ckpt"), &stored)?;
        println!("artifacts written to {}", dir.display());
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let opts = RunOptions::from_text(&ckpt.config_text)?;
    let bundle = load_bundle_from(
        args.data.as_deref(),
        args.interactions.as_deref(),
        args.social.as_deref(),
        opts.model.variant == Variant::NoSocial,
    )?;
    let split = recdiff::train::split(&bundle.interactions, &opts.split_spec())?;
    let mut model = RecDiffModel::new(
        opts.model.clone(),
        &split.train,
        Some(&bundle.social),
        opts.seed,
    )?;
    ckpt.apply_to(&mut model, None)?;

    let ns = args.ns.unwrap_or_else(|| vec![10, 20, 40]);
    let masks = split.test_masks(!args.include_valid);
    let (metrics, users) = evaluate_model(&model, &split.test_items, &masks, &ns)?;
    let rows = metrics_rows(opts.model.variant.label(), &metrics);
    println!("{}", format_table(&["variant", "N", "recall", "ndcg"], &rows));
    println!("epoch {} | users evaluated {users}", ckpt.epoch);
    if let Some(dir) = ensure_out(&args.out)? {
        write_records(&dir.join("report.tsv"), &["variant", "N", "recall", "ndcg"], &rows)?;
    }
    Ok(())
}

fn cmd_robustness(args: RobustnessArgs) -> Result<()> {
    let opts = RunOptions::resolve(&args.common)?;
    let bundle = opts.load_bundle()?;
    let out_dir = ensure_out(&opts.out)?;
    let ratios = args.ratios.unwrap_or_else(|| vec![0.0, 0.2, 0.5]);
    let variant_names = args
        .variants
        .unwrap_or_else(|| vec!["full".to_string(), "-D".to_string()]);
    let variants: Result<Vec<Variant>> =
        variant_names.iter().map(|s| Variant::parse(s)).collect();
    let variants = variants?;
    let seeds: Vec<u64> = (0..args.seeds as u64).map(|k| opts.seed + k).collect();
    println!("# resolved configuration\n{}", opts.to_text());

    let cells = robustness_experiment(
        &bundle,
        &variants,
        &ratios,
        &opts.model,
        &opts.split_spec(),
        &opts.settings(),
        &seeds,
        !args.sequential,
    )?;

    let header = ["variant", "ratio", "recall@20", "ndcg@20", "rel_ndcg_drop"];
    let rows: Vec<Vec<String>> = cells
        .iter()
        .map(|c| {
            vec![
                c.variant.label().to_string(),
                format!("{}", c.ratio),
                fmt6(c.median_recall20),
                fmt6(c.median_ndcg20),
                fmt6(c.rel_ndcg_drop),
            ]
        })
        .collect();
    println!("{}", format_table(&header, &rows));
    if let Some(dir) = out_dir {
        write_records(&dir.join("robustness.tsv"), &header, &rows)?;
        std::fs::write(dir.join("config.txt"), opts.to_text())?;
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let opts = RunOptions::resolve(&args.common)?;
    let bundle = opts.load_bundle()?;
    let out_dir = ensure_out(&opts.out)?;
    let grid = SweepGrid {
        d: args.grid_d.unwrap_or_default(),
        t_max: args.grid_t.unwrap_or_default(),
        tau: args.grid_tau.unwrap_or_default(),
        d_time: args.grid_d_time.unwrap_or_default(),
        lr: args.grid_lr.unwrap_or_default(),
        lambda1: args.grid_lambda1.unwrap_or_default(),
    };
    println!("# resolved configuration\n{}", opts.to_text());

    let rows_data = sweep(
        &bundle,
        &opts.model,
        &grid,
        &opts.split_spec(),
        &opts.settings(),
        !args.sequential,
    )?;
    let header = ["cell", "recall@20", "ndcg@20", "best_epoch", "config"];
    let rows: Vec<Vec<String>> = rows_data
        .iter()
        .map(|r| {
            vec![
                r.label.clone(),
                fmt6(r.test.recall(20)),
                fmt6(r.test.ndcg(20)),
                r.best_epoch.to_string(),
                r.config_hash.clone(),
            ]
        })
        .collect();
    println!("{}", format_table(&header, &rows));
    if let Some(dir) = out_dir {
        write_records(&dir.join("sweep.tsv"), &header, &rows)?;
        std::fs::write(dir.join("config.txt"), opts.to_text())?;
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        num_users: args.users,
        num_items: args.items,
        communities: args.communities,
        intra_p: args.intra_p,
        inter_p: args.inter_p,
        items_per_community: args.items_per_community,
        pool_interactions: args.pool_interactions,
        noise_interactions: args.noise_interactions,
        seed: args.seed,
    };
    let bundle = generate_synthetic(&spec)?;
    write_edge_lists(&bundle, &args.out)?;
    println!(
        "wrote {} users, {} items, {} interactions, {} social edges to {}",
        bundle.interactions.num_users,
        bundle.interactions.num_items,
        bundle.interactions.num_interactions(),
        bundle.social.num_edges(),
        args.out.display()
    );
    Ok(())
}

fn dataset_dir_exists(p: &Path) -> bool {
    p.is_dir()
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Robustness(a) => cmd_robustness(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

const _: fn(&Path) -> bool = dataset_dir_exists;
