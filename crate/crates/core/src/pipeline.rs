//! End-to-end orchestration: load or synthesize a cube, pretrain an encoder,
//! evaluate it under one of the downstream protocols, and the command-line
//! front end.

use std::fs;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::seq::SliceRandom;

use crate::autodiff::ParamStore;
use crate::config::TrainConfig;
use crate::data::{
    extract_patch, read_cube, read_gt, sample_view_centers, split_centers, HsiCube, PairCenters, Patch, SplitCenters,
    SupportSet, ViewPair,
};
use crate::downstream::{
    argmax_rows, fine_tune, predict_with_head, train_linear_probe, train_supervised, EvalMode, EvalReport,
};
use crate::encoder::{build_encoder, patches_to_batch, Encoder};
use crate::error::{Error, Result};
use crate::optim::OptimizerState;
use crate::paws::{pretrain_step, snn_predict};
use crate::rng::{derive_seed, rng_from_seed};

/// Sub-streams of the run seed.
mod stream {
    pub const INIT: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const PAIRS: u64 = 3;
    pub const EPOCH: u64 = 4;
    pub const STEP: u64 = 5;
    pub const DOWNSTREAM: u64 = 6;
}

/// Test patches are extracted and classified this many at a time.
const EVAL_CHUNK: usize = 512;

/// Reads a cube and, if given, its ground truth; optionally min-max scales
/// every band.
pub fn load_cube(cube_path: &Path, gt_path: Option<&Path>, normalize: bool) -> Result<HsiCube> {
    let mut cube = read_cube(cube_path)?;
    if let Some(gt) = gt_path {
        cube = cube.with_ground_truth(read_gt(gt)?)?;
    }
    if normalize {
        cube.normalize_bands();
    }
    Ok(cube)
}

/// The support/test split used by both pretraining and evaluation, so the
/// same seed always yields the same labelled pixels.
pub fn run_split(cube: &HsiCube, cfg: &TrainConfig, seed: u64) -> Result<SplitCenters> {
    split_centers(cube, cfg.data.support_per_class, derive_seed(seed, stream::SPLIT))
}

fn extract_all(cube: &HsiCube, centers: &[((usize, usize), u16)], p: usize) -> Result<Vec<Patch>> {
    centers.iter().map(|&(c, _)| extract_patch(cube, c, p)).collect()
}

pub fn support_set(cube: &HsiCube, split: &SplitCenters, p: usize) -> Result<SupportSet> {
    SupportSet::new(extract_all(cube, &split.support, p)?, split.class_count)
}

/// Encoder parameters after pretraining, plus the per-epoch mean loss.
#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub params: ParamStore,
    pub epoch_losses: Vec<f64>,
}

/// Draws `per_class` support patches of every class without replacement.
fn draw_support(support: &SupportSet, per_class: usize, seed: u64) -> Result<SupportSet> {
    let mut rng = rng_from_seed(seed);
    let by_class = support.class_indices();
    let mut picked = Vec::with_capacity(per_class * support.class_count);
    for c in 0..support.class_count {
        let mut members: Vec<usize> = by_class
            .iter()
            .enumerate()
            .filter(|&(_, &k)| k == c)
            .map(|(i, _)| i)
            .collect();
        let n = per_class.min(members.len());
        let (chosen, _) = members.partial_shuffle(&mut rng, n);
        chosen.sort_unstable();
        picked.extend(chosen.iter().map(|&i| support.patches[i].clone()));
    }
    SupportSet::new(picked, support.class_count)
}

fn extract_pairs(cube: &HsiCube, centers: &[PairCenters], p: usize) -> Result<Vec<ViewPair>> {
    centers
        .iter()
        .map(|c| {
            Ok(ViewPair {
                anchor: extract_patch(cube, c.anchor, p)?,
                positive: extract_patch(cube, c.positive, p)?,
                overlap_fraction: c.overlap_fraction(p),
            })
        })
        .collect()
}

pub fn init_params(encoder: &Encoder, seed: u64) -> Result<ParamStore> {
    build_encoder(encoder.config(), derive_seed(seed, stream::INIT))
}

/// Pretrains an encoder on `cube` with the consistency objective. Every
/// epoch visits the pair pool in a fresh order, `pairs_per_batch` pairs per
/// step, each step with a new class-balanced support draw.
pub fn pretrain(cube: &HsiCube, cfg: &TrainConfig, seed: u64) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let p = cfg.data.patch_size;
    let hyper = cfg.paws();
    let policy = cfg.augment_policy();
    policy.validate_for(p, cube.bands)?;
    let encoder = Encoder::new(cfg.encoder_config(cube.bands))?;
    let mut params = init_params(&encoder, seed)?;
    let split = run_split(cube, cfg, seed)?;
    let support = support_set(cube, &split, p)?;
    let draw = cfg.data.support_draw_per_class.min(cfg.data.support_per_class);
    let pool = sample_view_centers(cube.rows, cube.cols, p, cfg.data.unlabeled_count, derive_seed(seed, stream::PAIRS))?;
    let mut optimizer = OptimizerState::new(cfg.pretrain_optimizer(), &params)?;
    let n = hyper.pairs_per_batch;
    let steps_per_epoch = pool.len().div_ceil(n);
    info!(
        "pretraining: {} pairs, {steps_per_epoch} steps/epoch, {} epochs, support {}x{draw} per step",
        pool.len(),
        cfg.paws.epochs,
        support.class_count
    );
    let mut epoch_losses = Vec::with_capacity(cfg.paws.epochs);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut step = 0u64;
    for epoch in 0..cfg.paws.epochs {
        order.shuffle(&mut rng_from_seed(derive_seed(derive_seed(seed, stream::EPOCH), epoch as u64)));
        let mut total = 0.0;
        for batch in order.chunks(n) {
            let centers: Vec<PairCenters> = batch.iter().map(|&i| pool[i]).collect();
            let pairs = extract_pairs(cube, &centers, p)?;
            let step_seed = derive_seed(derive_seed(seed, stream::STEP), step);
            let drawn = draw_support(&support, draw, derive_seed(step_seed, 0))?;
            let loss = pretrain_step(
                &encoder,
                &mut params,
                &pairs,
                &drawn,
                &policy,
                &hyper,
                &mut optimizer,
                derive_seed(step_seed, 1),
            )?;
            debug!("epoch {} step {step}: loss {loss:.6}", epoch + 1);
            total += loss;
            step += 1;
        }
        let mean = total / steps_per_epoch as f64;
        if !mean.is_finite() {
            return Err(Error::Numeric(format!("epoch {} mean loss is {mean}", epoch + 1)));
        }
        info!("epoch {}/{}: mean loss {mean:.6}", epoch + 1, cfg.paws.epochs);
        epoch_losses.push(mean);
    }
    Ok(PretrainOutcome { params, epoch_losses })
}

/// Supplies 0-based predictions for a chunk of test patches.
fn classify_test(
    cube: &HsiCube,
    test: &[((usize, usize), u16)],
    p: usize,
    mut classify: impl FnMut(&[Patch]) -> Result<Vec<usize>>,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut predicted = Vec::with_capacity(test.len());
    let mut truth = Vec::with_capacity(test.len());
    for chunk in test.chunks(EVAL_CHUNK) {
        let patches = extract_all(cube, chunk, p)?;
        predicted.extend(classify(&patches)?);
        truth.extend(chunk.iter().map(|&(_, l)| l as usize - 1));
    }
    Ok((predicted, truth))
}

/// Evaluates encoder `params` on the run's test split. `linear`, `finetune`
/// and `supervised` train on the support patches first; `supervised`
/// ignores `params` and starts from a fresh encoder.
pub fn evaluate(
    cube: &HsiCube,
    cfg: &TrainConfig,
    params: &ParamStore,
    mode: EvalMode,
    seed: u64,
) -> Result<EvalReport> {
    cfg.validate()?;
    let p = cfg.data.patch_size;
    let encoder = Encoder::new(cfg.encoder_config(cube.bands))?;
    encoder.check_params(params)?;
    let split = run_split(cube, cfg, seed)?;
    if split.test.is_empty() {
        return Err(Error::Data("no labelled pixels left for testing".into()));
    }
    let support = support_set(cube, &split, p)?;
    let k = split.class_count;
    let down = cfg.downstream();
    let down_seed = derive_seed(seed, stream::DOWNSTREAM);
    let (predicted, truth) = match mode {
        EvalMode::Snn => {
            let support_z = encoder.encode_patches(params, &support.patches, EVAL_CHUNK)?;
            let tau = cfg.paws.tau;
            classify_test(cube, &split.test, p, |patches| {
                let z = encoder.encode(params, &patches_to_batch(patches)?)?;
                Ok(argmax_rows(&snn_predict(&z, &support_z, &support.labels, tau)?))
            })?
        }
        EvalMode::Linear => {
            let (head, train_report) = train_linear_probe(&encoder, params, &support.patches, k, &down, down_seed)?;
            info!("linear probe training accuracy {:.4}", train_report.overall_accuracy);
            classify_test(cube, &split.test, p, |patches| predict_with_head(&encoder, params, &head, patches))?
        }
        EvalMode::Finetune | EvalMode::Supervised => {
            let (model, train_report) = if mode == EvalMode::Finetune {
                fine_tune(&encoder, params, &support.patches, k, &down, down_seed)?
            } else {
                train_supervised(&encoder, &support.patches, k, &down, down_seed)?
            };
            info!("{mode} training accuracy {:.4}", train_report.overall_accuracy);
            classify_test(cube, &split.test, p, |patches| predict_with_head(&encoder, &model, &model, patches))?
        }
    };
    EvalReport::from_predictions(mode, &predicted, &truth, k, cfg.digest())
}

/// Writes the resolved configuration next to a run's outputs.
pub fn write_resolved_config(cfg: &TrainConfig, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("config.resolved.toml");
    fs::write(&path, cfg.resolved()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// One line per epoch: `epoch,mean_loss`.
pub fn write_loss_trace(losses: &[f64], path: &Path) -> Result<()> {
    let mut text = String::from("epoch,mean_loss\n");
    for (i, l) in losses.iter().enumerate() {
        text.push_str(&format!("{},{l}\n", i + 1));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, clap::Parser)]
#[command(name = "hsi-paws", version, about = "Semi-supervised pretraining for hyperspectral patch classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// Configuration file; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, clap::Subcommand)]
enum Command {
    /// Generate a synthetic labelled cube.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain an encoder and write its model file.
    Pretrain {
        #[arg(long)]
        cube: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a model under one of the downstream protocols.
    Evaluate {
        #[arg(long)]
        cube: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Model file; not needed for `supervised`.
        #[arg(long, required_if_eq_any = [("mode", "linear"), ("mode", "finetune"), ("mode", "snn")])]
        model: Option<PathBuf>,
        #[arg(long, value_parser = ["linear", "finetune", "snn", "supervised"])]
        mode: String,
        #[command(flatten)]
        common: Common,
    },
    /// Check analytic gradients against central differences.
    Gradcheck {
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn resolve(common: &Common) -> Result<(TrainConfig, u64)> {
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let seed = cfg.seed;
    Ok((cfg, seed))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common } => {
            let (cfg, _) = resolve(&common)?;
            let cube = crate::data::generate_synthetic(&cfg.synthetic_spec())?;
            fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
            crate::data::write_cube(&cube, common.out.join("cube.hsic"))?;
            crate::data::write_gt(&cube, common.out.join("gt.hsig"))?;
            write_resolved_config(&cfg, &common.out)?;
            info!("wrote {}x{}x{} cube to {}", cube.rows, cube.cols, cube.bands, common.out.display());
        }
        Command::Pretrain { cube, gt, common } => {
            let (cfg, seed) = resolve(&common)?;
            let cube = load_cube(&cube, Some(&gt), cfg.data.normalize)?;
            write_resolved_config(&cfg, &common.out)?;
            let outcome = pretrain(&cube, &cfg, seed)?;
            crate::encoder::write_model(&outcome.params, common.out.join("model.pawm"))?;
            write_loss_trace(&outcome.epoch_losses, &common.out.join("loss_trace.csv"))?;
            info!("wrote {}", common.out.join("model.pawm").display());
        }
        Command::Evaluate { cube, gt, model, mode, common } => {
            let (cfg, seed) = resolve(&common)?;
            let mode: EvalMode = mode.parse()?;
            let cube = load_cube(&cube, Some(&gt), cfg.data.normalize)?;
            let params = match model {
                Some(m) => crate::encoder::read_model(m)?,
                None => init_params(&Encoder::new(cfg.encoder_config(cube.bands))?, seed)?,
            };
            write_resolved_config(&cfg, &common.out)?;
            let report = evaluate(&cube, &cfg, &params, mode, seed)?;
            report.write(&common.out, &format!("report_{mode}"))?;
            println!("{mode} overall accuracy: {:.4}", report.overall_accuracy);
        }
        Command::Gradcheck { seed } => {
            let results = crate::checks::gradient_suite(seed.unwrap_or(0))?;
            let mut worst = 0.0f64;
            for r in &results {
                println!("{:<18} max relative error {:.3e}", r.name, r.max_relative_error);
                worst = worst.max(r.max_relative_error);
            }
            println!("max relative error: {worst:.3e}");
            if worst >= crate::checks::TOLERANCE {
                return Err(Error::Numeric(format!(
                    "gradient check failed: {worst:e} >= {:e}",
                    crate::checks::TOLERANCE
                )));
            }
        }
    }
    Ok(())
}

/// Log verbosity is read from `HSI_PAWS_LOG` (default `info`).
pub const LOG_ENV: &str = "HSI_PAWS_LOG";

/// Parses `argv` (program name first) and runs the chosen subcommand.
/// Returns the process exit code: 0 on success, 2 on usage errors, 1 on any
/// other failure.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    use clap::Parser as _;
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "info"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
