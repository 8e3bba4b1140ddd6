use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;

use sdpoint::bn_store::build_store;
use sdpoint::checkpoint::{Checkpoint, CheckpointMeta};
use sdpoint::cost::{instance_cost, param_count};
use sdpoint::data::{
    calibration_batches, load_cifar10, normalize, synthetic_cifar, write_cifar10, Dataset,
    Normalization, DEFAULT_CALIBRATION_BATCHES,
};
use sdpoint::downsample::padded_pixel_ratio;
use sdpoint::eval::{
    build_multiscale_store, cost_error_curve, curve_points, evaluate_variants, format_results,
    min_cost_grouping, min_cost_histogram, scale_sensitivity, stats_for, storage_overhead_report,
    write_curve_csv, write_history_csv, write_mincost_csv, write_scale_csv, BnMode, EvalResult,
};
use sdpoint::train::{TrainConfig, TrainMode, Trainer, Variant};
use sdpoint::{enumerate_instances, InstanceCatalog, NetworkSpec, SDPointInstance};

use crate::config::RunConfig;
use crate::{DataError, UsageError};

const DATA_ENV: &str = "SDPOINT_DATA_DIR";

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Flag first, then the config file, then the environment.
fn data_dir(flag: Option<&Path>, config: Option<PathBuf>) -> Result<PathBuf> {
    let dir = flag
        .map(Path::to_path_buf)
        .or(config)
        .or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from))
        .ok_or_else(|| {
            DataError(format!(
                "no data directory: pass --data-dir, set data.dir or set {DATA_ENV}"
            ))
        })?;
    if !dir.is_dir() {
        return Err(DataError(format!("data directory {} does not exist", dir.display())).into());
    }
    Ok(dir)
}

fn load_data(dir: &Path) -> Result<(Dataset, Dataset)> {
    load_cifar10(dir).with_context(|| format!("loading CIFAR-10 from {}", dir.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(DataError(format!("checkpoint {} not found", path.display())).into());
    }
    Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn checkpoint_norm(ckpt: &Checkpoint) -> Normalization {
    ckpt.norm
        .clone()
        .unwrap_or_else(|| Normalization::identity(ckpt.stack.spec().in_channels))
}

fn ratios_or_default(list: &[f64]) -> Vec<f64> {
    if list.is_empty() {
        TrainConfig::default().ratios
    } else {
        list.to_vec()
    }
}

fn catalog(spec: &NetworkSpec, ratios: &[f64], points: Option<usize>) -> Result<InstanceCatalog> {
    let n = spec.downsampling_points();
    let points = points.unwrap_or(n);
    if points > n {
        return Err(usage(format!("network has only {n} downsampling points")));
    }
    enumerate_instances(points, &ratios_or_default(ratios)).map_err(|e| usage(e.to_string()))
}

fn is_multiscale(ckpt: &Checkpoint) -> bool {
    ckpt.meta.mode == TrainMode::Multiscale.to_string()
}

/// Input sizes a multiscale model is evaluated at, the native size excluded.
fn multiscale_sizes(spec: &NetworkSpec) -> Vec<usize> {
    let (lo, hi) = TrainConfig::default().multiscale_sizes;
    (lo..=hi).filter(|&s| (s, s) != spec.input_hw).collect()
}

fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    ckpt.save(path)
        .with_context(|| format!("writing checkpoint {}", path.display()))
}

pub fn train(config_path: &Path) -> Result<()> {
    let cfg = RunConfig::load(config_path)?;
    let base = config_path.parent().unwrap_or(Path::new("."));
    let spec = cfg.spec()?;
    let config = cfg.train_config();
    let dir = data_dir(None, cfg.data.dir.as_ref().map(|d| base.join(d)))?;
    let (mut train, _) = load_data(&dir)?;
    if let Some(n) = cfg.data.train_images {
        train = train.take(n)?;
    }
    let norm = Normalization::fit(&train)?;
    let train = normalize(&train, &norm)?;
    let out = base.join(&cfg.output_dir);
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let meta = |epoch: usize| CheckpointMeta {
        seed: config.seed,
        epoch: epoch as u32,
        mode: config.mode.to_string(),
    };
    eprintln!(
        "training {} ({} mode) on {} images for {} epochs",
        config_path.display(),
        config.mode,
        train.len(),
        config.epochs
    );
    let mut trainer = Trainer::new(config.clone(), spec, &train)?;
    while !trainer.is_done() {
        let rec = trainer.run_epoch()?;
        eprintln!(
            "epoch {:>3}  lr {:<8.5}  loss {:.4}",
            rec.epoch + 1,
            rec.lr,
            rec.train_loss
        );
        let done = trainer.epoch();
        if cfg.train.milestone_checkpoints
            && done < config.epochs
            && config.lr_at(done) < config.lr_at(done - 1)
        {
            let ckpt = Checkpoint::new(trainer.stack.clone(), Some(norm.clone()), meta(done));
            write_checkpoint(&out.join(format!("model-e{done}.sdpt")), &ckpt)?;
        }
    }
    let (stack, history) = trainer.finish();
    let path = out.join("model.sdpt");
    write_checkpoint(
        &path,
        &Checkpoint::new(stack, Some(norm), meta(config.epochs)),
    )?;
    write_history_csv(out.join("history.csv"), &history)?;
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Number of calibration batches.
    #[arg(long, default_value_t = DEFAULT_CALIBRATION_BATCHES)]
    batches: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    /// Downsampling ratios of the catalog.
    #[arg(long, value_delimiter = ',')]
    ratios: Vec<f64>,
    /// Limit the catalog to points 1..=N.
    #[arg(long)]
    points: Option<usize>,
    /// Output checkpoint; defaults to rewriting the input.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn calibrate(a: &CalibrateArgs) -> Result<()> {
    if a.batches == 0 || a.batch_size == 0 {
        return Err(usage("--batches and --batch-size must be at least 1"));
    }
    let mut ckpt = load_checkpoint(&a.checkpoint)?;
    let dir = data_dir(a.data_dir.as_deref(), None)?;
    let (train, _) = load_data(&dir)?;
    let train = normalize(&train, &checkpoint_norm(&ckpt))?;
    let seed = ckpt.meta.seed;
    let batches = calibration_batches(&train, a.batch_size, a.batches, seed)?;
    let store = if is_multiscale(&ckpt) {
        build_multiscale_store(
            &ckpt.stack,
            &multiscale_sizes(ckpt.stack.spec()),
            &batches,
            seed,
        )?
    } else {
        let cat = catalog(ckpt.stack.spec(), &a.ratios, a.points)?;
        build_store(&ckpt.stack, &cat, &batches, seed)?
    };
    let count = store.overrides.len() + 1;
    ckpt.store = Some(store);
    let out = a.out.as_deref().unwrap_or(&a.checkpoint);
    write_checkpoint(out, &ckpt)?;
    let r = storage_overhead_report(&ckpt);
    println!(
        "calibrated {count} variants on {} batches of {}",
        batches.len(),
        a.batch_size
    );
    println!(
        "checkpoint {} -> {} bytes; store adds {:.3}% ({:.3}% of parameter bytes); a full copy per variant would total {} bytes",
        r.without_store_bytes,
        r.with_store_bytes,
        r.overhead_pct,
        r.overhead_of_params_pct,
        r.replicated_store_bytes
    );
    println!("wrote {}", out.display());
    Ok(())
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Instance id such as p0, p3_r50 or s24.
    #[arg(long, conflicts_with = "all", required_unless_present = "all")]
    instance: Option<String>,
    /// Evaluate every variant and write the cost/error curve.
    #[arg(long)]
    all: bool,
    /// instance or uniform.
    #[arg(long, default_value = "instance")]
    bn: String,
    #[arg(long, value_delimiter = ',')]
    ratios: Vec<f64>,
    #[arg(long)]
    points: Option<usize>,
    /// Evaluate only the first N validation images.
    #[arg(long)]
    val_images: Option<usize>,
    /// Curve CSV written with --all.
    #[arg(long, default_value = "curve.csv")]
    out: PathBuf,
}

/// Every variant a checkpoint can be evaluated as.
fn variants(ckpt: &Checkpoint, ratios: &[f64], points: Option<usize>) -> Result<Vec<Variant>> {
    let spec = ckpt.stack.spec();
    if is_multiscale(ckpt) {
        let mut v = vec![Variant::Instance(SDPointInstance::IDENTITY)];
        v.extend(multiscale_sizes(spec).into_iter().map(Variant::InputSize));
        return Ok(v);
    }
    Ok(catalog(spec, ratios, points)?
        .instances()
        .iter()
        .map(|&i| Variant::Instance(i))
        .collect())
}

fn pick(all: &[Variant], id: &str) -> Result<Variant> {
    all.iter().copied().find(|v| v.id() == id).ok_or_else(|| {
        let valid: Vec<String> = all.iter().map(Variant::id).collect();
        usage(format!(
            "unknown instance `{id}`; valid ids: {}",
            valid.join(", ")
        ))
    })
}

fn validation(ckpt: &Checkpoint, dir: Option<&Path>, limit: Option<usize>) -> Result<Dataset> {
    let dir = data_dir(dir, None)?;
    let (_, mut val) = load_data(&dir)?;
    if let Some(n) = limit {
        val = val.take(n)?;
    }
    Ok(normalize(&val, &checkpoint_norm(ckpt))?)
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let mode: BnMode =
        a.bn.parse()
            .map_err(|e: sdpoint::Error| usage(e.to_string()))?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let all = variants(&ckpt, &a.ratios, a.points)?;
    let chosen = match &a.instance {
        Some(id) => vec![pick(&all, id)?],
        None => all,
    };
    if mode == BnMode::InstanceSpecific && ckpt.store.is_none() {
        return Err(usage(
            "instance-specific evaluation needs a calibrated checkpoint; run `sdpoint calibrate` or pass --bn uniform",
        ));
    }
    let val = validation(&ckpt, a.data_dir.as_deref(), a.val_images)?;
    let rows = evaluate_variants(&ckpt.stack, &chosen, mode, ckpt.store.as_ref(), &val)?;
    print!("{}", format_results(&rows));
    if a.all {
        let curve = cost_error_curve(curve_points(&rows));
        write_curve_csv(&a.out, &curve.points)?;
        println!(
            "wrote {} ({} of {} variants on the curve)",
            a.out.display(),
            curve.points.len(),
            rows.len()
        );
    }
    Ok(())
}

#[derive(Args)]
pub struct CostArgs {
    #[arg(
        long,
        conflicts_with = "checkpoint",
        required_unless_present = "checkpoint"
    )]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    ratios: Vec<f64>,
    #[arg(long)]
    points: Option<usize>,
    #[arg(long, default_value = "cost.csv")]
    out: PathBuf,
}

pub fn cost(a: &CostArgs) -> Result<()> {
    let spec = match (&a.config, &a.checkpoint) {
        (Some(c), _) => RunConfig::load(c)?.spec()?,
        (None, Some(p)) => load_checkpoint(p)?.stack.spec().clone(),
        (None, None) => unreachable!("clap requires one of the two"),
    };
    let cat = catalog(&spec, &a.ratios, a.points)?;
    let params = param_count(&spec);
    let mut w = csv_writer(&a.out)?;
    w.write_record(["instance_id", "flops", "gflops", "params"])?;
    println!("{:<10} {:>14} {:>9}", "instance", "flops", "gflops");
    for inst in cat.instances() {
        let r = instance_cost(&spec, *inst)?;
        println!("{:<10} {:>14} {:>9.4}", inst.id(), r.flops, r.gflops());
        w.write_record([
            inst.id(),
            r.flops.to_string(),
            format!("{:.6}", r.gflops()),
            params.to_string(),
        ])?;
    }
    w.flush()?;
    println!("{params} parameters; wrote {}", a.out.display());
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

#[derive(Args)]
pub struct AnalyzeArgs {
    /// Checkpoint(s) to analyse; --scale accepts several.
    #[arg(long)]
    checkpoint: Vec<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Per-sample cost of the cheapest correct instance.
    #[arg(long, group = "analysis")]
    mincost: bool,
    /// Prediction consistency across pre-crop input sizes.
    #[arg(long, group = "analysis")]
    scale: bool,
    /// Fraction of convolution outputs touching padding: H W K PAD.
    #[arg(long, group = "analysis", num_args = 4, value_names = ["H", "W", "K", "PAD"])]
    padded_ratio: Option<Vec<usize>>,
    #[arg(long, default_value = "instance")]
    bn: String,
    #[arg(long, value_delimiter = ',', default_values_t = [32, 36, 40, 44, 48])]
    sizes: Vec<usize>,
    /// Validation images used by --scale and --mincost.
    #[arg(long)]
    images: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    ratios: Vec<f64>,
    #[arg(long)]
    points: Option<usize>,
    /// Report CSV; defaults to mincost.csv or scale.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

const SCALE_IMAGES: usize = 1000;

pub fn analyze(a: &AnalyzeArgs) -> Result<()> {
    if let Some(v) = &a.padded_ratio {
        let r = padded_pixel_ratio(v[0], v[1], v[2], v[3]).map_err(|e| usage(e.to_string()))?;
        println!("{r:.2}");
        return Ok(());
    }
    if !a.mincost && !a.scale {
        return Err(usage("choose one of --mincost, --scale or --padded-ratio"));
    }
    if a.checkpoint.is_empty() {
        return Err(usage("--checkpoint is required"));
    }
    let mode: BnMode =
        a.bn.parse()
            .map_err(|e: sdpoint::Error| usage(e.to_string()))?;
    if a.scale {
        return scale(a, mode);
    }
    if a.checkpoint.len() > 1 {
        return Err(usage("--mincost takes a single checkpoint"));
    }
    let ckpt = load_checkpoint(&a.checkpoint[0])?;
    let val = validation(&ckpt, a.data_dir.as_deref(), a.images)?;
    let all = variants(&ckpt, &a.ratios, a.points)?;
    let rows = evaluate_variants(&ckpt.stack, &all, mode, ckpt.store.as_ref(), &val)?;
    let pairs: Vec<(u64, &EvalResult)> = rows.iter().map(|(r, f)| (*f, r)).collect();
    let costs = min_cost_grouping(&pairs, &val.labels)?;
    let out = a.out.clone().unwrap_or_else(|| "mincost.csv".into());
    write_mincost_csv(&out, &costs)?;
    println!("{:>14} {:>8}", "min_flops", "samples");
    for (c, n) in min_cost_histogram(&costs) {
        println!("{:>14} {n:>8}", c.to_string());
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn scale(a: &AnalyzeArgs, mode: BnMode) -> Result<()> {
    let mut uniq = a.sizes.clone();
    uniq.sort_unstable();
    uniq.dedup();
    if a.sizes.len() < 2 || uniq.len() != a.sizes.len() {
        return Err(usage("--sizes needs at least two distinct sizes"));
    }
    let identity = Variant::Instance(SDPointInstance::IDENTITY);
    let mut rows = Vec::new();
    for path in &a.checkpoint {
        let ckpt = load_checkpoint(path)?;
        let crop = ckpt.stack.spec().input_hw.0;
        if let Some(&s) = a.sizes.iter().find(|&&s| s < crop) {
            return Err(usage(format!("size {s} is smaller than the {crop}px crop")));
        }
        let val = validation(
            &ckpt,
            a.data_dir.as_deref(),
            Some(a.images.unwrap_or(SCALE_IMAGES)),
        )?;
        let stats = stats_for(&ckpt.stack, identity, mode, ckpt.store.as_ref())?;
        let v = scale_sensitivity(&ckpt.stack, identity, &stats, &val, &a.sizes, crop)?;
        println!("{}  {v:.4}", path.display());
        rows.push((path.display().to_string(), v));
    }
    let out = a.out.clone().unwrap_or_else(|| "scale.csv".into());
    write_scale_csv(&out, &rows)?;
    println!("wrote {}", out.display());
    Ok(())
}

pub fn synth_data(out: &Path, n_train: usize, n_val: usize, seed: u64) -> Result<()> {
    let (train, val) = synthetic_cifar(n_train, n_val, seed)?;
    write_cifar10(out, &train, &val)?;
    println!(
        "wrote {n_train} training and {n_val} validation images to {}",
        out.display()
    );
    Ok(())
}
