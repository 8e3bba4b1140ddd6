//! Evaluation: per-instance error, Pareto-filtered cost-error curves,
//! minimum cost to classify each sample, scale sensitivity and storage
//! overhead, plus the CSV files they produce.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use crate::bn_store::{calibrate_with, InstanceBNStore};
use crate::checkpoint::Checkpoint;
use crate::cost::instance_cost;
use crate::data::{batch_iter, bilinear_resize, center_crop, Dataset};
use crate::downsample::{sdpoint_forward, SDPointInstance};
use crate::error::{Error, Result};
use crate::layers::{softmax_rows, ChannelStats, ForwardCtx, LayerStack, NetworkSpec, NormMode};
use crate::tensor::Tensor4;
use crate::train::{TrainHistory, Variant};

pub const EVAL_BATCH: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Calibrated statistics selected per instance from the store.
    InstanceSpecific,
    /// The running statistics accumulated during training, shared by all instances.
    Uniform,
}

impl FromStr for BnMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "instance" | "instance_specific" => Ok(BnMode::InstanceSpecific),
            "uniform" => Ok(BnMode::Uniform),
            other => Err(Error::invalid(format!(
                "unknown bn mode `{other}`; expected instance or uniform"
            ))),
        }
    }
}

impl fmt::Display for BnMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BnMode::InstanceSpecific => "instance",
            BnMode::Uniform => "uniform",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub id: String,
    pub bn_mode: BnMode,
    pub error_pct: f64,
    pub samples: usize,
    /// Top-1 prediction per validation sample.
    pub predictions: Vec<usize>,
}

impl EvalResult {
    pub fn correct(&self, labels: &[usize]) -> Vec<bool> {
        self.predictions
            .iter()
            .zip(labels)
            .map(|(p, l)| p == l)
            .collect()
    }
}

/// Forward pass of one variant under fixed normalisation.
pub fn variant_logits(
    stack: &LayerStack,
    variant: Variant,
    mode: NormMode<'_, f32>,
    x: &Tensor4,
) -> Result<Tensor4> {
    let mut ctx = ForwardCtx::new(mode, false);
    match variant {
        Variant::Instance(inst) => Ok(sdpoint_forward(stack, x, inst, &mut ctx)?.0),
        Variant::InputSize(s) => {
            let resized = bilinear_resize(x, s, s)?;
            Ok(sdpoint_forward(stack, &resized, SDPointInstance::IDENTITY, &mut ctx)?.0)
        }
    }
}

fn argmax_rows(logits: &Tensor4) -> Vec<usize> {
    let [n, k, _, _] = logits.dims();
    (0..n)
        .map(|i| {
            let row = &logits.data()[i * k..(i + 1) * k];
            // first maximum wins on ties
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (j, &v)| {
                    if v > best.1 {
                        (j, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

/// Batch-norm statistics for `variant` under `mode`.
pub fn stats_for(
    stack: &LayerStack,
    variant: Variant,
    mode: BnMode,
    store: Option<&InstanceBNStore>,
) -> Result<Vec<ChannelStats>> {
    match mode {
        BnMode::InstanceSpecific => {
            let store = store.ok_or_else(|| {
                Error::invalid("instance-specific evaluation needs a calibrated statistics store")
            })?;
            store.resolve(&variant.id())
        }
        BnMode::Uniform => stack.running_stats().ok_or_else(|| {
            let layer = stack
                .batch_norms()
                .iter()
                .position(|b| b.running.is_none())
                .unwrap_or(0);
            Error::MissingBnStats { layer }
        }),
    }
}

/// Top-1 error of one variant over the whole of `val`.
pub fn evaluate_instance(
    stack: &LayerStack,
    variant: Variant,
    mode: BnMode,
    store: Option<&InstanceBNStore>,
    val: &Dataset,
) -> Result<EvalResult> {
    let stats = stats_for(stack, variant, mode, store)?;
    let mut predictions = Vec::with_capacity(val.len());
    let mut wrong = 0usize;
    for batch in batch_iter(val, EVAL_BATCH, None)? {
        let batch = batch?;
        let logits = variant_logits(stack, variant, NormMode::Fixed(&stats), &batch.images)?;
        for (p, l) in argmax_rows(&logits).into_iter().zip(&batch.labels) {
            wrong += usize::from(p != *l);
            predictions.push(p);
        }
    }
    Ok(EvalResult {
        id: variant.id(),
        bn_mode: mode,
        error_pct: 100.0 * wrong as f64 / val.len() as f64,
        samples: val.len(),
        predictions,
    })
}

/// Single-image FLOPs of a variant; input-size variants run the full network
/// on a `size × size` input.
pub fn variant_flops(spec: &NetworkSpec, variant: Variant) -> Result<u64> {
    Ok(match variant {
        Variant::Instance(inst) => instance_cost(spec, inst)?.flops,
        Variant::InputSize(s) => {
            instance_cost(&spec.with_input_hw(s, s), SDPointInstance::IDENTITY)?.flops
        }
    })
}

/// Evaluates every variant, returning each result with its cost.
pub fn evaluate_variants(
    stack: &LayerStack,
    variants: &[Variant],
    mode: BnMode,
    store: Option<&InstanceBNStore>,
    val: &Dataset,
) -> Result<Vec<(EvalResult, u64)>> {
    variants
        .iter()
        .map(|&v| {
            Ok((
                evaluate_instance(stack, v, mode, store, val)?,
                variant_flops(stack.spec(), v)?,
            ))
        })
        .collect()
}

/// Curve points for a set of evaluated variants.
pub fn curve_points(rows: &[(EvalResult, u64)]) -> Vec<CurvePoint> {
    rows.iter()
        .map(|(r, f)| CurvePoint {
            id: r.id.clone(),
            flops: *f,
            error_pct: r.error_pct,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub id: String,
    pub flops: u64,
    pub error_pct: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostErrorCurve {
    pub points: Vec<CurvePoint>,
    pub filtered: bool,
}

/// Sorts by cost and drops every point whose error is not strictly below
/// the best error among the cheaper retained points.
pub fn cost_error_curve(mut points: Vec<CurvePoint>) -> CostErrorCurve {
    points.sort_by(|a, b| {
        a.flops
            .cmp(&b.flops)
            .then(a.error_pct.total_cmp(&b.error_pct))
    });
    let mut kept: Vec<CurvePoint> = Vec::new();
    for p in points {
        if kept.last().is_none_or(|best| p.error_pct < best.error_pct) {
            kept.push(p);
        }
    }
    CostErrorCurve {
        points: kept,
        filtered: true,
    }
}

/// Retained points strictly improve: cost rises and error falls.
pub fn is_strictly_improving(points: &[CurvePoint]) -> bool {
    points
        .windows(2)
        .all(|w| w[0].flops < w[1].flops && w[0].error_pct > w[1].error_pct)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MinCost {
    Flops(u64),
    Uncorrectable,
}

impl fmt::Display for MinCost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MinCost::Flops(v) => write!(f, "{v}"),
            MinCost::Uncorrectable => f.write_str("uncorrectable"),
        }
    }
}

/// For every sample, the cost of the cheapest instance that classifies it correctly.
pub fn min_cost_grouping(results: &[(u64, &EvalResult)], labels: &[usize]) -> Result<Vec<MinCost>> {
    if results
        .iter()
        .any(|(_, r)| r.predictions.len() != labels.len())
    {
        return Err(Error::invalid(
            "evaluation results cover a different sample count",
        ));
    }
    let mut order: Vec<&(u64, &EvalResult)> = results.iter().collect();
    order.sort_by_key(|(f, _)| *f);
    Ok((0..labels.len())
        .map(|i| {
            order
                .iter()
                .find(|(_, r)| r.predictions[i] == labels[i])
                .map_or(MinCost::Uncorrectable, |(f, _)| MinCost::Flops(*f))
        })
        .collect())
}

/// Sample count per distinct minimum cost, cheapest first, uncorrectable last.
pub fn min_cost_histogram(costs: &[MinCost]) -> Vec<(MinCost, usize)> {
    let mut map = std::collections::BTreeMap::new();
    for c in costs {
        *map.entry(*c).or_insert(0usize) += 1;
    }
    map.into_iter().collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// Mean over images and over all pairs of pre-crop sizes of the cosine
/// similarity between class-probability vectors. Each image is resized to
/// every size and centre-cropped to `crop`.
pub fn scale_sensitivity(
    stack: &LayerStack,
    variant: Variant,
    stats: &[ChannelStats],
    val: &Dataset,
    sizes: &[usize],
    crop: usize,
) -> Result<f64> {
    let mut uniq = sizes.to_vec();
    uniq.sort_unstable();
    uniq.dedup();
    if sizes.len() < 2 || uniq.len() != sizes.len() {
        return Err(Error::invalid(
            "scale sensitivity needs at least two distinct sizes",
        ));
    }
    if sizes.iter().any(|&s| s < crop) {
        return Err(Error::invalid(format!(
            "every pre-crop size must be at least {crop}"
        )));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for batch in batch_iter(val, EVAL_BATCH, None)? {
        let batch = batch?;
        let mut probs = Vec::with_capacity(sizes.len());
        for &s in sizes {
            let x = center_crop(&bilinear_resize(&batch.images, s, s)?, crop)?;
            let logits = variant_logits(stack, variant, NormMode::Fixed(stats), &x)?;
            probs.push(softmax_rows(&logits));
        }
        for (a, pa) in probs.iter().enumerate() {
            for pb in &probs[a + 1..] {
                for (u, v) in pa.iter().zip(pb) {
                    total += cosine(u, v);
                    pairs += 1;
                }
            }
        }
    }
    Ok(total / pairs as f64)
}

/// Statistics for input-size variants: the full-size network as baseline and
/// one full override per other size, keyed `s<size>`.
pub fn build_multiscale_store(
    stack: &LayerStack,
    sizes: &[usize],
    batches: &[Tensor4],
    seed: u64,
) -> Result<InstanceBNStore> {
    let identity = |s: &LayerStack, x: &Tensor4, ctx: &mut ForwardCtx<'_, f32>| {
        sdpoint_forward(s, x, SDPointInstance::IDENTITY, ctx).map(|_| ())
    };
    let baseline = calibrate_with(stack, batches, identity)?;
    let mut store = InstanceBNStore::new(baseline, batches.len() as u32, seed);
    let (h, w) = stack.spec().input_hw;
    for &size in sizes.iter().filter(|&&s| (s, s) != (h, w)) {
        let full = calibrate_with(stack, batches, |st, x, ctx| {
            identity(st, &bilinear_resize(x, size, size)?, ctx)
        })?;
        store.insert(Variant::InputSize(size).id(), 0, &full)?;
    }
    Ok(store)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StorageReport {
    pub without_store_bytes: usize,
    pub with_store_bytes: usize,
    /// Checkpoint size if every instance kept a full copy of its statistics.
    pub replicated_store_bytes: usize,
    pub param_bytes: usize,
    /// Store bytes relative to the checkpoint without the store.
    pub overhead_pct: f64,
    /// Store bytes relative to the parameter bytes.
    pub overhead_of_params_pct: f64,
}

pub fn storage_overhead_report(ckpt: &Checkpoint) -> StorageReport {
    let (without, with) = ckpt.sizes();
    let replicated = match &ckpt.store {
        Some(store) => Checkpoint {
            store: Some(store.replicated()),
            ..ckpt.clone()
        }
        .to_bytes()
        .len(),
        None => without,
    };
    let param_bytes = 4 * ckpt.stack.param_count();
    let extra = (with - without) as f64;
    StorageReport {
        without_store_bytes: without,
        with_store_bytes: with,
        replicated_store_bytes: replicated,
        param_bytes,
        overhead_pct: 100.0 * extra / without as f64,
        overhead_of_params_pct: 100.0 * extra / param_bytes as f64,
    }
}

fn write_csv<R, T>(path: &Path, header: &[&str], rows: impl IntoIterator<Item = R>) -> Result<()>
where
    R: IntoIterator<Item = T>,
    T: AsRef<[u8]>,
{
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::invalid(format!("csv: {other:?}")),
    }
}

pub fn write_history_csv(path: impl AsRef<Path>, history: &TrainHistory) -> Result<()> {
    write_csv(
        path.as_ref(),
        &["epoch", "lr", "train_loss"],
        history.epochs.iter().map(|e| {
            [
                e.epoch.to_string(),
                e.lr.to_string(),
                e.train_loss.to_string(),
            ]
        }),
    )
}

pub fn write_curve_csv(path: impl AsRef<Path>, points: &[CurvePoint]) -> Result<()> {
    write_csv(
        path.as_ref(),
        &["instance_id", "flops", "error"],
        points
            .iter()
            .map(|p| [p.id.clone(), p.flops.to_string(), p.error_pct.to_string()]),
    )
}

pub fn read_curve_csv(path: impl AsRef<Path>) -> Result<Vec<CurvePoint>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let bad = |row: usize| Error::Data {
        path: path.display().to_string(),
        offset: row as u64,
        msg: "malformed curve row".into(),
    };
    r.records()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec.map_err(|_| bad(i + 1))?;
            if rec.len() != 3 {
                return Err(bad(i + 1));
            }
            Ok(CurvePoint {
                id: rec[0].to_string(),
                flops: rec[1].parse().map_err(|_| bad(i + 1))?,
                error_pct: rec[2].parse().map_err(|_| bad(i + 1))?,
            })
        })
        .collect()
}

pub fn write_mincost_csv(path: impl AsRef<Path>, costs: &[MinCost]) -> Result<()> {
    write_csv(
        path.as_ref(),
        &["sample_index", "min_flops"],
        costs
            .iter()
            .enumerate()
            .map(|(i, c)| [i.to_string(), c.to_string()]),
    )
}

pub fn write_scale_csv(path: impl AsRef<Path>, rows: &[(String, f64)]) -> Result<()> {
    write_csv(
        path.as_ref(),
        &["model", "mean_cosine"],
        rows.iter().map(|(m, v)| [m.clone(), v.to_string()]),
    )
}

/// Plain-text table of evaluation rows for terminals.
pub fn format_results(rows: &[(EvalResult, u64)]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<10} {:>9} {:>14} {:>8}",
        "instance", "bn", "flops", "error%"
    );
    for (r, flops) in rows {
        let _ = writeln!(
            out,
            "{:<10} {:>9} {:>14} {:>8.2}",
            r.id,
            r.bn_mode.to_string(),
            flops,
            r.error_pct
        );
    }
    out
}
