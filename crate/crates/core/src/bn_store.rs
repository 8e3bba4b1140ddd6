//! Instance-specific batch-norm statistics.
//!
//! After training, each instance gets its own per-layer statistics by running
//! the frozen network on calibration batches with batch statistics. Layers
//! that run before an instance's downsampling point see exactly the same
//! activations as the unmodified network, so the store keeps one baseline
//! set and, per instance, only the layers from the first one after the point.

use std::collections::BTreeMap;

use crate::downsample::{sdpoint_forward, InstanceCatalog, SDPointInstance};
use crate::error::{Error, Result};
use crate::layers::{BatchMoments, ChannelStats, ForwardCtx, LayerStack, NormMode};
use crate::tensor::Tensor4;

/// Statistics for the layers of one instance starting at `first_layer`.
#[derive(Clone, Debug, PartialEq)]
pub struct StatsOverride {
    pub first_layer: usize,
    pub stats: Vec<ChannelStats>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceBNStore {
    pub baseline: Vec<ChannelStats>,
    pub overrides: BTreeMap<String, StatsOverride>,
    pub batches: u32,
    pub seed: u64,
}

/// Running aggregate of batch moments for one layer.
#[derive(Clone, Debug)]
struct MomentSum {
    mean_sum: Vec<f64>,
    mean_sq_sum: Vec<f64>,
    var_sum: Vec<f64>,
}

impl MomentSum {
    fn new(c: usize) -> Self {
        MomentSum {
            mean_sum: vec![0.0; c],
            mean_sq_sum: vec![0.0; c],
            var_sum: vec![0.0; c],
        }
    }

    fn add(&mut self, m: &BatchMoments) {
        for c in 0..self.mean_sum.len() {
            self.mean_sum[c] += m.mean[c];
            self.mean_sq_sum[c] += m.mean[c] * m.mean[c];
            self.var_sum[c] += m.var[c];
        }
    }

    /// Mean of batch means; mean of batch variances plus the variance of the
    /// batch means (law of total variance).
    fn finish(&self, k: usize) -> ChannelStats {
        let k = k as f64;
        let mut mean = Vec::with_capacity(self.mean_sum.len());
        let mut var = Vec::with_capacity(self.mean_sum.len());
        for c in 0..self.mean_sum.len() {
            let mu = self.mean_sum[c] / k;
            let spread = (self.mean_sq_sum[c] / k - mu * mu).max(0.0);
            mean.push(mu as f32);
            var.push((self.var_sum[c] / k + spread) as f32);
        }
        ChannelStats { mean, var }
    }
}

/// Runs `forward` on every batch in batch-statistics mode and aggregates the
/// moments seen by each batch-norm layer.
pub fn calibrate_with<F>(
    stack: &LayerStack,
    batches: &[Tensor4],
    mut forward: F,
) -> Result<Vec<ChannelStats>>
where
    F: FnMut(&LayerStack, &Tensor4, &mut ForwardCtx<'_, f32>) -> Result<()>,
{
    if batches.is_empty() {
        return Err(Error::EmptyData);
    }
    let mut sums: Vec<MomentSum> = stack
        .batch_norms()
        .iter()
        .map(|bn| MomentSum::new(bn.channels()))
        .collect();
    for x in batches {
        let mut ctx = ForwardCtx::new(NormMode::Batch, false);
        forward(stack, x, &mut ctx)?;
        for (layer, m) in ctx.moments() {
            sums[*layer].add(m);
        }
    }
    Ok(sums.iter().map(|s| s.finish(batches.len())).collect())
}

/// Per-layer statistics for a fixed instance over `batches` (labels unused).
pub fn calibrate_instance(
    stack: &LayerStack,
    inst: SDPointInstance,
    batches: &[Tensor4],
) -> Result<Vec<ChannelStats>> {
    calibrate_with(stack, batches, |s, x, ctx| {
        sdpoint_forward(s, x, inst, ctx).map(|_| ())
    })
}

impl InstanceBNStore {
    pub fn new(baseline: Vec<ChannelStats>, batches: u32, seed: u64) -> Self {
        InstanceBNStore {
            baseline,
            overrides: BTreeMap::new(),
            batches,
            seed,
        }
    }

    pub fn insert(
        &mut self,
        id: impl Into<String>,
        first_layer: usize,
        full: &[ChannelStats],
    ) -> Result<()> {
        if full.len() != self.baseline.len() || first_layer > full.len() {
            return Err(Error::invalid(
                "override does not match the baseline layer count",
            ));
        }
        self.overrides.insert(
            id.into(),
            StatsOverride {
                first_layer,
                stats: full[first_layer..].to_vec(),
            },
        );
        Ok(())
    }

    pub fn contains(&self, id: &str) -> bool {
        id == SDPointInstance::IDENTITY.id() || self.overrides.contains_key(id)
    }

    fn unknown(&self, id: &str) -> Error {
        let mut valid = vec![SDPointInstance::IDENTITY.id()];
        valid.extend(self.overrides.keys().cloned());
        Error::UnknownInstance {
            id: id.to_string(),
            valid: valid.join(", "),
        }
    }

    /// Statistics for `layer` under instance `id`: baseline before the
    /// instance's first overridden layer, the override from there on.
    pub fn select_stats(&self, id: &str, layer: usize) -> Result<&ChannelStats> {
        let base = self
            .baseline
            .get(layer)
            .ok_or_else(|| Error::invalid(format!("no batch norm layer {layer}")))?;
        if id == SDPointInstance::IDENTITY.id() {
            return Ok(base);
        }
        let o = self.overrides.get(id).ok_or_else(|| self.unknown(id))?;
        Ok(if layer < o.first_layer {
            base
        } else {
            &o.stats[layer - o.first_layer]
        })
    }

    /// Statistics for every layer under instance `id`.
    pub fn resolve(&self, id: &str) -> Result<Vec<ChannelStats>> {
        (0..self.baseline.len())
            .map(|l| self.select_stats(id, l).cloned())
            .collect()
    }

    fn scalars(stats: &[ChannelStats]) -> usize {
        stats.iter().map(|s| 2 * s.channels()).sum()
    }

    pub fn baseline_scalars(&self) -> usize {
        Self::scalars(&self.baseline)
    }

    pub fn override_scalars(&self) -> usize {
        self.overrides
            .values()
            .map(|o| Self::scalars(&o.stats))
            .sum()
    }

    pub fn stored_scalars(&self) -> usize {
        self.baseline_scalars() + self.override_scalars()
    }

    /// Scalars needed if every instance kept a full copy.
    pub fn replicated_scalars(&self) -> usize {
        (self.overrides.len() + 1) * self.baseline_scalars()
    }

    /// The same statistics with every instance stored in full.
    pub fn replicated(&self) -> Self {
        let mut out = self.clone();
        for (id, o) in out.overrides.iter_mut() {
            let full = self.resolve(id).expect("known id");
            *o = StatsOverride {
                first_layer: 0,
                stats: full,
            };
        }
        out
    }
}

/// Calibrates every instance of the catalog on the same batches.
pub fn build_store(
    stack: &LayerStack,
    catalog: &InstanceCatalog,
    batches: &[Tensor4],
    seed: u64,
) -> Result<InstanceBNStore> {
    let spec = stack.spec();
    let baseline = calibrate_instance(stack, SDPointInstance::IDENTITY, batches)?;
    let mut store = InstanceBNStore::new(baseline, batches.len() as u32, seed);
    for inst in catalog.instances().iter().filter(|i| !i.is_identity()) {
        let full = calibrate_instance(stack, *inst, batches)?;
        store.insert(inst.id(), spec.first_bn_after_block(inst.point()), &full)?;
    }
    Ok(store)
}

impl InstanceBNStore {
    pub fn stats_nonnegative(&self) -> bool {
        self.baseline
            .iter()
            .chain(self.overrides.values().flat_map(|o| o.stats.iter()))
            .all(|s| s.var.iter().all(|v| *v >= 0.0))
    }
}
