use std::collections::BTreeSet;

use rayon::prelude::*;

use crate::data::{ClassId, SplitStore, SubsetLabel};
use crate::nn::{Network, TrainConfig};
use crate::seed::mix;

use super::{
    pair_separability_cached, ApplicabilityError, ApplicabilityTable, FeatureCache,
    SeparabilityRecord,
};

/// What a sweep measures: every `(class, probe, layer)` combination.
#[derive(Debug, Clone)]
pub struct SweepPlan {
    pub classes: Vec<ClassId>,
    pub probes: Vec<ClassId>,
    pub layers: Vec<usize>,
    /// Per-job budget; its seed is replaced by [`job_seed`].
    pub train: TrainConfig,
    pub master_seed: u64,
    pub workers: usize,
}

impl SweepPlan {
    pub fn job_count(&self) -> usize {
        self.classes.len() * self.probes.len() * self.layers.len()
    }

    fn jobs(&self) -> Vec<(ClassId, ClassId, usize)> {
        let mut jobs = Vec::with_capacity(self.job_count());
        for &x in &self.classes {
            for &layer in &self.layers {
                for &u in &self.probes {
                    jobs.push((x, u, layer));
                }
            }
        }
        jobs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobFailure {
    pub target: ClassId,
    pub probe: ClassId,
    pub layer: usize,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub table: ApplicabilityTable,
    /// All records, including resumed ones, in job order.
    pub records: Vec<SeparabilityRecord>,
    pub failures: Vec<JobFailure>,
}

/// Seed of one job: a pure function of the master seed and the job key.
pub fn job_seed(master: u64, target: ClassId, probe: ClassId, layer: usize) -> u64 {
    mix(&[master, target as u64, probe as u64, layer as u64])
}

pub fn layer_sweep(
    net: &Network,
    splits: &SplitStore,
    plan: &SweepPlan,
) -> Result<SweepOutcome, ApplicabilityError> {
    layer_sweep_resumable(net, splits, plan, &[], &|_| {})
}

/// Runs every job not already present in `done`, calling `on_record` as
/// each finishes. Failed jobs are reported, not fatal.
pub fn layer_sweep_resumable(
    net: &Network,
    splits: &SplitStore,
    plan: &SweepPlan,
    done: &[SeparabilityRecord],
    on_record: &(dyn Fn(&SeparabilityRecord) + Sync),
) -> Result<SweepOutcome, ApplicabilityError> {
    validate(splits, plan)?;
    let finished: std::collections::BTreeMap<(ClassId, ClassId, usize), SeparabilityRecord> = done
        .iter()
        .map(|r| ((r.target, r.probe, r.layer), *r))
        .collect();
    let jobs = plan.jobs();
    let pending: Vec<_> = jobs
        .iter()
        .filter(|j| !finished.contains_key(j))
        .copied()
        .collect();
    log::info!(
        "sweep: {} jobs, {} already done, {} workers",
        jobs.len(),
        jobs.len() - pending.len(),
        plan.workers
    );

    let cache = FeatureCache::new(net, splits);
    let run = |&(x, u, layer): &(ClassId, ClassId, usize)| {
        let cfg = plan
            .train
            .with_seed(job_seed(plan.master_seed, x, u, layer));
        let result = pair_separability_cached(&cache, layer, x, u, &cfg);
        if let Ok(r) = &result {
            on_record(r);
        }
        ((x, u, layer), result)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(plan.workers.max(1))
        .build()
        .map_err(|e| ApplicabilityError::Data(format!("worker pool: {e}")))?;
    let results: Vec<_> = pool.install(|| pending.par_iter().map(run).collect());

    let mut fresh = std::collections::BTreeMap::new();
    let mut failures = Vec::new();
    for ((x, u, layer), res) in results {
        match res {
            Ok(r) => {
                fresh.insert((x, u, layer), r);
            }
            Err(e) => {
                log::warn!("job (x={x}, un={u}, layer={layer}) failed: {e}");
                failures.push(JobFailure {
                    target: x,
                    probe: u,
                    layer,
                    message: e.to_string(),
                });
            }
        }
    }
    let records: Vec<SeparabilityRecord> = jobs
        .iter()
        .filter_map(|j| finished.get(j).or_else(|| fresh.get(j)).copied())
        .collect();
    let table = ApplicabilityTable::from_records(plan.probes.clone(), &records)?;
    Ok(SweepOutcome {
        table,
        records,
        failures,
    })
}

fn validate(splits: &SplitStore, plan: &SweepPlan) -> Result<(), ApplicabilityError> {
    if plan.classes.is_empty() || plan.probes.is_empty() || plan.layers.is_empty() {
        return Err(ApplicabilityError::Data(
            "sweep needs classes, probes and layers".into(),
        ));
    }
    let measured: BTreeSet<_> = plan.classes.iter().collect();
    for p in &plan.probes {
        let split = splits
            .get(*p)
            .ok_or_else(|| ApplicabilityError::Data(format!("probe class {p} has no data")))?;
        if split.subset == SubsetLabel::ObjectiveKnown {
            return Err(ApplicabilityError::Data(format!(
                "probe class {p} was used to train the base network"
            )));
        }
        if measured.contains(p) {
            return Err(ApplicabilityError::Data(format!(
                "class {p} is both measured and a probe"
            )));
        }
    }
    Ok(())
}
