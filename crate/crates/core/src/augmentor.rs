//! Pseudo-label augmentation with a model-capacity gate and a confidence
//! filter.

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::model::ModelParams;
use crate::partitioner::{ClientShard, PseudoLabel};
use crate::prompt::Task;
use crate::rng::{rng_for, stream, SimRng};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub confidence_threshold: f64,
    /// Unlabeled examples scanned per client per round.
    pub per_client_budget: usize,
    /// Keep pseudo labels across rounds instead of rebuilding them.
    pub cumulative: bool,
    pub capacity_check: bool,
    /// Scan the whole unlabeled pool, ignoring the budget.
    pub full_scan: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            confidence_threshold: 0.9,
            per_client_budget: 100,
            cumulative: false,
            capacity_check: true,
            full_scan: false,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(Error::Config(format!("confidence_threshold {} outside [0, 1]", self.confidence_threshold)));
        }
        if self.per_client_budget == 0 {
            return Err(Error::Config("per_client_budget must be positive".into()));
        }
        Ok(())
    }
}

/// Counts behind one or more pseudo-labeling passes. Correctness is judged
/// against hidden gold labels and is only ever reported.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AugmentStats {
    pub scanned: usize,
    pub kept: usize,
    pub kept_correct: usize,
    pub scanned_correct: usize,
    pub confidence_sum: f64,
}

impl AugmentStats {
    pub fn merge(&mut self, other: &AugmentStats) {
        self.scanned += other.scanned;
        self.kept += other.kept;
        self.kept_correct += other.kept_correct;
        self.scanned_correct += other.scanned_correct;
        self.confidence_sum += other.confidence_sum;
    }

    /// Share of kept labels that are correct.
    pub fn precision(&self) -> Option<f64> {
        (self.kept > 0).then(|| self.kept_correct as f64 / self.kept as f64)
    }

    /// Share of all scanned predictions that are correct.
    pub fn scanned_precision(&self) -> Option<f64> {
        (self.scanned > 0).then(|| self.scanned_correct as f64 / self.scanned as f64)
    }

    pub fn mean_confidence(&self) -> Option<f64> {
        (self.kept > 0).then(|| self.confidence_sum / self.kept as f64)
    }
}

/// Open when the model is at least as accurate as the zero-shot model.
pub fn gate_decision(validation_accuracy: f64, zero_shot_accuracy: f64) -> bool {
    validation_accuracy >= zero_shot_accuracy
}

pub fn capacity_gate<S: Scalar>(
    params: &ModelParams<S>,
    zero_shot_accuracy: f64,
    validation: &Dataset,
    task: &Task,
) -> Result<bool> {
    Ok(gate_decision(evaluate(params, task, validation)?, zero_shot_accuracy))
}

/// Labels a uniform sample of the client's unlabeled pool and keeps the
/// predictions at or above the confidence threshold.
pub fn pseudo_label<S: Scalar>(
    params: &ModelParams<S>,
    task: &Task,
    client: &ClientShard,
    train: &Dataset,
    config: &AugmentConfig,
    rng: &mut SimRng,
) -> Result<(Vec<PseudoLabel>, AugmentStats)> {
    let pool = &client.unlabeled_ids;
    let take = if config.full_scan { pool.len() } else { config.per_client_budget.min(pool.len()) };
    let mut scan: Vec<usize> = index::sample(rng, pool.len(), take).into_iter().map(|i| pool[i]).collect();
    scan.sort_unstable();

    let mut kept = Vec::new();
    let mut stats = AugmentStats { scanned: scan.len(), ..AugmentStats::default() };
    for id in scan {
        let example = train.get(id).ok_or_else(|| Error::Contract(format!("client pool holds unknown id {id}")))?;
        let dist = task.distribution(params, example)?;
        let correct = example.gold_label == Some(dist.argmax);
        stats.scanned_correct += usize::from(correct);
        if dist.confidence >= config.confidence_threshold {
            stats.kept += 1;
            stats.kept_correct += usize::from(correct);
            stats.confidence_sum += dist.confidence;
            kept.push(PseudoLabel { id, label: dist.argmax, confidence: dist.confidence });
        }
    }
    Ok((kept, stats))
}

/// Replaces the pseudo list, or in cumulative mode merges keeping the most
/// confident entry per id.
pub fn apply_pseudo(shard: &mut ClientShard, fresh: Vec<PseudoLabel>, cumulative: bool) {
    if !cumulative {
        shard.pseudo = fresh;
        return;
    }
    for p in fresh {
        match shard.pseudo.binary_search_by_key(&p.id, |q| q.id) {
            Ok(i) if shard.pseudo[i].confidence < p.confidence => shard.pseudo[i] = p,
            Ok(_) => {}
            Err(i) => shard.pseudo.insert(i, p),
        }
    }
}

/// Pseudo-labels each participant's pool and installs the result. The scan
/// sample of each client is drawn from a stream keyed by (seed, round,
/// client).
#[allow(clippy::too_many_arguments)]
pub fn refresh_pseudo<S: Scalar>(
    shards: &mut [ClientShard],
    participants: &[usize],
    params: &ModelParams<S>,
    task: &Task,
    train: &Dataset,
    config: &AugmentConfig,
    round: usize,
    seed: u64,
) -> Result<AugmentStats> {
    let results = participants
        .par_iter()
        .map(|&c| {
            let shard = shards.get(c).ok_or_else(|| Error::Contract(format!("unknown client {c}")))?;
            if shard.unlabeled_ids.is_empty() {
                return Ok((c, None));
            }
            let mut rng = rng_for(seed, &[stream::PSEUDO, round as u64, c as u64]);
            pseudo_label(params, task, shard, train, config, &mut rng).map(|r| (c, Some(r)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = AugmentStats::default();
    for (c, result) in results {
        if let Some((fresh, stats)) = result {
            total.merge(&stats);
            apply_pseudo(&mut shards[c], fresh, config.cumulative);
        }
    }
    Ok(total)
}
