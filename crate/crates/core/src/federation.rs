//! Training rounds: client selection, local fine-tuning, FedAvg and the
//! session loop.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augmentor::{capacity_gate, refresh_pseudo, AugmentConfig, AugmentStats};
use crate::corpus::{Dataset, Example};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, RoundRecord};
use crate::model::{loss_and_grad, step, ModelParams, OptState, OptimizerKind};
use crate::partitioner::ClientShard;
use crate::prompt::Task;
use crate::rng::{rng_for, stream, SimRng};
use crate::scalar::Scalar;

/// How labels are predicted: through the prompt, or through a
/// classification head on `[CLS]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "fedprompt")]
    FedPrompt,
    #[serde(rename = "fedcls")]
    FedCls,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::FedPrompt => "fedprompt",
            Mode::FedCls => "fedcls",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedprompt" => Ok(Mode::FedPrompt),
            "fedcls" => Ok(Mode::FedCls),
            _ => Err(Error::Config(format!("unknown mode {s:?}; expected fedprompt or fedcls"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    pub participants_per_round: usize,
    /// Local epochs over the client's effective set.
    pub local_iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub mode: Mode,
    pub augmentation_enabled: bool,
    pub max_rounds: usize,
    /// Rounds without a new best test accuracy before stopping.
    pub patience: usize,
    /// Off by default so that histories are byte-reproducible.
    pub record_wall_time: bool,
}

impl Default for RoundConfig {
    fn default() -> Self {
        RoundConfig {
            participants_per_round: 5,
            local_iterations: 1,
            batch_size: 4,
            learning_rate: 3e-3,
            optimizer: OptimizerKind::Adam,
            mode: Mode::FedPrompt,
            augmentation_enabled: false,
            max_rounds: 40,
            patience: 10,
            record_wall_time: false,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.participants_per_round == 0 || self.local_iterations == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "participants_per_round, local_iterations and batch_size must be positive".into(),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("invalid learning_rate {}", self.learning_rate)));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be positive".into()));
        }
        Ok(())
    }
}

/// Uniform sample of `k` distinct ids, in draw order.
pub fn select_clients(eligible: &[usize], k: usize, rng: &mut SimRng) -> Result<Vec<usize>> {
    if k > eligible.len() {
        return Err(Error::Config(format!("cannot select {k} participants from {} eligible clients", eligible.len())));
    }
    Ok(index::sample(rng, eligible.len(), k).into_iter().map(|i| eligible[i]).collect())
}

/// The client's training set: gold-labeled examples plus pseudo-labeled
/// ones carrying their pseudo label.
pub fn effective_set<'a>(client: &ClientShard, train: &'a Dataset) -> Result<Vec<(&'a Example, usize)>> {
    let lookup = |id: usize| train.get(id).ok_or_else(|| Error::Contract(format!("client holds unknown id {id}")));
    let mut items = Vec::with_capacity(client.effective_len());
    for &id in &client.labeled_ids {
        let e = lookup(id)?;
        let label = e.gold_label.ok_or_else(|| Error::Contract(format!("labeled id {id} has no gold label")))?;
        items.push((e, label));
    }
    for p in &client.pseudo {
        items.push((lookup(p.id)?, p.label));
    }
    Ok(items)
}

/// Fine-tunes a copy of the global model on one client. Returns the local
/// model and its aggregation weight (effective example count).
pub fn local_train<S: Scalar>(
    global: &ModelParams<S>,
    client: &ClientShard,
    train: &Dataset,
    task: &Task,
    config: &RoundConfig,
    round: usize,
    seed: u64,
) -> Result<(ModelParams<S>, usize)> {
    let items = effective_set(client, train)?;
    if items.is_empty() {
        return Err(Error::Contract(format!("client {} has no training data", client.client_id)));
    }
    let mut params = global.clone();
    let mut opt = OptState::new(config.optimizer, config.learning_rate, params.len());
    let mut rng = rng_for(seed, &[stream::LOCAL, round as u64, client.client_id as u64]);
    let mut order: Vec<usize> = (0..items.len()).collect();
    for _ in 0..config.local_iterations {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let picked: Vec<(&Example, usize)> = chunk.iter().map(|&i| items[i]).collect();
            let batch = task.batch(&picked)?;
            let (_, grad) = loss_and_grad(&params, &batch, task.objective())?;
            step(&mut params, &mut opt, &grad)?;
        }
    }
    Ok((params, items.len()))
}

/// A trained local model on its way to aggregation.
#[derive(Debug, Clone)]
pub struct Update<S: Scalar> {
    pub client_id: usize,
    pub params: ModelParams<S>,
    pub weight: usize,
}

/// Weighted coordinate-wise mean. Updates are folded in ascending client id
/// as a running mean, so the result does not depend on input order and
/// identical updates come back unchanged.
pub fn fedavg<S: Scalar>(updates: &[Update<S>]) -> Result<ModelParams<S>> {
    let first = updates.first().ok_or_else(|| Error::Contract("fedavg needs at least one update".into()))?;
    let len = first.params.len();
    let mut order: Vec<&Update<S>> = updates.iter().collect();
    order.sort_by_key(|u| u.client_id);
    let mut mean: Vec<f64> = vec![0.0; len];
    let mut total = 0usize;
    for u in order {
        if u.params.len() != len {
            return Err(Error::Contract(format!("update of client {} has {} parameters, expected {len}", u.client_id, u.params.len())));
        }
        if u.weight == 0 {
            return Err(Error::Contract(format!("update of client {} has zero weight", u.client_id)));
        }
        total += u.weight;
        let frac = u.weight as f64 / total as f64;
        for (m, x) in mean.iter_mut().zip(&u.params.flat) {
            *m += frac * (x.as_f64() - *m);
        }
    }
    first.params.with_flat(mean.into_iter().map(S::of).collect())
}

/// Everything a session reads; shards are copied and mutated by the
/// session.
pub struct SessionInputs<'a, S: Scalar> {
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub validation: &'a Dataset,
    pub shards: Vec<ClientShard>,
    pub task: &'a Task,
    pub initial: ModelParams<S>,
    pub round: RoundConfig,
    pub augment: AugmentConfig,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SessionOutcome<S: Scalar> {
    pub history: Vec<RoundRecord>,
    pub params: ModelParams<S>,
    /// Validation accuracy of the initial model, the capacity-gate baseline.
    pub zero_shot_validation: Option<f64>,
    pub shards: Vec<ClientShard>,
}

/// A session that failed mid-way, with the rounds completed so far.
#[derive(Debug)]
pub struct SessionAbort {
    pub history: Vec<RoundRecord>,
    pub source: Error,
}

impl fmt::Display for SessionAbort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "session aborted after {} records: {}", self.history.len(), self.source)
    }
}

impl std::error::Error for SessionAbort {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

struct Session<'a, S: Scalar> {
    inputs: SessionInputs<'a, S>,
    global: ModelParams<S>,
    history: Vec<RoundRecord>,
    zero_shot_validation: Option<f64>,
    /// Clients pseudo-labeled at the end of the previous round; they train
    /// in the next one.
    preselected: Option<Vec<usize>>,
}

impl<S: Scalar> Session<'_, S> {
    fn select(&mut self, round: usize) -> Result<Vec<usize>> {
        let shards = &self.inputs.shards;
        if let Some(pre) = self.preselected.take() {
            let ready: Vec<usize> = pre.into_iter().filter(|&c| shards[c].effective_len() > 0).collect();
            if !ready.is_empty() {
                return Ok(ready);
            }
        }
        let eligible: Vec<usize> = shards.iter().filter(|s| s.effective_len() > 0).map(|s| s.client_id).collect();
        if eligible.is_empty() {
            return Err(Error::Config("no client holds training data".into()));
        }
        let k = self.inputs.round.participants_per_round.min(eligible.len());
        select_clients(&eligible, k, &mut rng_for(self.inputs.seed, &[stream::SELECT, round as u64]))
    }

    /// Picks next round's participants among every client holding any data
    /// and pseudo-labels their pools.
    fn augment(&mut self, round: usize) -> Result<AugmentStats> {
        let inp = &mut self.inputs;
        let holders: Vec<usize> = inp
            .shards
            .iter()
            .filter(|s| s.effective_len() > 0 || !s.unlabeled_ids.is_empty())
            .map(|s| s.client_id)
            .collect();
        let k = inp.round.participants_per_round.min(holders.len());
        let mut rng = rng_for(inp.seed, &[stream::SELECT, round as u64 + 1, 1]);
        let mut next = select_clients(&holders, k, &mut rng)?;
        next.sort_unstable();
        let stats = refresh_pseudo(&mut inp.shards, &next, &self.global, inp.task, inp.train, &inp.augment, round, inp.seed)?;
        self.preselected = Some(next);
        Ok(stats)
    }

    /// Capacity gate, then pseudo-labeling for the next round. Also runs
    /// after the zero-shot record, where the gate is open by the tie rule.
    fn gate_and_augment(&mut self, record: &mut RoundRecord) -> Result<()> {
        let inp = &self.inputs;
        if !inp.round.augmentation_enabled {
            return Ok(());
        }
        let open = match (inp.augment.capacity_check, self.zero_shot_validation) {
            (true, Some(zs)) => capacity_gate(&self.global, zs, inp.validation, inp.task)?,
            _ => true,
        };
        record.gate_open = Some(open);
        if open {
            let stats = self.augment(record.round)?;
            record.scanned = stats.scanned;
            record.kept = stats.kept;
            record.precision = stats.precision();
            record.mean_confidence = stats.mean_confidence();
        }
        Ok(())
    }

    fn round(&mut self, round: usize) -> Result<RoundRecord> {
        let started = Instant::now();
        let mut participants = self.select(round)?;
        participants.sort_unstable();
        let inp = &self.inputs;
        let updates = participants
            .par_iter()
            .map(|&c| {
                let (params, weight) =
                    local_train(&self.global, &inp.shards[c], inp.train, inp.task, &inp.round, round, inp.seed)?;
                Ok(Update { client_id: c, params, weight })
            })
            .collect::<Result<Vec<_>>>()?;
        self.global = fedavg(&updates)?;
        let test_accuracy = evaluate(&self.global, inp.task, inp.test)?;

        let mut record = RoundRecord { round, participants, test_accuracy, ..RoundRecord::zero_shot(inp.round.mode, 0.0) };
        self.gate_and_augment(&mut record)?;
        if self.inputs.round.record_wall_time {
            record.wall_time = started.elapsed().as_secs_f64();
        }
        Ok(record)
    }

    fn run(&mut self) -> Result<()> {
        let inp = &self.inputs;
        let zero_shot = evaluate(&self.global, inp.task, inp.test)?;
        if inp.round.augmentation_enabled && inp.augment.capacity_check {
            self.zero_shot_validation = Some(evaluate(&self.global, inp.task, inp.validation)?);
        }
        let mut record = RoundRecord::zero_shot(inp.round.mode, zero_shot);
        self.gate_and_augment(&mut record)?;
        self.history.push(record);
        let mut best = f64::NEG_INFINITY;
        let mut stale = 0;
        for round in 1..=self.inputs.round.max_rounds {
            let record = self.round(round)?;
            let acc = record.test_accuracy;
            self.history.push(record);
            if acc > best {
                best = acc;
                stale = 0;
            } else {
                stale += 1;
                if stale >= self.inputs.round.patience {
                    break;
                }
            }
        }
        Ok(())
    }
}

/// Runs rounds until `max_rounds` or until the test accuracy has not
/// improved for `patience` rounds. Round 0 of the history is the zero-shot
/// record.
pub fn run_session<S: Scalar>(inputs: SessionInputs<'_, S>) -> std::result::Result<SessionOutcome<S>, SessionAbort> {
    let abort = |source| SessionAbort { history: Vec::new(), source };
    inputs.round.validate().map_err(abort)?;
    inputs.augment.validate().map_err(abort)?;
    if inputs.validation.is_empty() && inputs.round.augmentation_enabled && inputs.augment.capacity_check {
        return Err(abort(Error::Config("the capacity gate needs a validation set".into())));
    }
    let global = inputs.initial.clone();
    let mut session = Session { inputs, global, history: Vec::new(), zero_shot_validation: None, preselected: None };
    match session.run() {
        Ok(()) => Ok(SessionOutcome {
            history: session.history,
            params: session.global,
            zero_shot_validation: session.zero_shot_validation,
            shards: session.inputs.shards,
        }),
        Err(source) => Err(SessionAbort { history: session.history, source }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_text_round_trip() {
        for m in [Mode::FedPrompt, Mode::FedCls] {
            assert_eq!(m.to_string().parse::<Mode>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
        }
        assert!("cls".parse::<Mode>().is_err());
    }

    #[test]
    fn select_trivial_cases() {
        let mut rng = rng_for(1, &[]);
        assert_eq!(select_clients(&[7], 1, &mut rng).unwrap(), vec![7]);
        let mut all = select_clients(&[3, 1, 4, 9], 4, &mut rng).unwrap();
        all.sort_unstable();
        assert_eq!(all, vec![1, 3, 4, 9]);
        assert!(matches!(select_clients(&[1, 2], 3, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn select_is_uniform() {
        let mut rng = rng_for(2, &[]);
        let draws = 10_000;
        let mut freq = [0usize; 4];
        for _ in 0..draws {
            for id in select_clients(&[0, 1, 2, 3], 2, &mut rng).unwrap() {
                freq[id] += 1;
            }
        }
        let sigma = (draws as f64 * 0.5 * 0.5).sqrt();
        for f in freq {
            assert!((f as f64 - draws as f64 * 0.5).abs() < 3.0 * sigma, "{freq:?}");
        }
    }

    fn update(client_id: usize, flat: Vec<f64>, weight: usize) -> Update<f64> {
        let cfg = crate::model::ModelConfig {
            vocab_size: 5,
            num_labels: 2,
            d_model: 4,
            num_layers: 1,
            num_heads: 1,
            d_ffn: 4,
            max_seq_len: 4,
        };
        let mut params = ModelParams::zeros(&cfg).unwrap();
        params.flat[..flat.len()].copy_from_slice(&flat);
        Update { client_id, params, weight }
    }

    #[test]
    fn fedavg_closed_forms() {
        let avg = fedavg(&[update(0, vec![1.0, 1.0], 1), update(1, vec![3.0, 3.0], 3)]).unwrap();
        assert_eq!(&avg.flat[..2], &[2.5, 2.5]);
        let one = update(4, vec![0.1, -2.0, 7.5], 9);
        assert_eq!(fedavg(std::slice::from_ref(&one)).unwrap().flat, one.params.flat);
        let same = fedavg(&[update(0, vec![0.1, 0.7], 2), update(1, vec![0.1, 0.7], 5), update(2, vec![0.1, 0.7], 3)]).unwrap();
        assert_eq!(&same.flat[..2], &[0.1, 0.7]);
        assert!(fedavg::<f64>(&[]).is_err());
        assert!(fedavg(&[update(0, vec![1.0], 0)]).is_err());
    }

    #[test]
    fn round_config_validation() {
        assert!(RoundConfig::default().validate().is_ok());
        assert!(RoundConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(RoundConfig { learning_rate: f64::NAN, ..Default::default() }.validate().is_err());
    }
}
