//! Federated few-shot data generator.
//!
//! Training examples are first sharded across clients with a per-class
//! symmetric Dirichlet(α) (feature non-iid). A labeled budget of `n`
//! examples is then split over `ξ` clients by shares `z ~ Dir_ξ(γ)`; each
//! selected client reveals labels of examples drawn from its own shard.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream, SimRng};
use crate::util::apportion;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PartitionSpec {
    pub num_clients: usize,
    /// Total labeled examples `n`.
    pub n_labeled: usize,
    /// Skewness `γ` of the labeled-quota Dirichlet.
    pub gamma: f64,
    /// Number of clients holding labels, `ξ`.
    pub xi: usize,
    /// Feature non-iid concentration `α`.
    pub alpha: f64,
    /// Choose the `ξ` labeled clients uniformly at random instead of ids `0..ξ`.
    pub random_xi: bool,
    pub seed: u64,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        PartitionSpec { num_clients: 32, n_labeled: 64, gamma: 100.0, xi: 32, alpha: 1.0, random_xi: false, seed: 0 }
    }
}

impl PartitionSpec {
    pub fn validate(&self, train_size: usize) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::Config("num_clients must be >= 1".into()));
        }
        if self.xi == 0 || self.xi > self.num_clients {
            return Err(Error::Config(format!("xi must lie in 1..={}, got {}", self.num_clients, self.xi)));
        }
        if self.gamma.is_nan() || self.gamma <= 0.0 || self.alpha.is_nan() || self.alpha <= 0.0 {
            return Err(Error::Config("gamma and alpha must be positive".into()));
        }
        if self.n_labeled > train_size {
            return Err(Error::Allocation(format!(
                "n_labeled = {} exceeds the {train_size} training examples",
                self.n_labeled
            )));
        }
        Ok(())
    }
}

/// Dirichlet shares over `ξ` clients, summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shares {
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub id: usize,
    pub label: usize,
    pub confidence: f64,
}

/// One simulated client's data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientShard {
    pub client_id: usize,
    pub unlabeled_ids: Vec<usize>,
    pub labeled_ids: Vec<usize>,
    #[serde(default)]
    pub pseudo: Vec<PseudoLabel>,
}

impl ClientShard {
    pub fn new(client_id: usize) -> Self {
        ClientShard { client_id, unlabeled_ids: Vec::new(), labeled_ids: Vec::new(), pseudo: Vec::new() }
    }

    /// Examples the client trains on this round: labeled plus pseudo-labeled.
    pub fn effective_len(&self) -> usize {
        self.labeled_ids.len() + self.pseudo.len()
    }
}

/// Labeled-count heatmap: one row per labeled client, one column per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionMatrix {
    pub counts: Vec<Vec<usize>>,
}

impl PartitionMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        PartitionMatrix { counts: vec![vec![0; cols]; rows] }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn row_totals(&self) -> Vec<usize> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }
}

/// Symmetric Dirichlet draw by normalized Gamma(concentration, 1) variates.
/// If every draw underflows, the limit vertex (one-hot on a uniform index)
/// is returned.
fn symmetric_dirichlet(concentration: f64, k: usize, rng: &mut SimRng) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("concentration validated positive");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.into_iter().map(|d| d / total).collect()
    } else {
        let mut one_hot = vec![0.0; k];
        one_hot[rng.gen_range(0..k)] = 1.0;
        one_hot
    }
}

/// Draws `z ~ Dir_ξ(γ)`.
pub fn dirichlet_shares(gamma: f64, xi: usize, rng: &mut SimRng) -> Shares {
    assert!(gamma > 0.0 && xi >= 1, "dirichlet_shares needs gamma > 0 and xi >= 1");
    Shares { values: symmetric_dirichlet(gamma, xi, rng) }
}

/// `|T_i| = z_i n`, rounded by largest remainder (ties to the lower index)
/// so the quotas sum to exactly `n`.
pub fn allocate_quotas(shares: &Shares, n: usize) -> Vec<usize> {
    apportion(&shares.values, n)
}

/// Feature non-iid sharding: each class is spread over clients by its own
/// Dirichlet(α) proportion vector. Examples without labels form one extra
/// group. Shards list ids in ascending order.
pub fn partition_features(train: &Dataset, num_clients: usize, alpha: f64, rng: &mut SimRng) -> Vec<ClientShard> {
    assert!(num_clients >= 1, "partition_features needs at least one client");
    let k = train.num_classes();
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k + 1];
    for ex in &train.examples {
        groups[ex.gold_label.unwrap_or(k)].push(ex.id);
    }
    let mut shards: Vec<ClientShard> = (0..num_clients).map(ClientShard::new).collect();
    for mut ids in groups.into_iter().filter(|g| !g.is_empty()) {
        let props = symmetric_dirichlet(alpha, num_clients, rng);
        let counts = apportion(&props, ids.len());
        ids.shuffle(rng);
        let mut rest = ids.as_slice();
        for (shard, c) in shards.iter_mut().zip(counts) {
            let (take, tail) = rest.split_at(c);
            shard.unlabeled_ids.extend_from_slice(take);
            rest = tail;
        }
    }
    for s in &mut shards {
        s.unlabeled_ids.sort_unstable();
    }
    shards
}

/// Caps quotas at client capacity and re-apportions any surplus over the
/// clients that still have room, weighted by their quotas. When those
/// weights are all zero the surplus goes to the client with the most spare
/// room (lower index on ties), which keeps concentrated allocations
/// concentrated.
fn fit_quotas(quotas: &[usize], capacity: &[usize]) -> Result<Vec<usize>> {
    let n: usize = quotas.iter().sum();
    let cap_total: usize = capacity.iter().sum();
    if cap_total < n {
        return Err(Error::Allocation(format!(
            "labeled capacity {cap_total} across the selected clients is below n = {n}"
        )));
    }
    let mut fitted: Vec<usize> = quotas.iter().zip(capacity).map(|(&q, &c)| q.min(c)).collect();
    let mut surplus = n - fitted.iter().sum::<usize>();
    while surplus > 0 {
        let weights: Vec<f64> = (0..quotas.len())
            .map(|i| if fitted[i] < capacity[i] { quotas[i] as f64 } else { 0.0 })
            .collect();
        let extra = apportion(&weights, surplus);
        if extra.iter().all(|&e| e == 0) {
            let i = (0..quotas.len()).max_by_key(|&i| (capacity[i] - fitted[i], std::cmp::Reverse(i))).unwrap();
            let take = surplus.min(capacity[i] - fitted[i]);
            fitted[i] += take;
            surplus -= take;
            continue;
        }
        for i in 0..quotas.len() {
            let take = extra[i].min(capacity[i] - fitted[i]);
            fitted[i] += take;
            surplus -= take;
        }
    }
    Ok(fitted)
}

/// Reveals labels on the `ξ` selected clients. `quotas[i]` belongs to client
/// `xi_client_ids[i]`; labeled examples are sampled uniformly without
/// replacement from that client's own pool of gold-labeled examples.
pub fn assign_labels(
    shards: &mut [ClientShard],
    train: &Dataset,
    quotas: &[usize],
    xi_client_ids: &[usize],
    rng: &mut SimRng,
) -> Result<PartitionMatrix> {
    if quotas.len() != xi_client_ids.len() {
        return Err(Error::Contract("one quota per labeled client required".into()));
    }
    let mut seen = std::collections::HashSet::new();
    for &c in xi_client_ids {
        if c >= shards.len() || !seen.insert(c) {
            return Err(Error::Contract(format!("invalid or repeated labeled client id {c}")));
        }
    }
    let labelable = |shard: &ClientShard| -> Vec<usize> {
        shard.unlabeled_ids.iter().copied().filter(|&id| train.get(id).is_some_and(|e| e.gold_label.is_some())).collect()
    };
    let pools: Vec<Vec<usize>> = xi_client_ids.iter().map(|&c| labelable(&shards[c])).collect();
    let capacity: Vec<usize> = pools.iter().map(Vec::len).collect();
    let fitted = fit_quotas(quotas, &capacity)?;

    let mut matrix = PartitionMatrix::zeros(xi_client_ids.len(), train.num_classes());
    for (row, (&client, pool)) in xi_client_ids.iter().zip(&pools).enumerate() {
        let mut picked: Vec<usize> = index::sample(rng, pool.len(), fitted[row]).into_iter().map(|i| pool[i]).collect();
        picked.sort_unstable();
        let shard = &mut shards[client];
        shard.unlabeled_ids.retain(|id| picked.binary_search(id).is_err());
        for &id in &picked {
            let label = train.get(id).and_then(|e| e.gold_label).expect("pool holds labeled examples");
            matrix.counts[row][label] += 1;
        }
        shard.labeled_ids.extend(picked);
        shard.labeled_ids.sort_unstable();
    }
    Ok(matrix)
}

/// Moves every gold-labeled example of every shard into its labeled set
/// (full-set reference runs).
pub fn reveal_all(shards: &mut [ClientShard], train: &Dataset) {
    for shard in shards {
        let (lab, unl): (Vec<usize>, Vec<usize>) = shard
            .unlabeled_ids
            .iter()
            .partition(|&&id| train.get(id).is_some_and(|e| e.gold_label.is_some()));
        shard.labeled_ids.extend(lab);
        shard.labeled_ids.sort_unstable();
        shard.unlabeled_ids = unl;
    }
}

/// Result of the full data generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub spec: PartitionSpec,
    pub xi_client_ids: Vec<usize>,
    pub shares: Shares,
    pub quotas: Vec<usize>,
    pub shards: Vec<ClientShard>,
    pub matrix: PartitionMatrix,
}

/// Runs the generator end to end. Each stage draws from its own stream
/// derived from `spec.seed`.
pub fn partition(train: &Dataset, spec: &PartitionSpec) -> Result<Partition> {
    spec.validate(train.len())?;
    let mut shards = partition_features(train, spec.num_clients, spec.alpha, &mut rng_for(spec.seed, &[stream::FEATURES]));
    let xi_client_ids: Vec<usize> = if spec.random_xi {
        let mut ids = index::sample(&mut rng_for(spec.seed, &[stream::XI]), spec.num_clients, spec.xi).into_vec();
        ids.sort_unstable();
        ids
    } else {
        (0..spec.xi).collect()
    };
    let shares = dirichlet_shares(spec.gamma, spec.xi, &mut rng_for(spec.seed, &[stream::SHARES]));
    let quotas = allocate_quotas(&shares, spec.n_labeled);
    let matrix =
        assign_labels(&mut shards, train, &quotas, &xi_client_ids, &mut rng_for(spec.seed, &[stream::LABELS]))?;
    Ok(Partition { spec: spec.clone(), xi_client_ids, shares, quotas, shards, matrix })
}

pub fn write_heatmap<W: Write>(matrix: &PartitionMatrix, mut out: W) -> std::io::Result<()> {
    for row in &matrix.counts {
        let line: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}

/// Writes the heatmap as headerless integer CSV, one row per labeled client.
pub fn emit_heatmap(matrix: &PartitionMatrix, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_heatmap(matrix, &mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn read_heatmap<R: BufRead>(reader: R) -> Result<PartitionMatrix> {
    let mut counts = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|c| c.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        counts.push(row);
    }
    Ok(PartitionMatrix { counts })
}

pub fn load_heatmap(path: &Path) -> Result<PartitionMatrix> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_heatmap(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_generate, SynthSpec};
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use std::collections::HashSet;

    fn train(per_class: usize) -> Dataset {
        synth_generate(&SynthSpec { examples_per_class: per_class, ..Default::default() }).unwrap()
    }

    #[test]
    fn single_share() {
        let mut rng = rng_for(1, &[]);
        assert_eq!(dirichlet_shares(0.5, 1, &mut rng).values, vec![1.0]);
    }

    #[test]
    fn concentrated_shares_are_flat() {
        let mut rng = rng_for(2, &[]);
        for v in dirichlet_shares(1e9, 4, &mut rng).values {
            assert!((v - 0.25).abs() < 0.01);
        }
    }

    #[test]
    fn tiny_gamma_is_nearly_one_hot() {
        let mut rng = rng_for(3, &[]);
        let draws = 5000;
        let mean_max: f64 = (0..draws)
            .map(|_| dirichlet_shares(1e-3, 32, &mut rng).values.into_iter().fold(0.0, f64::max))
            .sum::<f64>()
            / draws as f64;
        // small-concentration limit: E[1 - max] ~ (xi - 1) * gamma * ln 2
        let expected = 1.0 - 31.0 * 1e-3 * 2f64.ln();
        assert!((mean_max - expected).abs() < 0.01, "{mean_max} vs {expected}");
    }

    #[test]
    fn quota_examples() {
        assert_eq!(allocate_quotas(&Shares { values: vec![0.5, 0.5] }, 3), vec![2, 1]);
        assert_eq!(allocate_quotas(&Shares { values: vec![0.3, 0.3, 0.4] }, 10), vec![3, 3, 4]);
    }

    #[test]
    fn quotas_sum_to_n_over_random_cases() {
        let mut rng = rng_for(4, &[]);
        for _ in 0..1000 {
            let xi = rng.gen_range(1..40);
            let gamma = 10f64.powf(rng.gen_range(-3.0..3.0));
            let n = rng.gen_range(0..5000);
            let shares = dirichlet_shares(gamma, xi, &mut rng);
            assert!((shares.values.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert_eq!(allocate_quotas(&shares, n).iter().sum::<usize>(), n);
        }
    }

    #[test]
    fn single_client_gets_everything() {
        let ds = train(10);
        let shards = partition_features(&ds, 1, 1.0, &mut rng_for(5, &[]));
        assert_eq!(shards[0].unlabeled_ids, ds.ids());
    }

    #[test]
    fn feature_shards_partition_the_train_set() {
        let ds = train(30);
        for seed in 0..20 {
            let shards = partition_features(&ds, 7, 0.5, &mut rng_for(seed, &[]));
            let mut seen = HashSet::new();
            for s in &shards {
                for &id in &s.unlabeled_ids {
                    assert!(seen.insert(id), "duplicate id {id}");
                }
            }
            assert_eq!(seen.len(), ds.len());
            assert!(ds.ids().iter().all(|id| seen.contains(id)));
        }
    }

    #[test]
    fn huge_alpha_balances_shards() {
        let ds = train(100);
        for seed in 0..100 {
            let shards = partition_features(&ds, 4, 1e9, &mut rng_for(seed, &[]));
            for s in &shards {
                let n = s.unlabeled_ids.len() as f64;
                assert!((n - 100.0).abs() <= 10.0, "shard of {n}");
            }
        }
    }

    #[test]
    fn one_hot_quota_gives_one_nonzero_row() {
        let ds = train(100);
        let mut shards = partition_features(&ds, 4, 1.0, &mut rng_for(6, &[]));
        let m = assign_labels(&mut shards, &ds, &[20, 0, 0, 0], &[0, 1, 2, 3], &mut rng_for(7, &[])).unwrap();
        assert_eq!(m.row_totals().iter().filter(|&&t| t > 0).count(), 1);
        assert_eq!(m.total(), 20);
    }

    #[test]
    fn surplus_moves_to_roomiest_client() {
        assert_eq!(fit_quotas(&[10, 0, 0], &[4, 5, 9]).unwrap(), vec![4, 0, 6]);
        assert_eq!(fit_quotas(&[6, 2, 2], &[3, 10, 10]).unwrap(), vec![3, 4, 3]);
        assert!(matches!(fit_quotas(&[10, 0], &[4, 5]), Err(Error::Allocation(_))));
    }

    #[test]
    fn labeled_and_unlabeled_disjoint_and_local() {
        let ds = train(50);
        let spec = PartitionSpec { num_clients: 8, n_labeled: 40, xi: 5, gamma: 0.5, seed: 9, ..Default::default() };
        let original = partition_features(&ds, 8, 1.0, &mut rng_for(9, &[stream::FEATURES]));
        let p = partition(&ds, &spec).unwrap();
        for (s, o) in p.shards.iter().zip(&original) {
            assert!(s.labeled_ids.iter().all(|id| !s.unlabeled_ids.contains(id)));
            assert!(s.labeled_ids.iter().all(|id| o.unlabeled_ids.contains(id)));
        }
        assert_eq!(p.shards.iter().map(|s| s.labeled_ids.len()).sum::<usize>(), 40);
        assert!(p.shards[5..].iter().all(|s| s.labeled_ids.is_empty()));
    }

    #[test]
    fn capacity_error() {
        let ds = train(5);
        let spec = PartitionSpec { num_clients: 4, n_labeled: 20, xi: 4, ..Default::default() };
        assert!(partition(&ds, &spec).is_ok());
        let spec = PartitionSpec { n_labeled: 21, ..spec };
        assert!(matches!(partition(&ds, &spec), Err(Error::Allocation(_))));
    }

    #[test]
    fn heatmap_serialization() {
        let m = PartitionMatrix { counts: vec![vec![1, 0], vec![0, 3]] };
        let mut buf = Vec::new();
        write_heatmap(&m, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "1,0\n0,3\n");
        assert_eq!(read_heatmap(buf.as_slice()).unwrap(), m);
        let z = PartitionMatrix::zeros(2, 3);
        let mut buf = Vec::new();
        write_heatmap(&z, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "0,0,0\n0,0,0\n");
    }

    #[test]
    fn partition_is_deterministic() {
        let ds = train(40);
        let spec = PartitionSpec { num_clients: 10, n_labeled: 30, xi: 6, random_xi: true, seed: 42, ..Default::default() };
        assert_eq!(partition(&ds, &spec).unwrap(), partition(&ds, &spec).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn labeled_total_is_n(seed in 0u64..10_000, n in 0usize..200, log_gamma in -3.0f64..2.0, xi in 1usize..12) {
            let ds = train(60);
            let spec = PartitionSpec { num_clients: 12, n_labeled: n, gamma: 10f64.powf(log_gamma), xi, seed, ..Default::default() };
            match partition(&ds, &spec) {
                Ok(p) => {
                    prop_assert_eq!(p.matrix.total(), n);
                    prop_assert_eq!(p.shards.iter().map(|s| s.labeled_ids.len()).sum::<usize>(), n);
                }
                Err(Error::Allocation(_)) => {}
                Err(e) => prop_assert!(false, "{e}"),
            }
        }
    }
}
