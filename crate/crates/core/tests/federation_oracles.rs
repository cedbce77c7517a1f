//! Session, local training, augmentation and evaluation checked against
//! hand-built models whose predictions are known in closed form.

use fedprompt_core::augmentor::{pseudo_label, AugmentConfig};
use fedprompt_core::corpus::{Dataset, Example};
use fedprompt_core::experiment::{partition_for, prepare, run_seed, ModelSection, Precision, Prepared, RunConfig};
use fedprompt_core::federation::{local_train, Mode, RoundConfig};
use fedprompt_core::metrics::{aggregate_seeds, evaluate, mean_std, RoundRecord};
use fedprompt_core::model::{init_params, per_example_losses, ModelParams};
use fedprompt_core::partitioner::{ClientShard, PseudoLabel};
use fedprompt_core::prompt::Task;
use fedprompt_core::rng::rng_for;
use rand::Rng;

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.synth.examples_per_class = 60;
    cfg.data.corpus.sentences = 200;
    cfg.model = ModelSection { d_model: 16, num_layers: 1, num_heads: 2, d_ffn: 32, max_seq_len: 24, precision: Precision::F64 };
    cfg.partition.num_clients = 4;
    cfg.partition.xi = 4;
    cfg.partition.n_labeled = 16;
    cfg.pretrain.steps = 20;
    cfg.max_rounds = 3;
    cfg.seeds = vec![1];
    cfg
}

fn world() -> (RunConfig, Prepared) {
    let cfg = small_config();
    let prepared = prepare(&cfg).unwrap();
    (cfg, prepared)
}

/// All-zero weights make every hidden state zero, so the output is the bias
/// alone: label 0 gets probability 57 / (57 + 3) = 0.95 under both readouts.
fn constant_model(cfg: &RunConfig, prepared: &Prepared) -> ModelParams<f64> {
    let model = cfg.model_config(prepared.vocab.len(), prepared.label_names().len());
    let mut p = ModelParams::<f64>::zeros(&model).unwrap();
    let favoured = prepared.pvp.verbalizer_ids(&prepared.vocab).unwrap()[0] as usize;
    p.tensor_mut("mlm.bias").unwrap()[favoured] = 57f64.ln();
    p.tensor_mut("cls.bias").unwrap()[0] = 57f64.ln();
    p
}

fn share_of_class_zero<'a>(examples: impl Iterator<Item = &'a Example>) -> f64 {
    let (mut zero, mut total) = (0, 0);
    for e in examples {
        total += 1;
        zero += usize::from(e.gold_label == Some(0));
    }
    zero as f64 / total as f64
}

fn tasks(cfg: &RunConfig, prepared: &Prepared) -> Vec<Task> {
    [Mode::FedPrompt, Mode::FedCls].iter().map(|&m| prepared.task(m, cfg.model.max_seq_len).unwrap()).collect()
}

#[test]
fn constant_model_distribution_and_accuracy() {
    let (cfg, prepared) = world();
    let p = constant_model(&cfg, &prepared);
    let test = &prepared.splits.test;
    for task in tasks(&cfg, &prepared) {
        let d = task.distribution(&p, &test.examples[0]).unwrap();
        assert!((d.probs[0] - 0.95).abs() < 1e-12);
        assert_eq!(d.argmax, 0);
        let acc = evaluate(&p, &task, test).unwrap();
        assert!((acc - share_of_class_zero(test.examples.iter())).abs() < 1e-12);
    }
}

#[test]
fn constant_model_filter_and_precision() {
    let (cfg, prepared) = world();
    let p = constant_model(&cfg, &prepared);
    let train = &prepared.splits.train;
    let part = partition_for(&cfg, &prepared, 1, false).unwrap();
    let client = &part.shards[0];
    let pool = || client.unlabeled_ids.iter().map(|&id| train.get(id).unwrap());
    for task in tasks(&cfg, &prepared) {
        let keep_all = AugmentConfig { confidence_threshold: 0.9, full_scan: true, ..AugmentConfig::default() };
        let (kept, stats) = pseudo_label(&p, &task, client, train, &keep_all, &mut rng_for(0, &[0])).unwrap();
        assert_eq!(kept.len(), client.unlabeled_ids.len());
        assert!(kept.iter().all(|k| k.label == 0 && (k.confidence - 0.95).abs() < 1e-12));
        assert!((stats.precision().unwrap() - share_of_class_zero(pool())).abs() < 1e-12);
        assert!((stats.mean_confidence().unwrap() - 0.95).abs() < 1e-12);

        let keep_none = AugmentConfig { confidence_threshold: 0.96, ..keep_all };
        let (kept, stats) = pseudo_label(&p, &task, client, train, &keep_none, &mut rng_for(0, &[0])).unwrap();
        assert!(kept.is_empty());
        assert_eq!(stats.scanned, client.unlabeled_ids.len());
    }
}

#[test]
fn threshold_extremes_and_budget() {
    let (cfg, prepared) = world();
    let model = cfg.model_config(prepared.vocab.len(), prepared.label_names().len());
    let p = init_params::<f64>(&model, 9).unwrap();
    let task = prepared.task(Mode::FedPrompt, cfg.model.max_seq_len).unwrap();
    let train = &prepared.splits.train;
    let part = partition_for(&cfg, &prepared, 1, false).unwrap();
    let client = &part.shards[1];

    let strict = AugmentConfig { confidence_threshold: 1.0, full_scan: true, ..AugmentConfig::default() };
    assert!(pseudo_label(&p, &task, client, train, &strict, &mut rng_for(1, &[0])).unwrap().0.is_empty());

    let open = AugmentConfig { confidence_threshold: 0.0, per_client_budget: 7, ..AugmentConfig::default() };
    let (kept, stats) = pseudo_label(&p, &task, client, train, &open, &mut rng_for(1, &[0])).unwrap();
    assert_eq!(stats.scanned, 7);
    assert_eq!(kept.len(), 7);
    assert!(kept.windows(2).all(|w| w[0].id < w[1].id));
    assert!(kept.iter().all(|k| client.unlabeled_ids.contains(&k.id)));
}

#[test]
fn pseudo_labels_never_depend_on_hidden_gold_labels() {
    let (cfg, prepared) = world();
    let model = cfg.model_config(prepared.vocab.len(), prepared.label_names().len());
    let p = init_params::<f64>(&model, 4).unwrap();
    let task = prepared.task(Mode::FedPrompt, cfg.model.max_seq_len).unwrap();
    let train = &prepared.splits.train;
    let mut blind = train.clone();
    let mut rng = rng_for(3, &[0]);
    for e in &mut blind.examples {
        e.gold_label = Some(rng.gen_range(0..4));
    }
    let part = partition_for(&cfg, &prepared, 1, false).unwrap();
    let config = AugmentConfig { confidence_threshold: 0.3, ..AugmentConfig::default() };
    for shard in &part.shards {
        let (a, _) = pseudo_label(&p, &task, shard, train, &config, &mut rng_for(2, &[0])).unwrap();
        let (b, _) = pseudo_label(&p, &task, shard, &blind, &config, &mut rng_for(2, &[0])).unwrap();
        assert_eq!(a, b);
    }
}

fn client_with(train: &Dataset, labeled: usize, pseudo: usize) -> ClientShard {
    let mut shard = ClientShard::new(0);
    let ids = train.ids();
    shard.labeled_ids = ids[..labeled].to_vec();
    shard.unlabeled_ids = ids[labeled..labeled + 10].to_vec();
    shard.pseudo = shard.unlabeled_ids[..pseudo].iter().map(|&id| PseudoLabel { id, label: 1, confidence: 0.99 }).collect();
    shard
}

#[test]
fn zero_learning_rate_keeps_weights_and_counts_effective_data() {
    let (cfg, prepared) = world();
    let model = cfg.model_config(prepared.vocab.len(), prepared.label_names().len());
    let global = init_params::<f64>(&model, 2).unwrap();
    let client = client_with(&prepared.splits.train, 3, 2);
    let round = RoundConfig { learning_rate: 0.0, local_iterations: 3, ..RoundConfig::default() };
    for task in tasks(&cfg, &prepared) {
        let (local, weight) = local_train(&global, &client, &prepared.splits.train, &task, &round, 1, 7).unwrap();
        assert_eq!(weight, 5);
        assert_eq!(local.flat, global.flat);
    }
}

#[test]
fn local_training_fits_a_tiny_set() {
    let (cfg, prepared) = world();
    let model = cfg.model_config(prepared.vocab.len(), prepared.label_names().len());
    let global = init_params::<f64>(&model, 5).unwrap();
    let train = &prepared.splits.train;
    let client = client_with(train, 4, 0);
    let round = RoundConfig { learning_rate: 1e-2, local_iterations: 50, batch_size: 4, ..RoundConfig::default() };
    for task in tasks(&cfg, &prepared) {
        let (local, _) = local_train(&global, &client, train, &task, &round, 1, 7).unwrap();
        let items: Vec<(&Example, usize)> =
            client.labeled_ids.iter().map(|&id| train.get(id).unwrap()).map(|e| (e, e.gold_label.unwrap())).collect();
        let batch = task.batch(&items).unwrap();
        let losses = per_example_losses(&local, &batch, task.objective()).unwrap();
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        assert!(mean < 0.1, "mean loss {mean}");
    }
}

#[test]
fn zero_rounds_record_only_zero_shot() {
    let (mut cfg, prepared) = world();
    cfg.max_rounds = 0;
    let model = cfg.model_config(prepared.vocab.len(), prepared.label_names().len());
    let init = init_params::<f64>(&model, 1).unwrap();
    let outcome = run_seed(&cfg, &prepared, &init, 1, false).unwrap();
    assert_eq!(outcome.history.len(), 1);
    assert_eq!(outcome.history[0].round, 0);
    assert_eq!(outcome.params.flat, init.flat);
}

#[test]
fn frozen_session_keeps_zero_shot_accuracy() {
    let (mut cfg, prepared) = world();
    cfg.learning_rate = 0.0;
    cfg.max_rounds = 4;
    cfg.augmentation.enabled = true;
    let model = cfg.model_config(prepared.vocab.len(), prepared.label_names().len());
    let init = init_params::<f64>(&model, 1).unwrap();
    let outcome = run_seed(&cfg, &prepared, &init, 1, false).unwrap();
    let zero_shot = outcome.history[0].test_accuracy;
    assert!(outcome.history.len() > 1);
    assert!(outcome.history.iter().all(|r| r.test_accuracy == zero_shot));
    assert!(outcome.history.iter().all(|r| r.gate_open != Some(false)));
}

#[test]
fn evaluation_is_additive_over_disjoint_parts() {
    let (cfg, prepared) = world();
    let model = cfg.model_config(prepared.vocab.len(), prepared.label_names().len());
    let p = init_params::<f64>(&model, 6).unwrap();
    let task = prepared.task(Mode::FedPrompt, cfg.model.max_seq_len).unwrap();
    let test = &prepared.splits.test;
    let mut rng = rng_for(8, &[0]);
    let (mut left, mut right) = (Vec::new(), Vec::new());
    for e in &test.examples {
        if rng.gen_bool(0.5) { left.push(e.clone()) } else { right.push(e.clone()) }
    }
    let part = |ex: Vec<Example>| Dataset::new(ex, test.label_names.clone(), test.provenance).unwrap();
    let (nl, nr) = (left.len() as f64, right.len() as f64);
    let whole = evaluate(&p, &task, test).unwrap();
    let split = (evaluate(&p, &task, &part(left)).unwrap() * nl + evaluate(&p, &task, &part(right)).unwrap() * nr) / (nl + nr);
    assert!((whole - split).abs() < 1e-12);

    let mut hits = 0;
    for e in &test.examples {
        hits += usize::from(task.distribution(&p, e).unwrap().argmax == e.gold_label.unwrap());
    }
    assert_eq!(whole, hits as f64 / test.len() as f64);
}

#[test]
fn seed_aggregation_matches_direct_computation() {
    let mut rng = rng_for(12, &[0]);
    for _ in 0..200 {
        let seeds = rng.gen_range(1..6);
        let histories: Vec<Vec<RoundRecord>> = (0..seeds)
            .map(|_| {
                let rounds = rng.gen_range(1..8);
                (0..rounds)
                    .map(|r| RoundRecord { round: r, ..RoundRecord::zero_shot(Mode::FedPrompt, rng.gen_range(0.0..1.0)) })
                    .collect()
            })
            .collect();
        let best: Vec<f64> = histories
            .iter()
            .map(|h| {
                let trained: Vec<f64> = h.iter().filter(|r| r.round >= 1).map(|r| r.test_accuracy).collect();
                if trained.is_empty() { h[0].test_accuracy } else { trained.into_iter().fold(f64::MIN, f64::max) }
            })
            .collect();
        let n = best.len() as f64;
        let mean = best.iter().sum::<f64>() / n;
        let std = (best.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / n).sqrt();
        let agg = aggregate_seeds(&histories).unwrap();
        assert!((agg.mean - mean).abs() < 1e-12 && (agg.std - std).abs() < 1e-12);
        assert_eq!(agg.count, seeds);
        assert_eq!(mean_std(&best).unwrap(), agg);
    }
}
