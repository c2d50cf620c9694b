use std::collections::BTreeSet;

use kgrec_core::checkpoint;
use kgrec_core::eval::{filtered_ranks, hit_at, ndcg_at, rank_by_score};
use kgrec_core::model::RecModel;
use kgrec_core::synthetic::{generate, SyntheticConfig};
use kgrec_core::train::{compute_loss, make_example, sample_negatives, train};
use kgrec_core::{
    build_dataset, evaluate, split_edges, Dataset, DatasetConfig, IdSet, ModelConfig, TargetMode, TrainConfig, Variant,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dataset(train_basic: usize, valid: usize) -> Dataset {
    let kg = generate(&SyntheticConfig::small(5)).to_graph().unwrap();
    let split = split_edges(&kg, 0.05, 5).unwrap();
    let text = format!("seed = 5\ntrain.basic = {train_basic}\nvalid.all = {valid}\n");
    build_dataset(&split, &DatasetConfig::parse(&text).unwrap()).unwrap()
}

fn small_cfg() -> TrainConfig {
    TrainConfig { dim: 8, experts: 2, gamma: 3.0, lr: 0.01, epochs: 3, batch_size: 16, n_neg: 4, seed: 1, ..TrainConfig::default() }
}

#[test]
fn zero_parameters_give_log_two_per_task() {
    let ds = dataset(4, 0);
    let cfg = ModelConfig { dim: 4, experts: 2, gamma: 0.0, variant: Variant::Mtl };
    let mut m = RecModel::<f64>::new(cfg, ds.num_entities(), ds.num_relations(), ds.like_rel, 0).unwrap();
    let ids: Vec<_> = m.params().ids().collect();
    for id in ids {
        m.params_mut().get_mut(id).data_mut().fill(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (weights, expected) in [([1.0, 0.0, 0.0], 1.0), ([1.0, 1.0, 1.0], 3.0), ([0.5, 1.0, 0.0], 1.5)] {
        let batch: Vec<_> =
            ds.train.iter().map(|r| make_example(r, &ds.items, 7, weights, &mut rng).unwrap()).collect();
        let (loss, grads) = compute_loss(&m, &batch, weights).unwrap();
        assert!((loss - expected * std::f64::consts::LN_2).abs() < 1e-12, "{loss}");
        assert!(grads.all_finite());
    }
}

#[test]
fn loss_halves_on_a_small_problem() {
    let ds = dataset(10, 0);
    assert_eq!(ds.train.len(), 50);
    let cfg = TrainConfig { epochs: 200, batch_size: 50, n_neg: 8, dim: 16, ..small_cfg() };
    let out = train::<f64>(&ds, &cfg, |_| {}).unwrap();
    let first = out.log.first().unwrap().loss;
    let last = out.log.last().unwrap().loss;
    assert_eq!(out.log.len(), 200);
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn negatives_never_hit_answers() {
    let items = IdSet::from_unsorted((0..40).collect());
    let answers = IdSet::from_unsorted(vec![1, 5, 9, 22, 39]);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10_000 {
        let negs = sample_negatives(&answers, &items, 6, &mut rng).unwrap();
        assert!(negs.iter().all(|n| !answers.contains(*n) && items.contains(*n)));
        assert_eq!(negs.iter().collect::<BTreeSet<_>>().len(), 6);
    }
}

#[test]
fn training_is_reproducible() {
    let ds = dataset(4, 2);
    let hash = ds.vocab_hash();
    let run = || {
        let out = train::<f64>(&ds, &small_cfg(), |_| {}).unwrap();
        (checkpoint::to_bytes(&out.best, 1, &hash, out.best_epoch), out.log)
    };
    let (a, log_a) = run();
    let (b, log_b) = run();
    assert_eq!(a, b);
    assert_eq!(log_a, log_b);
    let other = train::<f64>(&ds, &TrainConfig { seed: 2, ..small_cfg() }, |_| {}).unwrap();
    assert_ne!(checkpoint::to_bytes(&other.best, 1, &hash, other.best_epoch), a);
}

#[test]
fn patience_and_epoch_bounds() {
    let ds = dataset(4, 2);
    let out = train::<f64>(&ds, &TrainConfig { patience: 0, epochs: 10, ..small_cfg() }, |_| {}).unwrap();
    assert_eq!(out.log.len(), 1);
    assert_eq!(out.best_epoch, 1);
    assert!(out.best_val.is_some());

    let cfg = TrainConfig { epochs: 0, ..small_cfg() };
    let out = train::<f64>(&ds, &cfg, |_| {}).unwrap();
    let init = RecModel::<f64>::new(cfg.model_config(), ds.num_entities(), ds.num_relations(), ds.like_rel, 1).unwrap();
    assert!(out.log.is_empty());
    assert_eq!(out.best_epoch, 0);
    assert_eq!(out.best, init);
}

#[test]
fn report_is_finite_and_monotone_in_cutoff() {
    let ds = dataset(4, 2);
    let m = RecModel::<f64>::new(small_cfg().model_config(), ds.num_entities(), ds.num_relations(), ds.like_rel, 0).unwrap();
    let ks = [1, 3, 10, 20, 80];
    let r = evaluate(&m, &ds.items, &ds.valid, &ks, TargetMode::HardOnly).unwrap();
    assert!(r.all_finite());
    assert_eq!(r.shapes.len(), 9);
    for metrics in r.shapes.values().chain([&r.avg]) {
        for w in metrics.hit.windows(2).chain(metrics.ndcg.windows(2)) {
            assert!(w[0] <= w[1] + 1e-12);
        }
        assert!(metrics.hit.iter().chain(&metrics.ndcg).all(|v| (-1e-12..=1.0 + 1e-12).contains(v)));
        // ndcg never exceeds hit at the same cutoff.
        assert!(metrics.hit.iter().zip(&metrics.ndcg).all(|(h, n)| n <= h));
    }
    assert!((r.avg_hit(80).unwrap() - 1.0).abs() < 1e-12);
    let table = r.to_table();
    assert_eq!(table.lines().count(), 1 + 2 * ks.len());
    assert_eq!(table.lines().next().unwrap().split_whitespace().count(), 11);
}

#[test]
fn random_scores_give_chance_level_hits() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n_items = 200;
    let trials = 4000;
    let mut hits = 0.0;
    for _ in 0..trials {
        let scores: Vec<(u32, f64)> = (0..n_items).map(|i| (i, rng.gen())).collect();
        let target = IdSet::singleton(rng.gen_range(0..n_items));
        hits += hit_at(filtered_ranks(&scores, &target, &target)[0], 20);
    }
    let rate = hits / trials as f64;
    assert!((rate - 0.1).abs() < 0.015, "{rate}");
}

fn brute_rank(scores: &[(u32, f64)], target: u32, known: &IdSet) -> usize {
    let kept: Vec<_> = scores.iter().copied().filter(|(i, _)| *i == target || !known.contains(*i)).collect();
    rank_by_score(kept).iter().position(|(i, _)| *i == target).unwrap() + 1
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 500, ..ProptestConfig::default() })]

    #[test]
    fn filtered_ranks_match_reranking(
        raw in prop::collection::vec(0u8..6, 2..20),
        known_mask in prop::collection::vec(any::<bool>(), 20),
        target_mask in prop::collection::vec(any::<bool>(), 20),
    ) {
        // Few distinct values so ties are common.
        let scores: Vec<(u32, f64)> = raw.iter().enumerate().map(|(i, s)| (i as u32, *s as f64)).collect();
        let n = scores.len();
        let mut targets: Vec<u32> = (0..n as u32).filter(|&i| target_mask[i as usize]).collect();
        if targets.is_empty() {
            targets.push(0);
        }
        let targets = IdSet::from_unsorted(targets);
        let known = IdSet::from_unsorted((0..n as u32).filter(|&i| known_mask[i as usize]).collect()).union(&targets);
        let ranks = filtered_ranks(&scores, &targets, &known);
        for (t, r) in targets.iter().zip(&ranks) {
            prop_assert_eq!(*r, brute_rank(&scores, t, &known));
        }

        // Ranks depend only on the score order.
        let warped: Vec<(u32, f64)> = scores.iter().map(|(i, s)| (*i, (s * 0.7 - 2.0).exp() + 10.0)).collect();
        prop_assert_eq!(filtered_ranks(&warped, &targets, &known), ranks.clone());

        for r in ranks {
            let mut prev = (0.0, 0.0);
            for k in 1..=n {
                let cur = (hit_at(r, k), ndcg_at(r, k));
                prop_assert!(cur.0 >= prev.0 && cur.1 >= prev.1 && cur.1 <= cur.0);
                prev = cur;
            }
        }
    }
}

#[test]
fn fresh_model_ranks_near_chance() {
    let kg = generate(&SyntheticConfig::medium(6)).to_graph().unwrap();
    let split = split_edges(&kg, 0.05, 6).unwrap();
    let ds = build_dataset(&split, &DatasetConfig::parse("seed = 6\ntest.all = 60\n").unwrap()).unwrap();
    let chance = 20.0 / ds.items.len() as f64;
    let cfg = TrainConfig { dim: 32, ..TrainConfig::default() };
    let mean: f64 = (0..3)
        .map(|seed| {
            let m = RecModel::<f64>::new(cfg.model_config(), ds.num_entities(), ds.num_relations(), ds.like_rel, seed).unwrap();
            evaluate(&m, &ds.items, &ds.test, &[20], TargetMode::HardOnly).unwrap().avg_hit(20).unwrap()
        })
        .sum::<f64>()
        / 3.0;
    assert!((mean - chance).abs() < 0.35 * chance, "hit@20 {mean:.4} vs chance {chance:.4}");
}
