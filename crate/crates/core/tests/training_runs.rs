mod common;

use deepword::graph::build_graph;
use deepword::prior::fit_prior;
use deepword::scene::Scene;
use deepword::synthgen::{generate, Difficulty, GenConfig};
use deepword::training::{history_to_jsonl, pair_loss, train, TrainConfig, TrainError};
use proptest::prelude::*;
use rand::Rng;

fn two_vehicle_scene() -> Scene {
    let scenes = generate(&GenConfig { seed: 4, n_scenes: 40, easy_vehicles: (2, 2), ..GenConfig::default() }).unwrap();
    scenes.into_iter().find(|s| s.relations.len() >= 3).expect("a scene with three labeled wheels")
}

fn small_train(epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig { epochs, batch_scenes: 4, ..TrainConfig::default() };
    cfg.model.features = 16;
    cfg.model.geo_hidden = 16;
    cfg
}

#[test]
fn single_scene_overfits() {
    let scene = two_vehicle_scene();
    let prior = fit_prior(&generate(&GenConfig { seed: 1, n_scenes: 200, ..GenConfig::default() }).unwrap(), 2, 0)
        .unwrap()
        .model;
    let cfg = TrainConfig { val_fraction: 0.0, learning_rate: 1e-2, ..small_train(200) };
    let out = train(std::slice::from_ref(&scene), &prior, &cfg).unwrap();
    let pred = out.model.predict(&scene, &build_graph(&scene, &prior, &cfg.graph_config())).unwrap();
    assert_eq!(pred.assignments, scene.owner_map());
    assert!(out.history.last().unwrap().loss < out.history[0].loss);
    assert!(out.history.iter().all(|r| r.val_acc.is_none()));
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let scenes = generate(&GenConfig { seed: 2, n_scenes: 30, ..GenConfig::default() }).unwrap();
    let prior = fit_prior(&scenes, 2, 0).unwrap().model;
    let cfg = TrainConfig { learning_rate: 0.0, ..small_train(3) };
    let out = train(&scenes, &prior, &cfg).unwrap();
    let fresh = deepword::relnet::RelNet::new(cfg.model.clone(), cfg.seed).unwrap();
    assert_eq!(out.model, fresh);
    assert!(out.history.windows(2).all(|w| w[0].loss == w[1].loss));
}

#[test]
fn same_seed_same_history_for_any_thread_count() {
    let scenes = generate(&GenConfig { seed: 6, n_scenes: 40, difficulty: Difficulty::Mixed, overlap_rate: 0.5, ..GenConfig::default() }).unwrap();
    let prior = fit_prior(&scenes, 2, 0).unwrap().model;
    let run = |threads| train(&scenes, &prior, &TrainConfig { threads, ..small_train(3) }).unwrap();
    let (a, b, c) = (run(1), run(1), run(3));
    assert_eq!(history_to_jsonl(&a.history), history_to_jsonl(&b.history));
    assert_eq!(a.model, b.model);
    assert_eq!(a.model, c.model);
    assert_eq!(a.val_scenes, c.val_scenes);
    let line = history_to_jsonl(&a.history).lines().next().unwrap().to_string();
    let v: serde_json::Value = serde_json::from_str(&line).unwrap();
    assert_eq!(v["epoch"], 1);
    assert!(v["loss"].is_f64() && v["val_acc"].is_f64());
}

#[test]
fn exploding_step_reports_divergence() {
    let scenes = generate(&GenConfig { seed: 2, n_scenes: 40, ..GenConfig::default() }).unwrap();
    let prior = fit_prior(&scenes, 2, 0).unwrap().model;
    let cfg = TrainConfig { learning_rate: 1e300, ..small_train(5) };
    match train(&scenes, &prior, &cfg) {
        Err(TrainError::Diverged { last_good, .. }) => {
            assert!(last_good.parameters().iter().all(|p| p.value.data().iter().all(|v| v.is_finite())));
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.history)),
    }
}

#[test]
fn no_positive_pairs_is_an_error() {
    let mut scenes = generate(&GenConfig { seed: 2, n_scenes: 5, ..GenConfig::default() }).unwrap();
    scenes.iter_mut().for_each(|s| s.relations.clear());
    let prior = fit_prior(&generate(&GenConfig { seed: 2, n_scenes: 50, ..GenConfig::default() }).unwrap(), 2, 0)
        .unwrap()
        .model;
    assert!(matches!(train(&scenes, &prior, &small_train(1)), Err(TrainError::NoPositives)));
}

proptest! {
    #[test]
    fn pair_loss_matches_weighted_mean_square(seed in 0u64..10_000, n in 1usize..40) {
        let mut r = common::rng(seed);
        let s: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| if r.random::<bool>() { 1.0 } else { 0.0 }).collect();
        let w: Vec<f64> = y.iter().map(|&y| if y > 0.0 { 1.0 } else { 0.1 }).collect();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..n {
            num += w[i] * (s[i] - y[i]).powi(2);
            den += w[i];
        }
        let loss = pair_loss(&s, &y, &w).unwrap();
        prop_assert!(loss >= 0.0);
        prop_assert!((loss - num / den).abs() < 1e-12);
        let ones = vec![1.0; n];
        let mse = s.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64;
        prop_assert!((pair_loss(&s, &y, &ones).unwrap() - mse).abs() < 1e-12);
    }
}
