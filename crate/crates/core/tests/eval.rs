mod common;

use std::collections::BTreeMap;

use common::*;
use feddpa::algorithms::{self, TrainedSystem};
use feddpa::eval::{self, adapter_param_count, evaluate, rouge1, EvalOptions};
use feddpa::federation::{Algorithm, FedConfig};
use feddpa::model::BackboneConfig;
use proptest::prelude::*;

/// Matches counted by merging the two sorted token lists.
fn rouge_oracle(pred: &str, reference: &str) -> f64 {
    let mut p: Vec<&str> = pred.split_whitespace().collect();
    let mut r: Vec<&str> = reference.split_whitespace().collect();
    p.sort_unstable();
    r.sort_unstable();
    let (mut i, mut j, mut m) = (0, 0, 0);
    while i < p.len() && j < r.len() {
        match p[i].cmp(r[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                m += 1;
                i += 1;
                j += 1;
            }
        }
    }
    if m == 0 {
        0.0
    } else {
        2.0 * m as f64 / (p.len() + r.len()) as f64
    }
}

fn words() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "1", "2", "odd"]), 0..8).prop_map(|v| v.join(" "))
}

proptest! {
    #[test]
    fn rouge_matches_sorted_merge(pred in words(), reference in words()) {
        match rouge1(&pred, &reference) {
            Ok(s) => {
                prop_assert!((s - rouge_oracle(&pred, &reference)).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&s));
            }
            Err(_) => prop_assert!(reference.trim().is_empty()),
        }
    }
}

fn opts() -> EvalOptions {
    EvalOptions {
        subsample: Some(3),
        keep_instances: true,
        keep_alphas: true,
        ..EvalOptions::default()
    }
}

#[test]
fn averages_reaggregate_from_instances() {
    let bb = tiny_backbone(0);
    let ds = small_suite(0);
    let s = algorithms::train(&bb, &ds, &small_fed(0), None).unwrap();
    let r = evaluate(&bb, &s, &ds, &opts()).unwrap();
    let mut by: BTreeMap<(usize, String), Vec<f64>> = BTreeMap::new();
    for i in &r.instances {
        by.entry((i.client, i.task.clone())).or_default().push(i.rouge1);
        assert!((i.rouge1 - rouge_oracle(&i.prediction, &i.reference)).abs() < 1e-12);
    }
    for c in &r.clients {
        let per_task: Vec<f64> = r
            .task_names
            .iter()
            .map(|t| {
                let v = &by[&(c.client, t.clone())];
                assert_eq!(v.len(), 3);
                v.iter().sum::<f64>() / 3.0
            })
            .collect();
        assert!(max_abs_diff(&per_task, &c.task_scores) < 1e-12);
        assert!((c.personalization - per_task[c.task]).abs() < 1e-12);
        let ttp = per_task.iter().sum::<f64>() / per_task.len() as f64;
        assert!((c.test_time.unwrap() - ttp).abs() < 1e-12);
    }
    let pers = r.clients.iter().map(|c| c.personalization).sum::<f64>() / r.clients.len() as f64;
    assert!((r.avg_personalization - pers).abs() < 1e-12);
}

#[test]
fn weighting_calls_are_counted_per_scored_instance() {
    let bb = tiny_backbone(1);
    let ds = small_suite(1);
    let s = algorithms::train(&bb, &ds, &small_fed(1), None).unwrap();
    let r = evaluate(&bb, &s, &ds, &opts()).unwrap();
    let per_client = (ds.num_tasks() + ds.unseen.len()) * 3;
    assert_eq!(r.weighting_calls, ds.num_clients() * per_client);
    assert_eq!(r.alphas.len(), r.weighting_calls);
    let lambda = s.config.effective_lambda();
    assert!(r.alphas.iter().all(|a| a.alpha >= 0.0 && a.alpha <= lambda + 1e-15 && a.scores.len() == 5));

    let own_only = EvalOptions {
        test_time: false,
        unseen: false,
        ..opts()
    };
    let r = evaluate(&bb, &s, &ds, &own_only).unwrap();
    assert_eq!(r.weighting_calls, ds.num_clients() * 3);
    assert_eq!(r.avg_test_time, None);
    assert!(r.mean_alpha_shifted.is_none());

    let fixed = TrainedSystem {
        config: FedConfig {
            dynamic_weighting: false,
            ..s.config.clone()
        },
        ..s
    };
    assert_eq!(evaluate(&bb, &fixed, &ds, &opts()).unwrap().weighting_calls, 0);
}

#[test]
fn fedit_clients_share_scores() {
    let bb = tiny_backbone(2);
    let ds = small_suite(2);
    let cfg = FedConfig {
        algorithm: Algorithm::Fedit,
        ..small_fed(2)
    };
    let s = algorithms::train(&bb, &ds, &cfg, None).unwrap();
    let r = evaluate(&bb, &s, &ds, &opts()).unwrap();
    assert!(r.clients.windows(2).all(|w| w[0].task_scores == w[1].task_scores && w[0].test_time == w[1].test_time));
    assert_eq!(r.weighting_calls, 0);
}

#[test]
fn fixed_mix_endpoints_reduce_to_single_adapters() {
    let bb = tiny_backbone(3);
    let ds = small_suite(3);
    let base = FedConfig {
        lr: 2.0,
        ..small_fed(3)
    };
    let f = algorithms::train(&bb, &ds, &FedConfig { algorithm: Algorithm::FeddpaF, ..base.clone() }, None).unwrap();
    let clients = feddpa::federation::clients_from_dataset(&ds).unwrap();
    let lora = algorithms::with_finetuned(&bb, &clients, &f.global_view(), Algorithm::Fedlora).unwrap();
    let at = |alpha: f64| {
        let sys = TrainedSystem {
            config: FedConfig {
                dynamic_weighting: false,
                alpha,
                ..f.config.clone()
            },
            ..f.clone()
        };
        evaluate(&bb, &sys, &ds, &opts()).unwrap()
    };
    let scores = |r: &eval::MetricsReport| r.clients.iter().map(|c| c.task_scores.clone()).collect::<Vec<_>>();
    let global_only = evaluate(&bb, &f.global_view(), &ds, &opts()).unwrap();
    let local_only = evaluate(&bb, &lora, &ds, &opts()).unwrap();
    assert_eq!(scores(&at(0.0)), scores(&global_only));
    assert_eq!(scores(&at(1.0)), scores(&local_only));
}

#[test]
fn bare_system_equals_zero_round_fedit() {
    let bb = tiny_backbone(4);
    let ds = small_suite(4);
    let cfg = FedConfig {
        algorithm: Algorithm::Fedit,
        rounds: 0,
        ..small_fed(4)
    };
    let zero = algorithms::train(&bb, &ds, &cfg, None).unwrap();
    let bare = TrainedSystem {
        global: None,
        ..zero.clone()
    };
    let a = evaluate(&bb, &zero, &ds, &opts()).unwrap();
    let b = evaluate(&bb, &bare, &ds, &opts()).unwrap();
    assert_eq!(a.clients, b.clients);
    assert_eq!(a.instances, b.instances);
}

#[test]
fn evaluation_rejects_a_foreign_backbone() {
    let bb = tiny_backbone(5);
    let ds = small_suite(5);
    let s = algorithms::train(&bb, &ds, &small_fed(5), None).unwrap();
    assert!(evaluate(&tiny_backbone(6), &s, &ds, &opts()).is_err());
}

#[test]
fn evaluation_is_worker_independent() {
    let bb = tiny_backbone(6);
    let ds = small_suite(6);
    let s = algorithms::train(&bb, &ds, &small_fed(6), None).unwrap();
    let one = evaluate(&bb, &s, &ds, &opts()).unwrap();
    let three = evaluate(&bb, &s, &ds, &EvalOptions { workers: 3, ..opts() }).unwrap();
    assert_eq!(eval::clients_csv(&one), eval::clients_csv(&three));
    assert_eq!(one, three);
}

#[test]
fn adapter_size_closed_form() {
    let c = BackboneConfig::default();
    let r = 8;
    assert_eq!(adapter_param_count(&c, r), c.n_layers * 2 * r * (c.d_model + c.d_model));
    let a = feddpa::lora::LoraAdapter::new(&c, r, 0).unwrap();
    assert_eq!(a.param_count(), adapter_param_count(&c, r));
}
