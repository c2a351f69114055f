//! Evaluation-mode invariants of the query decoder: attention rows are
//! probability distributions, query order is pure labelling, and responses
//! depend on clip content rather than clip position or multiplicity.

use rand::Rng;
use rand_distr::StandardNormal;

use tqn_core::decoder::{multi_task_loss, TqnConfig, TqnModel};
use tqn_core::factorization::bundled;
use tqn_core::rngs::stream_rng;
use tqn_core::tensor::{Tape, Tensor};

const STREAM_TEST_PHI: u64 = 9;

fn random_phi(seed: u64, t: usize, d: usize) -> Tensor {
    let mut rng = stream_rng(seed, STREAM_TEST_PHI);
    Tensor::new(
        vec![t, d],
        (0..t * d)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect(),
    )
    .unwrap()
}

/// Eval-mode responses, per-query logits, and multi-task loss on one tape.
fn eval_forward(model: &TqnModel, phi: &Tensor, targets: &[usize]) -> (Tensor, Vec<Tensor>, f64) {
    let mut tape = Tape::new();
    let staged = model.stage(&mut tape);
    let phi_id = tape.leaf(phi);
    let fwd = model.forward(&mut tape, &staged, phi_id, None).unwrap();
    let logit_ids = model
        .classify(&mut tape, &staged, fwd.classifier_input)
        .unwrap();
    let loss = multi_task_loss(&mut tape, &logit_ids, targets).unwrap();
    let responses = tape.value(fwd.responses).clone();
    let logits = logit_ids.iter().map(|&l| tape.value(l).clone()).collect();
    let loss = tape.value(loss).item();
    (responses, logits, loss)
}

#[test]
fn attention_rows_are_probability_distributions() {
    let schema = bundled::synthetic().unwrap();
    let config = TqnConfig::for_schema(&schema, 32, 32, 2, 2, 64, 0.1, 0.5);
    let model = TqnModel::init(config, &mut stream_rng(11, 1)).unwrap();
    let phi = random_phi(4, 23, 32);
    let map = model.extract_attention(&phi).unwrap();
    assert!(
        map.max_row_sum_error() < 1e-6,
        "worst per-head row-sum error {}",
        map.max_row_sum_error()
    );
    let agg = &map.aggregate;
    for q in 0..agg.shape()[0] {
        let sum: f64 = agg.row(q).iter().sum();
        assert!((sum - 1.0).abs() < 1e-6, "aggregate row {q} sums to {sum}");
    }
}

#[test]
fn query_order_is_pure_labelling() {
    let schema = bundled::synthetic().unwrap();
    let config = TqnConfig::for_schema(&schema, 16, 16, 2, 2, 24, 0.0, 0.0);
    let model_a = TqnModel::init(config.clone(), &mut stream_rng(11, 1)).unwrap();
    let k = config.query_count();

    // Slot j of the permuted model holds original query perm[j].
    let perm: Vec<usize> = vec![2, 0, 3, 1];
    assert_eq!(perm.len(), k);

    let mut config_b = config.clone();
    config_b.head_sizes = perm.iter().map(|&i| config.head_sizes[i]).collect();
    let mut model_b = TqnModel::init(config_b, &mut stream_rng(99, 1)).unwrap();

    let params_a: std::collections::BTreeMap<String, Tensor> = model_a
        .store()
        .iter()
        .map(|(name, t)| (name, t.clone()))
        .collect();

    let qe = &params_a["model.query_embed"];
    let d = qe.shape()[1];
    let mut permuted = Vec::with_capacity(k * d);
    for &i in &perm {
        permuted.extend_from_slice(qe.row(i));
    }
    model_b
        .store_mut()
        .set_by_name("query_embed", Tensor::new(vec![k, d], permuted).unwrap())
        .unwrap();
    for (name, tensor) in &params_a {
        if name.contains(".layer") {
            model_b
                .store_mut()
                .set_by_name(name, tensor.clone())
                .unwrap();
        }
    }
    for (j, &i) in perm.iter().enumerate() {
        for suffix in ["w", "b"] {
            model_b
                .store_mut()
                .set_by_name(
                    &format!("head{j}.{suffix}"),
                    params_a[&format!("model.head{i}.{suffix}")].clone(),
                )
                .unwrap();
        }
    }

    let phi = random_phi(6, 9, 16);
    let targets_a: Vec<usize> = config
        .head_sizes
        .iter()
        .enumerate()
        .map(|(i, &n)| (i * 2 + 1) % n)
        .collect();
    let targets_b: Vec<usize> = perm.iter().map(|&i| targets_a[i]).collect();

    let (resp_a, logits_a, loss_a) = eval_forward(&model_a, &phi, &targets_a);
    let (resp_b, logits_b, loss_b) = eval_forward(&model_b, &phi, &targets_b);

    for (j, &i) in perm.iter().enumerate() {
        assert_eq!(
            resp_b.row(j),
            resp_a.row(i),
            "response row {j} != original row {i} bit-for-bit"
        );
        assert_eq!(
            logits_b[j].data(),
            logits_a[i].data(),
            "logits of slot {j} != original query {i} bit-for-bit"
        );
    }
    assert_eq!(
        loss_b.to_bits(),
        loss_a.to_bits(),
        "multi-task loss changed under query permutation: {loss_b} vs {loss_a}"
    );

    let map_a = model_a.extract_attention(&phi).unwrap();
    let map_b = model_b.extract_attention(&phi).unwrap();
    for (layer_a, layer_b) in map_a.per_layer_head.iter().zip(&map_b.per_layer_head) {
        for (head_a, head_b) in layer_a.iter().zip(layer_b) {
            for (j, &i) in perm.iter().enumerate() {
                assert_eq!(head_b.row(j), head_a.row(i), "attention rows must permute");
            }
        }
    }
}

#[test]
fn duplicated_clips_leave_responses_unchanged() {
    let schema = bundled::synthetic().unwrap();
    let config = TqnConfig::for_schema(&schema, 16, 16, 2, 2, 24, 0.1, 0.5);
    let model = TqnModel::init(config.clone(), &mut stream_rng(21, 1)).unwrap();
    let phi = random_phi(14, 7, 16);
    let doubled = Tensor::new(
        vec![14, 16],
        [phi.data(), phi.data()].concat(),
    )
    .unwrap();

    let targets: Vec<usize> = config.head_sizes.iter().map(|&n| n - 1).collect();
    let (resp_once, _, _) = eval_forward(&model, &phi, &targets);
    let (resp_twice, _, _) = eval_forward(&model, &doubled, &targets);

    let worst = resp_once
        .data()
        .iter()
        .zip(resp_twice.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    assert!(worst <= 1e-8, "duplicating clips moved responses by {worst}");

    assert_eq!(
        model.predict(&phi).unwrap(),
        model.predict(&doubled).unwrap(),
        "duplicating clips changed the prediction"
    );
}

#[test]
fn permuted_clips_permute_attention_columns() {
    let schema = bundled::synthetic().unwrap();
    let config = TqnConfig::for_schema(&schema, 16, 16, 2, 2, 24, 0.1, 0.5);
    let model = TqnModel::init(config.clone(), &mut stream_rng(31, 1)).unwrap();
    let t = 8;
    let phi = random_phi(41, t, 16);

    // Clip at position j of the shuffled input is original clip perm[j].
    let perm: Vec<usize> = vec![5, 0, 7, 2, 6, 1, 4, 3];
    let mut shuffled = Vec::with_capacity(t * 16);
    for &i in &perm {
        shuffled.extend_from_slice(phi.row(i));
    }
    let shuffled = Tensor::new(vec![t, 16], shuffled).unwrap();

    let targets: Vec<usize> = config.head_sizes.iter().map(|_| 0).collect();
    let (resp, _, _) = eval_forward(&model, &phi, &targets);
    let (resp_shuffled, _, _) = eval_forward(&model, &shuffled, &targets);
    let worst = resp
        .data()
        .iter()
        .zip(resp_shuffled.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    assert!(worst <= 1e-8, "permuting clips moved responses by {worst}");

    let map = model.extract_attention(&phi).unwrap();
    let map_shuffled = model.extract_attention(&shuffled).unwrap();
    for q in 0..map.aggregate.shape()[0] {
        for (j, &i) in perm.iter().enumerate() {
            let original = map.aggregate.at(q, i);
            let moved = map_shuffled.aggregate.at(q, j);
            assert!(
                (original - moved).abs() <= 1e-8,
                "aggregate attention of query {q} did not follow clip {i} to slot {j}"
            );
        }
    }
}
