use lpdt::data::{build_input, prompt_from, InputSequence};
use lpdt::envs::{generate_dataset, Family};
use lpdt::model::{loss_classifier, loss_infonce, loss_pdt, loss_total, LpdtConfig, LpdtModel, RegMode};
use lpdt::transformer::{TransformerConfig, TransformerWeights};
use lpdt_tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn config(reg_mode: RegMode) -> LpdtConfig {
    let transformer = TransformerConfig { n_layers: 2, n_heads: 2, d_model: 16, d_ff: 32, dropout: 0.0, ..Default::default() };
    LpdtConfig { transformer, reg_mode, n_train_tasks: 3, mlp_dim: 12, ..Default::default() }
}

fn model(reg_mode: RegMode, seed: u64) -> LpdtModel<f64> {
    let cfg = config(reg_mode);
    let body = TransformerWeights::<f64>::init_random(&cfg.transformer, seed).unwrap();
    LpdtModel::new(cfg, body, seed).unwrap()
}

/// One full-length (unpadded) sequence per task, prompts from another trajectory.
fn sequences(seed: u64) -> Vec<InputSequence> {
    let raw = generate_dataset(Family::PointDir, &[0, 1, 2], 1, seed).unwrap();
    let data = raw.normalized(&raw.meta.norm);
    let mut rng = StdRng::seed_from_u64(seed);
    let mut out = Vec::new();
    for task in 0..3 {
        for _ in 0..2 {
            let trs = &data.task(task).unwrap().trajectories;
            let prompt = prompt_from(&trs[0], rng.random_range(0..50), 5);
            out.push(build_input(&prompt, &trs[rng.random_range(1..3)], rng.random_range(0..40), 20).unwrap());
        }
    }
    out
}

fn actions(m: &LpdtModel<f64>, seqs: &[InputSequence]) -> Tensor<f64> {
    let mut g = Graph::new();
    let bound = m.bind(&mut g, false);
    let out = m.forward(&mut g, &bound, seqs, None).unwrap();
    g.value(out.actions).clone()
}

#[test]
fn pdt_loss_matches_loop() {
    let mut rng = StdRng::seed_from_u64(0);
    let (rows, da) = (12, 3);
    let pred = Tensor::<f64>::randn(&[rows, da], 1.0, &mut rng);
    let target = Tensor::<f64>::randn(&[rows, da], 1.0, &mut rng);
    let mask: Vec<bool> = (0..rows).map(|i| i % 4 != 0).collect();
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let l = loss_pdt(&mut g, p, &target, &mask).unwrap();
    let mut sum = 0.0;
    let mut n = 0.0;
    for i in 0..rows {
        if !mask[i] {
            continue;
        }
        for j in 0..da {
            sum += (pred.get(&[i, j]) - target.get(&[i, j])).powi(2);
            n += 1.0;
        }
    }
    assert!((g.value(l).item() - sum / n).abs() < 1e-12);
}

#[test]
fn classifier_loss_matches_formula() {
    let mut rng = StdRng::seed_from_u64(1);
    let logits = Tensor::<f64>::randn(&[7, 5], 2.0, &mut rng);
    let labels: Vec<usize> = (0..7).map(|i| (i * 3) % 5).collect();
    let mut g = Graph::new();
    let lv = g.constant(logits.clone());
    let l = loss_classifier(&mut g, lv, &labels).unwrap();
    let direct: f64 = (0..7)
        .map(|r| {
            let row = logits.row(r);
            -(row[labels[r]].exp() / row.iter().map(|v| v.exp()).sum::<f64>()).ln()
        })
        .sum::<f64>()
        / 7.0;
    assert!((g.value(l).item() - direct).abs() < 1e-12);

    let mut margin = Tensor::<f64>::zeros(&[1, 4]);
    margin.data_mut()[2] = 20.0;
    let mut g = Graph::new();
    let lv = g.constant(margin);
    let l = loss_classifier(&mut g, lv, &[2]).unwrap();
    assert!(g.value(l).item() < 1e-8);
}

fn infonce_enumeration(z: &Tensor<f64>, keys: &[usize], tau: f64) -> f64 {
    let n = keys.len();
    let unit: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let r = z.row(i);
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / norm).collect()
        })
        .collect();
    let sim = |i: usize, j: usize| unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum::<f64>() / tau;
    let mut total = 0.0;
    let mut anchors = 0.0;
    for i in 0..n {
        let pos: Vec<usize> = (0..n).filter(|&j| j != i && keys[j] == keys[i]).collect();
        if pos.is_empty() {
            continue;
        }
        anchors += 1.0;
        let denom: f64 = (0..n).filter(|&k| k != i).map(|k| sim(i, k).exp()).sum();
        total += pos.iter().map(|&j| -(sim(i, j).exp() / denom).ln()).sum::<f64>() / pos.len() as f64;
    }
    total / anchors
}

#[test]
fn infonce_matches_enumeration() {
    let mut rng = StdRng::seed_from_u64(2);
    for (keys, tau) in [(vec![0, 0, 1, 1, 2, 2], 1.0), (vec![0, 1, 0, 1, 0, 3], 0.5), (vec![4, 4, 4, 1, 1, 1], 2.0)] {
        let z = Tensor::<f64>::randn(&[6, 5], 1.0, &mut rng);
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let (l, skipped) = loss_infonce(&mut g, zv, &keys, tau).unwrap();
        assert!((g.value(l).item() - infonce_enumeration(&z, &keys, tau)).abs() < 1e-10);
        assert_eq!(skipped, keys.iter().filter(|k| keys.iter().filter(|j| j == k).count() == 1).count());
    }
}

#[test]
fn identical_embeddings_give_ln3() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::<f64>::ones(&[4, 6]));
    let (l, _) = loss_infonce(&mut g, z, &[0, 0, 1, 1], 1.0).unwrap();
    assert!((g.value(l).item() - 3f64.ln()).abs() < 1e-9);
}

proptest! {
    #[test]
    fn infonce_ignores_positive_rescaling(seed in 0u64..500, scales in prop::collection::vec(0.01f64..100.0, 6)) {
        let mut rng = StdRng::seed_from_u64(seed);
        let z = Tensor::<f64>::randn(&[6, 4], 1.0, &mut rng);
        let mut scaled = z.clone();
        for (r, c) in scales.iter().enumerate() {
            scaled.data_mut()[r * 4..(r + 1) * 4].iter_mut().for_each(|v| *v *= c);
        }
        let keys = [0, 1, 2, 0, 1, 2];
        let loss = |t: Tensor<f64>| {
            let mut g = Graph::new();
            let v = g.constant(t);
            let (l, _) = loss_infonce(&mut g, v, &keys, 1.0).unwrap();
            g.value(l).item()
        };
        prop_assert!((loss(z) - loss(scaled)).abs() < 1e-10);
    }
}

#[test]
fn zero_lambda_returns_pdt_loss_itself() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::scalar(0.7));
    let b = g.constant(Tensor::scalar(5.0));
    assert_eq!(loss_total(&mut g, a, Some(b), 0.0).unwrap(), a);
    let t = loss_total(&mut g, a, Some(b), 0.1).unwrap();
    assert!((g.value(t).item() - 1.2).abs() < 1e-15);
}

#[test]
fn embedding_is_linear_without_bias() {
    let m = model(RegMode::None, 0);
    let seqs = sequences(0);
    let doubled: Vec<InputSequence> = seqs
        .iter()
        .map(|s| {
            let mut d = s.clone();
            for t in [&mut d.rtg, &mut d.states, &mut d.actions, &mut d.prompt.rtg, &mut d.prompt.states, &mut d.prompt.actions] {
                t.data_mut().iter_mut().for_each(|v| *v *= 2.0);
            }
            d
        })
        .collect();
    let embed = |s: &[InputSequence]| {
        let mut g = Graph::new();
        let bound = m.bind(&mut g, false);
        let e = m.embed_tokens(&mut g, &bound, s).unwrap();
        g.value(e).clone()
    };
    let (e1, e2) = (embed(&seqs), embed(&doubled));
    assert_eq!(e1.shape(), [6 * 75, 16]);
    assert!(e1.scale(2.0).max_abs_diff(&e2) < 1e-12);

    let mut zero = seqs[0].clone();
    zero.states.data_mut().iter_mut().for_each(|v| *v = 0.0);
    let e = embed(&[zero]);
    // state token of the first context step
    assert!(e.row(3 * 5 + 1).iter().all(|&v| v == 0.0));
}

#[test]
fn predictions_ignore_future_steps() {
    let m = model(RegMode::Classifier, 3);
    let mut rng = StdRng::seed_from_u64(4);
    for trial in 0..20 {
        let seqs = sequences(trial);
        let base = actions(&m, &seqs);
        let t = rng.random_range(0..19);
        let mut perturbed = seqs.clone();
        for s in &mut perturbed {
            s.actions.data_mut()[t * 2..].iter_mut().for_each(|v| *v += rng.random_range(-3.0..3.0));
            s.states.data_mut()[(t + 1) * 4..].iter_mut().for_each(|v| *v += rng.random_range(-3.0..3.0));
            s.rtg.data_mut()[t + 1..].iter_mut().for_each(|v| *v += rng.random_range(-3.0..3.0));
        }
        let out = actions(&m, &perturbed);
        for b in 0..seqs.len() {
            for step in 0..=t {
                let r = b * 20 + step;
                assert!(base.row(r).iter().zip(out.row(r)).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }
}

#[test]
fn prompt_precedes_every_prediction() {
    let m = model(RegMode::Classifier, 3);
    let seqs = sequences(1);
    let base = actions(&m, &seqs);
    let mut perturbed = seqs.clone();
    perturbed.iter_mut().for_each(|s| s.prompt.states.data_mut().iter_mut().for_each(|v| *v += 1.0));
    let out = actions(&m, &perturbed);
    assert_ne!(base.row(0), out.row(0));
}

#[test]
fn predicted_actions_are_bounded() {
    let m = model(RegMode::Infonce, 5);
    let mut seqs = sequences(2);
    for s in &mut seqs {
        s.states.data_mut().iter_mut().for_each(|v| *v *= 1e6);
    }
    let a = actions(&m, &seqs);
    assert!(a.data().iter().all(|v| v.abs() <= 1.0));
    assert_eq!(a.shape(), [6 * 20, 2]);
}

fn grads(m: &LpdtModel<f64>) -> Vec<(String, Tensor<f64>)> {
    let seqs = sequences(7);
    let labels: Vec<usize> = seqs.iter().map(|s| s.task_id).collect();
    let mut g = Graph::new();
    let bound = m.bind(&mut g, true);
    let out = m.forward(&mut g, &bound, &seqs, None).unwrap();
    let l = m.losses(&mut g, &seqs, &out, &labels).unwrap();
    g.backward(l.l_total).unwrap();
    bound.trainable().iter().map(|n| (n.clone(), g.grad(bound.get(n).unwrap()).unwrap())).collect()
}

#[test]
fn regularizer_drives_the_prompt_encoder() {
    for mode in [RegMode::Classifier, RegMode::Infonce] {
        for (name, gr) in grads(&model(mode, 0)) {
            if name.starts_with("phi.") && name.ends_with(".w") {
                assert!(gr.data().iter().any(|v| *v != 0.0), "{mode}: {name} has zero gradient");
            }
        }
    }
    for (name, gr) in grads(&model(RegMode::None, 0)) {
        if name.starts_with("phi.") || name.starts_with("reg.") {
            assert!(gr.data().iter().all(|v| *v == 0.0), "{name} moved without a regularizer");
        }
    }
}

#[test]
fn exactly_the_adapted_set_is_trainable() {
    let m = model(RegMode::Classifier, 0);
    let mut g = Graph::new();
    let bound = m.bind(&mut g, true);
    let mut expected: Vec<String> = m
        .to_named()
        .keys()
        .filter(|n| ["embed.", "head.", "phi.", "reg.", "lora."].iter().any(|p| n.starts_with(p)) || *n == "pos_emb")
        .cloned()
        .collect();
    expected.sort();
    let mut got = bound.trainable().to_vec();
    got.sort();
    assert_eq!(got, expected);
    assert!(got.iter().all(|n| !n.starts_with("layer.") && !n.starts_with("final_ln.")));
    assert_eq!(m.trainable_param_count(), got.iter().map(|n| m.param(n).unwrap().numel()).sum::<usize>());

    let frozen_pos = LpdtModel::new(
        LpdtConfig { train_positions: false, ..config(RegMode::Classifier) },
        TransformerWeights::init_random(&config(RegMode::None).transformer, 0).unwrap(),
        0,
    )
    .unwrap();
    let mut g = Graph::<f64>::new();
    assert!(!frozen_pos.bind(&mut g, true).trainable().iter().any(|n| n == "pos_emb"));
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = model(RegMode::Classifier, 9);
    let raw = generate_dataset(Family::PointDir, &[0], 1, 0).unwrap();
    m.save(dir.path(), &raw.meta.norm).unwrap();
    let (back, norm) = LpdtModel::<f64>::load(dir.path()).unwrap();
    assert_eq!(back, m);
    assert_eq!(norm, raw.meta.norm);
}
