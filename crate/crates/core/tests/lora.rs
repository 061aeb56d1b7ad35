use lpdt::envs::{generate_dataset, Family};
use lpdt::lora::{attention_targets, trainable_param_count, LoraAdapter, LoraConfig, LoraSet};
use lpdt::model::{LpdtConfig, LpdtModel};
use lpdt::train::train_step;
use lpdt::transformer::{TransformerConfig, TransformerWeights};
use lpdt_tensor::{AdamW, Tensor};
use nalgebra::DMatrix;
use rand::rngs::StdRng;
use rand::SeedableRng;

fn trained_adapter(d: usize, k: usize, rank: usize, seed: u64) -> LoraAdapter<f64> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut ad = LoraAdapter::<f64>::new("w", d, k, rank, 16.0, &mut rng).unwrap();
    ad.b = Tensor::randn(&[rank, k], 0.5, &mut rng);
    ad
}

#[test]
fn merged_weight_equals_adapter_forward() {
    let mut rng = StdRng::seed_from_u64(0);
    for (d, k, r) in [(8, 8, 2), (16, 12, 4), (32, 32, 8)] {
        let ad = trained_adapter(d, k, r, d as u64);
        let w0 = Tensor::<f64>::randn(&[d, k], 0.3, &mut rng);
        let merged = ad.merge(&w0).unwrap();
        for _ in 0..10 {
            let x = Tensor::<f64>::randn(&[5, d], 1.0, &mut rng);
            let via_merge = x.matmul(&merged).unwrap();
            let via_adapter = ad.forward(&x, &w0).unwrap();
            assert!(via_merge.max_abs_diff(&via_adapter) < 1e-12);
        }
    }
}

#[test]
fn merged_weight_matches_dense_reference() {
    let ad = trained_adapter(6, 5, 2, 4);
    let w0 = Tensor::<f64>::randn(&[6, 5], 1.0, &mut StdRng::seed_from_u64(5));
    let merged = ad.merge(&w0).unwrap();
    let s = ad.alpha / ad.rank as f64;
    for i in 0..6 {
        for j in 0..5 {
            let dense: f64 = (0..2).map(|p| ad.a.get(&[i, p]) * ad.b.get(&[p, j])).sum();
            assert!((merged.get(&[i, j]) - (w0.get(&[i, j]) + s * dense)).abs() < 1e-14);
        }
    }
}

#[test]
fn update_has_rank_at_most_r() {
    for (d, k, r) in [(16, 16, 1), (32, 24, 4), (128, 128, 8)] {
        let ad = trained_adapter(d, k, r, 7);
        let w0 = Tensor::<f64>::zeros(&[d, k]);
        let delta = ad.merge(&w0).unwrap();
        let m = DMatrix::from_row_slice(d, k, delta.data());
        let sv = m.singular_values();
        let top = sv.max();
        let numerical_rank = sv.iter().filter(|&&s| s > 1e-10 * top).count();
        assert!(numerical_rank <= r, "rank {numerical_rank} > {r}");
        assert_eq!(numerical_rank, r);
    }
}

#[test]
fn param_count_matches_enumeration() {
    for (layers, d, rank) in [(1, 16, 2), (2, 128, 8), (3, 64, 4)] {
        let t = TransformerConfig { n_layers: layers, d_model: d, d_ff: 4 * d, ..Default::default() };
        let cfg = LoraConfig { rank, ..Default::default() };
        let set = LoraSet::<f32>::new(&cfg, &t, 0).unwrap();
        let enumerated: usize = set.tensors().iter().map(|(_, x)| x.numel()).sum();
        assert_eq!(trainable_param_count(&t, &cfg).unwrap(), enumerated);
        let mut all = attention_targets(layers);
        all.sort();
        let mut got = set.targets();
        got.sort();
        assert_eq!(got, all);
    }
}

#[test]
fn training_leaves_frozen_base_untouched() {
    let raw = generate_dataset(Family::PointDir, &[0, 1], 2, 0).unwrap();
    let data = raw.normalized(&raw.meta.norm);
    let t = TransformerConfig { n_layers: 1, d_model: 16, d_ff: 32, ..Default::default() };
    let cfg = LpdtConfig { transformer: t.clone(), n_train_tasks: 2, mlp_dim: 16, ..Default::default() };
    let body = TransformerWeights::<f32>::init_random(&t, 0).unwrap();
    let mut model = LpdtModel::new(cfg, body, 0).unwrap();
    let before = model.clone();
    let mut opt = AdamW::with_lr(1e-2, 1e-4).unwrap();
    let mut rng = StdRng::seed_from_u64(1);
    for step in 0..30 {
        train_step(&mut model, &mut opt, &data, &[0, 1], 4, 0.25, step, &mut rng).unwrap();
    }
    for (name, t) in before.body.params.iter() {
        let after = model.body.params.get(name).unwrap();
        if name == "pos_emb" {
            assert!(!after.bitwise_eq(t));
        } else {
            assert!(after.bitwise_eq(t), "{name} changed");
        }
    }
    assert_ne!(model.lora, before.lora);
}

#[test]
fn save_load_preserves_adapters() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lora.nt");
    let t = TransformerConfig { n_layers: 2, d_model: 16, d_ff: 32, ..Default::default() };
    let mut set = LoraSet::<f32>::new(&LoraConfig { rank: 4, alpha: 8.0, targets: vec!["layer.1.attn.wv".into()] }, &t, 3).unwrap();
    set.tensor_mut("lora.layer.1.attn.wv.B").unwrap().data_mut()[0] = 0.5;
    set.save(&path).unwrap();
    let back = LoraSet::<f32>::load(&path, &t).unwrap();
    assert_eq!(back, set);
}
