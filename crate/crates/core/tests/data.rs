use std::collections::HashSet;

use lpdt::data::{
    build_input, compute_returns_to_go, prompt_from, sample_batch, sample_prompt, subsample, Dataset, DatasetMeta, NormStats,
    TaskDataset, Trajectory,
};
use lpdt::envs::{generate_dataset, task_split, Family};
use lpdt_tensor::Tensor;
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use sha2::{Digest, Sha256};

fn suffix_sums_double_loop(r: &[f64]) -> Vec<f64> {
    (0..r.len())
        .map(|i| {
            let mut s = 0.0;
            for j in (i..r.len()).rev() {
                s += r[j];
            }
            s
        })
        .collect()
}

fn fingerprint(tr: &Trajectory) -> [u8; 32] {
    let mut h = Sha256::new();
    for t in [&tr.states, &tr.actions, &tr.rewards] {
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.update(tr.task_id.to_le_bytes());
    h.finalize().into()
}

fn small_dataset(n_traj: usize, len: usize, seed: u64) -> Dataset {
    let mut rng = StdRng::seed_from_u64(seed);
    let raw = generate_dataset(Family::PointVel, &[0, 1], 1, 0).unwrap();
    let mut tasks = std::collections::BTreeMap::new();
    for id in [0, 1] {
        let trajectories = (0..n_traj)
            .map(|_| {
                Trajectory::new(
                    Tensor::randn(&[len, 2], 1.0, &mut rng),
                    Tensor::uniform(&[len, 1], -1.0, 1.0, &mut rng),
                    Tensor::randn(&[len], 1.0, &mut rng),
                    id,
                )
                .unwrap()
            })
            .collect();
        tasks.insert(id, TaskDataset { task_id: id, trajectories });
    }
    Dataset { meta: DatasetMeta { horizon: len, ..raw.meta }, tasks }
}

#[test]
fn rtg_matches_double_loop_exactly() {
    let mut rng = StdRng::seed_from_u64(0);
    for _ in 0..20 {
        let r: Vec<f64> = (0..100).map(|_| rng.random_range(-3.0..3.0)).collect();
        assert_eq!(compute_returns_to_go(&r).unwrap().data(), suffix_sums_double_loop(&r).as_slice());
    }
}

#[test]
fn prompt_trajectory_frequencies_are_uniform() {
    let ds = small_dataset(3, 12, 1);
    let fps: Vec<Vec<f64>> = ds.task(0).unwrap().trajectories.iter().map(|t| t.states.data().to_vec()).collect();
    let mut rng = StdRng::seed_from_u64(2);
    let draws = 10_000;
    let mut counts = [0usize; 3];
    for _ in 0..draws {
        let p = sample_prompt(&ds, 0, 5, &mut rng).unwrap();
        let first = &p.states.data()[..2];
        let start = p.timesteps[0];
        let which = fps.iter().position(|s| &s[start * 2..start * 2 + 2] == first).unwrap();
        counts[which] += 1;
    }
    let p = 1.0 / 3.0;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - draws as f64 * p).abs() <= 3.0 * sigma, "{counts:?}");
    }
}

#[test]
fn batches_never_mix_tasks() {
    let raw = generate_dataset(Family::PointDir, &[0, 1, 2, 3], 2, 3).unwrap();
    let mut rng = StdRng::seed_from_u64(4);
    for _ in 0..1000 {
        let batch = sample_batch(&raw, &[0, 1, 2, 3], 4, 20, 5, &mut rng).unwrap();
        assert_eq!(batch.len(), 16);
        for (i, s) in batch.iter().enumerate() {
            assert_eq!(s.prompt.task_id, s.task_id);
            assert_eq!(s.task_id, [0, 1, 2, 3][i / 4]);
        }
    }
}

#[test]
fn batches_are_reproducible_per_seed() {
    let raw = generate_dataset(Family::PointDir, &[0, 1], 2, 3).unwrap();
    let a = sample_batch(&raw, &[0, 1], 16, 20, 5, &mut StdRng::seed_from_u64(9)).unwrap();
    let b = sample_batch(&raw, &[0, 1], 16, 20, 5, &mut StdRng::seed_from_u64(9)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 32);
    assert_eq!(a[0].n_tokens(), 75);
}

#[test]
fn subsample_is_a_subset() {
    let ds = small_dataset(100, 6, 7);
    let all: HashSet<[u8; 32]> = ds.tasks.values().flat_map(|t| t.trajectories.iter().map(fingerprint)).collect();
    let kept = subsample(&ds, 0.1, &mut StdRng::seed_from_u64(1)).unwrap();
    for td in kept.tasks.values() {
        assert_eq!(td.trajectories.len(), 10);
        for tr in &td.trajectories {
            assert!(all.contains(&fingerprint(tr)));
        }
    }
    let full = subsample(&ds, 1.0, &mut StdRng::seed_from_u64(1)).unwrap();
    assert_eq!(full, ds);
}

#[test]
fn normalized_training_states_are_centered() {
    let raw = generate_dataset(Family::PointDir, &(0..8).collect::<Vec<_>>(), 3, 5).unwrap();
    let (train, _) = task_split(Family::PointDir);
    let train_trajs: Vec<&Trajectory> = train.iter().flat_map(|t| raw.task(*t).unwrap().trajectories.iter()).collect();
    let stats = NormStats::compute(train_trajs.iter().copied()).unwrap();
    assert_eq!(stats, raw.meta.norm);
    let ds = raw.meta.ds;
    let mut sum = vec![0.0; ds];
    let mut n = 0.0;
    for tr in &train_trajs {
        for row in stats.normalize_trajectory(tr).states.data().chunks_exact(ds) {
            sum.iter_mut().zip(row).for_each(|(s, v)| *s += v);
            n += 1.0;
        }
    }
    for s in sum {
        assert!((s / n).abs() < 1e-6);
    }
}

#[test]
fn round_trip_through_disk_is_exact() {
    let raw = generate_dataset(Family::PointVel, &[2, 7], 2, 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    raw.save(dir.path()).unwrap();
    assert_eq!(Dataset::load(dir.path()).unwrap(), raw);
}

proptest! {
    #[test]
    fn rtg_is_monotone_for_nonnegative_rewards(r in prop::collection::vec(0.0f64..10.0, 1..200)) {
        let out = compute_returns_to_go(&r).unwrap();
        for w in out.data().windows(2) {
            prop_assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn prompts_are_contiguous_slices(seed in 0u64..1000, k_star in 1usize..12) {
        let ds = small_dataset(4, 12, seed);
        let mut rng = StdRng::seed_from_u64(seed);
        let p = sample_prompt(&ds, 1, k_star, &mut rng).unwrap();
        let start = p.timesteps[0];
        prop_assert_eq!(p.timesteps.clone(), (start..start + k_star).collect::<Vec<_>>());
        let matched = ds.task(1).unwrap().trajectories.iter().any(|tr| {
            let q = prompt_from(tr, start, k_star);
            q.states == p.states && q.actions == p.actions && q.rtg == p.rtg
        });
        prop_assert!(matched);
    }

    #[test]
    fn context_windows_are_left_padded_suffixes(len in 1usize..30, start_frac in 0.0f64..1.0, k in 1usize..25) {
        let ds = small_dataset(1, len, len as u64);
        let tr = &ds.task(0).unwrap().trajectories[0];
        let start = ((len as f64) * start_frac) as usize;
        let prompt = prompt_from(tr, 0, 1);
        let s = build_input(&prompt, tr, start, k).unwrap();
        let real = (len - start).min(k);
        let mask = s.context_mask();
        prop_assert_eq!(mask.iter().filter(|m| **m).count(), real);
        prop_assert!(mask[..k - real].iter().all(|m| !m));
        let rtg = tr.returns_to_go();
        prop_assert_eq!(&s.rtg.data()[k - real..], &rtg.data()[start..start + real]);
        prop_assert_eq!(&s.timesteps[k - real..], &(start..start + real).collect::<Vec<_>>()[..]);
    }
}
