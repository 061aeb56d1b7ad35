use lpdt::envs::{
    expert_reference_return, generate_dataset, mean_policy_return, reset, step, task_split, EnvState, Family, HORIZON, SIGMAS, V_MAX,
};

fn ramp_return(horizon: usize) -> f64 {
    // unit thrust from rest: speed 0.1·t until the clamp at V_MAX
    (1..=horizon).map(|t| (0.1 * t as f64).min(V_MAX)).sum()
}

#[test]
fn unit_thrust_from_rest_follows_clamped_ramp() {
    assert!((ramp_return(HORIZON) - 109.0).abs() < 1e-12);
    for task in Family::PointDir.tasks() {
        let u = [task.param.cos(), task.param.sin()];
        let mut s = EnvState { pos: vec![0.0, 0.0], vel: vec![0.0, 0.0], step_count: 0 };
        let mut total = 0.0;
        let mut done = false;
        while !done {
            let (next, r, d) = step(&s, &u, &task).unwrap();
            total += r;
            done = d;
            s = next;
        }
        assert!((total - ramp_return(HORIZON)).abs() < 1e-9, "task {}: {total}", task.task_index);
    }
}

#[test]
fn stored_rewards_replay_exactly() {
    for family in [Family::PointDir, Family::PointVel] {
        let tasks: Vec<usize> = (0..family.n_tasks()).collect();
        let ds = generate_dataset(family, &tasks, 3, 21).unwrap();
        let n = family.da();
        for td in ds.tasks.values() {
            let spec = family.task(td.task_id).unwrap();
            for tr in &td.trajectories {
                for t in 0..tr.len() {
                    let obs = tr.states.row(t);
                    let state = EnvState { pos: obs[..n].to_vec(), vel: obs[n..].to_vec(), step_count: t };
                    let (next, r, done) = step(&state, tr.actions.row(t), &spec).unwrap();
                    assert_eq!(r.to_bits(), tr.rewards.data()[t].to_bits());
                    assert_eq!(done, t + 1 == tr.len());
                    if t + 1 < tr.len() {
                        assert_eq!(next.observation(), tr.states.row(t + 1));
                    }
                    let speed = obs[n..].iter().map(|v| v * v).sum::<f64>().sqrt();
                    assert!(speed <= V_MAX + 1e-12);
                }
            }
        }
    }
}

#[test]
fn noise_never_beats_the_expert() {
    for family in [Family::PointDir, Family::PointVel] {
        for task in family.tasks() {
            for seed in 0..3 {
                let expert = expert_reference_return(&task, 100, seed).unwrap();
                for sigma in SIGMAS {
                    let noisy = mean_policy_return(&task, sigma, 100, seed).unwrap();
                    assert!(noisy <= expert, "{family} task {} sigma {sigma}: {noisy} > {expert}", task.task_index);
                }
            }
        }
    }
}

#[test]
fn reset_speeds_are_bounded() {
    for family in [Family::PointDir, Family::PointVel] {
        let task = family.task(0).unwrap();
        for seed in 0..1000 {
            let s = reset(&task, seed);
            assert!(s.pos.iter().all(|&x| x == 0.0));
            assert!(s.vel.iter().all(|v| v.abs() < 0.1));
            assert_eq!(s, reset(&task, seed));
        }
    }
}

#[test]
fn regeneration_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_dataset(Family::PointVel, &[0, 2, 7], 4, 8).unwrap().save(a.path()).unwrap();
    generate_dataset(Family::PointVel, &[0, 2, 7], 4, 8).unwrap().save(b.path()).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 4);
    for n in names {
        assert_eq!(std::fs::read(a.path().join(&n)).unwrap(), std::fs::read(b.path().join(&n)).unwrap());
    }
}

#[test]
fn velocity_test_goals_are_interior() {
    let (train, test) = task_split(Family::PointVel);
    let goals = |ids: &[usize]| ids.iter().map(|&i| Family::PointVel.task(i).unwrap().param).collect::<Vec<_>>();
    let train_goals = goals(&train);
    let lo = train_goals.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = train_goals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for g in goals(&test) {
        assert!(g > lo && g < hi);
    }
    assert_eq!(task_split(Family::PointVel), (train, test));
}
