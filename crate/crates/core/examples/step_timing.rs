//! Times the forward pass, backward pass and optimizer update of one training step.

use std::time::Instant;

use lpdt::data::sample_batch;
use lpdt::envs::{generate_dataset, Family};
use lpdt::model::{LpdtConfig, LpdtModel};
use lpdt::transformer::{TransformerConfig, TransformerWeights};
use lpdt_tensor::Graph;
use rand::rngs::StdRng;
use rand::SeedableRng;

fn main() -> lpdt::Result<()> {
    let raw = generate_dataset(Family::PointDir, &[0, 1, 2, 3, 4, 5], 20, 0)?;
    let data = raw.normalized(&raw.meta.norm);
    let cfg = LpdtConfig::default();
    let body = TransformerWeights::<f32>::init_random(&TransformerConfig::default(), 0)?;
    let model = LpdtModel::new(cfg.clone(), body, 0)?;
    let mut rng = StdRng::seed_from_u64(0);
    let tasks = [0, 1, 2, 3, 4, 5];
    let (mut fwd, mut bwd) = (0.0, 0.0);
    let reps: usize = std::env::var("REPS").ok().and_then(|v| v.parse().ok()).unwrap_or(10);
    for _ in 0..reps {
        let batch = sample_batch(&data, &tasks, 16, cfg.context, cfg.k_star, &mut rng)?;
        let labels: Vec<usize> = batch.iter().map(|s| s.task_id).collect();
        let t0 = Instant::now();
        let mut g = Graph::new();
        let bound = model.bind(&mut g, true);
        let out = model.forward(&mut g, &bound, &batch, Some(&mut rng))?;
        let losses = model.losses(&mut g, &batch, &out, &labels)?;
        let t1 = Instant::now();
        g.backward(losses.l_total)?;
        let t2 = Instant::now();
        fwd += (t1 - t0).as_secs_f64();
        bwd += (t2 - t1).as_secs_f64();
    }
    println!("forward {:.4}s backward {:.4}s per step", fwd / reps as f64, bwd / reps as f64);
    Ok(())
}
