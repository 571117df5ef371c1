//! Sweep the fairness weight λ for a regularized trainer on synthetic biased
//! data and watch the accuracy/fairness trade-off, the exact network parity
//! d_F, and the layer similarity sum move together.
//!
//! ```bash
//! cargo run --release --example lambda_sweep
//! ```

use dralign::harness::{run, ttest, DatasetSource, ExperimentConfig};
use dralign::training::Method;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut config = ExperimentConfig::default();
    config.dataset = DatasetSource::Synth {
        n: 10_000,
        d: 6,
        bias: 0.8,
        noise: 0.5,
        seed: 0,
    };
    config.methods = vec![Method::FairReg];
    config.lambdas = vec![0.0, 0.2, 0.4, 0.6];
    config.hidden = vec![vec![16, 16]];
    config.seeds = vec![0, 1, 2];
    config.epochs = 15;
    config.out_dir = std::env::temp_dir().join("dralign_lambda_sweep");

    let rows = run(&config)?;
    println!("lambda  seed  ap      hard_dp  d_F        sim_sum");
    let mut by_lambda: Vec<(f64, Vec<f64>)> = Vec::new();
    for row in &rows {
        println!(
            "{:<7} {:<5} {:.4}  {:.4}   {:.3e}  {:.3}",
            row.point.lambda, row.seed, row.ap, row.hard_dp, row.d_f, row.sim_sum
        );
        match by_lambda.iter_mut().find(|(l, _)| *l == row.point.lambda) {
            Some((_, v)) => v.push(row.hard_dp),
            None => by_lambda.push((row.point.lambda, vec![row.hard_dp])),
        }
    }

    by_lambda.sort_by(|a, b| a.0.total_cmp(&b.0));
    let first = &by_lambda.first().unwrap().1;
    let last = &by_lambda.last().unwrap().1;
    let (t, p) = ttest(first, last)?;
    println!("\nhard_dp at λ={} vs λ={}: t = {t:.3}, p = {p:.4}", by_lambda[0].0, by_lambda.last().unwrap().0);
    println!("outputs in {}", config.out_dir.display());
    Ok(())
}
