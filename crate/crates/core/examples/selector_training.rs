// Trains the layer selector on a separable synthetic task.

use skiptrack::select::{run_synthetic, SyntheticConfig, TrainConfig};

pub fn run_example() -> anyhow::Result<()> {
    let cfg = SyntheticConfig {
        train_samples: 1000,
        test_samples: 300,
        train: TrainConfig { epochs: 150, ..SyntheticConfig::default().train },
        ..SyntheticConfig::default()
    };
    let (mlp, report) = run_synthetic(&cfg)?;
    println!("selector with {} parameters", mlp.param_count());
    println!("loss {:.4} -> {:.4}", report.loss_curve[0], report.loss_curve.last().unwrap());
    println!("train accuracy {:.3}, held-out {:.3}", report.train_accuracy, report.test_accuracy);
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
