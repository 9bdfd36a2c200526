// Times full and skip forwards side by side.

use skiptrack::backbone::ForwardMode;
use skiptrack::bench::{bench_interleaved, BenchCase};
use skiptrack::config::ModelConfig;
use skiptrack::model::ModelWeights;

pub fn run_example() -> anyhow::Result<()> {
    let cfg = ModelConfig::tiny();
    let model = ModelWeights::init(&cfg, 0)?;
    let cases: Vec<_> = [ForwardMode::Full, ForwardMode::Skip]
        .into_iter()
        .map(|mode| BenchCase { cfg: cfg.clone(), model: model.clone(), mode })
        .collect();
    for r in bench_interleaved(&cases, 40, 5, 4, 0)? {
        println!("{}", serde_json::to_string(&r)?);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
