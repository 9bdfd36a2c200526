// Saves a full model to the `LGTW` container and reads it back.

use skiptrack::config::ModelConfig;
use skiptrack::model::ModelWeights;
use skiptrack::weights::{load_weights, save_weights};

pub fn run_example() -> anyhow::Result<()> {
    let cfg = ModelConfig::tiny();
    let model = ModelWeights::init(&cfg, 4)?;
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("tiny.lgtw");

    save_weights(&path, &model.to_named())?;
    let bytes = std::fs::metadata(&path)?.len();
    let back = ModelWeights::from_named(&cfg, &load_weights(&path)?)?;
    println!("{} tensors, {} values, {bytes} bytes", model.named().len(), model.param_count());
    for (name, t) in model.named().into_iter().take(4) {
        println!("  {name} {:?}", t.dims());
    }
    anyhow::ensure!(back == model, "round trip changed the weights");
    println!("round trip exact");
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
