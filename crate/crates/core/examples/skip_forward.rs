// Full versus skip forward on one random template/search pair.

use skiptrack::backbone::{block_flops, blocks_run, ForwardMode};
use skiptrack::bench::{forward, ForwardInput};
use skiptrack::config::ModelConfig;
use skiptrack::model::ModelWeights;

pub fn run_example() -> anyhow::Result<()> {
    let cfg = ModelConfig::tiny();
    let model = ModelWeights::init(&cfg, 7)?;
    let input = ForwardInput::random(&cfg, 1);

    for mode in [ForwardMode::Full, ForwardMode::Skip] {
        let out = forward(&input, &model, &cfg, mode)?;
        let b = out.search_box;
        println!(
            "{mode}: blocks {:?} k={:?} box=({:.2}, {:.2}, {:.2}, {:.2})",
            out.trace.blocks, out.chosen_k, b.cx, b.cy, b.w, b.h
        );
        if let Some(sel) = &out.selection {
            println!("  selector probabilities {:?}", sel.probabilities);
        }
    }

    let big = ModelConfig::default();
    let ratio = (blocks_run(&big, ForwardMode::Skip) as u64 * block_flops(&big)) as f64
        / (blocks_run(&big, ForwardMode::Full) as u64 * block_flops(&big)) as f64;
    println!("default config block-FLOP ratio skip/full = {ratio}");
    anyhow::ensure!(ratio == 0.75);
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
