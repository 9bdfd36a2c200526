// Grouped coordinate attention on a random feature map.

use skiptrack::config::{GgcaConfig, GgcaPooling};
use skiptrack::ggca::{ggca_forward, ggca_param_count, GgcaWeights};
use skiptrack::rng::SeededRng;
use skiptrack::tensor::Tensor;

pub fn run_example() -> anyhow::Result<()> {
    let mut rng = SeededRng::new(3);
    let map = Tensor::from_fn(&[16, 6, 6], |_| rng.uniform_f32(-1.0, 1.0));
    let cfg = GgcaConfig { groups: 4, reduction: 2, pooling: GgcaPooling::AvgMax, min_mid_channels: 1 };

    let zeroed = GgcaWeights::zeroed(16, &cfg)?;
    let out = ggca_forward(&map, &cfg, &zeroed)?;
    println!("zeroed transform: max |out - x/4| = {:e}", out.max_abs_diff(&map.scale(0.25)));

    let w = GgcaWeights::init(16, &cfg, &mut rng, 0.5)?;
    let out = ggca_forward(&map, &cfg, &w)?;
    let shrunk = out.data().iter().zip(map.data()).all(|(o, x)| o.abs() < x.abs() || *x == 0.0);
    println!("random transform: every |out| < |in|: {shrunk}");

    for groups in [1, 2, 4, 8] {
        let c = GgcaConfig { groups, ..GgcaConfig::default() };
        println!("C=192 G={groups}: {} transform parameters", ggca_param_count(192, &c)?);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
