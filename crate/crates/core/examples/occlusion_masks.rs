// Uniform and Cox-process block masks, their statistics and the
// occlusion-robustness loss through a small frozen backbone.

use skiptrack::backbone::BackboneWeights;
use skiptrack::config::ModelConfig;
use skiptrack::mask::{
    cox_intensity, generate_mask, mask_statistics, orr_diagnostic, MaskConfig, MaskMode, MaskPattern,
};
use skiptrack::rng::SeededRng;
use skiptrack::tensor::Tensor;

fn draw(p: &MaskPattern) {
    for i in 0..p.grid_h {
        let row: String = (0..p.grid_w).map(|j| if p.is_masked(i, j) { '#' } else { '.' }).collect();
        println!("  {row}");
    }
}

pub fn run_example() -> anyhow::Result<()> {
    for mode in [MaskMode::Uniform, MaskMode::Cox] {
        let cfg = MaskConfig { mode, seed: 5, ..MaskConfig::default() };
        let p = generate_mask(&cfg)?;
        println!("{mode} mask, {} of {} blocks:", p.masked_count, p.cell_count());
        draw(&p);
        let stats = mask_statistics(&cfg, 2000)?;
        println!(
            "  2000 trials: mean {:.3} std {:.3}, centre {:.3} corner {:.3}",
            stats.mean_masked,
            stats.std_masked,
            stats.frequency(4, 4),
            stats.frequency(0, 0)
        );
    }

    let field = cox_intensity(8, 8, 0.25, 0.25)?;
    println!("Cox intensity peak {:.3}, expected masked {:.3}", field.max(), field.expected_masked);

    let model = ModelConfig::tiny();
    let w = BackboneWeights::init(&model, &mut SeededRng::new(2));
    let mut rng = SeededRng::new(9);
    let z = Tensor::from_fn(&[3, 8, 8], |_| rng.uniform_f32(-1.0, 1.0));
    let s = Tensor::from_fn(&[3, 16, 16], |_| rng.uniform_f32(-1.0, 1.0));
    for ratio in [0.0, 0.5] {
        let cfg = MaskConfig {
            mask_ratio: ratio,
            seed: 1,
            ..MaskConfig::with_grid(4, 4, 2)
        };
        let p = generate_mask(&cfg)?;
        println!("ORR loss at ratio {ratio}: {:e}", orr_diagnostic(&z, &s, &p, 2, &model, &w)?);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
