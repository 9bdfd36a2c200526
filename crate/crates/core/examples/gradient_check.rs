// Hand-written selector gradients against central differences.

use skiptrack::select::{gradient_check, GradCheckConfig};

pub fn run_example() -> anyhow::Result<()> {
    let r = gradient_check(&GradCheckConfig { points: 5, seed: 7, ..GradCheckConfig::default() })?;
    println!(
        "{} points, {} coordinates, {} skipped at kinks, max relative error {:e}",
        r.points, r.checked, r.skipped_kinks, r.max_rel_error
    );
    anyhow::ensure!(r.max_rel_error < 1e-4);
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
