// Tracks a drifting disc through a few synthetic frames.

use skiptrack::config::ModelConfig;
use skiptrack::model::ModelWeights;
use skiptrack::tracker::{track_sequence, BoundingBox, Frame, TrackerConfig};

fn disc_frame(cx: f32, cy: f32) -> skiptrack::Result<Frame> {
    Frame::from_fn(96, 72, |x, y| {
        let (dx, dy) = (x as f32 - cx, y as f32 - cy);
        if dx * dx + dy * dy < 64.0 {
            [230, 50, 40]
        } else {
            [(x * 2) as u8, (y * 3) as u8, 100]
        }
    })
}

pub fn run_example() -> anyhow::Result<()> {
    let cfg = ModelConfig::tiny();
    let model = ModelWeights::init(&cfg, 21)?;
    let frames = (0..6).map(|t| disc_frame(40.0 + 2.0 * t as f32, 36.0));
    let init = BoundingBox::new(40.0, 36.0, 16.0, 16.0)?;
    let records = track_sequence(frames, init, &model, &cfg, &TrackerConfig::default())?;
    for r in &records {
        println!("{}", serde_json::to_string(r)?);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
