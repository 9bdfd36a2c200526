// Crops a search region that runs off the frame edge.

use skiptrack::tracker::{crop_resize, CropParams, Frame, Normalization};

pub fn run_example() -> anyhow::Result<()> {
    let frame = Frame::from_fn(20, 20, |x, y| [(x * 12) as u8, (y * 12) as u8, 0])?;
    println!("frame mean {:?}", frame.channel_mean());
    let crop = CropParams { cx: 2.0, cy: 10.0, side: 12.0, out_side: 6 };
    let t = crop_resize(&frame, &crop, &Normalization::raw())?;
    for v in 0..6 {
        let row: Vec<String> = (0..6).map(|u| format!("{:6.1}", t.at(&[0, v, u]))).collect();
        println!("{}", row.join(" "));
    }
    let (x, y) = crop.to_frame(3.0, 3.0);
    println!("crop centre maps back to ({x}, {y})");
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
