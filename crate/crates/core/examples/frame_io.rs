//! Write a rain frame in the binary grid format, read it back and crop it.
//!
//! ```text
//! cargo run --example frame_io -- [PATH]
//! ```

use ethcast::gridio::{read_frame, read_header, write_frame, GridFrame, Variable};

fn main() -> ethcast::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "frame_io.rfgd".into());
    let (rows, cols) = (24, 32);
    let values = (0..rows * cols)
        .map(|i| {
            let (r, c) = ((i / cols) as f32, (i % cols) as f32);
            (8.0 - ((r - 12.0).powi(2) + (c - 16.0).powi(2)) / 16.0).max(0.0)
        })
        .collect();
    let frame = GridFrame::new(Variable::RainMmh, 1_622_548_800, rows, cols, values)?;
    write_frame(&frame, &path)?;

    let header = read_header(&path)?;
    println!("{path}: {:?}", header);
    let back = read_frame(&path)?;
    assert_eq!(back, frame);
    let centre = back.crop_center(8, 8)?;
    println!("centre 8x8 max {:.2} mm/h", centre.values.iter().cloned().fold(0.0, f32::max));
    Ok(())
}
