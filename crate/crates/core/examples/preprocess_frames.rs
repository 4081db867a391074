//! Convert a reflectivity frame to rain rate and remove clutter with a morphological opening.

use ethcast::gridio::{GridFrame, Variable, DEFAULT_NODATA};
use ethcast::preprocess::{apply_mask, clutter_mask, dbz_to_rain, ClutterParams, ZRParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> ethcast::Result<()> {
    let (rows, cols) = (40, 40);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut dbz: Vec<f32> = (0..rows * cols)
        .map(|i| {
            let (r, c) = ((i / cols) as f32, (i % cols) as f32);
            let d2 = (r - 20.0).powi(2) + (c - 18.0).powi(2);
            if d2 < 100.0 {
                45.0 - d2 / 5.0
            } else {
                DEFAULT_NODATA
            }
        })
        .collect();
    // speckle: isolated bright pixels away from the storm
    for _ in 0..25 {
        let i = rng.gen_range(0..rows * cols);
        if dbz[i] == DEFAULT_NODATA {
            dbz[i] = 35.0;
        }
    }
    let frame = GridFrame::new(Variable::ReflectivityDbz, 0, rows, cols, dbz)?;
    let zr = ZRParams::default();
    let rain = dbz_to_rain(&frame, &zr)?;
    let wet = |f: &GridFrame| f.values.iter().filter(|&&v| v > 0.1).count();
    println!("45 dBZ = {:.2} mm/h, 7 dBZ = {:.4} mm/h", zr.rain_rate(45.0), zr.rain_rate(7.0));

    let mask = clutter_mask(&rain, &ClutterParams::default())?;
    let cleaned = apply_mask(&rain, &mask)?;
    println!("wet pixels before opening {}, after {}", wet(&rain), wet(&cleaned));
    for r in (0..rows).step_by(2) {
        let line: String = (0..cols)
            .map(|c| {
                if cleaned.get(r, c) > 0.1 {
                    '#'
                } else if rain.get(r, c) > 0.1 {
                    'x'
                } else {
                    '.'
                }
            })
            .collect();
        println!("{line}");
    }
    Ok(())
}
