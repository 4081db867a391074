//! Categorical scores, fractions skill score and pixel errors for a displaced forecast.

use ethcast::gridio::{GridFrame, Variable};
use ethcast::verify::{contingency, fss, pixel_metrics};

fn blob(rows: usize, cols: usize, r0: f32, c0: f32) -> ethcast::Result<GridFrame> {
    let values = (0..rows * cols)
        .map(|i| {
            let (r, c) = ((i / cols) as f32, (i % cols) as f32);
            10.0 * (-((r - r0).powi(2) + (c - c0).powi(2)) / 50.0).exp()
        })
        .collect();
    GridFrame::new(Variable::RainMmh, 0, rows, cols, values)
}

fn main() -> ethcast::Result<()> {
    let obs = blob(64, 64, 32.0, 32.0)?;
    let pred = blob(64, 64, 32.0, 38.0)?;
    let m = pixel_metrics(&pred, &obs)?;
    println!("MAE {} MSE {} ME {}", m.mae, m.mse, m.me);
    for t in [0.1, 1.0, 2.5, 5.0] {
        let tab = contingency(&pred, &obs, t)?;
        println!(
            "> {t:>4} mm/h: hits {:>4} misses {:>4} false alarms {:>4}  precision {} recall {} ETS {}",
            tab.hits,
            tab.misses,
            tab.false_alarms,
            tab.precision(),
            tab.recall(),
            tab.ets()
        );
    }
    // the 6-pixel displacement stops costing skill once the window covers it
    for r in [0, 2, 4, 8, 16] {
        println!("FSS(1 mm/h, radius {r:>2}) = {}", fss(&pred, &obs, 1.0, r)?);
    }
    Ok(())
}
