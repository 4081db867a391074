//! Persistence and block-matching advection on a moving synthetic storm.

use ethcast::baselines::{advection_nowcast, estimate_motion, persistence, MotionParams};
use ethcast::synthgen::{gen_event, SynthCell, SynthEventParams};
use ethcast::verify::pixel_metrics;

fn main() -> ethcast::Result<()> {
    let cell = SynthCell { row: 20.0, col: 16.0, v_row: 0.5, v_col: 1.0, amplitude: 12.0, sigma: 5.0, growth: 0.0 };
    let event = gen_event(&SynthEventParams {
        seed: 1,
        start_timestamp: 0,
        rows: 64,
        cols: 64,
        cells: vec![cell],
        eth_base: 3.0,
        eth_gain: 60.0,
        eth_noise_sd: 0.0,
        frames: 22,
        growth_onset: 0,
        artifact_rings: false,
    })?;
    let inputs = &event.rain[..4];
    let params = MotionParams { block: 16, search_radius: 4 };
    let motion = estimate_motion(inputs, &params)?;
    let (u, v) = (motion.u.iter().sum::<f64>() / motion.u.len() as f64, motion.v.iter().sum::<f64>() / motion.v.len() as f64);
    println!("mean motion: u {u:.2} px/step (cols), v {v:.2} px/step (rows)");

    let still = persistence(&inputs[3], 18);
    let moved = advection_nowcast(inputs, &params, 18)?;
    println!("lead    persistence MSE   advection MSE");
    for k in (0..18).step_by(3) {
        let obs = &event.rain[4 + k];
        let p = pixel_metrics(&still[k], obs)?.mse;
        let a = pixel_metrics(&moved[k], obs)?.mse;
        println!("+{:>3} min {:>17} {:>15}", (k + 1) * 5, p, a);
    }
    Ok(())
}
