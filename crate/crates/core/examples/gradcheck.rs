//! Finite-difference gradient checks for every layer and a tiny two-channel U-Net.

use ethcast::autotensor::layer_gradchecks;
use ethcast::unet3d::{gradcheck_model, ModelConfig};

fn main() -> ethcast::Result<()> {
    let tol = 1e-4;
    for (name, r) in layer_gradchecks(0, tol)? {
        println!("{name:<10} {:>5} coordinates, max relative error {:.2e}", r.checked, r.max_rel_error);
    }
    let config = ModelConfig { in_channels: 2, levels: 2, base_channels: 4, rows: 8, cols: 8, ..ModelConfig::default() };
    let r = gradcheck_model(&config, 0, tol)?;
    println!("unet3d     {:>5} coordinates, max relative error {:.2e}", r.checked, r.max_rel_error);
    r.into_result().map(|_| ())
}
