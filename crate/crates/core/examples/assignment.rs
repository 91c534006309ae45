//! Minimum-cost assignment on a rectangular matrix and the 6D rotation
//! codec round trip.

use cooptrack_numerics::{hungarian, rot6d_decode, rot6d_encode, Matrix};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // Three vehicle instances, four infrastructure instances; cost is 1 - affinity.
    let cost = Matrix::from_rows(&[[0.1, 0.9, 0.8, 0.7], [0.9, 0.2, 0.3, 0.9], [0.8, 0.25, 0.9, 0.95]]);
    let a = hungarian(&cost);
    let total: f64 = a.pairs.iter().map(|&(i, j)| cost[(i, j)]).sum();
    println!("pairs {:?}, total cost {total:.2}", a.pairs);

    let yaw: f64 = 0.7;
    let r = [[yaw.cos(), -yaw.sin(), 0.0], [yaw.sin(), yaw.cos(), 0.0], [0.0, 0.0, 1.0]];
    let code = rot6d_encode(&r)?;
    let back = rot6d_decode(&code)?;
    let err = (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| (r[i][j] - back[i][j]).abs()).fold(0.0, f64::max);
    println!("6D code {code:.3?}, round-trip max error {err:.1e}");
    Ok(())
}
