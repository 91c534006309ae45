use crate::error::{NumericsError, Result};

/// Interleaved sinusoidal encoding: `pe[2i] = sin(pos / 10000^(2i/d))`,
/// `pe[2i+1] = cos(pos / 10000^(2i/d))`.
pub fn sinusoidal_pe(position: usize, d: usize) -> Result<Vec<f64>> {
    if d % 2 != 0 {
        return Err(NumericsError::Config(format!("positional encoding width must be even, got {d}")));
    }
    let pos = position as f64;
    let mut out = Vec::with_capacity(d);
    for i in 0..d / 2 {
        let freq = 10000f64.powf(-((2 * i) as f64) / d as f64);
        out.push((pos * freq).sin());
        out.push((pos * freq).cos());
    }
    Ok(out)
}
