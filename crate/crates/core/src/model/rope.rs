//! Rotary position embeddings over interleaved pairs `(2i, 2i+1)`.

use crate::error::{Error, Result};

/// Rotates `vec` by the angles for `position`: pair `i` turns by
/// `position * theta^(-2i/d)`.
pub fn apply_rope(vec: &[f32], position: usize, theta: f64) -> Result<Vec<f32>> {
    let mut out = vec.to_vec();
    rope_in_place(&mut out, position, theta)?;
    Ok(out)
}

pub fn rope_in_place(vec: &mut [f32], position: usize, theta: f64) -> Result<()> {
    let d = vec.len();
    if !d.is_multiple_of(2) {
        return Err(Error::Shape(format!("rotary width must be even, got {d}")));
    }
    if position == 0 {
        return Ok(());
    }
    for i in 0..d / 2 {
        let freq = theta.powf(-2.0 * i as f64 / d as f64);
        let (sin, cos) = (position as f64 * freq).sin_cos();
        let x = vec[2 * i] as f64;
        let y = vec[2 * i + 1] as f64;
        vec[2 * i] = (x * cos - y * sin) as f32;
        vec[2 * i + 1] = (x * sin + y * cos) as f32;
    }
    Ok(())
}
