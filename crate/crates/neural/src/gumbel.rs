use rand::Rng;

use crate::tensor::Tensor;

const U_MIN: f64 = 1e-10;
const U_MAX: f64 = 1.0 - 1e-10;

/// One standard Gumbel draw, `-ln(-ln u)` with `u` clamped away from 0 and 1.
pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.gen::<f64>().clamp(U_MIN, U_MAX);
    -(-u.ln()).ln()
}

pub fn sample_tensor<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| sample(rng)).collect();
    Tensor::from_vec(rows, cols, data).expect("sized to fit")
}
