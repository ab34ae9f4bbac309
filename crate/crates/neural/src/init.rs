use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

/// Orthogonal initialization scaled by `gain`: the Q factor of a Gaussian
/// matrix, with column signs fixed by the diagonal of R.
pub fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Tensor {
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let gauss = DMatrix::from_fn(tall, short, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = gauss.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..short {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut out = Tensor::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let v = if rows >= cols { q[(i, j)] } else { q[(j, i)] };
            out.set(i, j, gain * v);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn columns_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = orthogonal(7, 4, 1.0, &mut rng);
        let gram = w.transpose().matmul(&w).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((gram.get(i, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wide_matrices_have_orthonormal_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = orthogonal(3, 8, 2.0, &mut rng);
        let gram = w.matmul(&w.transpose()).unwrap();
        for i in 0..3 {
            assert!((gram.get(i, i) - 4.0).abs() < 1e-12);
        }
    }
}
