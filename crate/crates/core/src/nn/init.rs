//! Orthogonal weight initialisation.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

/// A `rows × cols` matrix with orthonormal rows or columns (whichever are
/// fewer), scaled by `gain`.
pub fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Tensor {
    let (long, short) = (rows.max(cols), rows.min(cols));
    // `short` orthonormal vectors of length `long`, by modified Gram-Schmidt.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(short);
    while basis.len() < short {
        let mut v: Vec<f64> = (0..long).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= d * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-10 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    let mut out = Tensor::zeros(rows, cols);
    for (s, b) in basis.iter().enumerate() {
        for (l, &x) in b.iter().enumerate() {
            if rows >= cols {
                out.set(l, s, gain * x);
            } else {
                out.set(s, l, gain * x);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn columns_or_rows_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (r, c) in [(6, 4), (4, 6), (5, 5), (64, 1)] {
            let w = orthogonal(r, c, 2.0, &mut rng);
            let gram = if r >= c { w.transpose().matmul(&w) } else { w.matmul(&w.transpose()) };
            for i in 0..gram.rows() {
                for j in 0..gram.cols() {
                    let expect = if i == j { 4.0 } else { 0.0 };
                    assert!((gram.get(i, j) - expect).abs() < 1e-12);
                }
            }
        }
    }
}
