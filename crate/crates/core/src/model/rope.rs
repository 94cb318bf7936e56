//! Rotary position embedding over interleaved `(2i, 2i+1)` pairs within each head.

use super::{Matrix, ModelError};

/// Rotate every head of every row in place. Row `r` is rotated by `positions[r]`.
/// Position 0 is the identity.
pub fn apply_rope(
    x: &mut Matrix,
    positions: &[usize],
    n_heads: usize,
    base: f32,
) -> Result<(), ModelError> {
    if x.rows() != positions.len() {
        return Err(ModelError::ShapeMismatch(format!(
            "rope: {} rows but {} positions",
            x.rows(),
            positions.len()
        )));
    }
    if n_heads == 0 || x.cols() % n_heads != 0 {
        return Err(ModelError::ShapeMismatch(format!(
            "rope: width {} not divisible into {n_heads} heads",
            x.cols()
        )));
    }
    let d_head = x.cols() / n_heads;
    if d_head % 2 != 0 {
        return Err(ModelError::OddHeadDim(d_head));
    }
    let half = d_head / 2;
    let inv_freq: Vec<f64> = (0..half)
        .map(|i| (base as f64).powf(-2.0 * i as f64 / d_head as f64))
        .collect();
    for (r, &pos) in positions.iter().enumerate() {
        if pos == 0 {
            continue;
        }
        let rot: Vec<(f32, f32)> = inv_freq
            .iter()
            .map(|f| {
                let (s, c) = (pos as f64 * f).sin_cos();
                (c as f32, s as f32)
            })
            .collect();
        let row = x.row_mut(r);
        for head in row.chunks_exact_mut(d_head) {
            for (pair, &(c, s)) in head.chunks_exact_mut(2).zip(&rot) {
                let (a, b) = (pair[0], pair[1]);
                pair[0] = a * c - b * s;
                pair[1] = a * s + b * c;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn position_zero_is_identity() {
        let x = random(1, 32, 1);
        let mut y = x.clone();
        apply_rope(&mut y, &[0], 4, 10_000.0).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn preserves_head_norms() {
        let x = random(5, 64, 2);
        let mut y = x.clone();
        apply_rope(&mut y, &[1, 3, 17, 250, 4000], 8, 10_000.0).unwrap();
        for r in 0..5 {
            for (hx, hy) in x.row(r).chunks(8).zip(y.row(r).chunks(8)) {
                let nx: f64 = hx.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
                let ny: f64 = hy.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
                assert!((nx - ny).abs() < 1e-6, "{nx} vs {ny}");
            }
        }
    }

    #[test]
    fn dot_products_depend_only_on_offset() {
        let q = random(1, 16, 3);
        let k = random(1, 16, 4);
        let score = |pq: usize, pk: usize| {
            let mut a = q.clone();
            let mut b = k.clone();
            apply_rope(&mut a, &[pq], 1, 10_000.0).unwrap();
            apply_rope(&mut b, &[pk], 1, 10_000.0).unwrap();
            a.row(0).iter().zip(b.row(0)).map(|(x, y)| *x as f64 * *y as f64).sum::<f64>()
        };
        assert!((score(3, 1) - score(5, 3)).abs() < 1e-6);
        assert!((score(3, 1) - score(3, 2)).abs() > 1e-4);
    }

    #[test]
    fn rejects_odd_head_dim_and_bad_positions() {
        let mut x = random(1, 6, 5);
        assert!(matches!(apply_rope(&mut x, &[1], 2, 10_000.0), Err(ModelError::OddHeadDim(3))));
        let mut x = random(2, 8, 5);
        assert!(apply_rope(&mut x, &[1], 2, 10_000.0).is_err());
    }
}
