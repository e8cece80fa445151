use rand::Rng;

use crate::tensor::Tensor;

/// Index of the nearest entry (squared Euclidean distance) for every row of
/// `rows`. Ties go to the lowest index.
pub fn nearest_codes(entries: &Tensor, rows: &Tensor) -> Vec<usize> {
    let d = entries.shape()[1];
    assert_eq!(rows.shape().last(), Some(&d), "code dimension mismatch");
    rows.data()
        .chunks(d)
        .map(|row| {
            let mut best = (0, f64::INFINITY);
            for (k, e) in entries.data().chunks(d).enumerate() {
                let dist: f64 = row.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist < best.1 {
                    best = (k, dist);
                }
            }
            best.0
        })
        .collect()
}

/// Uniform(−1/K, 1/K) draws with each row scaled to unit length.
pub fn init_entries<R: Rng>(size: usize, dim: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / size as f64;
    let mut data: Vec<f64> = (0..size * dim).map(|_| rng.random_range(-bound..bound)).collect();
    for row in data.chunks_mut(dim) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    Tensor::new(vec![size, dim], data).expect("shape")
}

/// Gathers entry rows for `tokens` into an `[n, n_z]` matrix.
pub fn lookup(entries: &Tensor, tokens: &[usize]) -> Tensor {
    let d = entries.shape()[1];
    let mut data = Vec::with_capacity(tokens.len() * d);
    for &t in tokens {
        data.extend_from_slice(entries.row(t));
    }
    Tensor::new(vec![tokens.len(), d], data).expect("shape")
}
