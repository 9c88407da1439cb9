use rand::Rng;
use rand_distr::StandardNormal;

use super::Tensor;

/// Orthogonal initialization: `gain * Q` where `Q` has orthonormal rows
/// (`m <= n`) or orthonormal columns (`m > n`), obtained by Gram-Schmidt on
/// a standard-normal draw.
pub fn orthogonal_init<R: Rng + ?Sized>(m: usize, n: usize, gain: f64, rng: &mut R) -> Tensor {
    assert!(m >= 1 && n >= 1, "orthogonal_init needs positive extents");
    // orthonormalize `count` vectors of length `dim`
    let (count, dim) = if m <= n { (m, n) } else { (n, m) };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        // two passes of modified Gram-Schmidt keep the result orthogonal to
        // machine precision
        for _ in 0..2 {
            for q in &basis {
                let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-10 {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= norm);
        basis.push(v);
    }
    let mut data = vec![0.0; m * n];
    for (k, q) in basis.iter().enumerate() {
        for (t, &val) in q.iter().enumerate() {
            let (r, c) = if m <= n { (k, t) } else { (t, k) };
            data[r * n + c] = gain * val;
        }
    }
    Tensor::new(&[m, n], data).expect("orthogonal_init shape")
}
