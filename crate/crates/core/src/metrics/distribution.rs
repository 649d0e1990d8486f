use crate::error::{Error, Result};

/// 1-Wasserstein distance between two empirical distributions.
///
/// Integrates |F_a⁻¹(u) − F_b⁻¹(u)| over the merged quantile grid; the grid
/// breakpoints i/n and j/m are compared as integers i·m and j·n so unequal
/// sample sizes introduce no rounding in the partition.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InsufficientData("wasserstein distance needs two nonempty samples".into()));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("wasserstein sample".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as u128, b.len() as u128);
    let (mut i, mut j) = (0usize, 0usize);
    let mut pos: u128 = 0;
    let mut total = 0.0;
    while i < a.len() && j < b.len() {
        let next_a = (i as u128 + 1) * m;
        let next_b = (j as u128 + 1) * n;
        let next = next_a.min(next_b);
        total += (next - pos) as f64 * (a[i] - b[j]).abs();
        pos = next;
        if next_a == next {
            i += 1;
        }
        if next_b == next {
            j += 1;
        }
    }
    Ok(total / (n * m) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn point_masses() {
        assert_eq!(wasserstein_1d(&[0.0], &[1.0]).unwrap(), 1.0);
        assert_eq!(wasserstein_1d(&[3.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
    }

    #[test]
    fn empty_rejected() {
        assert!(wasserstein_1d(&[], &[1.0]).is_err());
    }

    #[test]
    fn unequal_sizes() {
        // {0, 1} vs {0.5}: every quantile is 0.5 away
        assert!((wasserstein_1d(&[0.0, 1.0], &[0.5]).unwrap() - 0.5).abs() < 1e-15);
        // {0} vs {0, 0, 3}: mass 1/3 moves 3
        assert!((wasserstein_1d(&[0.0], &[0.0, 0.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn replicated_samples_do_not_change_distance() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let a: Vec<f64> = (0..7).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let a3: Vec<f64> = a.iter().flat_map(|x| [*x; 3]).collect();
        let d1 = wasserstein_1d(&a, &b).unwrap();
        let d2 = wasserstein_1d(&a3, &b).unwrap();
        assert!((d1 - d2).abs() < 1e-12);
    }
}
