//! Small dense linear-algebra helpers shared by the filter, smoother and samplers.

use nalgebra::{Cholesky, DMatrix, Dyn};

/// Diagonal jitter tried in order when a Cholesky factorization fails.
pub const JITTER_LADDER: [f64; 6] = [0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Cholesky factor of `m`, escalating diagonal jitter along [`JITTER_LADDER`].
/// Returns the factorization and the jitter that made it succeed.
pub fn cholesky_jittered(m: &DMatrix<f64>) -> Option<(Cholesky<f64, Dyn>, f64)> {
    if m.iter().any(|v| !v.is_finite()) {
        return None;
    }
    for &jitter in JITTER_LADDER.iter() {
        let mut a = m.clone();
        if jitter > 0.0 {
            for i in 0..a.nrows() {
                a[(i, i)] += jitter;
            }
        }
        if let Some(ch) = a.cholesky() {
            return Some((ch, jitter));
        }
    }
    None
}

/// Lower-triangular square root of a covariance, with jitter escalation.
pub fn cov_sqrt(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    cholesky_jittered(m).map(|(ch, _)| ch.l())
}

/// Lower-triangular `L` with `L·Lᵀ = m` for a positive semidefinite `m`.
/// Pivots within rounding noise of zero give zero columns instead of jitter,
/// so the factor reproduces `m` itself. Fails on pivots below the most
/// negative tolerated jitter.
pub fn psd_cholesky(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = m.nrows();
    if m.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let scale = m.diagonal().amax().max(f64::MIN_POSITIVE);
    let noise = scale * f64::EPSILON * n as f64;
    let fail = JITTER_LADDER[JITTER_LADDER.len() - 1];
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d < -fail {
            return None;
        }
        if d <= noise {
            continue;
        }
        let root = d.sqrt();
        l[(j, j)] = root;
        for i in (j + 1)..n {
            let mut v = m[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / root;
        }
    }
    Some(l)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jitter_rescues_rank_deficient_matrix() {
        let v = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        let m = &v * v.transpose();
        let (ch, jitter) = cholesky_jittered(&m).unwrap();
        assert!(jitter > 0.0);
        let l = ch.l();
        assert!((&l * l.transpose() - &m).amax() < 1e-5);
    }

    #[test]
    fn symmetrize_averages_off_diagonal() {
        let mut m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 4.0, 1.0]);
        symmetrize(&mut m);
        assert_eq!(m[(0, 1)], 3.0);
        assert_eq!(max_asymmetry(&m), 0.0);
    }

    #[test]
    fn semidefinite_factor_reproduces_singular_matrix() {
        let v = DMatrix::from_row_slice(3, 2, &[1.0, 0.5, 2.0, -1.0, 3.0, 0.0]);
        let m = &v * v.transpose();
        let l = psd_cholesky(&m).unwrap();
        assert!((&l * l.transpose() - &m).amax() < 1e-12);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(psd_cholesky(&bad).is_none());
    }
}
