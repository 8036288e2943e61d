use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::affine::{estimate_affine_lsq, AffineTransform, PointPair};
use super::RegistrationError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacParams {
    pub iterations: usize,
    pub inlier_tol_px: f64,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            iterations: 500,
            inlier_tol_px: 2.0,
            seed: 0,
        }
    }
}

/// Robust affine fit from 3-point minimal samples.
///
/// Pairs are sorted into a canonical order before sampling, so the result
/// depends only on the set of pairs and the seed. The hypothesis with the
/// most inliers wins (ties go to the lower inlier RMS) and is refit by least
/// squares on its inliers. Returned flags follow the input order.
pub fn estimate_affine_ransac(
    pairs: &[PointPair],
    params: &RansacParams,
) -> Result<(AffineTransform, Vec<bool>), RegistrationError> {
    if pairs.len() < 3 {
        return Err(RegistrationError::Degenerate(format!(
            "need at least 3 correspondences, got {}",
            pairs.len()
        )));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&i, &j| {
        let (p, q) = (&pairs[i], &pairs[j]);
        p.src
            .0
            .total_cmp(&q.src.0)
            .then(p.src.1.total_cmp(&q.src.1))
            .then(p.dst.0.total_cmp(&q.dst.0))
            .then(p.dst.1.total_cmp(&q.dst.1))
    });
    let sorted: Vec<PointPair> = order.iter().map(|&i| pairs[i]).collect();
    let n = sorted.len();

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(usize, f64, AffineTransform)> = None;
    for _ in 0..params.iterations {
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let mut k = rng.random_range(0..n - 2);
        let (lo, hi) = (i.min(j), i.max(j));
        if k >= lo {
            k += 1;
        }
        if k >= hi {
            k += 1;
        }
        let Ok(model) = estimate_affine_lsq(&[sorted[i], sorted[j], sorted[k]]) else {
            continue;
        };
        let (count, sum_sq) = sorted
            .iter()
            .map(|p| p.residual(&model))
            .filter(|&r| r <= params.inlier_tol_px)
            .fold((0usize, 0.0), |(c, s), r| (c + 1, s + r * r));
        let rms = if count > 0 {
            (sum_sq / count as f64).sqrt()
        } else {
            f64::INFINITY
        };
        let better = match &best {
            None => true,
            Some((bc, brms, _)) => count > *bc || (count == *bc && rms < *brms),
        };
        if better {
            best = Some((count, rms, model));
        }
    }

    let (count, _, model) = best.ok_or(RegistrationError::NoConsensus { inliers: 0 })?;
    if count < 3 {
        return Err(RegistrationError::NoConsensus { inliers: count });
    }
    let inliers: Vec<PointPair> = sorted
        .iter()
        .filter(|p| p.residual(&model) <= params.inlier_tol_px)
        .copied()
        .collect();
    let refined = estimate_affine_lsq(&inliers).map_err(|_| RegistrationError::NoConsensus { inliers: count })?;
    let flags = pairs
        .iter()
        .map(|p| p.residual(&refined) <= params.inlier_tol_px)
        .collect();
    Ok((refined, flags))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;

    fn synth_pairs(t: &AffineTransform, n_in: usize, n_out: usize, seed: u64) -> Vec<PointPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = Vec::new();
        for _ in 0..n_in {
            let p = (rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            v.push(PointPair::new(p, t.apply(p.0, p.1)));
        }
        for _ in 0..n_out {
            let p = (rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            let q = (rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            v.push(PointPair::new(p, q));
        }
        v
    }

    #[test]
    fn all_inliers_equal_least_squares() {
        let t = AffineTransform::new(1.01, 0.02, -0.03, 0.98, 12.0, -7.5);
        let pairs = synth_pairs(&t, 40, 0, 1);
        let (r, flags) = estimate_affine_ransac(&pairs, &RansacParams::default()).unwrap();
        let l = estimate_affine_lsq(&pairs).unwrap();
        assert!(r.max_coeff_diff(&l) < 1e-9);
        assert!(flags.iter().all(|&f| f));
    }

    #[test]
    fn rejects_outliers() {
        let t = AffineTransform::new(0.97, 0.05, -0.04, 1.02, 25.0, -13.0);
        let pairs = synth_pairs(&t, 70, 30, 2);
        let params = RansacParams {
            seed: 11,
            ..Default::default()
        };
        let (r, flags) = estimate_affine_ransac(&pairs, &params).unwrap();
        assert!(r.max_corner_error(&t, 640.0, 480.0) < 0.5);
        assert!(flags[..70].iter().all(|&f| f));
        let again = estimate_affine_ransac(&pairs, &params).unwrap();
        assert_eq!(again.0, r);
        assert_eq!(again.1, flags);
    }

    #[test]
    fn order_invariant() {
        let t = AffineTransform::new(1.0, 0.1, -0.1, 1.0, 3.0, 4.0);
        let pairs = synth_pairs(&t, 30, 20, 5);
        let params = RansacParams {
            seed: 3,
            ..Default::default()
        };
        let (r1, f1) = estimate_affine_ransac(&pairs, &params).unwrap();
        let mut idx: Vec<usize> = (0..pairs.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(77));
        let shuffled: Vec<_> = idx.iter().map(|&i| pairs[i]).collect();
        let (r2, f2) = estimate_affine_ransac(&shuffled, &params).unwrap();
        assert_eq!(r1, r2);
        for (k, &i) in idx.iter().enumerate() {
            assert_eq!(f2[k], f1[i]);
        }
    }

    #[test]
    fn no_consensus_is_an_error() {
        let collinear: Vec<_> = (0..10)
            .map(|i| PointPair::new((i as f64, 0.0), (i as f64, 0.0)))
            .collect();
        assert!(matches!(
            estimate_affine_ransac(&collinear, &RansacParams::default()),
            Err(RegistrationError::NoConsensus { .. })
        ));
        assert!(estimate_affine_ransac(&collinear[..2], &RansacParams::default()).is_err());
    }
}
