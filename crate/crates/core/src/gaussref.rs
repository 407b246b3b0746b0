//! Closed-form diagonal-Gaussian machinery: products, frame transforms and
//! sampling. This is the verification oracle for every composition strategy,
//! so it stays independent of the flow and composition code paths.
//!
//! Covariances are diagonal throughout. Rotating a frame introduces
//! off-diagonal terms; those are dropped by keeping only the diagonal of
//! `R diag(v) R^T`, mirroring the fidelity of the policies' diagonal
//! log-variance heads. Exact for isotropic blocks and for axis-aligned
//! rotations, an approximation otherwise.

use alloc::vec::Vec;

// Resolves f64 math in no_std builds; redundant (and lint-flagged) when a
// dependency feature pulls std into the crate graph.
#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::manifold::{self, Frame, Pose, Quat};
use crate::{Error, Result};

/// Gaussian with a diagonal covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> Result<DiagGaussian> {
        if mean.len() != variance.len() {
            return Err(Error::DimensionMismatch {
                what: "gaussian variance",
                expected: mean.len(),
                got: variance.len(),
            });
        }
        if variance.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidConfig("gaussian variance must be positive".into()));
        }
        Ok(DiagGaussian { mean, variance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Precision-weighted product of Gaussians:
    /// `var^-1 = sum var_f^-1`, `mean = var * sum var_f^-1 mean_f`.
    pub fn product(components: &[DiagGaussian]) -> Result<DiagGaussian> {
        let first = components.first().ok_or(Error::Empty("gaussian product"))?;
        let dim = first.dim();
        let mut precision = alloc::vec![0.0; dim];
        let mut weighted_mean = alloc::vec![0.0; dim];
        for g in components {
            if g.dim() != dim {
                return Err(Error::DimensionMismatch {
                    what: "gaussian product component",
                    expected: dim,
                    got: g.dim(),
                });
            }
            for d in 0..dim {
                let p = 1.0 / g.variance[d];
                precision[d] += p;
                weighted_mean[d] += p * g.mean[d];
            }
        }
        let variance: Vec<f64> = precision.iter().map(|p| 1.0 / p).collect();
        let mean: Vec<f64> = weighted_mean
            .iter()
            .zip(&variance)
            .map(|(wm, v)| wm * v)
            .collect();
        DiagGaussian::new(mean, variance)
    }

    /// Transports a 6-dimensional pose-tangent Gaussian (position, then
    /// rotation-vector block) into the world frame: the mean maps through
    /// [`manifold::to_global`], each covariance block rotates as
    /// `diag(R diag(v) R^T)`.
    pub fn transform(&self, f: &Frame) -> Result<DiagGaussian> {
        if self.dim() != 6 {
            return Err(Error::DimensionMismatch {
                what: "pose-tangent gaussian",
                expected: 6,
                got: self.dim(),
            });
        }
        let mean_pose = Pose {
            position: [self.mean[0], self.mean[1], self.mean[2]],
            orientation: Quat::exp([self.mean[3], self.mean[4], self.mean[5]]),
        };
        let world = manifold::to_global(&mean_pose, f);
        let rot_log = world.orientation.log().map_err(|_| Error::GeodesicUndefined)?;
        let q = f.pose.orientation;
        let lin = manifold::rotate_diag_covariance(q, [self.variance[0], self.variance[1], self.variance[2]]);
        let ang = manifold::rotate_diag_covariance(q, [self.variance[3], self.variance[4], self.variance[5]]);
        DiagGaussian::new(
            alloc::vec![
                world.position[0],
                world.position[1],
                world.position[2],
                rot_log[0],
                rot_log[1],
                rot_log[2]
            ],
            alloc::vec![lin[0], lin[1], lin[2], ang[0], ang[1], ang[2]],
        )
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<Vec<f64>> {
        let std: Vec<f64> = self.variance.iter().map(|v| v.sqrt()).collect();
        (0..n)
            .map(|_| {
                self.mean
                    .iter()
                    .zip(&std)
                    .map(|(m, s)| {
                        let z: f64 = StandardNormal.sample(rng);
                        m + s * z
                    })
                    .collect()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::FRAC_PI_2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn g(mean: &[f64], var: &[f64]) -> DiagGaussian {
        DiagGaussian::new(mean.to_vec(), var.to_vec()).unwrap()
    }

    #[test]
    fn product_single_is_identity() {
        let a = g(&[1.0, -2.0], &[0.5, 2.0]);
        let p = DiagGaussian::product(core::slice::from_ref(&a)).unwrap();
        assert_eq!(p, a);
    }

    #[test]
    fn product_closed_form() {
        // N(0,1) x N(2,1) = N(1, 0.5).
        let p = DiagGaussian::product(&[g(&[0.0], &[1.0]), g(&[2.0], &[1.0])]).unwrap();
        assert!((p.mean[0] - 1.0).abs() < 1e-12);
        assert!((p.variance[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn uninformative_factor_is_neutral() {
        let a = g(&[0.7], &[0.3]);
        let flat = g(&[0.7], &[1e12]);
        let p = DiagGaussian::product(&[a.clone(), flat]).unwrap();
        assert!((p.mean[0] - a.mean[0]).abs() < 1e-9);
        assert!((p.variance[0] - a.variance[0]).abs() < 1e-9);
    }

    #[test]
    fn product_commutative_associative() {
        let a = g(&[0.3, 1.0], &[0.2, 0.4]);
        let b = g(&[-1.0, 2.0], &[1.5, 0.1]);
        let c = g(&[0.0, 0.5], &[0.9, 0.9]);
        let abc = DiagGaussian::product(&[a.clone(), b.clone(), c.clone()]).unwrap();
        let cba = DiagGaussian::product(&[c.clone(), b.clone(), a.clone()]).unwrap();
        for d in 0..2 {
            assert!((abc.mean[d] - cba.mean[d]).abs() < 1e-12);
            assert!((abc.variance[d] - cba.variance[d]).abs() < 1e-12);
            let ab = DiagGaussian::product(&[a.clone(), b.clone()]).unwrap();
            let ab_c = DiagGaussian::product(&[ab, c.clone()]).unwrap();
            assert!((abc.mean[d] - ab_c.mean[d]).abs() < 1e-12);
            assert!((abc.variance[d] - ab_c.variance[d]).abs() < 1e-12);
        }
        // Information never decreases.
        for d in 0..2 {
            let max_prec = (1.0 / a.variance[d]).max(1.0 / b.variance[d]).max(1.0 / c.variance[d]);
            assert!(1.0 / abc.variance[d] >= max_prec - 1e-12);
        }
    }

    #[test]
    fn transform_identity_and_isotropy() {
        let a = g(&[0.1, 0.2, 0.3, 0.0, 0.0, 0.0], &[1.0, 2.0, 3.0, 0.1, 0.2, 0.3]);
        let id = Frame::identity("w");
        let t = a.transform(&id).unwrap();
        for d in 0..6 {
            assert!((t.mean[d] - a.mean[d]).abs() < 1e-12);
            assert!((t.variance[d] - a.variance[d]).abs() < 1e-12);
        }

        let iso = g(&[0.0; 6], &[0.5, 0.5, 0.5, 0.2, 0.2, 0.2]);
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for _ in 0..10 {
            let f = Frame::new("f", crate::manifold::Pose {
                position: [0.0; 3],
                orientation: crate::manifold::Quat::exp([
                    rng.random::<f64>(),
                    rng.random::<f64>(),
                    rng.random::<f64>(),
                ]),
            });
            let t = iso.transform(&f).unwrap();
            for d in 0..6 {
                assert!((t.variance[d] - iso.variance[d]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn transform_permutes_variance_under_quarter_turn() {
        let a = g(&[0.0; 6], &[1.0, 4.0, 1.0, 0.1, 0.1, 0.1]);
        let f = Frame::new("f", Pose::from_xy_yaw(0.0, 0.0, FRAC_PI_2));
        let t = a.transform(&f).unwrap();
        assert!((t.variance[0] - 4.0).abs() < 1e-9);
        assert!((t.variance[1] - 1.0).abs() < 1e-9);
        assert!((t.variance[2] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn transform_round_trip_isotropic() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let mean: Vec<f64> = (0..6).map(|_| rng.random::<f64>() - 0.5).collect();
            let a = g(&mean, &[0.3, 0.3, 0.3, 0.05, 0.05, 0.05]);
            let f = Frame::new("f", crate::testutil::random_pose(&mut rng));
            let inv = Frame::new("f_inv", f.pose.inverse());
            let round = a.transform(&f).unwrap().transform(&inv).unwrap();
            for d in 0..6 {
                assert!((round.mean[d] - a.mean[d]).abs() < 1e-9, "mean dim {d}");
                assert!((round.variance[d] - a.variance[d]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sampling_moments() {
        let a = g(&[1.0, -2.0], &[0.25, 4.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let n = 100_000;
        let samples = a.sample(&mut rng, n);
        for d in 0..2 {
            let mean: f64 = samples.iter().map(|s| s[d]).sum::<f64>() / n as f64;
            let var: f64 =
                samples.iter().map(|s| (s[d] - mean) * (s[d] - mean)).sum::<f64>() / n as f64;
            let sigma = a.variance[d].sqrt();
            assert!((mean - a.mean[d]).abs() < 4.0 * sigma / (n as f64).sqrt());
            assert!((var - a.variance[d]).abs() / a.variance[d] < 0.05);
        }
    }
}
