//! Plug-in mixture entropy of a Gaussian-convolved sampler.
//!
//! The density of `g(s, z) + sigma * xi` is approximated by an equal-weight
//! Gaussian mixture centered at `M` generator samples, and the entropy is the
//! average negative log-density of `L` independent convolved samples.

use std::f64::consts::PI;

use crate::error::{invalid, shape_err, Result};
use crate::numeric::{log_sum_exp, Mat, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct EntropyConfig {
    /// Convolution noise std, in action units.
    pub sigma: f64,
    /// Mixture centers.
    pub m: usize,
    /// Baseline samples.
    pub l: usize,
}

impl Default for EntropyConfig {
    fn default() -> Self {
        Self {
            sigma: 0.1,
            m: 32,
            l: 32,
        }
    }
}

impl EntropyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(invalid("sigma_ent", "must be positive"));
        }
        if self.m == 0 {
            return Err(invalid("entropy_m", "need at least one mixture center"));
        }
        if self.l == 0 {
            return Err(invalid("entropy_l", "need at least one baseline sample"));
        }
        Ok(())
    }
}

/// Log-density of the isotropic Gaussian `N(0, sigma^2 I)` at `x`.
pub fn kernel_logpdf(x: &[f64], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(invalid("sigma", "kernel width must be positive"));
    }
    let d = x.len() as f64;
    let sq: f64 = x.iter().map(|v| v * v).sum();
    Ok(-0.5 * d * (2.0 * PI * sigma * sigma).ln() - sq / (2.0 * sigma * sigma))
}

/// Plug-in estimate from explicit centers (`M x d`) and convolved baseline
/// actions (`L x d`). Evaluated with log-sum-exp so that fully underflowing
/// kernels stay finite.
pub fn plugin_entropy(centers: &Mat, baselines: &Mat, sigma: f64) -> Result<f64> {
    if centers.cols() != baselines.cols() {
        return Err(shape_err("plugin_entropy", centers.cols(), baselines.cols()));
    }
    if centers.rows() == 0 || baselines.rows() == 0 {
        return Err(invalid("plugin_entropy", "need at least one center and one baseline"));
    }
    let d = centers.cols();
    let ln_m = (centers.rows() as f64).ln();
    let mut diff = vec![0.0; d];
    let mut logs = vec![0.0; centers.rows()];
    let mut total = 0.0;
    for l in 0..baselines.rows() {
        let a = baselines.row(l);
        for (j, lj) in logs.iter_mut().enumerate() {
            for (k, dk) in diff.iter_mut().enumerate() {
                *dk = a[k] - centers[(j, k)];
            }
            *lj = kernel_logpdf(&diff, sigma)?;
        }
        total += log_sum_exp(&logs) - ln_m;
    }
    Ok(-total / baselines.rows() as f64)
}

/// Full estimator: draws `M` centers and `L` baseline generator outputs from
/// independent substreams, convolves the baselines with `sigma * xi`, and
/// returns the plug-in entropy.
///
/// `sampler(rng, n)` must return `n` pre-convolution actions at the state of
/// interest, one per row.
pub fn estimate_entropy<F>(mut sampler: F, cfg: &EntropyConfig, rng: &mut Rng) -> Result<f64>
where
    F: FnMut(&mut Rng, usize) -> Result<Mat>,
{
    cfg.validate()?;
    let key = rng.next_u64();
    let stream = Rng::new(key);
    let mut center_rng = stream.substream("centers");
    let mut baseline_rng = stream.substream("baselines");
    let centers = sampler(&mut center_rng, cfg.m)?;
    let mut baselines = sampler(&mut baseline_rng, cfg.l)?;
    for v in baselines.as_mut_slice() {
        *v += cfg.sigma * baseline_rng.normal();
    }
    plugin_entropy(&centers, &baselines, cfg.sigma)
}

/// Differential entropy of `N(0, var I_d)`.
pub fn gaussian_entropy(var: f64, d: usize) -> f64 {
    0.5 * d as f64 * (2.0 * PI * std::f64::consts::E * var).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn kernel_values() {
        assert_abs_diff_eq!(kernel_logpdf(&[0.0], 1.0).unwrap(), -0.918_938_533_204_672_7, epsilon = 1e-12);
        assert_abs_diff_eq!(
            kernel_logpdf(&[1.0, 0.0], 1.0).unwrap(),
            -(2.0 * PI).ln() - 0.5,
            epsilon = 1e-12
        );
        assert!((kernel_logpdf(&[1.0, 0.0], 1.0).unwrap() + 2.337_877_066_409_345).abs() < 1e-12);
        assert!(kernel_logpdf(&[0.0], 0.0).is_err());
    }

    #[test]
    fn kernel_scaling_identity() {
        let x = [0.3, -1.2, 0.5];
        let c = 2.5;
        let base = kernel_logpdf(&x, 0.7).unwrap();
        let scaled: Vec<f64> = x.iter().map(|v| v * c).collect();
        let got = kernel_logpdf(&scaled, 0.7 * c).unwrap();
        assert_abs_diff_eq!(got, base - 3.0 * c.ln(), epsilon = 1e-12);
    }

    #[test]
    fn single_center_single_baseline_collapses() {
        let c = [0.25, -0.5];
        let sigma = 0.3;
        let mut rng = Rng::new(8);
        let xi = [rng.normal(), rng.normal()];
        let centers = Mat::from_vec(1, 2, c.to_vec()).unwrap();
        let baselines = Mat::from_vec(1, 2, vec![c[0] + sigma * xi[0], c[1] + sigma * xi[1]]).unwrap();
        let h = plugin_entropy(&centers, &baselines, sigma).unwrap();
        let want = -kernel_logpdf(&[sigma * xi[0], sigma * xi[1]], sigma).unwrap();
        assert_abs_diff_eq!(h, want, epsilon = 1e-14);
    }

    #[test]
    fn underflowing_kernels_stay_finite() {
        let centers = Mat::from_vec(2, 1, vec![0.0, 1.0]).unwrap();
        let baselines = Mat::from_vec(1, 1, vec![1e4]).unwrap();
        let h = plugin_entropy(&centers, &baselines, 1e-3).unwrap();
        assert!(h.is_finite() && h > 1e10);
    }

    #[test]
    fn translation_invariance() {
        let mut rng = Rng::new(2);
        let centers = Mat::from_vec(16, 2, crate::numeric::gaussian(&mut rng, 32)).unwrap();
        let baselines = Mat::from_vec(8, 2, crate::numeric::gaussian(&mut rng, 16)).unwrap();
        let h0 = plugin_entropy(&centers, &baselines, 0.4).unwrap();
        let shift = |m: &Mat| {
            let mut m = m.clone();
            for (i, v) in m.as_mut_slice().iter_mut().enumerate() {
                *v += if i % 2 == 0 { 3.0 } else { -7.5 };
            }
            m
        };
        let h1 = plugin_entropy(&shift(&centers), &shift(&baselines), 0.4).unwrap();
        assert_abs_diff_eq!(h0, h1, epsilon = 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(EntropyConfig { sigma: 0.0, m: 1, l: 1 }.validate().is_err());
        assert!(EntropyConfig { sigma: 0.1, m: 0, l: 1 }.validate().is_err());
        assert!(EntropyConfig { sigma: 0.1, m: 1, l: 0 }.validate().is_err());
        assert!(EntropyConfig::default().validate().is_ok());
    }
}
