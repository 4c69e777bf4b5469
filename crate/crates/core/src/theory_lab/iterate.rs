//! Iterating the per-state proximal update with exact Q evaluation, and the
//! empirical contraction fit.

use std::str::FromStr;

use serde::Serialize;

use super::mdp::{discounted_visitation, evaluate_soft, optimal_soft_policy, FiniteMdp, TabularPolicy};
use super::prox::{exact_prox_step, split_step, ProxConfig};
use crate::error::{invalid, Error, Result};
use crate::ot1d::half_cost;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepMode {
    Exact,
    Split,
}

impl FromStr for StepMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Self::Exact),
            "split" => Ok(Self::Split),
            _ => Err(invalid("mode", format!("unknown mode {s:?} (expected exact or split)"))),
        }
    }
}

impl StepMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Exact => "exact",
            Self::Split => "split",
        }
    }
}

/// One row of the trajectory, describing `pi_k`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationRecord {
    pub k: usize,
    /// `E_{nu*}[V(pi_k)]`.
    #[serde(rename = "J")]
    pub j: f64,
    /// `E_{nu*}[half_cost(pi_k, pi*)]`.
    #[serde(rename = "D")]
    pub d: f64,
    /// Per-state soft values of `pi_k`.
    pub values: Vec<f64>,
    /// Per-state stationarity residual of the step that produced `pi_k`
    /// (zero at `k = 0` and in split mode).
    pub residuals: Vec<f64>,
    pub min_support_weight: f64,
}

/// Geometric rate of `e_k = J* - J_k + lambda tau D_k`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContractionFit {
    /// `lambda` minimizing the envelope ratio.
    pub lambda_hat: f64,
    /// Smallest `rho` with `e_k <= rho^k e_0` for every fitted `k`.
    pub envelope_ratio: f64,
    /// Least-squares slope of `ln e_k`, as a per-step ratio, at `lambda_hat`.
    pub lsq_ratio: f64,
    /// `1 / (gamma eta tau)`, the coupling between step size and lambda in
    /// the linear-rate bound.
    pub lambda_step_rule: f64,
    pub envelope_at_step_rule: f64,
    pub lsq_at_step_rule: f64,
    /// Number of leading iterates above the noise floor used in the fit.
    pub points: usize,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub records: Vec<IterationRecord>,
    pub j_star: f64,
    pub nu_star: Vec<f64>,
    pub final_policy: TabularPolicy,
}

/// Runs `steps` proximal iterations from `pi0`, recording `J_k` and `D_k`
/// against the soft-optimal policy. `nu*` is the discounted visitation of
/// `pi*` from the MDP's initial distribution.
pub fn wppg_iterate(mdp: &FiniteMdp, pi0: &TabularPolicy, tau: f64, eta: f64, steps: usize, mode: StepMode, prox: &ProxConfig) -> Result<Trajectory> {
    if !(eta > 0.0) {
        return Err(invalid("eta", "must be positive"));
    }
    let (pi_star, star_vals) = optimal_soft_policy(mdp, tau, 1e-13)?;
    let nu = discounted_visitation(mdp, &pi_star, mdp.rho())?;
    let j_star: f64 = nu.iter().zip(&star_vals.v).map(|(w, v)| w * v).sum();
    let s = mdp.num_states();

    let record = |k: usize, pi: &TabularPolicy, residuals: Vec<f64>| -> Result<(IterationRecord, super::mdp::SoftValues)> {
        let vals = evaluate_soft(mdp, pi, tau)?;
        let j = nu.iter().zip(&vals.v).map(|(w, v)| w * v).sum();
        let mut d = 0.0;
        for st in 0..s {
            d += nu[st] * half_cost(pi.row(st), pi_star.row(st))?;
        }
        Ok((
            IterationRecord {
                k,
                j,
                d,
                values: vals.v.clone(),
                residuals,
                min_support_weight: pi.min_weight(),
            },
            vals,
        ))
    };

    let mut pi = pi0.clone();
    let (first, mut vals) = record(0, &pi, vec![0.0; s])?;
    let mut records = vec![first];
    for k in 1..=steps {
        let mut rows = Vec::with_capacity(s);
        let mut residuals = Vec::with_capacity(s);
        for st in 0..s {
            let q = vals.q.row(st);
            match mode {
                StepMode::Exact => {
                    let out = exact_prox_step(q, pi.row(st), tau, eta, prox)?;
                    residuals.push(out.residual);
                    rows.push(out.dist);
                }
                StepMode::Split => {
                    residuals.push(0.0);
                    rows.push(split_step(q, pi.row(st), tau, eta)?);
                }
            }
        }
        pi = TabularPolicy::new(rows)?;
        let (rec, next_vals) = record(k, &pi, residuals)?;
        records.push(rec);
        vals = next_vals;
    }
    Ok(Trajectory {
        records,
        j_star,
        nu_star: nu,
        final_policy: pi,
    })
}

/// Values below this are treated as converged and excluded from rate fits.
pub const NOISE_FLOOR: f64 = 1e-10;

/// Least-squares slope of `ln e_k` over the leading run of `e_k` above the
/// noise floor, as a per-step ratio. `None` with fewer than three points.
pub fn fit_ratio(e: &[f64]) -> Option<(f64, usize)> {
    let n = e.iter().take_while(|v| **v > NOISE_FLOOR).count();
    if n < 3 {
        return None;
    }
    let mean_k = (n - 1) as f64 / 2.0;
    let logs: Vec<f64> = e[..n].iter().map(|v| v.ln()).collect();
    let mean_l = logs.iter().sum::<f64>() / n as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for (k, l) in logs.iter().enumerate() {
        let dk = k as f64 - mean_k;
        num += dk * (l - mean_l);
        den += dk * dk;
    }
    Some(((num / den).exp(), n))
}

/// `max_{k >= 1} (e_k / e_0)^(1/k)` over the leading run above the noise
/// floor. `None` with fewer than two points.
pub fn envelope_ratio(e: &[f64]) -> Option<(f64, usize)> {
    let n = e.iter().take_while(|v| **v > NOISE_FLOOR).count();
    if n < 2 {
        return None;
    }
    let r = (1..n).map(|k| (e[k] / e[0]).powf(1.0 / k as f64)).fold(0.0, f64::max);
    Some((r, n))
}

/// Fits the contraction ratio of `e_k(lambda)`, choosing `lambda` on a grid
/// over `[0, 1/(gamma eta tau)]` to minimize the envelope ratio.
pub fn contraction_fit(traj: &Trajectory, gamma: f64, tau: f64, eta: f64) -> Option<ContractionFit> {
    let lambda_max = 1.0 / (gamma * eta * tau);
    let errors = |lambda: f64| -> Vec<f64> {
        traj.records
            .iter()
            .map(|r| traj.j_star - r.j + lambda * tau * r.d)
            .collect()
    };
    let at_rule = errors(lambda_max);
    let (envelope_at_step_rule, _) = envelope_ratio(&at_rule)?;
    let lsq_at_step_rule = fit_ratio(&at_rule).map_or(f64::NAN, |f| f.0);
    let mut best: Option<(f64, f64, usize)> = None;
    const GRID: usize = 200;
    for i in 0..=GRID {
        let lambda = lambda_max * i as f64 / GRID as f64;
        if let Some((ratio, points)) = envelope_ratio(&errors(lambda)) {
            if best.is_none_or(|b| ratio < b.1) {
                best = Some((lambda, ratio, points));
            }
        }
    }
    let (lambda_hat, envelope, points) = best?;
    Some(ContractionFit {
        lambda_hat,
        envelope_ratio: envelope,
        lsq_ratio: fit_ratio(&errors(lambda_hat)).map_or(f64::NAN, |f| f.0),
        lambda_step_rule: lambda_max,
        envelope_at_step_rule,
        lsq_at_step_rule,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_recovers_geometric_rate() {
        let e: Vec<f64> = (0..30).map(|k| 3.0 * 0.7f64.powi(k)).collect();
        let (r, n) = fit_ratio(&e).unwrap();
        assert!((r - 0.7).abs() < 1e-12);
        assert_eq!(n, 30);
        let short = [1.0, 1e-12, 1e-13];
        assert!(fit_ratio(&short).is_none());
    }

    #[test]
    fn envelope_is_worst_per_step_rate() {
        let e = [1.0, 0.5, 0.4, 0.1];
        let (r, n) = envelope_ratio(&e).unwrap();
        assert_eq!(n, 4);
        assert!((r - 0.4f64.sqrt()).abs() < 1e-15);
        let geo: Vec<f64> = (0..10).map(|k| 0.8f64.powi(k)).collect();
        assert!((envelope_ratio(&geo).unwrap().0 - 0.8).abs() < 1e-12);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("exact".parse::<StepMode>().unwrap(), StepMode::Exact);
        assert!("nope".parse::<StepMode>().is_err());
    }
}
