//! Finite MDPs over a 1-D action grid and exact entropy-regularized policy
//! evaluation.
//!
//! Entropy is the discrete negative entropy `H(s) = sum_a pi ln pi`, so
//! `V(s) = <Q(s, .), pi(.|s)> - tau H(s)` and `Q = r + gamma P V`.

use std::sync::Arc;

use crate::error::{invalid, shape_err, Error, Result};
use crate::numeric::{log_sum_exp, solve_linear, Mat, Rng};
use crate::ot1d::{neg_entropy, ActionGrid, GridDistribution};

#[derive(Clone, Debug)]
pub struct FiniteMdp {
    grid: Arc<ActionGrid>,
    states: usize,
    /// `P[s][a][s']`, flattened.
    transitions: Vec<f64>,
    /// `r[s][a]`, flattened.
    rewards: Vec<f64>,
    gamma: f64,
    rho: Vec<f64>,
}

impl FiniteMdp {
    pub fn new(grid: Arc<ActionGrid>, states: usize, transitions: Vec<f64>, rewards: Vec<f64>, gamma: f64, rho: Vec<f64>) -> Result<Self> {
        let n = grid.len();
        if states == 0 {
            return Err(invalid("states", "need at least one state"));
        }
        if transitions.len() != states * n * states {
            return Err(shape_err("FiniteMdp transitions", states * n * states, transitions.len()));
        }
        if rewards.len() != states * n {
            return Err(shape_err("FiniteMdp rewards", states * n, rewards.len()));
        }
        if rho.len() != states {
            return Err(shape_err("FiniteMdp rho", states, rho.len()));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(invalid("gamma", "must lie in (0, 1)"));
        }
        crate::numeric::check_finite("rewards", &rewards)?;
        for row in transitions.chunks(states) {
            if row.iter().any(|p| !(*p >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return Err(invalid("transitions", "every row must be a probability vector"));
            }
        }
        if rho.iter().any(|p| !(*p >= 0.0)) || (rho.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(invalid("rho", "must be a probability vector"));
        }
        Ok(Self {
            grid,
            states,
            transitions,
            rewards,
            gamma,
            rho,
        })
    }

    /// The fixed 3-state benchmark on the default 21-point grid with
    /// `gamma = 0.9`.
    ///
    /// Each state prefers a different action (`r = -w (a - c)^2`), and the
    /// action also drifts the chain: positive actions push mass toward higher
    /// state indices, negative ones toward lower.
    pub fn builtin3() -> Self {
        let grid = Arc::new(ActionGrid::default_grid());
        let centers = [-0.5, 0.2, 0.7];
        let weights = [1.0, 2.0, 1.5];
        let s = 3;
        let mut rewards = Vec::with_capacity(s * grid.len());
        let mut transitions = Vec::with_capacity(s * grid.len() * s);
        for st in 0..s {
            for &a in grid.points() {
                rewards.push(-weights[st] * (a - centers[st]).powi(2));
                let logits: Vec<f64> = (0..s)
                    .map(|next| {
                        let offset = next as f64 - st as f64;
                        2.0 * a * offset - 0.5 * offset * offset
                    })
                    .collect();
                let lse = log_sum_exp(&logits);
                transitions.extend(logits.iter().map(|l| 0.9 * (l - lse).exp() + 0.1 / s as f64));
            }
        }
        Self::new(grid, s, transitions, rewards, 0.9, vec![1.0 / 3.0; 3]).unwrap()
    }

    /// Random MDP: Dirichlet-like transition rows, rewards uniform in
    /// `[-1, 1]`, uniform initial distribution, uniform grid on `[-1, 1]`.
    pub fn random(states: usize, actions: usize, gamma: f64, rng: &mut Rng) -> Result<Self> {
        let grid = Arc::new(ActionGrid::uniform(actions, -1.0, 1.0)?);
        let mut transitions = Vec::with_capacity(states * actions * states);
        for _ in 0..states * actions {
            let w: Vec<f64> = (0..states).map(|_| rng.uniform_range(0.05, 1.0)).collect();
            let z: f64 = w.iter().sum();
            transitions.extend(w.iter().map(|x| x / z));
        }
        let rewards = (0..states * actions).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        Self::new(grid, states, transitions, rewards, gamma, vec![1.0 / states as f64; states])
    }

    pub fn grid(&self) -> &Arc<ActionGrid> {
        &self.grid
    }

    pub fn num_states(&self) -> usize {
        self.states
    }

    pub fn num_actions(&self) -> usize {
        self.grid.len()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.rewards[s * self.num_actions() + a]
    }

    pub fn rewards(&self, s: usize) -> &[f64] {
        let n = self.num_actions();
        &self.rewards[s * n..(s + 1) * n]
    }

    pub fn transition(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.num_actions() + a) * self.states;
        &self.transitions[start..start + self.states]
    }

    /// State-to-state kernel `P_pi(s, s')`.
    pub fn policy_kernel(&self, pi: &TabularPolicy) -> Mat {
        let s = self.states;
        let mut k = Mat::zeros(s, s);
        for st in 0..s {
            for (a, &w) in pi.row(st).weights().iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                for (dst, p) in self.transition(st, a).iter().enumerate() {
                    k.row_mut(st)[dst] += w * p;
                }
            }
        }
        k
    }

    fn check_policy(&self, pi: &TabularPolicy) -> Result<()> {
        if pi.num_states() != self.states {
            return Err(shape_err("policy states", self.states, pi.num_states()));
        }
        if pi.rows.iter().any(|r| **r.grid() != *self.grid) {
            return Err(Error::GridMismatch);
        }
        Ok(())
    }
}

/// One grid distribution per state.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularPolicy {
    rows: Vec<GridDistribution>,
}

impl TabularPolicy {
    pub fn new(rows: Vec<GridDistribution>) -> Result<Self> {
        if rows.is_empty() {
            return Err(invalid("policy", "need at least one state"));
        }
        Ok(Self { rows })
    }

    pub fn uniform(mdp: &FiniteMdp) -> Self {
        Self {
            rows: (0..mdp.num_states())
                .map(|_| GridDistribution::uniform(mdp.grid().clone()))
                .collect(),
        }
    }

    /// Full-support random policy: softmax of `scale * N(0, 1)` logits.
    pub fn random(mdp: &FiniteMdp, scale: f64, rng: &mut Rng) -> Self {
        let rows = (0..mdp.num_states())
            .map(|_| {
                let logits: Vec<f64> = (0..mdp.num_actions()).map(|_| scale * rng.normal()).collect();
                GridDistribution::softmax(mdp.grid().clone(), &logits).unwrap()
            })
            .collect();
        Self { rows }
    }

    pub fn num_states(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, s: usize) -> &GridDistribution {
        &self.rows[s]
    }

    pub fn rows(&self) -> &[GridDistribution] {
        &self.rows
    }

    pub fn min_weight(&self) -> f64 {
        self.rows.iter().map(|r| r.min_weight()).fold(f64::INFINITY, f64::min)
    }

    /// Per-state negative entropy.
    pub fn neg_entropy(&self) -> Vec<f64> {
        self.rows.iter().map(|r| neg_entropy(r.weights())).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoftValues {
    pub v: Vec<f64>,
    /// States x actions.
    pub q: Mat,
    /// Per-state `sum_a pi ln pi` of the evaluated policy.
    pub neg_entropy: Vec<f64>,
}

impl SoftValues {
    pub fn q_row(&self, s: usize) -> &[f64] {
        self.q.row(s)
    }

    /// `max_s |<Q(s,.), pi(.|s)> - tau H(s) - V(s)|`
    pub fn consistency_residual(&self, pi: &TabularPolicy, tau: f64) -> f64 {
        (0..self.v.len())
            .map(|s| (pi.row(s).expectation(self.q.row(s)) - tau * self.neg_entropy[s] - self.v[s]).abs())
            .fold(0.0, f64::max)
    }
}

fn q_from_v(mdp: &FiniteMdp, v: &[f64]) -> Mat {
    let (s, n) = (mdp.num_states(), mdp.num_actions());
    let mut q = Mat::zeros(s, n);
    for st in 0..s {
        for a in 0..n {
            let next: f64 = mdp.transition(st, a).iter().zip(v).map(|(p, x)| p * x).sum();
            q.row_mut(st)[a] = mdp.reward(st, a) + mdp.gamma() * next;
        }
    }
    q
}

/// Exact soft policy evaluation by solving `(I - gamma P_pi) V = r_pi - tau H`.
pub fn evaluate_soft(mdp: &FiniteMdp, pi: &TabularPolicy, tau: f64) -> Result<SoftValues> {
    mdp.check_policy(pi)?;
    let s = mdp.num_states();
    let kernel = mdp.policy_kernel(pi);
    let h = pi.neg_entropy();
    let mut a = Mat::identity(s);
    let mut b = vec![0.0; s];
    for st in 0..s {
        for dst in 0..s {
            a.row_mut(st)[dst] -= mdp.gamma() * kernel[(st, dst)];
        }
        b[st] = pi.row(st).expectation(mdp.rewards(st)) - tau * h[st];
    }
    let v = solve_linear(&a, &b)?;
    let q = q_from_v(mdp, &v);
    Ok(SoftValues { v, q, neg_entropy: h })
}

/// `d = (1 - gamma) (I - gamma P_pi^T)^{-1} rho`.
pub fn discounted_visitation(mdp: &FiniteMdp, pi: &TabularPolicy, rho: &[f64]) -> Result<Vec<f64>> {
    mdp.check_policy(pi)?;
    let s = mdp.num_states();
    if rho.len() != s {
        return Err(shape_err("discounted_visitation rho", s, rho.len()));
    }
    let kernel = mdp.policy_kernel(pi);
    let mut a = Mat::identity(s);
    for i in 0..s {
        for j in 0..s {
            a.row_mut(i)[j] -= mdp.gamma() * kernel[(j, i)];
        }
    }
    let x = solve_linear(&a, rho)?;
    Ok(x.into_iter().map(|v| (1.0 - mdp.gamma()) * v).collect())
}

/// Stationary distribution of the chain `P_pi` (unique when the chain is
/// irreducible; `Singular` otherwise).
pub fn stationary_distribution(mdp: &FiniteMdp, pi: &TabularPolicy) -> Result<Vec<f64>> {
    mdp.check_policy(pi)?;
    let s = mdp.num_states();
    let kernel = mdp.policy_kernel(pi);
    // Rows 0..s-1 of (P^T - I) nu = 0, last row replaced by sum(nu) = 1.
    let mut a = Mat::zeros(s, s);
    for i in 0..s {
        for j in 0..s {
            a.row_mut(i)[j] = kernel[(j, i)] - if i == j { 1.0 } else { 0.0 };
        }
    }
    let mut b = vec![0.0; s];
    a.row_mut(s - 1).fill(1.0);
    b[s - 1] = 1.0;
    solve_linear(&a, &b)
}

/// Both sides of the entropy-regularized performance-difference identity
///
/// `V'(s) - V(s) = 1/(1-gamma) E_{x ~ d^{pi'}_s}[<Q(x,.), pi'(.|x)> - tau H'(x) - V(x)]`
///
/// where `V, Q` belong to `pi` and `d^{pi'}_s` is the discounted visitation of
/// `pi'` from `s`. The bracket equals `<Q, pi' - pi> - tau H' + tau H`.
#[derive(Clone, Debug, PartialEq)]
pub struct PerfDiff {
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    pub max_residual: f64,
}

pub fn perf_diff_check(mdp: &FiniteMdp, pi: &TabularPolicy, pi_new: &TabularPolicy, tau: f64) -> Result<PerfDiff> {
    let old = evaluate_soft(mdp, pi, tau)?;
    let new = evaluate_soft(mdp, pi_new, tau)?;
    let s = mdp.num_states();
    let h_new = pi_new.neg_entropy();
    let integrand: Vec<f64> = (0..s)
        .map(|x| pi_new.row(x).expectation(old.q.row(x)) - tau * h_new[x] - old.v[x])
        .collect();
    let mut lhs = Vec::with_capacity(s);
    let mut rhs = Vec::with_capacity(s);
    for start in 0..s {
        let mut delta = vec![0.0; s];
        delta[start] = 1.0;
        let d = discounted_visitation(mdp, pi_new, &delta)?;
        lhs.push(new.v[start] - old.v[start]);
        rhs.push(d.iter().zip(&integrand).map(|(w, f)| w * f).sum::<f64>() / (1.0 - mdp.gamma()));
    }
    let max_residual = lhs.iter().zip(&rhs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(PerfDiff { lhs, rhs, max_residual })
}

/// Residual of the optimal-policy value identity
///
/// `E_nu[<Q(s,.), pi*(.|s) - pi(.|s)> - tau H*(s) + tau H(s)] = (1-gamma) E_nu[V*(s) - V(s)]`.
///
/// The identity is exact when `nu` is stationary for `pi_star`; with other
/// weightings the residual is informative only.
pub fn optimal_gap_identity(mdp: &FiniteMdp, pi: &TabularPolicy, pi_star: &TabularPolicy, tau: f64, nu: &[f64]) -> Result<f64> {
    let vals = evaluate_soft(mdp, pi, tau)?;
    let star = evaluate_soft(mdp, pi_star, tau)?;
    let mut lhs = 0.0;
    let mut rhs = 0.0;
    for s in 0..mdp.num_states() {
        let q = vals.q.row(s);
        let lin = pi_star.row(s).expectation(q) - pi.row(s).expectation(q);
        lhs += nu[s] * (lin - tau * star.neg_entropy[s] + tau * vals.neg_entropy[s]);
        rhs += nu[s] * (1.0 - mdp.gamma()) * (star.v[s] - vals.v[s]);
    }
    Ok(lhs - rhs)
}

/// Soft value iteration `V <- tau lse(Q / tau)` to the fixed point; returns
/// `pi* = softmax(Q* / tau)` and its exact evaluation.
pub fn optimal_soft_policy(mdp: &FiniteMdp, tau: f64, tol: f64) -> Result<(TabularPolicy, SoftValues)> {
    if !(tau > 0.0) {
        return Err(invalid("tau", "must be positive"));
    }
    let gamma = mdp.gamma();
    let stop = tol * (1.0 - gamma) / gamma;
    let cap = 1_000_000;
    let mut v = vec![0.0; mdp.num_states()];
    let mut scaled = vec![0.0; mdp.num_actions()];
    for iter in 0..cap {
        let q = q_from_v(mdp, &v);
        let mut change = 0.0f64;
        for (s, vs) in v.iter_mut().enumerate() {
            for (x, qa) in scaled.iter_mut().zip(q.row(s)) {
                *x = qa / tau;
            }
            let next = tau * log_sum_exp(&scaled);
            change = change.max((next - *vs).abs());
            *vs = next;
        }
        if change < stop {
            let q = q_from_v(mdp, &v);
            let rows = (0..mdp.num_states())
                .map(|s| {
                    let logits: Vec<f64> = q.row(s).iter().map(|x| x / tau).collect();
                    GridDistribution::softmax(mdp.grid().clone(), &logits)
                })
                .collect::<Result<Vec<_>>>()?;
            let pi = TabularPolicy::new(rows)?;
            let vals = evaluate_soft(mdp, &pi, tau)?;
            return Ok((pi, vals));
        }
        if iter + 1 == cap {
            return Err(Error::NotConverged { iterations: cap, residual: change });
        }
    }
    unreachable!()
}
