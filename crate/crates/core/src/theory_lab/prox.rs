//! The per-state Wasserstein proximal step
//!
//! `max_q <Q, q> - tau sum q ln q - W2^2(q, p) / (2 eta)`
//!
//! and its transport + heat splitting.
//!
//! Two solvers are provided. [`ProxSolver::Shooting`] is exact up to
//! rounding: it exploits the 1-D structure of the transport term (see
//! [`Shooting`]). [`ProxSolver::Mirror`] is entropic mirror ascent driven by
//! the Kantorovich potential; it is simpler but stalls near the kinks of the
//! transport term and rarely reaches tight residuals.

use std::str::FromStr;

use crate::error::{invalid, shape_err, Error, Result};
use crate::numeric::check_finite;
use crate::ot1d::{half_cost, heat_step, neg_entropy, potentials, transport_step, GridDistribution};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProxSolver {
    Shooting,
    Mirror,
}

impl FromStr for ProxSolver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shooting" => Ok(Self::Shooting),
            "mirror" => Ok(Self::Mirror),
            _ => Err(invalid("solver", format!("unknown solver {s:?} (expected shooting or mirror)"))),
        }
    }
}

impl ProxSolver {
    pub fn name(self) -> &'static str {
        match self {
            Self::Shooting => "shooting",
            Self::Mirror => "mirror",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProxConfig {
    pub solver: ProxSolver,
    /// Stationarity residual at which the solver stops.
    pub tol: f64,
    /// Iteration cap for mirror ascent; the shooting solver is direct.
    pub max_iters: usize,
}

impl Default for ProxConfig {
    fn default() -> Self {
        Self {
            solver: ProxSolver::Shooting,
            tol: 1e-6,
            max_iters: 50_000,
        }
    }
}

impl ProxConfig {
    pub fn mirror() -> Self {
        Self {
            solver: ProxSolver::Mirror,
            tol: 1e-6,
            max_iters: 50_000,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ProxOutcome {
    pub dist: GridDistribution,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// `<Q, q> - tau sum q ln q - half_cost(q, p) / eta`
pub fn prox_objective(qvals: &[f64], q: &GridDistribution, p: &GridDistribution, tau: f64, eta: f64) -> Result<f64> {
    Ok(q.expectation(qvals) - tau * neg_entropy(q.weights()) - half_cost(q, p)? / eta)
}

fn check_args(qvals: &[f64], p: &GridDistribution, tau: f64, eta: f64) -> Result<()> {
    if qvals.len() != p.len() {
        return Err(shape_err("prox Q values", p.len(), qvals.len()));
    }
    check_finite("Q values", qvals)?;
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(invalid("tau", "must be positive"));
    }
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(invalid("eta", "must be positive"));
    }
    Ok(())
}

/// Solves the proximal step from anchor `p`. The outcome carries the final
/// stationarity residual; `converged` is false when the iteration cap was hit
/// first.
pub fn exact_prox_step(qvals: &[f64], p: &GridDistribution, tau: f64, eta: f64, cfg: &ProxConfig) -> Result<ProxOutcome> {
    check_args(qvals, p, tau, eta)?;
    match cfg.solver {
        ProxSolver::Shooting => shooting_prox(qvals, p, tau, eta, cfg),
        ProxSolver::Mirror => mirror_prox(qvals, p, tau, eta, cfg),
    }
}

/// Full-support starting point for mirror ascent: half anchor, half uniform.
fn initial_weights(p: &GridDistribution) -> Vec<f64> {
    let n = p.len() as f64;
    p.weights().iter().map(|w| 0.5 * w + 0.5 / n).collect()
}

/// One piece of the anchor's quantile function: on `(lo, hi]` the quantile
/// is grid point `atom`.
#[derive(Clone, Copy, Debug)]
struct Piece {
    lo: f64,
    hi: f64,
    atom: f64,
}

fn quantile_pieces(p: &GridDistribution) -> Vec<Piece> {
    let pts = p.grid().points();
    let mut pieces = Vec::new();
    let mut cum = 0.0;
    for (j, &w) in p.weights().iter().enumerate() {
        if w > 0.0 {
            pieces.push(Piece {
                lo: cum,
                hi: cum + w,
                atom: pts[j],
            });
            cum += w;
        }
    }
    if let Some(first) = pieces.first_mut() {
        first.lo = 0.0;
    }
    if let Some(last) = pieces.last_mut() {
        last.hi = 1.0;
    }
    pieces
}

/// Breakpoints within this relative distance count as "at the kink" when
/// scoring residuals.
const KINK_TOL: f64 = 1e-12;

/// The prox problem in cumulative coordinates `C_i = q_0 + ... + q_i`.
///
/// On a 1-D grid `half_cost(q, p)` is a sum over `i` of convex
/// piecewise-linear functions of `C_i` alone, with slope
/// `kappa(i, j) = spacing * (b_j - (a_i + a_{i+1}) / 2)` while `C_i` lies in
/// the anchor's `j`-th quantile piece. Stationarity of the objective reads
///
/// `Q_i - Q_{i+1} - tau ln(q_i / q_{i+1})  in  [kappa(i, j-), kappa(i, j+)] / eta`
///
/// so once `q_0` is fixed every later weight follows in order, and all of
/// them grow with `q_0`. The total mass is therefore monotone in `q_0` and
/// the solution is found by bisection; a jump in the total mass across a
/// breakpoint pins that `C_i` to the breakpoint and the search restarts from
/// the next weight.
struct Shooting<'a> {
    qvals: &'a [f64],
    pts: &'a [f64],
    spacing: f64,
    tau: f64,
    eta: f64,
    pieces: Vec<Piece>,
}

struct Shot {
    /// Log-weights from the segment start onward.
    logs: Vec<f64>,
    /// Piece index of each `C_k` along the shot.
    piece: Vec<usize>,
    total: f64,
}

impl Shooting<'_> {
    fn kappa(&self, i: usize, piece: usize) -> f64 {
        0.5 * self.spacing * (2.0 * self.pieces[piece].atom - self.pts[i] - self.pts[i + 1]) / self.eta
    }

    fn piece_of(&self, c: f64) -> usize {
        self.pieces.partition_point(|pc| pc.hi < c).min(self.pieces.len() - 1)
    }

    /// Forward pass from weight `start` with log-weight `y`, given the mass
    /// `before` already placed on earlier atoms. Boundaries from `start` on
    /// lie strictly above a pinned breakpoint, so their piece is at least
    /// `floor` even where the addition rounds back onto it.
    fn shoot(&self, start: usize, before: f64, floor: usize, y: f64) -> Shot {
        let n = self.pts.len();
        let mut logs = Vec::with_capacity(n - start);
        let mut piece = Vec::with_capacity(n - start);
        let mut c = before;
        let mut y = y;
        for k in start..n {
            logs.push(y);
            c += y.exp();
            if k + 1 == n || c > 1.5 {
                break;
            }
            let j = self.piece_of(c).max(floor);
            piece.push(j);
            y -= (self.qvals[k] - self.qvals[k + 1] - self.kappa(k, j)) / self.tau;
        }
        Shot { logs, piece, total: c }
    }

    /// Log-weights of the solution, up to a common additive constant.
    fn solve(&self) -> Result<Vec<f64>> {
        let n = self.pts.len();
        let mut q = vec![0.0; n];
        let mut start = 0;
        let mut before = 0.0f64;
        let mut floor = 0;
        let (mut ylo, mut yhi) = (-800.0f64, 0.0f64);
        loop {
            if start + 1 == n {
                q[start] = (1.0 - before).max(f64::MIN_POSITIVE).ln();
                return Ok(q);
            }
            let mut lo = self.shoot(start, before, floor, ylo);
            // Steep Q/tau can put the solution's first weight far below
            // exp(-800); widen the bracket until the shot falls short.
            while lo.total >= 1.0 && start == 0 {
                if ylo < -1e300 {
                    return Err(Error::NonFinite("prox shooting bracket"));
                }
                yhi = ylo;
                ylo *= 2.0;
                lo = self.shoot(start, before, floor, ylo);
            }
            let mut hi = self.shoot(start, before, floor, yhi);
            for _ in 0..4096 {
                let mid = 0.5 * (ylo + yhi);
                if mid <= ylo || mid >= yhi {
                    break;
                }
                let shot = self.shoot(start, before, floor, mid);
                if shot.total < 1.0 {
                    ylo = mid;
                    lo = shot;
                } else {
                    yhi = mid;
                    hi = shot;
                }
            }
            let split = lo.piece.iter().zip(&hi.piece).position(|(a, b)| a != b);
            let continuous = (hi.total - 1.0).abs() <= 1e-13 || (1.0 - lo.total).abs() <= 1e-13;
            match split {
                Some(k) if !continuous => {
                    // Several boundaries may sit within rounding of the same
                    // breakpoint (later weights can underflow to zero). As
                    // q_start grows they cross it from the last one down, so
                    // the pinned boundary is the last candidate whose
                    // continuation can still reach unit mass. Earlier weights
                    // keep their exact ratios; the rounding-level mass
                    // mismatch is absorbed by the final normalization.
                    let ja = lo.piece[k];
                    let mut m = k;
                    while m + 1 < lo.piece.len() && lo.piece[m + 1] == ja {
                        m += 1;
                    }
                    let bp = self.pieces[ja].hi;
                    let range = |m: usize| {
                        let at = start + m;
                        let y = lo.logs[m];
                        let d = self.qvals[at] - self.qvals[at + 1];
                        (y - (d - self.kappa(at, ja)) / self.tau, y - (d - self.kappa(at, ja + 1)) / self.tau)
                    };
                    let pin = (k..=m)
                        .rev()
                        .find(|&c| start + c + 1 == n || self.shoot(start + c + 1, bp, ja + 1, range(c).1).total >= 1.0)
                        .unwrap_or(k);
                    // Put the pinned boundary exactly on the breakpoint; the
                    // bisection only resolves it to the spacing of y.
                    let mass: f64 = lo.logs[..=pin].iter().map(|y| y.exp()).sum();
                    let shift = if bp > before && mass > 0.0 { (bp - before).ln() - mass.ln() } else { 0.0 };
                    for (dst, y) in q[start..=start + pin].iter_mut().zip(&lo.logs) {
                        *dst = y + shift;
                    }
                    let (a, b) = range(pin);
                    (ylo, yhi) = (a + shift, b + shift);
                    before = bp;
                    floor = ja + 1;
                    start += pin + 1;
                }
                _ => {
                    let complete = hi.logs.len() == n - start;
                    let best = if complete && (hi.total - 1.0).abs() <= (1.0 - lo.total).abs() { hi } else { lo };
                    if best.logs.len() != n - start {
                        return Err(Error::NonFinite("prox shooting"));
                    }
                    // Same exact-mass correction as for pins, so earlier
                    // pinned boundaries survive the final normalization.
                    let mass: f64 = best.logs.iter().map(|y| y.exp()).sum();
                    let shift = if before < 1.0 && mass > 0.0 && mass.is_finite() { (1.0 - before).ln() - mass.ln() } else { 0.0 };
                    for (dst, y) in q[start..].iter_mut().zip(&best.logs) {
                        *dst = y + shift;
                    }
                    return Ok(q);
                }
            }
        }
    }

    /// Distance of the smooth derivative from the transport subdifferential,
    /// maximized over the boundaries `C_0 .. C_{n-2}`.
    /// `logs` are normalized log-weights, so that underflowed weights still
    /// carry their ratios.
    fn residual(&self, logs: &[f64]) -> f64 {
        let mut c = 0.0;
        let mut worst = 0.0f64;
        for i in 0..logs.len() - 1 {
            c += logs[i].exp();
            let s = self.qvals[i] - self.qvals[i + 1] - self.tau * (logs[i] - logs[i + 1]);
            // Subdifferential over every piece within rounding of C_i;
            // kappa increases with the piece index.
            let tol = KINK_TOL * c;
            let jmin = self.pieces.partition_point(|pc| pc.hi < c - tol).min(self.pieces.len() - 1);
            let jmax = self.pieces.partition_point(|pc| pc.lo <= c + tol).saturating_sub(1).max(jmin);
            let (lo, hi) = (self.kappa(i, jmin), self.kappa(i, jmax));
            worst = worst.max((lo - s).max(s - hi).max(0.0));
        }
        worst
    }
}

fn shooting_prox(qvals: &[f64], p: &GridDistribution, tau: f64, eta: f64, cfg: &ProxConfig) -> Result<ProxOutcome> {
    let problem = Shooting {
        qvals,
        pts: p.grid().points(),
        spacing: p.grid().spacing(),
        tau,
        eta,
        pieces: quantile_pieces(p),
    };
    if problem.pieces.is_empty() {
        return Err(Error::EmptySupport);
    }
    let mut logs = problem.solve()?;
    let lse = crate::numeric::log_sum_exp(&logs);
    for l in &mut logs {
        *l -= lse;
    }
    let dist = GridDistribution::softmax(p.grid().clone(), &logs)?;
    let residual = problem.residual(&logs);
    if residual.is_nan() {
        return Err(Error::NonFinite("prox residual"));
    }
    Ok(ProxOutcome {
        dist,
        residual,
        iterations: 1,
        converged: residual < cfg.tol,
    })
}

fn mirror_prox(qvals: &[f64], p: &GridDistribution, tau: f64, eta: f64, cfg: &ProxConfig) -> Result<ProxOutcome> {
    let grid = p.grid().clone();
    let mut logq: Vec<f64> = initial_weights(p).iter().map(|w| w.ln()).collect();
    let mut q = GridDistribution::softmax(grid.clone(), &logq)?;
    let mut g = vec![0.0; p.len()];
    let mut residual = f64::INFINITY;
    let mut iters = 0;
    while iters < cfg.max_iters {
        let pot = potentials(&q, p)?;
        let phi_mean = q.expectation(&pot.phi);
        for (i, gi) in g.iter_mut().enumerate() {
            *gi = qvals[i] - tau * (1.0 + logq[i]) - (pot.phi[i] - phi_mean) / eta;
        }
        let mean = q.expectation(&g);
        residual = q
            .weights()
            .iter()
            .zip(&g)
            .filter(|(w, _)| **w > 0.0)
            .map(|(_, gi)| (gi - mean).abs())
            .fold(0.0, f64::max);
        if residual < cfg.tol {
            break;
        }
        let scale = g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let step = 0.5 / (scale + 1e-12);
        for (l, gi) in logq.iter_mut().zip(&g) {
            *l += step * gi;
        }
        let lse = crate::numeric::log_sum_exp(&logq);
        for l in &mut logq {
            *l -= lse;
        }
        q = GridDistribution::softmax(grid.clone(), &logq)?;
        iters += 1;
    }
    Ok(ProxOutcome {
        dist: q,
        residual,
        iterations: iters,
        converged: residual < cfg.tol,
    })
}

/// Transport by the proximal argmax map, then Gaussian smoothing with
/// variance `2 tau eta`.
pub fn split_step(qvals: &[f64], p: &GridDistribution, tau: f64, eta: f64) -> Result<GridDistribution> {
    if !(tau >= 0.0) {
        return Err(invalid("tau", "must be non-negative"));
    }
    let moved = transport_step(p, qvals, eta)?;
    heat_step(&moved, 2.0 * tau * eta)
}
