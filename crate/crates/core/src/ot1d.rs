//! Exact optimal transport between distributions on a common 1-D grid.
//!
//! Two cost conventions live side by side and are never mixed implicitly:
//! [`half_cost`] is the optimal value for `c(a, b) = (a - b)^2 / 2` (the
//! convention of the Kantorovich potentials), and [`w2_squared`] is the
//! unhalved squared 2-Wasserstein distance, `2 * half_cost`.

use std::sync::Arc;

use crate::error::{invalid, Error, Result};

/// Cumulative masses closer than this are treated as equal when building the
/// monotone coupling.
const CUM_EPS: f64 = 1e-13;

/// Uniformly spaced, strictly increasing action points.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionGrid {
    points: Vec<f64>,
    spacing: f64,
}

impl ActionGrid {
    pub fn uniform(n: usize, lo: f64, hi: f64) -> Result<Self> {
        if n < 2 {
            return Err(invalid("grid size", "need at least two points"));
        }
        if !(lo < hi) {
            return Err(invalid("grid bounds", "need lo < hi"));
        }
        let spacing = (hi - lo) / (n - 1) as f64;
        let points = (0..n).map(|i| lo + spacing * i as f64).collect();
        Ok(Self { points, spacing })
    }

    pub fn from_points(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(invalid("grid size", "need at least two points"));
        }
        let spacing = points[1] - points[0];
        if !(spacing > 0.0) {
            return Err(invalid("grid", "points must be strictly increasing"));
        }
        for w in points.windows(2) {
            if ((w[1] - w[0]) - spacing).abs() > 1e-12 {
                return Err(invalid("grid", "spacing must be uniform"));
            }
        }
        Ok(Self { points, spacing })
    }

    /// The default 21-point grid on `[-1, 1]`.
    pub fn default_grid() -> Self {
        Self::uniform(21, -1.0, 1.0).unwrap()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn cost(&self, i: usize, j: usize) -> f64 {
        let d = self.points[i] - self.points[j];
        0.5 * d * d
    }

    pub fn nearest_index(&self, x: f64) -> usize {
        let k = ((x - self.points[0]) / self.spacing).round();
        k.clamp(0.0, (self.len() - 1) as f64) as usize
    }
}

/// Probability weights on an [`ActionGrid`].
#[derive(Clone, Debug)]
pub struct GridDistribution {
    grid: Arc<ActionGrid>,
    weights: Vec<f64>,
}

impl PartialEq for GridDistribution {
    fn eq(&self, other: &Self) -> bool {
        self.weights == other.weights && same_grid(self, other)
    }
}

fn same_grid(p: &GridDistribution, q: &GridDistribution) -> bool {
    Arc::ptr_eq(&p.grid, &q.grid) || p.grid == q.grid
}

impl GridDistribution {
    /// Validated distribution: weights must be non-negative and sum to one
    /// within `1e-12`.
    pub fn new(grid: Arc<ActionGrid>, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != grid.len() {
            return Err(crate::error::shape_err("GridDistribution::new", grid.len(), weights.len()));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(invalid("weights", "must be finite and non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(invalid("weights", format!("sum to {total}, not 1")));
        }
        Ok(Self { grid, weights })
    }

    /// Normalizes non-negative weights with positive total.
    pub fn from_unnormalized(grid: Arc<ActionGrid>, weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::EmptySupport);
        }
        Self::new(grid, weights.into_iter().map(|w| w / total).collect())
    }

    pub fn uniform(grid: Arc<ActionGrid>) -> Self {
        let n = grid.len();
        Self {
            grid,
            weights: vec![1.0 / n as f64; n],
        }
    }

    pub fn dirac(grid: Arc<ActionGrid>, index: usize) -> Self {
        let mut weights = vec![0.0; grid.len()];
        weights[index] = 1.0;
        Self { grid, weights }
    }

    /// Softmax of `logits` over the grid.
    pub fn softmax(grid: Arc<ActionGrid>, logits: &[f64]) -> Result<Self> {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        Self::from_unnormalized(grid, w)
    }

    pub fn grid(&self) -> &Arc<ActionGrid> {
        &self.grid
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn min_weight(&self) -> f64 {
        self.weights.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn expectation(&self, f: &[f64]) -> f64 {
        self.weights.iter().zip(f).map(|(w, v)| w * v).sum()
    }

    pub fn mean(&self) -> f64 {
        self.expectation(self.grid.points())
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.weights
            .iter()
            .zip(self.grid.points())
            .map(|(w, a)| w * (a - m) * (a - m))
            .sum()
    }

    pub fn second_moment(&self) -> f64 {
        self.weights
            .iter()
            .zip(self.grid.points())
            .map(|(w, a)| w * a * a)
            .sum()
    }

    fn support(&self) -> impl Iterator<Item = usize> + '_ {
        self.weights
            .iter()
            .enumerate()
            .filter(|(_, w)| **w > 0.0)
            .map(|(i, _)| i)
    }
}

fn check_pair(p: &GridDistribution, q: &GridDistribution) -> Result<()> {
    if same_grid(p, q) {
        Ok(())
    } else {
        Err(Error::GridMismatch)
    }
}

/// One cell of the monotone coupling. `mass` may be zero for the linking
/// cells that keep the staircase connected when both cumulative masses
/// cross a breakpoint together.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CouplingCell {
    pub i: usize,
    pub j: usize,
    pub mass: f64,
}

/// The north-west corner (quantile) coupling of `p` and `q`, which is optimal
/// for any convex cost of `a - b` in one dimension.
pub fn monotone_coupling(p: &GridDistribution, q: &GridDistribution) -> Result<Vec<CouplingCell>> {
    check_pair(p, q)?;
    let sp: Vec<usize> = p.support().collect();
    let sq: Vec<usize> = q.support().collect();
    if sp.is_empty() || sq.is_empty() {
        return Err(Error::EmptySupport);
    }
    let mut cells = Vec::with_capacity(sp.len() + sq.len());
    let (mut a, mut b) = (0usize, 0usize);
    let (mut cum_p, mut cum_q) = (p.weights[sp[0]], q.weights[sq[0]]);
    let mut t = 0.0f64;
    loop {
        let (i, j) = (sp[a], sq[b]);
        let last_p = a + 1 == sp.len();
        let last_q = b + 1 == sq.len();
        if last_p && last_q {
            cells.push(CouplingCell { i, j, mass: (1.0 - t).max(0.0) });
            break;
        }
        let p_done = !last_p && (cum_p <= cum_q + CUM_EPS || last_q);
        let q_done = !last_q && (cum_q <= cum_p + CUM_EPS || last_p);
        let next = match (p_done, q_done) {
            (true, true) => 0.5 * (cum_p + cum_q),
            (true, false) => cum_p,
            _ => cum_q,
        };
        cells.push(CouplingCell { i, j, mass: (next - t).max(0.0) });
        t = next.max(t);
        if p_done && q_done {
            // Degenerate breakpoint: add a zero-mass link (i', j) so the
            // staircase stays connected.
            a += 1;
            b += 1;
            cum_p += p.weights[sp[a]];
            cum_q += q.weights[sq[b]];
            cells.push(CouplingCell { i: sp[a], j, mass: 0.0 });
        } else if p_done {
            a += 1;
            cum_p += p.weights[sp[a]];
        } else {
            b += 1;
            cum_q += q.weights[sq[b]];
        }
    }
    Ok(cells)
}

/// Optimal transport value for the cost `(a - b)^2 / 2`.
pub fn half_cost(p: &GridDistribution, q: &GridDistribution) -> Result<f64> {
    let grid = &p.grid;
    Ok(monotone_coupling(p, q)?
        .iter()
        .map(|c| c.mass * grid.cost(c.i, c.j))
        .sum())
}

/// Squared 2-Wasserstein distance (unhalved).
pub fn w2_squared(p: &GridDistribution, q: &GridDistribution) -> Result<f64> {
    Ok(2.0 * half_cost(p, q)?)
}

pub fn w2(p: &GridDistribution, q: &GridDistribution) -> Result<f64> {
    Ok(w2_squared(p, q)?.max(0.0).sqrt())
}

/// Kantorovich potentials for the half cost, defined on every grid point.
#[derive(Clone, Debug, PartialEq)]
pub struct PotentialPair {
    /// Potential on the source (`p`) side.
    pub phi: Vec<f64>,
    /// Potential on the target (`q`) side.
    pub psi: Vec<f64>,
    /// `<phi, p>`, recorded because the split between `phi` and `psi` is only
    /// defined up to a constant.
    pub phi_mean: f64,
}

impl PotentialPair {
    pub fn dual_value(&self, p: &GridDistribution, q: &GridDistribution) -> f64 {
        p.expectation(&self.phi) + q.expectation(&self.psi)
    }

    /// Largest violation of `phi_i + psi_j <= c_ij` over all grid pairs.
    pub fn max_violation(&self, grid: &ActionGrid) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for i in 0..grid.len() {
            for j in 0..grid.len() {
                worst = worst.max(self.phi[i] + self.psi[j] - grid.cost(i, j));
            }
        }
        worst
    }
}

/// Optimal dual pair for `half_cost(p, q)`.
///
/// Equalities `phi_i + psi_j = c_ij` are propagated along the monotone
/// coupling's staircase starting from `phi = 0` at the first atom of `p`;
/// atoms without mass then receive c-transform values, which keeps the pair
/// feasible on the whole grid.
pub fn potentials(p: &GridDistribution, q: &GridDistribution) -> Result<PotentialPair> {
    let cells = monotone_coupling(p, q)?;
    let grid = &p.grid;
    let n = grid.len();
    let mut phi: Vec<Option<f64>> = vec![None; n];
    let mut psi: Vec<Option<f64>> = vec![None; n];
    phi[cells[0].i] = Some(0.0);
    for c in &cells {
        let cost = grid.cost(c.i, c.j);
        match (phi[c.i], psi[c.j]) {
            (Some(f), None) => psi[c.j] = Some(cost - f),
            (None, Some(g)) => phi[c.i] = Some(cost - g),
            (Some(_), Some(_)) => {}
            (None, None) => unreachable!("staircase is connected"),
        }
    }
    let psi_supp: Vec<(usize, f64)> = psi.iter().enumerate().filter_map(|(j, v)| v.map(|v| (j, v))).collect();
    let phi_full: Vec<f64> = (0..n)
        .map(|i| {
            phi[i].unwrap_or_else(|| {
                psi_supp
                    .iter()
                    .map(|&(j, g)| grid.cost(i, j) - g)
                    .fold(f64::INFINITY, f64::min)
            })
        })
        .collect();
    let psi_full: Vec<f64> = (0..n)
        .map(|j| {
            psi[j].unwrap_or_else(|| {
                (0..n)
                    .map(|i| grid.cost(i, j) - phi_full[i])
                    .fold(f64::INFINITY, f64::min)
            })
        })
        .collect();
    let phi_mean = p.expectation(&phi_full);
    Ok(PotentialPair {
        phi: phi_full,
        psi: psi_full,
        phi_mean,
    })
}

/// `half_cost(r, q) - half_cost(p, q) - <phi^{p->q}, r - p>`, which is
/// non-negative because the potential is a subgradient of `half_cost(., q)`.
pub fn supporting_hyperplane_check(p: &GridDistribution, q: &GridDistribution, r: &GridDistribution) -> Result<f64> {
    check_pair(p, r)?;
    let pot = potentials(p, q)?;
    let lin: f64 = pot
        .phi
        .iter()
        .zip(r.weights.iter().zip(&p.weights))
        .map(|(f, (rw, pw))| f * (rw - pw))
        .sum();
    Ok(half_cost(r, q)? - half_cost(p, q)? - lin)
}

/// Negative entropy `sum p ln p` with `0 ln 0 = 0`.
pub fn discrete_entropy(p: &GridDistribution) -> f64 {
    neg_entropy(&p.weights)
}

pub(crate) fn neg_entropy(w: &[f64]) -> f64 {
    w.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum()
}

/// `KL(p || q)`; `+inf` when `p` puts mass where `q` has none.
pub fn kl(p: &GridDistribution, q: &GridDistribution) -> Result<f64> {
    check_pair(p, q)?;
    let mut total = 0.0;
    for (&a, &b) in p.weights.iter().zip(&q.weights) {
        if a > 0.0 {
            if b <= 0.0 {
                return Ok(f64::INFINITY);
            }
            total += a * (a / b).ln();
        }
    }
    Ok(total)
}

/// Gaussian smoothing with the given variance. Each atom spreads its mass
/// over the grid with weights proportional to the Gaussian density at the
/// grid offsets; the kernel is truncated at the boundary and renormalized
/// per source atom, so total mass is preserved.
pub fn heat_step(p: &GridDistribution, variance: f64) -> Result<GridDistribution> {
    if !(variance >= 0.0) || !variance.is_finite() {
        return Err(invalid("variance", "must be finite and non-negative"));
    }
    if variance == 0.0 {
        return Ok(p.clone());
    }
    let pts = p.grid.points();
    let n = pts.len();
    let mut out = vec![0.0; n];
    let mut kernel = vec![0.0; n];
    for (j, &mass) in p.weights.iter().enumerate() {
        if mass == 0.0 {
            continue;
        }
        for (i, k) in kernel.iter_mut().enumerate() {
            let d = pts[i] - pts[j];
            *k = (-d * d / (2.0 * variance)).exp();
        }
        let z: f64 = kernel.iter().sum();
        for (o, k) in out.iter_mut().zip(&kernel) {
            *o += mass * k / z;
        }
    }
    let total: f64 = out.iter().sum();
    for o in &mut out {
        *o /= total;
    }
    GridDistribution::new(p.grid.clone(), out)
}

/// Proximal transport: every atom `b` moves to
/// `argmax_a { Q(a) - (a - b)^2 / (2 eta) }` over the grid (smallest index on
/// ties) and masses accumulate at the destinations.
pub fn transport_step(p: &GridDistribution, qvals: &[f64], eta: f64) -> Result<GridDistribution> {
    if qvals.len() != p.len() {
        return Err(crate::error::shape_err("transport_step", p.len(), qvals.len()));
    }
    crate::numeric::check_finite("Q values", qvals)?;
    if !(eta > 0.0) {
        return Err(invalid("eta", "must be positive"));
    }
    let grid = &p.grid;
    let mut out = vec![0.0; p.len()];
    for (j, &mass) in p.weights.iter().enumerate() {
        if mass == 0.0 {
            continue;
        }
        let mut best = 0;
        let mut best_val = f64::NEG_INFINITY;
        for (i, &qv) in qvals.iter().enumerate() {
            let v = qv - grid.cost(i, j) / eta;
            if v > best_val {
                best_val = v;
                best = i;
            }
        }
        out[best] += mass;
    }
    Ok(GridDistribution {
        grid: p.grid.clone(),
        weights: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn grid21() -> Arc<ActionGrid> {
        Arc::new(ActionGrid::default_grid())
    }

    fn dist(grid: &Arc<ActionGrid>, pairs: &[(usize, f64)]) -> GridDistribution {
        let mut w = vec![0.0; grid.len()];
        for &(i, m) in pairs {
            w[i] = m;
        }
        GridDistribution::new(grid.clone(), w).unwrap()
    }

    #[test]
    fn grid_validation() {
        assert!(ActionGrid::from_points(vec![0.0, 1.0, 2.5]).is_err());
        assert!(ActionGrid::from_points(vec![0.0, 0.0]).is_err());
        let g = ActionGrid::default_grid();
        assert_eq!(g.len(), 21);
        assert_abs_diff_eq!(g.spacing(), 0.1, epsilon = 1e-15);
        assert_eq!(g.nearest_index(0.26), 13);
    }

    #[test]
    fn distribution_validation() {
        let g = grid21();
        assert!(GridDistribution::new(g.clone(), vec![0.5; 21]).is_err());
        let mut w = vec![0.0; 21];
        w[0] = 1.5;
        w[1] = -0.5;
        assert!(GridDistribution::new(g.clone(), w).is_err());
        assert!(GridDistribution::from_unnormalized(g, vec![0.0; 21]).is_err());
    }

    #[test]
    fn w2_basic_cases() {
        let g = Arc::new(ActionGrid::uniform(3, 0.0, 2.0).unwrap());
        let d0 = GridDistribution::dirac(g.clone(), 0);
        let d1 = GridDistribution::dirac(g.clone(), 1);
        assert_eq!(w2_squared(&d0, &d0).unwrap(), 0.0);
        assert_abs_diff_eq!(w2_squared(&d0, &d1).unwrap(), 1.0, epsilon = 1e-15);
        let p = GridDistribution::new(g.clone(), vec![0.5, 0.5, 0.0]).unwrap();
        let q = GridDistribution::new(g.clone(), vec![0.0, 0.5, 0.5]).unwrap();
        assert_abs_diff_eq!(w2_squared(&p, &q).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(half_cost(&p, &q).unwrap(), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn two_by_two_matches_brute_force() {
        // Couplings of (1/2, 1/2) on {0, 1} with (1/2, 1/2) on {1, 2}:
        // gamma = [[x, 1/2 - x], [1/2 - x, x]], x in [0, 1/2].
        let g = Arc::new(ActionGrid::uniform(3, 0.0, 2.0).unwrap());
        let p = GridDistribution::new(g.clone(), vec![0.5, 0.5, 0.0]).unwrap();
        let q = GridDistribution::new(g.clone(), vec![0.0, 0.5, 0.5]).unwrap();
        let brute = (0..=1000)
            .map(|k| {
                let x = 0.5 * k as f64 / 1000.0;
                x * 1.0 + (0.5 - x) * 4.0 + (0.5 - x) * 0.0 + x * 1.0
            })
            .fold(f64::INFINITY, f64::min);
        assert_abs_diff_eq!(w2_squared(&p, &q).unwrap(), brute, epsilon = 1e-12);
    }

    #[test]
    fn grid_mismatch_is_an_error() {
        let p = GridDistribution::uniform(grid21());
        let q = GridDistribution::uniform(Arc::new(ActionGrid::uniform(21, 0.0, 1.0).unwrap()));
        assert_eq!(w2_squared(&p, &q), Err(Error::GridMismatch));
    }

    #[test]
    fn potentials_dirac_cases() {
        let g = grid21();
        let d = GridDistribution::dirac(g.clone(), 4);
        let pot = potentials(&d, &d).unwrap();
        assert_eq!(pot.phi[4], 0.0);
        assert_eq!(pot.psi[4], 0.0);

        let g2 = Arc::new(ActionGrid::uniform(2, 0.0, 1.0).unwrap());
        let p = GridDistribution::dirac(g2.clone(), 0);
        let q = GridDistribution::dirac(g2.clone(), 1);
        let pot = potentials(&p, &q).unwrap();
        assert_eq!(pot.phi[0], 0.0);
        assert_abs_diff_eq!(pot.psi[1], 0.5, epsilon = 1e-15);
        assert!(pot.max_violation(&g2) <= 1e-12);
    }

    #[test]
    fn potentials_identical_full_support_is_feasible() {
        let g = grid21();
        let p = GridDistribution::uniform(g.clone());
        let pot = potentials(&p, &p).unwrap();
        assert!(pot.max_violation(&g) <= 1e-12);
        assert_abs_diff_eq!(pot.dual_value(&p, &p), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn entropy_values() {
        let g = grid21();
        assert_eq!(discrete_entropy(&GridDistribution::dirac(g.clone(), 3)), 0.0);
        assert_abs_diff_eq!(discrete_entropy(&GridDistribution::uniform(g.clone())), -(21f64).ln(), epsilon = 1e-12);
        let p = dist(&g, &[(0, 0.75), (1, 0.25)]);
        assert_abs_diff_eq!(discrete_entropy(&p), -0.562_335_144_618_563, epsilon = 1e-12);
    }

    #[test]
    fn kl_values() {
        let g = grid21();
        let u = GridDistribution::uniform(g.clone());
        let d = GridDistribution::dirac(g.clone(), 7);
        assert_eq!(kl(&u, &u).unwrap(), 0.0);
        assert_abs_diff_eq!(kl(&d, &u).unwrap(), (21f64).ln(), epsilon = 1e-12);
        assert_eq!(kl(&u, &d).unwrap(), f64::INFINITY);
    }

    #[test]
    fn heat_identity_and_symmetry() {
        let g = grid21();
        let p = dist(&g, &[(3, 0.2), (10, 0.8)]);
        assert_eq!(heat_step(&p, 0.0).unwrap(), p);
        let c = GridDistribution::dirac(g.clone(), 10);
        let dx = g.spacing();
        let out = heat_step(&c, (4.0 * dx).powi(2)).unwrap();
        let w = out.weights();
        for k in 1..=10 {
            assert_abs_diff_eq!(w[10 - k], w[10 + k], epsilon = 1e-15);
            let ratio = w[10 + k] / w[10];
            let want = (-(k as f64 * dx).powi(2) / (2.0 * (4.0 * dx).powi(2))).exp();
            assert_abs_diff_eq!(ratio, want, epsilon = 1e-12);
        }
        assert!(heat_step(&c, -1.0).is_err());
    }

    #[test]
    fn transport_constant_q_is_identity() {
        let g = grid21();
        let p = dist(&g, &[(2, 0.3), (9, 0.3), (17, 0.4)]);
        let out = transport_step(&p, &[1.5; 21], 0.1).unwrap();
        assert_eq!(out.weights(), p.weights());
    }

    #[test]
    fn transport_large_eta_hits_maximizer() {
        let g = grid21();
        let target = 0.33;
        let q: Vec<f64> = g.points().iter().map(|a| -(a - target).powi(2) / 2.0).collect();
        let p = GridDistribution::uniform(g.clone());
        let out = transport_step(&p, &q, 1e9).unwrap();
        let k = g.nearest_index(target);
        assert_abs_diff_eq!(out.weights()[k], 1.0, epsilon = 1e-12);
    }
}
