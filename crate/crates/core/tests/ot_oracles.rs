use std::sync::Arc;

use proptest::prelude::*;
use wppg_core::ot1d::{half_cost, heat_step, monotone_coupling, potentials, supporting_hyperplane_check, w2, w2_squared, ActionGrid, GridDistribution};
use wppg_core::Rng;

/// Min-cost transportation by successive shortest paths (Bellman-Ford on
/// the residual graph). Arcs source->sink are uncapacitated; the bottleneck
/// of each augmentation is the remaining supply, the remaining demand, or
/// the flow on a reversed arc.
fn min_cost_flow(p: &[f64], q: &[f64], cost: impl Fn(usize, usize) -> f64) -> f64 {
    let (m, n) = (p.len(), q.len());
    let mut flow = vec![vec![0.0f64; n]; m];
    let mut supply = p.to_vec();
    let mut demand = q.to_vec();
    let eps = 1e-15;
    for _ in 0..10 * (m + n) * (m + n) {
        if supply.iter().all(|&s| s <= eps) {
            break;
        }
        // Nodes: 0..m sources, m..m+n sinks. Distances from every source
        // with remaining supply at once.
        let mut dist = vec![f64::INFINITY; m + n];
        let mut prev = vec![usize::MAX; m + n];
        for i in 0..m {
            if supply[i] > eps {
                dist[i] = 0.0;
            }
        }
        for _ in 0..m + n {
            let mut changed = false;
            for i in 0..m {
                for j in 0..n {
                    let c = cost(i, j);
                    if dist[i] + c < dist[m + j] - 1e-15 {
                        dist[m + j] = dist[i] + c;
                        prev[m + j] = i;
                        changed = true;
                    }
                    if flow[i][j] > eps && dist[m + j] - c < dist[i] - 1e-15 {
                        dist[i] = dist[m + j] - c;
                        prev[i] = m + j;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let t = (0..n)
            .filter(|&j| demand[j] > eps && dist[m + j].is_finite())
            .min_by(|&a, &b| dist[m + a].total_cmp(&dist[m + b]))
            .expect("balanced problem has a reachable sink");
        let mut path = vec![m + t];
        let mut v = m + t;
        while prev[v] != usize::MAX {
            v = prev[v];
            path.push(v);
        }
        path.reverse();
        let s = path[0];
        let mut amount = supply[s].min(demand[t]);
        for w in path.windows(2) {
            if w[0] >= m {
                amount = amount.min(flow[w[1]][w[0] - m]);
            }
        }
        for w in path.windows(2) {
            if w[0] < m {
                flow[w[0]][w[1] - m] += amount;
            } else {
                flow[w[1]][w[0] - m] -= amount;
            }
        }
        supply[s] -= amount;
        demand[t] -= amount;
    }
    (0..m).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| flow[i][j] * cost(i, j)).sum()
}

fn grid(n: usize) -> Arc<ActionGrid> {
    Arc::new(ActionGrid::uniform(n, -1.0, 1.0).unwrap())
}

fn sparse_weights(rng: &mut Rng, n: usize) -> Vec<f64> {
    let mut w: Vec<f64> = (0..n).map(|_| if rng.below(3) == 0 { 0.0 } else { rng.uniform() }).collect();
    if w.iter().all(|&x| x == 0.0) {
        w[0] = 1.0;
    }
    let s: f64 = w.iter().sum();
    w.iter().map(|x| x / s).collect()
}

#[test]
fn eight_atom_instances_match_min_cost_flow() {
    let g = grid(8);
    let mut rng = Rng::new(21);
    for _ in 0..200 {
        let p = GridDistribution::new(g.clone(), sparse_weights(&mut rng, 8)).unwrap();
        let q = GridDistribution::new(g.clone(), sparse_weights(&mut rng, 8)).unwrap();
        let oracle = min_cost_flow(p.weights(), q.weights(), |i, j| g.cost(i, j));
        let got = half_cost(&p, &q).unwrap();
        assert!((got - oracle).abs() < 1e-9, "{got} vs {oracle}");
        let pot = potentials(&p, &q).unwrap();
        assert!((pot.dual_value(&p, &q) - oracle).abs() < 1e-9);
        assert!(pot.max_violation(&g) < 1e-9);
    }
}

#[test]
fn coupling_has_the_right_marginals() {
    let g = grid(11);
    let mut rng = Rng::new(4);
    for _ in 0..100 {
        let p = GridDistribution::new(g.clone(), sparse_weights(&mut rng, 11)).unwrap();
        let q = GridDistribution::new(g.clone(), sparse_weights(&mut rng, 11)).unwrap();
        let mut rows = [0.0; 11];
        let mut cols = [0.0; 11];
        for c in monotone_coupling(&p, &q).unwrap() {
            assert!(c.mass >= 0.0);
            rows[c.i] += c.mass;
            cols[c.j] += c.mass;
        }
        for k in 0..11 {
            assert!((rows[k] - p.weights()[k]).abs() < 1e-12);
            assert!((cols[k] - q.weights()[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn hyperplane_holds_for_nearby_perturbations() {
    // Small perturbations of p are where a wrong subgradient shows first.
    let g = grid(21);
    let mut rng = Rng::new(8);
    for _ in 0..300 {
        let p = GridDistribution::new(g.clone(), sparse_weights(&mut rng, 21)).unwrap();
        let q = GridDistribution::new(g.clone(), sparse_weights(&mut rng, 21)).unwrap();
        let eps = 10f64.powi(-(1 + rng.below(6) as i32));
        let noise = sparse_weights(&mut rng, 21);
        let r: Vec<f64> = p.weights().iter().zip(&noise).map(|(a, b)| (1.0 - eps) * a + eps * b).collect();
        let r = GridDistribution::new(g.clone(), r).unwrap();
        assert!(supporting_hyperplane_check(&p, &q, &r).unwrap() >= -1e-9);
    }
}

#[test]
fn heat_step_adds_its_variance_to_the_second_moment() {
    let g = grid(201);
    let mut w = vec![0.0; 201];
    for (k, v) in w.iter_mut().enumerate().take(110).skip(90) {
        *v = 1.0 + (k as f64 * 0.7).sin().abs();
    }
    let p = GridDistribution::from_unnormalized(g, w).unwrap();
    let var = 0.004;
    let out = heat_step(&p, var).unwrap();
    let want = p.second_moment() + var;
    assert!(((out.second_moment() - want) / want).abs() < 0.02);
    assert!((out.mean() - p.mean()).abs() < 1e-3);
}

fn dist_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![Just(0.0), 0.0..1.0f64], n).prop_filter("some mass", |w| w.iter().sum::<f64>() > 1e-3)
}

proptest! {
    #[test]
    fn w2_is_a_metric(a in dist_strategy(9), b in dist_strategy(9), c in dist_strategy(9)) {
        let g = grid(9);
        let (p, q, r) = (
            GridDistribution::from_unnormalized(g.clone(), a).unwrap(),
            GridDistribution::from_unnormalized(g.clone(), b).unwrap(),
            GridDistribution::from_unnormalized(g.clone(), c).unwrap(),
        );
        prop_assert!(w2(&p, &p).unwrap().abs() < 1e-7);
        prop_assert!((w2_squared(&p, &q).unwrap() - w2_squared(&q, &p).unwrap()).abs() < 1e-12);
        prop_assert!(w2(&p, &r).unwrap() <= w2(&p, &q).unwrap() + w2(&q, &r).unwrap() + 1e-9);
        prop_assert!(w2_squared(&p, &q).unwrap() >= (p.mean() - q.mean()).powi(2) - 1e-12);
    }

    #[test]
    fn dual_pair_is_feasible_and_tight(a in dist_strategy(12), b in dist_strategy(12)) {
        let g = grid(12);
        let p = GridDistribution::from_unnormalized(g.clone(), a).unwrap();
        let q = GridDistribution::from_unnormalized(g.clone(), b).unwrap();
        let pot = potentials(&p, &q).unwrap();
        prop_assert!(pot.max_violation(&g) < 1e-9);
        prop_assert!((pot.dual_value(&p, &q) - half_cost(&p, &q).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn shifting_by_whole_cells_costs_the_shift(a in dist_strategy(6), k in 1usize..5) {
        let g = grid(12);
        let mut lo = a.clone();
        lo.resize(12, 0.0);
        let mut hi = vec![0.0; k];
        hi.extend_from_slice(&a);
        hi.resize(12, 0.0);
        let p = GridDistribution::from_unnormalized(g.clone(), lo).unwrap();
        let q = GridDistribution::from_unnormalized(g.clone(), hi).unwrap();
        let d = k as f64 * g.spacing();
        prop_assert!((w2_squared(&p, &q).unwrap() - d * d).abs() < 1e-12);
    }

    #[test]
    fn heat_step_preserves_mass(a in dist_strategy(15), var in 0.0..0.5f64) {
        let p = GridDistribution::from_unnormalized(grid(15), a).unwrap();
        let out = heat_step(&p, var).unwrap();
        prop_assert!((out.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(out.weights().iter().all(|&w| w >= 0.0));
    }
}
