//! Stochastic actors: the tanh-Gaussian explicit policy and the
//! noise-conditioned implicit policy.
//!
//! Both map `(state, noise)` deterministically to an action inside the
//! environment's box. Keeping the noise explicit is what allows the actor
//! update to re-forward the same samples after a parameter change.

use crate::error::{invalid, shape_err, Result};
use crate::nn::{Activation, ForwardCache, MlpNet};
use crate::numeric::{Mat, Rng};

pub const LOG_STD_MIN: f64 = -10.0;
pub const LOG_STD_MAX: f64 = 4.0;

/// Per-dimension action bounds.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionBox {
    low: Vec<f64>,
    high: Vec<f64>,
}

impl ActionBox {
    pub fn new(low: Vec<f64>, high: Vec<f64>) -> Result<Self> {
        if low.len() != high.len() || low.is_empty() {
            return Err(shape_err("ActionBox::new", low.len(), high.len()));
        }
        if low.iter().zip(&high).any(|(l, h)| !(l < h) || !l.is_finite() || !h.is_finite()) {
            return Err(invalid("action box", "need finite a_min < a_max in every dimension"));
        }
        Ok(Self { low, high })
    }

    pub fn symmetric(bound: f64, dim: usize) -> Result<Self> {
        Self::new(vec![-bound; dim], vec![bound; dim])
    }

    pub fn dim(&self) -> usize {
        self.low.len()
    }

    pub fn low(&self) -> &[f64] {
        &self.low
    }

    pub fn high(&self) -> &[f64] {
        &self.high
    }

    fn half_range(&self, i: usize) -> f64 {
        0.5 * (self.high[i] - self.low[i])
    }

    fn mid(&self, i: usize) -> f64 {
        0.5 * (self.high[i] + self.low[i])
    }

    /// Clamp an action into the closed box.
    pub fn clip(&self, a: &mut [f64]) {
        for (i, x) in a.iter_mut().enumerate() {
            *x = x.clamp(self.low[i], self.high[i]);
        }
    }

    pub fn contains(&self, a: &[f64]) -> bool {
        a.len() == self.dim() && a.iter().enumerate().all(|(i, &x)| x >= self.low[i] && x <= self.high[i])
    }
}

/// Affine tanh map of a pre-activation into the box:
/// `half_range * tanh(u) + mid`.
pub fn squash(u: &[f64], bx: &ActionBox) -> Vec<f64> {
    u.iter()
        .enumerate()
        .map(|(i, &x)| bx.half_range(i) * x.tanh() + bx.mid(i))
        .collect()
}

fn squash_rows(pre: &Mat, bx: &ActionBox) -> Mat {
    let mut out = pre.clone();
    let cols = out.cols();
    for row in out.as_mut_slice().chunks_exact_mut(cols) {
        for (i, x) in row.iter_mut().enumerate() {
            *x = bx.half_range(i) * x.tanh() + bx.mid(i);
        }
    }
    out
}

/// `upstream .* d squash / d u`, rowwise.
fn squash_backward(pre: &Mat, upstream: &Mat, bx: &ActionBox) -> Mat {
    let mut g = upstream.clone();
    let cols = g.cols();
    for (grow, prow) in g
        .as_mut_slice()
        .chunks_exact_mut(cols)
        .zip(pre.as_slice().chunks_exact(cols))
    {
        for (i, (gv, u)) in grow.iter_mut().zip(prow).enumerate() {
            let t = u.tanh();
            *gv *= bx.half_range(i) * (1.0 - t * t);
        }
    }
    g
}

/// Everything a batched actor forward needs for its backward pass.
#[derive(Clone, Debug)]
pub struct ActorCache {
    net: ForwardCache,
    pre_squash: Mat,
    noise: Mat,
    /// Explicit actor only: `sigma` per entry, zeroed where the log-std clamp
    /// is active (no gradient flows through a clamped head).
    sigma_pass: Option<Mat>,
}

impl ActorCache {
    pub fn pre_squash(&self) -> &Mat {
        &self.pre_squash
    }

    pub fn noise(&self) -> &Mat {
        &self.noise
    }
}

/// Gradients of `sum(upstream .* actions)`.
#[derive(Clone, Debug)]
pub struct ActorGrads {
    pub params: Vec<f64>,
    pub state: Mat,
}

/// A single stochastic action together with the noise that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionSample {
    pub action: Vec<f64>,
    pub pre_squash: Vec<f64>,
    pub noise: Vec<f64>,
}

/// Interface shared by both actor families.
pub trait Actor: Clone + Send {
    fn state_dim(&self) -> usize;
    fn action_box(&self) -> &ActionBox;
    /// Width of the noise input (`A` for the explicit actor, latent size for
    /// the implicit one).
    fn noise_dim(&self) -> usize;
    fn net(&self) -> &MlpNet;
    fn net_mut(&mut self) -> &mut MlpNet;

    /// Actions for a batch of `(state, noise)` rows.
    fn act_batch(&self, states: &Mat, noise: &Mat) -> Result<(Mat, ActorCache)>;

    fn backward(&self, cache: &ActorCache, upstream: &Mat) -> Result<ActorGrads>;

    /// Noise used for the low-variance evaluation action of episode `episode`.
    fn eval_noise(&self, eval_latents: &Mat, episode: usize) -> Vec<f64>;

    fn action_dim(&self) -> usize {
        self.action_box().dim()
    }

    fn sample_noise(&self, rng: &mut Rng, n: usize) -> Mat {
        let mut m = Mat::zeros(n, self.noise_dim());
        rng.fill_normal(m.as_mut_slice());
        m
    }

    fn params(&self) -> Vec<f64> {
        self.net().params()
    }

    fn set_params(&mut self, p: &[f64]) -> Result<()> {
        self.net_mut().set_params(p)
    }

    /// Draw fresh noise and act at a single state.
    fn sample(&self, state: &[f64], rng: &mut Rng) -> Result<ActionSample> {
        let noise = self.sample_noise(rng, 1).into_vec();
        self.act_with(state, &noise)
    }

    fn act_with(&self, state: &[f64], noise: &[f64]) -> Result<ActionSample> {
        let s = Mat::from_vec(1, state.len(), state.to_vec())?;
        let z = Mat::from_vec(1, noise.len(), noise.to_vec())?;
        let (a, cache) = self.act_batch(&s, &z)?;
        Ok(ActionSample {
            action: a.into_vec(),
            pre_squash: cache.pre_squash.into_vec(),
            noise: noise.to_vec(),
        })
    }
}

fn check_batch(states: &Mat, noise: &Mat, state_dim: usize, noise_dim: usize) -> Result<()> {
    if states.cols() != state_dim {
        return Err(shape_err("actor states", state_dim, states.cols()));
    }
    if noise.cols() != noise_dim || noise.rows() != states.rows() {
        return Err(shape_err(
            "actor noise",
            format!("{}x{noise_dim}", states.rows()),
            format!("{}x{}", noise.rows(), noise.cols()),
        ));
    }
    Ok(())
}

/// Tanh-Gaussian actor: the network emits `(mu, log sigma)` and
/// `a = squash(mu + sigma .* eps)` with `eps ~ N(0, I_A)`.
#[derive(Clone, Debug)]
pub struct ExplicitActor {
    net: MlpNet,
    bx: ActionBox,
}

impl ExplicitActor {
    pub fn new(state_dim: usize, hidden: &[usize], activation: Activation, bx: ActionBox, rng: &mut Rng) -> Result<Self> {
        let mut widths = vec![state_dim];
        widths.extend_from_slice(hidden);
        widths.push(2 * bx.dim());
        Ok(Self {
            net: MlpNet::new(&widths, activation, rng)?,
            bx,
        })
    }

    pub fn from_net(net: MlpNet, bx: ActionBox) -> Result<Self> {
        if net.output_dim() != 2 * bx.dim() {
            return Err(shape_err("ExplicitActor::from_net", 2 * bx.dim(), net.output_dim()));
        }
        Ok(Self { net, bx })
    }
}

impl Actor for ExplicitActor {
    fn state_dim(&self) -> usize {
        self.net.input_dim()
    }

    fn action_box(&self) -> &ActionBox {
        &self.bx
    }

    fn noise_dim(&self) -> usize {
        self.bx.dim()
    }

    fn net(&self) -> &MlpNet {
        &self.net
    }

    fn net_mut(&mut self) -> &mut MlpNet {
        &mut self.net
    }

    fn act_batch(&self, states: &Mat, noise: &Mat) -> Result<(Mat, ActorCache)> {
        let a_dim = self.bx.dim();
        check_batch(states, noise, self.state_dim(), a_dim)?;
        let (out, net_cache) = self.net.forward_batch(states)?;
        let n = states.rows();
        let mut pre = Mat::zeros(n, a_dim);
        let mut sigma_pass = Mat::zeros(n, a_dim);
        for r in 0..n {
            let o = out.row(r);
            for i in 0..a_dim {
                let raw = o[a_dim + i];
                let log_std = raw.clamp(LOG_STD_MIN, LOG_STD_MAX);
                let sigma = log_std.exp();
                pre[(r, i)] = o[i] + sigma * noise[(r, i)];
                if raw > LOG_STD_MIN && raw < LOG_STD_MAX {
                    sigma_pass[(r, i)] = sigma;
                }
            }
        }
        let actions = squash_rows(&pre, &self.bx);
        Ok((
            actions,
            ActorCache {
                net: net_cache,
                pre_squash: pre,
                noise: noise.clone(),
                sigma_pass: Some(sigma_pass),
            },
        ))
    }

    fn backward(&self, cache: &ActorCache, upstream: &Mat) -> Result<ActorGrads> {
        let a_dim = self.bx.dim();
        let n = cache.pre_squash.rows();
        if upstream.rows() != n || upstream.cols() != a_dim {
            return Err(shape_err("ExplicitActor::backward", format!("{n}x{a_dim}"), format!("{}x{}", upstream.rows(), upstream.cols())));
        }
        let g_pre = squash_backward(&cache.pre_squash, upstream, &self.bx);
        let sigma_pass = cache.sigma_pass.as_ref().expect("explicit actor cache");
        let mut g_out = Mat::zeros(n, 2 * a_dim);
        for r in 0..n {
            for i in 0..a_dim {
                let g = g_pre[(r, i)];
                g_out[(r, i)] = g;
                // d pre / d raw_log_std = sigma * eps inside the clamp range.
                g_out[(r, a_dim + i)] = g * cache.noise[(r, i)] * sigma_pass[(r, i)];
            }
        }
        let grads = self.net.backward(&cache.net, &g_out)?;
        Ok(ActorGrads {
            params: grads.params,
            state: grads.input,
        })
    }

    fn eval_noise(&self, _eval_latents: &Mat, _episode: usize) -> Vec<f64> {
        vec![0.0; self.bx.dim()]
    }
}

/// Noise-conditioned deterministic generator: `a = squash(f([s, z]))` with
/// `z ~ N(0, I_M)` concatenated at the input layer.
#[derive(Clone, Debug)]
pub struct ImplicitActor {
    net: MlpNet,
    state_dim: usize,
    latent_dim: usize,
    bx: ActionBox,
}

/// Default latent width: one third of the state width, rounded up.
pub fn default_latent_dim(state_dim: usize) -> usize {
    state_dim.div_ceil(3)
}

impl ImplicitActor {
    pub fn new(
        state_dim: usize,
        latent_dim: usize,
        hidden: &[usize],
        activation: Activation,
        bx: ActionBox,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut widths = vec![state_dim + latent_dim];
        widths.extend_from_slice(hidden);
        widths.push(bx.dim());
        Ok(Self {
            net: MlpNet::new(&widths, activation, rng)?,
            state_dim,
            latent_dim,
            bx,
        })
    }

    pub fn from_net(net: MlpNet, state_dim: usize, bx: ActionBox) -> Result<Self> {
        if net.output_dim() != bx.dim() || net.input_dim() < state_dim {
            return Err(shape_err("ImplicitActor::from_net", format!("output {}", bx.dim()), net.output_dim()));
        }
        let latent_dim = net.input_dim() - state_dim;
        Ok(Self { net, state_dim, latent_dim, bx })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }
}

impl Actor for ImplicitActor {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn action_box(&self) -> &ActionBox {
        &self.bx
    }

    fn noise_dim(&self) -> usize {
        self.latent_dim
    }

    fn net(&self) -> &MlpNet {
        &self.net
    }

    fn net_mut(&mut self) -> &mut MlpNet {
        &mut self.net
    }

    fn act_batch(&self, states: &Mat, noise: &Mat) -> Result<(Mat, ActorCache)> {
        check_batch(states, noise, self.state_dim, self.latent_dim)?;
        let input = states.hcat(noise)?;
        let (pre, net_cache) = self.net.forward_batch(&input)?;
        let actions = squash_rows(&pre, &self.bx);
        Ok((
            actions,
            ActorCache {
                net: net_cache,
                pre_squash: pre,
                noise: noise.clone(),
                sigma_pass: None,
            },
        ))
    }

    fn backward(&self, cache: &ActorCache, upstream: &Mat) -> Result<ActorGrads> {
        let n = cache.pre_squash.rows();
        if upstream.rows() != n || upstream.cols() != self.bx.dim() {
            return Err(shape_err("ImplicitActor::backward", format!("{n}x{}", self.bx.dim()), format!("{}x{}", upstream.rows(), upstream.cols())));
        }
        let g_pre = squash_backward(&cache.pre_squash, upstream, &self.bx);
        let grads = self.net.backward(&cache.net, &g_pre)?;
        Ok(ActorGrads {
            params: grads.params,
            state: grads.input.columns(0, self.state_dim),
        })
    }

    fn eval_noise(&self, eval_latents: &Mat, episode: usize) -> Vec<f64> {
        if self.latent_dim == 0 || eval_latents.rows() == 0 {
            return vec![0.0; self.latent_dim];
        }
        let row = eval_latents.row(episode % eval_latents.rows());
        row[..self.latent_dim.min(row.len())].to_vec()
    }
}

/// `a_after(s, noise) - a_before(s, noise)`: the action displacement caused by
/// a parameter change, holding the noise fixed.
pub fn reforward_delta<A: Actor>(before: &A, after: &A, state: &[f64], noise: &[f64]) -> Result<Vec<f64>> {
    let a0 = before.act_with(state, noise)?.action;
    let a1 = after.act_with(state, noise)?.action;
    Ok(a1.iter().zip(&a0).map(|(x, y)| x - y).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn pend_box() -> ActionBox {
        ActionBox::symmetric(2.0, 1).unwrap()
    }

    #[test]
    fn squash_midpoint_saturation_and_value() {
        let bx = ActionBox::new(vec![-1.0, 0.0], vec![3.0, 1.0]).unwrap();
        assert_eq!(squash(&[0.0, 0.0], &bx), vec![1.0, 0.5]);
        let sat = squash(&[50.0, 50.0], &bx);
        assert_abs_diff_eq!(sat[0], 3.0, epsilon = 1e-10);
        assert_abs_diff_eq!(sat[1], 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(squash(&[1.0], &pend_box())[0], 1.523_188_311_911_530_6, epsilon = 1e-12);
    }

    #[test]
    fn box_rejects_inverted_bounds() {
        assert!(ActionBox::new(vec![1.0], vec![1.0]).is_err());
        assert!(ActionBox::new(vec![0.0], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn vanishing_sigma_gives_squashed_mean() {
        let mut rng = Rng::new(2);
        let actor = ExplicitActor::new(3, &[8], Activation::Tanh, pend_box(), &mut rng).unwrap();
        let mut net = actor.net().clone();
        let mut p = net.params();
        // push the log-std head far below the clamp
        let n = p.len();
        p[n - 1] = -50.0;
        net.set_params(&p).unwrap();
        let actor = ExplicitActor::from_net(net, pend_box()).unwrap();
        let s = [0.1, -0.4, 0.7];
        let sample = actor.sample(&s, &mut rng).unwrap();
        let mean = actor.act_with(&s, &[0.0]).unwrap().action;
        assert!((sample.action[0] - mean[0]).abs() < 1e-3);
    }

    #[test]
    fn same_noise_same_action() {
        let mut rng = Rng::new(3);
        let actor = ExplicitActor::new(2, &[8], Activation::Tanh, pend_box(), &mut rng).unwrap();
        let s = [0.2, 0.3];
        let a = actor.sample(&s, &mut rng).unwrap();
        let b = actor.act_with(&s, &a.noise).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn explicit_pre_squash_mean_matches_mu() {
        let mut rng = Rng::new(4);
        let actor = ExplicitActor::new(2, &[8], Activation::Tanh, pend_box(), &mut rng).unwrap();
        let s = [0.5, -0.5];
        let mut net = actor.net().clone();
        let out = net.forward(&s).unwrap();
        let (mu, sigma) = (out[0], out[1].clamp(LOG_STD_MIN, LOG_STD_MAX).exp());
        let n = 100_000;
        let states = Mat::repeat_row(&s, n);
        let noise = actor.sample_noise(&mut rng, n);
        let (_, cache) = actor.act_batch(&states, &noise).unwrap();
        let mean = cache.pre_squash().as_slice().iter().sum::<f64>() / n as f64;
        assert!((mean - mu).abs() < 4.0 * sigma / (n as f64).sqrt());
    }

    #[test]
    fn implicit_zero_latent_is_deterministic() {
        let mut rng = Rng::new(5);
        let actor = ImplicitActor::new(2, 0, &[8], Activation::Tanh, pend_box(), &mut rng).unwrap();
        let s = [0.1, 0.2];
        let a = actor.sample(&s, &mut rng).unwrap();
        let b = actor.sample(&s, &mut rng).unwrap();
        assert!(a.noise.is_empty());
        assert_eq!(a.action, b.action);
    }

    #[test]
    fn implicit_distinct_latents_distinct_actions() {
        let mut rng = Rng::new(6);
        let actor = ImplicitActor::new(3, 1, &[16, 16], Activation::Tanh, pend_box(), &mut rng).unwrap();
        let s = [0.3, -0.1, 0.9];
        for _ in 0..100 {
            let a = actor.sample(&s, &mut rng).unwrap();
            let b = actor.sample(&s, &mut rng).unwrap();
            assert_ne!(a.action, b.action);
            assert_eq!(actor.act_with(&s, &a.noise).unwrap(), a);
        }
    }

    #[test]
    fn reforward_delta_cases() {
        let mut rng = Rng::new(7);
        let actor = ImplicitActor::new(2, 1, &[8], Activation::Tanh, pend_box(), &mut rng).unwrap();
        let s = [0.4, 0.1];
        let z = [0.3];
        assert_eq!(reforward_delta(&actor, &actor, &s, &z).unwrap(), vec![0.0]);

        let mut plus = actor.clone();
        let mut minus = actor.clone();
        let mut p = actor.params();
        let idx = 3;
        p[idx] += 1e-6;
        plus.set_params(&p).unwrap();
        p[idx] -= 2e-6;
        minus.set_params(&p).unwrap();
        let dp = reforward_delta(&actor, &plus, &s, &z).unwrap()[0];
        let dm = reforward_delta(&actor, &minus, &s, &z).unwrap()[0];
        assert!(dp * dm < 0.0);
    }

    #[test]
    fn reforward_delta_first_order_linear_actor() {
        // Linear generator: pre = W [s, z] + b; delta ~ J_squash * dW * input.
        let w = Mat::from_rows(&[vec![0.5, -0.3, 0.8]]).unwrap();
        let net = MlpNet::linear(w.clone(), vec![0.1]).unwrap();
        let bx = pend_box();
        let actor = ImplicitActor::from_net(net, 2, bx.clone()).unwrap();
        let s = [0.4, -0.2];
        let z = [0.7];
        let input = [0.4, -0.2, 0.7];
        let delta = 1e-6;
        let dir = [0.3, -1.0, 0.5];
        let mut moved = actor.clone();
        let mut p = actor.params();
        for (pi, d) in p.iter_mut().zip(dir) {
            *pi += delta * d;
        }
        moved.set_params(&p).unwrap();
        let got = reforward_delta(&actor, &moved, &s, &z).unwrap()[0];
        let u: f64 = 0.1 + input.iter().zip(w.row(0)).map(|(x, w)| x * w).sum::<f64>();
        let jac = 2.0 * (1.0 - u.tanh().powi(2));
        let want = jac * delta * input.iter().zip(dir).map(|(x, d)| x * d).sum::<f64>();
        assert!((got - want).abs() < 1e-8, "{got} vs {want}");
    }

    #[test]
    fn actions_stay_in_open_box() {
        let mut rng = Rng::new(8);
        let bx = ActionBox::new(vec![-1.0, 0.0], vec![1.0, 2.0]).unwrap();
        let ex = ExplicitActor::new(3, &[8], Activation::Relu, bx.clone(), &mut rng).unwrap();
        let im = ImplicitActor::new(3, 1, &[8], Activation::Relu, bx.clone(), &mut rng).unwrap();
        let states = Mat::from_vec(500, 3, crate::numeric::gaussian(&mut rng, 1500)).unwrap();
        for (a, _) in [
            ex.act_batch(&states, &ex.sample_noise(&mut rng, 500)).unwrap(),
            im.act_batch(&states, &im.sample_noise(&mut rng, 500)).unwrap(),
        ] {
            for r in 0..500 {
                let row = a.row(r);
                assert!(row[0] > -1.0 && row[0] < 1.0 && row[1] > 0.0 && row[1] < 2.0);
            }
        }
    }

    #[test]
    fn latent_default_is_a_third() {
        assert_eq!(default_latent_dim(3), 1);
        assert_eq!(default_latent_dim(4), 2);
        assert_eq!(default_latent_dim(17), 6);
    }
}
