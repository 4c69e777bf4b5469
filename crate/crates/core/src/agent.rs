//! Off-policy training with a replay buffer, twin critics and the noisy
//! direction-matching actor step.
//!
//! Per environment step: act with `a ~ pi(.|s)` convolved with
//! `sigma_ent * xi`, estimate the policy entropy at `s`, store
//! `r + tau * H(s)`, then (once the buffer is warm) take one critic step and
//! one actor step followed by Polyak updates of all target networks.
//!
//! The actor step never differentiates a log-density. For each state it
//! draws `K` noises, computes `G = grad_a min(Q1, Q2)` at the resulting
//! actions, forms `target = eta * G + xi` with `xi ~ N(0, 2 tau eta I)` and
//! takes one Adam step on `mean ||a_new(noise) - a_old(noise) - target||^2`.
//! At the current parameters the displacement is zero, so the gradient is
//! `-(2 / BK) * sum target . da/dtheta`.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::entropy_est::{estimate_entropy, EntropyConfig};
use crate::envs::Env;
use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::{polyak_net, Activation, AdamState, Cursor, MlpNet};
use crate::numeric::{check_finite, Mat, Rng};
use crate::policy::{default_latent_dim, ActionBox, Actor, ExplicitActor, ImplicitActor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algo {
    /// Tanh-Gaussian actor.
    Wppg,
    /// Latent-conditioned implicit actor.
    WppgI,
}

impl Algo {
    pub fn name(self) -> &'static str {
        match self {
            Self::Wppg => "wppg",
            Self::WppgI => "wppg-i",
        }
    }

    fn tag(self) -> u8 {
        match self {
            Self::Wppg => 0,
            Self::WppgI => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Self::Wppg),
            1 => Ok(Self::WppgI),
            t => Err(Error::Format(format!("unknown algorithm tag {t}"))),
        }
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wppg" => Ok(Self::Wppg),
            "wppg-i" | "wppgi" => Ok(Self::WppgI),
            _ => Err(invalid("algo", format!("unknown algorithm {s:?} (expected wppg or wppg-i)"))),
        }
    }
}

/// Every scalar of the training loop. Defaults follow the published tables;
/// `sigma_ent`, `eval_episodes` and the network shape are this crate's
/// choices.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub tau: f64,
    pub eta: f64,
    /// Action samples per state, for both the TD bootstrap and the actor step.
    pub k: usize,
    pub gamma: f64,
    pub polyak: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub batch: usize,
    pub buffer: usize,
    pub learning_starts: usize,
    pub total_steps: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub sigma_ent: f64,
    pub entropy_m: usize,
    pub entropy_l: usize,
    /// Implicit actor latent width; 0 selects `ceil(state_dim / 3)`.
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau: 1e-4,
            eta: 0.1,
            k: 32,
            gamma: 0.99,
            polyak: 0.005,
            lr_actor: 3e-4,
            lr_critic: 3e-4,
            batch: 256,
            buffer: 1_000_000,
            learning_starts: 10_000,
            total_steps: 1_000_000,
            eval_interval: 2000,
            eval_episodes: 10,
            sigma_ent: 0.1,
            entropy_m: 32,
            entropy_l: 32,
            latent_dim: 0,
            hidden: vec![64, 64],
            activation: Activation::Tanh,
        }
    }
}

/// Keys accepted by [`TrainConfig::set`], in echo order.
pub const TRAIN_KEYS: &[&str] = &[
    "tau",
    "eta",
    "k",
    "gamma",
    "polyak",
    "lr_actor",
    "lr_critic",
    "batch",
    "buffer",
    "learning_starts",
    "total_steps",
    "eval_interval",
    "eval_episodes",
    "sigma_ent",
    "entropy_m",
    "entropy_l",
    "latent_dim",
    "hidden",
    "activation",
];

fn parse_f64(name: &'static str, v: &str) -> Result<f64> {
    let x: f64 = v.trim().parse().map_err(|_| invalid(name, format!("not a number: {v:?}")))?;
    if !x.is_finite() {
        return Err(invalid(name, "must be finite"));
    }
    Ok(x)
}

fn parse_usize(name: &'static str, v: &str) -> Result<usize> {
    let t = v.trim().replace('_', "");
    if let Ok(n) = t.parse::<usize>() {
        return Ok(n);
    }
    // Accept integral scientific notation such as `1e5`.
    match t.parse::<f64>() {
        Ok(x) if x >= 0.0 && x.fract() == 0.0 && x < 1e15 => Ok(x as usize),
        _ => Err(invalid(name, format!("not a non-negative integer: {v:?}"))),
    }
}

impl TrainConfig {
    /// Static name of a known key, for error messages.
    fn key_name(key: &str) -> Option<&'static str> {
        TRAIN_KEYS.iter().copied().find(|k| *k == key)
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let Some(name) = Self::key_name(key) else {
            return Err(invalid("config", format!("unknown training key {key:?}")));
        };
        match name {
            "tau" => self.tau = parse_f64(name, value)?,
            "eta" => self.eta = parse_f64(name, value)?,
            "k" => self.k = parse_usize(name, value)?,
            "gamma" => self.gamma = parse_f64(name, value)?,
            "polyak" => self.polyak = parse_f64(name, value)?,
            "lr_actor" => self.lr_actor = parse_f64(name, value)?,
            "lr_critic" => self.lr_critic = parse_f64(name, value)?,
            "batch" => self.batch = parse_usize(name, value)?,
            "buffer" => self.buffer = parse_usize(name, value)?,
            "learning_starts" => self.learning_starts = parse_usize(name, value)?,
            "total_steps" => self.total_steps = parse_usize(name, value)?,
            "eval_interval" => self.eval_interval = parse_usize(name, value)?,
            "eval_episodes" => self.eval_episodes = parse_usize(name, value)?,
            "sigma_ent" => self.sigma_ent = parse_f64(name, value)?,
            "entropy_m" => self.entropy_m = parse_usize(name, value)?,
            "entropy_l" => self.entropy_l = parse_usize(name, value)?,
            "latent_dim" => self.latent_dim = parse_usize(name, value)?,
            "hidden" => {
                self.hidden = value
                    .split(',')
                    .map(|w| parse_usize(name, w))
                    .collect::<Result<Vec<_>>>()?;
            }
            "activation" => {
                self.activation = match value.trim() {
                    "tanh" => Activation::Tanh,
                    "relu" => Activation::Relu,
                    v => return Err(invalid(name, format!("unknown activation {v:?} (expected tanh or relu)"))),
                }
            }
            _ => unreachable!("key list and match arms disagree"),
        }
        Ok(())
    }

    /// Every field as `(key, value)` text that [`set`](Self::set) parses back
    /// to the identical value.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let hidden = self.hidden.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",");
        let act = match self.activation {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        };
        vec![
            ("tau", self.tau.to_string()),
            ("eta", self.eta.to_string()),
            ("k", self.k.to_string()),
            ("gamma", self.gamma.to_string()),
            ("polyak", self.polyak.to_string()),
            ("lr_actor", self.lr_actor.to_string()),
            ("lr_critic", self.lr_critic.to_string()),
            ("batch", self.batch.to_string()),
            ("buffer", self.buffer.to_string()),
            ("learning_starts", self.learning_starts.to_string()),
            ("total_steps", self.total_steps.to_string()),
            ("eval_interval", self.eval_interval.to_string()),
            ("eval_episodes", self.eval_episodes.to_string()),
            ("sigma_ent", self.sigma_ent.to_string()),
            ("entropy_m", self.entropy_m.to_string()),
            ("entropy_l", self.entropy_l.to_string()),
            ("latent_dim", self.latent_dim.to_string()),
            ("hidden", hidden),
            ("activation", act.to_string()),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau >= 0.0) {
            return Err(invalid("tau", "must be non-negative"));
        }
        if !(self.eta > 0.0) {
            return Err(invalid("eta", "must be positive"));
        }
        if self.k == 0 {
            return Err(invalid("k", "need at least one action sample"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(invalid("gamma", "must lie in (0, 1)"));
        }
        if !(self.polyak > 0.0 && self.polyak <= 1.0) {
            return Err(invalid("polyak", "must lie in (0, 1]"));
        }
        if !(self.lr_actor > 0.0) {
            return Err(invalid("lr_actor", "must be positive"));
        }
        if !(self.lr_critic > 0.0) {
            return Err(invalid("lr_critic", "must be positive"));
        }
        if self.batch == 0 {
            return Err(invalid("batch", "must be positive"));
        }
        if self.buffer < self.batch {
            return Err(invalid("buffer", "capacity must be at least the batch size"));
        }
        if self.eval_interval == 0 {
            return Err(invalid("eval_interval", "must be positive"));
        }
        if self.eval_episodes == 0 {
            return Err(invalid("eval_episodes", "must be positive"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(invalid("hidden", "need at least one hidden layer, all widths positive"));
        }
        self.entropy().validate()
    }

    pub fn entropy(&self) -> EntropyConfig {
        EntropyConfig {
            sigma: self.sigma_ent,
            m: self.entropy_m,
            l: self.entropy_l,
        }
    }

    pub fn latent_for(&self, state_dim: usize) -> usize {
        if self.latent_dim == 0 {
            default_latent_dim(state_dim)
        } else {
            self.latent_dim
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    /// Environment reward plus `tau * H(s)`.
    pub r_ent: f64,
    pub s_next: Vec<f64>,
    /// True termination only; time-limit truncation is stored as `false`.
    pub done: bool,
}

/// A sampled minibatch, one transition per row.
#[derive(Clone, Debug)]
pub struct Batch {
    pub states: Mat,
    pub actions: Mat,
    pub rewards: Vec<f64>,
    pub next_states: Mat,
    pub dones: Vec<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn from_transitions(ts: &[&Transition]) -> Result<Self> {
        let first = ts.first().ok_or_else(|| invalid("batch", "empty batch"))?;
        let (sd, ad) = (first.s.len(), first.a.len());
        let mut states = Vec::with_capacity(ts.len() * sd);
        let mut actions = Vec::with_capacity(ts.len() * ad);
        let mut next = Vec::with_capacity(ts.len() * sd);
        for t in ts {
            if t.s.len() != sd || t.s_next.len() != sd {
                return Err(shape_err("batch state", sd, t.s.len()));
            }
            if t.a.len() != ad {
                return Err(shape_err("batch action", ad, t.a.len()));
            }
            states.extend_from_slice(&t.s);
            actions.extend_from_slice(&t.a);
            next.extend_from_slice(&t.s_next);
        }
        let n = ts.len();
        Ok(Self {
            states: Mat::from_vec(n, sd, states)?,
            actions: Mat::from_vec(n, ad, actions)?,
            rewards: ts.iter().map(|t| t.r_ent).collect(),
            next_states: Mat::from_vec(n, sd, next)?,
            dones: ts.iter().map(|t| t.done).collect(),
        })
    }
}

/// Fixed-capacity ring buffer; the oldest transition is overwritten first.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    data: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(invalid("buffer", "capacity must be positive"));
        }
        Ok(Self {
            capacity,
            data: Vec::with_capacity(capacity.min(1 << 16)),
            next: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        if !t.r_ent.is_finite() {
            return Err(Error::NonFinite("transition reward"));
        }
        if self.data.len() < self.capacity {
            self.data.push(t);
        } else {
            self.data[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
        Ok(())
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.data.get(i)
    }

    /// `n` transitions drawn uniformly with replacement. Requires `len >= n`.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<Batch> {
        if n == 0 || self.data.len() < n {
            return Err(invalid("batch", format!("cannot sample {n} from a buffer holding {}", self.data.len())));
        }
        let picks: Vec<&Transition> = (0..n).map(|_| &self.data[rng.below(self.data.len())]).collect();
        Batch::from_transitions(&picks)
    }
}

/// Twin critics over `[s, a]` with their Polyak targets and optimizers.
#[derive(Clone, Debug)]
pub struct CriticPair {
    pub q1: MlpNet,
    pub q2: MlpNet,
    pub q1_target: MlpNet,
    pub q2_target: MlpNet,
    adam1: AdamState,
    adam2: AdamState,
}

impl CriticPair {
    pub fn new(state_dim: usize, action_dim: usize, hidden: &[usize], activation: Activation, lr: f64, rng: &mut Rng) -> Result<Self> {
        let mut widths = vec![state_dim + action_dim];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let q1 = MlpNet::new(&widths, activation, rng)?;
        let q2 = MlpNet::new(&widths, activation, rng)?;
        Ok(Self::from_nets(q1, q2, lr))
    }

    /// Targets start as copies of the online critics.
    pub fn from_nets(q1: MlpNet, q2: MlpNet, lr: f64) -> Self {
        let (n1, n2) = (q1.num_params(), q2.num_params());
        Self {
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            q1,
            q2,
            adam1: AdamState::new(n1, lr),
            adam2: AdamState::new(n2, lr),
        }
    }

    pub fn state_dim_plus_action(&self) -> usize {
        self.q1.input_dim()
    }

    pub fn polyak_targets(&mut self, sigma: f64) -> Result<()> {
        polyak_net(&mut self.q1_target, &self.q1, sigma)?;
        polyak_net(&mut self.q2_target, &self.q2, sigma)
    }
}

fn scalar_outputs(net: &MlpNet, input: &Mat) -> Result<Vec<f64>> {
    Ok(net.forward_batch(input)?.0.into_vec())
}

/// Each row of `m` repeated `k` times consecutively.
pub fn repeat_rows(m: &Mat, k: usize) -> Mat {
    let c = m.cols();
    let mut data = Vec::with_capacity(m.rows() * k * c);
    for i in 0..m.rows() {
        for _ in 0..k {
            data.extend_from_slice(m.row(i));
        }
    }
    Mat::from_vec(m.rows() * k, c, data).expect("consistent shape")
}

/// `y_i = r_i + gamma (1 - d_i) mean_k min(Q1', Q2')(s'_i, a'_ik)` with
/// `a'_ik` drawn from the target actor.
pub fn td_targets<A: Actor>(batch: &Batch, critics: &CriticPair, target_actor: &A, k: usize, gamma: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(invalid("batch", "empty batch"));
    }
    if k == 0 {
        return Err(invalid("k", "need at least one action sample"));
    }
    let b = batch.len();
    let states = repeat_rows(&batch.next_states, k);
    let noise = target_actor.sample_noise(rng, b * k);
    let (actions, _) = target_actor.act_batch(&states, &noise)?;
    let input = states.hcat(&actions)?;
    let q1 = scalar_outputs(&critics.q1_target, &input)?;
    let q2 = scalar_outputs(&critics.q2_target, &input)?;
    let mut y = Vec::with_capacity(b);
    for i in 0..b {
        let boot: f64 = (0..k).map(|j| q1[i * k + j].min(q2[i * k + j])).sum::<f64>() / k as f64;
        let mask = if batch.dones[i] { 0.0 } else { 1.0 };
        y.push(batch.rewards[i] + gamma * mask * boot);
    }
    check_finite("td targets", &y)?;
    Ok(y)
}

fn critic_step(net: &mut MlpNet, adam: &mut AdamState, input: &Mat, targets: &[f64]) -> Result<f64> {
    let (q, cache) = net.forward_batch(input)?;
    let n = targets.len() as f64;
    let mut loss = 0.0;
    let mut up = Vec::with_capacity(targets.len());
    for (qi, yi) in q.as_slice().iter().zip(targets) {
        let r = qi - yi;
        loss += r * r;
        up.push(2.0 * r / n);
    }
    let grads = net.backward(&cache, &Mat::from_vec(targets.len(), 1, up)?)?;
    let mut p = net.params();
    adam.step(&mut p, &grads.params)?;
    net.set_params(&p)?;
    Ok(loss / n)
}

/// One Adam step per critic on `mean (Q_j(s, a) - y)^2`. Returns the two
/// losses measured before the step.
pub fn critic_update(batch: &Batch, critics: &mut CriticPair, targets: &[f64]) -> Result<(f64, f64)> {
    if targets.len() != batch.len() {
        return Err(shape_err("critic_update targets", batch.len(), targets.len()));
    }
    let input = batch.states.hcat(&batch.actions)?;
    let l1 = critic_step(&mut critics.q1, &mut critics.adam1, &input, targets)?;
    let l2 = critic_step(&mut critics.q2, &mut critics.adam2, &input, targets)?;
    Ok((l1, l2))
}

/// Anything that can supply `grad_a Q(s, a)` row by row for the actor step.
pub trait ActionCritic {
    fn action_grads(&self, states: &Mat, actions: &Mat) -> Result<Mat>;
}

impl ActionCritic for CriticPair {
    fn action_grads(&self, states: &Mat, actions: &Mat) -> Result<Mat> {
        min_critic_action_grads(self, states, actions)
    }
}

/// `grad_a min(Q1, Q2)` at each `(state, action)` row, taking the gradient of
/// whichever critic is smaller (ties go to `Q1`).
pub fn min_critic_action_grads(critics: &CriticPair, states: &Mat, actions: &Mat) -> Result<Mat> {
    let input = states.hcat(actions)?;
    let n = input.rows();
    let ones = Mat::from_vec(n, 1, vec![1.0; n])?;
    let (q1, c1) = critics.q1.forward_batch(&input)?;
    let (q2, c2) = critics.q2.forward_batch(&input)?;
    let g1 = critics.q1.backward(&c1, &ones)?.input;
    let g2 = critics.q2.backward(&c2, &ones)?.input;
    let s = states.cols();
    let a = actions.cols();
    let mut g = Mat::zeros(n, a);
    for r in 0..n {
        let src = if q1.as_slice()[r] <= q2.as_slice()[r] { &g1 } else { &g2 };
        g.row_mut(r).copy_from_slice(&src.row(r)[s..s + a]);
    }
    Ok(g)
}

/// `eta * G + xi` with `xi ~ N(0, 2 tau eta I)`, one draw per entry.
pub fn target_directions(grads: &Mat, eta: f64, tau: f64, rng: &mut Rng) -> Mat {
    let scale = (2.0 * tau * eta).sqrt();
    let mut out = grads.clone();
    for v in out.as_mut_slice() {
        *v *= eta;
        if scale > 0.0 {
            *v += scale * rng.normal();
        }
    }
    out
}

/// One direction-matching step on the actor. Returns the matching loss
/// `mean_{i,k} ||Delta - Delta*||^2` at the pre-step parameters (where
/// `Delta = 0`).
pub fn actor_update<A: Actor, C: ActionCritic + ?Sized>(states: &Mat, actor: &mut A, adam: &mut AdamState, critic: &C, cfg: &TrainConfig, rng: &mut Rng) -> Result<f64> {
    let k = cfg.k;
    let reps = repeat_rows(states, k);
    let n = reps.rows();
    let noise = actor.sample_noise(rng, n);
    let (a0, cache) = actor.act_batch(&reps, &noise)?;
    let g = critic.action_grads(&reps, &a0)?;
    let target = target_directions(&g, cfg.eta, cfg.tau, rng);
    let loss = target.as_slice().iter().map(|v| v * v).sum::<f64>() / n as f64;
    let mut up = target;
    let scale = -2.0 / n as f64;
    for v in up.as_mut_slice() {
        *v *= scale;
    }
    let grads = actor.backward(&cache, &up)?;
    let mut p = actor.params();
    adam.step(&mut p, &grads.params)?;
    actor.set_params(&p)?;
    Ok(loss)
}

/// Losses from one update step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
}

/// Actor, target actor and critics of one run.
#[derive(Clone, Debug)]
pub struct Agent<A: Actor> {
    pub actor: A,
    pub target_actor: A,
    pub critics: CriticPair,
    pub actor_adam: AdamState,
    pub cfg: TrainConfig,
}

impl<A: Actor> Agent<A> {
    pub fn new(actor: A, critics: CriticPair, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if critics.state_dim_plus_action() != actor.state_dim() + actor.action_dim() {
            return Err(shape_err("Agent critics", actor.state_dim() + actor.action_dim(), critics.state_dim_plus_action()));
        }
        let n = actor.net().num_params();
        Ok(Self {
            target_actor: actor.clone(),
            actor,
            critics,
            actor_adam: AdamState::new(n, cfg.lr_actor),
            cfg,
        })
    }

    /// Critic step, actor step, then Polyak updates of all three targets.
    pub fn update(&mut self, batch: &Batch, critic_rng: &mut Rng, actor_rng: &mut Rng) -> Result<UpdateStats> {
        let y = td_targets(batch, &self.critics, &self.target_actor, self.cfg.k, self.cfg.gamma, critic_rng)?;
        let (l1, l2) = critic_update(batch, &mut self.critics, &y)?;
        let actor_loss = actor_update(&batch.states, &mut self.actor, &mut self.actor_adam, &self.critics, &self.cfg, actor_rng)?;
        self.critics.polyak_targets(self.cfg.polyak)?;
        polyak_net(self.target_actor.net_mut(), self.actor.net(), self.cfg.polyak)?;
        Ok(UpdateStats {
            critic_loss: 0.5 * (l1 + l2),
            actor_loss,
        })
    }

    /// Plug-in entropy of the `sigma_ent`-convolved policy at `state`.
    pub fn entropy_at(&self, state: &[f64], rng: &mut Rng) -> Result<f64> {
        let actor = &self.actor;
        estimate_entropy(
            |r, n| {
                let noise = actor.sample_noise(r, n);
                let states = Mat::repeat_row(state, n);
                Ok(actor.act_batch(&states, &noise)?.0)
            },
            &self.cfg.entropy(),
            rng,
        )
    }
}

/// One row of the learning curve. Loss and entropy columns average over the
/// steps since the previous row and are `None` when nothing was measured.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurveRow {
    pub step: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub critic_loss: Option<f64>,
    pub actor_loss: Option<f64>,
    pub entropy_estimate: Option<f64>,
}

pub const CURVE_HEADER: &str = "step,mean_return,std_return,critic_loss,actor_loss,entropy_estimate";

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| x.to_string())
}

impl CurveRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step,
            self.mean_return,
            self.std_return,
            fmt_opt(self.critic_loss),
            fmt_opt(self.actor_loss),
            fmt_opt(self.entropy_estimate)
        )
    }
}

/// Whole learning curve as CSV text, header included.
pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

fn run_episode<F>(env: &dyn Env, rng: &mut Rng, mut policy: F) -> Result<f64>
where
    F: FnMut(&[f64], &mut Rng) -> Result<Vec<f64>>,
{
    let mut s = env.reset(rng);
    let mut total = 0.0;
    for t in 0..env.spec().max_steps {
        let a = policy(&s, rng)?;
        let out = env.step(&s, &a, t)?;
        total += out.reward;
        if out.terminated || out.truncated {
            break;
        }
        s = out.next_state;
    }
    Ok(total)
}

/// Low-variance evaluation: the explicit actor acts with zero noise, the
/// implicit actor with a fixed latent per episode. Start states and latents
/// depend only on `seed`, never on training streams.
pub fn evaluate<A: Actor>(actor: &A, env: &dyn Env, episodes: usize, seed: u64) -> Result<(f64, f64)> {
    let root = Rng::new(seed).substream("eval");
    let mut lat_rng = root.substream("latents");
    let latents = actor.sample_noise(&mut lat_rng, episodes);
    let mut returns = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let noise = actor.eval_noise(&latents, ep);
        let mut rng = root.substream_index(ep as u64);
        returns.push(run_episode(env, &mut rng, |s, _| Ok(actor.act_with(s, &noise)?.action))?);
    }
    Ok(mean_std(&returns))
}

/// Return statistics of the policy that samples uniformly from the action
/// box, on the same start-state streams as [`evaluate`].
pub fn uniform_random_baseline(env: &dyn Env, episodes: usize, seed: u64) -> Result<(f64, f64)> {
    let root = Rng::new(seed).substream("eval");
    let bx = env.spec().action_box.clone();
    let mut returns = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let mut rng = root.substream_index(ep as u64);
        let mut act_rng = rng.substream("uniform-actions");
        returns.push(run_episode(env, &mut rng, |_, _| {
            Ok(bx.low().iter().zip(bx.high()).map(|(lo, hi)| act_rng.uniform_range(*lo, *hi)).collect())
        })?);
    }
    Ok(mean_std(&returns))
}

/// Serialized trained actor: `b"WPPGCKPT"`, algorithm tag (u8), state width
/// (u32), action width (u32), action lows and highs (f64 each), then the
/// network bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub algo: Algo,
    pub state_dim: usize,
    pub action_box: ActionBox,
    pub net: MlpNet,
}

const CKPT_MAGIC: &[u8; 8] = b"WPPGCKPT";

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.push(self.algo.tag());
        out.extend_from_slice(&(self.state_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.action_box.dim() as u32).to_le_bytes());
        for v in self.action_box.low().iter().chain(self.action_box.high()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.net.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != CKPT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let algo = Algo::from_tag(cur.take(1)?[0])?;
        let state_dim = cur.u32()? as usize;
        let a = cur.u32()? as usize;
        if a > 4096 {
            return Err(Error::Format(format!("implausible action width {a}")));
        }
        let low = (0..a).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
        let high = (0..a).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
        let action_box = ActionBox::new(low, high).map_err(|e| Error::Format(e.to_string()))?;
        let (net, used) = MlpNet::from_bytes(&bytes[cur.pos..])?;
        if cur.pos + used != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        let ck = Self {
            algo,
            state_dim,
            action_box,
            net,
        };
        ck.actor()?;
        Ok(ck)
    }

    pub fn actor(&self) -> Result<TrainedActor> {
        Ok(match self.algo {
            Algo::Wppg => TrainedActor::Explicit(ExplicitActor::from_net(self.net.clone(), self.action_box.clone())?),
            Algo::WppgI => TrainedActor::Implicit(ImplicitActor::from_net(self.net.clone(), self.state_dim, self.action_box.clone())?),
        })
    }
}

/// Either actor family, as restored from a checkpoint.
#[derive(Clone, Debug)]
pub enum TrainedActor {
    Explicit(ExplicitActor),
    Implicit(ImplicitActor),
}

impl TrainedActor {
    pub fn evaluate(&self, env: &dyn Env, episodes: usize, seed: u64) -> Result<(f64, f64)> {
        check_env(env, self.state_dim(), self.action_box())?;
        match self {
            Self::Explicit(a) => evaluate(a, env, episodes, seed),
            Self::Implicit(a) => evaluate(a, env, episodes, seed),
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            Self::Explicit(a) => a.state_dim(),
            Self::Implicit(a) => a.state_dim(),
        }
    }

    pub fn action_box(&self) -> &ActionBox {
        match self {
            Self::Explicit(a) => a.action_box(),
            Self::Implicit(a) => a.action_box(),
        }
    }
}

fn check_env(env: &dyn Env, state_dim: usize, bx: &ActionBox) -> Result<()> {
    let spec = env.spec();
    if spec.state_dim != state_dim {
        return Err(shape_err("environment state width", state_dim, spec.state_dim));
    }
    if &spec.action_box != bx {
        return Err(invalid("env", "action box differs from the one the actor was trained on"));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub curve: Vec<CurveRow>,
    pub checkpoint: Checkpoint,
    /// Gradient updates performed.
    pub updates: usize,
    pub episodes: usize,
}

/// Builds the actor for `algo` from the `"init"` stream and trains it.
pub fn train(env: &dyn Env, algo: Algo, cfg: &TrainConfig, seed: u64, on_row: &mut dyn FnMut(&CurveRow)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let spec = env.spec();
    let mut init = Rng::new(seed).substream("init");
    let bx = spec.action_box.clone();
    match algo {
        Algo::Wppg => {
            let actor = ExplicitActor::new(spec.state_dim, &cfg.hidden, cfg.activation, bx, &mut init)?;
            train_actor(env, actor, algo, cfg, seed, &mut init, on_row)
        }
        Algo::WppgI => {
            let latent = cfg.latent_for(spec.state_dim);
            let actor = ImplicitActor::new(spec.state_dim, latent, &cfg.hidden, cfg.activation, bx, &mut init)?;
            train_actor(env, actor, algo, cfg, seed, &mut init, on_row)
        }
    }
}

#[derive(Default)]
struct Window {
    critic: f64,
    actor: f64,
    updates: usize,
    entropy: f64,
    entropy_n: usize,
}

impl Window {
    fn finish(&mut self, step: usize, (mean_return, std_return): (f64, f64)) -> CurveRow {
        let avg = |sum: f64, n: usize| (n > 0).then(|| sum / n as f64);
        let row = CurveRow {
            step,
            mean_return,
            std_return,
            critic_loss: avg(self.critic, self.updates),
            actor_loss: avg(self.actor, self.updates),
            entropy_estimate: avg(self.entropy, self.entropy_n),
        };
        *self = Self::default();
        row
    }
}

/// Training loop for an already-initialized actor. Critics are drawn from
/// `init` after the actor.
pub fn train_actor<A: Actor>(
    env: &dyn Env,
    actor: A,
    algo: Algo,
    cfg: &TrainConfig,
    seed: u64,
    init: &mut Rng,
    on_row: &mut dyn FnMut(&CurveRow),
) -> Result<TrainOutcome> {
    let spec = env.spec().clone();
    check_env(env, actor.state_dim(), actor.action_box())?;
    let critics = CriticPair::new(spec.state_dim, spec.action_dim(), &cfg.hidden, cfg.activation, cfg.lr_critic, init)?;
    let mut agent = Agent::new(actor, critics, cfg.clone())?;
    let root = Rng::new(seed);
    let mut env_rng = root.substream("env");
    let mut rollout_rng = root.substream("rollout");
    let mut entropy_rng = root.substream("entropy");
    let mut replay_rng = root.substream("replay");
    let mut critic_rng = root.substream("critic");
    let mut actor_rng = root.substream("actor");
    let eval_seed = root.substream("eval-seed").next_u64();

    let mut buffer = ReplayBuffer::new(cfg.buffer)?;
    let warm = cfg.learning_starts.max(cfg.batch);
    let mut s = env.reset(&mut env_rng);
    let mut elapsed = 0;
    let mut episodes = 0;
    let mut updates = 0;
    let mut window = Window::default();
    let mut curve = Vec::new();

    for t in 1..=cfg.total_steps {
        let mut a = agent.actor.sample(&s, &mut rollout_rng)?.action;
        for v in a.iter_mut() {
            *v += cfg.sigma_ent * rollout_rng.normal();
        }
        spec.action_box.clip(&mut a);
        let h = agent.entropy_at(&s, &mut entropy_rng)?;
        window.entropy += h;
        window.entropy_n += 1;
        let out = env
            .step(&s, &a, elapsed)
            .map_err(|e| Error::Format(format!("environment step {t} failed: {e}")))?;
        let next = out.next_state.clone();
        buffer.push(Transition {
            s: std::mem::take(&mut s),
            a,
            r_ent: out.reward + cfg.tau * h,
            s_next: out.next_state,
            done: out.terminated,
        })?;
        if out.terminated || out.truncated {
            s = env.reset(&mut env_rng);
            elapsed = 0;
            episodes += 1;
        } else {
            s = next;
            elapsed += 1;
        }

        if buffer.len() >= warm {
            let batch = buffer.sample(cfg.batch, &mut replay_rng)?;
            let stats = agent.update(&batch, &mut critic_rng, &mut actor_rng)?;
            window.critic += stats.critic_loss;
            window.actor += stats.actor_loss;
            window.updates += 1;
            updates += 1;
        }

        if t % cfg.eval_interval == 0 || t == cfg.total_steps {
            let stats = evaluate(&agent.actor, env, cfg.eval_episodes, eval_seed)?;
            let row = window.finish(t, stats);
            on_row(&row);
            curve.push(row);
        }
    }

    Ok(TrainOutcome {
        curve,
        checkpoint: Checkpoint {
            algo,
            state_dim: spec.state_dim,
            action_box: spec.action_box.clone(),
            net: agent.actor.net().clone(),
        },
        updates,
        episodes,
    })
}

/// Seed from which [`train`] derives its evaluation episodes, so baselines
/// can be measured on the same start states.
pub fn eval_seed_for(seed: u64) -> u64 {
    Rng::new(seed).substream("eval-seed").next_u64()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{EnvKind, Lqr1d};

    #[test]
    fn config_round_trips_through_text() {
        let mut cfg = TrainConfig::default();
        cfg.set("tau", "0.25").unwrap();
        cfg.set("hidden", "8,4").unwrap();
        cfg.set("buffer", "1e5").unwrap();
        cfg.set("activation", "relu").unwrap();
        let mut back = TrainConfig::default();
        for (k, v) in cfg.entries() {
            back.set(k, &v).unwrap();
        }
        assert_eq!(back, cfg);
        assert_eq!(cfg.buffer, 100_000);
        assert_eq!(cfg.entries().len(), TRAIN_KEYS.len());
    }

    #[test]
    fn config_errors_name_the_field() {
        let mut cfg = TrainConfig::default();
        let e = cfg.set("gamma", "abc").unwrap_err();
        assert!(e.to_string().contains("gamma"));
        cfg.gamma = 1.0;
        assert!(cfg.validate().unwrap_err().to_string().contains("gamma"));
        assert!(cfg.set("bogus", "1").unwrap_err().to_string().contains("bogus"));
    }

    #[test]
    fn table_defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.tau, c.eta, c.k, c.gamma, c.polyak), (1e-4, 0.1, 32, 0.99, 0.005));
        assert_eq!((c.lr_actor, c.lr_critic, c.batch, c.buffer, c.learning_starts), (3e-4, 3e-4, 256, 1_000_000, 10_000));
        assert_eq!((c.total_steps, c.eval_interval), (1_000_000, 2000));
        c.validate().unwrap();
    }

    #[test]
    fn replay_ring_overwrites_oldest() {
        let mut b = ReplayBuffer::new(3).unwrap();
        for i in 0..5 {
            b.push(Transition {
                s: vec![i as f64],
                a: vec![0.0],
                r_ent: i as f64,
                s_next: vec![0.0],
                done: false,
            })
            .unwrap();
        }
        assert_eq!(b.len(), 3);
        let mut rs: Vec<f64> = (0..3).map(|i| b.get(i).unwrap().r_ent).collect();
        rs.sort_by(f64::total_cmp);
        assert_eq!(rs, vec![2.0, 3.0, 4.0]);
        assert!(b.sample(4, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let env = EnvKind::Pendulum.build();
        let mut rng = Rng::new(3);
        let actor = ImplicitActor::new(3, 1, &[5], Activation::Tanh, env.spec().action_box.clone(), &mut rng).unwrap();
        let ck = Checkpoint {
            algo: Algo::WppgI,
            state_dim: 3,
            action_box: env.spec().action_box.clone(),
            net: actor.net().clone(),
        };
        let bytes = ck.to_bytes();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn no_updates_before_warmup() {
        let env = Lqr1d::default();
        let cfg = TrainConfig {
            total_steps: 50,
            learning_starts: 100,
            batch: 8,
            buffer: 1000,
            eval_interval: 25,
            eval_episodes: 2,
            hidden: vec![4],
            k: 2,
            entropy_m: 4,
            entropy_l: 4,
            ..TrainConfig::default()
        };
        let out = train(&env, Algo::Wppg, &cfg, 1, &mut |_| {}).unwrap();
        assert_eq!(out.updates, 0);
        assert_eq!(out.curve.len(), 2);
        assert!(out.curve[0].critic_loss.is_none());
        assert!(out.curve[0].entropy_estimate.is_some());
    }
}
