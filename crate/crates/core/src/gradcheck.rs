//! Central finite-difference checks of every analytic gradient path used by
//! the agents.

use crate::error::Result;
use crate::nn::{Activation, MlpNet};
use crate::numeric::{gaussian, Mat, Rng};
use crate::policy::{ActionBox, Actor, ExplicitActor, ImplicitActor};

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
const INSTANCES: usize = 10;
const PARAM_COORDS: usize = 40;

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: String,
    pub instances: usize,
    pub coordinates: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub suites: Vec<SuiteResult>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.suites.iter().map(|s| s.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < TOLERANCE
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn coords(rng: &mut Rng, n: usize) -> Vec<usize> {
    if n <= PARAM_COORDS {
        (0..n).collect()
    } else {
        (0..PARAM_COORDS).map(|_| rng.below(n)).collect()
    }
}

/// A scalar objective `upstream . f(params, x)` with its analytic gradients.
trait Probe {
    fn num_params(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn value(&self, params: &[f64], x: &[f64]) -> Result<f64>;
    /// `(d/d params, d/d x)`
    fn analytic(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)>;
    fn params(&self) -> Vec<f64>;
}

struct NetProbe {
    net: MlpNet,
    upstream: Vec<f64>,
}

impl Probe for NetProbe {
    fn num_params(&self) -> usize {
        self.net.num_params()
    }
    fn input_dim(&self) -> usize {
        self.net.input_dim()
    }
    fn params(&self) -> Vec<f64> {
        self.net.params()
    }
    fn value(&self, params: &[f64], x: &[f64]) -> Result<f64> {
        let mut net = self.net.clone();
        net.set_params(params)?;
        let y = net.forward(x)?;
        Ok(y.iter().zip(&self.upstream).map(|(a, b)| a * b).sum())
    }
    fn analytic(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut net = self.net.clone();
        net.forward(x)?;
        Ok((net.grad_params(x, &self.upstream)?, net.grad_input(x, &self.upstream)?))
    }
}

struct ActorProbe<A: Actor> {
    actor: A,
    noise: Vec<f64>,
    upstream: Vec<f64>,
}

impl<A: Actor> Probe for ActorProbe<A> {
    fn num_params(&self) -> usize {
        self.actor.net().num_params()
    }
    fn input_dim(&self) -> usize {
        self.actor.state_dim()
    }
    fn params(&self) -> Vec<f64> {
        self.actor.params()
    }
    fn value(&self, params: &[f64], x: &[f64]) -> Result<f64> {
        let mut a = self.actor.clone();
        a.set_params(params)?;
        let act = a.act_with(x, &self.noise)?.action;
        Ok(act.iter().zip(&self.upstream).map(|(a, b)| a * b).sum())
    }
    fn analytic(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let s = Mat::from_vec(1, x.len(), x.to_vec())?;
        let z = Mat::from_vec(1, self.noise.len(), self.noise.clone())?;
        let (_, cache) = self.actor.act_batch(&s, &z)?;
        let up = Mat::from_vec(1, self.upstream.len(), self.upstream.clone())?;
        let g = self.actor.backward(&cache, &up)?;
        Ok((g.params, g.state.into_vec()))
    }
}

fn check_probe(probe: &dyn Probe, x: &[f64], rng: &mut Rng) -> Result<(f64, usize)> {
    let (gp, gx) = probe.analytic(x)?;
    let base = probe.params();
    let mut worst = 0.0f64;
    let mut count = 0;
    for i in coords(rng, probe.num_params()) {
        let mut p = base.clone();
        p[i] += FD_STEP;
        let up = probe.value(&p, x)?;
        p[i] -= 2.0 * FD_STEP;
        let down = probe.value(&p, x)?;
        worst = worst.max(rel_err(gp[i], (up - down) / (2.0 * FD_STEP)));
        count += 1;
    }
    for i in 0..probe.input_dim() {
        let mut xp = x.to_vec();
        xp[i] += FD_STEP;
        let up = probe.value(&base, &xp)?;
        xp[i] -= 2.0 * FD_STEP;
        let down = probe.value(&base, &xp)?;
        worst = worst.max(rel_err(gx[i], (up - down) / (2.0 * FD_STEP)));
        count += 1;
    }
    Ok((worst, count))
}

fn suite(name: &str, rng: &mut Rng, mut make: impl FnMut(&mut Rng) -> Result<(Box<dyn Probe>, Vec<f64>)>) -> Result<SuiteResult> {
    let mut worst = 0.0f64;
    let mut coordinates = 0;
    for _ in 0..INSTANCES {
        let (probe, x) = make(rng)?;
        let (w, c) = check_probe(probe.as_ref(), &x, rng)?;
        worst = worst.max(w);
        coordinates += c;
    }
    Ok(SuiteResult {
        name: name.to_string(),
        instances: INSTANCES,
        coordinates,
        max_rel_err: worst,
    })
}

fn net_suite(name: &str, rng: &mut Rng, widths: Vec<usize>, act: Activation) -> Result<SuiteResult> {
    suite(name, rng, move |rng| {
        let net = MlpNet::new(&widths, act, rng)?;
        let x = gaussian(rng, widths[0]);
        let upstream = gaussian(rng, *widths.last().unwrap());
        Ok((Box::new(NetProbe { net, upstream }), x))
    })
}

/// Run every gradient suite: the small tanh and large ReLU bodies, the
/// critic over `[s, a]`, and both actors composed with the squashing map.
pub fn run_gradcheck(seed: u64) -> Result<GradCheckReport> {
    let root = Rng::new(seed);
    let mut report = GradCheckReport::default();
    report.suites.push(net_suite("mlp tanh (64,64)", &mut root.substream("tanh"), vec![5, 64, 64, 3], Activation::Tanh)?);
    report.suites.push(net_suite("mlp relu (256,256)", &mut root.substream("relu"), vec![6, 256, 256, 2], Activation::Relu)?);
    report.suites.push(net_suite("critic tanh [s,a]->1", &mut root.substream("critic"), vec![6, 64, 64, 1], Activation::Tanh)?);
    for act in [Activation::Tanh, Activation::Relu] {
        let tag = if act == Activation::Tanh { "tanh" } else { "relu" };
        report.suites.push(suite(&format!("explicit actor {tag}"), &mut root.substream(&format!("explicit-{tag}")), |rng| {
            let bx = ActionBox::new(vec![-1.0, -2.0], vec![1.0, 0.5])?;
            let actor = ExplicitActor::new(4, &[64, 64], act, bx, rng)?;
            let noise = gaussian(rng, 2);
            let upstream = gaussian(rng, 2);
            Ok((Box::new(ActorProbe { actor, noise, upstream }), gaussian(rng, 4)))
        })?);
        report.suites.push(suite(&format!("implicit actor {tag}"), &mut root.substream(&format!("implicit-{tag}")), |rng| {
            let bx = ActionBox::new(vec![-1.0, -2.0], vec![1.0, 0.5])?;
            let actor = ImplicitActor::new(4, 2, &[64, 64], act, bx, rng)?;
            let noise = gaussian(rng, 2);
            let upstream = gaussian(rng, 2);
            Ok((Box::new(ActorProbe { actor, noise, upstream }), gaussian(rng, 4)))
        })?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(1.0, 1.0), 0.0);
        assert!(rel_err(1e-12, 0.0) < 1e-5);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
