//! Feed-forward networks with hand-written backpropagation, Adam and Polyak
//! averaging.
//!
//! Hidden layers use the network's activation; the output layer is affine.
//! Gradients are available with respect to the flat parameter vector and
//! with respect to the network input, both for single samples and batches.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::numeric::{check_prob, gemm, Mat, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn tag(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Tanh),
            1 => Ok(Activation::Relu),
            t => Err(Error::Format(format!("unknown activation tag {t}"))),
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation's output `y`.
    /// ReLU uses subgradient 0 at the kink.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layer {
    /// `out x in`
    weight: Mat,
    bias: Vec<f64>,
}

/// Activations recorded by a batched forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// `acts[0]` is the input batch, `acts[l]` the output of hidden layer `l`.
    acts: Vec<Mat>,
}

impl ForwardCache {
    pub fn input(&self) -> &Mat {
        &self.acts[0]
    }
}

/// Parameter and input gradients of `sum(upstream .* output)`.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub input: Mat,
}

#[derive(Clone, Debug)]
pub struct MlpNet {
    widths: Vec<usize>,
    activation: Activation,
    layers: Vec<Layer>,
    cache: Option<ForwardCache>,
}

impl PartialEq for MlpNet {
    fn eq(&self, other: &Self) -> bool {
        self.widths == other.widths
            && self.activation == other.activation
            && self.layers == other.layers
    }
}

impl MlpNet {
    /// Network with weights drawn uniformly from `±1/sqrt(fan_in)` and zero
    /// biases. `widths` lists input, hidden and output widths.
    pub fn new(widths: &[usize], activation: Activation, rng: &mut Rng) -> Result<Self> {
        let mut net = Self::zeros(widths, activation)?;
        for layer in &mut net.layers {
            let bound = 1.0 / (layer.weight.cols() as f64).sqrt();
            for w in layer.weight.as_mut_slice() {
                *w = rng.uniform_range(-bound, bound);
            }
        }
        Ok(net)
    }

    pub fn zeros(widths: &[usize], activation: Activation) -> Result<Self> {
        if widths.len() < 2 {
            return Err(invalid("widths", "need at least input and output widths"));
        }
        if widths[1..].contains(&0) {
            return Err(invalid("widths", "layer widths after the input must be positive"));
        }
        let layers = widths
            .windows(2)
            .map(|w| Layer {
                weight: Mat::zeros(w[1], w[0]),
                bias: vec![0.0; w[1]],
            })
            .collect();
        Ok(Self {
            widths: widths.to_vec(),
            activation,
            layers,
            cache: None,
        })
    }

    /// Single affine layer `x -> W x + b`.
    pub fn linear(weight: Mat, bias: Vec<f64>) -> Result<Self> {
        if weight.rows() != bias.len() {
            return Err(shape_err("MlpNet::linear", weight.rows(), bias.len()));
        }
        let widths = vec![weight.cols(), weight.rows()];
        Ok(Self {
            widths,
            activation: Activation::Tanh,
            layers: vec![Layer { weight, bias }],
            cache: None,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.rows() * l.weight.cols() + l.bias.len())
            .sum()
    }

    /// Flat parameters: for each layer, the row-major weight then the bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(shape_err("MlpNet::set_params", self.num_params(), flat.len()));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weight.rows() * l.weight.cols();
            l.weight.as_mut_slice().copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        self.cache = None;
        Ok(())
    }

    /// Forward pass on a batch (one sample per row).
    pub fn forward_batch(&self, x: &Mat) -> Result<(Mat, ForwardCache)> {
        if x.cols() != self.input_dim() {
            return Err(shape_err("MlpNet::forward", self.input_dim(), x.cols()));
        }
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let mut z = gemm(&h, false, &layer.weight, true)?;
            let cols = z.cols();
            for row in z.as_mut_slice().chunks_exact_mut(cols) {
                for (v, b) in row.iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            if li != last {
                for v in z.as_mut_slice() {
                    *v = self.activation.apply(*v);
                }
            }
            acts.push(std::mem::replace(&mut h, z));
        }
        Ok((h, ForwardCache { acts }))
    }

    /// Backward pass for the scalar `sum(upstream .* output)`. Parameter
    /// gradients are summed over the batch rows.
    pub fn backward(&self, cache: &ForwardCache, upstream: &Mat) -> Result<Gradients> {
        let batch = cache.acts[0].rows();
        if upstream.rows() != batch || upstream.cols() != self.output_dim() {
            return Err(shape_err(
                "MlpNet::backward",
                format!("{batch}x{}", self.output_dim()),
                format!("{}x{}", upstream.rows(), upstream.cols()),
            ));
        }
        let mut grads: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(self.layers.len());
        let mut delta = upstream.clone();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.acts[li];
            let gw = gemm(&delta, true, input, false)?;
            let mut gb = vec![0.0; delta.cols()];
            for row in delta.as_slice().chunks_exact(delta.cols()) {
                for (g, d) in gb.iter_mut().zip(row) {
                    *g += d;
                }
            }
            grads.push((gw.into_vec(), gb));
            let mut prev = gemm(&delta, false, &layer.weight, false)?;
            if li > 0 {
                for (p, y) in prev.as_mut_slice().iter_mut().zip(input.as_slice()) {
                    *p *= self.activation.derivative_from_output(*y);
                }
            }
            delta = prev;
        }
        let mut params = Vec::with_capacity(self.num_params());
        for (gw, gb) in grads.into_iter().rev() {
            params.extend(gw);
            params.extend(gb);
        }
        Ok(Gradients {
            params,
            input: delta,
        })
    }

    /// Single-sample forward pass; the activations are cached on the network
    /// for [`grad_params`](Self::grad_params) and
    /// [`grad_input`](Self::grad_input).
    pub fn forward(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        let xm = Mat::from_vec(1, x.len(), x.to_vec())?;
        let (out, cache) = self.forward_batch(&xm)?;
        self.cache = Some(cache);
        Ok(out.into_vec())
    }

    fn cached_for(&self, x: &[f64]) -> Result<&ForwardCache> {
        match &self.cache {
            Some(c) if c.acts[0].rows() == 1 && c.acts[0].as_slice() == x => Ok(c),
            _ => Err(Error::StaleCache),
        }
    }

    fn single_backward(&self, x: &[f64], upstream: &[f64]) -> Result<Gradients> {
        let cache = self.cached_for(x)?;
        let up = Mat::from_vec(1, upstream.len(), upstream.to_vec())
            .map_err(|_| shape_err("MlpNet::backward", self.output_dim(), upstream.len()))?;
        self.backward(cache, &up)
    }

    /// Gradient of `upstream . net(x)` with respect to the flat parameters.
    pub fn grad_params(&self, x: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        Ok(self.single_backward(x, upstream)?.params)
    }

    /// Gradient of `upstream . net(x)` with respect to `x`.
    pub fn grad_input(&self, x: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        Ok(self.single_backward(x, upstream)?.input.into_vec())
    }

    /// Serialize as `b"MLP1"`, layer count (u32), widths (u32 each),
    /// activation tag (u8), then every parameter as little-endian f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(9 + 4 * self.widths.len() + 8 * self.num_params());
        out.extend_from_slice(b"MLP1");
        out.extend_from_slice(&(self.widths.len() as u32).to_le_bytes());
        for w in &self.widths {
            out.extend_from_slice(&(*w as u32).to_le_bytes());
        }
        out.push(self.activation.tag());
        for p in self.params() {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    /// Inverse of [`to_bytes`](Self::to_bytes). Returns the network and the
    /// number of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != b"MLP1" {
            return Err(Error::Format("bad network magic".into()));
        }
        let n = cur.u32()? as usize;
        if n > 1024 {
            return Err(Error::Format(format!("implausible layer count {n}")));
        }
        let widths = (0..n)
            .map(|_| cur.u32().map(|w| w as usize))
            .collect::<Result<Vec<_>>>()?;
        let activation = Activation::from_tag(cur.take(1)?[0])?;
        let mut net = Self::zeros(&widths, activation).map_err(|e| Error::Format(e.to_string()))?;
        let params = (0..net.num_params())
            .map(|_| cur.f64())
            .collect::<Result<Vec<_>>>()?;
        net.set_params(&params)?;
        Ok((net, cur.pos))
    }
}

pub(crate) struct Cursor<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Format("unexpected end of data".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Adam optimizer state for one parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One bias-corrected Adam step on `params` (minimization).
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(shape_err(
                "adam_step",
                self.m.len(),
                format!("params {} / grad {}", params.len(), grad.len()),
            ));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powf(self.t as f64);
        let c2 = 1.0 - self.beta2.powf(self.t as f64);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// `sigma * online + (1 - sigma) * target`, elementwise.
pub fn polyak(target: &[f64], online: &[f64], sigma: f64) -> Result<Vec<f64>> {
    check_prob("polyak sigma", sigma)?;
    if target.len() != online.len() {
        return Err(shape_err("polyak", target.len(), online.len()));
    }
    Ok(target
        .iter()
        .zip(online)
        .map(|(t, o)| sigma * o + (1.0 - sigma) * t)
        .collect())
}

/// In-place Polyak update of a target network toward `online`.
pub fn polyak_net(target: &mut MlpNet, online: &MlpNet, sigma: f64) -> Result<()> {
    let mixed = polyak(&target.params(), &online.params(), sigma)?;
    target.set_params(&mixed)
}
