//! Dense feed-forward networks with hand-written backpropagation and Adam.
//!
//! Batches are row-major `(batch, features)` matrices. Everything is `f64` and
//! single-threaded so that seeded training is bit-reproducible.

use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Tanh => z.mapv(f64::tanh),
            Activation::Relu => z.mapv(|v| v.max(0.0)),
        }
    }

    /// d(act)/dz given pre-activation `z` and activation `a`.
    fn grad(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Weights `(in, out)` and bias `(out)` of one affine layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    fn zeros_like(&self) -> Self {
        Self {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
        }
    }
}

/// Multilayer perceptron with a shared hidden activation and a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

/// Intermediate values from a forward pass, needed by `backward`.
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

/// Parameter gradients shaped like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn scale(&mut self, k: f64) {
        for l in &mut self.layers {
            l.w *= k;
            l.b *= k;
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }
}

impl Mlp {
    /// Layer sizes including input and output, e.g. `[1, 64, 64, 300]`.
    /// Uniform Glorot initialisation, zero biases.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], activation: Activation, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let w = Array2::from_shape_simple_fn((fan_in, fan_out), || {
                    rng.random_range(-bound..bound)
                });
                Dense {
                    w,
                    b: Array1::zeros(fan_out),
                }
            })
            .collect();
        Self { layers, activation }
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].w.nrows()
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().map(|l| l.w.ncols()).unwrap_or(0)
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_size()];
        s.extend(self.layers.iter().map(|l| l.w.ncols()));
        s
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let z = h.dot(&l.w) + &l.b;
            h = if i == last { z } else { self.activation.apply(&z) };
        }
        h
    }

    pub fn forward_cached(&self, x: &Array2<f64>) -> (Array2<f64>, ForwardCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let z = h.dot(&l.w) + &l.b;
            inputs.push(h);
            h = if i == last {
                z.clone()
            } else {
                self.activation.apply(&z)
            };
            pre.push(z);
        }
        (h, ForwardCache { inputs, pre })
    }

    /// Backpropagate `grad_out = dL/d(output)`; returns parameter gradients and `dL/d(input)`.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &Array2<f64>) -> (Gradients, Array2<f64>) {
        let n = self.layers.len();
        let mut grads: Vec<Dense> = self.layers.iter().map(Dense::zeros_like).collect();
        let mut delta = grad_out.clone();
        for i in (0..n).rev() {
            if i != n - 1 {
                // activation of layer i is the input of layer i + 1
                let act = &cache.inputs[i + 1];
                let z = &cache.pre[i];
                let f = self.activation;
                Zip::from(&mut delta)
                    .and(z)
                    .and(act)
                    .for_each(|d, &z, &a| *d *= f.grad(z, a));
            }
            grads[i].w = cache.inputs[i].t().dot(&delta);
            grads[i].b = delta.sum_axis(Axis(0));
            delta = delta.dot(&self.layers[i].w.t());
        }
        (Gradients { layers: grads }, delta)
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out
    }

    pub fn set_flat(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.num_params());
        let mut it = params.iter();
        for l in &mut self.layers {
            for v in l.w.iter_mut().chain(l.b.iter_mut()) {
                *v = *it.next().expect("length checked");
            }
        }
    }

    /// `self ← tau · online + (1 − tau) · self`.
    pub fn soft_update_from(&mut self, online: &Mlp, tau: f64) {
        for (t, o) in self.layers.iter_mut().zip(&online.layers) {
            Zip::from(&mut t.w)
                .and(&o.w)
                .for_each(|t, &o| *t = tau * o + (1.0 - tau) * *t);
            Zip::from(&mut t.b)
                .and(&o.b)
                .for_each(|t, &o| *t = tau * o + (1.0 - tau) * *t);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }

    pub fn to_doc(&self) -> MlpDoc {
        MlpDoc {
            sizes: self.sizes(),
            activation: self.activation,
            weights: self.layers.iter().map(|l| l.w.iter().copied().collect()).collect(),
            biases: self.layers.iter().map(|l| l.b.to_vec()).collect(),
        }
    }

    pub fn from_doc(doc: &MlpDoc) -> Result<Self, String> {
        if doc.sizes.len() < 2 {
            return Err("mlp needs at least two layer sizes".into());
        }
        let n = doc.sizes.len() - 1;
        if doc.weights.len() != n || doc.biases.len() != n {
            return Err(format!("expected {n} weight and bias blocks"));
        }
        let mut layers = Vec::with_capacity(n);
        for i in 0..n {
            let (fi, fo) = (doc.sizes[i], doc.sizes[i + 1]);
            let w = Array2::from_shape_vec((fi, fo), doc.weights[i].clone())
                .map_err(|e| format!("layer {i} weights: {e}"))?;
            if doc.biases[i].len() != fo {
                return Err(format!("layer {i} bias has {} entries, expected {fo}", doc.biases[i].len()));
            }
            layers.push(Dense {
                w,
                b: Array1::from(doc.biases[i].clone()),
            });
        }
        Ok(Self {
            layers,
            activation: doc.activation,
        })
    }
}

/// Serialisable weight document. Weights are row-major `(in, out)` blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpDoc {
    pub sizes: Vec<usize>,
    pub activation: Activation,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

/// Adam optimiser state for one network.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Dense>,
    v: Vec<Dense>,
}

impl Adam {
    pub fn new(net: &Mlp, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: net.layers.iter().map(Dense::zeros_like).collect(),
            v: net.layers.iter().map(Dense::zeros_like).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Descend along `grads`.
    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) {
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let lr = self.lr;
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= lr * mh / (vh.sqrt() + eps);
        };
        for (((l, m), v), g) in net
            .layers
            .iter_mut()
            .zip(&mut self.m)
            .zip(&mut self.v)
            .zip(&grads.layers)
        {
            Zip::from(&mut l.w)
                .and(&mut m.w)
                .and(&mut v.w)
                .and(&g.w)
                .for_each(|p, m, v, &g| update(p, m, v, g));
            Zip::from(&mut l.b)
                .and(&mut m.b)
                .and(&mut v.b)
                .and(&g.b)
                .for_each(|p, m, v, &g| update(p, m, v, g));
        }
    }
}

/// Scalar Adam for a single free parameter (e.g. the log entropy coefficient).
#[derive(Debug, Clone)]
pub struct ScalarAdam {
    pub lr: f64,
    t: u64,
    m: f64,
    v: f64,
}

impl ScalarAdam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            t: 0,
            m: 0.0,
            v: 0.0,
        }
    }

    pub fn step(&mut self, p: &mut f64, g: f64) {
        self.t += 1;
        self.m = 0.9 * self.m + 0.1 * g;
        self.v = 0.999 * self.v + 0.001 * g * g;
        let mh = self.m / (1.0 - 0.9f64.powi(self.t as i32));
        let vh = self.v / (1.0 - 0.999f64.powi(self.t as i32));
        *p -= self.lr * mh / (vh.sqrt() + 1e-8);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss(net: &Mlp, x: &Array2<f64>, target: &Array2<f64>) -> f64 {
        let y = net.forward(x);
        0.5 * (&y - target).mapv(|v| v * v).sum()
    }

    fn check_gradients(act: Activation) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = Mlp::new(&[3, 5, 4, 2], act, &mut rng);
        let x = Array2::from_shape_fn((6, 3), |_| rng.random_range(-1.0..1.0));
        let t = Array2::from_shape_fn((6, 2), |_| rng.random_range(-1.0..1.0));
        let (y, cache) = net.forward_cached(&x);
        let (g, gx) = net.backward(&cache, &(&y - &t));
        let analytic = g.flatten();
        let params = net.flatten();
        let h = 1e-6;
        for (i, &a) in analytic.iter().enumerate() {
            let mut p = params.clone();
            p[i] += h;
            let mut plus = net.clone();
            plus.set_flat(&p);
            p[i] -= 2.0 * h;
            let mut minus = net.clone();
            minus.set_flat(&p);
            let fd = (loss(&plus, &x, &t) - loss(&minus, &x, &t)) / (2.0 * h);
            let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
            assert!(rel < 1e-4, "param {i}: fd {fd} analytic {a}");
        }
        // input gradient
        for r in 0..x.nrows() {
            for c in 0..x.ncols() {
                let mut xp = x.clone();
                xp[[r, c]] += h;
                let mut xm = x.clone();
                xm[[r, c]] -= h;
                let fd = (loss(&net, &xp, &t) - loss(&net, &xm, &t)) / (2.0 * h);
                let a = gx[[r, c]];
                assert!((fd - a).abs() / fd.abs().max(a.abs()).max(1e-6) < 1e-4);
            }
        }
    }

    #[test]
    fn tanh_gradients_match_finite_differences() {
        check_gradients(Activation::Tanh);
    }

    #[test]
    fn relu_gradients_match_finite_differences() {
        check_gradients(Activation::Relu);
    }

    #[test]
    fn soft_update_is_convex_combination() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let online = Mlp::new(&[2, 3, 1], Activation::Relu, &mut rng);
        let mut target = Mlp::new(&[2, 3, 1], Activation::Relu, &mut rng);
        let before = target.flatten();
        target.soft_update_from(&online, 0.005);
        for ((t, b), o) in target.flatten().iter().zip(&before).zip(online.flatten()) {
            assert!((t - (0.005 * o + 0.995 * b)).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_fits_a_line() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = Mlp::new(&[1, 8, 1], Activation::Tanh, &mut rng);
        let x = Array2::from_shape_fn((32, 1), |(i, _)| i as f64 / 16.0 - 1.0);
        let t = x.mapv(|v| 0.5 * v + 0.1);
        let mut opt = Adam::new(&net, 1e-2);
        let first = loss(&net, &x, &t);
        for _ in 0..2000 {
            let (y, c) = net.forward_cached(&x);
            let (g, _) = net.backward(&c, &(&y - &t));
            opt.step(&mut net, &g);
        }
        assert!(loss(&net, &x, &t) < first * 1e-3);
    }

    #[test]
    fn doc_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Mlp::new(&[2, 4, 3], Activation::Tanh, &mut rng);
        let json = serde_json::to_string(&net.to_doc()).unwrap();
        let back = Mlp::from_doc(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back, net);
    }
}
