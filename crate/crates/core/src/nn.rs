//! Fully connected networks with tanh hidden activations, manual
//! backpropagation and an Adam optimizer.
//!
//! Forward/backward are batched matrix products so the whole minibatch is
//! one GEMM per layer; reductions are ordinary ndarray sums, so gradient
//! accumulation order is fixed and results are bit-reproducible.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::rng::StreamId;
use crate::scalar::{s, Scalar};

/// Multi-layer perceptron; hidden layers use tanh, output is linear.
#[derive(Debug, Clone)]
pub struct Mlp<T> {
    /// Per-layer weights, shape `(fan_out, fan_in)`.
    weights: Vec<Array2<T>>,
    biases: Vec<Array1<T>>,
}

/// Activations cached by [`Mlp::forward`] for the backward pass.
#[derive(Debug)]
pub struct ForwardCache<T> {
    /// Input batch plus post-tanh activations of every hidden layer.
    acts: Vec<Array2<T>>,
}

/// Parameter gradients in the same layout as the network.
#[derive(Debug, Clone)]
pub struct MlpGrad<T> {
    pub weights: Vec<Array2<T>>,
    pub biases: Vec<Array1<T>>,
}

impl<T: Scalar> Mlp<T> {
    /// Builds a network with the given layer sizes (`sizes[0]` inputs,
    /// `sizes.last()` outputs), Xavier-uniform init drawn from `stream`.
    /// The output layer is scaled by `final_scale` to keep initial heads
    /// near zero.
    pub fn new(sizes: &[usize], stream: StreamId, final_scale: f64) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output sizes");
        let mut rng = stream.rng();
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (idx, pair) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let last = idx + 2 == sizes.len();
            let scale = (6.0 / (fan_in + fan_out) as f64).sqrt()
                * if last { final_scale } else { 1.0 };
            let mut w = Array2::zeros((fan_out, fan_in));
            for v in w.iter_mut() {
                let u: f64 = rng.gen::<f64>() * 2.0 - 1.0;
                *v = s(u * scale);
            }
            weights.push(w);
            biases.push(Array1::zeros(fan_out));
        }
        Mlp { weights, biases }
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().unwrap().nrows()
    }

    /// Adds `delta` to an output-layer bias entry; used to pin initial
    /// head outputs (e.g. the log-stdev head).
    pub fn nudge_output_bias(&mut self, index: usize, delta: T) {
        let b = self.biases.last_mut().unwrap();
        b[index] += delta;
    }

    /// Batched forward pass: `x` is `(batch, in)`, returns `(batch, out)`.
    pub fn forward(&self, x: ArrayView2<T>) -> (Array2<T>, ForwardCache<T>) {
        let mut acts = Vec::with_capacity(self.weights.len());
        acts.push(x.to_owned());
        let mut h = x.to_owned();
        let last = self.weights.len() - 1;
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = h.dot(&w.t());
            for mut row in z.rows_mut() {
                row += b;
            }
            if i < last {
                z.mapv_inplace(|v| v.tanh());
                acts.push(z.clone());
            }
            h = z;
        }
        (h, ForwardCache { acts })
    }

    /// Single-sample forward without caching; rollout fast path.
    pub fn forward_one(&self, x: ArrayView1<T>) -> Array1<T> {
        let mut h = x.to_owned();
        let last = self.weights.len() - 1;
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w.dot(&h) + b;
            if i < last {
                z.mapv_inplace(|v| v.tanh());
            }
            h = z;
        }
        h
    }

    /// Backward pass for the batch that produced `cache`.
    ///
    /// `grad_out` is dL/d(output), shape `(batch, out)`. Returns parameter
    /// gradients summed over the batch.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_out: ArrayView2<T>) -> MlpGrad<T> {
        let n = self.weights.len();
        let mut grads = MlpGrad {
            weights: self.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            biases: self.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
        };
        let mut dz = grad_out.to_owned();
        for layer in (0..n).rev() {
            let input = &cache.acts[layer];
            grads.weights[layer] = dz.t().dot(input);
            grads.biases[layer] = dz.sum_axis(Axis(0));
            if layer > 0 {
                let mut da = dz.dot(&self.weights[layer]);
                // input of this layer is the post-tanh activation of the previous one
                da.zip_mut_with(input, |g, &a| *g = *g * (T::one() - a * a));
                dz = da;
            }
        }
        grads
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Flattens parameters as `[w0, b0, w1, b1, ...]`, weights row-major.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }

    /// Inverse of [`Mlp::flatten`].
    pub fn load_flat(&mut self, flat: &[T]) {
        assert_eq!(flat.len(), self.param_count(), "parameter blob length");
        let mut pos = 0;
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            for v in w.iter_mut() {
                *v = flat[pos];
                pos += 1;
            }
            for v in b.iter_mut() {
                *v = flat[pos];
                pos += 1;
            }
        }
    }

    pub fn grad_flatten(grad: &MlpGrad<T>) -> Vec<T> {
        let mut out = Vec::new();
        for (w, b) in grad.weights.iter().zip(&grad.biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }
}

impl<T: Scalar> MlpGrad<T> {
    pub fn scale(&mut self, factor: T) {
        for w in &mut self.weights {
            w.mapv_inplace(|v| v * factor);
        }
        for b in &mut self.biases {
            b.mapv_inplace(|v| v * factor);
        }
    }

    pub fn add(&mut self, other: &MlpGrad<T>) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }
}

/// Adam optimizer over one network's parameters.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: u64,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> Adam<T> {
    pub fn new(param_count: usize) -> Self {
        Adam {
            m: vec![T::zero(); param_count],
            v: vec![T::zero(); param_count],
            t: 0,
            beta1: s(0.9),
            beta2: s(0.999),
            eps: s(1e-8),
        }
    }

    /// One Adam step on `net` with gradient `grad` (already averaged over
    /// the minibatch) and learning rate `lr`.
    pub fn step(&mut self, net: &mut Mlp<T>, grad: &MlpGrad<T>, lr: T) {
        if lr == T::zero() {
            return;
        }
        self.t += 1;
        let flat_g = Mlp::grad_flatten(grad);
        let mut flat_p = net.flatten();
        let b1 = self.beta1;
        let b2 = self.beta2;
        let bc1 = T::one() - b1.powi(self.t as i32);
        let bc2 = T::one() - b2.powi(self.t as i32);
        for i in 0..flat_p.len() {
            let g = flat_g[i];
            self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            flat_p[i] = flat_p[i] - lr * mhat / (vhat.sqrt() + self.eps);
        }
        net.load_flat(&flat_p);
    }

    /// Serializes optimizer state (moments and step counter) as f64.
    pub fn state_f64(&self) -> (Vec<f64>, Vec<f64>, u64) {
        (
            self.m.iter().map(|v| Scalar::to_f64(*v)).collect(),
            self.v.iter().map(|v| Scalar::to_f64(*v)).collect(),
            self.t,
        )
    }

    pub fn load_state_f64(&mut self, m: &[f64], v: &[f64], t: u64) {
        assert_eq!(m.len(), self.m.len());
        assert_eq!(v.len(), self.v.len());
        self.m = m.iter().map(|&x| s(x)).collect();
        self.v = v.iter().map(|&x| s(x)).collect();
        self.t = t;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny_net() -> Mlp<f64> {
        Mlp::new(&[2, 4, 3], StreamId::root(11).child(1), 1.0)
    }

    #[test]
    fn forward_one_matches_batched() {
        // GEMM and matrix-vector kernels may differ in the last ulp, so
        // compare with a tight tolerance rather than bitwise.
        let net = tiny_net();
        let x = array![[0.3, -0.7], [1.2, 0.4]];
        let (batched, _) = net.forward(x.view());
        for (i, row) in x.rows().into_iter().enumerate() {
            let single = net.forward_one(row);
            for j in 0..3 {
                assert!((single[j] - batched[[i, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let net = tiny_net();
        let x = array![[0.5, -0.2], [-1.0, 0.8], [0.1, 0.1]];
        // L = sum of outputs => grad_out = ones
        let (_, cache) = net.forward(x.view());
        let grad = net.backward(&cache, Array2::ones((3, 3)).view());
        let flat_g = Mlp::grad_flatten(&grad);

        let loss = |n: &Mlp<f64>| -> f64 { n.forward(x.view()).0.sum() };
        let eps = 1e-6;
        let base = net.flatten();
        let mut worst = 0.0f64;
        for i in 0..base.len() {
            let mut plus = net.clone();
            let mut minus = net.clone();
            let mut p = base.clone();
            p[i] += eps;
            plus.load_flat(&p);
            p[i] -= 2.0 * eps;
            minus.load_flat(&p);
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
            let err = (fd - flat_g[i]).abs() / fd.abs().max(1.0);
            worst = worst.max(err);
        }
        assert!(worst < 1e-7, "max relative error {worst}");
    }

    #[test]
    fn flatten_round_trips() {
        let net = tiny_net();
        let mut other = Mlp::new(&[2, 4, 3], StreamId::root(99), 1.0);
        other.load_flat(&net.flatten());
        assert_eq!(net.flatten(), other.flatten());
    }

    #[test]
    fn adam_zero_lr_is_identity() {
        let mut net = tiny_net();
        let before = net.flatten();
        let x = array![[0.5, -0.2]];
        let (_, cache) = net.forward(x.view());
        let grad = net.backward(&cache, Array2::ones((1, 3)).view());
        let mut opt = Adam::new(net.param_count());
        opt.step(&mut net, &grad, 0.0);
        assert_eq!(before, net.flatten());
    }
}
