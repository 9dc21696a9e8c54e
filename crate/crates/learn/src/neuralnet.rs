//! Dense feed-forward networks with manual backpropagation and Adam.
//!
//! Batches are row-major: one sample per row. Inputs pass through a fixed
//! per-feature standardization before the first layer.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{LearnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Softplus,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Self::Softplus => z.max(0.0) + (-z.abs()).exp().ln_1p(),
            Self::Relu => z.max(0.0),
            Self::Identity => z,
        }
    }

    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Self::Softplus => 1.0 / (1.0 + (-z).exp()),
            Self::Relu => f64::from(u8::from(z > 0.0)),
            Self::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Descend,
    Ascend,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `out × in`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub activation: Activation,
}

/// Per-feature affine map `(x − mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: Array1::zeros(dim),
            std: Array1::ones(dim),
        }
    }

    /// Column statistics of `x`; constant columns get unit scale.
    pub fn fit(x: &Array2<f64>) -> Self {
        let n = x.nrows().max(1) as f64;
        let mean = x.sum_axis(Axis(0)) / n;
        let mut std = Array1::zeros(x.ncols());
        for (j, col) in x.axis_iter(Axis(1)).enumerate() {
            let var = col.iter().map(|v| (v - mean[j]).powi(2)).sum::<f64>() / n;
            std[j] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        }
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Moments {
    m_w: Array2<f64>,
    v_w: Array2<f64>,
    m_b: Array1<f64>,
    v_b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub layers: Vec<Dense>,
    pub stats: Standardizer,
    moments: Vec<Moments>,
    step: u64,
    /// Bumped on every parameter change; caches from older generations are rejected.
    generation: u64,
}

/// Activations recorded by [`Network::forward`].
#[derive(Debug, Clone)]
pub struct Cache {
    generation: u64,
    /// Layer inputs; entry 0 is the standardized batch.
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

impl Cache {
    /// Pre-activations of the output layer.
    pub fn output_pre(&self) -> &Array2<f64> {
        &self.pre[self.pre.len() - 1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w: Vec<Array2<f64>>,
    pub b: Vec<Array1<f64>>,
    /// Gradient with respect to the raw (unstandardized) input batch.
    pub input: Array2<f64>,
}

impl Gradients {
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            w: self.w.iter().map(|w| w * factor).collect(),
            b: self.b.iter().map(|b| b * factor).collect(),
            input: &self.input * factor,
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl Network {
    /// Glorot-uniform weights (variance `2/(fan_in + fan_out)`), zero biases.
    pub fn new(dims: &[usize], activations: &[Activation], seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(LearnError::Shape(format!("bad layer dims {dims:?}")));
        }
        if activations.len() != dims.len() - 1 {
            return Err(LearnError::Shape(format!(
                "{} activations for {} layers",
                activations.len(),
                dims.len() - 1
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(activations.len());
        let mut moments = Vec::with_capacity(activations.len());
        for (pair, &activation) in dims.windows(2).zip(activations) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-limit..limit));
            layers.push(Dense {
                w,
                b: Array1::zeros(fan_out),
                activation,
            });
            moments.push(Moments {
                m_w: Array2::zeros((fan_out, fan_in)),
                v_w: Array2::zeros((fan_out, fan_in)),
                m_b: Array1::zeros(fan_out),
                v_b: Array1::zeros(fan_out),
            });
        }
        Ok(Self {
            layers,
            stats: Standardizer::identity(dims[0]),
            moments,
            step: 0,
            generation: 0,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].w.nrows()
    }

    pub fn set_standardizer(&mut self, stats: Standardizer) -> Result<()> {
        if stats.mean.len() != self.input_dim() || stats.std.len() != self.input_dim() {
            return Err(LearnError::Shape("standardizer does not match input dim".into()));
        }
        self.stats = stats;
        self.generation += 1;
        Ok(())
    }

    /// Marks externally modified parameters so existing caches go stale.
    pub fn touch(&mut self) {
        self.generation += 1;
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(LearnError::Shape(format!(
                "batch has {} features, network expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<(Array2<f64>, Cache)> {
        self.check_input(x)?;
        let mut a = (x - &self.stats.mean) / &self.stats.std;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let z = a.dot(&layer.w.t()) + &layer.b;
            let act = layer.activation;
            let out = z.mapv(|v| act.apply(v));
            inputs.push(a);
            pre.push(z);
            a = out;
        }
        Ok((
            a,
            Cache {
                generation: self.generation,
                inputs,
                pre,
            },
        ))
    }

    pub fn predict(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward(x)?.0)
    }

    /// Reverse-mode gradients of `Σ dout ⊙ output`.
    pub fn backward(&self, cache: &Cache, dout: &Array2<f64>) -> Result<Gradients> {
        self.check_cache(cache, dout)?;
        let mut dz = dout.clone();
        let act = self.layers[self.layers.len() - 1].activation;
        dz.zip_mut_with(cache.output_pre(), |d, z| *d *= act.derivative(*z));
        Ok(self.backward_from(cache, dz))
    }

    /// Like [`Network::backward`], but `dz` is already the gradient with
    /// respect to the output layer's pre-activations.
    pub fn backward_pre(&self, cache: &Cache, dz: &Array2<f64>) -> Result<Gradients> {
        self.check_cache(cache, dz)?;
        Ok(self.backward_from(cache, dz.clone()))
    }

    fn check_cache(&self, cache: &Cache, upstream: &Array2<f64>) -> Result<()> {
        if cache.generation != self.generation {
            return Err(LearnError::StaleCache);
        }
        let last = cache.output_pre();
        if upstream.dim() != last.dim() {
            return Err(LearnError::Shape(format!(
                "upstream gradient {:?} vs output {:?}",
                upstream.dim(),
                last.dim()
            )));
        }
        Ok(())
    }

    fn backward_from(&self, cache: &Cache, mut dz: Array2<f64>) -> Gradients {
        let n = self.layers.len();
        let mut w = vec![Array2::zeros((0, 0)); n];
        let mut b = vec![Array1::zeros(0); n];
        for l in (0..n).rev() {
            if l + 1 < n {
                let act = self.layers[l].activation;
                dz.zip_mut_with(&cache.pre[l], |d, z| *d *= act.derivative(*z));
            }
            w[l] = dz.t().dot(&cache.inputs[l]);
            b[l] = dz.sum_axis(Axis(0));
            dz = dz.dot(&self.layers[l].w);
        }
        let input = dz / &self.stats.std;
        Gradients { w, b, input }
    }

    /// One Adam update with bias correction; `Ascend` climbs the gradient.
    pub fn adam_step(&mut self, grads: &Gradients, lr: f64, direction: Direction) -> Result<()> {
        if grads.w.len() != self.layers.len() {
            return Err(LearnError::Shape("gradient layer count mismatch".into()));
        }
        for l in 0..self.layers.len() {
            if grads.w[l].dim() != self.layers[l].w.dim() || grads.b[l].len() != self.layers[l].b.len() {
                return Err(LearnError::Shape(format!("gradient shape mismatch in layer {l}")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        let sign = match direction {
            Direction::Descend => -1.0,
            Direction::Ascend => 1.0,
        };
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *p += sign * lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        };
        for ((layer, mom), (gw, gb)) in self.layers.iter_mut().zip(&mut self.moments).zip(grads.w.iter().zip(&grads.b)) {
            ndarray::Zip::from(&mut layer.w)
                .and(&mut mom.m_w)
                .and(&mut mom.v_w)
                .and(gw)
                .for_each(|p, m, v, &g| update(p, m, v, g));
            ndarray::Zip::from(&mut layer.b)
                .and(&mut mom.m_b)
                .and(&mut mom.v_b)
                .and(gb)
                .for_each(|p, m, v, &g| update(p, m, v, g));
        }
        self.generation += 1;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let net: Self = serde_json::from_str(text)?;
        let chained = net.layers.windows(2).all(|p| p[0].w.nrows() == p[1].w.ncols());
        if net.layers.is_empty() || !chained || net.moments.len() != net.layers.len() {
            return Err(LearnError::Shape("checkpoint layers do not chain".into()));
        }
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn net3(seed: u64) -> Network {
        Network::new(
            &[4, 6, 5, 3],
            &[Activation::Softplus, Activation::Softplus, Activation::Softplus],
            seed,
        )
        .unwrap()
    }

    fn batch() -> Array2<f64> {
        Array2::from_shape_fn((5, 4), |(i, j)| ((i * 7 + j * 3) % 11) as f64 / 3.0 - 1.2)
    }

    #[test]
    fn init_is_seeded_and_shaped() {
        assert_eq!(net3(1), net3(1));
        assert_ne!(net3(1).layers[0].w, net3(2).layers[0].w);
        let n = Network::new(&[4, 8, 2], &[Activation::Softplus, Activation::Relu], 0).unwrap();
        assert_eq!(n.layers[0].w.dim(), (8, 4));
        assert_eq!(n.layers[1].w.dim(), (2, 8));
        assert!(n.layers.iter().all(|l| l.b.iter().all(|b| *b == 0.0)));
        assert!(Network::new(&[4], &[], 0).is_err());
        assert!(Network::new(&[4, 2], &[], 0).is_err());
    }

    #[test]
    fn init_variance() {
        let n = Network::new(&[1000, 1000], &[Activation::Identity], 3).unwrap();
        let w = &n.layers[0].w;
        let var = w.iter().map(|x| x * x).sum::<f64>() / w.len() as f64;
        let expect = 2.0 / 2000.0;
        assert!((var - expect).abs() < 0.2 * expect);
    }

    #[test]
    fn zero_net_relu_head() {
        let mut n = Network::new(&[3, 2], &[Activation::Relu], 0).unwrap();
        n.layers[0].w.fill(0.0);
        let out = n.predict(&Array2::ones((2, 3))).unwrap();
        assert!(out.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn identity_layer_returns_standardized_input() {
        let mut n = Network::new(&[2, 2], &[Activation::Identity], 0).unwrap();
        n.layers[0].w = Array2::eye(2);
        let x = array![[1.0, 10.0], [3.0, 20.0]];
        n.set_standardizer(Standardizer::fit(&x)).unwrap();
        let out = n.predict(&x).unwrap();
        assert_eq!(out, array![[-1.0, -1.0], [1.0, 1.0]]);
    }

    #[test]
    fn forward_is_deterministic_and_row_equivariant() {
        let n = net3(5);
        let x = batch();
        assert_eq!(n.predict(&x).unwrap(), n.predict(&x).unwrap());
        let rev = x.select(Axis(0), &[4, 3, 2, 1, 0]);
        let out = n.predict(&x).unwrap();
        let out_rev = n.predict(&rev).unwrap();
        assert_eq!(out_rev.row(0), out.row(4));
        assert_eq!(out_rev.row(3), out.row(1));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut n = net3(9);
        n.set_standardizer(Standardizer::fit(&batch())).unwrap();
        let x = batch();
        let weights = Array2::from_shape_fn((5, 3), |(i, j)| (i as f64 - 2.0) * 0.3 + j as f64 * 0.5);
        let loss = |net: &Network, x: &Array2<f64>| (net.predict(x).unwrap() * &weights).sum();
        let (_, cache) = n.forward(&x).unwrap();
        let g = n.backward(&cache, &weights).unwrap();
        let h = 1e-5;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-8);
        for l in 0..3 {
            for idx in 0..n.layers[l].w.len() {
                let (r, c) = (idx / n.layers[l].w.ncols(), idx % n.layers[l].w.ncols());
                let mut up = n.clone();
                up.layers[l].w[[r, c]] += h;
                let mut dn = n.clone();
                dn.layers[l].w[[r, c]] -= h;
                let fd = (loss(&up, &x) - loss(&dn, &x)) / (2.0 * h);
                assert!(rel(fd, g.w[l][[r, c]]) < 1e-5, "w{l}[{r},{c}]");
            }
            for k in 0..n.layers[l].b.len() {
                let mut up = n.clone();
                up.layers[l].b[k] += h;
                let mut dn = n.clone();
                dn.layers[l].b[k] -= h;
                let fd = (loss(&up, &x) - loss(&dn, &x)) / (2.0 * h);
                assert!(rel(fd, g.b[l][k]) < 1e-5, "b{l}[{k}]");
            }
        }
        for idx in 0..x.len() {
            let (r, c) = (idx / 4, idx % 4);
            let mut up = x.clone();
            up[[r, c]] += h;
            let mut dn = x.clone();
            dn[[r, c]] -= h;
            let fd = (loss(&n, &up) - loss(&n, &dn)) / (2.0 * h);
            assert!(rel(fd, g.input[[r, c]]) < 1e-5, "x[{r},{c}]");
        }
    }

    #[test]
    fn backward_pre_skips_the_output_activation() {
        let n = net3(4);
        let (out, cache) = n.forward(&batch()).unwrap();
        let d = Array2::from_shape_fn(out.dim(), |(i, j)| i as f64 - j as f64);
        let mut dz = d.clone();
        dz.zip_mut_with(cache.output_pre(), |g, z| *g *= Activation::Softplus.derivative(*z));
        assert_eq!(n.backward(&cache, &d).unwrap(), n.backward_pre(&cache, &dz).unwrap());
    }

    #[test]
    fn backward_is_linear_and_zero_preserving() {
        let n = net3(2);
        let (out, cache) = n.forward(&batch()).unwrap();
        let zero = n.backward(&cache, &Array2::zeros(out.dim())).unwrap();
        assert!(zero.w.iter().all(|w| w.iter().all(|x| *x == 0.0)));
        let d = Array2::from_elem(out.dim(), 0.7);
        let one = n.backward(&cache, &d).unwrap();
        let two = n.backward(&cache, &(&d * 2.0)).unwrap();
        assert_eq!(two, one.scaled(2.0));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut n = net3(2);
        let (out, cache) = n.forward(&batch()).unwrap();
        let g = n.backward(&cache, &Array2::ones(out.dim())).unwrap();
        n.adam_step(&g, 1e-3, Direction::Descend).unwrap();
        assert!(matches!(n.backward(&cache, &Array2::ones(out.dim())), Err(LearnError::StaleCache)));
        assert!(n.forward(&Array2::zeros((1, 3))).is_err());
    }

    fn scalar_net() -> Network {
        let mut n = Network::new(&[1, 1], &[Activation::Identity], 0).unwrap();
        n.layers[0].w[[0, 0]] = 1.0;
        n
    }

    fn scalar_grad(g: f64) -> Gradients {
        Gradients {
            w: vec![array![[g]]],
            b: vec![array![0.0]],
            input: Array2::zeros((0, 0)),
        }
    }

    #[test]
    fn adam_zero_grad_is_noop() {
        let mut n = net3(4);
        let before = n.layers.clone();
        let (out, cache) = n.forward(&batch()).unwrap();
        let g = n.backward(&cache, &Array2::zeros(out.dim())).unwrap();
        n.adam_step(&g, 0.1, Direction::Descend).unwrap();
        assert_eq!(n.layers, before);
    }

    #[test]
    fn adam_step_size_tends_to_lr() {
        let mut n = scalar_net();
        let lr = 1e-3;
        let mut prev = n.layers[0].w[[0, 0]];
        let mut last_step = 0.0;
        for _ in 0..5000 {
            n.adam_step(&scalar_grad(0.37), lr, Direction::Descend).unwrap();
            let now = n.layers[0].w[[0, 0]];
            last_step = prev - now;
            prev = now;
        }
        assert!((last_step - lr).abs() < 1e-3 * lr);
    }

    #[test]
    fn ascend_and_descend_move_oppositely() {
        // Loss −x² at x = 1 has gradient −2.
        let mut down = scalar_net();
        down.adam_step(&scalar_grad(-2.0), 0.1, Direction::Descend).unwrap();
        assert!(down.layers[0].w[[0, 0]] > 1.0);
        let mut up = scalar_net();
        up.adam_step(&scalar_grad(-2.0), 0.1, Direction::Ascend).unwrap();
        assert!(up.layers[0].w[[0, 0]] < 1.0);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut n = net3(8);
        n.set_standardizer(Standardizer::fit(&batch())).unwrap();
        let (out, cache) = n.forward(&batch()).unwrap();
        let g = n.backward(&cache, &Array2::ones(out.dim())).unwrap();
        n.adam_step(&g, 1e-2, Direction::Descend).unwrap();
        let back = Network::from_json(&n.to_json().unwrap()).unwrap();
        assert_eq!(back, n);
        assert_eq!(back.predict(&batch()).unwrap(), n.predict(&batch()).unwrap());
    }
}
