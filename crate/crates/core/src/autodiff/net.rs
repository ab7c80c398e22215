//! Residual convolutional velocity field conditioned on `(t, d)`.
//!
//! ```text
//! h   = conv_in(z) + embed([sin/cos(t) ; sin/cos(d)])
//! h   = h + conv2(silu(conv1(silu(h))))        (repeated `depth` times)
//! out = conv_out(silu(h))                      (zero-initialized)
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

const KERNEL: usize = 3;
/// Highest angular frequency of the sinusoidal embedding.
const MAX_FREQUENCY: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetworkSpec {
    pub in_channels: usize,
    pub hidden_channels: usize,
    /// Number of residual blocks.
    pub depth: usize,
    /// Width of the sinusoidal embedding of each of `t` and `d`.
    pub embed_dim: usize,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            in_channels: 1,
            hidden_channels: 32,
            depth: 4,
            embed_dim: 16,
        }
    }
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("in_channels", self.in_channels),
            ("hidden_channels", self.hidden_channels),
            ("depth", self.depth),
            ("embed_dim", self.embed_dim),
        ] {
            if v == 0 {
                return Err(Error::invalid("network spec", format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    /// Parameter names and shapes in canonical order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (c, h, k) = (self.in_channels, self.hidden_channels, KERNEL);
        let mut out = vec![
            ("conv_in.weight".to_string(), vec![h, c, k, k]),
            ("conv_in.bias".to_string(), vec![h]),
            ("embed.weight".to_string(), vec![h, 2 * self.embed_dim]),
            ("embed.bias".to_string(), vec![h]),
        ];
        for i in 0..self.depth {
            for conv in ["conv1", "conv2"] {
                out.push((format!("blocks.{i}.{conv}.weight"), vec![h, h, k, k]));
                out.push((format!("blocks.{i}.{conv}.bias"), vec![h]));
            }
        }
        out.push(("conv_out.weight".to_string(), vec![c, h, k, k]));
        out.push(("conv_out.bias".to_string(), vec![c]));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    params: Vec<(String, Tensor)>,
}

impl Network {
    /// Random initialization with a zero output head, so the initial field is identically 0.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let mut net = Self::with_random_head(spec, seed)?;
        for (name, p) in &mut net.params {
            if name.starts_with("conv_out.") {
                p.data_mut().fill(0.0);
            }
        }
        Ok(net)
    }

    /// Random initialization of every layer including the output head.
    pub fn with_random_head(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = spec
            .parameter_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let numel: usize = shape.iter().product();
                let std = if name.ends_with(".bias") {
                    0.0
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let gain = if name.contains("conv2") { 0.5 } else { 1.0 };
                    gain * (2.0 / fan_in as f64).sqrt()
                };
                let data = if std == 0.0 {
                    vec![0.0; numel]
                } else {
                    let normal = Normal::new(0.0, std).expect("positive std");
                    (0..numel).map(|_| normal.sample(&mut rng)).collect()
                };
                let tensor = Tensor::new(shape, data).expect("shape from spec");
                (name, tensor)
            })
            .collect();
        Ok(Self { spec, params })
    }

    /// Builds a network from explicit parameters, checking them against `spec`.
    pub fn from_parameters(spec: NetworkSpec, params: Vec<(String, Tensor)>) -> Result<Self> {
        spec.validate()?;
        let expected = spec.parameter_shapes();
        if expected.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                expected.len(),
                params.len()
            )));
        }
        let mut ordered = Vec::with_capacity(expected.len());
        for (name, shape) in expected {
            let (_, tensor) = params
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if tensor.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    tensor.shape()
                )));
            }
            ordered.push((name, tensor.clone()));
        }
        Ok(Self {
            spec,
            params: ordered,
        })
    }

    pub fn spec(&self) -> NetworkSpec {
        self.spec
    }

    pub fn parameters(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn parameter_tensors(&self) -> Vec<Tensor> {
        self.params.iter().map(|(_, t)| t.clone()).collect()
    }

    pub(crate) fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|(_, t)| t)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    /// Places the parameters on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|(_, t)| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    /// Velocity for a batch `z: [N, C, H, W]` with per-item `t` and `d`.
    pub fn forward(&self, z: &Tensor, t: &[f64], d: &[f64]) -> Result<Tensor> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let out = self.forward_graph(&mut g, &params, zv, t, d)?;
        Ok(g.value(out).clone())
    }

    /// Velocity for a single item `z: [C, H, W]`.
    pub fn forward_single(&self, z: &Tensor, t: f64, d: f64) -> Result<Tensor> {
        let mut shape = vec![1];
        shape.extend_from_slice(z.shape());
        let batched = z.clone().reshape(shape)?;
        let out = self.forward(&batched, &[t], &[d])?;
        out.reshape(z.shape().to_vec())
    }

    /// Records the forward pass on `g` using parameter handles from [`Network::bind`].
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        params: &[Var],
        z: Var,
        t: &[f64],
        d: &[f64],
    ) -> Result<Var> {
        let shape = g.value(z).shape().to_vec();
        let [n, c, _, _] = *shape.as_slice() else {
            return Err(Error::shape("[N, C, H, W]", format!("{shape:?}")));
        };
        if c != self.spec.in_channels {
            return Err(Error::shape(
                format!("{} input channels", self.spec.in_channels),
                c,
            ));
        }
        if t.len() != n || d.len() != n {
            return Err(Error::shape(
                format!("{n} (t, d) values"),
                format!("{} t, {} d", t.len(), d.len()),
            ));
        }
        if params.len() != self.params.len() {
            return Err(Error::shape(
                format!("{} bound parameters", self.params.len()),
                params.len(),
            ));
        }

        let mut p = params.iter().copied();
        let mut next = || p.next().expect("parameter count checked");

        let emb_dim = 2 * self.spec.embed_dim;
        let mut emb = Vec::with_capacity(n * emb_dim);
        for (&ti, &di) in t.iter().zip(d) {
            emb.extend(sinusoidal(ti, self.spec.embed_dim));
            emb.extend(sinusoidal(di, self.spec.embed_dim));
        }
        let emb = g.constant(Tensor::new(vec![n, emb_dim], emb)?);

        let (w_in, b_in) = (next(), next());
        let mut h = g.conv2d(z, w_in, b_in)?;
        let (w_emb, b_emb) = (next(), next());
        let cond = g.dense(emb, w_emb, b_emb)?;
        h = g.add_channel_bias(h, cond)?;

        for _ in 0..self.spec.depth {
            let (w1, b1, w2, b2) = (next(), next(), next(), next());
            let a = g.silu(h);
            let r = g.conv2d(a, w1, b1)?;
            let a = g.silu(r);
            let r = g.conv2d(a, w2, b2)?;
            h = g.add(h, r)?;
        }
        let (w_out, b_out) = (next(), next());
        let a = g.silu(h);
        g.conv2d(a, w_out, b_out)
    }
}

/// Alternating sin/cos features at geometrically spaced frequencies in `[1, MAX_FREQUENCY]`.
pub fn sinusoidal(value: f64, dim: usize) -> Vec<f64> {
    let pairs = dim.div_ceil(2);
    (0..dim)
        .map(|i| {
            let k = i / 2;
            let freq = if pairs > 1 {
                MAX_FREQUENCY.powf(k as f64 / (pairs - 1) as f64)
            } else {
                1.0
            };
            if i % 2 == 0 {
                (freq * value).sin()
            } else {
                (freq * value).cos()
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> NetworkSpec {
        NetworkSpec {
            in_channels: 2,
            hidden_channels: 4,
            depth: 2,
            embed_dim: 3,
        }
    }

    fn random_input(n: usize) -> Tensor {
        let data = (0..n * 2 * 5 * 4).map(|i| ((i * 37 % 17) as f64) / 17.0).collect();
        Tensor::new(vec![n, 2, 5, 4], data).unwrap()
    }

    #[test]
    fn zero_head_gives_zero_field() {
        let net = Network::new(small(), 3).unwrap();
        let out = net.forward(&random_input(2), &[0.1, 0.9], &[0.0, 0.25]).unwrap();
        assert_eq!(out.shape(), &[2, 2, 5, 4]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_matches_per_item() {
        let net = Network::with_random_head(small(), 11).unwrap();
        let z = random_input(2);
        let (t, d) = ([0.2, 0.7], [0.0, 0.125]);
        let batched = net.forward(&z, &t, &d).unwrap();
        for i in 0..2 {
            let single = net.forward_single(&z.index(i), t[i], d[i]).unwrap();
            let expected = batched.index(i);
            for (a, b) in single.data().iter().zip(expected.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let net = Network::with_random_head(small(), 5).unwrap();
        let z = random_input(1);
        let a = net.forward(&z, &[0.3], &[0.0]).unwrap();
        let b = net.forward(&z, &[0.3], &[0.0]).unwrap();
        assert_eq!(a, b);
        assert_eq!(Network::with_random_head(small(), 5).unwrap(), net);
    }

    #[test]
    fn rejects_channel_mismatch() {
        let net = Network::new(NetworkSpec { in_channels: 3, ..small() }, 0).unwrap();
        assert!(matches!(
            net.forward(&random_input(1), &[0.0], &[0.0]),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(NetworkSpec { depth: 0, ..small() }.validate().is_err());
    }

    #[test]
    fn parameter_count_matches_spec() {
        let spec = small();
        let net = Network::new(spec, 0).unwrap();
        let (c, h, e) = (2, 4, 3);
        let expected = (h * c * 9 + h) + (h * 2 * e + h) + 2 * 2 * (h * h * 9 + h) + (c * h * 9 + c);
        assert_eq!(net.num_parameters(), expected);
    }
}
