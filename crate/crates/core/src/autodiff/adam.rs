use super::{Network, Tensor};
use crate::error::{Error, Result};

pub const DEFAULT_LR: f64 = 1e-4;

/// Bias-corrected Adam moments for every parameter of a [`Network`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(net: &Network, lr: f64) -> Self {
        let zeros: Vec<Tensor> = net
            .parameters()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update of `net` in place.
pub fn adam_step(net: &mut Network, grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    if grads.len() != state.m.len() {
        return Err(Error::shape(
            format!("{} gradient tensors", state.m.len()),
            grads.len(),
        ));
    }
    for (g, m) in grads.iter().zip(&state.m) {
        g.expect_shape(m.shape())?;
        if !g.all_finite() {
            return Err(Error::NonFinite("gradient"));
        }
    }
    state.step += 1;
    let step = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bias1 = 1.0 - b1.powi(step);
    let bias2 = 1.0 - b2.powi(step);

    for (((p, g), m), v) in net
        .parameters_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = b1 * *mv + (1.0 - b1) * gv;
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
            let m_hat = *mv / bias1;
            let v_hat = *vv / bias2;
            *pv -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::NetworkSpec;

    fn tiny() -> Network {
        Network::with_random_head(
            NetworkSpec {
                in_channels: 1,
                hidden_channels: 2,
                depth: 1,
                embed_dim: 2,
            },
            1,
        )
        .unwrap()
    }

    fn grads_like(net: &Network, value: f64) -> Vec<Tensor> {
        net.parameters()
            .iter()
            .map(|(_, t)| Tensor::full(t.shape(), value))
            .collect()
    }

    #[test]
    fn zero_gradient_is_a_null_update() {
        let mut net = tiny();
        let before = net.clone();
        let mut state = AdamState::new(&net, DEFAULT_LR);
        adam_step(&mut net, &grads_like(&before, 0.0), &mut state).unwrap();
        assert_eq!(net, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut net = tiny();
        for p in net.parameters_mut() {
            p.data_mut().fill(0.0);
        }
        let mut state = AdamState::new(&net, 1e-4);
        adam_step(&mut net, &grads_like(&tiny(), 1.0), &mut state).unwrap();
        // m_hat = 1, v_hat = 1, update = lr / (1 + eps)
        let expected = -1e-4 / (1.0 + 1e-8);
        for (_, p) in net.parameters() {
            for &v in p.data() {
                assert!((v - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn identical_calls_are_deterministic() {
        let grads = grads_like(&tiny(), 0.3);
        let run = || {
            let mut net = tiny();
            let mut state = AdamState::new(&net, 1e-3);
            for _ in 0..3 {
                adam_step(&mut net, &grads, &mut state).unwrap();
            }
            (net, state)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut net = tiny();
        let mut state = AdamState::new(&net, 1e-3);
        let grads = grads_like(&tiny(), f64::NAN);
        assert!(matches!(
            adam_step(&mut net, &grads, &mut state),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(state.step, 0);
    }
}
