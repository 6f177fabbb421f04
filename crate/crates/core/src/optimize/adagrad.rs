use serde::{Deserialize, Serialize};

/// Running sum of squared gradients, one entry per parameter.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdaGradState {
    pub h: Vec<f64>,
}

impl AdaGradState {
    pub fn new(n: usize) -> Self {
        AdaGradState { h: vec![0.0; n] }
    }
}

/// `h_i += g_i²`, then `p_i -= eta_i g_i / (sqrt(h_i) + eps)`. A coordinate
/// whose `h_i` is still zero is skipped.
pub fn adagrad_step(state: &mut AdaGradState, p: &mut [f64], eta: &[f64], g: &[f64], eps: f64) {
    for i in 0..p.len() {
        state.h[i] += g[i] * g[i];
        let d = state.h[i].sqrt() + eps;
        if d > 0.0 {
            p[i] -= eta[i] * g[i] / d;
        }
    }
}
