//! Classification losses with analytic gradients wrt logits.

use serde::{Deserialize, Serialize};

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Focal loss parameters. `alpha_fake` weights the fake (positive) class and
/// `alpha_real` the real class; `gamma = 0` recovers alpha-weighted binary
/// cross-entropy.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha_fake: f64,
    pub alpha_real: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams {
            gamma: 2.0,
            alpha_fake: 0.75,
            alpha_real: 0.25,
        }
    }
}

const P_CLAMP: f64 = 1e-12;

/// Focal loss of a single logit and its gradient wrt the logit.
///
/// With s = sigmoid(logit), the probability assigned to the true class is
/// p_t = s for a fake lane and 1 - s for a real one, and the loss is
/// -alpha_t * (1 - p_t)^gamma * ln(max(p_t, 1e-12)).
pub fn focal_loss(logit: f64, is_fake: bool, params: &FocalParams) -> (f64, f64) {
    let s = sigmoid(logit);
    let (p_t, alpha_t, dp_dz) = if is_fake {
        (s, params.alpha_fake, s * (1.0 - s))
    } else {
        (1.0 - s, params.alpha_real, -s * (1.0 - s))
    };
    let p_eff = p_t.max(P_CLAMP);
    let log_p = p_eff.ln();
    let q = 1.0 - p_t;
    let loss = -alpha_t * q.powf(params.gamma) * log_p;

    let term_focus = if params.gamma == 0.0 {
        0.0
    } else {
        params.gamma * q.powf(params.gamma - 1.0) * log_p
    };
    let term_log = if p_t > P_CLAMP {
        q.powf(params.gamma) / p_eff
    } else {
        0.0
    };
    let dl_dp = alpha_t * (term_focus - term_log);
    (loss, dl_dp * dp_dz)
}

/// Mean binary cross-entropy over logits with targets in [0, 1].
/// Returns the mean loss and the per-logit gradient of that mean.
pub fn bce_with_logits_mean(logits: &[f64], targets: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(logits.len(), targets.len());
    let n = logits.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (&z, &t) in logits.iter().zip(targets) {
        total += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        grads.push((sigmoid(z) - t) / n);
    }
    (total / n, grads)
}
