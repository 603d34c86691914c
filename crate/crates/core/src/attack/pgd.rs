//! Sign-step projected gradient descent over flat coordinate vectors.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{AttackConfig, AttackError};

/// The set the iterates are projected onto. Both variants are intersected
/// with the unit box, matching pixel intensities in [0, 1].
#[derive(Debug, Clone)]
pub enum Feasible {
    /// L-infinity ball of radius `eps` around `center`.
    Ball { center: Vec<f64>, eps: f64 },
    /// Coordinates with `mask` set range freely over [0, 1]; the rest are
    /// pinned to `center`.
    MaskedBox { center: Vec<f64>, mask: Vec<bool> },
}

impl Feasible {
    pub fn dim(&self) -> usize {
        match self {
            Feasible::Ball { center, .. } => center.len(),
            Feasible::MaskedBox { center, .. } => center.len(),
        }
    }

    pub fn project(&self, x: &mut [f64]) {
        match self {
            Feasible::Ball { center, eps } => {
                for (v, c) in x.iter_mut().zip(center) {
                    *v = v.clamp((c - eps).max(0.0), (c + eps).min(1.0));
                }
            }
            Feasible::MaskedBox { center, mask } => {
                for ((v, c), &m) in x.iter_mut().zip(center).zip(mask) {
                    *v = if m { v.clamp(0.0, 1.0) } else { *c };
                }
            }
        }
    }

    /// Uniform sample from the feasible set.
    pub fn random_start(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            Feasible::Ball { center, eps } => center
                .iter()
                .map(|c| {
                    let lo = (c - eps).max(0.0);
                    let hi = (c + eps).min(1.0);
                    if hi > lo {
                        rng.gen_range(lo..=hi)
                    } else {
                        lo
                    }
                })
                .collect(),
            Feasible::MaskedBox { center, mask } => center
                .iter()
                .zip(mask)
                .map(|(c, &m)| if m { rng.gen_range(0.0..=1.0) } else { *c })
                .collect(),
        }
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        match self {
            Feasible::Ball { center, eps } => x
                .iter()
                .zip(center)
                .all(|(v, c)| (v - c).abs() <= eps + tol && (-tol..=1.0 + tol).contains(v)),
            Feasible::MaskedBox { center, mask } => {
                x.iter().zip(center).zip(mask).all(|((v, c), &m)| {
                    if m {
                        (-tol..=1.0 + tol).contains(v)
                    } else {
                        (v - c).abs() <= tol
                    }
                })
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct PgdResult {
    /// Feasible iterate with the lowest observed loss.
    pub x: Vec<f64>,
    pub loss: f64,
    /// Number of objective evaluations performed.
    pub iterations: usize,
    /// True when the best-loss plateau test stopped the loop before
    /// `max_iters`.
    pub converged: bool,
}

/// True when the mean relative step of the tail of `history` is below tol.
pub(crate) fn plateaued(history: &[f64], window: usize, tol: f64) -> bool {
    if history.len() < window + 1 {
        return false;
    }
    let tail = &history[history.len() - window - 1..];
    let mut acc = 0.0;
    for pair in tail.windows(2) {
        let denom = pair[0].abs().max(1e-12);
        acc += (pair[1] - pair[0]).abs() / denom;
    }
    acc / (window as f64) < tol
}

/// Minimizes `objective` over `feasible` by sign-step descent.
///
/// `objective(x, grad)` must fill `grad` and return the loss. A `start` of
/// `None` draws a uniform random point from the feasible set; `Some` is
/// projected and used as is (zero gradients leave it in place, so a warm
/// start is reproducible).
pub fn pgd<F>(
    mut objective: F,
    feasible: &Feasible,
    cfg: &AttackConfig,
    rng: &mut ChaCha8Rng,
    start: Option<&[f64]>,
) -> Result<PgdResult, AttackError>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    cfg.validate()?;
    let mut x = match start {
        Some(s) => {
            let mut v = s.to_vec();
            feasible.project(&mut v);
            v
        }
        None => feasible.random_start(rng),
    };
    let mut grad = vec![0.0; x.len()];
    let mut best_x = x.clone();
    let mut best_loss = f64::INFINITY;
    let mut history = Vec::with_capacity(cfg.max_iters);
    let mut iterations = 0;
    let mut converged = false;

    for iter in 0..cfg.max_iters {
        let loss = objective(&x, &mut grad);
        iterations = iter + 1;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(AttackError::NonFiniteGradient(iter));
        }
        if loss < best_loss {
            best_loss = loss;
            best_x.copy_from_slice(&x);
        }
        history.push(best_loss);
        if plateaued(&history, cfg.conv_window, cfg.conv_tol) {
            converged = true;
            break;
        }
        for (v, g) in x.iter_mut().zip(&grad) {
            if *g > 0.0 {
                *v -= cfg.step;
            } else if *g < 0.0 {
                *v += cfg.step;
            }
        }
        feasible.project(&mut x);
    }

    Ok(PgdResult {
        x: best_x,
        loss: best_loss,
        iterations,
        converged,
    })
}
