//! Two-state absorbing transition process over the pixel grid.
//!
//! Pixels are FINE or COARSE. The forward process corrupts FINE pixels to
//! COARSE with per-step survival beta_t (COARSE is absorbing); the reverse
//! process deterministically flips the most confident COARSE pixels back to
//! FINE, a fixed budget per step, so a run always terminates all-FINE.

use crate::decoder::AlphaGrid;
use crate::error::{Error, Result};
use crate::numerics::SeededRng;

/// Per-step survival probabilities beta_t and cumulative survival gamma_t
/// for a linear schedule gamma_t = 1 - t/T.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionSchedule {
    steps: usize,
    beta: Vec<f64>,  // beta[t-1] = beta_t, t in 1..=T
    gamma: Vec<f64>, // gamma[t], t in 0..=T
}

impl TransitionSchedule {
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Survival probability of step t (1-based).
    pub fn beta(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.steps, "beta step {t} out of range");
        self.beta[t - 1]
    }

    /// Cumulative survival after t steps (gamma_0 = 1, gamma_T = 0).
    pub fn gamma(&self, t: usize) -> f64 {
        assert!(t <= self.steps, "gamma step {t} out of range");
        self.gamma[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn gammas(&self) -> &[f64] {
        &self.gamma
    }
}

/// Build the linear-survival schedule: gamma_t = (T - t)/T, hence
/// beta_t = (T - t)/(T - t + 1).
pub fn make_schedule(steps: usize) -> Result<TransitionSchedule> {
    if steps == 0 {
        return Err(Error::domain("schedule needs T >= 1".to_string()));
    }
    let t_f = steps as f64;
    let gamma: Vec<f64> = (0..=steps).map(|t| (steps - t) as f64 / t_f).collect();
    let beta: Vec<f64> = (1..=steps)
        .map(|t| (steps - t) as f64 / (steps - t + 1) as f64)
        .collect();
    Ok(TransitionSchedule {
        steps,
        beta,
        gamma,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelState {
    Fine,
    Coarse,
}

/// Per-pixel FINE/COARSE field at decoder resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateField {
    h: usize,
    w: usize,
    states: Vec<PixelState>,
}

impl StateField {
    pub fn all_fine(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            states: vec![PixelState::Fine; h * w],
        }
    }

    pub fn all_coarse(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            states: vec![PixelState::Coarse; h * w],
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn get(&self, i: usize, j: usize) -> PixelState {
        self.states[i * self.w + j]
    }

    pub fn states(&self) -> &[PixelState] {
        &self.states
    }

    pub fn count_fine(&self) -> usize {
        self.states
            .iter()
            .filter(|&&s| s == PixelState::Fine)
            .count()
    }

    pub fn count_coarse(&self) -> usize {
        self.states.len() - self.count_fine()
    }

    /// True if every FINE pixel of `self` is FINE in `other`.
    pub fn fine_subset_of(&self, other: &StateField) -> bool {
        self.states
            .iter()
            .zip(&other.states)
            .all(|(a, b)| *a != PixelState::Fine || *b == PixelState::Fine)
    }
}

/// One forward corruption step: each FINE pixel stays FINE with probability
/// beta_t, otherwise becomes COARSE; COARSE pixels never change.
pub fn forward_sample(
    states: &StateField,
    beta_t: f64,
    rng: &mut SeededRng,
) -> Result<StateField> {
    if !(0.0..=1.0).contains(&beta_t) {
        return Err(Error::domain(format!("beta_t {beta_t} outside [0,1]")));
    }
    let next = states
        .states
        .iter()
        .map(|&s| match s {
            PixelState::Coarse => PixelState::Coarse,
            PixelState::Fine => {
                if rng.next_f64() < beta_t {
                    PixelState::Fine
                } else {
                    PixelState::Coarse
                }
            }
        })
        .collect();
    Ok(StateField {
        h: states.h,
        w: states.w,
        states: next,
    })
}

/// One-shot sample of the forward marginal at step t starting from all-FINE:
/// each pixel is FINE independently with probability gamma_t.
pub fn forward_marginal_sample(
    t: usize,
    schedule: &TransitionSchedule,
    rng: &mut SeededRng,
    h: usize,
    w: usize,
) -> Result<StateField> {
    if t == 0 || t > schedule.steps() {
        return Err(Error::domain(format!(
            "marginal step {t} outside 1..={}",
            schedule.steps()
        )));
    }
    let gamma = schedule.gamma(t);
    let states = (0..h * w)
        .map(|_| {
            if rng.next_f64() < gamma {
                PixelState::Fine
            } else {
                PixelState::Coarse
            }
        })
        .collect();
    Ok(StateField { h, w, states })
}

/// Select per-pixel values: from `fine` where the state is FINE, from
/// `coarse` where it is COARSE.
pub fn compose_mask(
    states: &StateField,
    fine: &AlphaGrid,
    coarse: &AlphaGrid,
) -> Result<AlphaGrid> {
    let (h, w) = (states.height(), states.width());
    if fine.height() != h || fine.width() != w || coarse.height() != h || coarse.width() != w {
        return Err(Error::shape(format!(
            "compose_mask dims differ: states {h}x{w}, fine {}x{}, coarse {}x{}",
            fine.height(),
            fine.width(),
            coarse.height(),
            coarse.width()
        )));
    }
    let data = states
        .states
        .iter()
        .enumerate()
        .map(|(i, s)| match s {
            PixelState::Fine => fine.data()[i],
            PixelState::Coarse => coarse.data()[i],
        })
        .collect();
    AlphaGrid::new(h, w, data, fine.res())
}

/// Reverse-step transfer: flip the k COARSE pixels with the lowest predicted
/// error to FINE (lowest error = highest confidence). Ties break in
/// row-major coordinate order; k is clamped to the COARSE count; FINE pixels
/// never revert.
pub fn inference_transfer(
    states: &StateField,
    predicted_error: &AlphaGrid,
    k: usize,
) -> Result<StateField> {
    let (h, w) = (states.height(), states.width());
    if predicted_error.height() != h || predicted_error.width() != w {
        return Err(Error::shape("inference_transfer dims differ".to_string()));
    }
    let mut coarse: Vec<(f64, usize)> = states
        .states
        .iter()
        .enumerate()
        .filter(|(_, &s)| s == PixelState::Coarse)
        .map(|(i, _)| (predicted_error.data()[i], i))
        .collect();
    coarse.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let k = k.min(coarse.len());
    let mut next = states.clone();
    for &(_, idx) in coarse.iter().take(k) {
        next.states[idx] = PixelState::Fine;
    }
    Ok(next)
}

/// Flip budgets k_T..k_1 for a full reverse run over n pixels.
///
/// Budgets come from cumulative targets round(n * gamma_t) rather than
/// rounding each step's gamma difference, so they telescope to exactly n and
/// the final state is all-FINE for every (n, T).
pub fn reverse_flip_counts(n: usize, schedule: &TransitionSchedule) -> Vec<usize> {
    let target =
        |t: usize| -> usize { (n as f64 * schedule.gamma(t)).round() as usize };
    (1..=schedule.steps())
        .rev()
        .map(|t| target(t - 1) - target(t))
        .collect()
}
