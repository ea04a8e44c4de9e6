//! Forward absorbing-state diffusion: retention schedule, transition
//! matrices, corruption sampling and the NELBO loss weight.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{JointVocabulary, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `alpha(t) = 1 - t`.
    #[default]
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub t_min: f64,
    pub n_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            t_min: 1e-3,
            n_steps: 1000,
        }
    }
}

/// Retention schedule together with its discrete grid
/// `alpha_bar[j] = alpha(j / n_steps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    t_min: f64,
    alpha_bar: Vec<f64>,
}

fn check_unit(name: &'static str, value: f64) -> Result<()> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(Error::OutOfRange {
            name,
            value,
            lo: 0.0,
            hi: 1.0,
        })
    }
}

impl NoiseSchedule {
    pub fn new(config: &ScheduleConfig) -> Result<Self> {
        if config.n_steps == 0 {
            return Err(Error::Config("schedule n_steps must be >= 1".into()));
        }
        if !(config.t_min > 0.0 && config.t_min < 1.0) {
            return Err(Error::Config(format!(
                "schedule t_min must lie in (0, 1), got {}",
                config.t_min
            )));
        }
        let t_grid = config.n_steps as f64;
        let alpha_bar = (0..=config.n_steps)
            .map(|j| alpha(config.kind, j as f64 / t_grid))
            .collect();
        Ok(Self {
            kind: config.kind,
            t_min: config.t_min,
            alpha_bar,
        })
    }

    pub fn linear(t_min: f64, n_steps: usize) -> Result<Self> {
        Self::new(&ScheduleConfig {
            kind: ScheduleKind::Linear,
            t_min,
            n_steps,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn t_min(&self) -> f64 {
        self.t_min
    }

    pub fn n_steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `alpha(t)`: probability that a token is still unmasked at time `t`.
    pub fn retention_at(&self, t: f64) -> Result<f64> {
        check_unit("t", t)?;
        Ok(alpha(self.kind, t))
    }

    /// `d alpha / dt`.
    pub fn retention_derivative(&self, t: f64) -> Result<f64> {
        check_unit("t", t)?;
        Ok(match self.kind {
            ScheduleKind::Linear => -1.0,
        })
    }

    /// NELBO weight `-alpha'(t) / (1 - alpha(t))` with `t` clamped below by
    /// `t_min`. Equals `1 / max(t, t_min)` for the linear schedule.
    pub fn loss_weight(&self, t: f64) -> Result<f64> {
        check_unit("t", t)?;
        let t = t.max(self.t_min);
        let d = self.retention_derivative(t)?;
        Ok(-d / (1.0 - alpha(self.kind, t)))
    }

    pub fn expected_mask_fraction(&self, t: f64) -> Result<f64> {
        Ok(1.0 - self.retention_at(t)?)
    }

    /// Per-step retention `alpha_bar[j] / alpha_bar[j-1]` for `1 <= j <= n_steps`.
    pub fn step_retention(&self, j: usize) -> Result<f64> {
        self.check_step(j)?;
        let prev = self.alpha_bar[j - 1];
        Ok(if prev > 0.0 {
            (self.alpha_bar[j] / prev).clamp(0.0, 1.0)
        } else {
            0.0
        })
    }

    /// Closed form of `Q_1 Q_2 ... Q_j`.
    pub fn cumulative_matrix(&self, j: usize, vocab: &JointVocabulary) -> Result<TransitionMatrix> {
        self.check_step(j)?;
        transition_matrix(self.alpha_bar[j], vocab)
    }

    /// Probability that a masked position is still masked at time `s` given
    /// it is masked at time `t > s`: `(1 - alpha(s)) / (1 - alpha(t))`.
    pub fn stay_masked_probability(&self, s: f64, t: f64) -> Result<f64> {
        let num = 1.0 - self.retention_at(s)?;
        let den = 1.0 - self.retention_at(t)?;
        if den <= 0.0 {
            return Ok(0.0);
        }
        Ok((num / den).clamp(0.0, 1.0))
    }

    /// Samples `x_t ~ q(x_t | x_0)`: each position is independently replaced
    /// by the mask token with probability `1 - alpha(t)`.
    pub fn corrupt<R: Rng + ?Sized>(
        &self,
        x0: &TokenSequence,
        t: f64,
        vocab: &JointVocabulary,
        rng: &mut R,
    ) -> Result<TokenSequence> {
        if let Some(p) = x0.first_mask(vocab) {
            return Err(Error::MaskPresent(p));
        }
        let retention = self.retention_at(t)?;
        corrupt_step(x0, retention, vocab, rng)
    }

    fn check_step(&self, j: usize) -> Result<()> {
        if j == 0 || j > self.n_steps() {
            return Err(Error::OutOfRange {
                name: "step",
                value: j as f64,
                lo: 1.0,
                hi: self.n_steps() as f64,
            });
        }
        Ok(())
    }
}

fn alpha(kind: ScheduleKind, t: f64) -> f64 {
    match kind {
        ScheduleKind::Linear => 1.0 - t,
    }
}

/// Applies one absorbing transition with the given retention. Masked
/// positions stay masked; others are masked with probability `1 - retention`.
pub fn corrupt_step<R: Rng + ?Sized>(
    x: &TokenSequence,
    retention: f64,
    vocab: &JointVocabulary,
    rng: &mut R,
) -> Result<TokenSequence> {
    check_unit("retention", retention)?;
    let mask = vocab.mask_id();
    let p_mask = 1.0 - retention;
    let ids = x
        .ids()
        .iter()
        .map(|&id| {
            if id != mask && rng.random::<f64>() < p_mask {
                mask
            } else {
                id
            }
        })
        .collect();
    Ok(TokenSequence::from_parts_unchecked(ids, x.layout()))
}

/// Dense row-stochastic matrix over the extended vocabulary (`k_total + 1`
/// states). Rows are source states, columns destinations.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    side: usize,
    data: Vec<f64>,
}

impl TransitionMatrix {
    pub fn from_rows(side: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), side * side);
        Self { side, data }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.side + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.side..(row + 1) * self.side]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// `Q = alpha I + (1 - alpha) 1 e_m^T`.
pub fn transition_matrix(alpha: f64, vocab: &JointVocabulary) -> Result<TransitionMatrix> {
    check_unit("alpha", alpha)?;
    let side = vocab.vocab_out();
    let m = vocab.mask_id() as usize;
    let mut data = vec![0.0; side * side];
    for i in 0..side {
        if i == m {
            data[i * side + m] = 1.0;
        } else {
            data[i * side + i] = alpha;
            data[i * side + m] = 1.0 - alpha;
        }
    }
    Ok(TransitionMatrix { side, data })
}
