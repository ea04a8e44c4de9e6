use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{adamw_update, clip_grad_norm, lr_at, nelbo_loss, AdamState, TrainConfig};
use crate::backbone::{init_params, BackboneConfig, ParameterSet};
use crate::data::DataSource;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::vocab::{JointVocabulary, TokenSequence};

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ParameterSet<f32>,
    pub adam: AdamState<f32>,
    /// Number of completed updates.
    pub step: u64,
    /// Drives batch sampling, `t` draws and corruption.
    pub rng: ChaCha8Rng,
}

impl TrainState {
    /// Fresh state: parameters initialized from `seed`, zero moments.
    pub fn new(config: &BackboneConfig, seed: u64) -> Result<Self> {
        let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
        let params = init_params(config, &mut init_rng)?;
        let adam = AdamState::zeros(params.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Ok(Self {
            params,
            adam,
            step: 0,
            rng,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// One optimizer update on `batch`: loss and gradient with fresh `t`
/// draws, global-norm clipping, then AdamW at `lr_at(step)`.
pub fn train_step(
    state: &mut TrainState,
    batch: &[TokenSequence],
    schedule: &NoiseSchedule,
    vocab: &JointVocabulary,
    config: &TrainConfig,
) -> Result<StepReport> {
    let lr = lr_at(config, state.step);
    let mut out = nelbo_loss(&state.params, batch, schedule, vocab, &mut state.rng)?;
    if !out.loss.is_finite() || out.grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteLoss {
            step: state.step,
            t_values: out.t_values,
            mask_counts: out.mask_counts,
        });
    }
    let grad_norm = clip_grad_norm(&mut out.grad, config.grad_clip);
    adamw_update(
        &mut state.params,
        &out.grad,
        &mut state.adam,
        lr,
        config,
        state.step + 1,
    );
    let report = StepReport {
        step: state.step,
        loss: out.loss,
        lr,
        grad_norm,
    };
    state.step += 1;
    Ok(report)
}

/// Samples a batch from `source` using the state's RNG and takes one step.
pub fn train_step_from_source(
    state: &mut TrainState,
    source: &DataSource,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<StepReport> {
    let batch = source.sample_batch(config.batch_size, &mut state.rng)?;
    train_step(state, &batch, schedule, source.vocab(), config)
}

/// Takes steps until `state.step == until`, calling `on_step` after each.
pub fn train_until<F>(
    state: &mut TrainState,
    source: &DataSource,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    until: u64,
    mut on_step: F,
) -> Result<()>
where
    F: FnMut(&StepReport, &TrainState) -> Result<()>,
{
    while state.step < until {
        let report = train_step_from_source(state, source, schedule, config)?;
        on_step(&report, state)?;
    }
    Ok(())
}
