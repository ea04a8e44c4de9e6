//! Schedule-weighted masked cross-entropy (the NELBO objective).

use rand::Rng;
use rayon::prelude::*;

use crate::backbone::{backward, forward_cached, ParameterSet, Real};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::vocab::{JointVocabulary, TokenSequence};

/// Examples per gradient-accumulation chunk. Fixed so the summation order,
/// and therefore the result, does not depend on the thread count.
const CHUNK: usize = 8;

/// A clean sequence together with its sampled time and corruption.
#[derive(Debug, Clone)]
pub struct CorruptedExample {
    pub x0: TokenSequence,
    pub x_t: TokenSequence,
    pub t: f64,
}

impl CorruptedExample {
    /// Draws `t ~ U(t_min, 1)` and `x_t ~ q(x_t | x_0)`.
    pub fn sample<R: Rng + ?Sized>(
        x0: &TokenSequence,
        schedule: &NoiseSchedule,
        vocab: &JointVocabulary,
        rng: &mut R,
    ) -> Result<Self> {
        let t_min = schedule.t_min();
        let t = t_min + (1.0 - t_min) * rng.random::<f64>();
        let x_t = schedule.corrupt(x0, t, vocab, rng)?;
        Ok(Self {
            x0: x0.clone(),
            x_t,
            t,
        })
    }
}

/// `weight / len * sum_{p masked} CE(softmax(logits[p][..k_total]), x0[p])`.
///
/// The mask column is excluded from the softmax support and receives zero
/// gradient. Returns the loss and `d loss / d logits`.
pub fn masked_cross_entropy<T: Real>(
    logits: &[T],
    width: usize,
    x0: &[u32],
    x_t: &[u32],
    mask_id: u32,
    weight: f64,
) -> (f64, Vec<T>) {
    let n = x0.len();
    let k = mask_id as usize;
    let scale = weight / n as f64;
    let mut dlogits = vec![T::zero(); logits.len()];
    let mut total = 0.0;
    for p in 0..n {
        if x_t[p] != mask_id {
            continue;
        }
        let row = &logits[p * width..p * width + k];
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = row.iter().map(|&v| (v - m).exp()).sum();
        let lse = m + z.ln();
        let target = x0[p] as usize;
        total += (lse - row[target]).as_f64();
        let grad = &mut dlogits[p * width..p * width + k];
        let s = T::lit(scale);
        for (j, (g, &v)) in grad.iter_mut().zip(row).enumerate() {
            let prob = (v - lse).exp();
            *g = s * (prob - if j == target { T::one() } else { T::zero() });
        }
    }
    (scale * total, dlogits)
}

/// Loss and parameter gradient of one corrupted example.
pub fn example_loss_and_grad<T: Real>(
    params: &ParameterSet<T>,
    example: &CorruptedExample,
    schedule: &NoiseSchedule,
    vocab: &JointVocabulary,
    grad: &mut [T],
) -> Result<f64> {
    if example.x_t.count_masked(vocab) == 0 {
        return Ok(0.0);
    }
    let weight = schedule.loss_weight(example.t)?;
    let (out, cache) = forward_cached(params, &example.x_t, example.t)?;
    let (loss, dlogits) = masked_cross_entropy(
        out.as_slice(),
        out.width(),
        example.x0.ids(),
        example.x_t.ids(),
        vocab.mask_id(),
        weight,
    );
    backward(params, &cache, &dlogits, grad);
    Ok(loss)
}

/// Loss of one corrupted example without gradients.
pub fn example_loss<T: Real>(
    params: &ParameterSet<T>,
    example: &CorruptedExample,
    schedule: &NoiseSchedule,
    vocab: &JointVocabulary,
) -> Result<f64> {
    if example.x_t.count_masked(vocab) == 0 {
        return Ok(0.0);
    }
    let weight = schedule.loss_weight(example.t)?;
    let (out, _) = forward_cached(params, &example.x_t, example.t)?;
    Ok(masked_cross_entropy(
        out.as_slice(),
        out.width(),
        example.x0.ids(),
        example.x_t.ids(),
        vocab.mask_id(),
        weight,
    )
    .0)
}

#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    /// Mean loss over the batch.
    pub loss: f64,
    /// Gradient of the mean loss.
    pub grad: Vec<T>,
    pub t_values: Vec<f64>,
    pub mask_counts: Vec<usize>,
}

/// Mean loss and gradient over already-corrupted examples.
pub fn batch_loss_and_grad<T: Real>(
    params: &ParameterSet<T>,
    examples: &[CorruptedExample],
    schedule: &NoiseSchedule,
    vocab: &JointVocabulary,
) -> Result<(f64, Vec<T>)> {
    if examples.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let partials: Vec<Result<(f64, Vec<T>)>> = examples
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grad = params.zeros_like();
            let mut loss = 0.0;
            for ex in chunk {
                loss += example_loss_and_grad(params, ex, schedule, vocab, &mut grad)?;
            }
            Ok((loss, grad))
        })
        .collect();
    let mut grad = params.zeros_like();
    let mut loss = 0.0;
    for part in partials {
        let (l, g) = part?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    let inv = T::lit(1.0 / examples.len() as f64);
    for g in grad.iter_mut() {
        *g *= inv;
    }
    Ok((loss / examples.len() as f64, grad))
}

/// Mean loss over corrupted examples, summed pairwise.
pub fn batch_loss<T: Real>(
    params: &ParameterSet<T>,
    examples: &[CorruptedExample],
    schedule: &NoiseSchedule,
    vocab: &JointVocabulary,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let losses = examples
        .par_iter()
        .map(|ex| example_loss(params, ex, schedule, vocab))
        .collect::<Result<Vec<f64>>>()?;
    Ok(pairwise_sum(&losses) / examples.len() as f64)
}

pub(crate) fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 4 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Samples `t` and the corruption for every example, then returns the mean
/// loss and its gradient.
pub fn nelbo_loss<T: Real, R: Rng + ?Sized>(
    params: &ParameterSet<T>,
    batch: &[TokenSequence],
    schedule: &NoiseSchedule,
    vocab: &JointVocabulary,
    rng: &mut R,
) -> Result<LossOutput<T>> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let examples = batch
        .iter()
        .map(|x0| CorruptedExample::sample(x0, schedule, vocab, rng))
        .collect::<Result<Vec<_>>>()?;
    let (loss, grad) = batch_loss_and_grad(params, &examples, schedule, vocab)?;
    Ok(LossOutput {
        loss,
        grad,
        t_values: examples.iter().map(|e| e.t).collect(),
        mask_counts: examples.iter().map(|e| e.x_t.count_masked(vocab)).collect(),
    })
}
