//! Generation: MaskGIT confidence decoding and exact ancestral sampling of
//! the reverse absorbing chain, for joint, conditional and prompted modes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{forward, ParameterSet, Real};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::vocab::{JointVocabulary, Modality, SequenceLayout, TokenSequence};

/// Anything that maps a partially masked sequence to per-position logits
/// over the extended vocabulary (`[len x width]`, row-major).
pub trait Denoiser: Sync {
    fn width(&self) -> usize;
    fn logits(&self, x_t: &TokenSequence, t: f64) -> Result<Vec<f64>>;
}

impl<T: Real> Denoiser for ParameterSet<T> {
    fn width(&self) -> usize {
        self.config().vocab_out
    }

    fn logits(&self, x_t: &TokenSequence, t: f64) -> Result<Vec<f64>> {
        Ok(forward(self, x_t, t)?
            .as_slice()
            .iter()
            .map(|v| v.as_f64())
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerAlgorithm {
    #[default]
    Maskgit,
    Ancestral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub algorithm: SamplerAlgorithm,
    /// MaskGIT decoding rounds. Ancestral sampling uses the schedule grid.
    pub steps: usize,
    pub temperature: f64,
    /// Scale of the Gumbel noise added to MaskGIT confidences.
    pub confidence_noise: f64,
    /// Restrict each position's support to its modality's id range.
    pub restrict_modality: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            algorithm: SamplerAlgorithm::Maskgit,
            steps: 16,
            temperature: 1.0,
            confidence_noise: 10.0,
            restrict_modality: true,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler steps must be >= 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("sampler temperature must be positive".into()));
        }
        if !(self.confidence_noise >= 0.0) {
            return Err(Error::Config("confidence_noise must be non-negative".into()));
        }
        Ok(())
    }
}

/// What to generate and which tokens are given.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GenerationMode {
    JointUnconditional,
    /// Full report given (report-local ids).
    ReportToImage(Vec<u32>),
    /// Full image given (codebook ids).
    ImageToReport(Vec<u32>),
    /// Report prefix given (report-local ids); everything else generated.
    PromptedJoint(Vec<u32>),
}

impl GenerationMode {
    pub fn name(&self) -> &'static str {
        match self {
            Self::JointUnconditional => "joint",
            Self::ReportToImage(_) => "t2i",
            Self::ImageToReport(_) => "i2t",
            Self::PromptedJoint(_) => "prompted",
        }
    }
}

fn check_condition(ids: &[u32], len: usize, hi: u32, exact_len: bool, offset: usize) -> Result<()> {
    if (exact_len && ids.len() != len) || ids.len() > len {
        return Err(Error::LengthMismatch {
            expected: len,
            got: ids.len(),
        });
    }
    if let Some((p, &id)) = ids.iter().enumerate().find(|(_, &id)| id >= hi) {
        return Err(Error::IdOutOfRange {
            position: offset + p,
            id,
            lo: 0,
            hi,
        });
    }
    Ok(())
}

/// Mask-initialized canvas with the mode's condition tokens written in.
pub fn init_canvas(
    mode: &GenerationMode,
    vocab: &JointVocabulary,
    layout: SequenceLayout,
) -> Result<TokenSequence> {
    let mut canvas = TokenSequence::masked(vocab, layout);
    let lr = layout.len_report();
    let ids = canvas.ids_mut();
    match mode {
        GenerationMode::JointUnconditional => {}
        GenerationMode::ReportToImage(report) => {
            check_condition(report, lr, vocab.k_text(), true, 0)?;
            ids[..lr].copy_from_slice(report);
        }
        GenerationMode::PromptedJoint(prefix) => {
            check_condition(prefix, lr, vocab.k_text(), false, 0)?;
            ids[..prefix.len()].copy_from_slice(prefix);
        }
        GenerationMode::ImageToReport(image) => {
            check_condition(image, layout.len_image(), vocab.k_img(), true, lr)?;
            for (dst, &i) in ids[lr..].iter_mut().zip(image) {
                *dst = vocab.image_to_global(i);
            }
        }
    }
    Ok(canvas)
}

/// Tokens still masked after MaskGIT round `i` of `steps`:
/// `floor(m0 * cos(pi * i / (2 * steps)))`, exactly 0 at the last round.
pub fn remaining_masked(i: usize, steps: usize, m0: usize) -> usize {
    if i >= steps {
        return 0;
    }
    let frac = (std::f64::consts::PI * i as f64 / (2.0 * steps as f64)).cos();
    ((m0 as f64) * frac).floor() as usize
}

fn support(vocab: &JointVocabulary, layout: SequenceLayout, p: usize, restrict: bool) -> (usize, usize) {
    if restrict {
        let (lo, hi) = vocab.range(layout.modality_of(p));
        (lo as usize, hi as usize)
    } else {
        (0, vocab.k_total() as usize)
    }
}

/// Draws a token from `softmax(row[lo..hi] / temperature)`; returns the
/// token and its probability.
fn draw<R: Rng + ?Sized>(row: &[f64], lo: usize, hi: usize, temperature: f64, rng: &mut R) -> (u32, f64) {
    let scaled: Vec<f64> = row[lo..hi].iter().map(|&v| v / temperature).collect();
    let m = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scaled.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = w.iter().sum();
    let u = rng.random::<f64>() * z;
    let mut acc = 0.0;
    let mut pick = w.len() - 1;
    for (k, &x) in w.iter().enumerate() {
        acc += x;
        if u < acc {
            pick = k;
            break;
        }
    }
    // never return a zero-probability token through round-off
    while w[pick] == 0.0 && pick > 0 {
        pick -= 1;
    }
    ((lo + pick) as u32, w[pick] / z)
}

fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    -(-u.ln()).ln()
}

/// MaskGIT decoding. Each round samples every masked position, keeps the
/// most confident ones so that `remaining_masked` positions stay masked,
/// and re-masks the rest. Given and already committed tokens never change.
pub fn maskgit_decode<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    canvas: &TokenSequence,
    config: &SamplerConfig,
    schedule: &NoiseSchedule,
    vocab: &JointVocabulary,
    rng: &mut R,
) -> Result<TokenSequence> {
    config.validate()?;
    let mut x = canvas.clone();
    let layout = x.layout();
    let n = x.len();
    let mask = vocab.mask_id();
    let m0 = x.count_masked(vocab);
    let width = denoiser.width();
    let mut masked_before = m0;
    for i in 1..=config.steps {
        if masked_before == 0 {
            break;
        }
        let target = remaining_masked(i, config.steps, m0);
        let n_commit = masked_before.saturating_sub(target);
        // Rounds that commit nothing would discard every draw.
        if n_commit == 0 {
            continue;
        }
        let t = (masked_before as f64 / n as f64).clamp(schedule.t_min(), 1.0);
        let logits = denoiser.logits(&x, t)?;
        let mut proposals: Vec<(usize, u32, f64)> = Vec::with_capacity(masked_before);
        for p in (0..n).filter(|&p| x.ids()[p] == mask) {
            let (lo, hi) = support(vocab, layout, p, config.restrict_modality);
            let (tok, prob) = draw(
                &logits[p * width..(p + 1) * width],
                lo,
                hi,
                config.temperature,
                rng,
            );
            let conf = if config.confidence_noise > 0.0 {
                prob + config.confidence_noise * gumbel(rng)
            } else {
                prob
            };
            proposals.push((p, tok, conf));
        }
        proposals.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
        let ids = x.ids_mut();
        for &(p, tok, _) in proposals.iter().take(n_commit) {
            ids[p] = tok;
        }
        masked_before -= n_commit.min(masked_before);
    }
    Ok(x)
}

/// Ancestral sampling of the reverse chain on the schedule's grid. From
/// `t = j/T` to `s = (j-1)/T` each masked position stays masked with
/// probability `(1 - alpha(s)) / (1 - alpha(t))`, otherwise it commits a
/// token drawn from the denoiser's `x_0` prediction.
pub fn ancestral_decode<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    canvas: &TokenSequence,
    config: &SamplerConfig,
    schedule: &NoiseSchedule,
    vocab: &JointVocabulary,
    rng: &mut R,
) -> Result<TokenSequence> {
    config.validate()?;
    let mut x = canvas.clone();
    let layout = x.layout();
    let mask = vocab.mask_id();
    let width = denoiser.width();
    let grid = schedule.n_steps();
    for j in (1..=grid).rev() {
        let masked: Vec<usize> = (0..x.len()).filter(|&p| x.ids()[p] == mask).collect();
        if masked.is_empty() {
            break;
        }
        let t = j as f64 / grid as f64;
        let s = (j - 1) as f64 / grid as f64;
        let stay = schedule.stay_masked_probability(s, t)?;
        let commit: Vec<usize> = masked
            .into_iter()
            .filter(|_| rng.random::<f64>() >= stay)
            .collect();
        if commit.is_empty() {
            continue;
        }
        let logits = denoiser.logits(&x, t)?;
        let ids = x.ids_mut();
        for p in commit {
            let (lo, hi) = support(vocab, layout, p, config.restrict_modality);
            ids[p] = draw(
                &logits[p * width..(p + 1) * width],
                lo,
                hi,
                config.temperature,
                rng,
            )
            .0;
        }
    }
    Ok(x)
}

/// Decodes a canvas with the configured algorithm.
pub fn decode<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    canvas: &TokenSequence,
    config: &SamplerConfig,
    schedule: &NoiseSchedule,
    vocab: &JointVocabulary,
    rng: &mut R,
) -> Result<TokenSequence> {
    match config.algorithm {
        SamplerAlgorithm::Maskgit => maskgit_decode(denoiser, canvas, config, schedule, vocab, rng),
        SamplerAlgorithm::Ancestral => {
            ancestral_decode(denoiser, canvas, config, schedule, vocab, rng)
        }
    }
}

/// RNG for the `index`-th generation of a run seeded with `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Decodes one canvas per mode, in parallel, each with its own RNG stream.
/// The output depends only on the inputs and `seed`.
pub fn generate<D: Denoiser + ?Sized>(
    denoiser: &D,
    modes: &[GenerationMode],
    config: &SamplerConfig,
    schedule: &NoiseSchedule,
    vocab: &JointVocabulary,
    layout: SequenceLayout,
    seed: u64,
) -> Result<Vec<TokenSequence>> {
    modes
        .par_iter()
        .enumerate()
        .map(|(i, mode)| {
            let canvas = init_canvas(mode, vocab, layout)?;
            let mut rng = sample_rng(seed, i as u64);
            decode(denoiser, &canvas, config, schedule, vocab, &mut rng)
        })
        .collect()
}

/// Positions fixed by the mode's condition.
pub fn conditioned_positions(mode: &GenerationMode, layout: SequenceLayout) -> Vec<bool> {
    match mode {
        GenerationMode::JointUnconditional => vec![false; layout.len_total()],
        GenerationMode::ReportToImage(_) => layout.modality_positions(Modality::Report),
        GenerationMode::ImageToReport(_) => layout.modality_positions(Modality::Image),
        GenerationMode::PromptedJoint(prefix) => (0..layout.len_total())
            .map(|p| p < prefix.len())
            .collect(),
    }
}
