//! Evaluation metrics: exact total-variation distance, pair consistency,
//! masked-token recovery, BLEU-n, ROUGE-L and a Monte-Carlo NELBO, plus the
//! suite runner used by the CLI.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{parse_report, DataSource, GridWorldConfig, PairedSample};
use crate::error::{Error, Result};
use crate::sampler::{generate, Denoiser, GenerationMode};
use crate::schedule::NoiseSchedule;
use crate::training::{masked_cross_entropy, CorruptedExample};
use crate::vocab::{JointVocabulary, TokenSequence};

/// ROUGE-L recall weight.
pub const ROUGE_BETA: f64 = 1.2;

/// `1/2 * sum |p_hat - p|` over the union of both supports, where `p_hat`
/// is the normalized empirical count.
pub fn tv_distance<K: Hash + Eq>(
    empirical: &HashMap<K, usize>,
    exact: &HashMap<K, f64>,
) -> Result<f64> {
    let n: usize = empirical.values().sum();
    if n == 0 {
        return Err(Error::Empty("empirical distribution"));
    }
    let n = n as f64;
    let mut total = 0.0;
    for (k, &c) in empirical {
        let q = exact.get(k).copied().unwrap_or(0.0);
        total += (c as f64 / n - q).abs();
    }
    for (k, &q) in exact {
        if !empirical.contains_key(k) {
            total += q;
        }
    }
    Ok((0.5 * total).clamp(0.0, 1.0))
}

/// Outcome counts of decoded sequences.
pub fn empirical_counts(samples: &[TokenSequence]) -> HashMap<Vec<u32>, usize> {
    let mut counts = HashMap::new();
    for s in samples {
        *counts.entry(s.ids().to_vec()).or_insert(0) += 1;
    }
    counts
}

pub fn is_consistent(pair: &PairedSample, world: &GridWorldConfig) -> bool {
    parse_report(&pair.report, world).is_ok_and(|g| g == pair.grid)
}

/// Fraction of pairs whose report parses to exactly the image grid.
pub fn consistency_rate(pairs: &[PairedSample], world: &GridWorldConfig) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("pairs"));
    }
    let ok = pairs.iter().filter(|p| is_consistent(p, world)).count();
    Ok(ok as f64 / pairs.len() as f64)
}

/// Corrupts each sequence at `t`, predicts every masked position by argmax
/// in one pass (ties broken uniformly at random) and returns the fraction
/// recovered exactly.
pub fn masked_recovery_accuracy<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    eval_set: &[TokenSequence],
    schedule: &NoiseSchedule,
    vocab: &JointVocabulary,
    t: f64,
    rng: &mut R,
) -> Result<f64> {
    if eval_set.is_empty() {
        return Err(Error::Empty("eval set"));
    }
    if !(schedule.t_min()..=1.0).contains(&t) {
        return Err(Error::OutOfRange {
            name: "t",
            value: t,
            lo: schedule.t_min(),
            hi: 1.0,
        });
    }
    let mask = vocab.mask_id();
    let k = vocab.k_total() as usize;
    let width = denoiser.width();
    let (mut hits, mut total) = (0usize, 0usize);
    for x0 in eval_set {
        let x_t = schedule.corrupt(x0, t, vocab, rng)?;
        if x_t.count_masked(vocab) == 0 {
            continue;
        }
        let logits = denoiser.logits(&x_t, t)?;
        for p in (0..x_t.len()).filter(|&p| x_t.ids()[p] == mask) {
            let row = &logits[p * width..p * width + k];
            let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let ties: Vec<usize> = (0..k).filter(|&i| row[i] == best).collect();
            let pick = ties[rng.random_range(0..ties.len())];
            hits += usize::from(pick as u32 == x0.ids()[p]);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Empty("masked positions"));
    }
    Ok(hits as f64 / total as f64)
}

fn ngram_counts(tokens: &[u32], n: usize) -> HashMap<&[u32], usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Clipped n-gram precision for one order: `(matches, candidate n-grams)`.
pub fn modified_precision(candidate: &[u32], reference: &[u32], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let matched = cand
        .iter()
        .map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, candidate.len().saturating_sub(n - 1))
}

/// BLEU with uniform weights over orders `1..=n`, no smoothing, and brevity
/// penalty `exp(1 - |ref|/|cand|)` for short candidates. An empty candidate
/// scores 0.
pub fn bleu_n(candidate: &[u32], reference: &[u32], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::OutOfRange {
            name: "n",
            value: 0.0,
            lo: 1.0,
            hi: f64::INFINITY,
        });
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for order in 1..=n {
        let (m, total) = modified_precision(candidate, reference, order);
        if m == 0 {
            return Ok(0.0);
        }
        log_sum += (m as f64 / total as f64).ln();
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    Ok((bp * (log_sum / n as f64).exp()).min(1.0))
}

/// Longest common subsequence length.
pub fn lcs_len(a: &[u32], b: &[u32]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-measure with recall weighted by [`ROUGE_BETA`].
pub fn rouge_l(candidate: &[u32], reference: &[u32]) -> f64 {
    let lcs = lcs_len(candidate, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Per-token NELBO averaged over `n_t_samples` passes of the set, each with
/// fresh `t` and corruption draws.
pub fn nelbo_estimate<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    eval_set: &[TokenSequence],
    schedule: &NoiseSchedule,
    vocab: &JointVocabulary,
    n_t_samples: usize,
    rng: &mut R,
) -> Result<f64> {
    if eval_set.is_empty() {
        return Err(Error::Empty("eval set"));
    }
    if n_t_samples == 0 {
        return Err(Error::Config("n_t_samples must be >= 1".into()));
    }
    let mut examples = Vec::with_capacity(eval_set.len() * n_t_samples);
    for _ in 0..n_t_samples {
        for x0 in eval_set {
            examples.push(CorruptedExample::sample(x0, schedule, vocab, rng)?);
        }
    }
    let width = denoiser.width();
    let losses = examples
        .par_iter()
        .map(|ex| {
            if ex.x_t.count_masked(vocab) == 0 {
                return Ok(0.0);
            }
            let logits = denoiser.logits(&ex.x_t, ex.t)?;
            let (loss, _) = masked_cross_entropy(
                &logits,
                width,
                ex.x0.ids(),
                ex.x_t.ids(),
                vocab.mask_id(),
                schedule.loss_weight(ex.t)?,
            );
            Ok(loss)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(crate::training::pairwise_sum(&losses) / losses.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Suite {
    Dist,
    Consistency,
    Recovery,
    Text,
    Nelbo,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Dist,
        Suite::Consistency,
        Suite::Recovery,
        Suite::Text,
        Suite::Nelbo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Dist => "dist",
            Suite::Consistency => "consistency",
            Suite::Recovery => "recovery",
            Suite::Text => "text",
            Suite::Nelbo => "nelbo",
        }
    }

    /// Parses a suite name; `all` expands to every suite.
    pub fn parse(name: &str) -> Result<Vec<Suite>> {
        if name == "all" {
            return Ok(Self::ALL.to_vec());
        }
        Self::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .map(|s| vec![s])
            .ok_or_else(|| Error::Config(format!("unknown eval suite '{name}'")))
    }
}

/// One CSV row of evaluation output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub metric: String,
    pub mode: String,
    pub seed: u64,
    pub value: f64,
}

/// Ground-truth held-out pairs, reproducible from the eval seed.
pub fn held_out_pairs(source: &DataSource, n: usize, seed: u64) -> Result<Vec<(PairedSample, TokenSequence)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // stream 7 keeps held-out data apart from the training stream
    rng.set_stream(7);
    (0..n).map(|_| source.sample_sequence(&mut rng)).collect()
}

/// Consistency rates of conditional generation on held-out pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionalReport {
    pub report_to_image: f64,
    pub image_to_report: f64,
    /// Fraction of prompted pairs whose report starts with the prompt.
    pub prompt_preserved: f64,
    pub prompted_consistency: f64,
}

pub struct Evaluator<'a, D: Denoiser + ?Sized> {
    pub denoiser: &'a D,
    pub run: &'a RunConfig,
    pub source: &'a DataSource,
    pub schedule: NoiseSchedule,
}

impl<'a, D: Denoiser + ?Sized> Evaluator<'a, D> {
    pub fn new(denoiser: &'a D, run: &'a RunConfig, source: &'a DataSource) -> Result<Self> {
        Ok(Self {
            denoiser,
            run,
            source,
            schedule: run.noise_schedule()?,
        })
    }

    fn decode(&self, modes: &[GenerationMode], seed: u64) -> Result<Vec<TokenSequence>> {
        generate(
            self.denoiser,
            modes,
            &self.run.sampler,
            &self.schedule,
            self.source.vocab(),
            self.source.layout(),
            seed,
        )
    }

    fn pairs(&self, seqs: &[TokenSequence]) -> Result<Vec<PairedSample>> {
        seqs.iter().map(|s| self.source.pair_from_sequence(s)).collect()
    }

    /// Unconditional joint samples.
    pub fn joint_samples(&self, n: usize, seed: u64) -> Result<Vec<TokenSequence>> {
        self.decode(&vec![GenerationMode::JointUnconditional; n], seed)
    }

    /// TV distance of `n` joint samples to the exact joint, plus the
    /// consistency rate of the same samples.
    pub fn joint_metrics(&self, n: usize, seed: u64) -> Result<(f64, f64)> {
        let seqs = self.joint_samples(n, seed)?;
        let exact = self.source.exact_distribution()?;
        let tv = tv_distance(&empirical_counts(&seqs), &exact)?;
        let cons = consistency_rate(&self.pairs(&seqs)?, self.source.world())?;
        Ok((tv, cons))
    }

    /// Conditional generation conditioned on held-out pairs. Prompted
    /// generation uses a one-token report prefix.
    pub fn conditional(&self, held_out: &[(PairedSample, TokenSequence)], seed: u64) -> Result<ConditionalReport> {
        let lr = self.source.layout().len_report();
        let mut modes = Vec::with_capacity(3 * held_out.len());
        for (pair, seq) in held_out {
            let image: Vec<u32> = seq.ids()[lr..]
                .iter()
                .map(|&id| id - self.source.vocab().k_text())
                .collect();
            modes.push(GenerationMode::ReportToImage(pair.report.clone()));
            modes.push(GenerationMode::ImageToReport(image));
            modes.push(GenerationMode::PromptedJoint(pair.report[..1.min(lr)].to_vec()));
        }
        let out = self.pairs(&self.decode(&modes, seed)?)?;
        let world = self.source.world();
        let n = held_out.len() as f64;
        let mut rates = [0.0; 3];
        let mut preserved = 0.0;
        for (i, pair) in out.iter().enumerate() {
            if is_consistent(pair, world) {
                rates[i % 3] += 1.0;
            }
            if i % 3 == 2 {
                let (src, _) = &held_out[i / 3];
                if pair.report[..1.min(lr)] == src.report[..1.min(lr)] {
                    preserved += 1.0;
                }
            }
        }
        Ok(ConditionalReport {
            report_to_image: rates[0] / n,
            image_to_report: rates[1] / n,
            prompt_preserved: preserved / n,
            prompted_consistency: rates[2] / n,
        })
    }

    /// Mean BLEU-1/2/3 and ROUGE-L of image-to-report generations against
    /// the held-out reports.
    pub fn text_metrics(&self, held_out: &[(PairedSample, TokenSequence)], seed: u64) -> Result<[f64; 4]> {
        let lr = self.source.layout().len_report();
        let modes: Vec<GenerationMode> = held_out
            .iter()
            .map(|(_, seq)| {
                GenerationMode::ImageToReport(
                    seq.ids()[lr..]
                        .iter()
                        .map(|&id| id - self.source.vocab().k_text())
                        .collect(),
                )
            })
            .collect();
        let out = self.decode(&modes, seed)?;
        let mut sums = [0.0; 4];
        for (gen, (truth, _)) in out.iter().zip(held_out) {
            let cand = &gen.ids()[..lr];
            for n in 1..=3 {
                sums[n - 1] += bleu_n(cand, &truth.report, n)?;
            }
            sums[3] += rouge_l(cand, &truth.report);
        }
        Ok(sums.map(|s| s / held_out.len() as f64))
    }

    /// Runs the requested suites with the configured sample counts.
    pub fn run_suites(&self, suites: &[Suite]) -> Result<Vec<MetricRow>> {
        let cfg = &self.run.eval;
        let seed = cfg.seed;
        let vocab = self.source.vocab();
        let held_out = held_out_pairs(self.source, cfg.n_eval_set, seed)?;
        let seqs: Vec<TokenSequence> = held_out.iter().map(|(_, s)| s.clone()).collect();
        let row = |metric: &str, mode: &str, value: f64| MetricRow {
            metric: metric.into(),
            mode: mode.into(),
            seed,
            value,
        };
        let mut rows = Vec::new();
        for &suite in suites {
            match suite {
                Suite::Dist => {
                    let (tv, cons) = self.joint_metrics(cfg.n_samples, seed)?;
                    rows.push(row("tv_distance", "joint", tv));
                    rows.push(row("consistency", "joint", cons));
                }
                Suite::Consistency => {
                    let c = self.conditional(&held_out, seed.wrapping_add(1))?;
                    rows.push(row("consistency", "t2i", c.report_to_image));
                    rows.push(row("consistency", "i2t", c.image_to_report));
                    rows.push(row("consistency", "prompted", c.prompted_consistency));
                    rows.push(row("prompt_preserved", "prompted", c.prompt_preserved));
                }
                Suite::Recovery => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(8);
                    let acc = masked_recovery_accuracy(
                        self.denoiser,
                        &seqs,
                        &self.schedule,
                        vocab,
                        cfg.recovery_t,
                        &mut rng,
                    )?;
                    rows.push(row("masked_recovery", "joint", acc));
                }
                Suite::Text => {
                    let [b1, b2, b3, rl] = self.text_metrics(&held_out, seed.wrapping_add(2))?;
                    rows.push(row("bleu_1", "i2t", b1));
                    rows.push(row("bleu_2", "i2t", b2));
                    rows.push(row("bleu_3", "i2t", b3));
                    rows.push(row("rouge_l", "i2t", rl));
                }
                Suite::Nelbo => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(9);
                    let v = nelbo_estimate(
                        self.denoiser,
                        &seqs,
                        &self.schedule,
                        vocab,
                        cfg.nelbo_t_samples,
                        &mut rng,
                    )?;
                    rows.push(row("nelbo_per_token", "joint", v));
                }
            }
        }
        Ok(rows)
    }
}

/// Metric conventions recorded alongside results.
pub fn metric_conventions() -> BTreeMap<&'static str, serde_json::Value> {
    BTreeMap::from([
        ("bleu_smoothing", serde_json::json!("none")),
        ("bleu_weights", serde_json::json!("uniform")),
        ("rouge_beta", serde_json::json!(ROUGE_BETA)),
        ("tv_support", serde_json::json!("exact joint over packed token ids")),
    ])
}
