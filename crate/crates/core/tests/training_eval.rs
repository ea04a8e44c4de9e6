use mddm_core::backbone::ParameterSet;
use mddm_core::config::RunConfig;
use mddm_core::data::{ExactPosterior, GridWorldConfig};
use mddm_core::eval::{held_out_pairs, masked_recovery_accuracy, nelbo_estimate};
use mddm_core::sampler::Denoiser;
use mddm_core::training::{
    lr_at, read_checkpoint, train_until, write_checkpoint, Checkpoint, TrainConfig, TrainState,
};
use mddm_core::vocab::{JointVocabulary, SequenceLayout, TokenSequence};
use mddm_core::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn short_run(steps: u64) -> RunConfig {
    let mut run = RunConfig::default();
    run.train.total_steps = steps;
    run.train.batch_size = 16;
    run.train.warmup_steps = 5;
    run.train.cycle_length = steps.max(6);
    run
}

fn trained(run: &RunConfig, threads: usize) -> TrainState {
    let source = run.data_source().unwrap();
    let sched = run.noise_schedule().unwrap();
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
        .install(|| {
            let mut st = TrainState::new(&run.backbone, run.train.seed).unwrap();
            train_until(&mut st, &source, &sched, &run.train, run.train.total_steps, |_, _| Ok(())).unwrap();
            st
        })
}

fn bits(x: &[f32]) -> Vec<u32> {
    x.iter().map(|v| v.to_bits()).collect()
}

#[test]
fn training_is_independent_of_thread_count() {
    let run = short_run(6);
    let a = trained(&run, 1);
    let b = trained(&run, 4);
    assert_eq!(bits(a.params.as_slice()), bits(b.params.as_slice()));
    assert_eq!(bits(&a.adam.v), bits(&b.adam.v));
}

#[test]
fn checkpoint_corruption_is_detected() {
    let run = short_run(2);
    let st = trained(&run, 1);
    let bytes = write_checkpoint(&Checkpoint { run, state: st }).unwrap();
    for cut in [0, 3, 8, 20, bytes.len() / 2, bytes.len() - 1] {
        assert!(read_checkpoint(&bytes[..cut]).is_err(), "prefix {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(read_checkpoint(&bad), Err(Error::Version { .. })));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(read_checkpoint(&bad), Err(Error::Version { .. })));
    let mut long = bytes;
    long.push(0);
    assert!(read_checkpoint(&long).is_err());
}

#[test]
fn loss_decreases_on_a_short_run() {
    let run = short_run(150);
    let source = run.data_source().unwrap();
    let sched = run.noise_schedule().unwrap();
    let mut st = TrainState::new(&run.backbone, 0).unwrap();
    let mut losses = Vec::new();
    train_until(&mut st, &source, &sched, &run.train, 150, |r, _| {
        losses.push(r.loss);
        Ok(())
    })
    .unwrap();
    let head: f64 = losses[..30].iter().sum::<f64>() / 30.0;
    let tail: f64 = losses[120..].iter().sum::<f64>() / 30.0;
    assert!(tail < head, "{head} -> {tail}");
}

proptest! {
    #[test]
    fn lr_stays_in_range_and_restarts(step in 0u64..100_000, warm in 1u64..50, extra in 1u64..500) {
        let cfg = TrainConfig { warmup_steps: warm, cycle_length: warm + extra, ..TrainConfig::default() };
        let lr = lr_at(&cfg, step);
        prop_assert!(lr >= 0.0 && lr <= cfg.base_lr * (1.0 + 1e-12));
        prop_assert_eq!(lr, lr_at(&cfg, step + cfg.cycle_length));
        if step % cfg.cycle_length >= warm {
            prop_assert!(lr >= cfg.base_lr * cfg.min_lr_fraction * (1.0 - 1e-12));
        }
    }
}

/// Logits all zero: the uniform model over the real vocabulary.
struct Uniform(usize);

impl Denoiser for Uniform {
    fn width(&self) -> usize {
        self.0
    }

    fn logits(&self, x_t: &TokenSequence, _t: f64) -> mddm_core::Result<Vec<f64>> {
        Ok(vec![0.0; x_t.len() * self.0])
    }
}

#[test]
fn nelbo_of_uniform_model_is_log_k_and_variance_shrinks() {
    let run = RunConfig::default();
    let source = run.data_source().unwrap();
    let sched = run.noise_schedule().unwrap();
    let vocab = *source.vocab();
    let set: Vec<TokenSequence> = held_out_pairs(&source, 200, 3).unwrap().into_iter().map(|p| p.1).collect();
    let uni = Uniform(vocab.vocab_out());
    let ln_k = 6f64.ln();
    let estimates = |reps: usize| -> Vec<f64> {
        (0..40u64)
            .map(|s| nelbo_estimate(&uni, &set, &sched, &vocab, reps, &mut ChaCha8Rng::seed_from_u64(s)).unwrap())
            .collect()
    };
    let var = |xs: &[f64]| {
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
    };
    let one = estimates(1);
    let eight = estimates(8);
    let mean8 = eight.iter().sum::<f64>() / 40.0;
    assert!((mean8 - ln_k).abs() < 0.03 * ln_k, "{mean8}");
    let ratio = var(&one) / var(&eight);
    assert!((4.0..16.0).contains(&ratio), "variance ratio {ratio}");
}

#[test]
fn nelbo_of_exact_oracle_on_deterministic_data_is_zero() {
    let world = GridWorldConfig {
        n_colors: 1,
        color_probs: vec![1.0],
        codebook_size: 1,
        ..GridWorldConfig::default()
    };
    let vocab = JointVocabulary::new(1, 1).unwrap();
    let layout = SequenceLayout::new(4, 4).unwrap();
    let source = mddm_core::data::DataSource::new(&world, vocab, layout).unwrap();
    let oracle = ExactPosterior::new(&source.exact_distribution().unwrap(), vocab).unwrap();
    let sched = RunConfig::default().noise_schedule().unwrap();
    let set = source.sample_batch(50, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let v = nelbo_estimate(&oracle, &set, &sched, &vocab, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(v, 0.0);
}

#[test]
fn uniform_model_recovers_at_chance() {
    let run = RunConfig::default();
    let source = run.data_source().unwrap();
    let sched = run.noise_schedule().unwrap();
    let vocab = *source.vocab();
    let set: Vec<TokenSequence> = held_out_pairs(&source, 2000, 4).unwrap().into_iter().map(|p| p.1).collect();
    let acc = masked_recovery_accuracy(&Uniform(7), &set, &sched, &vocab, 0.5, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let n = 2000.0 * 8.0 * 0.5;
    let p = 1.0 / 6.0;
    assert!((acc - p).abs() < 3.0 * (p * (1.0 - p) / n).sqrt(), "{acc}");
    assert!(masked_recovery_accuracy(&Uniform(7), &set, &sched, &vocab, 0.0, &mut ChaCha8Rng::seed_from_u64(5)).is_err());
}

#[test]
fn oracle_recovers_reports_from_a_visible_image() {
    let run = RunConfig::default();
    let source = run.data_source().unwrap();
    let vocab = *source.vocab();
    let oracle = ExactPosterior::new(&source.exact_distribution().unwrap(), vocab).unwrap();
    for (pair, seq) in held_out_pairs(&source, 200, 6).unwrap() {
        let mut ids = seq.ids().to_vec();
        ids[..4].fill(vocab.mask_id());
        let x_t = TokenSequence::new(ids, &vocab, source.layout()).unwrap();
        let logits = oracle.logits(&x_t, 0.5).unwrap();
        for p in 0..4 {
            let row = &logits[p * 7..p * 7 + 6];
            let best = (0..6).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap() as u32;
            assert_eq!(best, pair.report[p]);
        }
    }
}

#[test]
fn recovery_is_better_at_low_noise_for_a_trained_model() {
    let mut run = short_run(600);
    run.train.batch_size = 32;
    run.train.base_lr = 3e-3;
    let st = trained(&run, 1);
    let params: &ParameterSet<f32> = &st.params;
    let source = run.data_source().unwrap();
    let sched = run.noise_schedule().unwrap();
    let vocab = *source.vocab();
    let set: Vec<TokenSequence> = held_out_pairs(&source, 1000, 8).unwrap().into_iter().map(|p| p.1).collect();
    let mut lo = 0.0;
    let mut hi = 0.0;
    for seed in 0..5 {
        lo += masked_recovery_accuracy(params, &set, &sched, &vocab, 0.1, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        hi += masked_recovery_accuracy(params, &set, &sched, &vocab, 0.9, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    }
    assert!(lo >= hi, "t=0.1: {} t=0.9: {}", lo / 5.0, hi / 5.0);
}
