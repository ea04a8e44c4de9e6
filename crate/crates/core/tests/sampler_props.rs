use std::sync::Mutex;

use mddm_core::backbone::{init_params, BackboneConfig, ParameterSet};
use mddm_core::config::RunConfig;
use mddm_core::sampler::{
    conditioned_positions, decode, generate, init_canvas, sample_rng, Denoiser, GenerationMode,
    SamplerAlgorithm, SamplerConfig,
};
use mddm_core::vocab::{JointVocabulary, SequenceLayout, TokenSequence};
use mddm_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(seed: u64) -> ParameterSet<f32> {
    let cfg = BackboneConfig {
        init_std: 0.5,
        ..BackboneConfig::default()
    };
    init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn random_modes(rng: &mut ChaCha8Rng) -> Vec<GenerationMode> {
    let report: Vec<u32> = (0..4).map(|_| rng.random_range(0..3)).collect();
    let image: Vec<u32> = (0..4).map(|_| rng.random_range(0..3)).collect();
    let k = rng.random_range(0..=4);
    vec![
        GenerationMode::JointUnconditional,
        GenerationMode::ReportToImage(report.clone()),
        GenerationMode::ImageToReport(image),
        GenerationMode::PromptedJoint(report[..k].to_vec()),
    ]
}

#[test]
fn conditions_preserved_and_outputs_mask_free_in_range() {
    let run = RunConfig::default();
    let vocab = run.joint_vocab().unwrap();
    let layout = run.layout().unwrap();
    let sched = run.noise_schedule().unwrap();
    let params = model(1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for algorithm in [SamplerAlgorithm::Maskgit, SamplerAlgorithm::Ancestral] {
        let cfg = SamplerConfig {
            algorithm,
            ..SamplerConfig::default()
        };
        for seed in 0..100 {
            for mode in random_modes(&mut rng) {
                let canvas = init_canvas(&mode, &vocab, layout).unwrap();
                let out = decode(&params, &canvas, &cfg, &sched, &vocab, &mut sample_rng(seed, 0)).unwrap();
                assert_eq!(out.count_masked(&vocab), 0);
                for (p, fixed) in conditioned_positions(&mode, layout).into_iter().enumerate() {
                    if fixed {
                        assert_eq!(out.ids()[p], canvas.ids()[p], "{mode:?} position {p}");
                    }
                    let (lo, hi) = vocab.range(layout.modality_of(p));
                    assert!((lo..hi).contains(&out.ids()[p]));
                }
            }
        }
    }
}

/// Records every canvas the decoder shows the model.
struct Recording<'a> {
    inner: &'a ParameterSet<f32>,
    seen: Mutex<Vec<Vec<u32>>>,
}

impl Denoiser for Recording<'_> {
    fn width(&self) -> usize {
        self.inner.width()
    }

    fn logits(&self, x_t: &TokenSequence, t: f64) -> Result<Vec<f64>> {
        self.seen.lock().unwrap().push(x_t.ids().to_vec());
        self.inner.logits(x_t, t)
    }
}

#[test]
fn maskgit_commitments_grow_monotonically() {
    let run = RunConfig::default();
    let vocab = run.joint_vocab().unwrap();
    let layout = run.layout().unwrap();
    let sched = run.noise_schedule().unwrap();
    let params = model(2);
    for (steps, noise) in [(16, 10.0), (4, 0.0), (3, 1.0), (8, 0.0)] {
        let cfg = SamplerConfig {
            steps,
            confidence_noise: noise,
            ..SamplerConfig::default()
        };
        for seed in 0..30 {
            let rec = Recording {
                inner: &params,
                seen: Mutex::new(Vec::new()),
            };
            let canvas = TokenSequence::masked(&vocab, layout);
            let out = decode(&rec, &canvas, &cfg, &sched, &vocab, &mut sample_rng(seed, 0)).unwrap();
            let mut history = rec.seen.into_inner().unwrap();
            history.push(out.ids().to_vec());
            let mask = vocab.mask_id();
            for w in history.windows(2) {
                let committed_before = w[0].iter().filter(|&&id| id != mask).count();
                let committed_after = w[1].iter().filter(|&&id| id != mask).count();
                assert!(committed_after > committed_before);
                for (a, b) in w[0].iter().zip(&w[1]) {
                    if *a != mask {
                        assert_eq!(a, b);
                    }
                }
            }
        }
    }
}

#[test]
fn generation_is_deterministic_per_seed_and_independent_of_threads() {
    let run = RunConfig::default();
    let vocab = run.joint_vocab().unwrap();
    let layout = run.layout().unwrap();
    let sched = run.noise_schedule().unwrap();
    let params = model(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let modes: Vec<GenerationMode> = (0..10).flat_map(|_| random_modes(&mut rng)).collect();
    let go = |threads: usize, seed: u64| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| generate(&params, &modes, &run.sampler, &sched, &vocab, layout, seed).unwrap())
    };
    let a = go(1, 9);
    assert_eq!(a, go(3, 9));
    assert_ne!(a, go(1, 10));
}

#[test]
fn oversized_prompt_is_rejected() {
    let vocab = JointVocabulary::new(3, 3).unwrap();
    let layout = SequenceLayout::new(4, 4).unwrap();
    let err = init_canvas(&GenerationMode::PromptedJoint(vec![0; 5]), &vocab, layout).unwrap_err();
    assert!(matches!(err, Error::LengthMismatch { expected: 4, got: 5 }));
}

#[test]
fn unrestricted_support_may_cross_modalities() {
    let run = RunConfig::default();
    let vocab = run.joint_vocab().unwrap();
    let layout = run.layout().unwrap();
    let sched = run.noise_schedule().unwrap();
    let params = model(5);
    let cfg = SamplerConfig {
        restrict_modality: false,
        ..SamplerConfig::default()
    };
    let mut crossed = false;
    for seed in 0..50 {
        let canvas = TokenSequence::masked(&vocab, layout);
        let out = decode(&params, &canvas, &cfg, &sched, &vocab, &mut sample_rng(seed, 0)).unwrap();
        assert_eq!(out.count_masked(&vocab), 0);
        crossed |= out.ids()[..4].iter().any(|&id| id >= 3) || out.ids()[4..].iter().any(|&id| id < 3);
    }
    assert!(crossed);
}
