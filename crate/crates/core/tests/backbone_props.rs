use mddm_core::backbone::{
    adaln_modulate, forward, init_params, sinusoidal_features, timestep_embedding, AdaLnMode,
    BackboneConfig, NormSite, ParameterSet,
};
use mddm_core::schedule::NoiseSchedule;
use mddm_core::training::{example_loss, example_loss_and_grad, CorruptedExample};
use mddm_core::vocab::{JointVocabulary, SequenceLayout, TokenSequence};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(mode: AdaLnMode) -> BackboneConfig {
    BackboneConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        max_len: 6,
        vocab_out: 6,
        adaln_mode: mode,
        t_embed_dim: 6,
        mlp_ratio: 2,
        init_std: 0.4,
        ..BackboneConfig::default()
    }
}

fn perturbed(cfg: &BackboneConfig, seed: u64) -> ParameterSet<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p: ParameterSet<f64> = init_params(cfg, &mut rng).unwrap();
    for v in p.as_mut_slice() {
        *v += rng.random_range(-0.3..0.3);
    }
    p
}

fn max_grad_error(cfg: &BackboneConfig, seed: u64) -> f64 {
    let vocab = JointVocabulary::new(2, 3).unwrap();
    let layout = SequenceLayout::new(3, 3).unwrap();
    let sched = NoiseSchedule::linear(1e-3, 100).unwrap();
    let m = vocab.mask_id();
    let mut params = perturbed(cfg, seed);
    let ex = CorruptedExample {
        x0: TokenSequence::new(vec![1, 0, 1, 4, 2, 3], &vocab, layout).unwrap(),
        x_t: TokenSequence::new(vec![m, 0, m, m, 2, m], &vocab, layout).unwrap(),
        t: 0.61,
    };
    let mut grad = params.zeros_like();
    example_loss_and_grad(&params, &ex, &sched, &vocab, &mut grad).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let orig = params.as_slice()[i];
        params.as_mut_slice()[i] = orig + h;
        let up = example_loss(&params, &ex, &sched, &vocab).unwrap();
        params.as_mut_slice()[i] = orig - h;
        let down = example_loss(&params, &ex, &sched, &vocab).unwrap();
        params.as_mut_slice()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        // Exactly-zero gradients come back from central differences as
        // rounding noise near 1e-11, hence the floor.
        worst = worst.max((grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-5));
    }
    worst
}

#[test]
fn gradients_match_finite_differences_across_flag_combinations() {
    for mode in [AdaLnMode::None, AdaLnMode::AdaLn, AdaLnMode::AdaLnZero] {
        for causal in [false, true] {
            for (modality, timestep) in [(true, true), (false, true), (true, false)] {
                let cfg = BackboneConfig {
                    causal,
                    use_modality_embed: modality,
                    use_timestep: timestep,
                    ..small(mode)
                };
                let err = max_grad_error(&cfg, 7);
                assert!(err < 1e-5, "{mode:?} causal={causal} modality={modality} timestep={timestep}: {err:e}");
            }
        }
    }
}

#[test]
fn f32_and_f64_forward_agree() {
    let cfg = BackboneConfig::default();
    let p64: ParameterSet<f64> = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let p32: ParameterSet<f32> = p64.cast();
    let vocab = JointVocabulary::new(3, 3).unwrap();
    let layout = SequenceLayout::new(4, 4).unwrap();
    let x = TokenSequence::new(vec![0, 6, 2, 1, 5, 6, 6, 3], &vocab, layout).unwrap();
    let a = forward(&p64, &x, 0.3).unwrap();
    let b = forward(&p32, &x, 0.3).unwrap();
    for (u, v) in a.as_slice().iter().zip(b.as_slice()) {
        assert!((u - *v as f64).abs() < 1e-5);
    }
    assert_eq!(a.len(), 8);
    assert_eq!(a.width(), 7);
    let probs = a.probabilities(0);
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn adaln_zero_gates_start_closed() {
    let cfg = BackboneConfig::default();
    let p: ParameterSet<f64> = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let cond = timestep_embedding(&p, 0.5).unwrap();
    let h: Vec<f64> = (0..8 * cfg.d_model).map(|i| (i as f64 * 0.37).sin()).collect();
    for b in 0..cfg.n_layers {
        for site in [NormSite::Attention(b), NormSite::Mlp(b)] {
            let m = adaln_modulate(&p, site, &h, &cond).unwrap();
            assert!(m.gate.unwrap().iter().all(|&g| g == 0.0));
        }
    }
    let m = adaln_modulate(&p, NormSite::Final, &h, &cond).unwrap();
    assert!(m.gate.is_none());
}

#[test]
fn input_validation() {
    let cfg = BackboneConfig::default();
    let p: ParameterSet<f32> = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let vocab = JointVocabulary::new(3, 3).unwrap();
    let long = TokenSequence::new(vec![0, 0, 0, 0, 0, 3, 3, 3, 3], &vocab, SequenceLayout::new(5, 4).unwrap()).unwrap();
    assert!(forward(&p, &long, 0.5).is_err());
    let ok = TokenSequence::masked(&vocab, SequenceLayout::new(4, 4).unwrap());
    assert!(forward(&p, &ok, 1.5).is_err());
    assert!(timestep_embedding(&p, -0.1).is_err());
}

proptest! {
    #[test]
    fn sinusoidal_features_are_bounded_and_paired(t in 0.0f64..=1.0, half in 1usize..16) {
        let f = sinusoidal_features(t, 2 * half);
        prop_assert_eq!(f.len(), 2 * half);
        for i in 0..half {
            let s = f[i] * f[i] + f[half + i] * f[half + i];
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn logits_are_finite(seed in 0u64..1000, t in 0.0f64..=1.0) {
        let cfg = BackboneConfig { init_std: 1.0, ..BackboneConfig::default() };
        let p: ParameterSet<f32> = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let vocab = JointVocabulary::new(3, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let ids: Vec<u32> = (0..8).map(|_| rng.random_range(0..7)).collect();
        let x = TokenSequence::new(ids, &vocab, SequenceLayout::new(4, 4).unwrap());
        if let Ok(x) = x {
            let out = forward(&p, &x, t).unwrap();
            prop_assert!(out.as_slice().iter().all(|v| v.is_finite()));
        }
    }
}
