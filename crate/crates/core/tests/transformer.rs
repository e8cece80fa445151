mod common;

use common::probes::{causal_probe, random, tiny_config, tiny_prior};
use hdt::tensor::{Tape, Tensor};
use hdt::transformer::{
    train_stage2, HdtPrior, SelfCondSource, Stage2Config, Stage2Data, TokenDecoder,
};
use hdt::vq::{CodebookKind, TokenSequence};
use hdt::HdtError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn seq(indices: Vec<usize>, kind: CodebookKind) -> TokenSequence {
    TokenSequence { indices, kind }
}

fn random_seq(rng: &mut ChaCha8Rng, k: usize, len: usize, kind: CodebookKind) -> TokenSequence {
    seq((0..len).map(|_| rng.random_range(0..k)).collect(), kind)
}

fn zero_head(decoder: &TokenDecoder, store: &mut hdt::tensor::ParamStore) {
    let head = decoder.head().clone();
    *store.get_mut(head.weight) = Tensor::zeros(&[head.d_in, head.d_out]);
    *store.get_mut(head.bias.unwrap()) = Tensor::zeros(&[head.d_out]);
}

/// Tokens that depend on the context so both decoders have something to fit.
fn toy_data(n: usize, seed: u64) -> Stage2Data {
    let c = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Stage2Data { contexts: vec![], s_down: vec![], s_pred: vec![] };
    for _ in 0..n {
        let ctx = random(&mut rng, &[c.history, c.variates]);
        let level = if ctx.data()[0] > 0.0 { 1 } else { 3 };
        let down: Vec<usize> = (0..c.token_len()).map(|i| (level + i / 2) % c.down_codebook).collect();
        let pred: Vec<usize> = down.iter().map(|&d| (d + 1) % c.target_codebook).collect();
        data.contexts.push(ctx);
        data.s_down.push(seq(down, CodebookKind::Downsampled));
        data.s_pred.push(seq(pred, CodebookKind::Target));
    }
    data
}

fn quick_stage2(p1: usize, p2: usize, seed: u64) -> Stage2Config {
    let mut cfg = Stage2Config::new(tiny_config(), p1, p2, seed);
    cfg.batch_size = 8;
    cfg.lr = 3e-3;
    cfg
}

#[test]
fn context_encoding_shape_and_determinism() {
    let prior = tiny_prior(1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, &[8, 2]);
    let h = prior.context_memory(&[&x, &x]).unwrap();
    assert_eq!(h.shape(), &[2, 8, 8]);
    assert_eq!(&h.data()[..64], &h.data()[64..]);

    // Reversing time changes the encoding.
    let rev_rows: Vec<Vec<f64>> = (0..8).rev().map(|t| x.row(t).to_vec()).collect();
    let rev = Tensor::from_rows(&rev_rows).unwrap();
    let h2 = prior.context_memory(&[&rev]).unwrap();
    assert_ne!(&h.data()[..64], h2.data());

    let bad = Tensor::zeros(&[7, 2]);
    assert!(matches!(prior.context_memory(&[&bad]), Err(HdtError::Config(_))));
}

#[test]
fn zero_context_embeds_to_positions() {
    let prior = tiny_prior(3);
    let mut tape = Tape::eval();
    let zero = Tensor::zeros(&[8, 2]);
    let e = prior.encoder.embed(&mut tape, &prior.low, &[&zero]).unwrap();
    let pos = prior
        .low
        .iter()
        .find(|p| p.name.ends_with("encoder.pos"))
        .unwrap()
        .value
        .clone();
    assert_eq!(tape.value(e).data(), pos.data());
}

#[test]
fn zeroed_heads_give_uniform_nll() {
    let mut prior = tiny_prior(4);
    let (base, selfcond) = (prior.base.clone(), prior.selfcond.clone());
    zero_head(&base, &mut prior.low);
    zero_head(&selfcond, &mut prior.high);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ctx = random(&mut rng, &[8, 2]);
    let down = random_seq(&mut rng, 5, 4, CodebookKind::Downsampled);
    let pred = random_seq(&mut rng, 6, 4, CodebookKind::Target);
    let mut tape = Tape::eval();
    let h = prior.encode_context(&mut tape, &[&ctx]).unwrap();
    let l_base = prior.base_nll(&mut tape, h, &[&down]).unwrap();
    let l_self = prior.selfcond_nll(&mut tape, h, &[&down], &[&pred]).unwrap();
    assert!((tape.value(l_base).item() - 5f64.ln()).abs() < 1e-12);
    assert!((tape.value(l_self).item() - 6f64.ln()).abs() < 1e-12);
}

#[test]
fn invalid_tokens_are_rejected() {
    let prior = tiny_prior(6);
    let ctx = Tensor::zeros(&[8, 2]);
    let mut tape = Tape::eval();
    let h = prior.encode_context(&mut tape, &[&ctx]).unwrap();
    let out_of_range = seq(vec![0, 1, 5, 2], CodebookKind::Downsampled);
    assert!(matches!(prior.base_nll(&mut tape, h, &[&out_of_range]), Err(HdtError::Index(_))));
    let short = seq(vec![0, 1], CodebookKind::Downsampled);
    assert!(matches!(prior.base_nll(&mut tape, h, &[&short]), Err(HdtError::Config(_))));
    let down = seq(vec![0, 1, 2, 3], CodebookKind::Downsampled);
    let bad_pred = seq(vec![0, 6, 0, 0], CodebookKind::Target);
    assert!(matches!(
        prior.selfcond_nll(&mut tape, h, &[&down], &[&bad_pred]),
        Err(HdtError::Index(_))
    ));
}

#[test]
fn decoders_are_causal() {
    let prior = tiny_prior(7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (decoder, store) in [(&prior.base, &prior.low), (&prior.selfcond, &prior.high)] {
        for pos in 0..decoder.len {
            let (future, past) = causal_probe(decoder, store, 8, 8, pos, &mut rng).unwrap();
            assert_eq!(future, 0.0, "position {pos} sees the future");
            assert!(past > 0.0, "position {pos} sees nothing");
        }
    }
}

#[test]
fn perturbing_a_token_leaves_earlier_logits_unchanged() {
    let prior = tiny_prior(9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let ctx = random(&mut rng, &[8, 2]);
    let memory = prior.context_memory(&[&ctx]).unwrap();
    let logits = |s: &TokenSequence| {
        let mut tape = Tape::eval();
        let m = tape.constant(memory.clone());
        let l = prior.base.teacher_forced_logits(&mut tape, &prior.low, &[s], m, None, 0.0).unwrap();
        tape.value(l).clone()
    };
    for j in 0..4 {
        let s = random_seq(&mut rng, 5, 4, CodebookKind::Downsampled);
        let mut p = s.clone();
        p.indices[j] = (p.indices[j] + 1) % 5;
        let (a, b) = (logits(&s), logits(&p));
        // Token j is the input at position j + 1.
        for i in 0..4 {
            if i <= j {
                assert_eq!(a.row(i), b.row(i), "position {i} after perturbing {j}");
            } else {
                assert_ne!(a.row(i), b.row(i), "position {i} ignores token {j}");
            }
        }
    }
}

#[test]
fn conditioning_reaches_every_position() {
    let prior = tiny_prior(11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut tape = Tape::eval();
    let x = tape.leaf(random(&mut rng, &[1, 4, 8]));
    let memory = tape.leaf(random(&mut rng, &[1, 8, 8]));
    let cond = tape.leaf(random(&mut rng, &[1, 4, 8]));
    let logits = prior
        .selfcond
        .logits_from_embedded(&mut tape, &prior.high, x, memory, Some(cond), 0.0)
        .unwrap();
    let first = tape.slice(logits, 0, 0, 1).unwrap();
    let sq = tape.square(first);
    let out = tape.sum(sq);
    let g = tape.backward(out).unwrap();
    for (var, len) in [(memory, 8), (cond, 4)] {
        let gv = g.get(&tape, var).unwrap();
        for j in 0..len {
            assert!(gv.data()[j * 8..(j + 1) * 8].iter().any(|v| *v != 0.0), "no path from row {j}");
        }
    }

    // Swapping the trend tokens changes the target loss.
    let ctx = random(&mut rng, &[8, 2]);
    let pred = random_seq(&mut rng, 6, 4, CodebookKind::Target);
    let a = seq(vec![0, 1, 2, 3], CodebookKind::Downsampled);
    let b = seq(vec![4, 4, 0, 1], CodebookKind::Downsampled);
    let mut tape = Tape::eval();
    let h = prior.encode_context(&mut tape, &[&ctx]).unwrap();
    let la = prior.selfcond_nll(&mut tape, h, &[&a], &[&pred]).unwrap();
    let lb = prior.selfcond_nll(&mut tape, h, &[&b], &[&pred]).unwrap();
    assert_ne!(tape.value(la).item(), tape.value(lb).item());
}

#[test]
fn selfcond_loss_does_not_reach_low_level_parameters() {
    let prior = tiny_prior(13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let ctx = random(&mut rng, &[8, 2]);
    let down = random_seq(&mut rng, 5, 4, CodebookKind::Downsampled);
    let pred = random_seq(&mut rng, 6, 4, CodebookKind::Target);
    let mut tape = Tape::training(1);
    tape.freeze(&prior.low);
    let h = prior.encode_context(&mut tape, &[&ctx]).unwrap();
    let loss = prior.selfcond_nll(&mut tape, h, &[&down], &[&pred]).unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(tape.param_grads(&g, &prior.low).all_zero_or_absent());
    assert!(!tape.param_grads(&g, &prior.high).all_zero_or_absent());
}

#[test]
fn cached_decoding_matches_full_recomputation() {
    let prior = tiny_prior(15);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let contexts: Vec<Tensor> = (0..3).map(|_| random(&mut rng, &[8, 2])).collect();
    let refs: Vec<&Tensor> = contexts.iter().collect();
    let memory = prior.context_memory(&refs).unwrap();
    let downs: Vec<TokenSequence> = (0..3).map(|_| random_seq(&mut rng, 5, 4, CodebookKind::Downsampled)).collect();
    let preds: Vec<TokenSequence> = (0..3).map(|_| random_seq(&mut rng, 6, 4, CodebookKind::Target)).collect();
    let cond_flat: Vec<usize> = downs.iter().flat_map(|s| s.indices.clone()).collect();

    let cases: [(&TokenDecoder, &hdt::tensor::ParamStore, &[TokenSequence], Option<&[usize]>); 2] = [
        (&prior.base, &prior.low, &downs, None),
        (&prior.selfcond, &prior.high, &preds, Some(&cond_flat)),
    ];
    for (decoder, store, targets, cond) in cases {
        let trefs: Vec<&TokenSequence> = targets.iter().collect();
        let drefs: Vec<&TokenSequence> = downs.iter().collect();
        let mut tape = Tape::eval();
        let m = tape.constant(memory.clone());
        let full = decoder
            .teacher_forced_logits(&mut tape, store, &trefs, m, cond.map(|_| drefs.as_slice()), 0.0)
            .unwrap();
        let full = tape.value(full).clone();

        let mut state = decoder.start(store, &memory, cond).unwrap();
        let mut prev = vec![decoder.bos(); 3];
        for t in 0..4 {
            let step = decoder.step(store, &mut state, &prev).unwrap();
            for b in 0..3 {
                assert_eq!(step.row(b), full.row(b * 4 + t), "row {b} position {t}");
                prev[b] = targets[b].indices[t];
            }
        }
    }
}

#[test]
fn parameter_counts_follow_the_architecture() {
    for layers in [2, 3, 4, 5] {
        for use_selfcond in [true, false] {
            let mut c = tiny_config();
            c.selfcond_layers = layers;
            c.use_selfcond = use_selfcond;
            let prior = HdtPrior::new(c.clone(), 0).unwrap();
            let (low, high) = HdtPrior::expected_param_counts(&c);
            assert_eq!(prior.low.num_scalars(), low);
            assert_eq!(prior.high.num_scalars(), high);
        }
    }
    // Hand count for one configuration: hidden 8, 4 tokens, vocab 6,
    // condition vocab 5, 2 layers.
    let c = tiny_config();
    let attn = 2 * 8 + 4 * (64 + 8);
    let ff = 2 * 8 + (8 * 32 + 32) + (32 * 8 + 8);
    let layer = 3 * attn + ff;
    let expected = 7 * 8 + 4 * 8 + (5 * 8 + 4 * 8) + 2 * layer + 2 * 8 + 8 * 6 + 6;
    assert_eq!(HdtPrior::expected_param_counts(&c).1, expected);

    let mut no_cond = c.clone();
    no_cond.use_selfcond = false;
    let shrink = HdtPrior::expected_param_counts(&c).1 - HdtPrior::expected_param_counts(&no_cond).1;
    assert_eq!(shrink, 5 * 8 + 4 * 8 + 2 * attn);
}

#[test]
fn phase_two_freezes_phase_one_parameters() {
    let data = toy_data(32, 17);
    let mut only = quick_stage2(20, 20, 18);
    only.phase1_only = true;
    let after_one = train_stage2(&data, &only, None).unwrap();
    assert_eq!(after_one.log.len(), 20);
    let full = train_stage2(&data, &quick_stage2(20, 20, 18), None).unwrap();
    assert!(full.prior.low.bit_identical(&after_one.prior.low));
    assert!(!full.prior.high.bit_identical(&after_one.prior.high));
    assert_eq!(full.log.iter().filter(|r| r.phase == 2).count(), 20);
}

#[test]
fn stage2_learns_and_is_deterministic() {
    let data = toy_data(64, 19);
    let cfg = quick_stage2(150, 150, 20);
    let a = train_stage2(&data, &cfg, None).unwrap();
    let b = train_stage2(&data, &cfg, None).unwrap();
    assert_eq!(a.log, b.log);
    assert!(a.prior.low.bit_identical(&b.prior.low));
    assert!(a.prior.high.bit_identical(&b.prior.high));
    let tail = |phase: u8| {
        let rows: Vec<f64> = a.log.iter().filter(|r| r.phase == phase).map(|r| r.nll).collect();
        rows[rows.len() - 10..].iter().sum::<f64>() / 10.0
    };
    assert!(tail(1) < 5f64.ln() - 0.3, "phase 1 tail {}", tail(1));
    assert!(tail(2) < 6f64.ln() - 0.3, "phase 2 tail {}", tail(2));
}

#[test]
fn generated_conditioning_trains() {
    let data = toy_data(32, 21);
    let mut cfg = quick_stage2(10, 10, 22);
    cfg.selfcond_source = SelfCondSource::Generated;
    let a = train_stage2(&data, &cfg, None).unwrap();
    let b = train_stage2(&data, &cfg, None).unwrap();
    assert_eq!(a.log, b.log);
    let gt = train_stage2(&data, &quick_stage2(10, 10, 22), None).unwrap();
    assert!(gt.prior.low.bit_identical(&a.prior.low));
    assert_ne!(gt.log, a.log);
}

#[test]
fn stage2_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s2.ckpt");
    let prior = tiny_prior(23);
    prior.to_checkpoint().save(&path).unwrap();
    let loaded = HdtPrior::from_checkpoint(&hdt::tensor::Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(loaded.config, prior.config);
    assert!(loaded.low.bit_identical(&prior.low));
    assert!(loaded.high.bit_identical(&prior.high));
}

mod continuous {
    use super::*;
    use hdt::sampler::SamplerConfig;
    use hdt::transformer::{train_continuous, ContinuousConfig, ContinuousData, ContinuousPrior};

    const NZ: usize = 3;

    fn data(n: usize, seed: u64) -> ContinuousData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let contexts: Vec<Tensor> = (0..n).map(|_| random(&mut rng, &[8, 2])).collect();
        let latents = contexts
            .iter()
            .map(|c| Tensor::new(vec![4, NZ], (0..4 * NZ).map(|i| 0.5 * c.data()[i % 16]).collect()).unwrap())
            .collect();
        ContinuousData { contexts, latents }
    }

    #[test]
    fn predictions_only_read_earlier_latents() {
        let model = ContinuousPrior::new(tiny_config(), NZ, 1).unwrap();
        let d = data(1, 2);
        let run = |z: &Tensor| {
            let mut tape = Tape::eval();
            let y = model.predict(&mut tape, &[&d.contexts[0]], &[z]).unwrap();
            tape.value(y).clone()
        };
        let base = run(&d.latents[0]);
        for i in 0..4 {
            let mut z = d.latents[0].clone();
            z.data_mut()[i * NZ] += 1.0;
            let out = run(&z);
            for t in 0..4 {
                let same = out.data()[t * NZ..(t + 1) * NZ] == base.data()[t * NZ..(t + 1) * NZ];
                assert_eq!(same, t <= i, "latent {i}, position {t}");
            }
        }
    }

    #[test]
    fn greedy_sample_is_a_fixed_point_of_teacher_forcing() {
        let model = ContinuousPrior::new(tiny_config(), NZ, 3).unwrap();
        let d = data(1, 4);
        let memory = model.context_memory(&[&d.contexts[0]]).unwrap();
        let cfg = SamplerConfig::new(1e-9, 1, 0);
        let a = model.sample(&memory, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = model.sample(&memory, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
        let mut tape = Tape::eval();
        let y = model.predict(&mut tape, &[&d.contexts[0]], &[&a]).unwrap();
        for (p, q) in tape.value(y).data().iter().zip(a.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn training_fits_latents_and_sets_noise() {
        let d = data(32, 5);
        let cfg = ContinuousConfig { prior: tiny_config(), code_dim: NZ, steps: 150, batch_size: 8, lr: 3e-3, seed: 6 };
        let out = train_continuous(&d, &cfg).unwrap();
        let early: f64 = out.log[..10].iter().sum::<f64>() / 10.0;
        let late: f64 = out.log[140..].iter().sum::<f64>() / 10.0;
        assert!(late < 0.5 * early, "{early} -> {late}");
        assert!(out.model.noise_std > 0.0 && out.model.noise_std.is_finite());
        let again = train_continuous(&d, &cfg).unwrap();
        assert_eq!(out.log, again.log);
        assert!(out.model.store.bit_identical(&again.model.store));

        let memory = out.model.context_memory(&[&d.contexts[0]]).unwrap();
        let warm = SamplerConfig::new(2.0, 1, 0);
        let a = out.model.sample(&memory, &warm, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = out.model.sample(&memory, &warm, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_ne!(a, b);
        assert!(matches!(
            train_continuous(&ContinuousData { contexts: vec![], latents: vec![] }, &cfg),
            Err(HdtError::State(_))
        ));
    }
}
