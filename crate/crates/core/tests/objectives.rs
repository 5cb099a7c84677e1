mod common;

use common::*;
use mgmo::data::{TokenId, Vocab, UNK};
use mgmo::metrics::Metric;
use mgmo::model::{NatModel, Session};
use mgmo::objectives::*;
use mgmo::objectives::Strategy;
use mgmo::sampling::HypothesisSample;
use mgmo::{Tape, Tensor};
use proptest::prelude::*;

fn table(rows: &[&[f64]]) -> Tensor {
    let c = rows[0].len();
    Tensor::new(vec![rows.len(), c], rows.concat()).unwrap()
}

fn log_normalize(p: &[f64]) -> Vec<f64> {
    let z: f64 = p.iter().sum();
    p.iter().map(|v| (v / z).ln()).collect()
}

#[test]
fn xe_loss_examples() {
    let mut tape = Tape::new();
    // Certain model: every reference token has probability 1.
    let certain = tape.constant(table(&[&[0.0, f64::NEG_INFINITY], &[f64::NEG_INFINITY, 0.0]]));
    let l = xe_loss(&mut tape, certain, &[3, 4]).unwrap();
    assert_eq!(tape.value(l).item().unwrap(), 0.0);

    let v = 7.0f64;
    let uniform = tape.constant(Tensor::full(&[5, 7], -v.ln()));
    let l = xe_loss(&mut tape, uniform, &[3, 4, 5, 6, 9]).unwrap();
    assert!((tape.value(l).item().unwrap() - 5.0 * v.ln()).abs() < 1e-12);

    let rows = [
        log_normalize(&[0.2, 0.5, 0.3]),
        log_normalize(&[0.6, 0.1, 0.3]),
        log_normalize(&[0.25, 0.25, 0.5]),
    ];
    let t = tape.constant(table(&[&rows[0], &rows[1], &rows[2]]));
    let l = xe_loss(&mut tape, t, &[4, 3, 5]).unwrap();
    let hand = -(0.5f64.ln() + 0.6f64.ln() + 0.5f64.ln());
    assert!((tape.value(l).item().unwrap() - hand).abs() < 1e-12);

    assert!(matches!(
        xe_loss(&mut tape, t, &[4, 3]),
        Err(ObjectiveError::LengthMismatch { rows: 3, reference: 2 })
    ));
}

#[test]
fn length_loss_examples() {
    let mut tape = Tape::new();
    let mut point = vec![f64::NEG_INFINITY; 32];
    point[6] = 0.0;
    let p = tape.constant(Tensor::vector(point));
    let l = length_loss(&mut tape, p, 7).unwrap();
    assert_eq!(tape.value(l).item().unwrap(), 0.0);

    let u = tape.constant(Tensor::full(&[32], -(32f64).ln()));
    let l = length_loss(&mut tape, u, 13).unwrap();
    assert!((tape.value(l).item().unwrap() - 32f64.ln()).abs() < 1e-12);

    let d = log_normalize(&[1.0, 2.0, 3.0, 4.0]);
    let t = tape.constant(Tensor::vector(d.clone()));
    for len in 1..=4 {
        let l = length_loss(&mut tape, t, len).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), -d[len - 1]);
    }
    assert!(matches!(
        length_loss(&mut tape, t, 0),
        Err(ObjectiveError::LengthOutOfRange { .. })
    ));
    assert!(matches!(
        length_loss(&mut tape, t, 5),
        Err(ObjectiveError::LengthOutOfRange { .. })
    ));
}

fn model() -> NatModel {
    NatModel::new(tiny_config(), 5).unwrap()
}

#[test]
fn cmlm_with_full_subset_equals_xe_on_masked_input() {
    let m = model();
    let (src, reference) = (seq(&[3, 4, 5]), seq(&[6, 7, 3, 4]));
    let mut s = Session::new(&m, false);
    let l = cmlm_loss(&mut s, &src, &reference, &[0, 1, 2, 3]).unwrap();
    let cmlm = s.tape.value(l).item().unwrap();

    let rows = m.decode_parallel(&src, &[UNK; 4]).unwrap();
    let mut tape = Tape::new();
    let r = tape.constant(rows);
    let x = xe_loss(&mut tape, r, &reference).unwrap();
    assert!((cmlm - tape.value(x).item().unwrap()).abs() < 1e-12);
}

#[test]
fn cmlm_sums_exactly_the_masked_terms() {
    let m = model();
    let (src, reference) = (seq(&[3, 4, 5, 6]), seq(&[7, 6, 5, 4, 3]));
    let mut s = Session::new(&m, false);
    // Positions 2 and 4 (1-based).
    let l = cmlm_loss(&mut s, &src, &reference, &[1, 3]).unwrap();
    let input = cmlm_input(&reference, &[1, 3]).unwrap();
    assert_eq!(input, vec![7, UNK, 5, UNK, 3]);
    let rows = m.decode_parallel(&src, &input).unwrap();
    let term = |t: usize| rows.row(t)[reference[t] as usize - 3];
    let oracle = -(term(1) + term(3));
    assert!((s.tape.value(l).item().unwrap() - oracle).abs() < 1e-12);
    assert!(matches!(
        cmlm_loss(&mut s, &src, &reference, &[]),
        Err(ObjectiveError::EmptySubset)
    ));
}

#[test]
fn q_distribution_properties() {
    let q = q_distribution(&[1.0, 2.0], 1.0);
    assert!((q[0] - 0.2689).abs() < 1e-4 && (q[1] - 0.7311).abs() < 1e-4);
    let q = q_distribution(&[-50.0, -3.0, -0.1, -700.0], 1e-9);
    for v in q {
        assert!((v - 0.25).abs() < 1e-6);
    }
}

proptest! {
    #[test]
    fn q_sums_to_one_and_is_shift_invariant(
        l in proptest::collection::vec(-500.0f64..0.0, 1..40),
        alpha in 1e-6f64..10.0,
        shift in -100.0f64..100.0,
    ) {
        let q = q_distribution(&l, alpha);
        prop_assert!((q.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        let shifted: Vec<f64> = l.iter().map(|v| v + shift).collect();
        let q2 = q_distribution(&shifted, alpha);
        for (a, b) in q.iter().zip(&q2) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }
}

#[test]
fn cooccurrence_examples() {
    let s = HypothesisSample {
        length: 4,
        tokens: vec![3, 4, 5, 6],
        token_logprobs: vec![-0.1, -0.7, -1.3, -0.4],
        length_logprob: -2.0,
        mask: vec![],
        decoder_input: vec![UNK; 4],
    };
    let full = -2.0 - 0.1 - 0.7 - 1.3 - 0.4;
    assert!((segment_cooccurrence_logprob(&s) - full).abs() < 1e-12);
    let only_first = HypothesisSample {
        mask: vec![1, 2, 3],
        ..s.clone()
    };
    assert_eq!(segment_cooccurrence_logprob(&only_first), -2.0 - 0.1);
    let mixed = HypothesisSample {
        mask: vec![0, 2],
        ..s
    };
    assert!((segment_cooccurrence_logprob(&mixed) - (-2.0 - 0.7 - 0.4)).abs() < 1e-12);
}

fn sentence_batch() -> (Vec<Vec<TokenId>>, Vec<Vec<TokenId>>) {
    (
        vec![seq(&[3, 4, 5]), seq(&[6, 7]), seq(&[5, 5, 3, 4])],
        vec![seq(&[4, 5, 6]), seq(&[7, 3, 3]), seq(&[3, 4, 6, 7])],
    )
}

fn slices(v: &[Vec<TokenId>]) -> Vec<&[TokenId]> {
    v.iter().map(Vec::as_slice).collect()
}

#[test]
fn mo_loss_with_one_sample_is_negative_reward() {
    let m = model();
    let vocab = Vocab::synthetic(5);
    let cfg = MgmoConfig {
        k: 1,
        strategy: Strategy::Nc,
        ..MgmoConfig::default()
    };
    let (src, tgt) = sentence_batch();
    for step in 0..5 {
        let samples = mo_sample_phase(&m, &slices(&src[..1]), &slices(&tgt[..1]), &cfg, &vocab, step).unwrap();
        let r = Metric::Gleu
            .score(&samples[0].samples[0].tokens, &tgt[0], 6, &vocab)
            .unwrap()
            .value();
        assert_eq!(samples[0].rewards, vec![r]);
        let loss = mo_loss(&m, &src[0], &tgt[0], &cfg, &vocab, step).unwrap();
        assert_eq!(loss, -r);
        let loss = mgmo_loss(&m, &src[0], &tgt[0], &cfg, &vocab, step).unwrap();
        assert_eq!(loss, -r);
    }
}

#[test]
fn k1_mgmo_has_no_gradient_through_q() {
    let m = model();
    let vocab = Vocab::synthetic(5);
    let cfg = MgmoConfig {
        k: 1,
        ..MgmoConfig::default()
    };
    let (src, tgt) = sentence_batch();
    let samples = sample_phase(&m, &slices(&src), &slices(&tgt), &cfg, &vocab, 3).unwrap();
    let mut s = Session::new(&m, true);
    let loss = mgmo_batch_loss(&mut s, &slices(&src), &slices(&tgt), &samples, cfg.alpha).unwrap();
    let g = s.tape.backward(loss.objective).unwrap();
    for t in s.param_grads(&g) {
        assert!(t.data().iter().all(|v| v.abs() <= 1e-12));
    }
}

#[test]
fn equal_rewards_give_zero_gradient_and_loss_minus_c() {
    let m = model();
    let vocab = Vocab::synthetic(5);
    let cfg = MgmoConfig {
        alpha: 0.7,
        ..MgmoConfig::default()
    };
    let (src, tgt) = sentence_batch();
    let mut samples = sample_phase(&m, &slices(&src), &slices(&tgt), &cfg, &vocab, 0).unwrap();
    for s in &mut samples {
        s.rewards = vec![0.375; s.rewards.len()];
    }
    for mo in [false, true] {
        let mut s = Session::new(&m, true);
        let loss = if mo {
            mo_batch_loss(&mut s, &slices(&src), &slices(&tgt), &samples, cfg.alpha).unwrap()
        } else {
            mgmo_batch_loss(&mut s, &slices(&src), &slices(&tgt), &samples, cfg.alpha).unwrap()
        };
        assert!((s.tape.value(loss.objective).item().unwrap() + 0.375).abs() < 1e-12);
        let g = s.tape.backward(loss.objective).unwrap();
        for t in s.param_grads(&g) {
            assert!(t.data().iter().all(|v| v.abs() <= 1e-9));
        }
    }
}

#[test]
fn mo_loss_matches_hand_weighted_sum() {
    let m = model();
    let vocab = Vocab::synthetic(5);
    let cfg = MgmoConfig {
        k: 3,
        alpha: 0.3,
        strategy: Strategy::Nc,
        ..MgmoConfig::default()
    };
    let (src, tgt) = sentence_batch();
    let samples = mo_sample_phase(&m, &slices(&src[..1]), &slices(&tgt[..1]), &cfg, &vocab, 9).unwrap();
    let sent = &samples[0];
    // Full-sequence log-probabilities recomputed from fresh decodes.
    let len_p = m.predict_length(&src[0]).unwrap();
    let logp: Vec<f64> = sent
        .samples
        .iter()
        .map(|h| {
            let rows = m.decode_parallel(&src[0], &vec![UNK; h.length]).unwrap();
            let tok: f64 = h.tokens.iter().enumerate().map(|(t, &id)| rows.row(t)[id as usize - 3]).sum();
            len_p[h.length - 1].ln() + tok
        })
        .collect();
    let w: Vec<f64> = logp.iter().map(|l| (cfg.alpha * l).exp()).collect();
    let z: f64 = w.iter().sum();
    let hand: f64 = -w.iter().zip(&sent.rewards).map(|(w, r)| w / z * r).sum::<f64>();
    let got = mo_loss(&m, &src[0], &tgt[0], &cfg, &vocab, 9).unwrap();
    assert!((got - hand).abs() < 1e-12, "{got} vs {hand}");
}

#[test]
fn mgmo_nc_equals_mo_and_masks_are_empty() {
    let m = model();
    let vocab = Vocab::synthetic(5);
    let (src, tgt) = sentence_batch();
    let cfg = MgmoConfig {
        strategy: Strategy::Nc,
        alpha: 0.5,
        ..MgmoConfig::default()
    };
    for step in 0..10 {
        let a = sample_phase(&m, &slices(&src), &slices(&tgt), &cfg, &vocab, step).unwrap();
        let b = mo_sample_phase(&m, &slices(&src), &slices(&tgt), &cfg, &vocab, step).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().flat_map(|s| &s.samples).all(|h| h.mask.is_empty()));
        let mut s1 = Session::new(&m, false);
        let l1 = mgmo_batch_loss(&mut s1, &slices(&src), &slices(&tgt), &a, cfg.alpha).unwrap();
        let mut s2 = Session::new(&m, false);
        let l2 = mo_batch_loss(&mut s2, &slices(&src), &slices(&tgt), &b, cfg.alpha).unwrap();
        let (v1, v2) = (
            s1.tape.value(l1.total).item().unwrap(),
            s2.tape.value(l2.total).item().unwrap(),
        );
        assert!((v1 - v2).abs() <= 1e-12, "{v1} vs {v2}");
    }
}

#[test]
fn huge_gamma_np_reproduces_nc() {
    let m = model();
    let vocab = Vocab::synthetic(5);
    let (src, tgt) = sentence_batch();
    let nc = MgmoConfig {
        strategy: Strategy::Nc,
        ..MgmoConfig::default()
    };
    let np = MgmoConfig {
        strategy: Strategy::Np,
        gamma: 1e12,
        ..MgmoConfig::default()
    };
    for step in 0..10 {
        let a = sample_phase(&m, &slices(&src), &slices(&tgt), &nc, &vocab, step).unwrap();
        let b = sample_phase(&m, &slices(&src), &slices(&tgt), &np, &vocab, step).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn mgmo_loss_is_a_convex_combination_of_negated_rewards() {
    let m = model();
    let vocab = Vocab::synthetic(5);
    let (src, tgt) = sentence_batch();
    for strategy in Strategy::ALL {
        for metric in Metric::ALL {
            let cfg = MgmoConfig {
                strategy,
                metric,
                gamma: 1.5,
                alpha: 1.0,
                ..MgmoConfig::default()
            };
            for step in 0..3 {
                let samples = sample_phase(&m, &slices(&src), &slices(&tgt), &cfg, &vocab, step).unwrap();
                let mut s = Session::new(&m, false);
                let loss = mgmo_batch_loss(&mut s, &slices(&src), &slices(&tgt), &samples, cfg.alpha).unwrap();
                let v = s.tape.value(loss.objective).item().unwrap();
                assert!((-1.0..=0.0).contains(&v), "{strategy} {metric}: {v}");
                for sent in &samples {
                    let lo = sent.rewards.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = sent.rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    assert!(lo >= 0.0 && hi <= 1.0);
                }
            }
        }
    }
}

#[test]
fn observed_strategies_decode_the_reference_length() {
    let m = model();
    let vocab = Vocab::synthetic(5);
    let (src, tgt) = sentence_batch();
    for strategy in [Strategy::Pc, Strategy::Pp] {
        let cfg = MgmoConfig {
            strategy,
            gamma: 1.0,
            ..MgmoConfig::default()
        };
        let samples = sample_phase(&m, &slices(&src), &slices(&tgt), &cfg, &vocab, 2).unwrap();
        for (sent, reference) in samples.iter().zip(&tgt) {
            for h in &sent.samples {
                assert_eq!(h.length, reference.len());
                for (t, &x) in h.decoder_input.iter().enumerate() {
                    assert!(x == UNK || x == reference[t]);
                }
                if strategy == Strategy::Pc {
                    assert!(h.mask.is_empty());
                } else {
                    let revealed: Vec<usize> = (0..h.length).filter(|&t| h.decoder_input[t] != UNK).collect();
                    assert_eq!(revealed, h.mask);
                }
            }
        }
    }
}

#[test]
fn cmlm_and_xe_gradients_match_finite_differences() {
    let m = NatModel::new(micro_config(), 11).unwrap();
    assert!(m.param_count() <= 500);
    let (src, tgt) = (seq(&[3, 4, 7]), seq(&[5, 6, 3, 7]));
    let err = model_gradcheck(
        &m,
        |s| {
            let l = cmlm_batch_loss(s, &[&src], &[&tgt], &[vec![0, 2, 3]], 0.1).unwrap();
            l.total
        },
        1e-5,
    );
    assert!(err <= 1e-6, "cmlm: {err}");
    let err = model_gradcheck(
        &m,
        |s| {
            let enc = s.encode(&[&src]).unwrap();
            let dec = s
                .decode(
                    &enc,
                    &[mgmo::model::DecoderRequest {
                        sentence: 0,
                        input: vec![UNK; 4],
                    }],
                )
                .unwrap();
            xe_loss(&mut s.tape, dec.log_probs, &tgt).unwrap()
        },
        1e-5,
    );
    assert!(err <= 1e-6, "xe: {err}");
}

#[test]
fn mgmo_gradient_matches_finite_differences_with_frozen_samples() {
    let m = NatModel::new(micro_config(), 12).unwrap();
    let vocab = Vocab::synthetic(5);
    let src = vec![seq(&[3, 4, 7]), seq(&[6, 5])];
    let tgt = vec![seq(&[5, 6, 3, 7]), seq(&[4, 4, 3])];
    for (strategy, alpha) in [(Strategy::Np, 0.005), (Strategy::Np, 1.0), (Strategy::Pp, 1.0)] {
        let cfg = MgmoConfig {
            strategy,
            alpha,
            gamma: 1.2,
            k: 4,
            ..MgmoConfig::default()
        };
        let samples = sample_phase(&m, &slices(&src), &slices(&tgt), &cfg, &vocab, 1).unwrap();
        let err = model_gradcheck(
            &m,
            |s| {
                mgmo_batch_loss(s, &slices(&src), &slices(&tgt), &samples, alpha)
                    .unwrap()
                    .total
            },
            1e-5,
        );
        assert!(err <= 1e-3, "{strategy} alpha {alpha}: {err}");
    }
}

/// For `-sum_k p_k R_k` with detached rewards, autodiff must equal the
/// score-function form `-sum_k R_k p_k grad log p_k`.
#[test]
fn unnormalized_objective_matches_log_derivative_form() {
    // Two parameters; p_k = exp(a * f_k + b * g_k) for fixed features.
    let (f, g, r) = ([0.3, -1.2, 0.5], [1.0, 0.4, -0.7], [0.2, 0.9, 0.55]);
    let (a0, b0) = (0.8, -0.35);
    let mut tape = Tape::new();
    let a = tape.param(Tensor::scalar(a0));
    let b = tape.param(Tensor::scalar(b0));
    let mut terms = Vec::new();
    for k in 0..3 {
        let fa = tape.scale(a, f[k]);
        let gb = tape.scale(b, g[k]);
        let logp = tape.add(fa, gb).unwrap();
        let p = tape.exp(logp);
        terms.push(tape.scale(p, -r[k]));
    }
    let all = tape.concat(&terms).unwrap();
    let loss = tape.sum(all);
    let grads = tape.backward(loss).unwrap();
    let (ga, gb) = (grads.get(a).unwrap().item().unwrap(), grads.get(b).unwrap().item().unwrap());
    let (mut ha, mut hb) = (0.0, 0.0);
    for k in 0..3 {
        let p = (a0 * f[k] + b0 * g[k]).exp();
        ha -= r[k] * p * f[k];
        hb -= r[k] * p * g[k];
    }
    assert!((ga - ha).abs() <= 1e-9 && (gb - hb).abs() <= 1e-9);
}

