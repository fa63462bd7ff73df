mod common;

use asp_core::data::VocabSpace;
use asp_core::model::{
    composition_scores, forward_tape, loss, loss_tape, predict, predict_feasible, Mode, ModelConfig, ModelError,
    ModelParams, ScoreBundle,
};
use asp_core::tensor::{Adam, AdamConfig, Tape, Tensor};
use common::*;
use proptest::prelude::*;
use rand::Rng;

fn vocab(n: usize, m: usize) -> VocabSpace {
    VocabSpace::new(
        (0..n).map(|i| format!("a{i}")).collect(),
        (0..m).map(|i| format!("o{i}")).collect(),
    )
    .unwrap()
}

fn ce_oracle(logits: &Tensor, targets: &[usize]) -> f64 {
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        total += lse - row[t];
    }
    total / targets.len() as f64
}

#[test]
fn attention_rows_sum_to_one() {
    for seed in 0..5 {
        let p = micro_params(seed);
        for w in p.attention_weights().unwrap() {
            assert_eq!(w.shape(), &[4, 4]);
            for i in 0..4 {
                let s: f64 = w.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn identical_tokens_attend_uniformly() {
    let mut r = rng(3);
    let tok = random_tensor(&mut r, &[1, 4]);
    let p = ModelParams::new(micro_config(), tok.clone(), tok, &mut r).unwrap();
    for w in p.attention_weights().unwrap() {
        for v in w.data() {
            assert!((v - 0.5).abs() < 1e-15, "{v}");
        }
    }
}

#[test]
#[allow(clippy::needless_range_loop)]
fn single_head_identity_attention_matches_oracle() {
    let mut r = rng(11);
    let x = random_tensor(&mut r, &[3, 4]);
    let wq = random_tensor(&mut r, &[4, 4]);
    let wk = random_tensor(&mut r, &[4, 4]);
    let (ow, oo) = attention_identity_oracle(&x, &wq, &wk);
    let (aw, ao) = attention_identity_actual(&x, &wq, &wk);
    for i in 0..3 {
        for j in 0..3 {
            assert!((aw.at(i, j) - ow[i][j]).abs() < 1e-10);
        }
        for c in 0..4 {
            assert!((ao.at(i, c) - oo[i][c]).abs() < 1e-10);
        }
    }
}

#[test]
fn micro_model_gradients_match_finite_differences() {
    for seed in 0..10 {
        let p = micro_params(100 + seed);
        let z = random_tensor(&mut rng(200 + seed), &[3, 6]);
        let err = model_gradcheck(&p, &z, &[0, 1, 1], &[1, 0, 1]);
        assert!(err < 1e-3, "seed {seed}: relative error {err}");
    }
}

#[test]
fn eval_forward_is_batch_invariant() {
    let p = micro_params(5);
    let z = random_tensor(&mut rng(6), &[7, 6]);
    let full = p.forward(&z, Mode::Eval).unwrap();
    for i in 0..7 {
        let one = p.forward(&z.select_rows(&[i]).unwrap(), Mode::Eval).unwrap();
        for (a, b) in one.attr_logits.row(0).iter().zip(full.attr_logits.row(i)) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in one.obj_logits.row(0).iter().zip(full.obj_logits.row(i)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn logits_bounded_by_temperature() {
    let p = micro_params(8);
    let z = random_tensor(&mut rng(9), &[10, 6]);
    let s = p.forward(&z, Mode::Eval).unwrap();
    let t = p.config.temperature;
    assert!(s.attr_logits.data().iter().chain(s.obj_logits.data()).all(|v| v.abs() <= t + 1e-12));
}

#[test]
fn permuting_attribute_tokens_permutes_logit_columns() {
    let mut r = rng(21);
    let cfg = ModelConfig {
        d_word: 6,
        d_img: 5,
        d_shared: 7,
        heads: 3,
        ..ModelConfig::default()
    };
    let attr = random_tensor(&mut r, &[4, 6]);
    let obj = random_tensor(&mut r, &[3, 6]);
    let p = ModelParams::new(cfg, attr.clone(), obj, &mut r).unwrap();
    let perm = [2usize, 0, 3, 1];
    let mut q = p.clone();
    q.attr_tokens = attr.select_rows(&perm).unwrap();
    let z = random_tensor(&mut r, &[5, 5]);
    let a = p.forward(&z, Mode::Eval).unwrap();
    let b = q.forward(&z, Mode::Eval).unwrap();
    for i in 0..5 {
        for (k, &src) in perm.iter().enumerate() {
            assert!((b.attr_logits.at(i, k) - a.attr_logits.at(i, src)).abs() < 1e-10);
        }
        for o in 0..3 {
            assert!((b.obj_logits.at(i, o) - a.obj_logits.at(i, o)).abs() < 1e-10);
        }
    }
}

#[test]
fn loss_examples() {
    let u = ScoreBundle::from_logits(Tensor::zeros(&[1, 4]), Tensor::zeros(&[1, 4])).unwrap();
    assert!((loss(&u, &[2], &[3]).unwrap().item() - 2.0 * 4f64.ln()).abs() < 1e-12);
    let sure = ScoreBundle::from_logits(
        Tensor::matrix(1, 2, vec![30.0, -30.0]).unwrap(),
        Tensor::matrix(1, 2, vec![-30.0, 30.0]).unwrap(),
    )
    .unwrap();
    assert!(loss(&sure, &[0], &[1]).unwrap().item() < 1e-20);

    let mut r = rng(31);
    let b = ScoreBundle::from_logits(random_tensor(&mut r, &[4, 3]), random_tensor(&mut r, &[4, 5])).unwrap();
    let (ta, to) = ([0, 2, 1, 2], [4, 0, 3, 3]);
    let expected = ce_oracle(&b.attr_logits, &ta) + ce_oracle(&b.obj_logits, &to);
    assert!((loss(&b, &ta, &to).unwrap().item() - expected).abs() < 1e-10);
    assert!(loss(&b, &[0, 3, 0, 0], &to).is_err());
}

#[test]
fn composition_scores_match_outer_product() {
    let mut r = rng(41);
    let b = random_bundle(&mut r, 2, 3, 4);
    let s = composition_scores(&b);
    assert_eq!(s.shape(), &[2, 12]);
    for i in 0..2 {
        for a in 0..3 {
            for o in 0..4 {
                assert_eq!(s.at(i, a * 4 + o), b.attr_probs.at(i, a) * b.obj_probs.at(i, o));
            }
        }
        assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn one_hot_probabilities_pick_one_composition() {
    let b = ScoreBundle::from_logits(
        Tensor::matrix(1, 3, vec![-800.0, 800.0, -800.0]).unwrap(),
        Tensor::matrix(1, 2, vec![800.0, -800.0]).unwrap(),
    )
    .unwrap();
    let s = composition_scores(&b);
    assert_eq!(s.data(), &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn uniform_probabilities_predict_index_zero() {
    let b = ScoreBundle::from_logits(Tensor::zeros(&[2, 3]), Tensor::zeros(&[2, 4])).unwrap();
    assert_eq!(predict(&b, &vocab(3, 4)).unwrap(), vec![(0, 0), (0, 0)]);
}

#[test]
fn predict_factorizes_and_matches_scan() {
    let mut r = rng(51);
    for _ in 0..50 {
        let (n, m) = (r.random_range(1..8), r.random_range(1..8));
        let b = random_bundle(&mut r, 4, n, m);
        let got = predict(&b, &vocab(n, m)).unwrap();
        assert_eq!(got, brute_force_predict(&b, None));
        let factored: Vec<_> = b
            .attr_probs
            .argmax_rows()
            .into_iter()
            .zip(b.obj_probs.argmax_rows())
            .collect();
        assert_eq!(got, factored);
    }
}

#[test]
fn predict_feasible_matches_masked_scan() {
    let mut r = rng(61);
    for _ in 0..50 {
        let (n, m) = (r.random_range(1..8), r.random_range(1..8));
        let b = random_bundle(&mut r, 4, n, m);
        let mut mask: Vec<bool> = (0..n * m).map(|_| r.random_bool(0.4)).collect();
        mask[r.random_range(0..n * m)] = true;
        let v = vocab(n, m);
        assert_eq!(predict_feasible(&b, &v, &mask).unwrap(), brute_force_predict(&b, Some(&mask)));
        let all = vec![true; n * m];
        assert_eq!(predict_feasible(&b, &v, &all).unwrap(), predict(&b, &v).unwrap());
        let mut single = vec![false; n * m];
        let k = r.random_range(0..n * m);
        single[k] = true;
        assert!(predict_feasible(&b, &v, &single)
            .unwrap()
            .iter()
            .all(|&c| c == v.composition(k)));
    }
}

#[test]
fn empty_mask_is_rejected() {
    let b = ScoreBundle::from_logits(Tensor::zeros(&[1, 2]), Tensor::zeros(&[1, 2])).unwrap();
    assert!(matches!(
        predict_feasible(&b, &vocab(2, 2), &[false; 4]),
        Err(ModelError::EmptyFeasibleSet)
    ));
}

#[test]
fn temperature_does_not_change_predictions() {
    let mut r = rng(71);
    let p = micro_params(72);
    let z = random_tensor(&mut r, &[20, 6]);
    let v = vocab(2, 2);
    let base = predict(&p.forward(&z, Mode::Eval).unwrap(), &v).unwrap();
    for t in [0.5, 1.0, 5.0, 60.0] {
        let mut q = p.clone();
        q.config.temperature = t;
        assert_eq!(predict(&q.forward(&z, Mode::Eval).unwrap(), &v).unwrap(), base);
    }
}

#[test]
fn indivisible_heads_are_a_config_error() {
    let cfg = ModelConfig {
        heads: 3,
        d_word: 4,
        ..ModelConfig::default()
    };
    let r = ModelParams::new(cfg, Tensor::zeros(&[1, 4]), Tensor::zeros(&[1, 4]), &mut rng(0));
    assert!(matches!(r, Err(ModelError::Config(_))));
}

#[test]
fn overfits_a_single_sample() {
    let mut r = rng(81);
    let cfg = ModelConfig {
        d_word: 8,
        d_img: 6,
        d_shared: 8,
        heads: 2,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let mut p = ModelParams::new(cfg, random_tensor(&mut r, &[3, 8]), random_tensor(&mut r, &[4, 8]), &mut r).unwrap();
    let z = random_tensor(&mut r, &[1, 6]);
    let (ta, to) = ([2usize], [1usize]);
    let mut adam = Adam::new(AdamConfig::default());
    for _ in 0..200 {
        let mut tape = Tape::new();
        let b = p.bind(&mut tape);
        let zv = tape.constant(z.clone());
        let s = forward_tape(&mut tape, &p.config, &b.weights, b.attr_tokens, b.obj_tokens, zv, &mut Mode::Eval).unwrap();
        let l = loss_tape(&mut tape, &s, &ta, &to).unwrap();
        let g = tape.backward(l).unwrap();
        let grads: Vec<Tensor> = b.weights.named().into_iter().map(|(_, &v)| g.wrt(v)).collect();
        adam.step(p.weights.slots_mut(), &grads).unwrap();
    }
    let out = p.forward(&z, Mode::Eval).unwrap();
    assert_eq!(out.attr_probs.argmax_rows(), vec![2]);
    assert_eq!(out.obj_probs.argmax_rows(), vec![1]);
    assert!(loss(&out, &ta, &to).unwrap().item() < 0.1);
}

#[test]
fn checkpoint_forward_is_bit_identical() {
    let p = micro_params(91);
    let q = asp_core::model::decode_checkpoint(&asp_core::model::encode_checkpoint(&p)).unwrap();
    let z = random_tensor(&mut rng(92), &[4, 6]);
    assert_eq!(p.forward(&z, Mode::Eval).unwrap(), q.forward(&z, Mode::Eval).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn composition_rows_are_distributions(seed in any::<u64>(), n in 1usize..9, m in 1usize..9) {
        let b = random_bundle(&mut rng(seed), 3, n, m);
        let s = composition_scores(&b);
        for i in 0..3 {
            prop_assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(s.row(i).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn restricting_the_mask_never_raises_the_chosen_score(seed in any::<u64>(), n in 1usize..7, m in 1usize..7) {
        let mut r = rng(seed);
        let b = random_bundle(&mut r, 2, n, m);
        let v = vocab(n, m);
        let big: Vec<bool> = (0..n * m).map(|_| r.random_bool(0.7)).collect();
        let mut small: Vec<bool> = big.iter().map(|&f| f && r.random_bool(0.5)).collect();
        let Some(k) = big.iter().position(|&f| f) else { return Ok(()) };
        small[k] = true;
        let s = composition_scores(&b);
        let pb = predict_feasible(&b, &v, &big).unwrap();
        let ps = predict_feasible(&b, &v, &small).unwrap();
        for i in 0..2 {
            let sb = s.at(i, v.composition_index(pb[i].0, pb[i].1));
            let ss = s.at(i, v.composition_index(ps[i].0, ps[i].1));
            prop_assert!(sb >= ss);
        }
    }
}
