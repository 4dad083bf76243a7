use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{Dataset, Provenance};
use crate::gradcheck::{central_difference, relative_error};
use crate::optim::AdamConfig;
use crate::tokenizer::{Vocab, BOS, EOS};

fn toy_config(vocab_size: usize) -> LmConfig {
    LmConfig {
        n_layer: 2,
        n_head: 2,
        d_model: 8,
        d_ff: 16,
        max_seq_len: 10,
        vocab_size,
        dropout: 0.0,
    }
}

fn settings(steps: usize, lr: f64, seed: u64) -> TrainSettings {
    TrainSettings {
        optimizer: AdamConfig {
            lr,
            warmup_steps: 0,
            ..AdamConfig::lm_default()
        },
        steps,
        batch_size: 8,
        seed,
    }
}

#[test]
fn param_count_is_a_function_of_config() {
    for cfg in [toy_config(6), LmConfig::desk(73)] {
        let m = LmModel::new(cfg.clone(), 0).unwrap();
        assert_eq!(m.params().num_scalars(), cfg.num_params());
    }
    let deep = LmConfig {
        n_layer: 24,
        ..toy_config(6)
    };
    assert_eq!(LmModel::new(deep, 0).unwrap().params().len(), 2 + 24 * 11 + 2);
}

#[test]
fn config_validation_lists_problems() {
    let bad = LmConfig {
        n_layer: 0,
        n_head: 3,
        vocab_size: 4,
        ..toy_config(6)
    };
    match bad.validate() {
        Err(Error::Validation(p)) => assert_eq!(p.len(), 3, "{p:?}"),
        other => panic!("{other:?}"),
    }
    let cfg = toy_config(6);
    assert_eq!(LmConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
}

#[test]
fn single_token_logit_shape() {
    let m = LmModel::new(toy_config(6), 1).unwrap();
    let logits = lm_forward(&m, &[TokenSequence::new(vec![BOS])]).unwrap();
    assert_eq!(logits.shape(), &[1, 1, 6]);
}

#[test]
fn input_longer_than_context_is_rejected() {
    let m = LmModel::new(toy_config(6), 1).unwrap();
    let long = TokenSequence::new(vec![4; 11]);
    assert!(matches!(lm_forward(&m, &[long]), Err(Error::Length { .. })));
    assert!(matches!(
        lm_loss(&m, &[TokenSequence::new(vec![BOS])]),
        Err(Error::Length { .. })
    ));
}

#[test]
fn changing_the_last_token_leaves_earlier_logits_bit_identical() {
    let m = LmModel::new(toy_config(6), 2).unwrap();
    let a = TokenSequence::new(vec![BOS, 4, 5, 4, 4, 5, 3, 4]);
    let mut b = a.clone();
    b.ids[7] = 5;
    let la = lm_forward(&m, &[a]).unwrap();
    let lb = lm_forward(&m, &[b]).unwrap();
    assert_eq!(&la.data()[..7 * 6], &lb.data()[..7 * 6]);
    assert_ne!(&la.data()[7 * 6..], &lb.data()[7 * 6..]);
}

#[test]
fn uniform_model_loss_and_perplexity() {
    let mut m = LmModel::new(toy_config(6), 3).unwrap();
    m.zero_output_projection();
    let seqs = vec![TokenSequence::new(vec![BOS, 4, 5, EOS])];
    assert!((lm_loss(&m, &seqs).unwrap() - 6f64.ln()).abs() < 1e-12);

    let v = Vocab::build("ab").unwrap();
    let ds = Dataset::from_lines(&v, ["ab", "ba", "aab"], Provenance::Real, 10);
    assert!((perplexity(&m, &ds).unwrap() - 6.0).abs() < 1e-9);
}

#[test]
fn loss_equals_direct_token_summation() {
    let m = LmModel::with_init_std(toy_config(7), 4, 0.3).unwrap();
    let seqs = vec![
        TokenSequence::new(vec![BOS, 4, 6, 5, EOS]),
        TokenSequence::new(vec![BOS, 5, 5, 4, 6]),
    ];
    let logits = lm_forward(&m, &seqs).unwrap();
    let mut total = 0.0;
    let mut count = 0;
    for (b, s) in seqs.iter().enumerate() {
        for t in 0..s.len() - 1 {
            let row = &logits.data()[(b * 5 + t) * 7..][..7];
            let z: f64 = row.iter().map(|l| l.exp()).sum();
            total -= (row[s.ids[t + 1]].exp() / z).ln();
            count += 1;
        }
    }
    let loss = lm_loss(&m, &seqs).unwrap();
    assert!((loss - total / count as f64).abs() < 1e-10);
}

#[test]
fn every_parameter_gradient_matches_finite_differences() {
    let model = LmModel::with_init_std(toy_config(6), 5, 0.5).unwrap();
    let seqs = [
        TokenSequence::new(vec![BOS, 4, 5, 5, 3, EOS]),
        TokenSequence::new(vec![BOS, 5, 4, EOS]),
    ];
    let refs: Vec<&TokenSequence> = seqs.iter().collect();
    let batch = Batch::from_sequences(&refs).unwrap();

    let mut tape = Tape::new();
    let vars = model.params().bind(&mut tape, true);
    let loss = model.loss_on_tape(&mut tape, &vars, &batch, None).unwrap();
    tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (i, p) in model.params().iter().enumerate() {
        let analytic = tape.grad(vars[i]).map(<[f64]>::to_vec).unwrap_or(vec![0.0; p.value.numel()]);
        let numeric = central_difference(p.value.data(), 1e-5, |probe| {
            let mut m = model.clone();
            m.params_mut().iter_mut().nth(i).unwrap().value.data_mut().copy_from_slice(probe);
            let mut tape = Tape::new();
            let vars = m.params().bind(&mut tape, false);
            let loss = m.loss_on_tape(&mut tape, &vars, &batch, None).unwrap();
            tape.value(loss).item()
        });
        for (a, n) in analytic.iter().zip(&numeric) {
            let err = relative_error(*a, *n);
            assert!(err < 1e-4, "{}: analytic {a} numeric {n}", p.name);
            worst = worst.max(err);
        }
    }
    assert!(worst < 1e-4);
}

#[test]
fn zero_steps_leave_the_model_unchanged() {
    let v = Vocab::build("ab").unwrap();
    let ds = Dataset::from_lines(&v, ["ab"], Provenance::Real, 10);
    let mut m = LmModel::new(toy_config(v.len()), 6).unwrap();
    let before = m.clone();
    let curve = train_lm(&mut m, &ds, &settings(0, 1e-3, 1)).unwrap();
    assert!(curve.is_empty());
    assert_eq!(m, before);
    assert_eq!(curve.to_csv(), "step,loss,learning_rate\n");
}

#[test]
fn training_is_deterministic() {
    let v = Vocab::build("abc").unwrap();
    let ds = Dataset::from_lines(&v, ["abc", "cab", "bca", "aa"], Provenance::Real, 10);
    let cfg = LmConfig {
        dropout: 0.1,
        ..toy_config(v.len())
    };
    let run = || {
        let mut m = LmModel::new(cfg.clone(), 7).unwrap();
        let curve = train_lm(&mut m, &ds, &settings(20, 1e-2, 9)).unwrap();
        (m, curve)
    };
    let (m1, c1) = run();
    let (m2, c2) = run();
    assert_eq!(m1, m2);
    assert_eq!(c1.to_csv(), c2.to_csv());
}

#[test]
fn overfit_single_sequence_then_reproduce_it() {
    let text = "to be or not";
    let v = Vocab::build(text).unwrap();
    let ds = Dataset::from_lines(&v, [text], Provenance::Real, 16);
    let cfg = LmConfig {
        n_layer: 2,
        n_head: 2,
        d_model: 32,
        d_ff: 64,
        max_seq_len: 16,
        vocab_size: v.len(),
        dropout: 0.0,
    };
    let mut m = LmModel::new(cfg, 11).unwrap();
    let curve = train_lm(&mut m, &ds, &settings(200, 1e-2, 3)).unwrap();
    assert_eq!(curve.rows.len(), 200);
    assert!(lm_loss(&m, ds.sequences()).unwrap() < 0.01);
    assert!(perplexity(&m, &ds).unwrap() < 1.05);
    assert!(next_token_accuracy(&m, &ds).unwrap() >= 0.99);

    let full = &ds.sequences()[0];
    let prefix = TokenSequence::new(full.ids[..4].to_vec());
    let out = generate(&m, &prefix, 32, 0.0, 1).unwrap();
    assert_eq!(&out, full);
    assert_eq!(generate(&m, &prefix, 32, 0.0, 999).unwrap(), out);
}

#[test]
fn generate_edge_cases() {
    let m = LmModel::new(toy_config(6), 12).unwrap();
    let prefix = TokenSequence::new(vec![BOS, 4]);
    assert_eq!(generate(&m, &prefix, 0, 1.0, 3).unwrap(), prefix);
    let from_empty = generate(&m, &TokenSequence::new(vec![]), 3, 1.0, 3).unwrap();
    assert_eq!(from_empty.ids[0], BOS);
    assert!(from_empty.len() <= 4);
    let a = generate(&m, &prefix, 5, 1.0, 42).unwrap();
    assert_eq!(a, generate(&m, &prefix, 5, 1.0, 42).unwrap());
    let long = TokenSequence::new(vec![4; 10]);
    assert!(matches!(generate(&m, &long, 1, 1.0, 0), Err(Error::Length { .. })));
    let out = generate(&m, &prefix, 100, 1.0, 8).unwrap();
    assert!(out.len() <= 10);
}

#[test]
fn uniform_model_accuracy_is_chance_level() {
    let v = Vocab::build("ab").unwrap();
    assert_eq!(v.len(), 6);
    let mut m = LmModel::new(toy_config(6), 13).unwrap();
    m.zero_output_projection();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut ds = Dataset::new(&v);
    // ids uniform over the whole vocabulary; EOS is excluded so every position is scored
    let symbols = [0usize, 1, 3, 4, 5];
    for _ in 0..300 {
        let ids = (0..10).map(|_| symbols[rng.random_range(0..5)]).collect();
        ds.push(TokenSequence::new(ids), Provenance::Real);
    }
    let stats = evaluate(&m, &ds).unwrap();
    assert!(stats.tokens >= 2000);
    let acc = stats.accuracy();
    assert!((acc - 1.0 / 5.0).abs() < 0.05, "accuracy {acc}");
}

#[test]
fn constant_model_on_single_class_data_is_perfect() {
    let v = Vocab::build("ab").unwrap();
    let mut m = LmModel::new(toy_config(6), 14).unwrap();
    m.zero_output_projection();
    // all-equal logits predict id 0; data whose every target is 0
    let mut ds = Dataset::new(&v);
    ds.push(TokenSequence::new(vec![BOS, 0, 0, 0]), Provenance::Real);
    assert_eq!(next_token_accuracy(&m, &ds).unwrap(), 1.0);
}

#[test]
fn perplexity_is_exp_of_whole_set_loss() {
    let m = LmModel::with_init_std(toy_config(6), 15, 0.3).unwrap();
    let v = Vocab::build("ab").unwrap();
    let ds = Dataset::from_lines(&v, ["abba", "ba", "bbbab"], Provenance::Real, 10);
    let loss = lm_loss(&m, ds.sequences()).unwrap();
    let ppl = perplexity(&m, &ds).unwrap();
    assert!((ppl - loss.exp()).abs() < 1e-12 * ppl);
}
