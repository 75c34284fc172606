use super::*;
use crate::dataset::SourceTag;
use crate::model::{LmSpec, PositionKind};
use crate::tensor::finite_diff_check;

fn spec() -> LmSpec {
    LmSpec {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: 30,
        max_seq: 40,
        position_kind: PositionKind::LearnedAbsolute,
    }
}

fn lm<T: Real>() -> LmParams<T> {
    let mut p = LmParams::<T>::init(&spec(), 3).unwrap();
    for (_, t) in p.named_mut() {
        if t.shape().len() == 2 {
            t.data_mut().iter_mut().for_each(|v| *v *= T::lit(10.0));
        }
    }
    p
}

fn prompt() -> Prompt {
    Prompt {
        sys: vec![5, 6, 7],
        user: vec![8],
    }
}

fn pairs<T: Real>(target: &LmParams<T>, count: usize, n: usize) -> Vec<InversionPair<T>> {
    let chunks: Vec<Vec<TokenId>> = (0..count)
        .map(|i| {
            (0..n)
                .map(|j| ((i * 7 + j * 3) % 25 + 4) as TokenId)
                .collect()
        })
        .collect();
    crate::dataset::build_pairs(target, &chunks, 1, SourceTag::InDistribution, false).unwrap()
}

fn adapter<T: Real>(k: usize) -> AdapterParams<T> {
    let mut a = AdapterParams::init(AdapterConfig::new(16, 16, 0.5, k), 11).unwrap();
    // open the gate so the MLP branch matters
    a.gate.data_mut()[0] = T::lit(0.7);
    a
}

fn cfg(scheme: Scheme) -> TrainConfig {
    TrainConfig {
        scheme,
        epochs: 2,
        batch_size: 4,
        seed: 9,
        ..Default::default()
    }
}

/// Direct evaluation: full forward over the concatenated input and the
/// smoothed cross-entropy written out per position.
fn oracle_loss(
    decoder: &Decoder<'_, f64>,
    x: &Tensor<f64>,
    prefix: usize,
    s: &[TokenId],
    eps: f64,
) -> f64 {
    let logits = decoder.forward_embeddings(x).unwrap();
    let v = decoder.spec().vocab_size;
    let mut total = 0.0;
    for (t, &tok) in s.iter().enumerate() {
        let row = logits.row(prefix - 1 + t);
        let max = row.iter().cloned().fold(f64::MIN, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        let q = smoothed_targets(tok, v, eps);
        total -= q.iter().zip(row).map(|(qi, z)| qi * (z - lse)).sum::<f64>();
    }
    total / s.len() as f64
}

fn concat(parts: &[&Tensor<f64>]) -> Tensor<f64> {
    let d = parts[0].shape()[1];
    let data: Vec<f64> = parts
        .iter()
        .flat_map(|p| p.data().iter().copied())
        .collect();
    let rows = data.len() / d;
    Tensor::from_vec([rows, d], data).unwrap()
}

#[test]
fn smoothed_target_distribution() {
    let q = smoothed_targets(2, 5, 0.075);
    assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    assert!((q[2] - (1.0 - 0.075 + 0.015)).abs() < 1e-15);
    assert!((q[0] - 0.015).abs() < 1e-15);
    assert_eq!(smoothed_targets(0, 3, 0.0), vec![1.0, 0.0, 0.0]);
}

#[test]
fn sequence_loss_matches_direct_evaluation() {
    let base = lm::<f64>();
    let dec = Decoder::new(&base);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x_e = Tensor::normal([3, 16], 1.0, &mut rng);
    let x_sys = base.embed_tokens(&[5, 6]).unwrap();
    let x_u = base.embed_tokens(&[8]).unwrap();
    let s = [9, 10, 11, 12];
    let got = sequence_loss(&dec, &x_e, &x_sys, &x_u, &s, 0.075).unwrap();
    let teacher = base.embed_tokens(&s[..3]).unwrap();
    let want = oracle_loss(&dec, &concat(&[&x_e, &x_sys, &x_u, &teacher]), 6, &s, 0.075);
    assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    // single-token target: only the last prefix row predicts
    let got1 = sequence_loss(&dec, &x_e, &x_sys, &x_u, &s[..1], 0.0).unwrap();
    let want1 = oracle_loss(&dec, &concat(&[&x_e, &x_sys, &x_u]), 6, &s[..1], 0.0);
    assert!((got1 - want1).abs() < 1e-10);
    assert!(matches!(
        sequence_loss(&dec, &x_e, &x_sys, &x_u, &[1; 40], 0.0),
        Err(Error::Length { .. })
    ));
}

#[test]
fn batch_loss_is_mean_of_sequence_losses() {
    let base = lm::<f64>();
    let ps = pairs(&base, 3, 5);
    let a = adapter::<f64>(2);
    let pr = prompt();
    let dec = Decoder::new(&base);
    let tail = pr.embeddings(&base).unwrap();
    let mut want = 0.0;
    for p in &ps {
        let x_e = a.project(&p.h).unwrap();
        let teacher = base.embed_tokens(&p.tokens[..4]).unwrap();
        want += oracle_loss(
            &dec,
            &concat(&[&x_e, &tail, &teacher]),
            2 + pr.len(),
            &p.tokens,
            0.075,
        );
    }
    want /= 3.0;
    let got = mean_loss(&a, &dec, &ps, &pr, 0.075, true, 8).unwrap();
    assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    // unpositioned prefix changes the loss and matches the decoder view
    let unpos = TrainConfig {
        prefix_positions: false,
        ..Default::default()
    };
    let dec2 = decoder_for(&unpos, &base, None, 2);
    let p = &ps[0];
    let x_e = a.project(&p.h).unwrap();
    let teacher = base.embed_tokens(&p.tokens[..4]).unwrap();
    let want2 = oracle_loss(
        &dec2,
        &concat(&[&x_e, &tail, &teacher]),
        2 + pr.len(),
        &p.tokens,
        0.075,
    );
    let got2 = mean_loss(&a, &dec2, &ps[..1], &pr, 0.075, false, 8).unwrap();
    assert!((got2 - want2).abs() < 1e-10);
    assert!(
        (got2 - oracle_loss(&dec, &concat(&[&x_e, &tail, &teacher]), 6, &p.tokens, 0.075)).abs()
            > 1e-6
    );
}

#[test]
fn gradient_through_adapter_and_decoder() {
    let base = lm::<f64>();
    let a = adapter::<f64>(2);
    let pr = prompt();
    let seqs: [&[TokenId]; 2] = [&[9, 10, 11], &[12, 4, 20]];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = Tensor::normal([2, 16], 1.0, &mut rng);
    let report = finite_diff_check(
        |tape, x| {
            let ba = a.bind(tape);
            let lm = base.bind(tape, None)?;
            batch_loss_on_tape(tape, &ba, &a.config, &lm, x, &seqs, &pr, 0.075, true, None)
        },
        &h,
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn adapter_only_freezes_decoder_and_learns() {
    let base = lm::<f32>();
    let before = base.checksum();
    let ps = pairs(&base, 8, 4);
    let c = TrainConfig {
        epochs: 150,
        lr_adapter: Some(1e-2),
        ..cfg(Scheme::AdapterOnly)
    };
    let opts = RunOptions {
        measure_loss: true,
        ..Default::default()
    };
    let (trained, report) =
        train_adapter_only(&c, adapter(2), &base, &ps, &prompt(), &opts).unwrap();
    assert_eq!(base.checksum(), before);
    assert_eq!(report.steps, 300);
    assert_eq!(report.epoch_losses.len(), 150);
    let (init, fin) = (report.initial_loss.unwrap(), report.final_loss.unwrap());
    assert!(fin < init - 0.3, "{init} -> {fin}");
    assert_ne!(trained, adapter(2));
}

#[test]
fn joint_starts_from_the_adapter_only_state() {
    let base = lm::<f64>();
    let before = base.checksum();
    let ps = pairs(&base, 6, 4);
    let opts = RunOptions::default();
    let c_a = TrainConfig {
        max_steps: Some(1),
        ..cfg(Scheme::AdapterOnly)
    };
    let c_j = TrainConfig {
        max_steps: Some(3),
        ..cfg(Scheme::Joint)
    };
    let (_, ra) = train_adapter_only(&c_a, adapter(2), &base, &ps, &prompt(), &opts).unwrap();
    let (_, lora, rj) = train_joint(&c_j, adapter(2), &base, &ps, &prompt(), &opts).unwrap();
    // B = 0 at the start, so the first loss is the adapter-only loss
    assert!((ra.step_losses[0] - rj.step_losses[0]).abs() < 1e-12);
    assert_eq!(base.checksum(), before);
    assert_eq!(lora.pairs.len(), 4);
    assert!(lora
        .pairs
        .iter()
        .any(|p| p.b.data().iter().any(|&x| x != 0.0)));
}

#[test]
fn resume_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let base = lm::<f32>();
    let ps = pairs(&base, 10, 3);
    let c = TrainConfig {
        epochs: 3,
        ..cfg(Scheme::Joint)
    };
    let full = RunOptions {
        log_path: Some(dir.path().join("full.jsonl")),
        measure_loss: true,
        ..Default::default()
    };
    let (a_full, l_full, r_full) =
        train_joint(&c, adapter(2), &base, &ps, &prompt(), &full).unwrap();
    assert_eq!(read_log(&dir.path().join("full.jsonl")).unwrap().len(), 9);

    let state = dir.path().join("state.bin");
    let part = RunOptions {
        log_path: Some(dir.path().join("part.jsonl")),
        checkpoint_path: Some(state.clone()),
        stop_after: Some(4),
        measure_loss: true,
    };
    let (_, _, r_part) = train_joint(&c, adapter(2), &base, &ps, &prompt(), &part).unwrap();
    assert_eq!(r_part.steps, 4);
    assert_eq!(r_part.final_loss, None);
    let (s, r) = resume(&c, &state, &base, &ps, &prompt(), &part).unwrap();
    assert_eq!(r.steps, 9);
    assert!(s
        .adapter
        .named()
        .iter()
        .zip(a_full.named())
        .all(|((_, x), (_, y))| x.max_abs_diff(y) <= 1e-6));
    let lora = s.lora.unwrap();
    assert!(lora
        .named()
        .iter()
        .zip(l_full.named())
        .all(|((_, x), (_, y))| x.max_abs_diff(y) <= 1e-6));
    assert!((r.final_loss.unwrap() - r_full.final_loss.unwrap()).abs() <= 1e-6);
    assert_eq!(r.step_losses, r_full.step_losses);
    let log = read_log(&dir.path().join("part.jsonl")).unwrap();
    let steps: Vec<u64> = log.iter().map(|l| l["step"].as_u64().unwrap()).collect();
    assert_eq!(steps, (0..9).collect::<Vec<_>>());
}

#[test]
fn divergence_is_reported() {
    let base = lm::<f32>();
    let ps = pairs(&base, 4, 3);
    let c = TrainConfig {
        lr_adapter: Some(1e40),
        warmup_ratio: 0.0,
        ..cfg(Scheme::AdapterOnly)
    };
    let err = train_adapter_only(
        &c,
        adapter(1),
        &base,
        &ps,
        &prompt(),
        &RunOptions::default(),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Divergence { step: 0, .. }), "{err:?}");
}

#[test]
fn contract_violations() {
    let mut base = lm::<f32>();
    let ps = pairs(&base, 4, 3);
    let c = cfg(Scheme::AdapterOnly);
    let o = RunOptions::default();
    assert!(matches!(
        train_adapter_only(&c, adapter(1), &base, &[], &prompt(), &o),
        Err(Error::Contract(_))
    ));
    let mixed: Vec<_> = ps.iter().cloned().chain(pairs(&base, 1, 4)).collect();
    assert!(matches!(
        train_adapter_only(&c, adapter(1), &base, &mixed, &prompt(), &o),
        Err(Error::Contract(_))
    ));
    let bad = TrainConfig {
        label_smoothing: 1.5,
        ..c.clone()
    };
    assert!(matches!(
        train_adapter_only(&bad, adapter(1), &base, &ps, &prompt(), &o),
        Err(Error::Config(_))
    ));
    base.set_requires_grad(true);
    assert!(matches!(
        train_adapter_only(&c, adapter(1), &base, &ps, &prompt(), &o),
        Err(Error::Contract(_))
    ));
}

#[test]
fn default_learning_rates() {
    assert_eq!(cfg(Scheme::AdapterOnly).lr_adapter(), 1e-3);
    assert_eq!(cfg(Scheme::Joint).lr_adapter(), 5e-4);
    assert_eq!(TrainConfig::default().lr_lora, 2e-4);
}

#[test]
fn inversion_respects_limits() {
    let base = lm::<f32>();
    let ps = pairs(&base, 5, 3);
    let a = adapter::<f32>(2);
    let hs: Vec<&Tensor<f32>> = ps.iter().map(|p| &p.h).collect();
    let dec = Decoder::new(&base);
    let out = invert(&a, &dec, &prompt(), &hs, 6).unwrap();
    assert_eq!(out.len(), 5);
    assert!(out.iter().all(|o| o.len() <= 6 && !o.contains(&0)));
    // matches one-at-a-time decoding
    let tail = prompt().embeddings(&base).unwrap();
    for (h, o) in hs.iter().zip(&out) {
        let x_e = a.project(h).unwrap();
        let mut rows = x_e.data().to_vec();
        rows.extend_from_slice(tail.data());
        let prefix = Tensor::from_vec([2 + 4, 16], rows).unwrap();
        assert_eq!(&dec.generate_greedy(&prefix, 6).unwrap(), o);
    }
}

#[test]
fn loss_is_permutation_invariant_within_a_batch() {
    let base = lm::<f64>();
    let ps = pairs(&base, 5, 3);
    let a = adapter::<f64>(3);
    let dec = Decoder::new(&base);
    let fwd = mean_loss(&a, &dec, &ps, &prompt(), 0.075, true, 8).unwrap();
    let rev: Vec<_> = ps.iter().rev().cloned().collect();
    let back = mean_loss(&a, &dec, &rev, &prompt(), 0.075, true, 8).unwrap();
    assert!((fwd - back).abs() < 1e-12);
}
