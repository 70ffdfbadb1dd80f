mod common;

use common::{basis, engineered_encoders, identity_mapping, triplet, CAPTION_WORDS};
use denoise_i2w::pcm::{
    align_loss, compose_loss, loss_only, total_loss_and_grads, GradCheckConfig, GradCheckProblem, LossTerms,
    ObjectiveConfig,
};
use denoise_i2w::ptc::PseudoTriplet;

fn engineered_batch(d: usize) -> (Vec<PseudoTriplet>, denoise_i2w::encoders::Encoders) {
    let enc = engineered_encoders(d);
    let red = enc.vocab.id(CAPTION_WORDS[0]).unwrap();
    let dog = enc.vocab.id(CAPTION_WORDS[2]).unwrap();
    let batch = vec![
        triplet(basis(d, 0), vec![red], basis(d, 0), 0),
        triplet(basis(d, 1), vec![dog, red], basis(d, 1), 1),
    ];
    (batch, enc)
}

#[test]
fn matched_orthonormal_batch_closed_form() {
    let d = 8;
    let (batch, enc) = engineered_batch(d);
    let params = identity_mapping(d);
    for tau in [0.5f64, 1.0, 5.0] {
        let want = 2.0 * (1.0 + (-tau).exp()).ln();
        let (lc, _) = compose_loss(&params, &batch, &enc, tau).unwrap();
        let refs: Vec<_> = batch.iter().map(|t| t.reference.clone()).collect();
        let (la, _) = align_loss(&params, &refs, &enc, tau).unwrap();
        assert!((lc - want).abs() < 1e-12, "compose {lc} vs {want}");
        assert!((la - want).abs() < 1e-12, "align {la} vs {want}");
    }
}

#[test]
fn align_term_ignores_captions() {
    let prob = GradCheckProblem::random(8, 8, 6, 11).unwrap();
    let obj = ObjectiveConfig {
        terms: LossTerms::WITHOUT_COMPOSE,
        ..ObjectiveConfig::default()
    };
    let (base, g0) = total_loss_and_grads(&prob.params, &prob.triplets, &prob.encoders, &obj).unwrap();
    let mut shuffled = prob.triplets.clone();
    for (i, t) in shuffled.iter_mut().enumerate() {
        t.caption_tokens = vec![t.caption_tokens[0]; 1 + i % 3];
    }
    let (pert, g1) = total_loss_and_grads(&prob.params, &shuffled, &prob.encoders, &obj).unwrap();
    assert_eq!(base.l_align.to_bits(), pert.l_align.to_bits());
    assert_eq!(g0.flat(), g1.flat());
    let refs: Vec<_> = prob.triplets.iter().map(|t| t.reference.clone()).collect();
    let (la, _) = align_loss(&prob.params, &refs, &prob.encoders, obj.tau).unwrap();
    assert!((la - base.l_align).abs() < 1e-12);
}

#[test]
fn total_gradient_is_sum_of_terms() {
    let prob = GradCheckProblem::random(10, 8, 6, 5).unwrap();
    let run = |terms| {
        let obj = ObjectiveConfig {
            tau: 20.0,
            terms,
            ..ObjectiveConfig::default()
        };
        total_loss_and_grads(&prob.params, &prob.triplets, &prob.encoders, &obj).unwrap()
    };
    let (lt, gt) = run(LossTerms::FULL);
    let (lc, gc) = run(LossTerms::WITHOUT_ALIGN);
    let (la, ga) = run(LossTerms::WITHOUT_COMPOSE);
    assert!((lt.l_total - (lt.l_compose + lt.l_align)).abs() < 1e-12);
    assert!((lt.l_compose - lc.l_compose).abs() < 1e-12);
    assert!((lt.l_align - la.l_align).abs() < 1e-12);
    assert_eq!(lc.l_align, 0.0);
    assert_eq!(la.l_compose, 0.0);
    for ((t, c), a) in gt.flat().iter().zip(gc.flat()).zip(ga.flat()) {
        assert!((t - (c + a)).abs() < 1e-12);
    }
}

#[test]
fn batch_order_does_not_change_losses() {
    let prob = GradCheckProblem::random(8, 8, 7, 9).unwrap();
    let obj = ObjectiveConfig::default();
    let a = loss_only(&prob.params, &prob.triplets, &prob.encoders, &obj).unwrap();
    let mut rev = prob.triplets.clone();
    rev.reverse();
    rev.swap(0, 3);
    let b = loss_only(&prob.params, &rev, &prob.encoders, &obj).unwrap();
    assert!((a.l_compose - b.l_compose).abs() < 1e-12);
    assert!((a.l_align - b.l_align).abs() < 1e-12);
    assert!(a.l_compose > 0.0 && a.l_align > 0.0);
}

#[test]
fn step_size_sweep_is_u_shaped() {
    let obj = ObjectiveConfig {
        tau: 10.0,
        ..ObjectiveConfig::default()
    };
    for seed in 0..3 {
        let prob = GradCheckProblem::random(16, 16, 8, seed).unwrap();
        let err = |h| {
            let cfg = GradCheckConfig {
                h,
                ..GradCheckConfig::default()
            };
            prob.check(&obj, &cfg).unwrap().max_abs_err
        };
        let (coarse, mid, fine) = (err(1e-4), err(1e-5), err(1e-6));
        assert!(mid < coarse && mid < fine, "seed {seed}: {coarse:e} {mid:e} {fine:e}");
    }
}

#[test]
fn loss_stays_finite_at_large_temperature() {
    let prob = GradCheckProblem::random(8, 8, 8, 2).unwrap();
    let obj = ObjectiveConfig {
        tau: 100.0,
        ..ObjectiveConfig::default()
    };
    let (l, g) = total_loss_and_grads(&prob.params, &prob.triplets, &prob.encoders, &obj).unwrap();
    assert!(l.l_total.is_finite() && l.l_total >= 0.0);
    assert!(g.flat().iter().all(|v| v.is_finite()));
}
