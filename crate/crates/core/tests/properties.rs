//! Property tests for the tokenizer, skeletonization and affine
//! substitution over generated expressions.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use symreg_core::expr::skeletonize;
use symreg_core::generator::{sample_function, GeneratorConfig};
use symreg_core::tokenizer::encode_float;
use symreg_core::{EncodeMode, Vocab};

proptest! {
    #[test]
    fn float_round_trip_within_4_digits(m in -1.0f64..1.0, e in -90i32..90) {
        let v = m * 10f64.powi(e);
        prop_assume!(v != 0.0);
        let t = encode_float(v).unwrap();
        let back = t.value();
        prop_assert!(((back - v) / v).abs() <= 5e-4, "{v} -> {back}");
    }

    #[test]
    fn float_encode_is_idempotent(m in -1.0f64..1.0, e in -90i32..90) {
        let v = m * 10f64.powi(e);
        let once = encode_float(v).unwrap().value();
        let twice = encode_float(once).unwrap().value();
        prop_assert_eq!(once, twice);
    }
}

#[test]
fn generated_exprs_round_trip_through_tokens() {
    // Generator constants are pre-rounded to 4 digits, so decode(encode) must
    // be exactly structural equality.
    let cfg = GeneratorConfig::default();
    let vocab = Vocab::new(cfg.d_max);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..2000 {
        let f = sample_function(&cfg, &mut rng);
        let seq = vocab.encode_expr(&f.expr, EncodeMode::E2e).unwrap();
        let back = vocab.decode_expr(&seq.tokens).unwrap();
        assert_eq!(*back, *f.expr, "round trip failed for {}", f.expr.prefix());
    }
}

#[test]
fn skeleton_substitute_round_trip() {
    let cfg = GeneratorConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..2000 {
        let f = sample_function(&cfg, &mut rng);
        let (sk, consts) = skeletonize(&f.expr);
        assert_eq!(*sk.substitute(&consts), *f.expr);
        // Idempotent on slot structure.
        let (sk2, _) = skeletonize(sk.tree());
        assert_eq!(sk2.key(), sk.key());
    }
}

#[test]
fn affine_substitution_matches_whitened_evaluation() {
    let cfg = GeneratorConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut trials = 0;
    while trials < 500 {
        let f = sample_function(&cfg, &mut rng);
        let mu: Vec<f64> = (0..f.dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let sigma: Vec<f64> = (0..f.dim).map(|_| rng.gen_range(0.1..3.0)).collect();
        let g = f.expr.substitute_affine(&mu, &sigma);
        let x: Vec<f64> = (0..f.dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let white: Vec<f64> =
            (0..f.dim).map(|d| (x[d] - mu[d]) / sigma[d]).collect();
        let (Ok(a), Ok(b)) = (g.evaluate(&x), f.expr.evaluate(&white)) else { continue };
        // Skip points where the function is so ill-conditioned that a 1e-12
        // relative input wiggle moves the output more than the tolerance;
        // equality up to roundoff is unobservable there.
        let wiggled: Vec<f64> = white.iter().map(|v| v * (1.0 + 1e-12) + 1e-13).collect();
        let Ok(b2) = f.expr.evaluate(&wiggled) else { continue };
        if (b2 - b).abs() > 1e-11 * (1.0 + b.abs()) {
            continue;
        }
        assert!(
            (a - b).abs() <= 1e-10 * (1.0 + b.abs()),
            "affine substitution drifted: {a} vs {b} for {}",
            f.expr.prefix()
        );
        trials += 1;
    }
}

#[test]
fn encode_points_row_layout() {
    use symreg_core::SampleSet;
    let vocab = Vocab::new(10);
    let s = SampleSet {
        x: vec![vec![0.5], vec![-0.5]],
        y: vec![1.0, 2.0],
        mu: vec![0.0],
        sigma: vec![1.0],
        source: None,
    };
    let rows = vocab.encode_points(&s).unwrap();
    assert_eq!(rows.len(), 2);
    // 3*(10+1) tokens, 9 padded dims = 27 padding tokens.
    assert_eq!(rows[0].len(), 33);
    let pad = vocab.encoder_id(&symreg_core::tokenizer::Token::PadFloat);
    assert_eq!(rows[0].iter().filter(|&&t| t == pad).count(), 27);
    // y = 1.0 encodes as (+, 1000, E-3) at the row tail.
    let tail = &rows[0][30..];
    assert_eq!(tail[1], vocab.encoder_id(&symreg_core::tokenizer::Token::Mantissa(1000)));
    assert_eq!(tail[2], vocab.encoder_id(&symreg_core::tokenizer::Token::Exponent(-3)));
}
