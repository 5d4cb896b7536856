use sidn_core::gradcheck::{self, GradCheckConfig};
use sidn_core::encoder::Mode;
use sidn_core::model::Variant;

fn show(name: &str, r: &gradcheck::GradCheckReport) {
    eprintln!("{name}: {} samples, max rel error {:.3e}", r.entries.len(), r.max_rel_error);
    for e in r.worst(3) {
        eprintln!("  {} [{}] analytic {:.6e} numeric {:.6e} rel {:.2e}", e.tensor, e.index, e.analytic, e.numeric, e.rel_error);
    }
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let r = gradcheck::gradient_check(&GradCheckConfig::default()).unwrap();
    show("full", &r);
    assert!(r.entries.len() >= 200);
    assert_eq!(r.groups(), vec!["attention", "encoder", "fusion", "head", "lstm"]);
    assert!(r.passed, "max rel error {}", r.max_rel_error);
}

#[test]
fn ablation_gradients_match_finite_differences() {
    for variant in [Variant::Variant1, Variant::Variant2] {
        let cfg = GradCheckConfig {
            variant,
            seed: 11,
            ..GradCheckConfig::default()
        };
        let r = gradcheck::gradient_check(&cfg).unwrap();
        show(&variant.to_string(), &r);
        assert!(r.passed, "{variant}: max rel error {}", r.max_rel_error);
    }
}

#[test]
fn sign_flipped_gradient_is_caught() {
    let r = gradcheck::gradient_check_with(&GradCheckConfig::default(), &|g| {
        g.lstm.layers[0].recurrent_weights.mapv_inplace(|v| -v);
    })
    .unwrap();
    assert!(!r.passed);
    assert!(r.worst(1)[0].tensor.starts_with("lstm.layer1.recurrent_weights"));
}

#[test]
fn reports_are_reproducible() {
    let cfg = GradCheckConfig {
        min_samples: 40,
        ..GradCheckConfig::default()
    };
    assert_eq!(gradcheck::gradient_check(&cfg).unwrap(), gradcheck::gradient_check(&cfg).unwrap());
}

#[test]
fn encoder_gradients_in_isolation() {
    for mode in [Mode::Train, Mode::Eval] {
        let r = gradcheck::check_encoder(1, mode, 240, 1e-4).unwrap();
        show(&format!("encoder {mode:?}"), &r);
        assert!(r.entries.len() >= 200);
        assert!(r.passed);
    }
}

#[test]
fn lstm_gradients_in_isolation() {
    let r = gradcheck::check_lstm(2, 200, 1e-4).unwrap();
    show("lstm", &r);
    assert!(r.passed);
}

#[test]
fn attention_gradients_in_isolation() {
    let r = gradcheck::check_attention(3, 100, 1e-4).unwrap();
    show("attention", &r);
    assert!(r.passed);
}

#[test]
fn fusion_gradients_in_isolation() {
    let r = gradcheck::check_fusion(4, 100, 1e-4).unwrap();
    show("fusion", &r);
    assert!(r.passed);
}
