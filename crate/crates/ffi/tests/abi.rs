use std::ffi::{CStr, CString};
use std::ptr;

use preflab::losses::{dpo_gradient, BetaParam};
use preflab::preference::PreferencePairSet;
use preflab::tabular::{CategoricalConditional, TabularPolicy};
use preflab::Matrix;
use preflab_ffi::*;

const LOGITS: [f64; 6] = [0.3, -1.0, 0.7, 1.2, 0.0, -0.4];
const REF: [f64; 6] = [0.5, 0.3, 0.2, 0.1, 0.6, 0.3];

fn policy() -> *mut PreflabPolicy {
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { preflab_policy_new(LOGITS.as_ptr(), 2, 3, &mut out) }, PreflabStatus::Ok);
    out
}

fn conditional(probs: &[f64]) -> *mut PreflabConditional {
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { preflab_conditional_new(probs.as_ptr(), 2, 3, &mut out) }, PreflabStatus::Ok);
    out
}

fn pairs() -> *mut PreflabPairSet {
    let (p, w, l, v) = ([0usize, 0, 1, 1], [0usize, 1, 2, 0], [1usize, 2, 0, 1], [1.0, 0.5, 2.0, 0.25]);
    let mut out = ptr::null_mut();
    let s = unsafe { preflab_pairs_new(2, 3, p.as_ptr(), w.as_ptr(), l.as_ptr(), v.as_ptr(), 4, &mut out) };
    assert_eq!(s, PreflabStatus::Ok);
    out
}

fn last_error() -> String {
    let p = preflab_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn policy_round_trip() {
    let p = policy();
    let (mut n, mut m) = (0, 0);
    unsafe {
        assert_eq!(preflab_policy_shape(p, &mut n, &mut m), PreflabStatus::Ok);
        assert_eq!((n, m), (2, 3));
        let mut logits = [0.0; 6];
        assert_eq!(preflab_policy_logits(p, logits.as_mut_ptr(), 6), PreflabStatus::Ok);
        assert_eq!(logits, LOGITS);
        let mut probs = [0.0; 6];
        assert_eq!(preflab_policy_probs(p, probs.as_mut_ptr(), 6), PreflabStatus::Ok);
        let z: f64 = LOGITS[..3].iter().map(|v| v.exp()).sum();
        assert!((probs[0] - LOGITS[0].exp() / z).abs() < 1e-15);
        preflab_policy_free(p);
    }
}

#[test]
fn dpo_gradient_matches_core() {
    let (p, r, d) = (policy(), conditional(&REF), pairs());
    let mut g = [0.0; 6];
    let mut loss = 0.0;
    unsafe {
        assert_eq!(preflab_dpo_gradient(p, r, d, 0.2, g.as_mut_ptr(), 6), PreflabStatus::Ok);
        assert_eq!(preflab_dpo_loss(p, r, d, 0.2, &mut loss), PreflabStatus::Ok);
        assert_eq!(preflab_pairs_len(d), 4);
    }
    let want = dpo_gradient(
        &TabularPolicy::new(Matrix::from_flat(2, 3, LOGITS.to_vec()).unwrap()).unwrap(),
        &CategoricalConditional::new(Matrix::from_flat(2, 3, REF.to_vec()).unwrap()).unwrap(),
        &PreferencePairSet::from_masses(2, 3, [(0, 0, 1, 1.0), (0, 1, 2, 0.5), (1, 2, 0, 2.0), (1, 0, 1, 0.25)]).unwrap(),
        BetaParam::new(0.2).unwrap(),
    )
    .unwrap();
    assert_eq!(g.as_slice(), want.data());
    assert!(loss.is_finite() && loss > 0.0);
    unsafe {
        preflab_policy_free(p);
        preflab_conditional_free(r);
        preflab_pairs_free(d);
    }
}

#[test]
fn closed_forms() {
    let r = conditional(&REF);
    let w = conditional(&[0.8, 0.1, 0.1, 0.2, 0.2, 0.6]);
    unsafe {
        let mut same = ptr::null_mut();
        assert_eq!(preflab_dpo_closed_form(r, w, w, 0.5, &mut same), PreflabStatus::Ok);
        let mut probs = [0.0; 6];
        preflab_conditional_probs(same, probs.as_mut_ptr(), 6);
        for (a, b) in probs.iter().zip(REF) {
            assert!((a - b).abs() < 1e-12);
        }

        let reward = [1.0, 0.0, -1.0, 0.0, 0.0, 0.0];
        let mut tilted = ptr::null_mut();
        assert_eq!(preflab_rlhf_closed_form(reward.as_ptr(), r, 1.0, &mut tilted), PreflabStatus::Ok);
        preflab_conditional_probs(tilted, probs.as_mut_ptr(), 6);
        let z = 0.5 * 1f64.exp() + 0.3 + 0.2 * (-1f64).exp();
        assert!((probs[0] - 0.5 * 1f64.exp() / z).abs() < 1e-12);
        assert!((probs[3] - 0.1).abs() < 1e-12);
        preflab_conditional_free(same);
        preflab_conditional_free(tilted);
        preflab_conditional_free(w);
        preflab_conditional_free(r);
    }
}

#[test]
fn training_lowers_loss() {
    let (p, r, d) = (policy(), conditional(&REF), pairs());
    let mut trained = ptr::null_mut();
    let (mut before, mut after) = (0.0, 0.0);
    unsafe {
        assert_eq!(preflab_train_dpo(p, r, d, 1.0, 200, 0.5, &mut trained), PreflabStatus::Ok);
        preflab_dpo_loss(p, r, d, 0.5, &mut before);
        preflab_dpo_loss(trained, r, d, 0.5, &mut after);
        preflab_policy_free(trained);
        preflab_policy_free(p);
        preflab_conditional_free(r);
        preflab_pairs_free(d);
    }
    assert!(after < before);
}

#[test]
fn errors_carry_codes_and_messages() {
    let mut out = ptr::null_mut();
    unsafe {
        assert_eq!(preflab_policy_new(ptr::null(), 2, 3, &mut out), PreflabStatus::NullPointer);
        assert!(last_error().contains("logits"));
        assert!(out.is_null());

        let bad = [0.5, 0.6, 0.1, 0.2, 0.2, 0.6];
        assert_eq!(preflab_conditional_new(bad.as_ptr(), 2, 3, &mut ptr::null_mut()), PreflabStatus::InvalidInput);

        let p = policy();
        let mut small = [0.0; 4];
        assert_eq!(preflab_policy_probs(p, small.as_mut_ptr(), 4), PreflabStatus::ShapeMismatch);
        assert!(last_error().contains("4"));

        let r = conditional(&REF);
        let d = pairs();
        let mut loss = 0.0;
        assert_eq!(preflab_dpo_loss(p, r, d, -1.0, &mut loss), PreflabStatus::InvalidInput);

        let name = CString::new("nonsense").unwrap();
        let mut json = ptr::null_mut();
        assert_eq!(preflab_verify(name.as_ptr(), 0, &mut json), PreflabStatus::InvalidInput);
        assert!(json.is_null());

        preflab_policy_free(p);
        preflab_conditional_free(r);
        preflab_pairs_free(d);
        preflab_policy_free(ptr::null_mut());
        preflab_string_free(ptr::null_mut());
        assert_eq!(preflab_pairs_len(ptr::null()), 0);
    }
}

#[test]
fn verification_report_as_json() {
    let name = CString::new("loss_identity").unwrap();
    let mut json = ptr::null_mut();
    unsafe {
        assert_eq!(preflab_verify(name.as_ptr(), 3, &mut json), PreflabStatus::Ok);
        let text = CStr::from_ptr(json).to_str().unwrap().to_owned();
        preflab_string_free(json);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["pass"], serde_json::Value::Bool(true));
    }
    let version = unsafe { CStr::from_ptr(preflab_version()) };
    assert_eq!(version.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
