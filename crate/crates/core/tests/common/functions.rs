//! Properties of the probability-space functions, each checked on one
//! generated instance. Shared by the proptest suite and the acceptance run.

use proptest::prelude::*;
use sonar_kd::Tensor;

pub const TOL: f64 = 1e-9;

fn vec_t(v: &[f64]) -> Tensor {
    Tensor::new(&[v.len()], v.to_vec()).unwrap()
}

fn probs(z: &[f64]) -> Tensor {
    vec_t(z).softmax(0).unwrap()
}

/// Logit vectors whose softmax stays above the KL clamp.
pub fn logits() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, 1..9)
}

pub fn logit_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..9).prop_flat_map(|n| {
        (
            prop::collection::vec(-5.0f64..5.0, n),
            prop::collection::vec(-5.0f64..5.0, n),
        )
    })
}

pub fn softmax_normalized(z: &[f64]) -> Result<(), String> {
    let s: f64 = probs(z).data().iter().sum();
    ((s - 1.0).abs() <= TOL).then_some(()).ok_or(format!("softmax sums to {s}"))
}

pub fn softmax_shift_invariant(z: &[f64], c: f64) -> Result<(), String> {
    let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
    let (a, b) = (probs(z), probs(&shifted));
    let d = max_abs_diff(a.data(), b.data());
    (d <= TOL).then_some(()).ok_or(format!("shift {c} moved softmax by {d}"))
}

pub fn log_softmax_is_log_of_softmax(z: &[f64]) -> Result<(), String> {
    let ls = vec_t(z).log_softmax(0).unwrap();
    let logs: Vec<f64> = probs(z).data().iter().map(|p| p.ln()).collect();
    let d = max_abs_diff(ls.data(), &logs);
    (d <= TOL).then_some(()).ok_or(format!("log_softmax differs from ln(softmax) by {d}"))
}

pub fn kl_self_is_zero(z: &[f64]) -> Result<(), String> {
    let p = probs(z);
    let v = p.kl_div(&p, 0).unwrap().item().unwrap();
    (v == 0.0).then_some(()).ok_or(format!("KL(P, P) = {v}"))
}

pub fn kl_nonnegative(zp: &[f64], zq: &[f64]) -> Result<(), String> {
    let v = probs(zp).kl_div(&probs(zq), 0).unwrap().item().unwrap();
    let lv = vec_t(zq).log_softmax(0).unwrap().kl_div_log_input(&probs(zp)).unwrap().item().unwrap();
    (v >= 0.0 && lv >= -TOL && (v - lv).abs() <= TOL)
        .then_some(())
        .ok_or(format!("KL = {v}, log-input KL = {lv}"))
}

pub fn mse_trivial(x: &[f64], c: f64) -> Result<(), String> {
    let same = vec_t(x).mse(&vec_t(x)).unwrap().item().unwrap();
    // a power-of-two offset keeps x + c − x == c exact
    let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
    let off = vec_t(&shifted).mse(&vec_t(x)).unwrap().item().unwrap();
    let back = vec_t(x).mse(&vec_t(&shifted)).unwrap().item().unwrap();
    (same == 0.0 && (off - c * c).abs() <= TOL * c * c && off == back)
        .then_some(())
        .ok_or(format!("mse(x,x) = {same}, mse(x+c,x) = {off}, mse(x,x+c) = {back}, c² = {}", c * c))
}

pub fn bce_trivial(p: f64, y: f64) -> Result<(), String> {
    let half = vec_t(&[0.5]).bce(&vec_t(&[y])).unwrap().item().unwrap();
    let pos = vec_t(&[p]).bce(&vec_t(&[1.0])).unwrap().item().unwrap();
    let neg = vec_t(&[p]).bce(&vec_t(&[0.0])).unwrap().item().unwrap();
    let ok = (half - std::f64::consts::LN_2).abs() <= TOL
        && (pos + p.ln()).abs() <= TOL
        && (neg + (1.0 - p).ln()).abs() <= TOL;
    ok.then_some(())
        .ok_or(format!("bce(0.5,{y}) = {half}, bce({p},1) = {pos}, bce({p},0) = {neg}"))
}

/// `p = y` minimizes BCE against a soft target `y`, with zero gradient there.
pub fn bce_soft_minimum(y: f64, other: f64) -> Result<(), String> {
    let at = |p: f64| {
        let t = Tensor::param(&[1], vec![p]).unwrap();
        let l = t.bce(&vec_t(&[y])).unwrap();
        l.backward().unwrap();
        (l.item().unwrap(), t.grad_vec().unwrap()[0])
    };
    let (min, g) = at(y);
    let (v, _) = at(other);
    (min < v && g.abs() <= TOL)
        .then_some(())
        .ok_or(format!("y = {y}: bce(y) = {min} (grad {g}), bce({other}) = {v}"))
}

pub fn soft_target_pair() -> impl Strategy<Value = (f64, f64)> {
    (0.01f64..0.99, 1e-3f64..0.5, any::<bool>()).prop_filter_map("probability range", |(y, d, up)| {
        let o = if up { y + d } else { y - d };
        (o > 1e-6 && o < 1.0 - 1e-6).then_some((y, o))
    })
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub const CASES: u32 = 1000;

/// Runs every property for [`CASES`] generated instances; one entry per
/// property with the failure, if any.
pub fn run_all() -> Vec<(&'static str, Result<(), String>)> {
    use proptest::test_runner::{Config, TestCaseError, TestRunner};
    fn go<S: Strategy>(
        s: S,
        f: impl Fn(S::Value) -> Result<(), String>,
    ) -> Result<(), String> {
        let mut runner = TestRunner::new(Config {
            cases: CASES,
            failure_persistence: None,
            ..Config::default()
        });
        runner
            .run(&s, |v| f(v).map_err(TestCaseError::fail))
            .map_err(|e| e.to_string())
    }
    vec![
        ("softmax sums to 1", go(logits(), |z| softmax_normalized(&z))),
        ("softmax shift invariance", go((logits(), -50.0f64..50.0), |(z, c)| softmax_shift_invariant(&z, c))),
        ("log_softmax = ln softmax", go(logits(), |z| log_softmax_is_log_of_softmax(&z))),
        ("KL(P,P) = 0", go(logits(), |z| kl_self_is_zero(&z))),
        ("KL >= 0", go(logit_pair(), |(p, q)| kl_nonnegative(&p, &q))),
        ("MSE trivial cases", go((prop::collection::vec(-8.0f64..8.0, 1..9), -3i32..3), |(x, e)| mse_trivial(&x, 2f64.powi(e)))),
        ("BCE trivial cases", go((1e-3f64..0.999, 0.0f64..=1.0), |(p, y)| bce_trivial(p, y))),
        ("BCE soft-target minimum", go(soft_target_pair(), |(y, o)| bce_soft_minimum(y, o))),
    ]
}
