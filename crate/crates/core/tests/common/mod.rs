//! Brute-force reference computations for the weighted Cox model.
#![allow(dead_code)]

use recurweight::coxfit::SurvivalSample;
use recurweight::statcore::RngStream;

/// Breslow weighted partial log-likelihood by direct double loop.
pub fn naive_loglik(beta: f64, s: &SurvivalSample) -> f64 {
    let n = s.len();
    let mut ll = 0.0;
    for i in 0..n {
        if !s.event[i] || s.weight[i] == 0.0 {
            continue;
        }
        let zi = if s.treatment[i] { 1.0 } else { 0.0 };
        let mut denom = 0.0;
        for j in 0..n {
            if s.time[j] >= s.time[i] {
                let zj = if s.treatment[j] { 1.0 } else { 0.0 };
                denom += s.weight[j] * (beta * zj).exp();
            }
        }
        ll += s.weight[i] * (beta * zi - denom.ln());
    }
    ll
}

pub fn naive_score(beta: f64, s: &SurvivalSample) -> f64 {
    let n = s.len();
    let mut u = 0.0;
    for i in 0..n {
        if !s.event[i] || s.weight[i] == 0.0 {
            continue;
        }
        let (mut s0, mut s1) = (0.0, 0.0);
        for j in 0..n {
            if s.time[j] >= s.time[i] {
                let r = s.weight[j] * if s.treatment[j] { beta.exp() } else { 1.0 };
                s0 += r;
                if s.treatment[j] {
                    s1 += r;
                }
            }
        }
        let zi = if s.treatment[i] { 1.0 } else { 0.0 };
        u += s.weight[i] * (zi - s1 / s0);
    }
    u
}

/// Root of the (decreasing) score by bisection on `[-20, 20]`.
pub fn naive_maximizer(s: &SurvivalSample) -> f64 {
    let (mut lo, mut hi) = (-20.0f64, 20.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if naive_score(mid, s) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Arg-max of the log-likelihood over a grid of the given resolution.
pub fn grid_argmax(s: &SurvivalSample, lo: f64, hi: f64, step: f64) -> f64 {
    let steps = ((hi - lo) / step).round() as usize;
    let mut best = (f64::NEG_INFINITY, lo);
    for k in 0..=steps {
        let b = lo + k as f64 * step;
        let ll = naive_loglik(b, s);
        if ll > best.0 {
            best = (ll, b);
        }
    }
    best.1
}

/// Random small sample: times on a coarse grid (so ties occur), random
/// censoring, arms and weights.
pub fn random_sample(stream: &mut RngStream, n: usize) -> SurvivalSample {
    let mut s = SurvivalSample::with_capacity(n);
    for i in 0..n {
        let time = (1.0 + 10.0 * stream.uniform()).floor() / 2.0;
        let event = stream.uniform() < 0.8;
        let treated = stream.uniform() < 0.5;
        let weight = 0.25 + 2.0 * stream.uniform();
        s.push(time, event, treated, weight, i);
    }
    s
}
