//! Per-series smoothing filters and the routing table that assigns one
//! filter to each physiological channel.

/// Available smoothing filters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmoothMethod {
    /// First-order exponential smoother, lambda = 0.3, seeded at the first value.
    Exponential,
    /// Five-point triangular weighted moving average [1,2,3,2,1]/9 with
    /// edge windows renormalized over the available weights.
    Wma,
    /// Exponential smoother whose lambda tracks the ratio of local to global
    /// variability, clamped to [0.1, 0.9].
    Adaptive,
    /// Five-point quadratic least-squares filter [-3,12,17,12,-3]/35 with
    /// anti-symmetric edge extension, exact on linear ramps.
    Savgol,
    /// Pointwise mean of the exponential, triangular, and quadratic filters.
    Ensemble,
}

const EXP_LAMBDA: f64 = 0.3;
const WMA_WEIGHTS: [f64; 5] = [1.0, 2.0, 3.0, 2.0, 1.0];
const SAVGOL_WEIGHTS: [f64; 5] = [-3.0, 12.0, 17.0, 12.0, -3.0];
const ADAPTIVE_WINDOW: usize = 5;
const ADAPTIVE_MIN: f64 = 0.1;
const ADAPTIVE_MAX: f64 = 0.9;

pub fn smooth_exponential(x: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    let mut s = match x.first() {
        Some(&v) => v,
        None => return out,
    };
    out.push(s);
    for &v in &x[1..] {
        s = EXP_LAMBDA * v + (1.0 - EXP_LAMBDA) * s;
        out.push(s);
    }
    out
}

pub fn smooth_wma(x: &[f64]) -> Vec<f64> {
    let t_len = x.len();
    let mut out = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut num = 0.0;
        let mut den = 0.0;
        for (j, &w) in WMA_WEIGHTS.iter().enumerate() {
            let idx = t as i64 + j as i64 - 2;
            if idx >= 0 && (idx as usize) < t_len {
                num += w * x[idx as usize];
                den += w;
            }
        }
        out.push(num / den);
    }
    out
}

fn population_std(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    if n == 0.0 {
        return 0.0;
    }
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    var.sqrt()
}

pub fn smooth_adaptive(x: &[f64]) -> Vec<f64> {
    let t_len = x.len();
    let mut out = Vec::with_capacity(t_len);
    let global_std = population_std(x);
    let half = ADAPTIVE_WINDOW / 2;
    let mut s = match x.first() {
        Some(&v) => v,
        None => return out,
    };
    out.push(s);
    for (t, &v) in x.iter().enumerate().skip(1) {
        let lo = t.saturating_sub(half);
        let hi = (t + half + 1).min(t_len);
        let local_std = population_std(&x[lo..hi]);
        let lambda = if global_std > 0.0 {
            (local_std / global_std).clamp(ADAPTIVE_MIN, ADAPTIVE_MAX)
        } else {
            ADAPTIVE_MIN
        };
        s = lambda * v + (1.0 - lambda) * s;
        out.push(s);
    }
    out
}

pub fn smooth_savgol(x: &[f64]) -> Vec<f64> {
    let t_len = x.len();
    let mut out = Vec::with_capacity(t_len);
    if t_len == 0 {
        return out;
    }
    // Anti-symmetric extension x[-k] = 2x[0] - x[k] (and mirrored at the
    // right edge) keeps the filter exact on linear ramps at the boundaries.
    let extended = |idx: i64| -> f64 {
        if idx < 0 {
            let k = (-idx) as usize;
            let k = k.min(t_len - 1);
            2.0 * x[0] - x[k]
        } else if idx as usize >= t_len {
            let k = idx as usize - (t_len - 1);
            let k = k.min(t_len - 1);
            2.0 * x[t_len - 1] - x[t_len - 1 - k]
        } else {
            x[idx as usize]
        }
    };
    for t in 0..t_len {
        let mut acc = 0.0;
        for (j, &w) in SAVGOL_WEIGHTS.iter().enumerate() {
            acc += w * extended(t as i64 + j as i64 - 2);
        }
        out.push(acc / 35.0);
    }
    out
}

pub fn smooth_ensemble(x: &[f64]) -> Vec<f64> {
    let a = smooth_exponential(x);
    let b = smooth_wma(x);
    let c = smooth_savgol(x);
    a.iter()
        .zip(b.iter())
        .zip(c.iter())
        .map(|((&u, &v), &w)| (u + v + w) / 3.0)
        .collect()
}

pub fn apply_smoother(method: SmoothMethod, x: &[f64]) -> Vec<f64> {
    match method {
        SmoothMethod::Exponential => smooth_exponential(x),
        SmoothMethod::Wma => smooth_wma(x),
        SmoothMethod::Adaptive => smooth_adaptive(x),
        SmoothMethod::Savgol => smooth_savgol(x),
        SmoothMethod::Ensemble => smooth_ensemble(x),
    }
}

/// Filter assignment for a named feature channel. Hormone-like slow channels
/// get exponential smoothing, daily aggregate temperatures/activity counts
/// get the triangular average, burst-prone activity channels get the
/// variability-adaptive filter, and rhythmic/rate channels get the
/// shape-preserving quadratic filter. Channels without a known profile use
/// the adaptive filter as the conservative default.
pub fn route_feature(name: &str) -> SmoothMethod {
    match name {
        "RH" | "MH" | "XH" => SmoothMethod::Exponential,
        "TK" | "TS" | "TD" | "HA" | "AS" | "MI" => SmoothMethod::Wma,
        "DS" | "LS" | "RS" | "AW" | "AC" | "RM" => SmoothMethod::Adaptive,
        "AWR" | "HRV" | "LRV" | "LR" | "HR" | "AR" => SmoothMethod::Savgol,
        _ => SmoothMethod::Adaptive,
    }
}

/// The prediction target always uses the ensemble filter.
pub fn route_target() -> SmoothMethod {
    SmoothMethod::Ensemble
}
