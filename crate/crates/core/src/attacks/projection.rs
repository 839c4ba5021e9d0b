//! Norms and projections onto the constraint sets used by the attacks.

pub fn linf_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).fold(0.0, f64::max)
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn l1_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

/// Clamps every coordinate to `[-eps, eps]`; exact for the linf ball.
pub fn clamp_linf(v: &mut [f64], eps: f64) {
    for x in v {
        *x = x.clamp(-eps, eps);
    }
}

/// Scales `v` onto the l2 ball of the given radius when it lies outside.
pub fn project_l2_ball(v: &mut [f64], radius: f64) {
    let norm = l2_norm(v);
    if norm > radius && norm > 0.0 {
        let s = radius / norm;
        for x in v {
            *x *= s;
        }
    }
}

/// Rescales `v` to have l2 norm exactly `target` (no-op on the zero vector).
pub fn renormalize_l2(v: &mut [f64], target: f64) {
    let norm = l2_norm(v);
    if norm > 0.0 {
        let s = target / norm;
        for x in v {
            *x *= s;
        }
    }
}

/// Euclidean projection onto the l1 ball via the sorted simplex threshold:
/// find theta so that soft-thresholding |v| by theta lands on the ball, then
/// apply it sign-preservingly. Identity when `v` is already inside.
pub fn project_l1_ball(v: &mut [f64], radius: f64) {
    if l1_norm(v) <= radius {
        return;
    }
    let mut mags: Vec<f64> = v.iter().map(|x| x.abs()).collect();
    mags.sort_by(|a, b| b.partial_cmp(a).expect("finite magnitudes"));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, &u) in mags.iter().enumerate() {
        cumsum += u;
        let candidate = (cumsum - radius) / (j + 1) as f64;
        if u - candidate > 0.0 {
            theta = candidate;
        } else {
            break;
        }
    }
    for x in v.iter_mut() {
        let mag = (x.abs() - theta).max(0.0);
        *x = x.signum() * mag;
        if mag == 0.0 {
            *x = 0.0;
        }
    }
}

/// Percentile of `values` with linear interpolation between order statistics
/// (the numpy convention); `q` in (0, 100).
pub fn percentile(values: &[f64], q: f64) -> f64 {
    debug_assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = pos - lo as f64;
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}
