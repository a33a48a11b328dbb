//! Exponentially scaled modified spherical Bessel functions of the first
//! kind, `e^{-x} i_l(x)` for `x >= 0`.

/// Above this argument the closed form is used, whose alternating sum is
/// benign once `x` dominates `l(l+1)`.
fn series_limit(l: usize) -> f64 {
    50f64.max((l * (l + 1)) as f64)
}

/// Fills `out[l] = e^{-x} i_l(x)` for `l = 0..out.len()`.
pub fn scaled_bessel_i(x: f64, out: &mut [f64]) {
    for (l, slot) in out.iter_mut().enumerate() {
        *slot = scaled_bessel_i_l(l, x);
    }
}

pub fn scaled_bessel_i_l(l: usize, x: f64) -> f64 {
    debug_assert!(x >= 0.0);
    if x <= series_limit(l) {
        series(l, x)
    } else {
        closed_form(l, x)
    }
}

/// `i_l(x) = x^l / (2l+1)!! * sum_k (x^2/2)^k / (k! (2l+3)(2l+5)...(2l+2k+1))`,
/// every term positive.
fn series(l: usize, x: f64) -> f64 {
    let mut lead = (-x).exp();
    for k in 1..=l {
        lead *= x / (2 * k + 1) as f64;
    }
    if lead == 0.0 {
        return 0.0;
    }
    let y = 0.5 * x * x;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut k = 0usize;
    loop {
        k += 1;
        term *= y / (k as f64 * (2 * l + 2 * k + 1) as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    lead * sum
}

/// `e^{-x} i_l(x) = 1/(2x) [sum_k (-1)^k a_k/(2x)^k - (-1)^l e^{-2x} sum_k a_k/(2x)^k]`
/// with `a_k = (l+k)! / (k! (l-k)!)`.
fn closed_form(l: usize, x: f64) -> f64 {
    let mut a = 1.0;
    let mut plus = 0.0;
    let mut alt = 0.0;
    let inv = 1.0 / (2.0 * x);
    let mut p = 1.0;
    for k in 0..=l {
        if k > 0 {
            a *= ((l + k) * (l + 1 - k)) as f64 / k as f64;
            p *= inv;
        }
        let t = a * p;
        plus += t;
        alt += if k % 2 == 0 { t } else { -t };
    }
    let sign = if l % 2 == 0 { 1.0 } else { -1.0 };
    inv * (alt - sign * (-2.0 * x).exp() * plus)
}
