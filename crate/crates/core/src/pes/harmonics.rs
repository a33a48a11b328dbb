//! Real spherical harmonics, orthonormal on the unit sphere.
//!
//! Evaluated from Cartesian components so that no angle is ever formed:
//! `P_l^m(cos θ) / sin^m θ` is a polynomial in `z`, and `sin^m θ cos(mφ)`,
//! `sin^m θ sin(mφ)` are the real and imaginary parts of `(x + iy)^m`.

use std::f64::consts::PI;

pub fn n_harmonics(l_max: usize) -> usize {
    (l_max + 1) * (l_max + 1)
}

/// Position of `Y_lm` in the flat output, `m` running `-l..=l`.
pub fn lm_index(l: usize, m: i64) -> usize {
    (l * l) as usize + (m + l as i64) as usize
}

/// Fills `out` with `Y_lm(u)` for a unit vector `u`, `l = 0..=l_max`.
pub fn real_spherical_harmonics(l_max: usize, u: [f64; 3], out: &mut [f64]) {
    debug_assert_eq!(out.len(), n_harmonics(l_max));
    let [x, y, z] = u;
    // (x + iy)^m
    let mut re = vec![1.0; l_max + 1];
    let mut im = vec![0.0; l_max + 1];
    for m in 1..=l_max {
        re[m] = re[m - 1] * x - im[m - 1] * y;
        im[m] = re[m - 1] * y + im[m - 1] * x;
    }
    for m in 0..=l_max {
        // q[l] = P_l^m(z) / sin^m θ, without the Condon-Shortley phase.
        let mut q_prev = 0.0;
        let mut q = double_factorial(2 * m as i64 - 1);
        for l in m..=l_max {
            if l > m {
                let next = ((2 * l - 1) as f64 * z * q - (l + m - 1) as f64 * q_prev) / (l - m) as f64;
                q_prev = q;
                q = next;
            }
            let norm = ((2 * l + 1) as f64 / (4.0 * PI) * factorial_ratio(l - m, l + m)).sqrt();
            if m == 0 {
                out[lm_index(l, 0)] = norm * q;
            } else {
                let s = std::f64::consts::SQRT_2 * norm * q;
                out[lm_index(l, m as i64)] = s * re[m];
                out[lm_index(l, -(m as i64))] = s * im[m];
            }
        }
    }
}

fn double_factorial(n: i64) -> f64 {
    let mut r = 1.0;
    let mut k = n;
    while k > 1 {
        r *= k as f64;
        k -= 2;
    }
    r
}

/// `a! / b!` for `a <= b`.
fn factorial_ratio(a: usize, b: usize) -> f64 {
    (a + 1..=b).fold(1.0, |acc, k| acc / k as f64)
}
