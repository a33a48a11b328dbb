//! Polynomial radial basis `(r_c - r)^(α+2)`, α = 1..=n_max, Löwdin
//! orthonormalized with respect to the `r²` measure on `[0, r_c]`.
//!
//! The raw overlap matrix is close to singular (condition number ~1e12 at
//! n_max = 8), so `S^{-1/2}` is never formed. Instead the raw functions are
//! expanded in a stable orthonormal basis of the same span, built with a
//! Stieltjes recurrence, and the Löwdin transform is applied as the
//! orthogonal polar factor of that expansion matrix. The result is exactly
//! the symmetric orthonormalization, and orthonormal to rounding error.

use nalgebra::DMatrix;

use super::quadrature::gauss_legendre;

#[derive(Clone, Debug)]
pub struct RadialBasis {
    r_cut: f64,
    n_max: usize,
    /// Three-term recurrence coefficients of the auxiliary orthonormal
    /// polynomials in `t = 1 - r/r_c`.
    alpha: Vec<f64>,
    beta: Vec<f64>,
    /// Row `n` holds the coefficients of `g_n` in the auxiliary basis.
    rotation: DMatrix<f64>,
}

impl RadialBasis {
    pub fn new(r_cut: f64, n_max: usize) -> RadialBasis {
        assert!(r_cut > 0.0 && n_max >= 1);
        // Auxiliary functions Q_k(x) = t^3 p_k(t), t = 1 - x, orthonormal under
        // x² dx on [0, 1], i.e. p_k orthonormal under (1-t)² t^6 dt.
        let (u, w) = gauss_legendre(n_max + 16);
        let t: Vec<f64> = u.iter().map(|u| 0.5 * (u + 1.0)).collect();
        let wt: Vec<f64> = t
            .iter()
            .zip(&w)
            .map(|(t, w)| 0.5 * w * (1.0 - t).powi(2) * t.powi(6))
            .collect();
        let mut alpha = Vec::with_capacity(n_max);
        let mut beta = Vec::with_capacity(n_max);
        let mass: f64 = wt.iter().sum();
        let mut p_prev = vec![0.0; t.len()];
        let mut p: Vec<f64> = vec![1.0 / mass.sqrt(); t.len()];
        beta.push(mass.sqrt());
        for k in 0..n_max {
            let a: f64 = (0..t.len()).map(|q| wt[q] * t[q] * p[q] * p[q]).sum();
            alpha.push(a);
            if k + 1 == n_max {
                break;
            }
            let mut next: Vec<f64> = (0..t.len())
                .map(|q| (t[q] - a) * p[q] - if k > 0 { beta[k] } else { 0.0 } * p_prev[q])
                .collect();
            let b = (0..t.len()).map(|q| wt[q] * next[q] * next[q]).sum::<f64>().sqrt();
            next.iter_mut().for_each(|v| *v /= b);
            beta.push(b);
            p_prev = std::mem::replace(&mut p, next);
        }
        let mut basis = RadialBasis {
            r_cut,
            n_max,
            alpha,
            beta,
            rotation: DMatrix::identity(n_max, n_max),
        };

        // A[a][k] = <φ̂_a, Q_k> with φ̂_a the normalized raw functions.
        let mut a_mat = DMatrix::<f64>::zeros(n_max, n_max);
        let mut q_vals = vec![0.0; n_max];
        for (x_node, wq) in t.iter().zip(&w) {
            let x = *x_node;
            let weight = 0.5 * wq * x * x;
            basis.auxiliary(x, &mut q_vals);
            for a in 0..n_max {
                let alpha_exp = (a + 3) as i32;
                let raw = (1.0 - x).powi(alpha_exp) * raw_norm(alpha_exp);
                for k in 0..n_max {
                    a_mat[(a, k)] += weight * raw * q_vals[k];
                }
            }
        }
        let svd = a_mat.svd(true, true);
        let u = svd.u.expect("requested");
        let v_t = svd.v_t.expect("requested");
        basis.rotation = u * v_t;
        basis
    }

    pub fn r_cut(&self) -> f64 {
        self.r_cut
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    /// Auxiliary orthonormal functions at reduced radius `x = r / r_c`.
    fn auxiliary(&self, x: f64, out: &mut [f64]) {
        let t = 1.0 - x;
        let t3 = t * t * t;
        let mut p_prev = 0.0;
        let mut p = 1.0 / self.beta[0];
        for k in 0..self.n_max {
            out[k] = t3 * p;
            if k + 1 < self.n_max {
                let prev_b = if k > 0 { self.beta[k] } else { 0.0 };
                let next = ((t - self.alpha[k]) * p - prev_b * p_prev) / self.beta[k + 1];
                p_prev = p;
                p = next;
            }
        }
    }

    /// Fills `out[n] = g_n(r)`, zero outside `[0, r_c]`. Normalized so that
    /// `∫_0^{r_c} r² g_n g_m dr = δ_nm`.
    pub fn eval(&self, r: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.n_max);
        if !(0.0..=self.r_cut).contains(&r) {
            out.iter_mut().for_each(|v| *v = 0.0);
            return;
        }
        let mut q = vec![0.0; self.n_max];
        self.auxiliary(r / self.r_cut, &mut q);
        let scale = self.r_cut.powf(-1.5);
        for (n, slot) in out.iter_mut().enumerate() {
            *slot = scale * (0..self.n_max).map(|k| self.rotation[(n, k)] * q[k]).sum::<f64>();
        }
    }
}

/// `1 / sqrt(∫_0^1 x² (1-x)^{2p} dx)` for the raw function `(1-x)^p`.
fn raw_norm(p: i32) -> f64 {
    let q = 2.0 * p as f64;
    let integral = 2.0 / ((q + 1.0) * (q + 2.0) * (q + 3.0));
    1.0 / integral.sqrt()
}
