//! SOAP power spectrum with outer (per-atom spectrum) averaging.
//!
//! Neighbour density around each centre is a sum of unnormalized Gaussians
//! `exp(-|r - r_j|² / 2σ²)` over every atom (including the centre itself)
//! whose periodic image lies strictly within `r_cut`. Its expansion
//! coefficients are
//!
//! `c_nlm = Σ_j 4π Y_lm(r̂_j) ∫_0^{r_c} r² g_n(r) e^{-(r - r_j)²/2σ²} e^{-x} i_l(x) dr`,
//! with `x = r r_j / σ²`, and the radial integral is done by composite
//! Gauss-Legendre quadrature.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::bessel::scaled_bessel_i;
use super::harmonics::{lm_index, n_harmonics, real_spherical_harmonics};
use super::quadrature::composite;
use super::radial::RadialBasis;
use super::PesError;
use crate::schema::{det3, ElementSymbol, Frame, Mat3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    Outer,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SoapParams {
    #[serde(default = "default_rcut")]
    pub r_cut: f64,
    #[serde(default = "default_nmax")]
    pub n_max: usize,
    #[serde(default = "default_lmax")]
    pub l_max: usize,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_averaging")]
    pub averaging: Averaging,
}

fn default_rcut() -> f64 {
    5.0
}
fn default_nmax() -> usize {
    8
}
fn default_lmax() -> usize {
    6
}
fn default_sigma() -> f64 {
    0.5
}
fn default_averaging() -> Averaging {
    Averaging::Outer
}

impl Default for SoapParams {
    fn default() -> Self {
        SoapParams {
            r_cut: default_rcut(),
            n_max: default_nmax(),
            l_max: default_lmax(),
            sigma: default_sigma(),
            averaging: default_averaging(),
        }
    }
}

impl SoapParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.r_cut > 0.0 && self.r_cut.is_finite()) {
            return Err("r_cut must be > 0".into());
        }
        if self.n_max < 1 {
            return Err("n_max must be >= 1".into());
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err("sigma must be > 0".into());
        }
        Ok(())
    }
}

pub const MIN_CELL_VOLUME: f64 = 1e-6;
/// Gaussian tails beyond exp(-40) are dropped from the radial quadrature.
const GAUSS_CUTOFF: f64 = 40.0;

/// Descriptor calculator for a fixed parameter set and species list.
#[derive(Clone, Debug)]
pub struct Soap {
    params: SoapParams,
    species: Vec<ElementSymbol>,
    basis: RadialBasis,
    nodes: Vec<f64>,
    /// `weights[q] * r_q² * g_n(r_q)`, indexed `[n * n_nodes + q]`.
    weighted_basis: Vec<f64>,
}

impl Soap {
    /// `species` is the element set of the chemical subset; it fixes the
    /// descriptor layout.
    pub fn new(params: SoapParams, species: &[ElementSymbol]) -> Result<Soap, PesError> {
        params.validate().map_err(PesError::InvalidParams)?;
        let mut species = species.to_vec();
        species.sort();
        species.dedup();
        if species.is_empty() {
            return Err(PesError::InvalidParams("species set is empty".into()));
        }
        let basis = RadialBasis::new(params.r_cut, params.n_max);
        let panels = ((params.r_cut / params.sigma).ceil() as usize).max(4);
        let (nodes, weights) = composite(0.0, params.r_cut, panels, 16);
        let n_nodes = nodes.len();
        let mut weighted_basis = vec![0.0; params.n_max * n_nodes];
        let mut g = vec![0.0; params.n_max];
        for (q, (r, w)) in nodes.iter().zip(&weights).enumerate() {
            basis.eval(*r, &mut g);
            for n in 0..params.n_max {
                weighted_basis[n * n_nodes + q] = w * r * r * g[n];
            }
        }
        Ok(Soap { params, species, basis, nodes, weighted_basis })
    }

    pub fn params(&self) -> &SoapParams {
        &self.params
    }

    pub fn species(&self) -> &[ElementSymbol] {
        &self.species
    }

    pub fn basis(&self) -> &RadialBasis {
        &self.basis
    }

    pub fn n_pairs(&self) -> usize {
        let s = self.species.len();
        s * (s + 1) / 2
    }

    pub fn dimension(&self) -> usize {
        let n = self.params.n_max;
        self.n_pairs() * n * (n + 1) / 2 * (self.params.l_max + 1)
    }

    /// `∫ r² g_n(r) e^{-(r-d)²/2σ²} e^{-x} i_l(x) dr` for all n, l, flat `[n * (l_max+1) + l]`.
    pub fn radial_integrals(&self, d: f64) -> Vec<f64> {
        let (n_max, l_max) = (self.params.n_max, self.params.l_max);
        let s2 = self.params.sigma * self.params.sigma;
        let n_nodes = self.nodes.len();
        let mut out = vec![0.0; n_max * (l_max + 1)];
        let mut il = vec![0.0; l_max + 1];
        for (q, &r) in self.nodes.iter().enumerate() {
            let g = (r - d) * (r - d) / (2.0 * s2);
            if g > GAUSS_CUTOFF {
                continue;
            }
            let gauss = (-g).exp();
            scaled_bessel_i(r * d / s2, &mut il);
            for n in 0..n_max {
                let wb = self.weighted_basis[n * n_nodes + q] * gauss;
                for l in 0..=l_max {
                    out[n * (l_max + 1) + l] += wb * il[l];
                }
            }
        }
        out
    }

    /// Expansion coefficients of one centre's neighbour density, per
    /// species: `[species][n][lm]` flattened. `neighbours` holds
    /// `(species index, displacement)` pairs, centre included at zero.
    pub fn coefficients(&self, neighbours: &[(usize, [f64; 3])]) -> Vec<f64> {
        let (n_max, l_max) = (self.params.n_max, self.params.l_max);
        let nh = n_harmonics(l_max);
        let stride = n_max * nh;
        let mut c = vec![0.0; self.species.len() * stride];
        let mut y = vec![0.0; nh];
        for &(s, v) in neighbours {
            let d = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if d < 1e-12 {
                y.iter_mut().for_each(|v| *v = 0.0);
                y[0] = 0.5 / PI.sqrt();
            } else {
                real_spherical_harmonics(l_max, [v[0] / d, v[1] / d, v[2] / d], &mut y);
            }
            let radial = self.radial_integrals(d);
            let block = &mut c[s * stride..(s + 1) * stride];
            for n in 0..n_max {
                for l in 0..=l_max {
                    let rad = 4.0 * PI * radial[n * (l_max + 1) + l];
                    if rad == 0.0 {
                        continue;
                    }
                    for m in -(l as i64)..=l as i64 {
                        let k = lm_index(l, m);
                        block[n * nh + k] += rad * y[k];
                    }
                }
            }
        }
        c
    }

    /// Rotationally invariant power spectrum of one centre:
    /// `p(Z1, Z2, n, n', l) = π √(8/(2l+1)) Σ_m c^{Z1}_{nlm} c^{Z2}_{n'lm}`
    /// for `Z1 <= Z2`, `n <= n'`.
    pub fn power_spectrum(&self, c: &[f64]) -> Vec<f64> {
        let (n_max, l_max) = (self.params.n_max, self.params.l_max);
        let nh = n_harmonics(l_max);
        let stride = n_max * nh;
        let s = self.species.len();
        let mut p = Vec::with_capacity(self.dimension());
        for z1 in 0..s {
            for z2 in z1..s {
                for n in 0..n_max {
                    for n2 in n..n_max {
                        for l in 0..=l_max {
                            let pref = PI * (8.0 / (2 * l + 1) as f64).sqrt();
                            let mut sum = 0.0;
                            for m in -(l as i64)..=l as i64 {
                                let k = lm_index(l, m);
                                sum += c[z1 * stride + n * nh + k] * c[z2 * stride + n2 * nh + k];
                            }
                            p.push(pref * sum);
                        }
                    }
                }
            }
        }
        p
    }

    /// Structure descriptor: mean of per-atom power spectra.
    pub fn descriptor(&self, frame: &Frame) -> Result<Vec<f64>, PesError> {
        if frame.species.is_empty() {
            return Err(PesError::EmptyStructure(frame.frame_id.clone()));
        }
        let species_idx = frame
            .species
            .iter()
            .map(|s| {
                ElementSymbol::parse(s)
                    .and_then(|e| self.species.binary_search(&e).ok())
                    .ok_or_else(|| PesError::UnexpectedSpecies(s.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let env = neighbour_lists(&frame.lattice, &frame.positions, self.params.r_cut)
            .ok_or_else(|| PesError::NumericalOverflow(frame.frame_id.clone()))?;
        let mut spectra: Vec<Vec<f64>> = env
            .into_iter()
            .map(|neigh| {
                let mut list: Vec<(usize, [f64; 3])> = neigh.into_iter().map(|(j, v)| (species_idx[j], v)).collect();
                // Canonical summation order makes the result independent of atom order.
                list.sort_by(|a, b| {
                    a.0.cmp(&b.0)
                        .then(a.1[0].total_cmp(&b.1[0]))
                        .then(a.1[1].total_cmp(&b.1[1]))
                        .then(a.1[2].total_cmp(&b.1[2]))
                });
                self.power_spectrum(&self.coefficients(&list))
            })
            .collect();
        spectra.sort_by(|a, b| {
            a.iter()
                .zip(b)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let n_atoms = spectra.len() as f64;
        let mut avg = vec![0.0; self.dimension()];
        for s in &spectra {
            for (a, v) in avg.iter_mut().zip(s) {
                *a += v;
            }
        }
        avg.iter_mut().for_each(|a| *a /= n_atoms);
        if avg.iter().any(|v| !v.is_finite()) {
            return Err(PesError::NumericalOverflow(frame.frame_id.clone()));
        }
        Ok(avg)
    }
}

/// For every atom, the atoms (by index) whose periodic images lie strictly
/// within `r_cut`, as displacement vectors from that atom. The atom itself
/// appears once at zero displacement. Returns `None` for degenerate cells.
pub fn neighbour_lists(lattice: &Mat3, positions: &[[f64; 3]], r_cut: f64) -> Option<Vec<Vec<(usize, [f64; 3])>>> {
    let volume = det3(lattice).abs();
    if !(volume >= MIN_CELL_VOLUME) {
        return None;
    }
    let inv = crate::schema::invert3(lattice)?;
    // Wrap into the home cell so image ranges depend only on the cell.
    let wrapped: Vec<[f64; 3]> = positions
        .iter()
        .map(|p| {
            let mut f = [0.0; 3];
            for k in 0..3 {
                f[k] = p[0] * inv[0][k] + p[1] * inv[1][k] + p[2] * inv[2][k];
                f[k] -= f[k].floor();
            }
            [
                f[0] * lattice[0][0] + f[1] * lattice[1][0] + f[2] * lattice[2][0],
                f[0] * lattice[0][1] + f[1] * lattice[1][1] + f[2] * lattice[2][1],
                f[0] * lattice[0][2] + f[1] * lattice[1][2] + f[2] * lattice[2][2],
            ]
        })
        .collect();
    let reps: Vec<i64> = (0..3)
        .map(|k| {
            let a = lattice[(k + 1) % 3];
            let b = lattice[(k + 2) % 3];
            let cross = [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
            let area = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
            let spacing = volume / area;
            (r_cut / spacing).ceil() as i64 + 1
        })
        .collect();
    let rc2 = r_cut * r_cut;
    let mut out = Vec::with_capacity(positions.len());
    for (i, pi) in wrapped.iter().enumerate() {
        let mut neigh = Vec::new();
        for n0 in -reps[0]..=reps[0] {
            for n1 in -reps[1]..=reps[1] {
                for n2 in -reps[2]..=reps[2] {
                    let t = [
                        n0 as f64 * lattice[0][0] + n1 as f64 * lattice[1][0] + n2 as f64 * lattice[2][0],
                        n0 as f64 * lattice[0][1] + n1 as f64 * lattice[1][1] + n2 as f64 * lattice[2][1],
                        n0 as f64 * lattice[0][2] + n1 as f64 * lattice[1][2] + n2 as f64 * lattice[2][2],
                    ];
                    for (j, pj) in wrapped.iter().enumerate() {
                        if i == j && n0 == 0 && n1 == 0 && n2 == 0 {
                            neigh.push((j, [0.0; 3]));
                            continue;
                        }
                        let v = [pj[0] + t[0] - pi[0], pj[1] + t[1] - pi[1], pj[2] + t[2] - pi[2]];
                        if v[0] * v[0] + v[1] * v[1] + v[2] * v[2] < rc2 {
                            neigh.push((j, v));
                        }
                    }
                }
            }
        }
        out.push(neigh);
    }
    Some(out)
}
