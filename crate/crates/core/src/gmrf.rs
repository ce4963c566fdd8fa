//! Gaussian Markov random field relief estimator.
//!
//! The initial estimate inverts the sine backscatter law pixel by pixel for
//! the relief increment along range and integrates each row. Refinement
//! alternates a maximum pseudo-likelihood fit of a four-neighbour Gaussian
//! MRF (M step) with one checkerboard sweep of iterated conditional modes
//! (E step). Shadowed pixels carry no data and are updated from the prior
//! alone.

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, HeightMap, IntensityImage, ShadowMask};
use crate::par::Exec;
use crate::sas::{grazing_angle, SonarGeometry};

/// Relief increment written for shadowed pixels by [`delta_height`].
pub const SHADOW_SENTINEL: f64 = -2.0;

/// Smallest variance used anywhere in refinement [m²].
const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmrfConfig {
    /// Sensor altitude used for the slope inversion [m].
    pub initial_altitude: f64,
    pub iterations: usize,
    /// Odd window side for the shadow detector.
    pub shadow_window: usize,
    pub shadow_mean_frac: f64,
    pub shadow_var_frac: f64,
    /// Early stop when no pixel moves more than this [m].
    pub convergence_tol: f64,
}

impl Default for GmrfConfig {
    fn default() -> Self {
        Self {
            initial_altitude: 0.8,
            iterations: 50,
            shadow_window: 5,
            shadow_mean_frac: 0.2,
            shadow_var_frac: 0.5,
            convergence_tol: 1e-9,
        }
    }
}

impl GmrfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_altitude > 0.0) {
            return Err(Error::invalid("initial_altitude must be > 0"));
        }
        if self.shadow_window < 3 || self.shadow_window % 2 == 0 {
            return Err(Error::invalid(format!(
                "shadow_window must be odd and >= 3, got {}",
                self.shadow_window
            )));
        }
        for (name, f) in [
            ("shadow_mean_frac", self.shadow_mean_frac),
            ("shadow_var_frac", self.shadow_var_frac),
        ] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::invalid(format!("{name} must lie in (0, 1], got {f}")));
            }
        }
        if !(self.convergence_tol >= 0.0) {
            return Err(Error::invalid("convergence_tol must be >= 0"));
        }
        Ok(())
    }
}

/// Neighbour interaction weights in N, S, E, W order and the error variances.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmrfParams {
    pub beta: [f64; 4],
    pub sigma_prior_sq: f64,
    pub sigma_recon_sq: f64,
    pub sigma_occl_sq: f64,
}

/// Window statistics shadow detector. A pixel is shadowed when both its
/// window mean and window variance fall below the configured fractions of
/// the global mean and variance. Windows are clamped at the borders by
/// edge replication.
pub fn shadow_map(img: &IntensityImage, cfg: &GmrfConfig) -> Result<ShadowMask> {
    cfg.validate()?;
    let (w, h) = (img.width(), img.height());
    let half = (cfg.shadow_window / 2) as isize;
    let global_mean = img.mean();
    let global_var = img.variance();
    let mean_limit = cfg.shadow_mean_frac * global_mean;
    let var_limit = cfg.shadow_var_frac * global_var;
    let count = (cfg.shadow_window * cfg.shadow_window) as f64;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;

    let mut mask = vec![false; w * h];
    Exec::default().for_each_chunk_mut(&mut mask, w, |i, row| {
        for (j, out) in row.iter_mut().enumerate() {
            let (mut s, mut s2) = (0.0, 0.0);
            for di in -half..=half {
                let r = clamp(i as isize + di, h);
                for dj in -half..=half {
                    let v = img.get(r, clamp(j as isize + dj, w));
                    s += v;
                    s2 += v * v;
                }
            }
            let mean = s / count;
            let var = (s2 / count - mean * mean).max(0.0);
            *out = mean < mean_limit && var < var_limit;
        }
    });
    ShadowMask::new(w, h, mask)
}

/// Relief increment along range from the inverted sine law:
/// `ΔU / tan(atan(A_s / r_j) + acos(I))`, or [`SHADOW_SENTINEL`] for shadowed
/// pixels. Intensities are clamped to `[0, 1]`; the tangent pole (flat-floor
/// intensity) maps to zero.
pub fn delta_height(img: &IntensityImage, mask: &ShadowMask, geom: &SonarGeometry) -> Result<Grid> {
    geom.validate()?;
    if mask.width() != img.width() || mask.height() != img.height() {
        return Err(Error::dims(
            format!("{}x{}", img.width(), img.height()),
            format!("{}x{}", mask.width(), mask.height()),
        ));
    }
    let w = img.width();
    let grazing: Vec<f64> = (0..w)
        .map(|j| grazing_angle(j, geom))
        .collect::<Result<_>>()?;
    let mut out = vec![0.0; img.len()];
    Exec::default().for_each_chunk_mut(&mut out, w, |i, row| {
        for (j, v) in row.iter_mut().enumerate() {
            *v = if mask.get(i, j) {
                SHADOW_SENTINEL
            } else {
                let arg = grazing[j] + img.get(i, j).clamp(0.0, 1.0).acos();
                let (s, c) = arg.sin_cos();
                if c.abs() < 1e-15 {
                    0.0
                } else {
                    geom.range_step * c / s
                }
            };
        }
    });
    Grid::new(w, img.height(), img.spacing(), out)
}

/// Row-wise cumulative sum.
pub fn integrate_heights(delta: &Grid) -> Result<HeightMap> {
    let w = delta.width();
    let mut out = delta.values().to_vec();
    Exec::default().for_each_chunk_mut(&mut out, w, |_, row| {
        let mut acc = 0.0;
        for v in row.iter_mut() {
            acc += *v;
            *v = acc;
        }
    });
    Ok(HeightMap::new(Grid::new(w, delta.height(), delta.spacing(), out)?))
}

/// Pseudo-likelihood fit of `H_ij | nbrs ~ N(Σ β_d H_d, σ²)` by ordinary
/// least squares over interior pixels. Only `beta` and `sigma_prior_sq` are
/// estimated; the error variances are copied from `sigma_prior_sq`.
pub fn mple_fit(h: &Grid) -> Result<GmrfParams> {
    let (w, ht) = (h.width(), h.height());
    if w < 3 || ht < 3 {
        return Err(Error::invalid("MPLE needs at least 3x3 pixels"));
    }
    let mut xtx = Matrix4::<f64>::zeros();
    let mut xty = Vector4::<f64>::zeros();
    for i in 1..ht - 1 {
        for j in 1..w - 1 {
            let x = Vector4::new(h.get(i - 1, j), h.get(i + 1, j), h.get(i, j + 1), h.get(i, j - 1));
            xtx += x * x.transpose();
            xty += x * h.get(i, j);
        }
    }
    let svd = xtx.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax > 0.0) || smin <= smax * 1e-12 {
        return Err(Error::Singular(format!(
            "MPLE normal equations are singular (singular values {smin:e}..{smax:e})"
        )));
    }
    let beta = svd
        .solve(&xty, 0.0)
        .map_err(|e| Error::Singular(e.to_string()))?;
    let n = ((w - 2) * (ht - 2)) as f64;
    let mut rss = 0.0;
    for i in 1..ht - 1 {
        for j in 1..w - 1 {
            let pred = beta[0] * h.get(i - 1, j)
                + beta[1] * h.get(i + 1, j)
                + beta[2] * h.get(i, j + 1)
                + beta[3] * h.get(i, j - 1);
            rss += (h.get(i, j) - pred).powi(2);
        }
    }
    let var = rss / n;
    Ok(GmrfParams {
        beta: [beta[0], beta[1], beta[2], beta[3]],
        sigma_prior_sq: var,
        sigma_recon_sq: var,
        sigma_occl_sq: var,
    })
}

#[inline]
fn reflect(v: isize, n: usize) -> usize {
    if v < 0 {
        (-v) as usize
    } else if v as usize >= n {
        2 * (n - 1) - v as usize
    } else {
        v as usize
    }
}

/// Conditional prior mean `Σ β_d H_d`, with neighbours reflected at borders.
pub fn prior_mean(h: &[f64], w: usize, ht: usize, beta: &[f64; 4], i: usize, j: usize) -> f64 {
    let (ii, jj) = (i as isize, j as isize);
    let at = |r: isize, c: isize| h[reflect(r, ht) * w + reflect(c, w)];
    beta[0] * at(ii - 1, jj) + beta[1] * at(ii + 1, jj) + beta[2] * at(ii, jj + 1) + beta[3] * at(ii, jj - 1)
}

/// Objective values of one colour half-sweep, evaluated with the prior means
/// computed before that half-sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HalfSweep {
    pub objective_before: f64,
    pub objective_after: f64,
    pub max_change: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepReport {
    pub halves: [HalfSweep; 2],
}

impl SweepReport {
    pub fn objective_before(&self) -> f64 {
        self.halves[0].objective_before + self.halves[1].objective_before
    }

    pub fn objective_after(&self) -> f64 {
        self.halves[0].objective_after + self.halves[1].objective_after
    }

    pub fn max_change(&self) -> f64 {
        self.halves[0].max_change.max(self.halves[1].max_change)
    }
}

/// One ICM sweep with a checkerboard schedule and fixed parameters.
///
/// Pixels of one colour only neighbour pixels of the other, so each
/// half-sweep sets every pixel of its colour to the exact minimiser of
/// `σ_recon⁻²(Ĥ - h_data)² + σ_prior⁻²(Ĥ - h_prior)²` (data term dropped
/// for shadowed pixels) while its prior mean stays fixed.
pub fn icm_sweep(
    current: &mut [f64],
    data: &Grid,
    mask: &ShadowMask,
    params: &GmrfParams,
    exec: Exec,
) -> SweepReport {
    let (w, ht) = (data.width(), data.height());
    let inv_r = 1.0 / params.sigma_recon_sq.max(VARIANCE_FLOOR);
    let inv_p = 1.0 / params.sigma_prior_sq.max(VARIANCE_FLOOR);
    let mut halves = [HalfSweep {
        objective_before: 0.0,
        objective_after: 0.0,
        max_change: 0.0,
    }; 2];
    for (color, half) in halves.iter_mut().enumerate() {
        let src = current.to_vec();
        let rows: Vec<(f64, f64, f64)> = {
            let src = &src;
            let mut stats = vec![(0.0, 0.0, 0.0); ht];
            let mut updated = src.clone();
            exec.for_each_chunk_mut(&mut updated, w, |i, row| {
                for j in ((i + color) % 2..w).step_by(2) {
                    let prior = prior_mean(src, w, ht, &params.beta, i, j);
                    let d = data.get(i, j);
                    row[j] = if mask.get(i, j) {
                        prior
                    } else {
                        (inv_r * d + inv_p * prior) / (inv_r + inv_p)
                    };
                }
            });
            // objective bookkeeping in fixed row order
            for (i, s) in stats.iter_mut().enumerate() {
                let (mut before, mut after, mut change) = (0.0, 0.0, 0.0f64);
                for j in ((i + color) % 2..w).step_by(2) {
                    let prior = prior_mean(src, w, ht, &params.beta, i, j);
                    let d = data.get(i, j);
                    let old = src[i * w + j];
                    let new = updated[i * w + j];
                    let term = |x: f64| {
                        let dt = if mask.get(i, j) { 0.0 } else { inv_r * (x - d).powi(2) };
                        dt + inv_p * (x - prior).powi(2)
                    };
                    before += term(old);
                    after += term(new);
                    change = change.max((new - old).abs());
                }
                *s = (before, after, change);
            }
            current.copy_from_slice(&updated);
            stats
        };
        for (b, a, c) in rows {
            half.objective_before += b;
            half.objective_after += a;
            half.max_change = half.max_change.max(c);
        }
    }
    SweepReport { halves }
}

fn residual_variance(a: &Grid, b: &[f64], mask: &ShadowMask, shadowed: bool) -> Option<f64> {
    let (mut n, mut s, mut s2) = (0usize, 0.0, 0.0);
    for (k, (&x, &y)) in a.values().iter().zip(b).enumerate() {
        if mask.values()[k] == shadowed {
            let r = x - y;
            n += 1;
            s += r;
            s2 += r * r;
        }
    }
    (n > 1).then(|| {
        let m = s / n as f64;
        (s2 / n as f64 - m * m).max(0.0)
    })
}

/// Diagnostics from [`estimate_traced`].
#[derive(Clone, Debug, Default)]
pub struct EstimateTrace {
    pub params: Vec<GmrfParams>,
    pub sweeps: Vec<SweepReport>,
    pub shadow_fraction: f64,
    /// Set when refinement stopped because MPLE became degenerate.
    pub stopped_degenerate: bool,
}

/// Full estimator: shadow map, slope inversion and integration, then
/// `cfg.iterations` EM/ICM rounds. The geometry's altitude is replaced by
/// `cfg.initial_altitude`.
pub fn estimate(img: &IntensityImage, geom: &SonarGeometry, cfg: &GmrfConfig) -> Result<HeightMap> {
    estimate_traced(img, geom, cfg, Exec::default()).map(|(h, _)| h)
}

pub fn estimate_traced(
    img: &IntensityImage,
    geom: &SonarGeometry,
    cfg: &GmrfConfig,
    exec: Exec,
) -> Result<(HeightMap, EstimateTrace)> {
    cfg.validate()?;
    let geom = SonarGeometry {
        altitude: cfg.initial_altitude,
        ..*geom
    };
    let mask = shadow_map(img, cfg)?;
    let data = integrate_heights(&delta_height(img, &mask, &geom)?)?.into_grid();
    let mut trace = EstimateTrace {
        shadow_fraction: mask.fraction(),
        ..EstimateTrace::default()
    };
    let mut current = data.values().to_vec();
    for _ in 0..cfg.iterations {
        let snapshot = Grid::new(data.width(), data.height(), data.spacing(), current.clone())?;
        let mut params = match mple_fit(&snapshot) {
            Ok(p) => p,
            Err(Error::Singular(msg)) => {
                log::debug!("gmrf refinement stopped: {msg}");
                trace.stopped_degenerate = true;
                break;
            }
            Err(e) => return Err(e),
        };
        params.sigma_prior_sq = params.sigma_prior_sq.max(VARIANCE_FLOOR);
        // The initial estimate equals the data exactly, so the residual is
        // floored at the prior variance.
        params.sigma_recon_sq = residual_variance(&data, &current, &mask, false)
            .unwrap_or(params.sigma_prior_sq)
            .max(params.sigma_prior_sq);
        params.sigma_occl_sq = residual_variance(&data, &current, &mask, true)
            .unwrap_or(params.sigma_prior_sq)
            .max(VARIANCE_FLOOR);
        let report = icm_sweep(&mut current, &data, &mask, &params, exec);
        trace.params.push(params);
        trace.sweeps.push(report);
        if report.max_change() < cfg.convergence_tol {
            break;
        }
    }
    let out = Grid::new(data.width(), data.height(), data.spacing(), current)?;
    Ok((HeightMap::new(out), trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn img(w: usize, h: usize, f: impl FnMut(usize, usize) -> f64) -> IntensityImage {
        IntensityImage::new(Grid::from_fn(w, h, 1.0, f).unwrap()).unwrap()
    }

    fn noise(w: usize, h: usize, seed: u64) -> Grid {
        let mut r = rng::rng_from(seed);
        Grid::new(w, h, 1.0, (0..w * h).map(|_| r.sample(StandardNormal)).collect()).unwrap()
    }

    #[test]
    fn config_defaults() {
        let c = GmrfConfig::default();
        assert_eq!(c.initial_altitude, 0.8);
        assert_eq!(c.iterations, 50);
        assert!(c.validate().is_ok());
        assert!(GmrfConfig { shadow_window: 4, ..c }.validate().is_err());
    }

    #[test]
    fn shadow_map_examples() {
        let cfg = GmrfConfig::default();
        let bright = img(20, 20, |_, _| 0.8);
        assert_eq!(shadow_map(&bright, &cfg).unwrap().count(), 0);

        let textured = img(40, 40, |i, j| {
            if (10..30).contains(&i) && (10..30).contains(&j) {
                0.0
            } else {
                0.5 + 0.4 * (((i * 7 + j * 13) % 5) as f64 / 4.0)
            }
        });
        let m = shadow_map(&textured, &cfg).unwrap();
        for i in 12..28 {
            for j in 12..28 {
                assert!(m.get(i, j), "({i},{j})");
            }
        }
        assert!(!m.get(2, 2));
    }

    /// Brute-force oracle: explicit window list with replicated borders.
    fn oracle_mask(img: &IntensityImage, win: usize, mf: f64, vf: f64) -> Vec<bool> {
        let (w, h) = (img.width() as isize, img.height() as isize);
        let half = (win / 2) as isize;
        let all: Vec<f64> = img.values().to_vec();
        let gm = all.iter().sum::<f64>() / all.len() as f64;
        let gv = all.iter().map(|v| (v - gm).powi(2)).sum::<f64>() / all.len() as f64;
        let mut out = Vec::new();
        for i in 0..h {
            for j in 0..w {
                let mut vals = Vec::new();
                for di in -half..=half {
                    for dj in -half..=half {
                        let r = (i + di).clamp(0, h - 1) as usize;
                        let c = (j + dj).clamp(0, w - 1) as usize;
                        vals.push(img.get(r, c));
                    }
                }
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
                out.push(m < mf * gm && v < vf * gv);
            }
        }
        out
    }

    #[test]
    fn shadow_map_matches_sliding_window_oracle() {
        let mut r = rng::rng_from(21);
        let noise_img = img(33, 27, |_, _| r.random::<f64>());
        let cfg = GmrfConfig {
            shadow_mean_frac: 1.0,
            shadow_var_frac: 1.0,
            shadow_window: 3,
            ..GmrfConfig::default()
        };
        let got = shadow_map(&noise_img, &cfg).unwrap();
        let want = oracle_mask(&noise_img, 3, 1.0, 1.0);
        let mismatches = got.values().iter().zip(&want).filter(|(a, b)| a != b).count();
        assert_eq!(mismatches, 0);
        assert!(got.count() > 0);
    }

    #[test]
    fn shadow_map_scale_invariant() {
        let mut r = rng::rng_from(4);
        let base = img(30, 30, |i, _| if i < 10 { 0.01 * r.random::<f64>() } else { r.random::<f64>() });
        let scaled = IntensityImage::new(base.map(|v| v * 4.0).unwrap()).unwrap();
        let cfg = GmrfConfig::default();
        assert_eq!(shadow_map(&base, &cfg).unwrap(), shadow_map(&scaled, &cfg).unwrap());
    }

    fn eq1_geom() -> SonarGeometry {
        SonarGeometry {
            altitude: 0.8,
            range_step: 1.0,
            near_range_offset: 0,
        }
    }

    #[test]
    fn delta_height_examples() {
        let g = eq1_geom();
        // column 4 at offset 0 is the scalar example; column 0 would be range 0
        let image = img(5, 1, |_, _| 1.0);
        let mut mask = vec![false; 5];
        let shifted = SonarGeometry {
            near_range_offset: 1,
            ..g
        };
        let m = ShadowMask::new(5, 1, mask.clone()).unwrap();
        let d = delta_height(&image, &m, &shifted).unwrap();
        // column 3 + offset 1 = j 4
        assert!((d.get(0, 3) - 5.0).abs() < 1e-12, "{}", d.get(0, 3));

        mask[2] = true;
        let m = ShadowMask::new(5, 1, mask).unwrap();
        let d = delta_height(&image, &m, &shifted).unwrap();
        assert_eq!(d.get(0, 2), SHADOW_SENTINEL);

        let flat = img(5, 1, |_, j| grazing_angle(j, &shifted).unwrap().sin());
        let d = delta_height(&flat, &ShadowMask::empty(5, 1), &shifted).unwrap();
        assert!(d.values().iter().all(|&v| v.abs() < 1e-14), "{:?}", d.values());
        assert!(delta_height(&flat, &ShadowMask::empty(5, 1), &g).is_err());
    }

    #[test]
    fn integrate_examples() {
        let g = Grid::new(3, 2, 1.0, vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap();
        let h = integrate_heights(&g).unwrap();
        assert_eq!(h.values(), &[1.0, 3.0, 6.0, 0.0, 0.0, 0.0]);
        let base = Grid::new(4, 1, 1.0, vec![0.5, 0.25, -1.0, 2.0]).unwrap();
        let mut with = base.values().to_vec();
        with[1] += SHADOW_SENTINEL;
        let hb = integrate_heights(&base).unwrap();
        let hw = integrate_heights(&Grid::new(4, 1, 1.0, with).unwrap()).unwrap();
        assert_eq!(hw.get(0, 0), hb.get(0, 0));
        for j in 1..4 {
            assert_eq!(hw.get(0, j), hb.get(0, j) + SHADOW_SENTINEL);
        }
    }

    #[test]
    fn integrate_is_linear() {
        let a = noise(9, 4, 1);
        let b = noise(9, 4, 2);
        let sum = Grid::new(9, 4, 1.0, a.values().iter().zip(b.values()).map(|(x, y)| x + y).collect()).unwrap();
        let ia = integrate_heights(&a).unwrap();
        let ib = integrate_heights(&b).unwrap();
        let is = integrate_heights(&sum).unwrap();
        for k in 0..36 {
            assert!((is.values()[k] - ia.values()[k] - ib.values()[k]).abs() < 1e-12);
        }
    }

    /// Closed-form OLS via explicit design matrix and nalgebra's QR-free
    /// normal equations; also returns standard errors.
    fn ols_oracle(h: &Grid) -> ([f64; 4], [f64; 4]) {
        let (w, ht) = (h.width(), h.height());
        let mut rows = Vec::new();
        let mut ys = Vec::new();
        for i in 1..ht - 1 {
            for j in 1..w - 1 {
                rows.push([h.get(i - 1, j), h.get(i + 1, j), h.get(i, j + 1), h.get(i, j - 1)]);
                ys.push(h.get(i, j));
            }
        }
        let n = rows.len();
        let x = nalgebra::DMatrix::from_fn(n, 4, |r, c| rows[r][c]);
        let y = nalgebra::DVector::from_vec(ys);
        let qr = x.clone().qr();
        let beta = qr.r().solve_upper_triangular(&(qr.q().transpose() * &y)).unwrap();
        let resid = &y - &x * &beta;
        let s2 = resid.dot(&resid) / (n - 4) as f64;
        let cov = (x.transpose() * &x).try_inverse().unwrap() * s2;
        (
            [beta[0], beta[1], beta[2], beta[3]],
            [cov[(0, 0)].sqrt(), cov[(1, 1)].sqrt(), cov[(2, 2)].sqrt(), cov[(3, 3)].sqrt()],
        )
    }

    #[test]
    fn mple_on_noise_is_near_zero() {
        let h = noise(102, 102, 8);
        let p = mple_fit(&h).unwrap();
        let (beta, se) = ols_oracle(&h);
        for d in 0..4 {
            assert!((p.beta[d] - beta[d]).abs() < 1e-10);
            assert!(p.beta[d].abs() < 3.0 * se[d], "beta {d} = {} se {}", p.beta[d], se[d]);
        }
        assert!((p.sigma_prior_sq - 1.0).abs() < 0.05);
    }

    #[test]
    fn mple_matches_oracle_on_correlated_field() {
        let n = noise(40, 30, 3);
        let smooth = Grid::from_fn(40, 30, 1.0, |i, j| {
            n.get(i, j) + 0.5 * n.get(i.saturating_sub(1), j) + 0.3 * n.get(i, j.saturating_sub(1))
        })
        .unwrap();
        let p = mple_fit(&smooth).unwrap();
        let (beta, _) = ols_oracle(&smooth);
        for d in 0..4 {
            assert!((p.beta[d] - beta[d]).abs() < 1e-10);
        }
    }

    #[test]
    fn mple_checkerboard_is_singular() {
        let cb = Grid::from_fn(10, 10, 1.0, |i, j| if (i + j) % 2 == 0 { 1.0 } else { -1.0 }).unwrap();
        assert!(matches!(mple_fit(&cb), Err(Error::Singular(_))));
    }

    #[test]
    fn mple_harmonic_field() {
        // discrete harmonic: each interior value is the mean of its neighbours
        let h = Grid::from_fn(20, 20, 1.0, |i, j| {
            let (x, y) = (i as f64, j as f64);
            0.3 * (x * x - y * y) + 0.7 * x * y + 0.2 * x - 0.4 * y
        })
        .unwrap();
        let p = mple_fit(&h).unwrap();
        for b in p.beta {
            assert!((b - 0.25).abs() < 1e-8, "{:?}", p.beta);
        }
        assert!(p.sigma_prior_sq < 1e-12);
    }

    #[test]
    fn icm_half_sweeps_never_increase_objective() {
        let data = noise(24, 20, 5);
        let mask = ShadowMask::new(24, 20, (0..480).map(|k| k % 11 == 0).collect()).unwrap();
        let params = GmrfParams {
            beta: [0.3, 0.2, 0.25, 0.2],
            sigma_prior_sq: 0.5,
            sigma_recon_sq: 0.8,
            sigma_occl_sq: 1.0,
        };
        let mut cur = noise(24, 20, 6).into_values();
        for _ in 0..10 {
            let r = icm_sweep(&mut cur, &data, &mask, &params, Exec::Sequential);
            for h in r.halves {
                assert!(h.objective_after <= h.objective_before + 1e-12 * h.objective_before.abs());
            }
        }
    }

    #[test]
    fn icm_exec_modes_agree() {
        let data = noise(17, 13, 5);
        let mask = ShadowMask::empty(17, 13);
        let params = GmrfParams {
            beta: [0.25; 4],
            sigma_prior_sq: 0.5,
            sigma_recon_sq: 0.5,
            sigma_occl_sq: 0.5,
        };
        let mut a = data.values().to_vec();
        let mut b = a.clone();
        let ra = icm_sweep(&mut a, &data, &mask, &params, Exec::Sequential);
        let rb = icm_sweep(&mut b, &data, &mask, &params, Exec::Parallel);
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }

    #[test]
    fn zero_iterations_is_initialisation() {
        let g = SonarGeometry {
            altitude: 3.0,
            range_step: 0.05,
            near_range_offset: 100,
        };
        let mut r = rng::rng_from(2);
        let image = img(32, 8, |_, _| 0.2 + 0.6 * r.random::<f64>());
        let cfg = GmrfConfig {
            iterations: 0,
            ..GmrfConfig::default()
        };
        let est = estimate(&image, &g, &cfg).unwrap();
        let g08 = SonarGeometry { altitude: 0.8, ..g };
        let mask = shadow_map(&image, &cfg).unwrap();
        let init = integrate_heights(&delta_height(&image, &mask, &g08).unwrap()).unwrap();
        assert_eq!(est, init);
        let refined = estimate(&image, &g, &GmrfConfig { iterations: 5, ..cfg }).unwrap();
        assert_ne!(refined, init);
    }

    #[test]
    fn flat_image_stops_refinement_cleanly() {
        let g = SonarGeometry {
            altitude: 0.8,
            range_step: 0.05,
            near_range_offset: 50,
        };
        let flat = img(16, 16, |_, j| grazing_angle(j, &g).unwrap().sin());
        let (h, trace) = estimate_traced(&flat, &g, &GmrfConfig::default(), Exec::default()).unwrap();
        assert!(trace.stopped_degenerate);
        assert!(h.values().iter().all(|v| v.abs() < 1e-12));
    }
}
