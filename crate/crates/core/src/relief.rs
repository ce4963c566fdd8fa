//! Spectral synthesis of seabed relief.
//!
//! A relief map is drawn as a real Gaussian random field whose power spectrum
//! is a weighted mix of an anisotropic two-lobe ripple spectrum and an
//! isotropic power-law roughness spectrum, then rescaled to a target RMS
//! height. Texture rotation is applied in the wavenumber domain.

use std::f64::consts::PI;

use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, HeightMap};
use crate::rng;

/// Ripple and roughness spectrum parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureParams {
    /// Dominant ripple wavelength [m].
    pub lambda0: f64,
    /// Target RMS height [m].
    pub z_rms: f64,
    /// Ripple spectral widths [rad/m].
    pub sigma_x: f64,
    pub sigma_y: f64,
    /// Roughness spectral strength [m^4].
    pub omega2: f64,
    /// Roughness spectral exponent.
    pub gamma2: f64,
    /// Texture rotation [deg].
    pub phi_r: f64,
    pub ripple_weight: f64,
    pub roughness_weight: f64,
}

impl Default for TextureParams {
    fn default() -> Self {
        Self {
            lambda0: 1.14,
            z_rms: 0.1,
            sigma_x: 1.0,
            sigma_y: 1.0,
            omega2: 4.3e-5,
            gamma2: 3.04,
            phi_r: 0.0,
            ripple_weight: 1.0,
            roughness_weight: 1.0,
        }
    }
}

impl TextureParams {
    /// Ripple wavenumber `2π/λ0`.
    pub fn k0(&self) -> f64 {
        2.0 * PI / self.lambda0
    }

    pub fn with_rotation(mut self, phi_r: f64) -> Self {
        self.phi_r = phi_r;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lambda0", self.lambda0),
            ("z_rms", self.z_rms),
            ("sigma_x", self.sigma_x),
            ("sigma_y", self.sigma_y),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.omega2 >= 0.0 && self.omega2.is_finite()) {
            return Err(Error::invalid(format!("omega2 must be >= 0, got {}", self.omega2)));
        }
        if !(self.gamma2 >= 0.0 && self.gamma2.is_finite()) {
            return Err(Error::invalid(format!("gamma2 must be >= 0, got {}", self.gamma2)));
        }
        if !(-90.0..=90.0).contains(&self.phi_r) {
            return Err(Error::invalid(format!(
                "phi_r must lie in [-90, 90] deg, got {}",
                self.phi_r
            )));
        }
        for (name, w) in [
            ("ripple_weight", self.ripple_weight),
            ("roughness_weight", self.roughness_weight),
        ] {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1], got {w}")));
            }
        }
        Ok(())
    }

    /// Wavenumber coordinates seen by the unrotated spectrum.
    fn unrotate(&self, kx: f64, ky: f64) -> (f64, f64) {
        let (s, c) = self.phi_r.to_radians().sin_cos();
        (kx * c + ky * s, -kx * s + ky * c)
    }
}

/// Sediment–water density ratio, sound-velocity ratio and attenuation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SedimentParams {
    pub rho: f64,
    pub nu: f64,
    pub delta: f64,
}

impl Default for SedimentParams {
    fn default() -> Self {
        Self {
            rho: 2.0,
            nu: 1.16,
            delta: 0.01,
        }
    }
}

impl SedimentParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.nu > 0.0 && self.delta >= 0.0) {
            return Err(Error::invalid(format!("invalid sediment parameters {self:?}")));
        }
        Ok(())
    }
}

/// Two-lobe Gaussian ripple spectrum, evaluated in coordinates rotated by
/// `-phi_r`.
pub fn ripple_spectrum(p: &TextureParams, kx: f64, ky: f64) -> f64 {
    let (kx, ky) = p.unrotate(kx, ky);
    let k0 = p.k0();
    let sx2 = 2.0 * p.sigma_x * p.sigma_x;
    let sy2 = 2.0 * p.sigma_y * p.sigma_y;
    let ax = kx * kx / sx2;
    let scale = p.z_rms / (4.0 * PI * p.sigma_x * p.sigma_y);
    scale * ((-ax - (ky - k0).powi(2) / sy2).exp() + (-ax - (ky + k0).powi(2) / sy2).exp())
}

/// Isotropic power-law roughness `omega2 / k^gamma2`; zero at the origin.
pub fn roughness_spectrum(p: &TextureParams, kx: f64, ky: f64) -> f64 {
    let k = kx.hypot(ky);
    if k == 0.0 {
        return 0.0;
    }
    p.omega2 / k.powf(p.gamma2)
}

/// Weighted mixture of both spectra.
pub fn mixed_spectrum(p: &TextureParams, kx: f64, ky: f64) -> f64 {
    let mut v = 0.0;
    if p.ripple_weight > 0.0 {
        v += p.ripple_weight * ripple_spectrum(p, kx, ky);
    }
    if p.roughness_weight > 0.0 {
        v += p.roughness_weight * roughness_spectrum(p, kx, ky);
    }
    v
}

/// Signed wavenumber [rad/m] of FFT bin `index` on an `n`-point axis.
pub fn bin_wavenumber(index: usize, n: usize, spacing: f64) -> f64 {
    let signed = if index < n.div_ceil(2) {
        index as f64
    } else {
        index as f64 - n as f64
    };
    2.0 * PI * signed / (n as f64 * spacing)
}

/// In-place 2-D FFT of a row-major `n`x`n` buffer.
pub(crate) fn fft2(data: &mut [Complex64], n: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let fft = if inverse {
        planner.plan_fft_inverse(n)
    } else {
        planner.plan_fft_forward(n)
    };
    for row in data.chunks_exact_mut(n) {
        fft.process(row);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); n];
    for j in 0..n {
        for i in 0..n {
            col[i] = data[i * n + j];
        }
        fft.process(&mut col);
        for i in 0..n {
            data[i * n + j] = col[i];
        }
    }
}

/// Draws a relief map of `n`x`n` pixels.
///
/// Each wavenumber bin gets amplitude `sqrt(Φ(k)·Δk²)` times a unit complex
/// Gaussian, with Hermitian symmetry enforced so the inverse FFT is real. The
/// DC bin is zero. The field is then passed through [`rms_normalize`]; an
/// identically zero spectrum yields an all-zero map.
pub fn synthesize(p: &TextureParams, seed: u64, n: usize, spacing: f64) -> Result<HeightMap> {
    p.validate()?;
    if n < 2 || !n.is_power_of_two() {
        return Err(Error::invalid(format!("grid size must be a power of two >= 2, got {n}")));
    }
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(Error::invalid(format!("spacing must be > 0, got {spacing}")));
    }
    if p.ripple_weight > 0.0 && p.lambda0 / spacing < 4.0 {
        return Err(Error::invalid(format!(
            "ripple wavelength {} m is not resolved at {} m/pixel (need >= 4 px per wavelength)",
            p.lambda0, spacing
        )));
    }

    let dk = 2.0 * PI / (n as f64 * spacing);
    let mut rng = rng::rng_from(seed);
    let mut spec = vec![Complex64::new(0.0, 0.0); n * n];
    for r in 0..n {
        for c in 0..n {
            let (rc, cc) = ((n - r) % n, (n - c) % n);
            // visit each Hermitian pair once, from its raster-first member
            if (rc, cc) < (r, c) {
                continue;
            }
            let (kx, ky) = (bin_wavenumber(c, n, spacing), bin_wavenumber(r, n, spacing));
            let amp = (mixed_spectrum(p, kx, ky) * dk * dk).sqrt();
            if r == 0 && c == 0 {
                continue;
            }
            if (rc, cc) == (r, c) {
                let g: f64 = StandardNormal.sample(&mut rng);
                spec[r * n + c] = Complex64::new(amp * g, 0.0);
            } else {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                let z = Complex64::new(a, b) * (amp / 2f64.sqrt());
                spec[r * n + c] = z;
                spec[rc * n + cc] = z.conj();
            }
        }
    }
    fft2(&mut spec, n, true);
    let values: Vec<f64> = spec.iter().map(|z| z.re).collect();
    let grid = Grid::new(n, n, spacing, values)?;
    if grid.values().iter().all(|&v| v == 0.0) {
        return Ok(HeightMap::new(grid));
    }
    rms_normalize(&HeightMap::new(grid), p.z_rms, 1e-9)
}

const RMS_MAX_ITERATIONS: usize = 100;

/// Removes the mean, then rescales until the RMS height is within `tol`
/// (relative) of `z_rms`.
pub fn rms_normalize(map: &HeightMap, z_rms: f64, tol: f64) -> Result<HeightMap> {
    if !(z_rms > 0.0) {
        return Err(Error::invalid(format!("target RMS must be > 0, got {z_rms}")));
    }
    let mean = map.mean();
    let mut values: Vec<f64> = map.values().iter().map(|v| v - mean).collect();
    let rms = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
    if rms(&values) == 0.0 {
        return Err(Error::invalid("cannot RMS-normalize a constant map"));
    }
    for _ in 0..RMS_MAX_ITERATIONS {
        let current = rms(&values);
        if ((current - z_rms) / z_rms).abs() <= tol {
            break;
        }
        let scale = z_rms / current;
        values.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(HeightMap::new(Grid::new(
        map.width(),
        map.height(),
        map.spacing(),
        values,
    )?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ripple_only() -> TextureParams {
        TextureParams {
            roughness_weight: 0.0,
            ..TextureParams::default()
        }
    }

    #[test]
    fn ripple_at_peak() {
        let p = ripple_only();
        let k0 = p.k0();
        let expect = p.z_rms / (4.0 * PI * p.sigma_x * p.sigma_y)
            * (1.0 + (-2.0 * k0 * k0 / (p.sigma_y * p.sigma_y)).exp());
        let got = ripple_spectrum(&p, 0.0, k0);
        assert!((got - expect).abs() <= 1e-15 * expect);
    }

    #[test]
    fn ripple_symmetry_and_decay() {
        let p = TextureParams {
            phi_r: 37.0,
            sigma_x: 0.7,
            ..TextureParams::default()
        };
        for &(kx, ky) in &[(0.3, 1.2), (-4.0, 2.5), (7.0, -0.1)] {
            let a = ripple_spectrum(&p, kx, ky);
            let b = ripple_spectrum(&p, -kx, -ky);
            assert!((a - b).abs() <= 1e-14 * a.abs().max(1e-300));
        }
        assert!(ripple_spectrum(&p, 1e3, 0.0) < 1e-300);
    }

    #[test]
    fn roughness_values() {
        let p = TextureParams {
            omega2: 4.3e-5,
            gamma2: 3.04,
            ..TextureParams::default()
        };
        let k = 2.0 * PI / 1.14;
        // 4.3e-5 / 5.51157^3.04 evaluated independently as exp(ln ω2 - γ ln k)
        let oracle = (4.3e-5f64.ln() - 3.04 * k.ln()).exp();
        let got = roughness_spectrum(&p, k, 0.0);
        assert!((got - oracle).abs() < 1e-18);
        assert!((got - 2.39e-7).abs() < 0.01e-7, "{got}");

        let flat = TextureParams { gamma2: 0.0, ..p };
        assert_eq!(roughness_spectrum(&flat, 3.0, 4.0), 4.3e-5);
        let zero = TextureParams { omega2: 0.0, ..p };
        assert_eq!(roughness_spectrum(&zero, 3.0, 4.0), 0.0);
        assert_eq!(roughness_spectrum(&p, 0.0, 0.0), 0.0);
    }

    #[test]
    fn synthesize_is_deterministic() {
        let p = TextureParams::default();
        let a = synthesize(&p, 11, 64, 0.05).unwrap();
        let b = synthesize(&p, 11, 64, 0.05).unwrap();
        assert_eq!(a, b);
        let c = synthesize(&p, 12, 64, 0.05).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synthesize_zero_spectrum() {
        let p = TextureParams {
            ripple_weight: 0.0,
            omega2: 0.0,
            ..TextureParams::default()
        };
        let m = synthesize(&p, 3, 32, 0.05).unwrap();
        assert!(m.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn synthesize_rejects_bad_inputs() {
        let p = TextureParams::default();
        assert!(synthesize(&p, 0, 48, 0.05).is_err());
        let coarse = TextureParams {
            lambda0: 0.25,
            ..TextureParams::default()
        };
        assert!(synthesize(&coarse, 0, 64, 0.1).is_err());
        let bad = TextureParams {
            phi_r: 95.0,
            ..TextureParams::default()
        };
        assert!(synthesize(&bad, 0, 64, 0.05).is_err());
    }

    #[test]
    fn output_is_zero_mean_with_target_rms() {
        let p = TextureParams::default();
        let m = synthesize(&p, 5, 128, 0.05).unwrap();
        assert!(m.mean().abs() <= 1e-6 * p.z_rms);
        assert!(((m.rms() - p.z_rms) / p.z_rms).abs() <= 1e-6);
    }

    #[test]
    fn rms_normalize_halves() {
        // zero-mean map with RMS 2
        let g = Grid::new(2, 2, 1.0, vec![2.0, -2.0, 2.0, -2.0]).unwrap();
        let out = rms_normalize(&HeightMap::new(g), 1.0, 1e-12).unwrap();
        assert_eq!(out.values(), &[1.0, -1.0, 1.0, -1.0]);
        let again = rms_normalize(&out, 1.0, 1e-12).unwrap();
        assert_eq!(again, out);
    }

    #[test]
    fn rms_normalize_tolerance_and_constant() {
        let g = Grid::from_fn(16, 16, 1.0, |i, j| ((i * 7 + j * 3) % 5) as f64).unwrap();
        let out = rms_normalize(&HeightMap::new(g), 0.1, 1e-6).unwrap();
        let r = out.rms();
        assert!((0.0999999..=0.1000001).contains(&r), "{r}");
        let c = Grid::new(2, 2, 1.0, vec![1.0; 4]).unwrap();
        assert!(rms_normalize(&HeightMap::new(c), 0.1, 1e-6).is_err());
    }

    #[test]
    fn bin_wavenumbers() {
        assert_eq!(bin_wavenumber(0, 8, 1.0), 0.0);
        assert!((bin_wavenumber(1, 8, 1.0) - 2.0 * PI / 8.0).abs() < 1e-15);
        assert!((bin_wavenumber(7, 8, 1.0) + 2.0 * PI / 8.0).abs() < 1e-15);
        assert!((bin_wavenumber(4, 8, 1.0) + PI).abs() < 1e-15);
    }
}
