//! Side-scan intensity emulation from relief maps.
//!
//! Columns are range bins, rows are along-track pings. The sensor sits at
//! range zero, `altitude` meters above the mean seafloor, and column `j` lies
//! at range `(j + near_range_offset) * range_step`.
//!
//! Fidelity A combines slope-dependent backscatter, ray-cast shadowing and
//! single-look exponential speckle. Fidelity B is a stand-in for a
//! higher-fidelity simulator: it adds range spreading and attenuation, a
//! normal-incidence reflectivity scale, and along-track correlated speckle,
//! to create a domain shift for fine-tuning experiments. It is not an
//! acoustic model.

use std::f64::consts::FRAC_PI_2;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, HeightMap, IntensityImage, ShadowMask};
use crate::par::Exec;
use crate::relief::SedimentParams;
use crate::rng;

pub use crate::grid::Fidelity;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SonarGeometry {
    /// Sensor height above the mean seafloor [m].
    pub altitude: f64,
    /// Cross-track pixel spacing [m].
    pub range_step: f64,
    /// Range bins skipped before column 0.
    pub near_range_offset: usize,
}

impl Default for SonarGeometry {
    fn default() -> Self {
        Self {
            altitude: 10.0,
            range_step: 0.05,
            near_range_offset: 200,
        }
    }
}

impl SonarGeometry {
    pub fn validate(&self) -> Result<()> {
        if !(self.altitude > 0.0 && self.altitude.is_finite()) {
            return Err(Error::invalid(format!("altitude must be > 0, got {}", self.altitude)));
        }
        if !(self.range_step > 0.0 && self.range_step.is_finite()) {
            return Err(Error::invalid(format!(
                "range step must be > 0, got {}",
                self.range_step
            )));
        }
        Ok(())
    }

    /// Horizontal range of column `j` [m].
    pub fn range(&self, j: usize) -> f64 {
        (j + self.near_range_offset) as f64 * self.range_step
    }

    /// Rejects geometries that place any column of a grid at range zero.
    pub(crate) fn validate_for_grid(&self) -> Result<()> {
        self.validate()?;
        if self.near_range_offset == 0 {
            return Err(Error::invalid(
                "near_range_offset must be >= 1 so that column 0 has positive range",
            ));
        }
        Ok(())
    }
}

/// `atan(altitude / r)` with `r = (j + near_range_offset) * range_step`.
pub fn grazing_angle(j: usize, geom: &SonarGeometry) -> Result<f64> {
    let r = geom.range(j);
    if r <= 0.0 {
        return Err(Error::invalid(format!("column {j} has zero range")));
    }
    Ok((geom.altitude / r).atan())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backscatter {
    /// `max(0, sin θ)`, the exact forward model of the slope inversion.
    #[default]
    ExactSine,
    /// Fifth-order least-squares polynomial fit to `sin θ` on `[0, π/2]`.
    Poly5,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    pub fidelity: Fidelity,
    pub backscatter: Backscatter,
    pub speckle: bool,
    pub shadows: bool,
    pub seed: u64,
    /// Value written into shadowed pixels.
    pub noise_floor: f64,
    /// Used by fidelity B only.
    pub sediment: SedimentParams,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            fidelity: Fidelity::A,
            backscatter: Backscatter::ExactSine,
            speckle: true,
            shadows: true,
            seed: 0,
            noise_floor: 1e-3,
            sediment: SedimentParams::default(),
        }
    }
}

impl RenderOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_floor >= 0.0 && self.noise_floor.is_finite()) {
            return Err(Error::invalid(format!(
                "noise floor must be >= 0, got {}",
                self.noise_floor
            )));
        }
        self.sediment.validate()
    }
}

const POLY5_SAMPLES: usize = 2001;

/// Coefficients `c0..c5` of the fifth-order fit to `sin θ` over `[0, π/2]`.
pub fn poly5_coefficients() -> &'static [f64; 6] {
    static COEFFS: OnceLock<[f64; 6]> = OnceLock::new();
    COEFFS.get_or_init(|| {
        let design = DMatrix::from_fn(POLY5_SAMPLES, 6, |r, c| {
            let t = FRAC_PI_2 * r as f64 / (POLY5_SAMPLES - 1) as f64;
            t.powi(c as i32)
        });
        let target = DVector::from_fn(POLY5_SAMPLES, |r, _| {
            (FRAC_PI_2 * r as f64 / (POLY5_SAMPLES - 1) as f64).sin()
        });
        let sol = design
            .svd(true, true)
            .solve(&target, 1e-14)
            .expect("SVD of a full-rank Vandermonde design");
        let mut out = [0.0; 6];
        out.copy_from_slice(sol.as_slice());
        log::debug!("poly5 backscatter coefficients: {out:?}");
        out
    })
}

pub fn poly5(theta: f64) -> f64 {
    poly5_coefficients()
        .iter()
        .rev()
        .fold(0.0, |acc, &c| acc * theta + c)
}

impl Backscatter {
    pub fn evaluate(self, theta: f64) -> f64 {
        match self {
            Backscatter::ExactSine => theta.sin().max(0.0),
            Backscatter::Poly5 => poly5(theta).clamp(0.0, 1.0),
        }
    }
}

/// Noise-free backscatter. The slope angle at `(i, j)` is
/// `atan((H[i][j+1] - H[i][j]) / range_step)`; the last column reuses its
/// neighbour's slope.
pub fn clean_intensity(
    height: &HeightMap,
    geom: &SonarGeometry,
    model: Backscatter,
) -> Result<IntensityImage> {
    clean_intensity_with(height, geom, model, Exec::default())
}

pub fn clean_intensity_with(
    height: &HeightMap,
    geom: &SonarGeometry,
    model: Backscatter,
    exec: Exec,
) -> Result<IntensityImage> {
    geom.validate_for_grid()?;
    let w = height.width();
    let grazing: Vec<f64> = (0..w)
        .map(|j| grazing_angle(j, geom))
        .collect::<Result<_>>()?;
    let mut values = vec![0.0; height.len()];
    exec.for_each_chunk_mut(&mut values, w, |i, row| {
        let h = height.row(i);
        for j in 0..w {
            let dh = if w == 1 {
                0.0
            } else if j + 1 < w {
                h[j + 1] - h[j]
            } else {
                h[j] - h[j - 1]
            };
            let psi = (dh / geom.range_step).atan();
            row[j] = model.evaluate(grazing[j] + psi);
        }
    });
    IntensityImage::new(Grid::new(w, height.height(), height.spacing(), values)?)
}

/// Pixel `(i, j)` is shadowed when a nearer pixel on the same row rises
/// above the straight ray from the sensor to `(r_j, H[i][j])`.
pub fn cast_shadows(height: &HeightMap, geom: &SonarGeometry) -> Result<ShadowMask> {
    cast_shadows_with(height, geom, Exec::default())
}

pub fn cast_shadows_with(height: &HeightMap, geom: &SonarGeometry, exec: Exec) -> Result<ShadowMask> {
    geom.validate_for_grid()?;
    let w = height.width();
    let ranges: Vec<f64> = (0..w).map(|j| geom.range(j)).collect();
    let mut mask = vec![false; height.len()];
    exec.for_each_chunk_mut(&mut mask, w, |i, row| {
        let h = height.row(i);
        // steepest sensor-to-terrain elevation slope seen so far
        let mut horizon = f64::NEG_INFINITY;
        for j in 0..w {
            let slope = (h[j] - geom.altitude) / ranges[j];
            row[j] = slope < horizon;
            horizon = horizon.max(slope);
        }
    });
    ShadowMask::new(w, height.height(), mask)
}

/// Unit-mean speckle multipliers. Each row draws from its own stream so the
/// result does not depend on execution order. With `correlated`, the field is
/// smoothed along-track with a 3-tap mean (edges clamped).
fn speckle_field(width: usize, height: usize, seed: u64, correlated: bool, exec: Exec) -> Vec<f64> {
    let mut field = vec![0.0; width * height];
    exec.for_each_chunk_mut(&mut field, width, |i, row| {
        let mut r = rng::stream(seed, &[0x5EC, i as u64]);
        for v in row.iter_mut() {
            *v = Exp1.sample(&mut r);
        }
    });
    if !correlated || height < 2 {
        return field;
    }
    let src = field.clone();
    exec.for_each_chunk_mut(&mut field, width, |i, row| {
        let up = &src[i.saturating_sub(1) * width..][..width];
        let mid = &src[i * width..][..width];
        let down = &src[(i + 1).min(height - 1) * width..][..width];
        for j in 0..width {
            row[j] = (up[j] + mid[j] + down[j]) / 3.0;
        }
    });
    field
}

/// Multiplies every pixel by an independent unit-mean exponential draw.
pub fn apply_speckle(img: &IntensityImage, seed: u64) -> Result<IntensityImage> {
    let field = speckle_field(img.width(), img.height(), seed, false, Exec::default());
    multiply(img, &field)
}

fn multiply(img: &IntensityImage, field: &[f64]) -> Result<IntensityImage> {
    let values = img.values().iter().zip(field).map(|(a, b)| a * b).collect();
    IntensityImage::new(Grid::new(img.width(), img.height(), img.spacing(), values)?)
}

/// Normal-incidence reflectivity `((ρν - 1) / (ρν + 1))²`.
pub fn reflectivity(sediment: &SedimentParams) -> f64 {
    let z = sediment.rho * sediment.nu;
    ((z - 1.0) / (z + 1.0)).powi(2)
}

/// Per-column weight `exp(-δ r) (r_ref / r)²` with `r_ref` the first
/// column's range, rescaled to unit mean across columns.
pub fn range_weights(width: usize, geom: &SonarGeometry, delta: f64) -> Vec<f64> {
    let r_ref = geom.range(0);
    let raw: Vec<f64> = (0..width)
        .map(|j| {
            let r = geom.range(j);
            (-delta * r).exp() * (r_ref / r).powi(2)
        })
        .collect();
    let mean = raw.iter().sum::<f64>() / width as f64;
    raw.into_iter().map(|v| v / mean).collect()
}

/// Renders an intensity image: clean backscatter, fidelity-B weighting,
/// shadow fill at `noise_floor`, then speckle.
pub fn render(height: &HeightMap, geom: &SonarGeometry, opts: &RenderOptions) -> Result<IntensityImage> {
    render_with(height, geom, opts, Exec::default())
}

pub fn render_with(
    height: &HeightMap,
    geom: &SonarGeometry,
    opts: &RenderOptions,
    exec: Exec,
) -> Result<IntensityImage> {
    opts.validate()?;
    let clean = clean_intensity_with(height, geom, opts.backscatter, exec)?;
    let (w, h) = (clean.width(), clean.height());
    let mut values = clean.into_grid().into_values();

    if opts.fidelity == Fidelity::B {
        let weights = range_weights(w, geom, opts.sediment.delta);
        let refl = reflectivity(&opts.sediment);
        exec.for_each_chunk_mut(&mut values, w, |_, row| {
            for (v, wt) in row.iter_mut().zip(&weights) {
                *v *= wt * refl;
            }
        });
    }
    if opts.shadows {
        let mask = cast_shadows_with(height, geom, exec)?;
        for (v, &s) in values.iter_mut().zip(mask.values()) {
            if s {
                *v = opts.noise_floor;
            }
        }
    }
    if opts.speckle {
        let field = speckle_field(w, h, opts.seed, opts.fidelity == Fidelity::B, exec);
        values.iter_mut().zip(&field).for_each(|(v, s)| *v *= s);
    }
    IntensityImage::new(Grid::new(w, h, height.spacing(), values)?)
}
