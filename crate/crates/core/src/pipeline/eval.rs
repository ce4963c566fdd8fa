//! L1 reports, multi-aspect pair evaluation and difference maps.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmrf::{estimate_traced, GmrfConfig};
use crate::grid::{l1_error, normalize, Grid, HeightMap, IntensityImage, NormMode, NormalizationStats};
use crate::nn::{Model, TrainingStats};
use crate::par::Exec;
use crate::pipeline::dataset::{default_textures, Sample};
use crate::pipeline::predict::predict_batch;
use crate::relief::{synthesize, TextureParams};
use crate::rng::derive_seed;
use crate::sas::{render_with, RenderOptions, SonarGeometry};

pub const CSV_HEADER: &str = "group,delta_phi_deg,mean_l1,std_l1,n";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub group: String,
    pub delta_phi_deg: Option<f64>,
    pub per_sample: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation of `per_sample`.
    pub std: f64,
    pub n: usize,
}

impl EvalReport {
    pub fn from_samples(group: impl Into<String>, delta_phi_deg: Option<f64>, per_sample: Vec<f64>) -> Result<Self> {
        if per_sample.is_empty() {
            return Err(Error::invalid("no samples to report"));
        }
        let n = per_sample.len();
        let mean = per_sample.iter().sum::<f64>() / n as f64;
        let var = per_sample.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        Ok(Self {
            group: group.into(),
            delta_phi_deg,
            per_sample,
            mean,
            std: var.sqrt(),
            n,
        })
    }

    pub fn csv_row(&self) -> String {
        let dphi = self.delta_phi_deg.map(|d| d.to_string()).unwrap_or_default();
        format!("{},{},{},{},{}", self.group, dphi, self.mean, self.std, self.n)
    }
}

pub fn reports_to_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

/// Per-sample L1 between aligned prediction and truth sets.
pub fn evaluate(group: &str, predicted: &[&Grid], truth: &[&Grid]) -> Result<EvalReport> {
    if predicted.len() != truth.len() {
        return Err(Error::dims(format!("{} truths", predicted.len()), truth.len().to_string()));
    }
    let l1 = predicted
        .iter()
        .zip(truth)
        .map(|(p, t)| l1_error(p, t))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_samples(group, None, l1)
}

/// `b - a` and its mean absolute value.
pub fn diff_map(a: &HeightMap, b: &HeightMap) -> Result<(HeightMap, f64)> {
    a.check_same_shape(b)?;
    let values = a.values().iter().zip(b.values()).map(|(x, y)| y - x).collect();
    let d = Grid::new(a.width(), a.height(), a.spacing(), values)?;
    let l1 = d.values().iter().map(|v| v.abs()).sum::<f64>() / d.len() as f64;
    Ok((HeightMap::new(d), l1))
}

/// Something that maps intensity images to a comparable output grid.
pub enum Estimator<'a> {
    /// The intensity image itself; the baseline of pair evaluation.
    Intensity,
    Gmrf {
        config: GmrfConfig,
        geometry: SonarGeometry,
    },
    Network {
        model: &'a Model<f32>,
        stats: TrainingStats,
        batch: usize,
    },
}

impl Estimator<'_> {
    pub fn name(&self) -> String {
        match self {
            Estimator::Intensity => "intensity".into(),
            Estimator::Gmrf { .. } => "gmrf".into(),
            Estimator::Network { model, .. } => model.spec().name.clone(),
        }
    }

    pub fn is_relief(&self) -> bool {
        !matches!(self, Estimator::Intensity)
    }

    /// Outputs in physical units (meters for relief estimators).
    pub fn run(&self, images: &[&Grid], exec: Exec) -> Result<Vec<Grid>> {
        match self {
            Estimator::Intensity => Ok(images.iter().map(|g| (*g).clone()).collect()),
            Estimator::Gmrf { config, geometry } => exec.try_map_collect(images.len(), |i| {
                let img = IntensityImage::new(images[i].clone())?;
                let (h, _) = estimate_traced(&img, geometry, config, Exec::Sequential)?;
                Ok(h.into_grid())
            }),
            Estimator::Network { model, stats, batch } => {
                let mut out = Vec::with_capacity(images.len());
                for chunk in images.chunks((*batch).max(1)) {
                    out.extend(predict_batch(model, stats, chunk)?.into_iter().map(HeightMap::into_grid));
                }
                Ok(out)
            }
        }
    }
}

/// L1 of an estimator on dataset samples, in normalized relief units.
pub fn evaluate_estimator(est: &Estimator, samples: &[Sample], stats: &TrainingStats, exec: Exec) -> Result<EvalReport> {
    if !est.is_relief() {
        return Err(Error::invalid("the intensity baseline has no relief output"));
    }
    let images: Vec<&Grid> = samples.iter().map(|s| &s.intensity).collect();
    let preds = est.run(&images, exec)?;
    let l1 = preds
        .iter()
        .zip(samples)
        .map(|(p, s)| {
            l1_error(
                &normalize(p, &stats.relief, stats.mode),
                &normalize(&s.relief, &stats.relief, stats.mode),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_samples(est.name(), None, l1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEvalConfig {
    pub textures: Vec<TextureParams>,
    pub delta_phis_deg: Vec<f64>,
    /// Aspect of the first look in each pair [deg].
    pub base_aspects_deg: Vec<f64>,
    pub tile_size: usize,
    pub spacing: f64,
    pub geometry: SonarGeometry,
    /// Render settings; seeds are derived per look.
    pub render: RenderOptions,
    /// Give the two looks of a pair different speckle seeds.
    pub distinct_seeds: bool,
    pub seed: u64,
}

impl Default for PairEvalConfig {
    fn default() -> Self {
        Self {
            textures: default_textures(0.1, 1.0),
            delta_phis_deg: vec![5.0, 15.0, 30.0, 45.0],
            base_aspects_deg: vec![-60.0, -30.0, 0.0, 30.0],
            tile_size: 64,
            spacing: 0.05,
            geometry: SonarGeometry::default(),
            render: RenderOptions::default(),
            distinct_seeds: true,
            seed: 0,
        }
    }
}

/// One look at a scene: its aspect and rendered intensity.
#[derive(Clone, Debug)]
pub struct Look {
    pub aspect_deg: f64,
    pub relief: Grid,
    pub intensity: Grid,
}

/// Side of the centred square that stays inside an `n`-pixel tile under
/// any rotation.
pub fn common_side(n: usize) -> usize {
    ((n as f64 / std::f64::consts::SQRT_2).floor() as usize).max(1)
}

/// Renders the two looks of every (texture, base aspect, Δφ) pair. Each
/// texture is synthesized once at twice the tile size, rotated to the look
/// aspect and cropped to the tile.
pub fn pair_looks(cfg: &PairEvalConfig, exec: Exec) -> Result<Vec<(usize, usize, Look, Look)>> {
    if cfg.textures.is_empty() || cfg.base_aspects_deg.is_empty() || cfg.delta_phis_deg.is_empty() {
        return Err(Error::invalid("pair evaluation needs textures, base aspects and aspect differences"));
    }
    let n = cfg.tile_size;
    let big = (2 * n).next_power_of_two();
    let bases: Vec<Grid> = exec.try_map_collect(cfg.textures.len(), |t| -> Result<Grid> {
        let p = cfg.textures[t].with_rotation(0.0);
        Ok(synthesize(&p, derive_seed(cfg.seed, &[0xBA5E, t as u64]), big, cfg.spacing)?.into_grid())
    })?;
    let na = cfg.base_aspects_deg.len();
    let nd = cfg.delta_phis_deg.len();
    let jobs = cfg.textures.len() * na * nd;
    exec.try_map_collect(jobs, |job| {
        let t = job / (na * nd);
        let a = (job / nd) % na;
        let d = job % nd;
        let look = |k: u64, aspect: f64| -> Result<Look> {
            let relief = bases[t].rotate(aspect).crop_center(n, n)?;
            let tag = if cfg.distinct_seeds { k } else { 0 };
            let render = RenderOptions {
                seed: derive_seed(cfg.seed, &[0x1003, t as u64, a as u64, d as u64, tag]),
                ..cfg.render
            };
            let img = render_with(&HeightMap::new(relief.clone()), &cfg.geometry, &render, Exec::Sequential)?;
            Ok(Look {
                aspect_deg: aspect,
                relief,
                intensity: img.into_grid(),
            })
        };
        let a0 = cfg.base_aspects_deg[a];
        Ok((t, d, look(0, a0)?, look(1, a0 + cfg.delta_phis_deg[d])?))
    })
}

fn aligned(g: &Grid, stats: &NormalizationStats, mode: NormMode, aspect: f64, side: usize) -> Result<Grid> {
    normalize(g, stats, mode).rotate(-aspect).crop_center(side, side)
}

/// For each estimator and Δφ, the L1 between the estimator's outputs for
/// the two looks of every pair, after rotating both back to a common frame
/// and normalizing with `stats` (relief stats for relief estimators,
/// intensity stats for the baseline). Reports are ordered by estimator,
/// then ascending Δφ.
pub fn pair_evaluate(
    cfg: &PairEvalConfig,
    estimators: &[Estimator],
    stats: &TrainingStats,
    exec: Exec,
) -> Result<Vec<EvalReport>> {
    let looks = pair_looks(cfg, exec)?;
    let side = common_side(cfg.tile_size);
    let mut order: Vec<usize> = (0..cfg.delta_phis_deg.len()).collect();
    order.sort_by(|&a, &b| cfg.delta_phis_deg[a].total_cmp(&cfg.delta_phis_deg[b]));
    let images: Vec<&Grid> = looks
        .iter()
        .flat_map(|(_, _, a, b)| [&a.intensity, &b.intensity])
        .collect();
    let mut reports = Vec::new();
    for est in estimators {
        let outputs = est.run(&images, exec)?;
        let norm = if est.is_relief() { &stats.relief } else { &stats.intensity };
        let mut per_d: Vec<Vec<f64>> = vec![Vec::new(); cfg.delta_phis_deg.len()];
        for (k, (_, d, la, lb)) in looks.iter().enumerate() {
            let ea = aligned(&outputs[2 * k], norm, stats.mode, la.aspect_deg, side)?;
            let eb = aligned(&outputs[2 * k + 1], norm, stats.mode, lb.aspect_deg, side)?;
            per_d[*d].push(l1_error(&ea, &eb)?);
        }
        for &d in &order {
            let samples = std::mem::take(&mut per_d[d]);
            reports.push(EvalReport::from_samples(est.name(), Some(cfg.delta_phis_deg[d]), samples)?);
        }
    }
    Ok(reports)
}
