//! Texture ladder, scene generation, tiling, split assignment and manifests.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    read_grid, tile, write_grid, Domain, Fidelity, Grid, GridKind, NormMode, NormalizationStats,
};
use crate::nn::TrainingStats;
use crate::par::Exec;
use crate::relief::{synthesize, TextureParams};
use crate::rng::{derive_seed, stream};
use crate::sas::{render_with, RenderOptions, SonarGeometry};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FOLD_COUNT: u8 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// Small corpus sized for a single CPU.
    Desk,
    /// Full-size corpus (370 scenes, 256-pixel tiles).
    Full,
}

/// Split slot of a tile.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Fold {
    Train(u8),
    Val,
    Test,
}

impl fmt::Display for Fold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Fold::Train(k) => write!(f, "{k}"),
            Fold::Val => f.write_str("val"),
            Fold::Test => f.write_str("test"),
        }
    }
}

impl std::str::FromStr for Fold {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "val" => Ok(Fold::Val),
            "test" => Ok(Fold::Test),
            _ => match s.parse::<u8>() {
                Ok(k) if k < FOLD_COUNT => Ok(Fold::Train(k)),
                _ => Err(Error::invalid(format!("unknown fold `{s}`"))),
            },
        }
    }
}

impl Serialize for Fold {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Fold {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Ripple wavelengths from 0.25 m in 0.35 m steps up to 2 m.
pub fn ripple_ladder() -> Vec<f64> {
    (0..6).map(|i| ((0.25 + 0.35 * i as f64) * 100.0).round() / 100.0).collect()
}

pub const RIPPLE_OMEGA2: f64 = 4.3e-5;
pub const ROUGHNESS_OMEGA2: [f64; 4] = [4.3e-12, 4.3e-10, 4.3e-8, 4.3e-6];
pub const GAMMA2: f64 = 3.04;

/// Six sand-ripple textures (ripple plus roughness) followed by four pure
/// roughness textures, all at zero rotation.
pub fn default_textures(z_rms: f64, sigma: f64) -> Vec<TextureParams> {
    let base = TextureParams {
        z_rms,
        sigma_x: sigma,
        sigma_y: sigma,
        gamma2: GAMMA2,
        ..TextureParams::default()
    };
    let ripples = ripple_ladder().into_iter().map(|lambda0| TextureParams {
        lambda0,
        omega2: RIPPLE_OMEGA2,
        ripple_weight: 1.0,
        roughness_weight: 1.0,
        ..base
    });
    let rough = ROUGHNESS_OMEGA2.into_iter().map(|omega2| TextureParams {
        omega2,
        ripple_weight: 0.0,
        roughness_weight: 1.0,
        ..base
    });
    ripples.chain(rough).collect()
}

/// Rotation angles from -90 to 90 degrees inclusive.
pub fn rotation_grid(step_deg: f64) -> Vec<f64> {
    let n = (180.0 / step_deg).round() as usize;
    (0..=n).map(|i| -90.0 + step_deg * i as f64).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub profile: Profile,
    pub textures: Vec<TextureParams>,
    pub rotations_deg: Vec<f64>,
    /// Side of each synthesized scene [px], a power of two.
    pub scene_size: usize,
    /// Pixel spacing [m].
    pub spacing: f64,
    pub tile_size: usize,
    pub geometry: SonarGeometry,
    /// Render settings; the seed is replaced per scene.
    pub render: RenderOptions,
    pub val_tiles: usize,
    pub test_tiles: usize,
    pub norm_mode: NormMode,
    pub seed: u64,
}

impl DatasetConfig {
    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => Self {
                profile,
                textures: default_textures(0.1, 1.0),
                rotations_deg: rotation_grid(10.0),
                scene_size: 128,
                spacing: 0.05,
                tile_size: 64,
                geometry: SonarGeometry::default(),
                render: RenderOptions::default(),
                val_tiles: 100,
                test_tiles: 100,
                norm_mode: NormMode::Range,
                seed: 0,
            },
            Profile::Full => Self {
                profile,
                textures: default_textures(0.1, 1.0),
                rotations_deg: rotation_grid(5.0),
                scene_size: 512,
                spacing: 0.05,
                tile_size: 256,
                geometry: SonarGeometry::default(),
                render: RenderOptions::default(),
                val_tiles: 1000,
                test_tiles: 500,
                norm_mode: NormMode::Range,
                seed: 0,
            },
        }
    }

    pub fn with_fidelity(mut self, fidelity: Fidelity) -> Self {
        self.render.fidelity = fidelity;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.textures.is_empty() || self.rotations_deg.is_empty() {
            return Err(Error::invalid("dataset needs at least one texture and one rotation"));
        }
        for t in &self.textures {
            t.validate()?;
        }
        for &r in &self.rotations_deg {
            if !(-90.0..=90.0).contains(&r) {
                return Err(Error::invalid(format!("rotation {r} outside [-90, 90]")));
            }
        }
        if self.tile_size == 0 || self.tile_size > self.scene_size {
            return Err(Error::invalid(format!(
                "tile size {} must lie in 1..={}",
                self.tile_size, self.scene_size
            )));
        }
        self.geometry.validate()?;
        self.render.validate()
    }

    pub fn scene_count(&self) -> usize {
        self.textures.len() * self.rotations_deg.len()
    }

    pub fn tiles_per_scene(&self) -> usize {
        let k = self.scene_size / self.tile_size;
        k * k
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    /// Paths relative to the manifest directory.
    pub relief: PathBuf,
    pub intensity: PathBuf,
    pub texture_id: usize,
    pub phi_r: f64,
    pub texture: TextureParams,
    pub render: RenderOptions,
    pub scene: usize,
    pub tile_row: usize,
    pub tile_col: usize,
    pub fold: Fold,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub config: DatasetConfig,
    pub generation_seed: u64,
    pub stats: TrainingStats,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn fidelity(&self) -> Fidelity {
        self.config.render.fidelity
    }

    pub fn entries_in<'a>(&'a self, pred: impl Fn(Fold) -> bool + 'a) -> impl Iterator<Item = &'a ManifestEntry> + 'a {
        self.entries.iter().filter(move |e| pred(e.fold))
    }

    pub fn count(&self, pred: impl Fn(Fold) -> bool) -> usize {
        self.entries.iter().filter(|e| pred(e.fold)).count()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::format(path, format!("unsupported manifest version {}", m.version)));
        }
        Ok(m)
    }
}

pub fn is_train(f: Fold) -> bool {
    matches!(f, Fold::Train(_))
}

/// One texture at one rotation: relief and rendered intensity.
#[derive(Clone, Debug)]
pub struct Scene {
    pub texture_id: usize,
    pub phi_r: f64,
    pub texture: TextureParams,
    pub render: RenderOptions,
    pub relief: Grid,
    pub intensity: Grid,
}

pub fn scene_seed(seed: u64, texture_id: usize, rotation: usize) -> u64 {
    derive_seed(seed, &[0x5CE, texture_id as u64, rotation as u64])
}

pub fn render_seed(seed: u64, texture_id: usize, rotation: usize) -> u64 {
    derive_seed(seed, &[0x2E4, texture_id as u64, rotation as u64])
}

/// Synthesizes and renders every (texture, rotation) scene in
/// texture-major order.
pub fn generate_scenes(cfg: &DatasetConfig, exec: Exec) -> Result<Vec<Scene>> {
    cfg.validate()?;
    let nrot = cfg.rotations_deg.len();
    exec.try_map_collect(cfg.scene_count(), |s| {
        let (t, r) = (s / nrot, s % nrot);
        let phi = cfg.rotations_deg[r];
        let texture = cfg.textures[t].with_rotation(phi);
        let relief = synthesize(&texture, scene_seed(cfg.seed, t, r), cfg.scene_size, cfg.spacing)?;
        let render = RenderOptions {
            seed: render_seed(cfg.seed, t, r),
            ..cfg.render
        };
        // scenes are already rendered in parallel
        let intensity = render_with(&relief, &cfg.geometry, &render, Exec::Sequential)?;
        Ok(Scene {
            texture_id: t,
            phi_r: phi,
            texture,
            render,
            relief: relief.into_grid(),
            intensity: intensity.into_grid(),
        })
    })
}

/// Shuffles tile indices with a seeded permutation, carves out test then
/// validation tiles and deals the rest round-robin into the training folds.
pub fn assign_folds(n: usize, val: usize, test: usize, seed: u64) -> Result<Vec<Fold>> {
    if val + test >= n {
        return Err(Error::invalid(format!(
            "{n} tiles cannot hold {val} validation and {test} test tiles plus training data"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, &[0x5711]));
    let mut folds = vec![Fold::Test; n];
    for (rank, &idx) in order.iter().enumerate() {
        folds[idx] = if rank < test {
            Fold::Test
        } else if rank < test + val {
            Fold::Val
        } else {
            Fold::Train(((rank - test - val) % FOLD_COUNT as usize) as u8)
        };
    }
    Ok(folds)
}

/// Generates scenes, tiles them, writes every tile under `out_dir/tiles`
/// and the manifest to `out_dir/manifest.json`.
pub fn generate_dataset(cfg: &DatasetConfig, out_dir: &Path, exec: Exec) -> Result<DatasetManifest> {
    let scenes = generate_scenes(cfg, exec)?;
    let tiles_dir = out_dir.join("tiles");
    fs::create_dir_all(&tiles_dir).map_err(|e| Error::io(&tiles_dir, e))?;
    let per_row = cfg.scene_size / cfg.tile_size;
    let mut tiles: Vec<(usize, usize, Grid, Grid)> = Vec::new();
    for (s, scene) in scenes.iter().enumerate() {
        let r = tile(&scene.relief, cfg.tile_size)?;
        let i = tile(&scene.intensity, cfg.tile_size)?;
        for (k, (rt, it)) in r.into_iter().zip(i).enumerate() {
            // tiles are stored in single precision; stats must describe the stored values
            tiles.push((s, k, to_f32(&rt)?, to_f32(&it)?));
        }
    }
    let folds = assign_folds(tiles.len(), cfg.val_tiles, cfg.test_tiles, cfg.seed)?;
    let fid = cfg.render.fidelity;
    let train_idx: Vec<usize> = (0..tiles.len()).filter(|&i| is_train(folds[i])).collect();
    let stats = TrainingStats {
        intensity: NormalizationStats::from_grids(train_idx.iter().map(|&i| &tiles[i].3), Domain::Intensity, fid)?,
        relief: NormalizationStats::from_grids(train_idx.iter().map(|&i| &tiles[i].2), Domain::Relief, fid)?,
        mode: cfg.norm_mode,
    };
    let mut entries = Vec::with_capacity(tiles.len());
    for (id, (s, k, relief, intensity)) in tiles.into_iter().enumerate() {
        let scene = &scenes[s];
        let rel = PathBuf::from("tiles").join(format!("{id:05}_relief.srfg"));
        let int = PathBuf::from("tiles").join(format!("{id:05}_intensity.srfg"));
        write_grid(&out_dir.join(&rel), &relief, GridKind::Height)?;
        write_grid(&out_dir.join(&int), &intensity, GridKind::Intensity)?;
        entries.push(ManifestEntry {
            id,
            relief: rel,
            intensity: int,
            texture_id: scene.texture_id,
            phi_r: scene.phi_r,
            texture: scene.texture,
            render: scene.render,
            scene: s,
            tile_row: k / per_row,
            tile_col: k % per_row,
            fold: folds[id],
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        config: cfg.clone(),
        generation_seed: cfg.seed,
        stats,
        entries,
    };
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

fn to_f32(g: &Grid) -> Result<Grid> {
    g.map(|v| v as f32 as f64)
}

/// A manifest plus the directory its relative paths resolve against.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

/// An intensity/relief tile pair loaded into memory.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: usize,
    pub texture_id: usize,
    pub phi_r: f64,
    pub fold: Fold,
    pub intensity: Grid,
    pub relief: Grid,
}

impl Dataset {
    /// Accepts the manifest file or the directory that contains it.
    pub fn open(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let manifest = DatasetManifest::read(&file)?;
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, manifest })
    }

    pub fn load(&self, pred: impl Fn(Fold) -> bool, exec: Exec) -> Result<Vec<Sample>> {
        let entries: Vec<&ManifestEntry> = self.manifest.entries_in(pred).collect();
        exec.try_map_collect(entries.len(), |i| {
            let e = entries[i];
            let (_, relief) = read_grid(&self.root.join(&e.relief))?;
            let (_, intensity) = read_grid(&self.root.join(&e.intensity))?;
            Ok(Sample {
                id: e.id,
                texture_id: e.texture_id,
                phi_r: e.phi_r,
                fold: e.fold,
                intensity,
                relief,
            })
        })
    }
}
