use proptest::prelude::*;

use seabed_core::gmrf::{
    delta_height, estimate, estimate_traced, icm_sweep, integrate_heights, mple_fit, shadow_map, GmrfConfig,
    SHADOW_SENTINEL,
};
use seabed_core::grid::{Grid, HeightMap};
use seabed_core::relief::{synthesize, TextureParams};
use seabed_core::sas::{render, RenderOptions, SonarGeometry};
use seabed_core::Exec;

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

fn smooth_ripple(seed: u64, n: usize) -> HeightMap {
    let p = TextureParams {
        lambda0: 2.0,
        z_rms: 0.05,
        phi_r: 90.0,
        sigma_x: 0.2,
        sigma_y: 0.2,
        roughness_weight: 0.0,
        ..TextureParams::default()
    };
    synthesize(&p, seed, n, 0.05).unwrap()
}

#[test]
fn shipped_defaults() {
    let c = GmrfConfig::default();
    assert_eq!(c.initial_altitude, 0.8);
    assert_eq!(c.iterations, 50);
    let bad = GmrfConfig {
        shadow_window: 4,
        ..c
    };
    assert!(bad.validate().is_err());
}

#[test]
fn clean_render_inverts_exactly() {
    let geom = SonarGeometry::default();
    let h = smooth_ripple(3, 64);
    let opts = RenderOptions {
        shadows: false,
        speckle: false,
        ..RenderOptions::default()
    };
    let img = render(&h, &geom, &opts).unwrap();
    let cfg = GmrfConfig {
        initial_altitude: geom.altitude,
        iterations: 0,
        ..GmrfConfig::default()
    };
    let mask = shadow_map(&img, &cfg).unwrap();
    assert_eq!(mask.count(), 0);
    let dh = delta_height(&img, &mask, &geom).unwrap();
    let g = h.as_grid();
    for i in 0..64 {
        for j in 0..63 {
            let truth = g.get(i, j + 1) - g.get(i, j);
            let got = dh.get(i, j);
            assert!((got - truth).abs() <= 1e-9 * truth.abs().max(1e-6), "({i},{j}) {got} vs {truth}");
        }
    }
    let est = estimate(&img, &geom, &cfg).unwrap();
    for i in 0..64 {
        let r = pearson(est.as_grid().row(i), g.row(i));
        assert!(r >= 0.95, "row {i}: r = {r}");
    }
}

#[test]
fn integration_is_a_running_sum() {
    let d = Grid::new(4, 2, 1.0, vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 0.5]).unwrap();
    let h = integrate_heights(&d).unwrap();
    assert_eq!(h.as_grid().values(), &[1.0, 3.0, 6.0, 10.0, -1.0, -1.0, 0.0, 0.5]);
}

#[test]
fn shadowed_pixels_carry_the_sentinel() {
    let geom = SonarGeometry::default();
    let mut v = vec![0.6; 16 * 8];
    for j in 6..10 {
        for i in 0..8 {
            v[i * 16 + j] = 1e-3;
        }
    }
    let img = seabed_core::grid::IntensityImage::new(Grid::new(16, 8, 0.05, v).unwrap()).unwrap();
    let cfg = GmrfConfig {
        shadow_window: 3,
        ..GmrfConfig::default()
    };
    let mask = shadow_map(&img, &cfg).unwrap();
    assert!(mask.get(4, 7) && mask.get(4, 8));
    assert!(!mask.get(4, 1) && !mask.get(4, 14));
    let dh = delta_height(&img, &mask, &geom).unwrap();
    assert_eq!(dh.get(4, 7), SHADOW_SENTINEL);
}

#[test]
fn estimate_is_exec_independent() {
    let geom = SonarGeometry::default();
    let img = render(&smooth_ripple(5, 64), &geom, &RenderOptions::default()).unwrap();
    let cfg = GmrfConfig {
        iterations: 5,
        ..GmrfConfig::default()
    };
    let (a, ta) = estimate_traced(&img, &geom, &cfg, Exec::Sequential).unwrap();
    let (b, tb) = estimate_traced(&img, &geom, &cfg, Exec::Parallel).unwrap();
    assert_eq!(a, b);
    assert_eq!(ta.sweeps, tb.sweeps);
    assert!(a.as_grid().values().iter().all(|v| v.is_finite()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn icm_objective_never_increases(seed in any::<u64>()) {
        let geom = SonarGeometry::default();
        let p = TextureParams { phi_r: 40.0, ..TextureParams::default() };
        let h = synthesize(&p, seed, 32, 0.05).unwrap();
        let opts = RenderOptions { seed, ..RenderOptions::default() };
        let img = render(&h, &geom, &opts).unwrap();
        let cfg = GmrfConfig::default();
        let mask = shadow_map(&img, &cfg).unwrap();
        let g08 = SonarGeometry { altitude: cfg.initial_altitude, ..geom };
        let data = integrate_heights(&delta_height(&img, &mask, &g08).unwrap()).unwrap().into_grid();
        let mut params = mple_fit(&data).unwrap();
        params.sigma_recon_sq = params.sigma_prior_sq.max(1e-12);
        params.sigma_prior_sq = params.sigma_prior_sq.max(1e-12);
        let mut cur = data.values().to_vec();
        for _ in 0..10 {
            let r = icm_sweep(&mut cur, &data, &mask, &params, Exec::default());
            for half in r.halves {
                prop_assert!(half.objective_after <= half.objective_before * (1.0 + 1e-12) + 1e-300);
            }
        }
    }
}
