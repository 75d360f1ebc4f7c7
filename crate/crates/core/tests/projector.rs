use ctinr::geometry::Ray;
use ctinr::projector::{back_project, forward_project, Image, Sinogram};
use ctinr::scalar::dot;
use ctinr::sino_filter::disk_image;
use ctinr::{make_fan_geometry, FanGeometry, FanProjector, GridSpec, LinearOperator};
use proptest::prelude::*;

mod common;
use common::dense_matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn adjoint_defect(p: &FanProjector, x: &[f64], s: &[f64]) -> f64 {
    let mut px = vec![0.0; p.geometry().n_rays()];
    let mut pts = vec![0.0; p.geometry().grid.n_pixels()];
    LinearOperator::<f64>::apply(p, x, &mut px);
    LinearOperator::<f64>::apply_adjoint(p, s, &mut pts);
    // rays may all miss a coarse grid, leaving P = 0
    (dot(&px, s) - dot(x, &pts)).abs() / (dot(&px, &px).sqrt() * dot(s, s).sqrt()).max(f64::MIN_POSITIVE)
}

#[test]
fn adjoint_identity_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst: f64 = 0.0;
    for k in 0..100 {
        let n = [8, 16, 33, 64][k % 4];
        let geom = make_fan_geometry(5 + k % 11, 12 + 3 * (k % 7), GridSpec::new(n, 50.0 + k as f64).unwrap()).unwrap();
        let p = FanProjector::new(geom).unwrap();
        let x = random_vec(&mut rng, p.geometry().grid.n_pixels());
        let s = random_vec(&mut rng, p.geometry().n_rays());
        worst = worst.max(adjoint_defect(&p, &x, &s));
    }
    assert!(worst < 1e-12, "worst adjoint defect {worst:e}");
}

#[test]
fn matches_dense_oracle_on_16x16() {
    let grid = GridSpec::new(16, 40.0).unwrap();
    let geom = make_fan_geometry(8, 24, grid).unwrap();
    let p = FanProjector::new(geom.clone()).unwrap();
    let a = dense_matrix(&geom);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let x = random_vec(&mut rng, p.geometry().grid.n_pixels());
        let s = random_vec(&mut rng, p.geometry().n_rays());
        let fwd: Vec<f64> = a.iter().map(|r| dot(r, &x)).collect();
        let mut adj = vec![0.0; p.geometry().grid.n_pixels()];
        for (r, &si) in a.iter().zip(&s) {
            for (o, &v) in adj.iter_mut().zip(r) {
                *o += v * si;
            }
        }
        let mut px = vec![0.0; p.geometry().n_rays()];
        let mut pts = vec![0.0; p.geometry().grid.n_pixels()];
        p.apply(&x, &mut px);
        p.apply_adjoint(&s, &mut pts);
        for (got, want) in [(&px, &fwd), (&pts, &adj)] {
            let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for (g, w) in got.iter().zip(want.iter()) {
                assert!((g - w).abs() <= 1e-12 * scale, "{g} vs {w}");
            }
        }
    }
}

fn distance_to_center(geom: &FanGeometry, ray: &Ray) -> f64 {
    let c = geom.isocenter();
    let d = [ray.target[0] - ray.source[0], ray.target[1] - ray.source[1]];
    let r = [c[0] - ray.source[0], c[1] - ray.source[1]];
    (d[0] * r[1] - d[1] * r[0]).abs() / d[0].hypot(d[1])
}

/// Indicator of the disk summed along the ray with a step of 1/50 pixel.
fn riemann_chord(geom: &FanGeometry, ray: &Ray, radius: f64) -> f64 {
    let c = geom.isocenter();
    let d = [ray.target[0] - ray.source[0], ray.target[1] - ray.source[1]];
    let len = d[0].hypot(d[1]);
    let h = geom.grid.pixel_size() / 50.0;
    let steps = (len / h).ceil() as usize;
    let mut acc = 0.0;
    for k in 0..steps {
        let t = (k as f64 + 0.5) / steps as f64;
        let p = [ray.source[0] + t * d[0] - c[0], ray.source[1] + t * d[1] - c[1]];
        if p[0].hypot(p[1]) <= radius {
            acc += len / steps as f64;
        }
    }
    acc
}

#[test]
fn disk_line_integrals_match_chord_lengths() {
    let grid = GridSpec::new(128, 100.0).unwrap();
    let geom = make_fan_geometry(24, 96, grid).unwrap();
    let radius = 0.3 * grid.fov;
    let disk: Image<f64> = disk_image(&grid, radius, 1.0, 8);
    let sino = forward_project(&disk, &geom).unwrap();
    let mut checked = 0;
    for v in 0..geom.n_views {
        for det in 0..geom.n_det {
            let ray = geom.ray(v, det);
            let delta = distance_to_center(&geom, &ray);
            if delta > 0.9 * radius {
                continue;
            }
            let chord = 2.0 * (radius * radius - delta * delta).sqrt();
            let oracle = riemann_chord(&geom, &ray, radius);
            assert!((oracle - chord).abs() < 1e-3 * chord);
            let got = sino.data[v * geom.n_det + det];
            assert!((got - chord).abs() < 0.01 * chord, "view {v} bin {det}: {got} vs {chord}");
            checked += 1;
        }
    }
    assert!(checked > 500);
}

#[test]
fn free_functions_match_operator_and_are_deterministic() {
    let grid = GridSpec::new(24, 30.0).unwrap();
    let geom = make_fan_geometry(20, 40, grid).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let img = Image::from_vec(grid, random_vec(&mut rng, grid.n_pixels())).unwrap();
    let a = forward_project(&img, &geom).unwrap();
    let b = forward_project(&img, &geom).unwrap();
    assert_eq!(a, b);
    let back1 = back_project(&a, &geom).unwrap();
    let back2 = back_project(&Sinogram { geom: geom.clone(), data: a.data.clone() }, &geom).unwrap();
    assert_eq!(back1.data, back2.data);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn forward_is_linear(seed in 0u64..1000, alpha in -3.0f64..3.0, n in 4usize..20, views in 1usize..9) {
        let grid = GridSpec::new(n, 20.0).unwrap();
        let geom = make_fan_geometry(views, 2 * n, grid).unwrap();
        let p = FanProjector::new(geom).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_vec(&mut rng, p.geometry().grid.n_pixels());
        let z = random_vec(&mut rng, p.geometry().grid.n_pixels());
        let combo: Vec<f64> = x.iter().zip(&z).map(|(a, b)| alpha * a + b).collect();
        let (mut px, mut pz, mut pc) = (vec![0.0; p.geometry().n_rays()], vec![0.0; p.geometry().n_rays()], vec![0.0; p.geometry().n_rays()]);
        p.apply(&x, &mut px);
        p.apply(&z, &mut pz);
        p.apply(&combo, &mut pc);
        let scale = pc.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for i in 0..p.geometry().n_rays() {
            prop_assert!((pc[i] - (alpha * px[i] + pz[i])).abs() < 1e-12 * scale);
        }
    }

    #[test]
    fn adjoint_holds_for_arbitrary_geometries(seed in 0u64..1000, n in 2usize..40, views in 1usize..30, det in 2usize..80) {
        let grid = GridSpec::new(n, 10.0 + seed as f64).unwrap();
        let p = FanProjector::new(make_fan_geometry(views, det, grid).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_vec(&mut rng, p.geometry().grid.n_pixels());
        let s = random_vec(&mut rng, p.geometry().n_rays());
        prop_assert!(adjoint_defect(&p, &x, &s) < 1e-12);
    }
}
