#![allow(dead_code)]

use ctinr::geometry::Ray;
use ctinr::inr::{init_inr, InrModel, PreparedGrid};
use ctinr::scalar::dot;
use ctinr::{Architecture, FanGeometry, GridSpec, HashConfig, ReluFourierConfig, SirenConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Row of the Joseph system matrix written from the slope-intercept form of
/// the ray: march over pixel-center lines of the steeper axis and split the
/// crossing between the two nearest pixel centers of the other axis.
pub fn joseph_row(grid: &GridSpec, ray: &Ray) -> Vec<f64> {
    let n = grid.n_side;
    let h = grid.pixel_size();
    let mut row = vec![0.0; n * n];
    let (x0, y0) = (ray.source[0], ray.source[1]);
    let (x1, y1) = (ray.target[0], ray.target[1]);
    let steep = (y1 - y0).abs() > (x1 - x0).abs();
    let (u0, v0, u1, v1) = if steep { (y0, x0, y1, x1) } else { (x0, y0, x1, y1) };
    let slope = (v1 - v0) / (u1 - u0);
    let w = h * (1.0 + slope * slope).sqrt();
    for i in 0..n {
        let u = h * (i as f64 + 0.5);
        let v = v0 + slope * (u - u0);
        let c = v / h - 0.5;
        let j = c.floor() as i64;
        let f = c - j as f64;
        for (jj, wt) in [(j, 1.0 - f), (j + 1, f)] {
            if (0..n as i64).contains(&jj) {
                let jj = jj as usize;
                let (r, col) = if steep { (i, jj) } else { (jj, i) };
                row[r * n + col] += wt * w;
            }
        }
    }
    row
}

pub fn dense_matrix(geom: &FanGeometry) -> Vec<Vec<f64>> {
    let mut m = Vec::new();
    for v in 0..geom.n_views {
        for d in 0..geom.n_det {
            m.push(joseph_row(&geom.grid, &geom.ray(v, d)));
        }
    }
    m
}

pub const STEP: f64 = 1e-6;
pub const DIRECTIONS: usize = 50;

pub fn architectures() -> Vec<Architecture> {
    vec![
        Architecture::ReluFourier(ReluFourierConfig { depth: 4, width: 64, k_max: 15 }),
        Architecture::Siren(SirenConfig { depth: 4, width: 64, omega0: 75.0 }),
        Architecture::Hash(HashConfig { log2_table_size: 12, mlp_depth: 4, mlp_width: 64, ..HashConfig::default() }),
    ]
}

/// Initial parameters, except that hash tables are redrawn from `U(±0.5)`: at
/// initialization the MLP sees inputs of order 1e-4, and a 1e-6 stencil crosses
/// ReLU kinks along nearly every direction.
pub fn test_point(arch: &Architecture, seed: u64) -> InrModel<f64> {
    let mut model: InrModel<f64> = init_inr(arch, seed).unwrap();
    let tables: Vec<_> =
        model.layout().hash_levels.iter().map(|l| (l.offset, l.entries * model.layout().features_per_level)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for (off, len) in tables {
        for p in &mut model.params[off..off + len] {
            *p = rng.random_range(-0.5..0.5);
        }
    }
    model
}

pub fn unit_direction(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let d: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let s = dot(&d, &d).sqrt();
    d.into_iter().map(|v| v / s).collect()
}

pub fn shifted(model: &InrModel<f64>, d: &[f64], h: f64) -> InrModel<f64> {
    let mut m = model.clone();
    m.params.iter_mut().zip(d).for_each(|(p, &di)| *p += h * di);
    m
}

pub fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-300)
}

pub fn pattern(model: &InrModel<f64>, pg: &PreparedGrid<f64>) -> Vec<bool> {
    model.evaluate_with_tape(pg).unwrap().1.expect("test grids fit the tape").positive_pre_activations()
}

/// Central differences of `phi` along random unit directions against `⟨grad, d⟩`.
///
/// A ReLU network is only piecewise smooth, so a direction whose stencil
/// `θ ± h d` changes the activation pattern says nothing about the gradient;
/// such directions are redrawn (and counted).
pub fn worst_directional_error(
    model: &InrModel<f64>,
    pg: &PreparedGrid<f64>,
    grad: &[f64],
    seed: u64,
    phi: impl Fn(&InrModel<f64>) -> f64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = pattern(model, pg);
    let (mut worst, mut accepted, mut redrawn) = (0.0f64, 0, 0);
    while accepted < DIRECTIONS {
        let d = unit_direction(&mut rng, model.n_params());
        let (plus, minus) = (shifted(model, &d, STEP), shifted(model, &d, -STEP));
        if pattern(&plus, pg) != base || pattern(&minus, pg) != base {
            redrawn += 1;
            assert!(redrawn <= DIRECTIONS, "activation pattern changes along most directions");
            continue;
        }
        let fd = (phi(&plus) - phi(&minus)) / (2.0 * STEP);
        worst = worst.max(rel_err(dot(grad, &d), fd));
        accepted += 1;
    }
    worst
}
