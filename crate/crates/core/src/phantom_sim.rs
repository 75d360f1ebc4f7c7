//! Synthetic breast-like phantom, inverse-crime-free sinogram simulation and
//! Poisson transmission noise.
//!
//! The phantom is an air background with a skin ring around adipose tissue,
//! fibroglandular ellipses and small calcifications. Tissue is modulated by a
//! band-limited multiplicative texture, and the whole picture is pulled back
//! through a smooth bijective warp of the unit square so that the breast
//! outline is not a circle.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{FanGeometry, GridSpec};
use crate::projector::{forward_project, Image, Sinogram};
use crate::scalar::Real;

/// Ellipse in normalized `[0, 1]^2` coordinates. `angle` in radians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ellipse {
    pub center: [f64; 2],
    pub axes: [f64; 2],
    pub angle: f64,
    pub value: f64,
}

impl Ellipse {
    fn contains(&self, p: [f64; 2]) -> bool {
        let (s, c) = self.angle.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        let u = (c * dx + s * dy) / self.axes[0];
        let v = (-s * dx + c * dy) / self.axes[1];
        u * u + v * v <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calcification {
    pub center: [f64; 2],
    pub radius: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub seed: u64,
    /// Side of the high-resolution raster.
    pub n_hi: usize,
    /// Physical field of view in mm.
    pub fov: f64,
    /// Outer breast radius, fraction of the field of view.
    pub breast_radius: f64,
    /// Skin thickness, fraction of the field of view.
    pub skin_thickness: f64,
    pub skin_value: f64,
    pub adipose_value: f64,
    /// Painted in order over the adipose background.
    pub ellipses: Vec<Ellipse>,
    pub calcifications: Vec<Calcification>,
    /// Peak relative modulation of the tissue texture.
    pub texture_amplitude: f64,
    pub texture_modes: usize,
    /// Highest texture frequency in cycles per field of view.
    pub texture_max_freq: f64,
    /// Peak warp displacement, fraction of the field of view.
    pub deformation_amplitude: f64,
    /// Warp frequency in cycles per field of view.
    pub deformation_freq: f64,
    /// Samples per pixel side when rasterizing.
    pub supersample: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        let glandular = 0.08;
        PhantomConfig {
            seed: 0,
            n_hi: 512,
            fov: 160.0,
            breast_radius: 0.43,
            skin_thickness: 0.012,
            skin_value: 0.08,
            adipose_value: 0.05,
            ellipses: vec![
                Ellipse { center: [0.47, 0.52], axes: [0.24, 0.15], angle: 0.35, value: 0.07 },
                Ellipse { center: [0.40, 0.46], axes: [0.09, 0.05], angle: -0.4, value: glandular },
                Ellipse { center: [0.56, 0.58], axes: [0.11, 0.06], angle: 0.9, value: glandular },
                Ellipse { center: [0.62, 0.40], axes: [0.06, 0.04], angle: 0.1, value: glandular },
                Ellipse { center: [0.33, 0.63], axes: [0.05, 0.03], angle: 1.2, value: 0.065 },
                Ellipse { center: [0.52, 0.50], axes: [0.03, 0.025], angle: 0.0, value: 0.095 },
            ],
            calcifications: vec![
                Calcification { center: [0.45, 0.55], radius: 0.006, value: 0.25 },
                Calcification { center: [0.47, 0.57], radius: 0.005, value: 0.25 },
                Calcification { center: [0.60, 0.43], radius: 0.007, value: 0.25 },
                Calcification { center: [0.36, 0.44], radius: 0.005, value: 0.25 },
            ],
            texture_amplitude: 0.12,
            texture_modes: 32,
            texture_max_freq: 10.0,
            deformation_amplitude: 0.04,
            deformation_freq: 1.0,
            supersample: 2,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_hi == 0 || !(self.fov > 0.0) || self.supersample == 0 {
            return bad("phantom raster needs positive size, fov and supersampling".into());
        }
        let values = [self.skin_value, self.adipose_value]
            .into_iter()
            .chain(self.ellipses.iter().map(|e| e.value))
            .chain(self.calcifications.iter().map(|c| c.value));
        for v in values {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("attenuation values must be non-negative, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.texture_amplitude) {
            return bad(format!("texture amplitude must lie in [0, 1), got {}", self.texture_amplitude));
        }
        // each shear x -> x + a sin(pi x) s(y) is monotone while a * pi < 1
        if !(self.deformation_amplitude >= 0.0 && self.deformation_amplitude * PI < 1.0) {
            return bad(format!(
                "deformation amplitude {} breaks invertibility (needs a * pi < 1)",
                self.deformation_amplitude
            ));
        }
        if self.ellipses.iter().any(|e| !(e.axes[0] > 0.0 && e.axes[1] > 0.0)) {
            return bad("ellipse axes must be positive".into());
        }
        Ok(())
    }

    pub fn max_attenuation(&self) -> f64 {
        [self.skin_value, self.adipose_value]
            .into_iter()
            .chain(self.ellipses.iter().map(|e| e.value))
            .chain(self.calcifications.iter().map(|c| c.value))
            .fold(0.0, f64::max)
    }
}

struct TextureMode {
    freq: [f64; 2],
    phase: f64,
    weight: f64,
}

/// Continuous phantom in normalized coordinates.
struct PhantomField<'a> {
    cfg: &'a PhantomConfig,
    modes: Vec<TextureMode>,
    weight_sum: f64,
    warp_phase: [f64; 2],
}

impl<'a> PhantomField<'a> {
    fn new(cfg: &'a PhantomConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let warp_phase = [rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)];
        let fmin = 2.0_f64.min(cfg.texture_max_freq);
        let modes: Vec<TextureMode> = (0..cfg.texture_modes)
            .map(|_| {
                let r = rng.random_range(fmin..=cfg.texture_max_freq.max(fmin));
                let theta = rng.random_range(0.0..PI);
                TextureMode {
                    freq: [r * theta.cos(), r * theta.sin()],
                    phase: rng.random_range(0.0..2.0 * PI),
                    weight: rng.random_range(0.5..1.0),
                }
            })
            .collect();
        let weight_sum = modes.iter().map(|m| m.weight).sum();
        PhantomField { cfg, modes, weight_sum, warp_phase }
    }

    /// Composition of two boundary-fixing shears; a bijection of the unit square.
    fn warp(&self, p: [f64; 2]) -> [f64; 2] {
        let a = self.cfg.deformation_amplitude;
        if a == 0.0 {
            return p;
        }
        let f = 2.0 * PI * self.cfg.deformation_freq;
        let x = p[0] + a * (PI * p[0]).sin() * (f * p[1] + self.warp_phase[0]).sin();
        let y = p[1] + a * (PI * p[1]).sin() * (f * x + self.warp_phase[1]).sin();
        [x, y]
    }

    /// Texture in [-1, 1].
    fn texture(&self, p: [f64; 2]) -> f64 {
        if self.modes.is_empty() {
            return 0.0;
        }
        let s: f64 = self
            .modes
            .iter()
            .map(|m| m.weight * (2.0 * PI * (m.freq[0] * p[0] + m.freq[1] * p[1]) + m.phase).cos())
            .sum();
        s / self.weight_sum
    }

    fn value(&self, p: [f64; 2]) -> f64 {
        let cfg = self.cfg;
        let q = self.warp(p);
        let r = (q[0] - 0.5).hypot(q[1] - 0.5);
        if r > cfg.breast_radius {
            return 0.0;
        }
        if let Some(c) =
            cfg.calcifications.iter().rev().find(|c| (q[0] - c.center[0]).hypot(q[1] - c.center[1]) <= c.radius)
        {
            return c.value;
        }
        let tissue = if r > cfg.breast_radius - cfg.skin_thickness {
            cfg.skin_value
        } else {
            cfg.ellipses.iter().rev().find(|e| e.contains(q)).map_or(cfg.adipose_value, |e| e.value)
        };
        tissue * (1.0 + cfg.texture_amplitude * self.texture(q))
    }
}

/// Rasterizes the phantom on an `n_hi x n_hi` grid covering `fov`.
pub fn generate_phantom<T: Real>(cfg: &PhantomConfig) -> Result<Image<T>> {
    cfg.validate()?;
    let grid = GridSpec::new(cfg.n_hi, cfg.fov)?;
    let field = PhantomField::new(cfg);
    let n = cfg.n_hi;
    let ss = cfg.supersample;
    let inv = 1.0 / (n * ss) as f64;
    let mut data = vec![T::zero(); grid.n_pixels()];
    data.par_chunks_mut(n).enumerate().for_each(|(row, out)| {
        for (col, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for sy in 0..ss {
                for sx in 0..ss {
                    let p = [((col * ss + sx) as f64 + 0.5) * inv, ((row * ss + sy) as f64 + 0.5) * inv];
                    acc += field.value(p);
                }
            }
            *o = T::of(acc / (ss * ss) as f64);
        }
    });
    Image::from_vec(grid, data)
}

/// Projects a phantom rasterized on a finer grid through the same rays as `geom`.
pub fn simulate_sinogram<T: Real>(phantom_hi: &Image<T>, geom: &FanGeometry) -> Result<Sinogram<T>> {
    let hi = phantom_hi.grid;
    let lo = geom.grid;
    if !hi.n_side.is_multiple_of(lo.n_side) || hi.n_side / lo.n_side < 2 {
        return Err(Error::dim(format!(
            "phantom side {} must be an integer multiple (>= 2) of the reconstruction side {}",
            hi.n_side, lo.n_side
        )));
    }
    let hi_geom = geom.with_grid(hi)?;
    let sino = forward_project(phantom_hi, &hi_geom)?;
    Ok(Sinogram { geom: geom.clone(), data: sino.data })
}

/// Block average over `factor x factor` pixel blocks.
pub fn downsample_image<T: Real>(hi: &Image<T>, factor: usize) -> Result<Image<T>> {
    let n = hi.grid.n_side;
    if factor == 0 || !n.is_multiple_of(factor) {
        return Err(Error::dim(format!("factor {factor} does not divide image side {n}")));
    }
    let m = n / factor;
    let grid = GridSpec::new(m, hi.grid.fov)?;
    let inv = T::one() / T::of((factor * factor) as f64);
    let mut data = vec![T::zero(); m * m];
    for row in 0..m {
        for col in 0..m {
            let mut acc = T::zero();
            for dy in 0..factor {
                for dx in 0..factor {
                    acc += hi.at(row * factor + dy, col * factor + dx);
                }
            }
            data[row * m + col] = acc * inv;
        }
    }
    Ok(Image { grid, data })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Incident photons summed over all rays.
    pub total_photons: f64,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn incident_per_ray(&self, n_rays: usize) -> f64 {
        self.total_photons / n_rays as f64
    }
}

/// Surrogate count used for rays that record no photons.
pub const ZERO_COUNT_FLOOR: f64 = 0.5;

/// Poisson transmission noise, `y' = -ln(max(N, 0.5) / I0)` with
/// `N ~ Poisson(I0 exp(-y))`. Ray `i` draws from its own ChaCha stream, so
/// the result does not depend on how rays are scheduled.
pub fn add_poisson_noise<T: Real>(sino: &Sinogram<T>, noise: &NoiseConfig) -> Result<Sinogram<T>> {
    if !(noise.total_photons > 0.0 && noise.total_photons.is_finite()) {
        return Err(Error::Config(format!("total photons must be positive, got {}", noise.total_photons)));
    }
    if let Some(v) = sino.data.iter().find(|v| !(**v >= T::zero())) {
        return Err(Error::Numerical(format!("line integrals must be non-negative, found {v}")));
    }
    let i0 = noise.incident_per_ray(sino.data.len());
    let data: Result<Vec<T>> = sino
        .data
        .par_iter()
        .enumerate()
        .map(|(i, &y)| {
            let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
            rng.set_stream(i as u64);
            let lambda = i0 * (-y.to_f64_lossy()).exp();
            let counts = if lambda > 0.0 {
                Poisson::new(lambda)
                    .map_err(|e| Error::Numerical(format!("poisson rate {lambda}: {e}")))?
                    .sample(&mut rng)
            } else {
                0.0
            };
            Ok(T::of(-(counts.max(ZERO_COUNT_FLOOR) / i0).ln()))
        })
        .collect();
    Ok(Sinogram { geom: sino.geom.clone(), data: data? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::make_fan_geometry;

    fn small(seed: u64) -> PhantomConfig {
        PhantomConfig { seed, n_hi: 64, ..Default::default() }
    }

    #[test]
    fn phantom_is_deterministic() {
        let a = generate_phantom::<f64>(&small(7)).unwrap();
        let b = generate_phantom::<f64>(&small(7)).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom::<f64>(&small(8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn phantom_values_bounded() {
        for seed in 0..10 {
            let cfg = small(seed);
            let img = generate_phantom::<f64>(&cfg).unwrap();
            let hi = cfg.max_attenuation() * (1.0 + cfg.texture_amplitude);
            assert!(img.data.iter().all(|v| v.is_finite() && *v >= 0.0 && *v <= hi));
            assert!(img.data.iter().any(|v| *v > 0.0));
        }
    }

    #[test]
    fn degenerate_config_is_piecewise_constant() {
        let cfg = PhantomConfig { texture_amplitude: 0.0, deformation_amplitude: 0.0, supersample: 1, ..small(1) };
        let img = generate_phantom::<f64>(&cfg).unwrap();
        let mut allowed = vec![0.0, cfg.skin_value, cfg.adipose_value];
        allowed.extend(cfg.ellipses.iter().map(|e| e.value));
        allowed.extend(cfg.calcifications.iter().map(|c| c.value));
        assert!(img.data.iter().all(|v| allowed.contains(v)));
    }

    #[test]
    fn warp_fixes_the_square_boundary() {
        let cfg = small(3);
        let f = PhantomField::new(&cfg);
        for t in [0.0, 0.2, 0.5, 0.9, 1.0] {
            let a = f.warp([0.0, t]);
            let b = f.warp([1.0, t]);
            assert!(a[0].abs() < 1e-15 && (b[0] - 1.0).abs() < 1e-15);
            let c = f.warp([t, 0.0]);
            assert!(c[1].abs() < 1e-15);
        }
        // monotone along both axes, so the warp is injective
        for i in 0..50 {
            let y = i as f64 / 49.0;
            let mut last = -1.0;
            for j in 0..200 {
                let x = f.warp([j as f64 / 199.0, y])[0];
                assert!(x > last);
                last = x;
            }
        }
    }

    #[test]
    fn rejects_non_invertible_warp() {
        let cfg = PhantomConfig { deformation_amplitude: 0.4, ..small(0) };
        assert!(generate_phantom::<f64>(&cfg).is_err());
    }

    #[test]
    fn downsample_examples() {
        let g = GridSpec::new(2, 1.0).unwrap();
        let img = Image::from_vec(g, vec![0.0, 0.0, 4.0, 4.0]).unwrap();
        assert_eq!(downsample_image(&img, 2).unwrap().data, vec![2.0]);
        let g4 = GridSpec::new(4, 1.0).unwrap();
        let c = Image::from_vec(g4, vec![1.5; 16]).unwrap();
        assert_eq!(downsample_image(&c, 2).unwrap().data, vec![1.5; 4]);
        assert!(downsample_image(&c, 3).is_err());
    }

    #[test]
    fn downsample_is_linear() {
        let a = generate_phantom::<f64>(&small(1)).unwrap();
        let b = generate_phantom::<f64>(&small(2)).unwrap();
        let sum = Image { grid: a.grid, data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect() };
        let (da, db, ds) =
            (downsample_image(&a, 4).unwrap(), downsample_image(&b, 4).unwrap(), downsample_image(&sum, 4).unwrap());
        for i in 0..ds.data.len() {
            assert!((da.data[i] + db.data[i] - ds.data[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn simulate_checks_grid_compatibility() {
        let geom = make_fan_geometry(4, 16, GridSpec::new(16, 160.0).unwrap()).unwrap();
        let same = Image::<f64>::zeros(GridSpec::new(16, 160.0).unwrap());
        assert!(simulate_sinogram(&same, &geom).is_err());
        let odd = Image::<f64>::zeros(GridSpec::new(40, 160.0).unwrap());
        assert!(simulate_sinogram(&odd, &geom).is_err());
        let zero = Image::<f64>::zeros(GridSpec::new(32, 160.0).unwrap());
        assert!(simulate_sinogram(&zero, &geom).unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn noise_is_seeded_and_finite() {
        let geom = make_fan_geometry(4, 16, GridSpec::new(16, 160.0).unwrap()).unwrap();
        let mut s = Sinogram::<f64>::zeros(geom);
        s.data.iter_mut().enumerate().for_each(|(i, v)| *v = 0.1 * i as f64);
        let cfg = NoiseConfig { total_photons: 64.0 * 50.0, seed: 9 };
        let a = add_poisson_noise(&s, &cfg).unwrap();
        assert_eq!(a, add_poisson_noise(&s, &cfg).unwrap());
        // heavy attenuation with few photons forces zero counts, still finite
        assert!(a.data.iter().all(|v| v.is_finite()));
        assert!(a.data.iter().any(|&v| v == -(0.5f64 / 50.0).ln()));
    }

    #[test]
    fn noise_rejects_negative_input() {
        let geom = make_fan_geometry(2, 4, GridSpec::new(4, 10.0).unwrap()).unwrap();
        let mut s = Sinogram::<f64>::zeros(geom);
        s.data[3] = -0.1;
        let cfg = NoiseConfig { total_photons: 1e6, seed: 0 };
        assert!(add_poisson_noise(&s, &cfg).is_err());
        assert!(add_poisson_noise(
            &Sinogram::<f64>::zeros(s.geom.clone()),
            &NoiseConfig { total_photons: 0.0, seed: 0 }
        )
        .is_err());
    }
}
