//! Ramp filtering of detector rows and filtered back-projection.
//!
//! The filter matrix is `F = I_views ⊗ C` with `C = 𝓕* D 𝓕` a circular
//! convolution whose spectrum `D[k] = |ν_k|` is non-negative, so `F` is
//! symmetric positive semi-definite and has the square root `𝓕* √D 𝓕`.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::FanGeometry;
use crate::projector::{FanProjector, Image, LinearOperator, Sinogram};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RampFilter {
    pub n_det: usize,
    pub det_spacing: f64,
    /// Frequency response, indexed like the DFT output.
    pub weights: Vec<f64>,
}

impl RampFilter {
    pub fn new(n_det: usize, det_spacing: f64) -> Result<Self> {
        if n_det == 0 || !(det_spacing > 0.0) {
            return Err(Error::Geometry(format!(
                "ramp filter needs positive size and spacing, got {n_det} and {det_spacing}"
            )));
        }
        let scale = 1.0 / (n_det as f64 * det_spacing);
        let weights = (0..n_det).map(|k| k.min(n_det - k) as f64 * scale).collect();
        Ok(RampFilter { n_det, det_spacing, weights })
    }

    pub fn for_geometry(geom: &FanGeometry) -> Result<Self> {
        Self::new(geom.n_det, geom.det_spacing)
    }

    /// Filters every length-`n_det` row of `data` in place by `weights^power`,
    /// with `power` 1 for `F` and 1/2 for `F^{1/2}`.
    pub fn filter_rows<T: Real>(&self, data: &mut [T], power: FilterPower) {
        assert_eq!(data.len() % self.n_det, 0, "data is not a whole number of rows");
        let n = self.n_det;
        let mut planner = FftPlanner::<T>::new();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n);
        let inv_n = T::one() / T::of(n as f64);
        let response: Vec<T> = self
            .weights
            .iter()
            .map(|&w| {
                T::of(match power {
                    FilterPower::Full => w,
                    FilterPower::Half => w.sqrt(),
                }) * inv_n
            })
            .collect();
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
        let mut scratch =
            vec![Complex::new(T::zero(), T::zero()); fwd.get_inplace_scratch_len().max(inv.get_inplace_scratch_len())];
        for row in data.chunks_mut(n) {
            for (b, &v) in buf.iter_mut().zip(row.iter()) {
                *b = Complex::new(v, T::zero());
            }
            fwd.process_with_scratch(&mut buf, &mut scratch);
            for (b, &d) in buf.iter_mut().zip(&response) {
                *b *= d;
            }
            inv.process_with_scratch(&mut buf, &mut scratch);
            for (v, b) in row.iter_mut().zip(&buf) {
                *v = b.re;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterPower {
    Full,
    Half,
}

/// `F` or `F^{1/2}` over whole sinograms as a (self-adjoint) linear operator.
#[derive(Debug, Clone)]
pub struct FilterOperator {
    pub filter: RampFilter,
    pub n_views: usize,
    pub power: FilterPower,
}

impl FilterOperator {
    pub fn new(geom: &FanGeometry, power: FilterPower) -> Result<Self> {
        Ok(FilterOperator { filter: RampFilter::for_geometry(geom)?, n_views: geom.n_views, power })
    }
}

impl<T: Real> LinearOperator<T> for FilterOperator {
    fn rows(&self) -> usize {
        self.n_views * self.filter.n_det
    }
    fn cols(&self) -> usize {
        self.n_views * self.filter.n_det
    }
    fn apply(&self, x: &[T], out: &mut [T]) {
        out.copy_from_slice(x);
        self.filter.filter_rows(out, self.power);
    }
    fn apply_adjoint(&self, y: &[T], out: &mut [T]) {
        self.apply(y, out)
    }
}

fn check_filter(sino_n_det: usize, filt: &RampFilter) -> Result<()> {
    if filt.n_det != sino_n_det {
        return Err(Error::dim(format!("filter length {} does not match {} detector bins", filt.n_det, sino_n_det)));
    }
    Ok(())
}

/// `F y`
pub fn ramp_apply<T: Real>(sino: &Sinogram<T>, filt: &RampFilter) -> Result<Sinogram<T>> {
    check_filter(sino.geom.n_det, filt)?;
    let mut out = sino.clone();
    filt.filter_rows(&mut out.data, FilterPower::Full);
    Ok(out)
}

/// `F^{1/2} y`
pub fn half_ramp_apply<T: Real>(sino: &Sinogram<T>, filt: &RampFilter) -> Result<Sinogram<T>> {
    check_filter(sino.geom.n_det, filt)?;
    let mut out = sino.clone();
    filt.filter_rows(&mut out.data, FilterPower::Half);
    Ok(out)
}

/// Scale that turns `P^T F y` into attenuation values for one geometry.
///
/// Calibrated on a centered uniform disk: no fan-beam cosine or redundancy
/// weighting is applied, so the constant absorbs the remaining normalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FbpCalibration {
    pub scale: f64,
}

/// Calibration disk radius as a fraction of the field of view.
const CALIBRATION_RADIUS: f64 = 0.35;
/// The interior region compared during calibration, relative to the disk radius.
pub const INTERIOR_FRACTION: f64 = 0.7;

impl FbpCalibration {
    pub fn for_geometry(geom: &FanGeometry) -> Result<Self> {
        let grid = geom.grid;
        let radius = CALIBRATION_RADIUS * grid.fov;
        let disk = disk_image(&grid, radius, 1.0, 4);
        let proj = FanProjector::new(geom.clone())?;
        let filter = RampFilter::for_geometry(geom)?;
        let mut sino = vec![0.0f64; geom.n_rays()];
        proj.apply(&disk.data, &mut sino);
        filter.filter_rows(&mut sino, FilterPower::Full);
        let mut raw = vec![0.0f64; grid.n_pixels()];
        proj.apply_adjoint(&sino, &mut raw);
        let raw_mean = interior_mean(&Image { grid, data: raw }, INTERIOR_FRACTION * radius);
        if !(raw_mean.is_finite() && raw_mean > 0.0) {
            return Err(Error::Numerical(format!("FBP calibration failed, interior mean {raw_mean}")));
        }
        Ok(FbpCalibration { scale: interior_mean(&disk, INTERIOR_FRACTION * radius) / raw_mean })
    }
}

/// Filtered back-projection `c · P^T F y` with the disk-calibrated constant `c`.
pub fn fbp_reconstruct<T: Real>(sino: &Sinogram<T>) -> Result<Image<T>> {
    let cal = FbpCalibration::for_geometry(&sino.geom)?;
    fbp_reconstruct_with(sino, &cal)
}

pub fn fbp_reconstruct_with<T: Real>(sino: &Sinogram<T>, cal: &FbpCalibration) -> Result<Image<T>> {
    let filter = RampFilter::for_geometry(&sino.geom)?;
    let proj = FanProjector::new(sino.geom.clone())?;
    let mut filtered = sino.data.clone();
    filter.filter_rows(&mut filtered, FilterPower::Full);
    let mut img = Image::zeros(sino.geom.grid);
    proj.apply_adjoint(&filtered, &mut img.data);
    let c = T::of(cal.scale);
    img.data.iter_mut().for_each(|v| *v *= c);
    Ok(img)
}

/// Uniform centered disk, pixel values from `ss x ss` supersampled coverage.
pub fn disk_image<T: Real>(grid: &crate::geometry::GridSpec, radius: f64, value: f64, ss: usize) -> Image<T> {
    let n = grid.n_side;
    let ps = grid.pixel_size();
    let c = 0.5 * grid.fov;
    let mut data = vec![T::zero(); grid.n_pixels()];
    let r2 = radius * radius;
    for row in 0..n {
        for col in 0..n {
            let mut hits = 0usize;
            for sy in 0..ss {
                for sx in 0..ss {
                    let x = (col as f64 + (sx as f64 + 0.5) / ss as f64) * ps - c;
                    let y = (row as f64 + (sy as f64 + 0.5) / ss as f64) * ps - c;
                    if x * x + y * y <= r2 {
                        hits += 1;
                    }
                }
            }
            data[row * n + col] = T::of(value * hits as f64 / (ss * ss) as f64);
        }
    }
    Image { grid: *grid, data }
}

/// Mean over pixels whose centers are within `radius` of the isocenter.
pub fn interior_mean<T: Real>(img: &Image<T>, radius: f64) -> f64 {
    let n = img.grid.n_side;
    let c = 0.5 * img.grid.fov;
    let (mut sum, mut count) = (0.0, 0usize);
    for row in 0..n {
        for col in 0..n {
            let [x, y] = img.grid.pixel_center(row, col);
            if (x - c).hypot(y - c) <= radius {
                sum += img.at(row, col).to_f64_lossy();
                count += 1;
            }
        }
    }
    if count == 0 {
        f64::NAN
    } else {
        sum / count as f64
    }
}
