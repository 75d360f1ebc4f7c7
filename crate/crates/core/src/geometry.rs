//! Image grids, normalized INR coordinates and the circular fan-beam scan.
//!
//! Physical positions live in a `[0, fov]^2` frame whose center is the
//! rotation isocenter. Pixel `(row, col)` is stored at `row * n_side + col`
//! and its center sits at `((col + 0.5) * pixel_size, (row + 0.5) * pixel_size)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Angular margin added around the reconstruction circle when sizing the detector.
pub const DETECTOR_MARGIN: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub n_side: usize,
    /// Side length of the square field of view in mm.
    pub fov: f64,
}

impl GridSpec {
    pub fn new(n_side: usize, fov: f64) -> Result<Self> {
        let grid = GridSpec { n_side, fov };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_side == 0 {
            return Err(Error::Geometry("grid must have at least one pixel".into()));
        }
        if !(self.fov.is_finite() && self.fov > 0.0) {
            return Err(Error::Geometry(format!("fov must be positive, got {}", self.fov)));
        }
        Ok(())
    }

    pub fn pixel_size(&self) -> f64 {
        self.fov / self.n_side as f64
    }

    pub fn n_pixels(&self) -> usize {
        self.n_side * self.n_side
    }

    /// Physical `(x, y)` of the center of pixel `(row, col)`.
    pub fn pixel_center(&self, row: usize, col: usize) -> [f64; 2] {
        let ps = self.pixel_size();
        [(col as f64 + 0.5) * ps, (row as f64 + 0.5) * ps]
    }

    /// Radius of the circle circumscribing the field of view.
    pub fn circumradius(&self) -> f64 {
        self.fov * std::f64::consts::FRAC_1_SQRT_2
    }
}

/// Pixel-center coordinates normalized to `[0, 1]^2`, in image storage order.
pub fn make_grid_coords(grid: &GridSpec) -> Vec<[f64; 2]> {
    let n = grid.n_side;
    let inv = 1.0 / n as f64;
    let mut coords = Vec::with_capacity(n * n);
    for row in 0..n {
        let y = (row as f64 + 0.5) * inv;
        for col in 0..n {
            coords.push([(col as f64 + 0.5) * inv, y]);
        }
    }
    coords
}

/// A single source-to-detector-bin line segment in physical coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub source: [f64; 2],
    pub target: [f64; 2],
}

/// Flat-detector circular fan-beam acquisition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FanGeometry {
    pub n_views: usize,
    pub n_det: usize,
    /// View angles in radians; the source sits at angle `angles[v]` around the isocenter.
    pub angles: Vec<f64>,
    pub source_to_iso: f64,
    pub source_to_det: f64,
    /// Detector bin pitch in mm, measured on the detector.
    pub det_spacing: f64,
    pub grid: GridSpec,
}

/// Equally spaced full-circle scan with the default distances
/// (`2 * fov` to the isocenter, `4 * fov` to the detector).
pub fn make_fan_geometry(n_views: usize, n_det: usize, grid: GridSpec) -> Result<FanGeometry> {
    FanGeometry::with_distances(n_views, n_det, grid, 2.0 * grid.fov, 4.0 * grid.fov)
}

impl FanGeometry {
    pub fn with_distances(
        n_views: usize,
        n_det: usize,
        grid: GridSpec,
        source_to_iso: f64,
        source_to_det: f64,
    ) -> Result<Self> {
        grid.validate()?;
        if n_views == 0 {
            return Err(Error::Geometry("need at least one view".into()));
        }
        if n_det < 2 {
            return Err(Error::Geometry(format!("need at least two detector bins, got {n_det}")));
        }
        let radius = grid.circumradius();
        if !(source_to_iso > radius) {
            return Err(Error::Geometry(format!(
                "source-to-isocenter distance {source_to_iso} must exceed the field-of-view radius {radius}"
            )));
        }
        let angles = (0..n_views).map(|k| 2.0 * PI * k as f64 / n_views as f64).collect();
        let half_angle = (radius / source_to_iso).asin();
        // outermost bin centers reach (1 + margin) times the half-width the circle needs
        let half_width = (1.0 + DETECTOR_MARGIN) * source_to_det * half_angle.tan();
        let det_spacing = 2.0 * half_width / (n_det - 1) as f64;
        let geom = FanGeometry { n_views, n_det, angles, source_to_iso, source_to_det, det_spacing, grid };
        geom.validate()?;
        Ok(geom)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.n_views == 0 || self.n_det == 0 {
            return Err(Error::Geometry("views and detector bins must be positive".into()));
        }
        if self.angles.len() != self.n_views {
            return Err(Error::Geometry(format!("{} angles for {} views", self.angles.len(), self.n_views)));
        }
        if self.angles.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Geometry("view angles must be strictly increasing".into()));
        }
        let radius = self.grid.circumradius();
        if !(self.source_to_det > self.source_to_iso && self.source_to_iso > radius) {
            return Err(Error::Geometry(format!(
                "need source_to_det > source_to_iso > {radius}, got {} and {}",
                self.source_to_det, self.source_to_iso
            )));
        }
        if !(self.det_spacing.is_finite() && self.det_spacing > 0.0) {
            return Err(Error::Geometry("detector spacing must be positive".into()));
        }
        Ok(())
    }

    /// Total number of rays, the sinogram length.
    pub fn n_rays(&self) -> usize {
        self.n_views * self.n_det
    }

    /// Isocenter in physical coordinates.
    pub fn isocenter(&self) -> [f64; 2] {
        [0.5 * self.grid.fov, 0.5 * self.grid.fov]
    }

    /// Signed detector coordinate of bin `det`'s center.
    pub fn bin_offset(&self, det: usize) -> f64 {
        (det as f64 - 0.5 * (self.n_det - 1) as f64) * self.det_spacing
    }

    pub fn source(&self, view: usize) -> [f64; 2] {
        let (s, c) = self.angles[view].sin_cos();
        let iso = self.isocenter();
        [iso[0] + self.source_to_iso * c, iso[1] + self.source_to_iso * s]
    }

    pub fn ray(&self, view: usize, det: usize) -> Ray {
        let (s, c) = self.angles[view].sin_cos();
        let iso = self.isocenter();
        let back = self.source_to_det - self.source_to_iso;
        let u = self.bin_offset(det);
        Ray {
            source: [iso[0] + self.source_to_iso * c, iso[1] + self.source_to_iso * s],
            target: [iso[0] - back * c - u * s, iso[1] - back * s + u * c],
        }
    }

    /// Detector coordinate hit by the line from the source of `view` through `point`.
    pub fn project_point(&self, view: usize, point: [f64; 2]) -> f64 {
        let (s, c) = self.angles[view].sin_cos();
        let src = self.source(view);
        let d = [point[0] - src[0], point[1] - src[1]];
        // depth along the central ray (towards the isocenter) and lateral offset
        let depth = -(d[0] * c + d[1] * s);
        let lateral = -d[0] * s + d[1] * c;
        lateral * self.source_to_det / depth
    }

    /// Same rays over a different pixel grid covering the same field of view.
    pub fn with_grid(&self, grid: GridSpec) -> Result<Self> {
        if (grid.fov - self.grid.fov).abs() > 1e-12 * self.grid.fov {
            return Err(Error::Geometry(format!("fov {} differs from geometry fov {}", grid.fov, self.grid.fov)));
        }
        let mut g = self.clone();
        g.grid = grid;
        Ok(g)
    }
}
