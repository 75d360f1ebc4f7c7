//! Matrix-free Joseph fan-beam projector and its exact transpose.
//!
//! Each ray is marched one pixel column (or row, for steep rays) at a time;
//! at every column center the image is linearly interpolated between the two
//! neighbouring rows and weighted by the path length through the column.
//! Forward and adjoint share [`FanProjector::trace`], so the pair is the
//! transpose of one sparse matrix.

use std::cell::Cell;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{FanGeometry, GridSpec, Ray};
use crate::scalar::{all_finite, Real};

/// Rasterized attenuation map, row-major, in mm^-1.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    pub grid: GridSpec,
    pub data: Vec<T>,
}

impl<T: Real> Image<T> {
    pub fn zeros(grid: GridSpec) -> Self {
        Image { grid, data: vec![T::zero(); grid.n_pixels()] }
    }

    pub fn from_vec(grid: GridSpec, data: Vec<T>) -> Result<Self> {
        if data.len() != grid.n_pixels() {
            return Err(Error::dim(format!("image data has {} entries, grid needs {}", data.len(), grid.n_pixels())));
        }
        if !all_finite(&data) {
            return Err(Error::Numerical("image contains non-finite values".into()));
        }
        Ok(Image { grid, data })
    }

    pub fn at(&self, row: usize, col: usize) -> T {
        self.data[row * self.grid.n_side + col]
    }

    pub fn cast<U: Real>(&self) -> Image<U> {
        Image { grid: self.grid, data: self.data.iter().map(|v| U::of(v.to_f64_lossy())).collect() }
    }
}

/// Fan-beam projection data, view-major (`view * n_det + det`).
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram<T> {
    pub geom: FanGeometry,
    pub data: Vec<T>,
}

impl<T: Real> Sinogram<T> {
    pub fn zeros(geom: FanGeometry) -> Self {
        let m = geom.n_rays();
        Sinogram { geom, data: vec![T::zero(); m] }
    }

    pub fn from_vec(geom: FanGeometry, data: Vec<T>) -> Result<Self> {
        if data.len() != geom.n_rays() {
            return Err(Error::dim(format!(
                "sinogram data has {} entries, geometry needs {}",
                data.len(),
                geom.n_rays()
            )));
        }
        if !all_finite(&data) {
            return Err(Error::Numerical("sinogram contains non-finite values".into()));
        }
        Ok(Sinogram { geom, data })
    }

    pub fn view(&self, v: usize) -> &[T] {
        let n = self.geom.n_det;
        &self.data[v * n..(v + 1) * n]
    }

    pub fn cast<U: Real>(&self) -> Sinogram<U> {
        Sinogram { geom: self.geom.clone(), data: self.data.iter().map(|v| U::of(v.to_f64_lossy())).collect() }
    }
}

/// A linear map between flat vectors together with its adjoint.
pub trait LinearOperator<T: Real> {
    /// Output (range) dimension.
    fn rows(&self) -> usize;
    /// Input (domain) dimension.
    fn cols(&self) -> usize;
    /// `out = A x`
    fn apply(&self, x: &[T], out: &mut [T]);
    /// `out = A^T y`
    fn apply_adjoint(&self, y: &[T], out: &mut [T]);
}

impl<T: Real, A: LinearOperator<T> + ?Sized> LinearOperator<T> for &A {
    fn rows(&self) -> usize {
        (**self).rows()
    }
    fn cols(&self) -> usize {
        (**self).cols()
    }
    fn apply(&self, x: &[T], out: &mut [T]) {
        (**self).apply(x, out)
    }
    fn apply_adjoint(&self, y: &[T], out: &mut [T]) {
        (**self).apply_adjoint(y, out)
    }
}

/// Wraps an operator and counts forward and adjoint applications.
pub struct CountingOperator<A> {
    inner: A,
    forward: Cell<usize>,
    adjoint: Cell<usize>,
}

impl<A> CountingOperator<A> {
    pub fn new(inner: A) -> Self {
        CountingOperator { inner, forward: Cell::new(0), adjoint: Cell::new(0) }
    }

    pub fn forward_count(&self) -> usize {
        self.forward.get()
    }

    pub fn adjoint_count(&self) -> usize {
        self.adjoint.get()
    }

    pub fn inner(&self) -> &A {
        &self.inner
    }
}

impl<T: Real, A: LinearOperator<T>> LinearOperator<T> for CountingOperator<A> {
    fn rows(&self) -> usize {
        self.inner.rows()
    }
    fn cols(&self) -> usize {
        self.inner.cols()
    }
    fn apply(&self, x: &[T], out: &mut [T]) {
        self.forward.set(self.forward.get() + 1);
        self.inner.apply(x, out)
    }
    fn apply_adjoint(&self, y: &[T], out: &mut [T]) {
        self.adjoint.set(self.adjoint.get() + 1);
        self.inner.apply_adjoint(y, out)
    }
}

/// Identity map, handy for testing solvers against closed forms.
pub struct Identity(pub usize);

impl<T: Real> LinearOperator<T> for Identity {
    fn rows(&self) -> usize {
        self.0
    }
    fn cols(&self) -> usize {
        self.0
    }
    fn apply(&self, x: &[T], out: &mut [T]) {
        out.copy_from_slice(x)
    }
    fn apply_adjoint(&self, y: &[T], out: &mut [T]) {
        out.copy_from_slice(y)
    }
}

/// `outer ∘ inner`
pub struct Compose<A, B> {
    pub outer: A,
    pub inner: B,
}

impl<T: Real, A: LinearOperator<T>, B: LinearOperator<T>> LinearOperator<T> for Compose<A, B> {
    fn rows(&self) -> usize {
        self.outer.rows()
    }
    fn cols(&self) -> usize {
        self.inner.cols()
    }
    fn apply(&self, x: &[T], out: &mut [T]) {
        let mut mid = vec![T::zero(); self.inner.rows()];
        self.inner.apply(x, &mut mid);
        self.outer.apply(&mid, out);
    }
    fn apply_adjoint(&self, y: &[T], out: &mut [T]) {
        let mut mid = vec![T::zero(); self.outer.cols()];
        self.outer.apply_adjoint(y, &mut mid);
        self.inner.apply_adjoint(&mid, out);
    }
}

/// Dense row-major matrix operator.
#[derive(Debug, Clone)]
pub struct DenseOperator<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> LinearOperator<T> for DenseOperator<T> {
    fn rows(&self) -> usize {
        self.rows
    }
    fn cols(&self) -> usize {
        self.cols
    }
    fn apply(&self, x: &[T], out: &mut [T]) {
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            *o = row.iter().zip(x).fold(T::zero(), |a, (&m, &v)| a + m * v);
        }
    }
    fn apply_adjoint(&self, y: &[T], out: &mut [T]) {
        out.iter_mut().for_each(|o| *o = T::zero());
        for (i, &yi) in y.iter().enumerate() {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            for (o, &m) in out.iter_mut().zip(row) {
                *o += m * yi;
            }
        }
    }
}

/// Views handled by each adjoint accumulation task; fixing it keeps the
/// summation order independent of the thread pool.
const ADJOINT_VIEWS_PER_TASK: usize = 8;

/// The system matrix `P` of a fan-beam geometry.
#[derive(Debug, Clone)]
pub struct FanProjector {
    geom: FanGeometry,
}

impl FanProjector {
    pub fn new(geom: FanGeometry) -> Result<Self> {
        geom.validate()?;
        Ok(FanProjector { geom })
    }

    pub fn geometry(&self) -> &FanGeometry {
        &self.geom
    }

    /// Visits `(pixel index, weight)` for every nonzero entry of the row of `P`
    /// belonging to `ray`. Weights are path lengths in mm.
    pub fn trace(&self, ray: &Ray, mut visit: impl FnMut(usize, f64)) {
        let grid = &self.geom.grid;
        let n = grid.n_side;
        let ps = grid.pixel_size();
        let dx = ray.target[0] - ray.source[0];
        let dy = ray.target[1] - ray.source[1];
        let len = dx.hypot(dy);
        // march along the dominant axis; `a` is the marching axis, `b` the interpolated one
        let (x_major, da, db, sa, sb) = if dx.abs() >= dy.abs() {
            (true, dx, dy, ray.source[0], ray.source[1])
        } else {
            (false, dy, dx, ray.source[1], ray.source[0])
        };
        let step = ps * len / da.abs();
        for a in 0..n {
            let pa = (a as f64 + 0.5) * ps;
            let t = (pa - sa) / da;
            if !(0.0..=1.0).contains(&t) {
                continue;
            }
            let v = (sb + t * db) / ps - 0.5;
            let b0 = v.floor();
            let frac = v - b0;
            let b0 = b0 as i64;
            for (b, w) in [(b0, 1.0 - frac), (b0 + 1, frac)] {
                if b < 0 || b >= n as i64 || w == 0.0 {
                    continue;
                }
                let b = b as usize;
                let idx = if x_major { b * n + a } else { a * n + b };
                visit(idx, w * step);
            }
        }
    }

    fn check_image_len(&self, len: usize) {
        assert_eq!(len, self.geom.grid.n_pixels(), "image length does not match grid");
    }

    fn check_sino_len(&self, len: usize) {
        assert_eq!(len, self.geom.n_rays(), "sinogram length does not match geometry");
    }
}

impl<T: Real> LinearOperator<T> for FanProjector {
    fn rows(&self) -> usize {
        self.geom.n_rays()
    }

    fn cols(&self) -> usize {
        self.geom.grid.n_pixels()
    }

    fn apply(&self, x: &[T], out: &mut [T]) {
        self.check_image_len(x.len());
        self.check_sino_len(out.len());
        let n_det = self.geom.n_det;
        out.par_chunks_mut(n_det).enumerate().for_each(|(view, row)| {
            for (det, o) in row.iter_mut().enumerate() {
                let ray = self.geom.ray(view, det);
                let mut acc = T::zero();
                self.trace(&ray, |idx, w| acc += T::of(w) * x[idx]);
                *o = acc;
            }
        });
    }

    fn apply_adjoint(&self, y: &[T], out: &mut [T]) {
        self.check_sino_len(y.len());
        self.check_image_len(out.len());
        let n_det = self.geom.n_det;
        let n_pix = out.len();
        let groups: Vec<usize> = (0..self.geom.n_views).step_by(ADJOINT_VIEWS_PER_TASK).collect();
        let partials: Vec<Vec<T>> = groups
            .par_iter()
            .map(|&start| {
                let mut acc = vec![T::zero(); n_pix];
                let end = (start + ADJOINT_VIEWS_PER_TASK).min(self.geom.n_views);
                for view in start..end {
                    for det in 0..n_det {
                        let s = y[view * n_det + det];
                        if s == T::zero() {
                            continue;
                        }
                        let ray = self.geom.ray(view, det);
                        self.trace(&ray, |idx, w| acc[idx] += T::of(w) * s);
                    }
                }
                acc
            })
            .collect();
        out.iter_mut().for_each(|o| *o = T::zero());
        for part in &partials {
            for (o, &p) in out.iter_mut().zip(part) {
                *o += p;
            }
        }
    }
}

pub fn forward_project<T: Real>(img: &Image<T>, geom: &FanGeometry) -> Result<Sinogram<T>> {
    if img.grid != geom.grid {
        return Err(Error::dim(format!("image grid {:?} does not match geometry grid {:?}", img.grid, geom.grid)));
    }
    let proj = FanProjector::new(geom.clone())?;
    let mut sino = Sinogram::zeros(geom.clone());
    proj.apply(&img.data, &mut sino.data);
    Ok(sino)
}

pub fn back_project<T: Real>(sino: &Sinogram<T>, geom: &FanGeometry) -> Result<Image<T>> {
    if &sino.geom != geom {
        return Err(Error::dim("sinogram geometry does not match projector geometry"));
    }
    let proj = FanProjector::new(geom.clone())?;
    let mut img = Image::zeros(geom.grid);
    proj.apply_adjoint(&sino.data, &mut img.data);
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::make_fan_geometry;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn geom(n: usize, views: usize, det: usize) -> FanGeometry {
        make_fan_geometry(views, det, GridSpec::new(n, 100.0).unwrap()).unwrap()
    }

    #[test]
    fn zero_in_zero_out() {
        let g = geom(8, 4, 12);
        let s = forward_project(&Image::<f64>::zeros(g.grid), &g).unwrap();
        assert!(s.data.iter().all(|&v| v == 0.0));
        let b = back_project(&Sinogram::<f64>::zeros(g.clone()), &g).unwrap();
        assert!(b.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_linear() {
        let g = geom(16, 6, 24);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..256).map(|_| rng.random()).collect();
        let img = Image::from_vec(g.grid, x.clone()).unwrap();
        let twice = Image::from_vec(g.grid, x.iter().map(|v| 2.0 * v).collect()).unwrap();
        let a = forward_project(&img, &g).unwrap();
        let b = forward_project(&twice, &g).unwrap();
        for (p, q) in a.data.iter().zip(&b.data) {
            assert_eq!(2.0 * p, *q);
        }
    }

    #[test]
    fn single_ray_backprojection_stays_on_the_ray() {
        let g = geom(16, 4, 20);
        let proj = FanProjector::new(g.clone()).unwrap();
        let (view, det) = (1, 7);
        let mut sino = vec![0.0f64; g.n_rays()];
        sino[view * g.n_det + det] = 1.0;
        let mut img = vec![0.0; g.grid.n_pixels()];
        proj.apply_adjoint(&sino, &mut img);
        let mut touched = vec![false; img.len()];
        proj.trace(&g.ray(view, det), |i, _| touched[i] = true);
        assert!(touched.iter().any(|&t| t));
        for (v, t) in img.iter().zip(&touched) {
            if !t {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn rejects_mismatched_grid() {
        let g = geom(8, 4, 12);
        let other = Image::<f64>::zeros(GridSpec::new(9, 100.0).unwrap());
        assert!(forward_project(&other, &g).is_err());
        let g2 = geom(8, 5, 12);
        assert!(back_project(&Sinogram::<f64>::zeros(g2), &g).is_err());
    }

    #[test]
    fn counting_wrapper_counts() {
        let op = CountingOperator::new(Identity(3));
        let mut out = [0.0f64; 3];
        op.apply(&[1.0, 2.0, 3.0], &mut out);
        op.apply_adjoint(&[1.0, 2.0, 3.0], &mut out);
        op.apply_adjoint(&[1.0, 2.0, 3.0], &mut out);
        assert_eq!((op.forward_count(), op.adjoint_count()), (1, 2));
    }
}
