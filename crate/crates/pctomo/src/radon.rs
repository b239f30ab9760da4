//! Pixel-driven discrete Radon transform stored as a sparse matrix.
//!
//! Pixel centers are projected onto a centered detector of `n_det` bins with
//! spacing `dx`, and each pixel's value is split linearly between the two
//! nearest bins. The same matrix is applied to every `y` slice of a volume
//! (cylindrical transform); its transpose gives the exact adjoint.

use num_complex::Complex;
use rayon::prelude::*;

use crate::error::{param_err, shape_err, Result};
use crate::grids::{Array, GridSpec, ObjectVolume};
use crate::Real;

/// Stack of projections laid out as `(n_angles, my, n_det)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram<T> {
    pub n_angles: usize,
    pub my: usize,
    pub n_det: usize,
    pub data: Vec<Complex<T>>,
}

impl<T: Real> Sinogram<T> {
    pub fn zeros(n_angles: usize, my: usize, n_det: usize) -> Self {
        Sinogram { n_angles, my, n_det, data: vec![Complex::default(); n_angles * my * n_det] }
    }

    /// Projection for one angle, `(my, n_det)` row-major.
    pub fn projection(&self, a: usize) -> &[Complex<T>] {
        let n = self.my * self.n_det;
        &self.data[a * n..(a + 1) * n]
    }

    pub fn projection_mut(&mut self, a: usize) -> &mut [Complex<T>] {
        let n = self.my * self.n_det;
        &mut self.data[a * n..(a + 1) * n]
    }
}

#[derive(Clone, Debug)]
pub struct SparseProjector<T> {
    pub grid: GridSpec,
    pub angles: Vec<f64>,
    pub n_det: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<T>,
    // transpose, indexed by pixel
    t_ptr: Vec<usize>,
    t_rows: Vec<u32>,
    t_vals: Vec<T>,
}

/// Two-bin linear splat of detector coordinate `u` (in bin units).
#[inline]
fn splat(u: f64, n_det: usize) -> [(Option<usize>, f64); 2] {
    let j0 = u.floor();
    let f = u - j0;
    let bin = |j: f64| if j >= 0.0 && j < n_det as f64 { Some(j as usize) } else { None };
    [(bin(j0), 1.0 - f), (bin(j0 + 1.0), f)]
}

pub fn build_projector<T: Real>(grid: GridSpec, angles: &[f64], n_det: usize) -> Result<SparseProjector<T>> {
    if n_det == 0 {
        return param_err("n_det must be >= 1");
    }
    if angles.is_empty() {
        return param_err("angle list is empty");
    }
    let (mx, mz, dx) = (grid.mx, grid.mz, grid.dx);
    let n_rows = angles.len() * n_det;
    let cx = (mx as f64 - 1.0) / 2.0;
    let cz = (mz as f64 - 1.0) / 2.0;
    let cd = (n_det as f64 - 1.0) / 2.0;

    let mut triplets: Vec<(u32, u32, f64)> = Vec::with_capacity(angles.len() * mx * mz * 2);
    for (a, &th) in angles.iter().enumerate() {
        let (s, c) = th.sin_cos();
        for x in 0..mx {
            for z in 0..mz {
                // detector coordinate in bin units; dx cancels
                let u = (x as f64 - cx) * c + (z as f64 - cz) * s + cd;
                for (bin, w) in splat(u, n_det) {
                    if let Some(j) = bin {
                        if w > 0.0 {
                            triplets.push(((a * n_det + j) as u32, (x * mz + z) as u32, w * dx));
                        }
                    }
                }
            }
        }
    }
    let (row_ptr, cols, vals) = compress(&triplets, n_rows, |t| (t.0, t.1));
    let (t_ptr, t_rows, t_vals) = compress(&triplets, mx * mz, |t| (t.1, t.0));
    Ok(SparseProjector {
        grid,
        angles: angles.to_vec(),
        n_det,
        row_ptr,
        cols,
        vals: vals.into_iter().map(T::of).collect(),
        t_ptr,
        t_rows,
        t_vals: t_vals.into_iter().map(T::of).collect(),
    })
}

/// Counting-sort triplets into compressed rows; within a row entries keep
/// the original (pixel-ascending per angle) order.
fn compress(
    trip: &[(u32, u32, f64)],
    n_rows: usize,
    key: impl Fn(&(u32, u32, f64)) -> (u32, u32),
) -> (Vec<usize>, Vec<u32>, Vec<f64>) {
    let mut ptr = vec![0usize; n_rows + 1];
    for t in trip {
        ptr[key(t).0 as usize + 1] += 1;
    }
    for i in 0..n_rows {
        ptr[i + 1] += ptr[i];
    }
    let mut fill = ptr.clone();
    let mut idx = vec![0u32; trip.len()];
    let mut val = vec![0.0; trip.len()];
    for t in trip {
        let (r, c) = key(t);
        let k = fill[r as usize];
        idx[k] = c;
        val[k] = t.2;
        fill[r as usize] += 1;
    }
    (ptr, idx, val)
}

impl<T: Real> SparseProjector<T> {
    pub fn n_angles(&self) -> usize {
        self.angles.len()
    }

    pub fn n_rows(&self) -> usize {
        self.angles.len() * self.n_det
    }

    pub fn n_cols(&self) -> usize {
        self.grid.slice_len()
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// Nonzeros of one row as `(pixel, weight)`.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
        self.cols[a..b].iter().zip(&self.vals[a..b]).map(|(&c, &w)| (c as usize, w))
    }

    /// Applies the matrix to a single real slice (`mx*mz`, index `x*mz + z`).
    pub fn apply_slice(&self, slice: &[T]) -> Vec<T> {
        (0..self.n_rows()).map(|r| self.row(r).fold(T::zero(), |acc, (c, w)| acc + w * slice[c])).collect()
    }

    /// Triplet export as three real arrays `(rows, cols, weights)`.
    pub fn to_triplet_arrays(&self) -> Result<[Array; 3]> {
        let n = self.nnz();
        let mut rows = Vec::with_capacity(n);
        for r in 0..self.n_rows() {
            rows.extend(std::iter::repeat_n(r as f64, self.row_ptr[r + 1] - self.row_ptr[r]));
        }
        Ok([
            Array::real(vec![n], rows)?,
            Array::real(vec![n], self.cols.iter().map(|&c| c as f64).collect())?,
            Array::real(vec![n], self.vals.iter().map(|v| v.f64()).collect())?,
        ])
    }
}

fn check_grid<T: Real>(p: &SparseProjector<T>, g: &GridSpec) -> Result<()> {
    if g.mx != p.grid.mx || g.mz != p.grid.mz {
        return shape_err(format!(
            "volume slice {}x{} does not match projector {}x{}",
            g.mx, g.mz, p.grid.mx, p.grid.mz
        ));
    }
    Ok(())
}

/// Slice-wise forward projection, output `(n_angles, my, n_det)`.
pub fn radon_apply<T: Real>(p: &SparseProjector<T>, vol: &ObjectVolume<T>) -> Result<Sinogram<T>> {
    check_grid(p, &vol.grid)?;
    let my = vol.grid.my;
    let s = p.n_cols();
    // pixel-major copy: each weight then multiplies a contiguous run over y
    let mut vt = vec![Complex::<T>::default(); vol.data.len()];
    for y in 0..my {
        for px in 0..s {
            vt[px * my + y] = vol.data[y * s + px];
        }
    }
    let mut rows = vec![Complex::<T>::default(); p.n_rows() * my];
    rows.par_chunks_mut(my).enumerate().for_each(|(r, acc)| {
        for (c, w) in p.row(r) {
            let src = &vt[c * my..(c + 1) * my];
            for (o, v) in acc.iter_mut().zip(src) {
                *o += v * w;
            }
        }
    });
    let (na, nd) = (p.n_angles(), p.n_det);
    let mut out = Sinogram::zeros(na, my, nd);
    for a in 0..na {
        for j in 0..nd {
            let r = &rows[(a * nd + j) * my..(a * nd + j + 1) * my];
            for (y, v) in r.iter().enumerate() {
                out.data[(a * my + y) * nd + j] = *v;
            }
        }
    }
    Ok(out)
}

/// Transpose of [`radon_apply`].
pub fn radon_adjoint<T: Real>(p: &SparseProjector<T>, sino: &Sinogram<T>, grid: GridSpec) -> Result<ObjectVolume<T>> {
    check_grid(p, &grid)?;
    if sino.n_angles != p.n_angles() || sino.n_det != p.n_det || sino.my != grid.my {
        return shape_err(format!(
            "sinogram {}x{}x{} does not match projector {}x{}x{}",
            sino.n_angles,
            sino.my,
            sino.n_det,
            p.n_angles(),
            grid.my,
            p.n_det
        ));
    }
    let (my, nd) = (grid.my, p.n_det);
    let mut st = vec![Complex::<T>::default(); sino.data.len()];
    for a in 0..p.n_angles() {
        for y in 0..my {
            for j in 0..nd {
                st[(a * nd + j) * my + y] = sino.data[(a * my + y) * nd + j];
            }
        }
    }
    let s = p.n_cols();
    let mut pix = vec![Complex::<T>::default(); s * my];
    pix.par_chunks_mut(my).enumerate().for_each(|(px, acc)| {
        let (a, b) = (p.t_ptr[px], p.t_ptr[px + 1]);
        for (&r, &w) in p.t_rows[a..b].iter().zip(&p.t_vals[a..b]) {
            let src = &st[r as usize * my..(r as usize + 1) * my];
            for (o, v) in acc.iter_mut().zip(src) {
                *o += v * w;
            }
        }
    });
    let mut out = ObjectVolume::zeros(grid);
    for px in 0..s {
        for y in 0..my {
            out.data[y * s + px] = pix[px * my + y];
        }
    }
    Ok(out)
}

/// Dense reference evaluation of the same projection rule, written as a
/// triangle (hat) kernel over all bins. Intended for small test slices.
pub fn radon_oracle(slice: &[f64], mx: usize, mz: usize, dx: f64, angles: &[f64], n_det: usize) -> Vec<f64> {
    assert_eq!(slice.len(), mx * mz);
    let mut out = vec![0.0; angles.len() * n_det];
    for (a, &th) in angles.iter().enumerate() {
        for j in 0..n_det {
            let bin_pos = (j as f64 - (n_det as f64 - 1.0) / 2.0) * dx;
            let mut acc = 0.0;
            for x in 0..mx {
                for z in 0..mz {
                    let xc = (x as f64 - (mx as f64 - 1.0) / 2.0) * dx;
                    let zc = (z as f64 - (mz as f64 - 1.0) / 2.0) * dx;
                    let s = xc * th.cos() + zc * th.sin();
                    let hat = (1.0 - ((s - bin_pos) / dx).abs()).max(0.0);
                    acc += hat * dx * slice[x * mz + z];
                }
            }
            out[a * n_det + j] = acc;
        }
    }
    out
}
