//! Unitary FFTs, symmetric zero padding and the discrete free-space propagators.
//!
//! Every transform here is normalized by `1/sqrt(n)` in both directions, so
//! `fft2` is unitary and the Fresnel propagator (a unit-modulus Fourier
//! multiplier) conserves energy on the padded grid.

use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{param_err, shape_err, Result};
use crate::grids::ComplexField;
use crate::Real;

/// Signed frequency index of FFT bin `i` on a grid of length `n`, in `[-n/2, n/2)`.
#[inline]
pub fn freq_index(i: usize, n: usize) -> i64 {
    if i < n.div_ceil(2) {
        i as i64
    } else {
        i as i64 - n as i64
    }
}

/// Cached row/column plans for a fixed `(ny, nx)` shape.
#[derive(Clone)]
pub struct Fft2<T: Real> {
    ny: usize,
    nx: usize,
    fx: Arc<dyn Fft<T>>,
    ix: Arc<dyn Fft<T>>,
    fy: Arc<dyn Fft<T>>,
    iy: Arc<dyn Fft<T>>,
    scale: T,
}

impl<T: Real> Fft2<T> {
    pub fn new(ny: usize, nx: usize) -> Self {
        let mut p = FftPlanner::new();
        Fft2 {
            ny,
            nx,
            fx: p.plan_fft_forward(nx),
            ix: p.plan_fft_inverse(nx),
            fy: p.plan_fft_forward(ny),
            iy: p.plan_fft_inverse(ny),
            scale: T::one() / T::of(((ny * nx) as f64).sqrt()),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.ny, self.nx)
    }

    pub fn forward(&self, buf: &mut [Complex<T>]) {
        self.run(buf, &self.fx, &self.fy);
    }

    pub fn inverse(&self, buf: &mut [Complex<T>]) {
        self.run(buf, &self.ix, &self.iy);
    }

    fn run(&self, buf: &mut [Complex<T>], row: &Arc<dyn Fft<T>>, col: &Arc<dyn Fft<T>>) {
        let (ny, nx) = (self.ny, self.nx);
        assert_eq!(buf.len(), ny * nx, "fft2 buffer shape");
        let mut scratch = vec![Complex::default(); row.get_inplace_scratch_len().max(col.get_inplace_scratch_len())];
        row.process_with_scratch(buf, &mut scratch);
        if ny > 1 {
            let mut t = vec![Complex::default(); ny * nx];
            transpose(buf, &mut t, ny, nx);
            col.process_with_scratch(&mut t, &mut scratch);
            transpose(&t, buf, nx, ny);
        }
        let s = self.scale;
        buf.iter_mut().for_each(|v| *v = *v * s);
    }
}

fn transpose<T: Copy>(src: &[T], dst: &mut [T], rows: usize, cols: usize) {
    const B: usize = 16;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

pub fn fft2<T: Real>(field: &ComplexField<T>) -> ComplexField<T> {
    let mut out = field.clone();
    Fft2::new(field.ny, field.nx).forward(&mut out.data);
    out
}

pub fn ifft2<T: Real>(field: &ComplexField<T>) -> ComplexField<T> {
    let mut out = field.clone();
    Fft2::new(field.ny, field.nx).inverse(&mut out.data);
    out
}

/// Moves the zero frequency from index 0 to index `n/2` on both axes
/// (`inverse` undoes it, also for odd sizes).
pub fn fftshift<T: Copy + Default>(buf: &[T], ny: usize, nx: usize, inverse: bool) -> Vec<T> {
    let mut out = vec![T::default(); buf.len()];
    let (sy, sx) = if inverse { (ny - ny / 2, nx - nx / 2) } else { (ny / 2, nx / 2) };
    for y in 0..ny {
        let ty = (y + sy) % ny;
        for x in 0..nx {
            out[ty * nx + (x + sx) % nx] = buf[y * nx + x];
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Padding

/// Symmetric embedding of an `(ny, nx)` array into a `(pad_ny, pad_nx)` one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PadSpec {
    pub ny: usize,
    pub nx: usize,
    pub pad_ny: usize,
    pub pad_nx: usize,
}

impl PadSpec {
    pub fn new(ny: usize, nx: usize, pad_ny: usize, pad_nx: usize) -> Result<Self> {
        if ny == 0 || nx == 0 {
            return param_err("pad input dims must be positive");
        }
        if pad_ny < ny || pad_nx < nx {
            return param_err(format!("pad target {pad_ny}x{pad_nx} smaller than input {ny}x{nx}"));
        }
        Ok(PadSpec { ny, nx, pad_ny, pad_nx })
    }

    /// Padding by an integer factor per axis.
    pub fn factor(ny: usize, nx: usize, f: usize) -> Result<Self> {
        Self::new(ny, nx, ny * f.max(1), nx * f.max(1))
    }

    pub fn identity(ny: usize, nx: usize) -> Result<Self> {
        Self::new(ny, nx, ny, nx)
    }

    /// `(offset_y, offset_x)` = `ceil((pad - in) / 2)`.
    pub fn offsets(&self) -> (usize, usize) {
        ((self.pad_ny - self.ny).div_ceil(2), (self.pad_nx - self.nx).div_ceil(2))
    }

    pub fn padded_len(&self) -> usize {
        self.pad_ny * self.pad_nx
    }

    /// Writes `src` into the window of `dst` (which is zeroed first).
    pub fn pad_into<T: Copy + Default>(&self, src: &[T], dst: &mut [T]) {
        dst.iter_mut().for_each(|v| *v = T::default());
        let (oy, ox) = self.offsets();
        for y in 0..self.ny {
            let d = (y + oy) * self.pad_nx + ox;
            dst[d..d + self.nx].copy_from_slice(&src[y * self.nx..(y + 1) * self.nx]);
        }
    }

    pub fn truncate_into<T: Copy>(&self, src: &[T], dst: &mut [T]) {
        let (oy, ox) = self.offsets();
        for y in 0..self.ny {
            let s = (y + oy) * self.pad_nx + ox;
            dst[y * self.nx..(y + 1) * self.nx].copy_from_slice(&src[s..s + self.nx]);
        }
    }
}

pub fn zero_pad<T: Real>(field: &ComplexField<T>, pad: &PadSpec) -> Result<ComplexField<T>> {
    if field.ny != pad.ny || field.nx != pad.nx {
        return shape_err(format!("field {}x{} does not match pad input {}x{}", field.ny, field.nx, pad.ny, pad.nx));
    }
    let mut out = ComplexField::zeros(pad.pad_ny, pad.pad_nx);
    pad.pad_into(&field.data, &mut out.data);
    Ok(out)
}

pub fn truncate<T: Real>(field: &ComplexField<T>, pad: &PadSpec) -> Result<ComplexField<T>> {
    if field.ny != pad.pad_ny || field.nx != pad.pad_nx {
        return shape_err(format!(
            "field {}x{} does not match padded dims {}x{}",
            field.ny, field.nx, pad.pad_ny, pad.pad_nx
        ));
    }
    let mut out = ComplexField::zeros(pad.ny, pad.nx);
    pad.truncate_into(&field.data, &mut out.data);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Propagators

/// Fresnel multiplier `exp(-i pi |xi'|^2 / nf)` with `xi' = j/n` per axis.
#[derive(Clone, Debug)]
pub struct FresnelKernel<T> {
    pub nf: f64,
    pub ny: usize,
    pub nx: usize,
    pub multiplier: Vec<Complex<T>>,
}

impl<T: Real> FresnelKernel<T> {
    /// `nf = +inf` gives the all-ones kernel.
    pub fn new(nf: f64, ny: usize, nx: usize) -> Result<Self> {
        if nf.is_nan() || nf <= 0.0 {
            return param_err(format!("Fresnel number must be positive, got {nf}"));
        }
        let mut multiplier = vec![Complex::new(T::one(), T::zero()); ny * nx];
        if nf.is_finite() {
            for y in 0..ny {
                let fy = freq_index(y, ny) as f64 / ny as f64;
                for x in 0..nx {
                    let fx = freq_index(x, nx) as f64 / nx as f64;
                    let ph = -std::f64::consts::PI * (fx * fx + fy * fy) / nf;
                    multiplier[y * nx + x] = Complex::new(T::of(ph.cos()), T::of(ph.sin()));
                }
            }
        }
        Ok(FresnelKernel { nf, ny, nx, multiplier })
    }
}

/// Propagation mode of the detector plane relative to the sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Propagation {
    /// Fresnel regime with the pixel-based Fresnel number.
    Near { nf: f64 },
    /// Fraunhofer regime; output spectra are centered (zero frequency at `n/2`).
    Far,
}

/// Plans plus kernel for repeated propagation on one padded grid.
#[derive(Clone)]
pub struct Propagator<T: Real> {
    pub mode: Propagation,
    fft: Fft2<T>,
    kernel: Option<Vec<Complex<T>>>,
}

impl<T: Real> Propagator<T> {
    pub fn new(mode: Propagation, ny: usize, nx: usize) -> Result<Self> {
        let kernel = match mode {
            Propagation::Near { nf } => {
                let k = FresnelKernel::<T>::new(nf, ny, nx)?;
                if nf.is_finite() {
                    Some(k.multiplier)
                } else {
                    None
                }
            }
            Propagation::Far => None,
        };
        Ok(Propagator { mode, fft: Fft2::new(ny, nx), kernel })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.fft.shape()
    }

    pub fn apply(&self, buf: &mut [Complex<T>]) {
        match self.mode {
            Propagation::Near { .. } => {
                if let Some(m) = &self.kernel {
                    self.fft.forward(buf);
                    buf.iter_mut().zip(m).for_each(|(v, m)| *v *= m);
                    self.fft.inverse(buf);
                }
            }
            Propagation::Far => {
                self.fft.forward(buf);
                let (ny, nx) = self.shape();
                let s = fftshift(buf, ny, nx, false);
                buf.copy_from_slice(&s);
            }
        }
    }

    /// Exact adjoint (= inverse) of [`Propagator::apply`].
    pub fn adjoint(&self, buf: &mut [Complex<T>]) {
        match self.mode {
            Propagation::Near { .. } => {
                if let Some(m) = &self.kernel {
                    self.fft.forward(buf);
                    buf.iter_mut().zip(m).for_each(|(v, m)| *v *= m.conj());
                    self.fft.inverse(buf);
                }
            }
            Propagation::Far => {
                let (ny, nx) = self.shape();
                let s = fftshift(buf, ny, nx, true);
                buf.copy_from_slice(&s);
                self.fft.inverse(buf);
            }
        }
    }
}

fn propagate_padded<T: Real>(field: &ComplexField<T>, pad: &PadSpec, mode: Propagation, back: bool) -> Result<ComplexField<T>> {
    let mut buf = zero_pad(field, pad)?;
    let p = Propagator::new(mode, pad.pad_ny, pad.pad_nx)?;
    if back {
        p.adjoint(&mut buf.data);
    } else {
        p.apply(&mut buf.data);
    }
    truncate(&buf, pad)
}

/// `truncate(ifft2(m * fft2(pad(field))))`.
pub fn fresnel_propagate<T: Real>(field: &ComplexField<T>, nf: f64, pad: &PadSpec) -> Result<ComplexField<T>> {
    if nf == f64::INFINITY {
        if field.ny != pad.ny || field.nx != pad.nx {
            return shape_err("field does not match pad input");
        }
        return Ok(field.clone());
    }
    propagate_padded(field, pad, Propagation::Near { nf }, false)
}

/// Back-propagation with the conjugate kernel.
pub fn fresnel_backpropagate<T: Real>(field: &ComplexField<T>, nf: f64, pad: &PadSpec) -> Result<ComplexField<T>> {
    if nf == f64::INFINITY {
        return Ok(field.clone());
    }
    propagate_padded(field, pad, Propagation::Near { nf }, true)
}

/// `truncate(shift(fft2(pad(field))))`; the spectrum is centered before the
/// detector window is cut out.
pub fn fraunhofer_propagate<T: Real>(field: &ComplexField<T>, pad: &PadSpec) -> Result<ComplexField<T>> {
    propagate_padded(field, pad, Propagation::Far, false)
}

// ---------------------------------------------------------------------------
// 3D transform (object-space Gramians)

/// Unitary 3D FFT over a row-major `(n0, n1, n2)` array.
#[derive(Clone)]
pub struct Fft3<T: Real> {
    dims: [usize; 3],
    fwd: [Arc<dyn Fft<T>>; 3],
    inv: [Arc<dyn Fft<T>>; 3],
    scale: T,
}

impl<T: Real> Fft3<T> {
    pub fn new(n0: usize, n1: usize, n2: usize) -> Self {
        let mut p = FftPlanner::new();
        let dims = [n0, n1, n2];
        Fft3 {
            dims,
            fwd: dims.map(|n| p.plan_fft_forward(n)),
            inv: dims.map(|n| p.plan_fft_inverse(n)),
            scale: T::one() / T::of(((n0 * n1 * n2) as f64).sqrt()),
        }
    }

    pub fn forward(&self, buf: &mut [Complex<T>]) {
        self.run(buf, false)
    }

    pub fn inverse(&self, buf: &mut [Complex<T>]) {
        self.run(buf, true)
    }

    fn run(&self, buf: &mut [Complex<T>], inverse: bool) {
        let [n0, n1, n2] = self.dims;
        assert_eq!(buf.len(), n0 * n1 * n2, "fft3 buffer shape");
        let plans = if inverse { &self.inv } else { &self.fwd };
        let mut scratch = vec![Complex::default(); plans.iter().map(|p| p.get_inplace_scratch_len()).max().unwrap_or(0)];
        if n2 > 1 {
            plans[2].process_with_scratch(buf, &mut scratch);
        }
        let strided = |axis: usize, n: usize, stride: usize, buf: &mut [Complex<T>], scratch: &mut [Complex<T>]| {
            if n == 1 {
                return;
            }
            let mut line = vec![Complex::default(); n];
            let outer = buf.len() / (n * stride);
            for o in 0..outer {
                for s in 0..stride {
                    let base = o * n * stride + s;
                    for (j, l) in line.iter_mut().enumerate() {
                        *l = buf[base + j * stride];
                    }
                    plans[axis].process_with_scratch(&mut line, scratch);
                    for (j, l) in line.iter().enumerate() {
                        buf[base + j * stride] = *l;
                    }
                }
            }
        };
        strided(1, n1, n2, buf, &mut scratch);
        strided(0, n0, n1 * n2, buf, &mut scratch);
        let s = self.scale;
        buf.iter_mut().for_each(|v| *v = *v * s);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grids::inner_product;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type C = Complex<f64>;

    fn random_field(rng: &mut ChaCha8Rng, ny: usize, nx: usize) -> ComplexField<f64> {
        let d = (0..ny * nx).map(|_| C::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
        ComplexField::from_data(ny, nx, d).unwrap()
    }

    fn rel(a: &[C], b: &[C]) -> f64 {
        let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt();
        d / b.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt().max(1e-300)
    }

    #[test]
    fn freq_index_layout() {
        let e: Vec<i64> = (0..4).map(|i| freq_index(i, 4)).collect();
        assert_eq!(e, vec![0, 1, -2, -1]);
        let o: Vec<i64> = (0..5).map(|i| freq_index(i, 5)).collect();
        assert_eq!(o, vec![0, 1, 2, -2, -1]);
    }

    #[test]
    fn delta_transforms_to_constant() {
        let mut f = ComplexField::<f64>::zeros(4, 4);
        f.set(0, 0, C::new(1.0, 0.0));
        let g = fft2(&f);
        for v in &g.data {
            assert!((v - C::new(0.25, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn inverse_and_parseval() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_field(&mut rng, 8, 8);
        let g = fft2(&f);
        assert!((g.norm() - f.norm()).abs() < 1e-12 * f.norm());
        let h = ifft2(&g);
        assert!(rel(&h.data, &f.data) < 1e-12);
        let r = random_field(&mut rng, 6, 10);
        assert!(rel(&ifft2(&fft2(&r)).data, &r.data) < 1e-12);
    }

    #[test]
    fn pad_and_truncate() {
        let mut one = ComplexField::<f64>::zeros(1, 1);
        one.set(0, 0, C::new(1.0, 0.0));
        let p = zero_pad(&one, &PadSpec::new(1, 1, 3, 3).unwrap()).unwrap();
        for y in 0..3 {
            for x in 0..3 {
                let want = if (y, x) == (1, 1) { 1.0 } else { 0.0 };
                assert_eq!(p.get(y, x).re, want);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random_field(&mut rng, 5, 7);
        let spec = PadSpec::new(5, 7, 9, 12).unwrap();
        assert_eq!(truncate(&zero_pad(&f, &spec).unwrap(), &spec).unwrap(), f);
        assert!(PadSpec::new(4, 4, 3, 8).is_err());
    }

    #[test]
    fn pad_truncate_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_field(&mut rng, 4, 4);
        let b = random_field(&mut rng, 8, 8);
        let spec = PadSpec::factor(4, 4, 2).unwrap();
        let lhs = inner_product(&zero_pad(&a, &spec).unwrap().data, &b.data).unwrap();
        let rhs = inner_product(&a.data, &truncate(&b, &spec).unwrap().data).unwrap();
        assert!((lhs - rhs).abs() < 1e-14);
    }

    #[test]
    fn constant_field_is_invariant() {
        let f = ComplexField::from_data(8, 8, vec![C::new(1.0, 0.0); 64]).unwrap();
        let spec = PadSpec::identity(8, 8).unwrap();
        for nf in [0.01, 0.3, 5.0] {
            let g = fresnel_propagate(&f, nf, &spec).unwrap();
            assert!(rel(&g.data, &f.data) < 1e-13);
        }
        assert!(fresnel_propagate(&f, 0.0, &spec).is_err());
        assert!(fresnel_propagate(&f, -1.0, &spec).is_err());
    }

    #[test]
    fn kernel_has_unit_modulus() {
        let k = FresnelKernel::<f64>::new(0.013, 17, 32).unwrap();
        for m in &k.multiplier {
            assert!((m.norm() - 1.0).abs() < 1e-14);
        }
    }

    /// Periodic convolution with the kernel's spatial response, each kernel
    /// value summed directly from its Fourier series.
    #[test]
    fn fresnel_matches_direct_convolution() {
        let (n, pn, nf) = (16usize, 64usize, 0.05);
        let spec = PadSpec::new(n, n, pn, pn).unwrap();
        let mut f = ComplexField::<f64>::zeros(n, n);
        let (sy, sx) = (5usize, 9usize);
        f.set(sy, sx, C::new(1.0, 0.0));
        let got = fresnel_propagate(&f, nf, &spec).unwrap();

        let (oy, ox) = spec.offsets();
        let kernel_at = |dy: i64, dx: i64| -> C {
            let mut acc = C::new(0.0, 0.0);
            for j in -(pn as i64 / 2)..(pn as i64 / 2) {
                for i in -(pn as i64 / 2)..(pn as i64 / 2) {
                    let (xj, xi) = (j as f64 / pn as f64, i as f64 / pn as f64);
                    let ph = -std::f64::consts::PI * (xj * xj + xi * xi) / nf
                        + 2.0 * std::f64::consts::PI * (xj * dy as f64 + xi * dx as f64);
                    acc += C::new(ph.cos(), ph.sin());
                }
            }
            acc / (pn * pn) as f64
        };
        let mut want = vec![C::new(0.0, 0.0); n * n];
        for y in 0..n {
            for x in 0..n {
                let dy = (y + oy) as i64 - (sy + oy) as i64;
                let dx = (x + ox) as i64 - (sx + ox) as i64;
                want[y * n + x] = kernel_at(dy, dx);
            }
        }
        assert!(rel(&got.data, &want) < 1e-10, "rel err {}", rel(&got.data, &want));
    }

    #[test]
    fn fraunhofer_matches_naive_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 8;
        let f = random_field(&mut rng, n, n);
        let got = fraunhofer_propagate(&f, &PadSpec::identity(n, n).unwrap()).unwrap();
        for ky in 0..n {
            for kx in 0..n {
                let (fy, fx) = (ky as f64 - (n / 2) as f64, kx as f64 - (n / 2) as f64);
                let mut acc = C::new(0.0, 0.0);
                for y in 0..n {
                    for x in 0..n {
                        let ph = -2.0 * std::f64::consts::PI * (fy * y as f64 + fx * x as f64) / n as f64;
                        acc += f.get(y, x) * C::new(ph.cos(), ph.sin());
                    }
                }
                acc /= n as f64;
                assert!((got.get(ky, kx) - acc).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn fraunhofer_of_centered_delta_has_constant_modulus() {
        let mut f = ComplexField::<f64>::zeros(4, 4);
        f.set(1, 2, C::new(1.0, 0.0));
        let g = fraunhofer_propagate(&f, &PadSpec::factor(4, 4, 2).unwrap()).unwrap();
        let m0 = g.data[0].norm();
        assert!(g.data.iter().all(|v| (v.norm() - m0).abs() < 1e-14));
        let z = fraunhofer_propagate(&ComplexField::<f64>::zeros(4, 4), &PadSpec::factor(4, 4, 2).unwrap()).unwrap();
        assert!(z.data.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn fft3_is_unitary_and_invertible() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v: Vec<C> = (0..3 * 4 * 5).map(|_| C::new(rng.random(), rng.random())).collect();
        let f = Fft3::new(3, 4, 5);
        let mut w = v.clone();
        f.forward(&mut w);
        let nv: f64 = v.iter().map(|c| c.norm_sqr()).sum();
        let nw: f64 = w.iter().map(|c| c.norm_sqr()).sum();
        assert!((nv - nw).abs() < 1e-12 * nv);
        f.inverse(&mut w);
        assert!(rel(&w, &v) < 1e-13);
    }

    #[test]
    fn shift_round_trip_odd() {
        let v: Vec<u32> = (0..15).collect();
        let s = fftshift(&v, 3, 5, false);
        assert_eq!(fftshift(&s, 3, 5, true), v);
        assert_eq!(s[1 * 5 + 2], 0);
    }
}
