//! Two-step reference reconstruction: per-angle CTF inversion followed by
//! filtered backprojection.

use std::f64::consts::PI;

use num_complex::Complex;
use rayon::prelude::*;
use rustfft::FftPlanner;

use crate::error::{param_err, shape_err, Result};
use crate::forward::{ctf_multipliers, ForwardModel};
use crate::grids::{IntensityData, ObjectVolume};
use crate::radon::{radon_adjoint, Sinogram, SparseProjector};
use crate::transforms::{Fft2, Propagation};
use crate::Real;

/// CTF transfer function `sin(chi) Re(c) - cos(chi) Im(c)` for objects
/// `N = c * r` with real `r`.
pub fn ctf_transfer(sin_m: f64, cos_m: f64, c: Complex<f64>) -> f64 {
    sin_m * c.re - cos_m * c.im
}

/// Inverts the CTF per angle with a Tikhonov-type clamp,
/// `F(p) = T F(I - 1) / (-2k (T^2 + cutoff^2))`, and returns the projections
/// `c * p` cut back to the `(my, n_det)` projection grid.
///
/// The detector must cover the whole propagation grid of `model`.
pub fn ctf_invert<T: Real>(model: &ForwardModel<T>, data: &IntensityData<T>, material: Complex<f64>, cutoff: f64) -> Result<Sinogram<T>> {
    let nf = match model.mode {
        Propagation::Near { nf } => nf,
        Propagation::Far => return param_err("CTF inversion needs near-field data"),
    };
    if !(cutoff > 0.0 && cutoff.is_finite()) {
        return param_err(format!("cutoff must be positive, got {cutoff}"));
    }
    if material.norm() == 0.0 {
        return param_err("material constant must be nonzero");
    }
    let (py, px) = (model.pad.pad_ny, model.pad.pad_nx);
    if model.detector.ny != py || model.detector.nx != px {
        return shape_err("CTF inversion needs a detector covering the propagation grid");
    }
    if data.ny != py || data.nx != px || data.n_angles() != model.n_angles() {
        return shape_err("data does not match the model geometry");
    }
    let (sin_m, cos_m) = ctf_multipliers(nf, py, px);
    let filt: Vec<f64> = sin_m
        .iter()
        .zip(&cos_m)
        .map(|(&s, &c)| {
            let t = ctf_transfer(s, c, material);
            t / (-2.0 * model.k() * (t * t + cutoff * cutoff))
        })
        .collect();
    let fft = Fft2::<T>::new(py, px);
    let scale = model.intensity_scale;
    let grid = model.grid();
    let mut out = Sinogram::zeros(model.n_angles(), grid.my, model.projector.n_det);
    let cm = Complex::new(T::of(material.re), T::of(material.im));
    let plen = grid.my * model.projector.n_det;
    out.data.par_chunks_mut(plen).enumerate().for_each(|(a, dst)| {
        let mut buf: Vec<Complex<T>> = data.frame(a).iter().map(|&v| Complex::new(T::of(v.f64() / scale - 1.0), T::zero())).collect();
        fft.forward(&mut buf);
        buf.iter_mut().zip(&filt).for_each(|(v, &f)| *v = *v * T::of(f));
        fft.inverse(&mut buf);
        model.pad.truncate_into(&buf, dst);
        dst.iter_mut().for_each(|v| *v = cm * v.re);
    });
    Ok(out)
}

/// Spatially derived ramp filter on `n` (even) points with a Hann window.
fn ramp_filter(n: usize) -> Vec<f64> {
    let mut h = vec![Complex::new(0.0, 0.0); n];
    h[0].re = 0.25;
    for i in 1..n {
        let k = if i <= n / 2 { i } else { n - i };
        if k % 2 == 1 {
            h[i].re = -1.0 / (PI * PI * (k * k) as f64);
        }
    }
    FftPlanner::new().plan_fft_forward(n).process(&mut h);
    (0..n)
        .map(|i| {
            let f = crate::transforms::freq_index(i, n) as f64 / n as f64;
            h[i].re * 0.5 * (1.0 + (2.0 * PI * f).cos())
        })
        .collect()
}

/// Filtered backprojection for angles equispaced over `[0, pi)`.
pub fn fbp<T: Real>(sino: &Sinogram<T>, projector: &SparseProjector<T>) -> Result<ObjectVolume<T>> {
    let na = projector.n_angles();
    if sino.n_angles != na || sino.n_det != projector.n_det || sino.my != projector.grid.my {
        return shape_err("sinogram does not match projector");
    }
    let step = PI / na as f64;
    let a0 = projector.angles[0];
    if projector.angles.iter().enumerate().any(|(i, &a)| (a - a0 - i as f64 * step).abs() > 1e-9) || a0 >= step {
        return param_err("filtered backprojection needs angles equispaced over [0, pi)");
    }
    let nd = projector.n_det;
    let n = (2 * nd).next_power_of_two();
    let filt = ramp_filter(n);
    let mut planner = FftPlanner::<T>::new();
    let (fwd, inv) = (planner.plan_fft_forward(n), planner.plan_fft_inverse(n));
    let norm = T::of(1.0 / n as f64);
    let mut filtered = sino.clone();
    filtered.data.par_chunks_mut(nd).for_each(|row| {
        let mut buf = vec![Complex::<T>::default(); n];
        buf[..nd].copy_from_slice(row);
        fwd.process(&mut buf);
        buf.iter_mut().zip(&filt).for_each(|(v, &f)| *v = *v * T::of(f));
        inv.process(&mut buf);
        row.iter_mut().zip(&buf).for_each(|(r, b)| *r = b * norm);
    });
    let dx = projector.grid.dx;
    let bp = radon_adjoint(projector, &filtered, projector.grid)?;
    Ok(bp.scaled(T::of(PI / (na as f64 * dx * dx))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grids::GridSpec;
    use crate::radon::{build_projector, radon_apply};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn equi(n: usize) -> Vec<f64> {
        (0..n).map(|i| i as f64 * PI / n as f64).collect()
    }

    fn near_model(n: usize, na: usize, nf: f64, pad: usize) -> ForwardModel<f64> {
        let g = GridSpec::cube(n).unwrap();
        ForwardModel::new(Propagation::Near { nf }, build_projector(g, &equi(na), n).unwrap(), pad).unwrap()
    }

    fn weak_volume(g: GridSpec, seed: u64, scale: f64) -> ObjectVolume<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        ObjectVolume::from_real(g, &(0..g.len()).map(|_| scale * r.random::<f64>()).collect::<Vec<_>>()).unwrap()
    }

    /// Relative error of `p_est` against `p_true` on Fourier modes where
    /// `|T| > thresh`. Needs an unpadded model so that modes are not mixed by
    /// the truncation.
    fn masked_error(m: &ForwardModel<f64>, est: &Sinogram<f64>, truth: &Sinogram<f64>, thresh: f64, c: Complex<f64>) -> f64 {
        let (py, px) = (m.pad.pad_ny, m.pad.pad_nx);
        let nf = match m.mode {
            Propagation::Near { nf } => nf,
            _ => unreachable!(),
        };
        let (s, co) = ctf_multipliers(nf, py, px);
        let fft = Fft2::<f64>::new(py, px);
        let (mut num, mut den) = (0.0, 0.0);
        for a in 0..truth.n_angles {
            let mut e = vec![Complex::default(); py * px];
            let mut t = vec![Complex::default(); py * px];
            m.pad.pad_into(est.projection(a), &mut e);
            m.pad.pad_into(truth.projection(a), &mut t);
            fft.forward(&mut e);
            fft.forward(&mut t);
            for i in 0..py * px {
                if ctf_transfer(s[i], co[i], c).abs() > thresh {
                    num += (e[i] - t[i]).norm_sqr();
                    den += t[i].norm_sqr();
                }
            }
        }
        (num / den).sqrt()
    }

    #[test]
    fn round_trip_recovers_projections() {
        let m = near_model(16, 4, 0.01, 1);
        let v = weak_volume(m.grid(), 1, 1e-3);
        let data = m.ctf_forward(&v).unwrap();
        let c = Complex::new(1.0, 0.0);
        let est = ctf_invert(&m, &data, c, 1e-6).unwrap();
        let truth = radon_apply(&m.projector, &v).unwrap();
        assert!(masked_error(&m, &est, &truth, 0.1, c) <= 0.01);
    }

    #[test]
    fn smaller_cutoff_reduces_error() {
        let m = near_model(12, 3, 0.02, 1);
        let c = Complex::new(1.0, -0.1);
        let g = m.grid();
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let v = ObjectVolume::from_data(g, (0..g.len()).map(|_| c * (1e-3 * r.random::<f64>())).collect()).unwrap();
        let data = m.ctf_forward(&v).unwrap();
        let truth = radon_apply(&m.projector, &v).unwrap();
        let e1 = masked_error(&m, &ctf_invert(&m, &data, c, 1e-2).unwrap(), &truth, 0.1, c);
        let e2 = masked_error(&m, &ctf_invert(&m, &data, c, 1e-3).unwrap(), &truth, 0.01, c);
        let e2_same = masked_error(&m, &ctf_invert(&m, &data, c, 1e-3).unwrap(), &truth, 0.1, c);
        assert!(e2_same < e1, "{e2_same} vs {e1}");
        assert!(e2 < 0.02);
    }

    #[test]
    fn ctf_invert_is_linear_and_zero_on_flat_field() {
        let m = near_model(8, 3, 0.05, 2);
        let ones = IntensityData::filled(equi(3), 16, 16, 1.0).unwrap();
        let c = Complex::new(1.0, 0.0);
        assert!(ctf_invert(&m, &ones, c, 0.1).unwrap().data.iter().all(|v| v.norm() < 1e-15));
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..ones.data.len()).map(|_| r.random::<f64>()).collect();
        let b: Vec<f64> = (0..ones.data.len()).map(|_| r.random::<f64>()).collect();
        // linear in I - 1
        let mk = |v: Vec<f64>| ones.like(v.iter().map(|x| 1.0 + x).collect());
        let pa = ctf_invert(&m, &mk(a.clone()), c, 0.1).unwrap();
        let pb = ctf_invert(&m, &mk(b.clone()), c, 0.1).unwrap();
        let pab = ctf_invert(&m, &mk(a.iter().zip(&b).map(|(x, y)| 2.0 * x - y).collect()), c, 0.1).unwrap();
        for ((x, y), z) in pa.data.iter().zip(&pb.data).zip(&pab.data) {
            assert!((x * 2.0 - y - z).norm() < 1e-12);
        }
        assert!(ctf_invert(&m, &ones, c, 0.0).is_err());
    }

    #[test]
    fn absorption_makes_zero_frequency_visible() {
        let c = Complex::new(1.0, -0.1);
        assert_eq!(ctf_transfer(0.0, 1.0, Complex::new(1.0, 0.0)), 0.0);
        assert!((ctf_transfer(0.0, 1.0, c) - 0.1).abs() < 1e-15);
    }

    fn slice_volume(n: usize, dx: f64, f: impl Fn(f64, f64) -> f64) -> ObjectVolume<f64> {
        let g = GridSpec::with_scales(n, 1, n, dx, 1.0).unwrap();
        let c = (n as f64 - 1.0) / 2.0;
        let vals: Vec<f64> = (0..n * n).map(|i| f((i / n) as f64 - c, (i % n) as f64 - c)).collect();
        ObjectVolume::from_real(g, &vals).unwrap()
    }

    #[test]
    fn fbp_gaussian_blob() {
        for dx in [1.0, 0.5] {
            let v = slice_volume(64, dx, |x, z| (-(x * x + z * z) / (2.0 * 36.0)).exp());
            let p = build_projector(v.grid, &equi(64), 64).unwrap();
            let rec = fbp(&radon_apply(&p, &v).unwrap(), &p).unwrap();
            let e = rec.relative_error(&v).unwrap();
            assert!(e <= 0.10, "dx={dx}: {e}");
        }
    }

    #[test]
    fn fbp_disc_interior_mean() {
        let v = slice_volume(64, 1.0, |x, z| if x.hypot(z) <= 20.0 { 2.0 } else { 0.0 });
        let p = build_projector(v.grid, &equi(64), 64).unwrap();
        let rec = fbp(&radon_apply(&p, &v).unwrap(), &p).unwrap();
        let c = 31.5;
        let inner: Vec<f64> = (0..64 * 64)
            .filter(|i| ((i / 64) as f64 - c).hypot((i % 64) as f64 - c) <= 15.0)
            .map(|i| rec.data[i].re)
            .collect();
        let mean = inner.iter().sum::<f64>() / inner.len() as f64;
        assert!((mean / 2.0 - 1.0).abs() <= 0.1, "{mean}");
    }

    #[test]
    fn fbp_zero_and_validation() {
        let g = GridSpec::new(8, 2, 8).unwrap();
        let p = build_projector::<f64>(g, &equi(8), 8).unwrap();
        let z = fbp(&Sinogram::zeros(8, 2, 8), &p).unwrap();
        assert!(z.data.iter().all(|v| v.norm() == 0.0));
        let bad = build_projector::<f64>(g, &[0.0, 0.1, 0.5], 8).unwrap();
        assert!(fbp(&Sinogram::zeros(3, 2, 8), &bad).is_err());
    }
}
