//! Near-field and far-field intensity operators with their Fréchet derivative
//! and its adjoint.
//!
//! Per angle `a`, with `p = R N` the projection of the volume,
//!
//! ```text
//! E   = exp(-i k p)             O0 = E - 1
//! psi = 1 + D(pad(O0))          (near field, D the Fresnel propagator)
//! psi = shift(fft2(pad(O0)))    (far field, no probe term)
//! I   = s * window(|psi|^2)
//! ```
//!
//! where `pad` embeds the `(my, n_det)` projection into the propagation grid,
//! `window` cuts the detector out of it and `s` is an optional intensity
//! scale (photon count per unit intensity).

use num_complex::Complex;
use rayon::prelude::*;

use crate::error::{param_err, shape_err, Result};
use crate::grids::{GridSpec, IntensityData, ObjectVolume};
use crate::radon::{radon_adjoint, radon_apply, Sinogram, SparseProjector};
use crate::transforms::{freq_index, Fft2, PadSpec, Propagation, Propagator};
use crate::Real;

/// Illumination. Only the unit plane wave is implemented.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Probe {
    #[default]
    Unit,
}

/// `exp(-i k p) - 1`, elementwise.
pub fn otf0<T: Real>(proj: &[Complex<T>], k: f64) -> Vec<Complex<T>> {
    let k = T::of(k);
    proj.iter()
        .map(|p| {
            let e = Complex::new(p.im * k, -p.re * k).exp();
            e - Complex::new(T::one(), T::zero())
        })
        .collect()
}

#[derive(Clone)]
pub struct ForwardModel<T: Real> {
    pub mode: Propagation,
    pub projector: SparseProjector<T>,
    /// Projection `(my, n_det)` into the propagation grid.
    pub pad: PadSpec,
    /// Detector window inside the propagation grid.
    pub detector: PadSpec,
    pub probe: Probe,
    pub intensity_scale: f64,
    propagator: Propagator<T>,
}

/// Cached quantities at the point where the derivative is taken.
#[derive(Clone, Debug)]
pub struct LinearizationPoint<T> {
    pub volume: ObjectVolume<T>,
    /// `R N`, per angle.
    pub projections: Sinogram<T>,
    /// `exp(-i k R N)` on the projection grid, per angle.
    pub transmission: Vec<Vec<Complex<T>>>,
    /// Total field on the propagation grid, per angle.
    pub fields: Vec<Vec<Complex<T>>>,
}

impl<T: Real> ForwardModel<T> {
    /// Padding by `pad_factor` on both axes; the detector sees the whole
    /// padded grid.
    pub fn new(mode: Propagation, projector: SparseProjector<T>, pad_factor: usize) -> Result<Self> {
        let pad = PadSpec::factor(projector.grid.my, projector.n_det, pad_factor)?;
        let detector = PadSpec::identity(pad.pad_ny, pad.pad_nx)?;
        Self::with_geometry(mode, projector, pad, detector)
    }

    pub fn with_geometry(mode: Propagation, projector: SparseProjector<T>, pad: PadSpec, detector: PadSpec) -> Result<Self> {
        if pad.ny != projector.grid.my || pad.nx != projector.n_det {
            return shape_err(format!(
                "pad input {}x{} does not match projections {}x{}",
                pad.ny, pad.nx, projector.grid.my, projector.n_det
            ));
        }
        if detector.pad_ny != pad.pad_ny || detector.pad_nx != pad.pad_nx {
            return shape_err("detector window must live on the propagation grid");
        }
        if let Propagation::Near { nf } = mode {
            if !(nf > 0.0) {
                return param_err(format!("Fresnel number must be positive, got {nf}"));
            }
        }
        let propagator = Propagator::new(mode, pad.pad_ny, pad.pad_nx)?;
        Ok(ForwardModel { mode, projector, pad, detector, probe: Probe::Unit, intensity_scale: 1.0, propagator })
    }

    pub fn with_intensity_scale(mut self, s: f64) -> Result<Self> {
        if !(s > 0.0 && s.is_finite()) {
            return param_err(format!("intensity scale must be positive, got {s}"));
        }
        self.intensity_scale = s;
        Ok(self)
    }

    pub fn grid(&self) -> GridSpec {
        self.projector.grid
    }

    pub fn k(&self) -> f64 {
        self.projector.grid.k
    }

    pub fn angles(&self) -> &[f64] {
        &self.projector.angles
    }

    pub fn n_angles(&self) -> usize {
        self.projector.n_angles()
    }

    /// `(ny, nx)` of one detector frame.
    pub fn detector_dims(&self) -> (usize, usize) {
        (self.detector.ny, self.detector.nx)
    }

    pub fn data_len(&self) -> usize {
        self.n_angles() * self.detector.ny * self.detector.nx
    }

    pub fn is_near_field(&self) -> bool {
        matches!(self.mode, Propagation::Near { .. })
    }

    /// Wraps a flat data-shaped vector in this model's geometry.
    pub fn data_like(&self, data: Vec<T>) -> Result<IntensityData<T>> {
        IntensityData::new(self.angles().to_vec(), self.detector.ny, self.detector.nx, data)
    }

    fn check_volume(&self, v: &ObjectVolume<T>) -> Result<()> {
        let (g, p) = (v.grid, self.grid());
        if g.mx != p.mx || g.my != p.my || g.mz != p.mz {
            return shape_err(format!(
                "volume {}x{}x{} does not match model grid {}x{}x{}",
                g.my, g.mx, g.mz, p.my, p.mx, p.mz
            ));
        }
        Ok(())
    }

    pub fn linearize(&self, volume: &ObjectVolume<T>) -> Result<LinearizationPoint<T>> {
        self.check_volume(volume)?;
        let projections = radon_apply(&self.projector, volume)?;
        let k = self.k();
        let near = self.is_near_field();
        let (transmission, fields): (Vec<_>, Vec<_>) = (0..self.n_angles())
            .into_par_iter()
            .map(|a| {
                let o0 = otf0(projections.projection(a), k);
                let one = Complex::new(T::one(), T::zero());
                let e: Vec<_> = o0.iter().map(|v| v + one).collect();
                let mut psi = vec![Complex::default(); self.pad.padded_len()];
                self.pad.pad_into(&o0, &mut psi);
                self.propagator.apply(&mut psi);
                if near {
                    psi.iter_mut().for_each(|v| *v += one);
                }
                (e, psi)
            })
            .unzip();
        Ok(LinearizationPoint { volume: volume.clone(), projections, transmission, fields })
    }

    /// Intensities of the cached fields.
    pub fn intensity(&self, lin: &LinearizationPoint<T>) -> Result<IntensityData<T>> {
        let s = T::of(self.intensity_scale);
        let fl = self.detector.ny * self.detector.nx;
        let mut out = vec![T::zero(); self.data_len()];
        out.par_chunks_mut(fl).zip(&lin.fields).for_each(|(dst, psi)| {
            let sq: Vec<T> = psi.iter().map(|v| v.norm_sqr() * s).collect();
            self.detector.truncate_into(&sq, dst);
        });
        self.data_like(out)
    }

    pub fn forward(&self, volume: &ObjectVolume<T>) -> Result<IntensityData<T>> {
        self.intensity(&self.linearize(volume)?)
    }

    /// `F'(N) h`, flattened like the data.
    pub fn derivative_apply(&self, lin: &LinearizationPoint<T>, h: &ObjectVolume<T>) -> Result<Vec<T>> {
        self.check_volume(h)?;
        let rh = radon_apply(&self.projector, h)?;
        let mik = Complex::new(T::zero(), -T::of(self.k()));
        let s2 = T::of(2.0 * self.intensity_scale);
        let fl = self.detector.ny * self.detector.nx;
        let mut out = vec![T::zero(); self.data_len()];
        out.par_chunks_mut(fl).enumerate().for_each(|(a, dst)| {
            let e = &lin.transmission[a];
            let d: Vec<_> = rh.projection(a).iter().zip(e).map(|(r, e)| r * e * mik).collect();
            let mut buf = vec![Complex::default(); self.pad.padded_len()];
            self.pad.pad_into(&d, &mut buf);
            self.propagator.apply(&mut buf);
            let re: Vec<T> = buf.iter().zip(&lin.fields[a]).map(|(b, p)| (p.conj() * b).re * s2).collect();
            self.detector.truncate_into(&re, dst);
        });
        Ok(out)
    }

    /// `F'(N)^* g` with respect to the plain (unweighted) inner products.
    pub fn derivative_adjoint_apply(&self, lin: &LinearizationPoint<T>, g: &[T]) -> Result<ObjectVolume<T>> {
        if g.len() != self.data_len() {
            return shape_err(format!("data vector has {} entries, model needs {}", g.len(), self.data_len()));
        }
        let grid = self.grid();
        let ik = Complex::new(T::zero(), T::of(self.k()));
        let s2 = T::of(2.0 * self.intensity_scale);
        let fl = self.detector.ny * self.detector.nx;
        let mut sino = Sinogram::zeros(self.n_angles(), grid.my, self.projector.n_det);
        let plen = grid.my * self.projector.n_det;
        sino.data.par_chunks_mut(plen).enumerate().for_each(|(a, dst)| {
            let mut gp = vec![T::zero(); self.detector.padded_len()];
            self.detector.pad_into(&g[a * fl..(a + 1) * fl], &mut gp);
            let mut buf: Vec<Complex<T>> = lin.fields[a].iter().zip(&gp).map(|(p, &w)| p * (w * s2)).collect();
            self.propagator.adjoint(&mut buf);
            self.pad.truncate_into(&buf, dst);
            for (v, e) in dst.iter_mut().zip(&lin.transmission[a]) {
                *v = *v * e.conj() * ik;
            }
        });
        radon_adjoint(&self.projector, &sino, grid)
    }

    /// Weak-object (CTF) intensities: per angle,
    /// `F(I - 1) = -2k [sin(chi) F(p_delta) + cos(chi) F(p_beta)]` with
    /// `chi = pi |xi'|^2 / nf` on the propagation grid.
    pub fn ctf_forward(&self, volume: &ObjectVolume<T>) -> Result<IntensityData<T>> {
        let nf = match self.mode {
            Propagation::Near { nf } => nf,
            Propagation::Far => return param_err("the CTF model is defined for the near field only"),
        };
        self.check_volume(volume)?;
        let proj = radon_apply(&self.projector, volume)?;
        let (py, px) = (self.pad.pad_ny, self.pad.pad_nx);
        let (sin_m, cos_m) = ctf_multipliers(nf, py, px);
        let fft = Fft2::<T>::new(py, px);
        let k2 = T::of(-2.0 * self.k());
        let s = T::of(self.intensity_scale);
        let fl = self.detector.ny * self.detector.nx;
        let mut out = vec![T::zero(); self.data_len()];
        out.par_chunks_mut(fl).enumerate().for_each(|(a, dst)| {
            // delta and beta projections as two real fields
            let pd: Vec<Complex<T>> = proj.projection(a).iter().map(|p| Complex::new(p.re, T::zero())).collect();
            let pb: Vec<Complex<T>> = proj.projection(a).iter().map(|p| Complex::new(-p.im, T::zero())).collect();
            let mut fd = vec![Complex::default(); py * px];
            let mut fb = vec![Complex::default(); py * px];
            self.pad.pad_into(&pd, &mut fd);
            self.pad.pad_into(&pb, &mut fb);
            fft.forward(&mut fd);
            fft.forward(&mut fb);
            for i in 0..py * px {
                fd[i] = (fd[i] * T::of(sin_m[i]) + fb[i] * T::of(cos_m[i])) * k2;
            }
            fft.inverse(&mut fd);
            let full: Vec<T> = fd.iter().map(|v| (T::one() + v.re) * s).collect();
            self.detector.truncate_into(&full, dst);
        });
        self.data_like(out)
    }
}

/// `(sin(chi), cos(chi))` with `chi = pi |xi'|^2 / nf`, `xi' = j/n` per axis.
pub fn ctf_multipliers(nf: f64, ny: usize, nx: usize) -> (Vec<f64>, Vec<f64>) {
    let mut s = vec![0.0; ny * nx];
    let mut c = vec![1.0; ny * nx];
    if nf.is_finite() {
        for y in 0..ny {
            let fy = freq_index(y, ny) as f64 / ny as f64;
            for x in 0..nx {
                let fx = freq_index(x, nx) as f64 / nx as f64;
                let chi = std::f64::consts::PI * (fx * fx + fy * fy) / nf;
                s[y * nx + x] = chi.sin();
                c[y * nx + x] = chi.cos();
            }
        }
    }
    (s, c)
}
