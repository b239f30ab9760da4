//! Object and data space inner products, and linear constraints.
//!
//! The object Gramian is a Fourier multiplier `(1 + |xi|^2)^s` (with
//! `xi_j = 2 pi j / n` per axis) combined with a diagonal weight on the
//! absorption part. The data Gramian is a diagonal weight.

use num_complex::Complex;

use crate::error::{param_err, shape_err, Result};
use crate::grids::{Array, GridSpec, ObjectVolume};
use crate::transforms::{freq_index, Fft3};
use crate::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ObjectGramianKind {
    Identity,
    Sobolev { s: f64 },
}

#[derive(Clone)]
pub struct ObjectGramian<T: Real> {
    pub kind: ObjectGramianKind,
    pub grid: GridSpec,
    /// Weight on the `beta` (negative imaginary) part; the norm of `delta - i beta`
    /// is that of `delta` plus `beta_weight^2` times that of `beta`.
    pub beta_weight: f64,
    multiplier: Option<Vec<T>>,
    fft: Option<Fft3<T>>,
}

impl<T: Real> ObjectGramian<T> {
    pub fn identity(grid: GridSpec) -> Self {
        ObjectGramian { kind: ObjectGramianKind::Identity, grid, beta_weight: 1.0, multiplier: None, fft: None }
    }

    pub fn new(grid: GridSpec, kind: ObjectGramianKind) -> Result<Self> {
        match kind {
            ObjectGramianKind::Identity => Ok(Self::identity(grid)),
            ObjectGramianKind::Sobolev { s } => {
                if !(s >= 0.0 && s.is_finite()) {
                    return param_err(format!("Sobolev index must be >= 0, got {s}"));
                }
                if s == 0.0 {
                    return Ok(ObjectGramian { kind, ..Self::identity(grid) });
                }
                let (my, mx, mz) = (grid.my, grid.mx, grid.mz);
                let xi = |i: usize, n: usize| 2.0 * std::f64::consts::PI * freq_index(i, n) as f64 / n as f64;
                let mut m = Vec::with_capacity(grid.len());
                for y in 0..my {
                    for x in 0..mx {
                        for z in 0..mz {
                            let r2 = xi(y, my).powi(2) + xi(x, mx).powi(2) + xi(z, mz).powi(2);
                            m.push(T::of((1.0 + r2).powf(s)));
                        }
                    }
                }
                Ok(ObjectGramian { kind, grid, beta_weight: 1.0, multiplier: Some(m), fft: Some(Fft3::new(my, mx, mz)) })
            }
        }
    }

    pub fn with_beta_weight(mut self, w: f64) -> Result<Self> {
        if !(w > 0.0 && w.is_finite()) {
            return param_err(format!("beta weight must be positive, got {w}"));
        }
        self.beta_weight = w;
        Ok(self)
    }

    fn check(&self, v: &ObjectVolume<T>) -> Result<()> {
        if v.data.len() != self.grid.len() {
            return shape_err("volume does not match Gramian grid");
        }
        Ok(())
    }

    fn multiply(&self, v: &ObjectVolume<T>, inverse: bool) -> Result<ObjectVolume<T>> {
        self.check(v)?;
        let mut out = v.clone();
        if let (Some(m), Some(fft)) = (&self.multiplier, &self.fft) {
            fft.forward(&mut out.data);
            for (o, &m) in out.data.iter_mut().zip(m) {
                *o = if inverse { *o / m } else { *o * m };
            }
            fft.inverse(&mut out.data);
        }
        if self.beta_weight != 1.0 {
            let w2 = T::of(self.beta_weight * self.beta_weight);
            for o in out.data.iter_mut() {
                o.im = if inverse { o.im / w2 } else { o.im * w2 };
            }
        }
        Ok(out)
    }

    pub fn apply(&self, v: &ObjectVolume<T>) -> Result<ObjectVolume<T>> {
        self.multiply(v, false)
    }

    pub fn apply_inverse(&self, v: &ObjectVolume<T>) -> Result<ObjectVolume<T>> {
        self.multiply(v, true)
    }

    /// `<a, G b>`.
    pub fn inner(&self, a: &ObjectVolume<T>, b: &ObjectVolume<T>) -> Result<f64> {
        let gb = self.apply(b)?;
        crate::grids::inner_product(&a.data, &gb.data)
    }

    pub fn norm_sq(&self, v: &ObjectVolume<T>) -> Result<f64> {
        self.inner(v, v)
    }
}

/// Diagonal data-space weight. `None` means the plain Euclidean product.
#[derive(Clone, Debug)]
pub struct DataGramian<T> {
    pub poisson: Option<f64>,
    weights: Option<Vec<T>>,
}

impl<T: Real> DataGramian<T> {
    pub fn identity() -> Self {
        DataGramian { poisson: None, weights: None }
    }

    /// Weights `1 / max(I_err, i_min)`.
    pub fn poisson(i_err: &[T], i_min: f64) -> Result<Self> {
        if !(i_min > 0.0 && i_min.is_finite()) {
            return param_err(format!("i_min must be positive, got {i_min}"));
        }
        let lo = T::of(i_min);
        let w = i_err.iter().map(|&v| T::one() / v.max(lo)).collect();
        Ok(DataGramian { poisson: Some(i_min), weights: Some(w) })
    }

    /// Multiplies the weights by a binary mask.
    pub fn with_mask(mut self, mask: &[T]) -> Result<Self> {
        if mask.iter().any(|&m| m != T::zero() && m != T::one()) {
            return param_err("mask weights must be 0 or 1");
        }
        match &mut self.weights {
            Some(w) => {
                if w.len() != mask.len() {
                    return shape_err("mask does not match data");
                }
                w.iter_mut().zip(mask).for_each(|(w, m)| *w *= *m);
            }
            None => self.weights = Some(mask.to_vec()),
        }
        Ok(self)
    }

    pub fn weights(&self) -> Option<&[T]> {
        self.weights.as_deref()
    }

    pub fn apply(&self, data: &[T]) -> Result<Vec<T>> {
        match &self.weights {
            None => Ok(data.to_vec()),
            Some(w) => {
                if w.len() != data.len() {
                    return shape_err(format!("data has {} entries, weights {}", data.len(), w.len()));
                }
                Ok(data.iter().zip(w).map(|(d, w)| *d * *w).collect())
            }
        }
    }

    pub fn inner(&self, a: &[T], b: &[T]) -> Result<f64> {
        if a.len() != b.len() {
            return shape_err("data vectors differ in length");
        }
        Ok(match &self.weights {
            None => crate::grids::dot_r(a, b),
            Some(w) => {
                if w.len() != a.len() {
                    return shape_err("weights do not match data");
                }
                a.iter().zip(b).zip(w).map(|((x, y), w)| x.f64() * y.f64() * w.f64()).sum()
            }
        })
    }

    pub fn norm_sq(&self, a: &[T]) -> Result<f64> {
        self.inner(a, a)
    }
}

/// Linear constraint `N = embed(r)` on the unknown.
///
/// The reduced variable is stored as a complex volume; under a material
/// constraint its imaginary part is zero and `N = c * Re(r)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Constraint {
    pub support: Option<Vec<bool>>,
    pub material: Option<Complex<f64>>,
}

impl Constraint {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn pure_phase() -> Self {
        Constraint { support: None, material: Some(Complex::new(1.0, 0.0)) }
    }

    pub fn single_material(c: Complex<f64>) -> Result<Self> {
        if c.norm() == 0.0 || !c.re.is_finite() || !c.im.is_finite() {
            return param_err("material constant must be finite and nonzero");
        }
        Ok(Constraint { support: None, material: Some(c) })
    }

    pub fn with_support(mut self, mask: Vec<bool>) -> Self {
        self.support = Some(mask);
        self
    }

    /// Support mask from a real array, thresholded at 0.5.
    pub fn support_from_array(array: Array, grid: GridSpec) -> Result<Vec<bool>> {
        let (shape, data) = array.into_real()?;
        if shape != [grid.my, grid.mx, grid.mz] {
            return shape_err(format!("support mask shape {shape:?} does not match grid"));
        }
        Ok(data.into_iter().map(|v| v > 0.5).collect())
    }

    fn check<T>(&self, v: &ObjectVolume<T>) -> Result<()> {
        if let Some(m) = &self.support {
            if m.len() != v.data.len() {
                return shape_err("support mask does not match volume");
            }
        }
        Ok(())
    }

    pub fn embed<T: Real>(&self, r: &ObjectVolume<T>) -> Result<ObjectVolume<T>> {
        self.check(r)?;
        let mut out = r.clone();
        if let Some(c) = self.material {
            let c = Complex::new(T::of(c.re), T::of(c.im));
            out.data.iter_mut().for_each(|v| *v = c * v.re);
        }
        if let Some(m) = &self.support {
            out.data.iter_mut().zip(m).filter(|(_, &m)| !m).for_each(|(v, _)| *v = Complex::default());
        }
        Ok(out)
    }

    pub fn adjoint<T: Real>(&self, v: &ObjectVolume<T>) -> Result<ObjectVolume<T>> {
        self.check(v)?;
        let mut out = v.clone();
        if let Some(m) = &self.support {
            out.data.iter_mut().zip(m).filter(|(_, &m)| !m).for_each(|(v, _)| *v = Complex::default());
        }
        if let Some(c) = self.material {
            let cc = Complex::new(T::of(c.re), -T::of(c.im));
            out.data.iter_mut().for_each(|v| *v = Complex::new((cc * *v).re, T::zero()));
        }
        Ok(out)
    }

    /// Orthogonal projection onto the range of `embed`.
    pub fn projection<T: Real>(&self, v: &ObjectVolume<T>) -> Result<ObjectVolume<T>> {
        let mut p = self.embed(&self.adjoint(v)?)?;
        if let Some(c) = self.material {
            let s = T::of(1.0 / c.norm_sqr());
            p.data.iter_mut().for_each(|v| *v = *v * s);
        }
        Ok(p)
    }

    /// Reduced variable whose embedding is closest to `v`.
    pub fn reduce<T: Real>(&self, v: &ObjectVolume<T>) -> Result<ObjectVolume<T>> {
        let mut r = self.adjoint(v)?;
        if let Some(c) = self.material {
            let s = T::of(1.0 / c.norm_sqr());
            r.data.iter_mut().for_each(|v| *v = *v * s);
        }
        Ok(r)
    }

    pub fn is_none(&self) -> bool {
        self.support.is_none() && self.material.is_none()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grids::inner_product;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn rand_vol(g: GridSpec, seed: u64) -> ObjectVolume<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        ObjectVolume::from_data(g, (0..g.len()).map(|_| Complex::new(r.random::<f64>() - 0.5, r.random::<f64>() - 0.5)).collect()).unwrap()
    }

    fn close(a: &ObjectVolume<f64>, b: &ObjectVolume<f64>, tol: f64) -> bool {
        a.data.iter().zip(&b.data).all(|(x, y)| (x - y).norm() <= tol)
    }

    #[test]
    fn zero_index_is_identity() {
        let g = GridSpec::new(6, 4, 5).unwrap();
        let v = rand_vol(g, 1);
        let gx = ObjectGramian::new(g, ObjectGramianKind::Sobolev { s: 0.0 }).unwrap();
        assert!(close(&gx.apply_inverse(&v).unwrap(), &v, 1e-14));
    }

    #[test]
    fn constant_volume_is_fixed() {
        let g = GridSpec::cube(6).unwrap();
        let v = ObjectVolume::from_data(g, vec![Complex::new(0.7, -0.2); g.len()]).unwrap();
        let gx = ObjectGramian::new(g, ObjectGramianKind::Sobolev { s: 1.3 }).unwrap();
        assert!(close(&gx.apply_inverse(&v).unwrap(), &v, 1e-13));
    }

    #[test]
    fn highest_mode_factor() {
        let g = GridSpec::cube(8).unwrap();
        let mut v = ObjectVolume::<f64>::zeros(g);
        for y in 0..8 {
            for x in 0..8 {
                for z in 0..8 {
                    v.set(y, x, z, Complex::new(if (x + y + z) % 2 == 0 { 1.0 } else { -1.0 }, 0.0));
                }
            }
        }
        let gx = ObjectGramian::new(g, ObjectGramianKind::Sobolev { s: 1.0 }).unwrap();
        let want = v.scaled(1.0 / (1.0 + 3.0 * PI * PI));
        assert!(close(&gx.apply_inverse(&v).unwrap(), &want, 1e-14));
    }

    #[test]
    fn gramian_round_trip_and_beta_weight() {
        let g = GridSpec::new(5, 4, 6).unwrap();
        let gx = ObjectGramian::new(g, ObjectGramianKind::Sobolev { s: 0.5 }).unwrap().with_beta_weight(10.0).unwrap();
        let v = rand_vol(g, 2);
        assert!(close(&gx.apply_inverse(&gx.apply(&v).unwrap()).unwrap(), &v, 1e-12));
        let id = ObjectGramian::identity(g).with_beta_weight(10.0).unwrap();
        let b = ObjectVolume::from_data(g, vec![Complex::new(0.0, 1.0); g.len()]).unwrap();
        assert!((id.norm_sq(&b).unwrap() - 100.0 * g.len() as f64).abs() < 1e-9);
        assert!(ObjectGramian::<f64>::new(g, ObjectGramianKind::Sobolev { s: -1.0 }).is_err());
    }

    #[test]
    fn inverse_is_symmetric_and_positive() {
        let g = GridSpec::new(6, 5, 4).unwrap();
        let gx = ObjectGramian::new(g, ObjectGramianKind::Sobolev { s: 0.7 }).unwrap().with_beta_weight(3.0).unwrap();
        for seed in 0..5 {
            let a = rand_vol(g, seed);
            let b = rand_vol(g, seed + 100);
            let l = inner_product(&a.data, &gx.apply_inverse(&b).unwrap().data).unwrap();
            let r = inner_product(&gx.apply_inverse(&a).unwrap().data, &b.data).unwrap();
            assert!((l - r).abs() < 1e-12);
            assert!(inner_product(&a.data, &gx.apply_inverse(&a).unwrap().data).unwrap() > 0.0);
        }
    }

    #[test]
    fn data_gramian_examples() {
        let p = DataGramian::<f64>::poisson(&[4.0, 0.0], 1.0).unwrap();
        assert_eq!(p.weights().unwrap(), &[0.25, 1.0]);
        let id = DataGramian::<f64>::identity();
        assert_eq!(id.apply(&[1.0, -2.0]).unwrap(), vec![1.0, -2.0]);
        let m = DataGramian::identity().with_mask(&[1.0, 0.0, 1.0]).unwrap();
        assert_eq!(m.apply(&[5.0, 7.0, 9.0]).unwrap(), vec![5.0, 0.0, 9.0]);
        assert!(DataGramian::<f64>::poisson(&[1.0], 0.0).is_err());
        assert!(DataGramian::<f64>::identity().with_mask(&[0.5]).is_err());
    }

    #[test]
    fn embed_examples() {
        let g = GridSpec::new(2, 1, 2).unwrap();
        let r = ObjectVolume::from_real(g, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let n = Constraint::pure_phase().embed(&r).unwrap();
        assert!(n.data.iter().zip(&r.data).all(|(a, b)| a.re == b.re && a.im == 0.0));
        let c = Constraint::single_material(Complex::new(1.0, -0.1)).unwrap();
        let one = ObjectVolume::from_real(g, &[1.0; 4]).unwrap();
        assert!(c.embed(&one).unwrap().data.iter().all(|v| (v - Complex::new(1.0, -0.1)).norm() < 1e-15));
        assert!(Constraint::single_material(Complex::new(0.0, 0.0)).is_err());
    }

    fn constraints(g: GridSpec) -> Vec<Constraint> {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let mask: Vec<bool> = (0..g.len()).map(|_| r.random::<f64>() < 0.6).collect();
        let c = Complex::new(0.8, -0.35);
        vec![
            Constraint::none(),
            Constraint::pure_phase(),
            Constraint::single_material(c).unwrap(),
            Constraint::none().with_support(mask.clone()),
            Constraint::single_material(c).unwrap().with_support(mask),
        ]
    }

    #[test]
    fn embed_adjoint_pair_and_projection() {
        let g = GridSpec::new(4, 3, 5).unwrap();
        for (i, c) in constraints(g).iter().enumerate() {
            let r = c.adjoint(&rand_vol(g, 40 + i as u64)).unwrap();
            let v = rand_vol(g, 80 + i as u64);
            let l = inner_product(&c.embed(&r).unwrap().data, &v.data).unwrap();
            let rr = inner_product(&r.data, &c.adjoint(&v).unwrap().data).unwrap();
            assert!((l - rr).abs() < 1e-12, "constraint {i}");
            let p = c.projection(&v).unwrap();
            assert!(close(&c.projection(&p).unwrap(), &p, 1e-14), "constraint {i}");
            assert!(close(&c.embed(&c.reduce(&p).unwrap()).unwrap(), &p, 1e-14));
        }
    }

    #[test]
    fn support_and_material_projections_commute() {
        let g = GridSpec::new(4, 3, 5).unwrap();
        let cs = constraints(g);
        let (mat, sup) = (&cs[2], &cs[3]);
        for seed in 0..4 {
            let v = rand_vol(g, seed);
            let a = mat.projection(&sup.projection(&v).unwrap()).unwrap();
            let b = sup.projection(&mat.projection(&v).unwrap()).unwrap();
            assert!(close(&a, &b, 1e-14));
        }
    }

    #[test]
    fn support_from_threshold() {
        let g = GridSpec::new(2, 1, 2).unwrap();
        let a = Array::real(vec![1, 2, 2], vec![0.2, 0.5, 0.51, 1.0]).unwrap();
        assert_eq!(Constraint::support_from_array(a, g).unwrap(), vec![false, false, true, true]);
    }

    proptest! {
        #[test]
        fn gramian_inverse_contracts(seed in any::<u64>(), s in 0.0f64..2.0) {
            let g = GridSpec::new(4, 3, 4).unwrap();
            let gx = ObjectGramian::new(g, ObjectGramianKind::Sobolev { s }).unwrap();
            let v = rand_vol(g, seed);
            let w = gx.apply_inverse(&v).unwrap();
            prop_assert!(w.norm() <= v.norm() * (1.0 + 1e-12));
        }

        #[test]
        fn poisson_weights_bounded(vals in proptest::collection::vec(0.0f64..100.0, 1..50), i_min in 0.01f64..10.0) {
            let p = DataGramian::<f64>::poisson(&vals, i_min).unwrap();
            prop_assert!(p.weights().unwrap().iter().all(|&w| w > 0.0 && w <= 1.0 / i_min));
        }
    }
}
