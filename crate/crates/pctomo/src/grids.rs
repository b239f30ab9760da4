//! Array types, the PCT1 container format and graymap output.
//!
//! Volumes are stored as `(my, mx, mz)` with `y` the rotation axis, so a
//! single `y` index selects one tomographic slice in the `x`-`z` plane.
//! Reductions (inner products, norms) always accumulate in `f64`.

use std::fs;
use std::io::Write;
use std::path::Path;

use num_complex::Complex;

use crate::error::{param_err, shape_err, Error, Result};
use crate::Real;

/// Voxel grid plus the two physical scales that enter the model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub mx: usize,
    pub my: usize,
    pub mz: usize,
    /// Voxel edge length.
    pub dx: f64,
    /// Wavenumber.
    pub k: f64,
}

impl GridSpec {
    pub fn new(mx: usize, my: usize, mz: usize) -> Result<Self> {
        Self::with_scales(mx, my, mz, 1.0, 1.0)
    }

    pub fn with_scales(mx: usize, my: usize, mz: usize, dx: f64, k: f64) -> Result<Self> {
        if mx == 0 || my == 0 || mz == 0 {
            return param_err(format!("grid dims must be >= 1, got {mx}x{my}x{mz}"));
        }
        if !(dx > 0.0 && dx.is_finite()) || !(k > 0.0 && k.is_finite()) {
            return param_err(format!("dx and k must be positive, got dx={dx}, k={k}"));
        }
        Ok(GridSpec { mx, my, mz, dx, k })
    }

    pub fn cube(n: usize) -> Result<Self> {
        Self::new(n, n, n)
    }

    /// Object thickness `L = mx * dx`.
    pub fn thickness(&self) -> f64 {
        self.mx as f64 * self.dx
    }

    pub fn len(&self) -> usize {
        self.mx * self.my * self.mz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slice_len(&self) -> usize {
        self.mx * self.mz
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, z: usize) -> usize {
        (y * self.mx + x) * self.mz + z
    }
}

/// Complex refractive decrement `N = delta - i beta` sampled on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectVolume<T> {
    pub grid: GridSpec,
    pub data: Vec<Complex<T>>,
}

impl<T: Real> ObjectVolume<T> {
    pub fn zeros(grid: GridSpec) -> Self {
        ObjectVolume { grid, data: vec![Complex::default(); grid.len()] }
    }

    pub fn from_data(grid: GridSpec, data: Vec<Complex<T>>) -> Result<Self> {
        if data.len() != grid.len() {
            return shape_err(format!("volume data has {} entries, grid needs {}", data.len(), grid.len()));
        }
        Ok(ObjectVolume { grid, data })
    }

    pub fn from_real(grid: GridSpec, re: &[T]) -> Result<Self> {
        Self::from_data(grid, re.iter().map(|&r| Complex::new(r, T::zero())).collect())
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, z: usize) -> Complex<T> {
        self.data[self.grid.index(y, x, z)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, z: usize, v: Complex<T>) {
        let i = self.grid.index(y, x, z);
        self.data[i] = v;
    }

    pub fn norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn scaled(&self, s: T) -> Self {
        ObjectVolume { grid: self.grid, data: self.data.iter().map(|v| v * s).collect() }
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if self.grid.mx != other.grid.mx || self.grid.my != other.grid.my || self.grid.mz != other.grid.mz {
            return shape_err("volume grids differ");
        }
        Ok(())
    }

    /// `self - other`.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.same_shape(other)?;
        Ok(ObjectVolume {
            grid: self.grid,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    /// Relative L2 distance `||self - truth|| / ||truth||`.
    pub fn relative_error(&self, truth: &Self) -> Result<f64> {
        let diff = self.sub(truth)?;
        let t = truth.norm();
        if t == 0.0 {
            return param_err("reference volume has zero norm");
        }
        Ok(diff.norm() / t)
    }

    pub fn to_f64(&self) -> ObjectVolume<f64> {
        ObjectVolume {
            grid: self.grid,
            data: self.data.iter().map(|v| Complex::new(v.re.f64(), v.im.f64())).collect(),
        }
    }

    pub fn from_f64(v: &ObjectVolume<f64>) -> Self {
        ObjectVolume { grid: v.grid, data: v.data.iter().map(|c| Complex::new(T::of(c.re), T::of(c.im))).collect() }
    }
}

/// Intensities over `(angle, detector-y, detector-x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct IntensityData<T> {
    pub angles: Vec<f64>,
    pub ny: usize,
    pub nx: usize,
    pub data: Vec<T>,
    /// Per-entry fit weights, `1` fitted and `0` masked.
    pub weights: Option<Vec<T>>,
}

impl<T: Real> IntensityData<T> {
    pub fn new(angles: Vec<f64>, ny: usize, nx: usize, data: Vec<T>) -> Result<Self> {
        validate_angles(&angles)?;
        if ny == 0 || nx == 0 {
            return param_err("detector dims must be positive");
        }
        if data.len() != angles.len() * ny * nx {
            return shape_err(format!(
                "intensity data has {} entries, expected {}x{}x{}",
                data.len(),
                angles.len(),
                ny,
                nx
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("intensity entry {i}")));
        }
        Ok(IntensityData { angles, ny, nx, data, weights: None })
    }

    pub fn filled(angles: Vec<f64>, ny: usize, nx: usize, value: T) -> Result<Self> {
        let n = angles.len() * ny * nx;
        Self::new(angles, ny, nx, vec![value; n])
    }

    pub fn with_weights(mut self, weights: Vec<T>) -> Result<Self> {
        if weights.len() != self.data.len() {
            return shape_err("weights must match data shape");
        }
        if weights.iter().any(|w| !(*w >= T::zero()) || !w.is_finite()) {
            return param_err("weights must be finite and nonnegative");
        }
        self.weights = Some(weights);
        Ok(self)
    }

    pub fn n_angles(&self) -> usize {
        self.angles.len()
    }

    pub fn frame_len(&self) -> usize {
        self.ny * self.nx
    }

    pub fn frame(&self, a: usize) -> &[T] {
        let n = self.frame_len();
        &self.data[a * n..(a + 1) * n]
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if self.ny != other.ny || self.nx != other.nx || self.angles.len() != other.angles.len() {
            return shape_err("intensity arrays differ in shape");
        }
        Ok(())
    }

    /// Same geometry with new values and no weights.
    pub fn like(&self, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        IntensityData { angles: self.angles.clone(), ny: self.ny, nx: self.nx, data, weights: None }
    }

    pub fn norm(&self) -> f64 {
        norm_real(&self.data)
    }
}

fn validate_angles(angles: &[f64]) -> Result<()> {
    if angles.is_empty() {
        return param_err("angle list is empty");
    }
    let two_pi = 2.0 * std::f64::consts::PI;
    for w in angles.windows(2) {
        if !(w[1] > w[0]) {
            return param_err("angles must be strictly increasing");
        }
    }
    if angles.iter().any(|&a| !(0.0..two_pi).contains(&a)) {
        return param_err("angles must lie in [0, 2pi)");
    }
    Ok(())
}

/// Complex lateral field on a `(ny, nx)` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexField<T> {
    pub ny: usize,
    pub nx: usize,
    pub data: Vec<Complex<T>>,
}

impl<T: Real> ComplexField<T> {
    pub fn zeros(ny: usize, nx: usize) -> Self {
        ComplexField { ny, nx, data: vec![Complex::default(); ny * nx] }
    }

    pub fn from_data(ny: usize, nx: usize, data: Vec<Complex<T>>) -> Result<Self> {
        if ny == 0 || nx == 0 || data.len() != ny * nx {
            return shape_err(format!("field of {} entries cannot be {ny}x{nx}", data.len()));
        }
        Ok(ComplexField { ny, nx, data })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> Complex<T> {
        self.data[y * self.nx + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: Complex<T>) {
        self.data[y * self.nx + x] = v;
    }

    pub fn norm(&self) -> f64 {
        norm(&self.data)
    }
}

/// `Re sum conj(a_i) b_i`.
pub fn inner_product<T: Real>(a: &[Complex<T>], b: &[Complex<T>]) -> Result<f64> {
    if a.len() != b.len() {
        return shape_err(format!("inner product of lengths {} and {}", a.len(), b.len()));
    }
    Ok(dot_c(a, b))
}

#[inline]
pub(crate) fn dot_c<T: Real>(a: &[Complex<T>], b: &[Complex<T>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.re.f64() * y.re.f64() + x.im.f64() * y.im.f64()).sum()
}

#[inline]
pub(crate) fn dot_r<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.f64() * y.f64()).sum()
}

pub fn real_inner_product<T: Real>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return shape_err(format!("inner product of lengths {} and {}", a.len(), b.len()));
    }
    Ok(dot_r(a, b))
}

pub fn norm<T: Real>(a: &[Complex<T>]) -> f64 {
    dot_c(a, a).sqrt()
}

pub fn norm_real<T: Real>(a: &[T]) -> f64 {
    dot_r(a, a).sqrt()
}

// ---------------------------------------------------------------------------
// PCT1 container

const MAGIC: &[u8; 4] = b"PCT1";
const MAX_DIMS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    Real64 = 0,
    Complex128 = 1,
}

impl Dtype {
    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Dtype::Real64),
            1 => Ok(Dtype::Complex128),
            other => Err(Error::UnknownDtype(other)),
        }
    }

    fn elem_bytes(self) -> usize {
        match self {
            Dtype::Real64 => 8,
            Dtype::Complex128 => 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    Real(Vec<f64>),
    Complex(Vec<Complex<f64>>),
}

/// N-dimensional array as stored in a PCT1 file (row-major, last axis fastest).
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl Array {
    pub fn real(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        Ok(Array { shape, data: ArrayData::Real(data) })
    }

    pub fn complex(shape: Vec<usize>, data: Vec<Complex<f64>>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        Ok(Array { shape, data: ArrayData::Complex(data) })
    }

    pub fn dtype(&self) -> Dtype {
        match self.data {
            ArrayData::Real(_) => Dtype::Real64,
            ArrayData::Complex(_) => Dtype::Complex128,
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(6 + 8 * self.shape.len() + self.len() * self.dtype().elem_bytes());
        out.extend_from_slice(MAGIC);
        out.push(self.dtype() as u8);
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            ArrayData::Real(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::Complex(v) => v.iter().for_each(|c| {
                out.extend_from_slice(&c.re.to_le_bytes());
                out.extend_from_slice(&c.im.to_le_bytes());
            }),
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 4 || &buf[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        if buf.len() < 6 {
            return Err(Error::Truncated { expected: 6, found: buf.len() });
        }
        let dtype = Dtype::from_code(buf[4])?;
        let ndim = buf[5] as usize;
        if ndim > MAX_DIMS {
            return param_err(format!("PCT1 arrays have at most {MAX_DIMS} dims, file has {ndim}"));
        }
        let header = 6 + 8 * ndim;
        if buf.len() < header {
            return Err(Error::Truncated { expected: header, found: buf.len() });
        }
        let shape: Vec<usize> = (0..ndim)
            .map(|i| {
                let b: [u8; 8] = buf[6 + 8 * i..14 + 8 * i].try_into().expect("8 bytes");
                u64::from_le_bytes(b) as usize
            })
            .collect();
        let count: usize = shape.iter().product();
        let expected = header + count * dtype.elem_bytes();
        if buf.len() < expected {
            return Err(Error::Truncated { expected, found: buf.len() });
        }
        let payload = &buf[header..expected];
        let f = |c: &[u8]| f64::from_le_bytes(c.try_into().expect("8 bytes"));
        let data = match dtype {
            Dtype::Real64 => ArrayData::Real(payload.chunks_exact(8).map(f).collect()),
            Dtype::Complex128 => ArrayData::Complex(
                payload.chunks_exact(16).map(|c| Complex::new(f(&c[..8]), f(&c[8..]))).collect(),
            ),
        };
        Ok(Array { shape, data })
    }

    pub fn into_real(self) -> Result<(Vec<usize>, Vec<f64>)> {
        match self.data {
            ArrayData::Real(v) => Ok((self.shape, v)),
            ArrayData::Complex(_) => param_err("expected a real64 array"),
        }
    }

    /// Complex view; real arrays are promoted with zero imaginary part.
    pub fn into_complex(self) -> (Vec<usize>, Vec<Complex<f64>>) {
        match self.data {
            ArrayData::Real(v) => (self.shape, v.into_iter().map(|r| Complex::new(r, 0.0)).collect()),
            ArrayData::Complex(v) => (self.shape, v),
        }
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.len() > MAX_DIMS {
        return param_err(format!("at most {MAX_DIMS} dims supported"));
    }
    if shape.iter().product::<usize>() != len {
        return shape_err(format!("shape {shape:?} does not hold {len} entries"));
    }
    Ok(())
}

pub fn write_array(path: impl AsRef<Path>, array: &Array) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&array.to_bytes())?;
    Ok(())
}

pub fn read_array(path: impl AsRef<Path>) -> Result<Array> {
    Array::from_bytes(&fs::read(path)?)
}

impl<T: Real> ObjectVolume<T> {
    pub fn to_array(&self) -> Array {
        let g = self.grid;
        let v = self.to_f64();
        Array { shape: vec![g.my, g.mx, g.mz], data: ArrayData::Complex(v.data) }
    }

    /// Reads a `(my, mx, mz)` array; `dx` and `k` come from the caller.
    pub fn from_array(array: Array, dx: f64, k: f64) -> Result<Self> {
        let (shape, data) = array.into_complex();
        if shape.len() != 3 {
            return shape_err(format!("volume arrays are 3D, got {shape:?}"));
        }
        let grid = GridSpec::with_scales(shape[1], shape[0], shape[2], dx, k)?;
        let v = ObjectVolume::<f64>::from_data(grid, data)?;
        Ok(Self::from_f64(&v))
    }
}

// ---------------------------------------------------------------------------
// Graymap output

/// Encodes a slice as an 8-bit binary PGM.
pub fn grayscale_bytes(slice: &[f64], ny: usize, nx: usize) -> Result<Vec<u8>> {
    if slice.len() != ny * nx || ny == 0 || nx == 0 {
        return shape_err(format!("slice of {} entries is not {ny}x{nx}", slice.len()));
    }
    if slice.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("graymap slice contains NaN or infinity".into()));
    }
    let lo = slice.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = slice.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{nx} {ny}\n255\n").into_bytes();
    if hi > lo {
        out.extend(slice.iter().map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8));
    } else {
        out.extend(std::iter::repeat_n(128u8, slice.len()));
    }
    Ok(out)
}

pub fn emit_grayscale(path: impl AsRef<Path>, slice: &[f64], ny: usize, nx: usize) -> Result<()> {
    let bytes = grayscale_bytes(slice, ny, nx)?;
    fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex<f64> {
        Complex::new(re, im)
    }

    #[test]
    fn inner_product_examples() {
        assert_eq!(inner_product(&[c(1.0, 0.0)], &[c(1.0, 0.0)]).unwrap(), 1.0);
        assert_eq!(inner_product(&[c(0.0, 1.0)], &[c(1.0, 0.0)]).unwrap(), 0.0);
        let v = inner_product(&[c(1.0, 2.0), c(3.0, 0.0)], &[c(2.0, 0.0), c(1.0, 1.0)]).unwrap();
        assert_eq!(v, 5.0);
        assert!(inner_product(&[c(1.0, 0.0)], &[]).is_err());
    }

    #[test]
    fn header_size_for_complex_3x4() {
        let a = Array::complex(vec![3, 4], vec![c(1.0, -1.0); 12]).unwrap();
        assert_eq!(a.to_bytes().len(), 214);
    }

    #[test]
    fn empty_one_dim_array_is_valid() {
        let a = Array::real(vec![0], vec![]).unwrap();
        let b = Array::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(b.shape, vec![0]);
        assert!(b.is_empty());
    }

    #[test]
    fn distinct_decode_errors() {
        let good = Array::real(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap().to_bytes();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(Array::from_bytes(&bad), Err(Error::BadMagic)));
        assert!(matches!(Array::from_bytes(&good[..good.len() - 3]), Err(Error::Truncated { .. })));
        let mut dt = good.clone();
        dt[4] = 7;
        assert!(matches!(Array::from_bytes(&dt), Err(Error::UnknownDtype(7))));
    }

    #[test]
    fn file_round_trip_2x2() {
        let dir = std::env::temp_dir().join(format!("pct1-rt-{}", std::process::id()));
        let a = Array::real(vec![2, 2], vec![0.1, -2.5, f64::MIN_POSITIVE, 1e300]).unwrap();
        write_array(&dir, &a).unwrap();
        let b = read_array(&dir).unwrap();
        std::fs::remove_file(&dir).ok();
        assert_eq!(a, b);
    }

    #[test]
    fn graymap_examples() {
        let px = |s: &[f64], ny, nx| {
            let b = grayscale_bytes(s, ny, nx).unwrap();
            b[b.len() - s.len()..].to_vec()
        };
        assert_eq!(px(&[0.0, 1.0], 1, 2), vec![0, 255]);
        assert_eq!(px(&[7.3; 6], 2, 3), vec![128; 6]);
        assert_eq!(px(&[0.0, 0.5, 1.0], 1, 3), vec![0, 128, 255]);
        assert!(grayscale_bytes(&[0.0, f64::NAN], 1, 2).is_err());
        let head = grayscale_bytes(&[0.0, 1.0], 1, 2).unwrap();
        assert!(head.starts_with(b"P5\n2 1\n255\n"));
    }

    #[test]
    fn grid_validation() {
        assert!(GridSpec::new(0, 1, 1).is_err());
        assert!(GridSpec::with_scales(1, 1, 1, 0.0, 1.0).is_err());
        let g = GridSpec::with_scales(4, 2, 3, 0.5, 2.0).unwrap();
        assert_eq!(g.thickness(), 2.0);
    }

    #[test]
    fn intensity_angle_validation() {
        assert!(IntensityData::<f64>::filled(vec![0.0, 0.0], 1, 1, 1.0).is_err());
        assert!(IntensityData::<f64>::filled(vec![7.0], 1, 1, 1.0).is_err());
        assert!(IntensityData::<f64>::filled(vec![0.0, 1.0], 1, 1, 1.0).is_ok());
    }

    proptest! {
        #[test]
        fn round_trip_bit_exact(
            dims in proptest::collection::vec(1usize..5, 1..=4),
            bits in proptest::collection::vec(any::<u64>(), 512),
            complex in any::<bool>(),
        ) {
            let n: usize = dims.iter().product();
            let vals: Vec<f64> = bits.iter().map(|&b| f64::from_bits(b)).collect();
            let a = if complex {
                Array::complex(dims.clone(), (0..n).map(|i| c(vals[2 * i], vals[2 * i + 1])).collect()).unwrap()
            } else {
                Array::real(dims.clone(), vals[..n].to_vec()).unwrap()
            };
            let b = Array::from_bytes(&a.to_bytes()).unwrap();
            prop_assert_eq!(a.to_bytes(), b.to_bytes());
        }

        #[test]
        fn inner_product_symmetric_bilinear(
            a in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 6),
            b in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 6),
            s in -3.0f64..3.0,
        ) {
            let a: Vec<_> = a.into_iter().map(|(r, i)| c(r, i)).collect();
            let b: Vec<_> = b.into_iter().map(|(r, i)| c(r, i)).collect();
            let ab = inner_product(&a, &b).unwrap();
            prop_assert!((ab - inner_product(&b, &a).unwrap()).abs() < 1e-12);
            let sa: Vec<_> = a.iter().map(|v| v * s).collect();
            prop_assert!((inner_product(&sa, &b).unwrap() - s * ab).abs() < 1e-10);
            let aa = inner_product(&a, &a).unwrap();
            prop_assert!(aa >= 0.0);
        }
    }
}
