//! Phantoms, noise and data masks.
//!
//! Random draws use one ChaCha stream per item (ellipsoid, angle) derived
//! from the seed, so results do not depend on evaluation order or threads.

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use rayon::prelude::*;

use crate::error::{param_err, Error, Result};
use crate::grids::{GridSpec, IntensityData, ObjectVolume};
use crate::Real;

fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(index);
    r
}

/// `k * L * max |N|` with `L = mx * dx`.
pub fn magnitude_norm<T: Real>(v: &ObjectVolume<T>) -> f64 {
    let m = v.data.iter().map(|c| c.norm().f64()).fold(0.0, f64::max);
    v.grid.k * v.grid.thickness() * m
}

/// Rescales so that [`magnitude_norm`] equals `target`.
pub fn rescale_magnitude<T: Real>(v: &ObjectVolume<T>, target: f64) -> Result<ObjectVolume<T>> {
    let m = magnitude_norm(v);
    if m == 0.0 {
        return param_err("cannot rescale a zero volume");
    }
    Ok(v.scaled(T::of(target / m)))
}

/// Whether voxel `(y, x, z)` lies inside the cylinder inscribed in the grid
/// around the rotation axis, one voxel away from every face.
pub fn inside_cylinder(g: &GridSpec, y: usize, x: usize, z: usize) -> bool {
    if y == 0 || y + 1 >= g.my {
        return g.my == 1;
    }
    let (cx, cz) = ((g.mx as f64 - 1.0) / 2.0, (g.mz as f64 - 1.0) / 2.0);
    let r = g.mx.min(g.mz) as f64 / 2.0 - 1.0;
    (x as f64 - cx).powi(2) + (z as f64 - cz).powi(2) <= r * r
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub seed: u64,
    pub n_ellipsoids: usize,
    pub mu: f64,
    pub sigma: f64,
    pub c_beta_delta: f64,
    pub target_magnitude: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec { seed: 0, n_ellipsoids: 8, mu: 1.0, sigma: 0.3, c_beta_delta: 0.0, target_magnitude: std::f64::consts::PI }
    }
}

struct Ellipsoid {
    center: [f64; 3],
    semi: [f64; 3],
    // rows are the body axes
    rot: [[f64; 3]; 3],
    value: Complex<f64>,
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let mut s = 0.0;
        for a in 0..3 {
            let t = self.rot[a][0] * d[0] + self.rot[a][1] * d[1] + self.rot[a][2] * d[2];
            s += (t / self.semi[a]).powi(2);
        }
        s <= 1.0
    }
}

/// Rotation matrix of a uniformly random unit quaternion.
fn random_rotation(r: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let q: [f64; 4] = std::array::from_fn(|_| r.sample(StandardNormal));
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / n);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn draw_ellipsoid(g: &GridSpec, spec: &PhantomSpec, i: usize) -> Result<Ellipsoid> {
    let mut r = stream(spec.seed, i as u64);
    let dims = [g.my as f64, g.mx as f64, g.mz as f64];
    let center = dims.map(|n| (0.15 + 0.7 * r.random::<f64>()) * n - 0.5);
    let semi = dims.map(|n| ((0.05 + 0.2 * r.random::<f64>()) * n).max(0.5));
    let rot = random_rotation(&mut r);
    let dist = Normal::new(spec.mu, spec.sigma * spec.mu.abs()).map_err(|e| Error::Parameter(e.to_string()))?;
    let delta = dist.sample(&mut r).max(0.0);
    let beta = spec.c_beta_delta * dist.sample(&mut r).max(0.0);
    Ok(Ellipsoid { center, semi, rot, value: Complex::new(delta, -beta) })
}

/// Random nested ellipsoids (later ones overwrite earlier ones), clipped to
/// the inscribed cylinder and rescaled to `spec.target_magnitude`.
pub fn phantom_ellipsoids<T: Real>(grid: GridSpec, spec: &PhantomSpec) -> Result<ObjectVolume<T>> {
    if spec.n_ellipsoids == 0 {
        return param_err("at least one ellipsoid is required");
    }
    if !(spec.sigma >= 0.0) || !(spec.c_beta_delta >= 0.0) || !(spec.target_magnitude >= 0.0) {
        return param_err("sigma, c_beta_delta and the target magnitude must be nonnegative");
    }
    if !(spec.mu > 0.0) {
        return param_err("mu must be positive");
    }
    let ells = (0..spec.n_ellipsoids).map(|i| draw_ellipsoid(&grid, spec, i)).collect::<Result<Vec<_>>>()?;
    let mut data = vec![Complex::<f64>::default(); grid.len()];
    data.par_chunks_mut(grid.mx * grid.mz).enumerate().for_each(|(y, plane)| {
        for x in 0..grid.mx {
            for z in 0..grid.mz {
                if !inside_cylinder(&grid, y, x, z) {
                    continue;
                }
                let p = [y as f64, x as f64, z as f64];
                if let Some(e) = ells.iter().rev().find(|e| e.contains(p)) {
                    plane[x * grid.mz + z] = e.value;
                }
            }
        }
    });
    let v = ObjectVolume { grid, data };
    if magnitude_norm(&v) == 0.0 {
        return param_err("phantom is empty after clipping; check mu and the grid size");
    }
    let v = rescale_magnitude(&v, spec.target_magnitude)?;
    Ok(ObjectVolume::from_f64(&v))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReferenceShape {
    /// Centered box.
    Rectangle,
    /// Centered ball.
    Sphere,
    /// Cylinder along `x` with a hemispherical cap on one end.
    Bullet,
    /// Box whose values grow like `exp(t)`, `t` in `[0, 1]` along `x`.
    ExpRamp,
}

/// Deterministic pure-phase reference object with `max N = magnitude / (k L)`.
pub fn phantom_reference<T: Real>(grid: GridSpec, shape: ReferenceShape, magnitude: f64) -> Result<ObjectVolume<T>> {
    if grid.mx < 4 || grid.mz < 4 {
        return param_err("reference shapes need at least 4 voxels across");
    }
    let peak = magnitude / (grid.k * grid.thickness());
    let c = [(grid.my as f64 - 1.0) / 2.0, (grid.mx as f64 - 1.0) / 2.0, (grid.mz as f64 - 1.0) / 2.0];
    let n = grid.mx.min(grid.mz) as f64;
    let ny = if grid.my == 1 { f64::INFINITY } else { grid.my as f64 };
    let half_box = [0.3 * ny, 0.3 * grid.mx as f64, 0.3 * grid.mz as f64];
    let (x_lo, x_hi) = ((c[1] - half_box[1]).ceil(), (c[1] + half_box[1]).floor());
    let mut out = vec![0.0f64; grid.len()];
    for y in 0..grid.my {
        for x in 0..grid.mx {
            for z in 0..grid.mz {
                let d = [y as f64 - c[0], x as f64 - c[1], z as f64 - c[2]];
                let in_box = (0..3).all(|a| d[a].abs() <= half_box[a]);
                let v = match shape {
                    ReferenceShape::Rectangle => in_box as u8 as f64,
                    ReferenceShape::Sphere => {
                        let r = 0.35 * n.min(ny);
                        let dy = if grid.my == 1 { 0.0 } else { d[0] };
                        (dy * dy + d[1] * d[1] + d[2] * d[2] <= r * r) as u8 as f64
                    }
                    ReferenceShape::Bullet => {
                        let r = 0.15 * n.min(ny);
                        let dy = if grid.my == 1 { 0.0 } else { d[0] };
                        let radial = dy * dy + d[2] * d[2];
                        let (x0, x1) = (-0.3 * n, 0.1 * n);
                        let body = d[1] >= x0 && d[1] <= x1 && radial <= r * r;
                        let cap = d[1] > x1 && radial + (d[1] - x1).powi(2) <= r * r;
                        (body || cap) as u8 as f64
                    }
                    ReferenceShape::ExpRamp => {
                        if in_box {
                            ((x as f64 - x_lo) / (x_hi - x_lo)).exp() / std::f64::consts::E
                        } else {
                            0.0
                        }
                    }
                };
                out[grid.index(y, x, z)] = v * peak;
            }
        }
    }
    ObjectVolume::from_real(grid, &out.into_iter().map(T::of).collect::<Vec<_>>())
}

#[derive(Clone, Debug)]
pub struct NoisyData<T> {
    pub data: IntensityData<T>,
    /// `data - clean` (in counts for Poisson data).
    pub error: Vec<T>,
    pub err_norm: f64,
    /// Photons per unit intensity; 1 for Gaussian noise.
    pub intensity_scale: f64,
}

/// Adds white Gaussian noise with standard deviation `epsilon |I| / sqrt(n)`.
pub fn add_gaussian_noise<T: Real>(data: &IntensityData<T>, epsilon: f64, seed: u64) -> Result<NoisyData<T>> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return param_err(format!("noise level must be nonnegative, got {epsilon}"));
    }
    let sigma = epsilon * data.norm() / (data.data.len() as f64).sqrt();
    let fl = data.frame_len();
    let mut error = vec![T::zero(); data.data.len()];
    error.par_chunks_mut(fl).enumerate().for_each(|(a, e)| {
        let mut r = stream(seed, a as u64);
        for v in e.iter_mut() {
            let n: f64 = r.sample(StandardNormal);
            *v = T::of(sigma * n);
        }
    });
    let noisy: Vec<T> = data.data.iter().zip(&error).map(|(d, e)| *d + *e).collect();
    let err_norm = crate::grids::norm_real(&error);
    let mut out = data.like(noisy);
    out.weights = data.weights.clone();
    Ok(NoisyData { data: out, error, err_norm, intensity_scale: 1.0 })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PoissonLevel {
    /// Expected relative L2 error of the counts.
    Epsilon(f64),
    /// Photons per unit intensity.
    Photons(f64),
}

/// Photon scale with expected relative error `sqrt(sum I0 I) / (I0 |I|) = epsilon`.
pub fn photons_for_epsilon<T: Real>(data: &[T], epsilon: f64) -> Result<f64> {
    let sum: f64 = data.iter().map(|v| v.f64()).sum();
    let sq = crate::grids::dot_r(data, data);
    if !(epsilon > 0.0) || sum <= 0.0 {
        return param_err("need epsilon > 0 and nonzero data to set a photon scale");
    }
    Ok(sum / (epsilon * epsilon * sq))
}

/// Expected relative L2 error of Poisson counts at photon scale `i0`.
pub fn expected_poisson_epsilon<T: Real>(data: &[T], i0: f64) -> f64 {
    let sum: f64 = data.iter().map(|v| v.f64()).sum();
    (i0 * sum).sqrt() / (i0 * crate::grids::norm_real(data))
}

/// Draws counts `~ Poisson(I0 * I)`.
pub fn add_poisson_noise<T: Real>(data: &IntensityData<T>, level: PoissonLevel, seed: u64) -> Result<NoisyData<T>> {
    if data.data.iter().any(|v| *v < T::zero()) {
        return param_err("Poisson noise needs nonnegative intensities");
    }
    let i0 = match level {
        PoissonLevel::Epsilon(e) => photons_for_epsilon(&data.data, e)?,
        PoissonLevel::Photons(p) => {
            if !(p > 0.0 && p.is_finite()) {
                return param_err("photon scale must be positive");
            }
            p
        }
    };
    let fl = data.frame_len();
    let mut counts = vec![T::zero(); data.data.len()];
    counts
        .par_chunks_mut(fl)
        .zip(data.data.par_chunks(fl))
        .enumerate()
        .try_for_each(|(a, (c, d))| -> Result<()> {
            let mut r = stream(seed, a as u64);
            for (c, d) in c.iter_mut().zip(d) {
                let lambda = i0 * d.f64();
                *c = if lambda > 0.0 {
                    let p = Poisson::new(lambda).map_err(|e| Error::Parameter(e.to_string()))?;
                    T::of(p.sample(&mut r))
                } else {
                    T::zero()
                };
            }
            Ok(())
        })?;
    let s = T::of(i0);
    let error: Vec<T> = counts.iter().zip(&data.data).map(|(c, d)| *c - *d * s).collect();
    let err_norm = crate::grids::norm_real(&error);
    let mut out = data.like(counts);
    out.weights = data.weights.clone();
    Ok(NoisyData { data: out, error, err_norm, intensity_scale: i0 })
}

/// Fit weights over `(angle, ny, nx)`: zero for angles outside `kept`
/// (`[lo, hi)` in radians) and, if `beam_stop` is given, for detector pixels
/// closer than that many pixels to the frame center `(ny/2, nx/2)`.
pub fn make_masks<T: Real>(angles: &[f64], ny: usize, nx: usize, kept: Option<(f64, f64)>, beam_stop: Option<f64>) -> Result<Vec<T>> {
    let keep: Vec<bool> = match kept {
        None => vec![true; angles.len()],
        Some((lo, hi)) => {
            if !(hi > lo) {
                return param_err(format!("kept angular range [{lo}, {hi}) is empty"));
            }
            angles.iter().map(|&a| a >= lo && a < hi).collect()
        }
    };
    if !keep.iter().any(|&k| k) {
        return param_err("no angle lies in the kept range");
    }
    let mut frame = vec![T::one(); ny * nx];
    if let Some(r) = beam_stop {
        if !(r >= 0.0) {
            return param_err("beam stop radius must be nonnegative");
        }
        let (cy, cx) = ((ny / 2) as f64, (nx / 2) as f64);
        for y in 0..ny {
            for x in 0..nx {
                if (y as f64 - cy).hypot(x as f64 - cx) < r {
                    frame[y * nx + x] = T::zero();
                }
            }
        }
    }
    let mut w = Vec::with_capacity(angles.len() * ny * nx);
    for k in keep {
        if k {
            w.extend_from_slice(&frame);
        } else {
            w.extend(std::iter::repeat_n(T::zero(), ny * nx));
        }
    }
    Ok(w)
}
