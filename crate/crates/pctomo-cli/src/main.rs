use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use num_complex::Complex;

use pctomo::baseline::{ctf_invert, fbp};
use pctomo::forward::ForwardModel;
use pctomo::grids::{emit_grayscale, read_array, write_array, Array, GridSpec};
use pctomo::radon::build_projector;
use pctomo::regularization::{Constraint, DataGramian, ObjectGramian, ObjectGramianKind};
use pctomo::simulate::{
    add_gaussian_noise, add_poisson_noise, magnitude_norm, make_masks, phantom_ellipsoids, phantom_reference, PhantomSpec,
    PoissonLevel, ReferenceShape,
};
use pctomo::solver::{self, Alpha0, CgPolicy, SolverConfig, StopRule};
use pctomo::transforms::{PadSpec, Propagation};
use pctomo::{IntensityData64, ObjectVolume64};

mod config;
mod sidecar;

use sidecar::{companion, Sidecar};

/// Invalid flags or inputs; reported with exit code 2.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

impl fmt::Display for Noise {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Noise::None => f.write_str("none"),
            Noise::Gaussian(e) => write!(f, "gaussian:{e}"),
            Noise::Poisson(e) => write!(f, "poisson:{e}"),
        }
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Usage(msg.into()))
}

#[derive(Parser)]
#[command(name = "pctomo", version, about = "Phase contrast tomography: phantoms, simulation, reconstruction, metrics")]
#[command(args_override_self = true)]
struct Cli {
    /// Worker threads; 0 uses all cores. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// Flat key=value file with flag values; command-line flags win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Print the resolved configuration instead of running.
    #[arg(long, global = true)]
    dump_config: bool,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a phantom volume.
    #[command(args_override_self = true)]
    Phantom(PhantomArgs),
    /// Simulate (noisy) intensity data of a volume.
    #[command(args_override_self = true)]
    Simulate(SimulateArgs),
    /// Reconstruct a volume from intensity data.
    #[command(args_override_self = true)]
    Reconstruct(ReconstructArgs),
    /// Relative L2 error of a reconstruction.
    #[command(args_override_self = true)]
    Metrics(MetricsArgs),
    /// CTF inversion plus filtered backprojection.
    #[command(args_override_self = true)]
    Ctf(CtfArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Kind {
    Ellipsoids,
    Rectangle,
    Sphere,
    Bullet,
    ExpRamp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Nearfield,
    Farfield,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Detector {
    /// The whole padded propagation grid.
    Full,
    /// Only the projection window (holograms without oversampling).
    Projection,
}

fn parse_grid(s: &str) -> std::result::Result<[usize; 3], String> {
    let v: Vec<usize> = s.split(',').map(|x| x.trim().parse::<usize>().map_err(|e| e.to_string())).collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [mx, my, mz] if mx > 0 && my > 0 && mz > 0 => Ok([mx, my, mz]),
        [_, _, _] => Err("grid dims must be positive".into()),
        _ => Err("expected MX,MY,MZ".into()),
    }
}

fn parse_positive(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        Ok(v) => Err(format!("{v} is not positive")),
        Err(e) => Err(e.to_string()),
    }
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long, value_enum)]
    kind: Kind,
    /// MX,MY,MZ (y is the rotation axis).
    #[arg(long, value_parser = parse_grid)]
    grid: [usize; 3],
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Target value of k * L * max|N|.
    #[arg(long, default_value_t = std::f64::consts::PI)]
    magnitude: f64,
    /// beta/delta ratio of the ellipsoid values.
    #[arg(long, default_value_t = 0.0)]
    cbd: f64,
    #[arg(long, default_value_t = 8)]
    ellipsoids: usize,
    #[arg(long, default_value_t = 1.0)]
    mu: f64,
    #[arg(long, default_value_t = 0.3)]
    sigma: f64,
    #[arg(long, default_value_t = 1.0, value_parser = parse_positive)]
    dx: f64,
    #[arg(long, default_value_t = 1.0, value_parser = parse_positive)]
    k: f64,
    #[arg(long)]
    out: PathBuf,
    /// Central x-z slice of Re(N) as a PGM graymap.
    #[arg(long)]
    graymap: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Noise {
    None,
    Gaussian(f64),
    Poisson(f64),
}

fn parse_noise(s: &str) -> std::result::Result<Noise, String> {
    if s == "none" {
        return Ok(Noise::None);
    }
    let (kind, eps) = s.split_once(':').ok_or("expected none, gaussian:EPS or poisson:EPS")?;
    let eps = parse_positive(eps)?;
    match kind {
        "gaussian" => Ok(Noise::Gaussian(eps)),
        "poisson" => Ok(Noise::Poisson(eps)),
        other => Err(format!("unknown noise kind {other}")),
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    object: PathBuf,
    #[arg(long, value_enum)]
    mode: Mode,
    /// Pixel Fresnel number (near field).
    #[arg(long, value_parser = parse_positive)]
    nf: Option<f64>,
    #[arg(long, default_value_t = 64)]
    angles: usize,
    /// Angles are equispaced over [0, theta-span) degrees.
    #[arg(long, default_value_t = 180.0)]
    theta_span: f64,
    /// Text file of angles in degrees (whitespace or comma separated); replaces --angles.
    #[arg(long)]
    angle_list: Option<PathBuf>,
    /// Angles at or above this many degrees are masked out of the fit.
    #[arg(long)]
    theta_max: Option<f64>,
    #[arg(long, default_value_t = 2)]
    pad: usize,
    #[arg(long, value_enum, default_value_t = Detector::Full)]
    detector: Detector,
    #[arg(long, value_parser = parse_noise, default_value = "none")]
    noise: Noise,
    /// Far-field beam stop radius in detector pixels.
    #[arg(long, default_value_t = 0.0)]
    beamstop: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0, value_parser = parse_positive)]
    dx: f64,
    #[arg(long, default_value_t = 1.0, value_parser = parse_positive)]
    k: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
enum Reg {
    L2,
    Sobolev(f64),
}

fn parse_reg(s: &str) -> std::result::Result<Reg, String> {
    match s.split_once(':') {
        None if s == "l2" => Ok(Reg::L2),
        Some(("sobolev", v)) => v.parse::<f64>().ok().filter(|v| *v >= 0.0).map(Reg::Sobolev).ok_or_else(|| format!("bad Sobolev index {v}")),
        _ => Err("expected l2 or sobolev:S".into()),
    }
}

fn parse_alpha0(s: &str) -> std::result::Result<Alpha0, String> {
    if s.eq_ignore_ascii_case("auto") {
        Ok(Alpha0::Heuristic)
    } else {
        parse_positive(s).map(Alpha0::Value)
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Stop {
    Discrepancy(f64),
    Fixed(usize),
    Best(PathBuf),
}

fn parse_stop(s: &str) -> std::result::Result<Stop, String> {
    match s.split_once(':') {
        Some(("discrepancy", t)) => t.parse::<f64>().map(Stop::Discrepancy).map_err(|e| e.to_string()),
        Some(("fixed", k)) => k.parse::<usize>().map(Stop::Fixed).map_err(|e| e.to_string()),
        Some(("best", f)) if !f.is_empty() => Ok(Stop::Best(PathBuf::from(f))),
        _ => Err("expected discrepancy:TAU, fixed:K or best:TRUTHFILE".into()),
    }
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    data: PathBuf,
    /// Defaults to the value recorded by `simulate`.
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long, value_parser = parse_positive)]
    nf: Option<f64>,
    #[arg(long)]
    pad: Option<usize>,
    /// MX,MY,MZ; defaults to the recorded grid.
    #[arg(long, value_parser = parse_grid)]
    grid: Option<[usize; 3]>,
    #[arg(long, value_parser = parse_positive)]
    dx: Option<f64>,
    #[arg(long, value_parser = parse_positive)]
    k: Option<f64>,
    #[arg(long, value_parser = parse_reg, default_value = "l2")]
    reg: Reg,
    /// Weight of beta relative to delta in the object norm (1/c_beta_delta).
    #[arg(long, default_value_t = 1.0, value_parser = parse_positive)]
    beta_weight: f64,
    #[arg(long, value_parser = parse_alpha0, default_value = "auto")]
    alpha0: Alpha0,
    /// Volume whose norm sets the heuristic alpha0 (defaults to --init or the best-stop truth).
    #[arg(long)]
    alpha_ref: Option<PathBuf>,
    #[arg(long, default_value_t = 2.0 / 3.0)]
    ralpha: f64,
    #[arg(long, value_parser = parse_stop)]
    stop: Stop,
    #[arg(long, default_value_t = 30)]
    max_newton: usize,
    #[arg(long, default_value_t = 0)]
    min_newton: usize,
    #[arg(long, default_value_t = 200)]
    cg_max_iter: usize,
    #[arg(long, default_value_t = 1e-2, value_parser = parse_positive)]
    cg_tol: f64,
    /// none, purephase, singlematerial:RE,IM or support:FILE; join with '+'.
    #[arg(long, default_value = "none")]
    constraint: String,
    /// l2 or poisson:IMIN.
    #[arg(long, default_value = "l2")]
    data_gramian: String,
    /// Noise norm for the discrepancy rule; defaults to the recorded error field.
    #[arg(long)]
    err_norm: Option<f64>,
    /// zero or a volume file; also the regularization center.
    #[arg(long, default_value = "zero")]
    init: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    log: Option<PathBuf>,
    /// Writes PREFIX_xz.pgm, PREFIX_yx.pgm and PREFIX_yz.pgm central slices of Re(N).
    #[arg(long)]
    slices: Option<PathBuf>,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    recon: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Known reference object; adds the error relative to `truth - reference`.
    #[arg(long)]
    subtract_reference: Option<PathBuf>,
}

#[derive(Args)]
struct CtfArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = parse_positive)]
    nf: Option<f64>,
    /// purephase or singlematerial:RE,IM.
    #[arg(long, default_value = "purephase")]
    constraint: String,
    #[arg(long, default_value_t = 0.1, value_parser = parse_positive)]
    cutoff: f64,
    /// Comma-separated cutoffs; the one closest to --truth is kept.
    #[arg(long)]
    sweep: Option<String>,
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn read_volume(path: &Path, dx: f64, k: f64) -> Result<ObjectVolume64> {
    let a = read_array(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(ObjectVolume64::from_array(a, dx, k)?)
}

fn write_slices(prefix: &Path, v: &ObjectVolume64) -> Result<()> {
    let g = v.grid;
    let (cy, cx, cz) = (g.my / 2, g.mx / 2, g.mz / 2);
    let xz: Vec<f64> = (0..g.mx).flat_map(|x| (0..g.mz).map(move |z| (x, z))).map(|(x, z)| v.get(cy, x, z).re).collect();
    let yx: Vec<f64> = (0..g.my).flat_map(|y| (0..g.mx).map(move |x| (y, x))).map(|(y, x)| v.get(y, x, cz).re).collect();
    let yz: Vec<f64> = (0..g.my).flat_map(|y| (0..g.mz).map(move |z| (y, z))).map(|(y, z)| v.get(y, cx, z).re).collect();
    emit_grayscale(companion(prefix, "_xz.pgm"), &xz, g.mx, g.mz)?;
    emit_grayscale(companion(prefix, "_yx.pgm"), &yx, g.my, g.mx)?;
    emit_grayscale(companion(prefix, "_yz.pgm"), &yz, g.my, g.mz)?;
    Ok(())
}

fn cmd_phantom(a: &PhantomArgs) -> Result<()> {
    let [mx, my, mz] = a.grid;
    let grid = GridSpec::with_scales(mx, my, mz, a.dx, a.k)?;
    let v: ObjectVolume64 = match a.kind {
        Kind::Ellipsoids => {
            let spec = PhantomSpec {
                seed: a.seed,
                n_ellipsoids: a.ellipsoids,
                mu: a.mu,
                sigma: a.sigma,
                c_beta_delta: a.cbd,
                target_magnitude: a.magnitude,
            };
            phantom_ellipsoids(grid, &spec)?
        }
        Kind::Rectangle => phantom_reference(grid, ReferenceShape::Rectangle, a.magnitude)?,
        Kind::Sphere => phantom_reference(grid, ReferenceShape::Sphere, a.magnitude)?,
        Kind::Bullet => phantom_reference(grid, ReferenceShape::Bullet, a.magnitude)?,
        Kind::ExpRamp => phantom_reference(grid, ReferenceShape::ExpRamp, a.magnitude)?,
    };
    write_array(&a.out, &v.to_array())?;
    if let Some(p) = &a.graymap {
        let xz: Vec<f64> = v.data[(my / 2) * mx * mz..(my / 2 + 1) * mx * mz].iter().map(|c| c.re).collect();
        emit_grayscale(p, &xz, mx, mz)?;
    }
    println!("wrote {} ({}x{}x{}), magnitude {:.6}", a.out.display(), mx, my, mz, magnitude_norm(&v));
    Ok(())
}

struct Geometry {
    mode: Propagation,
    grid: GridSpec,
    angles: Vec<f64>,
    pad: usize,
    detector: Detector,
}

fn build_model(g: &Geometry) -> Result<ForwardModel<f64>> {
    let p = build_projector(g.grid, &g.angles, g.grid.mx)?;
    Ok(match g.detector {
        Detector::Full => ForwardModel::new(g.mode, p, g.pad)?,
        Detector::Projection => {
            let pad = PadSpec::factor(g.grid.my, g.grid.mx, g.pad)?;
            let det = PadSpec::new(g.grid.my, g.grid.mx, pad.pad_ny, pad.pad_nx)?;
            ForwardModel::with_geometry(g.mode, p, pad, det)?
        }
    })
}

fn mode_of(mode: Mode, nf: Option<f64>) -> Result<Propagation> {
    match mode {
        Mode::Nearfield => Ok(Propagation::Near { nf: nf.ok_or_else(|| usage("near-field mode needs --nf"))? }),
        Mode::Farfield => Ok(Propagation::Far),
    }
}

fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let obj = read_volume(&a.object, a.dx, a.k)?;
    let mode = mode_of(a.mode, a.nf)?;
    if a.angles == 0 || !(a.theta_span > 0.0 && a.theta_span <= 360.0) {
        return Err(usage("need --angles >= 1 and 0 < --theta-span <= 360"));
    }
    let angles: Vec<f64> = match &a.angle_list {
        Some(p) => fs::read_to_string(p)
            .with_context(|| format!("reading {}", p.display()))?
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<f64>().map(f64::to_radians).map_err(|e| usage(format!("angle list: {e}"))))
            .collect::<Result<_>>()?,
        None => (0..a.angles).map(|i| (i as f64 * a.theta_span / a.angles as f64).to_radians()).collect(),
    };
    if a.beamstop > 0.0 && a.mode == Mode::Nearfield {
        return Err(usage("--beamstop applies to far-field data only"));
    }
    let geom = Geometry { mode, grid: obj.grid, angles: angles.clone(), pad: a.pad.max(1), detector: a.detector };
    let model = build_model(&geom)?;
    let clean = model.forward(&obj)?;
    let (ny, nx) = model.detector_dims();
    let theta_max = a.theta_max.unwrap_or(a.theta_span);
    let kept = (theta_max < a.theta_span).then(|| (0.0, theta_max.to_radians()));
    let stop = (a.beamstop > 0.0).then_some(a.beamstop);
    let weights = make_masks::<f64>(&angles, ny, nx, kept, stop)?;
    let masked = weights.iter().any(|&w| w == 0.0);
    let noisy = match a.noise {
        Noise::None => None,
        Noise::Gaussian(e) => Some(add_gaussian_noise(&clean, e, a.seed)?),
        Noise::Poisson(e) => Some(add_poisson_noise(&clean, PoissonLevel::Epsilon(e), a.seed)?),
    };
    let (data, err_norm, scale) = match &noisy {
        Some(n) => (&n.data, n.err_norm, n.intensity_scale),
        None => (&clean, 0.0, 1.0),
    };
    write_array(&a.out, &Array::real(vec![angles.len(), ny, nx], data.data.clone())?)?;
    let name = |p: &Path| p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut meta = Sidecar::default();
    if masked {
        let wp = companion(&a.out, ".weights");
        write_array(&wp, &Array::real(vec![angles.len(), ny, nx], weights.clone())?)?;
        meta.set("weights", name(&wp));
    }
    if let Some(n) = &noisy {
        let ep = companion(&a.out, ".err");
        write_array(&ep, &Array::real(vec![angles.len(), ny, nx], n.error.clone())?)?;
        meta.set("error", name(&ep));
    }
    let g = obj.grid;
    meta.set("mode", if a.mode == Mode::Nearfield { "nearfield" } else { "farfield" });
    if let Some(nf) = a.nf.filter(|_| a.mode == Mode::Nearfield) {
        meta.set("nf", nf);
    }
    meta.set("grid", format!("{},{},{}", g.mx, g.my, g.mz));
    meta.set("dx", g.dx);
    meta.set("k", g.k);
    meta.set("pad", geom.pad);
    meta.set("detector", if a.detector == Detector::Full { "full" } else { "projection" });
    meta.set("angles", angles.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","));
    meta.set("theta_span", a.theta_span);
    meta.set("theta_max", theta_max);
    meta.set("unmasked_angles", weights.chunks(ny * nx).filter(|f| f.iter().any(|&w| w > 0.0)).count());
    meta.set("noise", a.noise);
    meta.set("seed", a.seed);
    meta.set("err_norm", err_norm);
    meta.set("intensity_scale", scale);
    meta.write(&companion(&a.out, ".meta"))?;
    println!("wrote {} ({} x {} x {}), err_norm {:.6e}", a.out.display(), angles.len(), ny, nx, err_norm);
    Ok(())
}

/// Data plus everything needed to rebuild its forward model.
struct Loaded {
    data: IntensityData64,
    model: ForwardModel<f64>,
    meta: Sidecar,
    dir: PathBuf,
}

fn load_data(path: &Path, mode: Option<Mode>, nf: Option<f64>, pad: Option<usize>, grid: Option<[usize; 3]>, dx: Option<f64>, k: Option<f64>) -> Result<Loaded> {
    let meta = Sidecar::read(&companion(path, ".meta"))?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let (shape, values) = read_array(path).with_context(|| format!("reading {}", path.display()))?.into_real()?;
    let [na, ny, nx] = shape[..] else {
        return Err(usage(format!("intensity data must be 3D, got {shape:?}")));
    };
    let mode = match mode {
        Some(m) => m,
        None => match meta.get("mode") {
            Some("nearfield") => Mode::Nearfield,
            Some("farfield") => Mode::Farfield,
            _ => return Err(usage("no --mode given and none recorded with the data")),
        },
    };
    let nf = nf.or(meta.parse("nf")?);
    let grid = match grid.or(meta.list::<usize>("grid")?.and_then(|v| v.try_into().ok())) {
        Some(g) => g,
        None => return Err(usage("no --grid given and none recorded with the data")),
    };
    let dx = dx.or(meta.parse("dx")?).unwrap_or(1.0);
    let k = k.or(meta.parse("k")?).unwrap_or(1.0);
    let angles = match meta.list::<f64>("angles")? {
        Some(a) => a,
        None => (0..na).map(|i| i as f64 * std::f64::consts::PI / na as f64).collect(),
    };
    let detector = match meta.get("detector") {
        Some("projection") => Detector::Projection,
        _ => Detector::Full,
    };
    let geom = Geometry {
        mode: mode_of(mode, nf)?,
        grid: GridSpec::with_scales(grid[0], grid[1], grid[2], dx, k)?,
        angles: angles.clone(),
        pad: pad.or(meta.parse("pad")?).unwrap_or(2).max(1),
        detector,
    };
    let mut model = build_model(&geom)?;
    if let Some(s) = meta.parse::<f64>("intensity_scale")? {
        model = model.with_intensity_scale(s)?;
    }
    let mut data = IntensityData64::new(angles, ny, nx, values)?;
    if model.detector_dims() != (ny, nx) || model.n_angles() != na {
        return Err(usage(format!(
            "data is {na}x{ny}x{nx} but the geometry gives {}x{}x{}",
            model.n_angles(),
            model.detector.ny,
            model.detector.nx
        )));
    }
    if let Some(w) = meta.get("weights") {
        let (_, w) = read_array(dir.join(w))?.into_real()?;
        data = data.with_weights(w)?;
    }
    Ok(Loaded { data, model, meta, dir })
}

fn parse_constraint(s: &str, grid: GridSpec) -> Result<Constraint> {
    let mut c = Constraint::none();
    for part in s.split('+').map(str::trim) {
        match part.split_once(':') {
            None if part == "none" => {}
            None if part == "purephase" => c.material = Some(Complex::new(1.0, 0.0)),
            Some(("singlematerial", v)) => {
                let xs: Vec<f64> = v.split(',').map(|x| x.trim().parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|e| usage(format!("singlematerial: {e}")))?;
                let [re, im] = xs[..] else { return Err(usage("singlematerial needs RE,IM")) };
                c.material = Constraint::single_material(Complex::new(re, im))?.material;
            }
            Some(("support", f)) => c.support = Some(Constraint::support_from_array(read_array(f)?, grid)?),
            _ => return Err(usage(format!("unknown constraint {part:?}"))),
        }
    }
    Ok(c)
}

fn cmd_reconstruct(a: &ReconstructArgs) -> Result<()> {
    let l = load_data(&a.data, a.mode, a.nf, a.pad, a.grid, a.dx, a.k)?;
    let grid = l.model.grid();
    let mut gram_x = match a.reg {
        Reg::L2 => ObjectGramian::identity(grid),
        Reg::Sobolev(s) => ObjectGramian::new(grid, ObjectGramianKind::Sobolev { s })?,
    };
    gram_x = gram_x.with_beta_weight(a.beta_weight)?;
    let gram_y = match a.data_gramian.split_once(':') {
        None if a.data_gramian == "l2" => DataGramian::identity(),
        Some(("poisson", m)) => DataGramian::poisson(&l.data.data, m.parse::<f64>().map_err(|e| usage(format!("poisson i_min: {e}")))?)?,
        _ => return Err(usage("--data-gramian must be l2 or poisson:IMIN")),
    };
    let constraint = parse_constraint(&a.constraint, grid)?;
    let init = match a.init.as_str() {
        "zero" => None,
        f => Some(read_volume(Path::new(f), grid.dx, grid.k)?),
    };
    let stop = match &a.stop {
        Stop::Fixed(k) => StopRule::Fixed(*k),
        Stop::Best(f) => StopRule::BestStop { truth: read_volume(f, grid.dx, grid.k)? },
        Stop::Discrepancy(tau) => {
            let err_norm = match (a.err_norm, l.meta.get("error")) {
                (Some(e), _) => e,
                (None, Some(f)) => {
                    let (_, e) = read_array(l.dir.join(f))?.into_real()?;
                    let g = match &l.data.weights {
                        Some(w) => gram_y.clone().with_mask(w)?,
                        None => gram_y.clone(),
                    };
                    g.norm_sq(&e)?.sqrt()
                }
                (None, None) => match l.meta.parse::<f64>("err_norm")? {
                    Some(e) => e,
                    None => return Err(usage("discrepancy stop needs --err-norm or data written by `simulate`")),
                },
            };
            StopRule::Discrepancy { tau: *tau, err_norm }
        }
    };
    let reference_norm_sq = match (a.alpha0, &a.alpha_ref, &init, &stop) {
        (Alpha0::Value(_), ..) => None,
        (_, Some(f), ..) => Some(gram_x.norm_sq(&read_volume(f, grid.dx, grid.k)?)?),
        (_, None, Some(v), _) => Some(gram_x.norm_sq(v)?),
        (_, None, None, StopRule::BestStop { truth }) => Some(gram_x.norm_sq(truth)?),
        _ => return Err(usage("--alpha0 auto needs a reference volume: --alpha-ref, --init FILE or --stop best:FILE")),
    };
    let cfg = SolverConfig {
        alpha0: a.alpha0,
        r_alpha: a.ralpha,
        max_newton: a.max_newton,
        min_newton: a.min_newton,
        stop,
        cg: CgPolicy { max_iter: a.cg_max_iter, base_tol: a.cg_tol },
        gram_x,
        gram_y,
        constraint,
        initial_guess: init,
        reference_norm_sq,
    };
    let out = solver::run(&l.model, &l.data, &cfg).map_err(|e| match e {
        pctomo::Error::Parameter(m) => usage(m),
        other => other.into(),
    })?;
    write_array(&a.out, &out.volume.to_array())?;
    if let Some(p) = &a.log {
        solver::write_log(fs::File::create(p)?, &out.history)?;
    }
    if let Some(p) = &a.slices {
        write_slices(p, &out.volume)?;
    }
    let h = &out.history[out.selected];
    print!("selected k={} of {}, alpha0={:.6e}, residual={:.6e}", out.selected, out.history.len() - 1, out.alpha0, h.data_residual);
    match h.rho {
        Some(r) => println!(", rho={r:.6}"),
        None => println!(),
    }
    Ok(())
}

fn cmd_metrics(a: &MetricsArgs) -> Result<()> {
    let rec = read_volume(&a.recon, 1.0, 1.0)?;
    let truth = read_volume(&a.truth, 1.0, 1.0)?;
    println!("rho={:.10}", rec.relative_error(&truth)?);
    if let Some(r) = &a.subtract_reference {
        let reference = read_volume(r, 1.0, 1.0)?;
        let delta_true = truth.sub(&reference)?;
        let delta_rec = rec.sub(&reference)?;
        println!("rho_subtracted={:.10}", delta_rec.relative_error(&delta_true)?);
    }
    Ok(())
}

fn cmd_ctf(a: &CtfArgs) -> Result<()> {
    let l = load_data(&a.data, Some(Mode::Nearfield), a.nf, None, None, None, None)?;
    let c = parse_constraint(&a.constraint, l.model.grid())?;
    if c.support.is_some() {
        return Err(usage("CTF inversion takes purephase or singlematerial:RE,IM"));
    }
    let material = c.material.unwrap_or(Complex::new(1.0, 0.0));
    let run = |cut: f64| -> Result<ObjectVolume64> { Ok(fbp(&ctf_invert(&l.model, &l.data, material, cut)?, &l.model.projector)?) };
    let vol = match &a.sweep {
        None => run(a.cutoff)?,
        Some(list) => {
            let truth = match &a.truth {
                Some(t) => read_volume(t, 1.0, 1.0)?,
                None => return Err(usage("--sweep needs --truth")),
            };
            let mut best: Option<(f64, ObjectVolume64)> = None;
            for c in list.split(',') {
                let cut = parse_positive(c.trim()).map_err(usage)?;
                let v = run(cut)?;
                let rho = v.relative_error(&truth)?;
                println!("cutoff={cut} rho={rho:.6}");
                if best.as_ref().is_none_or(|(b, _)| rho < *b) {
                    best = Some((rho, v));
                }
            }
            best.map(|b| b.1).ok_or_else(|| usage("empty --sweep"))?
        }
    };
    write_array(&a.out, &vol.to_array())?;
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<Usage>().is_some() || cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
        if let Some(pe) = cause.downcast_ref::<pctomo::Error>() {
            return match pe {
                pctomo::Error::NonFinite(_) | pctomo::Error::CgBreakdown { .. } => 3,
                _ => 2,
            };
        }
    }
    3
}

fn run(args: Vec<OsString>) -> Result<()> {
    let mut cmd = Cli::command();
    let args = config::expand(&cmd, args).map_err(|e| usage(format!("{e:#}")))?;
    let matches = cmd.try_get_matches_from_mut(args).unwrap_or_else(|e| e.exit());
    let cli = Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit());
    if cli.dump_config {
        print!("{}", config::dump(&cmd, &matches));
        return Ok(());
    }
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global().context("configuring threads")?;
    }
    match &cli.cmd {
        Cmd::Phantom(a) => cmd_phantom(a),
        Cmd::Simulate(a) => cmd_simulate(a),
        Cmd::Reconstruct(a) => cmd_reconstruct(a),
        Cmd::Metrics(a) => cmd_metrics(a),
        Cmd::Ctf(a) => cmd_ctf(a),
    }
}

fn main() -> ExitCode {
    match run(std::env::args_os().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
