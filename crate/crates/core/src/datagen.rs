//! Synthetic clean surfaces and the noise patterns applied to them.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::{add, norm, scale, Point3, PointCloud};

/// An analytic surface.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// Unit sphere.
    Sphere,
    /// The square `[-1, 1]²` in the plane `z = 0`.
    Plane,
    /// Surface of the axis-aligned cube `[-h, h]³`.
    Cube { half: f64 },
    /// Torus around the z axis with tube centre radius `major` and tube radius `minor`.
    Torus { major: f64, minor: f64 },
    /// Two copies of [`Shape::Plane`] at `z = ±gap / 2`.
    TwoPlanes { gap: f64 },
}

impl Shape {
    /// Cube whose corners lie on the unit sphere.
    pub const UNIT_CUBE: Shape = Shape::Cube {
        half: 0.577_350_269_189_625_8,
    };
    pub const DEFAULT_TORUS: Shape = Shape::Torus { major: 1.0, minor: 0.3 };

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Shape::Sphere | Shape::Plane => true,
            Shape::Cube { half } => half > 0.0 && half.is_finite(),
            Shape::Torus { major, minor } => minor > 0.0 && major > minor && major.is_finite(),
            Shape::TwoPlanes { gap } => gap > 0.0 && gap.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid shape parameters: {self}")))
        }
    }

    /// Unsigned distance from `p` to the surface.
    pub fn distance(&self, p: Point3) -> f64 {
        match *self {
            Shape::Sphere => (norm(p) - 1.0).abs(),
            Shape::Plane => square_distance(p, 0.0),
            Shape::Cube { half } => {
                let q = p.map(|c| c.abs() - half);
                let outside = norm(q.map(|c| c.max(0.0)));
                let inside = q[0].max(q[1]).max(q[2]).min(0.0);
                (outside + inside).abs()
            }
            Shape::Torus { major, minor } => {
                let rho = p[0].hypot(p[1]);
                ((rho - major).hypot(p[2]) - minor).abs()
            }
            Shape::TwoPlanes { gap } => square_distance(p, gap / 2.0).min(square_distance(p, -gap / 2.0)),
        }
    }
}

fn square_distance(p: Point3, z: f64) -> f64 {
    let dx = (p[0].abs() - 1.0).max(0.0);
    let dy = (p[1].abs() - 1.0).max(0.0);
    norm([dx, dy, p[2] - z])
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Sphere => f.write_str("sphere"),
            Shape::Plane => f.write_str("plane"),
            Shape::Cube { half } => write!(f, "cube:{half}"),
            Shape::Torus { major, minor } => write!(f, "torus:{major},{minor}"),
            Shape::TwoPlanes { gap } => write!(f, "two_planes:{gap}"),
        }
    }
}

fn parse_args(s: &str, what: &str) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::invalid(format!("bad number `{v}` in {what}")))
        })
        .collect()
}

/// `sphere`, `plane`, `cube[:h]`, `torus[:R,r]`, `two_planes[:gap]`.
impl FromStr for Shape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, args) = s.split_once(':').unwrap_or((s, ""));
        let a = parse_args(args, s)?;
        let shape = match (name, a.as_slice()) {
            ("sphere", []) => Shape::Sphere,
            ("plane", []) => Shape::Plane,
            ("cube", []) => Shape::UNIT_CUBE,
            ("cube", [h]) => Shape::Cube { half: *h },
            ("torus", []) => Shape::DEFAULT_TORUS,
            ("torus", [major, minor]) => Shape::Torus {
                major: *major,
                minor: *minor,
            },
            ("two_planes", []) => Shape::TwoPlanes { gap: 0.1 },
            ("two_planes", [gap]) => Shape::TwoPlanes { gap: *gap },
            _ => return Err(Error::invalid(format!("unknown shape `{s}`"))),
        };
        shape.validate()?;
        Ok(shape)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeSpec {
    pub shape: Shape,
    pub n: usize,
    pub seed: u64,
}

/// `n` points distributed uniformly by area over the surface.
pub fn sample_shape(spec: &ShapeSpec) -> Result<PointCloud> {
    spec.shape.validate()?;
    if spec.n == 0 {
        return Err(Error::invalid("point count must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let square = |rng: &mut ChaCha8Rng, z: f64| [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0), z];
    let pts = (0..spec.n)
        .map(|_| match spec.shape {
            Shape::Sphere => loop {
                let v: Point3 = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
                let r = norm(v);
                if r > 1e-12 {
                    break scale(v, 1.0 / r);
                }
            },
            Shape::Plane => square(&mut rng, 0.0),
            Shape::Cube { half } => {
                let face = rng.random_range(0..6);
                let axis = face / 2;
                let side = if face % 2 == 0 { half } else { -half };
                let u = rng.random_range(-half..=half);
                let v = rng.random_range(-half..=half);
                let mut p = [0.0; 3];
                p[axis] = side;
                p[(axis + 1) % 3] = u;
                p[(axis + 2) % 3] = v;
                p
            }
            Shape::Torus { major, minor } => loop {
                let theta = rng.random_range(0.0..2.0 * PI);
                let phi = rng.random_range(0.0..2.0 * PI);
                // accept in proportion to the local area element
                let ring = major + minor * theta.cos();
                if rng.random_range(0.0..major + minor) <= ring {
                    break [ring * phi.cos(), ring * phi.sin(), minor * theta.sin()];
                }
            },
            Shape::TwoPlanes { gap } => {
                let z = if rng.random_bool(0.5) { gap / 2.0 } else { -gap / 2.0 };
                square(&mut rng, z)
            }
        })
        .collect();
    PointCloud::new(pts)
}

/// Per-point perturbation patterns.
#[derive(Debug, Clone, PartialEq)]
pub enum NoisePattern {
    GaussianIso { sigma: f64 },
    /// Independent Laplace(0, b) per axis.
    Laplace { b: f64 },
    /// One of `levels` fixed random unit vectors, scaled by `sigma`.
    Discrete { levels: usize, sigma: f64 },
    /// Zero-mean Gaussian with covariance `cov`.
    GaussianAniso { cov: [[f64; 3]; 3] },
    /// Gaussian along a single direction.
    GaussianUnidir { direction: Point3, sigma: f64 },
    /// Independent `U(-a, a)` per axis.
    Uniform { a: f64 },
}

impl NoisePattern {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |v: f64| v >= 0.0 && v.is_finite();
        let ok = match self {
            NoisePattern::GaussianIso { sigma } => nonneg(*sigma),
            NoisePattern::Laplace { b } => nonneg(*b),
            NoisePattern::Discrete { levels, sigma } => *levels > 0 && nonneg(*sigma),
            NoisePattern::GaussianAniso { cov } => {
                return cholesky(cov).map(|_| ());
            }
            NoisePattern::GaussianUnidir { direction, sigma } => nonneg(*sigma) && norm(*direction) > 0.0,
            NoisePattern::Uniform { a } => nonneg(*a),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid noise parameters: {self}")))
        }
    }
}

impl fmt::Display for NoisePattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoisePattern::GaussianIso { sigma } => write!(f, "gaussian:{sigma}"),
            NoisePattern::Laplace { b } => write!(f, "laplace:{b}"),
            NoisePattern::Discrete { levels, sigma } => write!(f, "discrete:{levels},{sigma}"),
            NoisePattern::GaussianAniso { cov } => write!(
                f,
                "aniso:{},{},{},{},{},{}",
                cov[0][0], cov[0][1], cov[0][2], cov[1][1], cov[1][2], cov[2][2]
            ),
            NoisePattern::GaussianUnidir { direction: d, sigma } => write!(f, "unidir:{},{},{},{sigma}", d[0], d[1], d[2]),
            NoisePattern::Uniform { a } => write!(f, "uniform:{a}"),
        }
    }
}

/// `gaussian:σ`, `laplace:b`, `discrete:levels,σ`,
/// `aniso:s11,s12,s13,s22,s23,s33`, `unidir:dx,dy,dz,σ`, `uniform:a`.
impl FromStr for NoisePattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, args) = s
            .split_once(':')
            .ok_or_else(|| Error::invalid(format!("noise `{s}` needs parameters, e.g. gaussian:0.02")))?;
        let a = parse_args(args, s)?;
        let p = match (name, a.as_slice()) {
            ("gaussian", [sigma]) => NoisePattern::GaussianIso { sigma: *sigma },
            ("laplace", [b]) => NoisePattern::Laplace { b: *b },
            ("discrete", [levels, sigma]) if levels.fract() == 0.0 && *levels >= 1.0 => NoisePattern::Discrete {
                levels: *levels as usize,
                sigma: *sigma,
            },
            ("aniso", [a11, a12, a13, a22, a23, a33]) => NoisePattern::GaussianAniso {
                cov: [[*a11, *a12, *a13], [*a12, *a22, *a23], [*a13, *a23, *a33]],
            },
            ("unidir", [x, y, z, sigma]) => NoisePattern::GaussianUnidir {
                direction: [*x, *y, *z],
                sigma: *sigma,
            },
            ("uniform", [a]) => NoisePattern::Uniform { a: *a },
            _ => return Err(Error::invalid(format!("unknown noise `{s}`"))),
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub pattern: NoisePattern,
    pub seed: u64,
}

/// Lower-triangular `L` with `L Lᵀ = cov`; zero pivots (semi-definite
/// directions) give zero columns.
fn cholesky(cov: &[[f64; 3]; 3]) -> Result<[[f64; 3]; 3]> {
    let scale_ = cov.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let tol = 1e-12 * scale_;
    for i in 0..3 {
        for j in 0..3 {
            if !cov[i][j].is_finite() || (cov[i][j] - cov[j][i]).abs() > tol {
                return Err(Error::invalid("covariance must be finite and symmetric"));
            }
        }
    }
    let mut l = [[0.0; 3]; 3];
    for j in 0..3 {
        let d = cov[j][j] - (0..j).map(|k| l[j][k] * l[j][k]).sum::<f64>();
        if d < -tol {
            return Err(Error::invalid("covariance must be positive semi-definite"));
        }
        if d <= tol {
            for i in j + 1..3 {
                let off = cov[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
                if off.abs() > tol.sqrt() * scale_.sqrt() {
                    return Err(Error::invalid("covariance must be positive semi-definite"));
                }
            }
            continue;
        }
        let pivot = d.sqrt();
        l[j][j] = pivot;
        for i in j + 1..3 {
            l[i][j] = (cov[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>()) / pivot;
        }
    }
    Ok(l)
}

fn gaussian3(rng: &mut ChaCha8Rng) -> Point3 {
    [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)]
}

/// Perturbs every point independently according to `spec`.
pub fn apply_noise(cloud: &PointCloud, spec: &NoiseSpec) -> Result<PointCloud> {
    spec.pattern.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut offsets: Box<dyn FnMut(&mut ChaCha8Rng) -> Point3> = match spec.pattern {
        NoisePattern::GaussianIso { sigma } => Box::new(move |r| scale(gaussian3(r), sigma)),
        NoisePattern::Laplace { b } => Box::new(move |r| {
            [0; 3].map(|_| {
                if b == 0.0 {
                    return 0.0;
                }
                // open interval, so the logarithm stays finite
                let u: f64 = loop {
                    let u = r.random_range(-0.5..0.5);
                    if u > -0.5 {
                        break u;
                    }
                };
                -b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
            })
        }),
        NoisePattern::Discrete { levels, sigma } => {
            let table: Vec<Point3> = (0..levels)
                .map(|_| loop {
                    let v = gaussian3(&mut rng);
                    let n = norm(v);
                    if n > 1e-12 {
                        break scale(v, sigma / n);
                    }
                })
                .collect();
            Box::new(move |r| table[r.random_range(0..table.len())])
        }
        NoisePattern::GaussianAniso { cov } => {
            let l = cholesky(&cov)?;
            Box::new(move |r| {
                let z = gaussian3(r);
                [0, 1, 2].map(|i| (0..=i).map(|k| l[i][k] * z[k]).sum())
            })
        }
        NoisePattern::GaussianUnidir { direction, sigma } => {
            let d = scale(direction, 1.0 / norm(direction));
            Box::new(move |r| {
                let z: f64 = r.sample(StandardNormal);
                scale(d, sigma * z)
            })
        }
        NoisePattern::Uniform { a } => Box::new(move |r| {
            if a == 0.0 {
                [0.0; 3]
            } else {
                [0; 3].map(|_| r.random_range(-a..a))
            }
        }),
    };
    let pts = cloud.points().iter().map(|&p| add(p, offsets(&mut rng))).collect();
    PointCloud::new(pts)
}

/// Convenience: isotropic Gaussian noise of standard deviation `sigma`.
pub fn gaussian(sigma: f64, seed: u64) -> NoiseSpec {
    NoiseSpec {
        pattern: NoisePattern::GaussianIso { sigma },
        seed,
    }
}
