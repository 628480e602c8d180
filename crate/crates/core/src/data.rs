//! Synthetic point-cloud datasets, `.xyz` files and splits.
//!
//! Dataset directory layout:
//!
//! ```text
//! <dir>/classes.txt    one class name per line; line i names label i
//! <dir>/manifest.csv   one "id,label" record per line
//! <dir>/<id>.xyz       one "x y z" line per point
//! ```

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unknown shape kind `{0}`")]
    UnknownKind(String),
    #[error("need at least {min} points, got {got}")]
    TooFewPoints { min: usize, got: usize },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{0}: no points")]
    Empty(PathBuf),
    #[error("non-finite coordinate in cloud `{0}`")]
    NonFinite(String),
    #[error("class {class} has {have} clouds, {need} requested")]
    NotEnough {
        class: usize,
        have: usize,
        need: usize,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub type Point = [f64; 3];

/// A labelled set of 3D points.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub label: usize,
    pub id: String,
}

impl PointCloud {
    pub fn new(points: Vec<Point>, label: usize, id: impl Into<String>) -> Result<Self, DataError> {
        let id = id.into();
        if points.is_empty() {
            return Err(DataError::TooFewPoints { min: 1, got: 0 });
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(DataError::NonFinite(id));
        }
        Ok(Self { points, label, id })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Points as an `N × 3` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.points.iter().flatten().copied().collect();
        Tensor::matrix(self.points.len(), 3, data).expect("N x 3")
    }

    pub fn centroid(&self) -> Point {
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / n)
    }

    pub fn max_radius(&self) -> f64 {
        self.points
            .iter()
            .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
            .fold(0.0, f64::max)
    }

    /// Centers on the centroid and scales the farthest point to radius 1.
    pub fn normalize(&mut self) {
        let c = self.centroid();
        for p in &mut self.points {
            for k in 0..3 {
                p[k] -= c[k];
            }
        }
        let r = self.max_radius();
        if r > 0.0 {
            for p in &mut self.points {
                for v in p.iter_mut() {
                    *v /= r;
                }
            }
        }
    }

    /// A new cloud holding the points at `indices`, same label and id.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            label: self.label,
            id: self.id.clone(),
        }
    }

    /// Indices of a uniformly random subset of `k` points.
    pub fn subsample_indices(&self, k: usize, rng: &mut impl Rng) -> Vec<usize> {
        let k = k.min(self.len());
        rand::seq::index::sample(rng, self.len(), k).into_vec()
    }

    /// Indices of the `k` nearest neighbours of point `anchor` (itself
    /// included), nearest first; ties broken by index.
    pub fn knn_indices(&self, anchor: usize, k: usize) -> Vec<usize> {
        let a = self.points[anchor];
        let mut d: Vec<(f64, usize)> = self
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let dx = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
                (dx[0] * dx[0] + dx[1] * dx[1] + dx[2] * dx[2], i)
            })
            .collect();
        let k = k.min(d.len());
        let by = |x: &(f64, usize), y: &(f64, usize)| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1));
        if k < d.len() {
            d.select_nth_unstable_by(k, by);
            d.truncate(k);
        }
        d.sort_by(by);
        d.into_iter().map(|(_, i)| i).collect()
    }

    /// A spatially contiguous part: the `k` nearest neighbours of a random point.
    pub fn random_part(&self, k: usize, rng: &mut impl Rng) -> PointCloud {
        let anchor = rng.random_range(0..self.len());
        self.select(&self.knn_indices(anchor, k))
    }
}

/// The procedural shape classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Sphere,
    Cube,
    Cylinder,
    Cone,
    Torus,
    Pyramid,
    Table,
    Chair,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 8] = [
        ShapeKind::Sphere,
        ShapeKind::Cube,
        ShapeKind::Cylinder,
        ShapeKind::Cone,
        ShapeKind::Torus,
        ShapeKind::Pyramid,
        ShapeKind::Table,
        ShapeKind::Chair,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cube => "cube",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Cone => "cone",
            ShapeKind::Torus => "torus",
            ShapeKind::Pyramid => "pyramid",
            ShapeKind::Table => "table",
            ShapeKind::Chair => "chair",
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| DataError::UnknownKind(s.to_string()))
    }
}

/// Minimum point count accepted by [`generate_shape`].
pub const MIN_GENERATED_POINTS: usize = 8;

/// Elementary surfaces; all axis-aligned with z vertical.
#[derive(Debug, Clone)]
enum Surface {
    Sphere { radius: f64 },
    /// Parallelogram `origin + s·u + t·v`, `s, t ∈ [0, 1]`.
    Quad { origin: Point, u: Point, v: Point },
    Triangle { a: Point, b: Point, c: Point },
    /// Horizontal disk.
    Disk { center: Point, radius: f64 },
    /// Open vertical tube from `base` up by `height`.
    Tube { base: Point, radius: f64, height: f64 },
    /// Open cone with base circle at `base`, apex straight above.
    ConeSide { base: Point, radius: f64, height: f64 },
    Torus { major: f64, minor: f64 },
}

fn cross(a: Point, b: Point) -> Point {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn len3(a: Point) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn sub3(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

impl Surface {
    fn area(&self) -> f64 {
        match *self {
            Surface::Sphere { radius } => 4.0 * PI * radius * radius,
            Surface::Quad { u, v, .. } => len3(cross(u, v)),
            Surface::Triangle { a, b, c } => 0.5 * len3(cross(sub3(b, a), sub3(c, a))),
            Surface::Disk { radius, .. } => PI * radius * radius,
            Surface::Tube { radius, height, .. } => 2.0 * PI * radius * height,
            Surface::ConeSide { radius, height, .. } => PI * radius * radius.hypot(height),
            Surface::Torus { major, minor } => 4.0 * PI * PI * major * minor,
        }
    }

    fn sample(&self, rng: &mut impl Rng) -> Point {
        match *self {
            Surface::Sphere { radius } => loop {
                let v: Point = [
                    rng.sample(rand_distr::StandardNormal),
                    rng.sample(rand_distr::StandardNormal),
                    rng.sample(rand_distr::StandardNormal),
                ];
                let n = len3(v);
                if n > 1e-12 {
                    break v.map(|x| x / n * radius);
                }
            },
            Surface::Quad { origin, u, v } => {
                let (s, t): (f64, f64) = (rng.random(), rng.random());
                [0, 1, 2].map(|k| origin[k] + s * u[k] + t * v[k])
            }
            Surface::Triangle { a, b, c } => {
                let (r1, r2): (f64, f64) = (rng.random(), rng.random());
                let s = r1.sqrt();
                [0, 1, 2].map(|k| (1.0 - s) * a[k] + s * (1.0 - r2) * b[k] + s * r2 * c[k])
            }
            Surface::Disk { center, radius } => {
                let r = radius * rng.random::<f64>().sqrt();
                let th = rng.random_range(0.0..2.0 * PI);
                [center[0] + r * th.cos(), center[1] + r * th.sin(), center[2]]
            }
            Surface::Tube {
                base,
                radius,
                height,
            } => {
                let th = rng.random_range(0.0..2.0 * PI);
                let z = rng.random_range(0.0..height);
                [
                    base[0] + radius * th.cos(),
                    base[1] + radius * th.sin(),
                    base[2] + z,
                ]
            }
            Surface::ConeSide {
                base,
                radius,
                height,
            } => {
                // Distance from the apex along the slant has density ∝ t.
                let t = rng.random::<f64>().sqrt();
                let th = rng.random_range(0.0..2.0 * PI);
                [
                    base[0] + t * radius * th.cos(),
                    base[1] + t * radius * th.sin(),
                    base[2] + height * (1.0 - t),
                ]
            }
            Surface::Torus { major, minor } => loop {
                let u = rng.random_range(0.0..2.0 * PI);
                let v = rng.random_range(0.0..2.0 * PI);
                let w = (major + minor * v.cos()) / (major + minor);
                if rng.random::<f64>() < w {
                    let ring = major + minor * v.cos();
                    break [ring * u.cos(), ring * u.sin(), minor * v.sin()];
                }
            },
        }
    }
}

fn box_faces(center: Point, half: Point) -> Vec<Surface> {
    let [cx, cy, cz] = center;
    let [hx, hy, hz] = half;
    let lo = [cx - hx, cy - hy, cz - hz];
    let (ex, ey, ez) = ([2.0 * hx, 0.0, 0.0], [0.0, 2.0 * hy, 0.0], [0.0, 0.0, 2.0 * hz]);
    let mut faces = Vec::with_capacity(6);
    for (u, v, offset) in [(ex, ey, ez), (ey, ez, ex), (ex, ez, ey)] {
        faces.push(Surface::Quad { origin: lo, u, v });
        faces.push(Surface::Quad {
            origin: [lo[0] + offset[0], lo[1] + offset[1], lo[2] + offset[2]],
            u,
            v,
        });
    }
    faces
}

fn legs(half_x: f64, half_y: f64, inset: f64, radius: f64, height: f64) -> Vec<Surface> {
    [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)]
        .into_iter()
        .map(|(sx, sy)| Surface::Tube {
            base: [sx * (half_x - inset), sy * (half_y - inset), 0.0],
            radius,
            height,
        })
        .collect()
}

/// Surfaces of one randomly proportioned instance of `kind`.
fn build_surfaces(kind: ShapeKind, rng: &mut impl Rng) -> Vec<Surface> {
    match kind {
        ShapeKind::Sphere => vec![Surface::Sphere { radius: 1.0 }],
        ShapeKind::Cube => {
            let half = [0; 3].map(|_| rng.random_range(0.8..1.2));
            box_faces([0.0; 3], half)
        }
        ShapeKind::Cylinder => {
            let height = rng.random_range(1.0..3.0);
            vec![
                Surface::Tube {
                    base: [0.0, 0.0, 0.0],
                    radius: 1.0,
                    height,
                },
                Surface::Disk {
                    center: [0.0, 0.0, 0.0],
                    radius: 1.0,
                },
                Surface::Disk {
                    center: [0.0, 0.0, height],
                    radius: 1.0,
                },
            ]
        }
        ShapeKind::Cone => vec![
            Surface::ConeSide {
                base: [0.0; 3],
                radius: 1.0,
                height: rng.random_range(1.0..2.5),
            },
            Surface::Disk {
                center: [0.0; 3],
                radius: 1.0,
            },
        ],
        ShapeKind::Torus => vec![Surface::Torus {
            major: 1.0,
            minor: rng.random_range(0.2..0.45),
        }],
        ShapeKind::Pyramid => {
            let h = rng.random_range(1.0..2.0);
            let apex = [0.0, 0.0, h];
            let corners = [[-1.0, -1.0, 0.0], [1.0, -1.0, 0.0], [1.0, 1.0, 0.0], [-1.0, 1.0, 0.0]];
            let mut s: Vec<Surface> = (0..4)
                .map(|i| Surface::Triangle {
                    a: corners[i],
                    b: corners[(i + 1) % 4],
                    c: apex,
                })
                .collect();
            s.push(Surface::Quad {
                origin: corners[0],
                u: [2.0, 0.0, 0.0],
                v: [0.0, 2.0, 0.0],
            });
            s
        }
        ShapeKind::Table => {
            let hx = rng.random_range(0.8..1.2);
            let hy = rng.random_range(0.5..0.9);
            let height = rng.random_range(0.8..1.3);
            let radius = rng.random_range(0.04..0.08);
            let mut s = vec![Surface::Quad {
                origin: [-hx, -hy, height],
                u: [2.0 * hx, 0.0, 0.0],
                v: [0.0, 2.0 * hy, 0.0],
            }];
            s.extend(legs(hx, hy, 0.1, radius, height));
            s
        }
        ShapeKind::Chair => {
            let hx = rng.random_range(0.4..0.6);
            let hy = rng.random_range(0.4..0.6);
            let seat = rng.random_range(0.7..1.0);
            let back = rng.random_range(0.7..1.1);
            let radius = rng.random_range(0.03..0.06);
            let mut s = vec![
                Surface::Quad {
                    origin: [-hx, -hy, seat],
                    u: [2.0 * hx, 0.0, 0.0],
                    v: [0.0, 2.0 * hy, 0.0],
                },
                Surface::Quad {
                    origin: [-hx, hy, seat],
                    u: [2.0 * hx, 0.0, 0.0],
                    v: [0.0, 0.0, back],
                },
            ];
            s.extend(legs(hx, hy, 0.05, radius, seat));
            s
        }
    }
}

/// Samples `n` points uniformly by area over the surfaces, before any
/// jitter, rotation or normalization.
fn sample_surfaces(surfaces: &[Surface], n: usize, rng: &mut impl Rng) -> Vec<Point> {
    let areas: Vec<f64> = surfaces.iter().map(Surface::area).collect();
    let total: f64 = areas.iter().sum();
    (0..n)
        .map(|_| {
            let mut r = rng.random::<f64>() * total;
            let mut pick = surfaces.len() - 1;
            for (i, a) in areas.iter().enumerate() {
                if r < *a {
                    pick = i;
                    break;
                }
                r -= a;
            }
            surfaces[pick].sample(rng)
        })
        .collect()
}

/// Generates one procedurally varied instance of `kind` with `n` points,
/// jittered by isotropic Gaussian noise of standard deviation `noise_sigma`
/// (relative to the unit radius), rotated about the vertical axis and
/// normalized to the unit ball.
pub fn generate_shape(
    kind: ShapeKind,
    n: usize,
    noise_sigma: f64,
    rng: &mut impl Rng,
) -> Result<PointCloud, DataError> {
    if n < MIN_GENERATED_POINTS {
        return Err(DataError::TooFewPoints {
            min: MIN_GENERATED_POINTS,
            got: n,
        });
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(DataError::Invalid(format!("noise sigma {noise_sigma}")));
    }
    let surfaces = build_surfaces(kind, rng);
    let mut cloud = PointCloud::new(sample_surfaces(&surfaces, n, rng), 0, kind.name())?;
    cloud.normalize();
    if noise_sigma > 0.0 {
        let noise = Normal::new(0.0, noise_sigma).expect("valid sigma");
        for p in &mut cloud.points {
            for v in p.iter_mut() {
                *v += noise.sample(rng);
            }
        }
    }
    let theta = rng.random_range(0.0..2.0 * PI);
    let (s, c) = theta.sin_cos();
    for p in &mut cloud.points {
        let [x, y, z] = *p;
        *p = [c * x - s * y, s * x + c * y, z];
    }
    cloud.normalize();
    Ok(cloud)
}

/// Description of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub classes: Vec<ShapeKind>,
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub points_per_cloud: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            classes: ShapeKind::ALL.to_vec(),
            per_class_train: 125,
            per_class_test: 125,
            points_per_cloud: 1024,
            noise_sigma: 0.04,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self, whole_min: usize) -> Result<(), DataError> {
        if self.classes.is_empty() || self.per_class_train == 0 || self.per_class_test == 0 {
            return Err(DataError::Invalid("class list and per-class counts must be non-empty".into()));
        }
        if self.points_per_cloud < whole_min.max(MIN_GENERATED_POINTS) {
            return Err(DataError::TooFewPoints {
                min: whole_min.max(MIN_GENERATED_POINTS),
                got: self.points_per_cloud,
            });
        }
        Ok(())
    }
}

/// Labelled clouds plus class names; label `i` names `class_names[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub clouds: Vec<PointCloud>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }

    /// Cloud indices grouped by label.
    pub fn by_label(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes()];
        for (i, c) in self.clouds.iter().enumerate() {
            out[c.label].push(i);
        }
        out
    }
}

/// Derives an independent generator for stream `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generates `per_class_train + per_class_test` clouds per class. Every
/// cloud has its own generator derived from the seed, class and index.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset, DataError> {
    spec.validate(0)?;
    let per_class = spec.per_class_train + spec.per_class_test;
    let mut clouds = Vec::with_capacity(per_class * spec.classes.len());
    for (label, kind) in spec.classes.iter().enumerate() {
        for i in 0..per_class {
            let mut rng = stream_rng(spec.seed, (label as u64) << 32 | i as u64);
            let mut cloud = generate_shape(*kind, spec.points_per_cloud, spec.noise_sigma, &mut rng)?;
            cloud.label = label;
            cloud.id = format!("{}_{:04}", kind.name(), i);
            clouds.push(cloud);
        }
    }
    Ok(Dataset {
        class_names: spec.classes.iter().map(|k| k.name().to_string()).collect(),
        clouds,
    })
}

/// Stratified split with exactly `per_class_train` / `per_class_test`
/// clouds of every class, chosen by a generator seeded with `seed`.
pub fn split(
    dataset: &Dataset,
    per_class_train: usize,
    per_class_test: usize,
    seed: u64,
) -> Result<(Dataset, Dataset), DataError> {
    let mut rng = stream_rng(seed, u64::MAX);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, mut idx) in dataset.by_label().into_iter().enumerate() {
        let need = per_class_train + per_class_test;
        if idx.len() < need {
            return Err(DataError::NotEnough {
                class,
                have: idx.len(),
                need,
            });
        }
        idx.shuffle(&mut rng);
        train.extend(idx[..per_class_train].iter().copied());
        test.extend(idx[per_class_train..need].iter().copied());
    }
    train.sort_unstable();
    test.sort_unstable();
    let pick = |ids: Vec<usize>| Dataset {
        class_names: dataset.class_names.clone(),
        clouds: ids.into_iter().map(|i| dataset.clouds[i].clone()).collect(),
    };
    Ok((pick(train), pick(test)))
}

/// Writes one `x y z` line per point with round-trip precision.
pub fn save_xyz(path: &Path, cloud: &PointCloud) -> Result<(), DataError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for p in &cloud.points {
        writeln!(w, "{:?} {:?} {:?}", p[0], p[1], p[2]).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Parses whitespace-separated `x y z` lines without normalizing.
/// Blank lines and lines starting with `#` are skipped.
pub fn read_xyz_raw(path: &Path) -> Result<Vec<Point>, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |msg: String| DataError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(parse_err(format!("expected 3 fields, found {}", fields.len())));
        }
        let mut p = [0.0; 3];
        for (k, f) in fields.iter().enumerate() {
            let v: f64 = f
                .parse()
                .map_err(|_| parse_err(format!("invalid number `{f}`")))?;
            if !v.is_finite() {
                return Err(parse_err(format!("non-finite value `{f}`")));
            }
            p[k] = v;
        }
        points.push(p);
    }
    if points.is_empty() {
        return Err(DataError::Empty(path.to_path_buf()));
    }
    Ok(points)
}

/// Loads and normalizes a cloud; the id is the file stem and the label 0.
pub fn load_xyz(path: &Path) -> Result<PointCloud, DataError> {
    let points = read_xyz_raw(path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut cloud = PointCloud::new(points, 0, id)?;
    cloud.normalize();
    Ok(cloud)
}

/// Parses `id,label` records; a leading `id,label` header is ignored.
pub fn read_manifest(path: &Path) -> Result<Vec<(String, usize)>, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line == "id,label") {
            continue;
        }
        let parse_err = |msg: &str| DataError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: msg.to_string(),
        };
        let (id, label) = line.split_once(',').ok_or_else(|| parse_err("expected `id,label`"))?;
        let label = label
            .trim()
            .parse()
            .map_err(|_| parse_err("label must be a non-negative integer"))?;
        out.push((id.trim().to_string(), label));
    }
    Ok(out)
}

pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let classes = dir.join("classes.txt");
    fs::write(&classes, dataset.class_names.join("\n") + "\n").map_err(io_err(&classes))?;
    let manifest = dir.join("manifest.csv");
    let mut m = String::new();
    for c in &dataset.clouds {
        m.push_str(&format!("{},{}\n", c.id, c.label));
        save_xyz(&dir.join(format!("{}.xyz", c.id)), c)?;
    }
    fs::write(&manifest, m).map_err(io_err(&manifest))
}

/// Loads a dataset directory. Without `classes.txt`, classes are named by
/// their label index.
pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let records = read_manifest(&dir.join("manifest.csv"))?;
    if records.is_empty() {
        return Err(DataError::Empty(dir.join("manifest.csv")));
    }
    let max_label = records.iter().map(|r| r.1).max().unwrap_or(0);
    let classes_path = dir.join("classes.txt");
    let class_names: Vec<String> = if classes_path.exists() {
        fs::read_to_string(&classes_path)
            .map_err(io_err(&classes_path))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect()
    } else {
        (0..=max_label).map(|i| i.to_string()).collect()
    };
    if max_label >= class_names.len() {
        return Err(DataError::Invalid(format!(
            "label {max_label} but only {} classes listed",
            class_names.len()
        )));
    }
    let mut seen = BTreeMap::new();
    let mut clouds = Vec::with_capacity(records.len());
    for (id, label) in records {
        if seen.insert(id.clone(), ()).is_some() {
            return Err(DataError::Invalid(format!("duplicate id `{id}`")));
        }
        let mut cloud = load_xyz(&dir.join(format!("{id}.xyz")))?;
        cloud.label = label;
        cloud.id = id;
        clouds.push(cloud);
    }
    Ok(Dataset {
        class_names,
        clouds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn raw_sphere_points_share_a_radius() {
        let pts = sample_surfaces(&build_surfaces(ShapeKind::Sphere, &mut rng(0)), 500, &mut rng(1));
        for p in pts {
            assert!((len3(p) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn table_has_a_top_and_four_legs() {
        let surfaces = build_surfaces(ShapeKind::Table, &mut rng(2));
        let pts = sample_surfaces(&surfaces, 4000, &mut rng(3));
        let top = pts.iter().map(|p| p[2]).fold(f64::MIN, f64::max);
        // z histogram: a spike at the top, a flat spread over the legs
        let bins = 10;
        let mut hist = vec![0usize; bins];
        for p in &pts {
            let b = ((p[2] / top) * bins as f64).min(bins as f64 - 1.0) as usize;
            hist[b] += 1;
        }
        let (top_bin, rest) = hist.split_last().unwrap();
        assert!(*top_bin > pts.len() / 3, "{hist:?}");
        let leg_mean = rest.iter().sum::<usize>() as f64 / rest.len() as f64;
        assert!(leg_mean > 0.0 && (*top_bin as f64) > 5.0 * leg_mean, "{hist:?}");
        let mut quadrants = [0usize; 4];
        let mut below = 0;
        for p in pts.iter().filter(|p| p[2] < top - 1e-9) {
            below += 1;
            quadrants[(p[0] > 0.0) as usize * 2 + (p[1] > 0.0) as usize] += 1;
        }
        for q in quadrants {
            assert!(q as f64 > 0.15 * below as f64, "{quadrants:?}");
        }
    }

    #[test]
    fn generated_clouds_are_normalized_and_deterministic() {
        for kind in ShapeKind::ALL {
            let a = generate_shape(kind, 256, 0.01, &mut rng(9)).unwrap();
            let b = generate_shape(kind, 256, 0.01, &mut rng(9)).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.len(), 256);
            let c = a.centroid();
            assert!(c.iter().all(|v| v.abs() < 1e-12), "{kind}: {c:?}");
            assert!(a.max_radius() <= 1.0 + 1e-9);
            assert!((a.max_radius() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn generator_errors() {
        assert!(matches!(
            generate_shape(ShapeKind::Cube, 7, 0.0, &mut rng(0)),
            Err(DataError::TooFewPoints { .. })
        ));
        assert!(matches!("dodecahedron".parse::<ShapeKind>(), Err(DataError::UnknownKind(_))));
        assert_eq!("torus".parse::<ShapeKind>().unwrap(), ShapeKind::Torus);
    }

    #[test]
    fn knn_part_is_subset_and_contiguous() {
        let cloud = generate_shape(ShapeKind::Chair, 1024, 0.01, &mut rng(4)).unwrap();
        let mut r = rng(5);
        let all: HashSet<[u64; 3]> = cloud.points.iter().map(|p| p.map(f64::to_bits)).collect();
        let diameter = {
            let mut d: f64 = 0.0;
            for a in &cloud.points {
                for b in &cloud.points {
                    d = d.max(len3(sub3(*a, *b)));
                }
            }
            d
        };
        for k in [200, 400, 600] {
            let part = cloud.random_part(k, &mut r);
            assert_eq!(part.len(), k);
            assert!(part.points.iter().all(|p| all.contains(&p.map(f64::to_bits))));
            let mut spread: f64 = 0.0;
            for a in &part.points {
                for b in &part.points {
                    spread = spread.max(len3(sub3(*a, *b)));
                }
            }
            assert!(spread < diameter);
        }
    }

    #[test]
    fn knn_matches_brute_force_sort() {
        let cloud = generate_shape(ShapeKind::Torus, 300, 0.0, &mut rng(6)).unwrap();
        let a = cloud.points[17];
        let mut order: Vec<usize> = (0..cloud.len()).collect();
        order.sort_by(|&i, &j| {
            let di = len3(sub3(cloud.points[i], a));
            let dj = len3(sub3(cloud.points[j], a));
            di.total_cmp(&dj).then(i.cmp(&j))
        });
        let knn = cloud.knn_indices(17, 50);
        assert_eq!(knn[0], 17);
        let expected: HashSet<usize> = order[..50].iter().copied().collect();
        assert_eq!(knn.iter().copied().collect::<HashSet<_>>(), expected);
    }

    #[test]
    fn split_is_stratified_disjoint_and_seeded() {
        let spec = DatasetSpec {
            classes: vec![ShapeKind::Sphere, ShapeKind::Cube, ShapeKind::Cone],
            per_class_train: 20,
            per_class_test: 5,
            points_per_cloud: 16,
            noise_sigma: 0.01,
            seed: 3,
        };
        let ds = generate_dataset(&spec).unwrap();
        let (train, test) = split(&ds, 20, 5, 11).unwrap();
        for (set, n) in [(&train, 20), (&test, 5)] {
            for idx in set.by_label() {
                assert_eq!(idx.len(), n);
            }
        }
        let ids: HashSet<&str> = train.clouds.iter().map(|c| c.id.as_str()).collect();
        assert!(test.clouds.iter().all(|c| !ids.contains(c.id.as_str())));
        let (train2, test2) = split(&ds, 20, 5, 11).unwrap();
        assert_eq!(train, train2);
        assert_eq!(test, test2);
        let (train3, _) = split(&ds, 20, 5, 12).unwrap();
        assert_ne!(train, train3);
        assert!(matches!(split(&ds, 24, 5, 0), Err(DataError::NotEnough { .. })));
    }

    #[test]
    fn dataset_generation_is_deterministic() {
        let spec = DatasetSpec {
            classes: vec![ShapeKind::Table, ShapeKind::Chair],
            per_class_train: 2,
            per_class_test: 1,
            points_per_cloud: 64,
            noise_sigma: 0.01,
            seed: 42,
        };
        assert_eq!(generate_dataset(&spec).unwrap(), generate_dataset(&spec).unwrap());
    }

    #[test]
    fn xyz_io() {
        let dir = tempfile::tempdir().unwrap();
        let three = dir.path().join("three.xyz");
        fs::write(&three, "0 0 0\n1 0 0\n0 1 0.5\n").unwrap();
        assert_eq!(load_xyz(&three).unwrap().len(), 3);

        let bad = dir.path().join("bad.xyz");
        fs::write(&bad, "a b c\n").unwrap();
        match load_xyz(&bad) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
        let empty = dir.path().join("empty.xyz");
        fs::write(&empty, "\n").unwrap();
        assert!(matches!(load_xyz(&empty), Err(DataError::Empty(_))));

        let cloud = generate_shape(ShapeKind::Cone, 100, 0.01, &mut rng(8)).unwrap();
        let path = dir.path().join("cone.xyz");
        save_xyz(&path, &cloud).unwrap();
        let back = load_xyz(&path).unwrap();
        for (a, b) in back.points.iter().zip(&cloud.points) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
        assert_eq!(read_xyz_raw(&path).unwrap(), cloud.points);
    }

    #[test]
    fn dataset_directory_roundtrip() {
        let spec = DatasetSpec {
            classes: vec![ShapeKind::Cube, ShapeKind::Pyramid],
            per_class_train: 2,
            per_class_test: 1,
            points_per_cloud: 32,
            noise_sigma: 0.0,
            seed: 1,
        };
        let ds = generate_dataset(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.class_names, ds.class_names);
        assert_eq!(back.len(), ds.len());
        for (a, b) in back.clouds.iter().zip(&ds.clouds) {
            assert_eq!((a.id.as_str(), a.label), (b.id.as_str(), b.label));
        }
    }
}
