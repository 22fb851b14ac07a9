//! Procedural ground truth.
//!
//! Scenes are flat canvases covered by randomly colored shapes: sphere caps
//! (analytic normals, hence smooth Lambertian shading) and flat convex
//! polygons. Reflectance is piecewise constant by construction and the image
//! is composed from the rendered components with the same functions the rest
//! of the toolkit uses, so every sample satisfies its formation equation
//! exactly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::image::{
    compose_diffuse, compose_specular, compose_with_light, Illuminant, Image, IntrinsicSet,
};
use crate::io::{extension, read_image, read_pfm, read_png, write_pfm};
use crate::rng::{derive_seed, stream};
use crate::{Error, Result};

/// Which formation equation a sample is composed with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Formation {
    /// `I = R x S`
    Diffuse,
    /// `I = R x S x E`, global light color
    GlobalLight,
    /// `I = R x S + H`
    Specular,
    /// `I = R x S x E + H x E`, global light color
    Full,
}

impl Formation {
    pub const ALL: [Formation; 4] = [
        Formation::Diffuse,
        Formation::GlobalLight,
        Formation::Specular,
        Formation::Full,
    ];

    pub fn has_specular(self) -> bool {
        matches!(self, Formation::Specular | Formation::Full)
    }

    pub fn has_illuminant(self) -> bool {
        matches!(self, Formation::GlobalLight | Formation::Full)
    }

    pub fn name(self) -> &'static str {
        match self {
            Formation::Diffuse => "diffuse",
            Formation::GlobalLight => "global-light",
            Formation::Specular => "specular",
            Formation::Full => "full",
        }
    }
}

impl std::str::FromStr for Formation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Formation::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown formation {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Canvas {
    pub height: usize,
    pub width: usize,
}

impl Canvas {
    pub const DESK: Canvas = Canvas {
        height: 32,
        width: 32,
    };
    pub const PAPER: Canvas = Canvas {
        height: 120,
        width: 160,
    };
}

impl std::str::FromStr for Canvas {
    type Err = Error;

    /// Parses `HxW`, e.g. `120x160`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Usage(format!("canvas must look like HxW, got {s:?}"));
        let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
        let height: usize = h.trim().parse().map_err(|_| bad())?;
        let width: usize = w.trim().parse().map_err(|_| bad())?;
        if height < 2 || width < 2 {
            return Err(bad());
        }
        Ok(Canvas { height, width })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ShapeKind {
    /// Disk shaded as a spherical cap whose normal tilts up to `tilt_deg`
    /// at the rim.
    SphereCap { tilt_deg: f32 },
    /// Flat convex polygon with vertices on the circle of radius `size`.
    Polygon { angles: Vec<f32> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    #[serde(flatten)]
    pub kind: ShapeKind,
    /// Center in pixel coordinates `(x, y)`; pixel `(i, j)` samples `(j + 0.5, i + 0.5)`.
    pub position: [f32; 2],
    pub size: f32,
    pub albedo: [f32; 3],
}

/// Canvas-wide spherical surface. When present it supplies every normal and
/// shapes only change albedo.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dome {
    /// Apex in pixel coordinates `(x, y)`.
    pub center: [f32; 2],
    pub radius: f32,
}

impl Dome {
    fn normal(&self, x: f32, y: f32) -> [f32; 3] {
        let nx = (x - self.center[0]) / self.radius;
        let ny = (y - self.center[1]) / self.radius;
        [nx, ny, (1.0 - nx * nx - ny * ny).max(0.0).sqrt()]
    }

    /// Lipschitz bound of the normal over `canvas`.
    fn lipschitz(&self, canvas: Canvas) -> f32 {
        let sin = farthest_corner(canvas, self.center) / self.radius;
        1.0 / (self.radius * (1.0 - sin * sin).max(1e-6).sqrt())
    }
}

fn farthest_corner(canvas: Canvas, p: [f32; 2]) -> f32 {
    let dx = p[0].max(canvas.width as f32 - p[0]);
    let dy = p[1].max(canvas.height as f32 - p[1]);
    (dx * dx + dy * dy).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpecularSpec {
    pub strength: f32,
    pub exponent: f32,
}

/// Everything needed to render one sample. Shapes later in the list are
/// drawn on top.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub canvas: Canvas,
    pub background_albedo: [f32; 3],
    pub shapes: Vec<Shape>,
    /// Unit vector toward the light, `z` along the canvas normal.
    pub light_direction: [f32; 3],
    pub light_color: [f32; 3],
    pub ambient: f32,
    pub specular: Option<SpecularSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dome: Option<Dome>,
}

/// Ranges the scene generator samples from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub canvas: Canvas,
    pub shape_count: [usize; 2],
    /// Shape radius as a fraction of the shorter canvas side.
    pub radius_fraction: [f32; 2],
    pub cap_tilt_deg: [f32; 2],
    pub polygon_probability: f32,
    pub albedo: [f32; 2],
    pub ambient: [f32; 2],
    /// Lowest allowed `z` of the light direction.
    pub min_light_elevation: f32,
    pub light_color: [f32; 2],
    pub specular_strength: [f32; 2],
    pub specular_exponent: [f32; 2],
    /// Tilt of the dome normal at the farthest canvas corner; `None` keeps
    /// each shape's own geometry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dome_tilt_deg: Option<[f32; 2]>,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            canvas: Canvas::DESK,
            shape_count: [2, 5],
            radius_fraction: [0.15, 0.4],
            cap_tilt_deg: [30.0, 70.0],
            polygon_probability: 0.35,
            albedo: [0.05, 1.0],
            ambient: [0.1, 0.4],
            min_light_elevation: 0.25,
            light_color: [0.6, 1.0],
            specular_strength: [0.1, 0.6],
            specular_exponent: [10.0, 60.0],
            dome_tilt_deg: None,
        }
    }
}

impl SceneParams {
    pub fn with_canvas(canvas: Canvas) -> Self {
        SceneParams {
            canvas,
            ..Default::default()
        }
    }

    /// Flat albedo shapes on one gently curved dome under white light:
    /// piecewise-constant reflectance over continuous, slowly varying shading.
    pub fn smooth_shading(canvas: Canvas) -> Self {
        SceneParams {
            canvas,
            shape_count: [3, 6],
            radius_fraction: [0.2, 0.4],
            cap_tilt_deg: [15.0, 35.0],
            polygon_probability: 0.4,
            ambient: [0.3, 0.5],
            min_light_elevation: 0.5,
            light_color: [1.0, 1.0],
            dome_tilt_deg: Some([20.0, 40.0]),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |name: &str, r: [f32; 2], lo: f32, hi: f32| {
            if r[0] <= r[1] && r[0] >= lo && r[1] <= hi && r[0].is_finite() && r[1].is_finite() {
                Ok(())
            } else {
                Err(Error::Usage(format!("{name} range {r:?} must lie in [{lo}, {hi}]")))
            }
        };
        if self.canvas.height < 2 || self.canvas.width < 2 {
            return Err(Error::Usage("canvas must be at least 2x2".into()));
        }
        if self.shape_count[0] > self.shape_count[1] {
            return Err(Error::Usage("shape_count range is reversed".into()));
        }
        ordered("radius_fraction", self.radius_fraction, 1e-3, 10.0)?;
        ordered("cap_tilt_deg", self.cap_tilt_deg, 1.0, 89.0)?;
        ordered("albedo", self.albedo, 1e-3, 1.0)?;
        ordered("ambient", self.ambient, 0.0, f32::MAX)?;
        ordered("light_color", self.light_color, 1e-3, f32::MAX)?;
        ordered("specular_strength", self.specular_strength, 0.0, f32::MAX)?;
        ordered("specular_exponent", self.specular_exponent, 1.0, f32::MAX)?;
        if let Some(t) = self.dome_tilt_deg {
            ordered("dome_tilt_deg", t, 1.0, 80.0)?;
        }
        if !(0.0..=1.0).contains(&self.polygon_probability)
            || !(0.0..=1.0).contains(&self.min_light_elevation)
        {
            return Err(Error::Usage(
                "polygon_probability and min_light_elevation must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

fn uniform(rng: &mut impl Rng, r: [f32; 2]) -> f32 {
    if r[0] == r[1] {
        // still consume a draw so the stream layout does not depend on the range
        let _: f32 = rng.random();
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

fn rgb(rng: &mut impl Rng, r: [f32; 2]) -> [f32; 3] {
    [uniform(rng, r), uniform(rng, r), uniform(rng, r)]
}

/// Samples a scene. Deterministic in `seed`.
pub fn generate_scene(seed: u64, params: &SceneParams) -> Result<SceneSpec> {
    params.validate()?;
    let mut rng = stream(seed, "scene", &[]);
    let canvas = params.canvas;
    let short = canvas.height.min(canvas.width) as f32;

    let background_albedo = rgb(&mut rng, params.albedo);
    let count = rng.random_range(params.shape_count[0]..=params.shape_count[1]);
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let is_polygon = rng.random::<f32>() < params.polygon_probability;
        let position = [
            rng.random_range(0.0..canvas.width as f32),
            rng.random_range(0.0..canvas.height as f32),
        ];
        let size = uniform(&mut rng, params.radius_fraction) * short;
        let albedo = rgb(&mut rng, params.albedo);
        let tilt_deg = uniform(&mut rng, params.cap_tilt_deg);
        let vertices = rng.random_range(3..=6usize);
        let mut angles: Vec<f32> = (0..vertices)
            .map(|_| rng.random_range(0.0..std::f32::consts::TAU))
            .collect();
        angles.sort_by(f32::total_cmp);
        let kind = if is_polygon {
            ShapeKind::Polygon { angles }
        } else {
            ShapeKind::SphereCap { tilt_deg }
        };
        shapes.push(Shape {
            kind,
            position,
            size,
            albedo,
        });
    }

    // Uniform on the spherical zone z in [min_elevation, 1].
    let z = uniform(&mut rng, [params.min_light_elevation, 1.0]);
    let phi = rng.random_range(0.0..std::f32::consts::TAU);
    let planar = (1.0 - z * z).max(0.0).sqrt();
    let light_direction = normalize([planar * phi.cos(), planar * phi.sin(), z]);
    let light_color = rgb(&mut rng, params.light_color);
    let ambient = uniform(&mut rng, params.ambient);
    let specular = Some(SpecularSpec {
        strength: uniform(&mut rng, params.specular_strength),
        exponent: uniform(&mut rng, params.specular_exponent),
    });
    let dome = params.dome_tilt_deg.map(|tilt| {
        let center = [
            rng.random_range(0.0..canvas.width as f32),
            rng.random_range(0.0..canvas.height as f32),
        ];
        let radius = farthest_corner(canvas, center) / uniform(&mut rng, tilt).to_radians().sin();
        Dome { center, radius }
    });

    Ok(SceneSpec {
        seed,
        canvas,
        background_albedo,
        shapes,
        light_direction,
        light_color,
        ambient,
        specular,
        dome,
    })
}

fn normalize(v: [f32; 3]) -> [f32; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn dot(a: [f32; 3], b: [f32; 3]) -> f32 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

impl Shape {
    fn contains(&self, x: f32, y: f32) -> bool {
        let dx = x - self.position[0];
        let dy = y - self.position[1];
        match &self.kind {
            ShapeKind::SphereCap { .. } => dx * dx + dy * dy < self.size * self.size,
            ShapeKind::Polygon { angles } => {
                let vert = |a: f32| [self.size * a.cos(), self.size * a.sin()];
                let n = angles.len();
                (0..n).all(|k| {
                    let p = vert(angles[k]);
                    let q = vert(angles[(k + 1) % n]);
                    (q[0] - p[0]) * (dy - p[1]) - (q[1] - p[1]) * (dx - p[0]) >= 0.0
                })
            }
        }
    }

    /// Radius of the sphere the cap is cut from.
    fn cap_radius(&self) -> Option<f32> {
        match self.kind {
            ShapeKind::SphereCap { tilt_deg } => Some(self.size / tilt_deg.to_radians().sin()),
            ShapeKind::Polygon { .. } => None,
        }
    }

    fn normal(&self, x: f32, y: f32) -> [f32; 3] {
        match self.cap_radius() {
            Some(rho) => {
                let nx = (x - self.position[0]) / rho;
                let ny = (y - self.position[1]) / rho;
                let nz = (1.0 - nx * nx - ny * ny).max(0.0).sqrt();
                [nx, ny, nz]
            }
            None => [0.0, 0.0, 1.0],
        }
    }

    /// Lipschitz bound of the unit normal along the canvas.
    fn normal_lipschitz(&self) -> f32 {
        match self.kind {
            ShapeKind::SphereCap { tilt_deg } => {
                1.0 / (self.cap_radius().unwrap() * tilt_deg.to_radians().cos())
            }
            ShapeKind::Polygon { .. } => 0.0,
        }
    }
}

/// One rendered sample with its intrinsic ground truth.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Image,
    pub set: IntrinsicSet,
    /// 1 where the region differs from the right or lower neighbor.
    pub edge_mask: Image,
    /// Region index per pixel: 0 for background, `k + 1` for shape `k`.
    pub regions: Vec<u32>,
    /// Upper bound on the shading gradient magnitude off the edge mask.
    pub shading_gradient_bound: f32,
    pub formation: Formation,
    pub spec: SceneSpec,
}

/// Rasterizes a scene and composes its image with the chosen equation.
///
/// In the diffuse and specular modes the light color is folded into shading
/// and highlights, which are then chromatic; with an explicit illuminant they
/// stay achromatic and the light color is the global `E`.
pub fn render(spec: &SceneSpec, formation: Formation) -> Result<Sample> {
    let Canvas { height, width } = spec.canvas;
    let s = spec.light_direction;
    let half = normalize([s[0], s[1], s[2] + 1.0]);
    let fold_light = !formation.has_illuminant();
    let tint = if fold_light {
        spec.light_color
    } else {
        [1.0; 3]
    };

    let mut regions = vec![0u32; height * width];
    let mut refl = Vec::with_capacity(height * width * 3);
    let mut shade = Vec::with_capacity(height * width * 3);
    let mut spec_map = Vec::with_capacity(height * width * 3);
    let mut visible = vec![false; spec.shapes.len()];
    for i in 0..height {
        for j in 0..width {
            let (x, y) = (j as f32 + 0.5, i as f32 + 0.5);
            let top = spec.shapes.iter().rposition(|sh| sh.contains(x, y));
            let (albedo, normal) = match top {
                Some(k) => {
                    visible[k] = true;
                    (spec.shapes[k].albedo, spec.shapes[k].normal(x, y))
                }
                None => (spec.background_albedo, [0.0, 0.0, 1.0]),
            };
            let normal = spec.dome.map_or(normal, |d| d.normal(x, y));
            regions[i * width + j] = top.map_or(0, |k| k as u32 + 1);
            let lambert = spec.ambient + dot(normal, s).max(0.0);
            let highlight = match spec.specular {
                Some(sp) => sp.strength * dot(normal, half).max(0.0).powf(sp.exponent),
                None => 0.0,
            };
            refl.extend_from_slice(&albedo);
            for t in tint {
                shade.push(lambert * t);
                spec_map.push(highlight * t);
            }
        }
    }
    let reflectance = Image::new(height, width, 3, refl)?;
    let shading = Image::new(height, width, 3, shade)?;
    let specular = Image::new(height, width, 3, spec_map)?;
    let light = Illuminant::Global(spec.light_color);

    let image = match formation {
        Formation::Diffuse => compose_diffuse(&reflectance, &shading)?,
        Formation::GlobalLight => compose_with_light(&reflectance, &shading, &light)?,
        Formation::Specular => compose_specular(&reflectance, &shading, &specular, None)?,
        Formation::Full => compose_specular(&reflectance, &shading, &specular, Some(&light))?,
    };

    let edge_mask = Image::from_fn(height, width, 1, |i, j, _| {
        let r = regions[i * width + j];
        let right = j + 1 < width && regions[i * width + j + 1] != r;
        let down = i + 1 < height && regions[(i + 1) * width + j] != r;
        if right || down {
            1.0
        } else {
            0.0
        }
    });

    let max_tint = tint.iter().copied().fold(0.0, f32::max);
    let lipschitz = match spec.dome {
        Some(d) => d.lipschitz(spec.canvas),
        None => spec
            .shapes
            .iter()
            .zip(&visible)
            .filter(|(_, &v)| v)
            .map(|(sh, _)| sh.normal_lipschitz())
            .fold(0.0, f32::max),
    };
    let shading_gradient_bound = std::f32::consts::SQRT_2 * max_tint * lipschitz;

    let set = IntrinsicSet {
        reflectance,
        shading,
        specular: formation.has_specular().then_some(specular),
        illuminant: formation.has_illuminant().then_some(light),
    };
    Ok(Sample {
        image,
        set,
        edge_mask,
        regions,
        shading_gradient_bound,
        formation,
        spec: spec.clone(),
    })
}

/// Seed of sample `index` in a corpus generated from `seed`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, "sample", &[index as u64])
}

/// Renders sample `index` of the corpus defined by `seed`, independently of
/// the other samples.
pub fn render_index(
    seed: u64,
    index: usize,
    formation: Formation,
    params: &SceneParams,
) -> Result<Sample> {
    render(&generate_scene(sample_seed(seed, index), params)?, formation)
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub seed: u64,
    pub image: String,
    pub reflectance: String,
    pub shading: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub specular: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub illuminant: Option<String>,
    pub edge_mask: String,
    pub shading_gradient_bound: f32,
}

/// On-disk index of a generated corpus. File paths are relative to the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub count: usize,
    pub formation: Formation,
    pub canvas: [usize; 2],
    pub seed: u64,
    pub params: SceneParams,
    pub samples: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported manifest version {}", manifest.version),
            ));
        }
        if manifest.count != manifest.samples.len() {
            return Err(Error::format(path, "count does not match sample list"));
        }
        Ok(manifest)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }
}

pub fn sample_id(index: usize) -> String {
    format!("sample_{index:05}")
}

fn write_sample(dir: &Path, id: &str, seed: u64, sample: &Sample) -> Result<ManifestEntry> {
    let name = |part: &str| format!("{id}_{part}.pfm");
    let put = |part: &str, img: &Image| -> Result<String> {
        let file = name(part);
        write_pfm(dir.join(&file), img)?;
        Ok(file)
    };
    Ok(ManifestEntry {
        id: id.to_string(),
        seed,
        image: put("image", &sample.image)?,
        reflectance: put("reflectance", &sample.set.reflectance)?,
        shading: put("shading", &sample.set.shading)?,
        specular: sample
            .set
            .specular
            .as_ref()
            .map(|h| put("specular", h))
            .transpose()?,
        illuminant: sample
            .set
            .illuminant
            .as_ref()
            .map(|e| {
                put(
                    "illuminant",
                    &e.to_image(sample.image.height(), sample.image.width()),
                )
            })
            .transpose()?,
        edge_mask: put("edges", &sample.edge_mask)?,
        shading_gradient_bound: sample.shading_gradient_bound,
    })
}

/// Generates `n` samples into `out_dir` and writes `manifest.json` last.
pub fn dataset_gen(
    n: usize,
    seed: u64,
    out_dir: impl AsRef<Path>,
    formation: Formation,
    params: &SceneParams,
) -> Result<Manifest> {
    params.validate()?;
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let samples = (0..n)
        .into_par_iter()
        .map(|index| {
            let s = sample_seed(seed, index);
            let sample = render(&generate_scene(s, params)?, formation)?;
            write_sample(dir, &sample_id(index), s, &sample)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        count: n,
        formation,
        canvas: [params.canvas.height, params.canvas.width],
        seed,
        params: params.clone(),
        samples,
    };
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, manifest.to_json()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// A sample read back from disk.
#[derive(Debug, Clone)]
pub struct StoredSample {
    pub id: String,
    pub image: Image,
    pub set: IntrinsicSet,
    pub edge_mask: Image,
}

fn illuminant_from_image(img: Image) -> Illuminant {
    let first = [img.get(0, 0, 0), img.get(0, 0, 1), img.get(0, 0, 2)];
    let uniform = img
        .data()
        .chunks_exact(3)
        .all(|px| px == first.as_slice());
    if uniform && first.iter().all(|&v| v > 0.0) {
        Illuminant::Global(first)
    } else {
        Illuminant::PerPixel(img)
    }
}

/// Reads every sample a manifest lists. `manifest_path` may be the manifest
/// file or its directory.
pub fn load_manifest_samples(manifest_path: impl AsRef<Path>) -> Result<(Manifest, Vec<StoredSample>)> {
    let mut path = manifest_path.as_ref().to_path_buf();
    if path.is_dir() {
        path = path.join(MANIFEST_FILE);
    }
    let manifest = Manifest::load(&path)?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let samples = manifest
        .samples
        .iter()
        .map(|e| {
            let set = IntrinsicSet {
                reflectance: read_pfm(dir.join(&e.reflectance))?,
                shading: read_pfm(dir.join(&e.shading))?,
                specular: e.specular.as_ref().map(|f| read_pfm(dir.join(f))).transpose()?,
                illuminant: e
                    .illuminant
                    .as_ref()
                    .map(|f| read_pfm(dir.join(f)).map(illuminant_from_image))
                    .transpose()?,
            };
            set.validate()?;
            Ok(StoredSample {
                id: e.id.clone(),
                image: read_pfm(dir.join(&e.image))?,
                set,
                edge_mask: read_pfm(dir.join(&e.edge_mask))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}

/// An externally supplied image with its ground-truth intrinsics.
#[derive(Debug, Clone)]
pub struct BenchmarkItem {
    pub name: String,
    pub image: Image,
    pub set: IntrinsicSet,
    /// Pixels with zero mask value are excluded from metrics.
    pub mask: Option<Image>,
}

fn find_part(dir: &Path, stems: &[&str]) -> Option<PathBuf> {
    stems
        .iter()
        .flat_map(|stem| ["pfm", "png"].map(|ext| dir.join(format!("{stem}.{ext}"))))
        .find(|p| p.is_file())
}

fn require_part(dir: &Path, stems: &[&str]) -> Result<PathBuf> {
    find_part(dir, stems).ok_or_else(|| {
        let expected = dir.join(format!("{}.pfm", stems[0]));
        Error::format(
            expected,
            format!("missing {} file (.pfm or .png)", stems[0]),
        )
    })
}

/// Loads ground-truth triplets for evaluation.
///
/// Two layouts are understood: a directory written by [`dataset_gen`]
/// (detected by its `manifest.json`), or one subdirectory per object holding
/// `image` (or `original`), `reflectance`, `shading` and optionally `mask`,
/// each as `.pfm` or 8-bit `.png`. PNG values are mapped linearly to
/// `[0, 1]` and raised to `png_gamma` when given. An alpha channel or a
/// `mask` file marks excluded pixels.
pub fn load_benchmark(dir: impl AsRef<Path>, png_gamma: Option<f32>) -> Result<Vec<BenchmarkItem>> {
    let dir = dir.as_ref();
    if dir.join(MANIFEST_FILE).is_file() || dir.is_file() {
        let (_, samples) = load_manifest_samples(dir)?;
        return Ok(samples
            .into_iter()
            .map(|s| BenchmarkItem {
                name: s.id,
                image: s.image,
                set: s.set,
                mask: None,
            })
            .collect());
    }
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut objects = BTreeMap::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.path().is_dir() {
            objects.insert(entry.file_name().to_string_lossy().into_owned(), entry.path());
        }
    }
    if objects.is_empty() {
        return Err(Error::format(dir, "no manifest.json and no object subdirectories"));
    }
    objects
        .into_iter()
        .map(|(name, obj)| {
            let image_path = require_part(&obj, &["image", "original"])?;
            let refl_path = require_part(&obj, &["reflectance"])?;
            let shade_path = require_part(&obj, &["shading"])?;
            let image = read_image(&image_path, png_gamma)?;
            let mut mask = if extension(&image_path).as_deref() == Some("png") {
                read_png(&image_path, png_gamma)?.mask
            } else {
                None
            };
            if let Some(mask_path) = find_part(&obj, &["mask"]) {
                let m = read_image(&mask_path, None)?;
                let m = if m.channels() == 1 { m } else { m.channel(0) };
                mask = Some(m.map(|v| if v > 0.0 { 1.0 } else { 0.0 }));
            }
            let set = IntrinsicSet::new(
                read_image(&refl_path, png_gamma)?,
                read_image(&shade_path, png_gamma)?,
            )
            .map_err(|e| Error::format(&obj, e.to_string()))?;
            if !image.same_size(&set.reflectance) {
                return Err(Error::format(&image_path, "image and reflectance sizes differ"));
            }
            Ok(BenchmarkItem {
                name,
                image,
                set,
                mask,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::gradient;
    use crate::io::write_png_preview;

    fn params() -> SceneParams {
        SceneParams::default()
    }

    #[test]
    fn scenes_are_deterministic() {
        let a = generate_scene(42, &params()).unwrap();
        let b = generate_scene(42, &params()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_scene(43, &params()).unwrap());
    }

    #[test]
    fn light_stays_in_upper_hemisphere() {
        let p = SceneParams {
            min_light_elevation: 0.0,
            ..params()
        };
        for seed in 0..10_000 {
            let s = generate_scene(seed, &p).unwrap();
            assert!(s.light_direction[2] >= 0.0);
            let norm = dot(s.light_direction, s.light_direction);
            assert!((norm - 1.0).abs() < 1e-5);
        }
    }

    /// Kolmogorov-Smirnov distance to the uniform distribution on [lo, hi].
    fn ks_uniform(mut xs: Vec<f32>, lo: f32, hi: f32) -> f64 {
        xs.sort_by(f32::total_cmp);
        let n = xs.len() as f64;
        xs.iter()
            .enumerate()
            .map(|(i, &x)| {
                let cdf = ((x - lo) / (hi - lo)) as f64;
                (cdf - i as f64 / n).abs().max(((i + 1) as f64 / n - cdf).abs())
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn albedos_are_uniform() {
        let mut per_channel = [Vec::new(), Vec::new(), Vec::new()];
        for seed in 0..10_000 {
            let s = generate_scene(seed, &params()).unwrap();
            for a in std::iter::once(s.background_albedo).chain(s.shapes.iter().map(|sh| sh.albedo)) {
                for c in 0..3 {
                    per_channel[c].push(a[c]);
                }
            }
        }
        for xs in per_channel {
            assert!(xs.iter().all(|&a| (0.05..=1.0).contains(&a)));
            let d = ks_uniform(xs, 0.05, 1.0);
            assert!(d < 0.02, "KS statistic {d}");
        }
    }

    fn single_cap(ambient: f32) -> SceneSpec {
        SceneSpec {
            seed: 0,
            canvas: Canvas {
                height: 33,
                width: 33,
            },
            background_albedo: [0.5; 3],
            shapes: vec![Shape {
                kind: ShapeKind::SphereCap { tilt_deg: 60.0 },
                position: [16.5, 16.5],
                size: 10.0,
                albedo: [0.8, 0.4, 0.2],
            }],
            light_direction: [0.0, 0.0, 1.0],
            light_color: [1.0; 3],
            ambient,
            specular: None,
            dome: None,
        }
    }

    #[test]
    fn cap_center_faces_the_light() {
        let sample = render(&single_cap(0.0), Formation::Diffuse).unwrap();
        for c in 0..3 {
            assert_eq!(sample.set.shading.get(16, 16, c), 1.0);
        }
        assert_eq!(sample.regions[16 * 33 + 16], 1);
        assert_eq!(sample.set.reflectance.get(16, 16, 0), 0.8);
    }

    #[test]
    fn every_formation_is_constructively_consistent() {
        for formation in Formation::ALL {
            for seed in 0..20 {
                let s = render_index(seed, 3, formation, &params()).unwrap();
                let set = &s.set;
                let recomposed = match formation {
                    Formation::Diffuse => compose_diffuse(&set.reflectance, &set.shading),
                    Formation::GlobalLight => compose_with_light(
                        &set.reflectance,
                        &set.shading,
                        set.illuminant.as_ref().unwrap(),
                    ),
                    Formation::Specular => compose_specular(
                        &set.reflectance,
                        &set.shading,
                        set.specular.as_ref().unwrap(),
                        None,
                    ),
                    Formation::Full => compose_specular(
                        &set.reflectance,
                        &set.shading,
                        set.specular.as_ref().unwrap(),
                        set.illuminant.as_ref(),
                    ),
                }
                .unwrap();
                assert_eq!(set.compose().unwrap(), recomposed);
                assert_eq!(recomposed.max_abs_diff(&s.image), 0.0);
                assert_eq!(set.specular.is_some(), formation.has_specular());
                assert_eq!(set.illuminant.is_some(), formation.has_illuminant());
            }
        }
    }

    #[test]
    fn reflectance_is_piecewise_constant_and_edges_are_exact() {
        for seed in 0..30 {
            let s = render_index(seed, 0, Formation::Diffuse, &params()).unwrap();
            let (h, w) = (s.image.height(), s.image.width());
            let mut seen: BTreeMap<u32, [f32; 3]> = BTreeMap::new();
            for i in 0..h {
                for j in 0..w {
                    let px = [0, 1, 2].map(|c| s.set.reflectance.get(i, j, c));
                    let prev = *seen.entry(s.regions[i * w + j]).or_insert(px);
                    assert_eq!(prev, px);
                }
            }
            let gr = gradient(&s.set.reflectance).unwrap();
            let gs = gradient(&s.set.shading).unwrap();
            for i in 0..h {
                for j in 0..w {
                    let on_edge = s.edge_mask.get(i, j, 0) > 0.0;
                    for c in 0..3 {
                        if !on_edge {
                            assert_eq!(gr.magnitude.get(i, j, c), 0.0);
                            assert!(
                                gs.magnitude.get(i, j, c) <= s.shading_gradient_bound * 1.0001 + 1e-6,
                                "seed {seed} ({i},{j}): {} > {}",
                                gs.magnitude.get(i, j, c),
                                s.shading_gradient_bound
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn dome_shading_is_continuous_across_shape_edges() {
        let p = SceneParams::smooth_shading(Canvas { height: 48, width: 64 });
        for seed in 0..20 {
            let s = render_index(seed, 0, Formation::Diffuse, &p).unwrap();
            assert!(s.spec.dome.is_some());
            let gs = gradient(&s.set.shading).unwrap();
            let worst = gs.magnitude.data().iter().copied().fold(0.0, f32::max);
            assert!(worst <= s.shading_gradient_bound * 1.0001 + 1e-6, "seed {seed}: {worst}");
            assert!(s.shading_gradient_bound < 0.05, "seed {seed}: {}", s.shading_gradient_bound);
        }
    }

    #[test]
    fn scenes_without_dome_keep_their_stream() {
        let a = generate_scene(8, &params()).unwrap();
        let with = SceneParams {
            dome_tilt_deg: Some([20.0, 30.0]),
            ..params()
        };
        let b = generate_scene(8, &with).unwrap();
        assert!(a.dome.is_none());
        assert_eq!(a.shapes, b.shapes);
        assert_eq!(a.light_direction, b.light_direction);
        assert!(!serde_json::to_string(&a).unwrap().contains("dome"));
    }

    #[test]
    fn dataset_round_trip_and_reproducibility() {
        let dir = tempfile::tempdir().unwrap();
        let p = params();
        let m = dataset_gen(5, 11, dir.path(), Formation::Full, &p).unwrap();
        assert_eq!(m.count, 5);
        let (loaded_manifest, samples) = load_manifest_samples(dir.path()).unwrap();
        assert_eq!(loaded_manifest, m);
        let fresh = render_index(11, 3, Formation::Full, &p).unwrap();
        assert_eq!(samples[3].image, fresh.image);
        assert_eq!(samples[3].set, fresh.set);
        assert_eq!(samples[3].edge_mask, fresh.edge_mask);

        let again = tempfile::tempdir().unwrap();
        dataset_gen(5, 11, again.path(), Formation::Full, &p).unwrap();
        for name in ["manifest.json", "sample_00004_image.pfm", "sample_00002_illuminant.pfm"] {
            assert_eq!(
                std::fs::read(dir.path().join(name)).unwrap(),
                std::fs::read(again.path().join(name)).unwrap()
            );
        }
    }

    #[test]
    fn empty_dataset_has_valid_manifest() {
        let dir = tempfile::tempdir().unwrap();
        dataset_gen(0, 1, dir.path(), Formation::Diffuse, &params()).unwrap();
        let (m, samples) = load_manifest_samples(dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(m.count, 0);
        assert!(samples.is_empty());
    }

    #[test]
    fn benchmark_loader_reads_generated_corpus() {
        let dir = tempfile::tempdir().unwrap();
        dataset_gen(2, 5, dir.path(), Formation::Diffuse, &params()).unwrap();
        let items = load_benchmark(dir.path(), None).unwrap();
        let fresh = render_index(5, 1, Formation::Diffuse, &params()).unwrap();
        assert_eq!(items[1].name, "sample_00001");
        assert_eq!(items[1].image, fresh.image);
        assert_eq!(items[1].set, fresh.set);
    }

    #[test]
    fn benchmark_loader_reports_missing_shading() {
        let dir = tempfile::tempdir().unwrap();
        let obj = dir.path().join("cup");
        std::fs::create_dir(&obj).unwrap();
        let img = Image::filled(4, 4, 3, 0.5);
        write_pfm(obj.join("original.pfm"), &img).unwrap();
        write_pfm(obj.join("reflectance.pfm"), &img).unwrap();
        let err = load_benchmark(dir.path(), None).unwrap_err().to_string();
        assert!(err.contains("shading.pfm"), "{err}");
    }

    #[test]
    fn benchmark_loader_linearizes_png() {
        let dir = tempfile::tempdir().unwrap();
        let obj = dir.path().join("box");
        std::fs::create_dir(&obj).unwrap();
        let img = Image::from_fn(4, 4, 3, |i, _, _| i as f32 / 3.0);
        write_png_preview(obj.join("original.png"), &img, 1.0).unwrap();
        write_png_preview(obj.join("reflectance.png"), &img, 1.0).unwrap();
        write_png_preview(obj.join("shading.png"), &img.channel(0), 1.0).unwrap();
        write_png_preview(obj.join("mask.png"), &Image::from_fn(4, 4, 1, |i, _, _| (i > 0) as u8 as f32), 1.0)
            .unwrap();
        let linear = load_benchmark(dir.path(), None).unwrap();
        assert!((linear[0].image.get(1, 0, 0) - 85.0 / 255.0).abs() < 1e-6);
        assert_eq!(linear[0].set.shading.channels(), 1);
        assert_eq!(linear[0].mask.as_ref().unwrap().get(0, 0, 0), 0.0);
        let gamma = load_benchmark(dir.path(), Some(2.2)).unwrap();
        assert!((gamma[0].image.get(1, 0, 0) - (85.0f32 / 255.0).powf(2.2)).abs() < 1e-6);
    }

    #[test]
    fn parse_helpers() {
        assert_eq!("120x160".parse::<Canvas>().unwrap(), Canvas::PAPER);
        assert!("12by3".parse::<Canvas>().is_err());
        assert_eq!("global-light".parse::<Formation>().unwrap(), Formation::GlobalLight);
        assert!("weird".parse::<Formation>().is_err());
    }
}
