//! Synthetic scene generation: a software rasterizer producing ground-truth
//! TOC / normal / mask / depth rasters from a posed model, plus a prediction
//! emulator that injects heteroscedastic noise with matching per-pixel
//! log-variance. This stands in for the neural predictor so the rest of the
//! pipeline can be exercised against known ground truth.

use std::path::Path;

use nalgebra::{Point3, Vector2, Vector3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geometry::{CameraView, Intrinsics, TriMesh};
use crate::io::{
    read_fimg, read_manifest, read_ply, write_fimg, write_manifest, write_ply_mesh,
    ChannelSemantics, ModelSpec, NoiseSpec, Raster, RasterPaths, SceneManifest, ViewEntry,
    MANIFEST_VERSION,
};
use crate::model::{DeformableModel, ModelParams};

/// Log-variance written inside the mask of a noiseless render.
pub const NOISELESS_LOGVAR: f32 = -27.631_021; // ln(1e-12)

/// Angular noise (radians) applied to emulated normals per unit of TOC
/// sigma: normals are derivative quantities and degrade much faster than
/// positions as prediction quality drops.
pub const NORMAL_NOISE_FACTOR: f64 = 40.0;
/// Depth value outside the mask.
pub const DEPTH_BACKGROUND: f32 = f32::INFINITY;

/// Per-view prediction rasters. Pixel (col, row) has its sample point at
/// continuous image coordinates (col + 0.5, row + 0.5).
#[derive(Debug, Clone, PartialEq)]
pub struct TocImage {
    pub width: u32,
    pub height: u32,
    /// 3 channels, TOC units in [0,1] inside the mask.
    pub toc_mean: Vec<f32>,
    /// 3 channels, natural-log sigma^2 per TOC axis.
    pub toc_logvar: Vec<f32>,
    /// 3 channels, unit camera-frame normals inside the mask.
    pub normal: Vec<f32>,
    /// 1 channel, coverage in [0,1]; foreground where > 0.5.
    pub mask: Vec<f32>,
    /// 1 channel, mm; +inf outside the mask.
    pub depth: Vec<f32>,
}

impl TocImage {
    pub fn background(width: u32, height: u32) -> Self {
        let n = (width * height) as usize;
        TocImage {
            width,
            height,
            toc_mean: vec![0.0; n * 3],
            toc_logvar: vec![0.0; n * 3],
            normal: vec![0.0; n * 3],
            mask: vec![0.0; n],
            depth: vec![DEPTH_BACKGROUND; n],
        }
    }

    #[inline]
    pub fn idx(&self, col: u32, row: u32) -> usize {
        (row * self.width + col) as usize
    }

    #[inline]
    pub fn in_mask(&self, col: u32, row: u32) -> bool {
        self.mask[self.idx(col, row)] > 0.5
    }

    pub fn toc_at(&self, col: u32, row: u32) -> Vector3<f64> {
        let i = self.idx(col, row) * 3;
        Vector3::new(
            self.toc_mean[i] as f64,
            self.toc_mean[i + 1] as f64,
            self.toc_mean[i + 2] as f64,
        )
    }

    pub fn logvar_at(&self, col: u32, row: u32) -> Vector3<f64> {
        let i = self.idx(col, row) * 3;
        Vector3::new(
            self.toc_logvar[i] as f64,
            self.toc_logvar[i + 1] as f64,
            self.toc_logvar[i + 2] as f64,
        )
    }

    pub fn normal_at(&self, col: u32, row: u32) -> Vector3<f64> {
        let i = self.idx(col, row) * 3;
        Vector3::new(
            self.normal[i] as f64,
            self.normal[i + 1] as f64,
            self.normal[i + 2] as f64,
        )
    }

    /// Bilinear interpolation of a 3-channel field at a continuous image
    /// position (pixel-center convention). Clamps to the image border.
    fn bilinear3(&self, data: &[f32], pos: Vector2<f64>) -> Vector3<f64> {
        let fx = (pos.x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (pos.y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = fx.floor() as u32;
        let y0 = fy.floor() as u32;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let tx = fx - x0 as f64;
        let ty = fy - y0 as f64;
        let mut out = Vector3::zeros();
        for (corner, w) in [
            ((x0, y0), (1.0 - tx) * (1.0 - ty)),
            ((x1, y0), tx * (1.0 - ty)),
            ((x0, y1), (1.0 - tx) * ty),
            ((x1, y1), tx * ty),
        ] {
            let i = self.idx(corner.0, corner.1) * 3;
            out += Vector3::new(data[i] as f64, data[i + 1] as f64, data[i + 2] as f64) * w;
        }
        out
    }

    pub fn bilinear_toc(&self, pos: Vector2<f64>) -> Vector3<f64> {
        self.bilinear3(&self.toc_mean, pos)
    }

    pub fn bilinear_normal(&self, pos: Vector2<f64>) -> Vector3<f64> {
        let n = self.bilinear3(&self.normal, pos);
        let len = n.norm();
        if len > 0.0 {
            n / len
        } else {
            n
        }
    }

    pub fn to_rasters(&self) -> [Raster; 5] {
        let mk = |sem: ChannelSemantics, data: &Vec<f32>| Raster {
            width: self.width,
            height: self.height,
            channels: sem.channels(),
            semantics: sem,
            data: data.clone(),
        };
        [
            mk(ChannelSemantics::TocMean, &self.toc_mean),
            mk(ChannelSemantics::TocLogVar, &self.toc_logvar),
            mk(ChannelSemantics::Normal, &self.normal),
            mk(ChannelSemantics::Mask, &self.mask),
            mk(ChannelSemantics::Depth, &self.depth),
        ]
    }

    pub fn from_rasters(rasters: [Raster; 5]) -> Result<Self> {
        let [toc_mean, toc_logvar, normal, mask, depth] = rasters;
        let (w, h) = (toc_mean.width, toc_mean.height);
        for r in [&toc_logvar, &normal, &mask, &depth] {
            if r.width != w || r.height != h {
                return Err(Error::InvalidSpec {
                    reason: format!(
                        "raster sizes disagree: {}x{} vs {w}x{h}",
                        r.width, r.height
                    ),
                });
            }
        }
        Ok(TocImage {
            width: w,
            height: h,
            toc_mean: toc_mean.data,
            toc_logvar: toc_logvar.data,
            normal: normal.data,
            mask: mask.data,
            depth: depth.data,
        })
    }
}

/// Everything needed to synthesize one scene deterministically.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub model: ModelSpec,
    pub gt_params: ModelParams,
    pub cameras: Vec<CameraView>,
    pub width: u32,
    pub height: u32,
    pub noise: NoiseSpec,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() {
            return Err(Error::InvalidSpec {
                reason: "scene needs at least one camera".into(),
            });
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidSpec {
                reason: "resolution must be positive".into(),
            });
        }
        self.noise.validate()?;
        self.gt_params.validate()?;
        Ok(())
    }
}

/// A fully loaded scene: calibrated views with their prediction rasters.
#[derive(Debug, Clone)]
pub struct Scene {
    pub manifest: SceneManifest,
    pub views: Vec<(CameraView, TocImage)>,
    pub gt_mesh: Option<TriMesh>,
    pub model: DeformableModel,
}

impl Scene {
    /// Sub-scene restricted to the given view indices (evaluation harness).
    pub fn subset(&self, indices: &[usize]) -> Scene {
        Scene {
            manifest: self.manifest.clone(),
            views: indices.iter().map(|&i| self.views[i].clone()).collect(),
            gt_mesh: self.gt_mesh.clone(),
            model: self.model.clone(),
        }
    }
}

/// Renders noiseless ground-truth rasters of the deformed model.
///
/// Perspective-correct barycentric interpolation with z-buffering; normals are
/// recomputed from the deformed geometry and stored in the camera frame.
pub fn rasterize(
    model: &DeformableModel,
    params: &ModelParams,
    camera: &CameraView,
    width: u32,
    height: u32,
) -> Result<TocImage> {
    let deformed = model.deform_mesh(params);
    rasterize_mesh(&deformed, camera, width, height)
}

/// Rasterizes an arbitrary mesh carrying per-vertex TOC (optional) and
/// normals (computed if absent).
pub fn rasterize_mesh(
    mesh: &TriMesh,
    camera: &CameraView,
    width: u32,
    height: u32,
) -> Result<TocImage> {
    let mut mesh = mesh.clone();
    if mesh.normals.is_none() {
        mesh.compute_vertex_normals();
    }
    let normals = mesh.normals.as_ref().unwrap();
    let zero_toc = vec![Vector3::zeros(); mesh.vertices.len()];
    let toc = mesh.toc.as_ref().unwrap_or(&zero_toc);

    // Camera-frame positions and projections.
    let cam_pts: Vec<Vector3<f64>> = mesh.vertices.iter().map(|v| camera.to_camera(v)).collect();
    if !cam_pts.is_empty() && cam_pts.iter().all(|p| p.z <= 0.0) {
        return Err(Error::BehindCamera {
            depth: cam_pts.iter().map(|p| p.z).fold(f64::NEG_INFINITY, f64::max),
        });
    }
    let k = &camera.intrinsics;
    let proj: Vec<Vector2<f64>> = cam_pts
        .iter()
        .map(|p| {
            if p.z > 0.0 {
                Vector2::new(k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy)
            } else {
                Vector2::new(f64::NAN, f64::NAN)
            }
        })
        .collect();
    let cam_normals: Vec<Vector3<f64>> = normals.iter().map(|n| camera.rotation * n).collect();

    let mut image = TocImage::background(width, height);
    for face in &mesh.faces {
        let [ia, ib, ic] = [face[0] as usize, face[1] as usize, face[2] as usize];
        if cam_pts[ia].z <= 0.0 || cam_pts[ib].z <= 0.0 || cam_pts[ic].z <= 0.0 {
            continue; // partial clipping unsupported; the model sits fully in front
        }
        let (pa, pb, pc) = (proj[ia], proj[ib], proj[ic]);
        let area = edge(pa, pb, pc);
        if area.abs() < 1e-12 {
            continue;
        }
        let min_x = pa.x.min(pb.x).min(pc.x).floor().max(0.0) as u32;
        let max_x = (pa.x.max(pb.x).max(pc.x).ceil() as i64).min(width as i64 - 1);
        let min_y = pa.y.min(pb.y).min(pc.y).floor().max(0.0) as u32;
        let max_y = (pa.y.max(pb.y).max(pc.y).ceil() as i64).min(height as i64 - 1);
        if max_x < 0 || max_y < 0 {
            continue;
        }
        let inv_z = [1.0 / cam_pts[ia].z, 1.0 / cam_pts[ib].z, 1.0 / cam_pts[ic].z];
        for row in min_y..=max_y as u32 {
            for col in min_x..=max_x as u32 {
                let p = Vector2::new(col as f64 + 0.5, row as f64 + 0.5);
                let w0 = edge(pb, pc, p) / area;
                let w1 = edge(pc, pa, p) / area;
                let w2 = edge(pa, pb, p) / area;
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                let denom = w0 * inv_z[0] + w1 * inv_z[1] + w2 * inv_z[2];
                let z = 1.0 / denom;
                let di = image.idx(col, row);
                if (z as f32) >= image.depth[di] {
                    continue;
                }
                // Perspective-correct attribute weights.
                let q0 = w0 * inv_z[0] * z;
                let q1 = w1 * inv_z[1] * z;
                let q2 = w2 * inv_z[2] * z;
                let t = toc[ia] * q0 + toc[ib] * q1 + toc[ic] * q2;
                let mut n = cam_normals[ia] * q0 + cam_normals[ib] * q1 + cam_normals[ic] * q2;
                let len = n.norm();
                if len > 0.0 {
                    n /= len;
                }
                image.depth[di] = z as f32;
                image.mask[di] = 1.0;
                for c in 0..3 {
                    image.toc_mean[di * 3 + c] = t[c].clamp(0.0, 1.0) as f32;
                    image.toc_logvar[di * 3 + c] = NOISELESS_LOGVAR;
                    image.normal[di * 3 + c] = n[c] as f32;
                }
            }
        }
    }
    Ok(image)
}

#[inline]
fn edge(a: Vector2<f64>, b: Vector2<f64>, p: Vector2<f64>) -> f64 {
    (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)
}

/// Adds heteroscedastic Gaussian noise to a noiseless render and records the
/// matching per-pixel log-variance. The sigma field is a smooth value-noise
/// field over [sigma_base, sigma_base + sigma_range]; mask and depth channels
/// are preserved bit-exactly. Deterministic given the seed.
pub fn emulate_prediction(image: &TocImage, noise: &NoiseSpec, seed: u64) -> Result<TocImage> {
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // 4x4 control grid, bilinear interpolation across the image.
    const GRID: usize = 4;
    let control: Vec<f64> = (0..GRID * GRID).map(|_| rng.gen::<f64>()).collect();
    let sigma_at = |col: u32, row: u32| -> f64 {
        let gx = if image.width > 1 {
            col as f64 / (image.width - 1) as f64 * (GRID - 1) as f64
        } else {
            0.0
        };
        let gy = if image.height > 1 {
            row as f64 / (image.height - 1) as f64 * (GRID - 1) as f64
        } else {
            0.0
        };
        let x0 = (gx.floor() as usize).min(GRID - 2);
        let y0 = (gy.floor() as usize).min(GRID - 2);
        let tx = gx - x0 as f64;
        let ty = gy - y0 as f64;
        let v00 = control[y0 * GRID + x0];
        let v10 = control[y0 * GRID + x0 + 1];
        let v01 = control[(y0 + 1) * GRID + x0];
        let v11 = control[(y0 + 1) * GRID + x0 + 1];
        let field = v00 * (1.0 - tx) * (1.0 - ty)
            + v10 * tx * (1.0 - ty)
            + v01 * (1.0 - tx) * ty
            + v11 * tx * ty;
        noise.sigma_base + noise.sigma_range * field
    };

    let mut out = image.clone();
    for row in 0..image.height {
        for col in 0..image.width {
            if !image.in_mask(col, row) {
                continue;
            }
            let sigma = sigma_at(col, row);
            let var = (sigma * sigma).max(1e-12);
            let i = image.idx(col, row) * 3;
            for c in 0..3 {
                let eps: f64 = rng.sample::<f64, _>(StandardNormal) * sigma;
                let noisy = (image.toc_mean[i + c] as f64 + eps).clamp(0.0, 1.0);
                out.toc_mean[i + c] = noisy as f32;
                out.toc_logvar[i + c] = var.ln() as f32;
            }
            // Normals are derivative quantities: predictors estimate them far
            // less accurately than positions, so their angular noise scales
            // up from the TOC sigma. Skipped entirely at zero sigma to keep
            // the noiseless path bit-exact.
            if sigma > 0.0 {
                let s_n = NORMAL_NOISE_FACTOR * sigma;
                let mut n = Vector3::new(
                    image.normal[i] as f64,
                    image.normal[i + 1] as f64,
                    image.normal[i + 2] as f64,
                );
                for c in 0..3 {
                    n[c] += rng.sample::<f64, _>(StandardNormal) * s_n;
                }
                let len = n.norm();
                if len > 1e-12 {
                    n /= len;
                    for c in 0..3 {
                        out.normal[i + c] = n[c] as f32;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Ring of `n` cameras around the target point, evenly spaced in azimuth.
pub fn ring_cameras(
    target: Point3<f64>,
    n: usize,
    radius: f64,
    elevation: f64,
    width: u32,
    height: u32,
) -> Vec<CameraView> {
    let f = 1.85 * width.min(height) as f64 * radius / 300.0;
    (0..n)
        .map(|i| {
            let azimuth = i as f64 * std::f64::consts::TAU / n as f64;
            let eye = target
                + Vector3::new(
                    radius * azimuth.cos() * elevation.cos(),
                    radius * azimuth.sin() * elevation.cos(),
                    radius * elevation.sin(),
                );
            look_at(
                eye,
                target,
                Intrinsics::simple(f, width as f64 / 2.0, height as f64 / 2.0),
                width,
                height,
            )
        })
        .collect()
}

/// World-to-camera pose looking from `eye` towards `target`, +z up-ish.
pub fn look_at(
    eye: Point3<f64>,
    target: Point3<f64>,
    intrinsics: Intrinsics,
    width: u32,
    height: u32,
) -> CameraView {
    let fwd = (target - eye).normalize();
    let mut up = Vector3::z();
    if fwd.cross(&up).norm() < 1e-6 {
        up = Vector3::y();
    }
    let right = fwd.cross(&up).normalize();
    let down = fwd.cross(&right).normalize();
    let rotation = nalgebra::Matrix3::from_rows(&[
        right.transpose(),
        down.transpose(),
        fwd.transpose(),
    ]);
    // Re-orthonormalize so serialized cameras pass the strict load check.
    let svd = rotation.svd(true, true);
    let rotation = svd.u.unwrap() * svd.v_t.unwrap();
    CameraView {
        intrinsics,
        rotation,
        translation: -(rotation * eye.coords),
        width,
        height,
    }
}

/// Default ground-truth parameters for the standard synthetic scene: a mild
/// similarity offset plus small shape/pose activations.
pub fn default_gt_params(d_shape: usize, d_pose: usize) -> ModelParams {
    let mut p = ModelParams::identity(d_shape, d_pose);
    p.rotation = Vector3::new(0.0, 0.0, 0.12);
    p.scale = 1.04;
    p.translation = Vector3::new(6.0, -4.0, 2.0);
    for (i, z) in p.z_shape.iter_mut().enumerate() {
        *z = [0.6, -0.4, 0.3, 0.5][i % 4];
    }
    for (i, z) in p.z_pose.iter_mut().enumerate() {
        *z = [0.12, -0.06, 0.05, 0.04][i % 4];
    }
    p
}

/// Standard spec: `n` ring views of the procedurally generated foot.
pub fn default_scene_spec(n_views: usize, seed: u64, noise: NoiseSpec) -> SceneSpec {
    let model_spec = ModelSpec {
        seed,
        d_shape: crate::model::DEFAULT_SHAPE_DIM,
        d_pose: crate::model::DEFAULT_POSE_DIM,
        template_path: None,
    };
    let gt_params = default_gt_params(model_spec.d_shape, model_spec.d_pose);
    let model = DeformableModel::procedural(seed, model_spec.d_shape, model_spec.d_pose);
    let gt_mesh = model.deform_mesh(&gt_params);
    let (lo, hi) = gt_mesh.aabb();
    let target = nalgebra::center(&lo, &hi);
    let (width, height) = (320, 240);
    let cameras = ring_cameras(target, n_views, 480.0, 0.9, width, height);
    SceneSpec {
        model: model_spec,
        gt_params,
        cameras,
        width,
        height,
        noise,
        seed,
    }
}

/// Renders all views of a spec in memory. Each view's noise stream is derived
/// from (seed, view index), so results do not depend on scheduling.
pub fn render_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let model = build_model(&spec.model, None)?;
    let gt_mesh = model.deform_mesh(&spec.gt_params);

    use rayon::prelude::*;
    let rendered: Vec<Result<TocImage>> = spec
        .cameras
        .par_iter()
        .enumerate()
        .map(|(i, cam)| {
            let clean = rasterize_mesh(&gt_mesh, cam, spec.width, spec.height)?;
            emulate_prediction(&clean, &spec.noise, view_seed(spec.seed, i))
        })
        .collect();
    let mut views = Vec::with_capacity(spec.cameras.len());
    for (cam, img) in spec.cameras.iter().zip(rendered) {
        views.push((cam.clone(), img?));
    }

    let manifest = SceneManifest {
        format_version: MANIFEST_VERSION,
        units: "mm".into(),
        model: spec.model.clone(),
        ground_truth_params: Some(spec.gt_params.clone()),
        gt_mesh: Some("gt.ply".into()),
        noise: Some(spec.noise),
        views: views
            .iter()
            .enumerate()
            .map(|(i, (cam, _))| ViewEntry {
                camera: cam.clone(),
                rasters: raster_paths(i),
            })
            .collect(),
    };
    Ok(Scene {
        manifest,
        views,
        gt_mesh: Some(gt_mesh),
        model,
    })
}

fn view_seed(seed: u64, view: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(view as u64 + 1)
}

fn raster_paths(view: usize) -> RasterPaths {
    RasterPaths {
        toc_mean: format!("view{view:03}_toc_mean.fimg"),
        toc_logvar: format!("view{view:03}_toc_logvar.fimg"),
        normal: format!("view{view:03}_normal.fimg"),
        mask: format!("view{view:03}_mask.fimg"),
        depth: format!("view{view:03}_depth.fimg"),
    }
}

fn build_model(spec: &ModelSpec, base_dir: Option<&Path>) -> Result<DeformableModel> {
    if let Some(rel) = &spec.template_path {
        let path = base_dir.map(|d| d.join(rel)).unwrap_or_else(|| rel.into());
        let template = read_ply(&path)?;
        Ok(DeformableModel::from_template(
            template,
            spec.seed,
            spec.d_shape,
            spec.d_pose,
        ))
    } else {
        Ok(DeformableModel::procedural(
            spec.seed,
            spec.d_shape,
            spec.d_pose,
        ))
    }
}

/// Writes a rendered scene to `dir`: per-view FIMG rasters, the ground-truth
/// mesh and the manifest.
pub fn write_scene(scene: &Scene, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, (_, image)) in scene.views.iter().enumerate() {
        let paths = raster_paths(i);
        for (rel, raster) in paths.all().iter().zip(image.to_rasters()) {
            write_fimg(&dir.join(rel), &raster)?;
        }
    }
    if let Some(gt) = &scene.gt_mesh {
        write_ply_mesh(&dir.join("gt.ply"), gt, false)?;
    }
    write_manifest(&dir.join("manifest.json"), &scene.manifest)
}

/// Renders and writes a scene in one step.
pub fn generate_scene(spec: &SceneSpec, dir: &Path) -> Result<Scene> {
    let scene = render_scene(spec)?;
    write_scene(&scene, dir)?;
    Ok(scene)
}

/// Loads a scene directory written by [`write_scene`] (or hand-assembled in
/// the same layout).
pub fn load_scene(dir: &Path) -> Result<Scene> {
    let manifest = read_manifest(&dir.join("manifest.json"))?;
    let mut views = Vec::with_capacity(manifest.views.len());
    for (i, entry) in manifest.views.iter().enumerate() {
        let [a, b, c, d, e] = entry.rasters.all();
        let image = TocImage::from_rasters([
            read_fimg(&dir.join(a))?,
            read_fimg(&dir.join(b))?,
            read_fimg(&dir.join(c))?,
            read_fimg(&dir.join(d))?,
            read_fimg(&dir.join(e))?,
        ])?;
        if image.width != entry.camera.width || image.height != entry.camera.height {
            return Err(Error::Schema {
                field: format!("views[{i}]"),
                reason: format!(
                    "raster size {}x{} does not match camera {}x{}",
                    image.width, image.height, entry.camera.width, entry.camera.height
                ),
            });
        }
        views.push((entry.camera.clone(), image));
    }
    let gt_mesh = match manifest.gt_mesh_path(dir) {
        Some(p) => Some(read_ply(&p)?),
        None => None,
    };
    let model = build_model(&manifest.model, Some(dir))?;
    Ok(Scene {
        manifest,
        views,
        gt_mesh,
        model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project;
    use approx::assert_relative_eq;

    fn identity_camera(width: u32, height: u32) -> CameraView {
        CameraView {
            intrinsics: Intrinsics::simple(500.0, width as f64 / 2.0, height as f64 / 2.0),
            rotation: nalgebra::Matrix3::identity(),
            translation: Vector3::zeros(),
            width,
            height,
        }
    }

    fn single_triangle() -> TriMesh {
        let mut mesh = TriMesh {
            vertices: vec![
                Point3::new(-100.0, -100.0, 500.0),
                Point3::new(100.0, -100.0, 500.0),
                Point3::new(-100.0, 100.0, 500.0),
            ],
            faces: vec![[0, 1, 2]],
            normals: None,
            toc: Some(vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(0.0, 1.0, 0.0),
            ]),
        };
        mesh.normals = Some(vec![Vector3::new(0.0, 0.0, -1.0); 3]);
        mesh
    }

    #[test]
    fn rasterized_toc_matches_analytic_barycentric() {
        let cam = identity_camera(200, 200);
        let image = rasterize_mesh(&single_triangle(), &cam, 200, 200).unwrap();
        // The triangle lies in the z=500 plane: projection is affine, so
        // screen-space barycentrics equal surface barycentrics.
        let (col, row) = (90, 90);
        assert!(image.in_mask(col, row));
        let px = col as f64 + 0.5;
        let py = row as f64 + 0.5;
        // Inverse of the projected vertex positions (0,0)->(0,0), (200,0)->(1,0), (0,200)->(0,1)
        // after the principal-point shift of 100 and f/z scale of 1.
        let u = (px - 100.0 + 100.0) / 200.0;
        let v = (py - 100.0 + 100.0) / 200.0;
        let expect = Vector3::new(u, v, 0.0);
        assert_relative_eq!(image.toc_at(col, row), expect, epsilon = 1e-5);
        // Flat triangle: interpolated normal equals the face normal.
        assert_relative_eq!(
            image.normal_at(col, row),
            Vector3::new(0.0, 0.0, -1.0),
            epsilon = 1e-3
        );
        assert_relative_eq!(image.depth[image.idx(col, row)] as f64, 500.0, epsilon = 1e-3);
    }

    #[test]
    fn camera_looking_away_renders_background() {
        let model = DeformableModel::procedural(1, 2, 2);
        let params = ModelParams::identity(2, 2);
        // Model centered around x in [0, 250]; camera in front facing -x away from it.
        let cam = look_at(
            Point3::new(-500.0, 0.0, 30.0),
            Point3::new(-1000.0, 0.0, 30.0),
            Intrinsics::simple(300.0, 80.0, 60.0),
            160,
            120,
        );
        let err = rasterize(&model, &params, &cam, 160, 120);
        match err {
            Err(Error::BehindCamera { .. }) => {}
            Ok(img) => assert!(img.mask.iter().all(|&m| m == 0.0)),
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn z_buffer_keeps_nearer_triangle() {
        let mut mesh = single_triangle();
        // Same triangle again, closer, with distinct TOC.
        mesh.vertices.extend_from_slice(&[
            Point3::new(-80.0, -80.0, 400.0),
            Point3::new(80.0, -80.0, 400.0),
            Point3::new(-80.0, 80.0, 400.0),
        ]);
        mesh.faces.push([3, 4, 5]);
        let toc = mesh.toc.as_mut().unwrap();
        toc.extend_from_slice(&[
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(0.0, 0.0, 1.0),
        ]);
        let normals = mesh.normals.as_mut().unwrap();
        normals.extend_from_slice(&[Vector3::new(0.0, 0.0, -1.0); 3]);
        let cam = identity_camera(200, 200);
        let image = rasterize_mesh(&mesh, &cam, 200, 200).unwrap();
        // Every pixel covered by the nearer triangle must carry its TOC.
        let (col, row) = (90, 90);
        assert_relative_eq!(image.toc_at(col, row).z, 1.0, epsilon = 1e-6);
        assert_relative_eq!(image.depth[image.idx(col, row)] as f64, 400.0, epsilon = 1e-3);
    }

    #[test]
    fn emulate_zero_noise_is_identity() {
        let cam = identity_camera(100, 100);
        let image = rasterize_mesh(&single_triangle(), &cam, 100, 100).unwrap();
        let noise = NoiseSpec {
            sigma_base: 0.0,
            sigma_range: 0.0,
        };
        let out = emulate_prediction(&image, &noise, 7).unwrap();
        assert_eq!(out, image);
    }

    #[test]
    fn emulate_noise_statistics() {
        let width = 400;
        let height = 300;
        let mut image = TocImage::background(width, height);
        for v in image.mask.iter_mut() {
            *v = 1.0;
        }
        for v in image.toc_mean.iter_mut() {
            *v = 0.5;
        }
        let noise = NoiseSpec {
            sigma_base: 0.01,
            sigma_range: 0.0,
        };
        let out = emulate_prediction(&image, &noise, 3).unwrap();
        let n = (width * height * 3) as usize;
        assert!(n >= 3 * 100_000);
        let mut sum = 0.0f64;
        let mut sum2 = 0.0f64;
        for i in 0..n {
            let d = out.toc_mean[i] as f64 - 0.5;
            sum += d;
            sum2 += d * d;
        }
        let std = (sum2 / n as f64 - (sum / n as f64).powi(2)).sqrt();
        assert!((0.009..=0.011).contains(&std), "std {std}");
        // Log-variance channel records the injected variance.
        assert_relative_eq!(out.toc_logvar[0] as f64, (0.01f64 * 0.01).ln(), epsilon = 1e-5);
    }

    #[test]
    fn emulate_is_deterministic_and_preserves_mask_depth() {
        let cam = identity_camera(100, 100);
        let image = rasterize_mesh(&single_triangle(), &cam, 100, 100).unwrap();
        let noise = NoiseSpec {
            sigma_base: 0.02,
            sigma_range: 0.01,
        };
        let a = emulate_prediction(&image, &noise, 99).unwrap();
        let b = emulate_prediction(&image, &noise, 99).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.mask, image.mask);
        assert_eq!(a.depth, image.depth);
        let c = emulate_prediction(&image, &noise, 100).unwrap();
        assert_ne!(a.toc_mean, c.toc_mean);
    }

    #[test]
    fn negative_sigma_rejected() {
        let image = TocImage::background(4, 4);
        let noise = NoiseSpec {
            sigma_base: -0.1,
            sigma_range: 0.0,
        };
        assert!(emulate_prediction(&image, &noise, 0).is_err());
    }

    #[test]
    fn scene_with_zero_cameras_rejected() {
        let mut spec = default_scene_spec(3, 1, NoiseSpec { sigma_base: 0.0, sigma_range: 0.0 });
        spec.cameras.clear();
        assert!(matches!(render_scene(&spec), Err(Error::InvalidSpec { .. })));
    }

    #[test]
    fn scene_round_trip_and_cardinality() {
        let spec = default_scene_spec(3, 42, NoiseSpec { sigma_base: 0.0, sigma_range: 0.0 });
        let dir = tempfile::tempdir().unwrap();
        let scene = generate_scene(&spec, dir.path()).unwrap();
        assert_eq!(scene.views.len(), 3);
        assert!(dir.path().join("gt.ply").exists());
        let loaded = load_scene(dir.path()).unwrap();
        assert_eq!(loaded.views.len(), 3);
        assert_eq!(loaded.manifest.views.len(), 3);
        // Raster payloads survive the disk round trip bit-exactly.
        assert_eq!(loaded.views[0].1, scene.views[0].1);
    }

    #[test]
    fn default_scene_mask_coverage() {
        let spec = default_scene_spec(6, 7, NoiseSpec { sigma_base: 0.0, sigma_range: 0.0 });
        let scene = render_scene(&spec).unwrap();
        for (i, (_, img)) in scene.views.iter().enumerate() {
            let covered = img.mask.iter().filter(|&&m| m > 0.5).count();
            let frac = covered as f64 / img.mask.len() as f64;
            assert!(frac >= 0.30, "view {i}: only {:.1}% in mask", frac * 100.0);
        }
    }

    #[test]
    fn rasterized_toc_reprojects_to_pixel_center() {
        let spec = default_scene_spec(4, 5, NoiseSpec { sigma_base: 0.0, sigma_range: 0.0 });
        let scene = render_scene(&spec).unwrap();
        let params = scene.manifest.ground_truth_params.as_ref().unwrap();
        let mut checked = 0;
        for (cam, img) in &scene.views {
            for row in (0..img.height).step_by(17) {
                for col in (0..img.width).step_by(13) {
                    if !img.in_mask(col, row) {
                        continue;
                    }
                    let toc = img.toc_at(col, row);
                    let template = scene.model.toc_to_template(&toc).unwrap();
                    let world = scene.model.deform(&template, params);
                    let px = project(cam, &world).unwrap();
                    let center = Vector2::new(col as f64 + 0.5, row as f64 + 0.5);
                    assert!(
                        (px - center).norm() < 1.0,
                        "reprojection {px:?} vs center {center:?}"
                    );
                    checked += 1;
                }
            }
        }
        assert!(checked > 100);
    }
}
