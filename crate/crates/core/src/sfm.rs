//! FOCUS-SfM: fuse multi-view TOC predictions into an oriented point cloud.
//!
//! Pipeline: sample points inside each mask, match TOC values across views
//! through per-view KD-trees, refine matches to subpixel positions, DLT
//! triangulation per track, three-stage filtering (reprojection error, floor,
//! statistical outlier removal), and spherical-coordinate normal aggregation.

use std::path::Path;

use nalgebra::{Point3, Vector2, Vector3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    reprojection_error, triangulate_dlt, CameraView, OrientedPoint, OrientedPointCloud,
    PointProvenance,
};
use crate::io::write_ply_cloud;
use crate::spatial::KdTree;
use crate::synth::{Scene, TocImage};

/// FOCUS-SfM hyperparameters. Defaults follow the published configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SfmConfig {
    /// P: points sampled per image.
    pub samples_per_image: usize,
    /// Maximum TOC-space l2 distance for a correspondence.
    pub match_threshold: f64,
    /// Subpixel search resolution: offsets in [-1, 1] at steps of 1/factor.
    pub subpixel_factor: u32,
    /// Mean reprojection error (px) above which triangulated points are dropped.
    pub reproj_threshold: f64,
    /// Points strictly below this height (mm) are dropped.
    pub floor_z: f64,
    /// Statistical outlier removal: neighborhood size.
    pub sor_k: usize,
    /// Statistical outlier removal: distance cutoff in standard deviations.
    pub sor_std_ratio: f64,
    pub seed: u64,
    /// Ablation: disable subpixel refinement (integer-pixel matches).
    pub use_subpixel: bool,
    /// Ablation: disable normal aggregation (keep the first view's normal).
    pub use_normal_aggregation: bool,
}

impl Default for SfmConfig {
    fn default() -> Self {
        SfmConfig {
            samples_per_image: 3000,
            match_threshold: 0.002,
            subpixel_factor: 8,
            reproj_threshold: 3.0,
            floor_z: 0.0,
            sor_k: 20,
            sor_std_ratio: 2.0,
            seed: 42,
            use_subpixel: true,
            use_normal_aggregation: true,
        }
    }
}

/// Parameters recorded for the external screened-Poisson mesher.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoissonSidecar {
    pub method: String,
    pub depth: u32,
    pub iterations: u32,
    pub crop_padding_mm: f64,
    pub height_interval_mm: [f64; 2],
}

impl Default for PoissonSidecar {
    fn default() -> Self {
        PoissonSidecar {
            method: "screened_poisson".into(),
            depth: 8,
            iterations: 8,
            crop_padding_mm: 1.0,
            height_interval_mm: [0.0, 150.0],
        }
    }
}

/// One point sampled inside a prediction mask.
#[derive(Debug, Clone, Copy)]
pub struct SamplePoint {
    pub col: u32,
    pub row: u32,
    pub toc: Vector3<f64>,
    pub normal_cam: Vector3<f64>,
}

/// One subpixel observation of a track in a particular view.
#[derive(Debug, Clone, Copy)]
pub struct Observation {
    pub view: usize,
    /// Continuous image position, px.
    pub pos: Vector2<f64>,
    pub toc: Vector3<f64>,
    pub normal_cam: Vector3<f64>,
}

/// A query TOC value with its per-view observations and fusion results.
#[derive(Debug, Clone)]
pub struct CorrespondenceTrack {
    pub query_toc: Vector3<f64>,
    pub source_view: usize,
    pub sample_index: usize,
    pub observations: Vec<Observation>,
    pub point: Option<Point3<f64>>,
    pub mean_reprojection_error: Option<f64>,
    pub failed: bool,
}

/// Draws `p` pixels from the mask, uniformly without replacement (with
/// replacement only if the mask holds fewer than `p` pixels). Deterministic
/// given the seed.
pub fn sample_points(image: &TocImage, p: usize, seed: u64) -> Result<Vec<SamplePoint>> {
    let in_mask: Vec<(u32, u32)> = (0..image.height)
        .flat_map(|row| (0..image.width).map(move |col| (col, row)))
        .filter(|&(col, row)| image.in_mask(col, row))
        .collect();
    if in_mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: Vec<usize> = if in_mask.len() >= p {
        rand::seq::index::sample(&mut rng, in_mask.len(), p).into_vec()
    } else {
        (0..p).map(|_| rng.gen_range(0..in_mask.len())).collect()
    };
    Ok(chosen
        .into_iter()
        .map(|i| {
            let (col, row) = in_mask[i];
            SamplePoint {
                col,
                row,
                toc: image.toc_at(col, row),
                normal_cam: image.normal_at(col, row),
            }
        })
        .collect())
}

/// KD-tree over the in-mask TOC values of one image; payloads are linear
/// pixel indices.
pub struct TocIndex {
    tree: KdTree,
    width: u32,
}

impl TocIndex {
    /// Nearest stored TOC to the query: `((col, row), toc, l2 distance)`.
    pub fn nearest(&self, query: &Vector3<f64>) -> ((u32, u32), f64) {
        let (pixel, d2) = self
            .tree
            .nearest(&[query.x, query.y, query.z])
            .expect("index is non-empty by construction");
        ((pixel % self.width, pixel / self.width), d2.sqrt())
    }

    pub fn len(&self) -> usize {
        self.tree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.is_empty()
    }
}

/// Structures all in-mask TOC values of an image for nearest-neighbor lookup.
pub fn build_toc_index(image: &TocImage) -> Result<TocIndex> {
    let mut points = Vec::new();
    let mut payload = Vec::new();
    for row in 0..image.height {
        for col in 0..image.width {
            if image.in_mask(col, row) {
                let t = image.toc_at(col, row);
                points.push([t.x, t.y, t.z]);
                payload.push(row * image.width + col);
            }
        }
    }
    if points.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(TocIndex {
        tree: KdTree::new(points, payload),
        width: image.width,
    })
}

/// Result of subpixel refinement (or its integer-pixel fallback).
#[derive(Debug, Clone, Copy)]
pub struct SubpixelMatch {
    pub pos: Vector2<f64>,
    pub toc: Vector3<f64>,
    pub distance: f64,
}

/// Searches a (2·factor+1)^2 grid of bilinear samples spanning offsets
/// [-1, +1] around the integer match for the TOC value closest to the query.
/// Falls back to the integer pixel when its 3x3 neighborhood leaves the mask.
pub fn refine_subpixel(
    image: &TocImage,
    query: &Vector3<f64>,
    col: u32,
    row: u32,
    factor: u32,
) -> SubpixelMatch {
    let center = Vector2::new(col as f64 + 0.5, row as f64 + 0.5);
    let center_toc = image.toc_at(col, row);
    let integer = SubpixelMatch {
        pos: center,
        toc: center_toc,
        distance: (center_toc - query).norm(),
    };
    // Bilinear interpolation reads the full 3x3 neighborhood.
    if col == 0 || row == 0 || col + 1 >= image.width || row + 1 >= image.height {
        return integer;
    }
    for dr in -1i64..=1 {
        for dc in -1i64..=1 {
            if !image.in_mask((col as i64 + dc) as u32, (row as i64 + dr) as u32) {
                return integer;
            }
        }
    }
    let mut best = integer;
    let f = factor as i64;
    // Visit offsets nearest the integer pixel first; with strict improvement
    // this keeps ties (e.g. directions the TOC field is constant along) at
    // the smallest offset.
    let mut offsets: Vec<(i64, i64)> = (-f..=f)
        .flat_map(|ky| (-f..=f).map(move |kx| (ky, kx)))
        .collect();
    offsets.sort_by_key(|&(ky, kx)| (ky * ky + kx * kx, ky, kx));
    for (ky, kx) in offsets {
        let pos = center + Vector2::new(kx as f64 / f as f64, ky as f64 / f as f64);
        let toc = image.bilinear_toc(pos);
        let d = (toc - query).norm();
        if d < best.distance {
            best = SubpixelMatch {
                pos,
                toc,
                distance: d,
            };
        }
    }
    best
}

/// Matches every sampled TOC query against every view. Tracks keep at most
/// one observation per view and are dropped below two observations. Output
/// order is deterministic: by source view, then sample index.
pub fn match_correspondences(
    images: &[TocImage],
    config: &SfmConfig,
) -> Result<Vec<CorrespondenceTrack>> {
    if images.len() < 2 {
        return Err(Error::InsufficientViews {
            required: 2,
            got: images.len(),
        });
    }
    let indices: Vec<TocIndex> = images
        .par_iter()
        .map(build_toc_index)
        .collect::<Result<_>>()?;

    let mut queries = Vec::new();
    for (view, image) in images.iter().enumerate() {
        let samples = sample_points(
            image,
            config.samples_per_image,
            config
                .seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(view as u64),
        )?;
        for (i, s) in samples.into_iter().enumerate() {
            queries.push((view, i, s));
        }
    }

    let tracks: Vec<CorrespondenceTrack> = queries
        .par_iter()
        .map(|&(source_view, sample_index, sample)| {
            let query = sample.toc;
            let mut observations = Vec::new();
            for (view, (index, image)) in indices.iter().zip(images).enumerate() {
                let ((col, row), _) = index.nearest(&query);
                let matched = if config.use_subpixel {
                    refine_subpixel(image, &query, col, row, config.subpixel_factor)
                } else {
                    let toc = image.toc_at(col, row);
                    SubpixelMatch {
                        pos: Vector2::new(col as f64 + 0.5, row as f64 + 0.5),
                        toc,
                        distance: (toc - query).norm(),
                    }
                };
                if matched.distance <= config.match_threshold {
                    observations.push(Observation {
                        view,
                        pos: matched.pos,
                        toc: matched.toc,
                        normal_cam: image.bilinear_normal(matched.pos),
                    });
                }
            }
            CorrespondenceTrack {
                query_toc: query,
                source_view,
                sample_index,
                observations,
                point: None,
                mean_reprojection_error: None,
                failed: false,
            }
        })
        .filter(|t| t.observations.len() >= 2)
        .collect();
    Ok(tracks)
}

/// Joint DLT triangulation of each track across all of its observations.
/// Degenerate tracks are marked failed rather than aborting the pipeline.
pub fn triangulate_tracks(tracks: &mut [CorrespondenceTrack], cameras: &[CameraView]) {
    tracks.par_iter_mut().for_each(|track| {
        let obs: Vec<(&CameraView, Vector2<f64>)> = track
            .observations
            .iter()
            .map(|o| (&cameras[o.view], o.pos))
            .collect();
        match triangulate_dlt(&obs) {
            Ok(point) => match reprojection_error(&point, &obs) {
                Ok(err) => {
                    track.point = Some(point);
                    track.mean_reprojection_error = Some(err);
                }
                Err(_) => track.failed = true,
            },
            Err(_) => track.failed = true,
        }
    });
}

/// Three filters, in order: mean reprojection error above threshold, points
/// below the floor plane, statistical outlier removal (mean distance to the
/// k nearest neighbors beyond mean + ratio * std of that statistic).
pub fn filter_points(
    tracks: Vec<CorrespondenceTrack>,
    config: &SfmConfig,
) -> Result<Vec<CorrespondenceTrack>> {
    let kept: Vec<CorrespondenceTrack> = tracks
        .into_iter()
        .filter(|t| {
            !t.failed
                && t.point.is_some()
                && t.mean_reprojection_error
                    .map(|e| e <= config.reproj_threshold)
                    .unwrap_or(false)
        })
        .filter(|t| t.point.unwrap().z >= config.floor_z)
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptyCloud {
            stage: "reprojection/floor filtering".into(),
        });
    }
    let survivors = statistical_outlier_removal(kept, config.sor_k, config.sor_std_ratio);
    if survivors.is_empty() {
        return Err(Error::EmptyCloud {
            stage: "statistical outlier removal".into(),
        });
    }
    Ok(survivors)
}

fn statistical_outlier_removal(
    tracks: Vec<CorrespondenceTrack>,
    k: usize,
    std_ratio: f64,
) -> Vec<CorrespondenceTrack> {
    let n = tracks.len();
    if n <= 2 || k == 0 {
        return tracks;
    }
    let k = k.min(n - 1);
    let points: Vec<[f64; 3]> = tracks
        .iter()
        .map(|t| {
            let p = t.point.unwrap();
            [p.x, p.y, p.z]
        })
        .collect();
    let tree = KdTree::new(points.clone(), (0..n as u32).collect());
    let mean_dists: Vec<f64> = points
        .par_iter()
        .map(|p| {
            // k+1 neighbors include the query point itself at distance 0.
            let neighbors = tree.knn(p, k + 1);
            let sum: f64 = neighbors.iter().skip(1).map(|&(_, d2)| d2.sqrt()).sum();
            sum / k as f64
        })
        .collect();
    let mean = mean_dists.iter().sum::<f64>() / n as f64;
    let var = mean_dists.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n as f64;
    let cutoff = mean + std_ratio * var.sqrt();
    tracks
        .into_iter()
        .zip(mean_dists)
        .filter(|(_, d)| *d <= cutoff)
        .map(|(t, _)| t)
        .collect()
}

/// Consensus normal: arithmetic mean of the polar angle, circular mean of the
/// azimuth, converted back to a unit vector.
pub fn aggregate_normals(normals: &[Vector3<f64>]) -> Result<Vector3<f64>> {
    if normals.is_empty() {
        return Err(Error::EmptyInput {
            what: "aggregate_normals needs at least one normal".into(),
        });
    }
    let mut theta_sum = 0.0;
    let mut sin_phi = 0.0;
    let mut cos_phi = 0.0;
    let mut count = 0usize;
    for n in normals {
        // Interpolated normals are not unit length; renormalize first.
        let len = n.norm();
        if len <= 1e-12 {
            continue;
        }
        let n = n / len;
        theta_sum += n.z.clamp(-1.0, 1.0).acos();
        let phi = n.y.atan2(n.x);
        sin_phi += phi.sin();
        cos_phi += phi.cos();
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyInput {
            what: "aggregate_normals needs at least one non-zero normal".into(),
        });
    }
    let theta = theta_sum / count as f64;
    let phi = sin_phi.atan2(cos_phi);
    Ok(Vector3::new(
        theta.sin() * phi.cos(),
        theta.sin() * phi.sin(),
        theta.cos(),
    ))
}

/// Full FOCUS-SfM pass over a loaded scene.
pub fn run_sfm(scene: &Scene, config: &SfmConfig) -> Result<OrientedPointCloud> {
    if scene.views.len() < 2 {
        return Err(Error::InsufficientViews {
            required: 2,
            got: scene.views.len(),
        });
    }
    let images: Vec<TocImage> = scene.views.iter().map(|(_, img)| img.clone()).collect();
    let cameras: Vec<CameraView> = scene.views.iter().map(|(cam, _)| cam.clone()).collect();
    let mut tracks = match_correspondences(&images, config)?;
    triangulate_tracks(&mut tracks, &cameras);
    let tracks = filter_points(tracks, config)?;

    let cloud: OrientedPointCloud = tracks
        .iter()
        .map(|track| {
            let world_normals: Vec<Vector3<f64>> = track
                .observations
                .iter()
                .map(|o| cameras[o.view].rotation.transpose() * o.normal_cam)
                .collect();
            let normal = if config.use_normal_aggregation {
                aggregate_normals(&world_normals).expect("track has observations")
            } else {
                let n = world_normals[0];
                let len = n.norm();
                if len > 0.0 {
                    n / len
                } else {
                    Vector3::z()
                }
            };
            OrientedPoint {
                position: track.point.unwrap(),
                normal,
                provenance: PointProvenance {
                    toc: track.query_toc,
                    view_count: track.observations.len() as u32,
                    mean_reprojection_error: track.mean_reprojection_error.unwrap(),
                },
            }
        })
        .collect();
    Ok(cloud)
}

/// Writes the oriented cloud as binary PLY plus the Poisson parameter sidecar
/// (`<out>.poisson.json`) consumed by external meshing.
pub fn write_sfm_outputs(cloud: &OrientedPointCloud, out: &Path) -> Result<()> {
    write_ply_cloud(out, cloud, false)?;
    let sidecar_path = sidecar_path(out);
    let json = serde_json::to_string_pretty(&PoissonSidecar::default()).expect("serializes");
    std::fs::write(&sidecar_path, json + "\n").map_err(|e| Error::io(&sidecar_path, e))
}

pub fn sidecar_path(out: &Path) -> std::path::PathBuf {
    let mut os = out.as_os_str().to_os_string();
    os.push(".poisson.json");
    std::path::PathBuf::from(os)
}
