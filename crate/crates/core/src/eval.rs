//! Evaluation: surface-to-surface and cloud-to-surface distance metrics,
//! normal consistency, height cropping, and view-count benchmarking.

use nalgebra::{Point3, Vector3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{OrientedPointCloud, TriMesh};
use crate::sfm::{run_sfm, SfmConfig};
use crate::spatial::{KdTree, TriBvh};
use crate::synth::Scene;

/// Height (mm) above which geometry is cropped before comparison; removes
/// the open shaft region that neither reconstruction method observes fully.
pub const DEFAULT_CROP_HEIGHT_MM: f64 = 100.0;

/// Distance statistics in one direction (source sampled against a target).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DirectionalMetrics {
    pub mean: f64,
    pub median: f64,
    pub rmse: f64,
    pub max: f64,
    pub samples: usize,
}

/// Symmetric mesh comparison: bidirectional chamfer plus normal consistency.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    /// Average of the two directional means, mm.
    pub chamfer_mean: f64,
    pub pred_to_gt: DirectionalMetrics,
    pub gt_to_pred: DirectionalMetrics,
    /// Angle between matched normals, degrees, unsigned but not folded:
    /// consistently flipped surfaces report near 180.
    pub normal_mean_deg: f64,
    pub normal_median_deg: f64,
}

/// One-directional cloud evaluation against a ground-truth surface.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CloudReport {
    pub cloud_to_gt: DirectionalMetrics,
    pub normal_mean_deg: f64,
    pub normal_median_deg: f64,
    /// Fraction of ground-truth surface samples with a cloud point within
    /// `coverage_radius_mm`.
    pub coverage: f64,
    pub coverage_radius_mm: f64,
}

/// One row of the view-count benchmark.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchRow {
    pub n_views: usize,
    pub points: usize,
    pub chamfer_mean: f64,
    pub normal_mean_deg: f64,
    pub coverage: f64,
}

fn summarize(mut dists: Vec<f64>) -> Result<DirectionalMetrics> {
    if dists.is_empty() {
        return Err(Error::EmptyInput {
            what: "no distances to summarize".into(),
        });
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = dists.len();
    let mean = dists.iter().sum::<f64>() / n as f64;
    let median = if n % 2 == 1 {
        dists[n / 2]
    } else {
        0.5 * (dists[n / 2 - 1] + dists[n / 2])
    };
    let rmse = (dists.iter().map(|d| d * d).sum::<f64>() / n as f64).sqrt();
    Ok(DirectionalMetrics {
        mean,
        median,
        rmse,
        max: dists[n - 1],
        samples: n,
    })
}

/// Keeps the part of the mesh with z <= z_max, clipping triangles that cross
/// the plane. Unreferenced vertices are dropped; TOC/normal attributes are
/// not carried over (the crop is for metric geometry only).
pub fn crop_at_height(mesh: &TriMesh, z_max: f64) -> Result<TriMesh> {
    let mut vertices: Vec<Point3<f64>> = Vec::new();
    let mut faces: Vec<[u32; 3]> = Vec::new();
    let push = |p: Point3<f64>, vertices: &mut Vec<Point3<f64>>| -> u32 {
        vertices.push(p);
        (vertices.len() - 1) as u32
    };
    let lerp = |a: &Point3<f64>, b: &Point3<f64>| {
        // Intersection with z = z_max along segment a-b.
        let t = (z_max - a.z) / (b.z - a.z);
        a + (b - a) * t
    };
    for f in 0..mesh.faces.len() {
        let tri = mesh.face_vertices(f);
        let inside: Vec<usize> = (0..3).filter(|&i| tri[i].z <= z_max).collect();
        match inside.len() {
            3 => {
                let i0 = push(tri[0], &mut vertices);
                let i1 = push(tri[1], &mut vertices);
                let i2 = push(tri[2], &mut vertices);
                faces.push([i0, i1, i2]);
            }
            2 => {
                // One vertex above the plane: clipping leaves a quad, split
                // into two triangles preserving winding.
                let out = (0..3).find(|i| !inside.contains(i)).unwrap();
                let a = (out + 1) % 3;
                let b = (out + 2) % 3;
                let pa = lerp(&tri[out], &tri[a]);
                let pb = lerp(&tri[out], &tri[b]);
                let ia = push(tri[a], &mut vertices);
                let ib = push(tri[b], &mut vertices);
                let ipa = push(pa, &mut vertices);
                let ipb = push(pb, &mut vertices);
                faces.push([ipa, ia, ib]);
                faces.push([ipa, ib, ipb]);
            }
            1 => {
                let keep = inside[0];
                let a = (keep + 1) % 3;
                let b = (keep + 2) % 3;
                let pa = lerp(&tri[keep], &tri[a]);
                let pb = lerp(&tri[keep], &tri[b]);
                let ik = push(tri[keep], &mut vertices);
                let ipa = push(pa, &mut vertices);
                let ipb = push(pb, &mut vertices);
                faces.push([ik, ipa, ipb]);
            }
            _ => {}
        }
    }
    if faces.is_empty() {
        return Err(Error::EmptyMesh {
            op: format!("cropping at z = {z_max}"),
        });
    }
    let mut out = TriMesh {
        vertices,
        faces,
        normals: None,
        toc: None,
    };
    out.compute_vertex_normals();
    Ok(out)
}

/// Area-weighted uniform surface sampling: positions plus face normals.
pub fn sample_surface(
    mesh: &TriMesh,
    n: usize,
    seed: u64,
) -> Result<Vec<(Point3<f64>, Vector3<f64>)>> {
    if mesh.faces.is_empty() {
        return Err(Error::EmptyMesh {
            op: "surface sampling".into(),
        });
    }
    let mut cumulative = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for f in 0..mesh.faces.len() {
        let [a, b, c] = mesh.face_vertices(f);
        total += 0.5 * (b - a).cross(&(c - a)).norm();
        cumulative.push(total);
    }
    if total <= 0.0 {
        return Err(Error::DegenerateMesh {
            reason: "total surface area is zero".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let r: f64 = rng.gen_range(0.0..total);
        let face = cumulative.partition_point(|&c| c <= r).min(mesh.faces.len() - 1);
        let [a, b, c] = mesh.face_vertices(face);
        // sqrt trick: uniform over the triangle.
        let su = rng.gen::<f64>().sqrt();
        let v: f64 = rng.gen();
        let p = a * (1.0 - su) + (b.coords * (su * (1.0 - v)) + c.coords * (su * v));
        out.push((Point3::from(p), mesh.face_normal(face)));
    }
    Ok(out)
}

/// Distances and normal angles (degrees) from each sample to a target mesh.
pub fn nn_metrics(
    samples: &[(Point3<f64>, Vector3<f64>)],
    target: &TriBvh,
    target_mesh: &TriMesh,
) -> (Vec<f64>, Vec<f64>) {
    let pairs: Vec<(f64, f64)> = samples
        .par_iter()
        .map(|(p, n)| {
            let hit = target.closest_point(p).expect("target mesh non-empty");
            let tn = target_mesh.face_normal(hit.face as usize);
            let cosine = n.dot(&tn).clamp(-1.0, 1.0);
            (hit.distance, cosine.acos().to_degrees())
        })
        .collect();
    pairs.into_iter().unzip()
}

/// Symmetric comparison of two meshes, both cropped at `crop_height` first.
pub fn compare_meshes(
    pred: &TriMesh,
    gt: &TriMesh,
    n_samples: usize,
    crop_height: f64,
    seed: u64,
) -> Result<MetricReport> {
    let pred = crop_at_height(pred, crop_height)?;
    let gt = crop_at_height(gt, crop_height)?;
    let pred_samples = sample_surface(&pred, n_samples, seed)?;
    let gt_samples = sample_surface(&gt, n_samples, seed ^ 0x5DEE_CE66)?;
    let pred_bvh = TriBvh::new(&pred);
    let gt_bvh = TriBvh::new(&gt);

    let (d_pg, a_pg) = nn_metrics(&pred_samples, &gt_bvh, &gt);
    let (d_gp, a_gp) = nn_metrics(&gt_samples, &pred_bvh, &pred);

    let pred_to_gt = summarize(d_pg)?;
    let gt_to_pred = summarize(d_gp)?;
    let mut angles: Vec<f64> = a_pg.into_iter().chain(a_gp).collect();
    angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let normal_mean_deg = angles.iter().sum::<f64>() / angles.len() as f64;
    let normal_median_deg = angles[angles.len() / 2];
    Ok(MetricReport {
        chamfer_mean: 0.5 * (pred_to_gt.mean + gt_to_pred.mean),
        pred_to_gt,
        gt_to_pred,
        normal_mean_deg,
        normal_median_deg,
    })
}

/// Evaluates an oriented point cloud against a ground-truth mesh: point-to-
/// surface distances, normal agreement, and coverage of the cropped surface
/// within `coverage_radius_mm`.
pub fn evaluate_cloud(
    cloud: &OrientedPointCloud,
    gt: &TriMesh,
    n_samples: usize,
    crop_height: f64,
    coverage_radius_mm: f64,
    seed: u64,
) -> Result<CloudReport> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud {
            stage: "evaluation input".into(),
        });
    }
    let gt = crop_at_height(gt, crop_height)?;
    let gt_bvh = TriBvh::new(&gt);
    let samples: Vec<(Point3<f64>, Vector3<f64>)> = cloud
        .iter()
        .map(|p| (p.position, p.normal))
        .collect();
    let (dists, angles) = nn_metrics(&samples, &gt_bvh, &gt);
    let cloud_to_gt = summarize(dists)?;
    let mut angles = angles;
    angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let normal_mean_deg = angles.iter().sum::<f64>() / angles.len() as f64;
    let normal_median_deg = angles[angles.len() / 2];

    let tree = KdTree::new(
        cloud.iter().map(|p| [p.position.x, p.position.y, p.position.z]).collect(),
        (0..cloud.len() as u32).collect(),
    );
    let gt_samples = sample_surface(&gt, n_samples, seed)?;
    let covered = gt_samples
        .par_iter()
        .filter(|(p, _)| {
            tree.nearest(&[p.x, p.y, p.z])
                .map(|(_, d2)| d2.sqrt() <= coverage_radius_mm)
                .unwrap_or(false)
        })
        .count();
    Ok(CloudReport {
        cloud_to_gt,
        normal_mean_deg,
        normal_median_deg,
        coverage: covered as f64 / n_samples as f64,
        coverage_radius_mm,
    })
}

/// Picks `k` views spread evenly over `0..n`.
pub fn evenly_spaced(n: usize, k: usize) -> Vec<usize> {
    assert!(k >= 1 && k <= n);
    (0..k).map(|i| i * n / k).collect()
}

/// Reconstruction quality as a function of view count: for each requested
/// count, runs the SfM pipeline on an evenly spaced subset and scores the
/// cloud against the scene's ground-truth mesh.
pub fn bench_views(
    scene: &Scene,
    view_counts: &[usize],
    sfm: &SfmConfig,
    n_samples: usize,
    crop_height: f64,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    let gt = scene.gt_mesh.as_ref().ok_or_else(|| Error::InvalidRequest {
        reason: "view benchmark needs a scene with a ground-truth mesh".into(),
    })?;
    let mut rows = Vec::with_capacity(view_counts.len());
    for &k in view_counts {
        if k < 2 || k > scene.views.len() {
            return Err(Error::InvalidRequest {
                reason: format!(
                    "view count {k} outside 2..={} available views",
                    scene.views.len()
                ),
            });
        }
        let subset = scene.subset(&evenly_spaced(scene.views.len(), k));
        let cloud = run_sfm(&subset, sfm)?;
        let report = evaluate_cloud(&cloud, gt, n_samples, crop_height, 2.0, seed)?;
        rows.push(BenchRow {
            n_views: k,
            points: cloud.len(),
            chamfer_mean: report.cloud_to_gt.mean,
            normal_mean_deg: report.normal_mean_deg,
            coverage: report.coverage,
        });
    }
    Ok(rows)
}

/// FOCUS-O variant of the view benchmark: fits the model on each subset and
/// scores the deformed template against the ground truth. `points` reports
/// the fitted mesh's vertex count; coverage is the fraction of ground-truth
/// samples within 2 mm of the fitted surface.
pub fn bench_views_optim(
    scene: &Scene,
    view_counts: &[usize],
    optim: &crate::optim::OptimConfig,
    n_samples: usize,
    crop_height: f64,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    let gt = scene.gt_mesh.as_ref().ok_or_else(|| Error::InvalidRequest {
        reason: "view benchmark needs a scene with a ground-truth mesh".into(),
    })?;
    let gt_cropped = crop_at_height(gt, crop_height)?;
    let gt_bvh_mesh = &gt_cropped;
    let mut rows = Vec::with_capacity(view_counts.len());
    for &k in view_counts {
        if k < 1 || k > scene.views.len() {
            return Err(Error::InvalidRequest {
                reason: format!(
                    "view count {k} outside 1..={} available views",
                    scene.views.len()
                ),
            });
        }
        let subset = scene.subset(&evenly_spaced(scene.views.len(), k));
        let fitted = crate::optim::fit(&subset, &scene.model, optim)?;
        let mesh = scene.model.deform_mesh(&fitted.params);
        let report = compare_meshes(&mesh, gt, n_samples, crop_height, seed)?;
        // Coverage of the ground truth by the fitted surface within 2 mm.
        let pred_cropped = crop_at_height(&mesh, crop_height)?;
        let pred_bvh = TriBvh::new(&pred_cropped);
        let gt_samples = sample_surface(gt_bvh_mesh, n_samples, seed)?;
        let covered = gt_samples
            .par_iter()
            .filter(|(p, _)| {
                pred_bvh
                    .closest_point(p)
                    .map(|h| h.distance <= 2.0)
                    .unwrap_or(false)
            })
            .count();
        rows.push(BenchRow {
            n_views: k,
            points: mesh.vertices.len(),
            chamfer_mean: report.chamfer_mean,
            normal_mean_deg: report.normal_mean_deg,
            coverage: covered as f64 / n_samples as f64,
        });
    }
    Ok(rows)
}

/// CSV rendering of benchmark rows (header + one line per row).
pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("n_views,points,chamfer_mean_mm,normal_mean_deg,coverage\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6}\n",
            r.n_views, r.points, r.chamfer_mean, r.normal_mean_deg, r.coverage
        ));
    }
    out
}
