//! Procedural deformable foot model: a template mesh with per-vertex template
//! object coordinates, seed-deterministic shape displacement fields, smooth
//! articulation warps, and analytic derivatives of the full deformation
//!
//!   x2 = s * R(r) * (x + sum_i zs_i * B_i(x) + W(x, zp)) + t
//!
//! with respect to every parameter and to the template point.

use nalgebra::{DMatrix, Matrix3, Point3, Vector3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::TriMesh;

pub const DEFAULT_SHAPE_DIM: usize = 4;
pub const DEFAULT_POSE_DIM: usize = 4;

/// Registration + embedding parameters of the deformation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Axis-angle rotation, radians.
    pub rotation: Vector3<f64>,
    /// Uniform scale, > 0.
    pub scale: f64,
    /// Translation, mm.
    pub translation: Vector3<f64>,
    /// Shape embedding coefficients.
    pub z_shape: Vec<f64>,
    /// Pose embedding coefficients (bend angles, radians).
    pub z_pose: Vec<f64>,
}

impl ModelParams {
    pub fn identity(d_shape: usize, d_pose: usize) -> Self {
        ModelParams {
            rotation: Vector3::zeros(),
            scale: 1.0,
            translation: Vector3::zeros(),
            z_shape: vec![0.0; d_shape],
            z_pose: vec![0.0; d_pose],
        }
    }

    pub fn dof(&self) -> usize {
        7 + self.z_shape.len() + self.z_pose.len()
    }

    /// Flat layout: [r(3), s, t(3), z_shape, z_pose].
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dof());
        v.extend_from_slice(self.rotation.as_slice());
        v.push(self.scale);
        v.extend_from_slice(self.translation.as_slice());
        v.extend_from_slice(&self.z_shape);
        v.extend_from_slice(&self.z_pose);
        v
    }

    pub fn from_vec(v: &[f64], d_shape: usize, d_pose: usize) -> Self {
        assert_eq!(v.len(), 7 + d_shape + d_pose);
        ModelParams {
            rotation: Vector3::new(v[0], v[1], v[2]),
            scale: v[3],
            translation: Vector3::new(v[4], v[5], v[6]),
            z_shape: v[7..7 + d_shape].to_vec(),
            z_pose: v[7 + d_shape..].to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        // NaN fails this comparison too.
        if self.scale.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::OutOfRange {
                what: format!("scale {} must be positive", self.scale),
            });
        }
        if self.to_vec().iter().any(|x| !x.is_finite()) {
            return Err(Error::OutOfRange {
                what: "non-finite model parameter".into(),
            });
        }
        Ok(())
    }
}

/// Rodrigues rotation matrix for an axis-angle vector.
pub fn rotation_matrix(r: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = r.norm_squared();
    let k = skew(r);
    if theta2 < 1e-24 {
        return Matrix3::identity() + k + k * k * 0.5;
    }
    let theta = theta2.sqrt();
    Matrix3::identity() + k * (theta.sin() / theta) + k * k * ((1.0 - theta.cos()) / theta2)
}

/// Partial derivatives dR/dr_i of the Rodrigues matrix (Gallego & Yezzi).
pub fn rotation_derivatives(r: &Vector3<f64>) -> [Matrix3<f64>; 3] {
    let theta2 = r.norm_squared();
    if theta2 < 1e-20 {
        return [
            skew(&Vector3::x()),
            skew(&Vector3::y()),
            skew(&Vector3::z()),
        ];
    }
    let rot = rotation_matrix(r);
    let mut out = [Matrix3::zeros(); 3];
    for (i, d) in out.iter_mut().enumerate() {
        let e = Vector3::ith(i, 1.0);
        let v = r.cross(&((Matrix3::identity() - rot) * e));
        *d = (skew(r) * r[i] + skew(&v)) * rot / theta2;
    }
    out
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// One per-axis sinusoidal displacement field over the normalized bbox.
#[derive(Debug, Clone)]
struct SinField {
    amp: Vector3<f64>,
    freq: [Vector3<f64>; 3],
    phase: Vector3<f64>,
}

impl SinField {
    fn eval(&self, n: &Vector3<f64>) -> Vector3<f64> {
        Vector3::from_fn(|j, _| {
            self.amp[j] * (std::f64::consts::TAU * self.freq[j].dot(n) + self.phase[j]).sin()
        })
    }

    /// Derivative with respect to the normalized coordinate.
    fn eval_grad_n(&self, n: &Vector3<f64>) -> Matrix3<f64> {
        Matrix3::from_fn(|j, k| {
            let arg = std::f64::consts::TAU * self.freq[j].dot(n) + self.phase[j];
            self.amp[j] * arg.cos() * std::f64::consts::TAU * self.freq[j][k]
        })
    }
}

/// Smooth bend about an axis, ramped along the template length.
#[derive(Debug, Clone)]
struct BendWarp {
    axis: Vector3<f64>,
    pivot: Point3<f64>,
    ramp_lo: f64,
    ramp_hi: f64,
}

impl BendWarp {
    /// Smoothstep weight as a function of the normalized length coordinate.
    fn weight(&self, u: f64) -> (f64, f64) {
        if u <= self.ramp_lo {
            (0.0, 0.0)
        } else if u >= self.ramp_hi {
            (1.0, 0.0)
        } else {
            let span = self.ramp_hi - self.ramp_lo;
            let t = (u - self.ramp_lo) / span;
            (t * t * (3.0 - 2.0 * t), 6.0 * t * (1.0 - t) / span)
        }
    }

    fn rot_and_deriv(&self, angle: f64) -> (Matrix3<f64>, Matrix3<f64>) {
        let k = skew(&self.axis);
        let k2 = k * k;
        let rot = Matrix3::identity() + k * angle.sin() + k2 * (1.0 - angle.cos());
        let drot = k * angle.cos() + k2 * angle.sin();
        (rot, drot)
    }
}

/// Immutable deformable template model.
#[derive(Debug, Clone)]
pub struct DeformableModel {
    pub template: TriMesh,
    pub bbox_min: Point3<f64>,
    pub bbox_max: Point3<f64>,
    shape_basis: Vec<SinField>,
    pose_warps: Vec<BendWarp>,
}

impl DeformableModel {
    /// Procedural foot-like template plus seeded deformation fields.
    pub fn procedural(seed: u64, d_shape: usize, d_pose: usize) -> Self {
        let template = foot_template();
        Self::from_template(template, seed, d_shape, d_pose)
    }

    /// Wraps an arbitrary template mesh: assigns TOC per vertex from its tight
    /// bounding box and builds the seeded deformation fields.
    pub fn from_template(mut template: TriMesh, seed: u64, d_shape: usize, d_pose: usize) -> Self {
        let (bbox_min, bbox_max) = template.aabb();
        let extent = bbox_max - bbox_min;
        assert!(
            extent.iter().all(|&e| e > 0.0),
            "template bbox must have positive extent per axis"
        );
        let toc: Vec<Vector3<f64>> = template
            .vertices
            .iter()
            .map(|v| (v - bbox_min).component_div(&extent))
            .collect();
        template.toc = Some(toc);
        if template.normals.is_none() {
            template.compute_vertex_normals();
        }

        let diag = extent.norm();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape_basis = (0..d_shape)
            .map(|_| SinField {
                amp: Vector3::from_fn(|_, _| {
                    let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                    sign * rng.gen_range(0.005..0.02) * diag
                }),
                freq: [
                    Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0)),
                    Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0)),
                    Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0)),
                ],
                phase: Vector3::from_fn(|_, _| rng.gen_range(0.0..std::f64::consts::TAU)),
            })
            .collect();

        let mid = nalgebra::center(&bbox_min, &bbox_max);
        let at = |frac: f64| Point3::new(bbox_min.x + frac * extent.x, mid.y, mid.z);
        let canonical = [
            // Toe flexion about the transverse axis at 60% of the length.
            BendWarp {
                axis: Vector3::y(),
                pivot: at(0.6),
                ramp_lo: 0.55,
                ramp_hi: 0.75,
            },
            // Toe yaw about the vertical axis, same pivot and ramp.
            BendWarp {
                axis: Vector3::z(),
                pivot: at(0.6),
                ramp_lo: 0.55,
                ramp_hi: 0.75,
            },
            // Global dorsiflexion-style bend.
            BendWarp {
                axis: Vector3::y(),
                pivot: at(0.3),
                ramp_lo: 0.05,
                ramp_hi: 0.95,
            },
            // Global roll bend.
            BendWarp {
                axis: Vector3::x(),
                pivot: at(0.5),
                ramp_lo: 0.05,
                ramp_hi: 0.95,
            },
        ];
        let pose_warps = (0..d_pose).map(|k| canonical[k % 4].clone()).collect();

        DeformableModel {
            template,
            bbox_min,
            bbox_max,
            shape_basis,
            pose_warps,
        }
    }

    pub fn d_shape(&self) -> usize {
        self.shape_basis.len()
    }

    pub fn d_pose(&self) -> usize {
        self.pose_warps.len()
    }

    fn extent(&self) -> Vector3<f64> {
        self.bbox_max - self.bbox_min
    }

    /// Normalizes a template-space point to [0,1]^3 by the bounding box.
    pub fn template_to_toc(&self, x: &Point3<f64>) -> Result<Vector3<f64>> {
        let extent = self.extent();
        for k in 0..3 {
            if x[k] < self.bbox_min[k] - 1e-9 || x[k] > self.bbox_max[k] + 1e-9 {
                return Err(Error::OutOfRange {
                    what: format!("point {x:?} outside template bbox on axis {k}"),
                });
            }
        }
        let t = (x - self.bbox_min).component_div(&extent);
        Ok(Vector3::from_fn(|k, _| t[k].clamp(0.0, 1.0)))
    }

    /// Exact affine inverse of [`Self::template_to_toc`].
    pub fn toc_to_template(&self, toc: &Vector3<f64>) -> Result<Point3<f64>> {
        if toc.iter().any(|&c| !(0.0..=1.0).contains(&c)) {
            return Err(Error::OutOfRange {
                what: format!("TOC {toc:?} outside [0,1]^3"),
            });
        }
        Ok(self.bbox_min + toc.component_mul(&self.extent()))
    }

    /// Jacobian of `toc_to_template` (constant diagonal: the bbox extent).
    pub fn toc_to_template_jacobian(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&self.extent())
    }

    fn normalized(&self, x: &Point3<f64>) -> Vector3<f64> {
        (x - self.bbox_min).component_div(&self.extent())
    }

    /// Template-frame displacement from shape and pose embeddings, and its
    /// derivative data when requested.
    fn local_offset(&self, x: &Point3<f64>, params: &ModelParams) -> Vector3<f64> {
        let n = self.normalized(x);
        let mut off = Vector3::zeros();
        for (zi, field) in params.z_shape.iter().zip(&self.shape_basis) {
            off += field.eval(&n) * *zi;
        }
        for (zk, warp) in params.z_pose.iter().zip(&self.pose_warps) {
            let (w, _) = warp.weight(n.x);
            let angle = zk * w;
            let (rot, _) = warp.rot_and_deriv(angle);
            let arm = x - warp.pivot;
            off += rot * arm - arm;
        }
        off
    }

    /// Deforms a template point to world space.
    pub fn deform(&self, x: &Point3<f64>, params: &ModelParams) -> Point3<f64> {
        let rot = rotation_matrix(&params.rotation);
        let local = x.coords + self.local_offset(x, params);
        Point3::from(rot * local * params.scale + params.translation)
    }

    /// Deforms every template vertex; normals are recomputed from the deformed
    /// geometry.
    pub fn deform_mesh(&self, params: &ModelParams) -> TriMesh {
        let mut mesh = self.template.clone();
        mesh.vertices = mesh.vertices.iter().map(|v| self.deform(v, params)).collect();
        mesh.compute_vertex_normals();
        mesh
    }

    /// Analytic derivatives of [`Self::deform`].
    pub fn jacobians(&self, x: &Point3<f64>, params: &ModelParams) -> DeformJacobians {
        let extent = self.extent();
        let n = self.normalized(x);
        let s = params.scale;
        let rot = rotation_matrix(&params.rotation);

        let mut offset = Vector3::zeros();
        // d(local)/dx, local = x + offset.
        let mut d_local_dx = Matrix3::identity();
        let mut d_dz_shape: Vec<Vector3<f64>> = Vec::with_capacity(self.d_shape());
        let mut d_dz_pose: Vec<Vector3<f64>> = Vec::with_capacity(self.d_pose());

        let inv_extent = Matrix3::from_diagonal(&Vector3::from_fn(|k, _| 1.0 / extent[k]));
        for (zi, field) in params.z_shape.iter().zip(&self.shape_basis) {
            offset += field.eval(&n) * *zi;
            d_local_dx += field.eval_grad_n(&n) * inv_extent * *zi;
            d_dz_shape.push(field.eval(&n));
        }
        for (zk, warp) in params.z_pose.iter().zip(&self.pose_warps) {
            let (w, dw_du) = warp.weight(n.x);
            let angle = zk * w;
            let (brot, dbrot) = warp.rot_and_deriv(angle);
            let arm = x - warp.pivot;
            offset += brot * arm - arm;
            // Angle varies along the template length.
            let d_angle_dx = Vector3::new(zk * dw_du / extent.x, 0.0, 0.0);
            d_local_dx += (brot - Matrix3::identity()) + (dbrot * arm) * d_angle_dx.transpose();
            d_dz_pose.push(dbrot * arm * w);
        }

        let local = x.coords + offset;
        let d_rot = rotation_derivatives(&params.rotation);

        let dof = 7 + self.d_shape() + self.d_pose();
        let mut d_params = DMatrix::<f64>::zeros(3, dof);
        for (i, dr) in d_rot.iter().enumerate() {
            d_params.set_column(i, &(dr * local * s));
        }
        d_params.set_column(3, &(rot * local));
        for i in 0..3 {
            d_params.set_column(4 + i, &Vector3::ith(i, 1.0));
        }
        for (i, b) in d_dz_shape.iter().enumerate() {
            d_params.set_column(7 + i, &(rot * b * s));
        }
        for (i, wv) in d_dz_pose.iter().enumerate() {
            d_params.set_column(7 + self.d_shape() + i, &(rot * wv * s));
        }

        DeformJacobians {
            d_params,
            d_point: rot * d_local_dx * s,
        }
    }
}

/// Derivatives of the deformation at one (point, params) pair.
pub struct DeformJacobians {
    /// 3 x (7 + D_s + D_p), columns in [r, s, t, z_shape, z_pose] order.
    pub d_params: DMatrix<f64>,
    /// 3x3 derivative with respect to the template point.
    pub d_point: Matrix3<f64>,
}

/// Generates the foot-like template: an elongated body with elliptical
/// cross-sections, rounded heel and toe closures, resting on z = 0.
fn foot_template() -> TriMesh {
    const LENGTH: f64 = 250.0;
    const N_RINGS: usize = 48;
    const N_SEG: usize = 100;

    // Rounded closure towards heel (u=0) and toe (u=1).
    let closure = |u: f64| (4.0 * u * (1.0 - u)).powf(0.35);
    // Half-width: widest near the ball of the foot.
    let half_width = |u: f64| {
        closure(u) * (28.0 + 10.0 * (std::f64::consts::PI * u).sin()
            + 8.0 * (-((u - 0.72) / 0.16).powi(2)).exp())
    };
    // Cross-section vertical half-extent and centre height.
    let center_height = |u: f64| 20.0 + 30.0 * (1.0 - u).powf(1.5);
    let half_height = |u: f64| closure(u) * center_height(u);

    let mut mesh = TriMesh::default();
    for i in 0..N_RINGS {
        let u = (i + 1) as f64 / (N_RINGS + 1) as f64;
        let (a, b, c) = (half_width(u), half_height(u), center_height(u));
        for j in 0..N_SEG {
            let v = j as f64 * std::f64::consts::TAU / N_SEG as f64;
            mesh.vertices.push(Point3::new(
                u * LENGTH,
                a * v.cos(),
                c + b * v.sin(),
            ));
        }
    }
    let heel_pole = mesh.vertices.len() as u32;
    mesh.vertices.push(Point3::new(0.0, 0.0, center_height(0.0)));
    let toe_pole = mesh.vertices.len() as u32;
    mesh.vertices.push(Point3::new(LENGTH, 0.0, center_height(1.0)));

    let ring = |i: usize, j: usize| (i * N_SEG + j % N_SEG) as u32;
    for i in 0..N_RINGS - 1 {
        for j in 0..N_SEG {
            let (a, b, c, d) = (ring(i, j), ring(i, j + 1), ring(i + 1, j), ring(i + 1, j + 1));
            mesh.faces.push([a, c, b]);
            mesh.faces.push([b, c, d]);
        }
    }
    for j in 0..N_SEG {
        mesh.faces.push([heel_pole, ring(0, j + 1), ring(0, j)]);
        mesh.faces.push([toe_pole, ring(N_RINGS - 1, j), ring(N_RINGS - 1, j + 1)]);
    }

    if signed_volume(&mesh) < 0.0 {
        for f in &mut mesh.faces {
            f.swap(1, 2);
        }
    }
    mesh.compute_vertex_normals();
    mesh
}

/// Signed volume via the divergence theorem; positive for outward winding.
pub fn signed_volume(mesh: &TriMesh) -> f64 {
    mesh.faces
        .iter()
        .map(|&[a, b, c]| {
            let va = mesh.vertices[a as usize].coords;
            let vb = mesh.vertices[b as usize].coords;
            let vc = mesh.vertices[c as usize].coords;
            va.dot(&vb.cross(&vc)) / 6.0
        })
        .sum()
}
