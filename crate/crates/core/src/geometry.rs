//! Pinhole cameras, projection, DLT triangulation and the basic mesh /
//! point-cloud types shared by the rest of the pipeline.
//!
//! Conventions: world-to-camera extrinsics, right-handed frames, +Z into the
//! scene, units of millimetres for 3D quantities and pixels for 2D.

use nalgebra::{DMatrix, Matrix3, Point3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Single-focal form (`f = fx = fy`).
    pub fn simple(f: f64, cx: f64, cy: f64) -> Self {
        Intrinsics {
            fx: f,
            fy: f,
            cx,
            cy,
        }
    }
}

/// One calibrated view: intrinsics plus a world-to-camera pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraView {
    pub intrinsics: Intrinsics,
    /// World-to-camera rotation, orthonormal with determinant +1.
    pub rotation: Matrix3<f64>,
    /// World-to-camera translation, mm.
    pub translation: Vector3<f64>,
    pub width: u32,
    pub height: u32,
}

impl CameraView {
    pub fn new(
        intrinsics: Intrinsics,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let cam = CameraView {
            intrinsics,
            rotation,
            translation,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Enforces orthonormality (det +1 within 1e-9), positive focals and size.
    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let should_be_identity = r.transpose() * r;
        let ortho_err = (should_be_identity - Matrix3::identity()).abs().max();
        if ortho_err > 1e-9 {
            return Err(Error::OutOfRange {
                what: format!("rotation not orthonormal (error {ortho_err:.3e})"),
            });
        }
        if (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::OutOfRange {
                what: format!("rotation determinant {} != +1", r.determinant()),
            });
        }
        if self.intrinsics.fx <= 0.0 || self.intrinsics.fy <= 0.0 {
            return Err(Error::OutOfRange {
                what: "focal lengths must be positive".into(),
            });
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::OutOfRange {
                what: "image size must be positive".into(),
            });
        }
        Ok(())
    }

    /// World point to camera-frame coordinates.
    pub fn to_camera(&self, point: &Point3<f64>) -> Vector3<f64> {
        self.rotation * point.coords + self.translation
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Point3<f64> {
        Point3::from(-(self.rotation.transpose() * self.translation))
    }
}

/// Triangle mesh with optional per-vertex normals and TOC attributes.
#[derive(Debug, Clone, Default)]
pub struct TriMesh {
    pub vertices: Vec<Point3<f64>>,
    pub faces: Vec<[u32; 3]>,
    /// Unit per-vertex normals, when present.
    pub normals: Option<Vec<Vector3<f64>>>,
    /// Per-vertex template object coordinates in [0,1]^3, when present.
    pub toc: Option<Vec<Vector3<f64>>>,
}

impl TriMesh {
    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len() as u32;
        for face in &self.faces {
            if face.iter().any(|&i| i >= n) {
                return Err(Error::OutOfRange {
                    what: format!("face index out of range in {face:?} (n = {n})"),
                });
            }
        }
        if let Some(normals) = &self.normals {
            for nv in normals {
                if (nv.norm() - 1.0).abs() > 1e-6 {
                    return Err(Error::OutOfRange {
                        what: format!("non-unit vertex normal |n| = {}", nv.norm()),
                    });
                }
            }
        }
        if let Some(toc) = &self.toc {
            for t in toc {
                if t.iter().any(|&c| !(0.0..=1.0).contains(&c)) {
                    return Err(Error::OutOfRange {
                        what: format!("TOC outside [0,1]^3: {t:?}"),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn face_vertices(&self, face: usize) -> [Point3<f64>; 3] {
        let [a, b, c] = self.faces[face];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    pub fn face_normal(&self, face: usize) -> Vector3<f64> {
        let [a, b, c] = self.face_vertices(face);
        let n = (b - a).cross(&(c - a));
        let len = n.norm();
        if len > 0.0 {
            n / len
        } else {
            Vector3::zeros()
        }
    }

    /// Area-weighted per-vertex normals recomputed from the faces.
    pub fn compute_vertex_normals(&mut self) {
        let mut acc = vec![Vector3::zeros(); self.vertices.len()];
        for face in &self.faces {
            let a = self.vertices[face[0] as usize];
            let b = self.vertices[face[1] as usize];
            let c = self.vertices[face[2] as usize];
            let n = (b - a).cross(&(c - a)); // twice the area, correct weight
            for &i in face {
                acc[i as usize] += n;
            }
        }
        for n in &mut acc {
            let len = n.norm();
            if len > 0.0 {
                *n /= len;
            } else {
                *n = Vector3::z();
            }
        }
        self.normals = Some(acc);
    }

    pub fn aabb(&self) -> (Point3<f64>, Point3<f64>) {
        let mut lo = Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut hi = Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for v in &self.vertices {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        (lo, hi)
    }
}

/// Metadata retained for each fused point.
#[derive(Debug, Clone, Copy)]
pub struct PointProvenance {
    pub toc: Vector3<f64>,
    pub view_count: u32,
    pub mean_reprojection_error: f64,
}

/// One fused surface point with its consensus normal.
#[derive(Debug, Clone, Copy)]
pub struct OrientedPoint {
    pub position: Point3<f64>,
    pub normal: Vector3<f64>,
    pub provenance: PointProvenance,
}

pub type OrientedPointCloud = Vec<OrientedPoint>;

/// Projects a world point through `camera`; errors if the depth is not positive.
pub fn project(camera: &CameraView, point: &Point3<f64>) -> Result<Vector2<f64>> {
    let pc = camera.to_camera(point);
    if pc.z <= 0.0 {
        return Err(Error::BehindCamera { depth: pc.z });
    }
    let k = &camera.intrinsics;
    Ok(Vector2::new(
        k.fx * pc.x / pc.z + k.cx,
        k.fy * pc.y / pc.z + k.cy,
    ))
}

/// Jacobian of `project` with respect to the world point, 2x3.
pub fn project_jacobian(
    camera: &CameraView,
    point: &Point3<f64>,
) -> Result<nalgebra::Matrix2x3<f64>> {
    let pc = camera.to_camera(point);
    if pc.z <= 0.0 {
        return Err(Error::BehindCamera { depth: pc.z });
    }
    let k = &camera.intrinsics;
    let inv_z = 1.0 / pc.z;
    let d_cam = nalgebra::Matrix2x3::new(
        k.fx * inv_z,
        0.0,
        -k.fx * pc.x * inv_z * inv_z,
        0.0,
        k.fy * inv_z,
        -k.fy * pc.y * inv_z * inv_z,
    );
    Ok(d_cam * camera.rotation)
}

/// Triangulates a 3D point from pixel observations via the direct linear
/// transformation: the smallest-singular-vector solution of the stacked
/// homogeneous system, dehomogenized.
pub fn triangulate_dlt(observations: &[(&CameraView, Vector2<f64>)]) -> Result<Point3<f64>> {
    if observations.len() < 2 {
        return Err(Error::InsufficientViews {
            required: 2,
            got: observations.len(),
        });
    }
    let mut a = DMatrix::<f64>::zeros(2 * observations.len(), 4);
    for (i, (cam, px)) in observations.iter().enumerate() {
        let k = &cam.intrinsics;
        // Normalized image coordinates keep the rows well scaled.
        let x = (px.x - k.cx) / k.fx;
        let y = (px.y - k.cy) / k.fy;
        let r = &cam.rotation;
        let t = &cam.translation;
        for col in 0..3 {
            a[(2 * i, col)] = x * r[(2, col)] - r[(0, col)];
            a[(2 * i + 1, col)] = y * r[(2, col)] - r[(1, col)];
        }
        a[(2 * i, 3)] = x * t.z - t.x;
        a[(2 * i + 1, 3)] = y * t.z - t.y;
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.as_ref().expect("svd requested v_t");
    let sv = &svd.singular_values;
    // The system must have rank 3: a 1-dimensional null space pins the point.
    let s_max = sv[0];
    if s_max <= 0.0 || sv[2] / s_max < 1e-10 {
        return Err(Error::DegenerateConfiguration {
            reason: format!("rank-deficient DLT system (sigma = {:?})", sv.as_slice()),
        });
    }
    let h = v_t.row(v_t.nrows() - 1);
    let norm = h.norm();
    let w = h[3];
    if w.abs() < 1e-12 * norm {
        return Err(Error::DegenerateConfiguration {
            reason: "solution at infinity (|w| below dehomogenization guard)".into(),
        });
    }
    Ok(Point3::new(h[0] / w, h[1] / w, h[2] / w))
}

/// Mean Euclidean pixel distance between the point's projections and the
/// observed pixels.
pub fn reprojection_error(
    point: &Point3<f64>,
    observations: &[(&CameraView, Vector2<f64>)],
) -> Result<f64> {
    if observations.is_empty() {
        return Err(Error::EmptyInput {
            what: "reprojection_error needs at least one observation".into(),
        });
    }
    let mut sum = 0.0;
    for (cam, px) in observations {
        sum += (project(cam, point)? - px).norm();
    }
    Ok(sum / observations.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn identity_camera() -> CameraView {
        CameraView::new(
            Intrinsics::simple(500.0, 320.0, 240.0),
            Matrix3::identity(),
            Vector3::zeros(),
            640,
            480,
        )
        .unwrap()
    }

    fn look_at_camera(eye: Point3<f64>, target: Point3<f64>) -> CameraView {
        let fwd = (target - eye).normalize();
        let mut up = Vector3::z();
        if fwd.cross(&up).norm() < 1e-6 {
            up = Vector3::y();
        }
        let right = fwd.cross(&up).normalize();
        let down = fwd.cross(&right).normalize();
        let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), fwd.transpose()]);
        CameraView::new(
            Intrinsics::simple(500.0, 320.0, 240.0),
            rot,
            -(rot * eye.coords),
            640,
            480,
        )
        .unwrap()
    }

    #[test]
    fn project_optical_axis_hits_principal_point() {
        let cam = identity_camera();
        let px = project(&cam, &Point3::new(0.0, 0.0, 1000.0)).unwrap();
        assert_relative_eq!(px, Vector2::new(320.0, 240.0));
    }

    #[test]
    fn project_off_axis() {
        let cam = identity_camera();
        let px = project(&cam, &Point3::new(100.0, 0.0, 1000.0)).unwrap();
        assert_relative_eq!(px, Vector2::new(370.0, 240.0));
    }

    #[test]
    fn project_behind_camera_errors() {
        let cam = identity_camera();
        let err = project(&cam, &Point3::new(0.0, 0.0, -10.0)).unwrap_err();
        assert!(matches!(err, Error::BehindCamera { .. }));
    }

    #[test]
    fn project_jacobian_matches_finite_differences() {
        let cam = look_at_camera(Point3::new(300.0, 150.0, 400.0), Point3::new(0.0, 0.0, 50.0));
        let p = Point3::new(12.0, -20.0, 40.0);
        let jac = project_jacobian(&cam, &p).unwrap();
        let h = 1e-5;
        for k in 0..3 {
            let mut hi = p;
            let mut lo = p;
            hi[k] += h;
            lo[k] -= h;
            let fd = (project(&cam, &hi).unwrap() - project(&cam, &lo).unwrap()) / (2.0 * h);
            assert_relative_eq!(jac.column(k).into_owned(), fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn triangulate_two_view_round_trip() {
        let cam_a = identity_camera();
        let mut cam_b = identity_camera();
        cam_b.translation = Vector3::new(-100.0, 0.0, 0.0); // 100 mm baseline
        let p = Point3::new(10.0, 20.0, 500.0);
        let obs = [
            (&cam_a, project(&cam_a, &p).unwrap()),
            (&cam_b, project(&cam_b, &p).unwrap()),
        ];
        let rec = triangulate_dlt(&obs).unwrap();
        assert!((rec - p).norm() < 1e-6, "recovered {rec:?}");
    }

    #[test]
    fn triangulate_single_observation_errors() {
        let cam = identity_camera();
        let obs = [(&cam, Vector2::new(320.0, 240.0))];
        assert!(matches!(
            triangulate_dlt(&obs),
            Err(Error::InsufficientViews { .. })
        ));
    }

    #[test]
    fn triangulate_coincident_rays_degenerate() {
        let cam = identity_camera();
        let px = Vector2::new(350.0, 260.0);
        let obs = [(&cam, px), (&cam, px)];
        assert!(matches!(
            triangulate_dlt(&obs),
            Err(Error::DegenerateConfiguration { .. })
        ));
    }

    #[test]
    fn reprojection_error_mean() {
        let cam_a = identity_camera();
        let mut cam_b = identity_camera();
        cam_b.translation = Vector3::new(-100.0, 0.0, 0.0);
        let p = Point3::new(10.0, 20.0, 500.0);
        let exact_a = project(&cam_a, &p).unwrap();
        let exact_b = project(&cam_b, &p).unwrap();
        let obs = [(&cam_a, exact_a), (&cam_b, exact_b)];
        assert_relative_eq!(reprojection_error(&p, &obs).unwrap(), 0.0);
        let offset = [(&cam_a, exact_a), (&cam_b, exact_b + Vector2::new(3.0, 0.0))];
        assert_relative_eq!(reprojection_error(&p, &offset).unwrap(), 1.5);
    }

    #[test]
    fn reprojection_error_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let cams: Vec<CameraView> = (0..4)
                .map(|i| {
                    let angle = i as f64 * 1.3 + rng.gen::<f64>();
                    look_at_camera(
                        Point3::new(600.0 * angle.cos(), 600.0 * angle.sin(), 400.0),
                        Point3::new(0.0, 0.0, 0.0),
                    )
                })
                .collect();
            let p = Point3::new(
                rng.gen_range(-50.0..50.0),
                rng.gen_range(-50.0..50.0),
                rng.gen_range(-50.0..50.0),
            );
            let obs: Vec<(&CameraView, Vector2<f64>)> = cams
                .iter()
                .map(|c| {
                    (
                        c,
                        Vector2::new(rng.gen_range(0.0..640.0), rng.gen_range(0.0..480.0)),
                    )
                })
                .collect();
            let expect = obs
                .iter()
                .map(|(c, px)| (project(c, &p).unwrap() - px).norm())
                .sum::<f64>()
                / obs.len() as f64;
            assert_relative_eq!(reprojection_error(&p, &obs).unwrap(), expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn camera_validation_rejects_skewed_rotation() {
        let mut rot = Matrix3::identity();
        rot[(0, 1)] = 1e-3;
        let res = CameraView::new(
            Intrinsics::simple(500.0, 320.0, 240.0),
            rot,
            Vector3::zeros(),
            640,
            480,
        );
        assert!(res.is_err());
    }

    proptest! {
        #[test]
        fn project_is_scale_consistent(
            x in -200.0f64..200.0, y in -200.0f64..200.0, z in 100.0f64..2000.0,
            lambda in 0.1f64..10.0,
        ) {
            let cam = identity_camera();
            // Identity pose: camera frame == world frame, so scaling the point
            // scales camera coordinates directly.
            let a = project(&cam, &Point3::new(x, y, z)).unwrap();
            let b = project(&cam, &Point3::new(lambda * x, lambda * y, lambda * z)).unwrap();
            prop_assert!((a - b).norm() < 1e-6);
        }

        #[test]
        fn triangulation_round_trip_multi_view(
            x in -80.0f64..80.0, y in -80.0f64..80.0, z in -40.0f64..120.0,
            n_views in 2usize..6, seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = Point3::new(x, y, z);
            let cams: Vec<CameraView> = (0..n_views)
                .map(|i| {
                    let angle = i as f64 * std::f64::consts::TAU / n_views as f64
                        + rng.gen_range(0.0..0.3);
                    look_at_camera(
                        Point3::new(700.0 * angle.cos(), 700.0 * angle.sin(), 500.0),
                        Point3::new(0.0, 0.0, 40.0),
                    )
                })
                .collect();
            let obs: Vec<(&CameraView, Vector2<f64>)> =
                cams.iter().map(|c| (c, project(c, &p).unwrap())).collect();
            let rec = triangulate_dlt(&obs).unwrap();
            prop_assert!((rec - p).norm() < 1e-6 * (1.0 + p.coords.norm()));
        }

        #[test]
        fn dlt_is_near_optimal_under_small_noise(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = Point3::new(
                rng.gen_range(-50.0..50.0),
                rng.gen_range(-50.0..50.0),
                rng.gen_range(0.0..80.0),
            );
            let cams: Vec<CameraView> = (0..3)
                .map(|i| {
                    let angle = i as f64 * 2.1;
                    look_at_camera(
                        Point3::new(700.0 * angle.cos(), 700.0 * angle.sin(), 500.0),
                        Point3::new(0.0, 0.0, 40.0),
                    )
                })
                .collect();
            let obs: Vec<(&CameraView, Vector2<f64>)> = cams
                .iter()
                .map(|c| {
                    let noise = Vector2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                    (c, project(c, &p).unwrap() + noise)
                })
                .collect();
            let sol = triangulate_dlt(&obs).unwrap();
            let base = reprojection_error(&sol, &obs).unwrap();
            for _ in 0..5 {
                let perturbed = sol + Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                );
                let other = reprojection_error(&perturbed, &obs).unwrap();
                prop_assert!(base <= other + 1.0);
            }
        }
    }
}
