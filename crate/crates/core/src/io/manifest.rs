//! Scene manifest: JSON description of a captured (or synthesized) scene —
//! model spec, calibrated views and the raster files backing each view.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::CameraView;
use crate::model::ModelParams;

pub const MANIFEST_VERSION: u32 = 1;

/// How to construct the deformable model for this scene.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub seed: u64,
    pub d_shape: usize,
    pub d_pose: usize,
    /// Optional user-supplied template PLY, relative to the manifest.
    #[serde(default)]
    pub template_path: Option<String>,
}

/// Heteroscedastic noise applied by the prediction emulator, TOC units.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub sigma_base: f64,
    pub sigma_range: f64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if self.sigma_base < 0.0 || self.sigma_range < 0.0 {
            return Err(Error::InvalidSpec {
                reason: format!(
                    "noise sigma must be non-negative (base {}, range {})",
                    self.sigma_base, self.sigma_range
                ),
            });
        }
        Ok(())
    }
}

/// Raster files of one view, relative to the manifest directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RasterPaths {
    pub toc_mean: String,
    pub toc_logvar: String,
    pub normal: String,
    pub mask: String,
    pub depth: String,
}

impl RasterPaths {
    pub fn all(&self) -> [&str; 5] {
        [
            &self.toc_mean,
            &self.toc_logvar,
            &self.normal,
            &self.mask,
            &self.depth,
        ]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewEntry {
    pub camera: CameraView,
    pub rasters: RasterPaths,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub format_version: u32,
    /// Length unit of all 3D quantities; always "mm".
    pub units: String,
    pub model: ModelSpec,
    /// Present for synthetic scenes only.
    #[serde(default)]
    pub ground_truth_params: Option<ModelParams>,
    /// Ground-truth deformed mesh PLY, relative to the manifest.
    #[serde(default)]
    pub gt_mesh: Option<String>,
    #[serde(default)]
    pub noise: Option<NoiseSpec>,
    pub views: Vec<ViewEntry>,
}

impl SceneManifest {
    /// Structural validation beyond the serde schema: version, units, camera
    /// invariants, file resolvability.
    pub fn validate(&self, base_dir: &Path) -> Result<()> {
        if self.format_version != MANIFEST_VERSION {
            return Err(Error::Schema {
                field: "format_version".into(),
                reason: format!("unrecognized version {}", self.format_version),
            });
        }
        if self.units != "mm" {
            return Err(Error::Schema {
                field: "units".into(),
                reason: format!("expected \"mm\", got {:?}", self.units),
            });
        }
        if self.views.is_empty() {
            return Err(Error::Schema {
                field: "views".into(),
                reason: "at least one view required".into(),
            });
        }
        for (i, view) in self.views.iter().enumerate() {
            view.camera.validate().map_err(|e| Error::Schema {
                field: format!("views[{i}].camera"),
                reason: e.to_string(),
            })?;
            for rel in view.rasters.all() {
                let p = base_dir.join(rel);
                if !p.exists() {
                    return Err(Error::Schema {
                        field: format!("views[{i}].rasters"),
                        reason: format!("referenced file {} does not exist", p.display()),
                    });
                }
            }
        }
        if let Some(noise) = &self.noise {
            noise.validate().map_err(|e| Error::Schema {
                field: "noise".into(),
                reason: e.to_string(),
            })?;
        }
        if let Some(gt) = &self.gt_mesh {
            if !base_dir.join(gt).exists() {
                return Err(Error::Schema {
                    field: "gt_mesh".into(),
                    reason: format!("referenced file {gt} does not exist"),
                });
            }
        }
        Ok(())
    }

    pub fn gt_mesh_path(&self, base_dir: &Path) -> Option<PathBuf> {
        self.gt_mesh.as_ref().map(|g| base_dir.join(g))
    }
}

/// Reads and schema-validates a manifest. File-existence checks are relative
/// to the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<SceneManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: SceneManifest = serde_json::from_str(&text).map_err(|e| Error::Schema {
        field: format!("{path:?} line {} column {}", e.line(), e.column()),
        reason: e.to_string(),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    manifest.validate(base)?;
    Ok(manifest)
}

pub fn write_manifest(path: &Path, manifest: &SceneManifest) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Intrinsics;
    use nalgebra::{Matrix3, Vector3};

    fn minimal(dir: &Path) -> SceneManifest {
        let camera = CameraView {
            intrinsics: Intrinsics::simple(500.0, 160.0, 120.0),
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            width: 320,
            height: 240,
        };
        let rasters = RasterPaths {
            toc_mean: "v0_toc_mean.fimg".into(),
            toc_logvar: "v0_toc_logvar.fimg".into(),
            normal: "v0_normal.fimg".into(),
            mask: "v0_mask.fimg".into(),
            depth: "v0_depth.fimg".into(),
        };
        for rel in rasters.all() {
            fs::write(dir.join(rel), b"placeholder").unwrap();
        }
        SceneManifest {
            format_version: MANIFEST_VERSION,
            units: "mm".into(),
            model: ModelSpec {
                seed: 42,
                d_shape: 4,
                d_pose: 4,
                template_path: None,
            },
            ground_truth_params: None,
            gt_mesh: None,
            noise: None,
            views: vec![
                ViewEntry {
                    camera: camera.clone(),
                    rasters: rasters.clone(),
                },
                ViewEntry { camera, rasters },
            ],
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = minimal(dir.path());
        let path = dir.path().join("manifest.json");
        write_manifest(&path, &manifest).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back.views.len(), 2);
        assert_eq!(back.model.seed, 42);
        assert_eq!(back.views[0].camera, manifest.views[0].camera);
    }

    #[test]
    fn missing_views_field_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        fs::write(
            &path,
            r#"{"format_version":1,"units":"mm","model":{"seed":1,"d_shape":4,"d_pose":4}}"#,
        )
        .unwrap();
        let err = read_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("views"), "{err}");
    }

    #[test]
    fn unknown_field_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = minimal(dir.path());
        let path = dir.path().join("manifest.json");
        let mut value = serde_json::to_value(&manifest).unwrap();
        value["surprise"] = serde_json::json!(true);
        fs::write(&path, serde_json::to_string(&value).unwrap()).unwrap();
        let err = read_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("surprise"), "{err}");
    }

    #[test]
    fn non_orthonormal_rotation_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = minimal(dir.path());
        manifest.views[0].camera.rotation[(0, 1)] = 1e-3;
        let path = dir.path().join("manifest.json");
        write_manifest(&path, &manifest).unwrap();
        let err = read_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("orthonormal"), "{err}");
    }
}
