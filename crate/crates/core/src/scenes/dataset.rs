//! Dataset directory: `manifest.json` plus `images/cam{c}_t{t}.png`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SceneSpec;
use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::image::Image;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

/// One observed image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Frame {
    pub camera: usize,
    pub timestamp: usize,
    /// Path relative to the dataset directory.
    pub image: String,
    /// `false` for held-out evaluation frames.
    pub train: bool,
}

/// A point of the aggregated initialization. `dynamic` and `timestamp` are
/// ground-truth labels for evaluation; training never reads them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitPoint {
    pub position: [f64; 3],
    /// Linear RGB in [0, 1].
    pub color: [f64; 3],
    pub dynamic: bool,
    pub timestamp: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub width: u32,
    pub height: u32,
    /// K.
    pub timestamps: usize,
    pub cameras: Vec<Camera>,
    pub frames: Vec<Frame>,
    pub init_points: Vec<InitPoint>,
    /// Per dynamic Gaussian, its position at each timestamp (evaluation only).
    pub trajectories: Vec<Vec<[f64; 3]>>,
    /// Generator settings, when synthetic.
    pub spec: Option<SceneSpec>,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Validation(format!(
                "unsupported manifest version {}",
                self.version
            )));
        }
        if self.timestamps < 2 {
            return Err(Error::Validation(format!(
                "K must be at least 2, got {}",
                self.timestamps
            )));
        }
        if self.frames.is_empty() {
            return Err(Error::Validation("dataset has no frames".into()));
        }
        if self.init_points.is_empty() {
            return Err(Error::Validation("dataset has no initialization points".into()));
        }
        for cam in &self.cameras {
            cam.validate()?;
            if (cam.width, cam.height) != (self.width, self.height) {
                return Err(Error::Validation("camera size differs from the image size".into()));
            }
        }
        for f in &self.frames {
            if f.timestamp >= self.timestamps {
                return Err(Error::Validation(format!(
                    "frame {} has timestamp index {} but K = {}",
                    f.image, f.timestamp, self.timestamps
                )));
            }
            if f.camera >= self.cameras.len() {
                return Err(Error::Validation(format!(
                    "frame {} references camera {} of {}",
                    f.image,
                    f.camera,
                    self.cameras.len()
                )));
            }
        }
        if let Some(p) = self
            .init_points
            .iter()
            .find(|p| p.timestamp.is_some_and(|t| t >= self.timestamps))
        {
            return Err(Error::Validation(format!(
                "init point timestamp {:?} >= K",
                p.timestamp
            )));
        }
        Ok(())
    }
}

/// Manifest plus the images, aligned with `manifest.frames`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub images: Vec<Image>,
}

impl Dataset {
    pub fn timestamps(&self) -> usize {
        self.manifest.timestamps
    }

    /// Indices of training frames.
    pub fn train_frames(&self) -> Vec<usize> {
        (0..self.manifest.frames.len())
            .filter(|&i| self.manifest.frames[i].train)
            .collect()
    }

    /// Indices of held-out frames.
    pub fn eval_frames(&self) -> Vec<usize> {
        (0..self.manifest.frames.len())
            .filter(|&i| !self.manifest.frames[i].train)
            .collect()
    }

    pub fn camera(&self, frame: usize) -> &Camera {
        &self.manifest.cameras[self.manifest.frames[frame].camera]
    }

    /// Normalized time of a frame.
    pub fn time(&self, frame: usize) -> f64 {
        self.manifest.frames[frame].timestamp as f64 / (self.manifest.timestamps - 1) as f64
    }

    pub fn init_positions(&self) -> Vec<[f64; 3]> {
        self.manifest.init_points.iter().map(|p| p.position).collect()
    }

    pub fn init_colors(&self) -> Vec<[f64; 3]> {
        self.manifest.init_points.iter().map(|p| p.color).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.manifest.validate()?;
        if self.images.len() != self.manifest.frames.len() {
            return Err(Error::Validation(format!(
                "{} images for {} frames",
                self.images.len(),
                self.manifest.frames.len()
            )));
        }
        for (f, img) in self.manifest.frames.iter().zip(&self.images) {
            if (img.width, img.height) != (self.manifest.width as usize, self.manifest.height as usize) {
                return Err(Error::Validation(format!(
                    "image {} is {}x{}, expected {}x{}",
                    f.image, img.width, img.height, self.manifest.width, self.manifest.height
                )));
            }
        }
        Ok(())
    }
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    dataset.validate()?;
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    for (f, img) in dataset.manifest.frames.iter().zip(&dataset.images) {
        img.save_png(&dir.join(&f.image))?;
    }
    let text = serde_json::to_string_pretty(&dataset.manifest)
        .map_err(|e| Error::Validation(format!("cannot serialize manifest: {e}")))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Validation(format!("malformed manifest {}: {e}", path.display())))?;
    manifest.validate()?;
    let images = manifest
        .frames
        .iter()
        .map(|f| Image::load_png(&dir.join(&f.image)))
        .collect::<Result<Vec<_>>>()?;
    let dataset = Dataset { manifest, images };
    dataset.validate()?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::generate_scene;

    fn small() -> Dataset {
        generate_scene(&SceneSpec {
            n_static: 6,
            n_dynamic: 3,
            cameras: 2,
            timestamps: 3,
            width: 12,
            height: 12,
            ..SceneSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = small();
        save_dataset(&d, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, d);
        let a = fs::read(dir.path().join(MANIFEST_FILE)).unwrap();
        save_dataset(&back, dir.path()).unwrap();
        assert_eq!(fs::read(dir.path().join(MANIFEST_FILE)).unwrap(), a);
    }

    #[test]
    fn missing_image_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let d = small();
        save_dataset(&d, dir.path()).unwrap();
        fs::remove_file(dir.path().join("images/cam1_t2.png")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.is_io());
        assert!(err.to_string().contains("cam1_t2.png"), "{err}");
    }

    #[test]
    fn bad_timestamp_is_rejected() {
        let mut d = small();
        d.manifest.frames[0].timestamp = 3;
        assert!(matches!(d.manifest.validate(), Err(Error::Validation(_))));
    }
}
