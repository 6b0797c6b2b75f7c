//! On-disk sequence layout.
//!
//! ```text
//! <dir>/frames/000000.png ...     8-bit RGB frames
//! <dir>/intrinsics.json           {fov_deg, width, height}
//! <dir>/poses.json                optional, one row-major pose per frame
//! <dir>/depth/000000.pfm ...      optional, camera-frame depth
//! <dir>/gaussians.bin (+ .json)   optional ground-truth primitives
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gaussian::{load_gaussians, save_gaussians, GaussianSet, GaussianSidecar};
use crate::geometry::{CameraIntrinsics, CameraPose, IntrinsicsRecord, PoseRecord};
use crate::image::{Image, ScalarImage};
use crate::json;

pub const FRAME_DIR: &str = "frames";
pub const DEPTH_DIR: &str = "depth";

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub images: Vec<Image>,
    pub intrinsics: IntrinsicsRecord,
    pub poses: Option<Vec<CameraPose>>,
    pub depths: Option<Vec<ScalarImage>>,
    pub gaussians: Option<(GaussianSet, GaussianSidecar)>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn camera(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::try_from(&self.intrinsics)
    }

    fn validate(&self) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::Argument("sequence has no frames".into()));
        }
        let dims = (self.intrinsics.width, self.intrinsics.height);
        if self.images.iter().any(|im| im.dims() != dims) {
            return Err(Error::Argument("frame size disagrees with the intrinsics".into()));
        }
        if self.poses.as_ref().is_some_and(|p| p.len() != n) {
            return Err(Error::Argument("pose count differs from frame count".into()));
        }
        if let Some(d) = &self.depths {
            if d.len() != n || d.iter().any(|d| d.dims() != dims) {
                return Err(Error::Argument("depth maps disagree with the frames".into()));
            }
        }
        Ok(())
    }
}

fn frame_name(i: usize, ext: &str) -> String {
    format!("{i:06}.{ext}")
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn save_sequence(seq: &Sequence, dir: &Path) -> Result<()> {
    seq.validate()?;
    create_dir(&dir.join(FRAME_DIR))?;
    for (i, im) in seq.images.iter().enumerate() {
        im.write_png(&dir.join(FRAME_DIR).join(frame_name(i, "png")))?;
    }
    json::write_pretty(&seq.intrinsics, &dir.join("intrinsics.json"))?;
    if let Some(poses) = &seq.poses {
        let recs: Vec<PoseRecord> = poses.iter().map(PoseRecord::from).collect();
        json::write_pretty(&recs, &dir.join("poses.json"))?;
    }
    if let Some(depths) = &seq.depths {
        create_dir(&dir.join(DEPTH_DIR))?;
        for (i, d) in depths.iter().enumerate() {
            d.write_pfm(&dir.join(DEPTH_DIR).join(frame_name(i, "pfm")))?;
        }
    }
    if let Some((set, side)) = &seq.gaussians {
        save_gaussians(set, side.near, side.far, &dir.join("gaussians.bin"))?;
    }
    Ok(())
}

/// Numbered files `000000.<ext>`, `000001.<ext>`, ... in `dir`; gaps are an error.
fn numbered_files(dir: &Path, ext: &str) -> Result<Vec<std::path::PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(&format!(".{ext}")) {
            names.push(name);
        }
    }
    names.sort();
    names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            if *name == frame_name(i, ext) {
                Ok(dir.join(name))
            } else {
                Err(Error::parse(dir.join(name), 0, format!("expected {}", frame_name(i, ext))))
            }
        })
        .collect()
}

pub fn load_sequence(dir: &Path) -> Result<Sequence> {
    let images = numbered_files(&dir.join(FRAME_DIR), "png")?
        .iter()
        .map(|p| Image::read_png(p))
        .collect::<Result<Vec<_>>>()?;
    let intrinsics: IntrinsicsRecord = json::read(&dir.join("intrinsics.json"))?;
    let pose_path = dir.join("poses.json");
    let poses = if pose_path.exists() {
        let recs: Vec<PoseRecord> = json::read(&pose_path)?;
        Some(recs.iter().map(CameraPose::try_from).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    let depth_dir = dir.join(DEPTH_DIR);
    let depths = if depth_dir.is_dir() {
        Some(
            numbered_files(&depth_dir, "pfm")?
                .iter()
                .map(|p| ScalarImage::read_pfm(p))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    let gauss_path = dir.join("gaussians.bin");
    let gaussians = if gauss_path.exists() {
        Some(load_gaussians(&gauss_path)?)
    } else {
        None
    };
    let seq = Sequence {
        images,
        intrinsics,
        poses,
        depths,
        gaussians,
    };
    seq.validate().map_err(|e| Error::parse(dir, 0, e.to_string()))?;
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneSpec};

    #[test]
    fn round_trip_is_bit_identical() {
        let spec = SceneSpec {
            sh_degree: 1,
            width: 20,
            height: 14,
            ..SceneSpec::default()
        };
        let seq = generate_scene(&spec, 4).unwrap().to_sequence();
        let dir = tempfile::tempdir().unwrap();
        save_sequence(&seq, dir.path()).unwrap();
        let back = load_sequence(dir.path()).unwrap();
        assert_eq!(back, seq);
        assert_eq!(back.camera().unwrap().fov_rad(), spec.fov_deg.to_radians());
    }

    #[test]
    fn optional_parts_may_be_absent() {
        let seq = Sequence {
            images: vec![Image::filled(4, 3, [0.2, 0.4, 0.6]).quantized_u8(); 2],
            intrinsics: IntrinsicsRecord {
                fov_deg: 50.0,
                width: 4,
                height: 3,
            },
            poses: None,
            depths: None,
            gaussians: None,
        };
        let dir = tempfile::tempdir().unwrap();
        save_sequence(&seq, dir.path()).unwrap();
        assert_eq!(load_sequence(dir.path()).unwrap(), seq);
        fs::remove_file(dir.path().join(FRAME_DIR).join("000000.png")).unwrap();
        assert!(matches!(load_sequence(dir.path()), Err(Error::Parse { .. })));
    }

    #[test]
    fn mismatched_sizes_are_rejected() {
        let seq = Sequence {
            images: vec![Image::new(4, 3)],
            intrinsics: IntrinsicsRecord {
                fov_deg: 50.0,
                width: 5,
                height: 3,
            },
            poses: None,
            depths: None,
            gaussians: None,
        };
        assert!(save_sequence(&seq, tempfile::tempdir().unwrap().path()).is_err());
    }
}
