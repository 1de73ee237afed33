//! Dataset directory format: `manifest.json` plus one little-endian `f32`
//! row-major binary file per image under `images/`.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{BreastSample, Category, Dataset, DatasetConfig, Finding, Side, ViewImage};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("config: {0}")]
    Config(String),
    #[error("i/o at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("image file {path} holds {actual} bytes, expected {expected}")]
    TruncatedImage {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Serialize, Deserialize)]
struct ViewEntry {
    path: String,
    height: usize,
    width: usize,
}

#[derive(Serialize, Deserialize)]
struct BreastEntry {
    breast_id: String,
    exam_id: u32,
    side: Side,
    category: Category,
    annotated: bool,
    cc: ViewEntry,
    mlo: ViewEntry,
    findings: Vec<Finding>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: DatasetConfig,
    breasts: Vec<BreastEntry>,
}

fn write_image(path: &Path, img: &ViewImage) -> Result<(), SynthError> {
    let mut bytes = Vec::with_capacity(img.pixels.len() * 4);
    for p in &img.pixels {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn read_image(path: &Path, height: usize, width: usize) -> Result<ViewImage, SynthError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(io_err(path))?
        .read_to_end(&mut bytes)
        .map_err(io_err(path))?;
    let expected = height * width * 4;
    if bytes.len() != expected {
        return Err(SynthError::TruncatedImage {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    let pixels = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(ViewImage {
        height,
        width,
        pixels,
    })
}

/// Write a dataset directory; lossless, including withheld annotations.
pub fn save(dataset: &Dataset, dir: &Path) -> Result<(), SynthError> {
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir).map_err(io_err(&images_dir))?;

    let mut entries = Vec::with_capacity(dataset.breasts.len());
    for b in &dataset.breasts {
        let cc_rel = format!("images/{}_cc.bin", b.breast_id);
        let mlo_rel = format!("images/{}_mlo.bin", b.breast_id);
        write_image(&dir.join(&cc_rel), &b.image_cc)?;
        write_image(&dir.join(&mlo_rel), &b.image_mlo)?;
        entries.push(BreastEntry {
            breast_id: b.breast_id.clone(),
            exam_id: b.exam_id,
            side: b.side,
            category: b.category,
            annotated: b.annotated,
            cc: ViewEntry {
                path: cc_rel,
                height: b.image_cc.height,
                width: b.image_cc.width,
            },
            mlo: ViewEntry {
                path: mlo_rel,
                height: b.image_mlo.height,
                width: b.image_mlo.width,
            },
            findings: b.findings.clone(),
        });
    }
    let manifest = Manifest {
        config: dataset.config.clone(),
        breasts: entries,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| SynthError::Manifest(e.to_string()))?;
    let manifest_path = dir.join("manifest.json");
    fs::write(&manifest_path, json).map_err(io_err(&manifest_path))
}

/// Read a dataset directory written by [`save`].
pub fn load(dir: &Path) -> Result<Dataset, SynthError> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| SynthError::Manifest(e.to_string()))?;
    let breasts = manifest
        .breasts
        .into_iter()
        .map(|e| {
            let image_cc = read_image(&dir.join(&e.cc.path), e.cc.height, e.cc.width)?;
            let image_mlo = read_image(&dir.join(&e.mlo.path), e.mlo.height, e.mlo.width)?;
            Ok(BreastSample {
                breast_id: e.breast_id,
                exam_id: e.exam_id,
                side: e.side,
                category: e.category,
                annotated: e.annotated,
                image_cc,
                image_mlo,
                findings: e.findings,
            })
        })
        .collect::<Result<Vec<_>, SynthError>>()?;
    Ok(Dataset {
        config: manifest.config,
        breasts,
    })
}

#[cfg(test)]
mod tests {
    use super::super::{generate_dataset, DatasetConfig};
    use super::*;

    fn small_config() -> DatasetConfig {
        DatasetConfig {
            malignant: 2,
            benign: 1,
            negative: 3,
            image_size: 64,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn save_load_round_trip() {
        let ds = generate_dataset(&small_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(&ds, dir.path()).unwrap();
        let loaded = load(dir.path()).unwrap();
        assert_eq!(ds, loaded);
    }

    #[test]
    fn missing_image_file_names_the_file() {
        let ds = generate_dataset(&small_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(&ds, dir.path()).unwrap();
        let victim = dir.path().join("images/b0001_cc.bin");
        fs::remove_file(&victim).unwrap();
        let err = load(dir.path()).unwrap_err();
        assert!(
            err.to_string().contains("b0001_cc.bin"),
            "error should name the file: {err}"
        );
    }

    #[test]
    fn truncated_image_is_rejected() {
        let ds = generate_dataset(&small_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(&ds, dir.path()).unwrap();
        let victim = dir.path().join("images/b0000_mlo.bin");
        fs::write(&victim, [1u8, 2, 3]).unwrap();
        match load(dir.path()).unwrap_err() {
            SynthError::TruncatedImage { actual, .. } => assert_eq!(actual, 3),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn hand_written_single_breast_manifest_parses() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("images")).unwrap();
        // 2x2 image, little-endian f32 values 0.0, 0.25, 0.5, 1.0
        let mut bytes = Vec::new();
        for v in [0.0f32, 0.25, 0.5, 1.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(dir.path().join("images/b0000_cc.bin"), &bytes).unwrap();
        fs::write(dir.path().join("images/b0000_mlo.bin"), &bytes).unwrap();
        let manifest = r#"{
          "config": {},
          "breasts": [
            {
              "breast_id": "b0000",
              "exam_id": 0,
              "side": "left",
              "category": "benign",
              "annotated": true,
              "cc": {"path": "images/b0000_cc.bin", "height": 2, "width": 2},
              "mlo": {"path": "images/b0000_mlo.bin", "height": 2, "width": 2},
              "findings": [
                {
                  "label": "benign",
                  "box_cc": {"x1": 0.0, "y1": 0.0, "x2": 1.0, "y2": 1.0},
                  "box_mlo": {"x1": 0.5, "y1": 0.0, "x2": 1.5, "y2": 1.0},
                  "contrast": 0.6,
                  "texture": 0.1,
                  "texture_cc": 0.1,
                  "texture_mlo": 0.1,
                  "radius_x": 0.5,
                  "radius_y": 0.5,
                  "angle_cc": 0.0,
                  "angle_mlo": 0.0
                }
              ]
            }
          ]
        }"#;
        fs::write(dir.path().join("manifest.json"), manifest).unwrap();
        let ds = load(dir.path()).unwrap();
        assert_eq!(ds.breasts.len(), 1);
        let b = &ds.breasts[0];
        assert_eq!(b.category, Category::Benign);
        assert_eq!(b.image_cc.get(1, 1), 1.0);
        assert_eq!(b.findings.len(), 1);
    }
}
