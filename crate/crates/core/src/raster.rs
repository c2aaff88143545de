//! Raw raster tensors: little-endian C-order data with a JSON sidecar.
//!
//! A raster `scene/img_03.f32` is described by `scene/img_03.f32.json`
//! containing `{"shape":[H,W,C],"dtype":"float32"}`. Label rasters use
//! `"dtype":"uint8"` with the same layout.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RasterDtype {
    Float32,
    Uint8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub shape: Vec<usize>,
    pub dtype: RasterDtype,
}

pub fn sidecar_path(raster: &Path) -> PathBuf {
    let mut name = raster.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

fn read_sidecar(raster: &Path) -> Result<Sidecar> {
    let path = sidecar_path(raster);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Malformed {
        what: "raster sidecar",
        path,
        detail: e.to_string(),
    })
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_sidecar(raster: &Path, sidecar: &Sidecar) -> Result<()> {
    write_atomic(&sidecar_path(raster), serde_json::to_string(sidecar)?.as_bytes())
}

/// Reads an H×W×C float32 raster. Two-dimensional rasters are read as C = 1.
pub fn read_f32(path: &Path) -> Result<Array3<f32>> {
    let sidecar = read_sidecar(path)?;
    let shape = match sidecar.shape.as_slice() {
        [h, w, c] => (*h, *w, *c),
        [h, w] => (*h, *w, 1),
        other => {
            return Err(Error::Malformed {
                what: "raster shape",
                path: path.to_path_buf(),
                detail: format!("expected 2 or 3 dimensions, got {other:?}"),
            })
        }
    };
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let n = shape.0 * shape.1 * shape.2;
    let values: Vec<f32> = match sidecar.dtype {
        RasterDtype::Float32 => {
            if bytes.len() != n * 4 {
                return Err(Error::Malformed {
                    what: "raster payload",
                    path: path.to_path_buf(),
                    detail: format!("expected {} bytes, found {}", n * 4, bytes.len()),
                });
            }
            bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect()
        }
        RasterDtype::Uint8 => {
            if bytes.len() != n {
                return Err(Error::Malformed {
                    what: "raster payload",
                    path: path.to_path_buf(),
                    detail: format!("expected {n} bytes, found {}", bytes.len()),
                });
            }
            bytes.iter().map(|&b| b as f32).collect()
        }
    };
    Ok(Array3::from_shape_vec(shape, values).expect("length checked above"))
}

pub fn write_f32(path: &Path, data: &Array3<f32>) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &bytes)?;
    write_sidecar(
        path,
        &Sidecar {
            shape: data.shape().to_vec(),
            dtype: RasterDtype::Float32,
        },
    )
}

pub fn write_f32_2d(path: &Path, data: &Array2<f32>) -> Result<()> {
    let (h, w) = data.dim();
    let cube = data
        .clone()
        .into_shape_with_order((h, w, 1))
        .expect("same element count");
    write_f32(path, &cube)
}

pub fn write_u8(path: &Path, data: &Array2<u8>) -> Result<()> {
    let (h, w) = data.dim();
    let bytes: Vec<u8> = data.iter().copied().collect();
    write_atomic(path, &bytes)?;
    write_sidecar(
        path,
        &Sidecar {
            shape: vec![h, w, 1],
            dtype: RasterDtype::Uint8,
        },
    )
}

pub fn read_u8(path: &Path) -> Result<Array2<u8>> {
    let sidecar = read_sidecar(path)?;
    if sidecar.dtype != RasterDtype::Uint8 {
        return Err(Error::Malformed {
            what: "label raster",
            path: path.to_path_buf(),
            detail: "dtype must be uint8".into(),
        });
    }
    let (h, w) = match sidecar.shape.as_slice() {
        [h, w] | [h, w, 1] => (*h, *w),
        other => {
            return Err(Error::Malformed {
                what: "label raster shape",
                path: path.to_path_buf(),
                detail: format!("{other:?}"),
            })
        }
    };
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Array2::from_shape_vec((h, w), bytes).map_err(|e| Error::Malformed {
        what: "label raster payload",
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_raster_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.f32");
        let data = Array3::from_shape_fn((3, 5, 2), |(i, j, k)| (i * 10 + j) as f32 - k as f32 * 0.5);
        write_f32(&path, &data).unwrap();
        assert_eq!(read_f32(&path).unwrap(), data);
        let side: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(sidecar_path(&path)).unwrap()).unwrap();
        assert_eq!(side["shape"], serde_json::json!([3, 5, 2]));
        assert_eq!(side["dtype"], "float32");
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.f32");
        write_f32(&path, &Array3::zeros((2, 2, 2))).unwrap();
        fs::write(&path, [0u8; 7]).unwrap();
        assert!(matches!(read_f32(&path), Err(Error::Malformed { .. })));
    }

    #[test]
    fn missing_raster_is_named() {
        let err = read_f32(Path::new("/nonexistent/x.f32")).unwrap_err();
        assert!(matches!(err, Error::MissingFile(_)));
    }
}
