//! `.stt` tensor files: a raw little-endian row-major payload next to a
//! JSON sidecar `<path>.json` describing dtype, shape, layout and endianness.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Result, StemError};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub dtype: String,
    pub shape: [usize; 2],
    pub layout: String,
    pub endian: String,
}

impl TensorHeader {
    pub fn for_matrix<T: Scalar>(m: &Matrix<T>) -> Self {
        Self {
            dtype: T::DTYPE.to_string(),
            shape: [m.rows(), m.cols()],
            layout: "row-major".to_string(),
            endian: "little".to_string(),
        }
    }
}

/// `foo.stt` → `foo.stt.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s: OsString = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StemError + '_ {
    move |source| StemError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save_tensor<T: Scalar>(m: &Matrix<T>, path: &Path) -> Result<()> {
    let mut payload = Vec::with_capacity(m.as_slice().len() * T::BYTES);
    for &x in m.as_slice() {
        x.write_le(&mut payload);
    }
    let header = serde_json::to_string_pretty(&TensorHeader::for_matrix(m))
        .expect("header serialization cannot fail");
    fs::write(path, payload).map_err(io_err(path))?;
    let side = sidecar_path(path);
    fs::write(&side, header + "\n").map_err(io_err(&side))?;
    Ok(())
}

pub fn load_tensor<T: Scalar>(path: &Path) -> Result<Matrix<T>> {
    let side = sidecar_path(path);
    let raw = fs::read_to_string(&side).map_err(io_err(&side))?;
    let header: TensorHeader = serde_json::from_str(&raw).map_err(|e| StemError::CorruptFile {
        path: side.clone(),
        reason: format!("bad header: {e}"),
    })?;
    let unsupported = |reason: String| StemError::UnsupportedFormat {
        path: side.clone(),
        reason,
    };
    if header.dtype != T::DTYPE {
        return Err(unsupported(format!(
            "dtype {:?}, expected {:?}",
            header.dtype,
            T::DTYPE
        )));
    }
    if header.layout != "row-major" {
        return Err(unsupported(format!("layout {:?}", header.layout)));
    }
    if header.endian != "little" {
        return Err(unsupported(format!("endian {:?}", header.endian)));
    }

    let bytes = fs::read(path).map_err(io_err(path))?;
    let [rows, cols] = header.shape;
    let expected = rows * cols * T::BYTES;
    if bytes.len() != expected {
        return Err(StemError::CorruptFile {
            path: path.to_path_buf(),
            reason: format!(
                "shape {rows}x{cols} needs {expected} payload bytes, found {}",
                bytes.len()
            ),
        });
    }
    let data: Vec<T> = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
    if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
        return Err(StemError::CorruptFile {
            path: path.to_path_buf(),
            reason: format!("non-finite value at flat index {pos}"),
        });
    }
    Matrix::from_vec(rows, cols, data)
}
