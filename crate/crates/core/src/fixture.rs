//! Raw tensor fixtures with a JSON shape sidecar (`<file>.json`).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TmuError};
use crate::tensor::{SimMemory, TensorDesc};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureShape {
    pub height: u32,
    pub width: u32,
    pub channels: u32,
    pub elem_bytes: u32,
}

impl From<&TensorDesc> for FixtureShape {
    fn from(t: &TensorDesc) -> Self {
        Self { height: t.height, width: t.width, channels: t.channels, elem_bytes: t.elem_bytes }
    }
}

impl FixtureShape {
    pub fn desc_at(&self, base_addr: u64) -> TensorDesc {
        TensorDesc {
            height: self.height,
            width: self.width,
            channels: self.channels,
            elem_bytes: self.elem_bytes,
            base_addr,
        }
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save(path: &Path, t: &TensorDesc, mem: &SimMemory) -> Result<()> {
    fs::write(path, mem.tensor(t)?)?;
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&FixtureShape::from(t))?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(FixtureShape, Vec<u8>)> {
    let shape: FixtureShape = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
    let bytes = fs::read(path)?;
    let expect = shape.desc_at(0).byte_len();
    if bytes.len() as u64 != expect {
        return Err(TmuError::Io(format!(
            "{}: {} bytes on disk, sidecar shape needs {expect}",
            path.display(),
            bytes.len()
        )));
    }
    Ok((shape, bytes))
}

/// Loads a fixture into `mem` at `base_addr` and returns its descriptor.
pub fn load_into(path: &Path, mem: &mut SimMemory, base_addr: u64) -> Result<TensorDesc> {
    let (shape, bytes) = load(path)?;
    let t = shape.desc_at(base_addr);
    mem.write(base_addr, &bytes)?;
    Ok(t)
}
