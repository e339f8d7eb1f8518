//! Array files: a JSON sidecar `name.json`
//! (`{"shape":[h,w],"dtype":"f64le","units":...}`) next to a raw
//! little-endian payload `name.f64`. PGM export is for viewing only.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tensor::Tensor;

use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Units {
    #[serde(rename = "mu_mm^-1")]
    Attenuation,
    #[serde(rename = "line_integral")]
    LineIntegral,
    /// Binary masks (implant masks, metal traces).
    #[serde(rename = "mask")]
    Mask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub units: Units,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("f64"))
}

/// Encodes an array as `(sidecar json, payload)`.
pub fn encode_array(t: &Tensor, units: Units) -> (Vec<u8>, Vec<u8>) {
    let side = Sidecar {
        shape: t.shape().to_vec(),
        dtype: "f64le".into(),
        units,
    };
    let mut json = serde_json::to_vec(&side).expect("sidecar serialises");
    json.push(b'\n');
    let payload = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    (json, payload)
}

/// Decodes and validates a sidecar/payload pair.
pub fn decode_array(sidecar: &[u8], payload: &[u8]) -> Result<(Tensor, Units)> {
    let side: Sidecar =
        serde_json::from_slice(sidecar).map_err(|e| CoreError::Format(format!("sidecar: {}", e)))?;
    if side.dtype != "f64le" {
        return Err(CoreError::Format(format!("unsupported dtype '{}'", side.dtype)));
    }
    if side.shape.len() != 2 {
        return Err(CoreError::Format(format!("expected a 2-D shape, got {:?}", side.shape)));
    }
    let n = side
        .shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| CoreError::Format("shape overflow".into()))?;
    if n != payload.len() {
        return Err(CoreError::Format(format!(
            "payload has {} bytes, shape {:?} needs {}",
            payload.len(),
            side.shape,
            n
        )));
    }
    let data: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::Format("payload contains non-finite values".into()));
    }
    Ok((Tensor::new(side.shape, data)?, side.units))
}

/// Writes `stem.json` + `stem.f64`.
pub fn write_array(stem: impl AsRef<Path>, t: &Tensor, units: Units) -> Result<()> {
    let (js, raw) = paths(stem.as_ref());
    let (a, b) = encode_array(t, units);
    std::fs::write(&js, a).map_err(|e| CoreError::io(&js, e))?;
    std::fs::write(&raw, b).map_err(|e| CoreError::io(&raw, e))?;
    Ok(())
}

/// Reads `stem.json` + `stem.f64`; `stem` may carry either extension.
pub fn read_array(stem: impl AsRef<Path>) -> Result<(Tensor, Units)> {
    let (js, raw) = paths(stem.as_ref());
    let a = std::fs::read(&js).map_err(|e| CoreError::io(&js, e))?;
    let b = std::fs::read(&raw).map_err(|e| CoreError::io(&raw, e))?;
    decode_array(&a, &b)
}

/// 16-bit binary PGM of a 2-D array, linearly mapping
/// `[level − width/2, level + width/2]` onto `0..=65535` (clipped).
pub fn encode_pgm(t: &Tensor, level: f64, width: f64) -> Result<Vec<u8>> {
    let [h, w] = match t.shape() {
        &[h, w] => [h, w],
        s => return Err(CoreError::Usage(format!("PGM export needs a 2-D array, got {:?}", s))),
    };
    if !(width > 0.0) {
        return Err(CoreError::Usage("PGM window width must be positive".into()));
    }
    let mut out = format!("P5\n{} {}\n65535\n", w, h).into_bytes();
    let lo = level - 0.5 * width;
    for &v in t.data() {
        let q = ((v - lo) / width * 65535.0).round().clamp(0.0, 65535.0) as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    Ok(out)
}

pub fn write_pgm(path: impl AsRef<Path>, t: &Tensor, level: f64, width: f64) -> Result<()> {
    let bytes = encode_pgm(t, level, width)?;
    std::fs::write(path.as_ref(), bytes).map_err(|e| CoreError::io(path.as_ref(), e))
}
