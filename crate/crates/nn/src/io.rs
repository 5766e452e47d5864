//! Named-tensor persistence in the safetensors format.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{NnError, Result};
use crate::tensor::{Shape, Tensor};

fn to_err(e: impl std::fmt::Display) -> NnError {
    NnError::Serialize(e.to_string())
}

/// Write `tensors` (f32, NCHW shapes) plus optional string metadata.
pub fn save_tensors(
    path: &Path,
    tensors: &[(String, Tensor)],
    metadata: Option<HashMap<String, String>>,
) -> Result<()> {
    let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = tensors
        .iter()
        .map(|(name, t)| {
            let raw = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            (name.clone(), raw, t.shape().dims().to_vec())
        })
        .collect();
    let views = bytes
        .iter()
        .map(|(name, raw, dims)| Ok((name.as_str(), TensorView::new(Dtype::F32, dims.clone(), raw).map_err(to_err)?)))
        .collect::<Result<Vec<_>>>()?;
    safetensors::serialize_to_file(views, metadata, path).map_err(to_err)
}

/// Read every tensor of a safetensors file. Tensors of rank below four are
/// right-aligned into NCHW: a 1-D tensor of length `c` becomes `[1, c, 1, 1]`,
/// a 2-D `[r, c]` becomes `[r, c, 1, 1]`.
pub fn load_tensors(path: &Path) -> Result<(BTreeMap<String, Tensor>, HashMap<String, String>)> {
    let buffer = std::fs::read(path)?;
    let (_, meta) = SafeTensors::read_metadata(&buffer).map_err(to_err)?;
    let metadata = meta.metadata().clone().unwrap_or_default();
    let st = SafeTensors::deserialize(&buffer).map_err(to_err)?;
    let mut out = BTreeMap::new();
    for (name, view) in st.iter() {
        let data: Vec<f32> = match view.dtype() {
            Dtype::F32 => view.data().chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
            Dtype::F64 => view
                .data()
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")) as f32)
                .collect(),
            other => return Err(NnError::Serialize(format!("tensor `{name}` has unsupported dtype {other:?}"))),
        };
        let shape = match *view.shape() {
            [] => Shape::scalar(),
            [c] => Shape::new(1, c, 1, 1),
            [n, c] => Shape::new(n, c, 1, 1),
            [n, c, h] => Shape::new(n, c, h, 1),
            [n, c, h, w] => Shape::new(n, c, h, w),
            ref dims => return Err(NnError::Serialize(format!("tensor `{name}` has rank {}", dims.len()))),
        };
        out.insert(name.to_string(), Tensor::from_vec(shape, data)?);
    }
    Ok((out, metadata))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits_and_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.safetensors");
        let a = Tensor::from_fn(Shape::new(2, 3, 1, 2), |i| (i as f32).sin() * 1e-3);
        let b = Tensor::scalar(f32::MIN_POSITIVE);
        let meta = HashMap::from([("iteration".to_string(), "12".to_string())]);
        save_tensors(&path, &[("a".into(), a.clone()), ("b.c".into(), b.clone())], Some(meta.clone())).unwrap();
        let (loaded, m) = load_tensors(&path).unwrap();
        assert_eq!(loaded["a"], a);
        assert_eq!(loaded["b.c"], b);
        assert_eq!(m, meta);
    }
}
