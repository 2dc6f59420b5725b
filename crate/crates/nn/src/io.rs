use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use crate::module::StateDict;
use crate::{NnError, Tensor};

/// Write a state dict as safetensors with `F64` entries.
pub fn save_safetensors(path: &Path, state: &StateDict, metadata: Option<HashMap<String, String>>) -> Result<(), NnError> {
    let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = state
        .iter()
        .map(|(k, t)| {
            let raw = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            (k.clone(), raw, t.shape().to_vec())
        })
        .collect();
    let mut views = Vec::with_capacity(bytes.len());
    for (name, raw, shape) in &bytes {
        let view = TensorView::new(Dtype::F64, shape.clone(), raw).map_err(|e| NnError::Format(e.to_string()))?;
        views.push((name.clone(), view));
    }
    safetensors::serialize_to_file(views, &metadata, path).map_err(|e| NnError::Format(e.to_string()))
}

/// Read a safetensors file. `F32` and `F64` entries are accepted; integer
/// entries (e.g. batch counters) are skipped.
pub fn load_safetensors(path: &Path) -> Result<StateDict, NnError> {
    let raw = std::fs::read(path)?;
    let st = SafeTensors::deserialize(&raw).map_err(|e| NnError::Format(e.to_string()))?;
    let mut out = StateDict::new();
    for (name, view) in st.tensors() {
        let data: Vec<f64> = match view.dtype() {
            Dtype::F64 => view
                .data()
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect(),
            Dtype::F32 => view
                .data()
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect(),
            Dtype::I64 | Dtype::I32 | Dtype::U8 | Dtype::BOOL => continue,
            other => return Err(NnError::Format(format!("unsupported dtype {other:?} for {name}"))),
        };
        out.insert(name, Tensor::from_vec(view.shape(), data));
    }
    Ok(out)
}
