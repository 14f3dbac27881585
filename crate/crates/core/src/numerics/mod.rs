//! Dense kernels, reverse-mode differentiation, Adam, and gradient checks.
//!
//! Everything is 64-bit and reductions run serially, so a fixed seed gives
//! bit-identical training runs.

mod adam;
mod gradcheck;
mod tape;
mod tensor;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{gradcheck, gradcheck_with, GradcheckConfig, GradcheckReport};
pub use tape::{bce_sum, sigmoid, Gradients, Tape, Var, DENOM_EPS, PROB_EPS};
pub use tensor::{SparseMatrix, Tensor2D};

use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    shape: [usize; 2],
    data: Vec<f64>,
}

/// Serializes named tensors as `{"name": {"shape": [r, c], "data": [...]}}`.
pub fn checkpoint_to_json(tensors: &[(String, Tensor2D)]) -> String {
    let map: BTreeMap<&str, StoredTensor> = tensors
        .iter()
        .map(|(name, t)| {
            (
                name.as_str(),
                StoredTensor {
                    shape: [t.rows(), t.cols()],
                    data: t.data().to_vec(),
                },
            )
        })
        .collect();
    serde_json::to_string(&map).expect("checkpoint serialization cannot fail")
}

pub fn checkpoint_from_json(text: &str) -> Result<Vec<(String, Tensor2D)>> {
    let map: BTreeMap<String, StoredTensor> = serde_json::from_str(text).map_err(|e| Error::malformed(None, e.to_string()))?;
    map.into_iter()
        .map(|(name, s)| {
            let t = Tensor2D::from_vec(s.shape[0], s.shape[1], s.data)
                .map_err(|e| Error::malformed(None, format!("tensor {name}: {e}")))?;
            Ok((name, t))
        })
        .collect()
}

pub fn save_checkpoint(path: &Path, tensors: &[(String, Tensor2D)]) -> Result<()> {
    crate::io::write_atomic(path, checkpoint_to_json(tensors).as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor2D)>> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    checkpoint_from_json(&text)
}
