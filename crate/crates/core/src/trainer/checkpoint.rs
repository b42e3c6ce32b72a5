use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DplError, Result};
use crate::io_util::{read_file, to_exact_json, write_atomic};
use crate::model::{ModelDims, ModelState};

const CHECKPOINT_FORMAT: &str = "dpl-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    version: u32,
    model: ModelState,
}

/// Serialized checkpoint bytes; floats carry 17 significant digits.
pub fn checkpoint_bytes(model: &ModelState) -> Result<Vec<u8>> {
    to_exact_json(&CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        model: model.clone(),
    })
}

pub fn save_checkpoint(model: &ModelState, path: &Path) -> Result<()> {
    write_atomic(path, &checkpoint_bytes(model)?)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<ModelState> {
    let file: CheckpointFile = serde_json::from_slice(bytes)
        .map_err(|e| DplError::Checkpoint(format!("unreadable checkpoint: {e}")))?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(DplError::Checkpoint(format!(
            "unexpected format tag `{}`",
            file.format
        )));
    }
    if file.version != CHECKPOINT_VERSION {
        return Err(DplError::Checkpoint(format!(
            "unsupported checkpoint version {}",
            file.version
        )));
    }
    file.model.validate()?;
    Ok(file.model)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    parse_checkpoint(&read_file(path)?).map_err(|e| match e {
        DplError::Checkpoint(m) => DplError::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Load and require the stored dimensions to equal `dims`.
pub fn load_checkpoint_expecting(path: &Path, dims: ModelDims) -> Result<ModelState> {
    let model = load_checkpoint(path)?;
    if model.dims != dims {
        return Err(DplError::Checkpoint(format!(
            "{}: shape mismatch, checkpoint has {:?}, expected {:?}",
            path.display(),
            model.dims,
            dims
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;
    use crate::rng::SeededRng;

    fn model(d: usize) -> ModelState {
        let mut m = init_model(ModelDims::new(5, d, 3), 1e-3, &mut SeededRng::new(12)).unwrap();
        m.scales.a = 1.0 / 3.0;
        m.scales.b = -1e-300;
        m.step = 17;
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model(8);
        let bytes = checkpoint_bytes(&m).unwrap();
        let back = parse_checkpoint(&bytes).unwrap();
        assert_eq!(back, m);
        for g in crate::model::ParamGroup::ALL {
            for (x, y) in m.param(g).iter().zip(back.param(g)) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(checkpoint_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn truncated_and_foreign_files_rejected() {
        let bytes = checkpoint_bytes(&model(4)).unwrap();
        assert!(matches!(
            parse_checkpoint(&bytes[..bytes.len() / 2]),
            Err(DplError::Checkpoint(_))
        ));
        assert!(parse_checkpoint(b"{}").is_err());
        let text = String::from_utf8(bytes)
            .unwrap()
            .replace("dpl-checkpoint", "other");
        assert!(parse_checkpoint(text.as_bytes()).is_err());
    }

    #[test]
    fn inconsistent_shapes_rejected() {
        let mut m = model(4);
        m.dims.d = 5;
        let bytes = checkpoint_bytes(&m).unwrap();
        assert!(matches!(
            parse_checkpoint(&bytes),
            Err(DplError::Checkpoint(_))
        ));
    }

    #[test]
    fn expected_dims_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_checkpoint(&model(8), &path).unwrap();
        let err = load_checkpoint_expecting(&path, ModelDims::new(5, 16, 3)).unwrap_err();
        assert!(err.to_string().contains("shape mismatch"));
        load_checkpoint_expecting(&path, ModelDims::new(5, 8, 3)).unwrap();
    }
}
