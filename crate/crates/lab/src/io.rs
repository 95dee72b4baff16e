//! File persistence for the core's binary tensor containers.

use std::fs;
use std::path::Path;

use fuselab_core::attack::ModelState;
use fuselab_core::data::{self, SyntheticDataset};

use crate::error::{LabError, Result};

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    fs::write(path, data::encode_model(state)).map_err(LabError::io(path))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let bytes = fs::read(path).map_err(LabError::io(path))?;
    Ok(data::decode_model(&bytes)?)
}

pub fn save_dataset(ds: &SyntheticDataset, path: &Path) -> Result<()> {
    fs::write(path, data::encode_dataset(ds)).map_err(LabError::io(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use fuselab_core::vit::ViTConfig;

    #[test]
    fn checkpoint_file_roundtrip() {
        let dir = std::env::temp_dir().join(format!("fuselab-io-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.ckpt");
        let mut state = ModelState::new_clean(ViTConfig::tiny_two_class(), 3).unwrap();
        state.backbone.freeze();
        save_checkpoint(&state, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.backbone.checksum(), state.backbone.checksum());
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_checkpoint(Path::new("/nonexistent/nope.ckpt")).unwrap_err();
        assert!(matches!(err, LabError::Io { .. }));
    }
}
