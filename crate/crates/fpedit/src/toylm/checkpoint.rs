//! FPLM checkpoint format.
//!
//! Layout: magic `FPLM`, `u32` format version, a length-prefixed JSON
//! blob holding the [`ModelConfig`], then every weight matrix as an FPMX
//! record in canonical order. Loading validates magic, version, config
//! sanity, per-matrix shapes against the config, entry finiteness, and
//! that no trailing bytes follow the last matrix.

use crate::error::{Error, Result};
use crate::ioutil;
use crate::numkit::fpmx;
use std::io::{Read, Write};
use std::path::Path;

use super::model::{canonical_shapes, Model, ModelConfig, ModelParams};

pub const FPLM_MAGIC: &[u8; 4] = b"FPLM";
pub const FPLM_VERSION: u32 = 1;

pub fn write_model(w: &mut impl Write, model: &Model) -> Result<()> {
    w.write_all(FPLM_MAGIC)?;
    fpmx::write_u32(w, FPLM_VERSION)?;
    let cfg_json = serde_json::to_string(&model.cfg)
        .map_err(|e| Error::parse(format!("config serialization failed: {e}")))?;
    fpmx::write_text(w, &cfg_json)?;
    for (_, m) in model.params.matrices() {
        fpmx::write_matrix(w, m)?;
    }
    Ok(())
}

pub fn read_model(r: &mut impl Read) -> Result<Model> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::parse(format!("truncated checkpoint: {e}")))?;
    if &magic != FPLM_MAGIC {
        return Err(Error::parse(format!("bad checkpoint magic {magic:?}, expected {FPLM_MAGIC:?}")));
    }
    let version = fpmx::read_u32(r)?;
    if version != FPLM_VERSION {
        return Err(Error::parse(format!(
            "unsupported checkpoint version {version}, expected {FPLM_VERSION}"
        )));
    }
    let cfg_json = fpmx::read_text(r)?;
    let cfg: ModelConfig = serde_json::from_str(&cfg_json)
        .map_err(|e| Error::parse(format!("checkpoint config is not valid JSON: {e}")))?;
    cfg.validate()?;

    let shapes = canonical_shapes(&cfg);
    let mut mats = Vec::with_capacity(shapes.len());
    for (name, rows, cols) in &shapes {
        let m = fpmx::read_matrix(r)
            .map_err(|e| Error::parse(format!("while reading {name}: {e}")))?;
        if m.shape() != (*rows, *cols) {
            return Err(Error::parse(format!(
                "{name} has shape {}x{}, config implies {rows}x{cols}",
                m.rows(),
                m.cols()
            )));
        }
        mats.push(m);
    }

    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::parse("trailing bytes after final matrix".to_string()));
    }

    // Reassemble in the same canonical order.
    let mut it = mats.into_iter();
    let tok_emb = it.next().unwrap();
    let pos_emb = it.next().unwrap();
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for _ in 0..cfg.n_layers {
        layers.push(super::model::LayerParams {
            ln1_gain: it.next().unwrap(),
            ln1_bias: it.next().unwrap(),
            w_q: it.next().unwrap(),
            w_k: it.next().unwrap(),
            w_v: it.next().unwrap(),
            w_o: it.next().unwrap(),
            ln2_gain: it.next().unwrap(),
            ln2_bias: it.next().unwrap(),
            w_fc: it.next().unwrap(),
            w_proj: it.next().unwrap(),
        });
    }
    let ln_f_gain = it.next().unwrap();
    let ln_f_bias = it.next().unwrap();
    let w_out = it.next().unwrap();

    Ok(Model {
        cfg,
        params: ModelParams { tok_emb, pos_emb, layers, ln_f_gain, ln_f_bias, w_out },
    })
}

pub fn model_to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_model(&mut buf, model)?;
    Ok(buf)
}

pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    ioutil::atomic_write(path, &model_to_bytes(model)?)
}

pub fn load_model(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::invalid(format!("cannot read checkpoint {}: {e}", path.display())))?;
    read_model(&mut bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toylm::model::ModelConfig;

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let model = Model::init(ModelConfig::tiny(12, 3)).unwrap();
        let bytes = model_to_bytes(&model).unwrap();
        let back = read_model(&mut bytes.as_slice()).unwrap();
        assert_eq!(model, back);
        assert_eq!(model_to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn save_and_load_via_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.fplm");
        let model = Model::init(ModelConfig::tiny(9, 5)).unwrap();
        save_model(&path, &model).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(model, back);
    }

    #[test]
    fn rejects_corruption() {
        let model = Model::init(ModelConfig::tiny(9, 5)).unwrap();
        let bytes = model_to_bytes(&model).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[1] = b'X';
        assert!(matches!(read_model(&mut bad_magic.as_slice()), Err(crate::Error::Parse(_))));

        let truncated = &bytes[..bytes.len() - 5];
        assert!(read_model(&mut &truncated[..]).is_err());

        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(matches!(read_model(&mut trailing.as_slice()), Err(crate::Error::Parse(_))));

        let mut bad_version = bytes.clone();
        bad_version[4..8].copy_from_slice(&99u32.to_le_bytes());
        assert!(read_model(&mut bad_version.as_slice()).is_err());
    }
}
