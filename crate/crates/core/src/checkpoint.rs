//! Binary model files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FAET" | u32 version
//! u64 length | config JSON
//! u64 length | vocab JSON
//! u32 parameter count
//! per parameter: u32 name length | name | u32 rank | u64 dims... | f64 values...
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::config::TrainConfig;
use crate::error::{FaetError, Result};
use crate::model::FaetModel;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vocab::Vocab;

pub const MAGIC: &[u8; 4] = b"FAET";
pub const FORMAT_VERSION: u32 = 1;

fn corrupt(what: impl Into<String>) -> FaetError {
    FaetError::Checkpoint(what.into())
}

pub fn to_bytes<S: Scalar>(model: &FaetModel<S>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for json in [serde_json::to_vec(&model.config)?, serde_json::to_vec(&model.vocab)?] {
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
    }
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for p in model.params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &dim in p.value.shape() {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(corrupt("file is truncated"));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len_prefixed(&mut self) -> Result<&'a [u8]> {
        let n = usize::try_from(self.u64()?).map_err(|_| corrupt("length overflow"))?;
        self.take(n)
    }
}

/// Parsed file contents before they are matched against a model.
pub struct CheckpointData {
    pub config: TrainConfig,
    pub vocab: Vocab,
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
}

pub fn parse(bytes: &[u8]) -> Result<CheckpointData> {
    let mut r = Reader { bytes };
    if r.take(4).map_err(|_| corrupt("not a model file"))? != MAGIC {
        return Err(corrupt("not a model file (bad magic bytes)"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(corrupt(format!(
            "unsupported format version {version} (this build reads {FORMAT_VERSION})"
        )));
    }
    let config: TrainConfig =
        serde_json::from_slice(r.len_prefixed()?).map_err(|e| corrupt(format!("config: {e}")))?;
    let mut vocab: Vocab = serde_json::from_slice(r.len_prefixed()?).map_err(|e| corrupt(format!("vocab: {e}")))?;
    vocab.reindex();
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| corrupt("parameter name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| corrupt("shape overflow"))?;
        if len > r.bytes.len() / 8 {
            return Err(corrupt("file is truncated"));
        }
        let values = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        params.push((name, shape, values));
    }
    if !r.bytes.is_empty() {
        return Err(corrupt(format!("{} trailing bytes", r.bytes.len())));
    }
    Ok(CheckpointData { config, vocab, params })
}

/// Rebuilds the model described by `bytes`.
pub fn from_bytes<S: Scalar>(bytes: &[u8]) -> Result<FaetModel<S>> {
    let data = parse(bytes)?;
    let mut model = FaetModel::new(data.config, data.vocab)?;
    load_params(&mut model, &data.params)?;
    Ok(model)
}

/// Overwrites the parameters of `model`, which must have the same layout.
pub fn load_params<S: Scalar>(model: &mut FaetModel<S>, params: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
    let values = params
        .iter()
        .map(|(name, shape, v)| Ok((name.clone(), Tensor::from_f64(shape, v)?)))
        .collect::<Result<Vec<_>>>()?;
    model
        .params
        .load_values(&values)
        .map_err(|e| corrupt(format!("parameters do not fit the model: {e}")))
}

pub fn save_checkpoint<S: Scalar>(model: &FaetModel<S>, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    let mut f = fs::File::create(path).map_err(|e| FaetError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| FaetError::io(path, e))
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<FaetModel<S>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| FaetError::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;
    use crate::corpus::TokenizedDoc;
    use crate::vocab::build_vocab;

    fn model(d: usize, variant: Variant) -> FaetModel<f64> {
        let docs = [TokenizedDoc::new(&["a", "b"], &["😊"], Some(1))];
        let config = TrainConfig {
            d,
            d_w: 3,
            n_filters: 2,
            variant,
            seed: 9,
            ..TrainConfig::default()
        };
        FaetModel::new(config, build_vocab(&docs, 1)).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        for variant in [Variant::Faet, Variant::Aet] {
            let m = model(2, variant);
            let back: FaetModel<f64> = from_bytes(&to_bytes(&m).unwrap()).unwrap();
            assert_eq!(back, m);
        }
    }

    #[test]
    fn rejects_bad_files() {
        let bytes = to_bytes(&model(2, Variant::Faet)).unwrap();
        let mut wrong_version = bytes.clone();
        wrong_version[4] = 9;
        assert!(from_bytes::<f64>(&wrong_version).unwrap_err().to_string().contains("version"));
        assert!(from_bytes::<f64>(&bytes[..bytes.len() - 3]).is_err());
        assert!(from_bytes::<f64>(b"NOPE").is_err());
    }

    #[test]
    fn mismatched_layout_rejected() {
        let small = model(2, Variant::Faet);
        let mut large = model(3, Variant::Faet);
        let data = parse(&to_bytes(&small).unwrap()).unwrap();
        assert!(load_params(&mut large, &data.params).is_err());
    }
}
