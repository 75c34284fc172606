//! Manifest-plus-raw tensor files.
//!
//! A file is one line of JSON describing every tensor, a newline, then the
//! tensors' little-endian values back to back. Reloading is bit-exact.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adapter::{AdapterConfig, AdapterParams};
use crate::error::{Error, Result};
use crate::model::{LmParams, LmSpec, LoraParams, LoraTarget};
use crate::tensor::{Precision, Real, Tensor};

const FORMAT: &str = "repinv-tensors";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the data section.
    offset: usize,
    /// Element count.
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: String,
    precision: Precision,
    endianness: String,
    meta: Value,
    tensors: Vec<Entry>,
}

#[derive(Debug, Clone)]
pub struct TensorFile<T> {
    pub meta: Value,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Real> TensorFile<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn take(&mut self, name: &str) -> Result<Tensor<T>> {
        let i = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        Ok(self.tensors.swap_remove(i).1)
    }
}

pub fn encode<T: Real>(meta: &Value, tensors: &[(String, &Tensor<T>)]) -> Result<Vec<u8>> {
    let width = T::PRECISION.byte_width();
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in tensors {
        entries.push(Entry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            len: t.numel(),
        });
        offset += t.numel() * width;
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        precision: T::PRECISION,
        endianness: "little".into(),
        meta: meta.clone(),
        tensors: entries,
    };
    let mut out = serde_json::to_vec(&manifest)?;
    out.push(b'\n');
    out.reserve(offset);
    for (_, t) in tensors {
        for &x in t.data() {
            x.write_le(&mut out);
        }
    }
    Ok(out)
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<TensorFile<T>> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("no manifest line".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
    if manifest.format != FORMAT || manifest.endianness != "little" {
        return Err(Error::Checkpoint(format!(
            "unsupported format `{}` ({})",
            manifest.format, manifest.endianness
        )));
    }
    if manifest.precision != T::PRECISION {
        return Err(Error::Checkpoint(format!(
            "file holds {:?} values, requested {:?}",
            manifest.precision,
            T::PRECISION
        )));
    }
    let data = &bytes[nl + 1..];
    let width = T::PRECISION.byte_width();
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        let end = e.offset + e.len * width;
        let raw = data.get(e.offset..end).ok_or_else(|| {
            Error::Checkpoint(format!("tensor `{}` runs past end of file", e.name))
        })?;
        let values: Vec<T> = raw.chunks_exact(width).map(T::read_le).collect();
        let t = Tensor::from_vec(e.shape, values)
            .map_err(|err| Error::Checkpoint(format!("`{}`: {err}", e.name)))?;
        tensors.push((e.name, t));
    }
    Ok(TensorFile {
        meta: manifest.meta,
        tensors,
    })
}

/// Writes through a temporary file so readers never see a partial file.
pub fn save<T: Real>(path: &Path, meta: &Value, tensors: &[(String, &Tensor<T>)]) -> Result<()> {
    let bytes = encode(meta, tensors)?;
    write_atomic(path, &bytes)
}

pub fn load<T: Real>(path: &Path) -> Result<TensorFile<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Copies same-named tensors from `file` into `dst`, checking shapes.
pub(crate) fn fill<T: Real>(
    file: &mut TensorFile<T>,
    prefix: &str,
    dst: Vec<(String, &mut Tensor<T>)>,
) -> Result<()> {
    for (name, t) in dst {
        let src = file.take(&format!("{prefix}{name}"))?;
        if src.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "`{prefix}{name}` has shape {:?}, expected {:?}",
                src.shape(),
                t.shape()
            )));
        }
        t.data_mut().copy_from_slice(src.data());
    }
    Ok(())
}

fn meta_field<D: serde::de::DeserializeOwned>(meta: &Value, key: &str) -> Result<D> {
    let v = meta
        .get(key)
        .ok_or_else(|| Error::Checkpoint(format!("manifest meta lacks `{key}`")))?;
    serde_json::from_value(v.clone()).map_err(|e| Error::Checkpoint(format!("meta `{key}`: {e}")))
}

fn expect_kind(meta: &Value, kind: &str) -> Result<()> {
    let got: String = meta_field(meta, "kind")?;
    if got != kind {
        return Err(Error::Checkpoint(format!(
            "expected a `{kind}` file, found `{got}`"
        )));
    }
    Ok(())
}

pub fn lm_meta(spec: &LmSpec) -> Value {
    serde_json::json!({ "kind": "lm", "spec": spec })
}

pub fn save_lm<T: Real>(path: &Path, lm: &LmParams<T>) -> Result<()> {
    save(path, &lm_meta(&lm.spec), &lm.named())
}

pub(crate) fn lm_from_file<T: Real>(file: &mut TensorFile<T>, prefix: &str) -> Result<LmParams<T>> {
    let spec: LmSpec = meta_field(&file.meta, "spec")?;
    let mut lm = LmParams::init(&spec, 0)?;
    fill(file, prefix, lm.named_mut())?;
    Ok(lm)
}

pub fn load_lm<T: Real>(path: &Path) -> Result<LmParams<T>> {
    let mut file = load(path)?;
    expect_kind(&file.meta, "lm")?;
    lm_from_file(&mut file, "")
}

pub fn adapter_meta(config: &AdapterConfig) -> Value {
    serde_json::json!({ "kind": "adapter", "config": config, "d_hid": config.d_hid(), "k": config.k })
}

pub fn save_adapter<T: Real>(path: &Path, adapter: &AdapterParams<T>) -> Result<()> {
    save(path, &adapter_meta(&adapter.config), &adapter.named())
}

pub(crate) fn adapter_from_file<T: Real>(
    file: &mut TensorFile<T>,
    prefix: &str,
) -> Result<AdapterParams<T>> {
    let config: AdapterConfig = meta_field(&file.meta, "config")?;
    let mut a = AdapterParams::init(config, 0)?;
    fill(file, prefix, a.named_mut())?;
    Ok(a)
}

pub fn load_adapter<T: Real>(path: &Path) -> Result<AdapterParams<T>> {
    let mut file = load(path)?;
    expect_kind(&file.meta, "adapter")?;
    adapter_from_file(&mut file, "")
}

pub fn lora_meta<T: Real>(lora: &LoraParams<T>) -> Value {
    let targets: Vec<&LoraTarget> = lora.pairs.iter().map(|p| &p.target).collect();
    serde_json::json!({ "kind": "lora", "rank": lora.rank, "alpha": lora.alpha, "targets": targets })
}

pub fn save_lora<T: Real>(path: &Path, lora: &LoraParams<T>) -> Result<()> {
    save(path, &lora_meta(lora), &lora.named())
}

/// Rebuilds LoRA pairs against `base` from a file written by [`save_lora`].
pub(crate) fn lora_from_file<T: Real>(
    file: &mut TensorFile<T>,
    prefix: &str,
    base: &LmParams<T>,
) -> Result<LoraParams<T>> {
    let rank: usize = meta_field(&file.meta, "rank")?;
    let alpha: f64 = meta_field(&file.meta, "alpha")?;
    let targets: Vec<LoraTarget> = meta_field(&file.meta, "targets")?;
    let names: Vec<String> = targets.iter().map(LoraTarget::full_name).collect();
    let mut lora = LoraParams::init(base, &names, rank, alpha, 0)?;
    fill(file, prefix, lora.named_mut())?;
    Ok(lora)
}

pub fn load_lora<T: Real>(path: &Path, base: &LmParams<T>) -> Result<LoraParams<T>> {
    let mut file = load(path)?;
    expect_kind(&file.meta, "lora")?;
    lora_from_file(&mut file, "", base)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PositionKind;

    fn spec() -> LmSpec {
        LmSpec {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 11,
            max_seq: 12,
            position_kind: PositionKind::LearnedAbsolute,
        }
    }

    #[test]
    fn raw_round_trip_is_bit_exact() {
        let t =
            Tensor::<f32>::from_vec([2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.25e-12]).unwrap();
        let bytes = encode(&serde_json::json!({"x": 1}), &[("t".into(), &t)]).unwrap();
        let back = decode::<f32>(&bytes).unwrap();
        let got = back.get("t").unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(got), bits(&t));
        assert_eq!(back.meta["x"], 1);
    }

    #[test]
    fn precision_mismatch_and_truncation() {
        let t = Tensor::<f64>::zeros([3]);
        let bytes = encode(&Value::Null, &[("t".into(), &t)]).unwrap();
        assert!(matches!(decode::<f32>(&bytes), Err(Error::Checkpoint(_))));
        assert!(matches!(
            decode::<f64>(&bytes[..bytes.len() - 1]),
            Err(Error::Checkpoint(_))
        ));
        assert!(matches!(
            decode::<f64>(b"garbage"),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn model_adapter_lora_files() {
        let dir = tempfile::tempdir().unwrap();
        let lm = LmParams::<f32>::init(&spec(), 9).unwrap();
        save_lm(&dir.path().join("lm.bin"), &lm).unwrap();
        let back = load_lm::<f32>(&dir.path().join("lm.bin")).unwrap();
        assert_eq!(back.checksum(), lm.checksum());

        let a = AdapterParams::<f32>::init(AdapterConfig::new(8, 8, 0.5, 3), 2).unwrap();
        save_adapter(&dir.path().join("a.bin"), &a).unwrap();
        let back = load_adapter::<f32>(&dir.path().join("a.bin")).unwrap();
        assert_eq!(back.named().len(), a.named().len());
        for ((n1, t1), (n2, t2)) in back.named().iter().zip(a.named()) {
            assert_eq!(n1, &n2);
            assert_eq!(t1.data(), t2.data());
        }
        assert!(matches!(
            load_lm::<f32>(&dir.path().join("a.bin")),
            Err(Error::Checkpoint(_))
        ));

        let mut lora = LoraParams::init(&lm, &["attn.wq".into()], 2, 4.0, 1).unwrap();
        lora.pairs[1].b.data_mut()[0] = 0.5;
        save_lora(&dir.path().join("l.bin"), &lora).unwrap();
        assert_eq!(load_lora(&dir.path().join("l.bin"), &lm).unwrap(), lora);
    }
}
