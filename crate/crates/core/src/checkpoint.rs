//! Checkpoint container for models and fusion bundles.
//!
//! Layout (all text UTF-8, all numbers little-endian):
//!
//! ```text
//! ACORL-CHECKPOINT 1\n
//! <manifest length in bytes, decimal>\n
//! <manifest: TOML document>
//! <blob: f32 values of every parameter, in manifest order>
//! ```
//!
//! The manifest records the model spec, an optional `[fusion]` table, the blob
//! length and SHA-256, and one `[[params]]` entry per tensor with its name,
//! shape, byte offset into the blob and element count. Parameters are stored
//! as 32-bit floats, so a round trip rounds each `f64` to the nearest `f32`.
//! The full schema is in `docs/checkpoint-format.md`.

use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nn::{Activation, Head, Mlp, ModelSpec};

pub const MAGIC: &str = "ACORL-CHECKPOINT 1\n";

/// Fusion metadata stored alongside (or instead of) a model.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionMeta {
    pub mode: String,
    pub members: Vec<String>,
}

/// Decoded container contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub spec: Option<ModelSpec>,
    pub fusion: Option<FusionMeta>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn for_model(model: &Mlp) -> Self {
        Container {
            kind: "model".into(),
            spec: Some(model.spec().clone()),
            fusion: None,
            tensors: model.param_names().into_iter().zip(model.params().iter().cloned()).collect(),
        }
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Integrity {
                offset: 0,
                detail: format!("checkpoint has no tensor named {name}"),
            })
    }

    /// Rebuild the model described by `spec` from the stored tensors.
    pub fn to_model(&self) -> Result<Mlp> {
        let spec = self.spec.clone().ok_or_else(|| Error::Integrity {
            offset: 0,
            detail: "checkpoint carries no model spec".into(),
        })?;
        let params = spec
            .param_layout()
            .iter()
            .map(|(name, _)| self.tensor(name).cloned())
            .collect::<Result<Vec<_>>>()?;
        Mlp::from_parts(spec, params).map_err(|e| Error::Integrity {
            offset: 0,
            detail: e.to_string(),
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut blob = Vec::new();
        let mut index = String::new();
        for (name, t) in &self.tensors {
            let offset = blob.len();
            for &x in t.data() {
                blob.extend_from_slice(&(x as f32).to_le_bytes());
            }
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let _ = write!(
                index,
                "\n[[params]]\nname = {}\nshape = [{}]\noffset = {offset}\ncount = {}\n",
                quote(name),
                shape.join(", "),
                t.numel()
            );
        }
        let mut manifest = String::new();
        manifest.push_str("format = \"acorl-checkpoint\"\nversion = 1\n");
        let _ = writeln!(manifest, "kind = {}", quote(&self.kind));
        if let Some(spec) = &self.spec {
            let hidden: Vec<String> = spec.hidden_dims.iter().map(usize::to_string).collect();
            let _ = write!(
                manifest,
                "\n[spec]\ninput_dim = {}\nhidden_dims = [{}]\nrepr_dim = {}\nactivation = \"relu\"\nhead = {}\nnum_classes = {}\n",
                spec.input_dim,
                hidden.join(", "),
                spec.repr_dim,
                quote(spec.head.name()),
                spec.head.num_classes()
            );
        }
        if let Some(f) = &self.fusion {
            let members: Vec<String> = f.members.iter().map(|m| quote(m)).collect();
            let _ = write!(
                manifest,
                "\n[fusion]\nmode = {}\nmembers = [{}]\n",
                quote(&f.mode),
                members.join(", ")
            );
        }
        let digest = Sha256::digest(&blob);
        let _ = write!(
            manifest,
            "\n[blob]\nbyte_length = {}\nsha256 = \"{:x}\"\n",
            blob.len(),
            digest
        );
        manifest.push_str(&index);

        let mut out = Vec::with_capacity(MAGIC.len() + 16 + manifest.len() + blob.len());
        out.extend_from_slice(MAGIC.as_bytes());
        out.extend_from_slice(format!("{}\n", manifest.len()).as_bytes());
        out.extend_from_slice(manifest.as_bytes());
        out.extend_from_slice(&blob);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let integrity = |offset: usize, detail: &str| Error::Integrity {
            offset,
            detail: detail.to_string(),
        };
        if !bytes.starts_with(MAGIC.as_bytes()) {
            return Err(integrity(0, "missing ACORL-CHECKPOINT header"));
        }
        let mut pos = MAGIC.len();
        let newline = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| integrity(pos, "missing manifest length line"))?;
        let manifest_len: usize = std::str::from_utf8(&bytes[pos..pos + newline])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| integrity(pos, "malformed manifest length"))?;
        pos += newline + 1;
        if bytes.len() < pos + manifest_len {
            return Err(integrity(
                bytes.len(),
                &format!("file ends inside the manifest ({manifest_len} bytes expected from offset {pos})"),
            ));
        }
        let text = std::str::from_utf8(&bytes[pos..pos + manifest_len])
            .map_err(|e| integrity(pos + e.valid_up_to(), "manifest is not UTF-8"))?;
        let manifest: Manifest =
            toml::from_str(text).map_err(|e| integrity(pos + e.span().map_or(0, |s| s.start), &e.to_string()))?;
        if manifest.format != "acorl-checkpoint" || manifest.version != 1 {
            return Err(integrity(pos, "unsupported checkpoint format or version"));
        }
        let blob_start = pos + manifest_len;
        let blob = &bytes[blob_start..];
        if blob.len() != manifest.blob.byte_length {
            return Err(integrity(
                blob_start + blob.len().min(manifest.blob.byte_length),
                &format!(
                    "blob holds {} bytes but the manifest declares {}",
                    blob.len(),
                    manifest.blob.byte_length
                ),
            ));
        }
        if format!("{:x}", Sha256::digest(blob)) != manifest.blob.sha256 {
            return Err(integrity(blob_start, "blob checksum mismatch"));
        }
        let mut tensors = Vec::with_capacity(manifest.params.len());
        for entry in &manifest.params {
            let numel: usize = entry.shape.iter().product();
            let end = entry.offset + 4 * entry.count;
            if numel != entry.count || end > blob.len() || entry.offset % 4 != 0 {
                return Err(integrity(
                    blob_start + entry.offset,
                    &format!("parameter {} does not fit the blob", entry.name),
                ));
            }
            let data = blob[entry.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let t = Tensor::new(entry.shape.clone(), data)
                .map_err(|e| integrity(blob_start + entry.offset, &e.to_string()))?;
            tensors.push((entry.name.clone(), t));
        }
        let spec = manifest.spec.map(|s| -> Result<ModelSpec> {
            let head = match s.head.as_str() {
                "classifier" => Head::Classifier { num_classes: s.num_classes },
                "embedding" => Head::Embedding { num_classes: s.num_classes },
                other => return Err(integrity(pos, &format!("unknown head {other}"))),
            };
            if s.activation != "relu" {
                return Err(integrity(pos, &format!("unknown activation {}", s.activation)));
            }
            Ok(ModelSpec {
                input_dim: s.input_dim,
                hidden_dims: s.hidden_dims,
                repr_dim: s.repr_dim,
                head,
                activation: Activation::Relu,
            })
        });
        Ok(Container {
            kind: manifest.kind,
            spec: spec.transpose()?,
            fusion: manifest.fusion.map(|f| FusionMeta {
                mode: f.mode,
                members: f.members,
            }),
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingPath(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Container::decode(&bytes)
    }
}

pub fn save_model(model: &Mlp, path: &Path) -> Result<()> {
    Container::for_model(model).save(path)
}

pub fn load_model(path: &Path) -> Result<Mlp> {
    Container::load(path)?.to_model()
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            c if c.is_control() => {
                let _ = write!(out, "\\u{:04X}", c as u32);
            }
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    kind: String,
    spec: Option<SpecEntry>,
    fusion: Option<FusionEntry>,
    blob: BlobEntry,
    #[serde(default)]
    params: Vec<ParamEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecEntry {
    input_dim: usize,
    hidden_dims: Vec<usize>,
    repr_dim: usize,
    activation: String,
    head: String,
    num_classes: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FusionEntry {
    mode: String,
    members: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BlobEntry {
    byte_length: usize,
    sha256: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    count: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Mlp {
        Mlp::init(ModelSpec::classifier(3, vec![4], 2), 5).unwrap()
    }

    #[test]
    fn round_trip_rounds_to_f32() {
        let m = model();
        let back = Container::decode(&Container::for_model(&m).encode()).unwrap().to_model().unwrap();
        assert_eq!(back.spec(), m.spec());
        for (a, b) in m.params().iter().zip(back.params()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*y, (*x as f32) as f64);
            }
        }
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = Container::for_model(&model()).encode();
        let cut = &bytes[..bytes.len() - 3];
        match Container::decode(cut) {
            Err(Error::Integrity { offset, .. }) => assert_eq!(offset, cut.len()),
            other => panic!("{other:?}"),
        }
        match Container::decode(&bytes[..30]) {
            Err(Error::Integrity { .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = Container::for_model(&model()).encode();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        assert!(matches!(Container::decode(&bytes), Err(Error::Integrity { .. })));
        assert!(matches!(Container::decode(b"nope"), Err(Error::Integrity { offset: 0, .. })));
    }

    #[test]
    fn fusion_metadata_round_trips() {
        let c = Container {
            kind: "fusion".into(),
            spec: None,
            fusion: Some(FusionMeta {
                mode: "output_weighted".into(),
                members: vec!["a \"q\".ckpt".into(), "b.ckpt".into()],
            }),
            tensors: vec![("fusion.weights".into(), Tensor::vector(vec![0.25, 0.75]))],
        };
        assert_eq!(Container::decode(&c.encode()).unwrap(), c);
    }
}
