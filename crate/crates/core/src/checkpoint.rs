//! Checkpoints: both alignment heads plus the run configuration, as one
//! JSON document. Parameter tensors use the same base64 little-endian f32
//! convention as the record files, keyed by canonical parameter names
//! (`image.…` / `text.…`), in sorted order for byte-stable output.

use crate::config::RunConfig;
use crate::encoder::{init_params, EncoderParams};
use crate::error::{Error, Result};
use crate::ingest::{decode_vector, encode_vector, quantize_f32};
use crate::numerics::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub image_encoder: EncoderParams,
    pub text_encoder: EncoderParams,
    pub epoch: usize,
    /// Loss of the serialized (f32-rounded) parameters on the training set,
    /// so a reload reproduces it bit-for-bit.
    pub final_loss: f64,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    shape: Vec<usize>,
    data: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    version: u32,
    epoch: usize,
    final_loss: f64,
    config: RunConfig,
    params: BTreeMap<String, ParamEntry>,
}

fn quantize_params(params: &mut EncoderParams) {
    for t in params.tensors_mut() {
        quantize_f32(t.data_mut());
    }
}

impl Checkpoint {
    /// Builds a checkpoint with every parameter rounded through f32, i.e.
    /// exactly what serialization will preserve.
    pub fn quantized(
        config: RunConfig,
        mut image_encoder: EncoderParams,
        mut text_encoder: EncoderParams,
        epoch: usize,
    ) -> Self {
        quantize_params(&mut image_encoder);
        quantize_params(&mut text_encoder);
        Checkpoint {
            config,
            image_encoder,
            text_encoder,
            epoch,
            final_loss: f64::NAN,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut params = BTreeMap::new();
        for (prefix, enc) in [("image", &self.image_encoder), ("text", &self.text_encoder)] {
            for (name, t) in enc.named_tensors() {
                params.insert(
                    format!("{prefix}.{name}"),
                    ParamEntry {
                        shape: t.shape().to_vec(),
                        data: encode_vector(t.data()),
                    },
                );
            }
        }
        let doc = CheckpointDoc {
            version: 1,
            epoch: self.epoch,
            final_loss: self.final_loss,
            config: self.config.clone(),
            params,
        };
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let mut body = serde_json::to_string(&doc)?;
        body.push('\n');
        std::fs::write(path, body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let doc: CheckpointDoc = serde_json::from_str(&text)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        if doc.version != 1 {
            return Err(Error::format(format!(
                "unsupported checkpoint version {}",
                doc.version
            )));
        }
        doc.config.validate()?;
        let shape = doc.config.encoder_shape();
        let mut image_encoder = init_params(&shape, 0)?;
        let mut text_encoder = init_params(&shape, 0)?;
        for (prefix, enc) in [
            ("image", &mut image_encoder),
            ("text", &mut text_encoder),
        ] {
            let names: Vec<String> = enc
                .named_tensors()
                .into_iter()
                .map(|(n, _)| format!("{prefix}.{n}"))
                .collect();
            for (name, slot) in names.iter().zip(enc.tensors_mut()) {
                let entry = doc
                    .params
                    .get(name)
                    .ok_or_else(|| Error::format(format!("checkpoint missing tensor {name}")))?;
                let data = decode_vector(&entry.data)?;
                let t = Tensor::new(entry.shape.clone(), data)
                    .map_err(|_| Error::format(format!("checkpoint tensor {name} is malformed")))?;
                if t.shape() != slot.shape() {
                    return Err(Error::format(format!(
                        "checkpoint tensor {name}: shape {:?} does not match config ({:?})",
                        t.shape(),
                        slot.shape()
                    )));
                }
                *slot = t;
            }
        }
        Ok(Checkpoint {
            config: doc.config,
            image_encoder,
            text_encoder,
            epoch: doc.epoch,
            final_loss: doc.final_loss,
        })
    }
}
