//! Binary checkpoint files: magic, header length, JSON header, then
//! little-endian `f32` tensors laid out as listed in the header manifest.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserConfig, DenoiserParams};
use crate::error::{bail, Error, Result};
use crate::tensor::Mat;
use crate::trainer::AdamState;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"HWMCKPT1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub params: DenoiserParams,
    pub adam: AdamState,
    pub train_step: u64,
    pub config_digest: String,
}

impl Checkpoint {
    /// Fresh optimizer state and a digest matching the params' config.
    pub fn new(params: DenoiserParams) -> Self {
        let adam = AdamState::new(&params);
        let config_digest = params.config.digest();
        Self { version: CHECKPOINT_VERSION, params, adam, train_step: 0, config_digest }
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.params.config
    }

    /// Fails unless the recorded digest matches the embedded config.
    pub fn verify_digest(&self) -> Result<()> {
        let actual = self.params.config.digest();
        if actual != self.config_digest {
            bail!(Incompatible, "config_digest {} does not match model config digest {actual}", self.config_digest);
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: DenoiserConfig,
    config_digest: String,
    adam_step: u64,
    train_step: u64,
    tensors: Vec<TensorEntry>,
}

fn named_tensors(ckpt: &Checkpoint) -> Vec<(String, &Mat)> {
    let p = &ckpt.params;
    let mut out: Vec<(String, &Mat)> = p.names.iter().cloned().zip(&p.tensors).collect();
    out.extend(p.names.iter().map(|n| format!("adam.m.{n}")).zip(&ckpt.adam.m));
    out.extend(p.names.iter().map(|n| format!("adam.v.{n}")).zip(&ckpt.adam.v));
    out
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut offset = 0;
    let tensors = named_tensors(ckpt);
    let manifest = tensors
        .iter()
        .map(|(name, m)| {
            let e = TensorEntry { name: name.clone(), shape: [m.rows, m.cols], offset };
            offset += m.len();
            e
        })
        .collect();
    let header = Header {
        version: ckpt.version,
        config: ckpt.params.config.clone(),
        config_digest: ckpt.config_digest.clone(),
        adam_step: ckpt.adam.step,
        train_step: ckpt.train_step,
        tensors: manifest,
    };
    let header = serde_json::to_vec(&header)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&(header.len() as u64).to_le_bytes())?;
    f.write_all(&header)?;
    for (_, m) in &tensors {
        for v in &m.data {
            f.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        bail!(Format, "{}: not a checkpoint file", path.display());
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16usize.saturating_add(hlen)).ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        bail!(Format, "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})", header.version);
    }
    let payload = &bytes[16 + hlen..];
    let total: usize = header.tensors.iter().map(|e| e.shape[0] * e.shape[1]).sum();
    if payload.len() != total * 4 {
        bail!(Format, "checkpoint payload has {} bytes, manifest needs {}", payload.len(), total * 4);
    }
    let mut expected_offset = 0;
    let mut mats = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        if e.offset != expected_offset {
            bail!(Format, "tensor {} offset {} (expected {expected_offset})", e.name, e.offset);
        }
        let n = e.shape[0] * e.shape[1];
        let data = payload[4 * e.offset..4 * (e.offset + n)]
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
            .collect();
        mats.push((e.name.clone(), Mat::from_vec(e.shape[0], e.shape[1], data)));
        expected_offset += n;
    }
    if mats.len() % 3 != 0 {
        bail!(Format, "tensor manifest has {} entries, expected params plus two moment sets", mats.len());
    }
    let n = mats.len() / 3;
    let mut rest = mats.split_off(n);
    let v_part = rest.split_off(n);
    let params = DenoiserParams::from_tensors(header.config, mats)?;
    let strip = |part: Vec<(String, Mat)>, prefix: &str| -> Result<Vec<Mat>> {
        part.into_iter()
            .zip(&params.names)
            .map(|((name, m), want)| {
                if name != format!("{prefix}{want}") || m.shape() != params.tensor(want).expect("present").shape() {
                    bail!(Format, "tensor {name} does not match parameter {want}");
                }
                Ok(m)
            })
            .collect()
    };
    let m = strip(rest, "adam.m.")?;
    let v = strip(v_part, "adam.v.")?;
    Ok(Checkpoint {
        version: header.version,
        adam: AdamState { step: header.adam_step, m, v },
        params,
        train_step: header.train_step,
        config_digest: header.config_digest,
    })
}
