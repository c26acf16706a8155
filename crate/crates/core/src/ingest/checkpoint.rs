//! Binary checkpoints shared by generator and discriminator.
//!
//! Layout: the 8-byte magic `FLADCKPT`, a little-endian `u32` format
//! version, a little-endian `u32` header length, the JSON header, then every
//! tensor as row-major little-endian `f32`. Manifest offsets are absolute
//! file offsets.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::das::Discriminator;
use crate::encoder::{EncoderConfig, ParamSet};
use crate::error::{Error, Result};
use crate::mgag::Generator;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"FLADCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const PREAMBLE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Generator,
    Discriminator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    role: Role,
    config: EncoderConfig,
    vocab_hash: String,
    data_sha256: String,
    tensors: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub role: Role,
    pub config: EncoderConfig,
    pub vocab_hash: String,
    /// `(name, shape, values)` in parameter order.
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

fn corrupt(msg: String) -> Error {
    Error::Checkpoint(msg)
}

impl Checkpoint {
    pub fn from_params<S: Scalar, P: ParamSet<S>>(
        role: Role,
        config: EncoderConfig,
        vocab_hash: &str,
        params: &P,
    ) -> Self {
        Checkpoint {
            role,
            config,
            vocab_hash: vocab_hash.to_string(),
            tensors: params
                .tensors()
                .into_iter()
                .map(|(n, t)| {
                    (
                        n,
                        t.shape.clone(),
                        t.data.iter().map(|v| v.to_f64_lossy() as f32).collect(),
                    )
                })
                .collect(),
        }
    }

    pub fn of_discriminator<S: Scalar>(d: &Discriminator<S>, vocab_hash: &str) -> Self {
        Self::from_params(Role::Discriminator, d.config, vocab_hash, d)
    }

    pub fn of_generator<S: Scalar>(g: &Generator<S>, vocab_hash: &str) -> Self {
        Self::from_params(Role::Generator, g.config, vocab_hash, g)
    }

    fn check(&self, role: Role, vocab_hash: &str) -> Result<()> {
        if self.role != role {
            return Err(corrupt(format!(
                "holds a {:?} but a {role:?} was requested",
                self.role
            )));
        }
        if self.vocab_hash != vocab_hash {
            return Err(Error::VocabMismatch(format!(
                "checkpoint was trained with vocabulary {} but {vocab_hash} is loaded",
                self.vocab_hash
            )));
        }
        self.config.validate()
    }

    fn fill<S: Scalar, P: ParamSet<S>>(&self, params: &mut P) -> Result<()> {
        let names: Vec<(String, Vec<usize>)> = params
            .tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape.clone()))
            .collect();
        if names.len() != self.tensors.len() {
            return Err(corrupt(format!(
                "{} tensors stored, the model has {}",
                self.tensors.len(),
                names.len()
            )));
        }
        for (((name, shape), dst), (sname, sshape, values)) in
            names.iter().zip(params.tensors_mut()).zip(&self.tensors)
        {
            if name != sname || shape != sshape {
                return Err(corrupt(format!(
                    "tensor {sname} {sshape:?} does not match the model's {name} {shape:?}"
                )));
            }
            for (d, &v) in dst.data.iter_mut().zip(values) {
                *d = S::from_f64_lossy(f64::from(v));
            }
        }
        Ok(())
    }

    pub fn into_discriminator<S: Scalar>(&self, vocab_hash: &str) -> Result<Discriminator<S>> {
        self.check(Role::Discriminator, vocab_hash)?;
        let mut d = Discriminator::zeros(self.config);
        self.fill(&mut d)?;
        Ok(d)
    }

    pub fn into_generator<S: Scalar>(&self, vocab_hash: &str) -> Result<Generator<S>> {
        self.check(Role::Generator, vocab_hash)?;
        let mut g = Generator::zeros(self.config);
        self.fill(&mut g)?;
        Ok(g)
    }
}

fn data_bytes(ck: &Checkpoint) -> Vec<u8> {
    let mut data = Vec::with_capacity(ck.tensors.iter().map(|t| t.2.len() * 4).sum());
    for (_, _, values) in &ck.tensors {
        for v in values {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    data
}

pub fn write_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let data = data_bytes(ck);
    // Offsets depend on the header length, which depends on the offsets'
    // digits; iterate until the length is stable.
    let mut header_len = 0usize;
    loop {
        let mut at = PREAMBLE + header_len;
        let tensors = ck
            .tensors
            .iter()
            .map(|(name, shape, values)| {
                let e = ManifestEntry {
                    name: name.clone(),
                    shape: shape.clone(),
                    offset: at,
                };
                at += values.len() * 4;
                e
            })
            .collect();
        let header = Header {
            role: ck.role,
            config: ck.config,
            vocab_hash: ck.vocab_hash.clone(),
            data_sha256: format!("{:x}", Sha256::digest(&data)),
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        if json.len() == header_len {
            let mut out = Vec::with_capacity(PREAMBLE + json.len() + data.len());
            out.extend_from_slice(MAGIC);
            out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
            out.extend_from_slice(&(json.len() as u32).to_le_bytes());
            out.extend_from_slice(&json);
            out.extend_from_slice(&data);
            return out;
        }
        header_len = json.len();
    }
}

fn truncated(len: usize, need: usize, what: &str) -> Error {
    corrupt(format!(
        "truncated at byte offset {len}: {what} needs {need} bytes"
    ))
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < PREAMBLE {
        return Err(truncated(bytes.len(), PREAMBLE, "preamble"));
    }
    if &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic at byte offset 0".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!(
            "format version {version} at byte offset 8, this build reads version {CHECKPOINT_VERSION}"
        )));
    }
    let header_len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let data_start = PREAMBLE + header_len;
    if bytes.len() < data_start {
        return Err(truncated(bytes.len(), data_start, "header"));
    }
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..data_start]).map_err(|e| {
        let offset = if e.line() <= 1 {
            format!("{}", PREAMBLE + e.column().saturating_sub(1))
        } else {
            format!("{PREAMBLE}+ (line {}, column {})", e.line(), e.column())
        };
        corrupt(format!("corrupt manifest at byte offset {offset}: {e}"))
    })?;
    let mut at = data_start;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        if e.offset != at {
            return Err(corrupt(format!(
                "corrupt manifest: tensor {} declares byte offset {}, expected {at}",
                e.name, e.offset
            )));
        }
        let n: usize = e.shape.iter().product();
        let end = at + n * 4;
        if bytes.len() < end {
            return Err(truncated(bytes.len(), end, &format!("tensor {}", e.name)));
        }
        let values = bytes[at..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push((e.name.clone(), e.shape.clone(), values));
        at = end;
    }
    if at != bytes.len() {
        return Err(corrupt(format!(
            "{} unexpected trailing bytes at byte offset {at}",
            bytes.len() - at
        )));
    }
    if format!("{:x}", Sha256::digest(&bytes[data_start..])) != header.data_sha256 {
        return Err(corrupt(format!(
            "tensor data starting at byte offset {data_start} fails its checksum"
        )));
    }
    Ok(Checkpoint {
        role: header.role,
        config: header.config,
        vocab_hash: header.vocab_hash,
        tensors,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    std::fs::write(path, write_checkpoint(ck))
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    read_checkpoint(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}
