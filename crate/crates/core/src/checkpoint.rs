//! Binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` version, `u64` header length, JSON header,
//! then every tensor as little-endian `f32` in manifest order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};
use crate::retrieval::Retriever;

pub const MAGIC: &[u8; 8] = b"BOOLATTN";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub name: String,
    pub config: EncoderConfig,
    pub params: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    stores: Vec<StoreManifest>,
    payload_len: usize,
}

/// Named encoders plus free-form metadata.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub encoders: Vec<(String, Encoder)>,
}

impl Checkpoint {
    pub fn encoder(&self, name: &str) -> Result<&Encoder> {
        self.encoders
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, e)| e)
            .ok_or_else(|| Error::Checkpoint(format!("no encoder named `{name}`")))
    }

    pub fn from_retriever(retriever: &Retriever, meta: serde_json::Value) -> Self {
        Self { meta, encoders: vec![("query".into(), retriever.query.clone()), ("doc".into(), retriever.doc.clone())] }
    }

    pub fn into_retriever(self) -> Result<Retriever> {
        Ok(Retriever { query: self.encoder("query")?.clone(), doc: self.encoder("doc")?.clone() })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut stores = Vec::with_capacity(self.encoders.len());
        let mut offset = 0;
        for (name, enc) in &self.encoders {
            let params = enc
                .store
                .iter()
                .map(|(n, t)| {
                    let e = Entry { name: n.to_string(), shape: t.shape().to_vec(), offset };
                    offset += t.len();
                    e
                })
                .collect();
            stores.push(StoreManifest { name: name.clone(), config: enc.config, params });
        }
        let header = serde_json::to_vec(&Header { meta: self.meta.clone(), stores, payload_len: offset })?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for (_, enc) in &self.encoders {
            for (_, t) in enc.store.iter() {
                let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                w.write_all(&bytes)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut long = [0u8; 8];
        r.read_exact(&mut long)?;
        let len = usize::try_from(u64::from_le_bytes(long)).map_err(|_| Error::Checkpoint("header too large".into()))?;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)?;
        let header: Header = serde_json::from_slice(&header)?;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        if payload.len() != header.payload_len * 4 {
            return Err(Error::Checkpoint(format!(
                "payload has {} bytes, manifest expects {}",
                payload.len(),
                header.payload_len * 4
            )));
        }
        let values: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let mut encoders = Vec::with_capacity(header.stores.len());
        for m in header.stores {
            let mut store = ParamStore::new();
            for e in &m.params {
                let n: usize = e.shape.iter().product();
                let data = values
                    .get(e.offset..e.offset + n)
                    .ok_or_else(|| Error::Checkpoint(format!("`{}` overruns the payload", e.name)))?;
                store.add(e.name.clone(), Tensor::new(e.shape.clone(), data.to_vec())?)?;
            }
            encoders.push((m.name, Encoder::from_store(m.config, store)?));
        }
        Ok(Self { meta: header.meta, encoders })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
