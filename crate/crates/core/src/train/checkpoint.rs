//! Binary checkpoint format.
//!
//! ```text
//! "GBMD"  u32 version  u32 header_len
//! header: u32 field count, then per field u16 key_len, key, u32 value_len, value (UTF-8)
//! body:   u32 K+1, eta[0..=K] as f64
//!         u32 tensor count, per tensor u32 ndim, u32 dims..., values as f32
//!         u64 adam step, per tensor first moments as f64, then per tensor second moments
//! ```
//! All integers and reals are little-endian. Any trailing byte is an error.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{AdamState, Architecture, Network, Tensor};
use crate::rng::RngState;
use crate::schedule::NoiseSchedule;
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 4] = b"GBMD";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub schedule: NoiseSchedule,
    pub network: Network,
    pub adam: AdamState,
    pub epoch: u64,
    pub step: u64,
    pub rng: RngState,
}

/// Header fields, readable without touching the parameter blobs.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointHeader {
    pub version: u32,
    pub fields: Vec<(String, String)>,
}

impl CheckpointHeader {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self
            .get(key)
            .ok_or_else(|| Error::CorruptCheckpoint {
                offset: 12,
                reason: format!("header is missing '{key}'"),
            })?;
        v.parse().map_err(|_| Error::CorruptCheckpoint {
            offset: 12,
            reason: format!("bad header value for '{key}': '{v}'"),
        })
    }

    pub fn steps(&self) -> Result<usize> {
        self.parse("steps")
    }

    pub fn eta_per_step(&self) -> Result<f64> {
        self.parse("eta_per_step")
    }

    pub fn epoch(&self) -> Result<u64> {
        self.parse("epoch")
    }

    pub fn arch(&self) -> Result<Architecture> {
        let v = self.get("arch").unwrap_or("");
        v.parse().map_err(|e: Error| Error::CorruptCheckpoint {
            offset: 12,
            reason: e.to_string(),
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::CorruptCheckpoint {
                offset: self.pos,
                reason: format!(
                    "truncated while reading {what}: need {n} bytes, {} left",
                    self.buf.len() - self.pos
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.corrupt("length overflow"))?, what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.corrupt("length overflow"))?, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    fn corrupt(&self, reason: impl Into<String>) -> Error {
        Error::CorruptCheckpoint {
            offset: self.pos,
            reason: reason.into(),
        }
    }
}

fn read_header(r: &mut Reader<'_>) -> Result<(CheckpointHeader, usize)> {
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::CorruptCheckpoint {
            offset: 0,
            reason: format!("bad magic {magic:?}"),
        });
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len = r.u32("header length")? as usize;
    let start = r.pos;
    let count = r.u32("header field count")?;
    let mut fields = Vec::new();
    for _ in 0..count {
        let klen = r.u16("header key length")? as usize;
        let kpos = r.pos;
        let key = std::str::from_utf8(r.take(klen, "header key")?).map_err(|_| Error::CorruptCheckpoint {
            offset: kpos,
            reason: "header key is not UTF-8".into(),
        })?;
        let vlen = r.u32("header value length")? as usize;
        let vpos = r.pos;
        let value = std::str::from_utf8(r.take(vlen, "header value")?).map_err(|_| Error::CorruptCheckpoint {
            offset: vpos,
            reason: "header value is not UTF-8".into(),
        })?;
        fields.push((key.to_string(), value.to_string()));
    }
    if r.pos - start != header_len {
        return Err(r.corrupt(format!(
            "header length field says {header_len} bytes, fields span {}",
            r.pos - start
        )));
    }
    Ok((CheckpointHeader { version, fields }, r.pos))
}

/// Reads only the header of a serialized checkpoint.
pub fn inspect_header(bytes: &[u8]) -> Result<CheckpointHeader> {
    let mut r = Reader { buf: bytes, pos: 0 };
    Ok(read_header(&mut r)?.0)
}

impl Checkpoint {
    fn header_fields(&self) -> Vec<(String, String)> {
        let mut f = self.config.to_pairs();
        f.push(("arch".into(), self.network.arch().to_string()));
        f.push((
            "schedule".into(),
            match self.schedule.eta_per_step() {
                Some(_) => "linear".into(),
                None => "table".into(),
            },
        ));
        f.push(("epoch".into(), self.epoch.to_string()));
        f.push(("step".into(), self.step.to_string()));
        f.push(("rng_seed".into(), self.rng.seed.to_string()));
        f.push(("rng_stream".into(), self.rng.stream.to_string()));
        f.push(("rng_word_pos".into(), self.rng.word_pos.to_string()));
        f.push(("param_count".into(), self.network.param_count().to_string()));
        f
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = Vec::new();
        let fields = self.header_fields();
        header.extend_from_slice(&(fields.len() as u32).to_le_bytes());
        for (k, v) in &fields {
            header.extend_from_slice(&(k.len() as u16).to_le_bytes());
            header.extend_from_slice(k.as_bytes());
            header.extend_from_slice(&(v.len() as u32).to_le_bytes());
            header.extend_from_slice(v.as_bytes());
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);

        let eta = self.schedule.as_slice();
        out.extend_from_slice(&(eta.len() as u32).to_le_bytes());
        for e in eta {
            out.extend_from_slice(&e.to_le_bytes());
        }
        let params = self.network.params();
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for p in params {
            out.extend_from_slice(&(p.shape().len() as u32).to_le_bytes());
            for &d in p.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in p.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out.extend_from_slice(&self.adam.t.to_le_bytes());
        for buf in self.adam.m.iter().chain(&self.adam.v) {
            for v in buf {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let (header, body_start) = read_header(&mut r)?;
        let config = TrainConfig::from_pairs(|k| header.get(k)).map_err(|e| Error::CorruptCheckpoint {
            offset: 12,
            reason: e.to_string(),
        })?;
        let arch = header.arch()?;
        let epoch = header.epoch()?;
        let step = header.parse("step")?;
        let rng = RngState {
            seed: header.parse("rng_seed")?,
            stream: header.parse("rng_stream")?,
            word_pos: header.parse("rng_word_pos")?,
        };
        debug_assert_eq!(r.pos, body_start);

        let n_eta = r.u32("schedule length")? as usize;
        let eta_pos = r.pos;
        let eta = r.f64s(n_eta, "schedule")?;
        let schedule = match header.get("schedule") {
            Some("linear") => {
                let s = NoiseSchedule::linear(config.steps, config.eta_per_step).map_err(|e| {
                    Error::CorruptCheckpoint {
                        offset: eta_pos,
                        reason: e.to_string(),
                    }
                })?;
                if s.as_slice().iter().map(|v| v.to_bits()).ne(eta.iter().map(|v| v.to_bits())) {
                    return Err(Error::CorruptCheckpoint {
                        offset: eta_pos,
                        reason: "stored schedule does not match K and eta_per_step".into(),
                    });
                }
                s
            }
            Some("table") => NoiseSchedule::from_eta(eta).map_err(|e| Error::CorruptCheckpoint {
                offset: eta_pos,
                reason: e.to_string(),
            })?,
            other => {
                return Err(Error::CorruptCheckpoint {
                    offset: 12,
                    reason: format!("unknown schedule kind {other:?}"),
                })
            }
        };

        let count = r.u32("tensor count")? as usize;
        let mut params = Vec::with_capacity(count.min(4096));
        for i in 0..count {
            let ndim = r.u32("tensor rank")? as usize;
            if ndim > 8 {
                return Err(r.corrupt(format!("tensor {i} has implausible rank {ndim}")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32("tensor dim")? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| r.corrupt("tensor size overflow"))?;
            let data = r.f32s(n, "tensor values")?;
            params.push(Tensor::new(shape, data)?);
        }
        let params_end = r.pos;
        let network = Network::from_params(arch, params).map_err(|e| Error::CorruptCheckpoint {
            offset: params_end,
            reason: e.to_string(),
        })?;
        let t = r.u64("optimizer step")?;
        let sizes: Vec<usize> = network.params().iter().map(Tensor::len).collect();
        let mut m = Vec::with_capacity(sizes.len());
        for &n in &sizes {
            m.push(r.f64s(n, "first moments")?);
        }
        let mut v = Vec::with_capacity(sizes.len());
        for &n in &sizes {
            v.push(r.f64s(n, "second moments")?);
        }
        if r.pos != bytes.len() {
            return Err(r.corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config,
            schedule,
            network,
            adam: AdamState { t, m, v },
            epoch,
            step,
            rng,
        })
    }
}

pub fn save_checkpoint(c: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, c.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
