//! Little-endian binary checkpoints.
//!
//! Layout: magic, `u32` format version, architecture, the full beta table,
//! provenance, then each parameter as a length-prefixed name, its shape and
//! its `f64` values. A SHA-256 digest of everything before it closes the
//! file, so truncation or corruption is detected on load.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::denoiser::{DenoiserArch, DenoiserModel};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::gradcore::{Array, ParamStore};

pub const MAGIC: &[u8; 8] = b"DUNLCKPT";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Provenance {
    /// SHA-256 of the config text that produced the model.
    pub config_hash: [u8; 32],
    pub seed: u64,
    /// Optimizer steps applied in the phase that wrote the checkpoint.
    pub step_count: u64,
    pub phase: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: DenoiserArch,
    pub schedule: NoiseSchedule,
    pub params: ParamStore,
    pub provenance: Provenance,
}

impl Checkpoint {
    pub fn new(model: &DenoiserModel, schedule: &NoiseSchedule, provenance: Provenance) -> Self {
        Self {
            arch: model.arch,
            schedule: schedule.clone(),
            params: model.params.clone(),
            provenance,
        }
    }

    pub fn model(&self) -> Result<DenoiserModel> {
        DenoiserModel::from_params(self.arch, self.params.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let a = &self.arch;
        for v in [a.dim, a.num_classes, a.hidden_width, a.hidden_depth, a.embed_dim, a.steps] {
            put_u64(&mut w, v as u64);
        }
        put_f64s(&mut w, self.schedule.betas());
        let p = &self.provenance;
        w.extend_from_slice(&p.config_hash);
        put_u64(&mut w, p.seed);
        put_u64(&mut w, p.step_count);
        put_str(&mut w, &p.phase);
        put_u64(&mut w, self.params.len() as u64);
        for (name, value) in self.params.iter() {
            put_str(&mut w, name);
            put_u64(&mut w, value.shape().len() as u64);
            for &s in value.shape() {
                put_u64(&mut w, s as u64);
            }
            put_f64s(&mut w, value.data());
        }
        let digest = Sha256::digest(&w);
        w.extend_from_slice(&digest);
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 {
            return Err(Error::Integrity(format!("file is only {} bytes long", bytes.len())));
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Integrity("missing checkpoint magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        if bytes.len() < 12 + DIGEST_LEN {
            return Err(Error::Integrity("file ends before its checksum".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Integrity("checksum mismatch".into()));
        }
        let mut r = Reader { bytes: body, pos: 12 };
        let mut dims = [0usize; 6];
        for d in dims.iter_mut() {
            *d = r.usize()?;
        }
        let arch = DenoiserArch {
            dim: dims[0],
            num_classes: dims[1],
            hidden_width: dims[2],
            hidden_depth: dims[3],
            embed_dim: dims[4],
            steps: dims[5],
        };
        let betas = r.f64s()?;
        let schedule = NoiseSchedule::from_betas(betas)?;
        let mut config_hash = [0u8; 32];
        config_hash.copy_from_slice(r.take(32)?);
        let seed = r.u64()?;
        let step_count = r.u64()?;
        let phase = r.string()?;
        let count = r.usize()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.usize()?;
            let shape = (0..ndim).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
            let data = r.f64s()?;
            params.insert(name, Array::new(shape, data).map_err(|e| Error::Integrity(e.to_string()))?)?;
        }
        if r.pos != body.len() {
            return Err(Error::Integrity(format!("{} unread bytes", body.len() - r.pos)));
        }
        Ok(Self {
            arch,
            schedule,
            params,
            provenance: Provenance {
                config_hash,
                seed,
                step_count,
                phase,
            },
        })
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, checkpoint.to_bytes())?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::Path(format!("{}: {e}", path.display())))?;
    Checkpoint::from_bytes(&bytes)
}

/// SHA-256 of a config text, as stored in provenance.
pub fn config_hash(text: &str) -> [u8; 32] {
    Sha256::digest(text.as_bytes()).into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn put_u64(w: &mut Vec<u8>, v: u64) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    w.extend_from_slice(&(s.len() as u32).to_le_bytes());
    w.extend_from_slice(s.as_bytes());
}

fn put_f64s(w: &mut Vec<u8>, values: &[f64]) {
    put_u64(w, values.len() as u64);
    for v in values {
        w.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Integrity(format!("record at byte {} runs past the end of the file", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::Integrity(format!("length {v} does not fit in memory")))
    }

    fn string(&mut self) -> Result<String> {
        let n = u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Integrity("name is not UTF-8".into()))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.usize()?;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Integrity("array too long".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}
