//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PKDS"  u16 version
//! u32 len, canonical ArchDescriptor text
//! f32 × param_count          weights then bias per layer, descriptor order
//! u8 has_adam; if 1: u64 step, f32 × param_count (m), f32 × param_count (v)
//! u32 len, meta JSON
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::arch::ArchDescriptor;
use super::network::Network;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PKDS";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    /// 1-based epoch the parameters come from (0 = untrained).
    pub epoch: usize,
    pub val_accuracy: f64,
    #[serde(default)]
    pub epoch_val_accuracies: Vec<f64>,
    #[serde(default)]
    pub epoch_train_losses: Vec<f64>,
    /// Free-form provenance (source domain, target angle, n, tau, ...).
    #[serde(default)]
    pub tags: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchDescriptor,
    pub params: Vec<Tensor<f32>>,
    pub adam: Option<AdamState<f32>>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn new(arch: ArchDescriptor, params: Vec<Tensor<f32>>, meta: CheckpointMeta) -> Result<Self> {
        let ck = Checkpoint {
            arch,
            params,
            adam: None,
            meta,
        };
        ck.check()?;
        Ok(ck)
    }

    /// Freshly initialised parameters for `arch`.
    pub fn initial(arch: &ArchDescriptor, seed: u64) -> Result<Self> {
        let net = Network::<f32>::new(arch)?;
        Checkpoint::new(
            arch.clone(),
            net.init_params(seed),
            CheckpointMeta {
                seed,
                ..Default::default()
            },
        )
    }

    fn check(&self) -> Result<()> {
        let shapes = self.arch.param_shapes();
        let check = |what: &str, ts: &[Tensor<f32>]| -> Result<()> {
            if ts.len() != shapes.len() {
                return Err(Error::Shape(format!(
                    "{what}: architecture has {} tensors, got {}",
                    shapes.len(),
                    ts.len()
                )));
            }
            for (i, (t, s)) in ts.iter().zip(&shapes).enumerate() {
                if t.shape() != s.as_slice() {
                    return Err(Error::Shape(format!("{what} {i}: expected {s:?}, got {:?}", t.shape())));
                }
            }
            Ok(())
        };
        check("params", &self.params)?;
        if let Some(adam) = &self.adam {
            check("adam m", &adam.m)?;
            check("adam v", &adam.v)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let arch = self.arch.to_canonical();
        let meta = serde_json::to_vec(&self.meta)?;
        let n = self.arch.param_count();
        let mut out = Vec::with_capacity(16 + arch.len() + meta.len() + 4 * n * 3);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_block(&mut out, arch.as_bytes())?;
        put_tensors(&mut out, &self.params);
        match &self.adam {
            None => out.push(0),
            Some(a) => {
                out.push(1);
                out.extend_from_slice(&a.step.to_le_bytes());
                put_tensors(&mut out, &a.m);
                put_tensors(&mut out, &a.v);
            }
        }
        put_block(&mut out, &meta)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic, not a PKDS checkpoint".into()));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let arch_text = std::str::from_utf8(r.block()?)
            .map_err(|_| Error::Format("descriptor is not UTF-8".into()))?;
        let arch = ArchDescriptor::parse_canonical(arch_text)?;
        let shapes = arch.param_shapes();
        let params = r.tensors(&shapes)?;
        let adam = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                let m = r.tensors(&shapes)?;
                let v = r.tensors(&shapes)?;
                Some(AdamState { m, v, step })
            }
            other => return Err(Error::Format(format!("bad adam flag {other}"))),
        };
        let meta: CheckpointMeta = serde_json::from_slice(r.block()?)?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let ck = Checkpoint {
            arch,
            params,
            adam,
            meta,
        };
        ck.check()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

fn put_block(out: &mut Vec<u8>, data: &[u8]) -> Result<()> {
    let len = u32::try_from(data.len()).map_err(|_| Error::Format("block exceeds 4 GiB".into()))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(data);
    Ok(())
}

fn put_tensors(out: &mut Vec<u8>, ts: &[Tensor<f32>]) {
    for t in ts {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn block(&mut self) -> Result<&'a [u8]> {
        let len = u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes"));
        self.take(len as usize)
    }

    fn tensors(&mut self, shapes: &[Vec<usize>]) -> Result<Vec<Tensor<f32>>> {
        shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                let raw = self.take(n * 4)?;
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                Tensor::from_vec(s, data)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::arch::ArchRegistry;
    use proptest::prelude::*;

    #[test]
    fn student_file_fits_table_budget() {
        let arch = ArchRegistry::builtin().resolve("student").unwrap();
        let ck = Checkpoint::initial(&arch, 1).unwrap();
        let bytes = ck.to_bytes().unwrap();
        let payload = 143_938 * 4;
        assert!(payload <= 640_000);
        let header = bytes.len() - payload;
        assert!(header < 1024, "header {header} bytes");
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let arch = ArchRegistry::builtin().resolve("compact-student").unwrap();
        let bytes = Checkpoint::initial(&arch, 1).unwrap().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&magic).unwrap_err().to_string().contains("magic"));
        let mut version = bytes;
        version[4] = 9;
        assert!(Checkpoint::from_bytes(&version).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn mismatched_params_rejected() {
        let arch = ArchRegistry::builtin().resolve("compact-student").unwrap();
        let mut params = Checkpoint::initial(&arch, 1).unwrap().params;
        params.pop();
        assert!(Checkpoint::new(arch, params, CheckpointMeta::default()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn round_trip_is_value_exact(seed in any::<u64>(), step in 0u64..1000, with_adam in any::<bool>(), acc in 0.0f64..1.0) {
            let arch = ArchRegistry::builtin().resolve("compact-student").unwrap();
            let mut ck = Checkpoint::initial(&arch, seed).unwrap();
            ck.meta.val_accuracy = acc;
            ck.meta.epoch_val_accuracies = vec![acc, acc / 3.0];
            ck.meta.tags.insert("target_angle".into(), "A1".into());
            if with_adam {
                let mut st = AdamState::new(&arch.param_shapes());
                st.step = step;
                st.m = ck.params.iter().map(|t| Tensor::from_vec(t.shape(), t.data().iter().map(|v| v * 0.5).collect()).unwrap()).collect();
                st.v = ck.params.iter().map(|t| Tensor::from_vec(t.shape(), t.data().iter().map(|v| v * v).collect()).unwrap()).collect();
                ck.adam = Some(st);
            }
            let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(&back, &ck);
            prop_assert_eq!(back.to_bytes().unwrap(), ck.to_bytes().unwrap());
        }
    }
}
