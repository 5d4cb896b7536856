//! Binary checkpoint format.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic      4 bytes  "SIDN"
//! version    u32
//! meta_len   u32, then meta_len bytes of UTF-8 JSON metadata
//! count      u32 tensors, sorted by name, each:
//!   name_len u32, name bytes
//!   rank     u32, then rank × u32 dims
//!   payload  product(dims) × f32
//! crc32      u32 over every preceding byte
//! ```
//!
//! Optimizer moments, when present, are stored as tensors named
//! `adam.first.<name>` and `adam.second.<name>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ArchConfig, ModelParams};
use crate::optim::AdamState;
use crate::params::Parameters;
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 4] = b"SIDN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub class_table: Vec<String>,
    pub arch: ArchConfig,
    pub train_config: Option<TrainConfig>,
    pub pixel_mean: Vec<f32>,
    pub iteration: usize,
    pub adam_step: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub adam: Option<AdamState<f32>>,
    pub meta: CheckpointMeta,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Integrity("file is truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

impl Checkpoint {
    fn tensors(&self) -> BTreeMap<String, ArrayD<f32>> {
        let mut map = BTreeMap::new();
        self.params.visit("", &mut |name, _, t| {
            map.insert(name.to_string(), t.to_owned());
        });
        if let Some(adam) = &self.adam {
            for (prefix, moments) in [("adam.first", &adam.first), ("adam.second", &adam.second)] {
                for (name, t) in moments {
                    map.insert(format!("{prefix}.{name}"), t.clone());
                }
            }
        }
        map
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut meta = self.meta.clone();
        meta.arch = self.params.arch.clone();
        meta.adam_step = self.adam.as_ref().map(|a| a.step);
        let json = serde_json::to_vec(&meta).map_err(|e| Error::InvalidInput(format!("metadata: {e}")))?;
        let tensors = self.tensors();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_u32(&mut out, json.len());
        out.extend_from_slice(&json);
        put_u32(&mut out, tensors.len());
        for (name, t) in &tensors {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.ndim());
            for &d in t.shape() {
                put_u32(&mut out, d);
            }
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    /// Parses and validates against the architecture recorded in the file.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::parse(bytes, None)
    }

    /// Parses and validates every tensor against `arch` instead of the
    /// recorded architecture.
    pub fn from_bytes_for(bytes: &[u8], arch: &ArchConfig) -> Result<Self> {
        Self::parse(bytes, Some(arch))
    }

    fn parse(bytes: &[u8], expected: Option<&ArchConfig>) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32()?;
        if version > FORMAT_VERSION || version == 0 {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        if bytes.len() < 12 {
            return Err(Error::Integrity("file is truncated".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(trailer.try_into().expect("4 bytes")) {
            return Err(Error::Integrity("checksum mismatch (truncated or corrupted file)".into()));
        }
        let mut r = Reader { bytes: body, pos: 8 };
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::Integrity(format!("metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut stored: BTreeMap<String, (Vec<usize>, Vec<f32>)> = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Integrity("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let payload = r.take(n.checked_mul(4).ok_or_else(|| Error::Integrity("tensor too large".into()))?)?;
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            if stored.insert(name.clone(), (dims, data)).is_some() {
                return Err(Error::Integrity(format!("tensor `{name}` appears twice")));
            }
        }
        if r.pos != body.len() {
            return Err(Error::Integrity("trailing bytes after tensor table".into()));
        }

        let arch = expected.cloned().unwrap_or_else(|| meta.arch.clone());
        arch.validate()?;
        let mut params = ModelParams::<f32>::zeros(&arch);
        let mut fault = None;
        let mut fill = |name: &str, mut t: ndarray::ArrayViewMutD<'_, f32>, fault: &mut Option<Error>| {
            if fault.is_some() {
                return;
            }
            match stored.remove(name) {
                None => *fault = Some(Error::MissingTensor(name.to_string())),
                Some((dims, _)) if dims != t.shape() => {
                    *fault = Some(Error::ShapeMismatch {
                        name: name.to_string(),
                        expected: t.shape().to_vec(),
                        found: dims,
                    })
                }
                Some((_, data)) => t.iter_mut().zip(data).for_each(|(d, s)| *d = s),
            }
        };
        params.visit_mut("", &mut |name, _, t| fill(name, t, &mut fault));
        let adam = match meta.adam_step {
            Some(step) => {
                let mut state = AdamState::new(&params);
                state.step = step;
                for (prefix, moments) in [("adam.first", &mut state.first), ("adam.second", &mut state.second)] {
                    for (name, t) in moments.iter_mut() {
                        fill(&format!("{prefix}.{name}"), t.view_mut(), &mut fault);
                    }
                }
                Some(state)
            }
            None => None,
        };
        if let Some(e) = fault {
            return Err(e);
        }
        if let Some(extra) = stored.keys().next() {
            return Err(Error::Integrity(format!("unexpected tensor `{extra}`")));
        }
        let mut meta = meta;
        meta.arch = arch;
        Ok(Self { params, adam, meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(n_classes: usize, with_adam: bool) -> Checkpoint {
        let arch = ArchConfig::uniform_width(4, n_classes);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = ModelParams::<f32>::init(&arch, &mut rng).unwrap();
        let adam = with_adam.then(|| {
            let mut a = AdamState::new(&params);
            a.step = 7;
            a.first[0].1.fill(0.25);
            a.second[3].1.fill(1e-6);
            a
        });
        Checkpoint {
            params,
            adam,
            meta: CheckpointMeta {
                class_table: (0..n_classes).map(|i| format!("c{i}")).collect(),
                arch,
                train_config: Some(TrainConfig::default()),
                pixel_mean: vec![0.5, 0.25, 0.125],
                iteration: 42,
                adam_step: None,
            },
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        for with_adam in [false, true] {
            let ck = sample(3, with_adam);
            let bytes = ck.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back.params, ck.params);
            assert_eq!(back.adam, ck.adam);
            assert_eq!(back.meta.pixel_mean, ck.meta.pixel_mean);
            assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn layout_starts_with_magic_and_version() {
        let bytes = sample(2, false).to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"SIDN");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), FORMAT_VERSION);
    }

    #[test]
    fn distinct_errors() {
        let bytes = sample(3, false).to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::BadMagic)));

        let mut future = bytes.clone();
        future[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&future),
            Err(Error::UnsupportedVersion { found: 2, supported: 1 })
        ));

        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2]), Err(Error::Integrity(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..6]), Err(Error::Integrity(_))));

        let mut flipped = bytes.clone();
        let mid = bytes.len() - 40;
        flipped[mid] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Integrity(_))));
    }

    #[test]
    fn class_count_gates_loading() {
        let bytes = sample(13, false).to_bytes().unwrap();
        let thirteen = ArchConfig::uniform_width(4, 13);
        assert!(Checkpoint::from_bytes_for(&bytes, &thirteen).is_ok());
        let three = ArchConfig::uniform_width(4, 3);
        match Checkpoint::from_bytes_for(&bytes, &three) {
            Err(Error::ShapeMismatch { name, .. }) => assert!(name.starts_with("head."), "{name}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_tensor_is_named() {
        let ck = sample(3, false);
        let bytes = ck.to_bytes().unwrap();
        // a variant-1 architecture has a wider head, so load the full-model
        // file with a renamed tensor instead
        let needle = b"lstm.layer2.bias";
        let pos = bytes.windows(needle.len()).position(|w| w == needle).unwrap();
        let mut renamed = bytes[..bytes.len() - 4].to_vec();
        renamed[pos] = b'm';
        let crc = crc32fast::hash(&renamed);
        renamed.extend_from_slice(&crc.to_le_bytes());
        match Checkpoint::from_bytes(&renamed) {
            Err(Error::MissingTensor(name)) => assert_eq!(name, "lstm.layer2.bias"),
            other => panic!("{other:?}"),
        }
        let v1 = ck.params.arch.clone().with_variant(Variant::Variant1);
        assert!(matches!(Checkpoint::from_bytes_for(&bytes, &v1), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn saves_are_identical_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let ck = sample(3, true);
        ck.save(dir.path().join("a.sidn")).unwrap();
        ck.save(dir.path().join("b.sidn")).unwrap();
        let a = fs::read(dir.path().join("a.sidn")).unwrap();
        assert_eq!(a, fs::read(dir.path().join("b.sidn")).unwrap());
        let loaded = Checkpoint::load(dir.path().join("a.sidn")).unwrap();
        loaded.save(dir.path().join("c.sidn")).unwrap();
        assert_eq!(a, fs::read(dir.path().join("c.sidn")).unwrap());
    }
}
