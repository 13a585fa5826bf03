//! Binary checkpoint container and the mapping between it and network parameters.
//!
//! Layout (little-endian):
//!
//! ```text
//! "TRNK" | version u32 | metadata_len u32 | metadata (UTF-8 "key=value\n" lines, sorted)
//! | tensor_count u32 | { name_len u32 | name | rank u32 | dims u32×rank | f32×∏dims }*
//! | crc32 u32 (over every preceding byte)
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::net::{Architecture, BackboneParams, Conv3dBlock};
use crate::ordinal::{CoralHead, RankScale};

pub const MAGIC: [u8; 4] = *b"TRNK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, dims: Vec<u32>, data: Vec<f32>) -> Self {
        let t = Self {
            name: name.into(),
            dims,
            data,
        };
        debug_assert_eq!(t.element_count(), t.data.len());
        t
    }

    fn element_count(&self) -> usize {
        self.dims.iter().map(|d| *d as usize).product()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<NamedTensor>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], FormatError> {
        if self.bytes.len() - self.pos < n {
            return Err(FormatError::Truncated {
                offset: self.pos as u64,
                needed: n as u64,
                available: (self.bytes.len() - self.pos) as u64,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> std::result::Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn malformed(&self, detail: impl Into<String>) -> FormatError {
        FormatError::Malformed {
            offset: self.pos as u64,
            detail: detail.into(),
        }
    }
}

/// Validates magic, version and trailing CRC; returns the body between header and CRC.
pub(crate) fn check_envelope(bytes: &[u8], magic: [u8; 4], version: u32) -> std::result::Result<(), FormatError> {
    if bytes.len() < 12 {
        return Err(FormatError::Truncated {
            offset: 0,
            needed: 12,
            available: bytes.len() as u64,
        });
    }
    let found: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if found != magic {
        return Err(FormatError::BadMagic {
            found,
            expected: magic,
        });
    }
    let v = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if v != version {
        return Err(FormatError::Version {
            found: v,
            expected: version,
        });
    }
    let split = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[split..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[..split]);
    if stored != computed {
        return Err(FormatError::Checksum { stored, computed });
    }
    Ok(())
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.metadata.insert(key.to_string(), value.to_string());
    }

    fn meta_parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self
            .meta(key)
            .ok_or_else(|| Error::Domain(format!("checkpoint metadata lacks `{key}`")))?;
        raw.parse()
            .map_err(|_| Error::Domain(format!("checkpoint metadata `{key}` = `{raw}` is malformed")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let mut meta = String::new();
        for (k, v) in &self.metadata {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Domain(format!(
                    "metadata entry `{k}` cannot contain '=' in the key or newlines"
                )));
            }
            meta.push_str(k);
            meta.push('=');
            meta.push_str(v);
            meta.push('\n');
        }
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            if t.element_count() != t.data.len() {
                return Err(Error::Shape(format!(
                    "tensor `{}` has dims {:?} but {} values",
                    t.name,
                    t.dims,
                    t.data.len()
                )));
            }
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for d in &t.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, FormatError> {
        check_envelope(bytes, MAGIC, VERSION)?;
        let mut r = Reader {
            bytes: &bytes[..bytes.len() - 4],
            pos: 8,
        };
        let meta_len = r.u32()? as usize;
        let meta = std::str::from_utf8(r.take(meta_len)?).map_err(|_| r.malformed("metadata is not UTF-8"))?;
        let mut metadata = BTreeMap::new();
        for line in meta.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| r.malformed(format!("metadata line `{line}` lacks '='")))?;
            metadata.insert(k.to_string(), v.to_string());
        }
        let count = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| r.malformed("tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u32()).collect::<std::result::Result<Vec<_>, _>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |acc, d| acc.checked_mul(*d as usize))
                .ok_or_else(|| r.malformed(format!("tensor `{name}` dims overflow")))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| r.malformed("tensor too large"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(NamedTensor { name, dims, data });
        }
        if r.pos != r.bytes.len() {
            return Err(r.malformed(format!("{} trailing bytes", r.bytes.len() - r.pos)));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|k| Error::format(path, k))
    }
}

/// Which portion of a network a checkpoint carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    /// Every block, batch-norm statistics and the ordinal head.
    Full,
    /// Only the transferable encoder blocks.
    Encoder,
}

impl CheckpointKind {
    fn as_str(self) -> &'static str {
        match self {
            CheckpointKind::Full => "full",
            CheckpointKind::Encoder => "encoder",
        }
    }
}

/// Provenance recorded alongside the parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TrainingRecord {
    pub step: u64,
    pub seed: u64,
}

fn block_tensors(i: usize, b: &Conv3dBlock<f32>, out: &mut Vec<NamedTensor>) {
    let k = b.spec.kernel as u32;
    let o = b.spec.out_channels as u32;
    out.push(NamedTensor::new(
        format!("block{}.conv.weight", i + 1),
        vec![o, b.in_channels as u32, k, k, k],
        b.weight.clone(),
    ));
    out.push(NamedTensor::new(format!("block{}.conv.bias", i + 1), vec![o], b.bias.clone()));
    if let Some(bn) = &b.bn {
        for (name, v) in [
            ("scale", &bn.scale),
            ("shift", &bn.shift),
            ("running_mean", &bn.running_mean),
            ("running_var", &bn.running_var),
        ] {
            out.push(NamedTensor::new(format!("block{}.bn.{name}", i + 1), vec![o], v.clone()));
        }
    }
}

/// Serializes parameters. `Encoder` keeps only the leading encoder blocks.
pub fn to_checkpoint(params: &BackboneParams<f32>, kind: CheckpointKind, record: TrainingRecord) -> Checkpoint {
    let mut ck = Checkpoint::default();
    ck.set_meta("format", "tremorank");
    ck.set_meta("kind", kind.as_str());
    ck.set_meta("arch", params.arch.encode());
    ck.set_meta("m", params.scale.levels());
    ck.set_meta("score_step", RankScale::SCORE_STEP);
    ck.set_meta("step", record.step);
    ck.set_meta("seed", record.seed);
    if let Some(bn) = params.blocks.iter().find_map(|b| b.bn.as_ref()) {
        ck.set_meta("bn.eps", bn.eps);
        ck.set_meta("bn.momentum", bn.momentum);
    }
    let n_blocks = match kind {
        CheckpointKind::Full => params.blocks.len(),
        CheckpointKind::Encoder => params.arch.encoder_blocks(),
    };
    for (i, b) in params.blocks.iter().take(n_blocks).enumerate() {
        block_tensors(i, b, &mut ck.tensors);
    }
    if kind == CheckpointKind::Full {
        let h = &params.head;
        ck.tensors.push(NamedTensor::new(
            "head.projection",
            vec![h.projection.len() as u32],
            h.projection.clone(),
        ));
        ck.tensors.push(NamedTensor::new("head.bias_base", vec![1], vec![h.bias_base]));
        ck.tensors.push(NamedTensor::new(
            "head.decrement_raw",
            vec![h.decrement_raw.len() as u32],
            h.decrement_raw.clone(),
        ));
    }
    ck
}

fn take_tensor(ck: &Checkpoint, name: &str, dims: &[u32]) -> Result<Vec<f32>> {
    let t = ck.get(name).ok_or_else(|| Error::ArchitectureMismatch {
        key: name.to_string(),
        detail: "missing from checkpoint".into(),
    })?;
    if t.dims != dims {
        return Err(Error::ArchitectureMismatch {
            key: name.to_string(),
            detail: format!("checkpoint dims {:?}, expected {:?}", t.dims, dims),
        });
    }
    Ok(t.data.clone())
}

/// Copies block `i` of `ck` into `block`, checking every tensor shape.
fn load_block(ck: &Checkpoint, i: usize, block: &mut Conv3dBlock<f32>) -> Result<Vec<String>> {
    let k = block.spec.kernel as u32;
    let o = block.spec.out_channels as u32;
    let prefix = format!("block{}", i + 1);
    let mut keys = Vec::new();
    let wname = format!("{prefix}.conv.weight");
    block.weight = take_tensor(ck, &wname, &[o, block.in_channels as u32, k, k, k])?;
    keys.push(wname);
    let bname = format!("{prefix}.conv.bias");
    block.bias = take_tensor(ck, &bname, &[o])?;
    keys.push(bname);
    match &mut block.bn {
        Some(bn) => {
            for (name, slot) in [
                ("scale", &mut bn.scale),
                ("shift", &mut bn.shift),
                ("running_mean", &mut bn.running_mean),
                ("running_var", &mut bn.running_var),
            ] {
                let key = format!("{prefix}.bn.{name}");
                *slot = take_tensor(ck, &key, &[o])?;
                keys.push(key);
            }
            if ck.meta("bn.eps").is_some() {
                bn.eps = ck.meta_parse("bn.eps")?;
            }
            if ck.meta("bn.momentum").is_some() {
                bn.momentum = ck.meta_parse("bn.momentum")?;
            }
        }
        None => {
            let key = format!("{prefix}.bn.scale");
            if ck.get(&key).is_some() {
                return Err(Error::ArchitectureMismatch {
                    key,
                    detail: "checkpoint has batch-norm where the architecture has none".into(),
                });
            }
        }
    }
    Ok(keys)
}

/// Rebuilds full parameters from a [`CheckpointKind::Full`] checkpoint.
pub fn from_checkpoint(ck: &Checkpoint) -> Result<(BackboneParams<f32>, TrainingRecord)> {
    if ck.meta("kind") != Some(CheckpointKind::Full.as_str()) {
        return Err(Error::Domain(format!(
            "expected a full checkpoint, got kind `{}`",
            ck.meta("kind").unwrap_or("<none>")
        )));
    }
    let arch = Architecture::decode(ck.meta("arch").unwrap_or_default())?;
    let scale = RankScale::new(ck.meta_parse("m")?)?;
    let record = TrainingRecord {
        step: ck.meta_parse("step")?,
        seed: ck.meta_parse("seed")?,
    };
    let mut params = BackboneParams::<f32>::init(arch, scale, 0)?;
    for (i, block) in params.blocks.iter_mut().enumerate() {
        load_block(ck, i, block)?;
    }
    let dim = params.head.projection.len() as u32;
    let projection = take_tensor(ck, "head.projection", &[dim])?;
    let bias_base = take_tensor(ck, "head.bias_base", &[1])?[0];
    let decrement_raw = take_tensor(ck, "head.decrement_raw", &[scale.tasks() as u32 - 1])?;
    params.head = CoralHead {
        projection,
        bias_base,
        decrement_raw,
    };
    let expected = params.blocks.iter().map(|b| 2 + if b.bn.is_some() { 4 } else { 0 }).sum::<usize>() + 3;
    if ck.tensors.len() != expected {
        return Err(Error::Domain(format!(
            "checkpoint holds {} tensors, architecture expects {expected}",
            ck.tensors.len()
        )));
    }
    Ok((params, record))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransferPolicy {
    /// Transferred blocks are gradient-exempt.
    Freeze,
    /// Transferred blocks are updated like the rest.
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct TransferReport {
    pub transferred: Vec<String>,
    pub reinitialized: Vec<String>,
    pub frozen_blocks: usize,
}

/// Copies the encoder blocks of `ck` into a fresh network of `arch`; the final
/// block and the head are initialized from `seed`.
pub fn load_pretrained(
    ck: &Checkpoint,
    arch: Architecture,
    scale: RankScale,
    policy: TransferPolicy,
    seed: u64,
) -> Result<(BackboneParams<f32>, TransferReport)> {
    let mut params = BackboneParams::<f32>::init(arch, scale, seed)?;
    let enc = params.arch.encoder_blocks();
    let mut transferred = Vec::new();
    for i in 0..enc {
        transferred.extend(load_block(ck, i, &mut params.blocks[i])?);
    }
    let full = to_checkpoint(&params, CheckpointKind::Full, TrainingRecord::default());
    let reinitialized = full
        .tensors
        .iter()
        .map(|t| t.name.clone())
        .filter(|n| !transferred.contains(n))
        .collect();
    params.frozen_blocks = match policy {
        TransferPolicy::Freeze => enc,
        TransferPolicy::Finetune => 0,
    };
    let frozen_blocks = params.frozen_blocks;
    Ok((
        params,
        TransferReport {
            transferred,
            reinitialized,
            frozen_blocks,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Architecture;

    fn small() -> BackboneParams<f32> {
        BackboneParams::init(Architecture::strided(16, &[4, 6]), RankScale::default(), 5).unwrap()
    }

    #[test]
    fn bytes_round_trip_bit_exact() {
        let mut p = small();
        p.head.decrement_raw[2] = f32::NEG_INFINITY;
        let ck = to_checkpoint(&p, CheckpointKind::Full, TrainingRecord { step: 7, seed: 99 });
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let (q, rec) = from_checkpoint(&back).unwrap();
        assert_eq!(rec, TrainingRecord { step: 7, seed: 99 });
        assert_eq!(q, p);
    }

    #[test]
    fn distinct_errors_for_corruption() {
        let ck = to_checkpoint(&small(), CheckpointKind::Full, TrainingRecord::default());
        let bytes = ck.to_bytes().unwrap();

        let truncated = &bytes[..bytes.len() - 10];
        assert!(matches!(Checkpoint::from_bytes(truncated), Err(FormatError::Checksum { .. })));

        assert!(matches!(Checkpoint::from_bytes(&bytes[..6]), Err(FormatError::Truncated { .. })));

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad_magic), Err(FormatError::BadMagic { .. })));

        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bad_version),
            Err(FormatError::Version { found: 9, .. })
        ));

        let mut flipped = bytes.clone();
        let mid = bytes.len() / 2;
        flipped[mid] ^= 0x10;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(FormatError::Checksum { .. })));
    }

    #[test]
    fn encoder_checkpoint_has_only_encoder_keys() {
        let ck = to_checkpoint(&small(), CheckpointKind::Encoder, TrainingRecord::default());
        assert!(ck.tensors.iter().all(|t| t.name.starts_with("block1.") || t.name.starts_with("block2.")));
        assert_eq!(ck.tensors.len(), 12);
    }

    #[test]
    fn pretrained_blocks_are_copied_and_rest_reinitialized() {
        let mut src = small();
        src.blocks[0].weight.iter_mut().for_each(|w| *w *= 3.0);
        src.blocks[1].bn.as_mut().unwrap().running_mean[0] = 4.25;
        let ck = to_checkpoint(&src, CheckpointKind::Encoder, TrainingRecord::default());
        let (p, report) =
            load_pretrained(&ck, src.arch.clone(), src.scale, TransferPolicy::Freeze, 77).unwrap();
        assert_eq!(p.blocks[0], src.blocks[0]);
        assert_eq!(p.blocks[1], src.blocks[1]);
        assert_eq!(p.frozen_blocks, 2);
        assert_eq!(report.transferred.len(), 12);
        assert!(report.reinitialized.iter().any(|k| k == "block3.conv.weight"));
        assert!(report.reinitialized.iter().any(|k| k == "head.projection"));
        let fresh = BackboneParams::<f32>::init(src.arch.clone(), src.scale, 77).unwrap();
        assert_eq!(p.blocks[2], fresh.blocks[2]);
    }

    #[test]
    fn mismatched_architecture_names_first_key() {
        let ck = to_checkpoint(&small(), CheckpointKind::Encoder, TrainingRecord::default());
        let other = Architecture::strided(16, &[5, 6]);
        let err = load_pretrained(&ck, other, RankScale::default(), TransferPolicy::Finetune, 0).unwrap_err();
        match err {
            Error::ArchitectureMismatch { key, .. } => assert_eq!(key, "block1.conv.weight"),
            e => panic!("unexpected {e}"),
        }
    }
}
