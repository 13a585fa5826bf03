//! Raw clip container, corpus manifests, flow-tensor loading and seeded batching.
//!
//! Clip file layout (little-endian):
//!
//! ```text
//! "TRCL" | version u32 | width u32 | height u32 | n_frames u32 | fps f64 | bit_depth u8 | 3 reserved
//! | n_frames × width × height u8 (row-major frames) | crc32 u32 (over every preceding byte)
//! ```

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{check_envelope, Checkpoint, NamedTensor};
use crate::error::{Error, FormatError, Result};
use crate::flow::{clip_to_tensor, FlowClipTensor, FlowParams, FrameGray};
use crate::ordinal::{encode_label, OrdinalLabel, RankScale};
use crate::synth::SyntheticClipSpec;

pub const CLIP_MAGIC: [u8; 4] = *b"TRCL";
pub const CLIP_VERSION: u32 = 1;
const HEADER_LEN: usize = 32;
const BIT_DEPTH: u8 = 8;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawClip {
    pub fps: f64,
    pub frames: Vec<FrameGray>,
}

impl RawClip {
    pub fn width(&self) -> usize {
        self.frames.first().map_or(0, FrameGray::width)
    }

    pub fn height(&self) -> usize {
        self.frames.first().map_or(0, FrameGray::height)
    }
}

/// Quantizes to 8 bits (`round(x·255)`) and serializes.
pub fn encode_clip(frames: &[FrameGray], fps: f64) -> Result<Vec<u8>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Domain("a clip needs at least one frame".into()))?;
    let (w, h) = (first.width(), first.height());
    if let Some(i) = frames.iter().position(|f| f.width() != w || f.height() != h) {
        return Err(Error::Shape(format!(
            "frame {i} is {}x{}, frame 0 is {w}x{h}",
            frames[i].width(),
            frames[i].height()
        )));
    }
    if !(fps.is_finite() && fps > 0.0) {
        return Err(Error::Domain(format!("fps must be positive, got {fps}")));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + w * h * frames.len() + 4);
    out.extend_from_slice(&CLIP_MAGIC);
    out.extend_from_slice(&CLIP_VERSION.to_le_bytes());
    for v in [w, h, frames.len()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&fps.to_le_bytes());
    out.extend_from_slice(&[BIT_DEPTH, 0, 0, 0]);
    for f in frames {
        out.extend(f.data().iter().map(|v| (v * 255.0).round() as u8));
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Checks run in the order magic, version, length, checksum.
pub fn decode_clip(bytes: &[u8]) -> std::result::Result<RawClip, FormatError> {
    if bytes.len() < HEADER_LEN + 4 {
        // Report magic/version problems before a short-read when possible.
        if bytes.len() >= 4 && bytes[..4] != CLIP_MAGIC {
            return Err(FormatError::BadMagic {
                found: bytes[..4].try_into().expect("4 bytes"),
                expected: CLIP_MAGIC,
            });
        }
        return Err(FormatError::Truncated {
            offset: 0,
            needed: (HEADER_LEN + 4) as u64,
            available: bytes.len() as u64,
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let found: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if found != CLIP_MAGIC {
        return Err(FormatError::BadMagic {
            found,
            expected: CLIP_MAGIC,
        });
    }
    if u32_at(4) != CLIP_VERSION {
        return Err(FormatError::Version {
            found: u32_at(4),
            expected: CLIP_VERSION,
        });
    }
    let (w, h, n) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize);
    let fps = f64::from_le_bytes(bytes[20..28].try_into().expect("8 bytes"));
    if bytes[28] != BIT_DEPTH {
        return Err(FormatError::Malformed {
            offset: 28,
            detail: format!("bit depth {} unsupported", bytes[28]),
        });
    }
    if w == 0 || h == 0 || n == 0 || !(fps.is_finite() && fps > 0.0) {
        return Err(FormatError::Malformed {
            offset: 8,
            detail: format!("header {w}x{h}x{n} at {fps} fps"),
        });
    }
    let payload = w
        .checked_mul(h)
        .and_then(|p| p.checked_mul(n))
        .ok_or_else(|| FormatError::Malformed {
            offset: 8,
            detail: "payload size overflows".into(),
        })?;
    let expected_len = HEADER_LEN + payload + 4;
    if bytes.len() < expected_len {
        return Err(FormatError::Truncated {
            offset: HEADER_LEN as u64,
            needed: (payload + 4) as u64,
            available: (bytes.len() - HEADER_LEN) as u64,
        });
    }
    if bytes.len() > expected_len {
        return Err(FormatError::Malformed {
            offset: expected_len as u64,
            detail: format!("{} trailing bytes", bytes.len() - expected_len),
        });
    }
    check_envelope(bytes, CLIP_MAGIC, CLIP_VERSION)?;
    let frames = bytes[HEADER_LEN..HEADER_LEN + payload]
        .chunks_exact(w * h)
        .map(|px| {
            FrameGray::new(w, h, px.iter().map(|&b| f64::from(b) / 255.0).collect()).expect("u8/255 is in [0, 1]")
        })
        .collect();
    Ok(RawClip { fps, frames })
}

pub fn write_clip(path: impl AsRef<Path>, frames: &[FrameGray], fps: f64) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_clip(frames, fps)?).map_err(|e| Error::io(path, e))
}

pub fn read_clip(path: impl AsRef<Path>) -> Result<RawClip> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_clip(&bytes).map_err(|k| Error::format(path, k))
}

/// What the clips of a corpus are labelled with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    /// Amplitude follows the severity rank.
    Rank,
    /// Amplitude is drawn independently of any label; frequency is the target.
    Frequency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub generator: String,
    pub master_seed: u64,
    pub levels: usize,
    pub labels: LabelKind,
    pub profile: String,
    pub n_frames: usize,
    /// Clip count per rank.
    pub histogram: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    /// Relative to the manifest's directory.
    pub path: String,
    pub subject: u32,
    pub rank: usize,
    pub seed: u64,
    pub spec_hash: String,
    pub spec: SyntheticClipSpec,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
enum ManifestLine {
    Header(ManifestHeader),
    Clip(ClipRecord),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub header: ManifestHeader,
    pub clips: Vec<ClipRecord>,
    /// Directory clip paths are resolved against.
    pub root: PathBuf,
}

pub fn rank_histogram(clips: &[ClipRecord], levels: usize) -> Vec<u64> {
    let mut h = vec![0u64; levels];
    for c in clips {
        if c.rank < levels {
            h[c.rank] += 1;
        }
    }
    h
}

impl CorpusManifest {
    /// Same clips with absolute paths, rooted at `root`, so the manifest can be saved anywhere.
    pub fn relocated(&self, root: impl Into<PathBuf>) -> Result<Self> {
        let mut out = self.clone();
        for c in &mut out.clips {
            let abs = std::path::absolute(self.root.join(&c.path)).map_err(|e| Error::io(&c.path, e))?;
            c.path = abs.to_string_lossy().into_owned();
        }
        out.root = root.into();
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn scale(&self) -> Result<RankScale> {
        RankScale::new(self.header.levels)
    }

    pub fn clip_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.clips[i].path)
    }

    pub fn subjects(&self) -> BTreeSet<u32> {
        self.clips.iter().map(|c| c.subject).collect()
    }

    /// Keeps the clips selected by `keep`, recounting the histogram.
    pub fn filtered(&self, keep: impl Fn(&ClipRecord) -> bool) -> Self {
        let clips: Vec<_> = self.clips.iter().filter(|c| keep(c)).cloned().collect();
        let mut header = self.header.clone();
        header.histogram = rank_histogram(&clips, header.levels);
        Self {
            header,
            clips,
            root: self.root.clone(),
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&ManifestLine::Header(self.header.clone())).expect("serializable");
        out.push('\n');
        for c in &self.clips {
            out.push_str(&serde_json::to_string(&ManifestLine::Clip(c.clone())).expect("serializable"));
            out.push('\n');
        }
        out
    }

    /// SHA-256 of the JSON-lines serialization.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_jsonl().as_bytes())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Loads a manifest; clip paths resolve against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut header = None;
        let mut clips = Vec::new();
        let mut offset = 0u64;
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let len = line.len() as u64 + 1;
            if !line.trim().is_empty() {
                let parsed: ManifestLine = serde_json::from_str(&line).map_err(|e| {
                    Error::format(
                        path,
                        FormatError::Malformed {
                            offset,
                            detail: e.to_string(),
                        },
                    )
                })?;
                match parsed {
                    ManifestLine::Header(h) if header.is_none() && clips.is_empty() => header = Some(h),
                    ManifestLine::Header(_) => {
                        return Err(Error::format(
                            path,
                            FormatError::Malformed {
                                offset,
                                detail: "header record must come first and appear once".into(),
                            },
                        ))
                    }
                    ManifestLine::Clip(c) => clips.push(c),
                }
            }
            offset += len;
        }
        let header = header.ok_or_else(|| {
            Error::format(
                path,
                FormatError::Malformed {
                    offset: 0,
                    detail: "no header record".into(),
                },
            )
        })?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self { header, clips, root };
        m.validate()?;
        Ok(m)
    }

    /// Ranks in range, histogram consistent, spec hashes match their specs.
    pub fn validate(&self) -> Result<()> {
        let scale = self.scale()?;
        for c in &self.clips {
            scale.check_rank(c.rank)?;
            if c.spec.rank != c.rank || c.spec.subject_id != c.subject || c.spec.seed != c.seed {
                return Err(Error::Domain(format!("record `{}` disagrees with its spec", c.path)));
            }
            if c.spec.hash() != c.spec_hash {
                return Err(Error::Domain(format!("record `{}` spec hash mismatch", c.path)));
            }
        }
        if rank_histogram(&self.clips, self.header.levels) != self.header.histogram {
            return Err(Error::Domain("manifest histogram disagrees with its records".into()));
        }
        Ok(())
    }

    pub fn label(&self, i: usize) -> Result<OrdinalLabel> {
        encode_label(self.clips[i].rank, self.scale()?)
    }
}

/// Fails with the shared subject ids when two splits are not disjoint.
pub fn check_disjoint(a: &CorpusManifest, b: &CorpusManifest) -> Result<()> {
    let shared: Vec<u32> = a.subjects().intersection(&b.subjects()).copied().collect();
    if shared.is_empty() {
        Ok(())
    } else {
        Err(Error::SubjectOverlap { subjects: shared })
    }
}

/// How clips become network input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TensorSpec {
    pub alpha: f64,
    pub iterations: usize,
    pub size: usize,
}

impl Default for TensorSpec {
    fn default() -> Self {
        let p = FlowParams::default();
        Self {
            alpha: p.alpha,
            iterations: p.iterations,
            size: crate::flow::TENSOR_SIZE,
        }
    }
}

impl TensorSpec {
    pub fn flow_params(&self) -> FlowParams {
        FlowParams {
            alpha: self.alpha,
            iterations: self.iterations,
        }
    }

    fn cache_key(&self, clip_bytes: &[u8]) -> String {
        let mut h = Sha256::new();
        h.update(clip_bytes);
        h.update(format!("alpha={};iterations={};size={}", self.alpha, self.iterations, self.size));
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Reads clip `i` and computes its flow tensor, consulting `cache_dir` when given.
pub fn load_tensor(
    manifest: &CorpusManifest,
    i: usize,
    spec: &TensorSpec,
    cache_dir: Option<&Path>,
) -> Result<FlowClipTensor> {
    let path = manifest.clip_path(i);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let cached = cache_dir.map(|d| d.join(format!("{}.trnk", spec.cache_key(&bytes))));
    if let Some(c) = cached.as_ref().filter(|c| c.exists()) {
        let ck = Checkpoint::load(c)?;
        let t = ck
            .get("flow")
            .ok_or_else(|| Error::Domain(format!("{} lacks a `flow` tensor", c.display())))?;
        return FlowClipTensor::new(spec.size, t.data.clone());
    }
    let clip = decode_clip(&bytes).map_err(|k| Error::format(&path, k))?;
    let tensor = clip_to_tensor(&clip.frames, spec.flow_params(), spec.size)?;
    if let Some(c) = cached {
        let s = spec.size as u32;
        let mut ck = Checkpoint::default();
        ck.set_meta("kind", "flow-tensor");
        ck.set_meta("source", &manifest.clips[i].path);
        ck.tensors
            .push(NamedTensor::new("flow", vec![2, s, s, s], tensor.data().to_vec()));
        ck.save(c)?;
    }
    Ok(tensor)
}

/// All tensors of a manifest, in manifest order.
pub fn load_tensors(manifest: &CorpusManifest, spec: &TensorSpec, cache_dir: Option<&Path>) -> Result<Vec<FlowClipTensor>> {
    if let Some(d) = cache_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    (0..manifest.len())
        .into_par_iter()
        .map(|i| load_tensor(manifest, i, spec, cache_dir))
        .collect()
}

/// Seeded permutation of `0..n` for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub tensors: Vec<FlowClipTensor>,
    pub labels: Vec<OrdinalLabel>,
    /// Manifest indices.
    pub clip_ids: Vec<usize>,
}

/// One epoch of batches in seeded order; the last batch may be short.
pub struct BatchStream<'a> {
    manifest: &'a CorpusManifest,
    spec: TensorSpec,
    cache_dir: Option<PathBuf>,
    order: Vec<usize>,
    batch_size: usize,
    next: usize,
}

impl BatchStream<'_> {
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn batch_count(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

pub fn batches<'a>(
    manifest: &'a CorpusManifest,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    spec: TensorSpec,
    cache_dir: Option<PathBuf>,
) -> Result<BatchStream<'a>> {
    if batch_size == 0 {
        return Err(Error::Domain("batch size must be at least 1".into()));
    }
    let scale = manifest.scale()?;
    for c in &manifest.clips {
        scale.check_rank(c.rank)?;
    }
    Ok(BatchStream {
        manifest,
        spec,
        cache_dir,
        order: epoch_order(manifest.len(), seed, epoch),
        batch_size,
        next: 0,
    })
}

impl Iterator for BatchStream<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.order.len() {
            return None;
        }
        let end = (self.next + self.batch_size).min(self.order.len());
        let ids = self.order[self.next..end].to_vec();
        self.next = end;
        let load = || -> Result<Batch> {
            let tensors = ids
                .par_iter()
                .map(|&i| load_tensor(self.manifest, i, &self.spec, self.cache_dir.as_deref()))
                .collect::<Result<Vec<_>>>()?;
            let labels = ids.iter().map(|&i| self.manifest.label(i)).collect::<Result<Vec<_>>>()?;
            Ok(Batch {
                tensors,
                labels,
                clip_ids: ids.clone(),
            })
        };
        Some(load())
    }
}
