//! Feature sequences, the MTDL feature file format and the synthetic
//! segmental-sequence generator.
//!
//! # MTDL layout
//!
//! All integers and floats are little-endian.
//!
//! | offset | size      | field                               |
//! |--------|-----------|-------------------------------------|
//! | 0      | 4         | magic `4D 54 44 4C` (`"MTDL"`)      |
//! | 4      | 2         | `u16` version, currently 1          |
//! | 6      | 4         | `u32` frame count `T` (≥ 1)         |
//! | 10     | 4         | `u32` feature dimension `d` (≥ 1)   |
//! | 14     | 4         | `u32` class label                   |
//! | 18     | `4·T·d`   | `f32` features, frame-major         |
//!
//! Features are widened to `f64` on load.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"MTDL";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 18;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic {found:02X?} at byte offset 0 (expected \"MTDL\")")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported version {found} at byte offset 4 (expected {VERSION})")]
    Version { found: u16 },
    #[error("truncated at byte offset {offset}: expected {expected} bytes, found {actual}")]
    Truncated {
        offset: usize,
        expected: usize,
        actual: usize,
    },
    #[error("{extra} trailing bytes after payload at byte offset {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("invalid sequence: {0}")]
    Invalid(String),
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
}

impl DataError {
    fn io(path: &Path, source: io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// One sample: `T` frames of `d` features plus a class label.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub id: String,
    frames: usize,
    dim: usize,
    features: Vec<f64>,
    pub label: usize,
    /// Ground-truth segment flags, only known for synthetic data.
    pub mask: Option<Vec<bool>>,
}

impl FeatureSequence {
    pub fn new(
        id: String,
        frames: usize,
        dim: usize,
        features: Vec<f64>,
        label: usize,
    ) -> Result<Self, DataError> {
        if frames == 0 || dim == 0 {
            return Err(DataError::Invalid(format!(
                "need at least one frame and one feature, got T={frames} d={dim}"
            )));
        }
        if features.len() != frames * dim {
            return Err(DataError::Invalid(format!(
                "{} values do not fill {frames}×{dim} frames",
                features.len()
            )));
        }
        if let Some(bad) = features.iter().position(|v| !v.is_finite()) {
            return Err(DataError::Invalid(format!(
                "non-finite feature at frame {} index {}",
                bad / dim,
                bad % dim
            )));
        }
        Ok(Self {
            id,
            frames,
            dim,
            features,
            label,
            mask: None,
        })
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self, DataError> {
        self.set_mask(mask)?;
        Ok(self)
    }

    pub fn set_mask(&mut self, mask: Vec<bool>) -> Result<(), DataError> {
        if mask.len() != self.frames {
            return Err(DataError::Invalid(format!(
                "mask of length {} for {} frames",
                mask.len(),
                self.frames
            )));
        }
        self.mask = Some(mask);
        Ok(())
    }

    /// Frame count `T`.
    pub fn len(&self) -> usize {
        self.frames
    }

    pub fn is_empty(&self) -> bool {
        self.frames == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.features[t * self.dim..(t + 1) * self.dim]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.features[t * self.dim..(t + 1) * self.dim]
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }
}

/// Serializes to MTDL bytes. Features are narrowed to `f32`.
pub fn encode(seq: &FeatureSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * seq.features.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(seq.frames as u32).to_le_bytes());
    out.extend_from_slice(&(seq.dim as u32).to_le_bytes());
    out.extend_from_slice(&(seq.label as u32).to_le_bytes());
    for v in &seq.features {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

fn take<const N: usize>(bytes: &[u8], offset: usize) -> Result<[u8; N], DataError> {
    bytes
        .get(offset..offset + N)
        .map(|s| s.try_into().expect("slice of length N"))
        .ok_or(DataError::Truncated {
            offset,
            expected: offset + N,
            actual: bytes.len(),
        })
}

/// Parses MTDL bytes; `id` becomes the sequence id.
pub fn decode(bytes: &[u8], id: &str) -> Result<FeatureSequence, DataError> {
    let magic: [u8; 4] = take(bytes, 0).map_err(|_| DataError::BadMagic {
        found: bytes[..bytes.len().min(4)].to_vec(),
    })?;
    if magic != MAGIC {
        return Err(DataError::BadMagic {
            found: magic.to_vec(),
        });
    }
    let version = u16::from_le_bytes(take(bytes, 4)?);
    if version != VERSION {
        return Err(DataError::Version { found: version });
    }
    let frames = u32::from_le_bytes(take(bytes, 6)?) as usize;
    let dim = u32::from_le_bytes(take(bytes, 10)?) as usize;
    let label = u32::from_le_bytes(take(bytes, 14)?) as usize;

    let payload = frames
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| DataError::Invalid(format!("T={frames} d={dim} overflows")))?;
    let expected = HEADER_LEN + payload;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            offset: bytes.len(),
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(DataError::TrailingBytes {
            offset: expected,
            extra: bytes.len() - expected,
        });
    }
    let features = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    FeatureSequence::new(id.to_string(), frames, dim, features, label)
}

pub fn write_feature_file(path: &Path, seq: &FeatureSequence) -> Result<(), DataError> {
    fs::write(path, encode(seq)).map_err(|e| DataError::io(path, e))
}

/// Reads an MTDL file; the file stem becomes the sequence id.
pub fn read_feature_file(path: &Path) -> Result<FeatureSequence, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode(&bytes, &id)
}

/// Reads a manifest: one feature file path per line, relative paths resolved
/// against the manifest's directory. Blank lines and `#` comments are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| base.join(l))
        .collect())
}

pub fn write_manifest(path: &Path, entries: &[PathBuf]) -> Result<(), DataError> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&e.to_string_lossy());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| DataError::io(path, e))
}

/// Loads every sequence listed in a manifest, in order.
pub fn load_manifest(path: &Path) -> Result<Vec<FeatureSequence>, DataError> {
    read_manifest(path)?
        .iter()
        .map(|p| read_feature_file(p))
        .collect()
}

/// Mask sidecar path for a manifest: same stem, `.masks` extension.
pub fn masks_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("masks")
}

/// One line per masked sequence: `<id> <flags>`, flags a run of `0`/`1`.
/// Sequences without a mask are skipped.
pub fn write_masks(path: &Path, seqs: &[FeatureSequence]) -> Result<(), DataError> {
    let mut text = String::new();
    for s in seqs {
        if let Some(mask) = &s.mask {
            text.push_str(&s.id);
            text.push(' ');
            text.extend(mask.iter().map(|&m| if m { '1' } else { '0' }));
            text.push('\n');
        }
    }
    fs::write(path, text).map_err(|e| DataError::io(path, e))
}

pub fn read_masks(path: &Path) -> Result<Vec<(String, Vec<bool>)>, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || {
            DataError::Invalid(format!(
                "{}:{}: expected `<id> <0|1 flags>`",
                path.display(),
                n + 1
            ))
        };
        let (id, flags) = line.split_once(' ').ok_or_else(bad)?;
        let mask = flags
            .trim()
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(bad()),
            })
            .collect::<Result<Vec<_>, _>>()?;
        out.push((id.to_string(), mask));
    }
    Ok(out)
}

/// Attaches masks to sequences with matching ids. Returns how many matched.
pub fn attach_masks(
    seqs: &mut [FeatureSequence],
    masks: Vec<(String, Vec<bool>)>,
) -> Result<usize, DataError> {
    let by_id: std::collections::HashMap<String, Vec<bool>> = masks.into_iter().collect();
    let mut matched = 0;
    for s in seqs.iter_mut() {
        if let Some(mask) = by_id.get(&s.id) {
            s.set_mask(mask.clone())?;
            matched += 1;
        }
    }
    Ok(matched)
}

/// Parameters of the synthetic segmental task.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    /// Frames per sequence `T`.
    pub length: usize,
    /// Planted segment length `L`.
    pub segment: usize,
    /// Per-coordinate Gaussian noise scale.
    pub noise: f64,
    /// Probability that a non-segment frame carries the distractor signature.
    pub distractor: f64,
    /// Norm of the class and distractor signatures.
    pub signal: f64,
    pub train: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 5,
            dim: 32,
            length: 40,
            segment: 8,
            noise: 0.5,
            distractor: 0.3,
            signal: 1.5,
            train: 2000,
            test: 500,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |m: String| Err(DataError::Spec(m));
        if self.classes < 2 {
            return fail(format!("classes must be at least 2, got {}", self.classes));
        }
        if self.dim < self.classes + 1 {
            return fail(format!(
                "dim {} cannot hold {} orthogonal signatures plus a distractor",
                self.dim, self.classes
            ));
        }
        if self.segment < 1 || self.segment > self.length {
            return fail(format!(
                "segment length {} must lie in 1..={}",
                self.segment, self.length
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return fail(format!("noise {} must be a finite value ≥ 0", self.noise));
        }
        if !(0.0..=1.0).contains(&self.distractor) {
            return fail(format!(
                "distractor probability {} outside [0, 1]",
                self.distractor
            ));
        }
        if !(self.signal > 0.0 && self.signal.is_finite()) {
            return fail(format!("signal {} must be positive", self.signal));
        }
        Ok(())
    }
}

/// Generated train/test splits plus the planted signatures.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub train: Vec<FeatureSequence>,
    pub test: Vec<FeatureSequence>,
    /// Unit-norm class signature per class.
    pub signatures: Vec<Vec<f64>>,
    /// Unit-norm distractor signature, orthogonal to every class signature.
    pub distractor: Vec<f64>,
}

/// `count` mutually orthonormal vectors by Gram-Schmidt on Gaussian draws.
fn orthonormal_set<R: Rng>(count: usize, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= proj * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

/// Class-balanced labels: round robin, then shuffled.
fn balanced_labels<R: Rng>(count: usize, classes: usize, rng: &mut R) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..count).map(|i| i % classes).collect();
    labels.shuffle(rng);
    labels
}

fn sample_sequence<R: Rng>(
    spec: &SyntheticSpec,
    id: String,
    label: usize,
    signatures: &[Vec<f64>],
    distractor: &[f64],
    noise: &Normal<f64>,
    rng: &mut R,
) -> FeatureSequence {
    let (t_len, d) = (spec.length, spec.dim);
    let offset = rng.random_range(0..=t_len - spec.segment);
    let mut features = Vec::with_capacity(t_len * d);
    let mut mask = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let in_segment = t >= offset && t < offset + spec.segment;
        let carrier = if in_segment {
            Some(signatures[label].as_slice())
        } else if rng.random_bool(spec.distractor) {
            Some(distractor)
        } else {
            None
        };
        for j in 0..d {
            let base = carrier.map_or(0.0, |c| spec.signal * c[j]);
            let v = base + noise.sample(rng);
            // Stored at f32 precision so MTDL files reproduce it exactly.
            features.push(v as f32 as f64);
        }
        mask.push(in_segment);
    }
    FeatureSequence::new(id, t_len, d, features, label)
        .and_then(|s| s.with_mask(mask))
        .expect("generated sequence is well formed")
}

/// Draws the synthetic train and test splits.
///
/// Each sample plants `L` contiguous frames of its class signature (scaled
/// by `signal`, plus noise) at a uniform offset. Every other frame is noise,
/// or with probability `distractor` the shared distractor signature plus
/// noise. The mask marks the planted frames.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut basis = orthonormal_set(spec.classes + 1, spec.dim, &mut rng);
    let distractor = basis.pop().expect("classes + 1 vectors");
    let signatures = basis;
    let noise = Normal::new(0.0, spec.noise).map_err(|e| DataError::Spec(e.to_string()))?;

    let mut split = |name: &str, count: usize| {
        let labels = balanced_labels(count, spec.classes, &mut rng);
        labels
            .into_iter()
            .enumerate()
            .map(|(i, label)| {
                sample_sequence(
                    spec,
                    format!("{name}-{i:06}"),
                    label,
                    &signatures,
                    &distractor,
                    &noise,
                    &mut rng,
                )
            })
            .collect::<Vec<_>>()
    };
    let train = split("train", spec.train);
    let test = split("test", spec.test);
    Ok(SyntheticData {
        train,
        test,
        signatures,
        distractor,
    })
}
