//! Epoch datasets: file I/O, subject-wise splits, batching and a
//! deterministic synthetic generator with a controllable domain shift.
//!
//! # Epoch file layout
//!
//! All integers little-endian.
//!
//! ```text
//! "ADST"  u32 version=1  u32 n_records  u32 T  u32 K
//! n_records × ( u32 subject_id  u8 stage (255 = unlabeled)  T × f32 signal )
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const EPOCH_MAGIC: &[u8; 4] = b"ADST";
pub const EPOCH_VERSION: u32 = 1;
pub const UNLABELED: u8 = 255;
/// Duration of one epoch in seconds.
pub const EPOCH_SECONDS: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    Source,
    Target,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Source => "source",
            Domain::Target => "target",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// One 30-second single-channel epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub subject_id: u32,
    pub signal: Vec<f32>,
    /// Sleep stage, `None` when unlabeled.
    pub stage: Option<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub epoch_len: usize,
    pub n_classes: usize,
    pub records: Vec<EpochRecord>,
    splits: Option<BTreeMap<u32, Split>>,
}

impl DomainDataset {
    pub fn new(epoch_len: usize, n_classes: usize, records: Vec<EpochRecord>) -> Result<Self> {
        if n_classes == 0 || n_classes > UNLABELED as usize {
            return Err(Error::Spec(format!("unsupported class count {n_classes}")));
        }
        for (i, r) in records.iter().enumerate() {
            if r.signal.len() != epoch_len {
                return Err(Error::Spec(format!(
                    "record {i} has {} samples, expected {epoch_len}",
                    r.signal.len()
                )));
            }
            if let Some(s) = r.stage {
                if s as usize >= n_classes {
                    return Err(Error::Label {
                        label: s as usize,
                        classes: n_classes,
                    });
                }
            }
        }
        Ok(Self {
            epoch_len,
            n_classes,
            records,
            splits: None,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn sampling_rate_hz(&self) -> f64 {
        self.epoch_len as f64 / EPOCH_SECONDS
    }

    pub fn subjects(&self) -> Vec<u32> {
        self.records
            .iter()
            .map(|r| r.subject_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Count per class; unlabeled records are not counted.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.n_classes];
        for r in &self.records {
            if let Some(s) = r.stage {
                h[s as usize] += 1;
            }
        }
        h
    }

    pub fn split_of(&self, subject: u32) -> Option<Split> {
        self.splits.as_ref()?.get(&subject).copied()
    }

    pub fn has_splits(&self) -> bool {
        self.splits.is_some()
    }

    /// Record indices in `split`, in file order.
    pub fn indices(&self, split: Split) -> Result<Vec<usize>> {
        let map = self
            .splits
            .as_ref()
            .ok_or_else(|| Error::Split("dataset has no split assignment".into()))?;
        Ok(self
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| map.get(&r.subject_id) == Some(&split))
            .map(|(i, _)| i)
            .collect())
    }

    /// Shuffles subjects with `seed` and partitions them by `fractions`
    /// (train, val, test). Counts are floored, then leftover subjects go to
    /// the largest fractional remainders, earliest split first on ties.
    pub fn with_subject_split(mut self, fractions: [f64; 3], seed: u64) -> Result<Self> {
        let mut subjects = self.subjects();
        if subjects.len() < 5 {
            return Err(Error::Split(format!(
                "need at least 5 subjects, found {}",
                subjects.len()
            )));
        }
        let total: f64 = fractions.iter().sum();
        if fractions.iter().any(|f| !(*f >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Split(format!(
                "fractions {fractions:?} must be non-negative and sum to 1"
            )));
        }
        let counts = partition_counts(subjects.len(), fractions);
        subjects.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut map = BTreeMap::new();
        let mut it = subjects.into_iter();
        for (split, n) in [Split::Train, Split::Val, Split::Test]
            .into_iter()
            .zip(counts)
        {
            for s in it.by_ref().take(n) {
                map.insert(s, split);
            }
        }
        self.splits = Some(map);
        Ok(self)
    }

    /// Shuffled mini-batches of one split; labels are attached only when
    /// every record in the split is labeled.
    pub fn batches(
        &self,
        split: Split,
        batch_size: usize,
        seed: u64,
        epoch: usize,
    ) -> Result<Vec<Batch>> {
        let idx = self.indices(split)?;
        let labeled = idx.iter().all(|&i| self.records[i].stage.is_some());
        let set = SignalSet::from_indices(self, &idx);
        let labels: Option<Vec<usize>> = labeled.then(|| {
            idx.iter()
                .map(|&i| self.records[i].stage.unwrap() as usize)
                .collect()
        });
        Ok(batch_order(idx.len(), batch_size, seed, epoch)
            .into_iter()
            .map(|positions| set.batch(&positions, labels.as_deref()))
            .collect())
    }

    /// All records in file order as `[B×1×T]` tensors of at most
    /// `batch_size` epochs.
    pub fn signal_batches(&self, batch_size: usize) -> Vec<Tensor> {
        let idx: Vec<usize> = (0..self.records.len()).collect();
        let set = SignalSet::from_indices(self, &idx);
        idx.chunks(batch_size.max(1))
            .map(|positions| set.batch(positions, None).signals)
            .collect()
    }

    /// Copy with every stage replaced by the unlabeled sentinel.
    pub fn without_labels(&self) -> Self {
        let mut out = self.clone();
        out.records.iter_mut().for_each(|r| r.stage = None);
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.records.len() * (5 + 4 * self.epoch_len));
        out.extend_from_slice(EPOCH_MAGIC);
        for v in [
            EPOCH_VERSION,
            self.records.len() as u32,
            self.epoch_len as u32,
            self.n_classes as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for r in &self.records {
            out.extend_from_slice(&r.subject_id.to_le_bytes());
            out.push(r.stage.unwrap_or(UNLABELED));
            for s in &r.signal {
                out.extend_from_slice(&s.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { bytes, pos: 0 };
        let magic = rd.take(4)?;
        if magic != EPOCH_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: format!("bad magic {:?}", String::from_utf8_lossy(magic)),
            });
        }
        let version = rd.u32()?;
        if version != EPOCH_VERSION {
            return Err(Error::Format {
                offset: 4,
                msg: format!("unsupported version {version}"),
            });
        }
        let n = rd.u32()? as usize;
        let t = rd.u32()? as usize;
        let k = rd.u32()? as usize;
        if k == 0 || k >= UNLABELED as usize {
            return Err(Error::Format {
                offset: 16,
                msg: format!("unsupported class count {k}"),
            });
        }
        let mut records = Vec::with_capacity(n.min(bytes.len() / (5 + 4 * t.max(1))));
        for _ in 0..n {
            let subject_id = rd.u32()?;
            let at = rd.pos;
            let stage = match rd.u8()? {
                UNLABELED => None,
                s if (s as usize) < k => Some(s),
                s => {
                    return Err(Error::Format {
                        offset: at,
                        msg: format!("stage {s} out of range for {k} classes"),
                    })
                }
            };
            let raw = rd.take(4 * t)?;
            let signal = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            records.push(EpochRecord {
                subject_id,
                signal,
                stage,
            });
        }
        if rd.pos != bytes.len() {
            return Err(Error::Format {
                offset: rd.pos,
                msg: format!("{} trailing bytes", bytes.len() - rd.pos),
            });
        }
        Ok(Self {
            epoch_len: t,
            n_classes: k,
            records,
            splits: None,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(Error::Format {
                offset: self.pos,
                msg: format!(
                    "truncated: wanted {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

fn partition_counts(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let raw: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts = [0usize; 3];
    for i in 0..3 {
        // guard against 0.6·10 = 5.999…
        counts[i] = (raw[i] + 1e-9).floor() as usize;
    }
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = raw[a] - counts[a] as f64;
        let rb = raw[b] - counts[b] as f64;
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Shuffled index chunks; the permutation depends only on `(seed, epoch)`.
pub fn batch_order(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    idx.shuffle(&mut rng);
    idx.chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

/// A mini-batch of epochs shaped `[B×1×T]`.
#[derive(Clone, Debug)]
pub struct Batch {
    /// Positions within the split the batch was drawn from.
    pub positions: Vec<usize>,
    pub signals: Tensor,
    pub labels: Option<Vec<usize>>,
}

/// Contiguous signal storage for one split.
#[derive(Clone, Debug, PartialEq)]
struct SignalSet {
    epoch_len: usize,
    data: Vec<f32>,
}

impl SignalSet {
    fn from_indices(ds: &DomainDataset, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * ds.epoch_len);
        for &i in idx {
            data.extend_from_slice(&ds.records[i].signal);
        }
        Self {
            epoch_len: ds.epoch_len,
            data,
        }
    }

    fn len(&self) -> usize {
        self.data.len() / self.epoch_len.max(1)
    }

    fn batch(&self, positions: &[usize], labels: Option<&[usize]>) -> Batch {
        let t = self.epoch_len;
        let mut buf = Vec::with_capacity(positions.len() * t);
        for &p in positions {
            buf.extend(self.data[p * t..(p + 1) * t].iter().map(|&v| f64::from(v)));
        }
        Batch {
            positions: positions.to_vec(),
            signals: Tensor::new(&[positions.len(), 1, t], buf).expect("non-empty batch"),
            labels: labels.map(|l| positions.iter().map(|&p| l[p]).collect()),
        }
    }
}

/// Labeled split; construction fails if any record lacks a stage.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSplit {
    signals: SignalSet,
    labels: Vec<usize>,
    n_classes: usize,
}

impl LabeledSplit {
    pub fn from_dataset(ds: &DomainDataset, split: Split) -> Result<Self> {
        Self::from_indices(ds, &ds.indices(split)?, &format!("{split} split"))
    }

    /// Every record of `ds`, ignoring split assignment.
    pub fn from_all(ds: &DomainDataset) -> Result<Self> {
        Self::from_indices(ds, &(0..ds.len()).collect::<Vec<_>>(), "dataset")
    }

    fn from_indices(ds: &DomainDataset, idx: &[usize], what: &str) -> Result<Self> {
        let labels = idx
            .iter()
            .map(|&i| ds.records[i].stage.map(usize::from))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::Unlabeled(what.to_string()))?;
        Ok(Self {
            signals: SignalSet::from_indices(ds, idx),
            labels,
            n_classes: ds.n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn epoch_len(&self) -> usize {
        self.signals.epoch_len
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn batches(&self, batch_size: usize, seed: u64, epoch: usize) -> Vec<Batch> {
        batch_order(self.len(), batch_size, seed, epoch)
            .iter()
            .map(|p| self.signals.batch(p, Some(&self.labels)))
            .collect()
    }

    /// Sequential batches covering the split in order.
    pub fn ordered_batches(&self, batch_size: usize) -> Vec<Batch> {
        ordered(self.len(), batch_size)
            .iter()
            .map(|p| self.signals.batch(p, Some(&self.labels)))
            .collect()
    }

    /// The same signals with labels dropped.
    pub fn unlabeled(&self) -> UnlabeledSplit {
        UnlabeledSplit {
            signals: self.signals.clone(),
        }
    }
}

/// Signals only. Target training data is held in this form so that the
/// adaptation code has no path to target labels.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledSplit {
    signals: SignalSet,
}

impl UnlabeledSplit {
    pub fn from_dataset(ds: &DomainDataset, split: Split) -> Result<Self> {
        Ok(Self {
            signals: SignalSet::from_indices(ds, &ds.indices(split)?),
        })
    }

    pub fn len(&self) -> usize {
        self.signals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn epoch_len(&self) -> usize {
        self.signals.epoch_len
    }

    pub fn batches(&self, batch_size: usize, seed: u64, epoch: usize) -> Vec<Batch> {
        batch_order(self.len(), batch_size, seed, epoch)
            .iter()
            .map(|p| self.signals.batch(p, None))
            .collect()
    }

    pub fn ordered_batches(&self, batch_size: usize) -> Vec<Batch> {
        ordered(self.len(), batch_size)
            .iter()
            .map(|p| self.signals.batch(p, None))
            .collect()
    }
}

fn ordered(n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    (0..n)
        .collect::<Vec<_>>()
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

/// Parameters of the synthetic two-domain benchmark.
///
/// Each epoch is the sum of two sinusoids whose frequencies are drawn from
/// the band of its class, with a per-subject phase, plus Gaussian noise.
/// The target domain additionally scales the clean signal, offsets every
/// frequency, passes the signal through a lower simulated sampling rate
/// (sample, then linearly interpolate back to `T`) and adds extra noise.
/// Every epoch is z-scored.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticShiftSpec {
    pub seed: u64,
    pub n_subjects: usize,
    pub epochs_per_subject: usize,
    pub epoch_len: usize,
    pub class_priors: Vec<f64>,
    /// `(low, high)` in Hz per class; bands must not overlap.
    pub class_bands: Vec<(f64, f64)>,
    /// Noise standard deviation in both domains, relative to a unit sinusoid.
    pub base_noise: f64,
    pub amplitude_scale: f64,
    pub frequency_offset_hz: f64,
    /// Extra target-domain noise standard deviation.
    pub noise_sigma: f64,
    pub resample_factor: f64,
}

impl Default for SyntheticShiftSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_subjects: 20,
            epochs_per_subject: 200,
            epoch_len: 300,
            class_priors: vec![0.12, 0.10, 0.42, 0.20, 0.16],
            // W, N1, N2, N3, REM
            class_bands: vec![(3.7, 4.2), (2.1, 2.6), (1.3, 1.8), (0.5, 1.0), (2.9, 3.4)],
            base_noise: 0.5,
            amplitude_scale: 0.7,
            frequency_offset_hz: 0.35,
            noise_sigma: 0.3,
            resample_factor: 0.8,
        }
    }
}

impl SyntheticShiftSpec {
    /// The same spec with every shift parameter at its neutral value.
    pub fn neutral(&self) -> Self {
        Self {
            amplitude_scale: 1.0,
            frequency_offset_hz: 0.0,
            noise_sigma: 0.0,
            resample_factor: 1.0,
            ..self.clone()
        }
    }

    pub fn n_classes(&self) -> usize {
        self.class_priors.len()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Spec(m));
        if self.class_priors.is_empty() || self.class_priors.len() >= UNLABELED as usize {
            return err(format!("{} classes", self.class_priors.len()));
        }
        if self.class_priors.iter().any(|p| !(*p >= 0.0)) {
            return err("priors must be non-negative".into());
        }
        let total: f64 = self.class_priors.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return err(format!("priors sum to {total}, not 1"));
        }
        if self.class_bands.len() != self.class_priors.len() {
            return err("one frequency band per class".into());
        }
        let nyquist = self.epoch_len as f64 / EPOCH_SECONDS / 2.0;
        for (i, &(lo, hi)) in self.class_bands.iter().enumerate() {
            if !(lo > 0.0 && lo < hi && hi < nyquist) {
                return err(format!(
                    "band {i} ({lo}, {hi}) must satisfy 0 < low < high < {nyquist} Hz"
                ));
            }
            for &(lo2, hi2) in &self.class_bands[i + 1..] {
                if lo < hi2 && lo2 < hi {
                    return err(format!("bands ({lo}, {hi}) and ({lo2}, {hi2}) overlap"));
                }
            }
        }
        if self.n_subjects == 0 || self.epochs_per_subject == 0 || self.epoch_len < 2 {
            return err("subjects, epochs per subject and T must be positive".into());
        }
        if !(self.amplitude_scale > 0.0) || !(self.resample_factor > 0.0) {
            return err("amplitude scale and resample factor must be positive".into());
        }
        if !(self.noise_sigma >= 0.0)
            || !(self.base_noise >= 0.0)
            || !self.frequency_offset_hz.is_finite()
        {
            return err("noise levels must be non-negative and the offset finite".into());
        }
        Ok(())
    }
}

/// Generates one domain. Fully determined by `spec.seed` and `role`.
pub fn generate_synthetic(spec: &SyntheticShiftSpec, role: Domain) -> Result<DomainDataset> {
    spec.validate()?;
    let shift = match role {
        Domain::Source => spec.neutral(),
        Domain::Target => spec.clone(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(match role {
        Domain::Source => 1,
        Domain::Target => 2,
    });
    let classes = WeightedIndex::new(&spec.class_priors).map_err(|e| Error::Spec(e.to_string()))?;
    let base = Normal::new(0.0, spec.base_noise).map_err(|e| Error::Spec(e.to_string()))?;
    let extra = Normal::new(0.0, shift.noise_sigma).map_err(|e| Error::Spec(e.to_string()))?;
    let t = spec.epoch_len;
    let fs = t as f64 / EPOCH_SECONDS;

    let mut records = Vec::with_capacity(spec.n_subjects * spec.epochs_per_subject);
    for subject in 0..spec.n_subjects {
        let phases: [f64; 2] = [
            rng.random_range(0.0..2.0 * PI),
            rng.random_range(0.0..2.0 * PI),
        ];
        for _ in 0..spec.epochs_per_subject {
            let stage = classes.sample(&mut rng);
            let (lo, hi) = spec.class_bands[stage];
            let mut x = vec![0.0f64; t];
            for (k, &phase) in phases.iter().enumerate() {
                let freq = rng.random_range(lo..hi) + shift.frequency_offset_hz;
                let amp = if k == 0 {
                    1.0
                } else {
                    rng.random_range(0.5..1.0)
                };
                let jitter = rng.random_range(-PI / 4.0..PI / 4.0);
                for (i, v) in x.iter_mut().enumerate() {
                    *v += shift.amplitude_scale
                        * amp
                        * (2.0 * PI * freq * i as f64 / fs + phase + jitter).sin();
                }
            }
            for v in x.iter_mut() {
                *v += base.sample(&mut rng);
            }
            let mut x = resample(&x, shift.resample_factor);
            if shift.noise_sigma > 0.0 {
                for v in x.iter_mut() {
                    *v += extra.sample(&mut rng);
                }
            }
            zscore(&mut x);
            records.push(EpochRecord {
                subject_id: subject as u32,
                signal: x.into_iter().map(|v| v as f32).collect(),
                stage: Some(stage as u8),
            });
        }
    }
    DomainDataset::new(t, spec.n_classes(), records)
}

/// Samples `x` on `round(len·factor)` evenly spaced points and linearly
/// interpolates back to the original length. `factor = 1` is the identity.
pub fn resample(x: &[f64], factor: f64) -> Vec<f64> {
    let n = x.len();
    let m = ((n as f64 * factor).round() as usize).max(2);
    if m == n || n < 2 {
        return x.to_vec();
    }
    let coarse: Vec<f64> = (0..m)
        .map(|i| interp(x, i as f64 * (n - 1) as f64 / (m - 1) as f64))
        .collect();
    (0..n)
        .map(|i| interp(&coarse, i as f64 * (m - 1) as f64 / (n - 1) as f64))
        .collect()
}

fn interp(x: &[f64], pos: f64) -> f64 {
    let i = (pos.floor() as usize).min(x.len() - 1);
    let frac = pos - i as f64;
    if i + 1 >= x.len() {
        x[i]
    } else {
        x[i] * (1.0 - frac) + x[i + 1] * frac
    }
}

fn zscore(x: &mut [f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-8);
    x.iter_mut().for_each(|v| *v = (*v - mean) / sd);
}

/// One-sided magnitude spectrum helper.
pub struct Spectrum {
    fft: Arc<dyn Fft<f64>>,
    len: usize,
}

impl Spectrum {
    pub fn new(len: usize) -> Self {
        Self {
            fft: FftPlanner::new().plan_fft_forward(len),
            len,
        }
    }

    /// `|X_k|` for `k = 0..=len/2`.
    pub fn magnitude(&self, signal: &[f32]) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = signal
            .iter()
            .map(|&v| Complex::new(f64::from(v), 0.0))
            .collect();
        self.fft.process(&mut buf);
        buf[..=self.len / 2].iter().map(|c| c.norm()).collect()
    }

    /// Mean magnitude spectrum over the records selected by `keep`.
    pub fn mean(&self, ds: &DomainDataset, keep: impl Fn(&EpochRecord) -> bool) -> Vec<f64> {
        let mut acc = vec![0.0; self.len / 2 + 1];
        let mut n = 0usize;
        for r in ds.records.iter().filter(|r| keep(r)) {
            acc.iter_mut()
                .zip(self.magnitude(&r.signal))
                .for_each(|(a, m)| *a += m);
            n += 1;
        }
        acc.iter_mut().for_each(|a| *a /= n.max(1) as f64);
        acc
    }
}

/// Distribution distance proxy: mean per-bin L1 distance between the two
/// domains' mean magnitude spectra.
pub fn spectral_distance(a: &DomainDataset, b: &DomainDataset) -> Result<f64> {
    if a.epoch_len != b.epoch_len {
        return Err(Error::Compatibility {
            what: "epoch length",
            msg: format!("{} vs {}", a.epoch_len, b.epoch_len),
        });
    }
    let spec = Spectrum::new(a.epoch_len);
    let sa = spec.mean(a, |_| true);
    let sb = spec.mean(b, |_| true);
    Ok(sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum::<f64>() / sa.len() as f64)
}
