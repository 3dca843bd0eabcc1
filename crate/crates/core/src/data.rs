//! Synthetic patch-grid datasets, the on-disk dataset layout, label-universe
//! merging and mixup.
//!
//! A generated frame is Gaussian noise over `n_x` patches. Each label owns a
//! few trigger patches and a pattern vector; the label is active on a frame
//! exactly when its pattern is added to its trigger patches. Activations come
//! in contiguous segments so temporal smoothing has structure to exploit.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use mlt_autodiff::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::read_json;
use crate::error::{Error, Result};
use crate::util::{atomic_write, take_rows, write_json};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_sequences: usize,
    pub sequence_length: usize,
    pub n_x: usize,
    pub patch_dim: usize,
    #[serde(rename = "L")]
    pub num_labels: usize,
    /// Patches owned by each label.
    pub trigger_size: usize,
    /// Euclidean norm of each planted pattern.
    pub pattern_norm: f64,
    /// Standard deviation of the background noise.
    pub noise: f64,
    /// Target fraction of active frames per label; `None` spreads the rates
    /// linearly from 0.04 to 0.11.
    pub positive_rates: Option<Vec<f64>>,
    pub min_segment: usize,
    pub max_segment: usize,
    /// Per-frame probability of toggling a label's activation after the
    /// segments are laid out.
    pub flip_prob: f64,
    /// Probability that an inactive label's pattern is planted on a random
    /// patch outside its triggers.
    pub decoy_prob: f64,
    /// Seeds trigger placement and patterns; datasets sharing it pose the
    /// same task.
    pub task_seed: u64,
    /// Seeds segments and noise.
    pub seed: u64,
    pub id_prefix: String,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_sequences: 50,
            sequence_length: 200,
            n_x: 64,
            patch_dim: 16,
            num_labels: 12,
            trigger_size: 2,
            pattern_norm: 5.0,
            noise: 1.0,
            positive_rates: None,
            min_segment: 20,
            max_segment: 60,
            flip_prob: 0.0,
            decoy_prob: 0.05,
            task_seed: 0,
            seed: 0,
            id_prefix: "seq".into(),
        }
    }
}

impl SyntheticSpec {
    pub fn rates(&self) -> Vec<f64> {
        match &self.positive_rates {
            Some(r) => r.clone(),
            None if self.num_labels == 1 => vec![0.075],
            None => (0..self.num_labels)
                .map(|t| 0.04 + 0.07 * t as f64 / (self.num_labels - 1) as f64)
                .collect(),
        }
    }

    pub fn num_samples(&self) -> usize {
        self.num_sequences * self.sequence_length
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synthetic spec: {m}")));
        for (name, v) in [
            ("num_sequences", self.num_sequences),
            ("sequence_length", self.sequence_length),
            ("n_x", self.n_x),
            ("patch_dim", self.patch_dim),
            ("L", self.num_labels),
            ("trigger_size", self.trigger_size),
            ("min_segment", self.min_segment),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.max_segment < self.min_segment {
            return bad("max_segment < min_segment".into());
        }
        if self.max_segment > self.sequence_length {
            return bad("max_segment exceeds sequence_length".into());
        }
        if self.num_labels * self.trigger_size > self.n_x {
            return bad(format!(
                "{} labels × {} trigger patches do not fit in {} patches",
                self.num_labels, self.trigger_size, self.n_x
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) || !(self.pattern_norm > 0.0 && self.pattern_norm.is_finite()) {
            return bad("noise must be >= 0 and pattern_norm > 0".into());
        }
        if !(0.0..=1.0).contains(&self.flip_prob) || !(0.0..=1.0).contains(&self.decoy_prob) {
            return bad("flip_prob and decoy_prob must lie in [0, 1]".into());
        }
        let rates = self.rates();
        if rates.len() != self.num_labels {
            return bad(format!("{} positive rates for L = {}", rates.len(), self.num_labels));
        }
        if let Some(r) = rates.iter().find(|&&r| !(r > 0.0 && r < 1.0)) {
            return bad(format!("positive rate {r} outside (0, 1)"));
        }
        Ok(())
    }

    pub fn label_names(&self) -> Vec<String> {
        (0..self.num_labels).map(|t| format!("label_{t:02}")).collect()
    }
}

/// Trigger patches and planted patterns shared by every dataset generated
/// with the same `task_seed`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub triggers: Vec<Vec<usize>>,
    pub patterns: Vec<Vec<f64>>,
}

impl SyntheticTask {
    pub fn from_spec(spec: &SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.task_seed);
        let mut cells: Vec<usize> = (0..spec.n_x).collect();
        cells.shuffle(&mut rng);
        let triggers = cells
            .chunks(spec.trigger_size)
            .take(spec.num_labels)
            .map(|c| {
                let mut c = c.to_vec();
                c.sort_unstable();
                c
            })
            .collect();
        let std = Normal::new(0.0, 1.0).expect("valid normal");
        let patterns = (0..spec.num_labels)
            .map(|_| {
                let v: Vec<f64> = (0..spec.patch_dim).map(|_| std.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.iter().map(|x| x / norm * spec.pattern_norm).collect()
            })
            .collect();
        Ok(Self { triggers, patterns })
    }
}

/// One contiguous run of frames.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sequence {
    pub id: String,
    pub start: usize,
    pub length: usize,
}

/// Inputs `x [N, n_x, patch_dim]`, targets `y [N, L]` and annotation mask
/// `mask [N, L]`, with frames grouped into sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Tensor,
    pub mask: Tensor,
    pub labels: Vec<String>,
    pub sequences: Vec<Sequence>,
}

/// A minibatch; `y` may hold soft targets after mixup.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub y: Tensor,
    pub mask: Tensor,
}

impl Dataset {
    pub fn num_samples(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn n_x(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn patch_dim(&self) -> usize {
        self.x.shape()[2]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Dataset(m));
        if self.x.rank() != 3 {
            return bad(format!("x has shape {:?}, expected [N, n_x, patch_dim]", self.x.shape()));
        }
        let (n, l) = (self.num_samples(), self.labels.len());
        if self.y.shape() != [n, l] || self.mask.shape() != [n, l] {
            return bad(format!(
                "y {:?} / mask {:?} do not match [{n}, {l}]",
                self.y.shape(),
                self.mask.shape()
            ));
        }
        if self.labels.iter().collect::<BTreeSet<_>>().len() != l {
            return bad("duplicate label names".into());
        }
        if self.mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return bad("mask entries must be 0 or 1".into());
        }
        if self.y.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return bad("targets must lie in [0, 1]".into());
        }
        let mut next = 0;
        let mut ids = BTreeSet::new();
        for s in &self.sequences {
            if s.start != next || s.length == 0 {
                return bad(format!("sequence {} does not continue at frame {next}", s.id));
            }
            if !ids.insert(&s.id) {
                return bad(format!("duplicate sequence id {}", s.id));
            }
            next += s.length;
        }
        if next != n {
            return bad(format!("sequences cover {next} frames of {n}"));
        }
        Ok(())
    }

    /// `(sequence id, frame within sequence)` for every sample.
    pub fn sample_ids(&self) -> Vec<(String, usize)> {
        self.sequences
            .iter()
            .flat_map(|s| (0..s.length).map(move |f| (s.id.clone(), f)))
            .collect()
    }

    /// Fraction of positive annotated entries per label.
    pub fn positive_rates(&self) -> Vec<f64> {
        let l = self.num_labels();
        let mut pos = vec![0.0; l];
        let mut cnt = vec![0.0; l];
        for (i, (&y, &m)) in self.y.data().iter().zip(self.mask.data()).enumerate() {
            if m != 0.0 {
                pos[i % l] += y;
                cnt[i % l] += 1.0;
            }
        }
        pos.iter()
            .zip(&cnt)
            .map(|(p, c)| if *c > 0.0 { p / c } else { 0.0 })
            .collect()
    }

    pub fn batch(&self, rows: &[usize]) -> Result<Batch> {
        Ok(Batch {
            x: take_rows(&self.x, rows)?,
            y: take_rows(&self.y, rows)?,
            mask: take_rows(&self.mask, rows)?,
        })
    }

    /// Keeps only the named labels, in the given order.
    pub fn restrict_labels(&self, keep: &[String]) -> Result<Dataset> {
        let cols: Vec<usize> = keep
            .iter()
            .map(|k| {
                self.labels
                    .iter()
                    .position(|l| l == k)
                    .ok_or_else(|| Error::Dataset(format!("unknown label {k}")))
            })
            .collect::<Result<_>>()?;
        let n = self.num_samples();
        let l = self.num_labels();
        let pick = |t: &Tensor| {
            Tensor::from_fn(&[n, cols.len()], |i| t.data()[(i / cols.len()) * l + cols[i % cols.len()]])
        };
        Ok(Dataset {
            x: self.x.clone(),
            y: pick(&self.y),
            mask: pick(&self.mask),
            labels: keep.to_vec(),
            sequences: self.sequences.clone(),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let entry = |name: &str, t: &Tensor| TensorEntry {
            path: PathBuf::from(format!("{name}.mlt")),
            offset: 0,
            shape: t.shape().to_vec(),
        };
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            num_samples: self.num_samples(),
            sequences: self.sequences.clone(),
            labels: self.labels.clone(),
            positive_rates: self.positive_rates(),
            tensors: TensorTable {
                x: entry("x", &self.x),
                y: entry("y", &self.y),
                mask: entry("mask", &self.mask),
            },
        };
        for (e, t) in [
            (&manifest.tensors.x, &self.x),
            (&manifest.tensors.y, &self.y),
            (&manifest.tensors.mask, &self.mask),
        ] {
            atomic_write(&dir.join(&e.path), &t.to_mlt_bytes())?;
        }
        write_json(&dir.join(MANIFEST_FILE), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
        manifest.check()?;
        let read = |e: &TensorEntry| -> Result<Tensor> {
            let path = dir.join(&e.path);
            let bytes = std::fs::read(&path).map_err(Error::io(&path))?;
            let start = usize::try_from(e.offset).unwrap_or(usize::MAX);
            let len = mlt_autodiff::encoded_len(&e.shape);
            let stop = start
                .checked_add(len)
                .filter(|&s| s <= bytes.len())
                .ok_or_else(|| Error::Dataset(format!("{} is shorter than its manifest entry", path.display())))?;
            let t = Tensor::from_mlt_bytes(&bytes[start..stop])
                .map_err(|err| Error::Dataset(format!("{}: {err}", path.display())))?;
            if t.shape() != e.shape.as_slice() {
                return Err(Error::Dataset(format!("{} shape disagrees with manifest", path.display())));
            }
            Ok(t)
        };
        let ds = Dataset {
            x: read(&manifest.tensors.x)?,
            y: read(&manifest.tensors.y)?,
            mask: read(&manifest.tensors.mask)?,
            labels: manifest.labels.clone(),
            sequences: manifest.sequences.clone(),
        };
        ds.validate()?;
        if ds.num_samples() != manifest.num_samples {
            return Err(Error::Dataset("num_samples disagrees with tensors".into()));
        }
        Ok(ds)
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub path: PathBuf,
    pub offset: u64,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorTable {
    pub x: TensorEntry,
    pub y: TensorEntry,
    pub mask: TensorEntry,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub num_samples: usize,
    pub sequences: Vec<Sequence>,
    pub labels: Vec<String>,
    pub positive_rates: Vec<f64>,
    pub tensors: TensorTable,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Manifest> {
        let m: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
        m.check()?;
        Ok(m)
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Dataset(m));
        if self.version != MANIFEST_VERSION {
            return bad(format!("unsupported manifest version {}", self.version));
        }
        if self.positive_rates.len() != self.labels.len() {
            return bad("positive_rates and labels differ in length".into());
        }
        if self.positive_rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return bad("positive rates must lie in [0, 1]".into());
        }
        let l = self.labels.len();
        let t = &self.tensors;
        if t.x.shape.len() != 3
            || t.x.shape[0] != self.num_samples
            || t.y.shape != [self.num_samples, l]
            || t.mask.shape != [self.num_samples, l]
        {
            return bad("tensor shapes disagree with num_samples / labels".into());
        }
        for e in [&t.x, &t.y, &t.mask] {
            if e.path.is_absolute() || e.path.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
                return bad(format!("tensor path {} must stay inside the dataset", e.path.display()));
            }
        }
        let covered: usize = self.sequences.iter().map(|s| s.length).sum();
        if covered != self.num_samples {
            return bad("sequences do not cover num_samples".into());
        }
        Ok(())
    }
}

/// Lays out activation segments for one label across all sequences. Returns
/// per-sequence, per-frame activity.
fn place_segments(spec: &SyntheticSpec, rate: f64, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<bool>>> {
    let (ns, len) = (spec.num_sequences, spec.sequence_length);
    let mean_len = (spec.min_segment + spec.max_segment) as f64 / 2.0;
    let count = ((rate * spec.num_samples() as f64 / mean_len).round() as usize).max(1);
    let mut active = vec![vec![false; len]; ns];
    for _ in 0..count {
        let seg = rng.random_range(spec.min_segment..=spec.max_segment);
        let mut placed = false;
        for _ in 0..8 * ns {
            let s = rng.random_range(0..ns);
            let row = &active[s];
            // A start is valid when the segment and one frame on each side are free.
            let starts: Vec<usize> = (0..=len - seg)
                .filter(|&p| {
                    let lo = p.saturating_sub(1);
                    let hi = (p + seg + 1).min(len);
                    row[lo..hi].iter().all(|&a| !a)
                })
                .collect();
            if let Some(&p) = starts.get(rng.random_range(0..starts.len().max(1))) {
                active[s][p..p + seg].iter_mut().for_each(|a| *a = true);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Config(format!(
                "synthetic spec: cannot fit {count} segments at rate {rate}; lower the rate or segment lengths"
            )));
        }
    }
    Ok(active)
}

/// Generates a dataset; identical specs give bitwise-identical output.
pub fn generate_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    let task = SyntheticTask::from_spec(spec)?;
    generate_with_task(spec, &task)
}

pub fn generate_with_task(spec: &SyntheticSpec, task: &SyntheticTask) -> Result<Dataset> {
    spec.validate()?;
    let (n, l, nx, pd) = (spec.num_samples(), spec.num_labels, spec.n_x, spec.patch_dim);
    let len = spec.sequence_length;
    let mut seg_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    seg_rng.set_stream(1);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    noise_rng.set_stream(2);
    let mut plant_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    plant_rng.set_stream(3);

    let mut y = vec![0.0; n * l];
    for (t, &rate) in spec.rates().iter().enumerate() {
        let active = place_segments(spec, rate, &mut seg_rng)?;
        for (s, row) in active.iter().enumerate() {
            for (f, &a) in row.iter().enumerate() {
                let on = a ^ (spec.flip_prob > 0.0 && plant_rng.random::<f64>() < spec.flip_prob);
                y[(s * len + f) * l + t] = if on { 1.0 } else { 0.0 };
            }
        }
    }

    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut x: Vec<f64> = (0..n * nx * pd)
        .map(|_| spec.noise * normal.sample(&mut noise_rng))
        .collect();
    let plant = |x: &mut [f64], frame: usize, patch: usize, t: usize| {
        let base = (frame * nx + patch) * pd;
        for (v, p) in x[base..base + pd].iter_mut().zip(&task.patterns[t]) {
            *v += p;
        }
    };
    let decoy_patches: Vec<Vec<usize>> = task
        .triggers
        .iter()
        .map(|tr| (0..nx).filter(|p| !tr.contains(p)).collect())
        .collect();
    for frame in 0..n {
        for t in 0..l {
            if y[frame * l + t] == 1.0 {
                for &patch in &task.triggers[t] {
                    plant(&mut x, frame, patch, t);
                }
            } else if spec.decoy_prob > 0.0 && !decoy_patches[t].is_empty() && plant_rng.random::<f64>() < spec.decoy_prob {
                let pool = &decoy_patches[t];
                let patch = pool[plant_rng.random_range(0..pool.len())];
                plant(&mut x, frame, patch, t);
            }
        }
    }

    let sequences = (0..spec.num_sequences)
        .map(|s| Sequence {
            id: format!("{}{s:04}", spec.id_prefix),
            start: s * len,
            length: len,
        })
        .collect();
    let ds = Dataset {
        x: Tensor::new(vec![n, nx, pd], x)?,
        y: Tensor::new(vec![n, l], y)?,
        mask: Tensor::ones(&[n, l]),
        labels: spec.label_names(),
        sequences,
    };
    ds.validate()?;
    Ok(ds)
}

/// Concatenates datasets over the ordered union of their label names. A mask
/// entry is 1 exactly where the source dataset annotates that label; targets
/// are 0 wherever the mask is 0.
pub fn merge_label_universes(sources: &[Dataset]) -> Result<Dataset> {
    let first = sources
        .first()
        .ok_or_else(|| Error::Dataset("nothing to merge".into()))?;
    let tail = &first.x.shape()[1..];
    let mut labels: Vec<String> = Vec::new();
    for ds in sources {
        ds.validate()?;
        if &ds.x.shape()[1..] != tail {
            return Err(Error::Dataset(format!(
                "patch shape {:?} differs from {:?}",
                &ds.x.shape()[1..],
                tail
            )));
        }
        for name in &ds.labels {
            if !labels.contains(name) {
                labels.push(name.clone());
            }
        }
    }
    let mut seen = BTreeMap::new();
    let mut sequences = Vec::new();
    let mut xs = Vec::new();
    let (mut y, mut mask) = (Vec::new(), Vec::new());
    let lu = labels.len();
    let mut offset = 0;
    for (k, ds) in sources.iter().enumerate() {
        let cols: Vec<usize> = ds
            .labels
            .iter()
            .map(|n| labels.iter().position(|u| u == n).expect("label in union"))
            .collect();
        for s in &ds.sequences {
            if let Some(prev) = seen.insert(s.id.clone(), k) {
                return Err(Error::Dataset(format!(
                    "duplicate sample id: sequence {} appears in sources {prev} and {k}",
                    s.id
                )));
            }
            sequences.push(Sequence {
                id: s.id.clone(),
                start: s.start + offset,
                length: s.length,
            });
        }
        let l = ds.num_labels();
        for i in 0..ds.num_samples() {
            let mut yr = vec![0.0; lu];
            let mut mr = vec![0.0; lu];
            for (j, &c) in cols.iter().enumerate() {
                if ds.mask.data()[i * l + j] != 0.0 {
                    mr[c] = 1.0;
                    yr[c] = ds.y.data()[i * l + j];
                }
            }
            y.extend(yr);
            mask.extend(mr);
        }
        xs.push(&ds.x);
        offset += ds.num_samples();
    }
    let ds = Dataset {
        x: crate::util::concat_rows(&xs)?,
        y: Tensor::new(vec![offset, lu], y)?,
        mask: Tensor::new(vec![offset, lu], mask)?,
        labels,
        sequences,
    };
    ds.validate()?;
    Ok(ds)
}

/// `λ a + (1 − λ) b` for inputs and targets; an entry is annotated only if
/// it is annotated in both batches.
pub fn mixup(a: &Batch, b: &Batch, lambda: f64) -> Result<Batch> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("mixup coefficient {lambda} outside [0, 1]")));
    }
    for (ta, tb) in [(&a.x, &b.x), (&a.y, &b.y), (&a.mask, &b.mask)] {
        if ta.shape() != tb.shape() {
            return Err(Error::Shape {
                op: "mixup",
                expected: ta.shape().to_vec(),
                actual: tb.shape().to_vec(),
            });
        }
    }
    let mix = |ta: &Tensor, tb: &Tensor| {
        Tensor::from_fn(ta.shape(), |i| lambda * ta.data()[i] + (1.0 - lambda) * tb.data()[i])
    };
    Ok(Batch {
        x: mix(&a.x, &b.x),
        y: mix(&a.y, &b.y),
        mask: Tensor::from_fn(a.mask.shape(), |i| {
            if a.mask.data()[i] != 0.0 && b.mask.data()[i] != 0.0 {
                1.0
            } else {
                0.0
            }
        }),
    })
}

/// Row order for one epoch.
pub fn epoch_order<R: Rng + ?Sized>(n: usize, shuffle: bool, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if shuffle {
        idx.shuffle(rng);
    }
    idx
}
