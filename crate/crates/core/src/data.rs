//! Synthetic paired image/gene datasets, group-aware splits, file I/O and
//! mini-batching.
//!
//! Every sample carries an 80-feature gene vector (79 continuous CNV-like
//! values followed by a binary mutation status), a `1×32×32` grayscale image
//! in `[0, 1]` and a grade label (`0 → II`, `1 → III`, `2 → IV`).
//!
//! In [`InteractionMode::XorCrossModal`] the image encodes a latent bit `u`
//! (horizontal vs. vertical bar) and the genes encode a latent bit `v`; the
//! label is `2` when `u != v`, otherwise `v`. Neither modality alone can
//! separate grade IV from the other two.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbones::{GENE_FEATURES, IMAGE_SIDE};
use crate::fusion::NUM_CLASSES;
use crate::tensor::Tensor;

pub const CNV_FEATURES: usize = GENE_FEATURES - 1;
pub const SIGNAL_FEATURES: usize = 20;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
/// Default samples per grade (II, III, IV).
pub const GRADE_COUNTS: [usize; 3] = [396, 408, 654];
const IMAGE_MAGIC: &[u8; 4] = b"MOAB";
const BAR_WIDTH: usize = 4;
const BAR_JITTER: i64 = 2;
const BACKGROUND: f64 = 0.1;
const FOREGROUND: f64 = 0.9;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid generator spec: {0}")]
    Spec(String),
    #[error("cannot split: {0}")]
    Split(String),
    #[error("{path}: {location}: {message}")]
    Format {
        path: PathBuf,
        location: String,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn format_err(path: &Path, location: impl Into<String>, message: impl Into<String>) -> DataError {
    DataError::Format {
        path: path.to_path_buf(),
        location: location.into(),
        message: message.into(),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub sample_id: String,
    pub group_id: String,
    pub genes: Vec<f64>,
    /// Row-major `32×32` pixels.
    pub image: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut c = [0; NUM_CLASSES];
        for s in &self.samples {
            c[s.label] += 1;
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InteractionMode {
    /// Label depends on the XOR of one latent bit per modality.
    XorCrossModal,
    /// Label is encoded redundantly in each modality.
    UnimodalEasy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub class_counts: [usize; NUM_CLASSES],
    pub mode: InteractionMode,
    /// Standard deviation of additive Gaussian noise on genes and pixels.
    pub noise: f64,
    pub seed: u64,
    /// Samples sharing one group id (and one gene vector).
    pub group_size: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            class_counts: GRADE_COUNTS,
            mode: InteractionMode::XorCrossModal,
            noise: 0.1,
            seed: 0,
            group_size: 1,
        }
    }
}

impl GeneratorSpec {
    /// Class counts scaled from the 396:408:654 grade ratio to `total`
    /// (largest-remainder rounding).
    pub fn proportional_counts(total: usize) -> [usize; NUM_CLASSES] {
        let sum: usize = GRADE_COUNTS.iter().sum();
        let exact: Vec<f64> = GRADE_COUNTS
            .iter()
            .map(|&c| c as f64 * total as f64 / sum as f64)
            .collect();
        let mut counts = [0; NUM_CLASSES];
        for (c, e) in counts.iter_mut().zip(&exact) {
            *c = e.floor() as usize;
        }
        let mut order: Vec<usize> = (0..NUM_CLASSES).collect();
        order.sort_by(|&i, &j| {
            (exact[j] - exact[j].floor())
                .partial_cmp(&(exact[i] - exact[i].floor()))
                .unwrap()
                .then(i.cmp(&j))
        });
        let missing = total - counts.iter().sum::<usize>();
        for &i in order.iter().take(missing) {
            counts[i] += 1;
        }
        counts
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.class_counts.iter().any(|&c| c == 0) {
            return Err(DataError::Spec(format!(
                "class counts must be positive, got {:?}",
                self.class_counts
            )));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(DataError::Spec(format!("noise must be >= 0, got {}", self.noise)));
        }
        if self.group_size == 0 {
            return Err(DataError::Spec("group_size must be positive".into()));
        }
        Ok(())
    }
}

/// Rounds to the nearest `f32`, so that images survive the binary sidecar
/// format unchanged.
fn to_f32_precision(v: f64) -> f64 {
    v as f32 as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pattern {
    Horizontal,
    Vertical,
    Cross,
}

fn render_image(pattern: Pattern, offset: i64, noise: f64, rng: &mut impl Rng) -> Vec<f64> {
    let start = (IMAGE_SIDE as i64 / 2 - BAR_WIDTH as i64 / 2 + offset) as usize;
    let band = start..start + BAR_WIDTH;
    let mut img = Vec::with_capacity(IMAGE_PIXELS);
    for r in 0..IMAGE_SIDE {
        for c in 0..IMAGE_SIDE {
            let on = match pattern {
                Pattern::Horizontal => band.contains(&r),
                Pattern::Vertical => band.contains(&c),
                Pattern::Cross => band.contains(&r) || band.contains(&c),
            };
            let base = if on { FOREGROUND } else { BACKGROUND };
            let n: f64 = if noise > 0.0 {
                noise * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            img.push(to_f32_precision((base + n).clamp(0.0, 1.0)));
        }
    }
    img
}

fn perturb_image(image: &[f64], noise: f64, rng: &mut impl Rng) -> Vec<f64> {
    image
        .iter()
        .map(|&p| {
            let n: f64 = noise * rng.sample::<f64, _>(StandardNormal);
            to_f32_precision((p + n).clamp(0.0, 1.0))
        })
        .collect()
}

/// Generates a dataset with exactly `spec.class_counts` samples per grade.
/// Deterministic in `spec.seed`.
pub fn generate(spec: &GeneratorSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let signal: Vec<usize> = index::sample(&mut rng, CNV_FEATURES, SIGNAL_FEATURES).into_vec();
    let signs: Vec<f64> = signal
        .iter()
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();

    // (label, image pattern, gene level in {-1, 0, 1}, mutation status)
    let mut groups: Vec<(usize, Pattern, f64, f64, usize)> = Vec::new();
    for (label, &count) in spec.class_counts.iter().enumerate() {
        let n_groups = count.div_ceil(spec.group_size);
        for k in 0..n_groups {
            let size = spec.group_size.min(count - k * spec.group_size);
            let (pattern, level, mutation) = match spec.mode {
                InteractionMode::XorCrossModal => {
                    // (u, v): class 0 -> (0, 0), class 1 -> (1, 1),
                    // class 2 alternates between (1, 0) and (0, 1)
                    let (u, v) = match label {
                        0 => (false, false),
                        1 => (true, true),
                        _ => (k % 2 == 0, k % 2 == 1),
                    };
                    let pattern = if u { Pattern::Vertical } else { Pattern::Horizontal };
                    let level = if v { 1.0 } else { -1.0 };
                    (pattern, level, if v { 1.0 } else { 0.0 })
                }
                InteractionMode::UnimodalEasy => {
                    let pattern = [Pattern::Horizontal, Pattern::Vertical, Pattern::Cross][label];
                    (pattern, label as f64 - 1.0, if label == 2 { 1.0 } else { 0.0 })
                }
            };
            groups.push((label, pattern, level, mutation, size));
        }
    }
    groups.shuffle(&mut rng);

    let mut samples = Vec::with_capacity(spec.class_counts.iter().sum());
    for (gi, &(label, pattern, level, mutation, size)) in groups.iter().enumerate() {
        let group_id = format!("G{gi:05}");
        let mut genes = vec![0.0; GENE_FEATURES];
        if spec.noise > 0.0 {
            for g in genes.iter_mut().take(CNV_FEATURES) {
                *g = spec.noise * rng.sample::<f64, _>(StandardNormal);
            }
        }
        for (&j, &s) in signal.iter().zip(&signs) {
            genes[j] += s * level;
        }
        genes[CNV_FEATURES] = mutation;
        for r in 0..size {
            let offset = rng.random_range(-BAR_JITTER..=BAR_JITTER);
            samples.push(Sample {
                sample_id: format!("{group_id}-R{}", r + 1),
                group_id: group_id.clone(),
                genes: genes.clone(),
                image: render_image(pattern, offset, spec.noise, &mut rng),
                label,
            });
        }
    }
    Ok(Dataset::new(samples))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Dataset,
    pub test: Dataset,
    pub replicas: usize,
    pub seed: u64,
}

/// Parameters of [`split`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub test_fraction: f64,
    /// Test-time copies per held-out sample.
    pub replicas: usize,
    /// Pixel noise re-drawn independently for each copy when `replicas > 1`.
    pub replica_noise: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            replicas: 9,
            replica_noise: 0.05,
            seed: 0,
        }
    }
}

/// Group-aware random split. `round(groups * test_fraction)` whole groups
/// are held out; each held-out sample is replicated `replicas` times with
/// the genes and label copied and the image noise re-drawn.
pub fn split(data: &Dataset, spec: &SplitSpec) -> Result<DatasetSplit, DataError> {
    if !(spec.test_fraction > 0.0 && spec.test_fraction < 1.0) {
        return Err(DataError::Split(format!(
            "test_fraction must lie in (0, 1), got {}",
            spec.test_fraction
        )));
    }
    if spec.replicas == 0 {
        return Err(DataError::Split("replicas must be at least 1".into()));
    }
    let mut seen = HashSet::new();
    let mut groups: Vec<&str> = data
        .samples
        .iter()
        .map(|s| s.group_id.as_str())
        .filter(|g| seen.insert(*g))
        .collect();
    let n_test = (groups.len() as f64 * spec.test_fraction).round() as usize;
    if n_test == 0 || n_test >= groups.len() {
        return Err(DataError::Split(format!(
            "{} groups cannot be split with test_fraction {}",
            groups.len(),
            spec.test_fraction
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    groups.shuffle(&mut rng);
    let held_out: HashSet<&str> = groups[..n_test].iter().copied().collect();

    let (test_base, train): (Vec<&Sample>, Vec<&Sample>) = data
        .samples
        .iter()
        .partition(|s| held_out.contains(s.group_id.as_str()));
    let mut test = Vec::with_capacity(test_base.len() * spec.replicas);
    for s in test_base {
        if spec.replicas == 1 {
            test.push(s.clone());
            continue;
        }
        for k in 0..spec.replicas {
            test.push(Sample {
                sample_id: format!("{}#{}", s.sample_id, k + 1),
                image: perturb_image(&s.image, spec.replica_noise, &mut rng),
                ..s.clone()
            });
        }
    }
    Ok(DatasetSplit {
        train: Dataset::new(train.into_iter().cloned().collect()),
        test: Dataset::new(test),
        replicas: spec.replicas,
        seed: spec.seed,
    })
}

/// Path of the binary image sidecar that accompanies a dataset CSV.
pub fn images_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("bin")
}

fn csv_header() -> Vec<String> {
    let mut h = vec!["sample_id".to_string(), "group_id".into(), "grade".into()];
    h.extend((0..GENE_FEATURES).map(|j| format!("g{j}")));
    h
}

/// Writes `csv_path` (ids, grade and genes) and its image sidecar
/// ([`images_path`]): magic `MOAB`, then little-endian `u32` count, height
/// and width, then row-major little-endian `f32` pixels per image.
pub fn save_csv(data: &Dataset, csv_path: &Path) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(csv_path).map_err(|e| csv_error(csv_path, e))?;
    w.write_record(csv_header()).map_err(|e| csv_error(csv_path, e))?;
    for s in &data.samples {
        let mut rec = vec![s.sample_id.clone(), s.group_id.clone(), s.label.to_string()];
        rec.extend(s.genes.iter().map(|g| g.to_string()));
        w.write_record(&rec).map_err(|e| csv_error(csv_path, e))?;
    }
    w.flush().map_err(io_err(csv_path))?;

    let img_path = images_path(csv_path);
    let mut out = BufWriter::new(File::create(&img_path).map_err(io_err(&img_path))?);
    let mut header = Vec::with_capacity(16);
    header.extend_from_slice(IMAGE_MAGIC);
    for v in [data.len(), IMAGE_SIDE, IMAGE_SIDE] {
        header.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.write_all(&header).map_err(io_err(&img_path))?;
    for s in &data.samples {
        let bytes: Vec<u8> = s.image.iter().flat_map(|&p| (p as f32).to_le_bytes()).collect();
        out.write_all(&bytes).map_err(io_err(&img_path))?;
    }
    out.flush().map_err(io_err(&img_path))
}

fn csv_error(path: &Path, e: csv::Error) -> DataError {
    let location = e
        .position()
        .map(|p| format!("line {}", p.line()))
        .unwrap_or_else(|| "-".into());
    match e.into_kind() {
        csv::ErrorKind::Io(source) => DataError::Io {
            path: path.to_path_buf(),
            source,
        },
        kind => format_err(path, location, format!("{kind:?}")),
    }
}

/// Reads a dataset written by [`save_csv`].
pub fn load_csv(csv_path: &Path) -> Result<Dataset, DataError> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(csv_path)
        .map_err(|e| csv_error(csv_path, e))?;
    let header = r.headers().map_err(|e| csv_error(csv_path, e))?.clone();
    let gene_cols = header.len().saturating_sub(3);
    if gene_cols != GENE_FEATURES {
        return Err(format_err(
            csv_path,
            "line 1",
            format!("expected {GENE_FEATURES} gene columns, found {gene_cols}"),
        ));
    }
    let expected = csv_header();
    if let Some((got, want)) = header.iter().zip(&expected).find(|(g, w)| g != w) {
        return Err(format_err(
            csv_path,
            "line 1",
            format!("unexpected header column {got:?}, expected {want:?}"),
        ));
    }

    let mut samples = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_error(csv_path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let loc = format!("line {line}");
        if rec.len() != expected.len() {
            return Err(format_err(
                csv_path,
                loc,
                format!("expected {} fields, found {}", expected.len(), rec.len()),
            ));
        }
        let label: usize = rec[2]
            .parse()
            .ok()
            .filter(|&l| l < NUM_CLASSES)
            .ok_or_else(|| format_err(csv_path, &loc, format!("invalid grade {:?}", &rec[2])))?;
        let genes = rec
            .iter()
            .skip(3)
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| format_err(csv_path, &loc, format!("invalid gene value {f:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        samples.push(Sample {
            sample_id: rec[0].to_string(),
            group_id: rec[1].to_string(),
            genes,
            image: Vec::new(),
            label,
        });
    }

    let img_path = images_path(csv_path);
    let images = read_images(&img_path)?;
    if images.len() != samples.len() {
        return Err(format_err(
            &img_path,
            "offset 4",
            format!("image count {} does not match {} CSV rows", images.len(), samples.len()),
        ));
    }
    for (s, img) in samples.iter_mut().zip(images) {
        s.image = img;
    }
    Ok(Dataset::new(samples))
}

fn read_images(path: &Path) -> Result<Vec<Vec<f64>>, DataError> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(io_err(path))?)
        .read_to_end(&mut bytes)
        .map_err(io_err(path))?;
    if bytes.len() < 16 {
        return Err(format_err(path, "offset 0", "truncated header"));
    }
    if &bytes[..4] != IMAGE_MAGIC {
        return Err(format_err(path, "offset 0", "bad magic, expected \"MOAB\""));
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (count, h, w) = (word(4), word(8), word(12));
    if h != IMAGE_SIDE || w != IMAGE_SIDE {
        return Err(format_err(
            path,
            "offset 8",
            format!("expected {IMAGE_SIDE}x{IMAGE_SIDE} images, found {h}x{w}"),
        ));
    }
    let need = 16 + count * h * w * 4;
    if bytes.len() != need {
        return Err(format_err(
            path,
            format!("offset {}", bytes.len().min(need)),
            format!("expected {need} bytes for {count} images, found {}", bytes.len()),
        ));
    }
    Ok(bytes[16..]
        .chunks_exact(h * w * 4)
        .map(|img| {
            img.chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect()
        })
        .collect())
}

/// One mini-batch in model-ready layout.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[batch, 1, 32, 32]`
    pub images: Tensor,
    /// `[batch, 80]`
    pub genes: Tensor,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
}

impl Batch {
    pub fn from_samples(samples: &[&Sample]) -> Self {
        let n = samples.len();
        let images = samples.iter().flat_map(|s| s.image.iter().copied()).collect();
        let genes = samples.iter().flat_map(|s| s.genes.iter().copied()).collect();
        Self {
            images: Tensor::new(&[n, 1, IMAGE_SIDE, IMAGE_SIDE], images).expect("image batch"),
            genes: Tensor::new(&[n, GENE_FEATURES], genes).expect("gene batch"),
            labels: samples.iter().map(|s| s.label).collect(),
            ids: samples.iter().map(|s| s.sample_id.clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Iterator over the mini-batches of one epoch.
pub struct Batches<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let picked: Vec<&Sample> = self.order[self.pos..end]
            .iter()
            .map(|&i| &self.data.samples[i])
            .collect();
        self.pos = end;
        Some(Batch::from_samples(&picked))
    }
}

/// Splits `data` into batches of `batch_size`, keeping the final partial
/// batch. With `shuffle` the order is a seeded permutation.
pub fn batches(data: &Dataset, batch_size: usize, shuffle: bool, seed: u64) -> Batches<'_> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..data.len()).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Batches {
        data,
        order,
        batch_size,
        pos: 0,
    }
}

/// Counts distinct gene vectors by label; used by probes and diagnostics.
pub fn gene_table(data: &Dataset) -> HashMap<Vec<u64>, [usize; NUM_CLASSES]> {
    let mut table: HashMap<Vec<u64>, [usize; NUM_CLASSES]> = HashMap::new();
    for s in &data.samples {
        let key = s.genes.iter().map(|g| g.to_bits()).collect();
        table.entry(key).or_default()[s.label] += 1;
    }
    table
}
