//! Synthetic domain-shift generators, CSV ingestion, and batch sampling.
//!
//! A benchmark *task* is a pair of datasets: a labeled source domain and a
//! target domain whose labels exist but are withheld from training. The
//! generators here draw both domains from the same base distribution and then
//! transform the target draw (rotation, translation, additive noise), so the
//! amount of shift is a controlled experimental knob rather than an accident
//! of the data.

use crate::error::{Error, Result};
use crate::linalg;
use crate::ndgraph::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Jitter applied to both moon arcs.
pub const MOON_JITTER: f64 = 0.1;
/// Class means of the blob generator sit on a circle of this radius.
pub const BLOB_RADIUS: f64 = 3.0;
/// Isotropic standard deviation of each blob.
pub const BLOB_STD: f64 = 0.75;

// Per-role salts XORed into the user seed so the two domain draws and the
// noise pass are independent streams of one reproducible experiment.
const SOURCE_SALT: u64 = 0x9e37_79b9_7f4a_7c15;
const TARGET_SALT: u64 = 0xc2b2_ae3d_27d4_eb4f;
const NOISE_SALT: u64 = 0x1656_67b1_9e37_79f9;

/// Base distribution for synthetic tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseShape {
    TwoMoons,
    GaussianBlobs,
}

/// Full description of a synthetic source/target pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSpec {
    pub base: BaseShape,
    pub n_per_domain: usize,
    #[serde(default)]
    pub rotation_deg: f64,
    /// Per-coordinate offset added to target features; empty means none.
    #[serde(default)]
    pub translation: Vec<f64>,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default = "default_class_count")]
    pub class_count: usize,
    pub seed: u64,
}

fn default_class_count() -> usize {
    2
}

/// A feature dataset with optional labels and a provenance tag.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Option<Vec<usize>>,
    pub domain_tag: String,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(
        features: Tensor,
        labels: Option<Vec<usize>>,
        domain_tag: impl Into<String>,
        class_count: usize,
    ) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::Contract("dataset needs at least one row".into()));
        }
        if !features.all_finite() {
            return Err(Error::Contract("dataset features must be finite".into()));
        }
        if let Some(ls) = &labels {
            if ls.len() != features.rows() {
                return Err(Error::Contract(format!(
                    "{} labels for {} rows",
                    ls.len(),
                    features.rows()
                )));
            }
            if let Some(&bad) = ls.iter().find(|&&l| l >= class_count) {
                return Err(Error::Contract(format!(
                    "label {bad} outside [0, {class_count})"
                )));
            }
        }
        Ok(Dataset {
            features,
            labels,
            domain_tag: domain_tag.into(),
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Labels, or a contract error naming the domain when absent.
    pub fn labels_required(&self) -> Result<&[usize]> {
        self.labels.as_deref().ok_or_else(|| {
            Error::Contract(format!("domain '{}' carries no labels", self.domain_tag))
        })
    }
}

/// One training batch: `B` labeled source rows, `B` unlabeled target rows,
/// and the domain-flag vector `z` (B ones, then B zeros). When the evaluation
/// protocol reveals a fraction of target labels, the revealed ones appear in
/// `yt_labeled` as `(row index into xt, label)` pairs.
#[derive(Clone, Debug)]
pub struct BatchPair {
    pub xs: Tensor,
    pub ys: Vec<usize>,
    pub xt: Tensor,
    pub z: Vec<f64>,
    pub yt_labeled: Option<Vec<(usize, usize)>>,
}

impl BatchPair {
    pub fn batch_size(&self) -> usize {
        self.xs.rows()
    }
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    (0..n)
        .map(|i| a + (b - a) * i as f64 / (n - 1) as f64)
        .collect()
}

fn two_moons(n: usize, rng: &mut ChaCha8Rng) -> (Tensor, Vec<usize>) {
    let n_outer = n.div_ceil(2);
    let n_inner = n - n_outer;
    let jitter = Normal::new(0.0, MOON_JITTER).expect("constant sigma");
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for t in linspace(0.0, std::f64::consts::PI, n_outer) {
        rows.push(vec![t.cos(), t.sin()]);
        labels.push(0);
    }
    for t in linspace(0.0, std::f64::consts::PI, n_inner) {
        rows.push(vec![1.0 - t.cos(), 0.5 - t.sin()]);
        labels.push(1);
    }
    let mut features = Tensor::from_rows(&rows).expect("rectangular rows");
    for v in features.data_mut() {
        *v += jitter.sample(rng);
    }
    (features, labels)
}

fn gaussian_blobs(n: usize, class_count: usize, rng: &mut ChaCha8Rng) -> (Tensor, Vec<usize>) {
    let spread = Normal::new(0.0, BLOB_STD).expect("constant sigma");
    let mut features = Tensor::zeros(n, 2);
    let mut labels = Vec::with_capacity(n);
    let mut row = 0;
    for c in 0..class_count {
        let count = n / class_count + usize::from(c < n % class_count);
        let angle = 2.0 * std::f64::consts::PI * c as f64 / class_count as f64;
        let (cx, cy) = (BLOB_RADIUS * angle.cos(), BLOB_RADIUS * angle.sin());
        for _ in 0..count {
            features[(row, 0)] = cx + spread.sample(rng);
            features[(row, 1)] = cy + spread.sample(rng);
            labels.push(c);
            row += 1;
        }
    }
    (features, labels)
}

fn generate_base(spec: &ShiftSpec, seed: u64, tag: &str) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (features, labels) = match spec.base {
        BaseShape::TwoMoons => {
            if spec.class_count != 2 {
                return Err(Error::Config(format!(
                    "two_moons is a 2-class shape, got class_count {}",
                    spec.class_count
                )));
            }
            two_moons(spec.n_per_domain, &mut rng)
        }
        BaseShape::GaussianBlobs => gaussian_blobs(spec.n_per_domain, spec.class_count, &mut rng),
    };
    Dataset::new(features, Some(labels), tag, spec.class_count)
}

/// Generates a labeled source domain and a shifted labeled target domain
/// (target labels are meant to be held out for evaluation). The target draw
/// comes from the same base distribution under an independent seed, then is
/// rotated about the origin, translated, and perturbed with Gaussian noise,
/// in that order. Pure in `spec`: calling twice gives bitwise-equal datasets.
pub fn make_shift_pair(spec: &ShiftSpec) -> Result<(Dataset, Dataset)> {
    if spec.n_per_domain == 0 {
        return Err(Error::Config("n_per_domain must be at least 1".into()));
    }
    if spec.class_count < 2 {
        return Err(Error::Config(format!(
            "class_count must be at least 2, got {}",
            spec.class_count
        )));
    }
    if spec.noise_sigma < 0.0 {
        return Err(Error::Config(format!(
            "noise_sigma must be non-negative, got {}",
            spec.noise_sigma
        )));
    }

    let source = generate_base(spec, spec.seed ^ SOURCE_SALT, "source")?;
    let mut target = generate_base(spec, spec.seed ^ TARGET_SALT, "target")?;

    if spec.rotation_deg != 0.0 {
        let theta = spec.rotation_deg.to_radians();
        let (sin, cos) = theta.sin_cos();
        for r in 0..target.features.rows() {
            let x = target.features[(r, 0)];
            let y = target.features[(r, 1)];
            target.features[(r, 0)] = cos * x - sin * y;
            target.features[(r, 1)] = sin * x + cos * y;
        }
    }
    if !spec.translation.is_empty() {
        if spec.translation.len() != target.dim() {
            return Err(Error::Config(format!(
                "translation has {} entries for {}-dimensional features",
                spec.translation.len(),
                target.dim()
            )));
        }
        for r in 0..target.features.rows() {
            for (c, t) in spec.translation.iter().enumerate() {
                target.features[(r, c)] += t;
            }
        }
    }
    let target = add_gaussian_noise(&target, spec.noise_sigma, spec.seed ^ NOISE_SALT)?;
    Ok((source, target))
}

/// Adds i.i.d. `N(0, sigma^2)` noise to every feature; labels and tags are
/// untouched. `sigma = 0` returns a bitwise-equal clone without consuming any
/// randomness.
pub fn add_gaussian_noise(d: &Dataset, sigma: f64, seed: u64) -> Result<Dataset> {
    if sigma < 0.0 {
        return Err(Error::Config(format!(
            "noise sigma must be non-negative, got {sigma}"
        )));
    }
    let mut out = d.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
    for v in out.features.data_mut() {
        *v += noise.sample(&mut rng);
    }
    Ok(out)
}

/// Loads a feature dataset from a headered CSV file. All columns except the
/// optional label column are parsed as f64 features in header order.
pub fn load_csv(
    path: impl AsRef<Path>,
    label_column: Option<&str>,
    class_count: usize,
) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?
        .clone();

    let label_idx = match label_column {
        Some(name) => Some(
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "label column '{name}' not found in {}; header has [{}]",
                        path.display(),
                        headers.iter().collect::<Vec<_>>().join(", ")
                    ))
                })?,
        ),
        None => None,
    };

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let mut row = Vec::with_capacity(headers.len().saturating_sub(1));
        for (c, cell) in record.iter().enumerate() {
            if Some(c) == label_idx {
                let label: usize = cell.trim().parse().map_err(|_| {
                    Error::Parse(format!(
                        "row {}, column '{}': label '{}' is not a non-negative integer",
                        r + 2,
                        headers.get(c).unwrap_or(""),
                        cell
                    ))
                })?;
                if label >= class_count {
                    return Err(Error::Contract(format!(
                        "row {}: label {} outside [0, {})",
                        r + 2,
                        label,
                        class_count
                    )));
                }
                labels.push(label);
            } else {
                let value: f64 = cell.trim().parse().map_err(|_| {
                    Error::Parse(format!(
                        "row {}, column '{}': '{}' is not numeric",
                        r + 2,
                        headers.get(c).unwrap_or(""),
                        cell
                    ))
                })?;
                row.push(value);
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Contract(format!(
            "{} holds no data rows",
            path.display()
        )));
    }

    let features = Tensor::from_rows(&rows)?;
    let tag = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("csv")
        .to_string();
    Dataset::new(features, label_idx.map(|_| labels), tag, class_count)
}

/// Writes a dataset as CSV with header `f0..f{d-1}[,label]`. Features are
/// written with 17 significant digits so a round-trip through [`load_csv`]
/// reproduces them exactly.
pub fn save_csv(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    let dim = d.dim();
    let mut header: Vec<String> = (0..dim).map(|c| format!("f{c}")).collect();
    if d.labels.is_some() {
        header.push("label".into());
    }
    writer.write_record(&header)?;
    for r in 0..d.len() {
        let mut record: Vec<String> = d.features.row(r).iter().map(|v| format!("{v:.16e}")).collect();
        if let Some(ls) = &d.labels {
            record.push(ls[r].to_string());
        }
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

fn draw_indices(n: usize, b: usize, rng: &mut impl Rng) -> Vec<usize> {
    if n >= b {
        rand::seq::index::sample(rng, n, b).into_vec()
    } else {
        (0..b).map(|_| rng.random_range(0..n)).collect()
    }
}

fn assemble_batch(
    source: &Dataset,
    target: &Dataset,
    b: usize,
    revealed: Option<&[bool]>,
    rng: &mut impl Rng,
) -> Result<BatchPair> {
    if b == 0 {
        return Err(Error::Contract("batch size must be at least 1".into()));
    }
    let ys_all = source.labels_required()?;
    let src_idx = draw_indices(source.len(), b, rng);
    let tgt_idx = draw_indices(target.len(), b, rng);

    let xs = source.features.gather_rows(&src_idx)?;
    let xt = target.features.gather_rows(&tgt_idx)?;
    let ys: Vec<usize> = src_idx.iter().map(|&i| ys_all[i]).collect();
    let mut z = vec![1.0; b];
    z.extend(std::iter::repeat_n(0.0, b));

    let yt_labeled = match revealed {
        None => None,
        Some(mask) => {
            if mask.len() != target.len() {
                return Err(Error::Contract(format!(
                    "revealed mask covers {} rows, target has {}",
                    mask.len(),
                    target.len()
                )));
            }
            let yt_all = target.labels_required()?;
            Some(
                tgt_idx
                    .iter()
                    .enumerate()
                    .filter(|&(_, &i)| mask[i])
                    .map(|(pos, &i)| (pos, yt_all[i]))
                    .collect(),
            )
        }
    };

    Ok(BatchPair {
        xs,
        ys,
        xt,
        z,
        yt_labeled,
    })
}

/// Draws `B` source rows and `B` target rows uniformly (without replacement
/// when the domain is large enough, with replacement otherwise) and assembles
/// the `2B` domain-flag vector as `B` ones followed by `B` zeros.
pub fn sample_balanced_batch(
    source: &Dataset,
    target: &Dataset,
    b: usize,
    rng: &mut impl Rng,
) -> Result<BatchPair> {
    assemble_batch(source, target, b, None, rng)
}

/// [`sample_balanced_batch`] for the supervised-fraction protocol: target rows
/// flagged in `revealed` surface their labels through `yt_labeled`. Consumes
/// randomness identically to the unrevealed sampler, so trajectories with an
/// all-false mask match label-free runs draw for draw.
pub fn sample_balanced_batch_revealed(
    source: &Dataset,
    target: &Dataset,
    revealed: &[bool],
    b: usize,
    rng: &mut impl Rng,
) -> Result<BatchPair> {
    assemble_batch(source, target, b, Some(revealed), rng)
}

/// Projects mean-centered features onto their top-2 principal components.
/// Component signs follow the convention of [`linalg::svd`]: the dominant
/// loading of each component is positive. One-dimensional inputs get a zero
/// second component.
pub fn pca2(features: &Tensor) -> Result<Tensor> {
    let (n, d) = features.shape();
    if n < 2 {
        return Err(Error::Contract(
            "pca2 needs at least two rows to estimate a covariance".into(),
        ));
    }
    let mut centered = features.clone();
    let means = features.col_sums().scale(1.0 / n as f64);
    for r in 0..n {
        for c in 0..d {
            centered[(r, c)] -= means[(0, c)];
        }
    }
    let cov = centered
        .transposed()
        .matmul(&centered)?
        .scale(1.0 / (n - 1) as f64);
    let svd = linalg::svd(&cov)?;

    let k = d.min(2);
    let mut components = Tensor::zeros(d, k);
    for r in 0..d {
        for c in 0..k {
            components[(r, c)] = svd.v[(r, c)];
        }
    }
    let projected = centered.matmul(&components)?;
    let mut out = Tensor::zeros(n, 2);
    for r in 0..n {
        for c in 0..k {
            out[(r, c)] = projected[(r, c)];
        }
    }
    Ok(out)
}
