//! Synthetic complementary-cue datasets, verification trial lists and their
//! file formats.
//!
//! A complementary-cue dataset has several *cue groups*: disjoint blocks of
//! features in which every class has its own centroid. Each group on its own
//! is enough to classify, so a model that latches onto the most separable
//! group can ignore the others. Pure-noise features are appended at the end.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CueGroup {
    pub dims: usize,
    pub separation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComplementaryCueSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub groups: Vec<CueGroup>,
    pub noise_dims: usize,
    #[serde(default = "one")]
    pub noise_sigma: f64,
    /// Generation seed; the CLI fills it from the run seed when omitted.
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl ComplementaryCueSpec {
    /// Eight classes, a salient group (12 dims, separation 7), a weaker
    /// complementary group (12 dims, separation 5) and 16 noise dims.
    pub fn canonical(seed: u64) -> Self {
        ComplementaryCueSpec {
            num_classes: 8,
            samples_per_class: 600,
            groups: vec![
                CueGroup { dims: 12, separation: 7.0 },
                CueGroup { dims: 12, separation: 5.0 },
            ],
            noise_dims: 16,
            noise_sigma: 1.0,
            seed,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.groups.iter().map(|g| g.dims).sum::<usize>() + self.noise_dims
    }

    /// Column range of each cue group.
    pub fn group_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut start = 0;
        self.groups
            .iter()
            .map(|g| {
                let r = start..start + g.dims;
                start += g.dims;
                r
            })
            .collect()
    }

    /// Minimum pairwise centroid distance enforced within a group.
    ///
    /// `C` points on a sphere of radius `sep/2` can be at most
    /// `sep·sqrt(C / (2(C-1)))` apart pairwise (regular simplex), so the
    /// rejection threshold is 0.8 of that bound. For two classes it is `0.8·sep`.
    pub fn min_centroid_distance(&self, separation: f64) -> f64 {
        let c = self.num_classes as f64;
        0.8 * separation * (c / (2.0 * (c - 1.0))).sqrt().min(1.0)
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.samples_per_class == 0 {
            return Err(Error::config("need at least two classes and one sample per class"));
        }
        if self.groups.iter().any(|g| g.dims == 0 || !(g.separation >= 0.0)) {
            return Err(Error::config("cue groups need positive dims and separation >= 0"));
        }
        if self.input_dim() == 0 || !(self.noise_sigma >= 0.0) {
            return Err(Error::config("dataset has no features or a negative noise sigma"));
        }
        Ok(())
    }
}

/// Features (row-major `N × dim`) with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub dim: usize,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize) -> Result<Self> {
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(Error::Data(format!(
                "{} feature values do not form {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        let num_classes = labels.iter().max().map_or(0, |m| m + 1);
        Ok(Dataset {
            features,
            labels,
            dim,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows `indices` as a `len × dim` tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Tensor::matrix(indices.len(), self.dim, data).expect("non-empty batch")
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// New dataset holding only `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        Dataset {
            features,
            labels: self.labels_of(indices),
            dim: self.dim,
            num_classes: self.num_classes,
        }
    }

    /// Feature-wise mean over `indices`.
    pub fn feature_mean(&self, indices: &[usize]) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim];
        for &i in indices {
            mean.iter_mut().zip(self.row(i)).for_each(|(m, x)| *m += x);
        }
        let n = indices.len().max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub input_dim: usize,
    /// Held-out accuracy of a nearest-centroid classifier restricted to
    /// each cue group.
    pub group_oracle_accuracy: Vec<f64>,
    pub centroid_attempts: usize,
}

const MAX_CENTROID_ATTEMPTS: usize = 100_000;

pub fn gen_complementary_classes(spec: &ComplementaryCueSpec) -> Result<(Dataset, GenerationReport)> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let c = spec.num_classes;
    let mut attempts = 0usize;
    let mut centroids: Vec<Vec<Vec<f64>>> = Vec::with_capacity(spec.groups.len());
    for group in &spec.groups {
        let radius = group.separation / 2.0;
        let min_dist = spec.min_centroid_distance(group.separation);
        let mut placed: Vec<Vec<f64>> = Vec::with_capacity(c);
        let mut stalled = 0usize;
        while placed.len() < c {
            attempts += 1;
            if attempts > MAX_CENTROID_ATTEMPTS {
                return Err(Error::config(format!(
                    "could not place {c} centroids {min_dist:.3} apart on a {}-dim sphere of radius {radius}",
                    group.dims
                )));
            }
            let candidate = random_on_sphere(&mut rng, group.dims, radius);
            if placed.iter().all(|p| distance(p, &candidate) >= min_dist) {
                placed.push(candidate);
                stalled = 0;
            } else {
                stalled += 1;
                // greedy placement can paint itself into a corner; start over
                if stalled >= 1_000 {
                    placed.clear();
                    stalled = 0;
                }
            }
        }
        centroids.push(placed);
    }

    let n = spec.samples_per_class;
    let dim = spec.input_dim();
    let mut features = Vec::with_capacity(c * n * dim);
    let mut labels = Vec::with_capacity(c * n);
    for class in 0..c {
        for _ in 0..n {
            for group in &centroids {
                for &mu in &group[class] {
                    features.push(mu + rng.normal());
                }
            }
            for _ in 0..spec.noise_dims {
                features.push(spec.noise_sigma * rng.normal());
            }
            labels.push(class);
        }
    }
    let dataset = Dataset {
        features,
        labels,
        dim,
        num_classes: c,
    };
    let group_oracle_accuracy = spec
        .group_ranges()
        .into_iter()
        .map(|range| nearest_centroid_oracle(&dataset, range))
        .collect();
    Ok((
        dataset,
        GenerationReport {
            input_dim: dim,
            group_oracle_accuracy,
            centroid_attempts: attempts,
        },
    ))
}

fn random_on_sphere(rng: &mut Rng, dims: usize, radius: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dims).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| radius * x / norm).collect();
        }
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Nearest-centroid accuracy using only `cols`: centroids are fitted on the
/// even-indexed samples and scored on the odd-indexed ones.
pub fn nearest_centroid_oracle(data: &Dataset, cols: std::ops::Range<usize>) -> f64 {
    let width = cols.len();
    let mut sums = vec![vec![0.0; width]; data.num_classes];
    let mut counts = vec![0usize; data.num_classes];
    for i in (0..data.len()).step_by(2) {
        let y = data.labels[i];
        counts[y] += 1;
        sums[y].iter_mut().zip(&data.row(i)[cols.clone()]).for_each(|(s, x)| *s += x);
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|v| *v /= n.max(1) as f64);
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for i in (1..data.len()).step_by(2) {
        let x = &data.row(i)[cols.clone()];
        let best = (0..data.num_classes)
            .min_by(|&a, &b| distance(&sums[a], x).total_cmp(&distance(&sums[b], x)))
            .unwrap_or(0);
        correct += usize::from(best == data.labels[i]);
        total += 1;
    }
    correct as f64 / total.max(1) as f64
}

/// Train / evaluation / calibration row indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
    pub calibration: Vec<usize>,
}

/// Deterministic 70/20/10 split of `n` rows by a seeded shuffle.
pub fn split(n: usize, seed: u64) -> Splits {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::for_component(seed, "split").shuffle(&mut order);
    let n_train = n * 7 / 10;
    let n_eval = n * 2 / 10;
    Splits {
        train: order[..n_train].to_vec(),
        eval: order[n_train..n_train + n_eval].to_vec(),
        calibration: order[n_train + n_eval..].to_vec(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Trial {
    pub genuine: bool,
    pub enroll: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

impl TrialList {
    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn genuine_mask(&self) -> Vec<bool> {
        self.trials.iter().map(|t| t.genuine).collect()
    }

    /// Replace every id by `ids[id]`, e.g. to turn split positions into
    /// dataset row indices.
    pub fn remap(&self, ids: &[usize]) -> TrialList {
        TrialList {
            trials: self
                .trials
                .iter()
                .map(|t| Trial {
                    genuine: t.genuine,
                    enroll: ids[t.enroll],
                    test: ids[t.test],
                })
                .collect(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(self.trials.len() * 16);
        for t in &self.trials {
            let _ = writeln!(out, "{} {} {}", u8::from(t.genuine), t.enroll, t.test);
        }
        write_file(path, &out)
    }

    pub fn read(path: &Path) -> Result<TrialList> {
        let text = read_text(path)?;
        let mut trials = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |detail: &str| Error::Parse {
                line: i + 1,
                detail: detail.to_string(),
            };
            let fields: Vec<&str> = line.split(' ').collect();
            if fields.len() != 3 {
                return Err(bad("expected `g enroll_id test_id`"));
            }
            let genuine = match fields[0] {
                "1" => true,
                "0" => false,
                _ => return Err(bad("label must be 0 or 1")),
            };
            let enroll = fields[1].parse().map_err(|_| bad("bad enroll id"))?;
            let test = fields[2].parse().map_err(|_| bad("bad test id"))?;
            trials.push(Trial { genuine, enroll, test });
        }
        Ok(TrialList { trials })
    }

    /// Check that every id indexes into a dataset of `n` rows and both
    /// classes are present.
    pub fn validate(&self, n: usize) -> Result<()> {
        if let Some(t) = self.trials.iter().find(|t| t.enroll >= n || t.test >= n) {
            return Err(Error::Data(format!("trial {t:?} references a row beyond {n}")));
        }
        let genuine = self.trials.iter().filter(|t| t.genuine).count();
        if genuine == 0 || genuine == self.trials.len() {
            return Err(Error::Data("trial list needs genuine and impostor trials".into()));
        }
        Ok(())
    }
}

/// `k` distinct values from `0..population`, uniformly, in ascending order
/// (Floyd's algorithm).
fn sample_distinct(rng: &mut Rng, population: u128, k: usize) -> Vec<u128> {
    let mut chosen = BTreeSet::new();
    let k = k as u128;
    for j in population - k..population {
        let t = (rng.next_u64() as u128 * (j + 1)) >> 64;
        let t = if population > u64::MAX as u128 { t.min(j) } else { t };
        if !chosen.insert(t) {
            chosen.insert(j);
        }
    }
    chosen.into_iter().collect()
}

/// Sample genuine (same-class) and impostor (cross-class) pairs uniformly
/// without replacement. Ids index into `labels`.
pub fn gen_trial_list(
    labels: &[usize],
    genuine_per_class: usize,
    impostor_total: usize,
    seed: u64,
) -> Result<TrialList> {
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        members[y].push(i);
    }
    if let Some(c) = members.iter().position(|m| m.len() < 2) {
        return Err(Error::config(format!("class {c} has fewer than two samples")));
    }
    let mut rng = Rng::new(seed);
    let mut trials = Vec::with_capacity(num_classes * genuine_per_class + impostor_total);
    for class in &members {
        let n = class.len() as u128;
        let available = n * (n - 1) / 2;
        if genuine_per_class as u128 > available {
            return Err(Error::config(format!(
                "{genuine_per_class} genuine pairs requested but a class of {n} offers {available}"
            )));
        }
        for index in sample_distinct(&mut rng, available, genuine_per_class) {
            let (a, b) = triangular_pair(index, class.len());
            trials.push(Trial {
                genuine: true,
                enroll: class[a],
                test: class[b],
            });
        }
    }

    // cross-class pairs (i < j) enumerated row by row: prefix[i] counts the
    // pairs whose first element is before i
    let n = labels.len();
    let mut later_same = vec![0usize; num_classes];
    let mut per_row = vec![0u128; n];
    for i in (0..n).rev() {
        per_row[i] = ((n - 1 - i) - later_same[labels[i]]) as u128;
        later_same[labels[i]] += 1;
    }
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0u128);
    for &c in &per_row {
        prefix.push(prefix.last().unwrap() + c);
    }
    let available = *prefix.last().unwrap();
    if impostor_total as u128 > available {
        return Err(Error::config(format!(
            "{impostor_total} impostor pairs requested but only {available} exist"
        )));
    }
    for index in sample_distinct(&mut rng, available, impostor_total) {
        let i = prefix.partition_point(|&p| p <= index) - 1;
        let mut rank = index - prefix[i];
        let j = (i + 1..n)
            .filter(|&j| labels[j] != labels[i])
            .find(|_| {
                let hit = rank == 0;
                rank = rank.saturating_sub(1);
                hit
            })
            .expect("rank within row count");
        trials.push(Trial {
            genuine: false,
            enroll: i,
            test: j,
        });
    }
    Ok(TrialList { trials })
}

/// Decode the `index`-th pair `(a, b)`, `a < b < n`, in row-major order.
fn triangular_pair(index: u128, n: usize) -> (usize, usize) {
    let mut remaining = index;
    for a in 0..n {
        let row = (n - 1 - a) as u128;
        if remaining < row {
            return (a, a + 1 + remaining as usize);
        }
        remaining -= row;
    }
    unreachable!("index beyond the number of pairs")
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// CSV with header `label,f_0,...,f_{d-1}`; values use 17 significant digits.
pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    write_file(path, &encode_dataset(data))
}

pub fn encode_dataset(data: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.features.len() * 24);
    out.extend_from_slice(b"label");
    for j in 0..data.dim {
        let _ = write!(out, ",f_{j}");
    }
    out.push(b'\n');
    for i in 0..data.len() {
        let _ = write!(out, "{}", data.labels[i]);
        for x in data.row(i) {
            let _ = write!(out, ",{x:.16e}");
        }
        out.push(b'\n');
    }
    out
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(read_text(path)?.as_bytes())
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(bytes);
    let mut records = reader.records();
    let header = match records.next() {
        None => {
            return Err(Error::Parse {
                line: 1,
                detail: "no header".into(),
            })
        }
        Some(r) => r.map_err(|e| csv_error(&e, 1))?,
    };
    if header.get(0) != Some("label") || header.len() < 2 {
        return Err(Error::Parse {
            line: 1,
            detail: "header must start with `label` followed by feature columns".into(),
        });
    }
    let dim = header.len() - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for record in records {
        let record = record.map_err(|e| csv_error(&e, 0))?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != dim + 1 {
            return Err(Error::Parse {
                line,
                detail: format!("expected {} fields, found {}", dim + 1, record.len()),
            });
        }
        let label = record[0].trim().parse::<usize>().map_err(|_| Error::Parse {
            line,
            detail: format!("label `{}` is not a non-negative integer", &record[0]),
        })?;
        labels.push(label);
        for (j, cell) in record.iter().skip(1).enumerate() {
            let x = cell.trim().parse::<f64>().map_err(|_| Error::Parse {
                line,
                detail: format!("column f_{j}: `{cell}` is not a number"),
            })?;
            features.push(x);
        }
    }
    Dataset::new(features, labels, dim)
}

fn csv_error(e: &csv::Error, fallback_line: usize) -> Error {
    Error::Parse {
        line: e.position().map_or(fallback_line, |p| p.line() as usize),
        detail: e.to_string(),
    }
}
