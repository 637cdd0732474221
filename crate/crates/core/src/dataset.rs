//! Labeled datasets: CSV IO, synthetic blobs, per-class subsampling and
//! label-noise injection.
//!
//! Every random operation takes an explicit seed and draws from a
//! `ChaCha8Rng`, so results are identical across runs and platforms.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Feature matrix (one row per point) with contiguous integer labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    #[serde(with = "crate::linalg::row_major")]
    points: DMatrix<f64>,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(points: DMatrix<f64>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if points.nrows() == 0 || points.ncols() == 0 {
            return Err(Error::Data(format!(
                "dataset needs N >= 1 and D >= 1, got {}x{}",
                points.nrows(),
                points.ncols()
            )));
        }
        if labels.len() != points.nrows() {
            return Err(Error::DimensionMismatch {
                expected: points.nrows(),
                found: labels.len(),
            });
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset features"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::Data(format!("label {bad} outside [0, {class_count})")));
        }
        Ok(Self {
            points,
            labels,
            class_count,
        })
    }

    /// Builds a dataset from row vectors.
    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Data("ragged rows".into()));
        }
        let points = DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j]);
        Self::new(points, labels, class_count)
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn points(&self) -> &DMatrix<f64> {
        &self.points
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// Point `i` as an owned column vector.
    pub fn point(&self, i: usize) -> DVector<f64> {
        self.points.row(i).transpose()
    }

    /// Number of members of each class.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }

    /// Rows `idx` in the given order.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let points = DMatrix::from_fn(idx.len(), self.dim(), |r, c| self.points[(idx[r], c)]);
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Self::new(points, labels, self.class_count)
    }

    /// Same points, new labels.
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Self> {
        Self::new(self.points.clone(), labels, self.class_count)
    }

    pub fn with_points(&self, points: DMatrix<f64>) -> Result<Self> {
        Self::new(points, self.labels.clone(), self.class_count)
    }

    fn require_supervised(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::InvalidArgument(format!(
                "supervised operation needs at least 2 classes, got {}",
                self.class_count
            )));
        }
        Ok(())
    }
}

/// Reads a CSV file whose last column is an integer label.
///
/// Labels that already form the contiguous range `0..C` are kept as they
/// are; any other label set is renumbered in order of first appearance.
pub fn load_csv(path: impl AsRef<Path>, has_header: bool) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut raw_labels: Vec<i64> = Vec::new();
    let mut width = None;
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() < 2 {
            return Err(Error::Data(format!(
                "row {} has {} columns, need at least 2",
                line + 1,
                record.len()
            )));
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(Error::Data(format!(
                    "ragged rows: row {} has {} columns, expected {w}",
                    line + 1,
                    record.len()
                )))
            }
            _ => {}
        }
        let n = record.len();
        let features = record
            .iter()
            .take(n - 1)
            .map(|cell| {
                cell.parse::<f64>()
                    .map_err(|_| Error::Data(format!("row {}: non-numeric feature {cell:?}", line + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        let label_cell = &record[n - 1];
        let label = label_cell
            .parse::<i64>()
            .map_err(|_| Error::Data(format!("row {}: label {label_cell:?} is not an integer", line + 1)))?;
        rows.push(features);
        raw_labels.push(label);
    }
    if rows.is_empty() {
        return Err(Error::Data(format!("{} contains no data rows", path.display())));
    }
    let (labels, class_count) = contiguous_labels(&raw_labels);
    Dataset::from_rows(&rows, labels, class_count)
}

fn contiguous_labels(raw: &[i64]) -> (Vec<usize>, usize) {
    let distinct: BTreeSet<i64> = raw.iter().copied().collect();
    let count = distinct.len();
    let contiguous = distinct.first() == Some(&0) && distinct.last() == Some(&(count as i64 - 1));
    if contiguous {
        return (raw.iter().map(|&y| y as usize).collect(), count);
    }
    let mut map: BTreeMap<i64, usize> = BTreeMap::new();
    let labels = raw
        .iter()
        .map(|y| {
            let next = map.len();
            *map.entry(*y).or_insert(next)
        })
        .collect();
    (labels, count)
}

/// Writes the dataset in the format read by [`load_csv`] (no header).
///
/// Features use Rust's shortest round-trip float formatting, so
/// `load_csv(save_csv(ds))` reproduces every bit.
pub fn save_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = String::new();
    for i in 0..ds.len() {
        for j in 0..ds.dim() {
            out.push_str(&format!("{:?},", ds.points[(i, j)]));
        }
        out.push_str(&ds.labels[i].to_string());
        out.push('\n');
    }
    let mut file = File::create(path).map_err(io_err)?;
    file.write_all(out.as_bytes()).map_err(io_err)
}

/// `C` isotropic Gaussian clusters of `per_class` points each in `dim`
/// dimensions. Cluster centres are standard-normal draws; each point adds
/// `spread`-scaled standard-normal noise to its centre.
pub fn make_blobs(class_count: usize, per_class: usize, dim: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if class_count < 2 || per_class < 1 || dim < 1 {
        return Err(Error::InvalidArgument(format!(
            "make_blobs needs C >= 2, m >= 1, D >= 1 (got C={class_count}, m={per_class}, D={dim})"
        )));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::InvalidArgument(format!("spread must be >= 0, got {spread}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centres: Vec<Vec<f64>> = Vec::with_capacity(class_count);
    while centres.len() < class_count {
        let c: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let distinct = centres
            .iter()
            .all(|o| o.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>() > 1e-12);
        if distinct {
            centres.push(c);
        }
    }
    let n = class_count * per_class;
    let mut points = DMatrix::zeros(n, dim);
    let mut labels = Vec::with_capacity(n);
    for (class, centre) in centres.iter().enumerate() {
        for r in 0..per_class {
            let row = class * per_class + r;
            for (j, mu) in centre.iter().enumerate() {
                let z: f64 = StandardNormal.sample(&mut rng);
                points[(row, j)] = mu + spread * z;
            }
            labels.push(class);
        }
    }
    Dataset::new(points, labels, class_count)
}

/// Draws exactly `per_class` members of every class uniformly without
/// replacement. Output is grouped by class in ascending order.
pub fn subsample_per_class(ds: &Dataset, per_class: usize, seed: u64) -> Result<Dataset> {
    let (train, _) = split_per_class(ds, per_class, seed)?;
    ds.select(&train)
}

/// Splits indices into `per_class` members of each class and the rest.
///
/// The first returned list is grouped by class (ascending) in draw order;
/// the remainder is in ascending index order.
pub fn split_per_class(ds: &Dataset, per_class: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if per_class == 0 {
        return Err(Error::InvalidArgument("per_class must be >= 1".into()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.class_count];
    for (i, &y) in ds.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(per_class * ds.class_count);
    let mut taken = vec![false; ds.len()];
    for (class, members) in by_class.iter().enumerate() {
        if members.len() < per_class {
            return Err(Error::Data(format!(
                "class {class} has {} members, fewer than {per_class}",
                members.len()
            )));
        }
        for k in index::sample(&mut rng, members.len(), per_class) {
            chosen.push(members[k]);
            taken[members[k]] = true;
        }
    }
    let rest = (0..ds.len()).filter(|&i| !taken[i]).collect();
    Ok((chosen, rest))
}

/// Random symmetric label noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub level: f64,
    pub seed: u64,
}

/// Number of labels flipped for a noise level: `level * n` rounded half-up.
pub fn flip_count(level: f64, n: usize) -> usize {
    (level * n as f64 + 0.5).floor() as usize
}

/// Replaces `round(level * N)` distinct labels, chosen uniformly, with a
/// uniformly drawn different class. The input is left untouched.
pub fn inject_label_noise(ds: &Dataset, spec: NoiseSpec) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&spec.level) {
        return Err(Error::InvalidArgument(format!(
            "noise level must lie in [0, 1], got {}",
            spec.level
        )));
    }
    ds.require_supervised()?;
    let n = ds.len();
    let count = flip_count(spec.level, n).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut flipped: Vec<usize> = index::sample(&mut rng, n, count).into_vec();
    // Draw replacement classes in index order so the result does not depend
    // on the sampler's internal ordering.
    flipped.sort_unstable();
    let mut labels = ds.labels.clone();
    for i in flipped {
        let old = labels[i];
        let r = rng.random_range(0..ds.class_count - 1);
        labels[i] = if r >= old { r + 1 } else { r };
    }
    ds.with_labels(labels)
}

/// Per-feature z-scoring fitted on one dataset and applied to others.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(ds: &Dataset) -> Self {
        let n = ds.len() as f64;
        let mut mean = Vec::with_capacity(ds.dim());
        let mut scale = Vec::with_capacity(ds.dim());
        for j in 0..ds.dim() {
            let col = ds.points.column(j);
            let mu = col.sum() / n;
            let var = col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            mean.push(mu);
            // constant columns are only centred
            scale.push(if var > 0.0 { var.sqrt() } else { 1.0 });
        }
        Self { mean, scale }
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        crate::error::check_dim(self.mean.len(), ds.dim())?;
        let points = DMatrix::from_fn(ds.len(), ds.dim(), |i, j| {
            (ds.points[(i, j)] - self.mean[j]) / self.scale[j]
        });
        ds.with_points(points)
    }
}

/// Shuffles `0..n` deterministically.
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_three_rows() {
        let f = write_tmp("1,2,0\n3,4,1\n5,6,0\n");
        let ds = load_csv(f.path(), false).unwrap();
        assert_eq!((ds.len(), ds.dim(), ds.class_count()), (3, 2, 2));
        assert_eq!(ds.labels(), &[0, 1, 0]);
        assert_eq!(ds.points()[(2, 1)], 6.0);
    }

    #[test]
    fn load_with_header() {
        let f = write_tmp("a,b,y\n1,2,0\n3,4,1\n");
        let ds = load_csv(f.path(), true).unwrap();
        assert_eq!(ds.len(), 2);
    }

    #[test]
    fn empty_file_is_an_error() {
        let f = write_tmp("");
        assert!(matches!(load_csv(f.path(), false), Err(Error::Data(_))));
    }

    #[test]
    fn sparse_labels_are_relabeled() {
        let f = write_tmp("0.5,7\n1.5,3\n2.5,7\n");
        let ds = load_csv(f.path(), false).unwrap();
        assert_eq!(ds.class_count(), 2);
        assert_eq!(ds.labels(), &[0, 1, 0]);
    }

    #[test]
    fn contiguous_labels_are_kept() {
        let f = write_tmp("0.5,1\n1.5,0\n2.5,1\n");
        let ds = load_csv(f.path(), false).unwrap();
        assert_eq!(ds.labels(), &[1, 0, 1]);
    }

    #[test]
    fn malformed_csv_errors() {
        assert!(load_csv(write_tmp("1,2,0\n3,1\n").path(), false).is_err());
        assert!(load_csv(write_tmp("1,x,0\n").path(), false).is_err());
        assert!(load_csv(write_tmp("1\n2\n").path(), false).is_err());
        assert!(load_csv(write_tmp("1,2,0.5\n").path(), false).is_err());
        assert!(load_csv("/nonexistent/file.csv", false).is_err());
    }

    #[test]
    fn blobs_are_balanced_and_deterministic() {
        let a = make_blobs(2, 5, 2, 0.3, 11).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a.class_histogram(), vec![5, 5]);
        assert_eq!(a, make_blobs(2, 5, 2, 0.3, 11).unwrap());
        assert_ne!(a, make_blobs(2, 5, 2, 0.3, 12).unwrap());
        assert!(make_blobs(1, 5, 2, 0.3, 0).is_err());
        assert!(make_blobs(2, 0, 2, 0.3, 0).is_err());
    }

    #[test]
    fn zero_spread_blobs_collapse_to_centres() {
        let ds = make_blobs(3, 4, 3, 0.0, 5).unwrap();
        for i in 0..ds.len() {
            let nearest = (0..ds.len())
                .filter(|&j| j != i)
                .min_by(|&a, &b| {
                    let da = (ds.point(i) - ds.point(a)).norm_squared();
                    let db = (ds.point(i) - ds.point(b)).norm_squared();
                    da.total_cmp(&db).then(a.cmp(&b))
                })
                .unwrap();
            assert_eq!(ds.label(nearest), ds.label(i));
        }
    }

    #[test]
    fn subsample_sizes() {
        let ds = make_blobs(3, 12, 2, 1.0, 1).unwrap();
        let sub = subsample_per_class(&ds, 10, 9).unwrap();
        assert_eq!(sub.len(), 30);
        assert_eq!(sub.class_histogram(), vec![10, 10, 10]);
        assert!(subsample_per_class(&ds, 0, 9).is_err());
        assert!(subsample_per_class(&ds, 13, 9).is_err());
    }

    #[test]
    fn full_subsample_is_a_permutation_of_each_class() {
        let ds = make_blobs(2, 6, 2, 1.0, 3).unwrap();
        let (idx, rest) = split_per_class(&ds, 6, 4).unwrap();
        assert!(rest.is_empty());
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn noise_levels() {
        let ds = make_blobs(3, 4, 2, 1.0, 2).unwrap();
        let same = inject_label_noise(&ds, NoiseSpec { level: 0.0, seed: 1 }).unwrap();
        assert_eq!(same.labels(), ds.labels());
        let all = inject_label_noise(&ds, NoiseSpec { level: 1.0, seed: 1 }).unwrap();
        assert!(all.labels().iter().zip(ds.labels()).all(|(a, b)| a != b));
        assert!(inject_label_noise(&ds, NoiseSpec { level: 1.5, seed: 1 }).is_err());
        assert!(inject_label_noise(&ds, NoiseSpec { level: -0.1, seed: 1 }).is_err());
    }

    #[test]
    fn ten_points_thirty_percent_flips_three() {
        let ds = make_blobs(2, 5, 2, 1.0, 8).unwrap();
        for seed in 0..20 {
            let noisy = inject_label_noise(&ds, NoiseSpec { level: 0.3, seed }).unwrap();
            let flips = noisy.labels().iter().zip(ds.labels()).filter(|(a, b)| a != b).count();
            assert_eq!(flips, 3);
        }
    }

    #[test]
    fn half_up_rounding() {
        assert_eq!(flip_count(0.25, 10), 3);
        assert_eq!(flip_count(0.24, 10), 2);
        assert_eq!(flip_count(0.05, 10), 1);
    }

    #[test]
    fn standardizer_zero_mean_unit_variance() {
        let ds = make_blobs(2, 20, 3, 2.0, 4).unwrap();
        let z = Standardizer::fit(&ds).apply(&ds).unwrap();
        for j in 0..3 {
            let col = z.points().column(j);
            assert!(col.mean().abs() < 1e-12);
            assert!((col.variance() - 1.0).abs() < 1e-12);
        }
    }
}
