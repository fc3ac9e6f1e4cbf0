//! Tabular regression data: CSV ingestion, z-score standardization,
//! shuffled train/test splits, leaked-label sampling and a synthetic
//! generator.

use std::path::Path;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Which CSV column holds the regression target.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelColumn {
    Index(usize),
    Name(String),
}

impl Default for LabelColumn {
    /// The last column.
    fn default() -> Self {
        LabelColumn::Index(usize::MAX)
    }
}

/// Per-column z-score statistics fitted on a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub feature_means: Vec<f64>,
    pub feature_stds: Vec<f64>,
    pub label_mean: f64,
    pub label_std: f64,
}

/// Population mean and standard deviation of one column.
fn column_stats(t: &Tensor, col: usize) -> (f64, f64) {
    let n = t.rows() as f64;
    let mean = (0..t.rows()).map(|r| t.get(r, col)).sum::<f64>() / n;
    let var = (0..t.rows())
        .map(|r| (t.get(r, col) - mean).powi(2))
        .sum::<f64>()
        / n;
    (mean, var.sqrt())
}

impl Standardizer {
    pub fn fit(features: &Tensor, labels: &Tensor) -> Result<Self> {
        let d = features.cols();
        let mut feature_means = Vec::with_capacity(d);
        let mut feature_stds = Vec::with_capacity(d);
        for c in 0..d {
            let (m, s) = column_stats(features, c);
            if !(s > 0.0) {
                return Err(Error::ConstantColumn(c));
            }
            feature_means.push(m);
            feature_stds.push(s);
        }
        let (label_mean, label_std) = column_stats(labels, 0);
        if !(label_std > 0.0) {
            return Err(Error::ConstantColumn(d));
        }
        Ok(Standardizer {
            feature_means,
            feature_stds,
            label_mean,
            label_std,
        })
    }

    pub fn transform_features(&self, x: &Tensor) -> Tensor {
        let d = x.cols();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = i % d;
            *v = (*v - self.feature_means[c]) / self.feature_stds[c];
        }
        out
    }

    pub fn inverse_features(&self, z: &Tensor) -> Tensor {
        let d = z.cols();
        let mut out = z.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = i % d;
            *v = *v * self.feature_stds[c] + self.feature_means[c];
        }
        out
    }

    pub fn transform_labels(&self, y: &Tensor) -> Tensor {
        y.map(|v| (v - self.label_mean) / self.label_std)
    }

    pub fn inverse_labels(&self, z: &Tensor) -> Tensor {
        z.map(|v| v * self.label_std + self.label_mean)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub features: Tensor,
    /// `n x 1`.
    pub labels: Tensor,
    /// Row positions in the source file.
    pub source_rows: Vec<usize>,
    /// Present once the dataset has been standardized.
    pub standardizer: Option<Standardizer>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, features: Tensor, labels: Tensor) -> Result<Self> {
        if labels.cols() != 1 || labels.rows() != features.rows() {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                lhs: features.shape(),
                rhs: labels.shape(),
            });
        }
        if features.rows() < 2 {
            return Err(Error::InvalidArgument(
                "a dataset needs at least two rows".into(),
            ));
        }
        Ok(Dataset {
            name: name.into(),
            source_rows: (0..features.rows()).collect(),
            features,
            labels,
            standardizer: None,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    fn subset(&self, rows: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            name: self.name.clone(),
            features: self.features.gather_rows(rows)?,
            labels: self.labels.gather_rows(rows)?,
            source_rows: rows.iter().map(|&r| self.source_rows[r]).collect(),
            standardizer: self.standardizer.clone(),
        })
    }
}

/// Reads a comma-separated file of reals. Every column other than the
/// label becomes a feature, in file order.
pub fn load_csv(path: impl AsRef<Path>, label: &LabelColumn, header: bool) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(header)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::Format(format!("{}: {other:?}", path.display())),
        })?;

    let names: Vec<String> = if header {
        reader.headers()?.iter().map(str::to_owned).collect()
    } else {
        Vec::new()
    };

    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = record
            .iter()
            .enumerate()
            .map(|(c, cell)| {
                cell.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse {
                        path: path.to_path_buf(),
                        row: r + 1,
                        column: c + 1,
                        message: format!("{cell:?} is not a real number"),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let width = rows.first().map_or(names.len(), Vec::len);
    if width < 2 {
        return Err(Error::Format(format!(
            "{}: need at least one feature and one label column",
            path.display()
        )));
    }

    let label_col = match label {
        LabelColumn::Index(usize::MAX) => width - 1,
        LabelColumn::Index(i) if *i < width => *i,
        LabelColumn::Index(i) => {
            return Err(Error::InvalidArgument(format!(
                "label column {i} out of range for {width} columns"
            )))
        }
        LabelColumn::Name(n) => names.iter().position(|h| h == n).ok_or_else(|| {
            Error::InvalidArgument(format!("no column named {n:?} in {}", path.display()))
        })?,
    };

    let n = rows.len();
    let mut features = Vec::with_capacity(n * (width - 1));
    let mut labels = Vec::with_capacity(n);
    for row in &rows {
        for (c, &v) in row.iter().enumerate() {
            if c == label_col {
                labels.push(v);
            } else {
                features.push(v);
            }
        }
    }
    let name = path
        .file_stem()
        .map_or_else(|| "csv".to_owned(), |s| s.to_string_lossy().into_owned());
    Dataset::new(
        name,
        Tensor::new(n, width - 1, features)?,
        Tensor::new(n, 1, labels)?,
    )
}

/// Shuffles rows by `seed`, keeps `round(ratio * n)` for training, fits
/// z-score statistics on the training rows and applies them to both sides.
pub fn split_standardize(ds: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split ratio must lie in (0, 1), got {ratio}"
        )));
    }
    let n = ds.len();
    let n_train = (ratio * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::InvalidArgument(format!(
            "ratio {ratio} leaves an empty side for {n} rows"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::seeded(rng::derive(seed, &[rng::stream::SPLIT])));
    let (train_rows, test_rows) = order.split_at(n_train);

    let mut train = ds.subset(train_rows)?;
    let mut test = ds.subset(test_rows)?;
    let scaler = Standardizer::fit(&train.features, &train.labels)?;
    for part in [&mut train, &mut test] {
        part.features = scaler.transform_features(&part.features);
        part.labels = scaler.transform_labels(&part.labels);
        part.standardizer = Some(scaler.clone());
    }
    Ok((train, test))
}

/// Training rows whose labels the feature party is assumed to know.
#[derive(Clone, Debug, PartialEq)]
pub struct LeakedSet {
    /// Row indices into the training split.
    pub indices: Vec<usize>,
    pub features: Tensor,
    pub labels: Tensor,
}

impl LeakedSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Number of leaked rows: `round(fraction * n)` (half away from zero), at
/// least one.
pub fn leak_size(n_train: usize, fraction: f64) -> usize {
    ((fraction * n_train as f64).round() as usize).clamp(1, n_train)
}

/// Samples leaked rows uniformly without replacement from the training
/// split.
pub fn sample_leaked(train: &Dataset, fraction: f64, seed: u64) -> Result<LeakedSet> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "leak fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let k = leak_size(train.len(), fraction);
    let mut rng = rng::seeded(rng::derive(seed, &[rng::stream::LEAK]));
    let mut indices = index::sample(&mut rng, train.len(), k).into_vec();
    indices.sort_unstable();
    Ok(LeakedSet {
        features: train.features.gather_rows(&indices)?,
        labels: train.labels.gather_rows(&indices)?,
        indices,
    })
}

/// Parameters of the synthetic target `y = X w + s * sin(X v) + noise`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n: usize,
    pub d: usize,
    pub noise_std: f64,
    #[serde(default = "default_sin_weight")]
    pub sin_weight: f64,
    pub seed: u64,
}

fn default_sin_weight() -> f64 {
    1.0
}

impl SynthSpec {
    pub fn generate(&self) -> Result<Dataset> {
        if self.n < 2 || self.d == 0 {
            return Err(Error::InvalidArgument(format!(
                "synthetic data needs n >= 2 and d >= 1, got n={} d={}",
                self.n, self.d
            )));
        }
        let mut rng = rng::seeded(rng::derive(self.seed, &[rng::stream::SYNTH]));
        let w: Vec<f64> = (0..self.d)
            .map(|_| rng::standard_normal(&mut rng))
            .collect();
        let v: Vec<f64> = (0..self.d)
            .map(|_| rng::standard_normal(&mut rng))
            .collect();
        let mut x = Vec::with_capacity(self.n * self.d);
        let mut y = Vec::with_capacity(self.n);
        for _ in 0..self.n {
            let row: Vec<f64> = (0..self.d)
                .map(|_| rng::standard_normal(&mut rng))
                .collect();
            let lin: f64 = row.iter().zip(&w).map(|(a, b)| a * b).sum();
            let arg: f64 = row.iter().zip(&v).map(|(a, b)| a * b).sum();
            let eps = self.noise_std * rng::standard_normal(&mut rng);
            y.push(lin + self.sin_weight * arg.sin() + eps);
            x.extend(row);
        }
        Dataset::new(
            "synth",
            Tensor::new(self.n, self.d, x)?,
            Tensor::new(self.n, 1, y)?,
        )
    }
}

/// `y = X w + sin(X v) + N(0, noise_std^2)` with standard-normal inputs.
pub fn synth_regression(n: usize, d: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    SynthSpec {
        n,
        d,
        noise_std,
        sin_weight: 1.0,
        seed,
    }
    .generate()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_small_csv_with_header() {
        let f = write_csv("a,b,y\n1,2,3\n4,5,6\n7,8,9\n");
        let ds = load_csv(f.path(), &LabelColumn::Name("y".into()), true).unwrap();
        assert_eq!(ds.features.shape(), (3, 2));
        assert_eq!(ds.labels.data(), &[3.0, 6.0, 9.0]);
        assert_eq!(ds.features.row(1), &[4.0, 5.0]);

        let ds = load_csv(f.path(), &LabelColumn::Index(0), true).unwrap();
        assert_eq!(ds.labels.data(), &[1.0, 4.0, 7.0]);
        assert_eq!(ds.features.row(0), &[2.0, 3.0]);
    }

    #[test]
    fn loads_headerless_csv_with_default_label() {
        let f = write_csv("1,2,3\n4,5,6\n");
        let ds = load_csv(f.path(), &LabelColumn::default(), false).unwrap();
        assert_eq!(ds.labels.data(), &[3.0, 6.0]);
    }

    #[test]
    fn reports_parse_location() {
        let f = write_csv("a,y\n1,2\n3,x\n");
        match load_csv(f.path(), &LabelColumn::default(), true) {
            Err(Error::Parse { row, column, .. }) => assert_eq!((row, column), (2, 2)),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_and_label() {
        assert!(matches!(
            load_csv("/nonexistent/file.csv", &LabelColumn::default(), true),
            Err(Error::Io(_))
        ));
        let f = write_csv("a,y\n1,2\n3,4\n");
        assert!(load_csv(f.path(), &LabelColumn::Name("z".into()), true).is_err());
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let ds = synth_regression(10, 2, 0.1, 1).unwrap();
        let (train, test) = split_standardize(&ds, 0.8, 3).unwrap();
        assert_eq!((train.len(), test.len()), (8, 2));
        let mut all: Vec<usize> = train
            .source_rows
            .iter()
            .chain(&test.source_rows)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(split_standardize(&ds, 1.0, 3).is_err());
        assert!(split_standardize(&ds, 0.01, 3).is_err());
    }

    #[test]
    fn z_score_of_small_column() {
        let x = Tensor::column(vec![1.0, 2.0, 3.0]).unwrap();
        let s = Standardizer::fit(&x, &x).unwrap();
        let z = s.transform_features(&x);
        let expected = [-1.224744871391589, 0.0, 1.224744871391589];
        for (a, b) in z.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_column_rejected() {
        let x = Tensor::from_rows(&[[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]]).unwrap();
        let y = Tensor::column(vec![1.0, 2.0, 4.0]).unwrap();
        let ds = Dataset::new("c", x, y).unwrap();
        assert!(matches!(
            split_standardize(&ds, 0.67, 0),
            Err(Error::ConstantColumn(1))
        ));
    }

    #[test]
    fn leak_sizes() {
        assert_eq!(leak_size(404, 0.01), 4);
        assert_eq!(leak_size(50, 0.01), 1);
        assert_eq!(leak_size(250, 0.01), 3);
        assert_eq!(leak_size(20, 1.0), 20);
    }

    #[test]
    fn leaked_rows_match_train() {
        let ds = synth_regression(200, 3, 0.1, 2).unwrap();
        let (train, _) = split_standardize(&ds, 0.8, 2).unwrap();
        let leaked = sample_leaked(&train, 0.05, 9).unwrap();
        assert_eq!(leaked.len(), 8);
        for (k, &i) in leaked.indices.iter().enumerate() {
            assert_eq!(leaked.labels.get(k, 0), train.labels.get(i, 0));
            assert_eq!(leaked.features.row(k), train.features.row(i));
        }
        assert_eq!(leaked, sample_leaked(&train, 0.05, 9).unwrap());
        let all = sample_leaked(&train, 1.0, 9).unwrap();
        assert_eq!(all.indices, (0..train.len()).collect::<Vec<_>>());
        assert!(sample_leaked(&train, 0.0, 9).is_err());
    }

    #[test]
    fn synth_shapes_and_determinism() {
        let a = synth_regression(1000, 4, 0.1, 5).unwrap();
        assert_eq!(a.features.shape(), (1000, 4));
        assert_eq!(a.labels.shape(), (1000, 1));
        assert_eq!(a, synth_regression(1000, 4, 0.1, 5).unwrap());
        assert!(synth_regression(1, 4, 0.1, 5).is_err());
    }
}
