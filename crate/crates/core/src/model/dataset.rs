use std::fmt;
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetId {
    Global,
    Client(usize),
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetId::Global => write!(f, "global"),
            DatasetId::Client(i) => write!(f, "client-{i}"),
        }
    }
}

/// Labelled samples stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    n_features: usize,
    labels: Vec<usize>,
    n_classes: usize,
    id: DatasetId,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        n_features: usize,
        labels: Vec<usize>,
        n_classes: usize,
        id: DatasetId,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidDataset("dataset has no samples".into()));
        }
        if n_features == 0 || n_classes == 0 {
            return Err(Error::InvalidDataset("n_features and n_classes must be positive".into()));
        }
        if features.len() != labels.len() * n_features {
            return Err(Error::InvalidDataset(format!(
                "{} feature values for {} samples of width {n_features}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::InvalidDataset(format!("label {bad} not below n_classes = {n_classes}")));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidDataset("non-finite feature value".into()));
        }
        Ok(Dataset { features, n_features, labels, n_classes, id })
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn id(&self) -> DatasetId {
        self.id
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Samples at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize], id: DatasetId) -> Result<Dataset> {
        let mut features = Vec::with_capacity(indices.len() * self.n_features);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.n_samples() {
                return Err(Error::BatchIndex { index: i, len: self.n_samples() });
            }
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(features, self.n_features, labels, self.n_classes, id)
    }

    /// Concatenation of several datasets with matching shapes.
    pub fn pooled(parts: &[&Dataset], id: DatasetId) -> Result<Dataset> {
        let first = parts.first().ok_or_else(|| Error::InvalidDataset("nothing to pool".into()))?;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.n_features != first.n_features || p.n_classes != first.n_classes {
                return Err(Error::InvalidDataset("pooled datasets differ in shape".into()));
            }
            features.extend_from_slice(&p.features);
            labels.extend_from_slice(&p.labels);
        }
        Dataset::new(features, first.n_features, labels, first.n_classes, id)
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.n_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Reads `label,f0,f1,...` CSV. The class count is `n_classes` if given,
    /// otherwise one more than the largest label.
    pub fn from_csv<R: Read>(reader: R, n_classes: Option<usize>, id: DatasetId) -> Result<Dataset> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers().map_err(|e| Error::Csv { line: 1, msg: e.to_string() })?.clone();
        if headers.get(0).map(str::trim) != Some("label") || headers.len() < 2 {
            return Err(Error::Csv { line: 1, msg: "header must be `label,f0,f1,...`".into() });
        }
        let n_features = headers.len() - 1;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (row_idx, record) in rdr.records().enumerate() {
            let line = row_idx as u64 + 2;
            let record = record.map_err(|e| Error::Csv { line, msg: e.to_string() })?;
            if record.len() != n_features + 1 {
                return Err(Error::Csv {
                    line,
                    msg: format!("expected {} columns, found {}", n_features + 1, record.len()),
                });
            }
            let label: usize = record[0]
                .trim()
                .parse()
                .map_err(|_| Error::Csv { line, msg: format!("bad label `{}`", &record[0]) })?;
            labels.push(label);
            for (col, field) in record.iter().enumerate().skip(1) {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::Csv { line, msg: format!("bad value `{field}` in column {col}") })?;
                features.push(v);
            }
        }
        let n_classes = match n_classes {
            Some(n) => n,
            None => labels.iter().max().map_or(0, |m| m + 1),
        };
        Dataset::new(features, n_features, labels, n_classes, id)
    }
}
