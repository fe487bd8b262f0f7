use rand::Rng;
use rand_distr::StandardNormal;

use super::{Dataset, DatasetId};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// Gaussian class clusters with unit covariance.
///
/// Class `k` is centred at `class_sep · e_k` while `k < n_features`; further
/// classes get seeded random unit directions scaled by `class_sep`. Labels
/// cycle through the classes so the set is balanced.
pub fn make_synthetic(
    n_classes: usize,
    n_features: usize,
    n_samples: usize,
    class_sep: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_classes == 0 || n_features == 0 || n_samples == 0 {
        return Err(Error::InvalidArgument("synthetic sizes must be positive".into()));
    }
    if !(class_sep >= 0.0 && class_sep.is_finite()) {
        return Err(Error::InvalidArgument(format!("class_sep = {class_sep} must be >= 0")));
    }
    let mut rng = stream_rng(seed, Stream::Data, &[]);
    let mut means = vec![0.0; n_classes * n_features];
    for k in 0..n_classes {
        let mean = &mut means[k * n_features..(k + 1) * n_features];
        if k < n_features {
            mean[k] = class_sep;
        } else {
            let dir: Vec<f64> = (0..n_features).map(|_| rng.sample(StandardNormal)).collect();
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            for (m, d) in mean.iter_mut().zip(dir) {
                *m = class_sep * d / norm;
            }
        }
    }
    let mut features = Vec::with_capacity(n_samples * n_features);
    let mut labels = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let k = i % n_classes;
        labels.push(k);
        for j in 0..n_features {
            let noise: f64 = rng.sample(StandardNormal);
            features.push(means[k * n_features + j] + noise);
        }
    }
    Dataset::new(features, n_features, labels, n_classes, DatasetId::Global)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_given_seed() {
        let a = make_synthetic(3, 4, 50, 2.0, 9).unwrap();
        let b = make_synthetic(3, 4, 50, 2.0, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, make_synthetic(3, 4, 50, 2.0, 10).unwrap());
    }

    #[test]
    fn balanced_labels() {
        let d = make_synthetic(4, 2, 100, 1.0, 0).unwrap();
        assert_eq!(d.label_histogram(), vec![25; 4]);
    }

    #[test]
    fn zero_sizes_rejected() {
        assert!(make_synthetic(0, 2, 10, 1.0, 0).is_err());
        assert!(make_synthetic(2, 2, 10, -1.0, 0).is_err());
    }
}
