use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::Gamma;

use super::{Dataset, DatasetId};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

const MAX_REDRAWS: u64 = 100;

/// Assigns every sample of `global` to one of `n_clients`, drawing per-class
/// client proportions from a symmetric Dirichlet(`alpha`).
///
/// All class draws are repeated (up to 100 times) until no client is empty;
/// after that, each empty client takes one sample from the currently largest
/// client. Each returned index list is sorted ascending.
pub fn dirichlet_partition_indices(
    global: &Dataset,
    n_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let n = global.n_samples();
    if n_clients == 0 {
        return Err(Error::InvalidArgument("n_clients must be at least 1".into()));
    }
    if n_clients > n {
        return Err(Error::InvalidArgument(format!("cannot split {n} samples across {n_clients} non-empty clients")));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("dirichlet alpha = {alpha} must be > 0")));
    }
    if n_clients == 1 {
        return Ok(vec![(0..n).collect()]);
    }

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); global.n_classes()];
    for i in 0..n {
        by_class[global.label(i)].push(i);
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;

    let mut assignment = Vec::new();
    for attempt in 0..MAX_REDRAWS {
        let mut rng = stream_rng(seed, Stream::Partition, &[attempt]);
        assignment = vec![Vec::new(); n_clients];
        for members in &by_class {
            if members.is_empty() {
                continue;
            }
            let mut members = members.clone();
            members.shuffle(&mut rng);
            let mut weights: Vec<f64> = (0..n_clients).map(|_| rng.sample(gamma)).collect();
            let total: f64 = weights.iter().sum();
            if total > 0.0 {
                for w in &mut weights {
                    *w /= total;
                }
            } else {
                // every gamma draw underflowed: give the class to one client
                let pick = rng.random_range(0..n_clients);
                for (i, w) in weights.iter_mut().enumerate() {
                    *w = if i == pick { 1.0 } else { 0.0 };
                }
            }
            let count = members.len();
            let mut start = 0;
            let mut cum = 0.0;
            for (client, w) in weights.iter().enumerate() {
                cum += w;
                let end = if client + 1 == n_clients {
                    count
                } else {
                    ((cum * count as f64).floor() as usize).clamp(start, count)
                };
                assignment[client].extend_from_slice(&members[start..end]);
                start = end;
            }
        }
        if assignment.iter().all(|c| !c.is_empty()) {
            break;
        }
        if attempt + 1 == MAX_REDRAWS {
            warn!("dirichlet partition left empty clients after {MAX_REDRAWS} redraws; rebalancing");
            fill_empty_clients(&mut assignment);
        }
    }
    for client in &mut assignment {
        client.sort_unstable();
    }
    Ok(assignment)
}

fn fill_empty_clients(assignment: &mut [Vec<usize>]) {
    for empty in 0..assignment.len() {
        if !assignment[empty].is_empty() {
            continue;
        }
        let donor = (0..assignment.len())
            .max_by(|&a, &b| assignment[a].len().cmp(&assignment[b].len()).then(b.cmp(&a)))
            .expect("at least one client");
        let moved = assignment[donor].pop().expect("donor has samples");
        assignment[empty].push(moved);
    }
}

/// Client datasets for [`dirichlet_partition_indices`].
pub fn dirichlet_partition(global: &Dataset, n_clients: usize, alpha: f64, seed: u64) -> Result<Vec<Dataset>> {
    dirichlet_partition_indices(global, n_clients, alpha, seed)?
        .iter()
        .enumerate()
        .map(|(i, idx)| global.subset(idx, DatasetId::Client(i)))
        .collect()
}
