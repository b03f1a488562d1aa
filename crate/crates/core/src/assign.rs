//! Path and link flow assignment from stored path-choice counts.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::choice::{choice_probabilities, path_utilities};
use crate::error::{Error, Result};
use crate::gibbs::PosteriorDraws;
use crate::network::NetworkModel;
use crate::samplers::categorical_from_uniform;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathAssignment {
    pub origin: String,
    pub destination: String,
    /// One-based interval.
    pub interval: usize,
    /// One-based path index within the O-D path set.
    pub path: usize,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinkFlow {
    pub link: String,
    pub interval: usize,
    pub mean: f64,
    pub sd: f64,
}

/// Posterior (or prior) mean and SD of path counts and link flows.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssignmentTable {
    pub paths: Vec<PathAssignment>,
    pub links: Vec<LinkFlow>,
}

/// Running mean and variance.
#[derive(Debug, Clone, Copy, Default)]
struct Welford {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    fn sd(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.m2 / (self.n - 1) as f64).sqrt().max(0.0)
        }
    }
}

fn tabulate(draws: &PosteriorDraws, net: &NetworkModel, count_sets: impl Iterator<Item = Vec<u32>>) -> Result<AssignmentTable> {
    let offsets = draws.cell_offsets();
    let total_paths: usize = draws.cells.iter().map(|c| c.n_paths).sum();
    let l = net.l();
    let mut path_acc = vec![Welford::default(); total_paths];
    let mut link_acc = vec![Welford::default(); l * draws.t_len];
    let mut flows = vec![0.0; l * draws.t_len];
    let mut seen = 0;
    for counts in count_sets {
        if counts.len() != total_paths {
            return Err(Error::Dimension(format!(
                "path counts have {} entries but the cell layout needs {total_paths}",
                counts.len()
            )));
        }
        seen += 1;
        flows.fill(0.0);
        for (ci, cell) in draws.cells.iter().enumerate() {
            let set = net.path_set(cell.origin, cell.destination).ok_or_else(|| {
                Error::Validation(format!("no path set for cell {ci} of the posterior store"))
            })?;
            if set.len() != cell.n_paths {
                return Err(Error::Validation(format!(
                    "cell {ci} has {} paths in the store but {} in the network",
                    cell.n_paths,
                    set.len()
                )));
            }
            for (k, path) in set.paths.iter().enumerate() {
                let n = counts[offsets[ci] + k] as f64;
                path_acc[offsets[ci] + k].push(n);
                if n > 0.0 {
                    for link in path.rides() {
                        flows[link * draws.t_len + cell.t] += n;
                    }
                }
            }
        }
        for (acc, f) in link_acc.iter_mut().zip(&flows) {
            acc.push(*f);
        }
    }
    if seen == 0 {
        return Err(Error::Empty("no draws to assign".into()));
    }
    let mut paths = Vec::with_capacity(total_paths);
    for (ci, cell) in draws.cells.iter().enumerate() {
        for k in 0..cell.n_paths {
            let acc = path_acc[offsets[ci] + k];
            paths.push(PathAssignment {
                origin: net.stations[cell.origin].id.clone(),
                destination: net.stations[cell.destination].id.clone(),
                interval: cell.t + 1,
                path: k + 1,
                mean: acc.mean,
                sd: acc.sd(),
            });
        }
    }
    let mut links = Vec::with_capacity(l * draws.t_len);
    for (li, link) in net.links.iter().enumerate() {
        for t in 0..draws.t_len {
            let acc = link_acc[li * draws.t_len + t];
            links.push(LinkFlow {
                link: link.id.clone(),
                interval: t + 1,
                mean: acc.mean,
                sd: acc.sd(),
            });
        }
    }
    Ok(AssignmentTable { paths, links })
}

/// Assignment summarised over the stored path-choice counts.
pub fn assignment_from_draws(draws: &PosteriorDraws, net: &NetworkModel) -> Result<AssignmentTable> {
    tabulate(draws, net, draws.records().map(|r| r.z_counts.clone()))
}

/// Assignment that ignores travel times: for every stored draw, each trip's
/// path is drawn from the MNL probabilities under that draw's coefficients
/// and costs.
pub fn prior_assignment(draws: &PosteriorDraws, net: &NetworkModel, rng: &mut ChaCha8Rng) -> Result<AssignmentTable> {
    let offsets = draws.cell_offsets();
    let total_paths: usize = draws.cells.iter().map(|c| c.n_paths).sum();
    let mut sets = Vec::with_capacity(draws.n_records());
    for rec in draws.records() {
        let mut counts = vec![0u32; total_paths];
        for (ci, cell) in draws.cells.iter().enumerate() {
            let set = net
                .path_set(cell.origin, cell.destination)
                .ok_or_else(|| Error::Validation(format!("no path set for cell {ci} of the posterior store")))?;
            let x_t = rec.x[cell.t].as_slice();
            let (theta, phi) = rec.tensor.coefficient_at(cell.origin, cell.t);
            let probs = choice_probabilities(&path_utilities(x_t, set, net, theta, phi))?;
            for _ in 0..cell.n_trips {
                let k = categorical_from_uniform(&probs, rng.random());
                counts[offsets[ci] + k] += 1;
            }
        }
        sets.push(counts);
    }
    tabulate(draws, net, sets.into_iter())
}
