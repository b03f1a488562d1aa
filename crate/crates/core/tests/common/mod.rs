#![allow(dead_code)]

use metroflow::build_network;
use metroflow::choice::{ChoiceTensor, UtilityContext};
use metroflow::data::TripObservation;
use metroflow::network::{CostKind, NetworkModel, NetworkSpec, RoutingRow, DEFAULT_DETOUR_CAP};
use metroflow::simulate::{add_all_path_sets, simulate_on, SimConfig, Simulation};
use metroflow::samplers::MixtureCell;
use metroflow::statespace::{observation_variance, IntervalInfo, NoiseScale, StateParams};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// One observation of a linear-Gaussian random-walk instance.
pub struct Obs {
    pub t: usize,
    pub row: RoutingRow,
    pub var: f64,
    pub y: f64,
}

pub struct LinearInstance {
    pub params: StateParams,
    pub t_len: usize,
    pub obs: Vec<Obs>,
}

impl LinearInstance {
    pub fn random(c: usize, t_len: usize, n_obs: usize, rng: &mut ChaCha8Rng) -> Self {
        let m0 = DVector::from_fn(c, |_, _| 60.0 + 120.0 * rng.random::<f64>());
        let tau2 = DVector::from_fn(c, |_, _| 1.0 + 9.0 * rng.random::<f64>());
        let b = DMatrix::from_fn(c, c, |_, _| rng.random::<f64>() - 0.5);
        let p0 = &b * b.transpose() * 10.0 + DMatrix::identity(c, c) * 15.0;
        let params = StateParams::new(tau2, m0.clone(), p0).unwrap();
        let mut obs = Vec::with_capacity(n_obs);
        for _ in 0..n_obs {
            let mut cols: Vec<usize> = (0..c).filter(|_| rng.random::<f64>() < 0.5).collect();
            if cols.is_empty() {
                cols.push(rng.random_range(0..c));
            }
            let row = RoutingRow::from_cols(cols);
            let t = rng.random_range(0..t_len);
            let mean: f64 = row.cols().iter().map(|&j| m0[j]).sum();
            obs.push(Obs {
                t,
                row,
                var: 50.0 + 400.0 * rng.random::<f64>(),
                y: mean + 30.0 * (rng.random::<f64>() - 0.5),
            });
        }
        Self { params, t_len, obs }
    }

    pub fn infos(&self) -> Vec<IntervalInfo> {
        let c = self.params.dim();
        let mut infos: Vec<IntervalInfo> = (0..self.t_len).map(|_| IntervalInfo::new(c)).collect();
        for o in &self.obs {
            infos[o.t].add_one(&o.row, o.var, o.y);
        }
        infos
    }

    /// Moments of `x_t` given every observation with interval `≤ upto`, by
    /// conditioning the joint Gaussian of the whole trajectory.
    pub fn dense_conditional(&self, upto: usize) -> Vec<(DVector<f64>, DMatrix<f64>)> {
        let c = self.params.dim();
        let n = c * self.t_len;
        let mut mu = DVector::zeros(n);
        let mut sigma = DMatrix::zeros(n, n);
        for s in 0..self.t_len {
            mu.rows_mut(s * c, c).copy_from(&self.params.m0);
            for t in 0..self.t_len {
                let mut block = self.params.p0.clone();
                for i in 0..c {
                    block[(i, i)] += s.min(t) as f64 * self.params.tau2[i];
                }
                sigma.view_mut((s * c, t * c), (c, c)).copy_from(&block);
            }
        }
        let used: Vec<&Obs> = self.obs.iter().filter(|o| o.t <= upto).collect();
        let (post_mu, post_sigma) = if used.is_empty() {
            (mu, sigma)
        } else {
            let m = used.len();
            let mut h = DMatrix::zeros(m, n);
            let mut r = DMatrix::zeros(m, m);
            let mut y = DVector::zeros(m);
            for (k, o) in used.iter().enumerate() {
                for &j in o.row.cols() {
                    h[(k, o.t * c + j)] = 1.0;
                }
                r[(k, k)] = o.var;
                y[k] = o.y;
            }
            let s = &h * &sigma * h.transpose() + r;
            let s_inv = s.try_inverse().unwrap();
            let gain = &sigma * h.transpose() * s_inv;
            let post_mu = &mu + &gain * (y - &h * &mu);
            let post_sigma = &sigma - &gain * &h * &sigma;
            (post_mu, post_sigma)
        };
        (0..self.t_len)
            .map(|t| {
                (
                    post_mu.rows(t * c, c).into_owned(),
                    post_sigma.view((t * c, t * c), (c, c)).into_owned(),
                )
            })
            .collect()
    }
}

pub fn log_normal_pdf(y: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (y - mean) * (y - mean) / var)
}

/// Mixture cells (in trip order) for trips grouped by consecutive runs of
/// the same (O-D, interval), with path densities at costs `x`.
pub fn mixture_cells(trips: &[TripObservation], net: &NetworkModel, x: &[DVector<f64>], sigma: &NoiseScale) -> Vec<MixtureCell> {
    let mut cells: Vec<MixtureCell> = Vec::new();
    let mut start = 0;
    while start < trips.len() {
        let key = (trips[start].origin, trips[start].destination, trips[start].t);
        let mut end = start;
        while end < trips.len() && (trips[end].origin, trips[end].destination, trips[end].t) == key {
            end += 1;
        }
        let set = net.path_set(key.0, key.1).unwrap();
        let x_t = x[key.2].as_slice();
        let mut log_dens = Vec::with_capacity((end - start) * set.len());
        for trip in &trips[start..end] {
            for row in &set.rows {
                log_dens.push(log_normal_pdf(trip.y, row.dot(x_t), observation_variance(x_t, sigma, row, net)));
            }
        }
        cells.push(MixtureCell {
            origin: key.0,
            interval: key.2,
            contexts: set.paths.iter().map(|p| UtilityContext::for_path(p, x_t, net)).collect(),
            first_trip: start,
            log_dens,
        });
        start = end;
    }
    cells
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Four lines joining S0 and S2 through distinct middle stations.
pub fn four_branch_spec() -> NetworkSpec {
    let stations: Vec<serde_json::Value> = (0..6).map(|i| serde_json::json!({ "id": format!("S{i}") })).collect();
    let mut links = Vec::new();
    for (line, mid) in [("A", 1), ("B", 3), ("C", 4), ("D", 5)] {
        for (a, b) in [(0, mid), (mid, 2)] {
            links.push(serde_json::json!({ "id": format!("{line}{a}{b}"), "from": format!("S{a}"), "to": format!("S{b}"), "line": line }));
            links.push(serde_json::json!({ "id": format!("{line}{b}{a}"), "from": format!("S{b}"), "to": format!("S{a}"), "line": line }));
        }
    }
    let mut transfers = Vec::new();
    for station in ["S0", "S2"] {
        for from in ["A", "B", "C", "D"] {
            for to in ["A", "B", "C", "D"].into_iter().filter(|t| *t != from) {
                transfers.push(serde_json::json!({ "id": format!("T{station}{from}{to}"), "station": station, "from_line": from, "to_line": to }));
            }
        }
    }
    let doc = serde_json::json!({ "stations": stations, "links": links, "transfers": transfers });
    NetworkSpec::from_json_str(&doc.to_string()).unwrap()
}

/// Small simulated instance with up to `k_max` paths per O-D pair.
pub fn instance(spec: NetworkSpec, seed: u64, k_max: usize) -> Simulation {
    let mut net = build_network(&spec).unwrap();
    add_all_path_sets(&mut net, k_max, DEFAULT_DETOUR_CAP).unwrap();
    let cfg = SimConfig {
        demand_multi: 4,
        demand_single: 1,
        ..SimConfig::desk(seed)
    };
    simulate_on(net, &cfg).unwrap()
}

/// `log Σ_k p_k N(y; μ_k, v_k)` for one trip, with utilities and variances
/// computed from the path link lists. Zero for single-path pairs.
pub fn enumerated_trip_loglik(
    net: &NetworkModel,
    x: &[DVector<f64>],
    sigma: &NoiseScale,
    tensor: &ChoiceTensor,
    trip: &TripObservation,
) -> f64 {
    let (inv, tr) = (net.block_range(CostKind::InVehicle).start, net.block_range(CostKind::Transfer).start);
    let set = net.path_set(trip.origin, trip.destination).unwrap();
    if set.len() < 2 {
        return 0.0;
    }
    let x = &x[trip.t];
    let (theta, phi) = tensor.coefficient_at(trip.origin, trip.t);
    let utils: Vec<f64> = set
        .paths
        .iter()
        .map(|p| theta * p.rides().map(|l| x[inv + l]).sum::<f64>() + phi * p.transfers().map(|t| x[tr + t]).sum::<f64>())
        .collect();
    let umax = utils.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let norm: f64 = utils.iter().map(|u| (u - umax).exp()).sum();
    let terms: Vec<f64> = set
        .rows
        .iter()
        .zip(&utils)
        .map(|(row, u)| {
            let mean: f64 = row.cols().iter().map(|&j| x[j]).sum();
            let var: f64 = row
                .cols()
                .iter()
                .map(|&j| {
                    let s = sigma.get(net.kind_of(j)) * x[j].max(1.0);
                    s * s
                })
                .sum();
            (u - umax) - norm.ln() + log_normal_pdf(trip.y, mean, var)
        })
        .collect();
    let tmax = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    tmax + terms.iter().map(|t| (t - tmax).exp()).sum::<f64>().ln()
}
