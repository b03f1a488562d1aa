//! Synthetic ground truth and trip generation for recovery experiments.

use std::path::Path as FsPath;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::choice::{choice_probabilities, path_utilities, ChoiceTensor};
use crate::config::{M0Policy, RunConfig};
use crate::data::TripObservation;
use crate::error::{Error, Result};
use crate::kernels::{diffusion_kernel, se_kernel, KernelParams};
use crate::network::{
    build_network, enumerate_paths, CostKind, LinkSpec, NetworkModel, NetworkSpec, StationSpec, TransferSpec,
    DEFAULT_DETOUR_CAP, DEFAULT_K_MAX,
};
use crate::rng;
use crate::samplers::{categorical_from_uniform, inverse_wishart_sample};
use crate::statespace::{observation_variance, NoiseScale};

/// Attempts at a positive travel time before clamping to one second.
pub const MAX_RESAMPLE: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scale {
    /// 12 stations on two lines, T = 8.
    Desk,
    /// 90 stations on nine lines, T = 32.
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub scale: Scale,
    pub seed: u64,
    pub t_len: usize,
    pub rank: usize,
    pub tau2: f64,
    /// True coefficients of variation (access, in-vehicle, transfer, egress).
    pub sigma: [f64; 4],
    pub q1: f64,
    pub q2: f64,
    pub kernels: KernelParams,
    pub omega0: [[f64; 2]; 2],
    pub nu0: f64,
    /// Trips per (O-D, interval) for pairs with several paths.
    pub demand_multi: u32,
    /// Trips per (O-D, interval) for single-path pairs.
    pub demand_single: u32,
}

/// Temporal kernel variance of the presets. Utilities are in seconds, so a
/// unit variance would let the factor terms swamp q1 and q2 and make every
/// choice deterministic.
pub const DESK_TEMPORAL_VARIANCE: f64 = 1e-4;

/// Slice sweeps over (q1, q2) per iteration in generated run configurations.
/// Near-tie path choices leave the two coefficients on a narrow ridge that a
/// single coordinate-wise pass crosses slowly.
pub const DESK_Q_SWEEPS: usize = 10;

impl SimConfig {
    pub fn desk(seed: u64) -> Self {
        Self {
            scale: Scale::Desk,
            seed,
            t_len: 8,
            rank: 2,
            tau2: 25.0,
            sigma: [0.32, 0.155, 0.31, 0.25],
            q1: -0.2,
            q2: -0.4,
            kernels: KernelParams {
                variance: DESK_TEMPORAL_VARIANCE,
                ..KernelParams::default()
            },
            omega0: [[1.0, 0.0], [0.0, 1.0]],
            nu0: 5.0,
            demand_multi: 50,
            demand_single: 10,
        }
    }

    pub fn paper(seed: u64) -> Self {
        Self {
            scale: Scale::Paper,
            t_len: 32,
            rank: 4,
            demand_multi: 20,
            demand_single: 2,
            ..Self::desk(seed)
        }
    }

    pub fn for_scale(scale: Scale, seed: u64) -> Self {
        match scale {
            Scale::Desk => Self::desk(seed),
            Scale::Paper => Self::paper(seed),
        }
    }

    /// A run configuration whose priors, horizon and rank match this
    /// simulation, with the generator's initial costs as the prior mean of
    /// x_1 and a prior variance of one random-walk step.
    pub fn run_config(&self, m0: &DVector<f64>) -> RunConfig {
        let mut cfg = RunConfig {
            seed: self.seed,
            rank: self.rank,
            kernels: self.kernels,
            ..RunConfig::default()
        };
        cfg.priors.omega0 = self.omega0;
        cfg.priors.nu0 = self.nu0;
        cfg.state.tau2 = self.tau2;
        cfg.state.m0 = M0Policy::Given;
        cfg.state.m0_values = m0.iter().copied().collect();
        cfg.state.p0_variance = self.tau2.max(1.0);
        cfg.time.intervals = self.t_len;
        cfg.slice.q_sweeps = DESK_Q_SWEEPS;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_len < 2 {
            return Err(Error::Parameter("simulation needs at least 2 intervals".into()));
        }
        if !(self.tau2 >= 0.0 && self.tau2.is_finite()) {
            return Err(Error::Parameter(format!("tau2 must be >= 0, got {}", self.tau2)));
        }
        NoiseScale::from_array(self.sigma)?;
        self.kernels.validate()?;
        if self.nu0.is_nan() || self.nu0 <= 1.0 {
            return Err(Error::Parameter("nu0 must exceed 1".into()));
        }
        Ok(())
    }
}

fn station(id: String) -> StationSpec {
    StationSpec {
        id,
        name: String::new(),
        x: None,
        y: None,
    }
}

/// Adds both directions of every consecutive pair of `stops` on `line`.
fn add_line(links: &mut Vec<LinkSpec>, line: &str, stops: &[String]) {
    for w in stops.windows(2) {
        for (a, b) in [(&w[0], &w[1]), (&w[1], &w[0])] {
            links.push(LinkSpec {
                id: format!("{line}:{a}-{b}"),
                from: a.clone(),
                to: b.clone(),
                line: line.into(),
            });
        }
    }
}

fn add_interchange(transfers: &mut Vec<TransferSpec>, station: &str, a: &str, b: &str) {
    for (from, to) in [(a, b), (b, a)] {
        transfers.push(TransferSpec {
            id: format!("{station}:{from}>{to}"),
            station: station.into(),
            from_line: from.into(),
            to_line: to.into(),
        });
    }
}

/// The 12-station, two-line desk network. Line A runs S0..S6; line B runs
/// S7-S2-S8-S9-S5-S10-S11, sharing interchanges S2 and S5.
pub fn desk_network_spec() -> NetworkSpec {
    let id = |i: usize| format!("S{i}");
    let stations = (0..12).map(|i| station(id(i))).collect();
    let mut links = Vec::new();
    add_line(&mut links, "A", &[0, 1, 2, 3, 4, 5, 6].map(id));
    add_line(&mut links, "B", &[7, 2, 8, 9, 5, 10, 11].map(id));
    let mut transfers = Vec::new();
    add_interchange(&mut transfers, "S2", "A", "B");
    add_interchange(&mut transfers, "S5", "A", "B");
    NetworkSpec {
        schema: crate::network::NETWORK_SCHEMA_VERSION,
        stations,
        links,
        transfers,
        paths: vec![],
    }
}

/// A 90-station grid: six east-west lines of 15 stations crossed by three
/// north-south lines at columns 2, 7 and 12.
pub fn paper_network_spec() -> NetworkSpec {
    let id = |r: usize, c: usize| format!("R{r}C{c}");
    let mut stations = Vec::new();
    for r in 0..6 {
        for c in 0..15 {
            stations.push(station(id(r, c)));
        }
    }
    let mut links = Vec::new();
    let mut transfers = Vec::new();
    for r in 0..6 {
        let stops: Vec<String> = (0..15).map(|c| id(r, c)).collect();
        add_line(&mut links, &format!("H{r}"), &stops);
    }
    for c in [2, 7, 12] {
        let stops: Vec<String> = (0..6).map(|r| id(r, c)).collect();
        add_line(&mut links, &format!("V{c}"), &stops);
        for r in 0..6 {
            add_interchange(&mut transfers, &id(r, c), &format!("H{r}"), &format!("V{c}"));
        }
    }
    NetworkSpec {
        schema: crate::network::NETWORK_SCHEMA_VERSION,
        stations,
        links,
        transfers,
        paths: vec![],
    }
}

/// O-D pairs of the desk network that get every enumerated path. Each can
/// ride line A or the line B branch between S2 and S5.
pub const DESK_CHOICE_PAIRS: [(&str, &str); 8] = [
    ("S2", "S6"),
    ("S2", "S5"),
    ("S5", "S2"),
    ("S5", "S1"),
    ("S5", "S0"),
    ("S2", "S10"),
    ("S5", "S7"),
    ("S0", "S6"),
];

/// Builds the scale's network with path sets for every O-D pair. The desk
/// network gives the pairs in [`DESK_CHOICE_PAIRS`] all their enumerated
/// paths and every other pair only its shortest one.
pub fn scale_network(scale: Scale) -> Result<NetworkModel> {
    match scale {
        Scale::Desk => {
            let mut net = build_network(&desk_network_spec())?;
            for (o, d) in DESK_CHOICE_PAIRS {
                let od = (net.station_index(o)?, net.station_index(d)?);
                let set = enumerate_paths(&net, od, DEFAULT_K_MAX, DEFAULT_DETOUR_CAP)?;
                net.insert_path_set(od.0, od.1, set.paths)?;
            }
            add_all_path_sets(&mut net, 1, DEFAULT_DETOUR_CAP)?;
            Ok(net)
        }
        Scale::Paper => {
            let mut net = build_network(&paper_network_spec())?;
            add_all_path_sets(&mut net, DEFAULT_K_MAX, DEFAULT_DETOUR_CAP)?;
            Ok(net)
        }
    }
}

/// Enumerates paths for every ordered station pair lacking a path set.
pub fn add_all_path_sets(net: &mut NetworkModel, k_max: usize, detour_cap: f64) -> Result<()> {
    for o in 0..net.n() {
        for d in 0..net.n() {
            if o != d && net.od_index(o, d).is_none() {
                let set = enumerate_paths(net, (o, d), k_max, detour_cap)?;
                net.insert_path_set(o, d, set.paths)?;
            }
        }
    }
    net.refresh_hash();
    Ok(())
}

/// Nominal cost vector (seconds). Hops are short so that single-path trips
/// pin down individual components well. On the desk network the line B
/// branch between S2 and S5 is a little quicker than line A eastbound and a
/// little slower westbound, changing onto line B is a long walk at both
/// interchanges, and line B platforms there are deep, which separates the
/// two paths' travel times. At q1 = -0.2, q2 = -0.4 only some of the choice
/// pairs' paths have close utilities.
pub fn nominal_costs(net: &NetworkModel) -> DVector<f64> {
    let mut x = DVector::zeros(net.cost_dim());
    let ends = |l: usize| {
        let link = &net.links[l];
        (net.stations[link.from].id.as_str(), net.stations[link.to].id.as_str(), link.line.as_str())
    };
    let middle = |l: usize, line: &str, stops: [&str; 4]| {
        let (a, b, on) = ends(l);
        on == line && stops.contains(&a) && stops.contains(&b)
    };
    let interchange = |s: &str| s == "S2" || s == "S5";
    let eastbound = |l: usize, stops: [&str; 4]| {
        let (a, b, _) = ends(l);
        stops.iter().position(|s| *s == a) < stops.iter().position(|s| *s == b)
    };
    const LINE_A: [&str; 4] = ["S2", "S3", "S4", "S5"];
    const LINE_B: [&str; 4] = ["S2", "S8", "S9", "S5"];
    for kind in CostKind::ALL {
        for (e, pos) in net.block_range(kind).enumerate() {
            x[pos] = match kind {
                CostKind::Access if ends(e).2 == "B" && interchange(ends(e).0) => 250.0,
                CostKind::Access => 15.0 + 3.75 * ((3 * e) % 7) as f64,
                CostKind::InVehicle if middle(e, "A", LINE_A) => {
                    if eastbound(e, LINE_A) {
                        35.0
                    } else {
                        30.0
                    }
                }
                CostKind::InVehicle if middle(e, "B", LINE_B) => {
                    if eastbound(e, LINE_B) {
                        92.5 / 3.0
                    } else {
                        28.75
                    }
                }
                CostKind::InVehicle => 30.0 + 2.5 * (e % 3) as f64,
                CostKind::Transfer if interchange(&net.stations[net.transfers[e].station].id) => {
                    let transfer = &net.transfers[e];
                    match (net.stations[transfer.station].id.as_str(), transfer.to_line.as_str()) {
                        (_, "B") => 22.5,
                        ("S2", _) => 2.0,
                        _ => 6.25,
                    }
                }
                CostKind::Transfer => 15.0 + 2.5 * (e % 3) as f64,
                CostKind::Egress => 11.25 + 3.0 * ((5 * e) % 6) as f64,
            };
        }
    }
    x
}

/// Trips per (O-D, interval).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemandEntry {
    pub origin: usize,
    pub destination: usize,
    pub t: usize,
    pub trips: u32,
}

/// `multi` trips per interval for multi-path pairs, `single` otherwise.
pub fn default_demand(net: &NetworkModel, t_len: usize, multi: u32, single: u32) -> Vec<DemandEntry> {
    let mut out = Vec::new();
    for set in &net.path_sets {
        let trips = if set.is_choice_relevant() { multi } else { single };
        for t in 0..t_len {
            out.push(DemandEntry {
                origin: set.od.0,
                destination: set.od.1,
                t,
                trips,
            });
        }
    }
    out
}

/// True parameters of a simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: SimConfig,
    pub network_hash: String,
    pub m0: DVector<f64>,
    pub x: Vec<DVector<f64>>,
    pub sigma: NoiseScale,
    pub tensor: ChoiceTensor,
    pub ku: DMatrix<f64>,
    pub demand: Vec<DemandEntry>,
    /// True path index per generated trip, in trip-file order.
    pub z: Vec<u16>,
    /// Trips whose travel time was clamped after repeated negative draws.
    pub clamped: usize,
}

impl GroundTruth {
    pub fn save(&self, path: impl AsRef<FsPath>) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<FsPath>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

fn gaussian_columns(rows: usize, cols: usize, chol: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, cols);
    for c in 0..cols {
        let xi = DVector::from_fn(rows, |_, _| rng.sample::<f64, _>(StandardNormal));
        m.set_column(c, &(chol * xi));
    }
    m
}

/// Draws true costs by the random walk from `m0`, and the CP factors from
/// their priors (K_U from its inverse-Wishart prior).
pub fn generate_truth(net: &NetworkModel, m0: &DVector<f64>, cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Result<GroundTruth> {
    cfg.validate()?;
    let c = net.cost_dim();
    if m0.len() != c {
        return Err(Error::Dimension(format!("m0 has length {} but the network has {c} attributes", m0.len())));
    }
    let sd = cfg.tau2.sqrt();
    let mut x = Vec::with_capacity(cfg.t_len);
    x.push(m0.clone());
    for t in 1..cfg.t_len {
        let step = DVector::from_fn(c, |_, _| sd * rng.sample::<f64, _>(StandardNormal));
        x.push(&x[t - 1] + step);
    }
    let omega0 = DMatrix::from_fn(2, 2, |i, j| cfg.omega0[i][j]);
    let ku = inverse_wishart_sample(&omega0, cfg.nu0, rng)?;
    let ku_chol = ku
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Parameter("drawn K_U is not positive definite".into()))?
        .l();
    let ks = diffusion_kernel(&net.adjacency, cfg.kernels.alpha)?;
    let kt = se_kernel(cfg.t_len, &cfg.kernels)?;
    let u = gaussian_columns(2, cfg.rank, &ku_chol, rng);
    let v = gaussian_columns(net.n(), cfg.rank, &ks.chol, rng);
    let w = gaussian_columns(cfg.t_len, cfg.rank, &kt.chol, rng);
    let tensor = ChoiceTensor::new(u, v, w, cfg.q1, cfg.q2)?;
    Ok(GroundTruth {
        config: cfg.clone(),
        network_hash: net.content_hash().to_string(),
        m0: m0.clone(),
        x,
        sigma: NoiseScale::from_array(cfg.sigma)?,
        tensor,
        ku,
        demand: Vec::new(),
        z: Vec::new(),
        clamped: 0,
    })
}

/// Simulated trips with their true path choices.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedTrips {
    pub trips: Vec<TripObservation>,
    pub z: Vec<u16>,
    pub clamped: usize,
}

/// Samples a path from the true MNL probabilities and a travel time from the
/// observation model for every demanded trip. Negative travel times are
/// redrawn, up to [`MAX_RESAMPLE`] times, then clamped to one second. Each
/// demand cell uses its own random stream derived from `seed`.
pub fn generate_trips(truth: &GroundTruth, net: &NetworkModel, demand: &[DemandEntry], seed: u64) -> Result<SimulatedTrips> {
    let mut out = SimulatedTrips {
        trips: Vec::new(),
        z: Vec::new(),
        clamped: 0,
    };
    for (i, cell) in demand.iter().enumerate() {
        if cell.trips == 0 {
            continue;
        }
        let set = net.path_set(cell.origin, cell.destination).ok_or_else(|| {
            Error::Validation(format!(
                "demand for {} -> {} has no path set",
                net.stations[cell.origin].id, net.stations[cell.destination].id
            ))
        })?;
        let x_t = truth
            .x
            .get(cell.t)
            .ok_or_else(|| Error::Dimension(format!("demand interval {} beyond the truth horizon", cell.t + 1)))?
            .as_slice();
        let (theta, phi) = truth.tensor.coefficient_at(cell.origin, cell.t);
        let probs = choice_probabilities(&path_utilities(x_t, set, net, theta, phi))?;
        let mut rng = rng::stream(seed, &[0x5157, i as u64]);
        for _ in 0..cell.trips {
            let k = categorical_from_uniform(&probs, rng.random());
            let row = &set.rows[k];
            let mean = row.dot(x_t);
            let sd = observation_variance(x_t, &truth.sigma, row, net).sqrt();
            let mut y = None;
            for _ in 0..MAX_RESAMPLE {
                let draw = mean + sd * rng.sample::<f64, _>(StandardNormal);
                if draw > 0.0 {
                    y = Some(draw);
                    break;
                }
            }
            let y = y.unwrap_or_else(|| {
                out.clamped += 1;
                1.0
            });
            out.trips.push(TripObservation {
                origin: cell.origin,
                destination: cell.destination,
                t: cell.t,
                y,
            });
            out.z.push(k as u16);
        }
    }
    if out.clamped > 0 {
        log::warn!("{} simulated travel times clamped to 1 s", out.clamped);
    }
    Ok(out)
}

/// Network, truth and trips for one simulated experiment.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub network: NetworkModel,
    pub truth: GroundTruth,
    pub trips: Vec<TripObservation>,
}

/// Full pipeline for a scale preset: network, nominal m0, truth, demand and trips.
pub fn simulate(cfg: &SimConfig) -> Result<Simulation> {
    let network = scale_network(cfg.scale)?;
    simulate_on(network, cfg)
}

pub fn simulate_on(network: NetworkModel, cfg: &SimConfig) -> Result<Simulation> {
    let m0 = nominal_costs(&network);
    let mut rng = rng::stream(cfg.seed, &[0x7275_7468]);
    let mut truth = generate_truth(&network, &m0, cfg, &mut rng)?;
    truth.demand = default_demand(&network, cfg.t_len, cfg.demand_multi, cfg.demand_single);
    let sim = generate_trips(&truth, &network, &truth.demand, cfg.seed)?;
    truth.z = sim.z;
    truth.clamped = sim.clamped;
    Ok(Simulation {
        network,
        truth,
        trips: sim.trips,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_network_dimensions() {
        let net = scale_network(Scale::Desk).unwrap();
        assert_eq!((net.n(), net.l(), net.s(), net.cost_dim()), (12, 24, 4, 64));
        assert_eq!(net.path_sets.len(), 132);
        let multi = net.path_sets.iter().filter(|p| p.is_choice_relevant()).count();
        assert_eq!(multi, DESK_CHOICE_PAIRS.len());
    }

    #[test]
    fn zero_tau_keeps_costs_constant() {
        let net = scale_network(Scale::Desk).unwrap();
        let cfg = SimConfig {
            tau2: 0.0,
            ..SimConfig::desk(3)
        };
        let mut rng = rng::stream(1, &[]);
        let truth = generate_truth(&net, &nominal_costs(&net), &cfg, &mut rng).unwrap();
        assert!(truth.x.iter().all(|x| x == &truth.x[0]));
    }

    #[test]
    fn zero_demand_gives_no_trips() {
        let net = scale_network(Scale::Desk).unwrap();
        let mut rng = rng::stream(1, &[]);
        let truth = generate_truth(&net, &nominal_costs(&net), &SimConfig::desk(1), &mut rng).unwrap();
        let demand = default_demand(&net, 8, 0, 0);
        let sim = generate_trips(&truth, &net, &demand, 5).unwrap();
        assert!(sim.trips.is_empty());
    }

    #[test]
    fn simulation_is_deterministic() {
        let a = simulate(&SimConfig::desk(7)).unwrap();
        let b = simulate(&SimConfig::desk(7)).unwrap();
        assert_eq!(a.truth, b.truth);
        assert_eq!(a.trips, b.trips);
        assert!(a.trips.iter().all(|t| t.y > 0.0 && t.y.is_finite()));
        let c = simulate(&SimConfig::desk(8)).unwrap();
        assert_ne!(a.trips, c.trips);
    }

    #[test]
    fn paper_network_dimensions() {
        let net = build_network(&paper_network_spec()).unwrap();
        assert_eq!(net.n(), 90);
        assert_eq!(net.s(), 36);
        assert_eq!(net.cost_dim(), 2 * 198 + 36 + 90);
    }
}
