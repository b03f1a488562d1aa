//! The blocked Gibbs sampler: initialization, the per-iteration block
//! schedule, multi-chain execution and posterior summaries.
//!
//! Block order within an iteration is fixed:
//! cost states (FFBS) → coefficients of variation → CP factor columns
//! (V, then W, then U) → q1, q2 → K_U → path choices.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::choice::{reconstruct_coefficients, ChoiceTensor, UtilityContext};
use crate::config::{M0Policy, RunConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernels::{diffusion_kernel_with_cap, se_kernel};
use crate::network::{CostKind, NetworkModel};
use crate::rng;
use crate::samplers::{
    collapsed_loglik, ess_sample_from, sample_ku, sample_path_choices, slice_sample_scalar, EllipseState, MixtureCell,
};
use crate::statespace::{
    covariance_cholesky, ffbs_sample, gaussian_logpdf, kind_square_sums, variance_from_sums, IntervalInfo, NoiseScale,
    StateParams, VARIANCE_FLOOR_S,
};
use crate::stats::{credible_interval, Interval};

/// Full sampler state Γ plus the path choices Z.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    /// Cost vectors, one per interval.
    pub x: Vec<DVector<f64>>,
    pub sigma: NoiseScale,
    pub tensor: ChoiceTensor,
    pub ku: DMatrix<f64>,
    /// Zero-based path index per trip, in dataset order.
    pub z: Vec<u16>,
}

/// Gibbs blocks in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Block {
    CostStates,
    NoiseScale,
    Factors,
    Baselines,
    FactorCovariance,
    PathChoices,
}

impl Block {
    pub const ORDER: [Block; 6] = [
        Block::CostStates,
        Block::NoiseScale,
        Block::Factors,
        Block::Baselines,
        Block::FactorCovariance,
        Block::PathChoices,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Block::CostStates => "ffbs",
            Block::NoiseScale => "sigma",
            Block::Factors => "factors",
            Block::Baselines => "q",
            Block::FactorCovariance => "ku",
            Block::PathChoices => "z",
        }
    }
}

/// Counters reported per chain.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub slice_fallbacks: usize,
    pub slice_evaluations: usize,
    pub ess_evaluations: usize,
    pub z_prior_fallbacks: usize,
}

/// One stored state.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub iteration: usize,
    pub x: Vec<DVector<f64>>,
    pub sigma: NoiseScale,
    pub tensor: ChoiceTensor,
    pub ku: DMatrix<f64>,
    /// Trips per (cell, path), flattened cell-major.
    pub z_counts: Vec<u32>,
    /// Per-trip labels, when requested.
    pub z: Option<Vec<u16>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainDraws {
    pub chain: usize,
    pub records: Vec<Record>,
    pub diagnostics: Diagnostics,
}

/// Layout of one (O-D, interval) cell in the stored path counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellInfo {
    pub origin: usize,
    pub destination: usize,
    pub t: usize,
    pub n_trips: usize,
    pub n_paths: usize,
}

/// Stored posterior draws from every chain.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub t_len: usize,
    pub n_stations: usize,
    pub rank: usize,
    pub cost_dim: usize,
    pub cells: Vec<CellInfo>,
    pub chains: Vec<ChainDraws>,
}

impl PosteriorDraws {
    pub fn n_records(&self) -> usize {
        self.chains.iter().map(|c| c.records.len()).sum()
    }

    /// All records, chain by chain.
    pub fn records(&self) -> impl Iterator<Item = &Record> + '_ {
        self.chains.iter().flat_map(|c| c.records.iter())
    }

    /// Start offset of each cell in `z_counts`.
    pub fn cell_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.cells.len());
        let mut acc = 0;
        for c in &self.cells {
            offsets.push(acc);
            acc += c.n_paths;
        }
        offsets
    }
}

/// Quantities shared by every chain of one run.
pub struct Prepared<'a> {
    pub net: &'a NetworkModel,
    pub data: &'a Dataset,
    pub cfg: &'a RunConfig,
    pub state_params: StateParams,
    pub spatial_chol: DMatrix<f64>,
    pub temporal_chol: DMatrix<f64>,
}

impl<'a> Prepared<'a> {
    pub fn new(data: &'a Dataset, net: &'a NetworkModel, cfg: &'a RunConfig) -> Result<Self> {
        cfg.validate()?;
        if data.t_len != cfg.t_len() {
            return Err(Error::Dimension(format!(
                "data has {} intervals but the configuration has {}",
                data.t_len,
                cfg.t_len()
            )));
        }
        if data.is_empty() {
            return Err(Error::Empty("no trips to fit".into()));
        }
        let c = net.cost_dim();
        let m0 = match cfg.state.m0 {
            M0Policy::WarmStart => warm_start_mean(data, net, cfg.state.ridge)?,
            M0Policy::Constant => DVector::from_element(c, cfg.state.m0_value),
            M0Policy::Given => {
                if cfg.state.m0_values.len() != c {
                    return Err(Error::Dimension(format!(
                        "state.m0_values has {} entries but the network has {c} attributes",
                        cfg.state.m0_values.len()
                    )));
                }
                DVector::from_column_slice(&cfg.state.m0_values)
            }
        };
        let state_params = StateParams::new(
            DVector::from_element(c, cfg.state.tau2),
            m0,
            DMatrix::identity(c, c) * cfg.state.p0_variance,
        )?;
        let spatial = diffusion_kernel_with_cap(&net.adjacency, cfg.kernels.alpha, cfg.kernels.jitter_cap)?;
        let temporal = se_kernel(cfg.t_len(), &cfg.kernels)?;
        Ok(Self {
            net,
            data,
            cfg,
            state_params,
            spatial_chol: spatial.chol,
            temporal_chol: temporal.chol,
        })
    }
}

/// Initial-state mean from a ridge least-squares fit of each O-D pair's mean
/// travel time to the average routing row of its paths, shrunk toward a
/// common per-attribute value. Floored at the variance floor.
pub fn warm_start_mean(data: &Dataset, net: &NetworkModel, ridge: f64) -> Result<DVector<f64>> {
    let c = net.cost_dim();
    let mut gram = DMatrix::<f64>::zeros(c, c);
    let mut rhs = DVector::<f64>::zeros(c);
    let mut total_y = 0.0;
    let mut total_len = 0.0;
    let mut od_cells: Vec<(usize, usize, f64)> = Vec::new();
    for cell in &data.cells {
        let sum: f64 = data.trips[cell.start..cell.start + cell.len].iter().map(|t| t.y).sum();
        match od_cells.last_mut() {
            Some(last) if last.0 == cell.od => {
                last.1 += cell.len;
                last.2 += sum;
            }
            _ => od_cells.push((cell.od, cell.len, sum)),
        }
    }
    for &(od, count, sum) in &od_cells {
        let set = &net.path_sets[od];
        let mut a = DVector::<f64>::zeros(c);
        for row in &set.rows {
            for &j in row.cols() {
                a[j] += 1.0 / set.len() as f64;
            }
        }
        let n = count as f64;
        let ybar = sum / n;
        gram += &a * a.transpose() * n;
        rhs += &a * (n * ybar);
        total_y += sum;
        total_len += n * a.sum();
    }
    let g = if total_len > 0.0 { total_y / total_len } else { 60.0 };
    for j in 0..c {
        gram[(j, j)] += ridge;
        rhs[j] += ridge * g;
    }
    let chol = gram
        .cholesky()
        .ok_or(Error::NotPositiveDefinite { cap: ridge })?;
    Ok(chol.solve(&rhs).map(|v| v.max(VARIANCE_FLOOR_S)))
}

#[derive(Debug, Clone, Copy)]
enum Factor {
    U,
    V,
    W,
}

fn factor_matrix(t: &ChoiceTensor, f: Factor) -> &DMatrix<f64> {
    match f {
        Factor::U => &t.u,
        Factor::V => &t.v,
        Factor::W => &t.w,
    }
}

fn factor_matrix_mut(t: &mut ChoiceTensor, f: Factor) -> &mut DMatrix<f64> {
    match f {
        Factor::U => &mut t.u,
        Factor::V => &mut t.v,
        Factor::W => &mut t.w,
    }
}

/// Per-(cell, path) quantities the σ conditional needs.
struct PathStats<'s> {
    counts: &'s [usize],
    ybar: &'s [f64],
    m2: &'s [f64],
    means: &'s [f64],
    square_sums: &'s [[f64; 4]],
}

impl PathStats<'_> {
    /// Travel-time log-likelihood of all trips given Z, as a function of σ.
    fn loglik(&self, sigma: &NoiseScale) -> f64 {
        let mut total = 0.0;
        for at in 0..self.counts.len() {
            let n = self.counts[at];
            if n == 0 {
                continue;
            }
            let v = variance_from_sums(&self.square_sums[at], sigma);
            let nf = n as f64;
            let d = self.ybar[at] - self.means[at];
            total += -0.5 * nf * (2.0 * std::f64::consts::PI * v).ln() - (self.m2[at] + nf * d * d) / (2.0 * v);
        }
        total
    }
}

/// One chain of the sampler.
pub struct GibbsSampler<'p, 'a> {
    prep: &'p Prepared<'a>,
    pub chain: usize,
    pub state: ModelState,
    rng: ChaCha8Rng,
    z_seed: u64,
    /// Start of each cell in the flattened per-path arrays.
    offsets: Vec<usize>,
    means: Vec<f64>,
    square_sums: Vec<[f64; 4]>,
    variances: Vec<f64>,
    counts: Vec<usize>,
    ybar: Vec<f64>,
    /// Within-path sum of squared deviations.
    m2: Vec<f64>,
    mixture: Vec<MixtureCell>,
    /// Dataset cell of each mixture cell.
    mixture_cells: Vec<usize>,
    pub diagnostics: Diagnostics,
    record_trace: bool,
    pub trace: Vec<(usize, Block)>,
}

impl<'p, 'a> GibbsSampler<'p, 'a> {
    /// Builds the initial state: x_t = m0, σ at the prior medians, factors
    /// drawn from 0.1× their priors, q = 0 and Z from the MNL prior.
    pub fn new(prep: &'p Prepared<'a>, chain: usize) -> Result<Self> {
        let cfg = prep.cfg;
        let net = prep.net;
        let data = prep.data;
        let mut rng = rng::stream(cfg.seed, &[chain as u64]);
        let z_seed = rng::derive(cfg.seed, &[chain as u64, 0x7a]);
        let n = net.n();
        let t_len = cfg.t_len();
        let r = cfg.rank;

        let omega0 = cfg.priors.omega0_matrix();
        let ku = if cfg.priors.nu0 > 3.0 { &omega0 / (cfg.priors.nu0 - 3.0) } else { omega0.clone() };
        let ku_chol = covariance_cholesky(&ku)?;
        let mut tensor = ChoiceTensor::zeros(n, t_len, r);
        let draw_cols = |m: &mut DMatrix<f64>, chol: &DMatrix<f64>, rng: &mut ChaCha8Rng| {
            for col in 0..m.ncols() {
                let xi = DVector::from_fn(chol.nrows(), |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
                m.set_column(col, &(chol * xi * 0.1));
            }
        };
        draw_cols(&mut tensor.v, &prep.spatial_chol, &mut rng);
        draw_cols(&mut tensor.w, &prep.temporal_chol, &mut rng);
        draw_cols(&mut tensor.u, &ku_chol, &mut rng);
        cfg.model.apply(&mut tensor);

        let sigma = NoiseScale::from_array(cfg.priors.log_sigma_mean.map(f64::exp))?;
        let x = vec![prep.state_params.m0.clone(); t_len];

        let mut offsets = Vec::with_capacity(data.cells.len());
        let mut total = 0;
        for cell in &data.cells {
            offsets.push(total);
            total += cell.n_paths;
        }
        let mut mixture = Vec::new();
        let mut mixture_cells = Vec::new();
        for (i, cell) in data.cells.iter().enumerate() {
            if cell.n_paths > 1 {
                mixture.push(MixtureCell {
                    origin: cell.origin,
                    interval: cell.t,
                    contexts: Vec::with_capacity(cell.n_paths),
                    first_trip: cell.start,
                    log_dens: vec![0.0; cell.len * cell.n_paths],
                });
                mixture_cells.push(i);
            }
        }

        let mut sampler = Self {
            prep,
            chain,
            state: ModelState {
                x,
                sigma,
                tensor,
                ku,
                z: vec![0; data.len()],
            },
            rng,
            z_seed,
            offsets,
            means: vec![0.0; total],
            square_sums: vec![[0.0; 4]; total],
            variances: vec![0.0; total],
            counts: vec![0; total],
            ybar: vec![0.0; total],
            m2: vec![0.0; total],
            mixture,
            mixture_cells,
            diagnostics: Diagnostics::default(),
            record_trace: false,
            trace: Vec::new(),
        };
        sampler.refresh_costs();
        sampler.init_choices();
        sampler.refresh_stats();
        Ok(sampler)
    }

    /// Record the block entry order of every iteration in [`Self::trace`].
    pub fn enable_trace(&mut self) {
        self.record_trace = true;
    }

    fn init_choices(&mut self) {
        let mut logp = Vec::new();
        for mc in &self.mixture {
            mc.log_choice_probs(&self.state.tensor, &mut logp);
            let probs: Vec<f64> = logp.iter().map(|v| v.exp()).collect();
            for m in mc.first_trip..mc.first_trip + mc.n_trips() {
                let u: f64 = self.rng.random();
                self.state.z[m] = crate::samplers::categorical_from_uniform(&probs, u) as u16;
            }
        }
    }

    /// Recomputes path means, squared-cost sums and utility contexts from x.
    fn refresh_costs(&mut self) {
        let data = self.prep.data;
        let net = self.prep.net;
        for (i, cell) in data.cells.iter().enumerate() {
            let x_t = self.state.x[cell.t].as_slice();
            let set = &net.path_sets[cell.od];
            for (k, row) in set.rows.iter().enumerate() {
                let at = self.offsets[i] + k;
                self.means[at] = row.dot(x_t);
                self.square_sums[at] = kind_square_sums(x_t, row, net);
            }
        }
        for (mc, &i) in self.mixture.iter_mut().zip(&self.mixture_cells) {
            let cell = &data.cells[i];
            let x_t = self.state.x[cell.t].as_slice();
            mc.contexts.clear();
            mc.contexts
                .extend(net.path_sets[cell.od].paths.iter().map(|p| UtilityContext::for_path(p, x_t, net)));
        }
        self.refresh_variances();
    }

    /// Recomputes path variances from σ and the per-trip mixture densities.
    fn refresh_variances(&mut self) {
        let sigma = self.state.sigma;
        for (v, s) in self.variances.iter_mut().zip(&self.square_sums) {
            *v = variance_from_sums(s, &sigma);
        }
        let data = self.prep.data;
        for (mc, &i) in self.mixture.iter_mut().zip(&self.mixture_cells) {
            let cell = &data.cells[i];
            let k = cell.n_paths;
            let base = self.offsets[i];
            for (m, dens) in mc.log_dens.chunks_exact_mut(k).enumerate() {
                let y = data.trips[cell.start + m].y;
                for (j, d) in dens.iter_mut().enumerate() {
                    *d = gaussian_logpdf(y, self.means[base + j], self.variances[base + j]);
                }
            }
        }
    }

    /// Per-(cell, path) counts, means and centred sums of squares given Z.
    fn refresh_stats(&mut self) {
        let data = self.prep.data;
        self.counts.fill(0);
        self.ybar.fill(0.0);
        self.m2.fill(0.0);
        for (i, cell) in data.cells.iter().enumerate() {
            let base = self.offsets[i];
            for m in cell.start..cell.start + cell.len {
                let at = base + self.state.z[m] as usize;
                self.counts[at] += 1;
                self.ybar[at] += data.trips[m].y;
            }
            for k in 0..cell.n_paths {
                if self.counts[base + k] > 0 {
                    self.ybar[base + k] /= self.counts[base + k] as f64;
                }
            }
            for m in cell.start..cell.start + cell.len {
                let at = base + self.state.z[m] as usize;
                let d = data.trips[m].y - self.ybar[at];
                self.m2[at] += d * d;
            }
        }
    }

    fn update_costs(&mut self) -> Result<()> {
        let data = self.prep.data;
        let net = self.prep.net;
        let c = net.cost_dim();
        let mut infos: Vec<IntervalInfo> = (0..data.t_len).map(|_| IntervalInfo::new(c)).collect();
        for (i, cell) in data.cells.iter().enumerate() {
            let set = &net.path_sets[cell.od];
            for (k, row) in set.rows.iter().enumerate() {
                let at = self.offsets[i] + k;
                let n = self.counts[at];
                if n > 0 {
                    infos[cell.t].add(row, self.variances[at], n, self.ybar[at] * n as f64);
                }
            }
        }
        self.state.x = ffbs_sample(&self.prep.state_params, &infos, &mut self.rng)?;
        self.refresh_costs();
        Ok(())
    }

    fn update_sigma(&mut self) -> Result<()> {
        let cfg = self.prep.cfg;
        let slice = cfg.slice.sigma()?;
        let stats = PathStats {
            counts: &self.counts,
            ybar: &self.ybar,
            m2: &self.m2,
            means: &self.means,
            square_sums: &self.square_sums,
        };
        for kind in CostKind::ALL {
            let k = kind.index();
            let (mu, var) = (cfg.priors.log_sigma_mean[k], cfg.priors.log_sigma_var[k]);
            let mut trial = self.state.sigma;
            let current = trial.get(kind).ln();
            let draw = slice_sample_scalar(
                current,
                |ls| {
                    trial.set(kind, ls.exp());
                    -(ls - mu) * (ls - mu) / (2.0 * var) + stats.loglik(&trial)
                },
                &slice,
                &mut self.rng,
            )?;
            self.diagnostics.slice_evaluations += draw.evaluations;
            self.diagnostics.slice_fallbacks += usize::from(draw.fell_back);
            self.state.sigma.set(kind, draw.value.exp());
        }
        self.refresh_variances();
        Ok(())
    }

    fn update_factor_column(&mut self, factor: Factor, col: usize, chol: &DMatrix<f64>) -> Result<()> {
        let mut scratch = self.state.tensor.clone();
        let current = factor_matrix(&scratch, factor).column(col).into_owned();
        let current_ll = collapsed_loglik(&self.mixture, &scratch);
        let state = EllipseState {
            current,
            prior_chol: chol,
        };
        let mixture = &self.mixture;
        let draw = ess_sample_from(
            &state,
            current_ll,
            |v| {
                factor_matrix_mut(&mut scratch, factor).set_column(col, v);
                collapsed_loglik(mixture, &scratch)
            },
            &mut self.rng,
        )?;
        self.diagnostics.ess_evaluations += draw.evaluations;
        factor_matrix_mut(&mut self.state.tensor, factor).set_column(col, &draw.value);
        Ok(())
    }

    fn update_factors(&mut self) -> Result<()> {
        let prep = self.prep;
        let model = prep.cfg.model;
        let rank = self.state.tensor.rank();
        if model.samples_v() {
            for r in 0..rank {
                self.update_factor_column(Factor::V, r, &prep.spatial_chol)?;
            }
        }
        if model.samples_w() {
            for r in 0..rank {
                self.update_factor_column(Factor::W, r, &prep.temporal_chol)?;
            }
        }
        if model.samples_u() {
            let chol = covariance_cholesky(&self.state.ku)?;
            for r in 0..rank {
                self.update_factor_column(Factor::U, r, &chol)?;
            }
        }
        Ok(())
    }

    fn update_baselines(&mut self) -> Result<()> {
        let cfg = self.prep.cfg;
        let slice = cfg.slice.q()?;
        for which in (0..cfg.slice.q_sweeps).flat_map(|_| 0..2) {
            let (mu, var) = (cfg.priors.q_mean[which], cfg.priors.q_var[which]);
            let mut scratch = self.state.tensor.clone();
            let current = if which == 0 { scratch.q1 } else { scratch.q2 };
            let mixture = &self.mixture;
            let draw = slice_sample_scalar(
                current,
                |q| {
                    if which == 0 {
                        scratch.q1 = q;
                    } else {
                        scratch.q2 = q;
                    }
                    -(q - mu) * (q - mu) / (2.0 * var) + collapsed_loglik(mixture, &scratch)
                },
                &slice,
                &mut self.rng,
            )?;
            self.diagnostics.slice_evaluations += draw.evaluations;
            self.diagnostics.slice_fallbacks += usize::from(draw.fell_back);
            if which == 0 {
                self.state.tensor.q1 = draw.value;
            } else {
                self.state.tensor.q2 = draw.value;
            }
        }
        Ok(())
    }

    fn update_ku(&mut self) -> Result<()> {
        let priors = &self.prep.cfg.priors;
        self.state.ku = sample_ku(&self.state.tensor.u, &priors.omega0_matrix(), priors.nu0, &mut self.rng)?;
        Ok(())
    }

    fn update_choices(&mut self, iteration: usize) -> Result<()> {
        self.diagnostics.z_prior_fallbacks += sample_path_choices(
            &self.mixture,
            &self.state.tensor,
            self.z_seed,
            iteration as u64,
            &mut self.state.z,
        );
        self.refresh_stats();
        Ok(())
    }

    fn run_block(&mut self, block: Block, iteration: usize) -> Result<()> {
        match block {
            Block::CostStates => self.update_costs(),
            Block::NoiseScale => self.update_sigma(),
            Block::Factors => self.update_factors(),
            Block::Baselines => self.update_baselines(),
            Block::FactorCovariance => self.update_ku(),
            Block::PathChoices => self.update_choices(iteration),
        }
    }

    /// Replaces the state (for example with a checkpoint) and recomputes the
    /// cached quantities that depend on it.
    pub fn set_state(&mut self, state: ModelState) -> Result<()> {
        let data = self.prep.data;
        if state.x.len() != data.t_len || state.z.len() != data.len() {
            return Err(Error::Dimension(format!(
                "state has {} intervals and {} labels, the data needs {} and {}",
                state.x.len(),
                state.z.len(),
                data.t_len,
                data.len()
            )));
        }
        for (i, cell) in data.cells.iter().enumerate() {
            if let Some(m) = (cell.start..cell.start + cell.len).find(|&m| state.z[m] as usize >= cell.n_paths) {
                return Err(Error::Validation(format!("trip {m} has path label {} in cell {i}", state.z[m])));
            }
        }
        self.state = state;
        self.refresh_costs();
        self.refresh_stats();
        Ok(())
    }

    /// One full sweep over all blocks. A failing block aborts with the last
    /// valid state attached.
    pub fn step(&mut self, iteration: usize) -> Result<()> {
        self.step_blocks(iteration, &Block::ORDER)
    }

    /// A sweep over a subset of blocks, in the order given.
    pub fn step_blocks(&mut self, iteration: usize, blocks: &[Block]) -> Result<()> {
        for &block in blocks {
            if self.record_trace {
                self.trace.push((iteration, block));
            }
            let checkpoint = self.state.clone();
            if let Err(e) = self.run_block(block, iteration) {
                return Err(Error::Aborted {
                    iteration,
                    block: block.name().into(),
                    message: e.to_string(),
                    checkpoint: Some(Box::new(checkpoint)),
                });
            }
        }
        Ok(())
    }

    fn snapshot(&self, iteration: usize) -> Record {
        Record {
            iteration,
            x: self.state.x.clone(),
            sigma: self.state.sigma,
            tensor: self.state.tensor.clone(),
            ku: self.state.ku.clone(),
            z_counts: self.counts.iter().map(|&c| c as u32).collect(),
            z: self.prep.cfg.store_labels.then(|| self.state.z.clone()),
        }
    }

    /// Runs burn-in and sampling, returning the stored states.
    pub fn run(mut self) -> Result<ChainDraws> {
        let cfg = self.prep.cfg;
        let total = cfg.burn_in + cfg.samples;
        let mut records = Vec::with_capacity(cfg.samples.div_ceil(cfg.thinning));
        for it in 0..total {
            self.step(it)?;
            if it >= cfg.burn_in && (it - cfg.burn_in).is_multiple_of(cfg.thinning) {
                records.push(self.snapshot(it));
            }
            if (it + 1) % 500 == 0 {
                log::info!("chain {}: iteration {}/{total}", self.chain, it + 1);
            }
        }
        if self.diagnostics.slice_fallbacks > 0 {
            log::warn!(
                "chain {}: {} slice updates hit the shrink cap",
                self.chain,
                self.diagnostics.slice_fallbacks
            );
        }
        Ok(ChainDraws {
            chain: self.chain,
            records,
            diagnostics: self.diagnostics,
        })
    }
}

/// Cell layout of a dataset as stored with the draws.
pub fn cell_layout(data: &Dataset) -> Vec<CellInfo> {
    data.cells
        .iter()
        .map(|c| CellInfo {
            origin: c.origin,
            destination: c.destination,
            t: c.t,
            n_trips: c.len,
            n_paths: c.n_paths,
        })
        .collect()
}

/// Runs every chain (in parallel) and collects the stored draws.
pub fn run(data: &Dataset, net: &NetworkModel, cfg: &RunConfig) -> Result<PosteriorDraws> {
    let prep = Prepared::new(data, net, cfg)?;
    let chains = (0..cfg.chains)
        .into_par_iter()
        .map(|chain| GibbsSampler::new(&prep, chain)?.run())
        .collect::<Result<Vec<_>>>()?;
    let rank = chains
        .first()
        .and_then(|c| c.records.first())
        .map_or(cfg.rank, |r| r.tensor.rank());
    Ok(PosteriorDraws {
        t_len: cfg.t_len(),
        n_stations: net.n(),
        rank,
        cost_dim: net.cost_dim(),
        cells: cell_layout(data),
        chains,
    })
}

/// Posterior summary of one scalar quantity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub block: String,
    pub name: String,
    #[serde(flatten)]
    pub interval: Interval,
}

/// Mean and equal-tailed interval of every Θ[o,t], Φ[o,t], x_t component,
/// σ component, q1 and q2, pooled over chains. Θ and Φ are summarized over
/// the coefficients reconstructed per draw.
pub fn posterior_summary(draws: &PosteriorDraws, net: &NetworkModel, level: f64) -> Result<Vec<SummaryRow>> {
    let records: Vec<&Record> = draws.records().collect();
    if records.len() < 2 {
        return Err(Error::Empty(format!(
            "posterior summary needs at least 2 draws, got {}",
            records.len()
        )));
    }
    let mut rows = Vec::new();
    let mut push = |block: &str, name: String, values: &[f64]| -> Result<()> {
        rows.push(SummaryRow {
            block: block.into(),
            name,
            interval: credible_interval(values, level)?,
        });
        Ok(())
    };
    let coefs = records
        .iter()
        .map(|r| reconstruct_coefficients(&r.tensor))
        .collect::<Result<Vec<_>>>()?;
    for (label, pick) in [("theta", 0usize), ("phi", 1)] {
        for o in 0..draws.n_stations {
            for t in 0..draws.t_len {
                let vals: Vec<f64> = coefs
                    .iter()
                    .map(|c| if pick == 0 { c.theta[(o, t)] } else { c.phi[(o, t)] })
                    .collect();
                push(label, format!("{}[{}]", net.stations[o].id, t + 1), &vals)?;
            }
        }
    }
    for kind in CostKind::ALL {
        let vals: Vec<f64> = records.iter().map(|r| r.sigma.get(kind)).collect();
        push("sigma", kind.label().into(), &vals)?;
    }
    let q1: Vec<f64> = records.iter().map(|r| r.tensor.q1).collect();
    let q2: Vec<f64> = records.iter().map(|r| r.tensor.q2).collect();
    push("q", "q1".into(), &q1)?;
    push("q", "q2".into(), &q2)?;
    for t in 0..draws.t_len {
        for j in 0..draws.cost_dim {
            let vals: Vec<f64> = records.iter().map(|r| r.x[t][j]).collect();
            push("x", format!("{}[{}]", net.attribute_label(j), t + 1), &vals)?;
        }
    }
    Ok(rows)
}
