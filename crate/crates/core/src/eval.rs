//! Posterior-predictive evaluation, scoring rules, recovery against ground
//! truth and MCMC diagnostics.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::choice::{choice_probabilities, path_utilities, reconstruct_coefficients};
use crate::data::TripObservation;
use crate::error::{Error, Result};
use crate::gibbs::PosteriorDraws;
use crate::network::{CostKind, NetworkModel};
use crate::samplers::categorical_from_uniform;
use crate::simulate::GroundTruth;
use crate::statespace::observation_variance;
use crate::stats::{credible_interval, mean};

/// Posterior-predictive travel times of one trip by compositional sampling:
/// for each used posterior draw, `replicates` times draw a path from the MNL
/// probabilities and a travel time from the observation model.
pub fn predictive_sample(
    trip: &TripObservation,
    draws: &PosteriorDraws,
    net: &NetworkModel,
    replicates: usize,
    max_draws: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let set = net.path_set(trip.origin, trip.destination).ok_or_else(|| {
        Error::Validation(format!(
            "no path set for {} -> {}",
            net.stations.get(trip.origin).map_or("?", |s| &s.id),
            net.stations.get(trip.destination).map_or("?", |s| &s.id)
        ))
    })?;
    if trip.t >= draws.t_len {
        return Err(Error::Validation(format!(
            "interval {} outside the fitted horizon of {}",
            trip.t + 1,
            draws.t_len
        )));
    }
    let total = draws.n_records();
    if total == 0 {
        return Err(Error::Empty("no posterior draws".into()));
    }
    let used = max_draws.map_or(total, |m| m.clamp(1, total));
    // evenly spaced subset when thinning for speed
    let stride = total as f64 / used as f64;
    let records: Vec<_> = draws.records().collect();
    let mut out = Vec::with_capacity(used * replicates);
    for i in 0..used {
        let rec = records[((i as f64 * stride) as usize).min(total - 1)];
        let x_t = rec.x[trip.t].as_slice();
        let (theta, phi) = rec.tensor.coefficient_at(trip.origin, trip.t);
        let probs = choice_probabilities(&path_utilities(x_t, set, net, theta, phi))?;
        let moments: Vec<(f64, f64)> = set
            .rows
            .iter()
            .map(|row| (row.dot(x_t), observation_variance(x_t, &rec.sigma, row, net).sqrt()))
            .collect();
        for _ in 0..replicates {
            let k = categorical_from_uniform(&probs, rng.random());
            let (m, s) = moments[k];
            out.push(m + s * rng.sample::<f64, _>(StandardNormal));
        }
    }
    Ok(out)
}

/// `(rmse, mae)` of predictions against observations.
pub fn point_metrics(observed: &[f64], predicted: &[f64]) -> Result<(f64, f64)> {
    if observed.len() != predicted.len() {
        return Err(Error::Dimension(format!(
            "{} observations but {} predictions",
            observed.len(),
            predicted.len()
        )));
    }
    if observed.is_empty() {
        return Err(Error::Empty("no observations to score".into()));
    }
    let n = observed.len() as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (o, p) in observed.iter().zip(predicted) {
        let d = o - p;
        se += d * d;
        ae += d.abs();
    }
    Ok(((se / n).sqrt(), ae / n))
}

/// Energy-form CRPS estimate `mean|X − y| − ½ mean|X − X'|` from samples,
/// using the sorted-sample identity for the second term.
pub fn crps_from_samples(samples: &[f64], y: f64) -> Result<f64> {
    let m = samples.len();
    if m < 2 {
        return Err(Error::Empty(format!("CRPS needs at least 2 samples, got {m}")));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mf = m as f64;
    let abs_err = sorted.iter().map(|x| (x - y).abs()).sum::<f64>() / mf;
    // Σ_i Σ_j |x_i − x_j| = 2 Σ_i (2i − m − 1) x_(i), i = 1..m
    let spread: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, x)| (2.0 * (i + 1) as f64 - mf - 1.0) * x)
        .sum();
    Ok(abs_err - spread / (mf * mf))
}

/// Effective sample size with autocorrelations truncated by Geyer's initial
/// positive sequence. A constant chain returns its length.
pub fn effective_sample_size(chain: &[f64]) -> Result<f64> {
    let n = chain.len();
    if n < 10 {
        return Err(Error::Empty(format!("ESS needs at least 10 draws, got {n}")));
    }
    let m = mean(chain);
    let centred: Vec<f64> = chain.iter().map(|x| x - m).collect();
    let gamma0 = centred.iter().map(|d| d * d).sum::<f64>() / n as f64;
    if gamma0 <= (1e-12 * m.abs()).powi(2) {
        log::debug!("constant chain; ESS set to its length");
        return Ok(n as f64);
    }
    let autocov = |lag: usize| centred[..n - lag].iter().zip(&centred[lag..]).map(|(a, b)| a * b).sum::<f64>() / n as f64;
    let mut sum_pairs = 0.0;
    let mut k = 0;
    while 2 * k + 1 < n {
        let pair = autocov(2 * k) + autocov(2 * k + 1);
        if pair <= 0.0 {
            break;
        }
        sum_pairs += pair;
        k += 1;
    }
    // τ = −1 + 2 Σ Γ_k / γ0, with Γ_k = γ_{2k} + γ_{2k+1}
    let tau = (-1.0 + 2.0 * sum_pairs / gamma0).max(1.0 / n as f64);
    Ok(n as f64 / tau)
}

/// Error and coverage of one truth-aligned scalar.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecoveryRow {
    pub block: String,
    pub name: String,
    pub truth: f64,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
    pub abs_error: f64,
    pub covered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockCoverage {
    pub count: usize,
    pub coverage: f64,
    pub mean_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecoveryReport {
    pub rows: Vec<RecoveryRow>,
    pub blocks: BTreeMap<String, BlockCoverage>,
}

/// Posterior mean error and interval coverage of Θ, Φ, σ, q and x against
/// the truth.
pub fn recovery_score(draws: &PosteriorDraws, truth: &GroundTruth, net: &NetworkModel, level: f64) -> Result<RecoveryReport> {
    let records: Vec<_> = draws.records().collect();
    if records.is_empty() {
        return Err(Error::Empty("no posterior draws".into()));
    }
    if truth.tensor.n_stations() != draws.n_stations
        || truth.tensor.n_intervals() != draws.t_len
        || truth.x.len() != draws.t_len
        || truth.x.first().map(|x| x.len()) != Some(draws.cost_dim)
    {
        return Err(Error::Dimension("ground truth does not match the fitted dimensions".into()));
    }
    let true_coef = reconstruct_coefficients(&truth.tensor)?;
    let coefs = records
        .iter()
        .map(|r| reconstruct_coefficients(&r.tensor))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut add = |block: &str, name: String, truth: f64, values: Vec<f64>| -> Result<()> {
        let ci = credible_interval(&values, level)?;
        rows.push(RecoveryRow {
            block: block.into(),
            name,
            truth,
            mean: ci.mean,
            lower: ci.lower,
            upper: ci.upper,
            abs_error: (ci.mean - truth).abs(),
            covered: ci.contains(truth),
        });
        Ok(())
    };
    for o in 0..draws.n_stations {
        for t in 0..draws.t_len {
            let name = format!("{}[{}]", net.stations[o].id, t + 1);
            add("theta", name.clone(), true_coef.theta[(o, t)], coefs.iter().map(|c| c.theta[(o, t)]).collect())?;
            add("phi", name, true_coef.phi[(o, t)], coefs.iter().map(|c| c.phi[(o, t)]).collect())?;
        }
    }
    for kind in CostKind::ALL {
        add("sigma", kind.label().into(), truth.sigma.get(kind), records.iter().map(|r| r.sigma.get(kind)).collect())?;
    }
    add("q", "q1".into(), truth.tensor.q1, records.iter().map(|r| r.tensor.q1).collect())?;
    add("q", "q2".into(), truth.tensor.q2, records.iter().map(|r| r.tensor.q2).collect())?;
    for t in 0..draws.t_len {
        for j in 0..draws.cost_dim {
            add(
                "x",
                format!("{}[{}]", net.attribute_label(j), t + 1),
                truth.x[t][j],
                records.iter().map(|r| r.x[t][j]).collect(),
            )?;
        }
    }
    let mut blocks: BTreeMap<String, BlockCoverage> = BTreeMap::new();
    for row in &rows {
        let b = blocks.entry(row.block.clone()).or_insert(BlockCoverage {
            count: 0,
            coverage: 0.0,
            mean_abs_error: 0.0,
        });
        b.count += 1;
        b.coverage += f64::from(u8::from(row.covered));
        b.mean_abs_error += row.abs_error;
    }
    for b in blocks.values_mut() {
        b.coverage /= b.count as f64;
        b.mean_abs_error /= b.count as f64;
    }
    Ok(RecoveryReport { rows, blocks })
}

/// Station × interval grid of |posterior mean − truth| for Θ (or Φ), as
/// long-format CSV text with columns `station,interval,abs_error`.
pub fn coefficient_error_heatmap(report: &RecoveryReport, block: &str) -> String {
    let mut out = String::from("station,interval,abs_error\n");
    for row in report.rows.iter().filter(|r| r.block == block) {
        let (station, rest) = row.name.split_once('[').unwrap_or((&row.name, "]"));
        out.push_str(&format!("{station},{},{}\n", rest.trim_end_matches(']'), row.abs_error));
    }
    out
}

/// Per-chain and pooled ESS of one monitored scalar.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EssRow {
    pub name: String,
    pub per_chain: Vec<f64>,
    /// Sum of the per-chain ESS.
    pub pooled: f64,
    pub flagged: bool,
}

/// Two-chain agreement of one Θ entry.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgreementRow {
    pub name: String,
    pub means: Vec<f64>,
    /// Monte-Carlo standard error of the difference of chain means.
    pub mc_error: f64,
    pub agrees: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub threshold: f64,
    pub ess: Vec<EssRow>,
    /// Fraction of monitored scalars with pooled ESS above the threshold.
    pub ess_pass_rate: f64,
    /// Empty with fewer than two chains.
    pub agreement: Vec<AgreementRow>,
    pub agreement_rate: f64,
}

/// Number of Θ/Φ entries monitored by [`convergence_report`].
pub const MONITORED_COEFFICIENTS: usize = 20;

/// Station-interval cells of the monitored Θ/Φ entries: half Θ, half Φ,
/// evenly spread over the grid.
pub fn monitored_coefficients(n_stations: usize, t_len: usize) -> Vec<(&'static str, usize, usize)> {
    let cells = n_stations * t_len;
    let half = MONITORED_COEFFICIENTS / 2;
    let mut out = Vec::with_capacity(MONITORED_COEFFICIENTS);
    for (block, shift) in [("theta", 0), ("phi", 1)] {
        for i in 0..half.min(cells) {
            let k = (i * cells / half.min(cells) + shift * cells / (2 * half)) % cells;
            out.push((block, k / t_len, k % t_len));
        }
    }
    out
}

/// ESS of q1, q2, the σ components and the monitored Θ/Φ entries, flagging
/// pooled ESS at or below `threshold`; and whether the first two chains'
/// posterior means of every Θ entry differ by at most three times the Monte-Carlo
/// error of the difference.
pub fn convergence_report(draws: &PosteriorDraws, net: &NetworkModel, threshold: f64) -> Result<ConvergenceReport> {
    if draws.chains.is_empty() || draws.chains.iter().any(|c| c.records.is_empty()) {
        return Err(Error::Empty("every chain needs stored draws".into()));
    }
    let coefs = draws
        .chains
        .iter()
        .map(|c| c.records.iter().map(|r| reconstruct_coefficients(&r.tensor)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let mut series: Vec<(String, Vec<Vec<f64>>)> = Vec::new();
    let per_chain = |f: &dyn Fn(&crate::gibbs::Record) -> f64| -> Vec<Vec<f64>> {
        draws.chains.iter().map(|c| c.records.iter().map(f).collect()).collect()
    };
    series.push(("q1".into(), per_chain(&|r| r.tensor.q1)));
    series.push(("q2".into(), per_chain(&|r| r.tensor.q2)));
    for kind in CostKind::ALL {
        series.push((format!("sigma_{}", kind.label()), per_chain(&|r| r.sigma.get(kind))));
    }
    for (block, o, t) in monitored_coefficients(draws.n_stations, draws.t_len) {
        let values = coefs
            .iter()
            .map(|chain| {
                chain
                    .iter()
                    .map(|c| if block == "theta" { c.theta[(o, t)] } else { c.phi[(o, t)] })
                    .collect()
            })
            .collect();
        series.push((format!("{block}_{}[{}]", net.stations[o].id, t + 1), values));
    }
    let mut ess = Vec::with_capacity(series.len());
    for (name, chains) in series {
        let per_chain = chains.iter().map(|c| effective_sample_size(c)).collect::<Result<Vec<_>>>()?;
        let pooled: f64 = per_chain.iter().sum();
        ess.push(EssRow {
            name,
            per_chain,
            pooled,
            flagged: pooled <= threshold,
        });
    }
    let ess_pass_rate = ess.iter().filter(|r| !r.flagged).count() as f64 / ess.len() as f64;
    let mut agreement = Vec::new();
    if coefs.len() >= 2 {
        for o in 0..draws.n_stations {
            for t in 0..draws.t_len {
                let mut means = Vec::with_capacity(2);
                let mut var = 0.0;
                for chain in &coefs[..2] {
                    let v: Vec<f64> = chain.iter().map(|c| c.theta[(o, t)]).collect();
                    let e = effective_sample_size(&v)?;
                    var += crate::stats::sd(&v).powi(2) / e;
                    means.push(mean(&v));
                }
                let mc_error = var.sqrt();
                agreement.push(AgreementRow {
                    name: format!("theta_{}[{}]", net.stations[o].id, t + 1),
                    agrees: (means[0] - means[1]).abs() <= 3.0 * mc_error,
                    means,
                    mc_error,
                });
            }
        }
    }
    let agreement_rate = if agreement.is_empty() {
        0.0
    } else {
        agreement.iter().filter(|a| a.agrees).count() as f64 / agreement.len() as f64
    };
    Ok(ConvergenceReport {
        threshold,
        ess,
        ess_pass_rate,
        agreement,
        agreement_rate,
    })
}

/// Scores for a set of validation trips.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub rmse: f64,
    pub mae: f64,
    pub crps: f64,
    pub trips: usize,
    pub per_od: Vec<OdMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OdMetrics {
    pub origin: String,
    pub destination: String,
    pub trips: usize,
    pub rmse: f64,
    pub mae: f64,
    pub crps: f64,
}

/// Predictive RMSE, MAE (against the predictive mean) and mean CRPS over
/// `trips`, with a per-O-D breakdown.
pub fn evaluate_predictions(
    trips: &[TripObservation],
    draws: &PosteriorDraws,
    net: &NetworkModel,
    replicates: usize,
    max_draws: Option<usize>,
    seed: u64,
) -> Result<MetricReport> {
    if trips.is_empty() {
        return Err(Error::Empty("no validation trips".into()));
    }
    let mut observed = Vec::with_capacity(trips.len());
    let mut predicted = Vec::with_capacity(trips.len());
    let mut crps = Vec::with_capacity(trips.len());
    for (i, trip) in trips.iter().enumerate() {
        let mut rng = crate::rng::stream(seed, &[i as u64]);
        let samples = predictive_sample(trip, draws, net, replicates, max_draws, &mut rng)?;
        observed.push(trip.y);
        predicted.push(mean(&samples));
        crps.push(crps_from_samples(&samples, trip.y)?);
    }
    let (rmse, mae) = point_metrics(&observed, &predicted)?;
    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, t) in trips.iter().enumerate() {
        groups.entry((t.origin, t.destination)).or_default().push(i);
    }
    let mut per_od = Vec::with_capacity(groups.len());
    for ((o, d), idx) in groups {
        let obs: Vec<f64> = idx.iter().map(|&i| observed[i]).collect();
        let pred: Vec<f64> = idx.iter().map(|&i| predicted[i]).collect();
        let (r, m) = point_metrics(&obs, &pred)?;
        per_od.push(OdMetrics {
            origin: net.stations[o].id.clone(),
            destination: net.stations[d].id.clone(),
            trips: idx.len(),
            rmse: r,
            mae: m,
            crps: idx.iter().map(|&i| crps[i]).sum::<f64>() / idx.len() as f64,
        });
    }
    Ok(MetricReport {
        rmse,
        mae,
        crps: mean(&crps),
        trips: trips.len(),
        per_od,
    })
}

/// Holds out `fraction` of the trips of every multi-path O-D pair (rounded
/// to the nearest count); single-path trips all stay in training. Order
/// within each part follows the input.
pub fn stratified_split(
    trips: &[TripObservation],
    net: &NetworkModel,
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<TripObservation>, Vec<TripObservation>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Parameter(format!("split fraction must lie in (0, 1), got {fraction}")));
    }
    let mut strata: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, t) in trips.iter().enumerate() {
        if net.path_set(t.origin, t.destination).is_some_and(|s| s.is_choice_relevant()) {
            strata.entry((t.origin, t.destination)).or_default().push(i);
        }
    }
    let mut held = vec![false; trips.len()];
    for ((o, d), mut idx) in strata {
        let k = (fraction * idx.len() as f64).round() as usize;
        if k == 0 || k >= idx.len() {
            if k >= idx.len() {
                log::info!("stratum {o}->{d} too small to split; kept in training");
            }
            continue;
        }
        idx.shuffle(rng);
        for &i in &idx[..k] {
            held[i] = true;
        }
    }
    let mut train = Vec::new();
    let mut valid = Vec::new();
    for (t, h) in trips.iter().zip(held) {
        if h {
            valid.push(*t);
        } else {
            train.push(*t);
        }
    }
    Ok((train, valid))
}
