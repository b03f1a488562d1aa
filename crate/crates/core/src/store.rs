//! On-disk posterior store: one CSV per parameter block plus a JSON
//! manifest carrying hashes of the configuration, network, data and every
//! file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path as FsPath;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::choice::{ChoiceTensor, ModelVariant};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::gibbs::{CellInfo, ChainDraws, Diagnostics, PosteriorDraws, Record};
use crate::network::NetworkModel;
use crate::statespace::NoiseScale;

pub const STORE_FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config_hash: String,
    pub network_hash: String,
    pub data_hash: String,
    pub seed: u64,
    pub chains: usize,
    pub burn_in: usize,
    pub samples: usize,
    pub thinning: usize,
    pub rank: usize,
    pub model: ModelVariant,
    pub t_len: usize,
    pub n_stations: usize,
    pub cost_dim: usize,
    pub records_per_chain: Vec<usize>,
    pub diagnostics: Vec<Diagnostics>,
    /// SHA-256 of each data file.
    pub files: BTreeMap<String, String>,
}

impl Manifest {
    pub fn load(dir: impl AsRef<FsPath>) -> Result<Self> {
        let text = fs::read_to_string(dir.as_ref().join(MANIFEST))?;
        let m: Self = serde_json::from_str(&text)?;
        if m.format_version > STORE_FORMAT_VERSION {
            return Err(Error::Schema {
                path: MANIFEST.into(),
                message: format!("store format {} is newer than supported {STORE_FORMAT_VERSION}", m.format_version),
            });
        }
        Ok(m)
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn row_prefix(out: &mut String, chain: usize, iteration: usize) {
    let _ = write!(out, "{chain},{iteration}");
}

fn push_values(out: &mut String, values: impl IntoIterator<Item = f64>) {
    for v in values {
        let _ = write!(out, ",{v}");
    }
    out.push('\n');
}

fn factor_csv(draws: &PosteriorDraws, pick: impl Fn(&ChoiceTensor) -> &DMatrix<f64>) -> String {
    let mut out = String::from("chain,iteration,row");
    for r in 0..draws.rank {
        let _ = write!(out, ",f{}", r + 1);
    }
    out.push('\n');
    for ch in &draws.chains {
        for rec in &ch.records {
            let m = pick(&rec.tensor);
            for i in 0..m.nrows() {
                row_prefix(&mut out, ch.chain, rec.iteration);
                let _ = write!(out, ",{i}");
                push_values(&mut out, m.row(i).iter().copied());
            }
        }
    }
    out
}

/// Serializes draws to `(file name, contents)` pairs in a fixed order.
fn render(draws: &PosteriorDraws, net: &NetworkModel, store_labels: bool) -> Vec<(&'static str, String)> {
    let mut files = Vec::new();

    let mut cells = String::from("cell,origin_id,destination_id,interval,n_trips,n_paths\n");
    for (i, c) in draws.cells.iter().enumerate() {
        let _ = writeln!(
            cells,
            "{i},{},{},{},{},{}",
            net.stations[c.origin].id,
            net.stations[c.destination].id,
            c.t + 1,
            c.n_trips,
            c.n_paths
        );
    }
    files.push(("cells.csv", cells));

    let mut sigma = String::from("chain,iteration,access,invehicle,transfer,egress\n");
    let mut q = String::from("chain,iteration,q1,q2\n");
    let mut ku = String::from("chain,iteration,k11,k12,k22\n");
    for ch in &draws.chains {
        for rec in &ch.records {
            row_prefix(&mut sigma, ch.chain, rec.iteration);
            push_values(&mut sigma, rec.sigma.as_array());
            row_prefix(&mut q, ch.chain, rec.iteration);
            push_values(&mut q, [rec.tensor.q1, rec.tensor.q2]);
            row_prefix(&mut ku, ch.chain, rec.iteration);
            push_values(&mut ku, [rec.ku[(0, 0)], rec.ku[(0, 1)], rec.ku[(1, 1)]]);
        }
    }
    files.push(("sigma.csv", sigma));
    files.push(("q.csv", q));
    files.push(("ku.csv", ku));
    files.push(("u.csv", factor_csv(draws, |t| &t.u)));
    files.push(("v.csv", factor_csv(draws, |t| &t.v)));
    files.push(("w.csv", factor_csv(draws, |t| &t.w)));

    let mut x = String::from("chain,iteration,interval");
    for j in 0..draws.cost_dim {
        let _ = write!(x, ",{}", net.attribute_label(j));
    }
    x.push('\n');
    for ch in &draws.chains {
        for rec in &ch.records {
            for (t, xt) in rec.x.iter().enumerate() {
                row_prefix(&mut x, ch.chain, rec.iteration);
                let _ = write!(x, ",{}", t + 1);
                push_values(&mut x, xt.iter().copied());
            }
        }
    }
    files.push(("x.csv", x));

    let mut z = String::from("chain,iteration");
    for (i, c) in draws.cells.iter().enumerate() {
        for k in 0..c.n_paths {
            let _ = write!(z, ",c{i}p{}", k + 1);
        }
    }
    z.push('\n');
    for ch in &draws.chains {
        for rec in &ch.records {
            row_prefix(&mut z, ch.chain, rec.iteration);
            for n in &rec.z_counts {
                let _ = write!(z, ",{n}");
            }
            z.push('\n');
        }
    }
    files.push(("z_counts.csv", z));

    if store_labels {
        let mut labels = String::from("chain,iteration,labels\n");
        for ch in &draws.chains {
            for rec in &ch.records {
                if let Some(zs) = &rec.z {
                    row_prefix(&mut labels, ch.chain, rec.iteration);
                    labels.push(',');
                    for &k in zs {
                        labels.push(char::from_digit(u32::from(k) + 1, 36).unwrap_or('?'));
                    }
                    labels.push('\n');
                }
            }
        }
        files.push(("z_labels.csv", labels));
    }
    files
}

/// Writes draws and the manifest into `dir` (created if missing).
pub fn write_store(
    dir: impl AsRef<FsPath>,
    draws: &PosteriorDraws,
    net: &NetworkModel,
    cfg: &RunConfig,
    data_hash: &str,
) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut hashes = BTreeMap::new();
    for (name, contents) in render(draws, net, cfg.store_labels) {
        hashes.insert(name.to_string(), sha256_hex(contents.as_bytes()));
        fs::write(dir.join(name), contents)?;
    }
    let manifest = Manifest {
        format_version: STORE_FORMAT_VERSION,
        config_hash: cfg.content_hash(),
        network_hash: net.content_hash().to_string(),
        data_hash: data_hash.to_string(),
        seed: cfg.seed,
        chains: cfg.chains,
        burn_in: cfg.burn_in,
        samples: cfg.samples,
        thinning: cfg.thinning,
        rank: draws.rank,
        model: cfg.model,
        t_len: draws.t_len,
        n_stations: draws.n_stations,
        cost_dim: draws.cost_dim,
        records_per_chain: draws.chains.iter().map(|c| c.records.len()).collect(),
        diagnostics: draws.chains.iter().map(|c| c.diagnostics.clone()).collect(),
        files: hashes,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    fs::write(dir.join("config.toml"), cfg.to_toml_string())?;
    Ok(manifest)
}

struct Table {
    file: String,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn read(dir: &FsPath, name: &str, manifest: &Manifest) -> Result<Self> {
        let bytes = fs::read(dir.join(name))?;
        if let Some(expected) = manifest.files.get(name) {
            if &sha256_hex(&bytes) != expected {
                return Err(Error::Validation(format!("{name} does not match its manifest checksum")));
            }
        }
        let mut reader = csv::Reader::from_reader(bytes.as_slice());
        let rows = reader
            .records()
            .map(|r| r.map(|rec| rec.iter().map(str::to_string).collect()))
            .collect::<std::result::Result<Vec<Vec<String>>, _>>()?;
        Ok(Self {
            file: name.to_string(),
            rows,
        })
    }

    fn num<T: std::str::FromStr>(&self, row: usize, col: usize) -> Result<T> {
        self.rows[row]
            .get(col)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Row {
                file: self.file.clone(),
                row: row + 2,
                message: format!("column {} is missing or not a number", col + 1),
            })
    }
}

/// Reads a store written by [`write_store`], verifying file checksums.
pub fn read_store(dir: impl AsRef<FsPath>, net: &NetworkModel) -> Result<(Manifest, PosteriorDraws)> {
    let dir = dir.as_ref();
    let manifest = Manifest::load(dir)?;
    if manifest.network_hash != net.content_hash() {
        return Err(Error::Validation(
            "posterior store was fitted on a different network (hash mismatch)".into(),
        ));
    }
    let cells_t = Table::read(dir, "cells.csv", &manifest)?;
    let mut cells = Vec::with_capacity(cells_t.rows.len());
    for (i, row) in cells_t.rows.iter().enumerate() {
        cells.push(CellInfo {
            origin: net.station_index(&row[1])?,
            destination: net.station_index(&row[2])?,
            t: cells_t.num::<usize>(i, 3)? - 1,
            n_trips: cells_t.num(i, 4)?,
            n_paths: cells_t.num(i, 5)?,
        });
    }
    let (t_len, n, r, c) = (manifest.t_len, manifest.n_stations, manifest.rank, manifest.cost_dim);
    let sigma_t = Table::read(dir, "sigma.csv", &manifest)?;
    let q_t = Table::read(dir, "q.csv", &manifest)?;
    let ku_t = Table::read(dir, "ku.csv", &manifest)?;
    let u_t = Table::read(dir, "u.csv", &manifest)?;
    let v_t = Table::read(dir, "v.csv", &manifest)?;
    let w_t = Table::read(dir, "w.csv", &manifest)?;
    let x_t = Table::read(dir, "x.csv", &manifest)?;
    let z_t = Table::read(dir, "z_counts.csv", &manifest)?;
    let labels_t = if manifest.files.contains_key("z_labels.csv") {
        Some(Table::read(dir, "z_labels.csv", &manifest)?)
    } else {
        None
    };
    let total: usize = manifest.records_per_chain.iter().sum();
    for (t, per) in [(&sigma_t, 1), (&q_t, 1), (&ku_t, 1), (&u_t, 2), (&v_t, n), (&w_t, t_len), (&x_t, t_len), (&z_t, 1)] {
        if t.rows.len() != total * per {
            return Err(Error::Validation(format!(
                "{} has {} rows, expected {}",
                t.file,
                t.rows.len(),
                total * per
            )));
        }
    }
    let matrix = |t: &Table, rec: usize, rows: usize| -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(rows, r);
        for i in 0..rows {
            for j in 0..r {
                m[(i, j)] = t.num(rec * rows + i, 3 + j)?;
            }
        }
        Ok(m)
    };
    let mut chains = Vec::with_capacity(manifest.records_per_chain.len());
    let mut rec_idx = 0;
    for (chain, &count) in manifest.records_per_chain.iter().enumerate() {
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let i = rec_idx;
            let sigma = NoiseScale::from_array([
                sigma_t.num(i, 2)?,
                sigma_t.num(i, 3)?,
                sigma_t.num(i, 4)?,
                sigma_t.num(i, 5)?,
            ])?;
            let (k11, k12, k22): (f64, f64, f64) = (ku_t.num(i, 2)?, ku_t.num(i, 3)?, ku_t.num(i, 4)?);
            let tensor = ChoiceTensor::new(
                matrix(&u_t, i, 2)?,
                matrix(&v_t, i, n)?,
                matrix(&w_t, i, t_len)?,
                q_t.num(i, 2)?,
                q_t.num(i, 3)?,
            )?;
            let mut x = Vec::with_capacity(t_len);
            for t in 0..t_len {
                let row = i * t_len + t;
                x.push(DVector::from_iterator(
                    c,
                    (0..c).map(|j| x_t.num::<f64>(row, 3 + j)).collect::<Result<Vec<_>>>()?,
                ));
            }
            let width = z_t.rows[i].len().saturating_sub(2);
            let z_counts = (0..width).map(|j| z_t.num::<u32>(i, 2 + j)).collect::<Result<Vec<_>>>()?;
            let z = match &labels_t {
                Some(lt) => Some(
                    lt.rows[i][2]
                        .chars()
                        .map(|ch| {
                            ch.to_digit(36)
                                .filter(|d| *d >= 1)
                                .map(|d| (d - 1) as u16)
                                .ok_or_else(|| Error::Validation("z_labels.csv has an invalid label".into()))
                        })
                        .collect::<Result<Vec<_>>>()?,
                ),
                None => None,
            };
            records.push(Record {
                iteration: sigma_t.num(i, 1)?,
                x,
                sigma,
                tensor,
                ku: DMatrix::from_row_slice(2, 2, &[k11, k12, k12, k22]),
                z_counts,
                z,
            });
            rec_idx += 1;
        }
        chains.push(ChainDraws {
            chain,
            records,
            diagnostics: manifest.diagnostics.get(chain).cloned().unwrap_or_default(),
        });
    }
    let draws = PosteriorDraws {
        t_len,
        n_stations: n,
        rank: r,
        cost_dim: c,
        cells,
        chains,
    };
    Ok((manifest, draws))
}
