//! Metro network topology, feasible path sets and the cost-vector layout.
//!
//! The network cost vector is laid out in four contiguous blocks:
//!
//! ```text
//! [ access (l) | in-vehicle (l) | transfer (s) | egress (n) ]
//! ```
//!
//! Access costs are indexed by in-vehicle link (a trip's access is charged to
//! the first link it rides), in-vehicle costs by link, transfer costs by
//! transfer link and egress costs by destination station.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::ops::Range;
use std::path::Path as FsPath;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Default cap on the number of enumerated paths per O-D pair.
pub const DEFAULT_K_MAX: usize = 5;
/// Default detour cap relative to the shortest path's hop length.
pub const DEFAULT_DETOUR_CAP: f64 = 1.5;

/// Kind of a network cost attribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostKind {
    Access,
    InVehicle,
    Transfer,
    Egress,
}

impl CostKind {
    pub const ALL: [CostKind; 4] = [
        CostKind::Access,
        CostKind::InVehicle,
        CostKind::Transfer,
        CostKind::Egress,
    ];

    pub fn index(self) -> usize {
        match self {
            CostKind::Access => 0,
            CostKind::InVehicle => 1,
            CostKind::Transfer => 2,
            CostKind::Egress => 3,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            CostKind::Access => "access",
            CostKind::InVehicle => "in-vehicle",
            CostKind::Transfer => "transfer",
            CostKind::Egress => "egress",
        }
    }
}

// ---------------------------------------------------------------------------
// File schema
// ---------------------------------------------------------------------------

/// Current network file schema version.
pub const NETWORK_SCHEMA_VERSION: u32 = 1;

fn schema_v1() -> u32 {
    NETWORK_SCHEMA_VERSION
}

/// On-disk description of a network (JSON document).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    #[serde(default = "schema_v1")]
    pub schema: u32,
    pub stations: Vec<StationSpec>,
    pub links: Vec<LinkSpec>,
    #[serde(default)]
    pub transfers: Vec<TransferSpec>,
    #[serde(default)]
    pub paths: Vec<OdPathsSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationSpec {
    pub id: String,
    #[serde(default)]
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<f64>,
}

/// A directed in-vehicle link between two adjacent stations on one line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub id: String,
    pub from: String,
    pub to: String,
    pub line: String,
}

/// A transfer movement at a station from one line to another.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferSpec {
    pub id: String,
    pub station: String,
    pub from_line: String,
    pub to_line: String,
}

/// Feasible paths of one O-D pair, each an ordered list of link ids
/// (in-vehicle and transfer ids interleaved in travel order).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OdPathsSpec {
    pub origin: String,
    pub destination: String,
    pub paths: Vec<Vec<String>>,
}

impl NetworkSpec {
    /// Parses a JSON network document, reporting the offending field path and
    /// line/column on schema violations.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let spec: NetworkSpec = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            Error::Schema {
                path: if path.is_empty() || path == "." {
                    "network".to_string()
                } else {
                    format!("network.{path}")
                },
                message: format!("{inner} (line {}, column {})", inner.line(), inner.column()),
            }
        })?;
        if spec.schema > NETWORK_SCHEMA_VERSION {
            return Err(Error::Schema {
                path: "network.schema".into(),
                message: format!(
                    "unsupported schema version {} (this build reads <= {})",
                    spec.schema, NETWORK_SCHEMA_VERSION
                ),
            });
        }
        Ok(spec)
    }

    pub fn load(path: impl AsRef<FsPath>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn save(&self, path: impl AsRef<FsPath>) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    /// SHA-256 over the canonical (compact) serialization.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("network spec serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

// ---------------------------------------------------------------------------
// Runtime model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Station {
    pub id: String,
    pub name: String,
    pub coords: Option<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct Link {
    pub id: String,
    pub from: usize,
    pub to: usize,
    pub line: String,
}

#[derive(Debug, Clone)]
pub struct Transfer {
    pub id: String,
    pub station: usize,
    pub from_line: String,
    pub to_line: String,
}

/// One leg of a path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Segment {
    Ride(usize),
    Transfer(usize),
}

/// A path between two stations as an ordered sequence of rides and transfers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Path {
    pub origin: usize,
    pub destination: usize,
    pub segments: Vec<Segment>,
}

impl Path {
    pub fn rides(&self) -> impl Iterator<Item = usize> + '_ {
        self.segments.iter().filter_map(|s| match s {
            Segment::Ride(l) => Some(*l),
            Segment::Transfer(_) => None,
        })
    }

    pub fn transfers(&self) -> impl Iterator<Item = usize> + '_ {
        self.segments.iter().filter_map(|s| match s {
            Segment::Transfer(t) => Some(*t),
            Segment::Ride(_) => None,
        })
    }

    /// The in-vehicle link carrying the access cost.
    pub fn access_link(&self) -> Option<usize> {
        self.rides().next()
    }

    /// Nominal length used for ordering: rides plus transfers.
    pub fn hop_length(&self) -> usize {
        self.segments.len()
    }
}

/// Sparse binary routing row: sorted column indices of the ones.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutingRow {
    cols: Vec<usize>,
}

impl RoutingRow {
    pub fn from_cols(mut cols: Vec<usize>) -> Self {
        cols.sort_unstable();
        Self { cols }
    }

    pub fn cols(&self) -> &[usize] {
        &self.cols
    }

    pub fn len(&self) -> usize {
        self.cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cols.is_empty()
    }

    pub fn dot(&self, x: &[f64]) -> f64 {
        self.cols.iter().map(|&j| x[j]).sum()
    }

    pub fn to_dense(&self, c: usize) -> Vec<f64> {
        let mut row = vec![0.0; c];
        for &j in &self.cols {
            row[j] = 1.0;
        }
        row
    }
}

/// Feasible paths for one O-D pair with their routing rows.
#[derive(Debug, Clone)]
pub struct PathSet {
    pub od: (usize, usize),
    pub paths: Vec<Path>,
    pub rows: Vec<RoutingRow>,
}

impl PathSet {
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    /// Pairs with more than one path inform the choice model.
    pub fn is_choice_relevant(&self) -> bool {
        self.paths.len() > 1
    }
}

/// Validated network with cost layout and (optional) path sets.
#[derive(Debug, Clone)]
pub struct NetworkModel {
    pub stations: Vec<Station>,
    pub links: Vec<Link>,
    pub transfers: Vec<Transfer>,
    /// Station-level symmetric adjacency with zero diagonal.
    pub adjacency: DMatrix<f64>,
    pub path_sets: Vec<PathSet>,
    station_lookup: HashMap<String, usize>,
    link_lookup: HashMap<String, usize>,
    transfer_lookup: HashMap<String, usize>,
    od_lookup: HashMap<(usize, usize), usize>,
    outgoing: Vec<Vec<usize>>,
    hash: String,
}

/// Validates a network description and builds the runtime model, including
/// any path sets the document lists.
pub fn build_network(spec: &NetworkSpec) -> Result<NetworkModel> {
    let mut ids: HashMap<String, &'static str> = HashMap::new();
    let mut claim = |id: &str, what: &'static str| -> Result<()> {
        if id.is_empty() {
            return Err(Error::Network(format!("empty {what} id")));
        }
        if let Some(prev) = ids.insert(id.to_string(), what) {
            return Err(Error::Network(format!(
                "duplicate id '{id}' ({what}, already used by a {prev})"
            )));
        }
        Ok(())
    };

    let mut stations = Vec::with_capacity(spec.stations.len());
    let mut station_lookup = HashMap::new();
    for (i, s) in spec.stations.iter().enumerate() {
        claim(&s.id, "station")?;
        let coords = match (s.x, s.y) {
            (Some(x), Some(y)) => Some((x, y)),
            (None, None) => None,
            _ => {
                return Err(Error::Network(format!(
                    "station '{}': coordinates need both x and y",
                    s.id
                )))
            }
        };
        station_lookup.insert(s.id.clone(), i);
        stations.push(Station {
            id: s.id.clone(),
            name: s.name.clone(),
            coords,
        });
    }
    if stations.len() < 2 {
        return Err(Error::Network("a network needs at least two stations".into()));
    }

    let station_of = |id: &str, ctx: &str| -> Result<usize> {
        station_lookup
            .get(id)
            .copied()
            .ok_or_else(|| Error::Network(format!("{ctx} references unknown station '{id}'")))
    };

    let mut links = Vec::with_capacity(spec.links.len());
    let mut link_lookup = HashMap::new();
    for (i, l) in spec.links.iter().enumerate() {
        claim(&l.id, "link")?;
        let from = station_of(&l.from, &format!("link '{}'", l.id))?;
        let to = station_of(&l.to, &format!("link '{}'", l.id))?;
        if from == to {
            return Err(Error::Network(format!("link '{}' is a self-loop", l.id)));
        }
        if l.line.is_empty() {
            return Err(Error::Network(format!("link '{}' has an empty line", l.id)));
        }
        link_lookup.insert(l.id.clone(), i);
        links.push(Link {
            id: l.id.clone(),
            from,
            to,
            line: l.line.clone(),
        });
    }
    if links.is_empty() {
        return Err(Error::Network("a network needs at least one link".into()));
    }

    let n = stations.len();
    let mut directed = DMatrix::<f64>::zeros(n, n);
    for l in &links {
        directed[(l.from, l.to)] = 1.0;
    }
    for l in &links {
        let has_reverse = links
            .iter()
            .any(|r| r.from == l.to && r.to == l.from && r.line == l.line);
        if !has_reverse {
            return Err(Error::Network(format!(
                "non-symmetric adjacency: link '{}' ({} -> {}, line {}) has no reverse link",
                l.id, stations[l.from].id, stations[l.to].id, l.line
            )));
        }
    }
    let adjacency = directed.map(|v| if v > 0.0 { 1.0 } else { 0.0 });

    let serves = |station: usize, line: &str| {
        links
            .iter()
            .any(|l| l.line == line && (l.from == station || l.to == station))
    };
    let mut transfers = Vec::with_capacity(spec.transfers.len());
    let mut transfer_lookup = HashMap::new();
    for (i, t) in spec.transfers.iter().enumerate() {
        claim(&t.id, "transfer")?;
        let station = station_of(&t.station, &format!("transfer '{}'", t.id))?;
        if t.from_line == t.to_line {
            return Err(Error::Network(format!(
                "transfer '{}' connects line {} to itself",
                t.id, t.from_line
            )));
        }
        for line in [&t.from_line, &t.to_line] {
            if !serves(station, line) {
                return Err(Error::Network(format!(
                    "transfer '{}': line {} does not serve station '{}'",
                    t.id, line, t.station
                )));
            }
        }
        transfer_lookup.insert(t.id.clone(), i);
        transfers.push(Transfer {
            id: t.id.clone(),
            station,
            from_line: t.from_line.clone(),
            to_line: t.to_line.clone(),
        });
    }

    let mut outgoing = vec![Vec::new(); n];
    for (i, l) in links.iter().enumerate() {
        outgoing[l.from].push(i);
    }

    let mut net = NetworkModel {
        stations,
        links,
        transfers,
        adjacency,
        path_sets: Vec::new(),
        station_lookup,
        link_lookup,
        transfer_lookup,
        od_lookup: HashMap::new(),
        outgoing,
        hash: spec.content_hash(),
    };

    for od in &spec.paths {
        let origin = net.station_index(&od.origin)?;
        let destination = net.station_index(&od.destination)?;
        if od.paths.is_empty() {
            return Err(Error::Path {
                origin: od.origin.clone(),
                destination: od.destination.clone(),
                message: "path list is empty".into(),
            });
        }
        let mut paths = Vec::with_capacity(od.paths.len());
        for (k, ids) in od.paths.iter().enumerate() {
            let path = net.parse_path(origin, destination, ids).map_err(|e| match e {
                Error::Path {
                    origin,
                    destination,
                    message,
                } => Error::Path {
                    origin,
                    destination,
                    message: format!("path {}: {message}", k + 1),
                },
                other => other,
            })?;
            if paths.contains(&path) {
                return Err(net.path_error(origin, destination, format!("path {} is a duplicate", k + 1)));
            }
            paths.push(path);
        }
        net.insert_path_set(origin, destination, paths)?;
    }
    Ok(net)
}

impl NetworkModel {
    /// Station count `n`.
    pub fn n(&self) -> usize {
        self.stations.len()
    }

    /// Directed in-vehicle link count `l`.
    pub fn l(&self) -> usize {
        self.links.len()
    }

    /// Transfer link count `s`.
    pub fn s(&self) -> usize {
        self.transfers.len()
    }

    /// Cost dimension `c = 2l + s + n`.
    pub fn cost_dim(&self) -> usize {
        2 * self.l() + self.s() + self.n()
    }

    /// Hash of the network document this model was built from.
    /// Hash of the serialized topology and path sets as of the last
    /// [`build_network`] or [`Self::refresh_hash`].
    pub fn content_hash(&self) -> &str {
        &self.hash
    }

    /// Recomputes the content hash after path sets were added.
    pub fn refresh_hash(&mut self) {
        self.hash = self.to_spec().content_hash();
    }

    pub fn block_range(&self, kind: CostKind) -> Range<usize> {
        let (l, s, n) = (self.l(), self.s(), self.n());
        match kind {
            CostKind::Access => 0..l,
            CostKind::InVehicle => l..2 * l,
            CostKind::Transfer => 2 * l..2 * l + s,
            CostKind::Egress => 2 * l + s..2 * l + s + n,
        }
    }

    /// Position of `(kind, element)` in the cost vector.
    pub fn position(&self, kind: CostKind, element: usize) -> Result<usize> {
        let range = self.block_range(kind);
        if element >= range.len() {
            return Err(Error::Dimension(format!(
                "{} element {element} out of range (block length {})",
                kind.label(),
                range.len()
            )));
        }
        Ok(range.start + element)
    }

    /// Inverse of [`NetworkModel::position`].
    pub fn element(&self, position: usize) -> Result<(CostKind, usize)> {
        CostKind::ALL
            .iter()
            .find_map(|&kind| {
                let r = self.block_range(kind);
                r.contains(&position).then(|| (kind, position - r.start))
            })
            .ok_or_else(|| {
                Error::Dimension(format!(
                    "cost position {position} out of range (c = {})",
                    self.cost_dim()
                ))
            })
    }

    /// Kind of the attribute at `position`; panics when out of range.
    pub fn kind_of(&self, position: usize) -> CostKind {
        self.element(position).expect("position in range").0
    }

    /// Human-readable label such as `access:A0-1` or `egress:S3`.
    pub fn attribute_label(&self, position: usize) -> String {
        match self.element(position) {
            Ok((kind, e)) => {
                let id = match kind {
                    CostKind::Access | CostKind::InVehicle => &self.links[e].id,
                    CostKind::Transfer => &self.transfers[e].id,
                    CostKind::Egress => &self.stations[e].id,
                };
                format!("{}:{id}", kind.label())
            }
            Err(_) => format!("invalid:{position}"),
        }
    }

    pub fn station_index(&self, id: &str) -> Result<usize> {
        self.station_lookup
            .get(id)
            .copied()
            .ok_or_else(|| Error::Network(format!("unknown station '{id}'")))
    }

    pub fn link_index(&self, id: &str) -> Option<usize> {
        self.link_lookup.get(id).copied()
    }

    pub fn transfer_index(&self, id: &str) -> Option<usize> {
        self.transfer_lookup.get(id).copied()
    }

    pub fn path_set(&self, origin: usize, destination: usize) -> Option<&PathSet> {
        self.od_index(origin, destination).map(|i| &self.path_sets[i])
    }

    pub fn od_index(&self, origin: usize, destination: usize) -> Option<usize> {
        self.od_lookup.get(&(origin, destination)).copied()
    }

    fn path_error(&self, origin: usize, destination: usize, message: String) -> Error {
        Error::Path {
            origin: self.stations.get(origin).map_or("?".into(), |s| s.id.clone()),
            destination: self.stations.get(destination).map_or("?".into(), |s| s.id.clone()),
            message,
        }
    }

    fn parse_path(&self, origin: usize, destination: usize, ids: &[String]) -> Result<Path> {
        let mut segments = Vec::with_capacity(ids.len());
        for id in ids {
            let seg = if let Some(l) = self.link_index(id) {
                Segment::Ride(l)
            } else if let Some(t) = self.transfer_index(id) {
                Segment::Transfer(t)
            } else {
                return Err(self.path_error(origin, destination, format!("unknown link id '{id}'")));
            };
            segments.push(seg);
        }
        let path = Path {
            origin,
            destination,
            segments,
        };
        self.validate_path(&path)?;
        Ok(path)
    }

    /// Connectivity check shared by file-loaded and enumerated paths.
    pub fn validate_path(&self, path: &Path) -> Result<()> {
        let err = |m: String| self.path_error(path.origin, path.destination, m);
        if path.origin >= self.n() || path.destination >= self.n() {
            return Err(err("station index out of range".into()));
        }
        if path.origin == path.destination {
            return Err(err("origin equals destination".into()));
        }
        let first = match path.segments.first() {
            Some(Segment::Ride(l)) => *l,
            Some(Segment::Transfer(_)) => return Err(err("path starts with a transfer".into())),
            None => return Err(err("path is empty".into())),
        };
        if !matches!(path.segments.last(), Some(Segment::Ride(_))) {
            return Err(err("path ends with a transfer".into()));
        }
        let link = |l: usize| -> Result<&Link> {
            self.links
                .get(l)
                .ok_or_else(|| err(format!("link index {l} out of range")))
        };
        if link(first)?.from != path.origin {
            return Err(err(format!(
                "first link '{}' does not leave the origin",
                self.links[first].id
            )));
        }

        let mut visited = vec![false; self.n()];
        visited[path.origin] = true;
        let mut current = link(first)?;
        visited[current.to] = true;
        let mut pending_transfer: Option<usize> = None;
        for seg in &path.segments[1..] {
            match *seg {
                Segment::Transfer(t) => {
                    if pending_transfer.is_some() {
                        return Err(err("consecutive transfers".into()));
                    }
                    if t >= self.s() {
                        return Err(err(format!("transfer index {t} out of range")));
                    }
                    pending_transfer = Some(t);
                }
                Segment::Ride(l) => {
                    let next = link(l)?;
                    if next.from != current.to {
                        return Err(err(format!(
                            "links '{}' and '{}' are not connected",
                            current.id, next.id
                        )));
                    }
                    match pending_transfer.take() {
                        Some(t) => {
                            let tr = &self.transfers[t];
                            if tr.station != current.to
                                || tr.from_line != current.line
                                || tr.to_line != next.line
                            {
                                return Err(err(format!(
                                    "transfer '{}' does not join '{}' to '{}'",
                                    tr.id, current.id, next.id
                                )));
                            }
                        }
                        None => {
                            if next.line != current.line {
                                return Err(err(format!(
                                    "line change from '{}' to '{}' without a transfer link",
                                    current.id, next.id
                                )));
                            }
                        }
                    }
                    if visited[next.to] {
                        return Err(err(format!(
                            "path revisits station '{}'",
                            self.stations[next.to].id
                        )));
                    }
                    visited[next.to] = true;
                    current = next;
                }
            }
        }
        if current.to != path.destination {
            return Err(err(format!(
                "last link '{}' does not reach the destination",
                current.id
            )));
        }
        Ok(())
    }

    /// Adds (or replaces) the path set of an O-D pair after validating every path.
    pub fn insert_path_set(&mut self, origin: usize, destination: usize, paths: Vec<Path>) -> Result<()> {
        if paths.is_empty() {
            return Err(self.path_error(origin, destination, "path set is empty".into()));
        }
        let mut rows = Vec::with_capacity(paths.len());
        for p in &paths {
            if p.origin != origin || p.destination != destination {
                return Err(self.path_error(origin, destination, "path belongs to another O-D pair".into()));
            }
            self.validate_path(p)?;
            rows.push(routing_row(p, self)?);
        }
        let set = PathSet {
            od: (origin, destination),
            paths,
            rows,
        };
        match self.od_lookup.get(&(origin, destination)) {
            Some(&i) => self.path_sets[i] = set,
            None => {
                self.od_lookup.insert((origin, destination), self.path_sets.len());
                self.path_sets.push(set);
            }
        }
        Ok(())
    }

    /// Serializes the topology and current path sets back into a document.
    pub fn to_spec(&self) -> NetworkSpec {
        let seg_id = |s: &Segment| match *s {
            Segment::Ride(l) => self.links[l].id.clone(),
            Segment::Transfer(t) => self.transfers[t].id.clone(),
        };
        NetworkSpec {
            schema: NETWORK_SCHEMA_VERSION,
            stations: self
                .stations
                .iter()
                .map(|s| StationSpec {
                    id: s.id.clone(),
                    name: s.name.clone(),
                    x: s.coords.map(|c| c.0),
                    y: s.coords.map(|c| c.1),
                })
                .collect(),
            links: self
                .links
                .iter()
                .map(|l| LinkSpec {
                    id: l.id.clone(),
                    from: self.stations[l.from].id.clone(),
                    to: self.stations[l.to].id.clone(),
                    line: l.line.clone(),
                })
                .collect(),
            transfers: self
                .transfers
                .iter()
                .map(|t| TransferSpec {
                    id: t.id.clone(),
                    station: self.stations[t.station].id.clone(),
                    from_line: t.from_line.clone(),
                    to_line: t.to_line.clone(),
                })
                .collect(),
            paths: self
                .path_sets
                .iter()
                .map(|ps| OdPathsSpec {
                    origin: self.stations[ps.od.0].id.clone(),
                    destination: self.stations[ps.od.1].id.clone(),
                    paths: ps
                        .paths
                        .iter()
                        .map(|p| p.segments.iter().map(seg_id).collect())
                        .collect(),
                })
                .collect(),
        }
    }

    fn segment_id(&self, s: &Segment) -> &str {
        match *s {
            Segment::Ride(l) => &self.links[l].id,
            Segment::Transfer(t) => &self.transfers[t].id,
        }
    }

    fn find_transfer(&self, station: usize, from_line: &str, to_line: &str) -> Option<usize> {
        self.transfers
            .iter()
            .position(|t| t.station == station && t.from_line == from_line && t.to_line == to_line)
    }

    /// Hop length of the shortest (rides + transfers) route, ignoring the
    /// simple-path restriction.
    fn shortest_hops(&self, origin: usize, destination: usize) -> Option<usize> {
        // state: (station, link just ridden) ; start is the origin with no line
        let mut best: HashMap<(usize, Option<usize>), usize> = HashMap::new();
        let mut heap = BinaryHeap::new();
        heap.push(Reverse((0usize, origin, usize::MAX)));
        best.insert((origin, None), 0);
        while let Some(Reverse((d, station, last))) = heap.pop() {
            if station == destination && last != usize::MAX {
                return Some(d);
            }
            let key = (station, (last != usize::MAX).then_some(last));
            if best.get(&key).is_some_and(|&b| b < d) {
                continue;
            }
            for &l in &self.outgoing[station] {
                let link = &self.links[l];
                let cost = if last == usize::MAX || self.links[last].line == link.line {
                    1
                } else if self.find_transfer(station, &self.links[last].line, &link.line).is_some() {
                    2
                } else {
                    continue;
                };
                let nd = d + cost;
                let nkey = (link.to, Some(l));
                if best.get(&nkey).is_none_or(|&b| nd < b) {
                    best.insert(nkey, nd);
                    heap.push(Reverse((nd, link.to, l)));
                }
            }
        }
        None
    }

    fn collect_simple_paths(&self, origin: usize, destination: usize, bound: usize) -> Vec<Path> {
        struct Walk<'a> {
            net: &'a NetworkModel,
            destination: usize,
            bound: usize,
            visited: Vec<bool>,
            segments: Vec<Segment>,
            out: Vec<Vec<Segment>>,
        }
        impl Walk<'_> {
            fn go(&mut self, station: usize, last: Option<usize>) {
                if station == self.destination && last.is_some() {
                    self.out.push(self.segments.clone());
                    return;
                }
                let net = self.net;
                for &l in &net.outgoing[station] {
                    let link = &net.links[l];
                    if self.visited[link.to] {
                        continue;
                    }
                    let transfer = match last {
                        Some(prev) if net.links[prev].line != link.line => {
                            match net.find_transfer(station, &net.links[prev].line, &link.line) {
                                Some(t) => Some(t),
                                None => continue,
                            }
                        }
                        _ => None,
                    };
                    let added = 1 + usize::from(transfer.is_some());
                    if self.segments.len() + added > self.bound {
                        continue;
                    }
                    if let Some(t) = transfer {
                        self.segments.push(Segment::Transfer(t));
                    }
                    self.segments.push(Segment::Ride(l));
                    self.visited[link.to] = true;
                    self.go(link.to, Some(l));
                    self.visited[link.to] = false;
                    self.segments.truncate(self.segments.len() - added);
                }
            }
        }
        let mut walk = Walk {
            net: self,
            destination,
            bound,
            visited: vec![false; self.n()],
            segments: Vec::new(),
            out: Vec::new(),
        };
        walk.visited[origin] = true;
        walk.go(origin, None);
        walk.out
            .into_iter()
            .map(|segments| Path {
                origin,
                destination,
                segments,
            })
            .collect()
    }
}

/// Builds the binary routing row of a path: one access attribute (first
/// in-vehicle link), every in-vehicle and transfer attribute, and the egress
/// attribute of the destination.
pub fn routing_row(path: &Path, net: &NetworkModel) -> Result<RoutingRow> {
    let first = path
        .access_link()
        .ok_or_else(|| net.path_error(path.origin, path.destination, "path has no in-vehicle link".into()))?;
    let mut cols = Vec::with_capacity(path.segments.len() + 2);
    cols.push(net.position(CostKind::Access, first)?);
    for seg in &path.segments {
        cols.push(match *seg {
            Segment::Ride(l) => net.position(CostKind::InVehicle, l)?,
            Segment::Transfer(t) => net.position(CostKind::Transfer, t)?,
        });
    }
    cols.push(net.position(CostKind::Egress, path.destination)?);
    let row = RoutingRow::from_cols(cols);
    if row.cols.windows(2).any(|w| w[0] == w[1]) {
        return Err(net.path_error(path.origin, path.destination, "path uses an attribute twice".into()));
    }
    Ok(row)
}

/// Enumerates loop-free paths between an O-D pair, ordered by hop length
/// (ties broken by the lexicographic link-id sequence), keeping those within
/// `detour_cap` times the shortest length and at most `k_max` of them.
pub fn enumerate_paths(
    net: &NetworkModel,
    od: (usize, usize),
    k_max: usize,
    detour_cap: f64,
) -> Result<PathSet> {
    let (origin, destination) = od;
    if origin >= net.n() || destination >= net.n() {
        return Err(Error::Network(format!("O-D pair {od:?} out of range")));
    }
    if origin == destination {
        return Err(net.path_error(origin, destination, "origin equals destination".into()));
    }
    if k_max == 0 {
        return Err(Error::Parameter("k_max must be at least 1".into()));
    }
    if detour_cap.is_nan() || detour_cap < 1.0 {
        return Err(Error::Parameter(format!("detour cap must be >= 1, got {detour_cap}")));
    }
    let disconnected = || Error::Disconnected {
        origin: net.stations[origin].id.clone(),
        destination: net.stations[destination].id.clone(),
    };
    let lower = net.shortest_hops(origin, destination).ok_or_else(disconnected)?;
    let cap_of = |len: usize| (detour_cap * len as f64 + 1e-9).floor() as usize;

    let mut paths = net.collect_simple_paths(origin, destination, cap_of(lower));
    let mut shortest = paths.iter().map(Path::hop_length).min();
    if shortest.is_some_and(|s| s > lower) {
        // the unrestricted shortest route revisits a station; widen the bound
        paths = net.collect_simple_paths(origin, destination, cap_of(shortest.unwrap()));
        shortest = paths.iter().map(Path::hop_length).min();
    }
    let shortest = shortest.ok_or_else(disconnected)?;
    let bound = cap_of(shortest);
    paths.retain(|p| p.hop_length() <= bound);
    paths.sort_by(|a, b| {
        a.hop_length().cmp(&b.hop_length()).then_with(|| {
            let ka: Vec<&str> = a.segments.iter().map(|s| net.segment_id(s)).collect();
            let kb: Vec<&str> = b.segments.iter().map(|s| net.segment_id(s)).collect();
            ka.cmp(&kb)
        })
    });
    paths.truncate(k_max);

    let mut rows = Vec::with_capacity(paths.len());
    for p in &paths {
        net.validate_path(p)?;
        rows.push(routing_row(p, net)?);
    }
    Ok(PathSet {
        od,
        paths,
        rows,
    })
}
