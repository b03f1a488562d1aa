//! Trip records: CSV ingestion with row-level validation, and grouping of
//! trips into (O-D, interval) cells for the sampler.

use std::fs;
use std::io::Write;
use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{enumerate_paths, NetworkModel};

pub const TRIP_SCHEMA_VERSION: u32 = 1;
const VERSION_PREFIX: &str = "# trips-schema:";
const HEADER: [&str; 4] = ["origin_id", "destination_id", "interval", "travel_time_s"];

/// Default abort threshold for malformed rows.
pub const DEFAULT_MAX_BAD_FRACTION: f64 = 0.001;

/// One tap-in/tap-out record. `t` is zero-based here; files use 1-based
/// intervals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripObservation {
    pub origin: usize,
    pub destination: usize,
    pub t: usize,
    pub y: f64,
}

#[derive(Debug, Deserialize, Serialize)]
struct TripRow {
    origin_id: String,
    destination_id: String,
    interval: String,
    travel_time_s: String,
}

/// Result of reading a trip file.
#[derive(Debug, Default)]
pub struct IngestReport {
    pub trips: Vec<TripObservation>,
    /// Row-level problems (each an [`Error::Row`]).
    pub rejected: Vec<Error>,
    pub total_rows: usize,
}

fn parse_row(row: &TripRow, net: &NetworkModel, t_len: usize) -> std::result::Result<TripObservation, String> {
    let origin = net
        .station_index(&row.origin_id)
        .map_err(|_| format!("unknown origin station '{}'", row.origin_id))?;
    let destination = net
        .station_index(&row.destination_id)
        .map_err(|_| format!("unknown destination station '{}'", row.destination_id))?;
    if origin == destination {
        return Err("origin equals destination".into());
    }
    let interval: usize = row
        .interval
        .trim()
        .parse()
        .map_err(|_| format!("interval '{}' is not a positive integer", row.interval))?;
    if interval == 0 || interval > t_len {
        return Err(format!("interval {interval} out of range 1..={t_len}"));
    }
    let y: f64 = row
        .travel_time_s
        .trim()
        .parse()
        .map_err(|_| format!("travel time '{}' is not a number", row.travel_time_s))?;
    if !(y > 0.0 && y.is_finite()) {
        return Err(format!("travel time must be positive and finite, got {y}"));
    }
    Ok(TripObservation {
        origin,
        destination,
        t: interval - 1,
        y,
    })
}

/// Parses trip CSV text. An optional first line `# trips-schema: N` declares
/// the format version; versions newer than this build are rejected.
pub fn parse_trips(text: &str, file: &str, net: &NetworkModel, t_len: usize, max_bad_fraction: f64) -> Result<IngestReport> {
    let mut body = text;
    let mut first_data_line = 1;
    if let Some(rest) = text.strip_prefix(VERSION_PREFIX) {
        let (line, remainder) = rest.split_once('\n').unwrap_or((rest, ""));
        let version: u32 = line.trim().parse().map_err(|_| Error::Schema {
            path: file.into(),
            message: format!("unreadable schema version '{}'", line.trim()),
        })?;
        if version > TRIP_SCHEMA_VERSION {
            return Err(Error::Schema {
                path: file.into(),
                message: format!("trip schema version {version} is newer than supported version {TRIP_SCHEMA_VERSION}"),
            });
        }
        body = remainder;
        first_data_line = 2;
    }
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(body.as_bytes());
    let header = reader.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(Error::Schema {
            path: file.into(),
            message: format!("expected header {}, found {}", HEADER.join(","), header.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut report = IngestReport::default();
    for (i, rec) in reader.deserialize::<TripRow>().enumerate() {
        report.total_rows += 1;
        // header occupies the first line of the body
        let row_no = first_data_line + 1 + i;
        let outcome = rec
            .map_err(|e| e.to_string())
            .and_then(|row| parse_row(&row, net, t_len));
        match outcome {
            Ok(trip) => report.trips.push(trip),
            Err(message) => report.rejected.push(Error::Row {
                file: file.into(),
                row: row_no,
                message,
            }),
        }
    }
    let bad = report.rejected.len();
    if bad > 0 {
        log::warn!("{file}: rejected {bad} of {} rows", report.total_rows);
        if bad as f64 > max_bad_fraction * report.total_rows as f64 {
            let examples: Vec<String> = report.rejected.iter().take(5).map(|e| e.to_string()).collect();
            return Err(Error::Validation(format!(
                "{bad} of {} rows malformed (limit {:.3}%): {}",
                report.total_rows,
                100.0 * max_bad_fraction,
                examples.join("; ")
            )));
        }
    }
    Ok(report)
}

/// Reads and validates a trip file.
pub fn ingest_trips(path: impl AsRef<FsPath>, net: &NetworkModel, t_len: usize, max_bad_fraction: f64) -> Result<IngestReport> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_trips(&text, &path.display().to_string(), net, t_len, max_bad_fraction)
}

/// Writes trips in the versioned CSV format.
pub fn write_trips(path: impl AsRef<FsPath>, trips: &[TripObservation], net: &NetworkModel) -> Result<()> {
    let mut file = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(file, "{VERSION_PREFIX} {TRIP_SCHEMA_VERSION}")?;
    let mut writer = csv::Writer::from_writer(file);
    writer.write_record(HEADER)?;
    for trip in trips {
        writer.write_record([
            net.stations[trip.origin].id.as_str(),
            net.stations[trip.destination].id.as_str(),
            &(trip.t + 1).to_string(),
            &trip.y.to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// Enumerates path sets for every O-D pair present in `trips` that the
/// network does not already define.
pub fn ensure_path_sets(net: &mut NetworkModel, trips: &[TripObservation], k_max: usize, detour_cap: f64) -> Result<usize> {
    let mut pairs: Vec<(usize, usize)> = trips.iter().map(|t| (t.origin, t.destination)).collect();
    pairs.sort_unstable();
    pairs.dedup();
    let mut added = 0;
    for od in pairs {
        if net.od_index(od.0, od.1).is_none() {
            let set = enumerate_paths(net, od, k_max, detour_cap)?;
            net.insert_path_set(od.0, od.1, set.paths)?;
            added += 1;
        }
    }
    if added > 0 {
        net.refresh_hash();
    }
    Ok(added)
}

/// Trips of one (O-D, interval) combination; `start..start + len` indexes
/// [`Dataset::trips`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TripCell {
    /// Index into the network's path sets.
    pub od: usize,
    pub origin: usize,
    pub destination: usize,
    pub t: usize,
    pub start: usize,
    pub len: usize,
    pub n_paths: usize,
}

/// Trips ordered by (O-D, interval) with the cell index.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub trips: Vec<TripObservation>,
    pub cells: Vec<TripCell>,
    pub t_len: usize,
    /// Input position of each trip.
    pub source: Vec<usize>,
}

impl Dataset {
    /// Groups trips into cells. Every O-D pair must have a path set and every
    /// interval must lie in `0..t_len`. Within a cell the input order is kept.
    pub fn new(trips: Vec<TripObservation>, net: &NetworkModel, t_len: usize) -> Result<Self> {
        if t_len == 0 {
            return Err(Error::Parameter("at least one interval is required".into()));
        }
        let mut keyed = Vec::with_capacity(trips.len());
        for (i, trip) in trips.into_iter().enumerate() {
            let od = net.od_index(trip.origin, trip.destination).ok_or_else(|| {
                Error::Validation(format!(
                    "trip {i}: no path set for {} -> {}",
                    net.stations[trip.origin].id, net.stations[trip.destination].id
                ))
            })?;
            if trip.t >= t_len {
                return Err(Error::Validation(format!("trip {i}: interval {} out of range", trip.t + 1)));
            }
            if !(trip.y > 0.0 && trip.y.is_finite()) {
                return Err(Error::Validation(format!("trip {i}: travel time {} is not positive", trip.y)));
            }
            keyed.push((od, trip.t, i, trip));
        }
        keyed.sort_by_key(|&(od, t, i, _)| (od, t, i));
        let mut cells: Vec<TripCell> = Vec::new();
        let mut ordered = Vec::with_capacity(keyed.len());
        let mut source = Vec::with_capacity(keyed.len());
        for (pos, (od, t, i, trip)) in keyed.into_iter().enumerate() {
            match cells.last_mut() {
                Some(c) if c.od == od && c.t == t => c.len += 1,
                _ => cells.push(TripCell {
                    od,
                    origin: trip.origin,
                    destination: trip.destination,
                    t,
                    start: pos,
                    len: 1,
                    n_paths: net.path_sets[od].len(),
                }),
            }
            ordered.push(trip);
            source.push(i);
        }
        Ok(Self {
            trips: ordered,
            cells,
            t_len,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.trips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trips.is_empty()
    }

    /// SHA-256 of the trips in cell order.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update((self.t_len as u64).to_le_bytes());
        for t in &self.trips {
            h.update((t.origin as u64).to_le_bytes());
            h.update((t.destination as u64).to_le_bytes());
            h.update((t.t as u64).to_le_bytes());
            h.update(t.y.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_network, LinkSpec, NetworkSpec, StationSpec};

    fn net() -> NetworkModel {
        let stations = ["A", "B", "C"]
            .iter()
            .map(|id| StationSpec {
                id: id.to_string(),
                name: String::new(),
                x: None,
                y: None,
            })
            .collect();
        let link = |id: &str, from: &str, to: &str| LinkSpec {
            id: id.into(),
            from: from.into(),
            to: to.into(),
            line: "L".into(),
        };
        let spec = NetworkSpec {
            schema: 1,
            stations,
            links: vec![link("ab", "A", "B"), link("ba", "B", "A"), link("bc", "B", "C"), link("cb", "C", "B")],
            transfers: vec![],
            paths: vec![],
        };
        build_network(&spec).unwrap()
    }

    #[test]
    fn empty_file_with_header() {
        let r = parse_trips("origin_id,destination_id,interval,travel_time_s\n", "t.csv", &net(), 4, 0.001).unwrap();
        assert!(r.trips.is_empty());
        assert_eq!(r.total_rows, 0);
    }

    #[test]
    fn negative_time_names_the_rule() {
        let text = "origin_id,destination_id,interval,travel_time_s\nA,B,1,-5\n";
        let r = parse_trips(text, "t.csv", &net(), 4, 1.0).unwrap();
        assert_eq!(r.rejected.len(), 1);
        let msg = r.rejected[0].to_string();
        assert!(msg.contains("row 2") && msg.contains("positive"), "{msg}");
        assert!(parse_trips(text, "t.csv", &net(), 4, 0.001).is_err());
    }

    #[test]
    fn row_errors() {
        let text = "origin_id,destination_id,interval,travel_time_s\nA,Z,1,50\nA,A,1,50\nA,B,9,50\nA,B,1,50\n";
        let r = parse_trips(text, "t.csv", &net(), 4, 1.0).unwrap();
        assert_eq!(r.trips.len(), 1);
        let msgs: Vec<String> = r.rejected.iter().map(|e| e.to_string()).collect();
        assert!(msgs[0].contains("unknown destination"));
        assert!(msgs[1].contains("origin equals destination"));
        assert!(msgs[2].contains("out of range"));
    }

    #[test]
    fn future_schema_rejected() {
        let text = "# trips-schema: 99\norigin_id,destination_id,interval,travel_time_s\n";
        assert!(matches!(parse_trips(text, "t.csv", &net(), 4, 0.001), Err(Error::Schema { .. })));
        let ok = "# trips-schema: 1\norigin_id,destination_id,interval,travel_time_s\nA,C,2,90.5\n";
        let r = parse_trips(ok, "t.csv", &net(), 4, 0.001).unwrap();
        assert_eq!(r.trips[0].t, 1);
    }

    #[test]
    fn wrong_header_rejected() {
        assert!(parse_trips("o,d,t,y\n", "t.csv", &net(), 4, 0.001).is_err());
    }

    #[test]
    fn cells_group_by_od_and_interval() {
        let mut n = net();
        let trips = vec![
            TripObservation { origin: 0, destination: 2, t: 1, y: 10.0 },
            TripObservation { origin: 0, destination: 1, t: 0, y: 11.0 },
            TripObservation { origin: 0, destination: 2, t: 1, y: 12.0 },
            TripObservation { origin: 0, destination: 2, t: 0, y: 13.0 },
        ];
        assert!(Dataset::new(trips.clone(), &n, 2).is_err());
        assert_eq!(ensure_path_sets(&mut n, &trips, 5, 1.5).unwrap(), 2);
        let d = Dataset::new(trips, &n, 2).unwrap();
        assert_eq!(d.cells.len(), 3);
        assert_eq!(d.cells.iter().map(|c| c.len).sum::<usize>(), 4);
        let big = d.cells.iter().find(|c| c.len == 2).unwrap();
        assert_eq!(d.trips[big.start].y, 10.0);
        assert_eq!(d.trips[big.start + 1].y, 12.0);
    }
}
