//! Ground-truth log: which landmark each client stood at, and when.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::feed::ClientId;
use crate::fingerprint::{csv_err, FingerprintError};

/// `client_id,building,floor,index,enter_ms,exit_ms`; the client stood at
/// the landmark during `[enter_ms, exit_ms)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthRow {
    pub client_id: ClientId,
    pub building: String,
    pub floor: i32,
    pub index: u32,
    pub enter_ms: u64,
    pub exit_ms: u64,
}

impl TruthRow {
    pub fn key(&self) -> (&str, i32, u32) {
        (&self.building, self.floor, self.index)
    }
}

pub fn write_truth(path: &Path, rows: &[TruthRow]) -> Result<(), FingerprintError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|source| FingerprintError::Io {
        path: path.to_owned(),
        source,
    })
}

pub fn read_truth(path: &Path) -> Result<Vec<TruthRow>, FingerprintError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    rdr.deserialize().map(|r| r.map_err(|e| csv_err(path, e))).collect()
}

/// Truth rows indexed per client, in time order.
#[derive(Debug, Clone, Default)]
pub struct TruthLog {
    by_client: BTreeMap<ClientId, Vec<TruthRow>>,
}

impl TruthLog {
    pub fn new(rows: impl IntoIterator<Item = TruthRow>) -> Self {
        let mut by_client: BTreeMap<ClientId, Vec<TruthRow>> = BTreeMap::new();
        for r in rows {
            by_client.entry(r.client_id).or_default().push(r);
        }
        for v in by_client.values_mut() {
            v.sort_by_key(|r| r.enter_ms);
        }
        Self { by_client }
    }

    pub fn clients(&self) -> impl Iterator<Item = &ClientId> {
        self.by_client.keys()
    }

    pub fn rows(&self, client: &ClientId) -> &[TruthRow] {
        self.by_client.get(client).map(Vec::as_slice).unwrap_or(&[])
    }

    /// The row covering the midpoint of `[from_ms, to_ms)`, provided it
    /// covers the whole span.
    pub fn covering(&self, client: &ClientId, from_ms: u64, to_ms: u64) -> Option<&TruthRow> {
        let rows = self.by_client.get(client)?;
        let mid = from_ms + (to_ms.saturating_sub(from_ms)) / 2;
        let i = rows.partition_point(|r| r.exit_ms <= mid);
        rows.get(i)
            .filter(|r| r.enter_ms <= mid)
            .filter(|r| r.enter_ms <= from_ms && to_ms <= r.exit_ms)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(enter: u64, exit: u64, index: u32) -> TruthRow {
        TruthRow {
            client_id: ClientId([7; 20]),
            building: "B".into(),
            floor: 1,
            index,
            enter_ms: enter,
            exit_ms: exit,
        }
    }

    #[test]
    fn covering_needs_the_whole_span() {
        let log = TruthLog::new([row(0, 60_000, 0), row(63_000, 120_000, 1)]);
        let c = ClientId([7; 20]);
        assert_eq!(log.covering(&c, 10_000, 50_000).unwrap().index, 0);
        assert!(log.covering(&c, 30_000, 70_000).is_none());
        assert!(log.covering(&c, 61_000, 62_000).is_none());
        assert_eq!(log.covering(&c, 63_000, 120_000).unwrap().index, 1);
        assert!(log.covering(&ClientId([8; 20]), 0, 1).is_none());
    }

    #[test]
    fn csv_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("truth.csv");
        let rows = vec![row(0, 60_000, 0), row(63_000, 120_000, 1)];
        write_truth(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with(&format!("{},B,1,0,0,60000\n", ClientId([7; 20]))));
        assert_eq!(read_truth(&p).unwrap(), rows);
    }
}
