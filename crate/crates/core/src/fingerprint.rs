//! Offline fingerprint maps, online fingerprints, the AP directory and the
//! on-disk fingerprint database.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feed::{Band, ClassifiedRecord, ClientId, FrameClass, MacAddr};

/// Default offline survey length per landmark.
pub const DEFAULT_OFFLINE_DURATION_S: u64 = 300;
/// Default online observation horizon.
pub const DEFAULT_ONLINE_WINDOW_S: u64 = 40;

pub const DB_FORMAT: &str = "wiloc-fingerprint-db";
pub const DB_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FingerprintError {
    #[error("no scanning records for landmark {landmark} in band {band}")]
    EmptyFingerprint { landmark: String, band: Band },
    #[error("no observations for client {client} in band {band}")]
    NoObservation { client: ClientId, band: Band },
    #[error("AP {0} is not in the AP directory")]
    UnknownAp(MacAddr),
    #[error("duplicate fingerprint for landmark {landmark} in band {band}")]
    DuplicateFingerprint { landmark: String, band: Band },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: corrupt fingerprint database: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("{path}: unsupported database version {found} (expected {expected})")]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("{path}: line {line}: {reason}")]
    Table {
        path: PathBuf,
        line: u64,
        reason: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Position {
    pub x_m: f64,
    pub y_m: f64,
}

impl Position {
    pub fn new(x_m: f64, y_m: f64) -> Self {
        Self { x_m, y_m }
    }

    pub fn distance(&self, other: &Position) -> f64 {
        (self.x_m - other.x_m).hypot(self.y_m - other.y_m)
    }
}

/// A calibrated indoor position, ordered by `(building, floor, index)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Landmark {
    pub building: String,
    pub floor: i32,
    pub index: u32,
    pub position: Position,
}

impl Landmark {
    pub fn new(building: impl Into<String>, floor: i32, index: u32, x_m: f64, y_m: f64) -> Self {
        Self {
            building: building.into(),
            floor,
            index,
            position: Position::new(x_m, y_m),
        }
    }

    pub fn key(&self) -> (&str, i32, u32) {
        (&self.building, self.floor, self.index)
    }

    pub fn label(&self) -> String {
        format!("{}/{}/{}", self.building, self.floor, self.index)
    }
}

impl PartialEq for Landmark {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key() && self.position == other.position
    }
}

impl Eq for Landmark {}

impl PartialOrd for Landmark {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Landmark {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key()
            .cmp(&other.key())
            .then(self.position.x_m.total_cmp(&other.position.x_m))
            .then(self.position.y_m.total_cmp(&other.position.y_m))
    }
}

/// Shared accessors for offline and online fingerprints.
pub trait Fingerprint {
    fn band(&self) -> Band;
    fn entries(&self) -> &BTreeMap<MacAddr, i16>;
}

/// Number of distinct APs in a fingerprint.
pub fn cardinality<F: Fingerprint + ?Sized>(fp: &F) -> usize {
    fp.entries().len()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OfflineFingerprint {
    pub landmark: Landmark,
    pub band: Band,
    pub entries: BTreeMap<MacAddr, i16>,
    pub sample_count: BTreeMap<MacAddr, u32>,
}

impl Fingerprint for OfflineFingerprint {
    fn band(&self) -> Band {
        self.band
    }
    fn entries(&self) -> &BTreeMap<MacAddr, i16> {
        &self.entries
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OnlineFingerprint {
    pub client_id: ClientId,
    pub band: Band,
    pub entries: BTreeMap<MacAddr, i16>,
    pub window_start_ms: u64,
    pub window_end_ms: u64,
}

impl Fingerprint for OnlineFingerprint {
    fn band(&self) -> Band {
        self.band
    }
    fn entries(&self) -> &BTreeMap<MacAddr, i16> {
        &self.entries
    }
}

/// Half-open time interval `[start_ms, end_ms)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start_ms: u64,
    pub end_ms: u64,
}

impl Window {
    pub fn new(start_ms: u64, end_ms: u64) -> Self {
        Self { start_ms, end_ms }
    }

    /// The window of `len_s` seconds ending just after `t_ms`.
    pub fn ending_at(t_ms: u64, len_s: u64) -> Self {
        let end = t_ms + 1;
        Self {
            start_ms: end.saturating_sub(len_s * 1000),
            end_ms: end,
        }
    }

    pub fn contains(&self, t_ms: u64) -> bool {
        t_ms >= self.start_ms && t_ms < self.end_ms
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassFilter {
    ScanOnly,
    NonScanOnly,
    Both,
}

impl ClassFilter {
    pub const ALL: [ClassFilter; 3] = [ClassFilter::Both, ClassFilter::ScanOnly, ClassFilter::NonScanOnly];

    pub fn admits(self, class: FrameClass) -> bool {
        match self {
            ClassFilter::Both => true,
            ClassFilter::ScanOnly => class == FrameClass::Scanning,
            ClassFilter::NonScanOnly => class == FrameClass::NonScanning,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ClassFilter::ScanOnly => "scan",
            ClassFilter::NonScanOnly => "nonscan",
            ClassFilter::Both => "both",
        }
    }
}

impl std::str::FromStr for ClassFilter {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "scan" | "scan-only" => Ok(ClassFilter::ScanOnly),
            "nonscan" | "non-scan" | "nonscan-only" | "non-scan-only" => Ok(ClassFilter::NonScanOnly),
            "both" => Ok(ClassFilter::Both),
            other => Err(format!("unknown class filter `{other}`")),
        }
    }
}

/// Integer mean, rounded half away from zero.
pub(crate) fn mean_dbm(sum: i64, n: u32) -> i16 {
    (sum as f64 / f64::from(n)).round() as i16
}

/// Build the offline fingerprint of `landmark` from the survey client's
/// records. Only Scanning-class records in `band` inside `window` count.
pub fn record_offline<'a, I>(
    records: I,
    landmark: &Landmark,
    band: Band,
    window: Window,
) -> Result<OfflineFingerprint, FingerprintError>
where
    I: IntoIterator<Item = &'a ClassifiedRecord>,
{
    let mut acc: BTreeMap<MacAddr, (i64, u32)> = BTreeMap::new();
    for c in records {
        let r = &c.record;
        if c.class != FrameClass::Scanning || r.band != band || !window.contains(r.timestamp_ms) {
            continue;
        }
        let e = acc.entry(r.ap_id).or_default();
        e.0 += i64::from(r.rssi_dbm);
        e.1 += 1;
    }
    if acc.is_empty() {
        return Err(FingerprintError::EmptyFingerprint {
            landmark: landmark.label(),
            band,
        });
    }
    Ok(OfflineFingerprint {
        landmark: landmark.clone(),
        band,
        entries: acc.iter().map(|(ap, &(s, n))| (*ap, mean_dbm(s, n))).collect(),
        sample_count: acc.iter().map(|(ap, &(_, n))| (*ap, n)).collect(),
    })
}

/// Assemble a client's online fingerprint: mean RSSI per AP over the
/// records that pass `class_filter` inside `window`. Callers dedupe first.
pub fn assemble_online<'a, I>(
    records: I,
    client: ClientId,
    band: Band,
    window: Window,
    class_filter: ClassFilter,
) -> Result<OnlineFingerprint, FingerprintError>
where
    I: IntoIterator<Item = &'a ClassifiedRecord>,
{
    let mut acc: BTreeMap<MacAddr, (i64, u32)> = BTreeMap::new();
    for c in records {
        let r = &c.record;
        if r.client_id != client
            || r.band != band
            || !window.contains(r.timestamp_ms)
            || !class_filter.admits(c.class)
        {
            continue;
        }
        let e = acc.entry(r.ap_id).or_default();
        e.0 += i64::from(r.rssi_dbm);
        e.1 += 1;
    }
    if acc.is_empty() {
        return Err(FingerprintError::NoObservation { client, band });
    }
    Ok(OnlineFingerprint {
        client_id: client,
        band,
        entries: acc.into_iter().map(|(ap, (s, n))| (ap, mean_dbm(s, n))).collect(),
        window_start_ms: window.start_ms,
        window_end_ms: window.end_ms,
    })
}

/// Location and radio configuration of one physical AP. Both radios of a
/// dual-band AP report under the same MAC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApInfo {
    pub ap_id: MacAddr,
    pub building: String,
    pub floor: i32,
    pub position: Position,
    pub channel_24: Option<u16>,
    pub channel_5: Option<u16>,
    pub tx_power_dbm: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ApDirectory {
    aps: BTreeMap<MacAddr, ApInfo>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ApRow {
    ap_mac: MacAddr,
    building: String,
    floor: i32,
    x_m: f64,
    y_m: f64,
    channel_24: Option<u16>,
    channel_5: Option<u16>,
    tx_power_dbm: f64,
}

impl ApDirectory {
    pub fn new(aps: impl IntoIterator<Item = ApInfo>) -> Self {
        Self {
            aps: aps.into_iter().map(|a| (a.ap_id, a)).collect(),
        }
    }

    pub fn get(&self, ap: &MacAddr) -> Option<&ApInfo> {
        self.aps.get(ap)
    }

    pub fn floor_of(&self, ap: &MacAddr) -> Option<i32> {
        self.aps.get(ap).map(|a| a.floor)
    }

    pub fn contains(&self, ap: &MacAddr) -> bool {
        self.aps.contains_key(ap)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ApInfo> {
        self.aps.values()
    }

    pub fn len(&self) -> usize {
        self.aps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.aps.is_empty()
    }

    /// Read `ap_mac,building,floor,x_m,y_m,channel_24,channel_5,tx_power_dbm`
    /// with a header row; empty channel cells mean the radio is absent.
    pub fn read_csv(path: &Path) -> Result<Self, FingerprintError> {
        let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let mut aps = Vec::new();
        for row in rdr.deserialize::<ApRow>() {
            let row = row.map_err(|e| csv_err(path, e))?;
            aps.push(ApInfo {
                ap_id: row.ap_mac,
                building: row.building,
                floor: row.floor,
                position: Position::new(row.x_m, row.y_m),
                channel_24: row.channel_24,
                channel_5: row.channel_5,
                tx_power_dbm: row.tx_power_dbm,
            });
        }
        Ok(Self::new(aps))
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), FingerprintError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        for a in self.aps.values() {
            w.serialize(ApRow {
                ap_mac: a.ap_id,
                building: a.building.clone(),
                floor: a.floor,
                x_m: a.position.x_m,
                y_m: a.position.y_m,
                channel_24: a.channel_24,
                channel_5: a.channel_5,
                tx_power_dbm: a.tx_power_dbm,
            })
            .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| FingerprintError::Io {
            path: path.to_owned(),
            source: e,
        })
    }
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> FingerprintError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => FingerprintError::Io {
            path: path.to_owned(),
            source,
        },
        other => FingerprintError::Table {
            path: path.to_owned(),
            line,
            reason: format!("{other:?}"),
        },
    }
}

/// Read a landmark table: `building,floor,index,x_m,y_m`, no header.
pub fn read_landmark_table(path: &Path) -> Result<Vec<Landmark>, FingerprintError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let mut out = Vec::new();
    for row in rdr.deserialize::<(String, i32, u32, f64, f64)>() {
        let (b, f, i, x, y) = row.map_err(|e| csv_err(path, e))?;
        out.push(Landmark::new(b, f, i, x, y));
    }
    Ok(out)
}

pub fn write_landmark_table(path: &Path, landmarks: &[Landmark]) -> Result<(), FingerprintError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    for l in landmarks {
        w.serialize((&l.building, l.floor, l.index, l.position.x_m, l.position.y_m))
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| FingerprintError::Io {
        path: path.to_owned(),
        source: e,
    })
}

/// Per-band offline maps plus the AP directory they refer to. Immutable
/// once built; fingerprints are kept sorted by landmark.
#[derive(Debug, Clone, PartialEq)]
pub struct FingerprintDb {
    directory: ApDirectory,
    maps: BTreeMap<Band, Vec<OfflineFingerprint>>,
}

#[derive(Serialize, Deserialize)]
struct DbFile {
    format: String,
    version: u32,
    ap_directory: Vec<ApInfo>,
    fingerprints: Vec<OfflineFingerprint>,
}

#[derive(Deserialize)]
struct DbHeader {
    format: String,
    version: u32,
}

impl FingerprintDb {
    /// Validates that every referenced AP is in the directory and that each
    /// `(landmark, band)` appears once.
    pub fn new(
        directory: ApDirectory,
        fingerprints: impl IntoIterator<Item = OfflineFingerprint>,
    ) -> Result<Self, FingerprintError> {
        let mut maps: BTreeMap<Band, Vec<OfflineFingerprint>> = BTreeMap::new();
        for fp in fingerprints {
            if let Some(ap) = fp.entries.keys().find(|ap| !directory.contains(ap)) {
                return Err(FingerprintError::UnknownAp(*ap));
            }
            maps.entry(fp.band).or_default().push(fp);
        }
        for (band, fps) in maps.iter_mut() {
            fps.sort_by(|a, b| a.landmark.cmp(&b.landmark));
            if let Some(w) = fps.windows(2).find(|w| w[0].landmark.key() == w[1].landmark.key()) {
                return Err(FingerprintError::DuplicateFingerprint {
                    landmark: w[0].landmark.label(),
                    band: *band,
                });
            }
        }
        Ok(Self { directory, maps })
    }

    pub fn directory(&self) -> &ApDirectory {
        &self.directory
    }

    /// The same fingerprints under another AP directory.
    pub fn with_directory(self, directory: ApDirectory) -> Result<Self, FingerprintError> {
        Self::new(directory, self.maps.into_values().flatten())
    }

    /// Offline fingerprints of one band, sorted by landmark.
    pub fn band(&self, band: Band) -> &[OfflineFingerprint] {
        self.maps.get(&band).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn get(&self, landmark: &Landmark, band: Band) -> Option<&OfflineFingerprint> {
        let fps = self.band(band);
        fps.binary_search_by(|fp| fp.landmark.cmp(landmark))
            .ok()
            .map(|i| &fps[i])
    }

    pub fn len(&self) -> usize {
        self.maps.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_json(&self) -> String {
        let file = DbFile {
            format: DB_FORMAT.into(),
            version: DB_VERSION,
            ap_directory: self.directory.iter().cloned().collect(),
            fingerprints: self.maps.values().flatten().cloned().collect(),
        };
        serde_json::to_string_pretty(&file).expect("db serialization is infallible")
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self, FingerprintError> {
        let corrupt = |reason: String| FingerprintError::Corrupt {
            path: path.to_owned(),
            reason,
        };
        let header: DbHeader = serde_json::from_str(text).map_err(|e| corrupt(e.to_string()))?;
        if header.format != DB_FORMAT {
            return Err(corrupt(format!("unexpected format tag `{}`", header.format)));
        }
        if header.version != DB_VERSION {
            return Err(FingerprintError::VersionMismatch {
                path: path.to_owned(),
                found: header.version,
                expected: DB_VERSION,
            });
        }
        let file: DbFile = serde_json::from_str(text).map_err(|e| corrupt(e.to_string()))?;
        for fp in &file.fingerprints {
            if fp.entries.is_empty() {
                return Err(corrupt(format!(
                    "empty fingerprint for {} in band {}",
                    fp.landmark.label(),
                    fp.band
                )));
            }
        }
        Self::new(ApDirectory::new(file.ap_directory), file.fingerprints).map_err(|e| match e {
            FingerprintError::UnknownAp(_) | FingerprintError::DuplicateFingerprint { .. } => {
                corrupt(e.to_string())
            }
            other => other,
        })
    }
}

pub fn save_db(db: &FingerprintDb, path: &Path) -> Result<(), FingerprintError> {
    fs::write(path, db.to_json()).map_err(|source| FingerprintError::Io {
        path: path.to_owned(),
        source,
    })
}

pub fn load_db(path: &Path) -> Result<FingerprintDb, FingerprintError> {
    let text = fs::read_to_string(path).map_err(|source| FingerprintError::Io {
        path: path.to_owned(),
        source,
    })?;
    FingerprintDb::from_json(&text, path)
}

/// Build a database from survey records. `plan` says which landmark the
/// survey client stood at during each window. Landmarks a band never heard
/// are left out of that band's map and returned as `(label, band)`.
pub fn build_db(
    records: &[ClassifiedRecord],
    plan: &[(Landmark, Window)],
    directory: ApDirectory,
) -> Result<(FingerprintDb, Vec<(String, Band)>), FingerprintError> {
    let mut fps = Vec::new();
    let mut missing = Vec::new();
    for band in Band::ALL {
        let mut in_band: Vec<&ClassifiedRecord> = records.iter().filter(|c| c.record.band == band).collect();
        in_band.sort_by_key(|c| c.record.timestamp_ms);
        for (landmark, window) in plan {
            let lo = in_band.partition_point(|c| c.record.timestamp_ms < window.start_ms);
            let hi = in_band.partition_point(|c| c.record.timestamp_ms < window.end_ms);
            match record_offline(in_band[lo..hi].iter().copied(), landmark, band, *window) {
                Ok(fp) => fps.push(fp),
                Err(FingerprintError::EmptyFingerprint { landmark, band }) => missing.push((landmark, band)),
                Err(e) => return Err(e),
            }
        }
    }
    Ok((FingerprintDb::new(directory, fps)?, missing))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feed::{AssocStatus, DataRate, RtlsRecord};
    use proptest::prelude::*;

    fn ap(n: u8) -> MacAddr {
        MacAddr([0, 0x11, 0x22, 0x33, 0x44, n])
    }

    fn client() -> ClientId {
        ClientId([7; 20])
    }

    fn rec(ap_n: u8, ts: u64, rssi: i16, class: FrameClass) -> ClassifiedRecord {
        ClassifiedRecord {
            record: RtlsRecord {
                timestamp_ms: ts,
                client_id: client(),
                age_s: 0,
                channel: 6,
                band: Band::Band24,
                ap_id: ap(ap_n),
                assoc: match class {
                    FrameClass::Scanning => AssocStatus::Unassociated,
                    FrameClass::NonScanning => AssocStatus::Associated,
                },
                data_rate: match class {
                    FrameClass::Scanning => DataRate::from_mbps(1),
                    FrameClass::NonScanning => DataRate::from_mbps(54),
                },
                rssi_dbm: rssi,
            },
            class,
        }
    }

    fn lm(floor: i32, index: u32) -> Landmark {
        Landmark::new("B", floor, index, 3.0 * index as f64, 1.5)
    }

    fn dir(n: u8) -> ApDirectory {
        ApDirectory::new((1..=n).map(|i| ApInfo {
            ap_id: ap(i),
            building: "B".into(),
            floor: i32::from(i % 3),
            position: Position::new(f64::from(i), 2.0),
            channel_24: Some(6),
            channel_5: Some(36),
            tx_power_dbm: 20.0,
        }))
    }

    const ALL: Window = Window {
        start_ms: 0,
        end_ms: u64::MAX,
    };

    #[test]
    fn offline_mean_per_ap() {
        let rs = vec![
            rec(1, 1000, -50, FrameClass::Scanning),
            rec(1, 2000, -52, FrameClass::Scanning),
            rec(3, 2000, -60, FrameClass::NonScanning),
        ];
        let fp = record_offline(&rs, &lm(0, 0), Band::Band24, ALL).unwrap();
        assert_eq!(fp.entries.get(&ap(1)), Some(&-51));
        assert_eq!(fp.sample_count.get(&ap(1)), Some(&2));
        assert!(!fp.entries.contains_key(&ap(2)));
        assert!(!fp.entries.contains_key(&ap(3)), "non-scanning records never contribute");
        assert_eq!(cardinality(&fp), 1);
    }

    #[test]
    fn offline_rounds_half_away_from_zero() {
        let rs = vec![rec(1, 0, -50, FrameClass::Scanning), rec(1, 0, -51, FrameClass::Scanning)];
        let fp = record_offline(&rs, &lm(0, 0), Band::Band24, ALL).unwrap();
        assert_eq!(fp.entries[&ap(1)], -51);
    }

    #[test]
    fn offline_sixteen_aps() {
        let rs: Vec<_> = (1..=16).map(|i| rec(i, 0, -40 - i as i16, FrameClass::Scanning)).collect();
        let fp = record_offline(&rs, &lm(0, 0), Band::Band24, ALL).unwrap();
        assert_eq!(cardinality(&fp), 16);
    }

    #[test]
    fn offline_empty_names_landmark_and_band() {
        let rs = vec![rec(1, 0, -50, FrameClass::NonScanning)];
        let err = record_offline(&rs, &lm(2, 7), Band::Band24, ALL).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("B/2/7") && msg.contains("2.4"), "{msg}");
        let err = record_offline(&rs, &lm(2, 7), Band::Band5, ALL).unwrap_err();
        assert!(matches!(err, FingerprintError::EmptyFingerprint { band: Band::Band5, .. }));
    }

    #[test]
    fn offline_respects_window() {
        let rs = vec![rec(1, 999, -50, FrameClass::Scanning), rec(2, 1000, -60, FrameClass::Scanning)];
        let fp = record_offline(&rs, &lm(0, 0), Band::Band24, Window::new(1000, 301_000)).unwrap();
        assert_eq!(fp.entries.keys().copied().collect::<Vec<_>>(), vec![ap(2)]);
    }

    #[test]
    fn online_scan_only_without_scans_is_no_observation() {
        let rs = vec![rec(1, 0, -50, FrameClass::NonScanning)];
        let err = assemble_online(&rs, client(), Band::Band24, ALL, ClassFilter::ScanOnly).unwrap_err();
        assert!(matches!(err, FingerprintError::NoObservation { .. }));
    }

    #[test]
    fn online_single_ap() {
        let rs = vec![rec(4, 0, -66, FrameClass::NonScanning)];
        let fp = assemble_online(&rs, client(), Band::Band24, ALL, ClassFilter::Both).unwrap();
        assert_eq!(cardinality(&fp), 1);
        let other = ClientId([8; 20]);
        assert!(assemble_online(&rs, other, Band::Band24, ALL, ClassFilter::Both).is_err());
    }

    /// Per-AP mean computed by scanning the whole input once per AP.
    fn online_oracle(rs: &[ClassifiedRecord], filter: ClassFilter) -> BTreeMap<MacAddr, i16> {
        let mut aps: Vec<MacAddr> = rs.iter().map(|c| c.record.ap_id).collect();
        aps.sort();
        aps.dedup();
        let mut out = BTreeMap::new();
        for a in aps {
            let vals: Vec<f64> = rs
                .iter()
                .filter(|c| c.record.ap_id == a && filter.admits(c.class))
                .map(|c| f64::from(c.record.rssi_dbm))
                .collect();
            if !vals.is_empty() {
                out.insert(a, (vals.iter().sum::<f64>() / vals.len() as f64).round() as i16);
            }
        }
        out
    }

    fn arb_records() -> impl Strategy<Value = Vec<ClassifiedRecord>> {
        prop::collection::vec((1u8..8, 0u64..100, -72i16..-20, any::<bool>()), 1..50).prop_map(|v| {
            v.into_iter()
                .map(|(a, ts, rssi, scan)| {
                    rec(a, ts, rssi, if scan { FrameClass::Scanning } else { FrameClass::NonScanning })
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn online_mixed_matches_oracle(rs in arb_records()) {
            for filter in ClassFilter::ALL {
                let got = assemble_online(&rs, client(), Band::Band24, ALL, filter);
                let want = online_oracle(&rs, filter);
                match got {
                    Ok(fp) => prop_assert_eq!(fp.entries, want),
                    Err(_) => prop_assert!(want.is_empty()),
                }
            }
        }

        #[test]
        fn class_filters_partition_contributions(rs in arb_records()) {
            let scan: Vec<_> = rs.iter().filter(|c| ClassFilter::ScanOnly.admits(c.class)).collect();
            let non: Vec<_> = rs.iter().filter(|c| ClassFilter::NonScanOnly.admits(c.class)).collect();
            let both: Vec<_> = rs.iter().filter(|c| ClassFilter::Both.admits(c.class)).collect();
            prop_assert!(scan.iter().all(|s| !non.iter().any(|n| std::ptr::eq(*s, *n))));
            prop_assert_eq!(scan.len() + non.len(), both.len());
            let both_fp = assemble_online(&rs, client(), Band::Band24, ALL, ClassFilter::Both).unwrap();
            let mut union: Vec<MacAddr> = scan.iter().chain(non.iter()).map(|c| c.record.ap_id).collect();
            union.sort();
            union.dedup();
            prop_assert_eq!(both_fp.entries.keys().copied().collect::<Vec<_>>(), union);
        }

        #[test]
        fn offline_is_order_insensitive(rs in arb_records(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = rs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = record_offline(&rs, &lm(0, 0), Band::Band24, ALL);
            let b = record_offline(&shuffled, &lm(0, 0), Band::Band24, ALL);
            match (a, b) {
                (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "order changed success"),
            }
        }
    }

    fn sample_db(landmarks: u32) -> FingerprintDb {
        let mut fps = Vec::new();
        for i in 0..landmarks {
            for band in Band::ALL {
                let entries: BTreeMap<_, _> =
                    (1..=4u8).map(|a| (ap(a), -40 - ((i as i16 * 7 + a as i16) % 30))).collect();
                let sample_count = entries.keys().map(|k| (*k, 60)).collect();
                fps.push(OfflineFingerprint {
                    landmark: Landmark::new("B", (i % 3) as i32, i, 1.5 + 3.0 * f64::from(i % 25), 0.1 * f64::from(i)),
                    band,
                    entries,
                    sample_count,
                });
            }
        }
        FingerprintDb::new(dir(6), fps).unwrap()
    }

    #[test]
    fn db_round_trip_200_landmarks_both_bands() {
        let db = sample_db(200);
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("fp.json");
        save_db(&db, &path).unwrap();
        let back = load_db(&path).unwrap();
        assert_eq!(back, db);
        assert_eq!(back.band(Band::Band24).len(), 200);
        assert_eq!(back.band(Band::Band5).len(), 200);
    }

    #[test]
    fn truncated_db_is_corrupt() {
        let db = sample_db(5);
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("fp.json");
        let text = db.to_json();
        fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(load_db(&path), Err(FingerprintError::Corrupt { .. })));
    }

    #[test]
    fn future_version_is_rejected() {
        let db = sample_db(2);
        let text = db.to_json().replace("\"version\": 1", "\"version\": 9");
        let err = FingerprintDb::from_json(&text, Path::new("x")).unwrap_err();
        assert!(matches!(err, FingerprintError::VersionMismatch { found: 9, .. }));
    }

    #[test]
    fn unknown_ap_rejected() {
        let fp = OfflineFingerprint {
            landmark: lm(0, 0),
            band: Band::Band24,
            entries: [(ap(99), -50)].into_iter().collect(),
            sample_count: BTreeMap::new(),
        };
        assert!(matches!(FingerprintDb::new(dir(3), [fp]), Err(FingerprintError::UnknownAp(_))));
    }

    #[test]
    fn tables_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let lp = tmp.path().join("landmarks.csv");
        let lms = vec![lm(0, 0), lm(1, 3), Landmark::new("C", -1, 2, 0.25, 7.0)];
        write_landmark_table(&lp, &lms).unwrap();
        let text = fs::read_to_string(&lp).unwrap();
        assert!(text.starts_with("B,0,0,0.0,1.5\n"), "{text}");
        assert_eq!(read_landmark_table(&lp).unwrap(), lms);

        let ap_path = tmp.path().join("aps.csv");
        let d = dir(5);
        d.write_csv(&ap_path).unwrap();
        assert_eq!(ApDirectory::read_csv(&ap_path).unwrap(), d);
    }
}
