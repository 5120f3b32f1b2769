//! RTLS data feed records: wire format, validation, filtering, frame
//! classification and de-duplication.
//!
//! One record per line, comma separated, fixed field order:
//!
//! ```text
//! timestamp_ms,client_id_hex40,age_s,channel,ap_mac,assoc_char,data_rate_mbps,rssi_dbm
//! ```
//!
//! `ap_mac` is lowercase and colon separated, `assoc_char` is `A` or `U`.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FIELD_NAMES: [&str; 8] = [
    "timestamp_ms",
    "client_id",
    "age_s",
    "channel",
    "ap_mac",
    "assoc",
    "data_rate_mbps",
    "rssi_dbm",
];

/// Largest datagram the live listener accepts.
pub const MAX_DATAGRAM_BYTES: usize = 64 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FeedError {
    #[error("parse error in field `{field}` at byte {offset}: {reason}")]
    Parse {
        field: &'static str,
        offset: usize,
        reason: String,
    },
    #[error("invalid `{field}`: {reason}")]
    Validation { field: &'static str, reason: String },
}

impl FeedError {
    fn parse(field: &'static str, offset: usize, reason: impl Into<String>) -> Self {
        FeedError::Parse {
            field,
            offset,
            reason: reason.into(),
        }
    }

    fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        FeedError::Validation {
            field,
            reason: reason.into(),
        }
    }
}

/// SHA-1 of the client's MAC address, as carried by the feed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ClientId(pub [u8; 20]);

impl ClientId {
    /// Hash a raw MAC into the identifier the controller would report.
    pub fn from_mac(mac: &MacAddr) -> Self {
        use sha1::{Digest, Sha1};
        let digest = Sha1::digest(mac.to_string().as_bytes());
        let mut out = [0u8; 20];
        out.copy_from_slice(&digest);
        ClientId(out)
    }
}

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

fn hex_val(c: u8) -> Option<u8> {
    match c {
        b'0'..=b'9' => Some(c - b'0'),
        b'a'..=b'f' => Some(c - b'a' + 10),
        b'A'..=b'F' => Some(c - b'A' + 10),
        _ => None,
    }
}

impl FromStr for ClientId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bytes = s.as_bytes();
        if bytes.len() != 40 {
            return Err(format!("expected 40 hex chars, got {}", bytes.len()));
        }
        let mut out = [0u8; 20];
        for (i, pair) in bytes.chunks(2).enumerate() {
            let hi = hex_val(pair[0]).ok_or_else(|| format!("non-hex char at {}", 2 * i))?;
            let lo = hex_val(pair[1]).ok_or_else(|| format!("non-hex char at {}", 2 * i + 1))?;
            out[i] = (hi << 4) | lo;
        }
        Ok(ClientId(out))
    }
}

/// 48-bit MAC address of an access point radio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MacAddr(pub [u8; 6]);

impl fmt::Display for MacAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = self.0;
        write!(
            f,
            "{:02x}:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}",
            b[0], b[1], b[2], b[3], b[4], b[5]
        )
    }
}

impl FromStr for MacAddr {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; 6];
        let mut parts = s.split(':');
        for (i, slot) in out.iter_mut().enumerate() {
            let part = parts.next().ok_or_else(|| format!("expected 6 octets, got {i}"))?;
            let p = part.as_bytes();
            if p.len() != 2 {
                return Err(format!("octet {i} must be 2 hex digits"));
            }
            let hi = hex_val(p[0]).ok_or_else(|| format!("non-hex digit in octet {i}"))?;
            let lo = hex_val(p[1]).ok_or_else(|| format!("non-hex digit in octet {i}"))?;
            *slot = (hi << 4) | lo;
        }
        if parts.next().is_some() {
            return Err("more than 6 octets".into());
        }
        Ok(MacAddr(out))
    }
}

macro_rules! serde_via_string {
    ($t:ty) => {
        impl Serialize for $t {
            fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $t {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

serde_via_string!(ClientId);
serde_via_string!(MacAddr);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Band {
    #[serde(rename = "2.4")]
    Band24,
    #[serde(rename = "5")]
    Band5,
}

impl Band {
    pub const ALL: [Band; 2] = [Band::Band24, Band::Band5];

    /// Channels 1-14 are 2.4 GHz, 36-177 are 5 GHz; anything else is unknown.
    pub fn from_channel(channel: u16) -> Option<Band> {
        match channel {
            1..=14 => Some(Band::Band24),
            36..=177 => Some(Band::Band5),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Band::Band24 => "2.4",
            Band::Band5 => "5",
        }
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Band {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "2.4" | "24" | "2.4ghz" | "band24" => Ok(Band::Band24),
            "5" | "5ghz" | "band5" => Ok(Band::Band5),
            other => Err(format!("unknown band `{other}` (expected 2.4 or 5)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AssocStatus {
    Associated,
    Unassociated,
}

impl AssocStatus {
    pub fn as_char(self) -> char {
        match self {
            AssocStatus::Associated => 'A',
            AssocStatus::Unassociated => 'U',
        }
    }
}

/// Data rate in units of 100 kbit/s, so the one-decimal wire values
/// (`5.5`, `6.0`, `54.0`) are represented exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DataRate(u16);

impl DataRate {
    pub const fn from_tenths(tenths: u16) -> Self {
        DataRate(tenths)
    }

    pub const fn from_mbps(mbps: u16) -> Self {
        DataRate(mbps * 10)
    }

    pub fn tenths(self) -> u16 {
        self.0
    }

    pub fn mbps(self) -> f64 {
        f64::from(self.0) / 10.0
    }
}

/// The 802.11g rate set the controller reports for every band.
pub const RATES_80211G: [DataRate; 12] = [
    DataRate(10),
    DataRate(20),
    DataRate(55),
    DataRate(60),
    DataRate(90),
    DataRate(110),
    DataRate(120),
    DataRate(180),
    DataRate(240),
    DataRate(360),
    DataRate(480),
    DataRate(540),
];

impl fmt::Display for DataRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.0 / 10, self.0 % 10)
    }
}

impl FromStr for DataRate {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (int, frac) = match s.split_once('.') {
            Some((i, f)) => (i, f),
            None => (s, ""),
        };
        if int.is_empty() || !int.bytes().all(|b| b.is_ascii_digit()) {
            return Err(format!("`{s}` is not a decimal rate"));
        }
        if !frac.bytes().all(|b| b.is_ascii_digit()) {
            return Err(format!("`{s}` is not a decimal rate"));
        }
        let frac_trimmed = frac.trim_end_matches('0');
        if frac_trimmed.len() > 1 {
            return Err(format!("`{s}` has more precision than 0.1 Mbps"));
        }
        let whole: u32 = int.parse().map_err(|_| format!("`{s}` out of range"))?;
        let tenth: u32 = frac_trimmed.parse().unwrap_or(0);
        let tenths = whole * 10 + tenth;
        if tenths == 0 {
            return Err("rate must be positive".into());
        }
        u16::try_from(tenths)
            .map(DataRate)
            .map_err(|_| format!("`{s}` out of range"))
    }
}

serde_via_string!(DataRate);

/// One per-client report from one AP.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RtlsRecord {
    pub timestamp_ms: u64,
    pub client_id: ClientId,
    pub age_s: u32,
    pub channel: u16,
    pub band: Band,
    pub ap_id: MacAddr,
    pub assoc: AssocStatus,
    pub data_rate: DataRate,
    pub rssi_dbm: i16,
}

impl RtlsRecord {
    /// Render in the feed line format, without the trailing newline.
    pub fn to_line(&self) -> String {
        self.to_string()
    }

    /// Structured-object form used for archives.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serialization is infallible")
    }

    pub fn from_json_line(line: &str) -> Result<Self, FeedError> {
        let rec: RtlsRecord = serde_json::from_str(line)
            .map_err(|e| FeedError::parse("json", e.column().saturating_sub(1), e.to_string()))?;
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<(), FeedError> {
        match Band::from_channel(self.channel) {
            Some(b) if b == self.band => {}
            Some(_) => return Err(FeedError::invalid("channel", "band does not match channel")),
            None => {
                return Err(FeedError::invalid(
                    "channel",
                    format!("unknown channel {}", self.channel),
                ))
            }
        }
        if !(-100..=0).contains(&self.rssi_dbm) {
            return Err(FeedError::invalid(
                "rssi_dbm",
                format!("{} outside [-100, 0]", self.rssi_dbm),
            ));
        }
        if self.data_rate.tenths() == 0 {
            return Err(FeedError::invalid("data_rate_mbps", "rate must be positive"));
        }
        Ok(())
    }
}

impl fmt::Display for RtlsRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{},{},{}",
            self.timestamp_ms,
            self.client_id,
            self.age_s,
            self.channel,
            self.ap_id,
            self.assoc.as_char(),
            self.data_rate,
            self.rssi_dbm
        )
    }
}

impl FromStr for RtlsRecord {
    type Err = FeedError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_feed_line(s)
    }
}

/// Parse one feed line. A trailing `\n` or `\r\n` is accepted.
pub fn parse_feed_line(line: &str) -> Result<RtlsRecord, FeedError> {
    let line = line.strip_suffix('\n').unwrap_or(line);
    let line = line.strip_suffix('\r').unwrap_or(line);

    let mut fields: [(&str, usize); 8] = [("", 0); 8];
    let mut offset = 0;
    let mut count = 0;
    for part in line.split(',') {
        if count == fields.len() {
            return Err(FeedError::parse(
                "rssi_dbm",
                offset - 1,
                "unexpected extra field",
            ));
        }
        fields[count] = (part, offset);
        offset += part.len() + 1;
        count += 1;
    }
    if count < fields.len() {
        return Err(FeedError::parse(
            FIELD_NAMES[count],
            line.len(),
            format!("expected 8 fields, found {count}"),
        ));
    }

    let [ts, client, age, chan, ap, assoc, rate, rssi] = fields;

    let timestamp_ms = ts
        .0
        .parse::<u64>()
        .map_err(|e| FeedError::parse("timestamp_ms", ts.1, e.to_string()))?;
    let client_id = client
        .0
        .parse::<ClientId>()
        .map_err(|e| FeedError::parse("client_id", client.1, e))?;
    let age_s = age
        .0
        .parse::<u32>()
        .map_err(|e| FeedError::parse("age_s", age.1, e.to_string()))?;
    let channel = chan
        .0
        .parse::<u16>()
        .map_err(|e| FeedError::parse("channel", chan.1, e.to_string()))?;
    let ap_id = ap
        .0
        .parse::<MacAddr>()
        .map_err(|e| FeedError::parse("ap_mac", ap.1, e))?;
    let assoc = match assoc.0 {
        "A" => AssocStatus::Associated,
        "U" => AssocStatus::Unassociated,
        other => {
            return Err(FeedError::parse(
                "assoc",
                assoc.1,
                format!("expected A or U, got `{other}`"),
            ))
        }
    };
    let data_rate = rate
        .0
        .parse::<DataRate>()
        .map_err(|e| FeedError::parse("data_rate_mbps", rate.1, e))?;
    let rssi_dbm = rssi
        .0
        .parse::<i16>()
        .map_err(|e| FeedError::parse("rssi_dbm", rssi.1, e.to_string()))?;

    let band = Band::from_channel(channel)
        .ok_or_else(|| FeedError::invalid("channel", format!("unknown channel {channel}")))?;

    let rec = RtlsRecord {
        timestamp_ms,
        client_id,
        age_s,
        channel,
        band,
        ap_id,
        assoc,
        data_rate,
        rssi_dbm,
    };
    rec.validate()?;
    Ok(rec)
}

/// Staleness and signal-floor thresholds applied before fingerprinting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterThresholds {
    pub max_age_s: u32,
    pub min_rssi_dbm: i16,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        Self {
            max_age_s: 15,
            min_rssi_dbm: -72,
        }
    }
}

/// Keep iff `age <= max_age` and `rssi >= min_rssi` (both inclusive).
pub fn filter_record(r: &RtlsRecord, thresholds: &FilterThresholds) -> bool {
    r.age_s <= thresholds.max_age_s && r.rssi_dbm >= thresholds.min_rssi_dbm
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FrameClass {
    Scanning,
    NonScanning,
}

impl fmt::Display for FrameClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FrameClass::Scanning => "scanning",
            FrameClass::NonScanning => "non-scanning",
        })
    }
}

/// Data rates the controller uses for probe responses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeRates(Vec<DataRate>);

impl ProbeRates {
    pub fn new(mut rates: Vec<DataRate>) -> Self {
        rates.sort_unstable();
        rates.dedup();
        ProbeRates(rates)
    }

    pub fn contains(&self, rate: DataRate) -> bool {
        self.0.binary_search(&rate).is_ok()
    }

    pub fn rates(&self) -> &[DataRate] {
        &self.0
    }
}

impl Default for ProbeRates {
    fn default() -> Self {
        ProbeRates::new(vec![
            DataRate::from_mbps(1),
            DataRate::from_mbps(6),
            DataRate::from_mbps(24),
        ])
    }
}

/// Scanning iff the AP reports the client unassociated at a probe rate.
///
/// An associated report at a probe rate is deliberately NonScanning: the
/// association AP cannot tell a probe from data sent at the same rate.
pub fn classify_record(r: &RtlsRecord, probe_rates: &ProbeRates) -> FrameClass {
    if r.assoc == AssocStatus::Unassociated && probe_rates.contains(r.data_rate) {
        FrameClass::Scanning
    } else {
        FrameClass::NonScanning
    }
}

/// A record together with its frame class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassifiedRecord {
    pub record: RtlsRecord,
    pub class: FrameClass,
}

/// Keep, for every `(client_id, ap_id, band)`, the record with the smallest
/// age; ties go to the larger timestamp, then to the earlier input position.
/// Output follows the first-seen order of each key.
pub fn dedupe_latest(records: Vec<RtlsRecord>) -> Vec<RtlsRecord> {
    dedupe_latest_by(records, |r| r)
}

/// [`dedupe_latest`] over any item that carries a record.
pub fn dedupe_latest_by<T, F>(items: Vec<T>, record: F) -> Vec<T>
where
    F: Fn(&T) -> &RtlsRecord,
{
    let mut slot_of: HashMap<(ClientId, MacAddr, Band), usize> = HashMap::new();
    let mut out: Vec<T> = Vec::new();
    for item in items {
        let r = record(&item);
        let key = (r.client_id, r.ap_id, r.band);
        match slot_of.get(&key) {
            None => {
                slot_of.insert(key, out.len());
                out.push(item);
            }
            Some(&i) => {
                let cur = record(&out[i]);
                let better = r.age_s < cur.age_s
                    || (r.age_s == cur.age_s && r.timestamp_ms > cur.timestamp_ms);
                if better {
                    out[i] = item;
                }
            }
        }
    }
    out
}

/// Split a datagram payload into lines, skipping blank ones.
pub fn datagram_lines(payload: &str) -> impl Iterator<Item = &str> {
    payload.lines().filter(|l| !l.trim().is_empty())
}

/// Filter, then classify, in one pass.
pub fn filter_and_classify<'a, I>(
    records: I,
    thresholds: &FilterThresholds,
    probe_rates: &ProbeRates,
) -> Vec<ClassifiedRecord>
where
    I: IntoIterator<Item = &'a RtlsRecord>,
{
    records
        .into_iter()
        .filter(|r| filter_record(r, thresholds))
        .map(|r| ClassifiedRecord {
            record: r.clone(),
            class: classify_record(r, probe_rates),
        })
        .collect()
}

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Line {
        path: PathBuf,
        line: usize,
        #[source]
        source: FeedError,
    },
}

/// Read a feed archive, one record per line. Blank lines are skipped.
pub fn read_feed_archive(path: &Path) -> Result<Vec<RtlsRecord>, ArchiveError> {
    let text = fs::read_to_string(path).map_err(|source| ArchiveError::Io {
        path: path.to_owned(),
        source,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            parse_feed_line(l).map_err(|source| ArchiveError::Line {
                path: path.to_owned(),
                line: i + 1,
                source,
            })
        })
        .collect()
}

pub fn write_feed_archive(path: &Path, records: &[RtlsRecord]) -> Result<(), ArchiveError> {
    let io = |source| ArchiveError::Io {
        path: path.to_owned(),
        source,
    };
    let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
    for r in records {
        writeln!(w, "{}", r.to_line()).map_err(io)?;
    }
    w.flush().map_err(io)
}
