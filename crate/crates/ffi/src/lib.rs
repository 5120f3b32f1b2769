//! C ABI over wiloc-core.
//!
//! Handles are opaque and owned by the caller, who frees them with the
//! matching `*_free` function. Every call returns a [`WilocStatus`]; on
//! failure [`wiloc_last_error`] describes the error of the calling thread.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use wiloc::feed::{classify_record, filter_record, parse_feed_line, Band, ClientId, FilterThresholds, FrameClass, MacAddr, ProbeRates};
use wiloc::fingerprint::{load_db, FingerprintDb, FingerprintError, OnlineFingerprint};
use wiloc::localizer::{localize, Heuristic, HeuristicConfig, LocalizeError};

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WilocStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    CorruptDatabase = 5,
    NotLocalizable = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WilocBand {
    Ghz24 = 0,
    Ghz5 = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WilocHeuristic {
    Baseline = 0,
    MaxApCount = 1,
    MaxRssiFloor = 2,
    AssociationFloor = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WilocFrameClass {
    Scanning = 0,
    NonScanning = 1,
}

pub const WILOC_BUILDING_LEN: usize = 64;

/// A location estimate. `building` is NUL-terminated and truncated to fit.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct WilocEstimate {
    pub building: [c_char; WILOC_BUILDING_LEN],
    pub floor: i32,
    pub landmark_index: u32,
    pub x_m: f64,
    pub y_m: f64,
    /// Distance in signal space, dB.
    pub score: f64,
    pub cardinality_used: u32,
    pub matched_ap_count: u32,
    pub heuristic: WilocHeuristic,
    pub requested_heuristic: WilocHeuristic,
    /// Nonzero when the requested heuristic fell back to Baseline.
    pub fell_back: u8,
}

/// A loaded fingerprint database.
pub struct WilocDb {
    db: FingerprintDb,
}

/// An online fingerprint under construction for one client and band.
pub struct WilocOnline {
    client: ClientId,
    band: Band,
    sums: BTreeMap<MacAddr, (i64, u32)>,
    assoc_ap: Option<MacAddr>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

struct Fail(WilocStatus, String);

impl From<FingerprintError> for Fail {
    fn from(e: FingerprintError) -> Self {
        let status = match e {
            FingerprintError::Io { .. } => WilocStatus::Io,
            FingerprintError::Corrupt { .. }
            | FingerprintError::VersionMismatch { .. }
            | FingerprintError::UnknownAp(_)
            | FingerprintError::DuplicateFingerprint { .. } => WilocStatus::CorruptDatabase,
            _ => WilocStatus::InvalidArgument,
        };
        Fail(status, e.to_string())
    }
}

impl From<LocalizeError> for Fail {
    fn from(e: LocalizeError) -> Self {
        let status = match e {
            LocalizeError::NoMap(_) => WilocStatus::NotLocalizable,
            _ => WilocStatus::InvalidArgument,
        };
        Fail(status, e.to_string())
    }
}

fn guard<F: FnOnce() -> Result<(), Fail>>(f: F) -> WilocStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            WilocStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            WilocStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(WilocStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(WilocStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

fn null(name: &str) -> Fail {
    Fail(WilocStatus::NullArgument, format!("{name} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(WilocStatus::InvalidArgument, msg.into())
}

fn band_of(b: WilocBand) -> Band {
    match b {
        WilocBand::Ghz24 => Band::Band24,
        WilocBand::Ghz5 => Band::Band5,
    }
}

fn heuristic_of(h: WilocHeuristic) -> Heuristic {
    match h {
        WilocHeuristic::Baseline => Heuristic::Baseline,
        WilocHeuristic::MaxApCount => Heuristic::MaxApCount,
        WilocHeuristic::MaxRssiFloor => Heuristic::MaxRssiFloor,
        WilocHeuristic::AssociationFloor => Heuristic::AssociationFloor,
    }
}

fn heuristic_to_c(h: Heuristic) -> WilocHeuristic {
    match h {
        Heuristic::Baseline => WilocHeuristic::Baseline,
        Heuristic::MaxApCount => WilocHeuristic::MaxApCount,
        Heuristic::MaxRssiFloor => WilocHeuristic::MaxRssiFloor,
        Heuristic::AssociationFloor => WilocHeuristic::AssociationFloor,
    }
}

/// Copy the calling thread's last error message into `buf` as a
/// NUL-terminated string. Returns the length the full message needs,
/// including the NUL; nothing is written when `buf` is null.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn wiloc_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len() + 1
    })
}

/// Load a fingerprint database file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn wiloc_db_open(path: *const c_char, out: *mut *mut WilocDb) -> WilocStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let db = load_db(Path::new(path))?;
        *out = Box::into_raw(Box::new(WilocDb { db }));
        Ok(())
    })
}

/// Number of fingerprints in the database, 0 for null.
///
/// # Safety
/// `db` must be null or a handle from [`wiloc_db_open`].
#[no_mangle]
pub unsafe extern "C" fn wiloc_db_len(db: *const WilocDb) -> usize {
    db.as_ref().map_or(0, |d| d.db.len())
}

/// # Safety
/// `db` must be null or a handle from [`wiloc_db_open`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn wiloc_db_free(db: *mut WilocDb) {
    if !db.is_null() {
        drop(Box::from_raw(db));
    }
}

/// Start an online fingerprint for a client, given as its 40-hex hash.
///
/// # Safety
/// `client_id` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn wiloc_online_new(
    client_id: *const c_char,
    band: WilocBand,
    out: *mut *mut WilocOnline,
) -> WilocStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let client: ClientId = str_arg(client_id, "client_id")?.parse().map_err(invalid)?;
        *out = Box::into_raw(Box::new(WilocOnline {
            client,
            band: band_of(band),
            sums: BTreeMap::new(),
            assoc_ap: None,
        }));
        Ok(())
    })
}

/// Add one observation of `ap_mac`. Repeated observations are averaged.
///
/// # Safety
/// `online` must be a live handle and `ap_mac` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn wiloc_online_add(online: *mut WilocOnline, ap_mac: *const c_char, rssi_dbm: i16) -> WilocStatus {
    guard(|| {
        let online = online.as_mut().ok_or_else(|| null("online"))?;
        let ap: MacAddr = str_arg(ap_mac, "ap_mac")?.parse().map_err(invalid)?;
        if !(-100..=0).contains(&rssi_dbm) {
            return Err(invalid(format!("rssi {rssi_dbm} dBm out of range")));
        }
        let e = online.sums.entry(ap).or_default();
        e.0 += i64::from(rssi_dbm);
        e.1 += 1;
        Ok(())
    })
}

/// Set the AP the client is associated with; null clears it.
///
/// # Safety
/// `online` must be a live handle and `ap_mac` null or a NUL-terminated
/// string.
#[no_mangle]
pub unsafe extern "C" fn wiloc_online_set_assoc(online: *mut WilocOnline, ap_mac: *const c_char) -> WilocStatus {
    guard(|| {
        let online = online.as_mut().ok_or_else(|| null("online"))?;
        online.assoc_ap = if ap_mac.is_null() {
            None
        } else {
            Some(str_arg(ap_mac, "ap_mac")?.parse().map_err(invalid)?)
        };
        Ok(())
    })
}

/// # Safety
/// `online` must be null or a handle from [`wiloc_online_new`] not yet
/// freed.
#[no_mangle]
pub unsafe extern "C" fn wiloc_online_free(online: *mut WilocOnline) {
    if !online.is_null() {
        drop(Box::from_raw(online));
    }
}

/// Localize an online fingerprint. Heuristics that cannot apply fall back
/// to Baseline and set `fell_back`.
///
/// # Safety
/// `db` and `online` must be live handles and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn wiloc_localize(
    db: *const WilocDb,
    online: *const WilocOnline,
    heuristic: WilocHeuristic,
    out: *mut WilocEstimate,
) -> WilocStatus {
    guard(|| {
        let db = db.as_ref().ok_or_else(|| null("db"))?;
        let online = online.as_ref().ok_or_else(|| null("online"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if online.sums.is_empty() {
            return Err(Fail(WilocStatus::NotLocalizable, "no observations".into()));
        }
        let fp = OnlineFingerprint {
            client_id: online.client,
            band: online.band,
            entries: online
                .sums
                .iter()
                .map(|(ap, &(s, n))| (*ap, (s as f64 / f64::from(n)).round() as i16))
                .collect(),
            window_start_ms: 0,
            window_end_ms: 0,
        };
        let est = localize(&fp, &db.db, online.assoc_ap.as_ref(), &HeuristicConfig::new(heuristic_of(heuristic)))?;
        let mut building = [0 as c_char; WILOC_BUILDING_LEN];
        for (d, s) in building.iter_mut().zip(est.landmark.building.bytes().take(WILOC_BUILDING_LEN - 1)) {
            *d = s as c_char;
        }
        *out = WilocEstimate {
            building,
            floor: est.landmark.floor,
            landmark_index: est.landmark.index,
            x_m: est.landmark.position.x_m,
            y_m: est.landmark.position.y_m,
            score: est.score,
            cardinality_used: est.cardinality_used as u32,
            matched_ap_count: est.matched_ap_count as u32,
            heuristic: heuristic_to_c(est.heuristic),
            requested_heuristic: heuristic_to_c(est.requested_heuristic),
            fell_back: u8::from(est.fell_back()),
        };
        Ok(())
    })
}

/// Number of distinct APs observed so far, 0 for null.
///
/// # Safety
/// `online` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn wiloc_online_cardinality(online: *const WilocOnline) -> usize {
    online.as_ref().map_or(0, |o| o.sums.len())
}

/// Parse one feed line, apply the default age and signal thresholds and
/// classify it. `*kept` is 0 when the thresholds drop the record.
///
/// # Safety
/// `line` must be a NUL-terminated string; `class` and `kept` valid
/// pointers.
#[no_mangle]
pub unsafe extern "C" fn wiloc_classify_line(
    line: *const c_char,
    class: *mut WilocFrameClass,
    kept: *mut u8,
) -> WilocStatus {
    guard(|| {
        let line = str_arg(line, "line")?;
        if class.is_null() || kept.is_null() {
            return Err(null("class/kept"));
        }
        let r = parse_feed_line(line).map_err(|e| invalid(e.to_string()))?;
        *kept = u8::from(filter_record(&r, &FilterThresholds::default()));
        *class = match classify_record(&r, &ProbeRates::default()) {
            FrameClass::Scanning => WilocFrameClass::Scanning,
            FrameClass::NonScanning => WilocFrameClass::NonScanning,
        };
        Ok(())
    })
}
