//! Nearest-neighbour matching in signal space, with floor-detection
//! heuristics that shortlist APs before matching.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feed::{Band, ClientId, MacAddr};
use crate::fingerprint::{
    cardinality, ApDirectory, Fingerprint, FingerprintDb, Landmark, OfflineFingerprint,
    OnlineFingerprint,
};

/// Value substituted for an AP that one side of the comparison lacks.
pub const DEFAULT_MISSING_AP_SENTINEL: i16 = -90;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LocalizeError {
    #[error("band mismatch: online fingerprint is {online}, offline is {offline}")]
    BandMismatch { online: Band, offline: Band },
    #[error("no offline fingerprints for band {0}")]
    NoMap(Band),
    #[error("heuristic {0} is not applicable: {1}")]
    HeuristicInapplicable(Heuristic, String),
    #[error("floor selection needs a floor heuristic, got {0}")]
    NotAFloorHeuristic(Heuristic),
    #[error("missing-AP sentinel {0} dBm must be below -72 dBm")]
    BadSentinel(i16),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Heuristic {
    Baseline,
    MaxApCount,
    MaxRssiFloor,
    AssociationFloor,
}

impl Heuristic {
    pub const ALL: [Heuristic; 4] = [
        Heuristic::Baseline,
        Heuristic::MaxApCount,
        Heuristic::MaxRssiFloor,
        Heuristic::AssociationFloor,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Heuristic::Baseline => "baseline",
            Heuristic::MaxApCount => "max-ap-count",
            Heuristic::MaxRssiFloor => "max-rssi-floor",
            Heuristic::AssociationFloor => "association-floor",
        }
    }
}

impl fmt::Display for Heuristic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Heuristic {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(Heuristic::Baseline),
            "max-ap-count" | "maxapcount" => Ok(Heuristic::MaxApCount),
            "max-rssi-floor" | "maxrssifloor" => Ok(Heuristic::MaxRssiFloor),
            "association-floor" | "associationfloor" => Ok(Heuristic::AssociationFloor),
            other => Err(format!("unknown heuristic `{other}`")),
        }
    }
}

/// Which AP keys a heuristic match compares once the floor is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchScope {
    /// Union of the shortlisted online APs and each candidate's offline APs.
    Union,
    /// Only the shortlisted online APs; offline-only APs are ignored.
    Shortlist,
}

impl FromStr for MatchScope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "union" => Ok(MatchScope::Union),
            "shortlist" => Ok(MatchScope::Shortlist),
            other => Err(format!("unknown match scope `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeuristicConfig {
    pub heuristic: Heuristic,
    pub missing_ap_sentinel: i16,
    pub match_scope: MatchScope,
}

impl HeuristicConfig {
    pub fn new(heuristic: Heuristic) -> Self {
        Self {
            heuristic,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), LocalizeError> {
        if self.missing_ap_sentinel >= -72 {
            return Err(LocalizeError::BadSentinel(self.missing_ap_sentinel));
        }
        Ok(())
    }
}

impl Default for HeuristicConfig {
    fn default() -> Self {
        Self {
            heuristic: Heuristic::Baseline,
            missing_ap_sentinel: DEFAULT_MISSING_AP_SENTINEL,
            match_scope: MatchScope::Shortlist,
        }
    }
}

/// A floor within a building.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FloorRef {
    pub building: String,
    pub floor: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationEstimate {
    pub client_id: ClientId,
    pub landmark: Landmark,
    pub band: Band,
    /// Euclidean distance in signal space, dB.
    pub score: f64,
    pub cardinality_used: usize,
    /// Heuristic that actually produced the estimate.
    pub heuristic: Heuristic,
    pub requested_heuristic: Heuristic,
    /// Why the requested heuristic was abandoned for Baseline, if it was.
    pub fallback_reason: Option<String>,
    pub matched_ap_count: usize,
}

impl LocalizationEstimate {
    pub fn fell_back(&self) -> bool {
        self.fallback_reason.is_some()
    }

    pub fn floor(&self) -> i32 {
        self.landmark.floor
    }
}

/// Squared distance over `keys` (or the union of both key sets when `keys`
/// is `None`), completing absent APs with `sentinel`.
fn squared_distance(
    online: &BTreeMap<MacAddr, i16>,
    offline: &BTreeMap<MacAddr, i16>,
    sentinel: i16,
    shortlist_only: bool,
) -> i64 {
    let s = i64::from(sentinel);
    let get = |m: &BTreeMap<MacAddr, i16>, k| m.get(k).map(|&v| i64::from(v)).unwrap_or(s);
    let mut sum: i64 = online
        .keys()
        .map(|k| {
            let d = get(online, k) - get(offline, k);
            d * d
        })
        .sum();
    if !shortlist_only {
        sum += offline
            .iter()
            .filter(|(k, _)| !online.contains_key(k))
            .map(|(_, &v)| {
                let d = i64::from(v) - s;
                d * d
            })
            .sum::<i64>();
    }
    sum
}

/// Euclidean distance over the union of AP keys; an AP missing on one side
/// takes the value `sentinel` there.
pub fn signal_distance<A, B>(online: &A, offline: &B, sentinel: i16) -> Result<f64, LocalizeError>
where
    A: Fingerprint + ?Sized,
    B: Fingerprint + ?Sized,
{
    if online.band() != offline.band() {
        return Err(LocalizeError::BandMismatch {
            online: online.band(),
            offline: offline.band(),
        });
    }
    Ok((squared_distance(online.entries(), offline.entries(), sentinel, false) as f64).sqrt())
}

/// Argmin over `candidates`, which must be in landmark order so the first
/// strict minimum is the lowest `(building, floor, index)`.
fn best_match<'a>(
    entries: &BTreeMap<MacAddr, i16>,
    candidates: impl Iterator<Item = &'a OfflineFingerprint>,
    sentinel: i16,
    shortlist_only: bool,
) -> Option<(&'a OfflineFingerprint, i64)> {
    let mut best: Option<(&OfflineFingerprint, i64)> = None;
    for fp in candidates {
        let d = squared_distance(entries, &fp.entries, sentinel, shortlist_only);
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((fp, d));
        }
    }
    best
}

fn estimate(
    online: &OnlineFingerprint,
    entries: &BTreeMap<MacAddr, i16>,
    matched: &OfflineFingerprint,
    sq: i64,
    heuristic: Heuristic,
    requested: Heuristic,
    fallback_reason: Option<String>,
) -> LocalizationEstimate {
    LocalizationEstimate {
        client_id: online.client_id,
        landmark: matched.landmark.clone(),
        band: online.band,
        score: (sq as f64).sqrt(),
        cardinality_used: entries.len(),
        heuristic,
        requested_heuristic: requested,
        fallback_reason,
        matched_ap_count: entries.keys().filter(|k| matched.entries.contains_key(k)).count(),
    }
}

/// Landmark whose offline fingerprint is nearest in signal space.
pub fn localize_baseline(
    online: &OnlineFingerprint,
    db: &FingerprintDb,
    sentinel: i16,
) -> Result<LocalizationEstimate, LocalizeError> {
    let fps = db.band(online.band);
    let (fp, sq) =
        best_match(&online.entries, fps.iter(), sentinel, false).ok_or(LocalizeError::NoMap(online.band))?;
    Ok(estimate(
        online,
        &online.entries,
        fp,
        sq,
        Heuristic::Baseline,
        Heuristic::Baseline,
        None,
    ))
}

/// Pick the floor a floor heuristic believes the client is on.
pub fn select_floor(
    online: &OnlineFingerprint,
    dir: &ApDirectory,
    assoc_ap: Option<&MacAddr>,
    heuristic: Heuristic,
) -> Result<FloorRef, LocalizeError> {
    let floor_of = |ap: &MacAddr| {
        dir.get(ap).map(|a| FloorRef {
            building: a.building.clone(),
            floor: a.floor,
        })
    };
    let no_known = || {
        LocalizeError::HeuristicInapplicable(heuristic, "no reporting AP is in the directory".into())
    };
    match heuristic {
        Heuristic::Baseline => Err(LocalizeError::NotAFloorHeuristic(heuristic)),
        Heuristic::AssociationFloor => {
            let ap = assoc_ap.ok_or_else(|| {
                LocalizeError::HeuristicInapplicable(heuristic, "client is not associated".into())
            })?;
            floor_of(ap).ok_or_else(|| {
                LocalizeError::HeuristicInapplicable(
                    heuristic,
                    format!("association AP {ap} is not in the directory"),
                )
            })
        }
        Heuristic::MaxRssiFloor => {
            // Highest RSSI wins; equal RSSI goes to the lowest floor.
            online
                .entries
                .iter()
                .filter_map(|(ap, &rssi)| floor_of(ap).map(|f| (rssi, f)))
                .min_by(|(ra, fa), (rb, fb)| {
                    rb.cmp(ra)
                        .then(fa.floor.cmp(&fb.floor))
                        .then(fa.building.cmp(&fb.building))
                })
                .map(|(_, f)| f)
                .ok_or_else(no_known)
        }
        Heuristic::MaxApCount => {
            let mut per_floor: BTreeMap<FloorRef, (usize, i16)> = BTreeMap::new();
            for (ap, &rssi) in &online.entries {
                if let Some(f) = floor_of(ap) {
                    let e = per_floor.entry(f).or_insert((0, i16::MIN));
                    e.0 += 1;
                    e.1 = e.1.max(rssi);
                }
            }
            // Most APs; then strongest AP on the floor; then lowest floor.
            per_floor
                .into_iter()
                .min_by(|(fa, (ca, ra)), (fb, (cb, rb))| {
                    cb.cmp(ca)
                        .then(rb.cmp(ra))
                        .then(fa.floor.cmp(&fb.floor))
                        .then(fa.building.cmp(&fb.building))
                })
                .map(|(f, _)| f)
                .ok_or_else(no_known)
        }
    }
}

/// Shortlist the online APs on the heuristic's floor, restrict candidates
/// to that floor, then match. An empty shortlist or an empty floor falls
/// back to Baseline and the estimate says so.
pub fn localize_with_heuristic(
    online: &OnlineFingerprint,
    db: &FingerprintDb,
    assoc_ap: Option<&MacAddr>,
    cfg: &HeuristicConfig,
) -> Result<LocalizationEstimate, LocalizeError> {
    cfg.validate()?;
    if cfg.heuristic == Heuristic::Baseline {
        return localize_baseline(online, db, cfg.missing_ap_sentinel);
    }
    let floor = select_floor(online, db.directory(), assoc_ap, cfg.heuristic)?;
    let on_floor = |ap: &MacAddr| {
        db.directory()
            .get(ap)
            .is_some_and(|a| a.floor == floor.floor && a.building == floor.building)
    };
    let shortlisted: BTreeMap<MacAddr, i16> = online
        .entries
        .iter()
        .filter(|(ap, _)| on_floor(ap))
        .map(|(k, v)| (*k, *v))
        .collect();

    let fallback = |reason: String| {
        let mut est = localize_baseline(online, db, cfg.missing_ap_sentinel)?;
        est.requested_heuristic = cfg.heuristic;
        est.fallback_reason = Some(reason);
        Ok(est)
    };
    if shortlisted.is_empty() {
        return fallback(format!(
            "no reporting AP on floor {} of {}",
            floor.floor, floor.building
        ));
    }
    let candidates = db
        .band(online.band)
        .iter()
        .filter(|fp| fp.landmark.floor == floor.floor && fp.landmark.building == floor.building);
    let shortlist_only = cfg.match_scope == MatchScope::Shortlist;
    match best_match(&shortlisted, candidates, cfg.missing_ap_sentinel, shortlist_only) {
        Some((fp, sq)) => Ok(estimate(
            online,
            &shortlisted,
            fp,
            sq,
            cfg.heuristic,
            cfg.heuristic,
            None,
        )),
        None => fallback(format!(
            "no landmarks on floor {} of {}",
            floor.floor, floor.building
        )),
    }
}

/// [`localize_with_heuristic`], falling back to Baseline (flagged) when the
/// heuristic cannot pick a floor.
pub fn localize(
    online: &OnlineFingerprint,
    db: &FingerprintDb,
    assoc_ap: Option<&MacAddr>,
    cfg: &HeuristicConfig,
) -> Result<LocalizationEstimate, LocalizeError> {
    match localize_with_heuristic(online, db, assoc_ap, cfg) {
        Err(LocalizeError::HeuristicInapplicable(h, reason)) => {
            let mut est = localize_baseline(online, db, cfg.missing_ap_sentinel)?;
            est.requested_heuristic = h;
            est.fallback_reason = Some(reason);
            Ok(est)
        }
        other => other,
    }
}

/// Online cardinality, re-exported for callers binning estimates.
pub fn online_cardinality(online: &OnlineFingerprint) -> usize {
    cardinality(online)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fingerprint::{ApInfo, Position};
    use proptest::prelude::*;

    fn ap(n: u8) -> MacAddr {
        MacAddr([2, 0, 0, 0, 0, n])
    }

    fn online(entries: &[(u8, i16)]) -> OnlineFingerprint {
        OnlineFingerprint {
            client_id: ClientId([1; 20]),
            band: Band::Band24,
            entries: entries.iter().map(|&(a, r)| (ap(a), r)).collect(),
            window_start_ms: 0,
            window_end_ms: 40_000,
        }
    }

    fn offline(floor: i32, index: u32, entries: &[(u8, i16)]) -> OfflineFingerprint {
        OfflineFingerprint {
            landmark: Landmark::new("B", floor, index, 3.0 * f64::from(index), 0.0),
            band: Band::Band24,
            entries: entries.iter().map(|&(a, r)| (ap(a), r)).collect(),
            sample_count: BTreeMap::new(),
        }
    }

    /// APs 1..=3 on floor 3, 4..=6 on floor 4, 7..=9 on floor 2.
    fn directory() -> ApDirectory {
        ApDirectory::new((1..=9u8).map(|i| ApInfo {
            ap_id: ap(i),
            building: "B".into(),
            floor: match i {
                1..=3 => 3,
                4..=6 => 4,
                _ => 2,
            },
            position: Position::new(f64::from(i), 0.0),
            channel_24: Some(1),
            channel_5: Some(36),
            tx_power_dbm: 20.0,
        }))
    }

    #[test]
    fn distance_examples() {
        let a = online(&[(1, -50), (2, -60)]);
        let same = offline(0, 0, &[(1, -50), (2, -60)]);
        assert_eq!(signal_distance(&a, &same, -90).unwrap(), 0.0);
        assert_eq!(signal_distance(&online(&[(1, -50)]), &offline(0, 0, &[(1, -53)]), -90).unwrap(), 3.0);
        assert_eq!(
            signal_distance(&online(&[(1, -50)]), &offline(0, 0, &[(1, -50), (2, -60)]), -90).unwrap(),
            30.0
        );
    }

    #[test]
    fn band_mismatch_is_usage_error() {
        let mut off = offline(0, 0, &[(1, -50)]);
        off.band = Band::Band5;
        assert!(matches!(
            signal_distance(&online(&[(1, -50)]), &off, -90),
            Err(LocalizeError::BandMismatch { .. })
        ));
    }

    fn db(fps: Vec<OfflineFingerprint>) -> FingerprintDb {
        FingerprintDb::new(directory(), fps).unwrap()
    }

    #[test]
    fn exact_match_scores_zero() {
        let d = db(vec![offline(3, 0, &[(1, -40)]), offline(3, 1, &[(1, -50), (2, -70)])]);
        let est = localize_baseline(&online(&[(1, -50), (2, -70)]), &d, -90).unwrap();
        assert_eq!(est.landmark.index, 1);
        assert_eq!(est.score, 0.0);
        assert_eq!(est.matched_ap_count, 2);
    }

    #[test]
    fn ties_go_to_lowest_floor_then_index() {
        let d = db(vec![
            offline(4, 0, &[(1, -55)]),
            offline(3, 9, &[(1, -45)]),
            offline(3, 2, &[(1, -55)]),
        ]);
        let est = localize_baseline(&online(&[(1, -50)]), &d, -90).unwrap();
        assert_eq!((est.landmark.floor, est.landmark.index), (3, 2));
    }

    #[test]
    fn empty_band_is_no_map() {
        let d = db(vec![offline(3, 0, &[(1, -40)])]);
        let mut o = online(&[(1, -50)]);
        o.band = Band::Band5;
        assert_eq!(localize_baseline(&o, &d, -90).unwrap_err(), LocalizeError::NoMap(Band::Band5));
    }

    #[test]
    fn floor_selection_examples() {
        let dir = directory();
        let o = online(&[(1, -70), (2, -70), (4, -50)]);
        assert_eq!(select_floor(&o, &dir, None, Heuristic::MaxApCount).unwrap().floor, 3);
        assert_eq!(select_floor(&o, &dir, None, Heuristic::MaxRssiFloor).unwrap().floor, 4);
        assert_eq!(
            select_floor(&o, &dir, Some(&ap(7)), Heuristic::AssociationFloor).unwrap().floor,
            2
        );
        assert!(matches!(
            select_floor(&o, &dir, None, Heuristic::AssociationFloor),
            Err(LocalizeError::HeuristicInapplicable(Heuristic::AssociationFloor, _))
        ));
        assert!(matches!(
            select_floor(&o, &dir, None, Heuristic::Baseline),
            Err(LocalizeError::NotAFloorHeuristic(_))
        ));
    }

    #[test]
    fn floor_selection_tie_breaks() {
        let dir = directory();
        // One AP each on floors 3 and 4: the stronger one decides.
        let o = online(&[(1, -70), (4, -60)]);
        assert_eq!(select_floor(&o, &dir, None, Heuristic::MaxApCount).unwrap().floor, 4);
        // Equal counts and equal strongest RSSI: lowest floor.
        let o = online(&[(1, -60), (7, -60)]);
        assert_eq!(select_floor(&o, &dir, None, Heuristic::MaxApCount).unwrap().floor, 2);
        assert_eq!(select_floor(&o, &dir, None, Heuristic::MaxRssiFloor).unwrap().floor, 2);
    }

    #[test]
    fn heuristic_on_true_floor_equals_floor_restricted_baseline() {
        let fps = vec![
            offline(3, 0, &[(1, -50), (2, -60)]),
            offline(3, 1, &[(1, -60), (2, -50)]),
            offline(4, 0, &[(1, -51), (2, -59)]),
        ];
        let d = db(fps.clone());
        let o = online(&[(1, -52), (2, -58)]);
        for scope in [MatchScope::Union, MatchScope::Shortlist] {
            let cfg = HeuristicConfig {
                heuristic: Heuristic::AssociationFloor,
                match_scope: scope,
                ..Default::default()
            };
            let est = localize_with_heuristic(&o, &d, Some(&ap(3)), &cfg).unwrap();
            let floor3 = db(fps.iter().filter(|f| f.landmark.floor == 3).cloned().collect());
            let base = localize_baseline(&o, &floor3, -90).unwrap();
            assert_eq!(est.landmark, base.landmark);
            assert_eq!(est.score, base.score);
            assert_eq!(est.heuristic, Heuristic::AssociationFloor);
            assert!(!est.fell_back());
        }
    }

    #[test]
    fn cross_floor_bleed_is_removed() {
        // AP 4 (floor 4) bleeds through; candidates on floor 4 look closer.
        let d = db(vec![offline(3, 0, &[(1, -50)]), offline(4, 0, &[(1, -50), (4, -45)])]);
        let o = online(&[(1, -50), (4, -45)]);
        assert_eq!(localize_baseline(&o, &d, -90).unwrap().floor(), 4);
        let cfg = HeuristicConfig::new(Heuristic::AssociationFloor);
        let est = localize_with_heuristic(&o, &d, Some(&ap(2)), &cfg).unwrap();
        assert_eq!(est.floor(), 3);
        assert_eq!(est.cardinality_used, 1);
    }

    #[test]
    fn empty_shortlist_falls_back() {
        let d = db(vec![offline(3, 0, &[(1, -50)]), offline(2, 0, &[(7, -50)])]);
        let o = online(&[(1, -50)]);
        let cfg = HeuristicConfig::new(Heuristic::AssociationFloor);
        // Associated to an AP on floor 2 but only a floor-3 AP reports.
        let est = localize_with_heuristic(&o, &d, Some(&ap(7)), &cfg).unwrap();
        assert!(est.fell_back());
        assert_eq!(est.heuristic, Heuristic::Baseline);
        assert_eq!(est.requested_heuristic, Heuristic::AssociationFloor);
        assert_eq!(est.floor(), 3);
    }

    #[test]
    fn unassociated_client_falls_back_via_localize() {
        let d = db(vec![offline(3, 0, &[(1, -50)])]);
        let cfg = HeuristicConfig::new(Heuristic::AssociationFloor);
        let o = online(&[(1, -50)]);
        assert!(localize_with_heuristic(&o, &d, None, &cfg).is_err());
        let est = localize(&o, &d, None, &cfg).unwrap();
        assert!(est.fell_back());
        assert_eq!(est.heuristic, Heuristic::Baseline);
    }

    #[test]
    fn sentinel_must_sit_below_filter_floor() {
        let cfg = HeuristicConfig {
            missing_ap_sentinel: -72,
            ..HeuristicConfig::new(Heuristic::MaxApCount)
        };
        let d = db(vec![offline(3, 0, &[(1, -50)])]);
        assert_eq!(
            localize_with_heuristic(&online(&[(1, -50)]), &d, None, &cfg).unwrap_err(),
            LocalizeError::BadSentinel(-72)
        );
    }

    fn arb_fp() -> impl Strategy<Value = Vec<(u8, i16)>> {
        prop::collection::btree_map(1u8..=9, -72i16..=-20, 1..6).prop_map(|m| m.into_iter().collect())
    }

    proptest! {
        #[test]
        fn distance_is_a_metric(a in arb_fp(), b in arb_fp(), c in arb_fp()) {
            let (oa, ob, oc) = (online(&a), offline(0, 0, &b), offline(0, 1, &c));
            let ab = signal_distance(&oa, &ob, -90).unwrap();
            let ba = signal_distance(&ob, &oa, -90).unwrap();
            let bc = signal_distance(&ob, &oc, -90).unwrap();
            let ac = signal_distance(&oa, &oc, -90).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, ba);
            prop_assert!(ac <= ab + bc + 1e-9);
            prop_assert_eq!(ab == 0.0, oa.entries == ob.entries);
        }

        #[test]
        fn argmin_invariant_under_shared_ap(fps in prop::collection::vec(arb_fp(), 1..12), q in arb_fp(), extra in -72i16..-20) {
            let mk = |add: bool| {
                fps.iter().enumerate().map(|(i, e)| {
                    let mut o = offline(3, i as u32, e);
                    if add { o.entries.insert(ap(200), extra); }
                    o
                }).collect::<Vec<_>>()
            };
            let mut dir_aps: Vec<ApInfo> = directory().iter().cloned().collect();
            dir_aps.push(ApInfo { ap_id: ap(200), building: "B".into(), floor: 3, position: Position::default(), channel_24: Some(1), channel_5: None, tx_power_dbm: 20.0 });
            let d1 = FingerprintDb::new(ApDirectory::new(dir_aps.clone()), mk(false)).unwrap();
            let d2 = FingerprintDb::new(ApDirectory::new(dir_aps), mk(true)).unwrap();
            let o1 = online(&q);
            let mut o2 = o1.clone();
            o2.entries.insert(ap(200), extra);
            let e1 = localize_baseline(&o1, &d1, -90).unwrap();
            let e2 = localize_baseline(&o2, &d2, -90).unwrap();
            prop_assert_eq!(e1.landmark, e2.landmark);
        }
    }
}
