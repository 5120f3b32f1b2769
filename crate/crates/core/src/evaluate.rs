//! Measurement suite: cardinality and mismatch statistics, inter-scan
//! arrival times, and per-cardinality localization errors for every
//! (band, heuristic, class filter) cell.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feed::{
    dedupe_latest_by, filter_and_classify, AssocStatus, Band, ClassifiedRecord, ClientId, FilterThresholds,
    FrameClass, MacAddr, ProbeRates, RtlsRecord,
};
use crate::fingerprint::{
    assemble_online, cardinality, ClassFilter, Fingerprint, FingerprintDb, Landmark, OfflineFingerprint,
    OnlineFingerprint, Window, DEFAULT_ONLINE_WINDOW_S,
};
use crate::localizer::{localize, Heuristic, HeuristicConfig, LocalizationEstimate, LocalizeError, MatchScope};
use crate::sim::{ClientState, TruthLog, TruthRow};

pub const PERCENTILES: [u8; 5] = [50, 75, 80, 85, 90];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Localize(#[from] LocalizeError),
    #[error(transparent)]
    Fingerprint(#[from] crate::fingerprint::FingerprintError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Nearest-rank percentile of ascending `sorted`; `None` when empty.
pub fn percentile_nearest_rank(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = (p * sorted.len() as f64 / 100.0).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ErrorOutcome {
    Meters(f64),
    DifferentFloor,
    /// No truth for the window.
    Skipped,
}

pub fn same_floor_error(est: &LocalizationEstimate, truth: Option<&Landmark>) -> ErrorOutcome {
    match truth {
        None => ErrorOutcome::Skipped,
        Some(t) if t.floor != est.landmark.floor || t.building != est.landmark.building => {
            ErrorOutcome::DifferentFloor
        }
        Some(t) => ErrorOutcome::Meters(t.position.distance(&est.landmark.position)),
    }
}

/// True iff the AP key sets differ; RSSI values are not compared.
pub fn cardinality_mismatch<A, B>(offline: &A, online: &B) -> bool
where
    A: Fingerprint + ?Sized,
    B: Fingerprint + ?Sized,
{
    !offline.entries().keys().eq(online.entries().keys())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanSummary {
    pub clients: usize,
    pub gaps: usize,
    pub median_s: Option<f64>,
    pub p90_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InterScanReport {
    pub per_state: BTreeMap<ClientState, ScanSummary>,
    /// Clients seen scanning fewer than twice.
    pub excluded: Vec<ClientId>,
}

/// Instants at which each client was heard scanning: record time minus
/// age, with instants less than a second apart merged.
pub fn scan_instants(records: &[ClassifiedRecord]) -> BTreeMap<ClientId, Vec<u64>> {
    let mut raw: BTreeMap<ClientId, BTreeSet<u64>> = BTreeMap::new();
    for c in records.iter().filter(|c| c.class == FrameClass::Scanning) {
        let r = &c.record;
        raw.entry(r.client_id)
            .or_default()
            .insert(r.timestamp_ms.saturating_sub(u64::from(r.age_s) * 1000));
    }
    raw.into_iter()
        .map(|(id, set)| {
            let mut merged: Vec<u64> = Vec::new();
            for t in set {
                if merged.last().is_none_or(|&l| t - l >= 1000) {
                    merged.push(t);
                }
            }
            (id, merged)
        })
        .collect()
}

pub fn inter_scan_stats(records: &[ClassifiedRecord], states: &BTreeMap<ClientId, ClientState>) -> InterScanReport {
    let mut gaps: BTreeMap<ClientState, (usize, Vec<f64>)> = BTreeMap::new();
    let mut excluded = Vec::new();
    let instants = scan_instants(records);
    for (id, state) in states {
        let ts = instants.get(id).map(Vec::as_slice).unwrap_or(&[]);
        if ts.len() < 2 {
            excluded.push(*id);
            continue;
        }
        let e = gaps.entry(*state).or_default();
        e.0 += 1;
        e.1.extend(ts.windows(2).map(|w| (w[1] - w[0]) as f64 / 1000.0));
    }
    let per_state = gaps
        .into_iter()
        .map(|(state, (clients, mut g))| {
            g.sort_by(f64::total_cmp);
            let summary = ScanSummary {
                clients,
                gaps: g.len(),
                median_s: percentile_nearest_rank(&g, 50.0),
                p90_s: percentile_nearest_rank(&g, 90.0),
            };
            (state, summary)
        })
        .collect();
    InterScanReport { per_state, excluded }
}

/// One client's online fingerprint for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineWindow {
    pub window: Window,
    pub fingerprint: OnlineFingerprint,
    /// AP of the latest associated record in the window, any class.
    pub assoc_ap: Option<MacAddr>,
    /// Scanning-class records in the window, before class filtering.
    pub scan_records: usize,
}

/// Slide a `window_s` window over each client's records in `band`, one
/// window ending at every `step_ms` tick. Records must already be filtered
/// and classified. Empty windows are dropped.
pub fn online_windows(
    records: &[ClassifiedRecord],
    band: Band,
    class_filter: ClassFilter,
    window_s: u64,
    step_ms: u64,
) -> Vec<OnlineWindow> {
    let mut per_client: BTreeMap<ClientId, Vec<&ClassifiedRecord>> = BTreeMap::new();
    for c in records.iter().filter(|c| c.record.band == band) {
        per_client.entry(c.record.client_id).or_default().push(c);
    }
    let mut out = Vec::new();
    for (client, mut recs) in per_client {
        recs.sort_by_key(|c| c.record.timestamp_ms);
        let first = recs[0].record.timestamp_ms;
        let last = recs[recs.len() - 1].record.timestamp_ms;
        let mut t = first.div_ceil(step_ms) * step_ms;
        while t < last + window_s * 1000 {
            let w = Window::ending_at(t, window_s);
            let lo = recs.partition_point(|c| c.record.timestamp_ms < w.start_ms);
            let hi = recs.partition_point(|c| c.record.timestamp_ms < w.end_ms);
            let slice = &recs[lo..hi];
            t += step_ms;
            if slice.is_empty() {
                continue;
            }
            let assoc_ap = slice
                .iter()
                .rev()
                .find(|c| c.record.assoc == AssocStatus::Associated)
                .map(|c| c.record.ap_id);
            let scan_records = slice.iter().filter(|c| c.class == FrameClass::Scanning).count();
            let admitted: Vec<&ClassifiedRecord> =
                slice.iter().copied().filter(|c| class_filter.admits(c.class)).collect();
            let deduped = dedupe_latest_by(admitted, |c| &c.record);
            if let Ok(fp) = assemble_online(deduped, client, band, w, class_filter) {
                out.push(OnlineWindow {
                    window: w,
                    fingerprint: fp,
                    assoc_ap,
                    scan_records,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub bands: Vec<Band>,
    pub heuristics: Vec<Heuristic>,
    pub class_filters: Vec<ClassFilter>,
    pub online_window_s: u64,
    pub report_period_s: u64,
    pub thresholds: FilterThresholds,
    pub probe_rates: ProbeRates,
    pub missing_ap_sentinel: i16,
    pub match_scope: MatchScope,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let h = HeuristicConfig::default();
        Self {
            bands: Band::ALL.to_vec(),
            heuristics: Heuristic::ALL.to_vec(),
            class_filters: ClassFilter::ALL.to_vec(),
            online_window_s: DEFAULT_ONLINE_WINDOW_S,
            report_period_s: 5,
            thresholds: FilterThresholds::default(),
            probe_rates: ProbeRates::default(),
            missing_ap_sentinel: h.missing_ap_sentinel,
            match_scope: h.match_scope,
        }
    }
}

/// Error statistics for one cardinality (or for all, `cardinality: None`).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CardinalityRow {
    pub cardinality: Option<usize>,
    /// Same-floor error at each of [`PERCENTILES`], meters.
    pub same_floor_m: [Option<f64>; 5],
    pub same_floor: usize,
    pub different_floor: usize,
    pub skipped: usize,
}

impl CardinalityRow {
    pub fn total(&self) -> usize {
        self.same_floor + self.different_floor + self.skipped
    }

    fn pct(&self, n: usize) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            100.0 * n as f64 / self.total() as f64
        }
    }

    pub fn different_floor_rate(&self) -> f64 {
        self.pct(self.different_floor)
    }

    pub fn same_floor_share(&self) -> f64 {
        self.pct(self.same_floor)
    }

    pub fn skipped_share(&self) -> f64 {
        self.pct(self.skipped)
    }

    pub fn percentile(&self, p: u8) -> Option<f64> {
        PERCENTILES.iter().position(|&q| q == p).and_then(|i| self.same_floor_m[i])
    }

    fn from_outcomes<'a>(cardinality: Option<usize>, outcomes: impl Iterator<Item = &'a ErrorOutcome>) -> Self {
        let mut row = CardinalityRow {
            cardinality,
            ..Default::default()
        };
        let mut meters = Vec::new();
        for o in outcomes {
            match *o {
                ErrorOutcome::Meters(m) => {
                    row.same_floor += 1;
                    meters.push(m);
                }
                ErrorOutcome::DifferentFloor => row.different_floor += 1,
                ErrorOutcome::Skipped => row.skipped += 1,
            }
        }
        meters.sort_by(f64::total_cmp);
        for (i, &p) in PERCENTILES.iter().enumerate() {
            row.same_floor_m[i] = percentile_nearest_rank(&meters, f64::from(p));
        }
        row
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub band: Band,
    pub heuristic: Heuristic,
    pub class_filter: ClassFilter,
    pub rows: Vec<CardinalityRow>,
    pub overall: CardinalityRow,
    /// `(cardinality, same-floor error m)` for every same-floor estimate.
    pub samples: Vec<(usize, f64)>,
    pub fallbacks: usize,
}

impl ErrorReport {
    pub fn row(&self, cardinality: usize) -> Option<&CardinalityRow> {
        self.rows.iter().find(|r| r.cardinality == Some(cardinality))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MismatchRow {
    pub cardinality: usize,
    pub total: usize,
    pub mismatched: usize,
}

/// Which online windows a mismatch rate is computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MismatchPopulation {
    AllWindows,
    /// Windows holding at least one Scanning record, the ones comparable
    /// with survey fingerprints built from scans.
    ScanWindows,
}

impl MismatchPopulation {
    pub const ALL: [MismatchPopulation; 2] = [MismatchPopulation::AllWindows, MismatchPopulation::ScanWindows];

    pub fn label(self) -> &'static str {
        match self {
            MismatchPopulation::AllWindows => "all-windows",
            MismatchPopulation::ScanWindows => "scan-windows",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MismatchReport {
    pub band: Band,
    pub class_filter: ClassFilter,
    pub population: MismatchPopulation,
    pub total: usize,
    pub mismatched: usize,
    pub rows: Vec<MismatchRow>,
}

impl MismatchReport {
    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            100.0 * self.mismatched as f64 / self.total as f64
        }
    }
}

/// Histograms of fingerprint cardinality.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CardinalityStats {
    pub offline: BTreeMap<Band, BTreeMap<usize, usize>>,
    /// Online windows whose client stayed at one landmark throughout.
    pub online: BTreeMap<(Band, ClassFilter), BTreeMap<usize, usize>>,
    /// Offline cardinality of the landmark behind each window counted in
    /// `online`, so both histograms weigh landmarks by visit time.
    pub paired_offline: BTreeMap<(Band, ClassFilter), BTreeMap<usize, usize>>,
}

pub fn histogram_mean(h: &BTreeMap<usize, usize>) -> f64 {
    let n: usize = h.values().sum();
    if n == 0 {
        return 0.0;
    }
    h.iter().map(|(k, v)| k * v).sum::<usize>() as f64 / n as f64
}

/// True when `lower` is first-order stochastically dominated by `upper`:
/// its CDF is at least `upper`'s everywhere.
pub fn stochastically_dominated(lower: &BTreeMap<usize, usize>, upper: &BTreeMap<usize, usize>) -> bool {
    let (nl, nu) = (lower.values().sum::<usize>(), upper.values().sum::<usize>());
    if nl == 0 || nu == 0 {
        return false;
    }
    let keys: BTreeSet<usize> = lower.keys().chain(upper.keys()).copied().collect();
    let (mut cl, mut cu) = (0usize, 0usize);
    for k in keys {
        cl += lower.get(&k).copied().unwrap_or(0);
        cu += upper.get(&k).copied().unwrap_or(0);
        // cl/nl >= cu/nu without floating point.
        if cl * nu < cu * nl {
            return false;
        }
    }
    true
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvaluationReport {
    pub errors: Vec<ErrorReport>,
    pub mismatch: Vec<MismatchReport>,
    pub cardinality: CardinalityStats,
}

impl EvaluationReport {
    pub fn error(&self, band: Band, heuristic: Heuristic, class_filter: ClassFilter) -> Option<&ErrorReport> {
        self.errors
            .iter()
            .find(|e| e.band == band && e.heuristic == heuristic && e.class_filter == class_filter)
    }

    pub fn mismatch(
        &self,
        band: Band,
        class_filter: ClassFilter,
        population: MismatchPopulation,
    ) -> Option<&MismatchReport> {
        self.mismatch
            .iter()
            .find(|m| m.band == band && m.class_filter == class_filter && m.population == population)
    }

    /// Mismatch rate of scan-bearing windows with both frame classes.
    pub fn headline_mismatch(&self, band: Band) -> Option<f64> {
        self.mismatch(band, ClassFilter::Both, MismatchPopulation::ScanWindows)
            .map(MismatchReport::rate)
    }
}

/// The record-time window whose reports describe frames sent during
/// `[enter_ms, exit_ms)`: each report covers the period before its stamp.
pub fn report_window(enter_ms: u64, exit_ms: u64) -> Window {
    Window::new(enter_ms + 1, exit_ms + 1)
}

/// Survey plan for [`crate::fingerprint::build_db`] from the survey
/// client's truth rows.
pub fn survey_plan(truth: &[TruthRow], landmarks: &[Landmark]) -> Vec<(Landmark, Window)> {
    let by_key: BTreeMap<(&str, i32, u32), &Landmark> = landmarks.iter().map(|l| (l.key(), l)).collect();
    truth
        .iter()
        .filter_map(|t| by_key.get(&t.key()).map(|l| ((*l).clone(), report_window(t.enter_ms, t.exit_ms))))
        .collect()
}

/// Evaluate every configured cell over one scenario's online feed.
pub fn build_report(
    records: &[RtlsRecord],
    truth: &TruthLog,
    db: &FingerprintDb,
    landmarks: &[Landmark],
    cfg: &EvalConfig,
) -> Result<EvaluationReport, EvalError> {
    let classified = filter_and_classify(records, &cfg.thresholds, &cfg.probe_rates);
    let by_key: BTreeMap<(&str, i32, u32), &Landmark> = landmarks.iter().map(|l| (l.key(), l)).collect();
    let period_ms = cfg.report_period_s * 1000;
    let mut report = EvaluationReport::default();

    for &band in &cfg.bands {
        let hist = report.cardinality.offline.entry(band).or_default();
        for fp in db.band(band) {
            *hist.entry(cardinality(fp)).or_default() += 1;
        }
        for &class_filter in &cfg.class_filters {
            let windows = online_windows(&classified, band, class_filter, cfg.online_window_s, period_ms);
            let truths: Vec<Option<&Landmark>> = windows
                .iter()
                .map(|w| {
                    truth
                        .covering(
                            &w.fingerprint.client_id,
                            w.window.start_ms.saturating_sub(period_ms),
                            w.window.end_ms,
                        )
                        .and_then(|t| by_key.get(&t.key()).copied())
                })
                .collect();

            let mut hist = BTreeMap::new();
            let mut paired = BTreeMap::new();
            let mut mm: [BTreeMap<usize, (usize, usize)>; 2] = Default::default();
            for (w, t) in windows.iter().zip(&truths) {
                let k = cardinality(&w.fingerprint);
                let Some(t) = t else { continue };
                let off = db.get(t, band);
                if let Some(off) = off {
                    *hist.entry(k).or_default() += 1;
                    *paired.entry(cardinality(off)).or_default() += 1;
                }
                let mismatched = off.is_none_or(|off: &OfflineFingerprint| cardinality_mismatch(off, &w.fingerprint));
                for (i, pop) in MismatchPopulation::ALL.iter().enumerate() {
                    if *pop == MismatchPopulation::ScanWindows && w.scan_records == 0 {
                        continue;
                    }
                    let e = mm[i].entry(k).or_default();
                    e.0 += 1;
                    e.1 += usize::from(mismatched);
                }
            }
            report.cardinality.online.insert((band, class_filter), hist);
            report.cardinality.paired_offline.insert((band, class_filter), paired);
            for (pop, mm) in MismatchPopulation::ALL.into_iter().zip(mm) {
                report.mismatch.push(MismatchReport {
                    band,
                    class_filter,
                    population: pop,
                    total: mm.values().map(|v| v.0).sum(),
                    mismatched: mm.values().map(|v| v.1).sum(),
                    rows: mm
                        .into_iter()
                        .map(|(cardinality, (total, mismatched))| MismatchRow {
                            cardinality,
                            total,
                            mismatched,
                        })
                        .collect(),
                });
            }

            for &heuristic in &cfg.heuristics {
                let hcfg = HeuristicConfig {
                    heuristic,
                    missing_ap_sentinel: cfg.missing_ap_sentinel,
                    match_scope: cfg.match_scope,
                };
                let mut outcomes: Vec<(usize, ErrorOutcome)> = Vec::with_capacity(windows.len());
                let mut fallbacks = 0;
                for (w, t) in windows.iter().zip(&truths) {
                    let est = localize(&w.fingerprint, db, w.assoc_ap.as_ref(), &hcfg)?;
                    fallbacks += usize::from(est.fell_back());
                    outcomes.push((cardinality(&w.fingerprint), same_floor_error(&est, *t)));
                }
                let cards: BTreeSet<usize> = outcomes.iter().map(|o| o.0).collect();
                let rows = cards
                    .into_iter()
                    .map(|k| CardinalityRow::from_outcomes(Some(k), outcomes.iter().filter(|o| o.0 == k).map(|o| &o.1)))
                    .collect();
                let mut samples: Vec<(usize, f64)> = outcomes
                    .iter()
                    .filter_map(|(k, o)| match o {
                        ErrorOutcome::Meters(m) => Some((*k, *m)),
                        _ => None,
                    })
                    .collect();
                samples.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
                report.errors.push(ErrorReport {
                    band,
                    heuristic,
                    class_filter,
                    rows,
                    overall: CardinalityRow::from_outcomes(None, outcomes.iter().map(|o| &o.1)),
                    samples,
                    fallbacks,
                });
            }
        }
    }
    Ok(report)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3}")).unwrap_or_default()
}

fn write_file(path: &Path, text: &str) -> Result<(), EvalError> {
    fs::write(path, text).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Write the report tables and raw CDF samples under `dir`.
pub fn write_report(dir: &Path, report: &EvaluationReport, scans: Option<&InterScanReport>) -> Result<(), EvalError> {
    let cdf_dir = dir.join("cdf");
    fs::create_dir_all(&cdf_dir).map_err(|source| EvalError::Io {
        path: cdf_dir.display().to_string(),
        source,
    })?;

    let mut errors = String::from(
        "band,heuristic,class_filter,cardinality,p50_m,p75_m,p80_m,p85_m,p90_m,same_floor,different_floor,skipped,total,different_floor_pct,same_floor_pct,skipped_pct,fallbacks\n",
    );
    for e in &report.errors {
        for row in e.rows.iter().chain(std::iter::once(&e.overall)) {
            let card = row.cardinality.map(|k| k.to_string()).unwrap_or_else(|| "all".into());
            let _ = write!(errors, "{},{},{},{card}", e.band, e.heuristic, e.class_filter.label());
            for p in row.same_floor_m {
                let _ = write!(errors, ",{}", opt(p));
            }
            let _ = writeln!(
                errors,
                ",{},{},{},{},{:.3},{:.3},{:.3},{}",
                row.same_floor,
                row.different_floor,
                row.skipped,
                row.total(),
                row.different_floor_rate(),
                row.same_floor_share(),
                row.skipped_share(),
                if row.cardinality.is_none() { e.fallbacks.to_string() } else { String::new() },
            );
        }
        let mut cdf = String::from("cardinality,error_m\n");
        for (k, m) in &e.samples {
            let _ = writeln!(cdf, "{k},{m:.3}");
        }
        write_file(
            &cdf_dir.join(format!("{}_{}_{}.csv", e.band, e.heuristic, e.class_filter.label())),
            &cdf,
        )?;
    }
    write_file(&dir.join("errors.csv"), &errors)?;

    let mut mm = String::from("band,class_filter,population,cardinality,total,mismatched,rate_pct\n");
    for m in &report.mismatch {
        let head = format!("{},{},{}", m.band, m.class_filter.label(), m.population.label());
        for r in &m.rows {
            let rate = if r.total == 0 { 0.0 } else { 100.0 * r.mismatched as f64 / r.total as f64 };
            let _ = writeln!(mm, "{head},{},{},{},{rate:.3}", r.cardinality, r.total, r.mismatched);
        }
        let _ = writeln!(mm, "{head},all,{},{},{:.3}", m.total, m.mismatched, m.rate());
    }
    write_file(&dir.join("mismatch.csv"), &mm)?;

    let mut card = String::from("band,source,cardinality,count\n");
    for (band, h) in &report.cardinality.offline {
        for (k, n) in h {
            let _ = writeln!(card, "{band},offline,{k},{n}");
        }
    }
    for ((band, cf), h) in &report.cardinality.online {
        for (k, n) in h {
            let _ = writeln!(card, "{band},online-{},{k},{n}", cf.label());
        }
    }
    for ((band, cf), h) in &report.cardinality.paired_offline {
        for (k, n) in h {
            let _ = writeln!(card, "{band},paired-offline-{},{k},{n}", cf.label());
        }
    }
    write_file(&dir.join("cardinality.csv"), &card)?;

    if let Some(s) = scans {
        let mut text = String::from("state,clients,gaps,median_s,p90_s\n");
        for (state, sum) in &s.per_state {
            let _ = writeln!(text, "{},{},{},{},{}", state.label(), sum.clients, sum.gaps, opt(sum.median_s), opt(sum.p90_s));
        }
        for id in &s.excluded {
            let _ = writeln!(text, "excluded:{id},0,0,,");
        }
        write_file(&dir.join("scan_stats.csv"), &text)?;
    }
    Ok(())
}
