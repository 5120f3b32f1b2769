//! End-to-end runs: survey a scenario into a fingerprint database, simulate
//! its online feed and evaluate it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::evaluate::{build_report, inter_scan_stats, survey_plan, EvalConfig, EvalError, EvaluationReport, InterScanReport};
use crate::feed::{
    filter_and_classify, read_feed_archive, write_feed_archive, ArchiveError, Band, ClientId, FilterThresholds, ProbeRates,
};
use crate::fingerprint::{
    build_db, read_landmark_table, write_landmark_table, ApDirectory, ClassFilter, FingerprintDb, FingerprintError,
};
use crate::localizer::Heuristic;
use crate::sim::{self, ClientState, PerBand, ScenarioError, SimOutput, SimScenario, TruthLog};

pub const SURVEY_DWELL_S: u32 = 300;
pub const SURVEY_TRANSIT_S: u32 = 10;

/// Run the survey variant of `scenario` and build its fingerprint database.
pub fn survey_db(scenario: &SimScenario) -> Result<(FingerprintDb, Vec<(String, Band)>), FingerprintError> {
    let survey = scenario.survey(SURVEY_DWELL_S, SURVEY_TRANSIT_S);
    let out = sim::run(&survey);
    db_from_survey(scenario, &out)
}

pub fn db_from_survey(
    scenario: &SimScenario,
    survey: &SimOutput,
) -> Result<(FingerprintDb, Vec<(String, Band)>), FingerprintError> {
    let classified = filter_and_classify(&survey.records, &FilterThresholds::default(), &ProbeRates::default());
    let plan = survey_plan(&survey.truth, &scenario.landmarks);
    build_db(&classified, &plan, scenario.ap_directory())
}

pub fn client_states(scenario: &SimScenario) -> BTreeMap<ClientId, ClientState> {
    scenario.clients.iter().map(|c| (c.client_id, c.state)).collect()
}

pub struct Evaluation {
    pub report: EvaluationReport,
    pub scans: InterScanReport,
}

pub fn evaluate_run(
    scenario: &SimScenario,
    online: &SimOutput,
    db: &FingerprintDb,
    cfg: &EvalConfig,
) -> Result<Evaluation, EvalError> {
    let truth = TruthLog::new(online.truth.iter().cloned());
    let report = build_report(&online.records, &truth, db, &scenario.landmarks, cfg)?;
    let classified = filter_and_classify(&online.records, &cfg.thresholds, &cfg.probe_rates);
    let scans = inter_scan_stats(&classified, &client_states(scenario));
    Ok(Evaluation { report, scans })
}

/// Headline mismatch rates, percent, that calibration steers each band
/// towards.
pub const REFERENCE_MISMATCH: PerBand<f64> = PerBand {
    band24: 57.30,
    band5: 30.6,
};

/// Mean headline mismatch rate per band at one controller intensity.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationPoint {
    pub intensity: f64,
    pub rate: PerBand<f64>,
    /// Rates per seed, in seed order.
    pub per_seed: Vec<PerBand<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub points: Vec<CalibrationPoint>,
    /// Grid intensity whose mean rate lies closest to the target, per band.
    pub chosen: PerBand<f64>,
}

/// Headline mismatch per band for one scenario, surveying and replaying it
/// as-is.
pub fn headline_rates(scenario: &SimScenario) -> Result<PerBand<f64>, EvalError> {
    let (db, _) = survey_db(scenario)?;
    let online = sim::run(scenario);
    let cfg = EvalConfig {
        heuristics: vec![Heuristic::Baseline],
        class_filters: vec![ClassFilter::Both],
        ..EvalConfig::default()
    };
    let truth = TruthLog::new(online.truth.iter().cloned());
    let report = build_report(&online.records, &truth, &db, &scenario.landmarks, &cfg)?;
    Ok(PerBand::new(
        report.headline_mismatch(Band::Band24).unwrap_or(0.0),
        report.headline_mismatch(Band::Band5).unwrap_or(0.0),
    ))
}

/// Sweep controller intensity over `grid` (both bands at once), averaging
/// the headline mismatch over `seeds`, and pick per band the intensity
/// closest to `target`.
pub fn calibrate<F>(scenario: F, seeds: &[u64], grid: &[f64], target: PerBand<f64>) -> Result<Calibration, EvalError>
where
    F: Fn(u64) -> SimScenario + Sync,
{
    let mut points = Vec::with_capacity(grid.len());
    for &intensity in grid {
        let per_seed: Vec<Result<PerBand<f64>, EvalError>> = std::thread::scope(|sc| {
            let handles: Vec<_> = seeds
                .iter()
                .map(|&seed| {
                    let scenario = &scenario;
                    sc.spawn(move || {
                        let mut s = scenario(seed);
                        s.controller.band24.intensity = intensity;
                        s.controller.band5.intensity = intensity;
                        headline_rates(&s)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("calibration worker")).collect()
        });
        let per_seed = per_seed.into_iter().collect::<Result<Vec<_>, _>>()?;
        let n = per_seed.len().max(1) as f64;
        let rate = PerBand::new(
            per_seed.iter().map(|r| r.band24).sum::<f64>() / n,
            per_seed.iter().map(|r| r.band5).sum::<f64>() / n,
        );
        points.push(CalibrationPoint {
            intensity,
            rate,
            per_seed,
        });
    }
    let pick = |band: Band| {
        points
            .iter()
            .min_by(|a, b| {
                let da = (a.rate.get(band) - target.get(band)).abs();
                let db = (b.rate.get(band) - target.get(band)).abs();
                da.total_cmp(&db)
            })
            .map_or(0.0, |p| p.intensity)
    };
    let chosen = PerBand::new(pick(Band::Band24), pick(Band::Band5));
    Ok(Calibration { points, chosen })
}

/// Intensities 0, 0.1, ..., 1.
pub fn default_calibration_grid() -> Vec<f64> {
    (0..=10).map(|i| f64::from(i) / 10.0).collect()
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error(transparent)]
    Fingerprint(#[from] FingerprintError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}: no feed archives found")]
    NoFeeds(PathBuf),
}

/// File layout of a simulated run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn online_dir(&self) -> PathBuf {
        self.root.join("online")
    }

    pub fn survey_dir(&self) -> PathBuf {
        self.root.join("survey")
    }

    pub fn online_feed(&self) -> PathBuf {
        self.online_dir().join("feed.csv")
    }

    pub fn online_truth(&self) -> PathBuf {
        self.online_dir().join(TRUTH_FILE)
    }

    pub fn survey_feed(&self) -> PathBuf {
        self.survey_dir().join("feed.csv")
    }

    pub fn survey_truth(&self) -> PathBuf {
        self.survey_dir().join(TRUTH_FILE)
    }

    pub fn landmarks(&self) -> PathBuf {
        self.root.join("landmarks.csv")
    }

    pub fn aps(&self) -> PathBuf {
        self.root.join("aps.csv")
    }

    pub fn scenario(&self) -> PathBuf {
        self.root.join("scenario.json")
    }
}

/// Truth file name inside a feed directory.
pub const TRUTH_FILE: &str = "truth.csv";

fn create_dir(path: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(path).map_err(|source| PipelineError::Io {
        path: path.to_owned(),
        source,
    })
}

/// Simulate the online and survey variants of `scenario` into `run`.
pub fn simulate_run(scenario: &SimScenario, run: &RunDir) -> Result<(), PipelineError> {
    scenario.validate()?;
    create_dir(&run.online_dir())?;
    create_dir(&run.survey_dir())?;
    let online = sim::run(scenario);
    let survey = sim::run(&scenario.survey(SURVEY_DWELL_S, SURVEY_TRANSIT_S));
    write_feed_archive(&run.online_feed(), &online.records)?;
    sim::write_truth(&run.online_truth(), &online.truth)?;
    write_feed_archive(&run.survey_feed(), &survey.records)?;
    sim::write_truth(&run.survey_truth(), &survey.truth)?;
    write_landmark_table(&run.landmarks(), &scenario.landmarks)?;
    scenario.ap_directory().write_csv(&run.aps())?;
    scenario.save(&run.scenario())?;
    Ok(())
}

/// Feed archives in `dir`: every `.csv` file except the truth file, by name.
pub fn feed_archives(dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let entries = fs::read_dir(dir).map_err(|source| PipelineError::Io {
        path: dir.to_owned(),
        source,
    })?;
    let mut out = Vec::new();
    for e in entries {
        let path = e
            .map_err(|source| PipelineError::Io {
                path: dir.to_owned(),
                source,
            })?
            .path();
        let is_csv = path.extension().is_some_and(|x| x == "csv");
        let is_truth = path.file_name().is_some_and(|n| n == TRUTH_FILE);
        if path.is_file() && is_csv && !is_truth {
            out.push(path);
        }
    }
    if out.is_empty() {
        return Err(PipelineError::NoFeeds(dir.to_owned()));
    }
    out.sort();
    Ok(out)
}

/// Build a fingerprint database from the survey feeds in `feed_dir`, the
/// survey client's truth log and the landmark and AP tables.
pub fn fingerprint_dir(
    feed_dir: &Path,
    truth: &Path,
    landmarks: &Path,
    aps: &Path,
    thresholds: &FilterThresholds,
    probe_rates: &ProbeRates,
) -> Result<(FingerprintDb, Vec<(String, Band)>), PipelineError> {
    let mut records = Vec::new();
    for path in feed_archives(feed_dir)? {
        records.extend(read_feed_archive(&path)?);
    }
    let classified = filter_and_classify(&records, thresholds, probe_rates);
    let truth = sim::read_truth(truth)?;
    let landmarks = read_landmark_table(landmarks)?;
    let plan = survey_plan(&truth, &landmarks);
    Ok(build_db(&classified, &plan, ApDirectory::read_csv(aps)?)?)
}

/// Evaluate a run's online feed against `db`. Client states for the
/// inter-scan statistics come from the run's scenario when it has one.
pub fn evaluate_dir(run: &RunDir, db: &FingerprintDb, cfg: &EvalConfig) -> Result<Evaluation, PipelineError> {
    let records = read_feed_archive(&run.online_feed())?;
    let truth = TruthLog::new(sim::read_truth(&run.online_truth())?);
    let landmarks = read_landmark_table(&run.landmarks())?;
    let states = if run.scenario().is_file() {
        client_states(&SimScenario::load(&run.scenario())?)
    } else {
        BTreeMap::new()
    };
    let report = build_report(&records, &truth, db, &landmarks, cfg)?;
    let classified = filter_and_classify(&records, &cfg.thresholds, &cfg.probe_rates);
    let scans = inter_scan_stats(&classified, &states);
    Ok(Evaluation { report, scans })
}
