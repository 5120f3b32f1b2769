//! Client scan scheduling.

use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use super::scenario::ClientState;

/// z-score of the 90th percentile of a standard normal.
const Z90: f64 = 1.281_551_565_545;

/// Family of the gap between two scans, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ScanGapDistribution {
    LogNormal { median_s: f64, sigma: f64 },
    Exponential { mean_s: f64 },
    Fixed { gap_s: f64 },
}

impl ScanGapDistribution {
    /// Log-normal with the given median and 90th percentile.
    pub fn log_normal_from_quantiles(median_s: f64, p90_s: f64) -> Self {
        ScanGapDistribution::LogNormal {
            median_s,
            sigma: (p90_s / median_s).ln() / Z90,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            ScanGapDistribution::LogNormal { median_s, sigma } => LogNormal::new(median_s.ln(), sigma)
                .expect("valid log-normal")
                .sample(rng),
            ScanGapDistribution::Exponential { mean_s } => -mean_s * (1.0 - rng.random::<f64>()).ln(),
            ScanGapDistribution::Fixed { gap_s } => gap_s,
        }
    }

    pub fn median_s(&self) -> f64 {
        match *self {
            ScanGapDistribution::LogNormal { median_s, .. } => median_s,
            ScanGapDistribution::Exponential { mean_s } => mean_s * std::f64::consts::LN_2,
            ScanGapDistribution::Fixed { gap_s } => gap_s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanModel {
    pub disconnected: ScanGapDistribution,
    pub inactive: ScanGapDistribution,
    pub intermittent: ScanGapDistribution,
    pub active: ScanGapDistribution,
    /// Intermittent clients scan when the screen turns on.
    pub scan_on_screen_on: bool,
    pub scan_on_handover: bool,
    /// Scan when the associated AP's signal falls below this. Off when `None`.
    #[serde(default)]
    pub rssi_trigger_dbm: Option<f64>,
    /// Gaps shorter than this are stretched to it. Scans closer together
    /// than one report period are indistinguishable in the feed.
    pub min_gap_s: f64,
}

impl Default for ScanModel {
    fn default() -> Self {
        Self {
            disconnected: ScanGapDistribution::log_normal_from_quantiles(36.0, 2500.0),
            inactive: ScanGapDistribution::log_normal_from_quantiles(33.0, 2500.0),
            intermittent: ScanGapDistribution::log_normal_from_quantiles(17.0, 1500.0),
            active: ScanGapDistribution::log_normal_from_quantiles(18.0, 1500.0),
            scan_on_screen_on: true,
            scan_on_handover: true,
            rssi_trigger_dbm: None,
            min_gap_s: 5.0,
        }
    }
}

impl ScanModel {
    pub fn for_state(&self, state: ClientState) -> &ScanGapDistribution {
        match state {
            ClientState::Disconnected => &self.disconnected,
            ClientState::Inactive => &self.inactive,
            ClientState::Intermittent => &self.intermittent,
            ClientState::Active => &self.active,
        }
    }

    /// Every state scans on a fixed period.
    pub fn continuous(gap_s: f64) -> Self {
        let d = ScanGapDistribution::Fixed { gap_s };
        Self {
            disconnected: d,
            inactive: d,
            intermittent: d,
            active: d,
            scan_on_screen_on: false,
            scan_on_handover: false,
            rssi_trigger_dbm: None,
            min_gap_s: 0.0,
        }
    }
}

/// Time of the next periodic scan after `now_ms`.
pub fn schedule_scans<R: Rng + ?Sized>(state: ClientState, model: &ScanModel, now_ms: u64, rng: &mut R) -> u64 {
    let gap = model.for_state(state).sample(rng).max(model.min_gap_s);
    now_ms.saturating_add((gap * 1000.0).round() as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn draws(state: ClientState, seed: u64) -> Vec<f64> {
        let m = ScanModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v: Vec<f64> = (0..10_000).map(|_| m.for_state(state).sample(&mut rng)).collect();
        v.sort_by(f64::total_cmp);
        v
    }

    #[test]
    fn per_state_medians() {
        for seed in 0..5 {
            for (state, lo, hi) in [
                (ClientState::Intermittent, 15.0, 20.0),
                (ClientState::Active, 15.0, 20.0),
                (ClientState::Inactive, 26.0, 47.0),
                (ClientState::Disconnected, 26.0, 47.0),
            ] {
                let v = draws(state, seed);
                let med = v[v.len() / 2];
                assert!((lo..=hi).contains(&med), "{state:?} seed {seed}: {med}");
            }
        }
    }

    #[test]
    fn disconnected_tail_is_thousands_of_seconds() {
        let v = draws(ClientState::Disconnected, 7);
        assert!(v[8999] >= 1000.0);
    }

    #[test]
    fn quantile_constructor() {
        let d = ScanGapDistribution::log_normal_from_quantiles(20.0, 2000.0);
        let ScanGapDistribution::LogNormal { sigma, .. } = d else { unreachable!() };
        assert!(((20.0f64.ln() + Z90 * sigma).exp() - 2000.0).abs() < 1e-6);
    }

    #[test]
    fn schedule_respects_min_gap() {
        let mut m = ScanModel::continuous(0.2);
        m.min_gap_s = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(schedule_scans(ClientState::Active, &m, 5_000, &mut rng), 6_000);
    }
}
