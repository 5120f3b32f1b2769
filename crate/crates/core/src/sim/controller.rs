//! A synthetic WLAN controller: transmit power control, channel changes,
//! radio sleep and load-based report suppression.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::feed::Band;

use super::scenario::{ApNode, CHANNELS_24, CHANNELS_5};

pub const MIN_TX_OFFSET_DB: f64 = -6.0;

/// Per-band controller behaviour. Every dynamic is scaled by `intensity`,
/// so `intensity = 0` is a controller that never acts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerPolicy {
    pub intensity: f64,
    pub period_s: u64,
    /// Largest TPC random-walk step per tick at full intensity.
    pub tpc_step_db: f64,
    pub channel_change_prob: f64,
    /// Chance per tick that a radio with no associated clients sleeps.
    pub sleep_prob: f64,
    /// Mean of the Poisson background load added to each radio per tick.
    pub background_load_mean: f64,
    /// Radios carrying more load than this stop reporting unassociated
    /// clients.
    pub load_threshold: u32,
    /// Receiver floor of a radio at full power.
    pub rx_floor_dbm: f64,
    /// How far the receiver floor rises per dB of power reduction.
    pub rx_sop_db_per_tpc_db: f64,
}

/// Controller intensity per band found by `wiloc calibrate` on the desk
/// scenario.
pub const CALIBRATED_INTENSITY_24: f64 = 0.7;
pub const CALIBRATED_INTENSITY_5: f64 = 0.8;

impl Default for ControllerPolicy {
    fn default() -> Self {
        Self {
            intensity: 1.0,
            period_s: 30,
            tpc_step_db: 2.0,
            channel_change_prob: 0.02,
            sleep_prob: 0.2,
            background_load_mean: 6.0,
            load_threshold: 8,
            rx_floor_dbm: -95.0,
            rx_sop_db_per_tpc_db: 4.0,
        }
    }
}

impl ControllerPolicy {
    pub fn with_intensity(intensity: f64) -> Self {
        Self {
            intensity,
            ..Self::default()
        }
    }

    pub fn off() -> Self {
        Self::with_intensity(0.0)
    }

    pub fn calibrated(band: Band) -> Self {
        Self::with_intensity(match band {
            Band::Band24 => CALIBRATED_INTENSITY_24,
            Band::Band5 => CALIBRATED_INTENSITY_5,
        })
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.intensity.is_nan() || self.intensity < 0.0 {
            return Err(format!("controller intensity {} must be non-negative", self.intensity));
        }
        if self.period_s == 0 {
            return Err("controller period must be positive".into());
        }
        for (name, v) in [
            ("tpc_step_db", self.tpc_step_db),
            ("channel_change_prob", self.channel_change_prob),
            ("sleep_prob", self.sleep_prob),
            ("background_load_mean", self.background_load_mean),
            ("rx_sop_db_per_tpc_db", self.rx_sop_db_per_tpc_db),
        ] {
            if v.is_nan() || v < 0.0 {
                return Err(format!("controller {name} must be non-negative"));
            }
        }
        Ok(())
    }

    fn scaled_prob(&self, p: f64) -> f64 {
        (p * self.intensity).clamp(0.0, 1.0)
    }
}

/// Live state of one radio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadioState {
    pub channel: u16,
    pub tx_offset_db: f64,
    pub associated: u32,
    pub background_load: u32,
    pub asleep: bool,
}

impl RadioState {
    pub fn new(ap: &ApNode, band: Band) -> Self {
        Self {
            channel: ap.channel(band),
            tx_offset_db: 0.0,
            associated: 0,
            background_load: 0,
            asleep: false,
        }
    }

    pub fn load(&self) -> u32 {
        self.associated + self.background_load
    }

    /// Weakest frame the radio still decodes.
    pub fn rx_floor_dbm(&self, policy: &ControllerPolicy) -> f64 {
        policy.rx_floor_dbm - policy.rx_sop_db_per_tpc_db * self.tx_offset_db
    }

    pub fn hears(&self, policy: &ControllerPolicy, rssi_dbm: f64) -> bool {
        !self.asleep && rssi_dbm >= self.rx_floor_dbm(policy)
    }

    pub fn suppresses_unassociated(&self, policy: &ControllerPolicy) -> bool {
        self.load() > policy.load_threshold
    }
}

fn channel_plan(band: Band) -> &'static [u16] {
    match band {
        Band::Band24 => &CHANNELS_24,
        Band::Band5 => &CHANNELS_5,
    }
}

/// One controller period for every radio of `band`.
pub fn controller_tick<R: Rng + ?Sized>(radios: &mut [RadioState], band: Band, policy: &ControllerPolicy, rng: &mut R) {
    let step = policy.tpc_step_db * policy.intensity;
    let load_mean = policy.background_load_mean * policy.intensity;
    for r in radios.iter_mut() {
        if step > 0.0 {
            r.tx_offset_db = (r.tx_offset_db + rng.random_range(-step..=step)).clamp(MIN_TX_OFFSET_DB, 0.0);
        }
        if rng.random_bool(policy.scaled_prob(policy.channel_change_prob)) {
            r.channel = *channel_plan(band).choose(rng).expect("non-empty plan");
        }
        r.background_load = if load_mean > 0.0 {
            Poisson::new(load_mean).expect("positive mean").sample(rng) as u32
        } else {
            0
        };
        r.asleep = r.associated == 0 && rng.random_bool(policy.scaled_prob(policy.sleep_prob));
    }
}
