//! Scenario description: geometry, APs, clients and model parameters.

use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feed::{Band, ClientId, MacAddr};
use crate::fingerprint::{ApDirectory, ApInfo, Landmark, Position};

use super::controller::ControllerPolicy;
use super::propagation::{NoiseModel, PropagationModel};
use super::scan::ScanModel;

pub const SCENARIO_FORMAT: &str = "wiloc-scenario";
pub const SCENARIO_VERSION: u32 = 1;

pub const CHANNELS_24: [u16; 3] = [1, 6, 11];
pub const CHANNELS_5: [u16; 8] = [36, 40, 44, 48, 149, 153, 157, 161];

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a scenario file: {reason}")]
    Corrupt { path: String, reason: String },
    #[error("{path}: scenario version {found}, expected {expected}")]
    VersionMismatch { path: String, found: u32, expected: u32 },
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

/// A value held separately for each band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerBand<T> {
    #[serde(rename = "2.4")]
    pub band24: T,
    #[serde(rename = "5")]
    pub band5: T,
}

impl<T> PerBand<T> {
    pub fn new(band24: T, band5: T) -> Self {
        Self { band24, band5 }
    }

    pub fn get(&self, band: Band) -> &T {
        match band {
            Band::Band24 => &self.band24,
            Band::Band5 => &self.band5,
        }
    }

    pub fn get_mut(&mut self, band: Band) -> &mut T {
        match band {
            Band::Band24 => &mut self.band24,
            Band::Band5 => &mut self.band5,
        }
    }
}

impl<T: Clone> PerBand<T> {
    pub fn both(v: T) -> Self {
        Self::new(v.clone(), v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClientState {
    Disconnected,
    Inactive,
    Intermittent,
    Active,
}

impl ClientState {
    pub const ALL: [ClientState; 4] = [
        ClientState::Disconnected,
        ClientState::Inactive,
        ClientState::Intermittent,
        ClientState::Active,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ClientState::Disconnected => "disconnected",
            ClientState::Inactive => "inactive",
            ClientState::Intermittent => "intermittent",
            ClientState::Active => "active",
        }
    }

    pub fn associates(self) -> bool {
        self != ClientState::Disconnected
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildingSpec {
    pub name: String,
    /// Floor numbers run from 1 to `floors`.
    pub floors: i32,
    pub floor_height_m: f64,
    pub width_m: f64,
    pub depth_m: f64,
    pub landmark_pitch_m: f64,
    pub ap_height_m: f64,
    pub client_height_m: f64,
}

/// Static configuration of one dual-band AP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApNode {
    pub ap_id: MacAddr,
    pub floor: i32,
    pub position: Position,
    pub channel_24: u16,
    pub channel_5: u16,
    pub base_tx_power_dbm: f64,
}

impl ApNode {
    pub fn channel(&self, band: Band) -> u16 {
        match band {
            Band::Band24 => self.channel_24,
            Band::Band5 => self.channel_5,
        }
    }
}

/// One stop on a client's path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Visit {
    /// Index into the scenario's landmark list.
    pub landmark: usize,
    pub dwell_s: u32,
    /// Walking time to the next stop.
    pub transit_s: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSpec {
    pub mac: MacAddr,
    pub client_id: ClientId,
    pub state: ClientState,
    pub path: Vec<Visit>,
    /// Survey clients never associate and scan every report period while
    /// dwelling, stopping one period before leaving.
    #[serde(default)]
    pub survey: bool,
}

impl ClientSpec {
    pub fn new(mac: MacAddr, state: ClientState, path: Vec<Visit>) -> Self {
        Self {
            mac,
            client_id: ClientId::from_mac(&mac),
            state,
            path,
            survey: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrafficModel {
    pub active_frame_interval_s: u32,
    pub keepalive_interval_s: u32,
    /// Intermittent clients: mean screen-off gap and screen-on length.
    pub screen_off_mean_s: f64,
    pub screen_on_mean_s: f64,
    /// Chance per report period that a non-associated AP in range catches
    /// one of a client's data frames, on the same channel or while
    /// off-channel scanning.
    pub co_channel_overhear_prob: f64,
    pub off_channel_overhear_prob: f64,
    /// Relative weights of the 802.11g rate set, in `RATES_80211G` order.
    pub data_rate_weights: [u32; 12],
}

impl Default for TrafficModel {
    fn default() -> Self {
        Self {
            active_frame_interval_s: 1,
            keepalive_interval_s: 10,
            screen_off_mean_s: 90.0,
            screen_on_mean_s: 30.0,
            co_channel_overhear_prob: 0.1,
            off_channel_overhear_prob: 0.02,
            data_rate_weights: [1, 1, 1, 2, 1, 1, 2, 3, 3, 10, 20, 55],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssociationPolicy {
    /// Roam when the current AP's mean signal falls below this.
    pub roam_threshold_dbm: f64,
    /// Weakest mean signal an AP may have to be associated with.
    pub min_assoc_dbm: f64,
    /// Chance of choosing 5 GHz at each (re)association when possible.
    pub prefer_5ghz_prob: f64,
    /// Load balancing may steer a client to an AP this much weaker.
    pub steering_margin_db: f64,
}

impl Default for AssociationPolicy {
    fn default() -> Self {
        Self {
            roam_threshold_dbm: -55.0,
            min_assoc_dbm: -70.0,
            prefer_5ghz_prob: 0.5,
            steering_margin_db: 6.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    pub format: String,
    pub version: u32,
    pub name: String,
    pub seed: u64,
    pub duration_s: u64,
    pub rtls_report_period_s: u64,
    pub building: BuildingSpec,
    pub landmarks: Vec<Landmark>,
    pub aps: Vec<ApNode>,
    pub clients: Vec<ClientSpec>,
    pub propagation: PropagationModel,
    pub noise: NoiseModel,
    pub scanning: ScanModel,
    pub traffic: TrafficModel,
    pub association: AssociationPolicy,
    pub controller: PerBand<ControllerPolicy>,
}

impl SimScenario {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        if self.building.landmark_pitch_m <= 0.0 {
            return bad("landmark pitch must be positive".into());
        }
        if self.rtls_report_period_s == 0 {
            return bad("RTLS report period must be positive".into());
        }
        if self.building.floors < 1 {
            return bad("building needs at least one floor".into());
        }
        for ap in &self.aps {
            if Band::from_channel(ap.channel_24) != Some(Band::Band24) {
                return bad(format!("AP {}: channel {} is not a 2.4 GHz channel", ap.ap_id, ap.channel_24));
            }
            if Band::from_channel(ap.channel_5) != Some(Band::Band5) {
                return bad(format!("AP {}: channel {} is not a 5 GHz channel", ap.ap_id, ap.channel_5));
            }
        }
        for c in &self.clients {
            if let Some(v) = c.path.iter().find(|v| v.landmark >= self.landmarks.len()) {
                return bad(format!("client {}: landmark {} out of range", c.client_id, v.landmark));
            }
        }
        for b in Band::ALL {
            self.controller.get(b).validate().map_err(ScenarioError::Invalid)?;
        }
        Ok(())
    }

    pub fn client(&self, id: &ClientId) -> Option<&ClientSpec> {
        self.clients.iter().find(|c| &c.client_id == id)
    }

    pub fn ap_directory(&self) -> ApDirectory {
        ApDirectory::new(self.aps.iter().map(|a| ApInfo {
            ap_id: a.ap_id,
            building: self.building.name.clone(),
            floor: a.floor,
            position: a.position,
            channel_24: Some(a.channel_24),
            channel_5: Some(a.channel_5),
            tx_power_dbm: a.base_tx_power_dbm,
        }))
    }

    /// Same network, one survey client visiting every landmark in turn.
    pub fn survey(&self, dwell_s: u32, transit_s: u32) -> SimScenario {
        let mut s = self.clone();
        s.name = format!("{}-survey", self.name);
        let mac = MacAddr([0x02, 0x5e, 0x00, 0x00, 0x00, 0x01]);
        let path: Vec<Visit> = (0..self.landmarks.len())
            .map(|landmark| Visit {
                landmark,
                dwell_s,
                transit_s,
            })
            .collect();
        s.duration_s = path.iter().map(|v| u64::from(v.dwell_s + v.transit_s)).sum();
        let mut c = ClientSpec::new(mac, ClientState::Disconnected, path);
        c.survey = true;
        s.clients = vec![c];
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self, ScenarioError> {
        let p = path.display().to_string();
        let head: serde_json::Value = serde_json::from_str(text).map_err(|e| ScenarioError::Corrupt {
            path: p.clone(),
            reason: e.to_string(),
        })?;
        if head.get("format").and_then(|f| f.as_str()) != Some(SCENARIO_FORMAT) {
            return Err(ScenarioError::Corrupt {
                path: p,
                reason: format!("missing `format: {SCENARIO_FORMAT}`"),
            });
        }
        let found = head.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != SCENARIO_VERSION {
            return Err(ScenarioError::VersionMismatch {
                path: p,
                found,
                expected: SCENARIO_VERSION,
            });
        }
        let s: SimScenario = serde_json::from_value(head).map_err(|e| ScenarioError::Corrupt {
            path: p,
            reason: e.to_string(),
        })?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text, path)
    }

    pub fn save(&self, path: &Path) -> Result<(), ScenarioError> {
        fs::write(path, self.to_json()).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Landmarks on a corridor grid: two rows per floor at `pitch` spacing.
pub fn corridor_landmarks(b: &BuildingSpec, per_floor: u32) -> Vec<Landmark> {
    let rows = ((b.depth_m / b.landmark_pitch_m).floor() as u32).max(1);
    let mut out = Vec::new();
    for floor in 1..=b.floors {
        for index in 0..per_floor {
            let col = index / rows;
            let row = index % rows;
            let x = b.landmark_pitch_m * (f64::from(col) + 0.5);
            let y = b.landmark_pitch_m * (f64::from(row) + 0.5);
            out.push(Landmark::new(b.name.clone(), floor, index, x, y));
        }
    }
    out
}

fn random_walk(
    rng: &mut ChaCha8Rng,
    landmarks: &[Landmark],
    pitch: f64,
    duration_s: u64,
    floor_change_prob: f64,
) -> Vec<Visit> {
    let mut path = Vec::new();
    let mut at = rng.random_range(0..landmarks.len());
    let mut t = 0u64;
    while t < duration_s {
        let dwell_s = rng.random_range(50..=70);
        let here = &landmarks[at];
        let next = if rng.random_bool(floor_change_prob) {
            let others: Vec<usize> = (0..landmarks.len())
                .filter(|&i| landmarks[i].floor != here.floor)
                .collect();
            others.choose(rng).copied()
        } else {
            let near: Vec<usize> = (0..landmarks.len())
                .filter(|&i| {
                    i != at
                        && landmarks[i].floor == here.floor
                        && landmarks[i].position.distance(&here.position) <= pitch * 1.01
                })
                .collect();
            near.choose(rng).copied()
        }
        .unwrap_or(at);
        let transit_s = if landmarks[next].floor != here.floor { 20 } else { 3 };
        path.push(Visit {
            landmark: at,
            dwell_s,
            transit_s,
        });
        t += u64::from(dwell_s + transit_s);
        at = next;
    }
    path
}

/// The desk-scale scenario: one building, three floors, 50 landmarks per
/// floor at 3 m pitch, eight dual-band APs per floor and one client in
/// each state, for one simulated hour.
pub fn desk_scenario(seed: u64) -> SimScenario {
    let building = BuildingSpec {
        name: "B".into(),
        floors: 3,
        floor_height_m: 4.0,
        width_m: 75.0,
        depth_m: 6.0,
        landmark_pitch_m: 3.0,
        ap_height_m: 3.0,
        client_height_m: 1.0,
    };
    let landmarks = corridor_landmarks(&building, 50);
    let per_floor = 8u8;
    let spacing = building.width_m / f64::from(per_floor);
    let mut aps = Vec::new();
    for floor in 1..=building.floors {
        for k in 0..per_floor {
            let f = floor as usize;
            let k_us = usize::from(k);
            aps.push(ApNode {
                ap_id: MacAddr([0x00, 0x1a, 0x1e, 0x00, floor as u8, k]),
                floor,
                position: Position::new(spacing * (f64::from(k) + 0.5), building.depth_m / 2.0),
                channel_24: CHANNELS_24[(k_us + f) % CHANNELS_24.len()],
                channel_5: CHANNELS_5[(k_us + 3 * f) % CHANNELS_5.len()],
                base_tx_power_dbm: 20.0,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x5041_5448);
    let duration_s = 3600;
    let clients = ClientState::ALL
        .iter()
        .map(|&state| {
            let mut mac = [0u8; 6];
            rng.fill(&mut mac);
            // Locally administered unicast.
            mac[0] = (mac[0] & 0xfc) | 0x02;
            let path = random_walk(&mut rng, &landmarks, building.landmark_pitch_m, duration_s, 0.1);
            ClientSpec::new(MacAddr(mac), state, path)
        })
        .collect();
    SimScenario {
        format: SCENARIO_FORMAT.into(),
        version: SCENARIO_VERSION,
        name: "desk".into(),
        seed,
        duration_s,
        rtls_report_period_s: 5,
        building,
        landmarks,
        aps,
        clients,
        propagation: PropagationModel::default(),
        noise: NoiseModel::default(),
        scanning: ScanModel::default(),
        traffic: TrafficModel::default(),
        association: AssociationPolicy::default(),
        controller: PerBand::new(ControllerPolicy::calibrated(Band::Band24), ControllerPolicy::calibrated(Band::Band5)),
    }
}
