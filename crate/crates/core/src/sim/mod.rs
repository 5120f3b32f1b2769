//! Seeded discrete-event simulator of a controller-managed multi-floor WLAN
//! that emits RTLS feed records and a ground-truth log.

pub mod controller;
pub mod engine;
pub mod propagation;
pub mod scan;
pub mod scenario;
pub mod truth;

pub use controller::{controller_tick, ControllerPolicy, RadioState};
pub use engine::{emit_rtls, run, SimOutput};
pub use propagation::{mean_rssi, rssi_at, NoiseModel, PropagationModel, Spot};
pub use scan::{schedule_scans, ScanGapDistribution, ScanModel};
pub use scenario::{desk_scenario, ClientState, PerBand, ScenarioError, SimScenario};
pub use truth::{read_truth, write_truth, TruthLog, TruthRow};
