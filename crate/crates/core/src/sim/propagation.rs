//! Log-distance path loss with static shadowing, floor attenuation and a
//! hard range cutoff, plus per-frame-class measurement noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::feed::{Band, FrameClass};
use crate::fingerprint::Position;

use super::scenario::{ApNode, BuildingSpec, PerBand};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandPropagation {
    pub path_loss_exponent: f64,
    /// Loss at 1 m.
    pub reference_loss_db: f64,
    pub shadowing_sigma_db: f64,
    pub cutoff_m: f64,
    pub floor_attenuation_db: f64,
}

pub type PropagationModel = PerBand<BandPropagation>;

impl Default for PropagationModel {
    fn default() -> Self {
        PerBand::new(
            BandPropagation {
                path_loss_exponent: 3.0,
                reference_loss_db: 38.0,
                shadowing_sigma_db: 2.0,
                cutoff_m: 30.0,
                floor_attenuation_db: 15.0,
            },
            BandPropagation {
                path_loss_exponent: 3.5,
                reference_loss_db: 41.0,
                shadowing_sigma_db: 2.0,
                cutoff_m: 15.0,
                floor_attenuation_db: 15.0,
            },
        )
    }
}

/// Uniform noise half-widths added to each frame's RSSI.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub scan_half_width_db: f64,
    pub nonscan_half_width_db: PerBand<f64>,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            scan_half_width_db: 5.0,
            nonscan_half_width_db: PerBand::new(15.0, 7.5),
        }
    }
}

impl NoiseModel {
    pub fn half_width(&self, band: Band, class: FrameClass) -> f64 {
        match class {
            FrameClass::Scanning => self.scan_half_width_db,
            FrameClass::NonScanning => *self.nonscan_half_width_db.get(band),
        }
    }

    /// No noise at all; every frame carries the link's mean RSSI.
    pub fn silent() -> Self {
        Self {
            scan_half_width_db: 0.0,
            nonscan_half_width_db: PerBand::both(0.0),
        }
    }
}

/// Where a client stands.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spot {
    pub floor: i32,
    pub position: Position,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn link_key(seed: u64, ap: &ApNode, band: Band, spot: &Spot) -> u64 {
    let mac = ap.ap_id.0.iter().fold(0u64, |a, &b| (a << 8) | u64::from(b));
    let parts = [
        mac,
        band as u64,
        spot.floor as u64,
        (spot.position.x_m * 1000.0).round() as i64 as u64,
        (spot.position.y_m * 1000.0).round() as i64 as u64,
    ];
    parts.iter().fold(splitmix(seed), |h, &p| splitmix(h ^ p))
}

impl BandPropagation {
    /// Distance inflated so that each floor crossed costs
    /// `floor_attenuation_db` of extra path loss.
    pub fn effective_distance(&self, distance_m: f64, floors_crossed: u32) -> f64 {
        let extra = f64::from(floors_crossed) * self.floor_attenuation_db / (10.0 * self.path_loss_exponent);
        distance_m.max(1.0) * 10f64.powf(extra)
    }

    pub fn path_loss(&self, effective_distance_m: f64) -> f64 {
        self.reference_loss_db + 10.0 * self.path_loss_exponent * effective_distance_m.max(1.0).log10()
    }
}

/// Static per-link shadowing, a normal draw truncated at two sigma and
/// keyed on the link so it is identical for every frame and every run.
pub fn shadowing_db(sigma: f64, seed: u64, ap: &ApNode, band: Band, spot: &Spot) -> f64 {
    if sigma <= 0.0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(link_key(seed, ap, band, spot));
    let n = Normal::new(0.0, sigma).expect("positive sigma");
    loop {
        let v: f64 = n.sample(&mut rng);
        if v.abs() <= 2.0 * sigma {
            return v;
        }
    }
}

pub fn distance_3d(ap: &ApNode, b: &BuildingSpec, spot: &Spot) -> (f64, u32) {
    let dz = (f64::from(ap.floor - spot.floor) * b.floor_height_m) + b.ap_height_m - b.client_height_m;
    let d = (ap.position.distance(&spot.position).powi(2) + dz * dz).sqrt();
    (d, ap.floor.abs_diff(spot.floor))
}

/// Noise-free RSSI of the link, or `None` beyond the band's cutoff.
pub fn mean_rssi(model: &PropagationModel, b: &BuildingSpec, ap: &ApNode, spot: &Spot, band: Band, seed: u64) -> Option<f64> {
    let p = model.get(band);
    let (d, floors) = distance_3d(ap, b, spot);
    let d_eff = p.effective_distance(d, floors);
    if d_eff > p.cutoff_m {
        return None;
    }
    Some(ap.base_tx_power_dbm - p.path_loss(d_eff) + shadowing_db(p.shadowing_sigma_db, seed, ap, band, spot))
}

/// One frame's RSSI at `ap`. Non-scanning frames also carry the AP's
/// current power-control offset.
#[allow(clippy::too_many_arguments)]
pub fn rssi_at<R: Rng + ?Sized>(
    model: &PropagationModel,
    noise: &NoiseModel,
    b: &BuildingSpec,
    ap: &ApNode,
    tx_offset_db: f64,
    spot: &Spot,
    band: Band,
    class: FrameClass,
    seed: u64,
    rng: &mut R,
) -> Option<f64> {
    let mean = mean_rssi(model, b, ap, spot, band, seed)?;
    let w = noise.half_width(band, class);
    let jitter = if w > 0.0 { rng.random_range(-w..=w) } else { 0.0 };
    let offset = match class {
        FrameClass::Scanning => 0.0,
        FrameClass::NonScanning => tx_offset_db,
    };
    Some(mean + jitter + offset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::scenario::desk_scenario;

    fn spot_at(ap: &ApNode) -> Spot {
        Spot {
            floor: ap.floor,
            position: ap.position,
        }
    }

    #[test]
    fn beyond_cutoff_is_silent() {
        let s = desk_scenario(1);
        let ap = &s.aps[0];
        let far = Spot {
            floor: ap.floor,
            position: Position::new(ap.position.x_m + 40.0, ap.position.y_m),
        };
        assert!(mean_rssi(&s.propagation, &s.building, ap, &far, Band::Band24, 1).is_none());
        let mid = Spot {
            floor: ap.floor,
            position: Position::new(ap.position.x_m + 20.0, ap.position.y_m),
        };
        assert!(mean_rssi(&s.propagation, &s.building, ap, &mid, Band::Band24, 1).is_some());
        assert!(mean_rssi(&s.propagation, &s.building, ap, &mid, Band::Band5, 1).is_none());
    }

    #[test]
    fn client_at_ap_hears_it_strongest() {
        let s = desk_scenario(1);
        for band in Band::ALL {
            for ap in &s.aps {
                let spot = spot_at(ap);
                let own = mean_rssi(&s.propagation, &s.building, ap, &spot, band, 1).unwrap();
                for other in s.aps.iter().filter(|o| o.ap_id != ap.ap_id) {
                    if let Some(r) = mean_rssi(&s.propagation, &s.building, other, &spot, band, 1) {
                        assert!(own > r, "{} vs {}", ap.ap_id, other.ap_id);
                    }
                }
            }
        }
    }

    #[test]
    fn cutoffs_keep_the_two_to_one_ratio() {
        let m = PropagationModel::default();
        assert!((m.band24.cutoff_m / m.band5.cutoff_m - 2.0).abs() < 0.2);
    }

    #[test]
    fn scans_in_range_always_pass_the_rssi_filter() {
        // Weakest possible scan frame: at the cutoff, worst shadowing, worst noise.
        let m = PropagationModel::default();
        let n = NoiseModel::default();
        for band in Band::ALL {
            let p = m.get(band);
            let worst = 20.0 - p.path_loss(p.cutoff_m) - 2.0 * p.shadowing_sigma_db - n.scan_half_width_db;
            assert!(worst >= -72.0, "{band}: {worst}");
        }
    }

    #[test]
    fn floor_crossing_shrinks_range() {
        let p = PropagationModel::default().band24;
        assert!(p.effective_distance(5.0, 1) > 2.0 * p.effective_distance(5.0, 0));
        assert!((p.path_loss(p.effective_distance(5.0, 1)) - p.path_loss(5.0) - 15.0).abs() < 1e-9);
    }

    #[test]
    fn shadowing_is_static_and_bounded() {
        let s = desk_scenario(1);
        let ap = &s.aps[3];
        let spot = Spot {
            floor: 1,
            position: Position::new(10.5, 1.5),
        };
        let a = shadowing_db(2.0, 9, ap, Band::Band24, &spot);
        assert_eq!(a, shadowing_db(2.0, 9, ap, Band::Band24, &spot));
        assert!(a.abs() <= 4.0);
    }
}
