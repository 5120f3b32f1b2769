//! Single-threaded discrete-event loop producing RTLS records and the
//! ground-truth log.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;

use crate::feed::{AssocStatus, Band, DataRate, FrameClass, RtlsRecord, RATES_80211G};
use crate::fingerprint::Position;

use super::controller::{controller_tick, ControllerPolicy, RadioState};
use super::propagation::{mean_rssi, rssi_at, Spot};
use super::scan::schedule_scans;
use super::scenario::{ClientState, SimScenario};
use super::truth::TruthRow;

/// Controller and noise streams per band slot.
const STREAM_CONTROLLER: [u64; 2] = [1, 3];
const STREAM_NOISE: [u64; 2] = [2, 4];
const STREAM_CLIENT: u64 = 100;

#[derive(Debug, Clone, Default)]
pub struct SimOutput {
    pub records: Vec<RtlsRecord>,
    pub truth: Vec<TruthRow>,
}

impl SimOutput {
    pub fn records_in_band(&self, band: Band) -> impl Iterator<Item = &RtlsRecord> {
        self.records.iter().filter(move |r| r.band == band)
    }
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    start_ms: u64,
    end_ms: u64,
    spot: Spot,
    landmark: Option<usize>,
}

fn timeline(s: &SimScenario, path: &[super::scenario::Visit]) -> Vec<Segment> {
    let spot_of = |i: usize| Spot {
        floor: s.landmarks[i].floor,
        position: s.landmarks[i].position,
    };
    let mut out = Vec::new();
    let mut t = 0u64;
    for (k, v) in path.iter().enumerate() {
        let here = spot_of(v.landmark);
        let dwell_end = t + u64::from(v.dwell_s) * 1000;
        out.push(Segment {
            start_ms: t,
            end_ms: dwell_end,
            spot: here,
            landmark: Some(v.landmark),
        });
        let next = path.get(k + 1).map(|n| spot_of(n.landmark)).unwrap_or(here);
        // Walking the corridor puts the client halfway; a floor change puts
        // it at the destination floor's stairwell, i.e. the destination.
        let transit_spot = if next.floor == here.floor {
            Spot {
                floor: here.floor,
                position: Position::new(
                    (here.position.x_m + next.position.x_m) / 2.0,
                    (here.position.y_m + next.position.y_m) / 2.0,
                ),
            }
        } else {
            next
        };
        t = dwell_end + u64::from(v.transit_s) * 1000;
        if t > dwell_end {
            out.push(Segment {
                start_ms: dwell_end,
                end_ms: t,
                spot: transit_spot,
                landmark: None,
            });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    Segment { client: usize, seg: usize },
    ScreenOn(usize),
    ScreenOff(usize),
    Scan { client: usize, periodic: bool },
    Controller,
    Report,
}

#[derive(Debug, Clone, Default)]
struct Heard {
    sum: f64,
    n: u32,
    data: bool,
    last_heard_ms: Option<u64>,
    last_rssi: i16,
    last_rate: Option<DataRate>,
}

struct ClientRt {
    segments: Vec<Segment>,
    seg: usize,
    assoc: Option<(usize, Band)>,
    screen_on: bool,
    rng: ChaCha8Rng,
}

impl ClientRt {
    fn spot_at(&self, t_ms: u64) -> Option<Spot> {
        let i = self.segments.partition_point(|s| s.end_ms <= t_ms);
        self.segments.get(i).filter(|s| s.start_ms <= t_ms).map(|s| s.spot)
    }
}

struct Engine<'a> {
    s: &'a SimScenario,
    duration_ms: u64,
    period_ms: u64,
    queue: BinaryHeap<Reverse<(u64, Event, u64)>>,
    seq: u64,
    radios: [Vec<RadioState>; 2],
    clients: Vec<ClientRt>,
    heard: BTreeMap<(Band, usize, usize), Heard>,
    ctrl_rng: [ChaCha8Rng; 2],
    noise_rng: [ChaCha8Rng; 2],
    rates: [WeightedIndex<u32>; 2],
    out: Vec<RtlsRecord>,
}

fn band_slot(b: Band) -> usize {
    match b {
        Band::Band24 => 0,
        Band::Band5 => 1,
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

fn probe_rate(band: Band) -> DataRate {
    match band {
        Band::Band24 => DataRate::from_mbps(1),
        Band::Band5 => DataRate::from_mbps(6),
    }
}

impl<'a> Engine<'a> {
    fn new(s: &'a SimScenario) -> Self {
        let weights = s.traffic.data_rate_weights;
        // 5 GHz has no DSSS rates.
        let w5: Vec<u32> = RATES_80211G
            .iter()
            .zip(weights)
            .map(|(r, w)| if [10, 20, 55, 110].contains(&r.tenths()) { 0 } else { w })
            .collect();
        Self {
            s,
            duration_ms: s.duration_s * 1000,
            period_ms: s.rtls_report_period_s * 1000,
            queue: BinaryHeap::new(),
            seq: 0,
            radios: [
                s.aps.iter().map(|a| RadioState::new(a, Band::Band24)).collect(),
                s.aps.iter().map(|a| RadioState::new(a, Band::Band5)).collect(),
            ],
            clients: s
                .clients
                .iter()
                .enumerate()
                .map(|(i, c)| ClientRt {
                    segments: timeline(s, &c.path),
                    seg: 0,
                    assoc: None,
                    screen_on: false,
                    rng: stream(s.seed, STREAM_CLIENT + i as u64),
                })
                .collect(),
            heard: BTreeMap::new(),
            ctrl_rng: STREAM_CONTROLLER.map(|id| stream(s.seed, id)),
            noise_rng: STREAM_NOISE.map(|id| stream(s.seed, id)),
            rates: [
                WeightedIndex::new(weights).expect("2.4 GHz rate weights"),
                WeightedIndex::new(w5).expect("5 GHz rate weights"),
            ],
            out: Vec::new(),
        }
    }

    fn push(&mut self, t: u64, e: Event) {
        if t <= self.duration_ms {
            self.seq += 1;
            self.queue.push(Reverse((t, e, self.seq)));
        }
    }

    fn exp_ms(rng: &mut ChaCha8Rng, mean_s: f64) -> u64 {
        let u: f64 = rng.random();
        ((-mean_s * (1.0 - u).ln()) * 1000.0).round().max(1000.0) as u64
    }

    fn seed(&mut self) {
        self.push(0, Event::Controller);
        self.push(self.period_ms, Event::Report);
        for i in 0..self.clients.len() {
            if !self.clients[i].segments.is_empty() {
                self.push(0, Event::Segment { client: i, seg: 0 });
            }
            let spec = &self.s.clients[i];
            if spec.survey {
                continue;
            }
            let first = schedule_scans(spec.state, &self.s.scanning, 0, &mut self.clients[i].rng);
            self.push(first, Event::Scan { client: i, periodic: true });
            if spec.state == ClientState::Intermittent {
                let t = Self::exp_ms(&mut self.clients[i].rng, self.s.traffic.screen_off_mean_s);
                self.push(t, Event::ScreenOn(i));
            }
        }
    }

    fn run(mut self) -> Vec<RtlsRecord> {
        self.seed();
        while let Some(Reverse((t, e, _))) = self.queue.pop() {
            match e {
                Event::Segment { client, seg } => self.on_segment(t, client, seg),
                Event::ScreenOn(c) => {
                    self.clients[c].screen_on = true;
                    if self.s.scanning.scan_on_screen_on {
                        self.scan(t, c);
                    }
                    let d = Self::exp_ms(&mut self.clients[c].rng, self.s.traffic.screen_on_mean_s);
                    self.push(t + d, Event::ScreenOff(c));
                }
                Event::ScreenOff(c) => {
                    self.clients[c].screen_on = false;
                    let d = Self::exp_ms(&mut self.clients[c].rng, self.s.traffic.screen_off_mean_s);
                    self.push(t + d, Event::ScreenOn(c));
                }
                Event::Scan { client, periodic } => {
                    self.scan(t, client);
                    if periodic {
                        let spec = &self.s.clients[client];
                        let next = schedule_scans(spec.state, &self.s.scanning, t, &mut self.clients[client].rng);
                        self.push(next.max(t + 1), Event::Scan { client, periodic: true });
                    }
                }
                Event::Controller => {
                    for band in Band::ALL {
                        let policy = self.s.controller.get(band);
                        controller_tick(&mut self.radios[band_slot(band)], band, policy, &mut self.ctrl_rng[band_slot(band)]);
                    }
                    let p = self.s.controller.band24.period_s.min(self.s.controller.band5.period_s);
                    self.push(t + p * 1000, Event::Controller);
                }
                Event::Report => {
                    self.report(t);
                    self.push(t + self.period_ms, Event::Report);
                }
            }
        }
        self.out
    }

    fn on_segment(&mut self, t: u64, c: usize, seg: usize) {
        self.clients[c].seg = seg;
        let segment = self.clients[c].segments[seg];
        if seg + 1 < self.clients[c].segments.len() {
            self.push(segment.end_ms, Event::Segment { client: c, seg: seg + 1 });
        }
        let spec = &self.s.clients[c];
        if spec.survey {
            if segment.landmark.is_some() {
                let mut ts = segment.start_ms + 1000;
                while ts + self.period_ms <= segment.end_ms {
                    self.push(ts, Event::Scan { client: c, periodic: false });
                    ts += self.period_ms;
                }
            }
            return;
        }
        if spec.state.associates() {
            let before = self.clients[c].assoc;
            self.reassociate(c, &segment.spot);
            let after = self.clients[c].assoc;
            if before != after && after.is_some() && self.s.scanning.scan_on_handover {
                self.scan(t, c);
            }
        }
    }

    fn mean(&self, ap: usize, spot: &Spot, band: Band) -> Option<f64> {
        mean_rssi(&self.s.propagation, &self.s.building, &self.s.aps[ap], spot, band, self.s.seed)
    }

    fn reassociate(&mut self, c: usize, spot: &Spot) {
        let pol = self.s.association;
        if let Some((ap, band)) = self.clients[c].assoc {
            let ok = self.mean(ap, spot, band).is_some_and(|r| r >= pol.roam_threshold_dbm);
            if ok {
                return;
            }
            self.radios[band_slot(band)][ap].associated -= 1;
            self.clients[c].assoc = None;
        }
        let candidates = |band: Band, e: &Self| -> Vec<(usize, f64)> {
            (0..e.s.aps.len())
                .filter(|&i| !e.radios[band_slot(band)][i].asleep)
                .filter_map(|i| e.mean(i, spot, band).map(|r| (i, r)))
                .filter(|&(_, r)| r >= pol.min_assoc_dbm)
                .collect()
        };
        let want5 = self.clients[c].rng.random_bool(pol.prefer_5ghz_prob.clamp(0.0, 1.0));
        let c5 = candidates(Band::Band5, self);
        let (band, cands) = if want5 && !c5.is_empty() {
            (Band::Band5, c5)
        } else {
            let c24 = candidates(Band::Band24, self);
            if c24.is_empty() {
                (Band::Band5, c5)
            } else {
                (Band::Band24, c24)
            }
        };
        let Some(&(best, best_r)) = cands.iter().max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0))) else {
            return;
        };
        let policy = self.s.controller.get(band);
        let radios = &self.radios[band_slot(band)];
        let chosen = if radios[best].load() > policy.load_threshold {
            cands
                .iter()
                .filter(|&&(_, r)| r >= best_r - pol.steering_margin_db)
                .min_by(|a, b| radios[a.0].load().cmp(&radios[b.0].load()).then(b.1.total_cmp(&a.1)))
                .map(|&(i, _)| i)
                .unwrap_or(best)
        } else {
            best
        };
        self.radios[band_slot(band)][chosen].associated += 1;
        self.clients[c].assoc = Some((chosen, band));
    }

    fn hear(&mut self, band: Band, ap: usize, c: usize, t: u64, rssi: f64, data: bool) {
        let h = self.heard.entry((band, ap, c)).or_default();
        h.sum += rssi;
        h.n += 1;
        h.data |= data;
        h.last_heard_ms = Some(h.last_heard_ms.map_or(t, |l| l.max(t)));
    }

    /// A probe burst on every channel of both bands.
    fn scan(&mut self, t: u64, c: usize) {
        let Some(spot) = self.clients[c].spot_at(t) else {
            return;
        };
        for band in Band::ALL {
            let policy = *self.s.controller.get(band);
            for ap in 0..self.s.aps.len() {
                let radio = self.radios[band_slot(band)][ap];
                let r = rssi_at(
                    &self.s.propagation,
                    &self.s.noise,
                    &self.s.building,
                    &self.s.aps[ap],
                    radio.tx_offset_db,
                    &spot,
                    band,
                    FrameClass::Scanning,
                    self.s.seed,
                    &mut self.noise_rng[band_slot(band)],
                );
                if let Some(r) = r.filter(|&r| radio.hears(&policy, r)) {
                    self.hear(band, ap, c, t, r, false);
                }
            }
        }
    }

    fn sends_frame(&self, c: usize, t_ms: u64) -> bool {
        let tr = &self.s.traffic;
        let sec = t_ms / 1000;
        let keepalive = (sec + 3 * c as u64).is_multiple_of(u64::from(tr.keepalive_interval_s.max(1)));
        let busy = sec.is_multiple_of(u64::from(tr.active_frame_interval_s.max(1)));
        match self.s.clients[c].state {
            ClientState::Disconnected => false,
            ClientState::Inactive => keepalive,
            ClientState::Intermittent => {
                if self.clients[c].screen_on {
                    busy
                } else {
                    keepalive
                }
            }
            ClientState::Active => busy,
        }
    }

    fn data_frames(&mut self, t: u64) {
        let start = t.saturating_sub(self.period_ms);
        for c in 0..self.clients.len() {
            let Some((ap, band)) = self.clients[c].assoc else {
                continue;
            };
            let slot = band_slot(band);
            let policy = *self.s.controller.get(band);
            if let Some(trigger) = self.s.scanning.rssi_trigger_dbm {
                let spot = self.clients[c].spot_at(t.saturating_sub(1));
                if spot.and_then(|s| self.mean(ap, &s, band)).is_some_and(|r| r < trigger) {
                    self.scan(t.saturating_sub(1), c);
                }
            }
            let channel = self.radios[slot][ap].channel;
            let mut last_spot = None;
            let mut ft = start + 1000;
            while ft <= t {
                if self.sends_frame(c, ft) {
                    if let Some(spot) = self.clients[c].spot_at(ft.min(self.duration_ms.saturating_sub(1))) {
                        last_spot = Some(spot);
                        if let Some(r) = self.frame_rssi(ap, band, &spot, &policy) {
                            self.hear(band, ap, c, ft, r, true);
                        }
                    }
                }
                ft += 1000;
            }
            let Some(spot) = last_spot else { continue };
            let tr = &self.s.traffic;
            let (co, off) = (
                tr.co_channel_overhear_prob.clamp(0.0, 1.0),
                tr.off_channel_overhear_prob.clamp(0.0, 1.0),
            );
            for j in (0..self.s.aps.len()).filter(|&j| j != ap) {
                let q = if self.radios[slot][j].channel == channel { co } else { off };
                if q > 0.0 && self.noise_rng[slot].random_bool(q) {
                    if let Some(r) = self.frame_rssi(j, band, &spot, &policy) {
                        self.hear(band, j, c, t, r, true);
                    }
                }
            }
        }
    }

    /// RSSI of one data frame at radio `ap`, if the radio decodes it.
    fn frame_rssi(&mut self, ap: usize, band: Band, spot: &Spot, policy: &ControllerPolicy) -> Option<f64> {
        let radio = self.radios[band_slot(band)][ap];
        rssi_at(
            &self.s.propagation,
            &self.s.noise,
            &self.s.building,
            &self.s.aps[ap],
            radio.tx_offset_db,
            spot,
            band,
            FrameClass::NonScanning,
            self.s.seed,
            &mut self.noise_rng[band_slot(band)],
        )
        .filter(|&r| radio.hears(policy, r))
    }

    fn report(&mut self, t: u64) {
        self.data_frames(t);
        let mut keys: Vec<(Band, usize, usize)> = self.heard.keys().copied().collect();
        keys.sort_by_key(|&(b, ap, c)| (b, ap, self.s.clients[c].client_id));
        for (band, ap, c) in keys {
            let slot = band_slot(band);
            let radio = self.radios[slot][ap];
            let policy = *self.s.controller.get(band);
            let assoc_here = self.clients[c].assoc == Some((ap, band));
            let rate_dist = &self.rates[slot];
            let h = self.heard.get_mut(&(band, ap, c)).expect("key present");
            let Some(last) = h.last_heard_ms else {
                continue;
            };
            let fresh = h.n > 0;
            let (rssi, rate) = if fresh {
                let rssi = (h.sum / f64::from(h.n)).round().clamp(-100.0, 0.0) as i16;
                let rate = if h.data {
                    RATES_80211G[rate_dist.sample(&mut self.noise_rng[slot])]
                } else {
                    probe_rate(band)
                };
                h.last_rssi = rssi;
                h.last_rate = Some(rate);
                (rssi, rate)
            } else {
                (h.last_rssi, h.last_rate.unwrap_or(probe_rate(band)))
            };
            h.sum = 0.0;
            h.n = 0;
            h.data = false;
            let emit = if assoc_here {
                !radio.asleep
            } else {
                fresh && !radio.suppresses_unassociated(&policy)
            };
            if !emit {
                continue;
            }
            self.out.push(RtlsRecord {
                timestamp_ms: t,
                client_id: self.s.clients[c].client_id,
                age_s: ((t - last) / 1000) as u32,
                channel: radio.channel,
                band,
                ap_id: self.s.aps[ap].ap_id,
                assoc: if assoc_here {
                    AssocStatus::Associated
                } else {
                    AssocStatus::Unassociated
                },
                data_rate: rate,
                rssi_dbm: rssi,
            });
        }
    }
}

fn truth_rows(s: &SimScenario) -> Vec<TruthRow> {
    let end = s.duration_s * 1000;
    let mut rows = Vec::new();
    for c in &s.clients {
        for seg in timeline(s, &c.path) {
            let Some(i) = seg.landmark else { continue };
            if seg.start_ms >= end {
                break;
            }
            let lm = &s.landmarks[i];
            rows.push(TruthRow {
                client_id: c.client_id,
                building: lm.building.clone(),
                floor: lm.floor,
                index: lm.index,
                enter_ms: seg.start_ms,
                exit_ms: seg.end_ms.min(end),
            });
        }
    }
    rows
}

/// Run the scenario from start to `duration_s`.
pub fn run(s: &SimScenario) -> SimOutput {
    SimOutput {
        records: Engine::new(s).run(),
        truth: truth_rows(s),
    }
}

/// Feed records stamped inside `[from_ms, to_ms)`.
pub fn emit_rtls(s: &SimScenario, from_ms: u64, to_ms: u64) -> Vec<RtlsRecord> {
    Engine::new(s)
        .run()
        .into_iter()
        .filter(|r| r.timestamp_ms >= from_ms && r.timestamp_ms < to_ms)
        .collect()
}
