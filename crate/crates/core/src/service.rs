//! Live service: a UDP feed listener keeping a sliding window of records per
//! client, and an HTTP query API that localizes clients from those windows.

use std::collections::{HashMap, VecDeque};
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use socket2::{Domain, Protocol, Socket, Type};
use thiserror::Error;
use tokio::net::UdpSocket;
use tokio::sync::{mpsc, watch};
use tokio::task::JoinHandle;

use crate::feed::{
    classify_record, datagram_lines, dedupe_latest_by, filter_record, parse_feed_line, AssocStatus, Band,
    ClassifiedRecord, ClientId, FilterThresholds, ProbeRates, RtlsRecord, MAX_DATAGRAM_BYTES,
};
use crate::fingerprint::{
    assemble_online, load_db, ApDirectory, ClassFilter, FingerprintDb, FingerprintError, Window,
    DEFAULT_ONLINE_WINDOW_S,
};
use crate::localizer::{
    localize, Heuristic, HeuristicConfig, LocalizationEstimate, LocalizeError, MatchScope, DEFAULT_MISSING_AP_SENTINEL,
};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Config { path: PathBuf, reason: String },
    #[error("invalid service configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Fingerprint(#[from] FingerprintError),
    #[error("cannot bind {what} on {addr}: {source}")]
    Bind {
        what: &'static str,
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    /// UDP address receiving feed datagrams.
    pub feed_addr: SocketAddr,
    /// HTTP address of the query API.
    pub api_addr: SocketAddr,
    pub db: PathBuf,
    /// Replaces the directory stored in the database when set.
    pub ap_directory: Option<PathBuf>,
    pub online_window_s: u64,
    pub heuristic: Heuristic,
    pub class_filter: ClassFilter,
    pub match_scope: MatchScope,
    pub missing_ap_sentinel: i16,
    pub thresholds: FilterThresholds,
    pub probe_rates: ProbeRates,
    /// `error`, `warn`, `info`, `debug` or `trace`.
    pub log_level: String,
    /// Datagrams buffered between the socket and the ingest worker.
    pub queue_capacity: usize,
    /// Kernel receive buffer requested for the feed socket.
    pub recv_buffer_bytes: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            feed_addr: SocketAddr::from(([0, 0, 0, 0], 5140)),
            api_addr: SocketAddr::from(([127, 0, 0, 1], 8080)),
            db: PathBuf::from("fingerprints.json"),
            ap_directory: None,
            online_window_s: DEFAULT_ONLINE_WINDOW_S,
            heuristic: Heuristic::Baseline,
            class_filter: ClassFilter::Both,
            match_scope: HeuristicConfig::default().match_scope,
            missing_ap_sentinel: DEFAULT_MISSING_AP_SENTINEL,
            thresholds: FilterThresholds::default(),
            probe_rates: ProbeRates::default(),
            log_level: "info".into(),
            queue_capacity: 4096,
            recv_buffer_bytes: 8 << 20,
        }
    }
}

impl ServiceConfig {
    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let text = fs::read_to_string(path).map_err(|source| ServiceError::Io {
            path: path.to_owned(),
            source,
        })?;
        toml::from_str(&text).map_err(|e| ServiceError::Config {
            path: path.to_owned(),
            reason: e.to_string(),
        })
    }

    pub fn heuristic_config(&self, heuristic: Heuristic) -> HeuristicConfig {
        HeuristicConfig {
            heuristic,
            missing_ap_sentinel: self.missing_ap_sentinel,
            match_scope: self.match_scope,
        }
    }

    /// Checks values and that referenced files exist. Port 0 asks the OS
    /// for a free port.
    pub fn validate(&self) -> Result<(), ServiceError> {
        let bad = |m: String| Err(ServiceError::Invalid(m));
        if self.online_window_s == 0 {
            return bad("online window must be positive".into());
        }
        if self.queue_capacity == 0 {
            return bad("queue capacity must be positive".into());
        }
        if self.feed_addr.port() != 0 && self.feed_addr == self.api_addr {
            return bad(format!("feed and API share {}", self.feed_addr));
        }
        if self.log_level.parse::<log::LevelFilter>().is_err() {
            return bad(format!("unknown log level `{}`", self.log_level));
        }
        self.heuristic_config(self.heuristic)
            .validate()
            .map_err(|e| ServiceError::Invalid(e.to_string()))?;
        if i32::from(self.missing_ap_sentinel) >= i32::from(self.thresholds.min_rssi_dbm) {
            return bad(format!(
                "missing-AP sentinel {} must sit below the RSSI floor {}",
                self.missing_ap_sentinel, self.thresholds.min_rssi_dbm
            ));
        }
        for p in std::iter::once(&self.db).chain(&self.ap_directory) {
            if !p.is_file() {
                return bad(format!("{} does not exist", p.display()));
            }
        }
        Ok(())
    }

    /// Load the database, swapping in the configured AP directory if any.
    pub fn load_db(&self) -> Result<FingerprintDb, ServiceError> {
        let db = load_db(&self.db)?;
        Ok(match &self.ap_directory {
            Some(p) => db.with_directory(ApDirectory::read_csv(p)?)?,
            None => db,
        })
    }
}

/// Ingest counters since startup.
#[derive(Debug, Default)]
pub struct Stats {
    datagrams: AtomicU64,
    lines: AtomicU64,
    accepted: AtomicU64,
    filtered: AtomicU64,
    stale: AtomicU64,
    malformed: AtomicU64,
    dropped: AtomicU64,
    queries: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsSnapshot {
    pub datagrams: u64,
    pub lines: u64,
    /// Records stored in a client window.
    pub accepted: u64,
    /// Records failing the age or signal thresholds.
    pub filtered: u64,
    /// Records already outside the window when they arrived.
    pub stale: u64,
    pub malformed: u64,
    /// Datagrams lost between socket and ingest worker.
    pub dropped: u64,
    pub queries: u64,
    pub clients: u64,
    pub feed_clock_ms: u64,
}

/// Counts for one ingested payload.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IngestCounts {
    pub lines: u64,
    pub accepted: u64,
    pub filtered: u64,
    pub stale: u64,
    pub malformed: u64,
}

const SWEEP_EVERY_RECORDS: u64 = 4096;

/// Per-client sliding windows on the feed clock, the newest record
/// timestamp seen so far.
#[derive(Debug)]
pub struct ObservationStore {
    window_ms: u64,
    thresholds: FilterThresholds,
    probe_rates: ProbeRates,
    clients: RwLock<HashMap<ClientId, VecDeque<ClassifiedRecord>>>,
    clock_ms: AtomicU64,
    since_sweep: AtomicU64,
    stats: Stats,
}

impl ObservationStore {
    pub fn new(window_s: u64, thresholds: FilterThresholds, probe_rates: ProbeRates) -> Self {
        Self {
            window_ms: window_s * 1000,
            thresholds,
            probe_rates,
            clients: RwLock::new(HashMap::new()),
            clock_ms: AtomicU64::new(0),
            since_sweep: AtomicU64::new(0),
            stats: Stats::default(),
        }
    }

    pub fn clock_ms(&self) -> u64 {
        self.clock_ms.load(Ordering::Acquire)
    }

    /// The window a query answers from right now.
    pub fn window(&self) -> Window {
        Window::ending_at(self.clock_ms(), self.window_ms / 1000)
    }

    fn horizon(&self, clock: u64) -> u64 {
        (clock + 1).saturating_sub(self.window_ms)
    }

    /// Parse, filter, classify and store one datagram. Malformed lines are
    /// counted and logged, never fatal.
    pub fn ingest_payload(&self, payload: &[u8]) -> IngestCounts {
        self.stats.datagrams.fetch_add(1, Ordering::Relaxed);
        let text = String::from_utf8_lossy(payload);
        let mut counts = IngestCounts::default();
        let mut records = Vec::new();
        for line in datagram_lines(&text) {
            counts.lines += 1;
            match parse_feed_line(line) {
                Ok(r) => records.push(r),
                Err(e) => {
                    counts.malformed += 1;
                    log::warn!("malformed feed line `{}`: {e}", line.trim());
                }
            }
        }
        let c = self.ingest_records(records);
        counts.accepted = c.accepted;
        counts.filtered = c.filtered;
        counts.stale = c.stale;
        self.stats.lines.fetch_add(counts.lines, Ordering::Relaxed);
        self.stats.malformed.fetch_add(counts.malformed, Ordering::Relaxed);
        counts
    }

    pub fn ingest_records(&self, records: Vec<RtlsRecord>) -> IngestCounts {
        let mut counts = IngestCounts::default();
        let kept: Vec<ClassifiedRecord> = records
            .into_iter()
            .filter(|r| {
                let keep = filter_record(r, &self.thresholds);
                counts.filtered += u64::from(!keep);
                keep
            })
            .map(|r| ClassifiedRecord {
                class: classify_record(&r, &self.probe_rates),
                record: r,
            })
            .collect();
        if !kept.is_empty() {
            let newest = kept.iter().map(|c| c.record.timestamp_ms).max().unwrap_or(0);
            let mut clients = self.clients.write();
            let clock = self.clock_ms.fetch_max(newest, Ordering::AcqRel).max(newest);
            let horizon = self.horizon(clock);
            for c in kept {
                if c.record.timestamp_ms < horizon {
                    counts.stale += 1;
                    continue;
                }
                let buf = clients.entry(c.record.client_id).or_default();
                buf.push_back(c);
                while buf.front().is_some_and(|f| f.record.timestamp_ms < horizon) {
                    buf.pop_front();
                }
                counts.accepted += 1;
            }
            if self.since_sweep.fetch_add(counts.accepted, Ordering::Relaxed) + counts.accepted >= SWEEP_EVERY_RECORDS {
                self.since_sweep.store(0, Ordering::Relaxed);
                clients.retain(|_, buf| {
                    buf.retain(|c| c.record.timestamp_ms >= horizon);
                    !buf.is_empty()
                });
            }
        }
        self.stats.accepted.fetch_add(counts.accepted, Ordering::Relaxed);
        self.stats.filtered.fetch_add(counts.filtered, Ordering::Relaxed);
        self.stats.stale.fetch_add(counts.stale, Ordering::Relaxed);
        counts
    }

    /// A consistent copy of the client's records inside the current window.
    pub fn snapshot(&self, client: &ClientId) -> (Window, Vec<ClassifiedRecord>) {
        let clients = self.clients.read();
        let window = self.window();
        let records = clients
            .get(client)
            .map(|buf| buf.iter().filter(|c| window.contains(c.record.timestamp_ms)).cloned().collect())
            .unwrap_or_default();
        (window, records)
    }

    pub fn client_count(&self) -> usize {
        self.clients.read().len()
    }

    /// Records currently held across all clients.
    pub fn buffered_records(&self) -> usize {
        self.clients.read().values().map(VecDeque::len).sum()
    }

    pub fn stats(&self) -> StatsSnapshot {
        let s = &self.stats;
        let get = |a: &AtomicU64| a.load(Ordering::Relaxed);
        StatsSnapshot {
            datagrams: get(&s.datagrams),
            lines: get(&s.lines),
            accepted: get(&s.accepted),
            filtered: get(&s.filtered),
            stale: get(&s.stale),
            malformed: get(&s.malformed),
            dropped: get(&s.dropped),
            queries: get(&s.queries),
            clients: self.client_count() as u64,
            feed_clock_ms: self.clock_ms(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QueryError {
    #[error("{0}")]
    NotLocalizable(String),
    #[error("{0}")]
    BadRequest(String),
}

/// An estimate together with the window it was computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Located {
    #[serde(flatten)]
    pub estimate: LocalizationEstimate,
    pub floor: i32,
    pub fallback: bool,
    pub window_start_ms: u64,
    pub window_end_ms: u64,
    pub server_time_ms: u64,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Localize `client` from its current window. Without `band`, the band of
/// the client's newest record is used.
pub fn query_location(
    store: &ObservationStore,
    db: &FingerprintDb,
    cfg: &ServiceConfig,
    client: &ClientId,
    band: Option<Band>,
    heuristic: Option<Heuristic>,
) -> Result<Located, QueryError> {
    store.stats.queries.fetch_add(1, Ordering::Relaxed);
    let (window, records) = store.snapshot(client);
    let band = band
        .or_else(|| records.iter().max_by_key(|c| c.record.timestamp_ms).map(|c| c.record.band))
        .ok_or_else(|| QueryError::NotLocalizable("no observations".into()))?;
    let in_band: Vec<&ClassifiedRecord> = records.iter().filter(|c| c.record.band == band).collect();
    let assoc_ap = in_band
        .iter()
        .filter(|c| c.record.assoc == AssocStatus::Associated)
        .max_by_key(|c| c.record.timestamp_ms)
        .map(|c| c.record.ap_id);
    let admitted: Vec<&ClassifiedRecord> = in_band.into_iter().filter(|c| cfg.class_filter.admits(c.class)).collect();
    let deduped = dedupe_latest_by(admitted, |c| &c.record);
    let online = assemble_online(deduped, *client, band, window, cfg.class_filter)
        .map_err(|_| QueryError::NotLocalizable("no observations".into()))?;
    let hcfg = cfg.heuristic_config(heuristic.unwrap_or(cfg.heuristic));
    let estimate = localize(&online, db, assoc_ap.as_ref(), &hcfg).map_err(|e| match e {
        LocalizeError::NoMap(b) => QueryError::NotLocalizable(format!("no fingerprints for band {b}")),
        other => QueryError::BadRequest(other.to_string()),
    })?;
    Ok(Located {
        floor: estimate.floor(),
        fallback: estimate.fell_back(),
        estimate,
        window_start_ms: window.start_ms,
        window_end_ms: window.end_ms,
        server_time_ms: now_ms(),
    })
}

struct AppState {
    store: Arc<ObservationStore>,
    db: Arc<FingerprintDb>,
    cfg: ServiceConfig,
}

#[derive(Debug, Deserialize)]
struct LocationParams {
    band: Option<String>,
    heuristic: Option<String>,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: &'a str,
    reason: String,
    server_time_ms: u64,
}

fn error_response(status: StatusCode, error: &str, reason: String) -> Response {
    let body = ErrorBody {
        error,
        reason,
        server_time_ms: now_ms(),
    };
    (status, Json(body)).into_response()
}

async fn get_location(
    State(app): State<Arc<AppState>>,
    UrlPath(client): UrlPath<String>,
    Query(params): Query<LocationParams>,
) -> Response {
    let parsed = (|| {
        let client: ClientId = client.parse().map_err(|e| format!("client id: {e}"))?;
        let band = params
            .band
            .filter(|b| !b.is_empty())
            .map(|b| b.parse::<Band>())
            .transpose()
            .map_err(|e| format!("band: {e}"))?;
        let heuristic = params
            .heuristic
            .filter(|h| !h.is_empty())
            .map(|h| h.parse::<Heuristic>())
            .transpose()?;
        Ok::<_, String>((client, band, heuristic))
    })();
    let (client, band, heuristic) = match parsed {
        Ok(p) => p,
        Err(reason) => return error_response(StatusCode::BAD_REQUEST, "bad-request", reason),
    };
    match query_location(&app.store, &app.db, &app.cfg, &client, band, heuristic) {
        Ok(located) => (StatusCode::OK, Json(located)).into_response(),
        Err(QueryError::NotLocalizable(reason)) => error_response(StatusCode::NOT_FOUND, "not-localizable", reason),
        Err(QueryError::BadRequest(reason)) => error_response(StatusCode::BAD_REQUEST, "bad-request", reason),
    }
}

async fn get_stats(State(app): State<Arc<AppState>>) -> Json<StatsSnapshot> {
    Json(app.store.stats())
}

pub fn router(store: Arc<ObservationStore>, db: Arc<FingerprintDb>, cfg: ServiceConfig) -> Router {
    Router::new()
        .route("/v1/location/{client_id}", get(get_location))
        .route("/v1/stats", get(get_stats))
        .with_state(Arc::new(AppState { store, db, cfg }))
}

fn bind_feed_socket(cfg: &ServiceConfig) -> Result<UdpSocket, ServiceError> {
    let bind_err = |source| ServiceError::Bind {
        what: "feed listener",
        addr: cfg.feed_addr,
        source,
    };
    let socket = Socket::new(Domain::for_address(cfg.feed_addr), Type::DGRAM, Some(Protocol::UDP)).map_err(bind_err)?;
    if let Err(e) = socket.set_recv_buffer_size(cfg.recv_buffer_bytes) {
        log::warn!("cannot set feed receive buffer to {} bytes: {e}", cfg.recv_buffer_bytes);
    }
    socket.set_nonblocking(true).map_err(bind_err)?;
    socket.bind(&cfg.feed_addr.into()).map_err(bind_err)?;
    UdpSocket::from_std(socket.into()).map_err(bind_err)
}

/// A started service. Dropping it without [`RunningService::shutdown`]
/// leaves the tasks running until the runtime stops.
pub struct RunningService {
    pub feed_addr: SocketAddr,
    pub api_addr: SocketAddr,
    pub store: Arc<ObservationStore>,
    stop: watch::Sender<bool>,
    tasks: Vec<JoinHandle<()>>,
}

impl RunningService {
    pub async fn shutdown(self) {
        let _ = self.stop.send(true);
        for t in self.tasks {
            let _ = t.await;
        }
    }
}

/// Bind both sockets and spawn the listener, ingest worker and API server
/// on the current tokio runtime.
pub async fn start(cfg: ServiceConfig, db: FingerprintDb) -> Result<RunningService, ServiceError> {
    let socket = bind_feed_socket(&cfg)?;
    let feed_addr = socket.local_addr().map_err(|source| ServiceError::Bind {
        what: "feed listener",
        addr: cfg.feed_addr,
        source,
    })?;
    let listener = tokio::net::TcpListener::bind(cfg.api_addr)
        .await
        .map_err(|source| ServiceError::Bind {
            what: "query API",
            addr: cfg.api_addr,
            source,
        })?;
    let api_addr = listener.local_addr().map_err(|source| ServiceError::Bind {
        what: "query API",
        addr: cfg.api_addr,
        source,
    })?;

    let store = Arc::new(ObservationStore::new(
        cfg.online_window_s,
        cfg.thresholds,
        cfg.probe_rates.clone(),
    ));
    let (stop, stopped) = watch::channel(false);
    let (tx, mut rx) = mpsc::channel::<Vec<u8>>(cfg.queue_capacity);

    let recv_store = Arc::clone(&store);
    let mut recv_stop = stopped.clone();
    let receiver = tokio::spawn(async move {
        let mut buf = vec![0u8; MAX_DATAGRAM_BYTES + 1];
        loop {
            tokio::select! {
                _ = recv_stop.changed() => break,
                r = socket.recv_from(&mut buf) => match r {
                    Ok((n, _)) => {
                        if tx.send(buf[..n].to_vec()).await.is_err() {
                            recv_store.stats.dropped.fetch_add(1, Ordering::Relaxed);
                        }
                    }
                    Err(e) => log::warn!("feed receive failed: {e}"),
                },
            }
        }
    });

    let ingest_store = Arc::clone(&store);
    let ingest = tokio::spawn(async move {
        while let Some(d) = rx.recv().await {
            ingest_store.ingest_payload(&d);
        }
    });

    let app = router(Arc::clone(&store), Arc::new(db), cfg);
    let mut api_stop = stopped;
    let api = tokio::spawn(async move {
        let shutdown = async move {
            let _ = api_stop.changed().await;
        };
        if let Err(e) = axum::serve(listener, app).with_graceful_shutdown(shutdown).await {
            log::error!("query API stopped: {e}");
        }
    });

    log::info!("feed listener on udp://{feed_addr}, query API on http://{api_addr}");
    Ok(RunningService {
        feed_addr,
        api_addr,
        store,
        stop,
        tasks: vec![receiver, ingest, api],
    })
}

/// Pack feed lines into datagrams of at most `max_bytes`.
pub fn pack_datagrams(records: &[RtlsRecord], max_bytes: usize) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    let mut cur: Vec<u8> = Vec::new();
    for r in records {
        let line = r.to_line();
        if !cur.is_empty() && cur.len() + line.len() + 1 > max_bytes {
            out.push(std::mem::take(&mut cur));
        }
        cur.extend_from_slice(line.as_bytes());
        cur.push(b'\n');
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Send `records` to `target` paced by their timestamps, `speed` times
/// faster than real time. Records stamped together travel together.
/// Returns the number of datagrams sent.
pub async fn replay(records: &[RtlsRecord], target: SocketAddr, speed: f64) -> std::io::Result<u64> {
    let local: SocketAddr = if target.is_ipv4() {
        SocketAddr::from(([0, 0, 0, 0], 0))
    } else {
        SocketAddr::from(([0u16; 8], 0))
    };
    let socket = UdpSocket::bind(local).await?;
    let Some(first) = records.first().map(|r| r.timestamp_ms) else {
        return Ok(0);
    };
    let start = tokio::time::Instant::now();
    let mut sent = 0;
    let mut i = 0;
    while i < records.len() {
        let ts = records[i].timestamp_ms;
        let j = i + records[i..].iter().take_while(|r| r.timestamp_ms == ts).count();
        if speed.is_finite() && speed > 0.0 {
            let offset = std::time::Duration::from_secs_f64(ts.saturating_sub(first) as f64 / 1000.0 / speed);
            tokio::time::sleep_until(start + offset).await;
        }
        for d in pack_datagrams(&records[i..j], MAX_DATAGRAM_BYTES) {
            socket.send_to(&d, target).await?;
            sent += 1;
        }
        i = j;
    }
    Ok(sent)
}

/// Run until interrupted.
pub async fn serve(cfg: ServiceConfig) -> Result<(), ServiceError> {
    cfg.validate()?;
    let db = cfg.load_db()?;
    let running = start(cfg, db).await?;
    if let Err(e) = tokio::signal::ctrl_c().await {
        log::error!("cannot wait for interrupt: {e}");
    }
    log::info!("shutting down");
    running.shutdown().await;
    Ok(())
}
