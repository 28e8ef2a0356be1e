//! City-wide simulation driven by the surrogate.
//!
//! Each cell's conditions intervals are cut further at injection boundaries;
//! every resulting piece queries the surrogate once and every packet emitted
//! in the piece draws its KPIs from that prediction.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cellsim::{parse_bool, parse_field, CellConditions};
use crate::distfit::{sample_kpi, Kpi, KpiDistribution};
use crate::error::{Error, Result};
use crate::seed::{Seed, SeedStream};
use crate::stats;
use crate::surrogate::SurrogateSet;
use crate::traffic::{Regime, TrafficProfile};
use crate::urban::{entity_timeline, Attachment, CellId, CellSite, ConditionInterval, MobileEntity};

/// Entity ids of injected flood sources start with this.
pub const FLOOD_PREFIX: &str = "flood:";
/// Entity ids of device slots an interval reports but no entity fills.
pub const GHOST_PREFIX: &str = "ghost:";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Target {
    Cell { cell_id: CellId },
    /// Every cell whose site lies within the circle.
    Area { x: f64, y: f64, radius_m: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Degradation {
    pub delay: f64,
    pub drop: f64,
    pub throughput: f64,
}

impl Default for Degradation {
    fn default() -> Self {
        Degradation { delay: 1.0, drop: 1.0, throughput: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InjectionKind {
    /// Every packet of the target is dropped.
    CellOutage,
    /// Extra sources added to the target's conditions.
    FloodTraffic { profile: TrafficProfile, count: u32 },
    /// Sampled KPIs multiplied by the given factors; drop probability capped at 1.
    FailureProfile { multipliers: Degradation },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Injection {
    pub action: InjectionKind,
    pub target: Target,
    /// `[t0, t1)` in seconds.
    pub span: [f64; 2],
}

impl Injection {
    pub fn targets(&self, site: &CellSite) -> bool {
        match self.target {
            Target::Cell { cell_id } => cell_id == site.cell_id,
            Target::Area { x, y, radius_m } => (site.x - x).hypot(site.y - y) <= radius_m,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KpiThresholds {
    /// A delivered packet slower than this violates the threshold.
    pub delay_ms: f64,
    /// An entity-day is bad when more than this fraction of its packets violate.
    pub bad_experience: f64,
    pub session_window_s: f64,
    pub day_window_s: f64,
}

impl Default for KpiThresholds {
    fn default() -> Self {
        KpiThresholds {
            delay_ms: 100.0,
            bad_experience: 0.05,
            session_window_s: 60.0,
            day_window_s: 86_400.0,
        }
    }
}

fn default_hysteresis() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub sites: Vec<CellSite>,
    pub entities: Vec<MobileEntity>,
    pub profiles: Vec<TrafficProfile>,
    #[serde(default)]
    pub injections: Vec<Injection>,
    pub horizon_s: f64,
    pub seed: u64,
    #[serde(default)]
    pub thresholds: KpiThresholds,
    #[serde(default = "default_hysteresis")]
    pub hysteresis: u32,
}

impl Scenario {
    pub fn profile(&self, name: &str) -> Option<&TrafficProfile> {
        self.profiles.iter().find(|p| p.name == name)
    }

    pub fn site(&self, id: CellId) -> Option<&CellSite> {
        self.sites.iter().find(|s| s.cell_id == id)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon_s > 0.0) || !self.horizon_s.is_finite() {
            return Err(Error::Config(format!("horizon_s must be > 0, got {}", self.horizon_s)));
        }
        let mut names = BTreeSet::new();
        for p in &self.profiles {
            p.validate()?;
            if !names.insert(p.name.as_str()) {
                return Err(Error::Config(format!("duplicate profile {:?}", p.name)));
            }
        }
        let mut ids = BTreeSet::new();
        for e in &self.entities {
            e.validate()?;
            if self.profile(&e.profile).is_none() {
                return Err(Error::Config(format!("entity {} uses unknown profile {:?}", e.entity_id, e.profile)));
            }
            if e.entity_id.starts_with(FLOOD_PREFIX) || e.entity_id.starts_with(GHOST_PREFIX) {
                return Err(Error::Config(format!("entity id {:?} uses a reserved prefix", e.entity_id)));
            }
            if !ids.insert(e.entity_id.as_str()) {
                return Err(Error::Config(format!("duplicate entity id {:?}", e.entity_id)));
            }
        }
        let t = KpiThresholds::default();
        let th = &self.thresholds;
        if !(th.delay_ms > 0.0) || !(0.0..=1.0).contains(&th.bad_experience) || !(th.session_window_s > 0.0) || !(th.day_window_s > 0.0) {
            return Err(Error::Config(format!("invalid thresholds {th:?}; defaults are {t:?}")));
        }
        if self.hysteresis < 1 {
            return Err(Error::Config("hysteresis must be >= 1".into()));
        }
        validate_injections(self, &self.injections)
    }
}

/// Checks injections against a scenario. Targets naming unknown cells are a
/// structure error.
pub fn validate_injections(scenario: &Scenario, injections: &[Injection]) -> Result<()> {
    for inj in injections {
        let [a, b] = inj.span;
        if !(a >= 0.0 && b > a && b <= scenario.horizon_s) {
            return Err(Error::Config(format!(
                "injection span [{a}, {b}) must lie within [0, {}]",
                scenario.horizon_s
            )));
        }
        match &inj.target {
            Target::Cell { cell_id } => {
                if scenario.site(*cell_id).is_none() {
                    return Err(Error::Structure(format!("injection targets unknown cell {cell_id}")));
                }
            }
            Target::Area { radius_m, .. } => {
                if !(*radius_m > 0.0) {
                    return Err(Error::Config("injection area radius must be > 0".into()));
                }
            }
        }
        match &inj.action {
            InjectionKind::CellOutage => {}
            InjectionKind::FloodTraffic { profile, count } => {
                profile.validate()?;
                if *count == 0 {
                    return Err(Error::Config("flood count must be > 0".into()));
                }
                if let Some(p) = scenario.profile(&profile.name) {
                    if p != profile {
                        return Err(Error::Config(format!(
                            "flood profile {:?} conflicts with the scenario profile of the same name",
                            profile.name
                        )));
                    }
                }
            }
            InjectionKind::FailureProfile { multipliers: m } => {
                if ![m.delay, m.drop, m.throughput].iter().all(|v| *v >= 0.0 && v.is_finite()) {
                    return Err(Error::Config("failure multipliers must be finite and >= 0".into()));
                }
            }
        }
    }
    Ok(())
}

/// Packets emitted by `devices` devices of `profile` over `[t0, t1)`.
/// Periodic regimes count epochs (device phases at 0); Poisson draws the total.
pub fn packet_count<R: Rng + ?Sized>(profile: &TrafficProfile, devices: u32, t0: f64, t1: f64, rng: &mut R) -> u64 {
    if devices == 0 || !(t1 > t0) {
        return 0;
    }
    match profile.regime {
        Regime::PeriodicSync | Regime::PeriodicAsync => {
            u64::from(devices) * crate::traffic::periodic_arrivals(profile.packet_rate, 0.0, t0, t1).len() as u64
        }
        Regime::Poisson => {
            let mean = f64::from(devices) * profile.packet_rate * (t1 - t0);
            Poisson::new(mean).map(|p| p.sample(rng) as u64).unwrap_or(0)
        }
    }
}

/// Merged, sorted emission times of `devices` devices over `[t0, t1)`;
/// asynchronous phases are drawn from `rng`.
pub fn generate_timestamps<R: Rng + ?Sized>(
    profile: &TrafficProfile,
    devices: u32,
    t0: f64,
    t1: f64,
    rng: &mut R,
) -> Vec<f64> {
    let mut out = Vec::new();
    for _ in 0..devices {
        let phase = profile.draw_phase(rng);
        out.extend(profile.device_arrivals(phase, t0, t1, rng));
    }
    out.sort_by(f64::total_cmp);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacketLogRecord {
    pub cell_id: CellId,
    pub entity_id: String,
    pub profile: String,
    pub timestamp_s: f64,
    pub delay_ms: Option<f64>,
    pub dropped: bool,
    pub throughput_bps: f64,
}

impl PacketLogRecord {
    fn is_user(&self) -> bool {
        !self.entity_id.starts_with(FLOOD_PREFIX) && !self.entity_id.starts_with(GHOST_PREFIX)
    }
}

pub const PACKET_LOG_HEADER: &str = "cell_id,entity_id,profile,timestamp_s,delay_ms,dropped,throughput_bps";

pub fn packet_log_to_csv(log: &[PacketLogRecord]) -> String {
    let mut s = String::with_capacity(64 * (log.len() + 1));
    s.push_str(PACKET_LOG_HEADER);
    s.push('\n');
    for r in log {
        let delay = r.delay_ms.map(|d| d.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.cell_id, r.entity_id, r.profile, r.timestamp_s, delay, r.dropped, r.throughput_bps
        );
    }
    s
}

pub fn packet_log_from_csv(text: &str, source: &str) -> Result<Vec<PacketLogRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() || (i == 0 && line == PACKET_LOG_HEADER) {
            continue;
        }
        let loc = || format!("{source}:{}", i + 1);
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(Error::parse(loc(), format!("expected 7 fields, found {}", f.len())));
        }
        out.push(PacketLogRecord {
            cell_id: parse_field(f[0], &loc)?,
            entity_id: f[1].to_string(),
            profile: f[2].to_string(),
            timestamp_s: parse_field(f[3], &loc)?,
            delay_ms: if f[4].is_empty() { None } else { Some(parse_field(f[4], &loc)?) },
            dropped: parse_bool(f[5], &loc)?,
            throughput_bps: parse_field(f[6], &loc)?,
        });
    }
    Ok(out)
}

pub fn write_packet_log(path: &Path, log: &[PacketLogRecord]) -> Result<()> {
    fs::write(path, packet_log_to_csv(log))?;
    Ok(())
}

pub fn read_packet_log(path: &Path) -> Result<Vec<PacketLogRecord>> {
    packet_log_from_csv(&fs::read_to_string(path)?, &path.display().to_string())
}

/// KPI samples of a packet log in the units the surrogate models use.
pub fn log_samples(kpi: Kpi, log: &[PacketLogRecord]) -> Vec<f64> {
    match kpi {
        Kpi::Delay => log.iter().filter_map(|r| r.delay_ms).collect(),
        Kpi::DropProbability => log.iter().map(|r| f64::from(u8::from(r.dropped))).collect(),
        Kpi::Throughput => log.iter().filter(|r| !r.dropped).map(|r| r.throughput_bps).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayStats {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
}

impl DelayStats {
    fn from_samples(mut d: Vec<f64>) -> Option<Self> {
        if d.is_empty() {
            return None;
        }
        d.sort_by(f64::total_cmp);
        Some(DelayStats {
            mean_ms: stats::mean(&d),
            p50_ms: stats::percentile_sorted(&d, 50.0),
            p95_ms: stats::percentile_sorted(&d, 95.0),
            p99_ms: stats::percentile_sorted(&d, 99.0),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSummary {
    pub packets: u64,
    pub dropped: u64,
    pub drop_rate: f64,
    pub delay: Option<DelayStats>,
    pub mean_throughput_bps: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkKpis {
    pub cell_id: CellId,
    #[serde(flatten)]
    pub summary: StreamSummary,
    /// Std of consecutive delay differences within each (entity, session), pooled.
    pub jitter_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSession {
    pub entity_id: String,
    pub session: u64,
    pub packets: u64,
    pub violations: u64,
    pub delay_p95_ms: Option<f64>,
    pub jitter_ms: Option<f64>,
    /// Whether the session's p95 delay met the threshold with no drops.
    pub meets_threshold: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerticalKpi {
    pub entity_days: u64,
    pub bad_entity_days: u64,
    pub bad_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerticalReport {
    pub stream: StreamSummary,
    pub cells: Vec<NetworkKpis>,
    pub users: Vec<UserSession>,
    pub vertical: VerticalKpi,
    pub vertical_by_profile: BTreeMap<String, VerticalKpi>,
    pub thresholds: KpiThresholds,
}

fn summarize<'a>(recs: impl Iterator<Item = &'a PacketLogRecord>) -> StreamSummary {
    let mut packets = 0;
    let mut dropped = 0;
    let mut delays = Vec::new();
    let mut tput = Vec::new();
    for r in recs {
        packets += 1;
        if r.dropped {
            dropped += 1;
        } else {
            delays.extend(r.delay_ms);
            tput.push(r.throughput_bps);
        }
    }
    StreamSummary {
        packets,
        dropped,
        drop_rate: if packets == 0 { 0.0 } else { dropped as f64 / packets as f64 },
        delay: DelayStats::from_samples(delays),
        mean_throughput_bps: (!tput.is_empty()).then(|| stats::mean(&tput)),
    }
}

fn consecutive_diffs(delays: &[f64], out: &mut Vec<f64>) {
    out.extend(delays.windows(2).map(|w| w[1] - w[0]));
}

fn jitter(diffs: &[f64]) -> Option<f64> {
    (!diffs.is_empty()).then(|| stats::std_dev(diffs))
}

fn is_violation(r: &PacketLogRecord, th: &KpiThresholds) -> bool {
    r.dropped || r.delay_ms.is_some_and(|d| d > th.delay_ms)
}

/// Aggregates a packet log into network, user and vertical KPIs.
/// Flood and ghost packets count toward network KPIs only.
pub fn compute_kpis(log: &[PacketLogRecord], th: &KpiThresholds) -> VerticalReport {
    let mut by_cell: BTreeMap<CellId, Vec<&PacketLogRecord>> = BTreeMap::new();
    for r in log {
        by_cell.entry(r.cell_id).or_default().push(r);
    }
    let session_of = |t: f64| (t / th.session_window_s).floor().max(0.0) as u64;
    let day_of = |t: f64| (t / th.day_window_s).floor().max(0.0) as u64;

    let cells = by_cell
        .iter()
        .map(|(&cell_id, recs)| {
            let mut sorted = recs.clone();
            sorted.sort_by(|a, b| {
                (a.entity_id.as_str(), session_of(a.timestamp_s))
                    .cmp(&(b.entity_id.as_str(), session_of(b.timestamp_s)))
                    .then(a.timestamp_s.total_cmp(&b.timestamp_s))
            });
            let mut diffs = Vec::new();
            for group in sorted.chunk_by(|a, b| a.entity_id == b.entity_id && session_of(a.timestamp_s) == session_of(b.timestamp_s)) {
                let d: Vec<f64> = group.iter().filter_map(|r| r.delay_ms).collect();
                consecutive_diffs(&d, &mut diffs);
            }
            NetworkKpis {
                cell_id,
                summary: summarize(recs.iter().copied()),
                jitter_ms: jitter(&diffs),
            }
        })
        .collect();

    let mut user_recs: Vec<&PacketLogRecord> = log.iter().filter(|r| r.is_user()).collect();
    user_recs.sort_by(|a, b| a.entity_id.cmp(&b.entity_id).then(a.timestamp_s.total_cmp(&b.timestamp_s)));

    let mut users = Vec::new();
    for group in user_recs.chunk_by(|a, b| a.entity_id == b.entity_id && session_of(a.timestamp_s) == session_of(b.timestamp_s)) {
        let d: Vec<f64> = group.iter().filter_map(|r| r.delay_ms).collect();
        let mut diffs = Vec::new();
        consecutive_diffs(&d, &mut diffs);
        let violations = group.iter().filter(|r| is_violation(r, th)).count() as u64;
        let p95 = DelayStats::from_samples(d).map(|s| s.p95_ms);
        let dropped = group.iter().any(|r| r.dropped);
        users.push(UserSession {
            entity_id: group[0].entity_id.clone(),
            session: session_of(group[0].timestamp_s),
            packets: group.len() as u64,
            violations,
            delay_p95_ms: p95,
            jitter_ms: jitter(&diffs),
            meets_threshold: !dropped && p95.is_some_and(|p| p <= th.delay_ms),
        });
    }

    let mut overall = VerticalKpi { entity_days: 0, bad_entity_days: 0, bad_fraction: 0.0 };
    let mut by_profile: BTreeMap<String, VerticalKpi> = BTreeMap::new();
    for group in user_recs.chunk_by(|a, b| a.entity_id == b.entity_id && day_of(a.timestamp_s) == day_of(b.timestamp_s)) {
        let v = group.iter().filter(|r| is_violation(r, th)).count() as f64;
        let bad = v / group.len() as f64 > th.bad_experience;
        let p = by_profile
            .entry(group[0].profile.clone())
            .or_insert(VerticalKpi { entity_days: 0, bad_entity_days: 0, bad_fraction: 0.0 });
        for k in [&mut overall, p] {
            k.entity_days += 1;
            k.bad_entity_days += u64::from(bad);
        }
    }
    for k in std::iter::once(&mut overall).chain(by_profile.values_mut()) {
        k.bad_fraction = if k.entity_days == 0 { 0.0 } else { k.bad_entity_days as f64 / k.entity_days as f64 };
    }

    VerticalReport {
        stream: summarize(log.iter()),
        cells,
        users,
        vertical: overall,
        vertical_by_profile: by_profile,
        thresholds: *th,
    }
}

pub const CELL_CSV_HEADER: &str =
    "cell_id,packets,dropped,drop_rate,mean_delay_ms,p50_delay_ms,p95_delay_ms,p99_delay_ms,jitter_ms,mean_throughput_bps";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl VerticalReport {
    pub fn cell(&self, id: CellId) -> Option<&NetworkKpis> {
        self.cells.iter().find(|c| c.cell_id == id)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Structure(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse(format!("line {}", e.line()), e.to_string()))
    }

    pub fn cells_csv(&self) -> String {
        let mut s = String::from(CELL_CSV_HEADER);
        s.push('\n');
        for c in &self.cells {
            let d = c.summary.delay.as_ref();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                c.cell_id,
                c.summary.packets,
                c.summary.dropped,
                c.summary.drop_rate,
                opt(d.map(|d| d.mean_ms)),
                opt(d.map(|d| d.p50_ms)),
                opt(d.map(|d| d.p95_ms)),
                opt(d.map(|d| d.p99_ms)),
                opt(c.jitter_ms),
                opt(c.summary.mean_throughput_bps),
            );
        }
        s
    }
}

/// Output of one city-scale run.
#[derive(Debug, Clone, PartialEq)]
pub struct CityRun {
    /// Ordered by cell id, then emission time.
    pub log: Vec<PacketLogRecord>,
    pub report: VerticalReport,
    /// Surrogate queries outside the training domain, deduplicated.
    pub warnings: Vec<String>,
    pub surrogate_queries: usize,
}

struct Piece<'a> {
    t0: f64,
    t1: f64,
    counts: &'a BTreeMap<String, u32>,
    injections: Vec<&'a Injection>,
}

/// Fills device slots of one profile with the entities attached to the cell
/// during the piece, longest overlap first.
fn slot_entities(
    cell: CellId,
    profile: &str,
    count: u32,
    t0: f64,
    t1: f64,
    scenario: &Scenario,
    timelines: &[Vec<Attachment>],
) -> Vec<String> {
    let mut members: Vec<(f64, usize)> = timelines
        .iter()
        .enumerate()
        .filter(|(i, _)| scenario.entities[*i].profile == profile)
        .filter_map(|(i, tl)| {
            let overlap: f64 = tl
                .iter()
                .filter(|s| s.cell == Some(cell))
                .map(|s| (s.t1.min(t1) - s.t0.max(t0)).max(0.0))
                .sum();
            (overlap > 0.0).then_some((overlap, i))
        })
        .collect();
    members.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    (0..count as usize)
        .map(|k| match members.get(k) {
            Some(&(_, i)) => scenario.entities[i].entity_id.clone(),
            None => format!("{GHOST_PREFIX}{cell}:{profile}:{k}"),
        })
        .collect()
}

fn entity_phase(seed: u64, profile: &TrafficProfile, entity: &str) -> f64 {
    profile.draw_phase(&mut Seed::new(seed).child_label("phase").child_label(entity).rng())
}

struct CellOutput {
    log: Vec<PacketLogRecord>,
    warnings: Vec<String>,
    queries: usize,
}

fn run_one_cell(
    scenario: &Scenario,
    models: &SurrogateSet,
    site: &CellSite,
    intervals: &[&ConditionInterval],
    timelines: &[Vec<Attachment>],
) -> Result<CellOutput> {
    let injections: Vec<&Injection> = scenario.injections.iter().filter(|i| i.targets(site)).collect();
    let mut cuts: Vec<f64> = injections.iter().flat_map(|i| i.span).collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();

    let mut pieces = Vec::new();
    for iv in intervals {
        let mut bounds = vec![iv.t0];
        bounds.extend(cuts.iter().copied().filter(|&c| c > iv.t0 && c < iv.t1));
        bounds.push(iv.t1);
        for w in bounds.windows(2) {
            let mid = 0.5 * (w[0] + w[1]);
            pieces.push(Piece {
                t0: w[0],
                t1: w[1],
                counts: &iv.device_counts,
                injections: injections
                    .iter()
                    .copied()
                    .filter(|i| i.span[0] <= mid && mid < i.span[1])
                    .collect(),
            });
        }
    }

    let mut profiles = scenario.profiles.clone();
    for inj in &injections {
        if let InjectionKind::FloodTraffic { profile, .. } = &inj.action {
            if !profiles.iter().any(|p| p.name == profile.name) {
                profiles.push(profile.clone());
            }
        }
    }

    let mut rng: SeedStream = Seed::new(scenario.seed).child_label("cell").child(u64::from(site.cell_id)).rng();
    let mut cache: HashMap<Vec<(String, u32)>, [KpiDistribution; 3]> = HashMap::new();
    let mut out = CellOutput { log: Vec::new(), warnings: Vec::new(), queries: 0 };

    for piece in pieces {
        // (profile, entity id) per device slot
        let mut slots: Vec<(&TrafficProfile, String)> = Vec::new();
        let mut counts: BTreeMap<String, u32> = BTreeMap::new();
        for (name, &c) in piece.counts {
            let p = scenario
                .profile(name)
                .ok_or_else(|| Error::Structure(format!("interval of cell {} uses unknown profile {name:?}", site.cell_id)))?;
            for id in slot_entities(site.cell_id, name, c, piece.t0, piece.t1, scenario, timelines) {
                slots.push((p, id));
            }
            *counts.entry(name.clone()).or_default() += c;
        }
        let mut outage = false;
        let mut m = Degradation::default();
        for inj in &piece.injections {
            match &inj.action {
                InjectionKind::CellOutage => outage = true,
                InjectionKind::FloodTraffic { profile, count } => {
                    let p = profiles.iter().find(|q| q.name == profile.name).expect("flood profile registered");
                    let base = slots.len();
                    for k in 0..*count {
                        slots.push((p, format!("{FLOOD_PREFIX}{}:{}", site.cell_id, base as u32 + k)));
                    }
                    *counts.entry(profile.name.clone()).or_default() += count;
                }
                InjectionKind::FailureProfile { multipliers } => {
                    m.delay *= multipliers.delay;
                    m.drop *= multipliers.drop;
                    m.throughput *= multipliers.throughput;
                }
            }
        }
        if slots.is_empty() {
            continue;
        }

        let mut emissions: Vec<(f64, usize)> = Vec::new();
        for (k, (p, id)) in slots.iter().enumerate() {
            let phase = entity_phase(scenario.seed, p, id);
            emissions.extend(p.device_arrivals(phase, piece.t0, piece.t1, &mut rng).into_iter().map(|t| (t, k)));
        }
        if emissions.is_empty() {
            continue;
        }
        emissions.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

        let dists = if outage {
            None
        } else {
            let key: Vec<(String, u32)> = counts.iter().map(|(k, &v)| (k.clone(), v)).collect();
            if !cache.contains_key(&key) {
                let cond = CellConditions {
                    device_counts: counts.clone(),
                    profiles: profiles.clone(),
                    cell_radius_m: site.radius_m,
                    radio: site.radio.clone(),
                    channel: site.channel.clone(),
                    mac: site.mac.clone(),
                };
                let mut ds = Vec::with_capacity(3);
                for kpi in Kpi::ALL {
                    let model = models.get(kpi).ok_or_else(|| Error::Config(format!("no surrogate for {kpi}")))?;
                    let pred = model.predict(&cond)?;
                    if let Some(w) = pred.extrapolation_warning {
                        let w = format!("cell {}: {kpi}: {w}", site.cell_id);
                        if !out.warnings.contains(&w) {
                            out.warnings.push(w);
                        }
                    }
                    ds.push(pred.dist);
                }
                out.queries += 1;
                let [d, p, t]: [KpiDistribution; 3] = ds.try_into().expect("three KPIs");
                cache.insert(key.clone(), [d, p, t]);
            }
            Some(&cache[&key])
        };

        for (t, k) in emissions {
            let (p, id) = &slots[k];
            let (dropped, delay, tput) = match dists {
                None => (true, None, 0.0),
                Some([d, pd, tp]) => {
                    let p_drop = (pd.params[0] * m.drop).min(1.0);
                    if rng.random::<f64>() < p_drop {
                        (true, None, 0.0)
                    } else {
                        (false, Some(sample_kpi(d, &mut rng) * m.delay), sample_kpi(tp, &mut rng) * m.throughput)
                    }
                }
            };
            out.log.push(PacketLogRecord {
                cell_id: site.cell_id,
                entity_id: id.clone(),
                profile: p.name.clone(),
                timestamp_s: t,
                delay_ms: delay,
                dropped,
                throughput_bps: tput,
            });
        }
    }
    Ok(out)
}

/// Runs the city-scale simulation over precomputed conditions intervals.
pub fn run_city(
    scenario: &Scenario,
    models: &SurrogateSet,
    intervals: &[ConditionInterval],
    workers: Option<usize>,
) -> Result<CityRun> {
    models.require_all()?;
    scenario.validate()?;
    let mut by_cell: BTreeMap<CellId, Vec<&ConditionInterval>> = BTreeMap::new();
    for iv in intervals {
        if scenario.site(iv.cell_id).is_none() {
            return Err(Error::Structure(format!("interval refers to unknown cell {}", iv.cell_id)));
        }
        by_cell.entry(iv.cell_id).or_default().push(iv);
    }
    for ivs in by_cell.values_mut() {
        ivs.sort_by(|a, b| a.t0.total_cmp(&b.t0));
    }
    // flooded cells without activity still carry the flood
    let empty = ConditionInterval {
        cell_id: 0,
        t0: 0.0,
        t1: scenario.horizon_s,
        device_counts: BTreeMap::new(),
    };
    let mut work: Vec<(&CellSite, Vec<&ConditionInterval>)> = Vec::new();
    for site in &scenario.sites {
        let flooded = scenario
            .injections
            .iter()
            .any(|i| matches!(i.action, InjectionKind::FloodTraffic { .. }) && i.targets(site));
        match by_cell.remove(&site.cell_id) {
            Some(ivs) => work.push((site, ivs)),
            None if flooded => work.push((site, vec![&empty])),
            None => {}
        }
    }
    work.sort_by_key(|(s, _)| s.cell_id);

    let timelines: Vec<Vec<Attachment>> = scenario
        .entities
        .iter()
        .map(|e| entity_timeline(&scenario.sites, e, scenario.horizon_s))
        .collect();

    let run = || -> Result<Vec<CellOutput>> {
        work.par_iter()
            .map(|(site, ivs)| run_one_cell(scenario, models, site, ivs, &timelines))
            .collect()
    };
    let outputs = match workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(run)?,
        None => run()?,
    };

    let mut log = Vec::new();
    let mut warnings = Vec::new();
    let mut surrogate_queries = 0;
    for o in outputs {
        log.extend(o.log);
        warnings.extend(o.warnings);
        surrogate_queries += o.queries;
    }
    let report = compute_kpis(&log, &scenario.thresholds);
    Ok(CityRun { log, report, warnings, surrogate_queries })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellDelta {
    pub cell_id: CellId,
    pub drop_rate: f64,
    pub mean_delay_ms: Option<f64>,
    pub p95_delay_ms: Option<f64>,
    pub mean_throughput_bps: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhatIfDelta {
    pub drop_rate: f64,
    pub mean_delay_ms: Option<f64>,
    pub bad_fraction: f64,
    pub cells: Vec<CellDelta>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WhatIf {
    pub baseline: CityRun,
    pub injected: CityRun,
    pub delta: WhatIfDelta,
}

fn diff(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some(b? - a?)
}

/// Injected minus baseline, per KPI. Cells present in either run are listed.
pub fn report_delta(base: &VerticalReport, inj: &VerticalReport) -> WhatIfDelta {
    let ids: BTreeSet<CellId> = base.cells.iter().chain(&inj.cells).map(|c| c.cell_id).collect();
    let cells = ids
        .into_iter()
        .map(|id| {
            let a = base.cell(id).map(|c| &c.summary);
            let b = inj.cell(id).map(|c| &c.summary);
            let mean = |s: Option<&StreamSummary>| s.and_then(|s| s.delay.as_ref()).map(|d| d.mean_ms);
            let p95 = |s: Option<&StreamSummary>| s.and_then(|s| s.delay.as_ref()).map(|d| d.p95_ms);
            CellDelta {
                cell_id: id,
                drop_rate: b.map_or(0.0, |s| s.drop_rate) - a.map_or(0.0, |s| s.drop_rate),
                mean_delay_ms: diff(mean(a), mean(b)),
                p95_delay_ms: diff(p95(a), p95(b)),
                mean_throughput_bps: diff(a.and_then(|s| s.mean_throughput_bps), b.and_then(|s| s.mean_throughput_bps)),
            }
        })
        .collect();
    WhatIfDelta {
        drop_rate: inj.stream.drop_rate - base.stream.drop_rate,
        mean_delay_ms: diff(
            base.stream.delay.as_ref().map(|d| d.mean_ms),
            inj.stream.delay.as_ref().map(|d| d.mean_ms),
        ),
        bad_fraction: inj.vertical.bad_fraction - base.vertical.bad_fraction,
        cells,
    }
}

/// Runs the baseline scenario and the same scenario with `overlay` appended
/// to its injections, under the same seed.
pub fn whatif(
    baseline: &Scenario,
    overlay: &[Injection],
    models: &SurrogateSet,
    intervals: &[ConditionInterval],
    workers: Option<usize>,
) -> Result<WhatIf> {
    models.require_all()?;
    validate_injections(baseline, overlay)?;
    let mut injected = baseline.clone();
    injected.injections.extend(overlay.iter().cloned());
    let base = run_city(baseline, models, intervals, workers)?;
    let inj = run_city(&injected, models, intervals, workers)?;
    let delta = report_delta(&base.report, &inj.report);
    Ok(WhatIf { baseline: base, injected: inj, delta })
}
