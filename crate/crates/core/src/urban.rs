//! One-way urban activity simulator.
//!
//! Entities move along piecewise-linear routes and attach to the nearest
//! covering site. The module only consumes geometry and schedules; it never
//! reads anything produced by the telecom layers. Its output is, per cell, a
//! partition of the horizon into intervals of constant conditions.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cellsim::{parse_field, MacConfig};
use crate::channel::{ChannelConfig, RadioConfig};
use crate::error::{Error, Result};
use crate::stats;

pub type CellId = u32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSite {
    pub cell_id: CellId,
    pub x: f64,
    pub y: f64,
    pub radius_m: f64,
    #[serde(default)]
    pub radio: RadioConfig,
    #[serde(default)]
    pub channel: ChannelConfig,
    #[serde(default)]
    pub mac: MacConfig,
}

impl CellSite {
    fn dist2(&self, x: f64, y: f64) -> f64 {
        (x - self.x).powi(2) + (y - self.y).powi(2)
    }

    fn covers(&self, x: f64, y: f64) -> bool {
        self.dist2(x, y) <= self.radius_m * self.radius_m
    }
}

/// A route point `[x, y, t]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Waypoint {
    pub x: f64,
    pub y: f64,
    pub t: f64,
}

impl From<[f64; 3]> for Waypoint {
    fn from([x, y, t]: [f64; 3]) -> Self {
        Waypoint { x, y, t }
    }
}

impl From<Waypoint> for [f64; 3] {
    fn from(w: Waypoint) -> Self {
        [w.x, w.y, w.t]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MobileEntity {
    pub entity_id: String,
    pub profile: String,
    pub route: Vec<Waypoint>,
    /// `[t_start, t_end]`; the whole horizon when absent.
    #[serde(default)]
    pub active: Option<[f64; 2]>,
}

impl MobileEntity {
    pub fn validate(&self) -> Result<()> {
        if self.route.is_empty() {
            return Err(Error::Config(format!("entity {}: empty route", self.entity_id)));
        }
        if self.route.windows(2).any(|w| !(w[1].t > w[0].t)) {
            return Err(Error::Config(format!(
                "entity {}: waypoint times must be strictly increasing",
                self.entity_id
            )));
        }
        if let Some([a, b]) = self.active {
            if !(b >= a) {
                return Err(Error::Config(format!("entity {}: active window reversed", self.entity_id)));
            }
        }
        Ok(())
    }

    /// Position at time `t`; parked at the first/last waypoint outside the route times.
    pub fn position(&self, t: f64) -> (f64, f64) {
        let r = &self.route;
        if t <= r[0].t {
            return (r[0].x, r[0].y);
        }
        let last = r[r.len() - 1];
        if t >= last.t {
            return (last.x, last.y);
        }
        let i = r.partition_point(|w| w.t <= t) - 1;
        let (a, b) = (r[i], r[i + 1]);
        let s = (t - a.t) / (b.t - a.t);
        (a.x + s * (b.x - a.x), a.y + s * (b.y - a.y))
    }
}

/// Nearest covering site, lowest id on ties; `None` in a coverage gap.
pub fn assign_cell(sites: &[CellSite], x: f64, y: f64) -> Option<CellId> {
    let mut best: Option<(f64, CellId)> = None;
    for s in sites.iter().filter(|s| s.covers(x, y)) {
        let d = s.dist2(x, y);
        let better = match best {
            None => true,
            Some((bd, bid)) => d < bd || (d == bd && s.cell_id < bid),
        };
        if better {
            best = Some((d, s.cell_id));
        }
    }
    best.map(|(_, id)| id)
}

/// A span of constant attachment of one entity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Attachment {
    pub t0: f64,
    pub t1: f64,
    pub cell: Option<CellId>,
}

/// Times in `(t0, t1)` at which the assignment along a linear move may change.
fn crossing_times(sites: &[CellSite], a: Waypoint, b: Waypoint, out: &mut Vec<f64>) {
    let dt = b.t - a.t;
    let (vx, vy) = ((b.x - a.x) / dt, (b.y - a.y) / dt);
    let push = |t: f64, out: &mut Vec<f64>| {
        if t > a.t && t < b.t {
            out.push(t);
        }
    };
    let vv = vx * vx + vy * vy;
    if vv == 0.0 {
        return;
    }
    for s in sites {
        // |p0 + v tau - c|^2 = r^2
        let (px, py) = (a.x - s.x, a.y - s.y);
        let bq = 2.0 * (px * vx + py * vy);
        let cq = px * px + py * py - s.radius_m * s.radius_m;
        let disc = bq * bq - 4.0 * vv * cq;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            push(a.t + (-bq - sq) / (2.0 * vv), out);
            push(a.t + (-bq + sq) / (2.0 * vv), out);
        }
    }
    for (i, s1) in sites.iter().enumerate() {
        for s2 in &sites[i + 1..] {
            // |p - c1|^2 = |p - c2|^2 is linear in tau
            let (dx, dy) = (s2.x - s1.x, s2.y - s1.y);
            let k = 2.0 * (vx * dx + vy * dy);
            if k != 0.0 {
                let rhs = (s2.x * s2.x + s2.y * s2.y) - (s1.x * s1.x + s1.y * s1.y)
                    - 2.0 * (a.x * dx + a.y * dy);
                push(a.t + rhs / k, out);
            }
        }
    }
}

/// Attachment timeline of one entity over its active window clipped to
/// `[0, horizon)`. Empty when the entity is never active.
pub fn entity_timeline(sites: &[CellSite], entity: &MobileEntity, horizon: f64) -> Vec<Attachment> {
    let [ws, we] = entity.active.unwrap_or([0.0, horizon]);
    let (t0, t1) = (ws.max(0.0), we.min(horizon));
    if !(t1 > t0) {
        return Vec::new();
    }
    let mut cuts = vec![t0, t1];
    for w in entity.route.windows(2) {
        if w[1].t <= t0 || w[0].t >= t1 {
            continue;
        }
        cuts.push(w[0].t.max(t0));
        cuts.push(w[1].t.min(t1));
        crossing_times(sites, w[0], w[1], &mut cuts);
    }
    cuts.retain(|&t| t >= t0 && t <= t1);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let mut out: Vec<Attachment> = Vec::new();
    for w in cuts.windows(2) {
        let (x, y) = entity.position(0.5 * (w[0] + w[1]));
        let cell = assign_cell(sites, x, y);
        match out.last_mut() {
            Some(last) if last.cell == cell => last.t1 = w[1],
            _ => out.push(Attachment { t0: w[0], t1: w[1], cell }),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionInterval {
    pub cell_id: CellId,
    pub t0: f64,
    pub t1: f64,
    /// Profile name to device count; zero counts omitted.
    pub device_counts: BTreeMap<String, u32>,
}

impl ConditionInterval {
    pub fn length(&self) -> f64 {
        self.t1 - self.t0
    }

    pub fn total_devices(&self) -> u64 {
        self.device_counts.values().map(|&c| u64::from(c)).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Activity {
    /// Sorted by `(cell_id, t0)`.
    pub intervals: Vec<ConditionInterval>,
    /// Per entity, in input order.
    pub timelines: Vec<Vec<Attachment>>,
    pub handovers: u64,
    /// Entity-seconds spent active outside every cell.
    pub coverage_gap_s: f64,
    pub horizon: f64,
}

#[derive(Debug, Default)]
struct CellState {
    current: BTreeMap<String, i64>,
    open: BTreeMap<String, i64>,
    open_t: f64,
    ever_occupied: bool,
    done: Vec<ConditionInterval>,
}

impl CellState {
    fn changed_by(&self, h: u32) -> bool {
        let keys: BTreeSet<&String> = self.current.keys().chain(self.open.keys()).collect();
        keys.into_iter().any(|k| {
            let a = self.current.get(k).copied().unwrap_or(0);
            let b = self.open.get(k).copied().unwrap_or(0);
            (a - b).unsigned_abs() >= u64::from(h)
        })
    }

    fn close(&mut self, cell_id: CellId, t: f64) {
        if t > self.open_t {
            self.done.push(ConditionInterval {
                cell_id,
                t0: self.open_t,
                t1: t,
                device_counts: self
                    .open
                    .iter()
                    .filter(|(_, &c)| c > 0)
                    .map(|(k, &c)| (k.clone(), c as u32))
                    .collect(),
            });
        }
        self.open = self.current.clone();
        self.open_t = t;
    }
}

/// Runs the urban activity model and emits per-cell intervals of constant
/// conditions. A cell's interval is cut only when one of its per-profile
/// counts has moved by at least `hysteresis` since the interval opened.
/// Cells never occupied during the horizon produce no intervals.
pub fn simulate_activity(
    sites: &[CellSite],
    entities: &[MobileEntity],
    horizon: f64,
    hysteresis: u32,
) -> Result<Activity> {
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(Error::domain(format!("horizon must be > 0, got {horizon}")));
    }
    if hysteresis < 1 {
        return Err(Error::Config("hysteresis must be >= 1".into()));
    }
    let mut ids = BTreeSet::new();
    for s in sites {
        if !(s.radius_m > 0.0) {
            return Err(Error::Config(format!("cell {}: radius must be > 0", s.cell_id)));
        }
        if !ids.insert(s.cell_id) {
            return Err(Error::Config(format!("duplicate cell id {}", s.cell_id)));
        }
    }
    for e in entities {
        e.validate()?;
    }

    let timelines: Vec<Vec<Attachment>> = entities.iter().map(|e| entity_timeline(sites, e, horizon)).collect();

    // (time, entity, from, to); None = not attached to any cell
    let mut events: Vec<(f64, usize, Option<CellId>, Option<CellId>)> = Vec::new();
    let mut handovers = 0;
    let mut coverage_gap_s = 0.0;
    for (ei, tl) in timelines.iter().enumerate() {
        let mut prev = None;
        for seg in tl {
            if seg.cell.is_none() {
                coverage_gap_s += seg.t1 - seg.t0;
            }
            if prev.is_some() && seg.cell.is_some() && prev != seg.cell {
                handovers += 1;
            }
            events.push((seg.t0, ei, prev, seg.cell));
            prev = seg.cell;
        }
        if let Some(last) = tl.last() {
            if last.t1 < horizon {
                events.push((last.t1, ei, prev, None));
            }
        }
    }
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut cells: BTreeMap<CellId, CellState> = ids.iter().map(|&id| (id, CellState::default())).collect();
    let mut i = 0;
    while i < events.len() {
        let t = events[i].0;
        let mut touched = BTreeSet::new();
        while i < events.len() && events[i].0 == t {
            let (_, ei, from, to) = events[i];
            let profile = &entities[ei].profile;
            if let Some(c) = from {
                let st = cells.get_mut(&c).expect("known cell");
                *st.current.entry(profile.clone()).or_default() -= 1;
                touched.insert(c);
            }
            if let Some(c) = to {
                let st = cells.get_mut(&c).expect("known cell");
                *st.current.entry(profile.clone()).or_default() += 1;
                st.ever_occupied = true;
                touched.insert(c);
            }
            i += 1;
        }
        for c in touched {
            let st = cells.get_mut(&c).expect("known cell");
            if st.changed_by(hysteresis) || t == st.open_t {
                st.close(c, t);
            }
        }
    }
    let mut intervals = Vec::new();
    for (id, mut st) in cells {
        if !st.ever_occupied {
            continue;
        }
        st.close(id, horizon);
        intervals.extend(st.done);
    }
    Ok(Activity {
        intervals,
        timelines,
        handovers,
        coverage_gap_s,
        horizon,
    })
}

impl Activity {
    /// Entities attached to `cell` at instant `t`, in entity order.
    pub fn members_at(&self, cell: CellId, t: f64) -> Vec<usize> {
        self.timelines
            .iter()
            .enumerate()
            .filter(|(_, tl)| tl.iter().any(|s| s.cell == Some(cell) && s.t0 <= t && t < s.t1))
            .map(|(i, _)| i)
            .collect()
    }

    /// Number of entities active but outside every cell at `t`.
    pub fn uncovered_at(&self, t: f64) -> usize {
        self.timelines
            .iter()
            .filter(|tl| tl.iter().any(|s| s.cell.is_none() && s.t0 <= t && t < s.t1))
            .count()
    }

    pub fn active_at(&self, t: f64) -> usize {
        self.timelines
            .iter()
            .filter(|tl| tl.iter().any(|s| s.t0 <= t && t < s.t1))
            .count()
    }
}

/// Total devices reported by the intervals covering instant `t`, over all cells.
pub fn devices_at(intervals: &[ConditionInterval], t: f64) -> u64 {
    intervals
        .iter()
        .filter(|iv| iv.t0 <= t && t < iv.t1)
        .map(ConditionInterval::total_devices)
        .sum()
}

pub const INTERVAL_CSV_HEADER: &str = "cell_id,t0_s,t1_s,counts";

pub fn intervals_to_csv(intervals: &[ConditionInterval]) -> String {
    let mut s = String::from(INTERVAL_CSV_HEADER);
    s.push('\n');
    for iv in intervals {
        let counts: Vec<String> = iv.device_counts.iter().map(|(k, v)| format!("{k}:{v}")).collect();
        let _ = writeln!(s, "{},{},{},{{{}}}", iv.cell_id, iv.t0, iv.t1, counts.join(","));
    }
    s
}

pub fn intervals_from_csv(text: &str, source: &str) -> Result<Vec<ConditionInterval>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() || (i == 0 && line == INTERVAL_CSV_HEADER) {
            continue;
        }
        let loc = || format!("{source}:{}", i + 1);
        let mut parts = line.splitn(4, ',');
        let (Some(c), Some(a), Some(b), Some(rest)) = (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(Error::parse(loc(), "expected cell_id,t0_s,t1_s,{counts}"));
        };
        let inner = rest
            .strip_prefix('{')
            .and_then(|r| r.strip_suffix('}'))
            .ok_or_else(|| Error::parse(loc(), "counts must be enclosed in braces"))?;
        let mut device_counts = BTreeMap::new();
        for kv in inner.split(',').filter(|s| !s.is_empty()) {
            let (k, v) = kv
                .split_once(':')
                .ok_or_else(|| Error::parse(loc(), format!("bad count entry {kv:?}")))?;
            device_counts.insert(k.to_string(), parse_field(v, &loc)?);
        }
        out.push(ConditionInterval {
            cell_id: parse_field(c, &loc)?,
            t0: parse_field(a, &loc)?,
            t1: parse_field(b, &loc)?,
            device_counts,
        });
    }
    Ok(out)
}

pub fn write_intervals(path: &Path, intervals: &[ConditionInterval]) -> Result<()> {
    fs::write(path, intervals_to_csv(intervals))?;
    Ok(())
}

pub fn read_intervals(path: &Path) -> Result<Vec<ConditionInterval>> {
    intervals_from_csv(&fs::read_to_string(path)?, &path.display().to_string())
}

/// Descriptive statistics of an interval list, comparable against
/// statistics observed elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityStats {
    pub interval_lengths: Vec<f64>,
    /// Total device count of every interval.
    pub occupancy: Vec<f64>,
    /// Mean over cells of interval cuts per second.
    pub cut_rate_per_s: f64,
}

impl ActivityStats {
    pub fn from_intervals(intervals: &[ConditionInterval]) -> Self {
        let mut per_cell: BTreeMap<CellId, (usize, f64, f64)> = BTreeMap::new();
        for iv in intervals {
            let e = per_cell.entry(iv.cell_id).or_insert((0, f64::INFINITY, f64::NEG_INFINITY));
            e.0 += 1;
            e.1 = e.1.min(iv.t0);
            e.2 = e.2.max(iv.t1);
        }
        let rates: Vec<f64> = per_cell.values().map(|&(n, a, b)| (n - 1) as f64 / (b - a)).collect();
        ActivityStats {
            interval_lengths: intervals.iter().map(ConditionInterval::length).collect(),
            occupancy: intervals.iter().map(|iv| iv.total_devices() as f64).collect(),
            cut_rate_per_s: if rates.is_empty() { 0.0 } else { stats::mean(&rates) },
        }
    }

    /// Per-cell occupancy histogram: device count -> seconds spent at that count.
    pub fn occupancy_histogram(intervals: &[ConditionInterval]) -> BTreeMap<CellId, BTreeMap<u64, f64>> {
        let mut h: BTreeMap<CellId, BTreeMap<u64, f64>> = BTreeMap::new();
        for iv in intervals {
            *h.entry(iv.cell_id).or_default().entry(iv.total_devices()).or_default() += iv.length();
        }
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActivityTolerances {
    pub ks: f64,
    pub mean: f64,
}

impl Default for ActivityTolerances {
    fn default() -> Self {
        ActivityTolerances { ks: 0.05, mean: 0.10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCheck {
    pub metric: String,
    pub ks_distance: Option<f64>,
    pub mean_relative_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityReport {
    pub interval_count: usize,
    pub mean_interval_length_s: f64,
    pub mean_occupancy: f64,
    pub cut_rate_per_s: f64,
    pub checks: Vec<MetricCheck>,
    pub tolerances: ActivityTolerances,
}

impl ActivityReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }
}

/// Compares simulated intervals with reference statistics. Without a
/// reference only the descriptive part is filled in.
pub fn validate_activity(
    intervals: &[ConditionInterval],
    reference: Option<&ActivityStats>,
    tol: ActivityTolerances,
) -> Result<ActivityReport> {
    if intervals.is_empty() {
        return Err(Error::domain("validate_activity needs at least one interval"));
    }
    let ours = ActivityStats::from_intervals(intervals);
    let mut checks = Vec::new();
    if let Some(r) = reference.filter(|r| !r.interval_lengths.is_empty()) {
        for (name, a, b) in [
            ("interval_length", &ours.interval_lengths, &r.interval_lengths),
            ("occupancy", &ours.occupancy, &r.occupancy),
        ] {
            let ks = stats::ks_two_sample(a, b);
            let me = rel_err(stats::mean(a), stats::mean(b));
            checks.push(MetricCheck {
                metric: name.to_string(),
                ks_distance: Some(ks),
                mean_relative_error: me,
                pass: ks <= tol.ks && me <= tol.mean,
            });
        }
        let me = rel_err(ours.cut_rate_per_s, r.cut_rate_per_s);
        checks.push(MetricCheck {
            metric: "cut_rate".to_string(),
            ks_distance: None,
            mean_relative_error: me,
            pass: me <= tol.mean,
        });
    }
    Ok(ActivityReport {
        interval_count: intervals.len(),
        mean_interval_length_s: stats::mean(&ours.interval_lengths),
        mean_occupancy: stats::mean(&ours.occupancy),
        cut_rate_per_s: ours.cut_rate_per_s,
        checks,
        tolerances: tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn site(id: CellId, x: f64, y: f64, r: f64) -> CellSite {
        CellSite {
            cell_id: id,
            x,
            y,
            radius_m: r,
            radio: RadioConfig::default(),
            channel: ChannelConfig::default(),
            mac: MacConfig::default(),
        }
    }

    fn parked(id: &str, x: f64, y: f64) -> MobileEntity {
        MobileEntity {
            entity_id: id.into(),
            profile: "car".into(),
            route: vec![Waypoint { x, y, t: 0.0 }],
            active: None,
        }
    }

    fn mover(id: &str, from: (f64, f64), to: (f64, f64), t_end: f64) -> MobileEntity {
        MobileEntity {
            entity_id: id.into(),
            profile: "car".into(),
            route: vec![
                Waypoint { x: from.0, y: from.1, t: 0.0 },
                Waypoint { x: to.0, y: to.1, t: t_end },
            ],
            active: None,
        }
    }

    #[test]
    fn assignment_rules() {
        let sites = vec![site(2, 0.0, 0.0, 100.0), site(1, 100.0, 0.0, 100.0)];
        assert_eq!(assign_cell(&sites, 0.0, 0.0), Some(2));
        assert_eq!(assign_cell(&sites, 100.0, 0.0), Some(1));
        assert_eq!(assign_cell(&sites, 50.0, 0.0), Some(1));
        assert_eq!(assign_cell(&sites, 50.0, 500.0), None);
        assert_eq!(assign_cell(&[], 0.0, 0.0), None);
    }

    #[test]
    fn static_entities_one_interval_per_occupied_cell() {
        let sites = vec![site(1, 0.0, 0.0, 100.0), site(2, 1000.0, 0.0, 100.0), site(3, 5000.0, 0.0, 10.0)];
        let ents = vec![parked("a", 10.0, 0.0), parked("b", 990.0, 0.0), parked("c", 0.0, 5.0)];
        let act = simulate_activity(&sites, &ents, 60.0, 1).unwrap();
        assert_eq!(act.intervals.len(), 2);
        assert_eq!(act.intervals[0].device_counts["car"], 2);
        assert_eq!((act.intervals[0].t0, act.intervals[0].t1), (0.0, 60.0));
        assert_eq!(act.intervals[1].cell_id, 2);
    }

    #[test]
    fn twenty_cars_in_one_cell() {
        let sites = vec![site(7, 0.0, 0.0, 200.0)];
        let ents: Vec<_> = (0..20).map(|i| parked(&format!("car{i}"), i as f64, 0.0)).collect();
        let act = simulate_activity(&sites, &ents, 5.0, 1).unwrap();
        assert_eq!(act.intervals.len(), 1);
        assert_eq!(act.intervals[0].device_counts["car"], 20);
        assert_eq!(act.intervals[0].length(), 5.0);
    }

    #[test]
    fn handover_splits_both_cells_at_crossing() {
        let sites = vec![site(1, 0.0, 0.0, 100.0), site(2, 150.0, 0.0, 100.0)];
        // 10 m/s from x=-50 to x=250: bisector at x=75 reached at t=12.5
        let ents = vec![mover("bus", (-50.0, 0.0), (250.0, 0.0), 30.0)];
        let act = simulate_activity(&sites, &ents, 30.0, 1).unwrap();
        let a: Vec<_> = act.intervals.iter().filter(|i| i.cell_id == 1).collect();
        let b: Vec<_> = act.intervals.iter().filter(|i| i.cell_id == 2).collect();
        assert_eq!(a.len(), 2);
        assert_eq!(b.len(), 2);
        assert!((a[0].t1 - 12.5).abs() < 1e-9);
        assert!((b[0].t1 - 12.5).abs() < 1e-9);
        assert_eq!(a[0].device_counts["car"], 1);
        assert!(a[1].device_counts.is_empty());
        assert_eq!(act.handovers, 1);
        for t in [0.0, 5.0, 12.5, 20.0, 29.9] {
            assert_eq!(devices_at(&act.intervals, t) as usize + act.uncovered_at(t), act.active_at(t));
        }
    }

    #[test]
    fn coverage_gap_is_tracked() {
        let sites = vec![site(1, 0.0, 0.0, 50.0)];
        // leaves coverage at x = 50 (t = 5) and keeps going
        let ents = vec![mover("a", (0.0, 0.0), (100.0, 0.0), 10.0)];
        let act = simulate_activity(&sites, &ents, 10.0, 1).unwrap();
        assert!((act.coverage_gap_s - 5.0).abs() < 1e-9);
        assert_eq!(act.uncovered_at(7.0), 1);
    }

    #[test]
    fn hysteresis_suppresses_small_changes() {
        let sites = vec![site(1, 0.0, 0.0, 100.0)];
        let mut ents: Vec<_> = (0..3).map(|i| parked(&format!("p{i}"), 0.0, 0.0)).collect();
        // leave one at a time at t = 10, 20
        for (i, t) in [(0, 10.0), (1, 20.0)] {
            ents[i].active = Some([0.0, t]);
        }
        let h1 = simulate_activity(&sites, &ents, 30.0, 1).unwrap();
        assert_eq!(h1.intervals.len(), 3);
        let h2 = simulate_activity(&sites, &ents, 30.0, 2).unwrap();
        assert_eq!(h2.intervals.len(), 2);
        assert_eq!(h2.intervals[0].device_counts["car"], 3);
        assert_eq!(h2.intervals[1].t0, 20.0);
        assert_eq!(h2.intervals[1].device_counts["car"], 1);
    }

    #[test]
    fn invalid_inputs() {
        let sites = vec![site(1, 0.0, 0.0, 100.0), site(1, 5.0, 0.0, 100.0)];
        assert!(simulate_activity(&sites, &[], 10.0, 1).is_err());
        let sites = vec![site(1, 0.0, 0.0, 100.0)];
        assert!(simulate_activity(&sites, &[], 0.0, 1).is_err());
        assert!(simulate_activity(&sites, &[], 10.0, 0).is_err());
        let mut e = mover("a", (0.0, 0.0), (1.0, 0.0), 1.0);
        e.route[1].t = 0.0;
        assert!(simulate_activity(&sites, &[e], 10.0, 1).is_err());
    }

    #[test]
    fn route_beyond_horizon_is_truncated() {
        let sites = vec![site(1, 0.0, 0.0, 100.0)];
        let ents = vec![mover("a", (0.0, 0.0), (10.0, 0.0), 1000.0)];
        let act = simulate_activity(&sites, &ents, 50.0, 1).unwrap();
        assert_eq!(act.intervals.len(), 1);
        assert_eq!(act.intervals[0].t1, 50.0);
    }

    fn corridor(speed: f64) -> (Vec<CellSite>, Vec<MobileEntity>) {
        let sites: Vec<_> = (0..40).map(|i| site(i, i as f64 * 200.0, 0.0, 100.0)).collect();
        let ents = (0..8)
            .map(|k| {
                let x0 = -100.0 + 37.0 * k as f64;
                let len = 8000.0;
                mover(&format!("v{k}"), (x0, 0.0), (x0 + len, 0.0), len / speed)
            })
            .collect();
        (sites, ents)
    }

    /// Entities circling square loops over a 4x4 grid of cells, for many laps.
    fn loops(speed: f64, laps: usize) -> (Vec<CellSite>, Vec<MobileEntity>) {
        let sites: Vec<_> = (0..16)
            .map(|i| site(i, (i % 4) as f64 * 200.0, (i / 4) as f64 * 200.0, 150.0))
            .collect();
        let ents = (0..12)
            .map(|k| {
                let (ox, oy) = (13.0 * k as f64, 29.0 * (k % 5) as f64);
                let side = 300.0 + 20.0 * k as f64;
                let corners = [(0.0, 0.0), (side, 0.0), (side, side), (0.0, side)];
                let mut route = Vec::new();
                let mut t = -(k as f64) * 7.0;
                for lap in 0..laps {
                    for (j, c) in corners.iter().enumerate() {
                        if lap > 0 || j > 0 {
                            t += side / speed;
                        }
                        route.push(Waypoint { x: ox + c.0, y: oy + c.1, t });
                    }
                }
                MobileEntity { entity_id: format!("l{k}"), profile: "car".into(), route, active: None }
            })
            .collect();
        (sites, ents)
    }

    #[test]
    fn doubling_speed_halves_interval_length() {
        let horizon = 3600.0;
        let (s, slow) = loops(10.0, 40);
        let (_, fast) = loops(20.0, 80);
        let a = simulate_activity(&s, &slow, horizon, 1).unwrap();
        let b = simulate_activity(&s, &fast, horizon, 1).unwrap();
        let ra = validate_activity(&a.intervals, None, ActivityTolerances::default()).unwrap();
        let rb = validate_activity(&b.intervals, None, ActivityTolerances::default()).unwrap();
        let ratio = rb.mean_interval_length_s / ra.mean_interval_length_s;
        assert!((ratio - 0.5).abs() / 0.5 < 0.05, "ratio {ratio}");
    }

    #[test]
    fn validation_against_self_and_impossible_reference() {
        let (s, e) = corridor(10.0);
        let act = simulate_activity(&s, &e, 200.0, 1).unwrap();
        let me = ActivityStats::from_intervals(&act.intervals);
        let rep = validate_activity(&act.intervals, Some(&me), ActivityTolerances::default()).unwrap();
        assert_eq!(rep.checks.len(), 3);
        assert!(rep.pass());
        assert!(rep.checks.iter().all(|c| c.ks_distance.unwrap_or(0.0) == 0.0));

        let mut bad = me.clone();
        bad.occupancy = vec![1e6; bad.occupancy.len()];
        let rep = validate_activity(&act.intervals, Some(&bad), ActivityTolerances::default()).unwrap();
        let occ = rep.checks.iter().find(|c| c.metric == "occupancy").unwrap();
        assert!(!occ.pass);
        assert!(!rep.pass());

        let empty = ActivityStats { interval_lengths: vec![], occupancy: vec![], cut_rate_per_s: 0.0 };
        let rep = validate_activity(&act.intervals, Some(&empty), ActivityTolerances::default()).unwrap();
        assert!(rep.checks.is_empty());
        assert!(validate_activity(&[], None, ActivityTolerances::default()).is_err());
    }

    #[test]
    fn interval_csv_round_trip() {
        let ivs = vec![
            ConditionInterval {
                cell_id: 3,
                t0: 0.0,
                t1: 1.25,
                device_counts: BTreeMap::from([("bus".into(), 2), ("car".into(), 20)]),
            },
            ConditionInterval { cell_id: 3, t0: 1.25, t1: 7.0, device_counts: BTreeMap::new() },
        ];
        let text = intervals_to_csv(&ivs);
        assert!(text.contains("3,0,1.25,{bus:2,car:20}"));
        assert_eq!(intervals_from_csv(&text, "mem").unwrap(), ivs);
        assert!(intervals_from_csv("1,0,1,car:2\n", "mem").is_err());
    }
}
