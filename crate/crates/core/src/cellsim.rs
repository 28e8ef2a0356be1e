//! Detailed single-cell uplink simulator and parameter-sweep harness.
//!
//! Devices are placed once per run, draw a LOS state and a shadowing value,
//! then emit packets according to their traffic profile. Head-of-line packets
//! of all backlogged devices share the air interface under egalitarian
//! processor sharing; each device serves its own queue FIFO. The service rate
//! of a packet is fixed when its transmission starts, from a fresh small-scale
//! fading draw.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{self, ChannelConfig, LosModel, LosState, RadioConfig};
use crate::error::{Error, Result};
use crate::seed::Seed;
use crate::traffic::TrafficProfile;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Placement {
    /// Uniform over the disc of the cell radius.
    UniformDisk,
    /// Every device at the same ground distance from the site.
    FixedDistance { distance_m: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MacConfig {
    /// Packets whose SNR at transmission start is below this are lost (dB).
    pub outage_threshold_db: f64,
    /// Packets that waited longer than this before transmission are dropped (s).
    pub delay_budget_s: f64,
    /// bit/s/Hz
    pub spectral_efficiency_cap: f64,
    pub placement: Placement,
}

impl Default for MacConfig {
    fn default() -> Self {
        MacConfig {
            outage_threshold_db: -5.0,
            delay_budget_s: 1.0,
            spectral_efficiency_cap: 7.4,
            placement: Placement::UniformDisk,
        }
    }
}

/// The conditions of one cell, held constant for one simulation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellConditions {
    /// Profile name to number of active devices.
    pub device_counts: BTreeMap<String, u32>,
    pub profiles: Vec<TrafficProfile>,
    pub cell_radius_m: f64,
    #[serde(default)]
    pub radio: RadioConfig,
    #[serde(default)]
    pub channel: ChannelConfig,
    #[serde(default)]
    pub mac: MacConfig,
}

impl CellConditions {
    pub fn profile(&self, name: &str) -> Option<&TrafficProfile> {
        self.profiles.iter().find(|p| p.name == name)
    }

    pub fn total_devices(&self) -> u64 {
        self.device_counts.values().map(|&c| u64::from(c)).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cell_radius_m > 0.0) {
            return Err(Error::domain("cell_radius_m must be > 0"));
        }
        for p in &self.profiles {
            p.validate()?;
        }
        for name in self.device_counts.keys() {
            if self.profile(name).is_none() {
                return Err(Error::Config(format!("device count refers to unknown profile {name:?}")));
            }
        }
        self.radio.validate()?;
        self.channel.validate()?;
        if let Placement::FixedDistance { distance_m } = self.mac.placement {
            if !(distance_m >= 0.0) {
                return Err(Error::domain("fixed placement distance must be >= 0"));
            }
        }
        if !(self.mac.spectral_efficiency_cap > 0.0) || !(self.mac.delay_budget_s > 0.0) {
            return Err(Error::domain("spectral efficiency cap and delay budget must be > 0"));
        }
        Ok(())
    }

    /// Shannon rate at the given SNR, capped at the configured spectral efficiency.
    pub fn service_rate_bps(&self, snr_db: f64) -> f64 {
        let se = (1.0 + channel::db_to_linear(snr_db)).log2();
        self.radio.bandwidth_hz * se.min(self.mac.spectral_efficiency_cap)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacketRecord {
    pub packet_id: u64,
    pub device_id: u32,
    pub profile: String,
    pub created_at_s: f64,
    /// End-to-end delay in ms, `None` when dropped.
    pub delay_ms: Option<f64>,
    pub dropped: bool,
    /// Packet bits over transmission time; 0 when dropped.
    pub throughput_bps: f64,
    pub snr_db: f64,
}

struct Device {
    profile: usize,
    los: LosState,
    /// Large-scale loss (path loss + shadowing + extra losses).
    path_loss_db: f64,
    fading: crate::seed::SeedStream,
    queue: VecDeque<usize>,
    head: Option<InService>,
}

struct InService {
    packet: usize,
    remaining_bits: f64,
    rate_bps: f64,
    started_at: f64,
    snr_db: f64,
}

struct Arrival {
    time: f64,
    device: u32,
}

fn place_device<R: Rng + ?Sized>(cond: &CellConditions, rng: &mut R) -> f64 {
    match cond.mac.placement {
        Placement::UniformDisk => cond.cell_radius_m * rng.random::<f64>().sqrt(),
        Placement::FixedDistance { distance_m } => distance_m,
    }
}

/// Simulates one cell for `duration_s` of arrivals and drains the queues.
///
/// Records are returned in creation order. Every generated packet is either
/// delivered or dropped.
pub fn run_cell(conditions: &CellConditions, duration_s: f64, seed: u64) -> Result<Vec<PacketRecord>> {
    if !(duration_s > 0.0) || !duration_s.is_finite() {
        return Err(Error::domain(format!("duration must be > 0, got {duration_s}")));
    }
    conditions.validate()?;
    let root = Seed::new(seed);

    let mut devices = Vec::new();
    let mut arrivals = Vec::new();
    for (name, &count) in &conditions.device_counts {
        let pidx = conditions
            .profiles
            .iter()
            .position(|p| &p.name == name)
            .expect("validated");
        let profile = &conditions.profiles[pidx];
        for _ in 0..count {
            let id = devices.len() as u32;
            let dseed = root.child_label("device").child(u64::from(id));
            let mut rng = dseed.child_label("placement").rng();
            let ground = place_device(conditions, &mut rng);
            let dist = conditions.radio.distance_3d(ground).max(1e-3);
            let los = conditions.channel.los.sample(ground, &mut rng);
            let shadow = channel::sample_shadowing(conditions.channel.model(los).sigma(), &mut rng);
            let path_loss_db = conditions.channel.total_path_loss(
                conditions.radio.carrier_frequency_hz,
                dist,
                los,
                shadow,
            )?;
            let mut arng = dseed.child_label("arrivals").rng();
            let phase = profile.draw_phase(&mut arng);
            arrivals.extend(
                profile
                    .device_arrivals(phase, 0.0, duration_s, &mut arng)
                    .into_iter()
                    .map(|time| Arrival { time, device: id }),
            );
            devices.push(Device {
                profile: pidx,
                los,
                path_loss_db,
                fading: dseed.child_label("fading").rng(),
                queue: VecDeque::new(),
                head: None,
            });
        }
    }
    arrivals.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.device.cmp(&b.device)));

    let mut records: Vec<PacketRecord> = arrivals
        .iter()
        .enumerate()
        .map(|(i, a)| PacketRecord {
            packet_id: i as u64,
            device_id: a.device,
            profile: conditions.profiles[devices[a.device as usize].profile].name.clone(),
            created_at_s: a.time,
            delay_ms: None,
            dropped: false,
            throughput_bps: 0.0,
            snr_db: f64::NAN,
        })
        .collect();

    let mut sim = Processor {
        cond: conditions,
        devices,
        records: &mut records,
        busy: Vec::new(),
        now: 0.0,
    };
    let mut next = 0;
    loop {
        let completion = sim.next_completion();
        let arrival = arrivals.get(next).map(|a| a.time);
        match (completion, arrival) {
            (None, None) => break,
            (Some((t, dev)), a) if a.is_none_or(|ta| t <= ta) => {
                sim.advance(t);
                sim.complete(dev);
            }
            (_, Some(t)) => {
                sim.advance(t);
                let dev = arrivals[next].device as usize;
                sim.devices[dev].queue.push_back(next);
                if sim.devices[dev].head.is_none() {
                    sim.start_next(dev);
                }
                next += 1;
            }
            (Some(_), None) => unreachable!(),
        }
    }
    Ok(records)
}

struct Processor<'a> {
    cond: &'a CellConditions,
    devices: Vec<Device>,
    records: &'a mut Vec<PacketRecord>,
    /// Devices with a packet in service, in order of service start.
    busy: Vec<usize>,
    now: f64,
}

impl Processor<'_> {
    fn share(&self) -> f64 {
        self.busy.len() as f64
    }

    fn next_completion(&self) -> Option<(f64, usize)> {
        let k = self.share();
        self.busy
            .iter()
            .map(|&d| {
                let h = self.devices[d].head.as_ref().expect("busy device has a head");
                (self.now + h.remaining_bits * k / h.rate_bps, d)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }

    fn advance(&mut self, t: f64) {
        let dt = t - self.now;
        if dt > 0.0 {
            let k = self.share();
            for &d in &self.busy {
                let h = self.devices[d].head.as_mut().expect("busy device has a head");
                h.remaining_bits = (h.remaining_bits - h.rate_bps / k * dt).max(0.0);
            }
        }
        self.now = t;
    }

    fn complete(&mut self, dev: usize) {
        let h = self.devices[dev].head.take().expect("completing device has a head");
        self.busy.retain(|&d| d != dev);
        let rec = &mut self.records[h.packet];
        let tx_time = self.now - h.started_at;
        rec.delay_ms = Some((self.now - rec.created_at_s) * 1e3);
        rec.throughput_bps = if tx_time > 0.0 {
            self.cond.profiles[self.devices[dev].profile].packet_bits() / tx_time
        } else {
            h.rate_bps
        };
        rec.snr_db = h.snr_db;
        self.start_next(dev);
    }

    /// Pops packets until one enters service or the queue is empty.
    fn start_next(&mut self, dev: usize) {
        let cond = self.cond;
        while let Some(pkt) = self.devices[dev].queue.pop_front() {
            let d = &mut self.devices[dev];
            let fading = channel::sample_fading(d.los, cond.channel.rice_k_db, &mut d.fading);
            let snr = channel::link_snr(&cond.radio, d.path_loss_db, fading);
            let rec = &mut self.records[pkt];
            rec.snr_db = snr;
            let waited = self.now - rec.created_at_s;
            if waited > cond.mac.delay_budget_s || snr < cond.mac.outage_threshold_db {
                rec.dropped = true;
                continue;
            }
            d.head = Some(InService {
                packet: pkt,
                remaining_bits: cond.profiles[d.profile].packet_bits(),
                rate_bps: cond.service_rate_bps(snr),
                started_at: self.now,
                snr_db: snr,
            });
            self.busy.push(dev);
            return;
        }
    }
}

/// A dimension of the cell-condition space.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Axis {
    DeviceCount(String),
    PacketRate(String),
    PacketSize(String),
    CellRadius,
    LosFraction,
    TxPower,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Axis::DeviceCount(p) => write!(f, "devices:{p}"),
            Axis::PacketRate(p) => write!(f, "rate:{p}"),
            Axis::PacketSize(p) => write!(f, "size:{p}"),
            Axis::CellRadius => f.write_str("radius_m"),
            Axis::LosFraction => f.write_str("los_fraction"),
            Axis::TxPower => f.write_str("tx_power_dbm"),
        }
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let profile = |p: &str| -> Result<String> {
            if p.is_empty() {
                Err(Error::Config(format!("axis {s:?} names no profile")))
            } else {
                Ok(p.to_string())
            }
        };
        match s.split_once(':') {
            Some(("devices", p)) => Ok(Axis::DeviceCount(profile(p)?)),
            Some(("rate", p)) => Ok(Axis::PacketRate(profile(p)?)),
            Some(("size", p)) => Ok(Axis::PacketSize(profile(p)?)),
            None if s == "radius_m" => Ok(Axis::CellRadius),
            None if s == "los_fraction" => Ok(Axis::LosFraction),
            None if s == "tx_power_dbm" => Ok(Axis::TxPower),
            _ => Err(Error::Config(format!("unknown condition axis {s:?}"))),
        }
    }
}

impl Serialize for Axis {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Axis {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Mean P(LOS) for a device uniformly placed in a disc of radius `r`.
fn mean_p_los(model: &LosModel, radius: f64) -> f64 {
    match *model {
        LosModel::Fixed { p_los } => p_los,
        LosModel::Exponential { decay_m } => {
            let x = radius / decay_m;
            2.0 / (x * x) * (1.0 - (-x).exp() * (1.0 + x))
        }
    }
}

impl Axis {
    fn profile_mut<'a>(&self, cond: &'a mut CellConditions, name: &str) -> Result<&'a mut TrafficProfile> {
        cond.profiles
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::Config(format!("axis {self} refers to unknown profile")))
    }

    /// Sets this dimension of `cond` to `value`.
    pub fn apply(&self, cond: &mut CellConditions, value: f64) -> Result<()> {
        match self {
            Axis::DeviceCount(p) => {
                if !(value >= 0.0) || value.fract() != 0.0 {
                    return Err(Error::domain(format!("{self} must be a non-negative integer")));
                }
                self.profile_mut(cond, p)?;
                cond.device_counts.insert(p.clone(), value as u32);
            }
            Axis::PacketRate(p) => self.profile_mut(cond, p)?.packet_rate = value,
            Axis::PacketSize(p) => self.profile_mut(cond, p)?.packet_size_bytes = value.round() as u32,
            Axis::CellRadius => cond.cell_radius_m = value,
            Axis::LosFraction => cond.channel.los = LosModel::Fixed { p_los: value },
            Axis::TxPower => cond.radio.tx_power_dbm = value,
        }
        Ok(())
    }

    /// Reads this dimension from `cond`.
    pub fn extract(&self, cond: &CellConditions) -> f64 {
        match self {
            Axis::DeviceCount(p) => f64::from(cond.device_counts.get(p).copied().unwrap_or(0)),
            Axis::PacketRate(p) => cond.profile(p).map_or(f64::NAN, |x| x.packet_rate),
            Axis::PacketSize(p) => cond.profile(p).map_or(f64::NAN, |x| f64::from(x.packet_size_bytes)),
            Axis::CellRadius => cond.cell_radius_m,
            Axis::LosFraction => mean_p_los(&cond.channel.los, cond.cell_radius_m),
            Axis::TxPower => cond.radio.tx_power_dbm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridAxis {
    pub axis: Axis,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub base: CellConditions,
    pub axes: Vec<GridAxis>,
    #[serde(default = "one")]
    pub replications: u32,
    #[serde(default)]
    pub seed_base: u64,
}

fn one() -> u32 {
    1
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        if self.replications < 1 {
            return Err(Error::Config("replications must be >= 1".into()));
        }
        for (i, a) in self.axes.iter().enumerate() {
            if a.values.is_empty() {
                return Err(Error::Config(format!("axis {} has no values", a.axis)));
            }
            if self.axes[..i].iter().any(|b| b.axis == a.axis) {
                return Err(Error::Config(format!("axis {} listed twice", a.axis)));
            }
        }
        Ok(())
    }

    pub fn point_count(&self) -> usize {
        self.axes.iter().map(|a| a.values.len()).product()
    }

    /// Axis values of grid point `index`, row-major with the last axis fastest.
    pub fn point(&self, mut index: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.axes.len()];
        for (slot, a) in out.iter_mut().zip(&self.axes).rev() {
            *slot = a.values[index % a.values.len()];
            index /= a.values.len();
        }
        out
    }

    pub fn conditions_at(&self, values: &[f64]) -> Result<CellConditions> {
        let mut c = self.base.clone();
        for (a, &v) in self.axes.iter().zip(values) {
            a.axis.apply(&mut c, v)?;
        }
        Ok(c)
    }

    pub fn run_seed(&self, point: usize, replication: u32) -> u64 {
        Seed::new(self.seed_base)
            .child(point as u64)
            .child(u64::from(replication))
            .value()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub index: usize,
    pub values: Vec<f64>,
    /// Number of `run_cell` invocations behind `records`.
    pub runs: u32,
    pub records: Vec<PacketRecord>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepDataset {
    pub axes: Vec<Axis>,
    pub points: Vec<SweepPoint>,
}

fn run_point(grid: &SweepGrid, index: usize, duration_s: f64) -> SweepPoint {
    let values = grid.point(index);
    let mut point = SweepPoint {
        index,
        values: values.clone(),
        runs: 0,
        records: Vec::new(),
        error: None,
    };
    let cond = match grid.conditions_at(&values) {
        Ok(c) => c,
        Err(e) => {
            point.error = Some(e.to_string());
            return point;
        }
    };
    for rep in 0..grid.replications {
        point.runs += 1;
        match run_cell(&cond, duration_s, grid.run_seed(index, rep)) {
            Ok(recs) => {
                let offset = point.records.len() as u64;
                point.records.extend(recs.into_iter().map(|mut r| {
                    r.packet_id += offset;
                    r
                }));
            }
            Err(e) => {
                point.error = Some(e.to_string());
                point.records.clear();
                break;
            }
        }
    }
    point
}

/// Runs every grid point `replications` times. Replications of a point are
/// concatenated with packet ids renumbered. Failing points are recorded with
/// their error and do not abort the sweep. `workers` bounds the thread count.
pub fn run_sweep(grid: &SweepGrid, duration_s: f64, workers: Option<usize>) -> Result<SweepDataset> {
    grid.validate()?;
    if !(duration_s > 0.0) {
        return Err(Error::domain(format!("duration must be > 0, got {duration_s}")));
    }
    let work = || -> Vec<SweepPoint> {
        (0..grid.point_count())
            .into_par_iter()
            .map(|i| run_point(grid, i, duration_s))
            .collect()
    };
    let points = match workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::Config(e.to_string()))?
            .install(work),
        None => work(),
    };
    Ok(SweepDataset {
        axes: grid.axes.iter().map(|a| a.axis.clone()).collect(),
        points,
    })
}

pub const PACKET_CSV_HEADER: &str =
    "packet_id,device_id,profile,created_at_s,delay_ms,dropped,throughput_bps,snr_db";

pub fn format_packet_row(r: &PacketRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{}",
        r.packet_id,
        r.device_id,
        r.profile,
        r.created_at_s,
        r.delay_ms.map(|d| d.to_string()).unwrap_or_default(),
        u8::from(r.dropped),
        r.throughput_bps,
        r.snr_db
    )
}

pub(crate) fn parse_field<T: FromStr>(s: &str, loc: &dyn Fn() -> String) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::parse(loc(), format!("cannot parse {s:?}")))
}

pub(crate) fn parse_bool(s: &str, loc: &dyn Fn() -> String) -> Result<bool> {
    match s.trim() {
        "1" | "true" => Ok(true),
        "0" | "false" => Ok(false),
        other => Err(Error::parse(loc(), format!("expected 0/1, got {other:?}"))),
    }
}

pub fn parse_packet_row(line: &str, loc: &dyn Fn() -> String) -> Result<PacketRecord> {
    let f: Vec<&str> = line.split(',').collect();
    if f.len() != 8 {
        return Err(Error::parse(loc(), format!("expected 8 fields, got {}", f.len())));
    }
    Ok(PacketRecord {
        packet_id: parse_field(f[0], loc)?,
        device_id: parse_field(f[1], loc)?,
        profile: f[2].to_string(),
        created_at_s: parse_field(f[3], loc)?,
        delay_ms: if f[4].is_empty() { None } else { Some(parse_field(f[4], loc)?) },
        dropped: parse_bool(f[5], loc)?,
        throughput_bps: parse_field(f[6], loc)?,
        snr_db: parse_field(f[7], loc)?,
    })
}

fn point_file(index: usize) -> String {
    format!("point_{index:05}.csv")
}

fn sanitize(msg: &str) -> String {
    msg.replace([',', '\n', '\r'], " ")
}

impl SweepDataset {
    pub fn point_key(&self, point: &SweepPoint) -> Vec<(String, f64)> {
        self.axes.iter().map(|a| a.to_string()).zip(point.values.iter().copied()).collect()
    }

    /// Writes `index.csv` plus one CSV file per grid point into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<Vec<String>> {
        fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let mut index = BufWriter::new(fs::File::create(dir.join("index.csv"))?);
        let axis_cols: Vec<String> = self.axes.iter().map(|a| a.to_string()).collect();
        write!(index, "point,file,runs,status")?;
        for c in &axis_cols {
            write!(index, ",{c}")?;
        }
        writeln!(index)?;
        for p in &self.points {
            let name = point_file(p.index);
            let status = match &p.error {
                None => "ok".to_string(),
                Some(e) => format!("failed: {}", sanitize(e)),
            };
            write!(index, "{},{},{},{}", p.index, name, p.runs, status)?;
            for v in &p.values {
                write!(index, ",{v}")?;
            }
            writeln!(index)?;

            let mut w = BufWriter::new(fs::File::create(dir.join(&name))?);
            writeln!(w, "# point={}", p.index)?;
            writeln!(w, "# runs={}", p.runs)?;
            for (k, v) in self.point_key(p) {
                writeln!(w, "# {k}={v}")?;
            }
            writeln!(w, "{PACKET_CSV_HEADER}")?;
            for r in &p.records {
                writeln!(w, "{}", format_packet_row(r))?;
            }
            w.flush()?;
            written.push(name);
        }
        index.flush()?;
        written.insert(0, "index.csv".to_string());
        Ok(written)
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let index_path = dir.join("index.csv");
        let text = fs::read_to_string(&index_path)?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::parse(index_path.display().to_string(), "empty index"))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 4 || cols[..4] != ["point", "file", "runs", "status"] {
            return Err(Error::parse(format!("{}:1", index_path.display()), "bad index header"));
        }
        let axes = cols[4..].iter().map(|c| c.parse()).collect::<Result<Vec<Axis>>>()?;
        let mut points = Vec::new();
        for (ln, line) in lines.enumerate() {
            let loc = || format!("{}:{}", index_path.display(), ln + 2);
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 + axes.len() {
                return Err(Error::parse(loc(), "wrong field count"));
            }
            let index: usize = parse_field(f[0], &loc)?;
            let runs: u32 = parse_field(f[2], &loc)?;
            let values = f[4..].iter().map(|v| parse_field(v, &loc)).collect::<Result<Vec<f64>>>()?;
            let error = f[3].strip_prefix("failed: ").map(str::to_string);
            let records = read_point_file(&dir.join(f[1]))?;
            points.push(SweepPoint {
                index,
                values,
                runs,
                records,
                error,
            });
        }
        Ok(SweepDataset { axes, points })
    }
}

fn read_point_file(path: &Path) -> Result<Vec<PacketRecord>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (ln, line) in reader.lines().enumerate() {
        let line = line?;
        if line.starts_with('#') || line == PACKET_CSV_HEADER || line.is_empty() {
            continue;
        }
        let loc = || format!("{}:{}", path.display(), ln + 1);
        out.push(parse_packet_row(&line, &loc)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{CiModelParams, PathLossModel};
    use crate::traffic::Regime;

    pub(crate) fn base_conditions(devices: u32) -> CellConditions {
        CellConditions {
            device_counts: BTreeMap::from([("car".to_string(), devices)]),
            profiles: vec![TrafficProfile::new("car", 1.0, 1500, Regime::Poisson)],
            cell_radius_m: 150.0,
            radio: RadioConfig::default(),
            channel: ChannelConfig::default(),
            mac: MacConfig::default(),
        }
    }

    #[test]
    fn zero_devices_is_empty() {
        let c = base_conditions(0);
        assert!(run_cell(&c, 10.0, 1).unwrap().is_empty());
    }

    #[test]
    fn bad_duration_rejected() {
        let c = base_conditions(1);
        assert!(matches!(run_cell(&c, 0.0, 1), Err(Error::Domain(_))));
        assert!(run_cell(&c, -1.0, 1).is_err());
    }

    #[test]
    fn deterministic_given_seed() {
        let c = base_conditions(5);
        let a = run_cell(&c, 50.0, 7).unwrap();
        let b = run_cell(&c, 50.0, 7).unwrap();
        let fmt = |v: &[PacketRecord]| v.iter().map(format_packet_row).collect::<Vec<_>>().join("\n");
        assert_eq!(fmt(&a), fmt(&b));
        let other = run_cell(&c, 50.0, 8).unwrap();
        assert_ne!(fmt(&a), fmt(&other));
    }

    #[test]
    fn conservation_and_delay_lower_bound() {
        let mut c = base_conditions(30);
        c.profiles[0].packet_rate = 20.0;
        c.radio.tx_power_dbm = 0.0;
        let recs = run_cell(&c, 20.0, 3).unwrap();
        assert!(!recs.is_empty());
        let mut dropped = 0;
        for r in &recs {
            assert_eq!(r.dropped, r.delay_ms.is_none());
            if r.dropped {
                dropped += 1;
                continue;
            }
            let uncapped = c.radio.bandwidth_hz * (1.0 + channel::db_to_linear(r.snr_db)).log2();
            let lower = 1500.0 * 8.0 / uncapped * 1e3;
            assert!(r.delay_ms.unwrap() >= lower * (1.0 - 1e-9));
        }
        assert_eq!(recs.len(), recs.iter().filter(|r| !r.dropped).count() + dropped);
        assert!(recs.windows(2).all(|w| w[0].packet_id + 1 == w[1].packet_id));
    }

    #[test]
    fn outage_threshold_drops_low_snr() {
        let mut c = base_conditions(3);
        c.radio.tx_power_dbm = -80.0;
        let recs = run_cell(&c, 20.0, 1).unwrap();
        assert!(!recs.is_empty());
        assert!(recs.iter().all(|r| r.dropped && r.snr_db < -5.0));
    }

    #[test]
    fn single_device_light_load() {
        // One Poisson device at 1 pkt/s: count ~ Poisson(1000), sd ~ 31.6.
        let mut c = base_conditions(1);
        c.radio.tx_power_dbm = 10.0;
        c.channel.los = LosModel::Fixed { p_los: 1.0 };
        let recs = run_cell(&c, 1000.0, 12).unwrap();
        let delivered = recs.iter().filter(|r| !r.dropped).count() as f64;
        assert!((delivered - 1000.0).abs() <= 3.0 * 1000f64.sqrt());
        let drop_rate = recs.iter().filter(|r| r.dropped).count() as f64 / recs.len() as f64;
        assert!(drop_rate < 0.01);
    }

    #[test]
    fn outage_probability_matches_channel_monte_carlo() {
        // Brute-force the per-packet outage probability from the channel alone
        // and compare with the simulator's drop rate in a lightly loaded cell.
        let mut c = base_conditions(200);
        c.radio.tx_power_dbm = -25.0;
        c.profiles[0].packet_rate = 0.2;
        let recs = run_cell(&c, 200.0, 5).unwrap();
        let sim_rate = recs.iter().filter(|r| r.dropped).count() as f64 / recs.len() as f64;

        let mut rng = Seed::new(99).rng();
        let trials = 200_000;
        let mut out = 0;
        for _ in 0..trials {
            let ground = c.cell_radius_m * rng.random::<f64>().sqrt();
            let d = c.radio.distance_3d(ground);
            let los = c.channel.los.sample(ground, &mut rng);
            let sh = channel::sample_shadowing(c.channel.model(los).sigma(), &mut rng);
            let pl = c.channel.total_path_loss(c.radio.carrier_frequency_hz, d, los, sh).unwrap();
            let fad = channel::sample_fading(los, c.channel.rice_k_db, &mut rng);
            if channel::link_snr(&c.radio, pl, fad) < c.mac.outage_threshold_db {
                out += 1;
            }
        }
        let mc = out as f64 / trials as f64;
        assert!(mc > 0.02 && mc < 0.98, "choose a config with non-trivial outage, got {mc}");
        // 200 devices: the placement draw dominates the spread
        assert!((sim_rate - mc).abs() < 0.08, "sim {sim_rate} mc {mc}");
    }

    #[test]
    fn md1_mean_wait() {
        // Deterministic service, Poisson arrivals, rho = 0.5.
        let mut c = base_conditions(1);
        let pl0 = channel::fspl(28e9, 1.0).unwrap();
        let m = PathLossModel::Ci(CiModelParams { d0: 1.0, pl_d0: pl0, n: 2.0, sigma: 0.0 });
        c.channel.los_path_loss = m;
        c.channel.nlos_path_loss = m;
        c.channel.los = LosModel::Fixed { p_los: 1.0 };
        c.channel.rice_k_db = f64::INFINITY;
        c.mac.placement = Placement::FixedDistance { distance_m: 80.0 };
        c.mac.delay_budget_s = 1e9;
        c.radio.tx_power_dbm = -20.0;
        let probe = run_cell(&c, 5.0, 0).unwrap();
        let snr = probe[0].snr_db;
        let service = 1500.0 * 8.0 / c.service_rate_bps(snr);
        let rho = 0.5;
        c.profiles[0].packet_rate = rho / service;
        let duration = 50_000.0 * service / rho;
        let recs = run_cell(&c, duration, 21).unwrap();
        let waits: Vec<f64> = recs.iter().map(|r| r.delay_ms.unwrap() / 1e3 - service).collect();
        let w = crate::stats::mean(&waits);
        let expected = rho * service / (2.0 * (1.0 - rho));
        assert!((w - expected).abs() / expected < 0.05, "w={w} expected={expected}");
    }

    #[test]
    fn axis_parse_and_apply() {
        for s in ["devices:car", "rate:car", "size:car", "radius_m", "los_fraction", "tx_power_dbm"] {
            assert_eq!(s.parse::<Axis>().unwrap().to_string(), s);
        }
        assert!("bogus".parse::<Axis>().is_err());
        assert!("devices:".parse::<Axis>().is_err());
        let mut c = base_conditions(1);
        Axis::DeviceCount("car".into()).apply(&mut c, 12.0).unwrap();
        assert_eq!(c.device_counts["car"], 12);
        assert!(Axis::DeviceCount("bus".into()).apply(&mut c, 1.0).is_err());
        assert!(Axis::DeviceCount("car".into()).apply(&mut c, 1.5).is_err());
        Axis::LosFraction.apply(&mut c, 0.3).unwrap();
        assert_eq!(Axis::LosFraction.extract(&c), 0.3);
    }

    #[test]
    fn mean_p_los_matches_quadrature() {
        let model = LosModel::Exponential { decay_m: 50.0 };
        let r = 150.0;
        let n = 100_000;
        let q: f64 = (0..n)
            .map(|i| {
                let x = (i as f64 + 0.5) / n as f64 * r;
                model.p_los(x) * 2.0 * x / (r * r) * (r / n as f64)
            })
            .sum();
        assert!((mean_p_los(&model, r) - q).abs() < 1e-6);
    }

    fn small_grid() -> SweepGrid {
        SweepGrid {
            base: base_conditions(1),
            axes: vec![
                GridAxis { axis: Axis::DeviceCount("car".into()), values: vec![10.0, 20.0] },
                GridAxis { axis: Axis::CellRadius, values: vec![100.0, 200.0] },
            ],
            replications: 2,
            seed_base: 4,
        }
    }

    #[test]
    fn sweep_runs_every_point_and_replication() {
        let g = small_grid();
        let ds = run_sweep(&g, 5.0, Some(2)).unwrap();
        assert_eq!(ds.points.len(), 4);
        assert_eq!(ds.points.iter().map(|p| p.runs).sum::<u32>(), 8);
        assert_eq!(ds.points[1].values, vec![10.0, 200.0]);
        assert_eq!(ds.points[2].values, vec![20.0, 100.0]);
        // deterministic regardless of worker count
        let again = run_sweep(&g, 5.0, Some(1)).unwrap();
        assert_eq!(ds, again);
    }

    #[test]
    fn sweep_records_failed_points() {
        let mut g = small_grid();
        g.axes[1].values = vec![100.0, -5.0];
        let ds = run_sweep(&g, 5.0, None).unwrap();
        assert!(ds.points[0].error.is_none());
        assert!(ds.points[1].error.is_some());
        assert!(ds.points[1].records.is_empty());
    }

    #[test]
    fn sweep_round_trips_through_files() {
        let mut g = small_grid();
        g.axes[1].values = vec![100.0, -5.0];
        let ds = run_sweep(&g, 5.0, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.write_dir(dir.path()).unwrap();
        let back = SweepDataset::read_dir(dir.path()).unwrap();
        assert_eq!(back.axes, ds.axes);
        assert_eq!(back.points.len(), ds.points.len());
        for (a, b) in back.points.iter().zip(&ds.points) {
            assert_eq!(a.index, b.index);
            assert_eq!(a.values, b.values);
            assert_eq!(a.runs, b.runs);
            assert_eq!(a.error.is_some(), b.error.is_some());
            let fa: Vec<String> = a.records.iter().map(format_packet_row).collect();
            let fb: Vec<String> = b.records.iter().map(format_packet_row).collect();
            assert_eq!(fa, fb);
        }
    }

    #[test]
    fn invalid_grid_rejected() {
        let mut g = small_grid();
        g.replications = 0;
        assert!(run_sweep(&g, 1.0, None).is_err());
        let mut g = small_grid();
        g.axes[0].values.clear();
        assert!(run_sweep(&g, 1.0, None).is_err());
    }
}
