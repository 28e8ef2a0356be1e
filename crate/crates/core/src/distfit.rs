//! Parametric KPI distributions: maximum-likelihood fitting, KS goodness of
//! fit and inverse-CDF sampling.
//!
//! Parameter vectors use a fixed order per family:
//!
//! | family      | params            |
//! |-------------|-------------------|
//! | LogNormal   | `[mu, sigma]`     |
//! | Gamma       | `[shape, scale]`  |
//! | Exponential | `[rate]`          |
//! | Bernoulli   | `[p]`             |

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::Open01;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use statrs::function::gamma::{digamma, gamma_lr};

use crate::cellsim::{parse_field, Axis, PacketRecord, SweepDataset};
use crate::error::{Error, Result};
use crate::stats;

pub const MIN_FIT_SAMPLES: usize = 30;

/// Absolute tolerance of the bisection used by continuous inverse CDFs.
pub const INVERSE_CDF_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kpi {
    Delay,
    #[serde(rename = "drop")]
    DropProbability,
    Throughput,
}

impl Kpi {
    pub const ALL: [Kpi; 3] = [Kpi::Delay, Kpi::DropProbability, Kpi::Throughput];

    pub fn default_family(self) -> Family {
        match self {
            Kpi::Delay => Family::LogNormal,
            Kpi::DropProbability => Family::Bernoulli,
            Kpi::Throughput => Family::Gamma,
        }
    }

    /// The per-packet samples of this KPI: delays (ms) and throughputs of
    /// delivered packets, 0/1 drop indicators of all packets.
    pub fn samples(self, records: &[PacketRecord]) -> Vec<f64> {
        match self {
            Kpi::Delay => records.iter().filter_map(|r| r.delay_ms).collect(),
            Kpi::DropProbability => records.iter().map(|r| f64::from(u8::from(r.dropped))).collect(),
            Kpi::Throughput => records.iter().filter(|r| !r.dropped).map(|r| r.throughput_bps).collect(),
        }
    }
}

impl fmt::Display for Kpi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kpi::Delay => "delay",
            Kpi::DropProbability => "drop",
            Kpi::Throughput => "throughput",
        })
    }
}

impl FromStr for Kpi {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "delay" => Ok(Kpi::Delay),
            "drop" => Ok(Kpi::DropProbability),
            "throughput" => Ok(Kpi::Throughput),
            _ => Err(Error::Config(format!("unknown KPI {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    #[serde(rename = "lognormal")]
    LogNormal,
    Gamma,
    Exponential,
    Bernoulli,
}

impl Family {
    pub fn param_count(self) -> usize {
        match self {
            Family::LogNormal | Family::Gamma => 2,
            Family::Exponential | Family::Bernoulli => 1,
        }
    }

    /// Whether parameter `i` must be strictly positive.
    pub fn is_positive_param(self, i: usize) -> bool {
        match self {
            Family::LogNormal => i == 1,
            Family::Gamma | Family::Exponential => true,
            Family::Bernoulli => false,
        }
    }

    fn in_support(self, x: f64) -> bool {
        match self {
            Family::LogNormal | Family::Gamma | Family::Exponential => x > 0.0 && x.is_finite(),
            Family::Bernoulli => x == 0.0 || x == 1.0,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::LogNormal => "lognormal",
            Family::Gamma => "gamma",
            Family::Exponential => "exponential",
            Family::Bernoulli => "bernoulli",
        })
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lognormal" => Ok(Family::LogNormal),
            "gamma" => Ok(Family::Gamma),
            "exponential" => Ok(Family::Exponential),
            "bernoulli" => Ok(Family::Bernoulli),
            _ => Err(Error::Config(format!("unknown distribution family {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KpiDistribution {
    pub kpi: Kpi,
    pub family: Family,
    pub params: Vec<f64>,
    /// KS distance between the fitted CDF and the samples it was fitted to.
    pub ks_statistic: f64,
    pub sample_count: usize,
}

impl KpiDistribution {
    /// A distribution with no fit diagnostics attached.
    pub fn new(kpi: Kpi, family: Family, params: Vec<f64>) -> Result<Self> {
        let d = KpiDistribution {
            kpi,
            family,
            params,
            ks_statistic: 0.0,
            sample_count: 0,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.params;
        if p.len() != self.family.param_count() || p.iter().any(|x| !x.is_finite()) {
            return Err(Error::domain(format!("{} needs {} finite parameters", self.family, self.family.param_count())));
        }
        let ok = match self.family {
            Family::LogNormal => p[1] > 0.0,
            Family::Gamma => p[0] > 0.0 && p[1] > 0.0,
            Family::Exponential => p[0] > 0.0,
            Family::Bernoulli => (0.0..=1.0).contains(&p[0]),
        };
        if !ok || !(0.0..=1.0).contains(&self.ks_statistic) {
            return Err(Error::domain(format!("invalid {} parameters {:?}", self.family, p)));
        }
        Ok(())
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let p = &self.params;
        match self.family {
            Family::LogNormal => {
                if x <= 0.0 {
                    0.0
                } else {
                    0.5 * erfc(-(x.ln() - p[0]) / (p[1] * std::f64::consts::SQRT_2))
                }
            }
            Family::Gamma => {
                if x <= 0.0 {
                    0.0
                } else {
                    gamma_lr(p[0], x / p[1])
                }
            }
            Family::Exponential => {
                if x <= 0.0 {
                    0.0
                } else {
                    -(-p[0] * x).exp_m1()
                }
            }
            Family::Bernoulli => {
                if x < 0.0 {
                    0.0
                } else if x < 1.0 {
                    1.0 - p[0]
                } else {
                    1.0
                }
            }
        }
    }

    pub fn mean(&self) -> f64 {
        let p = &self.params;
        match self.family {
            Family::LogNormal => (p[0] + 0.5 * p[1] * p[1]).exp(),
            Family::Gamma => p[0] * p[1],
            Family::Exponential => 1.0 / p[0],
            Family::Bernoulli => p[0],
        }
    }

    /// F^{-1}(u) for u in (0, 1).
    pub fn inverse_cdf(&self, u: f64) -> Result<f64> {
        if !(u > 0.0 && u < 1.0) {
            return Err(Error::domain(format!("inverse_cdf needs u in (0,1), got {u}")));
        }
        Ok(match self.family {
            Family::Exponential => -(-u).ln_1p() / self.params[0],
            Family::Bernoulli => {
                if u <= 1.0 - self.params[0] {
                    0.0
                } else {
                    1.0
                }
            }
            Family::LogNormal | Family::Gamma => self.bisect(u),
        })
    }

    fn bisect(&self, u: f64) -> f64 {
        let mut lo = 0.0;
        let mut hi = self.mean().max(f64::MIN_POSITIVE);
        while self.cdf(hi) < u {
            lo = hi;
            hi *= 2.0;
            if !hi.is_finite() {
                return f64::MAX;
            }
        }
        loop {
            let mid = 0.5 * (lo + hi);
            if hi - lo <= INVERSE_CDF_TOL || mid <= lo || mid >= hi {
                return mid;
            }
            if self.cdf(mid) < u {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }

    /// One KPI value by inverse-CDF evaluation of a uniform draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.sample(Open01);
        self.inverse_cdf(u).expect("Open01 lies in (0,1)")
    }
}

pub fn sample_kpi<R: Rng + ?Sized>(dist: &KpiDistribution, rng: &mut R) -> f64 {
    dist.sample(rng)
}

/// Trigamma function psi'(x) for x > 0.
fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 20.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let x2 = 1.0 / (x * x);
    acc + 1.0 / x
        + x2 / 2.0
        + (1.0 / x) * x2 * (1.0 / 6.0 - x2 * (1.0 / 30.0 - x2 * (1.0 / 42.0 - x2 / 30.0)))
}

fn gamma_mle(samples: &[f64]) -> Result<[f64; 2]> {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let mean_ln = samples.iter().map(|x| x.ln()).sum::<f64>() / n;
    let s = mean.ln() - mean_ln;
    if !(s > 0.0) {
        return Err(Error::domain("gamma fit needs non-constant samples"));
    }
    let mut k = (3.0 - s + ((s - 3.0).powi(2) + 24.0 * s).sqrt()) / (12.0 * s);
    for _ in 0..100 {
        let f = k.ln() - digamma(k) - s;
        let df = 1.0 / k - trigamma(k);
        let next = (k - f / df).max(k / 10.0);
        let done = (next - k).abs() <= 1e-14 * k;
        k = next;
        if done {
            break;
        }
    }
    Ok([k, mean / k])
}

fn mle(samples: &[f64], family: Family) -> Result<Vec<f64>> {
    let n = samples.len() as f64;
    match family {
        Family::LogNormal => {
            let mu = samples.iter().map(|x| x.ln()).sum::<f64>() / n;
            let var = samples.iter().map(|x| (x.ln() - mu).powi(2)).sum::<f64>() / n;
            if !(var > 0.0) {
                return Err(Error::domain("lognormal fit needs non-constant samples"));
            }
            Ok(vec![mu, var.sqrt()])
        }
        Family::Gamma => Ok(gamma_mle(samples)?.to_vec()),
        Family::Exponential => Ok(vec![n / samples.iter().sum::<f64>()]),
        Family::Bernoulli => Ok(vec![samples.iter().sum::<f64>() / n]),
    }
}

/// Maximum-likelihood fit with KS goodness of fit.
pub fn fit(kpi: Kpi, samples: &[f64], family: Family) -> Result<KpiDistribution> {
    if samples.len() < MIN_FIT_SAMPLES {
        return Err(Error::InsufficientData {
            needed: MIN_FIT_SAMPLES,
            got: samples.len(),
        });
    }
    if let Some(bad) = samples.iter().find(|&&x| !family.in_support(x)) {
        return Err(Error::domain(format!("sample {bad} outside the support of {family}")));
    }
    let params = mle(samples, family)?;
    let mut dist = KpiDistribution {
        kpi,
        family,
        params,
        ks_statistic: 0.0,
        sample_count: samples.len(),
    };
    dist.ks_statistic = stats::ks_one_sample(samples, |x| dist.cdf(x));
    dist.validate()?;
    Ok(dist)
}

/// Fits every candidate and keeps the one with the smallest KS statistic,
/// earliest candidate on ties. Candidates that cannot be fitted are skipped;
/// if none can, the first error is returned.
pub fn select_family(kpi: Kpi, samples: &[f64], candidates: &[Family]) -> Result<KpiDistribution> {
    if candidates.is_empty() {
        return Err(Error::Config("select_family needs at least one candidate family".into()));
    }
    let mut best: Option<KpiDistribution> = None;
    let mut first_err = None;
    for &fam in candidates {
        match fit(kpi, samples, fam) {
            Ok(d) => {
                if best.as_ref().is_none_or(|b| d.ks_statistic < b.ks_statistic) {
                    best = Some(d);
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    best.ok_or_else(|| first_err.expect("at least one candidate"))
}

/// One fitted distribution of the table, keyed by sweep grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub point: usize,
    pub values: Vec<f64>,
    pub dist: KpiDistribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionTable {
    pub axes: Vec<Axis>,
    pub rows: Vec<TableRow>,
}

/// A point/KPI pair that could not be fitted.
#[derive(Debug, Clone, PartialEq)]
pub struct SkippedFit {
    pub point: usize,
    pub kpi: Kpi,
    pub reason: String,
}

/// Candidate families per KPI. With several candidates, one family is chosen
/// for the whole table (lowest mean KS over the points where every candidate
/// fits) so that the surrogate sees a single parameterisation per KPI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitPlan {
    pub delay: Vec<Family>,
    pub drop: Vec<Family>,
    pub throughput: Vec<Family>,
}

impl Default for FitPlan {
    fn default() -> Self {
        FitPlan {
            delay: vec![Kpi::Delay.default_family()],
            drop: vec![Kpi::DropProbability.default_family()],
            throughput: vec![Kpi::Throughput.default_family()],
        }
    }
}

impl FitPlan {
    pub fn candidates(&self, kpi: Kpi) -> &[Family] {
        match kpi {
            Kpi::Delay => &self.delay,
            Kpi::DropProbability => &self.drop,
            Kpi::Throughput => &self.throughput,
        }
    }
}

fn choose_table_family(kpi: Kpi, samples: &[Vec<f64>], candidates: &[Family]) -> Result<Family> {
    if candidates.is_empty() {
        return Err(Error::Config(format!("no candidate family for {kpi}")));
    }
    if candidates.len() == 1 {
        return Ok(candidates[0]);
    }
    let mut sums = vec![0.0; candidates.len()];
    for s in samples {
        let fits: Vec<_> = candidates.iter().map(|&f| fit(kpi, s, f)).collect();
        if fits.iter().all(|r| r.is_ok()) {
            for (acc, r) in sums.iter_mut().zip(fits) {
                *acc += r.expect("checked").ks_statistic;
            }
        }
    }
    let mut best = 0;
    for i in 1..sums.len() {
        if sums[i] < sums[best] {
            best = i;
        }
    }
    Ok(candidates[best])
}

/// Fits every KPI at every successful sweep point.
pub fn fit_dataset(ds: &SweepDataset, plan: &FitPlan) -> Result<(DistributionTable, Vec<SkippedFit>)> {
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for kpi in Kpi::ALL {
        let per_point: Vec<Vec<f64>> = ds
            .points
            .iter()
            .filter(|p| p.error.is_none())
            .map(|p| kpi.samples(&p.records))
            .collect();
        let family = choose_table_family(kpi, &per_point, plan.candidates(kpi))?;
        for p in &ds.points {
            if let Some(e) = &p.error {
                skipped.push(SkippedFit { point: p.index, kpi, reason: e.clone() });
                continue;
            }
            match fit(kpi, &kpi.samples(&p.records), family) {
                Ok(dist) => rows.push(TableRow { point: p.index, values: p.values.clone(), dist }),
                Err(e) => skipped.push(SkippedFit { point: p.index, kpi, reason: e.to_string() }),
            }
        }
    }
    rows.sort_by_key(|r| (r.point, r.dist.kpi));
    Ok((DistributionTable { axes: ds.axes.clone(), rows }, skipped))
}

impl DistributionTable {
    pub fn rows_for(&self, kpi: Kpi) -> impl Iterator<Item = &TableRow> {
        self.rows.iter().filter(move |r| r.dist.kpi == kpi)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("point");
        for a in &self.axes {
            s.push(',');
            s.push_str(&a.to_string());
        }
        s.push_str(",kpi,family,params,ks,n\n");
        for r in &self.rows {
            s.push_str(&r.point.to_string());
            for v in &r.values {
                s.push_str(&format!(",{v}"));
            }
            let params: Vec<String> = r.dist.params.iter().map(|p| p.to_string()).collect();
            s.push_str(&format!(
                ",{},{},{},{},{}\n",
                r.dist.kpi,
                r.dist.family,
                params.join(" "),
                r.dist.ks_statistic,
                r.dist.sample_count
            ));
        }
        s
    }

    pub fn from_csv(text: &str, source: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::parse(source, "empty table"))?;
        let cols: Vec<&str> = header.split(',').collect();
        let tail = ["kpi", "family", "params", "ks", "n"];
        if cols.len() < 6 || cols[0] != "point" || cols[cols.len() - 5..] != tail {
            return Err(Error::parse(format!("{source}:1"), "bad table header"));
        }
        let axes = cols[1..cols.len() - 5]
            .iter()
            .map(|c| c.parse())
            .collect::<Result<Vec<Axis>>>()?;
        let na = axes.len();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let loc = || format!("{source}:{}", i + 2);
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != na + 6 {
                return Err(Error::parse(loc(), "wrong field count"));
            }
            let values = f[1..=na].iter().map(|v| parse_field(v, &loc)).collect::<Result<Vec<f64>>>()?;
            let kpi: Kpi = f[na + 1].parse().map_err(|e: Error| Error::parse(loc(), e.to_string()))?;
            let family: Family = f[na + 2].parse().map_err(|e: Error| Error::parse(loc(), e.to_string()))?;
            let params = f[na + 3]
                .split_whitespace()
                .map(|p| parse_field(p, &loc))
                .collect::<Result<Vec<f64>>>()?;
            let dist = KpiDistribution {
                kpi,
                family,
                params,
                ks_statistic: parse_field(f[na + 4], &loc)?,
                sample_count: parse_field(f[na + 5], &loc)?,
            };
            dist.validate().map_err(|e| Error::parse(loc(), e.to_string()))?;
            rows.push(TableRow { point: parse_field(f[0], &loc)?, values, dist });
        }
        Ok(DistributionTable { axes, rows })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_csv(&fs::read_to_string(path)?, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::Seed;
    use rand_distr::{Distribution, Exp, LogNormal};

    #[test]
    fn lognormal_mle_recovers_parameters() {
        let mut rng = Seed::new(1).rng();
        let reference = LogNormal::new(1.0, 0.5).unwrap();
        let xs: Vec<f64> = (0..100_000).map(|_| reference.sample(&mut rng)).collect();
        let d = fit(Kpi::Delay, &xs, Family::LogNormal).unwrap();
        assert!((d.params[0] - 1.0).abs() < 0.01);
        assert!((d.params[1] - 0.5).abs() / 0.5 < 0.01);
        assert!(d.ks_statistic < stats::ks_critical_one_sample(xs.len(), 0.01));
    }

    #[test]
    fn exponential_mle_is_inverse_mean() {
        let xs: Vec<f64> = (1..=40).map(f64::from).collect();
        let d = fit(Kpi::Delay, &xs, Family::Exponential).unwrap();
        assert_eq!(d.params[0], 1.0 / stats::mean(&xs));
    }

    #[test]
    fn bernoulli_all_zero() {
        let d = fit(Kpi::DropProbability, &[0.0; 50], Family::Bernoulli).unwrap();
        assert_eq!(d.params, vec![0.0]);
        assert_eq!(d.ks_statistic, 0.0);
        let mut rng = Seed::new(0).rng();
        assert!((0..100).all(|_| d.sample(&mut rng) == 0.0));
        let one = KpiDistribution::new(Kpi::DropProbability, Family::Bernoulli, vec![1.0]).unwrap();
        assert!((0..100).all(|_| one.sample(&mut rng) == 1.0));
    }

    #[test]
    fn fit_errors() {
        assert!(matches!(
            fit(Kpi::Delay, &[1.0; 29], Family::LogNormal),
            Err(Error::InsufficientData { needed: 30, got: 29 })
        ));
        let mut xs = vec![1.0; 40];
        xs[3] = -2.0;
        assert!(matches!(fit(Kpi::Delay, &xs, Family::Gamma), Err(Error::Domain(_))));
        let mut b = vec![0.0; 40];
        b[0] = 0.5;
        assert!(fit(Kpi::DropProbability, &b, Family::Bernoulli).is_err());
    }

    #[test]
    fn inverse_cdf_medians_and_domain() {
        let e = KpiDistribution::new(Kpi::Delay, Family::Exponential, vec![3.0]).unwrap();
        assert!((e.inverse_cdf(0.5).unwrap() - 2f64.ln() / 3.0).abs() < 1e-15);
        let l = KpiDistribution::new(Kpi::Delay, Family::LogNormal, vec![1.3, 0.4]).unwrap();
        assert!((l.inverse_cdf(0.5).unwrap() - 1.3f64.exp()).abs() < 1e-9);
        for u in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(e.inverse_cdf(u).is_err());
        }
    }

    /// Gamma CDF by composite Simpson quadrature of the density, independent
    /// of the incomplete gamma function used by the implementation.
    fn gamma_cdf_quadrature(k: f64, theta: f64, x: f64) -> f64 {
        let ln_norm = statrs::function::gamma::ln_gamma(k) + k * theta.ln();
        let pdf = |t: f64| if t <= 0.0 { 0.0 } else { ((k - 1.0) * t.ln() - t / theta - ln_norm).exp() };
        let n = 20_000;
        let h = x / n as f64;
        let mut s = pdf(0.0) + pdf(x);
        for i in 1..n {
            s += pdf(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn gamma_inverse_matches_quadrature_bisection_oracle() {
        let (k, theta, u) = (3.7, 2.1, 0.9);
        let (mut lo, mut hi) = (0.0, 100.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if gamma_cdf_quadrature(k, theta, mid) < u {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let oracle = 0.5 * (lo + hi);
        let d = KpiDistribution::new(Kpi::Throughput, Family::Gamma, vec![k, theta]).unwrap();
        let x = d.inverse_cdf(u).unwrap();
        assert!((x - oracle).abs() / oracle < 1e-6, "x={x} oracle={oracle}");
    }

    #[test]
    fn inverse_cdf_round_trips() {
        let dists = [
            KpiDistribution::new(Kpi::Delay, Family::LogNormal, vec![2.0, 0.7]).unwrap(),
            KpiDistribution::new(Kpi::Delay, Family::Gamma, vec![0.8, 5.0]).unwrap(),
            KpiDistribution::new(Kpi::Delay, Family::Gamma, vec![40.0, 0.1]).unwrap(),
            KpiDistribution::new(Kpi::Delay, Family::Exponential, vec![0.2]).unwrap(),
        ];
        for d in &dists {
            for x in [0.5, 1.0, 3.0, 7.5, 20.0] {
                let u = d.cdf(x);
                if u <= 1e-9 || u >= 1.0 - 1e-9 {
                    continue;
                }
                let back = d.inverse_cdf(u).unwrap();
                assert!((back - x).abs() / x < 1e-6, "{:?} x={x} back={back}", d.family);
            }
        }
    }

    #[test]
    fn inverse_cdf_monotone() {
        let d = KpiDistribution::new(Kpi::Delay, Family::Gamma, vec![2.5, 1.0]).unwrap();
        let xs: Vec<f64> = (1..200).map(|i| d.inverse_cdf(i as f64 / 200.0).unwrap()).collect();
        assert!(xs.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn select_family_prefers_exponential_for_exponential_data() {
        let mut rng = Seed::new(5).rng();
        let exp = Exp::new(2.0).unwrap();
        let xs: Vec<f64> = (0..20_000).map(|_| exp.sample(&mut rng)).collect();
        let d = select_family(Kpi::Delay, &xs, &[Family::LogNormal, Family::Exponential]).unwrap();
        assert_eq!(d.family, Family::Exponential);
        let single = select_family(Kpi::Delay, &xs, &[Family::Gamma]).unwrap();
        assert_eq!(single, fit(Kpi::Delay, &xs, Family::Gamma).unwrap());
        assert!(matches!(select_family(Kpi::Delay, &xs, &[]), Err(Error::Config(_))));
    }

    #[test]
    fn sampling_reproducible_and_matches_reference() {
        let d = KpiDistribution::new(Kpi::Delay, Family::LogNormal, vec![1.0, 0.5]).unwrap();
        let draw = |s| {
            let mut r = Seed::new(s).rng();
            (0..10_000).map(|_| sample_kpi(&d, &mut r)).collect::<Vec<_>>()
        };
        let a = draw(3);
        assert_eq!(a, draw(3));
        let mut rng = Seed::new(4).rng();
        let reference = LogNormal::new(1.0, 0.5).unwrap();
        let b: Vec<f64> = (0..10_000).map(|_| reference.sample(&mut rng)).collect();
        assert!(stats::ks_two_sample(&a, &b) < stats::ks_critical_two_sample(a.len(), b.len(), 0.01));
    }

    #[test]
    fn trigamma_reference_values() {
        // psi'(1) = pi^2/6, psi'(1/2) = pi^2/2
        let pi2 = std::f64::consts::PI.powi(2);
        assert!((trigamma(1.0) - pi2 / 6.0).abs() < 1e-12);
        assert!((trigamma(0.5) - pi2 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn table_csv_round_trip() {
        let table = DistributionTable {
            axes: vec![Axis::DeviceCount("car".into()), Axis::CellRadius],
            rows: vec![
                TableRow {
                    point: 0,
                    values: vec![10.0, 100.0],
                    dist: KpiDistribution {
                        kpi: Kpi::Delay,
                        family: Family::LogNormal,
                        params: vec![0.123456789, 0.3],
                        ks_statistic: 0.01,
                        sample_count: 400,
                    },
                },
                TableRow {
                    point: 0,
                    values: vec![10.0, 100.0],
                    dist: KpiDistribution::new(Kpi::DropProbability, Family::Bernoulli, vec![0.25]).unwrap(),
                },
            ],
        };
        let back = DistributionTable::from_csv(&table.to_csv(), "mem").unwrap();
        assert_eq!(back, table);
        assert!(DistributionTable::from_csv("nonsense\n", "mem").is_err());
    }
}
