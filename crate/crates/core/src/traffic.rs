//! Traffic profiles and per-device packet arrival processes.

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    /// Exponential inter-arrivals.
    Poisson,
    /// Every device emits at k / rate.
    PeriodicSync,
    /// Every device emits at phase + k / rate with its own uniform phase.
    PeriodicAsync,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficProfile {
    pub name: String,
    /// packets/s per device
    pub packet_rate: f64,
    pub packet_size_bytes: u32,
    pub regime: Regime,
}

impl TrafficProfile {
    pub fn new(name: impl Into<String>, packet_rate: f64, packet_size_bytes: u32, regime: Regime) -> Self {
        TrafficProfile {
            name: name.into(),
            packet_rate,
            packet_size_bytes,
            regime,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.packet_rate > 0.0) || !self.packet_rate.is_finite() {
            return Err(Error::domain(format!("profile {}: packet_rate must be > 0", self.name)));
        }
        if self.packet_size_bytes == 0 {
            return Err(Error::domain(format!("profile {}: packet_size must be > 0", self.name)));
        }
        Ok(())
    }

    pub fn packet_bits(&self) -> f64 {
        f64::from(self.packet_size_bytes) * 8.0
    }

    pub fn period(&self) -> f64 {
        1.0 / self.packet_rate
    }

    /// Emission phase of one device: 0 for synchronous and Poisson traffic,
    /// uniform over one period for asynchronous periodic traffic.
    pub fn draw_phase<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.regime {
            Regime::PeriodicAsync => rng.random::<f64>() * self.period(),
            Regime::Poisson | Regime::PeriodicSync => 0.0,
        }
    }

    /// Arrival instants of one device in `[t0, t1)`, sorted.
    pub fn device_arrivals<R: Rng + ?Sized>(&self, phase: f64, t0: f64, t1: f64, rng: &mut R) -> Vec<f64> {
        match self.regime {
            Regime::Poisson => poisson_arrivals(self.packet_rate, t0, t1, rng),
            Regime::PeriodicSync => periodic_arrivals(self.packet_rate, 0.0, t0, t1),
            Regime::PeriodicAsync => periodic_arrivals(self.packet_rate, phase, t0, t1),
        }
    }
}

/// Epochs `phase + k / rate` (integer k) falling in `[t0, t1)`.
pub fn periodic_arrivals(rate: f64, phase: f64, t0: f64, t1: f64) -> Vec<f64> {
    if !(t1 > t0) {
        return Vec::new();
    }
    let mut k = ((t0 - phase) * rate).ceil() as i64;
    // guard against rounding in the ceil above
    while phase + (k as f64) / rate < t0 {
        k += 1;
    }
    while k > i64::MIN && phase + ((k - 1) as f64) / rate >= t0 {
        k -= 1;
    }
    let mut out = Vec::new();
    loop {
        let t = phase + (k as f64) / rate;
        if t >= t1 {
            break;
        }
        out.push(t);
        k += 1;
    }
    out
}

pub fn poisson_arrivals<R: Rng + ?Sized>(rate: f64, t0: f64, t1: f64, rng: &mut R) -> Vec<f64> {
    let exp = Exp::new(rate).expect("rate validated > 0");
    let mut out = Vec::new();
    let mut t = t0;
    loop {
        t += exp.sample(rng);
        if t >= t1 {
            break;
        }
        out.push(t);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::Seed;

    #[test]
    fn periodic_counts_are_floor_consistent() {
        assert_eq!(periodic_arrivals(1.0, 0.0, 0.0, 5.0), vec![0.0, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(periodic_arrivals(1.0, 0.0, 0.5, 2.0), vec![1.0]);
        assert_eq!(periodic_arrivals(2.0, 0.25, 0.0, 1.0), vec![0.25, 0.75]);
        assert!(periodic_arrivals(1.0, 0.0, 3.0, 3.0).is_empty());
        // consecutive spans tile without duplicates or gaps
        let a = periodic_arrivals(3.0, 0.1, 0.0, 1.7);
        let b = periodic_arrivals(3.0, 0.1, 1.7, 4.0);
        let whole = periodic_arrivals(3.0, 0.1, 0.0, 4.0);
        assert_eq!([a, b].concat(), whole);
    }

    #[test]
    fn poisson_interarrival_mean() {
        let mut rng = Seed::new(11).rng();
        let ts = poisson_arrivals(4.0, 0.0, 25_000.0, &mut rng);
        let mean_gap = ts.last().unwrap() / ts.len() as f64;
        assert!((mean_gap - 0.25).abs() / 0.25 < 0.02);
        assert!(ts.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn async_phase_within_period() {
        let p = TrafficProfile::new("x", 2.0, 100, Regime::PeriodicAsync);
        let mut rng = Seed::new(2).rng();
        for _ in 0..100 {
            let ph = p.draw_phase(&mut rng);
            assert!((0.0..0.5).contains(&ph));
        }
        let s = TrafficProfile::new("s", 2.0, 100, Regime::PeriodicSync);
        assert_eq!(s.draw_phase(&mut rng), 0.0);
    }

    #[test]
    fn profile_validation() {
        assert!(TrafficProfile::new("a", 0.0, 10, Regime::Poisson).validate().is_err());
        assert!(TrafficProfile::new("a", 1.0, 0, Regime::Poisson).validate().is_err());
        assert!(TrafficProfile::new("a", 1.0, 10, Regime::Poisson).validate().is_ok());
    }
}
