//! mmWave propagation: free-space and close-in / alpha-beta path loss,
//! rain, atmospheric and penetration losses, small-scale fading and the
//! resulting link SNR.
//!
//! All quantities are in dB / dBm / dBi unless the name says otherwise.
//! Losses combine additively in dB; powers combine in the linear domain.

use rand::Rng;
use rand_distr::{Open01, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Thermal noise density at 290 K.
pub const THERMAL_NOISE_DBM_PER_HZ: f64 = -174.0;

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(lin: f64) -> f64 {
    10.0 * lin.log10()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RadioConfig {
    pub carrier_frequency_hz: f64,
    pub tx_power_dbm: f64,
    pub tx_antenna_gain_dbi: f64,
    pub rx_antenna_gain_dbi: f64,
    pub tx_height_m: f64,
    pub rx_height_m: f64,
    pub noise_figure_db: f64,
    pub bandwidth_hz: f64,
}

impl Default for RadioConfig {
    fn default() -> Self {
        RadioConfig {
            carrier_frequency_hz: 28e9,
            tx_power_dbm: 30.0,
            tx_antenna_gain_dbi: 24.5,
            rx_antenna_gain_dbi: 24.5,
            tx_height_m: 10.0,
            rx_height_m: 1.5,
            noise_figure_db: 7.0,
            bandwidth_hz: 100e6,
        }
    }
}

impl RadioConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.carrier_frequency_hz > 0.0) {
            return Err(Error::domain("carrier_frequency_hz must be > 0"));
        }
        if !(self.bandwidth_hz > 0.0) {
            return Err(Error::domain("bandwidth_hz must be > 0"));
        }
        if !(self.tx_height_m >= 0.0 && self.rx_height_m >= 0.0) {
            return Err(Error::domain("antenna heights must be >= 0"));
        }
        Ok(())
    }

    /// -174 dBm/Hz + 10 log10(B) + NF
    pub fn noise_floor_dbm(&self) -> f64 {
        THERMAL_NOISE_DBM_PER_HZ + linear_to_db(self.bandwidth_hz) + self.noise_figure_db
    }

    /// Slant distance between the antennas for a given ground distance.
    pub fn distance_3d(&self, ground_distance_m: f64) -> f64 {
        let dh = self.tx_height_m - self.rx_height_m;
        (ground_distance_m * ground_distance_m + dh * dh).sqrt()
    }
}

/// Free-space path loss, 20 log10(4 pi d f / c).
pub fn fspl(frequency_hz: f64, distance_m: f64) -> Result<f64> {
    if !(frequency_hz > 0.0) || !(distance_m > 0.0) {
        return Err(Error::domain(format!(
            "fspl requires positive frequency and distance, got f={frequency_hz}, d={distance_m}"
        )));
    }
    Ok(20.0 * (4.0 * std::f64::consts::PI * distance_m * frequency_hz / SPEED_OF_LIGHT).log10())
}

/// Close-in free-space reference distance model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CiModelParams {
    /// Reference distance (m).
    pub d0: f64,
    /// Free-space path loss at `d0` (dB).
    pub pl_d0: f64,
    /// Path loss exponent.
    pub n: f64,
    /// Shadowing standard deviation (dB).
    pub sigma: f64,
}

impl CiModelParams {
    /// Anchors `pl_d0` to the free-space loss at `d0` for the given carrier.
    pub fn anchored(frequency_hz: f64, d0: f64, n: f64, sigma: f64) -> Result<Self> {
        let p = CiModelParams {
            d0,
            pl_d0: fspl(frequency_hz, d0)?,
            n,
            sigma,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d0 > 0.0) || !(self.n > 0.0) || !(self.sigma >= 0.0) {
            return Err(Error::domain("CI model requires d0 > 0, n > 0, sigma >= 0"));
        }
        Ok(())
    }
}

pub fn ci_path_loss(params: &CiModelParams, distance_m: f64, shadowing_draw_db: f64) -> Result<f64> {
    if !(distance_m > 0.0) {
        return Err(Error::domain(format!("distance must be > 0, got {distance_m}")));
    }
    Ok(params.pl_d0 + 10.0 * params.n * (distance_m / params.d0).log10() + shadowing_draw_db)
}

/// Floating-intercept (alpha-beta) model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbModelParams {
    pub alpha: f64,
    pub beta: f64,
    pub sigma: f64,
}

impl AbModelParams {
    /// The AB parameters that reproduce a CI model exactly.
    pub fn from_ci(ci: &CiModelParams) -> Self {
        AbModelParams {
            alpha: ci.pl_d0 - 10.0 * ci.n * ci.d0.log10(),
            beta: ci.n,
            sigma: ci.sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) || !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::domain("AB model requires finite alpha, beta and sigma >= 0"));
        }
        Ok(())
    }
}

pub fn ab_path_loss(params: &AbModelParams, distance_m: f64, shadowing_draw_db: f64) -> Result<f64> {
    if !(distance_m > 0.0) {
        return Err(Error::domain(format!("distance must be > 0, got {distance_m}")));
    }
    Ok(params.alpha + 10.0 * params.beta * distance_m.log10() + shadowing_draw_db)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case", deny_unknown_fields)]
pub enum PathLossModel {
    Ci(CiModelParams),
    Ab(AbModelParams),
}

impl PathLossModel {
    pub fn path_loss(&self, distance_m: f64, shadowing_draw_db: f64) -> Result<f64> {
        match self {
            PathLossModel::Ci(p) => ci_path_loss(p, distance_m, shadowing_draw_db),
            PathLossModel::Ab(p) => ab_path_loss(p, distance_m, shadowing_draw_db),
        }
    }

    pub fn sigma(&self) -> f64 {
        match self {
            PathLossModel::Ci(p) => p.sigma,
            PathLossModel::Ab(p) => p.sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            PathLossModel::Ci(p) => p.validate(),
            PathLossModel::Ab(p) => p.validate(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtraLossConfig {
    /// mm/h
    pub rain_rate: f64,
    /// dB/km
    pub atmospheric_coeff: f64,
    /// dB, 0 for outdoor-to-outdoor links.
    pub penetration_loss: f64,
}

impl ExtraLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rain_rate >= 0.0 && self.atmospheric_coeff >= 0.0 && self.penetration_loss >= 0.0) {
            return Err(Error::domain("extra loss terms must be >= 0"));
        }
        Ok(())
    }
}

/// Tinted glass penetration loss (dB).
pub const PENETRATION_TINTED_GLASS_DB: f64 = 40.1;
/// Brick penetration loss (dB).
pub const PENETRATION_BRICK_DB: f64 = 28.3;

/// Power-law rain coefficients gamma = k R^a, indexed by carrier (GHz).
/// The 28 GHz `k` is chosen so that 25.4 mm/h gives exactly 7.0 dB/km; the
/// remaining rows are scaled by the same factor.
const RAIN_TABLE: [(f64, f64, f64); 4] = [
    // (GHz, k, a)
    (28.0, 0.0, 0.97),
    (38.0, 0.58, 0.90),
    (60.0, 1.28, 0.77),
    (73.0, 1.58, 0.73),
];

const RAIN_ANCHOR_RATE: f64 = 25.4;
const RAIN_ANCHOR_DB_PER_KM: f64 = 7.0;

fn rain_row(i: usize) -> (f64, f64, f64) {
    let (f, k, a) = RAIN_TABLE[i];
    if i == 0 {
        (f, RAIN_ANCHOR_DB_PER_KM / RAIN_ANCHOR_RATE.powf(a), a)
    } else {
        (f, k, a)
    }
}

/// Rain specific attenuation (dB/km). Coefficients are linearly interpolated
/// between table rows and clamped outside the table.
pub fn rain_specific_attenuation(frequency_hz: f64, rain_rate: f64) -> f64 {
    if rain_rate <= 0.0 {
        return 0.0;
    }
    let ghz = frequency_hz / 1e9;
    let last = RAIN_TABLE.len() - 1;
    let (k, a) = if ghz <= RAIN_TABLE[0].0 {
        let (_, k, a) = rain_row(0);
        (k, a)
    } else if ghz >= RAIN_TABLE[last].0 {
        let (_, k, a) = rain_row(last);
        (k, a)
    } else {
        let i = RAIN_TABLE.iter().rposition(|row| row.0 <= ghz).unwrap_or(0);
        let (f0, k0, a0) = rain_row(i);
        let (f1, k1, a1) = rain_row(i + 1);
        let t = (ghz - f0) / (f1 - f0);
        (k0 + t * (k1 - k0), a0 + t * (a1 - a0))
    };
    k * rain_rate.powf(a)
}

/// Rain + atmospheric attenuation over `distance_m`, plus penetration loss.
pub fn extra_losses(cfg: &ExtraLossConfig, frequency_hz: f64, distance_m: f64) -> Result<f64> {
    if !(distance_m >= 0.0) {
        return Err(Error::domain(format!("distance must be >= 0, got {distance_m}")));
    }
    cfg.validate()?;
    let km = distance_m / 1000.0;
    Ok(rain_specific_attenuation(frequency_hz, cfg.rain_rate) * km
        + cfg.atmospheric_coeff * km
        + cfg.penetration_loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LosState {
    Los,
    Nlos,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkState {
    pub los: LosState,
    pub fading_gain_db: f64,
}

/// Probability that a device at a given distance has line of sight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LosModel {
    /// P(LOS) = exp(-d / decay_m)
    Exponential { decay_m: f64 },
    /// Distance-independent P(LOS).
    Fixed { p_los: f64 },
}

impl Default for LosModel {
    fn default() -> Self {
        LosModel::Exponential { decay_m: 50.0 }
    }
}

impl LosModel {
    pub fn p_los(&self, distance_m: f64) -> f64 {
        match *self {
            LosModel::Exponential { decay_m } => (-distance_m / decay_m).exp(),
            LosModel::Fixed { p_los } => p_los.clamp(0.0, 1.0),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, distance_m: f64, rng: &mut R) -> LosState {
        let u: f64 = rng.random();
        if u < self.p_los(distance_m) {
            LosState::Los
        } else {
            LosState::Nlos
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LosModel::Exponential { decay_m } if !(decay_m > 0.0) => {
                Err(Error::domain("LOS decay distance must be > 0"))
            }
            LosModel::Fixed { p_los } if !(0.0..=1.0).contains(&p_los) => {
                Err(Error::domain("p_los must lie in [0, 1]"))
            }
            _ => Ok(()),
        }
    }
}

/// Gaussian shadowing draw X_sigma (dB).
pub fn sample_shadowing<R: Rng + ?Sized>(sigma_db: f64, rng: &mut R) -> f64 {
    if sigma_db == 0.0 {
        return 0.0;
    }
    let z: f64 = rng.sample(StandardNormal);
    sigma_db * z
}

/// Small-scale fading power gain (dB), unit mean in the linear domain.
///
/// NLOS draws an exponential power (Rayleigh envelope). LOS draws a Rician
/// power with K-factor `rice_k_db`; an infinite K means no fading.
pub fn sample_fading<R: Rng + ?Sized>(los: LosState, rice_k_db: f64, rng: &mut R) -> f64 {
    match los {
        LosState::Nlos => {
            let u: f64 = rng.sample(Open01);
            linear_to_db(-u.ln())
        }
        LosState::Los => {
            if rice_k_db == f64::INFINITY {
                return 0.0;
            }
            let k = db_to_linear(rice_k_db);
            let los_amp = (k / (k + 1.0)).sqrt();
            let scatter = (1.0 / (2.0 * (k + 1.0))).sqrt();
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            let i = los_amp + scatter * re;
            let q = scatter * im;
            linear_to_db(i * i + q * q)
        }
    }
}

/// Link-budget SNR (dB).
pub fn link_snr(radio: &RadioConfig, total_path_loss_db: f64, fading_gain_db: f64) -> f64 {
    radio.tx_power_dbm + radio.tx_antenna_gain_dbi + radio.rx_antenna_gain_dbi - total_path_loss_db
        + fading_gain_db
        - radio.noise_floor_dbm()
}

/// Everything needed to turn a device position into per-packet SNR draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelConfig {
    pub los_path_loss: PathLossModel,
    pub nlos_path_loss: PathLossModel,
    pub los: LosModel,
    /// Rician K-factor for LOS links (dB); `inf` disables LOS fading.
    pub rice_k_db: f64,
    pub extra: ExtraLossConfig,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        let f = RadioConfig::default().carrier_frequency_hz;
        let pl_d0 = fspl(f, 1.0).expect("positive defaults");
        ChannelConfig {
            los_path_loss: PathLossModel::Ci(CiModelParams { d0: 1.0, pl_d0, n: 2.1, sigma: 3.6 }),
            nlos_path_loss: PathLossModel::Ci(CiModelParams { d0: 1.0, pl_d0, n: 3.4, sigma: 9.7 }),
            los: LosModel::default(),
            rice_k_db: 9.0,
            extra: ExtraLossConfig::default(),
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        self.los_path_loss.validate()?;
        self.nlos_path_loss.validate()?;
        self.los.validate()?;
        self.extra.validate()?;
        if self.rice_k_db.is_nan() {
            return Err(Error::domain("rice_k_db must not be NaN"));
        }
        Ok(())
    }

    pub fn model(&self, los: LosState) -> &PathLossModel {
        match los {
            LosState::Los => &self.los_path_loss,
            LosState::Nlos => &self.nlos_path_loss,
        }
    }

    /// Large-scale loss: path loss with the given shadowing draw plus extra losses.
    pub fn total_path_loss(
        &self,
        frequency_hz: f64,
        distance_m: f64,
        los: LosState,
        shadowing_draw_db: f64,
    ) -> Result<f64> {
        Ok(self.model(los).path_loss(distance_m, shadowing_draw_db)?
            + extra_losses(&self.extra, frequency_hz, distance_m)?)
    }
}
