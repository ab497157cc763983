//! Seeded synthetic wind farm.
//!
//! Operating-regime channels (wind, power, rotor speed, pitch, ambient) are
//! generated first and drive a two-node thermal model of the gearbox: the IMS
//! bearing (target) and the HSS bearing, coupled by heat transfer. A fault is
//! extra friction heat injected at the IMS node only, ramping up linearly
//! until the failure, after which the turbine is down.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scada_data::{
    FailureRecord, FarmDataset, Interval, Timestamp, TurbineSeries, ACTIVE_POWER, AMBIENT_TEMP,
    DEFAULT_RESOLUTION_S, GEARBOX_IMS_BEARING, HSS_BEARING_TEMP, IMS_BEARING_TEMP, PITCH_ANGLE,
    ROTOR_SPEED, SECONDS_PER_DAY, WIND_SPEED,
};

const SECONDS_PER_YEAR: f64 = 365.25 * SECONDS_PER_DAY as f64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TurbineParams {
    /// m/s
    pub cut_in: f64,
    pub rated: f64,
    pub cut_out: f64,
    /// kW
    pub rated_power: f64,
    /// rpm
    pub rated_rotor_speed: f64,
    /// °C per kW per step
    pub a_ims: f64,
    pub a_hss: f64,
    /// IMS-HSS heat transfer coefficient, 1/step
    pub h: f64,
    /// node-ambient coupling, 1/step
    pub c: f64,
    /// pitch increase per m/s above rated, degrees
    pub pitch_slope: f64,
}

impl Default for TurbineParams {
    fn default() -> Self {
        TurbineParams {
            cut_in: 3.5,
            rated: 12.5,
            cut_out: 25.0,
            rated_power: 2000.0,
            rated_rotor_speed: 16.0,
            a_ims: 8.75e-4,
            a_hss: 1.0e-3,
            h: 0.2,
            c: 0.1,
            pitch_slope: 2.0,
        }
    }
}

impl TurbineParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(0.0 < self.cut_in && self.cut_in < self.rated && self.rated < self.cut_out) {
            return bad(format!(
                "wind speeds must satisfy 0 < cut_in < rated < cut_out (got {}, {}, {})",
                self.cut_in, self.rated, self.cut_out
            ));
        }
        if !(self.rated_power > 0.0) || !(self.rated_rotor_speed > 0.0) {
            return bad("rated_power and rated_rotor_speed must be positive".into());
        }
        if !(self.a_ims > 0.0 && self.a_hss > 0.0) {
            return bad("thermal gains a_ims and a_hss must be positive".into());
        }
        if !(self.h >= 0.0 && self.c > 0.0) {
            return bad(format!("need h >= 0 and c > 0 (got h={}, c={})", self.h, self.c));
        }
        if !(self.h + self.c < 1.0) {
            return bad(format!("unstable thermal update: h + c = {} must be < 1", self.h + self.c));
        }
        if !(self.pitch_slope >= 0.0) {
            return bad("pitch_slope must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultScenario {
    pub turbine_id: String,
    pub failure_time: Timestamp,
    pub onset_lead_days: i64,
    /// Extra friction heat at failure, as a fraction of the healthy heat.
    pub severity: f64,
}

impl FaultScenario {
    /// Multiplier on the IMS heat input at time `t`: 1 before onset, rising
    /// linearly to `1 + severity` at the failure.
    pub fn multiplier_at(&self, t: Timestamp) -> f64 {
        let onset = self.failure_time.plus_days(-self.onset_lead_days);
        if t < onset || t >= self.failure_time {
            return 1.0;
        }
        let span = (self.failure_time.0 - onset.0) as f64;
        1.0 + self.severity * (t.0 - onset.0) as f64 / span
    }
}

/// Per-channel measurement noise standard deviations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseLevels {
    pub wind_speed: f64,
    pub active_power: f64,
    pub rotor_speed: f64,
    pub pitch_angle: f64,
    pub ambient_temp: f64,
    pub hss_temp: f64,
    pub ims_temp: f64,
}

impl NoiseLevels {
    pub fn zero() -> Self {
        NoiseLevels {
            wind_speed: 0.0,
            active_power: 0.0,
            rotor_speed: 0.0,
            pitch_angle: 0.0,
            ambient_temp: 0.0,
            hss_temp: 0.0,
            ims_temp: 0.0,
        }
    }

    fn as_array(&self) -> [f64; 7] {
        [
            self.wind_speed,
            self.active_power,
            self.rotor_speed,
            self.pitch_angle,
            self.ambient_temp,
            self.hss_temp,
            self.ims_temp,
        ]
    }
}

impl Default for NoiseLevels {
    fn default() -> Self {
        NoiseLevels {
            wind_speed: 0.3,
            active_power: 20.0,
            rotor_speed: 0.2,
            pitch_angle: 0.3,
            ambient_temp: 0.3,
            hss_temp: 0.3,
            ims_temp: 0.3,
        }
    }
}

/// Log-normal AR(1) wind speed with diurnal and seasonal modulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindParams {
    pub mean_speed: f64,
    /// lag-1 coefficient of the latent log process, per step
    pub ar_coefficient: f64,
    /// stationary std of the latent log process
    pub log_sigma: f64,
    pub seasonal_amplitude: f64,
    pub diurnal_amplitude: f64,
}

impl Default for WindParams {
    fn default() -> Self {
        WindParams {
            mean_speed: 8.0,
            ar_coefficient: 0.985,
            log_sigma: 0.5,
            seasonal_amplitude: 0.15,
            diurnal_amplitude: 0.1,
        }
    }
}

impl WindParams {
    fn validate(&self) -> Result<()> {
        if !(self.mean_speed >= 0.0)
            || !(0.0..1.0).contains(&self.ar_coefficient)
            || !(self.log_sigma >= 0.0)
            || !(0.0..1.0).contains(&self.seasonal_amplitude.abs())
            || !(0.0..1.0).contains(&(self.seasonal_amplitude.abs() + self.diurnal_amplitude.abs()))
        {
            return Err(Error::InvalidConfig(format!("invalid wind parameters {self:?}")));
        }
        Ok(())
    }

    fn modulation(&self, t: Timestamp) -> f64 {
        let year_phase = t.0 as f64 / SECONDS_PER_YEAR;
        let day_phase = t.0.rem_euclid(SECONDS_PER_DAY) as f64 / SECONDS_PER_DAY as f64;
        // windier in winter and in the afternoon
        1.0 + self.seasonal_amplitude * (TAU * (year_phase - 0.02)).cos()
            + self.diurnal_amplitude * (TAU * (day_phase - 0.375)).sin()
    }

    /// Generates `n_steps` wind speeds starting at `start`.
    pub fn generate(&self, rng: &mut impl Rng, start: Timestamp, n_steps: usize, resolution_s: i64) -> Vec<f64> {
        let phi = self.ar_coefficient;
        let innovation = self.log_sigma * (1.0 - phi * phi).sqrt();
        let mut x: f64 = self.log_sigma * rng.sample::<f64, _>(StandardNormal);
        let bias = 0.5 * self.log_sigma * self.log_sigma;
        (0..n_steps)
            .map(|k| {
                if k > 0 {
                    x = phi * x + innovation * rng.sample::<f64, _>(StandardNormal);
                }
                let t = start.plus_seconds(k as i64 * resolution_s);
                (self.mean_speed * self.modulation(t) * (x - bias).exp()).max(0.0)
            })
            .collect()
    }
}

/// Site ambient temperature: seasonal and diurnal cycles plus AR(1) weather.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AmbientParams {
    pub mean: f64,
    pub seasonal_amplitude: f64,
    pub diurnal_amplitude: f64,
    pub weather_std: f64,
    pub weather_ar: f64,
}

impl Default for AmbientParams {
    fn default() -> Self {
        AmbientParams {
            mean: 12.0,
            seasonal_amplitude: 8.0,
            diurnal_amplitude: 3.0,
            weather_std: 2.5,
            weather_ar: 0.998,
        }
    }
}

impl AmbientParams {
    fn validate(&self) -> Result<()> {
        if !self.mean.is_finite() || !(self.weather_std >= 0.0) || !(0.0..1.0).contains(&self.weather_ar) {
            return Err(Error::InvalidConfig(format!("invalid ambient parameters {self:?}")));
        }
        Ok(())
    }

    pub fn generate(&self, rng: &mut impl Rng, start: Timestamp, n_steps: usize, resolution_s: i64) -> Vec<f64> {
        let phi = self.weather_ar;
        let innovation = self.weather_std * (1.0 - phi * phi).sqrt();
        let mut w: f64 = self.weather_std * rng.sample::<f64, _>(StandardNormal);
        (0..n_steps)
            .map(|k| {
                if k > 0 {
                    w = phi * w + innovation * rng.sample::<f64, _>(StandardNormal);
                }
                let t = start.plus_seconds(k as i64 * resolution_s);
                let year_phase = t.0 as f64 / SECONDS_PER_YEAR;
                let day_phase = t.0.rem_euclid(SECONDS_PER_DAY) as f64 / SECONDS_PER_DAY as f64;
                // coldest mid-January, warmest mid-July, peak mid-afternoon
                self.mean - self.seasonal_amplitude * (TAU * (year_phase - 0.04)).cos()
                    + self.diurnal_amplitude * (TAU * (day_phase - 0.375)).sin()
                    + w
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub n_turbines: usize,
    pub period: Interval,
    #[serde(default = "default_resolution")]
    pub resolution_s: i64,
    #[serde(default)]
    pub params: TurbineParams,
    #[serde(default)]
    pub faults: Vec<FaultScenario>,
    #[serde(default)]
    pub noise: NoiseLevels,
    #[serde(default)]
    pub wind: WindParams,
    #[serde(default)]
    pub ambient: AmbientParams,
    /// Days a failed turbine stays down before resuming healthy operation.
    /// Absent means down until the end of the period.
    #[serde(default)]
    pub repair_gap_days: Option<i64>,
}

fn default_resolution() -> i64 {
    DEFAULT_RESOLUTION_S
}

pub fn turbine_id(index: usize) -> String {
    format!("T{:02}", index + 1)
}

fn utc(y: i32, m: u32, d: u32) -> Timestamp {
    let dt = chrono::NaiveDate::from_ymd_opt(y, m, d)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid calendar date");
    Timestamp(dt.and_utc().timestamp())
}

impl Default for SimConfig {
    /// Desk-scale farm: 5 turbines over 2010-2012 with five IMS bearing
    /// failures in 2012.
    fn default() -> Self {
        let fault = |turbine: usize, y, m, d| FaultScenario {
            turbine_id: turbine_id(turbine),
            failure_time: utc(y, m, d),
            onset_lead_days: 90,
            severity: 0.3,
        };
        SimConfig {
            seed: 2012,
            n_turbines: 5,
            period: Interval {
                start: utc(2010, 1, 1),
                end: utc(2013, 1, 1),
            },
            resolution_s: DEFAULT_RESOLUTION_S,
            params: TurbineParams::default(),
            faults: vec![
                fault(0, 2012, 3, 20),
                fault(1, 2012, 5, 25),
                fault(2, 2012, 7, 10),
                fault(3, 2012, 9, 20),
                fault(2, 2012, 12, 5),
            ],
            noise: NoiseLevels::default(),
            wind: WindParams::default(),
            ambient: AmbientParams::default(),
            repair_gap_days: Some(30),
        }
    }
}

impl SimConfig {
    /// Parses and validates a scenario file.
    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: SimConfig = toml::from_str(s).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&s).map_err(|e| match e {
            Error::InvalidConfig(m) => Error::InvalidConfig(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.wind.validate()?;
        self.ambient.validate()?;
        if self.n_turbines == 0 {
            return Err(Error::InvalidConfig("n_turbines must be at least 1".into()));
        }
        if self.resolution_s <= 0 {
            return Err(Error::InvalidConfig("resolution_s must be positive".into()));
        }
        if self.period.start >= self.period.end {
            return Err(Error::InvalidConfig(format!("empty period {}", self.period)));
        }
        if !self.period.start.is_aligned(self.resolution_s) {
            return Err(Error::InvalidConfig(format!(
                "period start {} not aligned to resolution",
                self.period.start
            )));
        }
        if self.noise.as_array().iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::InvalidConfig("noise levels must be non-negative".into()));
        }
        if let Some(gap) = self.repair_gap_days {
            if gap < 0 {
                return Err(Error::InvalidConfig("repair_gap_days must be non-negative".into()));
            }
        }
        let ids: Vec<String> = (0..self.n_turbines).map(turbine_id).collect();
        for f in &self.faults {
            if !ids.contains(&f.turbine_id) {
                return Err(Error::InvalidConfig(format!(
                    "fault names unknown turbine {} (simulated: {})",
                    f.turbine_id,
                    ids.join(",")
                )));
            }
            if f.onset_lead_days <= 0 || !(f.severity > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "fault on {} needs onset_lead_days > 0 and severity > 0",
                    f.turbine_id
                )));
            }
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        let span = self.period.end.0 - self.period.start.0;
        ((span + self.resolution_s - 1) / self.resolution_s) as usize
    }
}

/// Piecewise power curve: zero outside `[cut_in, cut_out)`, cubic between
/// cut-in and rated, flat at rated power up to cut-out.
pub fn power_curve(wind: f64, p: &TurbineParams) -> f64 {
    if wind < p.cut_in || wind >= p.cut_out {
        0.0
    } else if wind >= p.rated {
        p.rated_power
    } else {
        let num = wind.powi(3) - p.cut_in.powi(3);
        let den = p.rated.powi(3) - p.cut_in.powi(3);
        p.rated_power * num / den
    }
}

pub fn rotor_speed_curve(wind: f64, p: &TurbineParams) -> f64 {
    if wind < p.cut_in || wind >= p.cut_out {
        0.0
    } else {
        p.rated_rotor_speed * (1.0 - (-2.5 * wind / p.rated).exp())
    }
}

pub fn pitch_curve(wind: f64, p: &TurbineParams) -> f64 {
    if wind >= p.cut_out {
        90.0
    } else if wind > p.rated {
        (p.pitch_slope * (wind - p.rated)).min(30.0)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThermalState {
    pub ims: f64,
    pub hss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThermalInputs {
    pub power_kw: f64,
    pub ambient: f64,
    pub fault_multiplier: f64,
}

/// One explicit step of the coupled two-node gearbox model. Fault heat only
/// enters the IMS node; the HSS node warms through the coupling term.
pub fn thermal_step(state: ThermalState, inputs: ThermalInputs, p: &TurbineParams) -> ThermalState {
    debug_assert!(inputs.fault_multiplier >= 1.0);
    let ThermalState { ims, hss } = state;
    ThermalState {
        ims: ims
            + p.a_ims * inputs.power_kw * inputs.fault_multiplier
            + p.h * (hss - ims)
            + p.c * (inputs.ambient - ims),
        hss: hss + p.a_hss * inputs.power_kw + p.h * (ims - hss) + p.c * (inputs.ambient - hss),
    }
}

/// Wind speed series starting at the epoch under default wind parameters.
pub fn wind_process(seed: u64, n_steps: usize, resolution_s: i64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    WindParams::default().generate(&mut rng, Timestamp(0), n_steps, resolution_s)
}

fn turbine_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn simulate_turbine(cfg: &SimConfig, index: usize, ambient: &[f64]) -> Result<TurbineSeries> {
    let id = turbine_id(index);
    let n = cfg.n_steps();
    let res = cfg.resolution_s;
    let start = cfg.period.start;
    let p = &cfg.params;
    let mut rng = turbine_rng(cfg.seed, index as u64 + 1);
    let wind = cfg.wind.generate(&mut rng, start, n, res);

    let faults: Vec<&FaultScenario> = cfg.faults.iter().filter(|f| f.turbine_id == id).collect();
    let downtime: Vec<(Timestamp, Timestamp)> = faults
        .iter()
        .map(|f| {
            let end = match cfg.repair_gap_days {
                Some(gap) => f.failure_time.plus_days(gap),
                None => Timestamp(i64::MAX),
            };
            (f.failure_time, end)
        })
        .collect();

    let sd = cfg.noise.as_array();
    let noise: Vec<Normal<f64>> = sd
        .iter()
        .map(|s| Normal::new(0.0, *s).map_err(|e| Error::InvalidConfig(e.to_string())))
        .collect::<Result<_>>()?;

    let mut timestamps = Vec::with_capacity(n);
    let mut cols: Vec<Vec<Option<f64>>> = (0..7).map(|_| Vec::with_capacity(n)).collect();
    let mut state = ThermalState {
        ims: ambient[0],
        hss: ambient[0],
    };
    for k in 0..n {
        let t = start.plus_seconds(k as i64 * res);
        let down = downtime.iter().any(|(a, b)| *a <= t && t < *b);
        let w = wind[k];
        let power = if down { 0.0 } else { power_curve(w, p) };
        let multiplier = faults.iter().map(|f| f.multiplier_at(t)).fold(1.0, f64::max);
        state = thermal_step(
            state,
            ThermalInputs {
                power_kw: power,
                ambient: ambient[k],
                fault_multiplier: multiplier,
            },
            p,
        );
        // noise is drawn on every step, emitted or not, so the stream stays
        // aligned with time
        let eps: [f64; 7] = std::array::from_fn(|i| noise[i].sample(&mut rng));
        if down {
            continue;
        }
        let truth = [
            w,
            power,
            rotor_speed_curve(w, p),
            pitch_curve(w, p),
            ambient[k],
            state.hss,
            state.ims,
        ];
        timestamps.push(t);
        for i in 0..7 {
            let v = truth[i] + eps[i];
            // wind speed is a magnitude
            let v = if i == 0 { v.max(0.0) } else { v };
            cols[i].push(Some(v));
        }
    }
    let names = [
        WIND_SPEED,
        ACTIVE_POWER,
        ROTOR_SPEED,
        PITCH_ANGLE,
        AMBIENT_TEMP,
        HSS_BEARING_TEMP,
        IMS_BEARING_TEMP,
    ];
    let channels: BTreeMap<String, Vec<Option<f64>>> =
        names.iter().map(|s| s.to_string()).zip(cols).collect();
    TurbineSeries::new(id, res, timestamps, channels)
}

/// Simulates the farm described by `cfg`. Output is identical for a given
/// seed regardless of the rayon thread count.
pub fn simulate_farm(cfg: &SimConfig) -> Result<(FarmDataset, Vec<FailureRecord>)> {
    cfg.validate()?;
    let n = cfg.n_steps();
    let mut site_rng = turbine_rng(cfg.seed, 0);
    let ambient = cfg.ambient.generate(&mut site_rng, cfg.period.start, n, cfg.resolution_s);
    let turbines = (0..cfg.n_turbines)
        .into_par_iter()
        .map(|i| simulate_turbine(cfg, i, &ambient))
        .collect::<Result<Vec<_>>>()?;
    let mut failures: Vec<FailureRecord> = cfg
        .faults
        .iter()
        .map(|f| FailureRecord {
            turbine_id: f.turbine_id.clone(),
            failure_time: f.failure_time,
            component: GEARBOX_IMS_BEARING.to_string(),
        })
        .collect();
    failures.sort_by(|a, b| {
        a.failure_time
            .cmp(&b.failure_time)
            .then_with(|| a.turbine_id.cmp(&b.turbine_id))
    });
    Ok((FarmDataset::new(turbines)?, failures))
}
