//! JSON configuration files.
//!
//! Field names carry their units (`pmax_dbm`, `rate_L_bps`, ...). Everything
//! is converted to the solver units (W, nats/s) once, in
//! [`SystemFile::to_config`]. The QoS requirements have no defaults; every
//! other field defaults to the 64-antenna, 40-RB reference system.

use std::path::Path;

use serde::{Deserialize, Serialize};

use rballoc_core::sysmodel::{bps_to_nats, dbm_to_watt};
use rballoc_core::SystemConfig;
use rballoc_learn::TrainConfig;

use crate::{HarnessError, Result};

/// One value for every user, or one value per user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerUser {
    Same(f64),
    Each(Vec<f64>),
}

impl PerUser {
    fn expand(&self, users: usize, field: &str) -> Result<Vec<f64>> {
        match self {
            Self::Same(v) => Ok(vec![*v; users]),
            Self::Each(v) if v.len() == users => Ok(v.clone()),
            Self::Each(v) => Err(HarnessError::Usage(format!(
                "invalid config field `{field}`: {} values for {users} users",
                v.len()
            ))),
        }
    }
}

fn d_users() -> usize {
    2
}
fn d_rbs() -> usize {
    40
}
fn d_subcarriers() -> usize {
    12
}
fn d_spacing() -> f64 {
    30e3
}
fn d_slot() -> f64 {
    0.5e-3
}
fn d_antennas() -> usize {
    64
}
fn d_pmax() -> f64 {
    23.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemFile {
    #[serde(default = "d_users")]
    pub users: usize,
    #[serde(default = "d_rbs")]
    pub rbs: usize,
    #[serde(default = "d_subcarriers")]
    pub subcarriers_per_rb: usize,
    #[serde(default = "d_spacing")]
    pub subcarrier_spacing_hz: f64,
    #[serde(default = "d_slot")]
    pub slot_s: f64,
    #[serde(default = "d_antennas")]
    pub rx_antennas: usize,
    #[serde(default = "d_pmax")]
    pub pmax_dbm: f64,
    #[serde(rename = "rate_L_bps")]
    pub rate_l_bps: PerUser,
    #[serde(rename = "rate_S_bps")]
    pub rate_s_bps: PerUser,
    pub eps: PerUser,
    #[serde(default)]
    pub link: LinkFile,
}

/// Propagation and channel-model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkFile {
    pub distance_m: f64,
    pub noise_psd_dbm_hz: f64,
    pub noise_figure_db: f64,
    pub penetration_db: f64,
    pub interference_margin_db: f64,
    pub path_count: usize,
    pub aoa_half_range_rad: f64,
    pub max_path_delay_s: f64,
}

impl Default for LinkFile {
    fn default() -> Self {
        let c = SystemConfig::default();
        Self {
            distance_m: c.distance_m,
            noise_psd_dbm_hz: c.noise_psd_dbm_hz,
            noise_figure_db: c.noise_figure_db,
            penetration_db: c.penetration_db,
            interference_margin_db: c.interference_margin_db,
            path_count: c.path_count,
            aoa_half_range_rad: c.aoa_half_range_rad,
            max_path_delay_s: c.max_path_delay_s,
        }
    }
}

impl SystemFile {
    /// Reference system; `eps` is 1e−5 for the numerical solvers, or 5e−6
    /// when training (leaving the same budget for constraint violations).
    pub fn reference(learning: bool) -> Self {
        Self {
            users: d_users(),
            rbs: d_rbs(),
            subcarriers_per_rb: d_subcarriers(),
            subcarrier_spacing_hz: d_spacing(),
            slot_s: d_slot(),
            rx_antennas: d_antennas(),
            pmax_dbm: d_pmax(),
            rate_l_bps: PerUser::Same(6e6),
            rate_s_bps: PerUser::Same(512e3),
            eps: PerUser::Same(if learning { 5e-6 } else { 1e-5 }),
            link: LinkFile::default(),
        }
    }

    /// Converts to solver units and validates.
    pub fn to_config(&self) -> Result<SystemConfig> {
        let l = &self.link;
        let to_nats = |v: Vec<f64>| v.into_iter().map(bps_to_nats).collect();
        let config = SystemConfig {
            users: self.users,
            rbs: self.rbs,
            subcarriers_per_rb: self.subcarriers_per_rb,
            subcarrier_spacing_hz: self.subcarrier_spacing_hz,
            slot_s: self.slot_s,
            rx_antennas: self.rx_antennas,
            pmax_w: dbm_to_watt(self.pmax_dbm),
            rate_l: to_nats(self.rate_l_bps.expand(self.users, "rate_L_bps")?),
            rate_s: to_nats(self.rate_s_bps.expand(self.users, "rate_S_bps")?),
            eps: self.eps.expand(self.users, "eps")?,
            distance_m: l.distance_m,
            noise_psd_dbm_hz: l.noise_psd_dbm_hz,
            noise_figure_db: l.noise_figure_db,
            penetration_db: l.penetration_db,
            interference_margin_db: l.interference_margin_db,
            path_count: l.path_count,
            aoa_half_range_rad: l.aoa_half_range_rad,
            max_path_delay_s: l.max_path_delay_s,
        };
        config.validate().map_err(|e| HarnessError::Usage(format!("invalid config: {e}")))?;
        Ok(config)
    }
}

/// Top-level configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub system: SystemFile,
    #[serde(default)]
    pub train: TrainConfig,
}

impl ConfigFile {
    pub fn reference(learning: bool) -> Self {
        Self {
            system: SystemFile::reference(learning),
            train: TrainConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: Self =
            serde_json::from_str(text).map_err(|e| HarnessError::Usage(format!("invalid config: {e}")))?;
        file.system.to_config()?;
        file.train
            .validate()
            .map_err(|e| HarnessError::Usage(format!("invalid config: {e}")))?;
        Ok(file)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// System and training configuration in solver units.
    pub fn resolve(&self) -> Result<(SystemConfig, TrainConfig)> {
        Ok((self.system.to_config()?, self.train.clone()))
    }
}
