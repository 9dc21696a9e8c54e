//! System configuration, link budget and channel generation.
//!
//! Channels follow a Saleh-Valenzuela style multipath model: each user sees
//! `path_count` scattered paths, each with a circularly-symmetric Gaussian
//! gain, an angle of arrival at a half-wavelength uniform linear array and a
//! propagation delay. The delay turns into a per-RB phase rotation evaluated
//! at the RB centre frequency, so gains are flat inside one RB and selective
//! across RBs.

use std::f64::consts::{LN_2, PI};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Physical and QoS parameters. Rates are in nats/s, powers in W.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub users: usize,
    pub rbs: usize,
    pub subcarriers_per_rb: usize,
    pub subcarrier_spacing_hz: f64,
    pub slot_s: f64,
    pub rx_antennas: usize,
    pub pmax_w: f64,
    /// LBT rate requirement per user (nats/s).
    pub rate_l: Vec<f64>,
    /// SBT rate requirement per user (nats/s).
    pub rate_s: Vec<f64>,
    /// SBT decoding error probability per user.
    pub eps: Vec<f64>,
    pub distance_m: f64,
    pub noise_psd_dbm_hz: f64,
    pub noise_figure_db: f64,
    pub penetration_db: f64,
    pub interference_margin_db: f64,
    pub path_count: usize,
    pub aoa_half_range_rad: f64,
    pub max_path_delay_s: f64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        let users = 2;
        Self {
            users,
            rbs: 40,
            subcarriers_per_rb: 12,
            subcarrier_spacing_hz: 30e3,
            slot_s: 0.5e-3,
            rx_antennas: 64,
            pmax_w: dbm_to_watt(23.0),
            rate_l: vec![6e6 * LN_2; users],
            rate_s: vec![512e3 * LN_2; users],
            eps: vec![1e-5; users],
            distance_m: 150.0,
            noise_psd_dbm_hz: -174.0,
            noise_figure_db: 5.0,
            penetration_db: 20.0,
            interference_margin_db: 2.0,
            path_count: 10,
            aoa_half_range_rad: PI / 3.0,
            max_path_delay_s: 1e-6,
        }
    }
}

pub fn dbm_to_watt(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn bps_to_nats(bps: f64) -> f64 {
    bps * LN_2
}

pub fn nats_to_bps(nats: f64) -> f64 {
    nats / LN_2
}

fn invalid(field: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidConfig {
        field,
        reason: reason.into(),
    }
}

fn positive(field: &'static str, value: f64) -> Result<()> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(invalid(field, format!("must be positive and finite, got {value}")))
    }
}

impl SystemConfig {
    /// Bandwidth of one RB in Hz (`L·B`).
    pub fn lb(&self) -> f64 {
        self.subcarriers_per_rb as f64 * self.subcarrier_spacing_hz
    }

    /// Replaces every per-user requirement with the same value.
    pub fn with_requirements(mut self, rate_l: f64, rate_s: f64, eps: f64) -> Self {
        self.rate_l = vec![rate_l; self.users];
        self.rate_s = vec![rate_s; self.users];
        self.eps = vec![eps; self.users];
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.users == 0 {
            return Err(invalid("users", "must be at least 1"));
        }
        if self.rbs == 0 {
            return Err(invalid("rbs", "must be at least 1"));
        }
        if self.subcarriers_per_rb == 0 {
            return Err(invalid("subcarriers_per_rb", "must be at least 1"));
        }
        if self.rx_antennas == 0 {
            return Err(invalid("rx_antennas", "must be at least 1"));
        }
        if self.path_count == 0 {
            return Err(invalid("path_count", "must be at least 1"));
        }
        positive("subcarrier_spacing_hz", self.subcarrier_spacing_hz)?;
        positive("slot_s", self.slot_s)?;
        positive("pmax_w", self.pmax_w)?;
        positive("distance_m", self.distance_m)?;
        if !(self.max_path_delay_s >= 0.0 && self.max_path_delay_s.is_finite()) {
            return Err(invalid("max_path_delay_s", "must be non-negative"));
        }
        if !(self.aoa_half_range_rad >= 0.0 && self.aoa_half_range_rad.is_finite()) {
            return Err(invalid("aoa_half_range_rad", "must be non-negative"));
        }
        for (field, values) in [
            ("rate_l", &self.rate_l),
            ("rate_s", &self.rate_s),
            ("eps", &self.eps),
        ] {
            if values.len() != self.users {
                return Err(invalid(
                    field,
                    format!("expected {} entries, got {}", self.users, values.len()),
                ));
            }
        }
        if let Some(r) = self.rate_l.iter().find(|r| !(**r >= 0.0 && r.is_finite())) {
            return Err(invalid("rate_l", format!("must be non-negative, got {r}")));
        }
        if let Some(r) = self.rate_s.iter().find(|r| !(**r >= 0.0 && r.is_finite())) {
            return Err(invalid("rate_s", format!("must be non-negative, got {r}")));
        }
        if let Some(e) = self.eps.iter().find(|e| !(**e > 0.0 && **e < 0.5)) {
            return Err(invalid("eps", format!("must lie in (0, 0.5), got {e}")));
        }
        Ok(())
    }
}

/// Noise-normalized effective channel gains `gamma[m][f]` (1/W).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelState {
    pub seed: u64,
    pub gamma: Vec<Vec<f64>>,
}

impl ChannelState {
    pub fn new(seed: u64, gamma: Vec<Vec<f64>>) -> Result<Self> {
        let rbs = gamma.first().map_or(0, Vec::len);
        if gamma.is_empty() || rbs == 0 {
            return Err(Error::Shape("channel needs at least one user and one RB".into()));
        }
        if gamma.iter().any(|row| row.len() != rbs) {
            return Err(Error::Shape("ragged gain matrix".into()));
        }
        if gamma.iter().flatten().any(|g| !(*g > 0.0 && g.is_finite())) {
            return Err(Error::Domain("channel gains must be positive and finite".into()));
        }
        Ok(Self { seed, gamma })
    }

    pub fn users(&self) -> usize {
        self.gamma.len()
    }

    pub fn rbs(&self) -> usize {
        self.gamma.first().map_or(0, Vec::len)
    }

    /// Returns a copy whose RB `k` is RB `order[k]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let gamma = self
            .gamma
            .iter()
            .map(|row| order.iter().map(|&f| row[f]).collect())
            .collect();
        Self {
            seed: self.seed,
            gamma,
        }
    }

    /// Fails unless the gain matrix is `config.users × config.rbs`.
    pub fn check_shape(&self, config: &SystemConfig) -> Result<()> {
        if self.users() != config.users || self.rbs() != config.rbs {
            return Err(Error::Shape(format!(
                "channel is {}x{}, config expects {}x{}",
                self.users(),
                self.rbs(),
                config.users,
                config.rbs
            )));
        }
        Ok(())
    }
}

/// Large-scale gain and per-RB noise power, both linear.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkBudget {
    pub alpha: f64,
    pub sigma2: f64,
}

impl LinkBudget {
    pub fn gain_scale(&self) -> f64 {
        self.alpha / self.sigma2
    }
}

/// Path loss `35.3 + 37.6·log10(d)` dB plus penetration loss; noise over the
/// full RB bandwidth `L·B` including noise figure and interference margin.
pub fn link_budget(config: &SystemConfig) -> Result<LinkBudget> {
    positive("distance_m", config.distance_m)?;
    let loss_db = 35.3 + 37.6 * config.distance_m.log10() + config.penetration_db;
    let noise_dbm = config.noise_psd_dbm_hz
        + 10.0 * config.lb().log10()
        + config.noise_figure_db
        + config.interference_margin_db;
    Ok(LinkBudget {
        alpha: 10f64.powf(-loss_db / 10.0),
        sigma2: dbm_to_watt(noise_dbm),
    })
}

/// Draws the small-scale channel vectors `h[m][f]` (length `Nr` each).
pub fn sample_channel_vectors(config: &SystemConfig, seed: u64) -> Result<Vec<Vec<Vec<Complex64>>>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let path_std = (0.5 / config.path_count as f64).sqrt();
    let rb_bw = config.lb();
    let mut out = Vec::with_capacity(config.users);
    for _ in 0..config.users {
        loop {
            let paths: Vec<(Complex64, f64, f64)> = (0..config.path_count)
                .map(|_| {
                    let re: f64 = rng.sample(StandardNormal);
                    let im: f64 = rng.sample(StandardNormal);
                    let aoa = config.aoa_half_range_rad * (2.0 * rng.random::<f64>() - 1.0);
                    let delay = config.max_path_delay_s * rng.random::<f64>();
                    (Complex64::new(re * path_std, im * path_std), aoa, delay)
                })
                .collect();
            let user: Vec<Vec<Complex64>> = (0..config.rbs)
                .map(|f| {
                    let freq = (f as f64 + 0.5) * rb_bw;
                    (0..config.rx_antennas)
                        .map(|n| {
                            paths
                                .iter()
                                .map(|&(g, aoa, delay)| {
                                    let phase = -PI * n as f64 * aoa.sin() - 2.0 * PI * freq * delay;
                                    g * Complex64::from_polar(1.0, phase)
                                })
                                .sum()
                        })
                        .collect()
                })
                .collect();
            let degenerate = user.iter().any(|h| {
                let norm: f64 = h.iter().map(Complex64::norm_sqr).sum();
                !(norm > 0.0 && norm.is_finite())
            });
            if !degenerate {
                out.push(user);
                break;
            }
        }
    }
    Ok(out)
}

/// Samples one channel realization; a pure function of `(config, seed)`.
pub fn sample_channel(config: &SystemConfig, seed: u64) -> Result<ChannelState> {
    let scale = link_budget(config)?.gain_scale();
    let gamma = sample_channel_vectors(config, seed)?
        .into_iter()
        .map(|user| {
            user.iter()
                .map(|h| scale * h.iter().map(Complex64::norm_sqr).sum::<f64>())
                .collect()
        })
        .collect();
    Ok(ChannelState { seed, gamma })
}

/// Seed of sample `index` in a dataset drawn with `base_seed` (53 bits, so
/// it survives a round trip through any JSON reader).
pub fn sample_seed(base_seed: u64, index: u64) -> u64 {
    let mut z = base_seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    (z ^ (z >> 31)) & ((1u64 << 53) - 1)
}

/// RB ordering fed to the learned policy.
///
/// Single user: descending gain. Several users: position `k` takes the
/// unplaced RB on which user `k mod M` has the largest gain. Ties go to the
/// smaller RB index.
pub fn sort_rbs(channel: &ChannelState) -> Vec<usize> {
    let users = channel.users();
    let rbs = channel.rbs();
    let mut placed = vec![false; rbs];
    let mut order = Vec::with_capacity(rbs);
    for k in 0..rbs {
        let row = &channel.gamma[k % users];
        let mut best: Option<usize> = None;
        for f in (0..rbs).filter(|&f| !placed[f]) {
            if best.is_none_or(|b| row[f] > row[b]) {
                best = Some(f);
            }
        }
        let f = best.expect("an unplaced RB remains");
        placed[f] = true;
        order.push(f);
    }
    order
}
