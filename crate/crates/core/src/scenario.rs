//! Scene geometry, array / OFDM configuration and pair indexing.
//!
//! Scenarios are read from a versioned JSON document (`"v": 1`, unknown keys
//! rejected). Coordinates are meters in a z-up frame whose origin is the
//! ground-level center of the scene.

use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Speed of light in m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

pub const SCHEMA_VERSION: u32 = 1;

/// A point in the scene frame, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Point3(pub [f64; 3]);

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Point3([x, y, z])
    }

    pub fn x(&self) -> f64 {
        self.0[0]
    }

    pub fn y(&self) -> f64 {
        self.0[1]
    }

    pub fn z(&self) -> f64 {
        self.0[2]
    }

    pub fn sub(&self, other: &Point3) -> [f64; 3] {
        [
            self.0[0] - other.0[0],
            self.0[1] - other.0[1],
            self.0[2] - other.0[2],
        ]
    }

    pub fn distance(&self, other: &Point3) -> f64 {
        let d = self.sub(other);
        (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
    }
}

/// Rows x columns of a uniform planar array with half-wavelength spacing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayShape(pub usize, pub usize);

impl ArrayShape {
    pub fn rows(&self) -> usize {
        self.0
    }

    pub fn cols(&self) -> usize {
        self.1
    }

    pub fn len(&self) -> usize {
        self.0 * self.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Knobs of the geometric multipath substitute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelKnobs {
    /// Amplitude reflection coefficient of the UAV (diffuse).
    pub rho_uav: f64,
    /// Amplitude reflection coefficient of static scatterers.
    pub rho_scatterer: f64,
    /// Effective scattering area of the UAV in m^2.
    pub uav_area_m2: f64,
    /// Effective scattering area of each static scatterer in m^2.
    pub scatterer_area_m2: f64,
    /// A pair is labelled UAV-affected when its UAV path is within this many
    /// dB of the strongest path of the pair.
    pub power_floor_db: f64,
    /// Distances are clamped to at least this value before computing losses.
    pub min_distance_m: f64,
    /// Restrict UAV scattering to its four vertical side faces.
    pub uav_facets: bool,
}

impl Default for ChannelKnobs {
    fn default() -> Self {
        ChannelKnobs {
            rho_uav: 0.5,
            rho_scatterer: 0.5,
            uav_area_m2: 2.0,
            scatterer_area_m2: 4.0,
            power_floor_db: 40.0,
            min_distance_m: 1.0,
            uav_facets: true,
        }
    }
}

/// Full scene description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    /// Schema version, must be 1.
    pub v: u32,
    pub bs_positions: Vec<Point3>,
    pub cpe_positions: Vec<Point3>,
    pub uav_altitude: f64,
    /// Half-width of the square the UAV x-y position is drawn from.
    pub uav_xy_range: f64,
    pub rx_array: ArrayShape,
    pub tx_array: ArrayShape,
    pub carrier_hz: f64,
    pub bandwidth_hz: f64,
    pub subcarrier_spacing_hz: f64,
    pub n_subcarriers: usize,
    /// Number of delay bins kept after the angle-delay transform.
    pub delay_keep: usize,
    #[serde(default)]
    pub scatterer_positions: Vec<Point3>,
    #[serde(default)]
    pub noise_snr_db: Option<f64>,
    #[serde(default)]
    pub channel: ChannelKnobs,
}

impl Scenario {
    /// Parses and validates a scenario JSON document.
    pub fn from_json_str(text: &str) -> Result<Scenario> {
        let scenario: Scenario = serde_json::from_str(text).map_err(|e| Error::ConfigParse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<()> {
        fn inv(field: &'static str, message: impl Into<String>) -> Error {
            Error::Invariant {
                field,
                message: message.into(),
            }
        }
        if self.v != SCHEMA_VERSION {
            return Err(inv("v", format!("unsupported schema version {}", self.v)));
        }
        if self.bs_positions.is_empty() {
            return Err(inv("bs_positions", "at least one base station is required"));
        }
        if self.cpe_positions.is_empty() {
            return Err(inv("cpe_positions", "at least one CPE is required"));
        }
        if self.bs_positions.len() > u16::MAX as usize || self.cpe_positions.len() > u16::MAX as usize
        {
            return Err(inv("bs_positions", "too many nodes"));
        }
        for (field, arr) in [("rx_array", self.rx_array), ("tx_array", self.tx_array)] {
            if arr.rows() == 0 || arr.cols() == 0 {
                return Err(inv(field, "array rows and cols must be >= 1"));
            }
            if arr.len() > u16::MAX as usize {
                return Err(inv(field, "array too large"));
            }
        }
        if self.n_subcarriers == 0 || self.n_subcarriers > u16::MAX as usize {
            return Err(inv("n_subcarriers", "must be in 1..=65535"));
        }
        if self.delay_keep == 0 || self.delay_keep > self.n_subcarriers {
            return Err(inv(
                "delay_keep",
                format!(
                    "must be in 1..={} (n_subcarriers), got {}",
                    self.n_subcarriers, self.delay_keep
                ),
            ));
        }
        let positive = [
            ("carrier_hz", self.carrier_hz),
            ("bandwidth_hz", self.bandwidth_hz),
            ("subcarrier_spacing_hz", self.subcarrier_spacing_hz),
        ];
        for (field, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(inv(field, format!("must be positive and finite, got {value}")));
            }
        }
        let occupied = self.n_subcarriers as f64 * self.subcarrier_spacing_hz;
        if occupied > self.bandwidth_hz + self.subcarrier_spacing_hz {
            return Err(inv(
                "bandwidth_hz",
                format!(
                    "{} subcarriers x {} Hz = {occupied} Hz exceeds bandwidth {} Hz",
                    self.n_subcarriers, self.subcarrier_spacing_hz, self.bandwidth_hz
                ),
            ));
        }
        if !(self.uav_xy_range.is_finite() && self.uav_xy_range >= 0.0) {
            return Err(inv("uav_xy_range", "must be finite and >= 0"));
        }
        if !self.uav_altitude.is_finite() {
            return Err(inv("uav_altitude", "must be finite"));
        }
        let all_points = self
            .bs_positions
            .iter()
            .chain(&self.cpe_positions)
            .chain(&self.scatterer_positions);
        for p in all_points {
            if p.0.iter().any(|c| !c.is_finite()) {
                return Err(inv("positions", "coordinates must be finite"));
            }
        }
        if let Some(snr) = self.noise_snr_db {
            if !snr.is_finite() {
                return Err(inv("noise_snr_db", "must be finite"));
            }
        }
        let k = &self.channel;
        if !(k.power_floor_db >= 0.0 && k.power_floor_db.is_finite()) {
            return Err(inv("channel.power_floor_db", "must be >= 0"));
        }
        if !(k.min_distance_m > 0.0) {
            return Err(inv("channel.min_distance_m", "must be > 0"));
        }
        for (field, value) in [
            ("channel.rho_uav", k.rho_uav),
            ("channel.rho_scatterer", k.rho_scatterer),
            ("channel.uav_area_m2", k.uav_area_m2),
            ("channel.scatterer_area_m2", k.scatterer_area_m2),
        ] {
            if !(value.is_finite() && value > 0.0) {
                return Err(inv(field, "must be positive"));
            }
        }
        Ok(())
    }

    /// Number of base stations (M).
    pub fn n_bs(&self) -> usize {
        self.bs_positions.len()
    }

    /// Number of CPEs (N).
    pub fn n_cpe(&self) -> usize {
        self.cpe_positions.len()
    }

    pub fn n_pairs(&self) -> usize {
        self.n_bs() * self.n_cpe()
    }

    /// Receive antennas per BS (N_r).
    pub fn n_rx(&self) -> usize {
        self.rx_array.len()
    }

    /// Transmit antennas per CPE (N_t).
    pub fn n_tx(&self) -> usize {
        self.tx_array.len()
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_hz
    }

    /// Baseband frequency offset of subcarrier `c` relative to the carrier.
    pub fn subcarrier_offset_hz(&self, c: usize) -> f64 {
        (c as f64 - (self.n_subcarriers / 2) as f64) * self.subcarrier_spacing_hz
    }

    /// All pairs in flat-index order.
    pub fn pairs(&self) -> Vec<PairId> {
        let n = self.n_cpe();
        (1..=self.n_bs())
            .flat_map(|m| (1..=n).map(move |cpe| PairId::new(m, cpe, n).expect("in range")))
            .collect()
    }

    pub fn pair_from_flat(&self, flat: usize) -> Result<PairId> {
        PairId::from_flat(flat, self.n_bs(), self.n_cpe())
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn hash_hex(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("scenario serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    /// Full-scale profile: 2 BSs, 16 CPEs, 8x8 BS UPA, 2x2 CPE UPA, 512
    /// subcarriers at 30 kHz in 20 MHz around 2.8 GHz, 64 delay bins kept.
    pub fn paper_profile() -> Scenario {
        let mut cpes = Vec::new();
        for gy in 0..4 {
            for gx in 0..4 {
                let x = -75.0 + 50.0 * gx as f64 + if gy % 2 == 0 { 8.0 } else { -8.0 };
                let y = -75.0 + 50.0 * gy as f64;
                cpes.push(Point3::new(x, y, 18.0));
            }
        }
        Scenario {
            v: SCHEMA_VERSION,
            bs_positions: vec![Point3::new(-95.0, -20.0, 100.0), Point3::new(95.0, 20.0, 100.0)],
            cpe_positions: cpes,
            uav_altitude: 60.0,
            uav_xy_range: 75.0,
            rx_array: ArrayShape(8, 8),
            tx_array: ArrayShape(2, 2),
            carrier_hz: 2.8e9,
            bandwidth_hz: 20e6,
            subcarrier_spacing_hz: 30e3,
            n_subcarriers: 512,
            delay_keep: 64,
            scatterer_positions: desk_scatterers(),
            noise_snr_db: None,
            channel: ChannelKnobs::default(),
        }
    }

    /// Reduced profile used for laptop-scale runs: 2 BSs, 4 CPEs, 2x4 BS
    /// UPA, 1x2 CPE UPA, 64 subcarriers at 120 kHz, 16 delay bins kept.
    ///
    /// The 16 kept bins span ~4.2 us of delay, the same window as 64 bins
    /// of the full-scale profile.
    pub fn desk_profile() -> Scenario {
        Scenario {
            v: SCHEMA_VERSION,
            bs_positions: vec![Point3::new(-95.0, -20.0, 100.0), Point3::new(95.0, 20.0, 100.0)],
            cpe_positions: vec![
                Point3::new(-45.0, 55.0, 18.0),
                Point3::new(50.0, 60.0, 18.0),
                Point3::new(-55.0, -50.0, 18.0),
                Point3::new(45.0, -55.0, 18.0),
            ],
            uav_altitude: 60.0,
            uav_xy_range: 75.0,
            rx_array: ArrayShape(2, 4),
            tx_array: ArrayShape(1, 2),
            carrier_hz: 2.8e9,
            bandwidth_hz: 7.68e6,
            subcarrier_spacing_hz: 120e3,
            n_subcarriers: 64,
            delay_keep: 16,
            scatterer_positions: desk_scatterers(),
            noise_snr_db: None,
            channel: ChannelKnobs::default(),
        }
    }
}

fn desk_scatterers() -> Vec<Point3> {
    vec![
        Point3::new(-10.0, 95.0, 12.0),
        Point3::new(92.0, -15.0, 12.0),
        Point3::new(5.0, -95.0, 12.0),
        Point3::new(-92.0, 40.0, 12.0),
    ]
}

/// Reads and validates a scenario file.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Scenario::from_json_str(&text)
}

/// Draws `(x, y, uav_altitude)` with x, y uniform on `[-r, r]`.
pub fn sample_uav_position<R: Rng + ?Sized>(s: &Scenario, rng: &mut R) -> Point3 {
    let r = s.uav_xy_range;
    if r == 0.0 {
        return Point3::new(0.0, 0.0, s.uav_altitude);
    }
    let x = rng.gen_range(-r..=r);
    let y = rng.gen_range(-r..=r);
    Point3::new(x, y, s.uav_altitude)
}

/// `N(m-1)+n` for 1-based BS index `m` and CPE index `n`.
pub fn flat_pair_index(m: usize, n: usize, n_cpe: usize) -> Result<usize> {
    if m == 0 || n == 0 || n > n_cpe {
        return Err(Error::OutOfRange(format!(
            "pair ({m}, {n}) with N = {n_cpe}"
        )));
    }
    Ok(n_cpe * (m - 1) + n)
}

/// A BS-CPE pair, 1-based on both sides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PairId {
    pub m: usize,
    pub n: usize,
    pub flat: usize,
}

impl PairId {
    pub fn new(m: usize, n: usize, n_cpe: usize) -> Result<PairId> {
        let flat = flat_pair_index(m, n, n_cpe)?;
        Ok(PairId { m, n, flat })
    }

    pub fn from_flat(flat: usize, n_bs: usize, n_cpe: usize) -> Result<PairId> {
        if flat == 0 || n_cpe == 0 || flat > n_bs * n_cpe {
            return Err(Error::OutOfRange(format!(
                "flat pair index {flat} outside 1..={}",
                n_bs * n_cpe
            )));
        }
        let m = (flat - 1) / n_cpe + 1;
        let n = (flat - 1) % n_cpe + 1;
        Ok(PairId { m, n, flat })
    }

    /// Zero-based position in flat order.
    pub fn slot(&self) -> usize {
        self.flat - 1
    }
}

impl fmt::Display for PairId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.m, self.n)
    }
}
