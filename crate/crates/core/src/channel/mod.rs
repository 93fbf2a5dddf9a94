//! Geometric multipath model and CFR synthesis.
//!
//! Every pair sees a line-of-sight path, one single-bounce path per static
//! scatterer and, when a UAV is in the scene, one CPE -> UAV -> BS bounce.
//! Bounce amplitudes follow a bistatic free-space model: the product of the
//! two segment losses `lambda / (4 pi d)` times the aperture gain
//! `4 pi A / lambda^2` of a scatterer with effective area `A`, times an
//! amplitude reflection coefficient. Per-antenna phases come from
//! half-wavelength UPA steering vectors evaluated at the carrier.
//!
//! The UAV scatters diffusely from four vertical side faces with normals
//! along the world x and y axes. A face contributes only when both the CPE
//! and the BS lie in front of it, so a UAV hovering inside the horizontal
//! rectangle spanned by a pair's BS and CPE leaves that pair unaffected.

mod dataset;

pub use dataset::{
    generate_dataset, generate_sample, read_dataset, read_dataset_header, DatasetHeader,
    DatasetManifest, DatasetReader, SampleRecord, DATASET_MAGIC, DATASET_VERSION,
};

use std::f64::consts::{PI, TAU};

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scenario::{ArrayShape, PairId, Point3, Scenario, SPEED_OF_LIGHT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PathKind {
    LoS,
    StaticBounce,
    UavBounce,
}

/// Azimuth / elevation in radians in a node's array frame.
///
/// The frame's x axis is the horizontal broadside direction, y the
/// horizontal axis along array columns and z is up (array rows).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Angles {
    pub azimuth: f64,
    pub elevation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub kind: PathKind,
    pub delay_s: f64,
    pub gain: Complex64,
    /// Arrival direction at the BS.
    pub aoa: Angles,
    /// Departure direction at the CPE.
    pub aod: Angles,
}

impl Path {
    pub fn power(&self) -> f64 {
        self.gain.norm_sqr()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathSet {
    pub pair: PairId,
    pub paths: Vec<Path>,
}

impl PathSet {
    pub fn uav_path(&self) -> Option<&Path> {
        self.paths.iter().find(|p| p.kind == PathKind::UavBounce)
    }

    pub fn los_path(&self) -> Option<&Path> {
        self.paths.iter().find(|p| p.kind == PathKind::LoS)
    }
}

/// Complex CFR of one pair, row-major `[N_r][N_t][N_c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CfrTensor {
    pub pair: PairId,
    pub n_rx: usize,
    pub n_tx: usize,
    pub n_sc: usize,
    pub data: Vec<Complex64>,
}

impl CfrTensor {
    pub fn zeros(pair: PairId, n_rx: usize, n_tx: usize, n_sc: usize) -> Self {
        CfrTensor {
            pair,
            n_rx,
            n_tx,
            n_sc,
            data: vec![Complex64::new(0.0, 0.0); n_rx * n_tx * n_sc],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.n_rx, self.n_tx, self.n_sc]
    }

    pub fn at(&self, i: usize, j: usize, c: usize) -> Complex64 {
        self.data[(i * self.n_tx + j) * self.n_sc + c]
    }
}

/// Horizontal unit vector from a node toward the scene center.
fn broadside(node: &Point3) -> [f64; 3] {
    let (x, y) = (-node.x(), -node.y());
    let norm = (x * x + y * y).sqrt();
    if norm < 1e-9 {
        [1.0, 0.0, 0.0]
    } else {
        [x / norm, y / norm, 0.0]
    }
}

/// Direction from `from` toward `to`, expressed in the array frame of `from`.
fn local_angles(from: &Point3, to: &Point3) -> Angles {
    let d = to.sub(from);
    let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    if norm < 1e-12 {
        return Angles::default();
    }
    let u = [d[0] / norm, d[1] / norm, d[2] / norm];
    let f = broadside(from);
    let h = [-f[1], f[0], 0.0];
    let along_f = u[0] * f[0] + u[1] * f[1];
    let along_h = u[0] * h[0] + u[1] * h[1];
    Angles {
        azimuth: along_h.atan2(along_f),
        elevation: u[2].clamp(-1.0, 1.0).asin(),
    }
}

/// Half-wavelength UPA steering vector, element index `row * cols + col`.
pub fn steering_vector(shape: ArrayShape, angles: Angles) -> Vec<Complex64> {
    let along_cols = angles.elevation.cos() * angles.azimuth.sin();
    let along_rows = angles.elevation.sin();
    let mut out = Vec::with_capacity(shape.len());
    for r in 0..shape.rows() {
        for c in 0..shape.cols() {
            let phase = PI * (r as f64 * along_rows + c as f64 * along_cols);
            out.push(Complex64::from_polar(1.0, phase));
        }
    }
    out
}

/// Builds the multipath set of one pair for an optional UAV position.
pub fn trace_paths(s: &Scenario, pair: PairId, uav: Option<&Point3>) -> PathSet {
    let bs = &s.bs_positions[pair.m - 1];
    let cpe = &s.cpe_positions[pair.n - 1];
    let lambda = s.wavelength();
    let clamp = |d: f64| d.max(s.channel.min_distance_m);
    let carrier_phase = |length: f64| Complex64::from_polar(1.0, -TAU * length / lambda);

    let mut paths = Vec::with_capacity(2 + s.scatterer_positions.len());
    let d0 = clamp(bs.distance(cpe));
    paths.push(Path {
        kind: PathKind::LoS,
        delay_s: d0 / SPEED_OF_LIGHT,
        gain: carrier_phase(d0) * (lambda / (4.0 * PI * d0)),
        aoa: local_angles(bs, cpe),
        aod: local_angles(cpe, bs),
    });

    let mut bounce = |kind, point: &Point3, rho: f64, area: f64| {
        let d1 = clamp(cpe.distance(point));
        let d2 = clamp(point.distance(bs));
        let amplitude = rho * area / (4.0 * PI * d1 * d2);
        paths.push(Path {
            kind,
            delay_s: (d1 + d2) / SPEED_OF_LIGHT,
            gain: carrier_phase(d1 + d2) * amplitude,
            aoa: local_angles(bs, point),
            aod: local_angles(cpe, point),
        });
    };
    for scatterer in &s.scatterer_positions {
        bounce(
            PathKind::StaticBounce,
            scatterer,
            s.channel.rho_scatterer,
            s.channel.scatterer_area_m2,
        );
    }
    if let Some(uav) = uav {
        let visibility = if s.channel.uav_facets {
            facet_weight(uav, cpe, bs)
        } else {
            1.0
        };
        if visibility > 0.0 {
            bounce(
                PathKind::UavBounce,
                uav,
                s.channel.rho_uav * visibility,
                s.channel.uav_area_m2,
            );
        }
    }
    PathSet { pair, paths }
}

/// Diffuse visibility of the UAV's side faces for a CPE -> UAV -> BS bounce:
/// the sum over faces of `sqrt(cos_in * cos_out)`, where both cosines must
/// be positive for a face to count.
pub fn facet_weight(uav: &Point3, cpe: &Point3, bs: &Point3) -> f64 {
    let unit = |to: &Point3| {
        let d = to.sub(uav);
        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if n < 1e-12 {
            [0.0; 3]
        } else {
            [d[0] / n, d[1] / n, d[2] / n]
        }
    };
    let (a, b) = (unit(cpe), unit(bs));
    let mut w = 0.0;
    for axis in 0..2 {
        for sign in [1.0, -1.0] {
            let (ca, cb) = (sign * a[axis], sign * b[axis]);
            if ca > 0.0 && cb > 0.0 {
                w += (ca * cb).sqrt();
            }
        }
    }
    w
}

/// Noise-free CFR of a path set: sum over paths of
/// `gain * a_rx(aoa)_i * a_tx(aod)_j * exp(-j 2 pi f_c tau)`.
pub fn synthesize_cfr(s: &Scenario, ps: &PathSet) -> CfrTensor {
    let (n_rx, n_tx, n_sc) = (s.n_rx(), s.n_tx(), s.n_subcarriers);
    let mut out = CfrTensor::zeros(ps.pair, n_rx, n_tx, n_sc);
    let mut ramp = vec![Complex64::new(0.0, 0.0); n_sc];
    for path in &ps.paths {
        let a_rx = steering_vector(s.rx_array, path.aoa);
        let a_tx = steering_vector(s.tx_array, path.aod);
        for (c, r) in ramp.iter_mut().enumerate() {
            *r = Complex64::from_polar(1.0, -TAU * s.subcarrier_offset_hz(c) * path.delay_s);
        }
        for (i, ar) in a_rx.iter().enumerate() {
            for (j, at) in a_tx.iter().enumerate() {
                let coeff = path.gain * ar * at;
                let base = (i * n_tx + j) * n_sc;
                for (dst, r) in out.data[base..base + n_sc].iter_mut().zip(&ramp) {
                    *dst += coeff * r;
                }
            }
        }
    }
    out
}

/// Adds complex white Gaussian noise at `snr_db` relative to the mean
/// per-entry power of `h`.
pub fn add_awgn<R: Rng + ?Sized>(h: &mut CfrTensor, snr_db: f64, rng: &mut R) {
    let signal = h.data.iter().map(|z| z.norm_sqr()).sum::<f64>() / h.data.len().max(1) as f64;
    if signal == 0.0 {
        return;
    }
    let sigma = (signal / 10f64.powf(snr_db / 10.0) / 2.0).sqrt();
    for z in &mut h.data {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        *z += Complex64::new(re * sigma, im * sigma);
    }
}

/// Checks a CFR against the scenario's shape.
pub fn check_cfr_shape(s: &Scenario, h: &CfrTensor) -> Result<()> {
    let expected = [s.n_rx(), s.n_tx(), s.n_subcarriers];
    if h.shape() != expected || h.data.len() != expected.iter().product::<usize>() {
        return Err(Error::shape("CFR tensor", &expected, &h.shape()));
    }
    Ok(())
}

/// Rotates every path by an independent phase drawn from `U[0, 2 pi)`.
pub fn augment_phase<R: Rng + ?Sized>(ps: &PathSet, rng: &mut R) -> PathSet {
    let mut out = ps.clone();
    for path in &mut out.paths {
        let theta = rng.gen::<f64>() * TAU;
        path.gain *= Complex64::from_polar(1.0, theta);
    }
    out
}

/// 1 when the pair carries a UAV bounce within `power_floor_db` of its
/// strongest path.
pub fn pair_label(ps: &PathSet, power_floor_db: f64) -> u8 {
    let Some(uav) = ps.uav_path() else {
        return 0;
    };
    let strongest = ps.paths.iter().map(Path::power).fold(0.0, f64::max);
    if strongest <= 0.0 || uav.power() <= 0.0 {
        return 0;
    }
    let below_db = 10.0 * (strongest / uav.power()).log10();
    u8::from(below_db <= power_floor_db)
}

/// Logical OR of the pair labels.
pub fn scene_label(pair_labels: &[bool]) -> u8 {
    u8::from(pair_labels.iter().any(|&b| b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::RngCore;

    fn bare_scenario() -> Scenario {
        let mut s = Scenario::desk_profile();
        s.scatterer_positions.clear();
        s
    }

    fn pair11(s: &Scenario) -> PairId {
        PairId::new(1, 1, s.n_cpe()).unwrap()
    }

    #[test]
    fn empty_clutter_gives_los_only() {
        let s = bare_scenario();
        let ps = trace_paths(&s, pair11(&s), None);
        assert_eq!(ps.paths.len(), 1);
        assert_eq!(ps.paths[0].kind, PathKind::LoS);
        let d = s.bs_positions[0].distance(&s.cpe_positions[0]);
        assert!((ps.paths[0].delay_s - d / SPEED_OF_LIGHT).abs() < 1e-18);
        assert!((ps.paths[0].gain.norm() - s.wavelength() / (4.0 * PI * d)).abs() < 1e-15);
    }

    #[test]
    fn uav_bounce_delay_matches_geometry() {
        let s = Scenario::desk_profile();
        let pair = PairId::new(2, 3, s.n_cpe()).unwrap();
        let uav = Point3::new(12.5, -70.0, 60.0);
        let ps = trace_paths(&s, pair, Some(&uav));
        let uavs: Vec<_> = ps.paths.iter().filter(|p| p.kind == PathKind::UavBounce).collect();
        assert_eq!(uavs.len(), 1);
        let cpe = s.cpe_positions[2].0;
        let bs = s.bs_positions[1].0;
        let seg = |a: [f64; 3], b: [f64; 3]| {
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
        };
        let expected = (seg(cpe, uav.0) + seg(uav.0, bs)) / SPEED_OF_LIGHT;
        assert!((uavs[0].delay_s - expected).abs() < 1e-18);
    }

    #[test]
    fn two_scatterers_three_paths() {
        let mut s = bare_scenario();
        s.scatterer_positions = vec![Point3::new(10.0, 10.0, 5.0), Point3::new(-20.0, 0.0, 5.0)];
        assert_eq!(trace_paths(&s, pair11(&s), None).paths.len(), 3);
    }

    #[test]
    fn empty_path_set_gives_zero_cfr() {
        let s = bare_scenario();
        let ps = PathSet { pair: pair11(&s), paths: vec![] };
        let h = synthesize_cfr(&s, &ps);
        assert!(h.data.iter().all(|z| z.norm() == 0.0));
        check_cfr_shape(&s, &h).unwrap();
    }

    #[test]
    fn broadside_zero_delay_path_is_constant() {
        let s = bare_scenario();
        let gain = Complex64::new(0.3, -0.7);
        let ps = PathSet {
            pair: pair11(&s),
            paths: vec![Path {
                kind: PathKind::LoS,
                delay_s: 0.0,
                gain,
                aoa: Angles::default(),
                aod: Angles::default(),
            }],
        };
        let h = synthesize_cfr(&s, &ps);
        for z in &h.data {
            assert!((z - gain).norm() < 1e-15);
        }
    }

    #[test]
    fn augment_preserves_amplitude_and_label() {
        let s = Scenario::desk_profile();
        let ps = trace_paths(&s, pair11(&s), Some(&Point3::new(-40.0, 40.0, 60.0)));
        let mut rng = substream(5, "test", 0);
        let aug = augment_phase(&ps, &mut rng);
        for (a, b) in ps.paths.iter().zip(&aug.paths) {
            assert_eq!(a.kind, b.kind);
            assert_eq!(a.delay_s, b.delay_s);
            assert_eq!(a.aoa, b.aoa);
            assert!((a.gain.norm() - b.gain.norm()).abs() <= 1e-15 * a.gain.norm());
        }
        assert_eq!(pair_label(&ps, 40.0), pair_label(&aug, 40.0));
    }

    struct ZeroRng;
    impl RngCore for ZeroRng {
        fn next_u32(&mut self) -> u32 {
            0
        }
        fn next_u64(&mut self) -> u64 {
            0
        }
        fn fill_bytes(&mut self, dest: &mut [u8]) {
            dest.fill(0)
        }
        fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
            dest.fill(0);
            Ok(())
        }
    }

    #[test]
    fn zero_phase_is_identity() {
        let s = Scenario::desk_profile();
        let ps = trace_paths(&s, pair11(&s), Some(&Point3::new(0.0, 0.0, 60.0)));
        assert_eq!(augment_phase(&ps, &mut ZeroRng), ps);
    }

    #[test]
    fn phases_are_uniform() {
        let s = bare_scenario();
        let ps = trace_paths(&s, pair11(&s), None);
        let reference = ps.paths[0].gain;
        let mut rng = substream(11, "test", 0);
        let n = 10_000;
        let mut acc = Complex64::new(0.0, 0.0);
        for _ in 0..n {
            let g = augment_phase(&ps, &mut rng).paths[0].gain / reference;
            acc += g;
        }
        assert!((acc / n as f64).norm() < 0.05);
    }

    fn synthetic_set(kinds_powers_db: &[(PathKind, f64)]) -> PathSet {
        let s = bare_scenario();
        PathSet {
            pair: pair11(&s),
            paths: kinds_powers_db
                .iter()
                .map(|&(kind, db)| Path {
                    kind,
                    delay_s: 1e-6,
                    gain: Complex64::new(10f64.powf(db / 20.0), 0.0),
                    aoa: Angles::default(),
                    aod: Angles::default(),
                })
                .collect(),
        }
    }

    #[test]
    fn pair_label_floor() {
        let no_uav = synthetic_set(&[(PathKind::LoS, 0.0), (PathKind::StaticBounce, -10.0)]);
        assert_eq!(pair_label(&no_uav, 40.0), 0);
        let near = synthetic_set(&[(PathKind::LoS, -60.0), (PathKind::UavBounce, -80.0)]);
        assert_eq!(pair_label(&near, 40.0), 1);
        let far = synthetic_set(&[(PathKind::LoS, -60.0), (PathKind::UavBounce, -120.0)]);
        assert_eq!(pair_label(&far, 40.0), 0);
    }

    #[test]
    fn pair_label_from_geometry() {
        // A UAV hovering just above the CPE gives a strong bounce; one far
        // outside the scene gives a weak one. Powers recomputed by hand.
        let s = bare_scenario();
        let pair = pair11(&s);
        let bs = s.bs_positions[0];
        let cpe = s.cpe_positions[0];
        let lambda = s.wavelength();
        let k = &s.channel;
        let rel_db = |uav: Point3| {
            let d0 = bs.distance(&cpe);
            let los = lambda / (4.0 * PI * d0);
            let bounce = k.rho_uav * facet_weight(&uav, &cpe, &bs) * k.uav_area_m2
                / (4.0 * PI * cpe.distance(&uav) * uav.distance(&bs));
            20.0 * (los / bounce).log10()
        };
        let near = Point3::new(cpe.x() + 4.0, cpe.y() + 4.0, cpe.z() + 3.0);
        let far = Point3::new(4000.0, 4000.0, 60.0);
        let (near_db, far_db) = (rel_db(near), rel_db(far));
        assert!(near_db < 40.0 && far_db > 40.0, "{near_db} {far_db}");
        assert_eq!(pair_label(&trace_paths(&s, pair, Some(&near)), 40.0), 1);
        assert_eq!(pair_label(&trace_paths(&s, pair, Some(&far)), 40.0), 0);
    }

    #[test]
    fn scene_label_is_or() {
        for len in 0..=12usize {
            for bits in 0u32..(1 << len) {
                let labels: Vec<bool> = (0..len).map(|i| bits >> i & 1 == 1).collect();
                assert_eq!(scene_label(&labels), u8::from(bits != 0));
            }
        }
    }

    #[test]
    fn uav_path_never_shorter_than_los() {
        let s = Scenario::desk_profile();
        let mut rng = substream(2, "test", 0);
        for _ in 0..500 {
            let uav = crate::scenario::sample_uav_position(&s, &mut rng);
            for pair in s.pairs() {
                let ps = trace_paths(&s, pair, Some(&uav));
                if let Some(p) = ps.uav_path() {
                    assert!(p.delay_s >= ps.los_path().unwrap().delay_s);
                }
            }
        }
    }

    #[test]
    fn faces_hide_uav_inside_pair_rectangle() {
        let s = Scenario::desk_profile();
        let mut rng = substream(3, "test", 0);
        for _ in 0..2000 {
            let uav = crate::scenario::sample_uav_position(&s, &mut rng);
            for pair in s.pairs() {
                let bs = s.bs_positions[pair.m - 1];
                let cpe = s.cpe_positions[pair.n - 1];
                let between = |a: f64, b: f64, v: f64| a.min(b) < v && v < a.max(b);
                let inside = between(bs.x(), cpe.x(), uav.x()) && between(bs.y(), cpe.y(), uav.y());
                let visible = trace_paths(&s, pair, Some(&uav)).uav_path().is_some();
                assert_eq!(visible, !inside, "{uav:?} {pair}");
            }
        }
    }

    #[test]
    fn facet_weight_by_hand() {
        // Both endpoints straight along +x from the UAV, level with it.
        let uav = Point3::new(0.0, 0.0, 10.0);
        let w = facet_weight(&uav, &Point3::new(5.0, 0.0, 10.0), &Point3::new(9.0, 0.0, 10.0));
        assert!((w - 1.0).abs() < 1e-15);
        // Opposite sides along x, same point in y: no face sees both.
        let w = facet_weight(&uav, &Point3::new(-5.0, 0.0, 10.0), &Point3::new(9.0, 0.0, 10.0));
        assert_eq!(w, 0.0);
        // Diagonal: two faces at cos = 1/sqrt(2) each.
        let w = facet_weight(&uav, &Point3::new(3.0, 3.0, 10.0), &Point3::new(7.0, 7.0, 10.0));
        assert!((w - 2.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn facets_can_be_disabled() {
        let mut s = Scenario::desk_profile();
        s.channel.uav_facets = false;
        let pair = PairId::new(2, 3, s.n_cpe()).unwrap();
        assert!(trace_paths(&s, pair, Some(&Point3::new(12.5, -30.0, 60.0))).uav_path().is_some());
    }

    #[test]
    fn awgn_hits_requested_snr() {
        let s = Scenario::desk_profile();
        let ps = trace_paths(&s, pair11(&s), None);
        let clean = synthesize_cfr(&s, &ps);
        let mut noisy = clean.clone();
        let mut rng = substream(9, "test", 0);
        add_awgn(&mut noisy, 10.0, &mut rng);
        let sig: f64 = clean.data.iter().map(|z| z.norm_sqr()).sum();
        let noise: f64 = clean.data.iter().zip(&noisy.data).map(|(a, b)| (a - b).norm_sqr()).sum();
        let snr = 10.0 * (sig / noise).log10();
        assert!((snr - 10.0).abs() < 0.6, "snr {snr}");
    }
}
