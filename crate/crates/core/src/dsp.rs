//! CFR -> angle-delay map preprocessing.
//!
//! `preprocess` chains a 3D inverse DFT over (rx antenna, tx antenna,
//! subcarrier), truncation to the first delay bins, log10 amplitude and
//! per-sample min-max normalization with a trailing channel axis.

use std::path::Path;

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::channel::CfrTensor;
use crate::error::{Error, Result};

/// Floor added to magnitudes before `log10`.
pub const LOG_EPS: f64 = 1e-12;
/// Added to the range in min-max normalization; constant inputs map to zero.
pub const NORM_EPS: f64 = 1e-12;

/// Dense complex tensor of shape `[d0][d1][d2]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexCube {
    pub dims: [usize; 3],
    pub data: Vec<Complex64>,
}

impl ComplexCube {
    pub fn new(dims: [usize; 3], data: Vec<Complex64>) -> Result<Self> {
        let len = dims.iter().product::<usize>();
        if data.len() != len {
            return Err(Error::shape("complex cube", &[len], &[data.len()]));
        }
        Ok(ComplexCube { dims, data })
    }

    pub fn at(&self, a: usize, b: usize, k: usize) -> Complex64 {
        self.data[(a * self.dims[1] + b) * self.dims[2] + k]
    }
}

/// Real tensor of shape `[d0][d1][d2]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RealCube {
    pub dims: [usize; 3],
    pub data: Vec<f64>,
}

/// Normalized angle-delay map `[N_r][N_t][N_c'][1]`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleDelayMap {
    pub dims: [usize; 4],
    pub data: Vec<f64>,
}

impl AngleDelayMap {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Clone, Copy)]
enum Direction {
    Forward,
    Inverse,
}

/// Applies an unnormalized 1D DFT along `axis` in place.
fn transform_axis(cube: &mut ComplexCube, axis: usize, dir: Direction) {
    let [d0, d1, d2] = cube.dims;
    let len = cube.dims[axis];
    if len == 1 {
        return;
    }
    let mut planner = FftPlanner::<f64>::new();
    let fft = match dir {
        Direction::Forward => planner.plan_fft_forward(len),
        Direction::Inverse => planner.plan_fft_inverse(len),
    };
    let stride = match axis {
        0 => d1 * d2,
        1 => d2,
        _ => 1,
    };
    let mut line = vec![Complex64::new(0.0, 0.0); len];
    let starts: Vec<usize> = match axis {
        0 => (0..d1 * d2).collect(),
        1 => (0..d0)
            .flat_map(|a| (0..d2).map(move |k| a * d1 * d2 + k))
            .collect(),
        _ => (0..d0 * d1).map(|r| r * d2).collect(),
    };
    for start in starts {
        for (t, v) in line.iter_mut().enumerate() {
            *v = cube.data[start + t * stride];
        }
        fft.process(&mut line);
        for (t, v) in line.iter().enumerate() {
            cube.data[start + t * stride] = *v;
        }
    }
}

/// Separable 3D inverse DFT with `1 / (N_r N_t N_c)` normalization:
/// `X[a,b,k] = 1/(N_r N_t N_c) sum H[i,j,c] exp(+j 2 pi (ai/N_r + bj/N_t + ck/N_c))`.
pub fn idft3(h: &CfrTensor) -> ComplexCube {
    let mut cube = ComplexCube {
        dims: h.shape(),
        data: h.data.clone(),
    };
    for axis in 0..3 {
        transform_axis(&mut cube, axis, Direction::Inverse);
    }
    let scale = 1.0 / cube.data.len() as f64;
    for v in &mut cube.data {
        *v *= scale;
    }
    cube
}

/// Plain (unnormalized) forward 3D DFT, the inverse of [`idft3`].
pub fn dft3(x: &ComplexCube) -> ComplexCube {
    let mut cube = x.clone();
    for axis in 0..3 {
        transform_axis(&mut cube, axis, Direction::Forward);
    }
    cube
}

/// Keeps the first `n_keep` bins of the last (delay) axis.
pub fn truncate_delay(t: &ComplexCube, n_keep: usize) -> Result<ComplexCube> {
    let [d0, d1, d2] = t.dims;
    if n_keep == 0 || n_keep > d2 {
        return Err(Error::OutOfRange(format!(
            "delay_keep {n_keep} outside 1..={d2}"
        )));
    }
    let mut data = Vec::with_capacity(d0 * d1 * n_keep);
    for row in t.data.chunks_exact(d2) {
        data.extend_from_slice(&row[..n_keep]);
    }
    Ok(ComplexCube {
        dims: [d0, d1, n_keep],
        data,
    })
}

/// Elementwise `log10(|t| + LOG_EPS)`.
pub fn log_amplitude(t: &ComplexCube) -> RealCube {
    RealCube {
        dims: t.dims,
        data: t.data.iter().map(|z| (z.norm() + LOG_EPS).log10()).collect(),
    }
}

/// Adds the channel axis and rescales to `[0, 1]` with
/// `(x - min) / (max - min + NORM_EPS)`.
pub fn reshape_normalize(t: &RealCube) -> AngleDelayMap {
    let min = t.data.iter().copied().fold(f64::INFINITY, f64::min);
    let max = t.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min + NORM_EPS;
    let data = t
        .data
        .iter()
        .map(|&x| ((x - min) / range).clamp(0.0, 1.0))
        .collect();
    AngleDelayMap {
        dims: [t.dims[0], t.dims[1], t.dims[2], 1],
        data,
    }
}

pub fn preprocess(h: &CfrTensor, n_keep: usize) -> Result<AngleDelayMap> {
    let ad = idft3(h);
    let kept = truncate_delay(&ad, n_keep)?;
    Ok(reshape_normalize(&log_amplitude(&kept)))
}

/// Writes one 8-bit PGM per transmit-antenna bin: rows are receive-antenna
/// bins, columns are delay bins.
pub fn dump_map_pgm(map: &AngleDelayMap, dir: &Path, stem: &str) -> Result<Vec<std::path::PathBuf>> {
    let [nr, nt, nk, _] = map.dims;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::with_capacity(nt);
    for b in 0..nt {
        let path = dir.join(format!("{stem}_tx{b}.pgm"));
        let mut bytes = format!("P5\n{nk} {nr}\n255\n").into_bytes();
        for a in 0..nr {
            for k in 0..nk {
                let v = map.data[(a * nt + b) * nk + k];
                bytes.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{synthesize_cfr, Angles, Path as ChannelPath, PathKind, PathSet};
    use crate::rng::substream;
    use crate::scenario::{PairId, Scenario};
    use rand::Rng;
    use std::f64::consts::TAU;

    fn pair() -> PairId {
        PairId::new(1, 1, 1).unwrap()
    }

    fn random_cfr(dims: [usize; 3], seed: u64) -> CfrTensor {
        let mut rng = substream(seed, "dsp-test", 0);
        let mut h = CfrTensor::zeros(pair(), dims[0], dims[1], dims[2]);
        for z in &mut h.data {
            *z = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        }
        h
    }

    /// Direct triple sum, independent of the FFT path.
    fn naive_idft3(h: &CfrTensor) -> Vec<Complex64> {
        let [nr, nt, nc] = h.shape();
        let mut out = vec![Complex64::new(0.0, 0.0); nr * nt * nc];
        for a in 0..nr {
            for b in 0..nt {
                for k in 0..nc {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for i in 0..nr {
                        for j in 0..nt {
                            for c in 0..nc {
                                let phase = TAU
                                    * ((a * i) as f64 / nr as f64
                                        + (b * j) as f64 / nt as f64
                                        + (c * k) as f64 / nc as f64);
                                acc += h.at(i, j, c) * Complex64::from_polar(1.0, phase);
                            }
                        }
                    }
                    out[(a * nt + b) * nc + k] = acc / (nr * nt * nc) as f64;
                }
            }
        }
        out
    }

    fn max_rel_err(a: &[Complex64], b: &[Complex64]) -> f64 {
        let scale = b.iter().map(|z| z.norm()).fold(0.0, f64::max).max(1e-300);
        a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max) / scale
    }

    #[test]
    fn zero_and_constant_inputs() {
        let zero = CfrTensor::zeros(pair(), 4, 2, 8);
        assert!(idft3(&zero).data.iter().all(|z| z.norm() == 0.0));
        let mut ones = zero.clone();
        ones.data.fill(Complex64::new(1.0, 0.0));
        let x = idft3(&ones);
        assert!((x.data[0] - Complex64::new(1.0, 0.0)).norm() < 1e-14);
        assert!(x.data[1..].iter().all(|z| z.norm() < 1e-14));
    }

    #[test]
    fn idft_matches_naive_sum() {
        let h = random_cfr([4, 2, 8], 1);
        assert!(max_rel_err(&idft3(&h).data, &naive_idft3(&h)) < 1e-10);
    }

    #[test]
    fn round_trip_and_parseval() {
        let h = random_cfr([8, 4, 16], 2);
        let x = idft3(&h);
        let back = dft3(&x);
        assert!(max_rel_err(&back.data, &h.data) < 1e-10);
        let eh: f64 = h.data.iter().map(|z| z.norm_sqr()).sum();
        let ex: f64 = x.data.iter().map(|z| z.norm_sqr()).sum();
        let n = (8 * 4 * 16) as f64;
        assert!(((eh - n * ex) / eh).abs() < 1e-9);
    }

    #[test]
    fn truncation() {
        let h = random_cfr([2, 2, 8], 3);
        let x = idft3(&h);
        assert_eq!(truncate_delay(&x, 8).unwrap(), x);
        let one = truncate_delay(&x, 1).unwrap();
        assert_eq!(one.dims, [2, 2, 1]);
        assert_eq!(one.at(1, 1, 0), x.at(1, 1, 0));
        assert!(truncate_delay(&x, 9).is_err());
        assert!(truncate_delay(&x, 0).is_err());

        let big = ComplexCube {
            dims: [1, 1, 512],
            data: (0..512).map(|i| Complex64::new(i as f64, 0.0)).collect(),
        };
        let kept = truncate_delay(&big, 64).unwrap();
        assert_eq!(kept.dims[2], 64);
        assert_eq!(kept.data, big.data[..64]);
    }

    #[test]
    fn log_amplitude_values() {
        let cube = ComplexCube {
            dims: [1, 1, 3],
            data: vec![Complex64::new(1.0, 0.0), Complex64::new(6.0, 8.0), Complex64::new(0.0, 0.0)],
        };
        let out = log_amplitude(&cube);
        assert!(out.data[0].abs() < 1e-12);
        assert!((out.data[1] - 1.0).abs() < 1e-12);
        assert!((out.data[2] + 12.0).abs() < 1e-12);
    }

    #[test]
    fn normalization() {
        let t = RealCube { dims: [1, 1, 3], data: vec![0.0, 5.0, 10.0] };
        let m = reshape_normalize(&t);
        assert_eq!(m.dims, [1, 1, 3, 1]);
        for (got, want) in m.data.iter().zip([0.0, 0.5, 1.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        let flat = reshape_normalize(&RealCube { dims: [2, 1, 2], data: vec![3.0; 4] });
        assert!(flat.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_cfr_preprocesses_to_zero() {
        let m = preprocess(&CfrTensor::zeros(pair(), 4, 2, 8), 4).unwrap();
        assert_eq!(m.dims, [4, 2, 4, 1]);
        assert!(m.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn broadside_los_peaks_at_origin() {
        let s = Scenario::desk_profile();
        let ps = PathSet {
            pair: PairId::new(1, 1, s.n_cpe()).unwrap(),
            paths: vec![ChannelPath {
                kind: PathKind::LoS,
                delay_s: 0.0,
                gain: Complex64::new(1e-4, 0.0),
                aoa: Angles::default(),
                aod: Angles::default(),
            }],
        };
        let m = preprocess(&synthesize_cfr(&s, &ps), s.delay_keep).unwrap();
        let argmax = m
            .data
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(argmax, 0);
        assert!((m.data[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn paper_profile_shape() {
        let s = Scenario::paper_profile();
        let h = CfrTensor::zeros(PairId::new(1, 1, 16).unwrap(), 64, 4, 512);
        let m = preprocess(&h, s.delay_keep).unwrap();
        assert_eq!(m.dims, [64, 4, 64, 1]);
    }

    #[test]
    fn scale_invariance() {
        let h = random_cfr([4, 2, 16], 4);
        let base = preprocess(&h, 8).unwrap();
        for c in [0.01, 0.37, 250.0] {
            let mut scaled = h.clone();
            for z in &mut scaled.data {
                *z *= c;
            }
            let m = preprocess(&scaled, 8).unwrap();
            for (a, b) in m.data.iter().zip(&base.data) {
                // the log offset breaks exact invariance for tiny amplitudes
                assert!((a - b).abs() < 1e-6, "c={c}: {a} vs {b}");
            }
        }
    }
}
