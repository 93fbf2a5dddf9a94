//! Binary dataset files and their JSON manifests.
//!
//! Layout (little-endian):
//!
//! ```text
//! "FWAS" | u16 version | u16 M | u16 N | u16 N_r | u16 N_t | u16 N_c | u32 count
//! per sample:
//!   u8 scene_label | 3 x f32 uav position (NaN when absent)
//!   ceil(MN/8) bytes pair-label bitset (pair e -> bit (e-1)%8 of byte (e-1)/8)
//!   MN blocks of N_r*N_t*N_c complex values (f32 re, f32 im), [N_r][N_t][N_c]
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{add_awgn, augment_phase, pair_label, scene_label, synthesize_cfr, trace_paths, CfrTensor};
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::scenario::{sample_uav_position, PairId, Point3, Scenario};

pub const DATASET_MAGIC: &[u8; 4] = b"FWAS";
pub const DATASET_VERSION: u16 = 1;
const HEADER_LEN: u64 = 4 + 2 * 6 + 4;
const CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub scene_label: u8,
    pub uav_position: Option<Point3>,
    /// Indexed by flat pair index minus one.
    pub pair_labels: Vec<bool>,
    pub cfrs: Vec<CfrTensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetHeader {
    pub version: u16,
    pub n_bs: usize,
    pub n_cpe: usize,
    pub n_rx: usize,
    pub n_tx: usize,
    pub n_sc: usize,
    pub count: usize,
}

impl DatasetHeader {
    pub fn for_scenario(s: &Scenario, count: usize) -> Self {
        DatasetHeader {
            version: DATASET_VERSION,
            n_bs: s.n_bs(),
            n_cpe: s.n_cpe(),
            n_rx: s.n_rx(),
            n_tx: s.n_tx(),
            n_sc: s.n_subcarriers,
            count,
        }
    }

    pub fn n_pairs(&self) -> usize {
        self.n_bs * self.n_cpe
    }

    fn bitset_len(&self) -> usize {
        self.n_pairs().div_ceil(8)
    }

    fn cfr_len(&self) -> usize {
        self.n_rx * self.n_tx * self.n_sc
    }

    pub fn record_len(&self) -> usize {
        1 + 12 + self.bitset_len() + self.n_pairs() * self.cfr_len() * 8
    }

    /// Checks that the file was produced for a scenario with these shapes.
    pub fn check_matches(&self, s: &Scenario) -> Result<()> {
        let expected = DatasetHeader::for_scenario(s, self.count);
        if *self != expected {
            return Err(Error::shape(
                "dataset header vs scenario [M, N, N_r, N_t, N_c]",
                &[expected.n_bs, expected.n_cpe, expected.n_rx, expected.n_tx, expected.n_sc],
                &[self.n_bs, self.n_cpe, self.n_rx, self.n_tx, self.n_sc],
            ));
        }
        Ok(())
    }

    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN as usize);
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        for v in [self.n_bs, self.n_cpe, self.n_rx, self.n_tx, self.n_sc] {
            out.extend_from_slice(&(v as u16).to_le_bytes());
        }
        out.extend_from_slice(&(self.count as u32).to_le_bytes());
        out
    }
}

/// Sidecar describing how a dataset file was produced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u16,
    pub seed: u64,
    pub scenario_hash: String,
    pub n_with_uav: usize,
    pub n_without_uav: usize,
    pub total: usize,
    pub file_sha256: String,
}

impl DatasetManifest {
    pub fn path_for(dataset: &Path) -> PathBuf {
        let mut name = dataset.as_os_str().to_owned();
        name.push(".manifest.json");
        PathBuf::from(name)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Builds one sample: UAV draw, tracing, phase augmentation, CFR synthesis
/// and labels, all from the sample's own sub-stream.
pub fn generate_sample(s: &Scenario, with_uav: bool, seed: u64, index: u64) -> SampleRecord {
    let mut rng = substream(seed, "sample", index);
    let uav = with_uav.then(|| sample_uav_position(s, &mut rng));
    let mut pair_labels = Vec::with_capacity(s.n_pairs());
    let mut cfrs = Vec::with_capacity(s.n_pairs());
    for pair in s.pairs() {
        let traced = trace_paths(s, pair, uav.as_ref());
        pair_labels.push(pair_label(&traced, s.channel.power_floor_db) == 1);
        let augmented = augment_phase(&traced, &mut rng);
        let mut h = synthesize_cfr(s, &augmented);
        if let Some(snr) = s.noise_snr_db {
            add_awgn(&mut h, snr, &mut rng);
        }
        cfrs.push(h);
    }
    // The scene label follows the UAV, not the pair labels: a UAV whose
    // bounce falls below the power floor everywhere is still present.
    let label = u8::from(uav.is_some());
    debug_assert!(scene_label(&pair_labels) <= label);
    SampleRecord {
        scene_label: label,
        uav_position: uav,
        pair_labels,
        cfrs,
    }
}

fn encode_record(header: &DatasetHeader, rec: &SampleRecord, out: &mut Vec<u8>) {
    out.push(rec.scene_label);
    let pos = rec
        .uav_position
        .map(|p| p.0.map(|c| c as f32))
        .unwrap_or([f32::NAN; 3]);
    for c in pos {
        out.extend_from_slice(&c.to_le_bytes());
    }
    let mut bits = vec![0u8; header.bitset_len()];
    for (e, &b) in rec.pair_labels.iter().enumerate() {
        if b {
            bits[e / 8] |= 1 << (e % 8);
        }
    }
    out.extend_from_slice(&bits);
    for h in &rec.cfrs {
        for z in &h.data {
            out.extend_from_slice(&(z.re as f32).to_le_bytes());
            out.extend_from_slice(&(z.im as f32).to_le_bytes());
        }
    }
}

/// Writes `n_with_uav` UAV samples followed by `n_without` empty-scene
/// samples, plus a manifest next to `out_path`.
pub fn generate_dataset(
    s: &Scenario,
    n_with_uav: usize,
    n_without: usize,
    seed: u64,
    out_path: &Path,
) -> Result<DatasetManifest> {
    s.validate()?;
    let total = n_with_uav + n_without;
    if total == 0 {
        return Err(Error::InvalidArgument(
            "at least one sample must be requested".into(),
        ));
    }
    if total > u32::MAX as usize {
        return Err(Error::InvalidArgument("too many samples".into()));
    }
    let header = DatasetHeader::for_scenario(s, total);
    let file = File::create(out_path).map_err(|e| Error::io(out_path, e))?;
    let mut writer = BufWriter::new(file);
    let mut hasher = Sha256::new();
    let head = header.encode();
    hasher.update(&head);
    writer.write_all(&head).map_err(|e| Error::io(out_path, e))?;

    let indices: Vec<usize> = (0..total).collect();
    for chunk in indices.chunks(CHUNK) {
        let encoded: Vec<Vec<u8>> = chunk
            .par_iter()
            .map(|&i| {
                let rec = generate_sample(s, i < n_with_uav, seed, i as u64);
                let mut buf = Vec::with_capacity(header.record_len());
                encode_record(&header, &rec, &mut buf);
                buf
            })
            .collect();
        for buf in encoded {
            hasher.update(&buf);
            writer.write_all(&buf).map_err(|e| Error::io(out_path, e))?;
        }
    }
    writer.flush().map_err(|e| Error::io(out_path, e))?;

    let manifest = DatasetManifest {
        format_version: DATASET_VERSION,
        seed,
        scenario_hash: s.hash_hex(),
        n_with_uav,
        n_without_uav: n_without,
        total,
        file_sha256: hex::encode(hasher.finalize()),
    };
    let manifest_path = DatasetManifest::path_for(out_path);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest)
}

/// Streaming reader over a dataset file.
pub struct DatasetReader<R: Read> {
    inner: R,
    header: DatasetHeader,
    offset: u64,
    next_index: usize,
    buf: Vec<u8>,
}

impl DatasetReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        DatasetReader::new(BufReader::new(file))
    }
}

fn format_err(offset: u64, message: impl Into<String>) -> Error {
    Error::Format {
        what: "dataset",
        offset,
        message: message.into(),
    }
}

impl<R: Read> DatasetReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let mut head = [0u8; HEADER_LEN as usize];
        inner
            .read_exact(&mut head)
            .map_err(|_| format_err(0, "truncated header"))?;
        if &head[0..4] != DATASET_MAGIC {
            return Err(format_err(0, "bad magic"));
        }
        let u16_at = |i: usize| u16::from_le_bytes([head[i], head[i + 1]]);
        let version = u16_at(4);
        if version != DATASET_VERSION {
            return Err(format_err(4, format!("unsupported version {version}")));
        }
        let dims: Vec<usize> = (0..5).map(|k| u16_at(6 + 2 * k) as usize).collect();
        if dims.iter().any(|&d| d == 0) {
            return Err(format_err(6, "zero dimension in header"));
        }
        let count = u32::from_le_bytes([head[16], head[17], head[18], head[19]]) as usize;
        let header = DatasetHeader {
            version,
            n_bs: dims[0],
            n_cpe: dims[1],
            n_rx: dims[2],
            n_tx: dims[3],
            n_sc: dims[4],
            count,
        };
        Ok(DatasetReader {
            inner,
            buf: vec![0; header.record_len()],
            header,
            offset: HEADER_LEN,
            next_index: 0,
        })
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    pub fn next_record(&mut self) -> Option<Result<SampleRecord>> {
        if self.next_index >= self.header.count {
            return None;
        }
        let start = self.offset;
        if self.inner.read_exact(&mut self.buf).is_err() {
            return Some(Err(format_err(
                start,
                format!("truncated record {}", self.next_index),
            )));
        }
        self.offset += self.buf.len() as u64;
        self.next_index += 1;
        Some(decode_record(&self.header, &self.buf, start))
    }
}

impl<R: Read> Iterator for DatasetReader<R> {
    type Item = Result<SampleRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_record()
    }
}

fn decode_record(header: &DatasetHeader, buf: &[u8], offset: u64) -> Result<SampleRecord> {
    let f32_at = |i: usize| f32::from_le_bytes([buf[i], buf[i + 1], buf[i + 2], buf[i + 3]]);
    let scene_label = buf[0];
    if scene_label > 1 {
        return Err(format_err(offset, format!("scene label {scene_label}")));
    }
    let pos = [f32_at(1), f32_at(5), f32_at(9)];
    let uav_position = if pos.iter().all(|c| c.is_nan()) {
        None
    } else if pos.iter().any(|c| c.is_nan()) {
        return Err(format_err(offset + 1, "partially NaN position"));
    } else {
        Some(Point3(pos.map(f64::from)))
    };
    if uav_position.is_some() != (scene_label == 1) {
        return Err(format_err(offset, "scene label disagrees with UAV position"));
    }
    let mp = header.n_pairs();
    let bits = &buf[13..13 + header.bitset_len()];
    let pair_labels: Vec<bool> = (0..mp).map(|e| bits[e / 8] >> (e % 8) & 1 == 1).collect();
    if scene_label == 0 && pair_labels.iter().any(|&b| b) {
        return Err(format_err(offset + 13, "pair labels set in an empty scene"));
    }
    let mut cursor = 13 + header.bitset_len();
    let cfr_len = header.cfr_len();
    let mut cfrs = Vec::with_capacity(mp);
    for e in 0..mp {
        let pair = PairId::from_flat(e + 1, header.n_bs, header.n_cpe)?;
        let mut data = Vec::with_capacity(cfr_len);
        for _ in 0..cfr_len {
            let re = f32_at(cursor);
            let im = f32_at(cursor + 4);
            if !(re.is_finite() && im.is_finite()) {
                return Err(format_err(offset + cursor as u64, "non-finite CFR entry"));
            }
            data.push(Complex64::new(re as f64, im as f64));
            cursor += 8;
        }
        cfrs.push(CfrTensor {
            pair,
            n_rx: header.n_rx,
            n_tx: header.n_tx,
            n_sc: header.n_sc,
            data,
        });
    }
    Ok(SampleRecord {
        scene_label,
        uav_position,
        pair_labels,
        cfrs,
    })
}

pub fn read_dataset_header(path: &Path) -> Result<DatasetHeader> {
    Ok(*DatasetReader::open(path)?.header())
}

/// Reads every record into memory.
pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<SampleRecord>)> {
    let reader = DatasetReader::open(path)?;
    let header = *reader.header();
    let records = reader.collect::<Result<Vec<_>>>()?;
    Ok((header, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_uav_record() {
        let s = Scenario::desk_profile();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.fwas");
        let manifest = generate_dataset(&s, 1, 0, 3, &path).unwrap();
        assert_eq!((manifest.n_with_uav, manifest.n_without_uav, manifest.total), (1, 0, 1));
        let (header, records) = read_dataset(&path).unwrap();
        header.check_matches(&s).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].scene_label, 1);
        assert!(records[0].uav_position.is_some());
        assert_eq!(records[0].cfrs.len(), s.n_pairs());
        let file_len = std::fs::metadata(&path).unwrap().len();
        assert_eq!(file_len, HEADER_LEN + header.record_len() as u64);
    }

    #[test]
    fn zero_counts_rejected() {
        let s = Scenario::desk_profile();
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_dataset(&s, 0, 0, 1, &dir.path().join("x")).is_err());
    }

    #[test]
    fn empty_scene_has_no_pair_labels() {
        let s = Scenario::desk_profile();
        let rec = generate_sample(&s, false, 1, 0);
        assert_eq!(rec.scene_label, 0);
        assert!(rec.uav_position.is_none());
        assert!(rec.pair_labels.iter().all(|&b| !b));
    }

    #[test]
    fn decoded_values_match_f32_rounding() {
        let s = Scenario::desk_profile();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.fwas");
        generate_dataset(&s, 2, 2, 17, &path).unwrap();
        let (_, records) = read_dataset(&path).unwrap();
        for (i, rec) in records.iter().enumerate() {
            let fresh = generate_sample(&s, i < 2, 17, i as u64);
            assert_eq!(rec.pair_labels, fresh.pair_labels);
            for (a, b) in rec.cfrs.iter().zip(&fresh.cfrs) {
                for (x, y) in a.data.iter().zip(&b.data) {
                    assert_eq!(x.re, y.re as f32 as f64);
                    assert_eq!(x.im, y.im as f32 as f64);
                }
            }
        }
    }

    #[test]
    fn truncated_file_reports_offset() {
        let s = Scenario::desk_profile();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.fwas");
        generate_dataset(&s, 1, 1, 2, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        let err = read_dataset(&path).unwrap_err();
        let header = read_dataset_header(&path).unwrap();
        match err {
            Error::Format { offset, .. } => {
                assert_eq!(offset, HEADER_LEN + header.record_len() as u64)
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic() {
        let err = DatasetReader::new(&b"NOPE\x01\x00\x01\x00\x01\x00\x01\x00\x01\x00\x01\x00\x01\x00\x00\x00"[..])
            .err()
            .unwrap();
        assert!(matches!(err, Error::Format { offset: 0, .. }));
    }
}
