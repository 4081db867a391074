//! In-memory radar grids and the on-disk frame and manifest formats.
//!
//! Frames are stored in the little-endian "RFGD" layout:
//!
//! | field      | type  |
//! |------------|-------|
//! | magic      | `b"RFGD"` |
//! | version    | u16 (= 1) |
//! | variable   | u8 (0 = dBZ, 1 = rain, 2 = ETH) |
//! | timestamp  | i64 seconds since the Unix epoch |
//! | rows, cols | u32, u32 |
//! | pixel_km   | f32 |
//! | nodata     | f32 |
//! | values     | rows·cols × f32, row-major |

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RFGD";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 31;
pub const DEFAULT_NODATA: f32 = -9999.0;
/// Highest physically plausible echo top height.
pub const ETH_MAX_KM: f32 = 16.0;
/// Frames per event sequence.
pub const SEQUENCE_LEN: usize = 22;
/// Seconds between consecutive radar frames.
pub const CADENCE_S: i64 = 300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variable {
    ReflectivityDbz,
    RainMmh,
    EthKm,
}

impl Variable {
    pub fn tag(self) -> u8 {
        match self {
            Variable::ReflectivityDbz => 0,
            Variable::RainMmh => 1,
            Variable::EthKm => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Variable::ReflectivityDbz),
            1 => Some(Variable::RainMmh),
            2 => Some(Variable::EthKm),
            _ => None,
        }
    }
}

impl fmt::Display for Variable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variable::ReflectivityDbz => "dBZ",
            Variable::RainMmh => "rain",
            Variable::EthKm => "ETH",
        })
    }
}

/// One 2D radar field.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFrame {
    pub variable: Variable,
    pub timestamp: i64,
    pub rows: usize,
    pub cols: usize,
    pub pixel_km: f32,
    pub nodata: f32,
    pub values: Vec<f32>,
}

impl GridFrame {
    /// Builds a frame with the default 1 km pixels and nodata sentinel, checking invariants.
    pub fn new(variable: Variable, timestamp: i64, rows: usize, cols: usize, values: Vec<f32>) -> Result<Self> {
        let frame = GridFrame { variable, timestamp, rows, cols, pixel_km: 1.0, nodata: DEFAULT_NODATA, values };
        frame.validate()?;
        Ok(frame)
    }

    pub fn filled(variable: Variable, timestamp: i64, rows: usize, cols: usize, value: f32) -> Self {
        GridFrame { variable, timestamp, rows, cols, pixel_km: 1.0, nodata: DEFAULT_NODATA, values: vec![value; rows * cols] }
    }

    #[inline]
    pub fn is_nodata(&self, v: f32) -> bool {
        v == self.nodata
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.values[r * self.cols + c]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Copy of the frame with new values and the same header.
    pub fn with_values(&self, values: Vec<f32>) -> Self {
        GridFrame { values, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Argument(format!("grid must be non-empty, got {}x{}", self.rows, self.cols)));
        }
        if self.values.len() != self.rows * self.cols {
            return Err(Error::Argument(format!("{}x{} grid carries {} values", self.rows, self.cols, self.values.len())));
        }
        if !(self.pixel_km > 0.0) {
            return Err(Error::Argument(format!("pixel_km must be positive, got {}", self.pixel_km)));
        }
        if let Some(idx) = self.first_invalid_value() {
            return Err(Error::Data(format!(
                "{} frame value {} at index {} violates the variable's range",
                self.variable, self.values[idx], idx
            )));
        }
        Ok(())
    }

    fn first_invalid_value(&self) -> Option<usize> {
        self.values.iter().position(|&v| {
            if self.is_nodata(v) {
                return false;
            }
            match self.variable {
                Variable::ReflectivityDbz => !v.is_finite(),
                Variable::RainMmh => !(v >= 0.0 && v.is_finite()),
                Variable::EthKm => !(0.0..=ETH_MAX_KM).contains(&v),
            }
        })
    }

    /// Extracts an `out_rows`×`out_cols` window whose top-left corner is `(row_off, col_off)`.
    pub fn crop(&self, row_off: usize, col_off: usize, out_rows: usize, out_cols: usize) -> Result<Self> {
        if out_rows == 0 || out_cols == 0 || row_off + out_rows > self.rows || col_off + out_cols > self.cols {
            return Err(Error::Argument(format!(
                "crop window {out_rows}x{out_cols} at ({row_off}, {col_off}) exceeds {}x{} frame",
                self.rows, self.cols
            )));
        }
        let mut values = Vec::with_capacity(out_rows * out_cols);
        for r in row_off..row_off + out_rows {
            let start = r * self.cols + col_off;
            values.extend_from_slice(&self.values[start..start + out_cols]);
        }
        Ok(GridFrame { rows: out_rows, cols: out_cols, values, ..self.clone() })
    }

    /// Crops the centered window, rounding the offsets down.
    pub fn crop_center(&self, out_rows: usize, out_cols: usize) -> Result<Self> {
        let (r, c) = centered_offsets(self.rows, self.cols, out_rows, out_cols)?;
        self.crop(r, c, out_rows, out_cols)
    }
}

/// Offsets of a centered `out_rows`×`out_cols` window, floor-rounded.
pub fn centered_offsets(rows: usize, cols: usize, out_rows: usize, out_cols: usize) -> Result<(usize, usize)> {
    if out_rows > rows || out_cols > cols {
        return Err(Error::Argument(format!("crop {out_rows}x{out_cols} larger than {rows}x{cols} frame")));
    }
    Ok(((rows - out_rows) / 2, (cols - out_cols) / 2))
}

/// Header fields of an RFGD file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameHeader {
    pub variable: Variable,
    pub timestamp: i64,
    pub rows: usize,
    pub cols: usize,
    pub pixel_km: f32,
    pub nodata: f32,
}

pub fn encode_frame(frame: &GridFrame) -> Result<Vec<u8>> {
    frame.validate()?;
    let rows = u32::try_from(frame.rows).map_err(|_| Error::Argument("rows exceed u32".into()))?;
    let cols = u32::try_from(frame.cols).map_err(|_| Error::Argument("cols exceed u32".into()))?;
    let mut buf = Vec::with_capacity(HEADER_BYTES + 4 * frame.values.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.push(frame.variable.tag());
    buf.extend_from_slice(&frame.timestamp.to_le_bytes());
    buf.extend_from_slice(&rows.to_le_bytes());
    buf.extend_from_slice(&cols.to_le_bytes());
    buf.extend_from_slice(&frame.pixel_km.to_le_bytes());
    buf.extend_from_slice(&frame.nodata.to_le_bytes());
    for v in &frame.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

fn decode_header(bytes: &[u8]) -> Result<FrameHeader> {
    if bytes.len() < HEADER_BYTES {
        return Err(Error::Format(format!("truncated header: {} of {HEADER_BYTES} bytes", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", String::from_utf8_lossy(&bytes[0..4]))));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let variable = Variable::from_tag(bytes[6]).ok_or_else(|| Error::Format(format!("unknown variable tag {}", bytes[6])))?;
    let le4 = |i: usize| [bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]];
    let mut ts = [0u8; 8];
    ts.copy_from_slice(&bytes[7..15]);
    Ok(FrameHeader {
        variable,
        timestamp: i64::from_le_bytes(ts),
        rows: u32::from_le_bytes(le4(15)) as usize,
        cols: u32::from_le_bytes(le4(19)) as usize,
        pixel_km: f32::from_le_bytes(le4(23)),
        nodata: f32::from_le_bytes(le4(27)),
    })
}

pub fn decode_frame(bytes: &[u8]) -> Result<GridFrame> {
    let h = decode_header(bytes)?;
    let n = h.rows.checked_mul(h.cols).ok_or_else(|| Error::Format("grid size overflows".into()))?;
    let payload = &bytes[HEADER_BYTES..];
    if payload.len() != 4 * n {
        return Err(Error::Format(format!("payload holds {} bytes, expected {} for {}x{}", payload.len(), 4 * n, h.rows, h.cols)));
    }
    let values = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let frame = GridFrame {
        variable: h.variable,
        timestamp: h.timestamp,
        rows: h.rows,
        cols: h.cols,
        pixel_km: h.pixel_km,
        nodata: h.nodata,
        values,
    };
    frame.validate()?;
    Ok(frame)
}

pub fn write_frame(frame: &GridFrame, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_frame(frame)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_frame(path: impl AsRef<Path>) -> Result<GridFrame> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_frame(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Reads only the fixed-size header of an RFGD file.
pub fn read_header(path: impl AsRef<Path>) -> Result<FrameHeader> {
    let path = path.as_ref();
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = [0u8; HEADER_BYTES];
    f.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("{}: truncated header", path.display())),
        _ => Error::io(path, e),
    })?;
    decode_header(&buf)
}

/// Fold label of one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Fold {
    Unassigned,
    Index(u8),
    Test,
}

impl fmt::Display for Fold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Fold::Unassigned => f.write_str("-"),
            Fold::Index(i) => write!(f, "{i}"),
            Fold::Test => f.write_str("TEST"),
        }
    }
}

impl std::str::FromStr for Fold {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "-" => Ok(Fold::Unassigned),
            "TEST" => Ok(Fold::Test),
            other => other.parse::<u8>().map(Fold::Index).map_err(|_| format!("invalid fold label {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRecord {
    pub start_timestamp: i64,
    pub event_weight: f64,
    pub rain_paths: Vec<PathBuf>,
    pub eth_paths: Vec<PathBuf>,
    pub fold: Fold,
}

impl SequenceRecord {
    /// Timestamp of the `k`-th frame (0-based).
    pub fn frame_timestamp(&self, k: usize) -> i64 {
        self.start_timestamp + k as i64 * CADENCE_S
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SequenceManifest {
    pub records: Vec<SequenceRecord>,
}

impl SequenceManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn with_fold(&self, fold: Fold) -> impl Iterator<Item = &SequenceRecord> {
        self.records.iter().filter(move |r| r.fold == fold)
    }

    /// Checks every record's frame headers: variable, timestamp and 300 s cadence.
    pub fn validate_cadence(&self) -> Result<()> {
        for rec in &self.records {
            for (paths, var) in [(&rec.rain_paths, Variable::RainMmh), (&rec.eth_paths, Variable::EthKm)] {
                if paths.len() != SEQUENCE_LEN {
                    return Err(Error::Data(format!("sequence {} has {} {var} frames", rec.start_timestamp, paths.len())));
                }
                for (k, p) in paths.iter().enumerate() {
                    let h = read_header(p)?;
                    if h.variable != var {
                        return Err(Error::Data(format!("{}: expected {var} frame, found {}", p.display(), h.variable)));
                    }
                    let expected = rec.frame_timestamp(k);
                    if h.timestamp != expected {
                        return Err(Error::Data(format!(
                            "{}: timestamp {} breaks 300 s cadence (expected {expected})",
                            p.display(),
                            h.timestamp
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn relativize(path: &Path, base: &Path) -> PathBuf {
    path.strip_prefix(base).map(Path::to_path_buf).unwrap_or_else(|_| path.to_path_buf())
}

pub(crate) fn resolve(path: &str, base: &Path) -> PathBuf {
    let p = PathBuf::from(path);
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

pub(crate) fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn join_paths(paths: &[PathBuf], base: &Path) -> Result<String> {
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let rel = relativize(p, base);
        let s = rel.to_str().ok_or_else(|| Error::Argument(format!("non UTF-8 path {}", p.display())))?;
        if s.contains(['\t', ';', '\n']) {
            return Err(Error::Argument(format!("path {s:?} contains a delimiter")));
        }
        out.push(s.to_string());
    }
    Ok(out.join(";"))
}

/// Writes one tab-separated line per record. Paths below the manifest's directory are stored relative to it.
pub fn write_manifest(manifest: &SequenceManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let base = parent_dir(path);
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for rec in &manifest.records {
        writeln!(
            w,
            "{}\t{:.5e}\t{}\t{}\t{}",
            rec.start_timestamp,
            rec.event_weight,
            rec.fold,
            join_paths(&rec.rain_paths, &base)?,
            join_paths(&rec.eth_paths, &base)?
        )
        .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a manifest written by [`write_manifest`]; relative paths resolve against the manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<SequenceManifest> {
    let path = path.as_ref();
    let base = parent_dir(path);
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        let perr = |msg: String| Error::Parse { line: lineno, msg };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(perr(format!("expected 5 tab-separated fields, found {}", fields.len())));
        }
        let start_timestamp = fields[0].parse::<i64>().map_err(|e| perr(format!("bad timestamp {:?}: {e}", fields[0])))?;
        let event_weight = fields[1].parse::<f64>().map_err(|e| perr(format!("bad weight {:?}: {e}", fields[1])))?;
        let fold = fields[2].parse::<Fold>().map_err(perr)?;
        let split = |s: &str, what: &str| -> Result<Vec<PathBuf>> {
            let paths: Vec<PathBuf> = s.split(';').map(|p| resolve(p, &base)).collect();
            if paths.len() != SEQUENCE_LEN {
                return Err(Error::Parse { line: lineno, msg: format!("expected {SEQUENCE_LEN} {what} paths, found {}", paths.len()) });
            }
            Ok(paths)
        };
        let rain_paths = split(fields[3], "rain")?;
        let eth_paths = split(fields[4], "ETH")?;
        records.push(SequenceRecord { start_timestamp, event_weight, rain_paths, eth_paths, fold });
    }
    Ok(SequenceManifest { records })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rain_2x3() -> GridFrame {
        GridFrame::new(Variable::RainMmh, 1_600_000_000, 2, 3, vec![0., 1., 2., 3., 4., 5.]).unwrap()
    }

    #[test]
    fn file_size_matches_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.rfgd");
        write_frame(&rain_2x3(), &p).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len(), 55);
        assert_eq!(read_frame(&p).unwrap(), rain_2x3());
    }

    #[test]
    fn header_bytes_are_little_endian() {
        let bytes = encode_frame(&rain_2x3()).unwrap();
        assert_eq!(&bytes[..4], b"RFGD");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(bytes[6], 1);
        assert_eq!(&bytes[15..19], &[2, 0, 0, 0]);
        assert_eq!(&bytes[19..23], &[3, 0, 0, 0]);
        assert_eq!(&bytes[27..31], &(-9999.0f32).to_le_bytes());
    }

    #[test]
    fn rejects_mismatched_length_before_write() {
        let mut f = rain_2x3();
        f.values.pop();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.rfgd");
        assert!(matches!(write_frame(&f, &p), Err(Error::Argument(_))));
        assert!(!p.exists());
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut bytes = encode_frame(&rain_2x3()).unwrap();
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_frame(&bad), Err(Error::Format(_))));
        bytes.truncate(bytes.len() - 1);
        assert!(matches!(decode_frame(&bytes), Err(Error::Format(_))));
        let mut v2 = encode_frame(&rain_2x3()).unwrap();
        v2[4] = 2;
        assert!(matches!(decode_frame(&v2), Err(Error::Format(_))));
    }

    #[test]
    fn eth_out_of_range_reports_index() {
        let f = GridFrame { variable: Variable::EthKm, ..GridFrame::filled(Variable::EthKm, 0, 2, 2, 3.0) };
        let mut bytes = encode_frame(&f).unwrap();
        let off = HEADER_BYTES + 4 * 2;
        bytes[off..off + 4].copy_from_slice(&17.5f32.to_le_bytes());
        match decode_frame(&bytes) {
            Err(Error::Data(m)) => assert!(m.contains("index 2"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn negative_rain_is_data_error_but_nodata_is_fine() {
        let mut f = rain_2x3();
        f.values[0] = DEFAULT_NODATA;
        assert!(f.validate().is_ok());
        f.values[1] = -0.5;
        assert!(matches!(f.validate(), Err(Error::Data(_))));
    }

    #[test]
    fn central_crop_geometry() {
        let f = GridFrame::filled(Variable::RainMmh, 0, 765, 700, 0.0);
        assert_eq!(centered_offsets(765, 700, 336, 272).unwrap(), (214, 214));
        let c = f.crop_center(336, 272).unwrap();
        assert_eq!(c.shape(), (336, 272));
        assert!(f.crop(500, 500, 336, 272).is_err());
        assert_eq!(f.crop(0, 0, 765, 700).unwrap(), f);
    }

    #[test]
    fn crop_picks_window() {
        let vals: Vec<f32> = (0..20).map(|v| v as f32).collect();
        let f = GridFrame::new(Variable::RainMmh, 7, 4, 5, vals).unwrap();
        let c = f.crop(1, 2, 2, 2).unwrap();
        assert_eq!(c.values, vec![7., 8., 12., 13.]);
        assert_eq!(c.timestamp, 7);
        assert_eq!(c.crop(0, 0, 2, 2).unwrap(), c);
    }

    fn record(start: i64, dir: &Path, fold: Fold) -> SequenceRecord {
        SequenceRecord {
            start_timestamp: start,
            event_weight: 1234.5,
            rain_paths: (0..22).map(|k| dir.join(format!("r{start}_{k}.rfgd"))).collect(),
            eth_paths: (0..22).map(|k| dir.join(format!("e{start}_{k}.rfgd"))).collect(),
            fold,
        }
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        let m = SequenceManifest {
            records: vec![
                record(100, dir.path(), Fold::Index(3)),
                record(400, dir.path(), Fold::Test),
                record(10, Path::new("/elsewhere"), Fold::Unassigned),
            ],
        };
        write_manifest(&m, &p).unwrap();
        assert_eq!(read_manifest(&p).unwrap(), m);

        let empty = dir.path().join("e.tsv");
        write_manifest(&SequenceManifest::default(), &empty).unwrap();
        assert_eq!(fs::metadata(&empty).unwrap().len(), 0);
        assert!(read_manifest(&empty).unwrap().is_empty());
    }

    #[test]
    fn manifest_arity_error_carries_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        let rain: Vec<String> = (0..21).map(|k| format!("r{k}")).collect();
        let eth: Vec<String> = (0..22).map(|k| format!("e{k}")).collect();
        fs::write(&p, format!("0\t1.0\t0\t{}\t{}\n", rain.join(";"), eth.join(";"))).unwrap();
        match read_manifest(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cadence_violation_detected() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = record(1_000_000, dir.path(), Fold::Index(0));
        for k in 0..22 {
            let mut ts = rec.frame_timestamp(k);
            if k == 7 {
                ts += 60;
            }
            write_frame(&GridFrame::filled(Variable::RainMmh, ts, 2, 2, 0.0), &rec.rain_paths[k]).unwrap();
            write_frame(&GridFrame::filled(Variable::EthKm, rec.frame_timestamp(k), 2, 2, 0.0), &rec.eth_paths[k]).unwrap();
        }
        let m = SequenceManifest { records: vec![rec.clone()] };
        assert!(matches!(m.validate_cadence(), Err(Error::Data(_))));
        write_frame(&GridFrame::filled(Variable::RainMmh, rec.frame_timestamp(7), 2, 2, 0.0), &rec.rain_paths[7]).unwrap();
        rec.fold = Fold::Test;
        assert!(SequenceManifest { records: vec![rec] }.validate_cadence().is_ok());
    }
}
