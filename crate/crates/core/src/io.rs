//! File codecs: volumes, projection stacks, geometry configs and PGM slices.
//!
//! Binary payloads are little-endian `f32` behind a one-line text header.
//! Writers emit a canonical header, so `write(read(bytes)) == bytes` for any
//! file produced here.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use difct_tensor::TensorError;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{uniform_angles_over, ScannerGeometry};
use crate::projector::ProjectionStack;
use crate::volume::Volume3D;

pub const VOLUME_MAGIC: &str = "DIFVOL";
pub const PROJECTION_MAGIC: &str = "DIFPROJ";
pub const FORMAT_VERSION: &str = "v1";
const MAX_HEADER: usize = 4096;

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_os_string();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn tensor_format_error(path: &Path, e: TensorError) -> Error {
    match e {
        TensorError::Format(detail) => Error::Format {
            path: path.display().to_string(),
            detail,
        },
        TensorError::UnsupportedVersion { expected, found } => Error::UnsupportedVersion {
            kind: "checkpoint",
            path: path.display().to_string(),
            expected: expected.to_string(),
            found: found.to_string(),
        },
        TensorError::Io(e) => Error::io(path, e),
        other => Error::Tensor(other),
    }
}

fn format_err(path: &str, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_string(),
        detail: detail.into(),
    }
}

/// Splits `n_lines` newline-terminated text lines off the front of `bytes`.
fn split_lines<'a>(bytes: &'a [u8], n_lines: usize, path: &str) -> Result<(Vec<&'a str>, &'a [u8])> {
    let mut lines = Vec::with_capacity(n_lines);
    let mut rest = bytes;
    for _ in 0..n_lines {
        let end = rest
            .iter()
            .take(MAX_HEADER)
            .position(|&b| b == b'\n')
            .ok_or_else(|| format_err(path, "missing or overlong header line"))?;
        let line = std::str::from_utf8(&rest[..end]).map_err(|_| format_err(path, "header is not UTF-8"))?;
        lines.push(line);
        rest = &rest[end + 1..];
    }
    Ok((lines, rest))
}

fn parse_field<T: std::str::FromStr>(tok: Option<&str>, what: &str, path: &str) -> Result<T> {
    let tok = tok.ok_or_else(|| format_err(path, format!("header is missing {what}")))?;
    tok.parse()
        .map_err(|_| format_err(path, format!("cannot parse {what} from {tok:?}")))
}

fn check_magic(tokens: &mut std::str::SplitWhitespace<'_>, magic: &str, kind: &'static str, path: &str) -> Result<()> {
    let found = tokens.next().unwrap_or("");
    if found != magic {
        return Err(format_err(path, format!("expected magic {magic:?}, found {found:?}")));
    }
    let version = tokens.next().unwrap_or("");
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            kind,
            path: path.to_string(),
            expected: FORMAT_VERSION.into(),
            found: version.into(),
        });
    }
    Ok(())
}

fn decode_f32(payload: &[u8], count: usize, path: &str) -> Result<Vec<f32>> {
    let want = count
        .checked_mul(4)
        .ok_or_else(|| format_err(path, "declared size overflows"))?;
    if payload.len() != want {
        return Err(format_err(
            path,
            format!("expected {want} payload bytes, found {}", payload.len()),
        ));
    }
    Ok(payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn encode_f32(out: &mut Vec<u8>, data: &[f32]) {
    out.reserve(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_volume(vol: &Volume3D) -> Vec<u8> {
    let [h, w, d] = vol.shape();
    let [sh, sw, sd] = vol.spacing();
    let mut out = format!("{VOLUME_MAGIC} {FORMAT_VERSION} {h} {w} {d} {sh} {sw} {sd} dtype=f32\n").into_bytes();
    encode_f32(&mut out, vol.data());
    out
}

/// `path` is used only in error messages.
pub fn decode_volume(bytes: &[u8], path: &str) -> Result<Volume3D> {
    let (lines, payload) = split_lines(bytes, 1, path)?;
    let mut t = lines[0].split_whitespace();
    check_magic(&mut t, VOLUME_MAGIC, "volume", path)?;
    let shape: [usize; 3] = [
        parse_field(t.next(), "H", path)?,
        parse_field(t.next(), "W", path)?,
        parse_field(t.next(), "D", path)?,
    ];
    let spacing: [f64; 3] = [
        parse_field(t.next(), "s_h", path)?,
        parse_field(t.next(), "s_w", path)?,
        parse_field(t.next(), "s_d", path)?,
    ];
    match t.next() {
        Some("dtype=f32") => {}
        other => return Err(format_err(path, format!("unsupported dtype field {other:?}"))),
    }
    if t.next().is_some() {
        return Err(format_err(path, "trailing tokens in header"));
    }
    if shape.contains(&0) || spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(format_err(path, "shape and spacing must be positive"));
    }
    let count = shape[0]
        .checked_mul(shape[1])
        .and_then(|v| v.checked_mul(shape[2]))
        .ok_or_else(|| format_err(path, "declared shape overflows"))?;
    let data = decode_f32(payload, count, path)?;
    Volume3D::new(shape, spacing, data).map_err(|e| format_err(path, e.to_string()))
}

pub fn encode_projections(stack: &ProjectionStack) -> Vec<u8> {
    let mut header = format!(
        "{PROJECTION_MAGIC} {FORMAT_VERSION} {} {} {}\n",
        stack.n_views(),
        stack.rows(),
        stack.cols()
    );
    for a in stack.angles() {
        let _ = writeln!(header, "{a}");
    }
    let mut out = header.into_bytes();
    encode_f32(&mut out, stack.data());
    out
}

pub fn decode_projections(bytes: &[u8], path: &str) -> Result<ProjectionStack> {
    let (first, rest) = split_lines(bytes, 1, path)?;
    let mut t = first[0].split_whitespace();
    check_magic(&mut t, PROJECTION_MAGIC, "projection", path)?;
    let k: usize = parse_field(t.next(), "K", path)?;
    let rows: usize = parse_field(t.next(), "R", path)?;
    let cols: usize = parse_field(t.next(), "C", path)?;
    if t.next().is_some() {
        return Err(format_err(path, "trailing tokens in header"));
    }
    if k == 0 || rows == 0 || cols == 0 {
        return Err(format_err(path, "K, R and C must be positive"));
    }
    if k > rest.len() {
        return Err(format_err(path, format!("file too short for {k} angle lines")));
    }
    let (angle_lines, payload) = split_lines(rest, k, path)?;
    let angles = angle_lines
        .iter()
        .map(|l| parse_field::<f64>(Some(l.trim()), "angle", path))
        .collect::<Result<Vec<_>>>()?;
    let count = k
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| format_err(path, "declared size overflows"))?;
    let data = decode_f32(payload, count, path)?;
    ProjectionStack::new(rows, cols, angles, data).map_err(|e| format_err(path, e.to_string()))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: &Path) -> Result<Volume3D> {
    decode_volume(&read_bytes(path)?, &path.display().to_string())
}

pub fn write_volume(path: &Path, vol: &Volume3D) -> Result<()> {
    write_atomic(path, &encode_volume(vol))
}

pub fn read_projections(path: &Path) -> Result<ProjectionStack> {
    decode_projections(&read_bytes(path)?, &path.display().to_string())
}

pub fn write_projections(path: &Path, stack: &ProjectionStack) -> Result<()> {
    write_atomic(path, &encode_projections(stack))
}

/// Human-editable scanner description (TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub dso_mm: f64,
    pub dsd_mm: f64,
    pub det_rows: usize,
    pub det_cols: usize,
    pub det_spacing_u_mm: f64,
    pub det_spacing_v_mm: f64,
    pub n_views: usize,
    pub angle_range_deg: f64,
    pub volume_shape: [usize; 3],
    pub voxel_spacing_mm: [f64; 3],
}

impl GeometryConfig {
    /// Uniform, endpoint-exclusive angles over `angle_range_deg`.
    pub fn to_geometry(&self) -> Result<ScannerGeometry> {
        ScannerGeometry::new(
            self.dso_mm,
            self.dsd_mm,
            [self.det_rows, self.det_cols],
            [self.det_spacing_u_mm, self.det_spacing_v_mm],
            uniform_angles_over(self.n_views, self.angle_range_deg.to_radians())?,
            self.volume_shape,
            self.voxel_spacing_mm,
        )
    }

    /// Inverse of [`GeometryConfig::to_geometry`] for uniformly spaced angle sets starting at 0.
    pub fn from_geometry(geom: &ScannerGeometry) -> Result<Self> {
        let k = geom.n_views();
        let step = if k > 1 {
            (geom.angles[k - 1] - geom.angles[0]) / (k - 1) as f64
        } else {
            std::f64::consts::PI
        };
        let range = step * k as f64;
        let uniform = uniform_angles_over(k, range)?;
        if geom.angles.iter().zip(&uniform).any(|(a, b)| (a - b).abs() > 1e-9) {
            return Err(invalid("geometry angles are not a uniform set starting at 0"));
        }
        Ok(Self {
            dso_mm: geom.dso,
            dsd_mm: geom.dsd,
            det_rows: geom.det_rows,
            det_cols: geom.det_cols,
            det_spacing_u_mm: geom.det_spacing_u,
            det_spacing_v_mm: geom.det_spacing_v,
            n_views: k,
            angle_range_deg: range.to_degrees(),
            volume_shape: geom.volume_shape,
            voxel_spacing_mm: geom.voxel_spacing,
        })
    }
}

pub fn parse_geometry(text: &str, path: &str) -> Result<GeometryConfig> {
    toml::from_str(text).map_err(|e| format_err(path, e.message().to_string()))
}

pub fn read_geometry(path: &Path) -> Result<GeometryConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_geometry(&text, &path.display().to_string())
}

pub fn write_geometry(path: &Path, cfg: &GeometryConfig) -> Result<()> {
    let text = toml::to_string(cfg).map_err(|e| invalid(format!("cannot encode geometry: {e}")))?;
    write_atomic(path, text.as_bytes())
}

/// Binary PGM (P5) of one slice, intensities clipped to `[lo, hi]`.
pub fn encode_slice_pgm(vol: &Volume3D, axis: usize, index: usize, lo: f32, hi: f32) -> Result<Vec<u8>> {
    let shape = vol.shape();
    if axis > 2 {
        return Err(invalid(format!("slice axis must be 0, 1 or 2, got {axis}")));
    }
    if index >= shape[axis] {
        return Err(invalid(format!("slice index {index} out of range for axis of length {}", shape[axis])));
    }
    if !(hi > lo) {
        return Err(invalid("display window must satisfy hi > lo"));
    }
    let (r_axis, c_axis) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let (rows, cols) = (shape[r_axis], shape[c_axis]);
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    for r in 0..rows {
        for c in 0..cols {
            let mut idx = [0usize; 3];
            idx[axis] = index;
            idx[r_axis] = r;
            idx[c_axis] = c;
            let v = ((vol.get(idx[0], idx[1], idx[2]) - lo) / (hi - lo)).clamp(0.0, 1.0);
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{make_phantom, PhantomKind};

    #[test]
    fn volume_round_trip_is_byte_identical() {
        let v = make_phantom(PhantomKind::SheppLogan3d, [8, 9, 10], [0.5, 1.25, 3.2], 0).unwrap();
        let bytes = encode_volume(&v);
        let back = decode_volume(&bytes, "mem").unwrap();
        assert_eq!(back, v);
        assert_eq!(encode_volume(&back), bytes);
    }

    #[test]
    fn truncated_and_versioned_volumes_are_rejected() {
        let v = Volume3D::zeros([2, 2, 2], [1.0; 3]).unwrap();
        let bytes = encode_volume(&v);
        assert!(matches!(decode_volume(&bytes[..bytes.len() - 1], "m"), Err(Error::Format { .. })));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_volume(&extra, "m"), Err(Error::Format { .. })));
        let v2 = String::from_utf8_lossy(&bytes).replacen("v1", "v2", 1).into_bytes();
        assert!(matches!(decode_volume(&v2, "m"), Err(Error::UnsupportedVersion { .. })));
        assert!(matches!(decode_volume(b"NOTVOL v1 1 1 1 1 1 1 dtype=f32\n0000", "m"), Err(Error::Format { .. })));
        assert!(matches!(decode_volume(b"DIFVOL v1 1 1 1 1 1 1 dtype=f64\n00000000", "m"), Err(Error::Format { .. })));
    }

    #[test]
    fn projection_round_trip_is_byte_identical() {
        let g = ScannerGeometry::desk(3).unwrap();
        let mut data = vec![0f32; 3 * 64 * 64];
        data.iter_mut().enumerate().for_each(|(i, v)| *v = (i % 97) as f32 * 0.25);
        let stack = ProjectionStack::new(64, 64, g.angles.clone(), data).unwrap();
        let bytes = encode_projections(&stack);
        let back = decode_projections(&bytes, "p").unwrap();
        assert_eq!(back.data(), stack.data());
        assert_eq!(back.angles(), stack.angles());
        assert_eq!(encode_projections(&back), bytes);
        assert!(back.check_compatible(&g).is_ok());
        assert!(decode_projections(&bytes[..bytes.len() - 4], "p").is_err());
        let v2 = String::from_utf8_lossy(&bytes[..40]).replacen("v1", "v2", 1);
        assert!(matches!(decode_projections(v2.as_bytes(), "p"), Err(Error::UnsupportedVersion { .. })));
    }

    #[test]
    fn geometry_config_round_trip() {
        let g = ScannerGeometry::desk(10).unwrap();
        let cfg = GeometryConfig::from_geometry(&g).unwrap();
        assert_eq!(cfg.angle_range_deg.round(), 180.0);
        let back = cfg.to_geometry().unwrap();
        for (a, b) in back.angles.iter().zip(&g.angles) {
            assert!((a - b).abs() < 1e-12);
        }
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(parse_geometry(&text, "g").unwrap(), cfg);
        assert!(parse_geometry("dso_mm = 1.0", "g").is_err());
    }

    #[test]
    fn pgm_slice_header_and_size() {
        let v = Volume3D::from_fn([4, 5, 6], [1.0; 3], |i, _, _| i as f32 / 3.0).unwrap();
        let pgm = encode_slice_pgm(&v, 2, 1, 0.0, 1.0).unwrap();
        let header = b"P5\n5 4\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        assert_eq!(pgm.len(), header.len() + 20);
        assert_eq!(pgm[header.len()], 0);
        assert_eq!(*pgm.last().unwrap(), 255);
        assert!(encode_slice_pgm(&v, 2, 6, 0.0, 1.0).is_err());
    }
}
