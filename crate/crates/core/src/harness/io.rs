//! Point-cloud files and CSV outputs.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::{Covariance3, Mat3, PointCloud, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CloudFormat {
    /// One `x y z` triple per line.
    XyzText,
    /// Minimal ASCII PLY with a single vertex element.
    PlyAscii,
    /// Little-endian `f32` quadruples `(x, y, z, intensity)`.
    KittiBin,
}

impl CloudFormat {
    /// Guesses the format from a file extension.
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("xyz") | Some("txt") => Ok(CloudFormat::XyzText),
            Some("ply") => Ok(CloudFormat::PlyAscii),
            Some("bin") => Ok(CloudFormat::KittiBin),
            _ => Err(Error::InvalidInput(format!("cannot infer a cloud format from {}", path.display()))),
        }
    }
}

pub fn load_cloud(path: &Path, format: CloudFormat) -> Result<PointCloud> {
    let bytes = std::fs::read(path)?;
    parse_cloud(&bytes, format)
}

pub fn save_cloud(path: &Path, cloud: &PointCloud, format: CloudFormat) -> Result<()> {
    std::fs::write(path, encode_cloud(cloud, format))?;
    Ok(())
}

pub fn parse_cloud(bytes: &[u8], format: CloudFormat) -> Result<PointCloud> {
    match format {
        CloudFormat::KittiBin => parse_kitti(bytes),
        CloudFormat::XyzText | CloudFormat::PlyAscii => {
            let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
                offset: e.valid_up_to(),
                message: "file is not valid UTF-8".into(),
            })?;
            if format == CloudFormat::XyzText {
                parse_xyz(text)
            } else {
                parse_ply(text)
            }
        }
    }
}

pub fn encode_cloud(cloud: &PointCloud, format: CloudFormat) -> Vec<u8> {
    match format {
        CloudFormat::XyzText => {
            let mut s = String::new();
            for p in &cloud.points {
                writeln!(s, "{} {} {}", p.x, p.y, p.z).unwrap();
            }
            s.into_bytes()
        }
        CloudFormat::PlyAscii => {
            let mut s = format!(
                "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
                cloud.len()
            );
            for p in &cloud.points {
                writeln!(s, "{} {} {}", p.x, p.y, p.z).unwrap();
            }
            s.into_bytes()
        }
        CloudFormat::KittiBin => {
            let mut out = Vec::with_capacity(cloud.len() * 16);
            for p in &cloud.points {
                for v in [p.x as f32, p.y as f32, p.z as f32, 0.0f32] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            out
        }
    }
}

fn parse_floats(line: &str, offset: usize) -> Result<Vec<f64>> {
    let mut vals = Vec::new();
    let mut pos = 0;
    for token in line.split_whitespace() {
        let start = pos + line[pos..].find(token).expect("token comes from the line");
        pos = start + token.len();
        vals.push(token.parse::<f64>().map_err(|_| Error::Parse {
            offset: offset + start,
            message: format!("invalid number {token:?}"),
        })?);
    }
    Ok(vals)
}

fn parse_xyz(text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let body = line.trim_end_matches(['\n', '\r']);
        if !body.trim().is_empty() && !body.trim_start().starts_with('#') {
            let v = parse_floats(body, offset)?;
            if v.len() != 3 {
                return Err(Error::Parse { offset, message: format!("expected 3 coordinates, found {}", v.len()) });
            }
            points.push(Vec3::new(v[0], v[1], v[2]));
        }
        offset += line.len();
    }
    Ok(PointCloud::new(points))
}

fn parse_ply(text: &str) -> Result<PointCloud> {
    let mut lines = text.split_inclusive('\n');
    let mut offset = 0;
    let mut next = |expect_header: bool| -> Result<(usize, &str)> {
        let line = lines.next().ok_or_else(|| Error::Parse {
            offset: text.len(),
            message: if expect_header { "unterminated PLY header".into() } else { "missing vertex records".into() },
        })?;
        let at = offset;
        offset += line.len();
        Ok((at, line.trim_end_matches(['\n', '\r'])))
    };
    let (at, magic) = next(true)?;
    if magic != "ply" {
        return Err(Error::Parse { offset: at, message: "missing 'ply' magic".into() });
    }
    let mut vertex_count = None;
    let mut properties: Vec<String> = Vec::new();
    let mut in_vertex = false;
    loop {
        let (at, line) = next(true)?;
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => {}
            ["format", other, ..] => {
                return Err(Error::Parse { offset: at, message: format!("unsupported PLY format {other}") })
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", "vertex", n] => {
                vertex_count = Some(n.parse::<usize>().map_err(|_| Error::Parse {
                    offset: at,
                    message: format!("invalid vertex count {n:?}"),
                })?);
                in_vertex = true;
            }
            ["element", name, ..] => {
                return Err(Error::Parse { offset: at, message: format!("unsupported PLY element {name}") })
            }
            ["property", "list", ..] => {
                return Err(Error::Parse { offset: at, message: "list properties are not supported".into() })
            }
            ["property", _ty, name] if in_vertex => properties.push((*name).to_string()),
            _ => return Err(Error::Parse { offset: at, message: format!("malformed header line {line:?}") }),
        }
    }
    let count = vertex_count.ok_or(Error::Parse { offset: 0, message: "PLY header has no vertex element".into() })?;
    let index = |axis: &str| {
        properties.iter().position(|p| p == axis).ok_or(Error::Parse {
            offset: 0,
            message: format!("PLY vertex has no {axis} property"),
        })
    };
    let (ix, iy, iz) = (index("x")?, index("y")?, index("z")?);
    let mut points = Vec::with_capacity(count);
    for _ in 0..count {
        let (at, line) = next(false)?;
        let v = parse_floats(line, at)?;
        if v.len() != properties.len() {
            return Err(Error::Parse {
                offset: at,
                message: format!("expected {} values, found {}", properties.len(), v.len()),
            });
        }
        points.push(Vec3::new(v[ix], v[iy], v[iz]));
    }
    Ok(PointCloud::new(points))
}

fn parse_kitti(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() % 16 != 0 {
        return Err(Error::Parse {
            offset: bytes.len() - bytes.len() % 16,
            message: format!("{} bytes is not a whole number of 16-byte records", bytes.len()),
        });
    }
    let f = |c: &[u8]| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64;
    Ok(PointCloud::new(
        bytes.chunks_exact(16).map(|r| Vec3::new(f(&r[0..4]), f(&r[4..8]), f(&r[8..12]))).collect(),
    ))
}

/// Header of the covariance CSV.
pub const COVARIANCE_HEADER: &str = "c11,c12,c13,c22,c23,c33";

/// One row per point with the upper triangle of its covariance and,
/// optionally, a unit normal.
pub fn covariance_csv(covs: &[Covariance3], normals: Option<&[Vec3]>) -> String {
    let mut s = String::from(COVARIANCE_HEADER);
    if normals.is_some() {
        s.push_str(",nx,ny,nz");
    }
    s.push('\n');
    for (i, c) in covs.iter().enumerate() {
        write!(s, "{},{},{},{},{},{}", c[(0, 0)], c[(0, 1)], c[(0, 2)], c[(1, 1)], c[(1, 2)], c[(2, 2)]).unwrap();
        if let Some(n) = normals {
            write!(s, ",{},{},{}", n[i].x, n[i].y, n[i].z).unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn parse_covariance_csv(text: &str) -> Result<Vec<Covariance3>> {
    let mut lines = text.split_inclusive('\n');
    let header = lines.next().unwrap_or("").trim_end_matches(['\n', '\r']);
    if !header.starts_with(COVARIANCE_HEADER) {
        return Err(Error::Parse { offset: 0, message: format!("expected header {COVARIANCE_HEADER:?}") });
    }
    let mut offset = text.split_inclusive('\n').next().map_or(0, str::len);
    let mut covs = Vec::new();
    for line in lines {
        let body = line.trim_end_matches(['\n', '\r']);
        if !body.is_empty() {
            let v: Vec<f64> = body
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse { offset, message: e.to_string() })?;
            if v.len() < 6 {
                return Err(Error::Parse { offset, message: "expected 6 covariance entries".into() });
            }
            covs.push(Mat3::new(v[0], v[1], v[2], v[1], v[3], v[4], v[2], v[4], v[5]));
        }
        offset += line.len();
    }
    Ok(covs)
}

/// `step,loss,correspondence_loss,pose_loss`.
pub fn loss_csv(loss: &[f64], correspondence: &[f64], pose: &[f64]) -> String {
    let mut s = String::from("step,loss,correspondence_loss,pose_loss\n");
    for i in 0..loss.len() {
        writeln!(s, "{i},{},{},{}", loss[i], correspondence[i], pose[i]).unwrap();
    }
    s
}

/// Two-column `metric,value` table.
pub fn metrics_csv(rows: &[(String, f64)]) -> String {
    let mut s = String::from("metric,value\n");
    for (k, v) in rows {
        writeln!(s, "{k},{v}").unwrap();
    }
    s
}
