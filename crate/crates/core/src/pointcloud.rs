//! Point clouds and PLY input/output.

use std::io::{BufRead, BufReader, Read, Write};

use nalgebra::Point3;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CloudError {
    #[error("point {0} has non-finite coordinates")]
    NonFinite(usize),
    #[error("point {0} has a non-positive sigma")]
    BadSigma(usize),
    #[error("sigma list has {got} entries for {expected} points")]
    SigmaLength { got: usize, expected: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed PLY: {0}")]
    Ply(String),
}

/// Points in a named frame, optionally with per-point standard deviation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point3<f64>>,
    pub sigmas: Option<Vec<f64>>,
    pub frame: String,
    pub stamp: f64,
}

impl PointCloud {
    pub fn new(points: Vec<Point3<f64>>, frame: impl Into<String>, stamp: f64) -> Self {
        Self { points, sigmas: None, frame: frame.into(), stamp }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<(), CloudError> {
        if let Some(i) = self.points.iter().position(|p| !p.coords.iter().all(|v| v.is_finite())) {
            return Err(CloudError::NonFinite(i));
        }
        if let Some(s) = &self.sigmas {
            if s.len() != self.points.len() {
                return Err(CloudError::SigmaLength { got: s.len(), expected: self.points.len() });
            }
            if let Some(i) = s.iter().position(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(CloudError::BadSigma(i));
            }
        }
        Ok(())
    }
}

/// Writes `binary_little_endian` PLY with double x/y/z.
pub fn write_ply_binary<W: Write>(points: &[Point3<f64>], mut w: W) -> Result<(), CloudError> {
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
        points.len()
    )?;
    let mut buf = Vec::with_capacity(points.len() * 24);
    for p in points {
        for v in p.coords.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Writes ASCII PLY with vertices and optional triangular faces.
pub fn write_ply_ascii<W: Write>(points: &[Point3<f64>], faces: &[[usize; 3]], mut w: W) -> Result<(), CloudError> {
    writeln!(w, "ply\nformat ascii 1.0\nelement vertex {}", points.len())?;
    writeln!(w, "property double x\nproperty double y\nproperty double z")?;
    if !faces.is_empty() {
        writeln!(w, "element face {}\nproperty list uchar int vertex_indices", faces.len())?;
    }
    writeln!(w, "end_header")?;
    for p in points {
        writeln!(w, "{} {} {}", p.x, p.y, p.z)?;
    }
    for f in faces {
        writeln!(w, "3 {} {} {}", f[0], f[1], f[2])?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum PlyType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PlyType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        }
    }
}

/// Reads the vertex element of an ASCII or binary little-endian PLY file.
///
/// Only x/y/z are kept; other scalar vertex properties are skipped. Elements
/// after `vertex` are ignored.
pub fn read_ply<R: Read>(r: R) -> Result<Vec<Point3<f64>>, CloudError> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    let next_line = |r: &mut BufReader<R>, line: &mut String| -> Result<(), CloudError> {
        line.clear();
        if r.read_line(line)? == 0 {
            return Err(CloudError::Ply("unexpected end of header".into()));
        }
        Ok(())
    };
    next_line(&mut r, &mut line)?;
    if line.trim() != "ply" {
        return Err(CloudError::Ply("missing `ply` magic".into()));
    }
    let mut binary = None;
    let mut vertex_count = None;
    let mut in_vertex = false;
    let mut seen_vertex = false;
    let mut props: Vec<(String, PlyType)> = Vec::new();
    loop {
        next_line(&mut r, &mut line)?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => binary = Some(false),
            ["format", "binary_little_endian", _] => binary = Some(true),
            ["format", other, _] => return Err(CloudError::Ply(format!("unsupported format {other}"))),
            ["element", name, n] => {
                in_vertex = *name == "vertex";
                if in_vertex {
                    if seen_vertex {
                        return Err(CloudError::Ply("duplicate vertex element".into()));
                    }
                    seen_vertex = true;
                    vertex_count = Some(n.parse::<usize>().map_err(|_| CloudError::Ply(format!("bad count {n}")))?);
                } else if !seen_vertex {
                    return Err(CloudError::Ply("elements before vertex are not supported".into()));
                }
            }
            ["property", "list", ..] if in_vertex => {
                return Err(CloudError::Ply("list properties on vertices are not supported".into()))
            }
            ["property", ty, name] if in_vertex => {
                let t = PlyType::parse(ty).ok_or_else(|| CloudError::Ply(format!("unknown type {ty}")))?;
                props.push((name.to_string(), t));
            }
            ["comment", ..] | ["obj_info", ..] | ["property", ..] | [] => {}
            _ => return Err(CloudError::Ply(format!("unexpected header line `{}`", line.trim()))),
        }
    }
    let binary = binary.ok_or_else(|| CloudError::Ply("missing format line".into()))?;
    let n = vertex_count.ok_or_else(|| CloudError::Ply("missing vertex element".into()))?;
    let find = |k: &str| {
        props.iter().position(|(name, _)| name == k).ok_or_else(|| CloudError::Ply(format!("missing property {k}")))
    };
    let (ix, iy, iz) = (find("x")?, find("y")?, find("z")?);
    let mut out = Vec::with_capacity(n);
    if binary {
        let offsets: Vec<usize> = props
            .iter()
            .scan(0, |acc, (_, t)| {
                let o = *acc;
                *acc += t.size();
                Some(o)
            })
            .collect();
        let stride: usize = props.iter().map(|(_, t)| t.size()).sum();
        let mut rec = vec![0u8; stride];
        for _ in 0..n {
            r.read_exact(&mut rec).map_err(|_| CloudError::Ply("truncated vertex data".into()))?;
            let get = |i: usize| props[i].1.decode(&rec[offsets[i]..]);
            out.push(Point3::new(get(ix), get(iy), get(iz)));
        }
    } else {
        for _ in 0..n {
            next_line(&mut r, &mut line).map_err(|_| CloudError::Ply("truncated vertex data".into()))?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| CloudError::Ply(format!("bad number `{t}`"))))
                .collect::<Result<_, _>>()?;
            if vals.len() < props.len() {
                return Err(CloudError::Ply("short vertex line".into()));
            }
            out.push(Point3::new(vals[ix], vals[iy], vals[iz]));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts() -> Vec<Point3<f64>> {
        vec![Point3::new(0.1, -2.0, 3.5), Point3::new(1e-9, 0.0, -7.25)]
    }

    #[test]
    fn binary_round_trip_is_exact() {
        let mut buf = Vec::new();
        write_ply_binary(&pts(), &mut buf).unwrap();
        assert_eq!(read_ply(&buf[..]).unwrap(), pts());
    }

    #[test]
    fn ascii_round_trip() {
        let mut buf = Vec::new();
        write_ply_ascii(&pts(), &[[0, 1, 0]], &mut buf).unwrap();
        assert_eq!(read_ply(&buf[..]).unwrap(), pts());
    }

    #[test]
    fn reads_float_binary_with_extra_properties() {
        let mut buf = b"ply\nformat binary_little_endian 1.0\ncomment made by hand\nelement vertex 1\nproperty uchar red\nproperty float x\nproperty float y\nproperty float z\nend_header\n".to_vec();
        buf.push(200);
        for v in [1.5f32, -0.25, 2.0] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(read_ply(&buf[..]).unwrap(), vec![Point3::new(1.5, -0.25, 2.0)]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(read_ply(&b"plx\n"[..]).is_err());
        assert!(read_ply(&b"ply\nformat binary_big_endian 1.0\nend_header\n"[..]).is_err());
        assert!(read_ply(&b"ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 2 3\n"[..]).is_err());
    }

    #[test]
    fn validation() {
        let mut c = PointCloud::new(pts(), "sensor", 0.0);
        assert!(c.validate().is_ok());
        c.sigmas = Some(vec![0.1, 0.0]);
        assert!(matches!(c.validate(), Err(CloudError::BadSigma(1))));
        c.sigmas = None;
        c.points[0].x = f64::NAN;
        assert!(matches!(c.validate(), Err(CloudError::NonFinite(0))));
    }
}
