//! PLY reader/writer for point clouds with optional per-vertex normals.
//! Supports ASCII and binary little-endian, float32/float64 coordinates.

use super::{LidarMap, LidarPoint, MapError};
use crate::geometry::Vec3;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy)]
pub struct PlyOptions {
    pub voxel_size: f64,
    /// Neighborhood size for normal estimation when the file has no
    /// normals. `None` makes missing normals a hard error.
    pub estimate_normals_k: Option<usize>,
}

impl Default for PlyOptions {
    fn default() -> Self {
        Self {
            voxel_size: 1.0,
            estimate_normals_k: Some(8),
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Format {
    Ascii,
    BinaryLe,
}

#[derive(Clone, Copy, PartialEq)]
enum Scalar {
    F32,
    F64,
    I8,
    I16,
    I32,
    U8,
    U16,
    U32,
}

impl Scalar {
    fn parse(s: &str) -> Option<Scalar> {
        Some(match s {
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            "char" | "int8" => Scalar::I8,
            "short" | "int16" => Scalar::I16,
            "int" | "int32" => Scalar::I32,
            "uchar" | "uint8" => Scalar::U8,
            "ushort" | "uint16" => Scalar::U16,
            "uint" | "uint32" => Scalar::U32,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read_le(self, buf: &[u8]) -> f64 {
        match self {
            Scalar::F32 => f32::from_le_bytes(buf[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(buf[..8].try_into().unwrap()),
            Scalar::I8 => buf[0] as i8 as f64,
            Scalar::I16 => i16::from_le_bytes(buf[..2].try_into().unwrap()) as f64,
            Scalar::I32 => i32::from_le_bytes(buf[..4].try_into().unwrap()) as f64,
            Scalar::U8 => buf[0] as f64,
            Scalar::U16 => u16::from_le_bytes(buf[..2].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(buf[..4].try_into().unwrap()) as f64,
        }
    }
}

struct Header {
    format: Format,
    vertex_count: usize,
    /// (type, name) per vertex property, in file order.
    properties: Vec<(Scalar, String)>,
}

fn parse_header<R: BufRead>(reader: &mut R) -> Result<Header, MapError> {
    let mut line = String::new();
    reader.read_line(&mut line)?;
    if line.trim_end() != "ply" {
        return Err(MapError::Parse("missing ply magic".into()));
    }
    let mut format = None;
    let mut vertex_count = None;
    let mut properties = Vec::new();
    let mut in_vertex_element = false;
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(MapError::Parse("unexpected end of header".into()));
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["end_header"] => break,
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["format", fmt, _version] => {
                format = Some(match *fmt {
                    "ascii" => Format::Ascii,
                    "binary_little_endian" => Format::BinaryLe,
                    other => {
                        return Err(MapError::Parse(format!("unsupported format {other}")))
                    }
                });
            }
            ["element", "vertex", n] => {
                vertex_count = Some(
                    n.parse::<usize>()
                        .map_err(|_| MapError::Parse(format!("bad vertex count {n}")))?,
                );
                in_vertex_element = true;
            }
            ["element", name, _] => {
                if vertex_count.is_none() {
                    return Err(MapError::Parse(format!(
                        "element {name} precedes vertex element"
                    )));
                }
                in_vertex_element = false;
            }
            ["property", "list", ..] => {
                if in_vertex_element {
                    return Err(MapError::Parse("list property on vertex element".into()));
                }
            }
            ["property", ty, name] => {
                if in_vertex_element {
                    let scalar = Scalar::parse(ty)
                        .ok_or_else(|| MapError::Parse(format!("unknown type {ty}")))?;
                    properties.push((scalar, name.to_string()));
                }
            }
            _ => return Err(MapError::Parse(format!("bad header line: {}", line.trim()))),
        }
    }
    let format = format.ok_or_else(|| MapError::Parse("missing format line".into()))?;
    let vertex_count =
        vertex_count.ok_or_else(|| MapError::Parse("missing vertex element".into()))?;
    Ok(Header {
        format,
        vertex_count,
        properties,
    })
}

/// Load a PLY point cloud and build the indexed map.
pub fn load_ply<P: AsRef<Path>>(path: P, opts: &PlyOptions) -> Result<LidarMap, MapError> {
    let file = File::open(path.as_ref())?;
    let mut reader = BufReader::new(file);
    let header = parse_header(&mut reader)?;

    let find = |name: &str| header.properties.iter().position(|(_, n)| n == name);
    let ix = find("x").ok_or_else(|| MapError::Parse("missing x property".into()))?;
    let iy = find("y").ok_or_else(|| MapError::Parse("missing y property".into()))?;
    let iz = find("z").ok_or_else(|| MapError::Parse("missing z property".into()))?;
    let normals = match (find("nx"), find("ny"), find("nz")) {
        (Some(a), Some(b), Some(c)) => Some((a, b, c)),
        _ => None,
    };

    let mut points = Vec::with_capacity(header.vertex_count);
    let mut values = vec![0.0f64; header.properties.len()];
    match header.format {
        Format::Ascii => {
            let mut line = String::new();
            for row in 0..header.vertex_count {
                line.clear();
                loop {
                    if reader.read_line(&mut line)? == 0 {
                        return Err(MapError::Parse(format!(
                            "file ends at vertex {row} of {}",
                            header.vertex_count
                        )));
                    }
                    if !line.trim().is_empty() {
                        break;
                    }
                    line.clear();
                }
                let mut count = 0;
                for (slot, tok) in values.iter_mut().zip(line.split_whitespace()) {
                    *slot = tok
                        .parse()
                        .map_err(|_| MapError::Parse(format!("bad number '{tok}' at vertex {row}")))?;
                    count += 1;
                }
                if count != header.properties.len() {
                    return Err(MapError::Parse(format!(
                        "vertex {row}: expected {} values, got {count}",
                        header.properties.len()
                    )));
                }
                points.push(make_point(&values, ix, iy, iz, normals));
            }
        }
        Format::BinaryLe => {
            let row_size: usize = header.properties.iter().map(|(s, _)| s.size()).sum();
            let mut buf = vec![0u8; row_size];
            for row in 0..header.vertex_count {
                reader.read_exact(&mut buf).map_err(|_| {
                    MapError::Parse(format!(
                        "file ends at vertex {row} of {}",
                        header.vertex_count
                    ))
                })?;
                let mut offset = 0;
                for (slot, (scalar, _)) in values.iter_mut().zip(&header.properties) {
                    *slot = scalar.read_le(&buf[offset..]);
                    offset += scalar.size();
                }
                points.push(make_point(&values, ix, iy, iz, normals));
            }
        }
    }

    let map = LidarMap::from_points(points, opts.voxel_size);
    if normals.is_some() || map.has_normals() {
        Ok(map)
    } else {
        match opts.estimate_normals_k {
            Some(k) if map.len() >= k => Ok(map.estimate_normals(k)),
            Some(_) => Ok(map),
            None => Err(MapError::MissingNormals),
        }
    }
}

fn make_point(
    values: &[f64],
    ix: usize,
    iy: usize,
    iz: usize,
    normals: Option<(usize, usize, usize)>,
) -> LidarPoint {
    let position = Vec3::new(values[ix], values[iy], values[iz]);
    let normal = match normals {
        Some((a, b, c)) => Vec3::new(values[a], values[b], values[c]),
        None => Vec3::zeros(),
    };
    LidarPoint { position, normal }
}

fn header_string(count: usize, format: &str, with_colors: bool) -> String {
    let mut s = String::new();
    s.push_str("ply\n");
    s.push_str(&format!("format {format} 1.0\n"));
    s.push_str(&format!("element vertex {count}\n"));
    for name in ["x", "y", "z", "nx", "ny", "nz"] {
        s.push_str(&format!("property double {name}\n"));
    }
    if with_colors {
        for name in ["red", "green", "blue"] {
            s.push_str(&format!("property uchar {name}\n"));
        }
    }
    s.push_str("end_header\n");
    s
}

/// Write points (and optional per-point RGB) as ASCII PLY. Floats are
/// printed with shortest round-trip precision, so re-reading reproduces
/// them bit-exactly.
pub fn write_ply_ascii<P: AsRef<Path>>(
    path: P,
    points: &[LidarPoint],
    colors: Option<&[[u8; 3]]>,
) -> Result<(), MapError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(header_string(points.len(), "ascii", colors.is_some()).as_bytes())?;
    for (i, p) in points.iter().enumerate() {
        write!(
            w,
            "{} {} {} {} {} {}",
            p.position.x, p.position.y, p.position.z, p.normal.x, p.normal.y, p.normal.z
        )?;
        if let Some(colors) = colors {
            let [r, g, b] = colors[i];
            write!(w, " {r} {g} {b}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Write points (and optional per-point RGB) as binary little-endian PLY.
pub fn write_ply_binary<P: AsRef<Path>>(
    path: P,
    points: &[LidarPoint],
    colors: Option<&[[u8; 3]]>,
) -> Result<(), MapError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(header_string(points.len(), "binary_little_endian", colors.is_some()).as_bytes())?;
    for (i, p) in points.iter().enumerate() {
        for v in [
            p.position.x,
            p.position.y,
            p.position.z,
            p.normal.x,
            p.normal.y,
            p.normal.z,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        if let Some(colors) = colors {
            w.write_all(&colors[i])?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn dump(map: &LidarMap) -> String {
        let mut s = String::new();
        for p in &map.points {
            s.push_str(&format!(
                "{} {} {} {} {} {}\n",
                p.position.x, p.position.y, p.position.z, p.normal.x, p.normal.y, p.normal.z
            ));
        }
        s
    }

    #[test]
    fn tiny_ascii_cube() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cube.ply");
        let mut content = String::from(
            "ply\nformat ascii 1.0\nelement vertex 8\n\
             property float x\nproperty float y\nproperty float z\n\
             property float nx\nproperty float ny\nproperty float nz\nend_header\n",
        );
        for i in 0..8 {
            let (x, y, z) = ((i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64);
            content.push_str(&format!("{x} {y} {z} 0 0 1\n"));
        }
        std::fs::write(&path, content).unwrap();
        let map = load_ply(&path, &PlyOptions::default()).unwrap();
        assert_eq!(map.len(), 8);
        for p in &map.points {
            assert_eq!(p.normal, Vec3::new(0.0, 0.0, 1.0));
        }
    }

    #[test]
    fn ascii_binary_twins_match() {
        let mut rng = StdRng::seed_from_u64(42);
        let points: Vec<LidarPoint> = (0..100_000)
            .map(|_| LidarPoint {
                position: Vec3::new(
                    rng.random_range(-50.0..50.0),
                    rng.random_range(-50.0..50.0),
                    rng.random_range(-50.0..50.0),
                ),
                normal: Vec3::new(0.0, 0.0, 1.0),
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ply");
        let b = dir.path().join("b.ply");
        write_ply_ascii(&a, &points, None).unwrap();
        write_ply_binary(&b, &points, None).unwrap();
        let opts = PlyOptions {
            voxel_size: 10.0,
            estimate_normals_k: None,
        };
        let ma = load_ply(&a, &opts).unwrap();
        let mb = load_ply(&b, &opts).unwrap();
        assert_eq!(dump(&ma).into_bytes(), dump(&mb).into_bytes());
    }

    #[test]
    fn truncated_file_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.ply");
        let mut content = String::from(
            "ply\nformat ascii 1.0\nelement vertex 10\n\
             property float x\nproperty float y\nproperty float z\nend_header\n",
        );
        for i in 0..9 {
            content.push_str(&format!("{i} 0 1\n"));
        }
        std::fs::write(&path, content).unwrap();
        let err = load_ply(&path, &PlyOptions::default()).unwrap_err();
        assert!(matches!(err, MapError::Parse(_)), "{err}");
    }

    #[test]
    fn missing_normals_without_estimation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plain.ply");
        std::fs::write(
            &path,
            "ply\nformat ascii 1.0\nelement vertex 1\n\
             property float x\nproperty float y\nproperty float z\nend_header\n1 2 3\n",
        )
        .unwrap();
        let opts = PlyOptions {
            voxel_size: 1.0,
            estimate_normals_k: None,
        };
        assert!(matches!(
            load_ply(&path, &opts).unwrap_err(),
            MapError::MissingNormals
        ));
    }

    #[test]
    fn normals_estimated_when_absent() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plane.ply");
        let mut content = String::from(
            "ply\nformat ascii 1.0\nelement vertex 64\n\
             property float x\nproperty float y\nproperty float z\nend_header\n",
        );
        for i in 0..8 {
            for j in 0..8 {
                content.push_str(&format!("{} {} 2.0\n", i as f64 * 0.1, j as f64 * 0.1));
            }
        }
        std::fs::write(&path, content).unwrap();
        let map = load_ply(&path, &PlyOptions::default()).unwrap();
        for p in &map.points {
            assert!((p.normal.z.abs() - 1.0).abs() < 1e-6);
        }
    }
}
