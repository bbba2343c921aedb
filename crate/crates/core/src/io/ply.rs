use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;

use super::IoError;
use crate::surfel::{SplatScene, SurfelGaussian};

/// Column order of a splat scene file.
pub const SCENE_COLUMNS: [&str; 13] = [
    "x", "y", "z", "qw", "qx", "qy", "qz", "su", "sv", "opacity", "r", "g", "b",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Ascii,
    BinaryLe,
    BinaryBe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
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

    fn decode(self, b: &[u8], le: bool) -> f64 {
        macro_rules! num {
            ($t:ty) => {{
                let arr = b.try_into().expect("sized slice");
                (if le {
                    <$t>::from_le_bytes(arr)
                } else {
                    <$t>::from_be_bytes(arr)
                }) as f64
            }};
        }
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => num!(i16),
            Self::U16 => num!(u16),
            Self::I32 => num!(i32),
            Self::U32 => num!(u32),
            Self::F32 => num!(f32),
            Self::F64 => num!(f64),
        }
    }
}

/// Vertex table of a PLY file: column names plus one row per vertex.
#[derive(Clone, Debug, PartialEq)]
pub struct PlyTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl PlyTable {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }
}

/// Reads the `vertex` element of an ASCII or binary PLY file. Other elements
/// must follow the vertices; they are ignored.
pub fn read_ply(path: &Path) -> Result<PlyTable, IoError> {
    let bytes = fs::read(path).map_err(|e| IoError::io(path, e))?;
    parse_ply(path, &bytes)
}

fn parse_ply(path: &Path, bytes: &[u8]) -> Result<PlyTable, IoError> {
    let err = |line: usize, msg: String| IoError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut pos = 0;
    let mut line_no = 0;
    let next_line = |pos: &mut usize| -> Option<String> {
        if *pos >= bytes.len() {
            return None;
        }
        let end = bytes[*pos..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|i| *pos + i)
            .unwrap_or(bytes.len());
        let s = String::from_utf8_lossy(&bytes[*pos..end])
            .trim_end_matches('\r')
            .to_string();
        *pos = (end + 1).min(bytes.len());
        Some(s)
    };
    line_no += 1;
    if next_line(&mut pos).as_deref() != Some("ply") {
        return Err(err(1, "missing `ply` magic".into()));
    }
    let mut format = None;
    let mut vertex_count = None;
    let mut in_vertex = false;
    let mut seen_other_before_vertex = false;
    let mut props: Vec<(Scalar, String)> = Vec::new();
    loop {
        line_no += 1;
        let line = next_line(&mut pos).ok_or_else(|| err(line_no, "header ended without end_header".into()))?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["format", f, _] => {
                format = Some(match *f {
                    "ascii" => Format::Ascii,
                    "binary_little_endian" => Format::BinaryLe,
                    "binary_big_endian" => Format::BinaryBe,
                    other => return Err(err(line_no, format!("unknown format `{other}`"))),
                })
            }
            ["element", name, count] => {
                let count: usize = count
                    .parse()
                    .map_err(|_| err(line_no, format!("bad element count `{count}`")))?;
                in_vertex = *name == "vertex";
                if in_vertex {
                    if seen_other_before_vertex {
                        return Err(err(line_no, "vertex must be the first element".into()));
                    }
                    vertex_count = Some(count);
                } else if vertex_count.is_none() && count > 0 {
                    seen_other_before_vertex = true;
                }
            }
            ["property", "list", ..] if in_vertex => {
                return Err(err(line_no, "list properties on vertices are not supported".into()))
            }
            ["property", ty, name] if in_vertex => {
                let s = Scalar::parse(ty).ok_or_else(|| err(line_no, format!("unknown property type `{ty}`")))?;
                props.push((s, name.to_string()));
            }
            ["property", ..] => {}
            _ => return Err(err(line_no, format!("unrecognized header line `{line}`"))),
        }
    }
    let format = format.ok_or_else(|| err(line_no, "missing format line".into()))?;
    let count = vertex_count.ok_or_else(|| err(line_no, "missing vertex element".into()))?;
    let columns: Vec<String> = props.iter().map(|(_, n)| n.clone()).collect();
    let mut rows = Vec::with_capacity(count);
    match format {
        Format::Ascii => {
            for i in 0..count {
                line_no += 1;
                let line =
                    next_line(&mut pos).ok_or_else(|| err(line_no, format!("expected {count} vertices, found {i}")))?;
                let vals = line
                    .split_whitespace()
                    .map(|t| t.parse::<f64>().map_err(|_| err(line_no, format!("bad number `{t}`"))))
                    .collect::<Result<Vec<f64>, _>>()?;
                if vals.len() != props.len() {
                    return Err(err(
                        line_no,
                        format!("expected {} values, found {}", props.len(), vals.len()),
                    ));
                }
                rows.push(vals);
            }
        }
        Format::BinaryLe | Format::BinaryBe => {
            let le = format == Format::BinaryLe;
            let stride: usize = props.iter().map(|(s, _)| s.size()).sum();
            let body = &bytes[pos..];
            if body.len() < stride * count {
                return Err(IoError::Format {
                    path: path.to_path_buf(),
                    msg: format!("binary body holds {} bytes, expected {}", body.len(), stride * count),
                });
            }
            for chunk in body.chunks_exact(stride.max(1)).take(count) {
                let mut off = 0;
                let row = props
                    .iter()
                    .map(|(s, _)| {
                        let v = s.decode(&chunk[off..off + s.size()], le);
                        off += s.size();
                        v
                    })
                    .collect();
                rows.push(row);
            }
        }
    }
    Ok(PlyTable { columns, rows })
}

fn write_file(path: &Path, data: &[u8]) -> Result<(), IoError> {
    let mut f = fs::File::create(path).map_err(|e| IoError::io(path, e))?;
    f.write_all(data).map_err(|e| IoError::io(path, e))
}

/// Binary little-endian PLY with float32 columns [`SCENE_COLUMNS`].
pub fn write_scene_ply(path: &Path, scene: &SplatScene) -> Result<(), IoError> {
    let mut out = Vec::new();
    out.extend_from_slice(b"ply\nformat binary_little_endian 1.0\n");
    out.extend_from_slice(format!("element vertex {}\n", scene.len()).as_bytes());
    for c in SCENE_COLUMNS {
        out.extend_from_slice(format!("property float {c}\n").as_bytes());
    }
    out.extend_from_slice(b"end_header\n");
    for s in &scene.splats {
        let q = s.rotation();
        let vals = [
            s.center.x,
            s.center.y,
            s.center.z,
            q[0],
            q[1],
            q[2],
            q[3],
            s.scales[0],
            s.scales[1],
            s.opacity,
            s.color.x,
            s.color.y,
            s.color.z,
        ];
        for v in vals {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    write_file(path, &out)
}

pub fn read_scene_ply(path: &Path) -> Result<SplatScene, IoError> {
    let table = read_ply(path)?;
    let idx = SCENE_COLUMNS
        .iter()
        .map(|c| {
            table.column(c).ok_or_else(|| IoError::Format {
                path: path.to_path_buf(),
                msg: format!("missing vertex property `{c}`"),
            })
        })
        .collect::<Result<Vec<usize>, _>>()?;
    let splats = table
        .rows
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let v: Vec<f64> = idx.iter().map(|&k| row[k]).collect();
            SurfelGaussian::new(
                Vector3::new(v[0], v[1], v[2]),
                [v[3], v[4], v[5], v[6]],
                [v[7], v[8]],
                v[9],
                Vector3::new(v[10], v[11], v[12]),
            )
            .map_err(|e| IoError::Format {
                path: path.to_path_buf(),
                msg: format!("vertex {i}: {e}"),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SplatScene::new(splats))
}

/// ASCII PLY of points with optional per-point feature columns `f0, f1, …`,
/// all as doubles printed in shortest round-trip form.
pub fn write_cloud_ply(path: &Path, points: &[Vector3<f64>], features: Option<&[Vec<f64>]>) -> Result<(), IoError> {
    let width = features.and_then(|f| f.first()).map(|f| f.len()).unwrap_or(0);
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    s.push_str(&format!("element vertex {}\n", points.len()));
    for c in ["x", "y", "z"] {
        s.push_str(&format!("property double {c}\n"));
    }
    for k in 0..width {
        s.push_str(&format!("property double f{k}\n"));
    }
    s.push_str("end_header\n");
    for (i, p) in points.iter().enumerate() {
        let mut vals = vec![p.x, p.y, p.z];
        if let Some(f) = features {
            vals.extend_from_slice(&f[i]);
        }
        let line: Vec<String> = vals.iter().map(|v| format!("{v:?}")).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    write_file(path, s.as_bytes())
}

/// Positions and per-point feature rows.
pub type CloudData = (Vec<Vector3<f64>>, Vec<Vec<f64>>);

/// Points plus any `f*` feature columns, in column-index order.
pub fn read_cloud_ply(path: &Path) -> Result<CloudData, IoError> {
    let table = read_ply(path)?;
    let axis = |c: &str| {
        table.column(c).ok_or_else(|| IoError::Format {
            path: path.to_path_buf(),
            msg: format!("missing vertex property `{c}`"),
        })
    };
    let (x, y, z) = (axis("x")?, axis("y")?, axis("z")?);
    let mut feat_cols: Vec<(usize, usize)> = table
        .columns
        .iter()
        .enumerate()
        .filter_map(|(i, c)| {
            c.strip_prefix('f')
                .and_then(|k| k.parse::<usize>().ok())
                .map(|k| (k, i))
        })
        .collect();
    feat_cols.sort();
    let points = table.rows.iter().map(|r| Vector3::new(r[x], r[y], r[z])).collect();
    let features = table
        .rows
        .iter()
        .map(|r| feat_cols.iter().map(|&(_, i)| r[i]).collect())
        .collect();
    Ok((points, features))
}
