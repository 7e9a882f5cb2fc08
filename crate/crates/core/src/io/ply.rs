//! PLY reader/writer for vertex positions.
//!
//! Reads `ascii` and `binary_little_endian` files whose vertex element has
//! at least `x`, `y`, `z` scalar properties. Other vertex properties are
//! skipped with a warning; elements after the vertices are ignored.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
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

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { count: Scalar, item: Scalar },
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

struct Header {
    format: PlyFormat,
    elements: Vec<Element>,
    /// Byte offset of the payload.
    body: usize,
    /// Line number (1-based) of the first payload line.
    body_line: usize,
}

fn parse_err(path: &Path, location: String, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        location,
        message: message.into(),
    }
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<Header> {
    let mut pos = 0;
    let mut line_no = 0;
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| parse_err(path, format!("line {}", line_no + 1), "header is not terminated by end_header"))?;
        let raw = &bytes[pos..pos + end];
        pos += end + 1;
        line_no += 1;
        let loc = || format!("line {line_no}");
        let line = std::str::from_utf8(raw)
            .map_err(|_| parse_err(path, loc(), "header is not valid UTF-8"))?
            .trim_end_matches('\r')
            .trim();
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if line_no == 1 {
            if line != "ply" {
                return Err(parse_err(path, loc(), "missing 'ply' magic"));
            }
            continue;
        }
        match tokens.first().copied() {
            None | Some("comment") | Some("obj_info") => {}
            Some("format") => {
                let f = match tokens.get(1).copied() {
                    Some("ascii") => PlyFormat::Ascii,
                    Some("binary_little_endian") => PlyFormat::BinaryLittleEndian,
                    Some(other) => return Err(parse_err(path, loc(), format!("unsupported format '{other}'"))),
                    None => return Err(parse_err(path, loc(), "format line without a format")),
                };
                format = Some(f);
            }
            Some("element") => {
                if tokens.len() != 3 {
                    return Err(parse_err(path, loc(), "expected 'element <name> <count>'"));
                }
                let count = tokens[2]
                    .parse()
                    .map_err(|_| parse_err(path, loc(), format!("bad element count '{}'", tokens[2])))?;
                elements.push(Element {
                    name: tokens[1].to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let element = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(path, loc(), "property before any element"))?;
                let prop = if tokens.get(1) == Some(&"list") {
                    if tokens.len() != 5 {
                        return Err(parse_err(path, loc(), "expected 'property list <count> <item> <name>'"));
                    }
                    let count = Scalar::parse(tokens[2]);
                    let item = Scalar::parse(tokens[3]);
                    match (count, item) {
                        (Some(count), Some(item)) => Property::List { count, item },
                        _ => return Err(parse_err(path, loc(), "unknown list property type")),
                    }
                } else {
                    if tokens.len() != 3 {
                        return Err(parse_err(path, loc(), "expected 'property <type> <name>'"));
                    }
                    let ty = Scalar::parse(tokens[1])
                        .ok_or_else(|| parse_err(path, loc(), format!("unknown property type '{}'", tokens[1])))?;
                    Property::Scalar {
                        name: tokens[2].to_string(),
                        ty,
                    }
                };
                element.properties.push(prop);
            }
            Some("end_header") => break,
            Some(other) => return Err(parse_err(path, loc(), format!("unexpected header keyword '{other}'"))),
        }
    }
    let format = format.ok_or_else(|| parse_err(path, "header".into(), "missing format line"))?;
    Ok(Header {
        format,
        elements,
        body: pos,
        body_line: line_no + 1,
    })
}

/// Positions of x, y, z within the vertex properties.
fn xyz_slots(path: &Path, vertex: &Element) -> Result<[usize; 3]> {
    let mut slots = [None; 3];
    for (i, p) in vertex.properties.iter().enumerate() {
        match p {
            Property::Scalar { name, .. } => match name.as_str() {
                "x" => slots[0] = Some(i),
                "y" => slots[1] = Some(i),
                "z" => slots[2] = Some(i),
                other => log::warn!("{}: skipping vertex property '{other}'", path.display()),
            },
            Property::List { .. } => log::warn!("{}: skipping vertex list property", path.display()),
        }
    }
    match slots {
        [Some(x), Some(y), Some(z)] => Ok([x, y, z]),
        _ => Err(parse_err(path, "header".into(), "vertex element lacks x, y, z properties")),
    }
}

pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ply(path, &bytes)
}

/// Parses PLY bytes; `path` only labels errors.
pub fn parse_ply(path: &Path, bytes: &[u8]) -> Result<PointCloud> {
    let header = parse_header(path, bytes)?;
    let vertex_pos = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| parse_err(path, "header".into(), "no vertex element"))?;
    let vertex = &header.elements[vertex_pos];
    let slots = xyz_slots(path, vertex)?;
    let body = &bytes[header.body..];
    let points = match header.format {
        PlyFormat::Ascii => read_ascii(path, body, header.body_line, &header.elements[..vertex_pos], vertex, slots)?,
        PlyFormat::BinaryLittleEndian => {
            read_binary(path, body, header.body, &header.elements[..vertex_pos], vertex, slots)?
        }
    };
    PointCloud::new(points).map_err(|e| parse_err(path, "vertex data".into(), e.to_string()))
}

fn read_ascii(
    path: &Path,
    body: &[u8],
    first_line: usize,
    before: &[Element],
    vertex: &Element,
    slots: [usize; 3],
) -> Result<Vec<Vec3>> {
    let text = std::str::from_utf8(body).map_err(|_| parse_err(path, format!("line {first_line}"), "payload is not valid UTF-8"))?;
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (first_line + i, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    let skip: usize = before.iter().map(|e| e.count).sum();
    for _ in 0..skip {
        if lines.next().is_none() {
            return Err(parse_err(path, "end of file".into(), "truncated payload before vertex element"));
        }
    }
    let mut points = Vec::with_capacity(vertex.count);
    for i in 0..vertex.count {
        let (line_no, line) = lines.next().ok_or_else(|| {
            parse_err(
                path,
                "end of file".into(),
                format!("truncated payload: expected {} vertices, found {i}", vertex.count),
            )
        })?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let mut values = Vec::with_capacity(vertex.properties.len());
        let mut t = 0;
        for p in &vertex.properties {
            let next = |t: &mut usize| -> Result<f64> {
                let tok = tokens
                    .get(*t)
                    .ok_or_else(|| parse_err(path, format!("line {line_no}"), "too few values on vertex line"))?;
                *t += 1;
                tok.parse::<f64>()
                    .map_err(|_| parse_err(path, format!("line {line_no}"), format!("bad number '{tok}'")))
            };
            match p {
                Property::Scalar { .. } => values.push(next(&mut t)?),
                Property::List { .. } => {
                    let n = next(&mut t)? as usize;
                    for _ in 0..n {
                        next(&mut t)?;
                    }
                    values.push(0.0);
                }
            }
        }
        if t != tokens.len() {
            return Err(parse_err(path, format!("line {line_no}"), "too many values on vertex line"));
        }
        points.push(Vec3::new(values[slots[0]], values[slots[1]], values[slots[2]]));
    }
    Ok(points)
}

fn read_binary(
    path: &Path,
    body: &[u8],
    body_offset: usize,
    before: &[Element],
    vertex: &Element,
    slots: [usize; 3],
) -> Result<Vec<Vec3>> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > body.len() {
            return Err(parse_err(
                path,
                format!("byte offset {}", body_offset + *pos),
                "truncated payload",
            ));
        }
        let s = &body[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let skip_record = |pos: &mut usize, props: &[Property], out: Option<&mut Vec<f64>>| -> Result<()> {
        let mut out = out;
        for p in props {
            match *p {
                Property::Scalar { ty, .. } => {
                    let v = ty.decode(take(pos, ty.size())?);
                    if let Some(o) = out.as_deref_mut() {
                        o.push(v);
                    }
                }
                Property::List { count, item } => {
                    let n = count.decode(take(pos, count.size())?);
                    if !(n >= 0.0) {
                        return Err(parse_err(path, format!("byte offset {}", body_offset + *pos), "negative list length"));
                    }
                    take(pos, n as usize * item.size())?;
                    if let Some(o) = out.as_deref_mut() {
                        o.push(0.0);
                    }
                }
            }
        }
        Ok(())
    };
    for e in before {
        for _ in 0..e.count {
            skip_record(&mut pos, &e.properties, None)?;
        }
    }
    let mut points = Vec::with_capacity(vertex.count);
    let mut values = Vec::with_capacity(vertex.properties.len());
    for _ in 0..vertex.count {
        values.clear();
        skip_record(&mut pos, &vertex.properties, Some(&mut values))?;
        points.push(Vec3::new(values[slots[0]], values[slots[1]], values[slots[2]]));
    }
    Ok(points)
}

/// Writes `double` x, y, z vertices. Binary output round-trips bit-exactly;
/// ascii uses shortest round-trip decimal formatting.
pub fn write_ply(cloud: &PointCloud, path: &Path, format: PlyFormat) -> Result<()> {
    fs::write(path, encode_ply(cloud, format)).map_err(|e| Error::io(path, e))
}

pub fn encode_ply(cloud: &PointCloud, format: PlyFormat) -> Vec<u8> {
    let name = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    let mut out = format!(
        "ply\nformat {name} 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
        cloud.len()
    )
    .into_bytes();
    match format {
        PlyFormat::Ascii => {
            for p in cloud.points() {
                out.extend_from_slice(format!("{} {} {}\n", p.x, p.y, p.z).as_bytes());
            }
        }
        PlyFormat::BinaryLittleEndian => {
            out.reserve(cloud.len() * 24);
            for p in cloud.points() {
                for v in [p.x, p.y, p.z] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &[u8]) -> Result<PointCloud> {
        parse_ply(Path::new("test.ply"), text)
    }

    #[test]
    fn single_ascii_vertex() {
        let c = parse(b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n").unwrap();
        assert_eq!(c.points(), &[Vec3::zeros()]);
    }

    #[test]
    fn ascii_truncation_is_reported() {
        let mut text = String::from("ply\nformat ascii 1.0\nelement vertex 10\nproperty float x\nproperty float y\nproperty float z\nend_header\n");
        for i in 0..9 {
            text.push_str(&format!("{i} 0 0\n"));
        }
        let err = parse(text.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn extra_properties_and_faces_are_skipped() {
        let text = b"ply\nformat ascii 1.0\ncomment hi\nelement vertex 2\nproperty float x\nproperty uchar red\nproperty float y\nproperty float z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n1 255 2 3\n4 0 5 6\n3 0 1 1\n";
        let c = parse(text).unwrap();
        assert_eq!(c.points(), &[Vec3::new(1.0, 2.0, 3.0), Vec3::new(4.0, 5.0, 6.0)]);
    }

    #[test]
    fn binary_with_float_and_preceding_element() {
        let mut bytes = b"ply\nformat binary_little_endian 1.0\nelement camera 1\nproperty list uchar float k\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n".to_vec();
        bytes.push(2);
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&2.0f32.to_le_bytes());
        for v in [0.5f32, -1.5, 2.25] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let c = parse(&bytes).unwrap();
        assert_eq!(c.points(), &[Vec3::new(0.5, -1.5, 2.25)]);
        let cut = &bytes[..bytes.len() - 2];
        let err = parse(cut).unwrap_err();
        assert!(err.to_string().contains("byte offset"));
    }

    #[test]
    fn malformed_headers() {
        assert!(parse(b"plx\n").is_err());
        assert!(parse(b"ply\nformat binary_big_endian 1.0\nend_header\n").is_err());
        assert!(parse(b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nend_header\n0\n").is_err());
        assert!(parse(b"ply\nformat ascii 1.0\nelement vertex 1\n").is_err());
        let err = parse(b"ply\nformat ascii 1.0\nelement vertex x\nend_header\n").unwrap_err();
        assert!(err.to_string().contains("line 3"));
    }

    #[test]
    fn ascii_round_trip_is_exact() {
        let c = PointCloud::from_xyz(&[[0.1, -2.0 / 3.0, 1e-17], [123456.789, 0.0, -0.0]]).unwrap();
        let back = parse(&encode_ply(&c, PlyFormat::Ascii)).unwrap();
        assert_eq!(back, c);
    }
}
