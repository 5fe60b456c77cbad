//! XYZ and ASCII PLY reading and writing.
//!
//! Coordinates are written with Rust's shortest round-trip float formatting,
//! so positions survive a save/load cycle exactly. PLY colors are stored as
//! `uchar` and therefore quantized to multiples of 1/255.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use super::{Point, PointCloud, Rgb};
use crate::error::{MspError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    Xyz,
    PlyAscii,
}

impl CloudFormat {
    pub fn from_path(path: &Path) -> Option<CloudFormat> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "xyz" | "txt" => Some(CloudFormat::Xyz),
            "ply" => Some(CloudFormat::PlyAscii),
            _ => None,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            CloudFormat::Xyz => "xyz",
            CloudFormat::PlyAscii => "ply",
        }
    }
}

impl FromStr for CloudFormat {
    type Err = MspError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xyz" => Ok(CloudFormat::Xyz),
            "ply" | "ply-ascii" => Ok(CloudFormat::PlyAscii),
            other => Err(MspError::Config(format!("unknown cloud format '{other}'"))),
        }
    }
}

pub fn load_cloud(path: &Path, format: CloudFormat) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| MspError::io(path, e))?;
    match format {
        CloudFormat::Xyz => parse_xyz(&text, path),
        CloudFormat::PlyAscii => parse_ply(&text, path),
    }
}

pub fn save_cloud(cloud: &PointCloud, path: &Path, format: CloudFormat) -> Result<()> {
    let text = match format {
        CloudFormat::Xyz => format_xyz(cloud),
        CloudFormat::PlyAscii => format_ply(cloud),
    };
    fs::write(path, text).map_err(|e| MspError::io(path, e))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> MspError {
    MspError::Parse { path: path.to_path_buf(), line, message: message.into() }
}

fn parse_f64(tok: &str, path: &Path, line: usize) -> Result<f64> {
    let v: f64 = tok.parse().map_err(|_| parse_err(path, line, format!("invalid number '{tok}'")))?;
    if !v.is_finite() {
        return Err(parse_err(path, line, format!("non-finite value '{tok}'")));
    }
    Ok(v)
}

fn parse_xyz(text: &str, path: &Path) -> Result<PointCloud> {
    let mut positions = Vec::new();
    let mut colors: Vec<Rgb> = Vec::new();
    let mut columns = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 3 && toks.len() != 6 {
            return Err(parse_err(path, line_no, format!("expected 3 or 6 columns, found {}", toks.len())));
        }
        match columns {
            None => columns = Some(toks.len()),
            Some(c) if c != toks.len() => {
                return Err(parse_err(path, line_no, format!("column count changed from {c} to {}", toks.len())))
            }
            _ => {}
        }
        let v = toks.iter().map(|t| parse_f64(t, path, line_no)).collect::<Result<Vec<_>>>()?;
        positions.push(Point::new(v[0], v[1], v[2]));
        if v.len() == 6 {
            colors.push([v[3], v[4], v[5]]);
        }
    }
    if positions.is_empty() {
        return Err(MspError::EmptyInput(path.to_path_buf()));
    }
    let cloud = PointCloud::new(positions)?;
    if colors.is_empty() {
        return Ok(cloud);
    }
    // Integer 0-255 colors are recognized file-wide by any component above 1.
    let scale = if colors.iter().flatten().any(|&c| c > 1.0) { 1.0 / 255.0 } else { 1.0 };
    let colors = colors.into_iter().map(|c| c.map(|v| (v * scale).clamp(0.0, 1.0))).collect();
    cloud.with_colors(colors)
}

fn format_xyz(cloud: &PointCloud) -> String {
    let mut out = String::new();
    for (i, p) in cloud.positions().iter().enumerate() {
        write!(out, "{} {} {}", p.x, p.y, p.z).unwrap();
        if let Some(c) = cloud.colors() {
            write!(out, " {} {} {}", c[i][0], c[i][1], c[i][2]).unwrap();
        }
        out.push('\n');
    }
    out
}

struct PlyElement {
    name: String,
    count: usize,
    properties: Vec<String>,
}

fn parse_ply(text: &str, path: &Path) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        Some((n, _)) => return Err(parse_err(path, n, "missing 'ply' magic")),
        None => return Err(MspError::EmptyInput(path.to_path_buf())),
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut header_done = false;
    for (n, line) in lines.by_ref() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            [] => continue,
            ["format", "ascii", _] => {}
            ["format", other, ..] => return Err(parse_err(path, n, format!("unsupported PLY format '{other}'"))),
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, count] => {
                let count =
                    count.parse().map_err(|_| parse_err(path, n, format!("invalid element count '{count}'")))?;
                elements.push(PlyElement { name: name.to_string(), count, properties: Vec::new() });
            }
            ["property", "list", ..] => {
                let el = elements.last_mut().ok_or_else(|| parse_err(path, n, "property before element"))?;
                if el.name == "vertex" {
                    return Err(parse_err(path, n, "list properties on vertices are unsupported"));
                }
                el.properties.push("list".into());
            }
            ["property", _ty, name] => {
                let el = elements.last_mut().ok_or_else(|| parse_err(path, n, "property before element"))?;
                el.properties.push(name.to_string());
            }
            ["end_header"] => {
                header_done = true;
                break;
            }
            _ => return Err(parse_err(path, n, format!("unrecognized header line '{line}'"))),
        }
    }
    if !header_done {
        return Err(parse_err(path, text.lines().count(), "missing end_header"));
    }
    let vertex_pos =
        elements.iter().position(|e| e.name == "vertex").ok_or_else(|| parse_err(path, 1, "no vertex element"))?;
    let vertex = &elements[vertex_pos];
    let col = |name: &str| vertex.properties.iter().position(|p| p == name);
    let (xi, yi, zi) = match (col("x"), col("y"), col("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(parse_err(path, 1, "vertex element lacks x/y/z")),
    };
    let rgb = match (col("red"), col("green"), col("blue")) {
        (Some(r), Some(g), Some(b)) => Some([r, g, b]),
        _ => None,
    };
    let label_col = col("label");

    let skip: usize = elements[..vertex_pos].iter().map(|e| e.count).sum();
    let mut body = lines.filter(|(_, l)| !l.is_empty()).skip(skip);
    let mut positions = Vec::with_capacity(vertex.count);
    let mut colors = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..vertex.count {
        let (n, line) =
            body.next().ok_or_else(|| parse_err(path, text.lines().count(), "unexpected end of vertex data"))?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != vertex.properties.len() {
            return Err(parse_err(
                path,
                n,
                format!("expected {} values, found {}", vertex.properties.len(), toks.len()),
            ));
        }
        positions.push(Point::new(
            parse_f64(toks[xi], path, n)?,
            parse_f64(toks[yi], path, n)?,
            parse_f64(toks[zi], path, n)?,
        ));
        if let Some(c) = rgb {
            let mut out = [0.0; 3];
            for (o, &ci) in out.iter_mut().zip(&c) {
                let v: u8 =
                    toks[ci].parse().map_err(|_| parse_err(path, n, format!("invalid uchar '{}'", toks[ci])))?;
                *o = f64::from(v) / 255.0;
            }
            colors.push(out);
        }
        if let Some(li) = label_col {
            let v: u8 = toks[li].parse().map_err(|_| parse_err(path, n, format!("invalid label '{}'", toks[li])))?;
            labels.push(v);
        }
    }
    if positions.is_empty() {
        return Err(MspError::EmptyInput(path.to_path_buf()));
    }
    let mut cloud = PointCloud::new(positions)?;
    if rgb.is_some() {
        cloud = cloud.with_colors(colors)?;
    }
    if label_col.is_some() {
        cloud = cloud.with_labels(labels)?;
    }
    Ok(cloud)
}

fn format_ply(cloud: &PointCloud) -> String {
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    writeln!(out, "element vertex {}", cloud.len()).unwrap();
    out.push_str("property float x\nproperty float y\nproperty float z\n");
    if cloud.colors().is_some() {
        out.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    if cloud.labels().is_some() {
        out.push_str("property uchar label\n");
    }
    out.push_str("end_header\n");
    for (i, p) in cloud.positions().iter().enumerate() {
        write!(out, "{} {} {}", p.x, p.y, p.z).unwrap();
        if let Some(c) = cloud.colors() {
            let q = c[i].map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
            write!(out, " {} {} {}", q[0], q[1], q[2]).unwrap();
        }
        if let Some(l) = cloud.labels() {
            write!(out, " {}", l[i]).unwrap();
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<PointCloud> {
        parse_xyz(text, Path::new("mem.xyz"))
    }

    #[test]
    fn xyz_three_columns() {
        let c = parse("1.0 2.0 3.0\n").unwrap();
        assert_eq!(c.positions(), &[Point::new(1.0, 2.0, 3.0)]);
        assert!(c.colors().is_none());
    }

    #[test]
    fn xyz_six_columns_and_comments() {
        let c = parse("# header\n0 0 0 1 0 0\n\n").unwrap();
        assert_eq!(c.positions(), &[Point::origin()]);
        assert_eq!(c.colors().unwrap(), &[[1.0, 0.0, 0.0]]);
    }

    #[test]
    fn xyz_byte_colors_are_normalized() {
        let c = parse("0 0 0 255 0 51\n").unwrap();
        assert_eq!(c.colors().unwrap(), &[[1.0, 0.0, 0.2]]);
    }

    #[test]
    fn xyz_errors_carry_line_numbers() {
        match parse("1 2 3\n1 2\n") {
            Err(MspError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        match parse("1 2 3\n1 2 x\n") {
            Err(MspError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse("# nothing\n"), Err(MspError::EmptyInput(_))));
    }

    #[test]
    fn ply_skips_unknown_properties_and_elements() {
        let text = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\n\
                    property float z\nproperty float nx\nproperty uchar red\nproperty uchar green\n\
                    property uchar blue\nelement face 1\nproperty list uchar int vertex_indices\n\
                    end_header\n0 0 1 9 255 0 0\n1 2 3 9 0 0 255\n3 0 1 2\n";
        let c = parse_ply(text, Path::new("mem.ply")).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.positions()[1], Point::new(1.0, 2.0, 3.0));
        assert_eq!(c.colors().unwrap()[1], [0.0, 0.0, 1.0]);
    }

    #[test]
    fn ply_rejects_binary() {
        let text = "ply\nformat binary_little_endian 1.0\nend_header\n";
        assert!(matches!(parse_ply(text, Path::new("b.ply")), Err(MspError::Parse { line: 2, .. })));
    }

    #[test]
    fn ply_short_body_is_an_error() {
        let text = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\n\
                    property float z\nend_header\n0 0 0\n";
        assert!(parse_ply(text, Path::new("s.ply")).is_err());
    }
}
