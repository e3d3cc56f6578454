//! ASCII PLY point clouds.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, PathContext, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    /// Per-point colors in [0, 1] when the file has red/green/blue.
    pub colors: Option<Vec<[f64; 3]>>,
}

struct Element {
    name: String,
    count: usize,
    props: Vec<(String, String)>,
}

pub fn load_pointcloud(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path).at(path)?;
    parse_ply(&text, path)
}

pub fn parse_ply(text: &str, path: &Path) -> Result<PointCloud> {
    let err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(err(1, "missing 'ply' magic".into())),
    }
    let mut elements: Vec<Element> = Vec::new();
    let mut format_seen = false;
    let mut header_end = None;
    for (n, line) in lines.by_ref() {
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            [] | ["comment", ..] | ["obj_info", ..] => {}
            ["format", "ascii", _] => format_seen = true,
            ["format", other, ..] => return Err(err(n, format!("unsupported format '{other}', only ascii is read"))),
            ["element", name, count] => {
                let count = count.parse().map_err(|_| err(n, format!("bad element count '{count}'")))?;
                elements.push(Element { name: name.to_string(), count, props: Vec::new() });
            }
            ["property", "list", _, _, name] => match elements.last_mut() {
                Some(e) => e.props.push(("list".into(), name.to_string())),
                None => return Err(err(n, "property before any element".into())),
            },
            ["property", ty, name] => match elements.last_mut() {
                Some(e) => e.props.push((ty.to_string(), name.to_string())),
                None => return Err(err(n, "property before any element".into())),
            },
            ["end_header"] => {
                header_end = Some(n);
                break;
            }
            _ => return Err(err(n, format!("malformed header line '{line}'"))),
        }
    }
    let header_end = header_end.ok_or_else(|| err(text.lines().count(), "header has no end_header".into()))?;
    if !format_seen {
        return Err(err(header_end, "header declares no format".into()));
    }
    let vi = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| err(header_end, "no vertex element".into()))?;
    let vertex = &elements[vi];
    let col = |name: &str| vertex.props.iter().position(|(_, p)| p == name);
    let (x, y, z) = match (col("x"), col("y"), col("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(err(header_end, "vertex element lacks x, y, z properties".into())),
    };
    if vertex.props.iter().any(|(t, _)| t == "list") {
        return Err(err(header_end, "list properties on vertices are not supported".into()));
    }
    let rgb = match (col("red"), col("green"), col("blue")) {
        (Some(r), Some(g), Some(b)) => Some([r, g, b]),
        _ => None,
    };
    if vertex.count == 0 {
        return Err(err(header_end, "zero vertices".into()));
    }

    let mut data = lines.filter(|(_, l)| !l.is_empty());
    let mut cloud = PointCloud { points: Vec::with_capacity(vertex.count), colors: rgb.map(|_| Vec::new()) };
    for (ei, e) in elements.iter().enumerate() {
        for k in 0..e.count {
            let (n, line) = data.next().ok_or_else(|| {
                err(text.lines().count(), format!("expected {} {} rows, file ends after {k}", e.count, e.name))
            })?;
            if ei != vi {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != e.props.len() {
                return Err(err(n, format!("expected {} values, found {}", e.props.len(), f.len())));
            }
            let num = |c: usize| -> Result<f64> {
                f[c].parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| err(n, format!("bad number '{}'", f[c])))
            };
            cloud.points.push([num(x)?, num(y)?, num(z)?]);
            if let (Some(cols), Some(out)) = (rgb, cloud.colors.as_mut()) {
                let mut c = [0.0; 3];
                for (ch, &ci) in cols.iter().enumerate() {
                    let v = num(ci)?;
                    let ty = vertex.props[ci].0.as_str();
                    c[ch] = if matches!(ty, "uchar" | "uint8") { v / 255.0 } else { v };
                }
                out.push(c);
            }
        }
    }
    if let Some((n, _)) = data.next() {
        return Err(err(n, "more rows than the header declares".into()));
    }
    Ok(cloud)
}

pub fn write_pointcloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut s = String::new();
    let _ = writeln!(s, "ply\nformat ascii 1.0\nelement vertex {}", cloud.points.len());
    s.push_str("property float x\nproperty float y\nproperty float z\n");
    if cloud.colors.is_some() {
        s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    s.push_str("end_header\n");
    for (i, p) in cloud.points.iter().enumerate() {
        let _ = write!(s, "{} {} {}", p[0], p[1], p[2]);
        if let Some(c) = &cloud.colors {
            let q = c[i].map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
            let _ = write!(s, " {} {} {}", q[0], q[1], q[2]);
        }
        s.push('\n');
    }
    fs::write(path, s).at(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<PointCloud> {
        parse_ply(s, Path::new("t.ply"))
    }

    #[test]
    fn three_vertices() {
        let c = parse("ply\nformat ascii 1.0\ncomment hand made\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n1 2 3\n-0.5 0.25 4e-3\n").unwrap();
        assert_eq!(c.points, vec![[0.0, 0.0, 0.0], [1.0, 2.0, 3.0], [-0.5, 0.25, 0.004]]);
        assert!(c.colors.is_none());
    }

    #[test]
    fn extra_properties_and_faces() {
        let c = parse(
            "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float nx\nproperty float y\nproperty float z\nproperty float ny\nproperty float nz\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n1 9 2 3 9 9 255 0 51\n4 9 5 6 9 9 0 255 0\n3 0 1 1\n",
        )
        .unwrap();
        assert_eq!(c.points, vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        assert_eq!(c.colors.unwrap()[0], [1.0, 0.0, 0.2]);
    }

    #[test]
    fn errors_carry_lines() {
        let e = parse("ply\nformat ascii 1.0\nelement vertex 0\nproperty float x\nproperty float y\nproperty float z\nend_header\n").unwrap_err();
        assert!(e.to_string().contains("zero vertices"), "{e}");
        match parse("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 2 3\n1 2\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 9),
            other => panic!("{other:?}"),
        }
        match parse("ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 2 3\n") {
            Err(Error::Parse { msg, .. }) => assert!(msg.contains("ends after 1")),
            other => panic!("{other:?}"),
        }
        match parse("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nbogus\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("{other:?}"),
        }
        assert!(parse("ply\nformat binary_little_endian 1.0\n").is_err());
        assert!(parse("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nend_header\n1 2\n").is_err());
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        let c = PointCloud { points: vec![[0.125, -3.0, 1e-3], [7.0, 8.5, 9.0]], colors: Some(vec![[1.0, 0.0, 0.2], [0.0, 1.0, 0.6]]) };
        write_pointcloud(&path, &c).unwrap();
        assert_eq!(load_pointcloud(&path).unwrap(), c);
    }
}
