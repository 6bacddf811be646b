//! Point files (ASCII XYZ read/write, ASCII PLY read) and `key = value` text.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud};

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_point<'a>(fields: impl Iterator<Item = &'a str>, path: &Path, line: usize) -> Result<Point3> {
    let mut p = [0.0; 3];
    let mut count = 0;
    for f in fields {
        if count < 3 {
            p[count] = f
                .parse::<f64>()
                .map_err(|_| parse_err(path, line, format!("`{f}` is not a number")))?;
            if !p[count].is_finite() {
                return Err(parse_err(path, line, format!("`{f}` is not finite")));
            }
        }
        count += 1;
    }
    if count < 3 {
        return Err(parse_err(path, line, format!("expected 3 coordinates, found {count}")));
    }
    Ok(p)
}

/// Parses XYZ text: one `x y z` point per line, blank lines and `#` comments
/// skipped.
pub fn parse_xyz(text: &str, path: &Path) -> Result<PointCloud> {
    let mut pts = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split_whitespace();
        let p = parse_point(fields.by_ref().take(3), path, i + 1)?;
        if fields.next().is_some() {
            return Err(parse_err(path, i + 1, "expected exactly 3 coordinates"));
        }
        pts.push(p);
    }
    if pts.is_empty() {
        return Err(parse_err(path, text.lines().count().max(1), "no points in file"));
    }
    PointCloud::new(pts)
}

pub fn read_xyz(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    parse_xyz(&read_text(path)?, path)
}

/// `x y z` lines with 9 significant digits, after optional `# ` comment lines.
pub fn format_xyz(cloud: &PointCloud, comments: &[String]) -> String {
    let mut out = String::with_capacity(cloud.len() * 48);
    for c in comments {
        for line in c.lines() {
            out.push_str("# ");
            out.push_str(line);
            out.push('\n');
        }
    }
    for p in cloud.points() {
        out.push_str(&format!("{:.8e} {:.8e} {:.8e}\n", p[0], p[1], p[2]));
    }
    out
}

pub fn write_xyz(path: impl AsRef<Path>, cloud: &PointCloud, comments: &[String]) -> Result<()> {
    write_text(path, &format_xyz(cloud, comments))
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Parses the vertex positions of an ASCII PLY file. Other elements are
/// ignored; binary encodings are rejected.
pub fn parse_ply(text: &str, path: &Path) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(parse_err(path, 1, "missing `ply` magic line")),
    }
    // (element name, count, property names)
    let mut elements: Vec<(String, usize, Vec<String>)> = Vec::new();
    let mut ascii = false;
    let mut header_end = None;
    for (i, raw) in lines.by_ref() {
        let mut f = raw.split_whitespace();
        match f.next() {
            Some("format") => {
                let fmt = f.next().unwrap_or("");
                if fmt != "ascii" {
                    return Err(Error::Unsupported(format!("{}: PLY format `{fmt}`", path.display())));
                }
                ascii = true;
            }
            Some("element") => {
                let name = f.next().ok_or_else(|| parse_err(path, i + 1, "element without a name"))?;
                let count = f
                    .next()
                    .and_then(|c| c.parse::<usize>().ok())
                    .ok_or_else(|| parse_err(path, i + 1, "element without a valid count"))?;
                elements.push((name.to_string(), count, Vec::new()));
            }
            Some("property") => {
                let last = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(path, i + 1, "property before any element"))?;
                let name = f.last().ok_or_else(|| parse_err(path, i + 1, "property without a name"))?;
                last.2.push(name.to_string());
            }
            Some("end_header") => {
                header_end = Some(i);
                break;
            }
            _ => {}
        }
    }
    let header_end = header_end.ok_or_else(|| parse_err(path, text.lines().count(), "missing end_header"))?;
    if !ascii {
        return Err(parse_err(path, header_end + 1, "missing format line"));
    }
    let mut pts = Vec::new();
    let mut body = lines.filter(|(_, l)| !l.trim().is_empty());
    for (name, count, props) in &elements {
        if name != "vertex" {
            // skip rows of elements we do not read
            for _ in 0..*count {
                body.next();
            }
            continue;
        }
        let col = |axis: &str| {
            props
                .iter()
                .position(|p| p == axis)
                .ok_or_else(|| parse_err(path, header_end + 1, format!("vertex has no `{axis}` property")))
        };
        let cols = [col("x")?, col("y")?, col("z")?];
        for _ in 0..*count {
            let (i, line) = body
                .next()
                .ok_or_else(|| parse_err(path, text.lines().count(), "fewer vertices than declared"))?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            let p = parse_point(
                cols.iter().map(|&c| fields.get(c).copied().unwrap_or("")).filter(|s| !s.is_empty()),
                path,
                i + 1,
            )?;
            pts.push(p);
        }
        break;
    }
    if pts.is_empty() {
        return Err(parse_err(path, header_end + 1, "no vertices"));
    }
    PointCloud::new(pts)
}

pub fn read_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    parse_ply(&read_text(path)?, path)
}

/// Reads `.ply` files as PLY and everything else as XYZ.
pub fn read_points(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let is_ply = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("ply"));
    if is_ply {
        read_ply(path)
    } else {
        read_xyz(path)
    }
}

/// `key = value` lines; blank lines and `#` comments skipped.
pub fn parse_key_values(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| parse_err(path, i + 1, "expected `key = value`"))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(parse_err(path, i + 1, "empty key"));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn read_key_values(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    parse_key_values(&read_text(path)?, path)
}

pub fn format_key_values<K: AsRef<str>, V: AsRef<str>>(pairs: &[(K, V)]) -> String {
    pairs
        .iter()
        .map(|(k, v)| format!("{} = {}\n", k.as_ref(), v.as_ref()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn xyz_round_trip_keeps_nine_digits() {
        let c = PointCloud::new(vec![[0.123456789123, -1e-7, 12345.6789], [1.0, 2.0, 3.0]]).unwrap();
        let text = format_xyz(&c, &["seed = 7".into()]);
        assert!(text.starts_with("# seed = 7\n"));
        let back = parse_xyz(&text, p()).unwrap();
        for (a, b) in c.points().iter().zip(back.points()) {
            for i in 0..3 {
                assert!((a[i] - b[i]).abs() <= 5e-9 * a[i].abs());
            }
        }
    }

    #[test]
    fn xyz_errors_carry_line_numbers() {
        match parse_xyz("# header\n1 2 3\n4 five 6\n", p()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_xyz("1 2\n", p()), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_xyz("1 2 3 4\n", p()), Err(Error::Parse { line: 1, .. })));
        assert!(parse_xyz("# nothing\n", p()).is_err());
    }

    #[test]
    fn ply_vertices_are_read() {
        let text = "ply\nformat ascii 1.0\ncomment x\nelement vertex 2\nproperty float y\nproperty float x\n\
                    property float z\nproperty uchar red\nelement face 1\nproperty list uchar int vertex_indices\n\
                    end_header\n1 2 3 255\n4 5 6 0\n3 0 1 1\n";
        let c = parse_ply(text, p()).unwrap();
        assert_eq!(c.points(), &[[2.0, 1.0, 3.0], [5.0, 4.0, 6.0]]);
    }

    #[test]
    fn binary_ply_is_unsupported() {
        let text = "ply\nformat binary_little_endian 1.0\nelement vertex 1\nend_header\n";
        assert!(matches!(parse_ply(text, p()), Err(Error::Unsupported(_))));
    }

    #[test]
    fn key_values() {
        let kv = parse_key_values("# c\nL = 5\n eta=0 \n\n", p()).unwrap();
        assert_eq!(kv, vec![("L".into(), "5".into()), ("eta".into(), "0".into())]);
        assert!(parse_key_values("novalue\n", p()).is_err());
        assert_eq!(format_key_values(&kv), "L = 5\neta = 0\n");
    }
}
