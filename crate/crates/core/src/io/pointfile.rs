//! XYZ text and the ASCII subset of PLY carrying only `x y z` vertices.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::{Point, PointCloud, RigidTransform};

fn parse_line(line: &str, lineno: usize) -> Result<Point> {
    let vals: Vec<&str> = line.split_whitespace().collect();
    if vals.len() != 3 {
        return Err(Error::Parse {
            line: lineno,
            msg: format!("expected 3 values, found {}", vals.len()),
        });
    }
    let mut p = [0.0; 3];
    for (slot, v) in p.iter_mut().zip(&vals) {
        *slot = v.parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("'{v}' is not a number"),
        })?;
    }
    Ok(Point::from(p))
}

fn cloud(points: Vec<Point>) -> Result<PointCloud> {
    if points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    PointCloud::new(points)
}

/// One point per line; `#` starts a comment; blank lines are skipped.
pub fn parse_xyz(text: &str) -> Result<PointCloud> {
    let mut pts = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if !line.is_empty() {
            pts.push(parse_line(line, i + 1)?);
        }
    }
    cloud(pts)
}

/// ASCII PLY with a single `vertex` element of float `x y z` properties.
pub fn parse_ply(text: &str) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                msg: "missing 'ply' magic".into(),
            })
        }
    }
    let mut count: Option<usize> = None;
    let mut props = Vec::new();
    let mut body_start = None;
    for (i, raw) in lines.by_ref() {
        let toks: Vec<&str> = raw.split_whitespace().collect();
        match toks.as_slice() {
            [] | ["comment", ..] | ["obj_info", ..] => {}
            ["format", "ascii", _] => {}
            ["format", f, ..] => return Err(Error::UnsupportedPlyFeature(format!("format {f}"))),
            ["element", "vertex", n] => {
                if count.is_some() {
                    return Err(Error::UnsupportedPlyFeature("repeated vertex element".into()));
                }
                count = Some(n.parse().map_err(|_| Error::Parse {
                    line: i + 1,
                    msg: format!("bad vertex count '{n}'"),
                })?);
            }
            ["element", name, ..] => return Err(Error::UnsupportedPlyFeature(format!("element {name}"))),
            ["property", ty, name] => {
                if !matches!(*ty, "float" | "double" | "float32" | "float64") {
                    return Err(Error::UnsupportedPlyFeature(format!("property type {ty}")));
                }
                props.push(name.to_string());
            }
            ["property", ..] => return Err(Error::UnsupportedPlyFeature(raw.trim().to_string())),
            ["end_header"] => {
                body_start = Some(i + 1);
                break;
            }
            _ => {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("unexpected header line '{}'", raw.trim()),
                })
            }
        }
    }
    if body_start.is_none() {
        return Err(Error::Parse {
            line: text.lines().count(),
            msg: "missing end_header".into(),
        });
    }
    if props != ["x", "y", "z"] {
        return Err(Error::UnsupportedPlyFeature(format!("vertex properties {props:?}")));
    }
    let n = count.ok_or_else(|| Error::Parse {
        line: 1,
        msg: "missing vertex element".into(),
    })?;
    let mut pts = Vec::with_capacity(n);
    for (i, raw) in lines {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if pts.len() == n {
            return Err(Error::Parse {
                line: i + 1,
                msg: "more vertices than declared".into(),
            });
        }
        pts.push(parse_line(line, i + 1)?);
    }
    if pts.len() != n {
        return Err(Error::Parse {
            line: text.lines().count(),
            msg: format!("declared {n} vertices, found {}", pts.len()),
        });
    }
    cloud(pts)
}

pub fn format_xyz(c: &PointCloud) -> String {
    let mut s = String::with_capacity(c.len() * 48);
    for p in c.points() {
        let _ = writeln!(s, "{} {} {}", p.x, p.y, p.z);
    }
    s
}

pub fn format_ply(c: &PointCloud) -> String {
    let mut s = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
        c.len()
    );
    s.push_str(&format_xyz(c));
    s
}

fn is_ply(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply"))
}

/// Reads `.ply` as PLY and anything else as XYZ.
pub fn read_points(path: &Path) -> Result<PointCloud> {
    let text = std::fs::read_to_string(path)?;
    if is_ply(path) {
        parse_ply(&text)
    } else {
        parse_xyz(&text)
    }
}

pub fn write_xyz(path: &Path, c: &PointCloud) -> Result<()> {
    Ok(std::fs::write(path, format_xyz(c))?)
}

pub fn write_ply(path: &Path, c: &PointCloud) -> Result<()> {
    Ok(std::fs::write(path, format_ply(c))?)
}

/// Writes PLY for `.ply` paths and XYZ otherwise.
pub fn write_points(path: &Path, c: &PointCloud) -> Result<()> {
    if is_ply(path) {
        write_ply(path, c)
    } else {
        write_xyz(path, c)
    }
}

/// `{"rotation": [9 row-major], "translation": [3]}`.
pub fn read_transform(path: &Path) -> Result<RigidTransform> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

pub fn write_transform(path: &Path, t: &RigidTransform) -> Result<()> {
    Ok(std::fs::write(path, serde_json::to_string_pretty(t)?)?)
}
