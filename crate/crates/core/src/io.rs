//! Point-cloud CSV: one sample per row, numeric columns, optional header.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major samples read from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.data.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Parses CSV text. A first line that is not fully numeric is a header.
pub fn parse_points(text: &str, origin: &str) -> Result<PointCloud> {
    let mut dim = None;
    let mut data = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: std::result::Result<Vec<f64>, _> = line.split(',').map(|f| f.trim().parse::<f64>()).collect();
        let row = match fields {
            Ok(row) => row,
            Err(_) if dim.is_none() && data.is_empty() && ln == first_content_line(text) => continue,
            Err(_) => return Err(Error::Parse(format!("{origin}: line {} is not numeric", ln + 1))),
        };
        if row.iter().any(|x| !x.is_finite()) {
            return Err(Error::Parse(format!("{origin}: line {} has a non-finite value", ln + 1)));
        }
        match dim {
            None => dim = Some(row.len()),
            Some(d) if d != row.len() => {
                return Err(Error::Parse(format!(
                    "{origin}: line {} has {} columns, expected {d}",
                    ln + 1,
                    row.len()
                )))
            }
            _ => {}
        }
        data.extend(row);
    }
    let dim = dim.ok_or_else(|| Error::Parse(format!("{origin}: no data rows")))?;
    Ok(PointCloud { dim, data })
}

fn first_content_line(text: &str) -> usize {
    text.lines()
        .position(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .unwrap_or(0)
}

pub fn read_points_csv(path: &Path) -> Result<PointCloud> {
    let text = std::fs::read_to_string(path)?;
    parse_points(&text, &path.display().to_string())
}

/// Writes `x0,x1,..` followed by one row per sample.
pub fn write_points_csv(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut out = (0..cloud.dim).map(|j| format!("x{j}")).collect::<Vec<_>>().join(",");
    out.push('\n');
    for i in 0..cloud.len() {
        let row = cloud.row(i);
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{v}").expect("string write");
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_optional() {
        let a = parse_points("x,y\n1,2\n3,4\n", "t").unwrap();
        let b = parse_points("1,2\n3,4\n", "t").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim, 2);
        assert_eq!(a.row(1), &[3.0, 4.0]);
    }

    #[test]
    fn rejects_ragged_and_text_rows() {
        assert!(parse_points("1,2\n3\n", "t").is_err());
        assert!(parse_points("1,2\nx,y\n", "t").is_err());
        assert!(parse_points("x,y\n", "t").is_err());
        assert!(parse_points("1,nan\n", "t").is_err());
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        let c = PointCloud {
            dim: 3,
            data: vec![0.1, -2.5e-17, 3.0, 1.0 / 3.0, 7.0, 8.0],
        };
        write_points_csv(&p, &c).unwrap();
        assert_eq!(read_points_csv(&p).unwrap(), c);
    }
}
