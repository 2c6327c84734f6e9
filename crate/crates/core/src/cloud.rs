//! Point clouds in the lidar frame and their CSV form.
//!
//! The CSV header is `x,y,z` optionally followed by `intensity` and/or
//! `ring`, in that order. Lines starting with `#` are comments.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{RigidTransform, Vec3};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub ring: Option<Vec<u16>>,
    pub intensity: Option<Vec<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        Self {
            points,
            ring: None,
            intensity: None,
        }
    }

    pub fn with_rings(points: Vec<Vec3>, ring: Vec<u16>) -> Self {
        assert_eq!(
            points.len(),
            ring.len(),
            "ring length must match point count"
        );
        Self {
            points,
            ring: Some(ring),
            intensity: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Keeps the points for which `keep` returns true, carrying per-point attributes along.
    pub fn filter_indexed(&self, mut keep: impl FnMut(usize, &Vec3) -> bool) -> PointCloud {
        let idx: Vec<usize> = self
            .points
            .iter()
            .enumerate()
            .filter(|(i, p)| keep(*i, p))
            .map(|(i, _)| i)
            .collect();
        self.select(&idx)
    }

    pub fn select(&self, idx: &[usize]) -> PointCloud {
        PointCloud {
            points: idx.iter().map(|&i| self.points[i]).collect(),
            ring: self
                .ring
                .as_ref()
                .map(|r| idx.iter().map(|&i| r[i]).collect()),
            intensity: self
                .intensity
                .as_ref()
                .map(|v| idx.iter().map(|&i| v[i]).collect()),
        }
    }

    pub fn transformed(&self, t: &RigidTransform) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| t.apply(p)).collect(),
            ring: self.ring.clone(),
            intensity: self.intensity.clone(),
        }
    }

    pub fn extend(&mut self, other: &PointCloud) {
        let (n_self, n_other) = (self.len(), other.len());
        self.points.extend_from_slice(&other.points);
        self.ring = match (self.ring.take(), &other.ring) {
            (Some(mut a), Some(b)) => {
                a.extend_from_slice(b);
                Some(a)
            }
            (None, None) => None,
            (a, b) => {
                let mut out = a.unwrap_or_else(|| vec![0; n_self]);
                out.extend(b.clone().unwrap_or_else(|| vec![0; n_other]));
                Some(out)
            }
        };
        self.intensity = match (self.intensity.take(), &other.intensity) {
            (None, None) => None,
            (a, b) => {
                let mut out = a.unwrap_or_else(|| vec![0.0; n_self]);
                out.extend(b.clone().unwrap_or_else(|| vec![0.0; n_other]));
                Some(out)
            }
        };
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<PointCloud> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(file, path)
    }

    pub fn from_reader<R: Read>(reader: R, label: &Path) -> Result<PointCloud> {
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| Error::parse(label, e.to_string()))?
            .clone();
        let cols: Vec<&str> = headers.iter().collect();
        if cols.len() < 3 || cols[..3] != ["x", "y", "z"] {
            return Err(Error::parse(label, "header must start with x,y,z"));
        }
        let mut intensity_col = None;
        let mut ring_col = None;
        for (i, c) in cols.iter().enumerate().skip(3) {
            match *c {
                "intensity" if intensity_col.is_none() && ring_col.is_none() => {
                    intensity_col = Some(i)
                }
                "ring" if ring_col.is_none() => ring_col = Some(i),
                other => return Err(Error::parse(label, format!("unexpected column `{other}`"))),
            }
        }
        let mut cloud = PointCloud {
            points: Vec::new(),
            ring: ring_col.map(|_| Vec::new()),
            intensity: intensity_col.map(|_| Vec::new()),
        };
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::parse(label, e.to_string()))?;
            if rec.len() != cols.len() {
                return Err(Error::parse(
                    label,
                    format!("record {} has {} fields", line + 1, rec.len()),
                ));
            }
            let num = |i: usize| -> Result<f64> {
                let v: f64 = rec[i].parse().map_err(|_| {
                    Error::parse(
                        label,
                        format!("record {}: bad number `{}`", line + 1, &rec[i]),
                    )
                })?;
                if !v.is_finite() {
                    return Err(Error::parse(
                        label,
                        format!("record {}: non-finite value", line + 1),
                    ));
                }
                Ok(v)
            };
            cloud.points.push(Vec3::new(num(0)?, num(1)?, num(2)?));
            if let (Some(i), Some(v)) = (intensity_col, cloud.intensity.as_mut()) {
                v.push(num(i)?);
            }
            if let (Some(i), Some(v)) = (ring_col, cloud.ring.as_mut()) {
                let r: u16 = rec[i].parse().map_err(|_| {
                    Error::parse(
                        label,
                        format!("record {}: bad ring `{}`", line + 1, &rec[i]),
                    )
                })?;
                v.push(r);
            }
        }
        Ok(cloud)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>, comment: Option<&str>) -> Result<()> {
        let path = path.as_ref();
        let mut f =
            std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        self.to_writer(&mut f, comment)
            .map_err(|e| Error::io(path, e))?;
        f.flush().map_err(|e| Error::io(path, e))
    }

    pub fn to_writer<W: Write>(&self, w: &mut W, comment: Option<&str>) -> std::io::Result<()> {
        if let Some(c) = comment {
            writeln!(w, "# {c}")?;
        }
        let mut header = String::from("x,y,z");
        if self.intensity.is_some() {
            header.push_str(",intensity");
        }
        if self.ring.is_some() {
            header.push_str(",ring");
        }
        writeln!(w, "{header}")?;
        for (i, p) in self.points.iter().enumerate() {
            write!(w, "{},{},{}", p.x, p.y, p.z)?;
            if let Some(v) = &self.intensity {
                write!(w, ",{}", v[i])?;
            }
            if let Some(r) = &self.ring {
                write!(w, ",{}", r[i])?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<PointCloud> {
        PointCloud::from_reader(s.as_bytes(), Path::new("mem"))
    }

    #[test]
    fn reads_optional_columns() {
        let c = parse("x,y,z\n1,2,3\n4.5,-1e-3,0\n").unwrap();
        assert_eq!(c.len(), 2);
        assert!(c.ring.is_none() && c.intensity.is_none());

        let c = parse("# made by hand\nx,y,z,intensity,ring\n1,2,3,0.5,7\n").unwrap();
        assert_eq!(c.ring, Some(vec![7]));
        assert_eq!(c.intensity, Some(vec![0.5]));

        let c = parse("x,y,z,ring\n1,2,3,15\n").unwrap();
        assert_eq!(c.ring, Some(vec![15]));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(parse("x,y,z\n1,NaN,3\n").is_err());
        assert!(parse("x,y,z\n1,inf,3\n").is_err());
        assert!(parse("a,b,c\n1,2,3\n").is_err());
        assert!(parse("x,y,z\n1,2\n").is_err());
        assert!(parse("x,y,z,ring,intensity\n1,2,3,1,1\n").is_err());
        assert!(parse("x,y,z\n1,2,3,000\n").is_err());
        assert!(parse("x,y,z\n1;2;3\n").is_err());
    }

    #[test]
    fn writes_what_it_reads() {
        let mut c = PointCloud::with_rings(
            vec![Vec3::new(0.1, -2.0, 3.25), Vec3::new(1e-9, 0.0, 7.0)],
            vec![3, 4],
        );
        c.intensity = Some(vec![1.0, 0.25]);
        let mut buf = Vec::new();
        c.to_writer(&mut buf, Some("test")).unwrap();
        assert_eq!(parse(std::str::from_utf8(&buf).unwrap()).unwrap(), c);
    }
}
