//! Finite point sets, the built-in toy distributions and the text file
//! format they are stored in.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::rng;

pub const MAX_DIM: usize = 8;
const DATASET_MAGIC: &str = "tcm-dataset v1";
const SAMPLES_MAGIC: &str = "tcm-samples v1";

/// Noise-level range and data scale shared by every component.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub t_min: f64,
    pub t_max: f64,
    pub sigma_data: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            t_min: 0.002,
            t_max: 80.0,
            sigma_data: 0.5,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.t_min > 0.0 && self.t_min < self.t_max && self.t_max.is_finite()) {
            errs.push(format!(
                "noise.t_min/noise.t_max: need 0 < t_min < t_max, got {} / {}",
                self.t_min, self.t_max
            ));
        }
        if !(self.sigma_data > 0.0 && self.sigma_data.is_finite()) {
            errs.push(format!(
                "noise.sigma_data: must be positive, got {}",
                self.sigma_data
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Affine map applied during normalisation: `x' = (x - mean) / std * sigma_data`.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Immutable point cloud in `R^d`, normalised to per-dimension std `sigma_data`.
#[derive(Clone, Debug)]
pub struct Dataset {
    points: Array,
    sigma_data: f64,
    normalization: Option<Normalization>,
    centers: Option<Array>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Builtin {
    Ring8,
    Grid25,
    TwoMoons,
}

impl Builtin {
    pub const ALL: [Builtin; 3] = [Builtin::Ring8, Builtin::Grid25, Builtin::TwoMoons];

    pub fn name(self) -> &'static str {
        match self {
            Builtin::Ring8 => "ring8",
            Builtin::Grid25 => "grid25",
            Builtin::TwoMoons => "two-moons",
        }
    }

    /// Mixture centres in the raw (pre-normalisation) plane.
    fn raw_centers(self) -> Option<Vec<[f64; 2]>> {
        match self {
            Builtin::Ring8 => Some(
                (0..8)
                    .map(|k| {
                        let a = std::f64::consts::TAU * k as f64 / 8.0;
                        [a.cos(), a.sin()]
                    })
                    .collect(),
            ),
            Builtin::Grid25 => Some(
                (0..25)
                    .map(|k| [(k % 5) as f64 - 2.0, (k / 5) as f64 - 2.0])
                    .collect(),
            ),
            Builtin::TwoMoons => None,
        }
    }

    fn component_std(self) -> f64 {
        match self {
            Builtin::Ring8 => RING8_STD,
            Builtin::Grid25 => 0.1,
            Builtin::TwoMoons => 0.1,
        }
    }
}

/// Per-component std of the ring relative to its unit radius.
pub const RING8_STD: f64 = 0.1;

impl FromStr for Builtin {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Builtin::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| {
                Error::Usage(format!(
                    "unknown dataset '{s}' (expected ring8, grid25 or two-moons)"
                ))
            })
    }
}

impl Dataset {
    /// Normalises raw points to zero mean and per-dimension std `sigma_data`.
    pub fn from_raw(raw: Array, sigma_data: f64) -> Result<Self> {
        let (n, d) = (raw.rows(), raw.cols());
        check_size(n, d)?;
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(raw.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(raw.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std: Vec<f64> = var.iter().map(|s| (s / n as f64).sqrt()).collect();
        if std.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(Error::Domain("dataset has a degenerate dimension".into()));
        }
        let norm = Normalization { mean, std };
        let points = norm.apply(&raw, sigma_data);
        Ok(Dataset {
            points,
            sigma_data,
            normalization: Some(norm),
            centers: None,
        })
    }

    /// Wraps points that are already normalised (e.g. read from disk).
    pub fn from_normalized(points: Array, sigma_data: f64) -> Result<Self> {
        check_size(points.rows(), points.cols())?;
        Ok(Dataset {
            points,
            sigma_data,
            normalization: None,
            centers: None,
        })
    }

    /// Unnormalised wrapper for tiny hand-built oracles (single points,
    /// symmetric pairs). No size or scale checks beyond `n >= 1`.
    pub fn from_points(points: Array, sigma_data: f64) -> Result<Self> {
        if points.rows() == 0 || points.cols() == 0 || points.cols() > MAX_DIM {
            return Err(Error::dim(format!(
                "bad point set shape {:?}",
                points.shape()
            )));
        }
        Ok(Dataset {
            points,
            sigma_data,
            normalization: None,
            centers: None,
        })
    }

    pub fn builtin(kind: Builtin, n: usize, d: usize, seed: u64, sigma_data: f64) -> Result<Self> {
        check_size(n, d)?;
        if d < 2 {
            return Err(Error::dim(format!("{} needs d >= 2", kind.name())));
        }
        let mut rng = rng::stream(seed, kind.name(), 0);
        let std = kind.component_std();
        let centers = kind.raw_centers();
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            let base = match &centers {
                Some(c) => c[i % c.len()],
                None => {
                    let theta = rng.random::<f64>() * std::f64::consts::PI;
                    if i % 2 == 0 {
                        [theta.cos(), theta.sin()]
                    } else {
                        [1.0 - theta.cos(), 0.5 - theta.sin()]
                    }
                }
            };
            for k in 0..d {
                let z: f64 = rng.sample(StandardNormal);
                data.push(base.get(k).copied().unwrap_or(0.0) + std * z);
            }
        }
        let mut ds = Dataset::from_raw(Array::matrix(n, d, data)?, sigma_data)?;
        if let Some(c) = centers {
            let mut cdata = Vec::with_capacity(c.len() * d);
            for p in &c {
                cdata.extend((0..d).map(|k| p.get(k).copied().unwrap_or(0.0)));
            }
            let raw = Array::matrix(c.len(), d, cdata)?;
            let norm = ds.normalization.as_ref().expect("built-ins are normalised");
            ds.centers = Some(norm.apply(&raw, sigma_data));
        }
        Ok(ds)
    }

    pub fn points(&self) -> &Array {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    pub fn sigma_data(&self) -> f64 {
        self.sigma_data
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }

    /// Mixture centres in normalised coordinates, when the generator has them.
    pub fn centers(&self) -> Option<&Array> {
        self.centers.as_ref()
    }

    pub fn with_centers(mut self, centers: Array) -> Result<Self> {
        if centers.cols() != self.dim() {
            return Err(Error::dim("centre dimension differs from data"));
        }
        self.centers = Some(centers);
        Ok(self)
    }

    /// `n` points drawn uniformly with replacement.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Array {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.len())).collect();
        self.points.gather_rows(&idx)
    }

    pub fn write(&self, out: &mut impl Write) -> Result<()> {
        write_points(out, DATASET_MAGIC, &self.points, self.sigma_data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn read(input: impl BufRead) -> Result<Self> {
        let (points, sigma) = read_points(input, DATASET_MAGIC)?;
        Dataset::from_normalized(points, sigma)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Dataset::read(std::io::BufReader::new(f))
    }
}

impl Normalization {
    pub fn apply(&self, raw: &Array, sigma_data: f64) -> Array {
        let d = raw.cols();
        let mut out = raw.data().to_vec();
        for row in out.chunks_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s * sigma_data;
            }
        }
        Array::new(raw.shape().to_vec(), out).expect("same shape")
    }
}

fn check_size(n: usize, d: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::dim(format!(
            "dataset needs at least 2 points, got {n}"
        )));
    }
    if d == 0 || d > MAX_DIM {
        return Err(Error::dim(format!(
            "dimension must be in 1..={MAX_DIM}, got {d}"
        )));
    }
    Ok(())
}

/// Writes a sample dump (`tcm-samples v1`) in the dataset layout.
pub fn write_samples(out: &mut impl Write, points: &Array, sigma_data: f64) -> Result<()> {
    write_points(out, SAMPLES_MAGIC, points, sigma_data)
}

pub fn read_samples(input: impl BufRead) -> Result<(Array, f64)> {
    read_points(input, SAMPLES_MAGIC)
}

fn write_points(out: &mut impl Write, magic: &str, points: &Array, sigma: f64) -> Result<()> {
    let (n, d) = (points.rows(), points.cols());
    writeln!(out, "{magic} d={d} n={n} sigma_data={sigma:?}")?;
    let mut line = String::new();
    for i in 0..n {
        line.clear();
        for (k, v) in points.row(i).iter().enumerate() {
            if k > 0 {
                line.push(' ');
            }
            // Debug formatting is the shortest string that round-trips.
            write!(line, "{v:?}").expect("write to string");
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

fn read_points(mut input: impl BufRead, magic: &str) -> Result<(Array, f64)> {
    let mut header = String::new();
    input.read_line(&mut header)?;
    let header = header.trim_end();
    let rest = header
        .strip_prefix(magic)
        .ok_or_else(|| Error::Format(format!("expected header '{magic} ...', got '{header}'")))?;
    let (mut d, mut n, mut sigma) = (None, None, None);
    for field in rest.split_whitespace() {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("malformed header field '{field}'")))?;
        let bad = |_| Error::Format(format!("bad value in header field '{field}'"));
        match k {
            "d" => d = Some(v.parse::<usize>().map_err(|e| bad(e.to_string()))?),
            "n" => n = Some(v.parse::<usize>().map_err(|e| bad(e.to_string()))?),
            "sigma_data" => sigma = Some(v.parse::<f64>().map_err(|e| bad(e.to_string()))?),
            _ => return Err(Error::Format(format!("unknown header field '{k}'"))),
        }
    }
    let (d, n, sigma) = match (d, n, sigma) {
        (Some(d), Some(n), Some(s)) => (d, n, s),
        _ => {
            return Err(Error::Format(
                "header must define d, n and sigma_data".into(),
            ))
        }
    };
    let mut data = Vec::with_capacity(n * d);
    let mut rows = 0;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let before = data.len();
        for tok in line.split_whitespace() {
            data.push(
                tok.parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad number '{tok}' on row {rows}")))?,
            );
        }
        if data.len() - before != d {
            return Err(Error::Format(format!(
                "row {rows} has {} values, expected {d}",
                data.len() - before
            )));
        }
        rows += 1;
    }
    if rows != n {
        return Err(Error::Format(format!(
            "header promises {n} rows, found {rows}"
        )));
    }
    Ok((Array::matrix(n, d, data)?, sigma))
}

/// Index of the nearest centre for every row of `points`.
pub fn nearest_center(points: &Array, centers: &Array) -> Vec<usize> {
    (0..points.rows())
        .map(|i| {
            let p = points.row(i);
            (0..centers.rows())
                .map(|k| {
                    let c = centers.row(k);
                    (
                        k,
                        p.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(),
                    )
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(k, _)| k)
                .unwrap_or(0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn column_stats(a: &Array) -> (Vec<f64>, Vec<f64>) {
        let (n, d) = (a.rows(), a.cols());
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for k in 0..d {
                mean[k] += a.row(i)[k] / n as f64;
            }
        }
        let mut var = vec![0.0; d];
        for i in 0..n {
            for k in 0..d {
                var[k] += (a.row(i)[k] - mean[k]).powi(2) / n as f64;
            }
        }
        (mean, var.into_iter().map(f64::sqrt).collect())
    }

    #[test]
    fn ring8_is_normalised() {
        let ds = Dataset::builtin(Builtin::Ring8, 2048, 2, 7, 0.5).unwrap();
        let (mean, std) = column_stats(ds.points());
        for k in 0..2 {
            assert!(mean[k].abs() < 1e-9, "{mean:?}");
            assert!((std[k] - 0.5).abs() < 1e-9, "{std:?}");
        }
    }

    #[test]
    fn grid25_has_25_populated_centres() {
        let ds = Dataset::builtin(Builtin::Grid25, 2048, 2, 3, 0.5).unwrap();
        let assign = nearest_center(ds.points(), ds.centers().unwrap());
        let mut seen = [0usize; 25];
        assign.iter().for_each(|&k| seen[k] += 1);
        assert!(seen.iter().all(|&c| c > 0), "{seen:?}");
    }

    #[test]
    fn same_seed_same_bytes() {
        let mut a = Vec::new();
        let mut b = Vec::new();
        Dataset::builtin(Builtin::TwoMoons, 300, 2, 11, 0.5)
            .unwrap()
            .write(&mut a)
            .unwrap();
        Dataset::builtin(Builtin::TwoMoons, 300, 2, 11, 0.5)
            .unwrap()
            .write(&mut b)
            .unwrap();
        assert_eq!(a, b);
        let mut c = Vec::new();
        Dataset::builtin(Builtin::TwoMoons, 300, 2, 12, 0.5)
            .unwrap()
            .write(&mut c)
            .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn file_round_trip_is_byte_exact() {
        let ds = Dataset::builtin(Builtin::Ring8, 64, 3, 1, 0.5).unwrap();
        let mut a = Vec::new();
        ds.write(&mut a).unwrap();
        let back = Dataset::read(&a[..]).unwrap();
        assert_eq!(back.points(), ds.points());
        let mut b = Vec::new();
        back.write(&mut b).unwrap();
        assert_eq!(a, b);
        assert!(String::from_utf8(a)
            .unwrap()
            .starts_with("tcm-dataset v1 d=3 n=64 sigma_data=0.5\n"));
    }

    #[test]
    fn malformed_files_are_rejected() {
        assert!(Dataset::read(&b"tcm-dataset v1 d=2 n=2 sigma_data=0.5\n1 2\n3\n"[..]).is_err());
        assert!(Dataset::read(&b"tcm-dataset v1 d=2 n=3 sigma_data=0.5\n1 2\n3 4\n"[..]).is_err());
        assert!(Dataset::read(&b"tcm-samples v1 d=2 n=2 sigma_data=0.5\n1 2\n3 4\n"[..]).is_err());
    }

    #[test]
    fn size_contracts() {
        assert!(Dataset::builtin(Builtin::Ring8, 1, 2, 0, 0.5).is_err());
        assert!(Dataset::builtin(Builtin::Ring8, 10, 9, 0, 0.5).is_err());
        assert!("spiral".parse::<Builtin>().is_err());
    }
}
