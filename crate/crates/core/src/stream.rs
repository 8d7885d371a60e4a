//! Subject files, centering and mini-batch plans.
//!
//! NDJSON holds one subject per line:
//! `{"id": "s1", "points": [{"loc": [0.5], "y": 1.2}]}`.
//! CSV holds one observation per row as `id,loc_1,..,loc_d,y`; consecutive
//! rows with the same id form one subject. A header row is skipped when its
//! last field is not numeric.

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FpcaError, Result};
use crate::model::Subject;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Ndjson,
    Csv,
}

impl Format {
    /// `.csv` files are CSV, everything else NDJSON.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::Ndjson,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSource {
    pub format: Format,
    pub path: PathBuf,
    /// Location dimension; inferred from the first record when `None`.
    pub dims: Option<usize>,
    /// Number of subjects the file is expected to hold.
    pub declared_count: Option<usize>,
    /// When set, every location must lie inside these bounds.
    pub domain: Option<Vec<(f64, f64)>>,
}

impl DataSource {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        let path = path.into();
        Self {
            format: Format::from_path(&path),
            path,
            dims: None,
            declared_count: None,
            domain: None,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PointRecord {
    loc: Vec<f64>,
    y: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct SubjectRecord {
    id: String,
    points: Vec<PointRecord>,
}

fn build_subject<T: Scalar>(
    id: String,
    dims: usize,
    locs: Vec<f64>,
    ys: Vec<f64>,
    line: usize,
    domain: Option<&[(f64, f64)]>,
) -> Result<Subject<T>> {
    if let Some(bounds) = domain {
        for (j, point) in locs.chunks(dims).enumerate() {
            if point
                .iter()
                .zip(bounds)
                .any(|(x, (lo, hi))| !(x >= lo && x <= hi))
            {
                return Err(FpcaError::Data {
                    id,
                    reason: format!("location {j} lies outside the domain"),
                });
            }
        }
    }
    Subject::new(
        id,
        dims,
        locs.into_iter().map(T::lit).collect(),
        ys.into_iter().map(T::lit).collect(),
    )
    .map_err(|e| match e {
        FpcaError::Data { id, reason } => FpcaError::Data {
            id,
            reason: format!("{reason} (line {line})"),
        },
        other => other,
    })
}

/// Reads NDJSON subjects from any reader.
pub fn read_ndjson<T: Scalar, R: Read>(
    reader: R,
    dims: Option<usize>,
    domain: Option<&[(f64, f64)]>,
) -> Result<Vec<Subject<T>>> {
    let mut dims = dims;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SubjectRecord = serde_json::from_str(&line).map_err(|e| FpcaError::Parse {
            line: lineno,
            reason: e.to_string(),
        })?;
        let d = match (dims, rec.points.first()) {
            (Some(d), _) => d,
            (None, Some(p)) => {
                dims = Some(p.loc.len());
                p.loc.len()
            }
            (None, None) => {
                return Err(FpcaError::Parse {
                    line: lineno,
                    reason: format!("subject {} has no points", rec.id),
                })
            }
        };
        let mut locs = Vec::with_capacity(d * rec.points.len());
        let mut ys = Vec::with_capacity(rec.points.len());
        for p in rec.points {
            if p.loc.len() != d {
                return Err(FpcaError::Parse {
                    line: lineno,
                    reason: format!(
                        "location of length {} in a {d}-dimensional file",
                        p.loc.len()
                    ),
                });
            }
            locs.extend(p.loc);
            ys.push(p.y);
        }
        out.push(build_subject(rec.id, d, locs, ys, lineno, domain)?);
    }
    Ok(out)
}

/// Reads CSV subjects from any reader.
pub fn read_csv<T: Scalar, R: Read>(
    reader: R,
    dims: Option<usize>,
    domain: Option<&[(f64, f64)]>,
) -> Result<Vec<Subject<T>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut dims = dims;
    let mut out = Vec::new();
    let mut current: Option<(String, Vec<f64>, Vec<f64>, usize)> = None;
    for (i, rec) in rdr.records().enumerate() {
        let lineno = i + 1;
        let rec = rec.map_err(|e| FpcaError::Parse {
            line: lineno,
            reason: e.to_string(),
        })?;
        if rec.len() < 3 {
            return Err(FpcaError::Parse {
                line: lineno,
                reason: format!(
                    "{} fields, need id, at least one coordinate and y",
                    rec.len()
                ),
            });
        }
        if i == 0 && rec[rec.len() - 1].parse::<f64>().is_err() {
            continue;
        }
        let d = *dims.get_or_insert(rec.len() - 2);
        if rec.len() != d + 2 {
            return Err(FpcaError::Parse {
                line: lineno,
                reason: format!("{} fields, expected {}", rec.len(), d + 2),
            });
        }
        let mut nums = Vec::with_capacity(d + 1);
        for field in rec.iter().skip(1) {
            nums.push(field.parse::<f64>().map_err(|_| FpcaError::Parse {
                line: lineno,
                reason: format!("not a number: {field:?}"),
            })?);
        }
        let id = &rec[0];
        match &mut current {
            Some((cid, locs, ys, _)) if cid == id => {
                locs.extend_from_slice(&nums[..d]);
                ys.push(nums[d]);
            }
            _ => {
                if let Some((cid, locs, ys, start)) = current.take() {
                    out.push(build_subject(cid, d, locs, ys, start, domain)?);
                }
                current = Some((id.to_string(), nums[..d].to_vec(), vec![nums[d]], lineno));
            }
        }
    }
    if let Some((cid, locs, ys, start)) = current {
        let d = dims.unwrap_or(1);
        out.push(build_subject(cid, d, locs, ys, start, domain)?);
    }
    Ok(out)
}

/// Subjects of `source`, in file order.
pub fn read_subjects<T: Scalar>(source: &DataSource) -> Result<Vec<Subject<T>>> {
    let file = File::open(&source.path)?;
    let domain = source.domain.as_deref();
    let subjects = match source.format {
        Format::Ndjson => read_ndjson(file, source.dims, domain)?,
        Format::Csv => read_csv(file, source.dims, domain)?,
    };
    if subjects.is_empty() {
        log::warn!("{} holds no subjects", source.path.display());
    }
    if let Some(n) = source.declared_count {
        if n != subjects.len() {
            return Err(FpcaError::Parse {
                line: 0,
                reason: format!("expected {n} subjects, found {}", subjects.len()),
            });
        }
    }
    Ok(subjects)
}

/// Writes subjects as NDJSON, one line each.
pub fn write_ndjson<T: Scalar, W: Write>(subjects: &[Subject<T>], mut out: W) -> Result<()> {
    for s in subjects {
        let rec = SubjectRecord {
            id: s.id.clone(),
            points: (0..s.len())
                .map(|j| PointRecord {
                    loc: s.point(j).iter().map(|x| x.to_f64_lossy()).collect(),
                    y: s.values()[j].to_f64_lossy(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut out, &rec).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// How the data are split into mini-batches over the epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Shuffle epoch 1 too; by default it follows arrival order.
    pub shuffle_first: bool,
    /// Reshuffle every later epoch.
    pub shuffle_later: bool,
}

impl BatchPlan {
    pub fn new(batch_size: usize, epochs: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(FpcaError::Config("batch_size must be at least 1".into()));
        }
        if epochs == 0 {
            return Err(FpcaError::Config("epochs must be at least 1".into()));
        }
        Ok(Self {
            batch_size,
            epochs,
            seed,
            shuffle_first: false,
            shuffle_later: true,
        })
    }

    /// Subject order within `epoch` (1-based).
    pub fn order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        let shuffle = if epoch == 1 {
            self.shuffle_first
        } else {
            self.shuffle_later
        };
        if shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(epoch as u64);
            idx.shuffle(&mut rng);
        }
        idx
    }

    /// Number of mini-batches in one epoch over `n` subjects.
    pub fn batches_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

/// Subject indices consumed at global step `k` (1-based).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MiniBatch {
    pub epoch: usize,
    pub k: usize,
    pub indices: Vec<usize>,
}

/// Mini-batches of one epoch, numbered from `first_k`.
pub fn epoch_batches(n: usize, plan: &BatchPlan, epoch: usize, first_k: usize) -> Vec<MiniBatch> {
    plan.order(n, epoch)
        .chunks(plan.batch_size)
        .enumerate()
        .map(|(j, c)| MiniBatch {
            epoch,
            k: first_k + j,
            indices: c.to_vec(),
        })
        .collect()
}

/// All mini-batches over every epoch; `k` runs on across epochs.
pub fn make_batches(n: usize, plan: &BatchPlan) -> Vec<MiniBatch> {
    let mut out = Vec::new();
    for epoch in 1..=plan.epochs {
        let first = out.len() + 1;
        out.extend(epoch_batches(n, plan, epoch, first));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CenterMode {
    None,
    /// Per-cell means on a regular grid with this many cells per dimension.
    BinnedMean {
        bins: usize,
    },
}

/// Subtracts cell means in place and returns them (cells in row-major
/// order, first dimension slowest). Empty cells get mean zero.
pub fn center_subjects<T: Scalar>(
    subjects: &mut [Subject<T>],
    mode: CenterMode,
    domain: &[(T, T)],
) -> Result<Vec<T>> {
    let bins = match mode {
        CenterMode::None => return Ok(Vec::new()),
        CenterMode::BinnedMean { bins } => bins,
    };
    if bins == 0 {
        return Err(FpcaError::Config("centering needs at least one bin".into()));
    }
    let d = domain.len();
    let cell_of = |point: &[T]| -> usize {
        point.iter().zip(domain).fold(0, |acc, (&x, &(lo, hi))| {
            let u = ((x - lo) / (hi - lo) * T::from_usize_lossy(bins)).floor();
            let c = u.to_f64_lossy().clamp(0.0, (bins - 1) as f64) as usize;
            acc * bins + c
        })
    };
    let cells = bins.pow(d as u32);
    let mut sum = vec![T::zero(); cells];
    let mut count = vec![0usize; cells];
    for s in subjects.iter() {
        if s.dims() != d {
            return Err(FpcaError::Data {
                id: s.id.clone(),
                reason: format!(
                    "subject is {}-dimensional, domain is {d}-dimensional",
                    s.dims()
                ),
            });
        }
        for j in 0..s.len() {
            let c = cell_of(s.point(j));
            sum[c] += s.values()[j];
            count[c] += 1;
        }
    }
    let means: Vec<T> = sum
        .iter()
        .zip(&count)
        .map(|(&s, &c)| {
            if c == 0 {
                T::zero()
            } else {
                s / T::from_usize_lossy(c)
            }
        })
        .collect();
    for s in subjects.iter_mut() {
        let cells: Vec<usize> = (0..s.len()).map(|j| cell_of(s.point(j))).collect();
        for (v, c) in s.values_mut().iter_mut().zip(cells) {
            *v -= means[c];
        }
    }
    Ok(means)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn ndjson_record() {
        let text = r#"{"id":"s1","points":[{"loc":[0.5],"y":1.2}]}"#;
        let s: Vec<Subject<f64>> = read_ndjson(text.as_bytes(), None, None).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].id, "s1");
        assert_eq!(s[0].len(), 1);
        assert_eq!(s[0].locations(), &[0.5]);
        assert_eq!(s[0].values(), &[1.2]);
    }

    #[test]
    fn csv_rows_group_by_id() {
        let text = "id,s,t,y\ns1,0.25,0.75,2.0\ns1,0.5,0.5,1.0\ns2,0.1,0.2,3.0\n";
        let s: Vec<Subject<f64>> = read_csv(text.as_bytes(), Some(2), None).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].point(0), &[0.25, 0.75]);
        assert_eq!(s[0].values(), &[2.0, 1.0]);
        assert_eq!(s[1].id, "s2");
        let bare: Vec<Subject<f64>> = read_csv("s1,0.25,0.75,2.0".as_bytes(), None, None).unwrap();
        assert_eq!(bare[0].dims(), 2);
    }

    #[test]
    fn empty_input_is_empty() {
        let s: Vec<Subject<f64>> = read_ndjson("".as_bytes(), None, None).unwrap();
        assert!(s.is_empty());
        let c: Vec<Subject<f64>> = read_csv("".as_bytes(), Some(1), None).unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn malformed_lines_report_position() {
        let text = "{\"id\":\"a\",\"points\":[{\"loc\":[0.1],\"y\":1}]}\n{oops\n";
        match read_ndjson::<f64, _>(text.as_bytes(), None, None) {
            Err(FpcaError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let mixed = "{\"id\":\"a\",\"points\":[{\"loc\":[0.1],\"y\":1}]}\n{\"id\":\"b\",\"points\":[{\"loc\":[0.1,0.2],\"y\":1}]}\n";
        assert!(matches!(
            read_ndjson::<f64, _>(mixed.as_bytes(), None, None),
            Err(FpcaError::Parse { line: 2, .. })
        ));
        assert!(matches!(
            read_csv::<f64, _>("a,0.1,1\na,0.2,x\n".as_bytes(), Some(1), None),
            Err(FpcaError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn out_of_domain_names_subject_and_index() {
        let text = r#"{"id":"s9","points":[{"loc":[0.5],"y":1},{"loc":[1.5],"y":2}]}"#;
        match read_ndjson::<f64, _>(text.as_bytes(), None, Some(&[(0.0, 1.0)])) {
            Err(FpcaError::Data { id, reason }) => {
                assert_eq!(id, "s9");
                assert!(reason.contains("location 1"), "{reason}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ndjson_round_trip() {
        let subjects = vec![
            Subject::new("a", 2, vec![0.1, 0.2, 0.3, 0.4], vec![1.0 / 3.0, -2.5]).unwrap(),
            Subject::new("b", 2, vec![0.9, 0.0], vec![1e-300]).unwrap(),
        ];
        let mut buf = Vec::new();
        write_ndjson(&subjects, &mut buf).unwrap();
        let back: Vec<Subject<f64>> = read_ndjson(buf.as_slice(), None, None).unwrap();
        assert_eq!(back, subjects);
    }

    #[test]
    fn read_from_file_checks_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ndjson");
        std::fs::write(
            &path,
            "{\"id\":\"a\",\"points\":[{\"loc\":[0.1],\"y\":1}]}\n",
        )
        .unwrap();
        let mut src = DataSource::new(&path);
        assert_eq!(src.format, Format::Ndjson);
        assert_eq!(read_subjects::<f64>(&src).unwrap().len(), 1);
        src.declared_count = Some(2);
        assert!(read_subjects::<f64>(&src).is_err());
        assert_eq!(DataSource::new("x.CSV").format, Format::Csv);
        assert!(matches!(
            read_subjects::<f64>(&DataSource::new(dir.path().join("missing"))),
            Err(FpcaError::Io(_))
        ));
    }

    #[test]
    fn batch_partition() {
        let plan = BatchPlan::new(5, 1, 0).unwrap();
        let b = make_batches(12, &plan);
        let sizes: Vec<usize> = b.iter().map(|m| m.indices.len()).collect();
        assert_eq!(sizes, vec![5, 5, 2]);
        assert_eq!(b[0].indices, vec![0, 1, 2, 3, 4]);
        assert_eq!(b.iter().map(|m| m.k).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert!(BatchPlan::new(0, 1, 0).is_err());
    }

    #[test]
    fn epochs_cover_each_subject_once() {
        let plan = BatchPlan::new(4, 3, 7).unwrap();
        let b = make_batches(10, &plan);
        assert_eq!(b.len(), 9);
        let mut counts: HashMap<usize, usize> = HashMap::new();
        for m in &b {
            for &i in &m.indices {
                *counts.entry(i).or_default() += 1;
            }
        }
        assert!(counts.values().all(|&c| c == 3));
        assert_eq!(counts.len(), 10);
        for epoch in 1..=3 {
            let mut seen: Vec<usize> = b
                .iter()
                .filter(|m| m.epoch == epoch)
                .flat_map(|m| m.indices.clone())
                .collect();
            seen.sort();
            assert_eq!(seen, (0..10).collect::<Vec<_>>());
        }
        let ks: Vec<usize> = b.iter().map(|m| m.k).collect();
        assert_eq!(ks, (1..=9).collect::<Vec<_>>());
        assert_eq!(b, make_batches(10, &plan));
        let other = BatchPlan { seed: 8, ..plan };
        assert_ne!(b, make_batches(10, &other));
    }

    #[test]
    fn centering() {
        let mut s = vec![
            Subject::new("a", 1, vec![0.1, 0.6], vec![2.0, 2.0]).unwrap(),
            Subject::new("b", 1, vec![0.9], vec![2.0]).unwrap(),
        ];
        let orig = s.clone();
        center_subjects(&mut s, CenterMode::None, &[(0.0, 1.0)]).unwrap();
        assert_eq!(s, orig);
        let means =
            center_subjects(&mut s, CenterMode::BinnedMean { bins: 1 }, &[(0.0, 1.0)]).unwrap();
        assert_eq!(means, vec![2.0]);
        assert!(s.iter().flat_map(|x| x.values()).all(|&v| v == 0.0));

        let mut t = vec![
            Subject::new(
                "a",
                2,
                vec![0.1, 0.1, 0.9, 0.9, 0.2, 0.3],
                vec![1.0, 5.0, 1.7],
            )
            .unwrap(),
            Subject::new("b", 2, vec![0.95, 0.6, 1.0, 1.0], vec![4.1, -3.3]).unwrap(),
        ];
        let dom = [(0.0, 1.0), (0.0, 1.0)];
        center_subjects(&mut t, CenterMode::BinnedMean { bins: 2 }, &dom).unwrap();
        let again: Vec<f64> =
            center_subjects(&mut t, CenterMode::BinnedMean { bins: 2 }, &dom).unwrap();
        assert!(again.iter().all(|m| m.abs() < 1e-12), "{again:?}");
    }
}
