//! Synthetic multi-view classification data: Gaussian class clusters in
//! `R^D`, viewed through coordinate-block occlusions and random distortions.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

const TAG_MEANS: u64 = 0x6d65616e;
const TAG_BASE: u64 = 0x62617365;
const TAG_VIEW: u64 = 0x76696577;

/// Labeled samples, one `n x D_k` matrix per view.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewData {
    pub views: Vec<Array2<f64>>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl MultiViewData {
    pub fn new(views: Vec<Array2<f64>>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::Precondition("need at least one view".into()));
        }
        if let Some(v) = views.iter().find(|v| v.nrows() != labels.len()) {
            return Err(Error::Dimension {
                expected: labels.len(),
                got: v.nrows(),
                context: "view rows",
            });
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Precondition(format!("label {y} outside [0, {classes})")));
        }
        if views.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite("view data".into()));
        }
        Ok(Self { views, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    pub fn view_dims(&self) -> Vec<usize> {
        self.views.iter().map(|v| v.ncols()).collect()
    }

    /// Rows `idx` of every view, in the given order.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            views: self.views.iter().map(|v| v.select(ndarray::Axis(0), idx)).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// Keeps only the listed views.
    pub fn with_views(&self, keep: &[usize]) -> Self {
        Self {
            views: keep.iter().map(|&k| self.views[k].clone()).collect(),
            labels: self.labels.clone(),
            classes: self.classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut out = vec![0; self.classes];
        self.labels.iter().for_each(|&y| out[y] += 1);
        out
    }
}

/// Random corruption strength of one view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistortionLevel {
    pub name: LevelName,
    /// Probability that a coordinate is zeroed.
    pub erase_rate: f64,
    /// Maximum rotation in degrees; mapped to additive noise.
    pub rotation_deg: f64,
    pub gain_range: (f64, f64),
    /// Maximum circular shift as a fraction of the dimension.
    pub shift_frac: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LevelName {
    Light,
    Medium,
    Heavy,
    Ultimate,
}

impl LevelName {
    pub fn level(self) -> DistortionLevel {
        let (erase_rate, rotation_deg, gain_range, shift_frac) = match self {
            LevelName::Light => (0.05, 5.0, (0.9, 1.1), 0.0),
            LevelName::Medium => (0.10, 7.5, (0.8, 1.2), 0.0),
            LevelName::Heavy => (0.20, 10.0, (0.6, 1.4), 0.2),
            LevelName::Ultimate => (0.40, 20.0, (0.5, 1.5), 0.4),
        };
        DistortionLevel {
            name: self,
            erase_rate,
            rotation_deg,
            gain_range,
            shift_frac,
        }
    }
}

impl FromStr for LevelName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "light" => Ok(Self::Light),
            "medium" => Ok(Self::Medium),
            "heavy" => Ok(Self::Heavy),
            "ultimate" => Ok(Self::Ultimate),
            other => Err(Error::Precondition(format!("unknown distortion level `{other}`"))),
        }
    }
}

impl fmt::Display for LevelName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Light => "light",
            Self::Medium => "medium",
            Self::Heavy => "heavy",
            Self::Ultimate => "ultimate",
        };
        f.write_str(s)
    }
}

impl DistortionLevel {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.erase_rate) {
            return Err(Error::Domain {
                what: "erase_rate",
                value: self.erase_rate,
                range: "[0, 1]",
            });
        }
        let (lo, hi) = self.gain_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Domain {
                what: "gain_range lower end",
                value: lo,
                range: "(0, upper]",
            });
        }
        if !(self.rotation_deg >= 0.0) || !(0.0..=1.0).contains(&self.shift_frac) {
            return Err(Error::Precondition("rotation must be >= 0 and shift in [0, 1]".into()));
        }
        Ok(())
    }

    /// Standard deviation of the additive noise for a sample of norm `norm`.
    pub fn noise_scale(&self, norm: f64, dim: usize) -> f64 {
        self.rotation_deg / 5.0 * 0.1 * norm / (dim as f64).sqrt()
    }

    pub fn max_shift(&self, dim: usize) -> usize {
        (self.shift_frac * dim as f64).round() as usize
    }
}

/// Coordinate block a view observes. Coordinates are laid out on an
/// `h x w` grid with `h` the largest divisor of `D` not above `sqrt(D)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Occlusion {
    Full,
    Left,
    Right,
    Upper,
    Bottom,
    /// Everything except one grid quadrant (0 top-left, clockwise).
    Quadrant(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewSpec {
    pub kind: Occlusion,
    #[serde(default)]
    pub level: Option<LevelName>,
}

impl ViewSpec {
    pub fn full(level: Option<LevelName>) -> Self {
        Self {
            kind: Occlusion::Full,
            level,
        }
    }
}

pub fn grid_shape(dim: usize) -> (usize, usize) {
    let h = (1..=dim)
        .take_while(|h| h * h <= dim)
        .filter(|h| dim.is_multiple_of(*h))
        .last()
        .unwrap_or(1);
    (h, dim / h)
}

/// Visible coordinates of an occlusion; halves extend past the middle by
/// `overlap / 2` of the split axis on each side.
pub fn occlusion_mask(kind: Occlusion, dim: usize, overlap: f64) -> Result<Vec<bool>> {
    let (h, w) = grid_shape(dim);
    let half = |len: usize| -> Result<usize> {
        if len < 2 {
            return Err(Error::Precondition(format!(
                "cannot split an axis of length {len} in {dim} dimensions"
            )));
        }
        Ok((((0.5 + overlap / 2.0) * len as f64).ceil() as usize).min(len))
    };
    let visible = |f: &dyn Fn(usize, usize) -> bool| -> Vec<bool> { (0..dim).map(|i| f(i / w, i % w)).collect() };
    Ok(match kind {
        Occlusion::Full => vec![true; dim],
        Occlusion::Left => {
            let c = half(w)?;
            visible(&|_, col| col < c)
        }
        Occlusion::Right => {
            let c = half(w)?;
            visible(&|_, col| col >= w - c)
        }
        Occlusion::Upper => {
            let r = half(h)?;
            visible(&|row, _| row < r)
        }
        Occlusion::Bottom => {
            let r = half(h)?;
            visible(&|row, _| row >= h - r)
        }
        Occlusion::Quadrant(q) => {
            if q > 3 || h < 2 || w < 2 {
                return Err(Error::Precondition(format!("quadrant {q} invalid for a {h}x{w} grid")));
            }
            let (top, left) = match q {
                0 => (true, true),
                1 => (true, false),
                2 => (false, false),
                _ => (false, true),
            };
            visible(&|row, col| (row < h / 2) != top || (col < w / 2) != left)
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Training samples; the ghost split has the same size.
    pub n: usize,
    pub classes: usize,
    pub dim: usize,
    pub views: Vec<ViewSpec>,
    pub separation: f64,
    pub overlap: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            classes: 4,
            dim: 32,
            views: vec![ViewSpec::full(Some(LevelName::Medium)); 2],
            separation: 3.0,
            overlap: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.classes < 2 || self.dim == 0 {
            return Err(Error::Precondition(
                "need n >= 1, at least two classes and dim >= 1".into(),
            ));
        }
        if self.classes > self.dim {
            return Err(Error::Precondition(format!(
                "{} classes need at least as many dimensions, got {}",
                self.classes, self.dim
            )));
        }
        if self.views.is_empty() {
            return Err(Error::Precondition("need at least one view".into()));
        }
        if !(self.separation > 0.0) {
            return Err(Error::Domain {
                what: "separation",
                value: self.separation,
                range: "(0, inf)",
            });
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return Err(Error::Domain {
                what: "overlap",
                value: self.overlap,
                range: "[0, 1]",
            });
        }
        for v in &self.views {
            occlusion_mask(v.kind, self.dim, self.overlap)?;
            if let Some(l) = v.level {
                l.level().validate()?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub train: MultiViewData,
    pub ghost: MultiViewData,
    pub config: SynthConfig,
}

/// Class means with all pairwise distances equal to `separation`.
fn class_means(classes: usize, dim: usize, separation: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::stream(seed, &[TAG_MEANS]);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(classes);
    while basis.len() < classes {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut r)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    let scale = separation / std::f64::consts::SQRT_2;
    basis
        .into_iter()
        .map(|b| b.into_iter().map(|x| x * scale).collect())
        .collect()
}

/// Applies one view's distortion to a base sample.
pub fn distort<R: Rng>(x: &[f64], level: &DistortionLevel, rng: &mut R) -> Vec<f64> {
    let dim = x.len();
    let (lo, hi) = level.gain_range;
    let gain = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let noise = level.noise_scale(norm, dim);
    let mut out: Vec<f64> = x
        .iter()
        .map(|v| {
            let z: f64 = StandardNormal.sample(rng);
            gain * v + noise * z
        })
        .collect();
    let max = level.max_shift(dim) as i64;
    if max > 0 {
        let s = rng.random_range(-max..=max).rem_euclid(dim as i64) as usize;
        out.rotate_right(s);
    }
    for v in out.iter_mut() {
        if rng.random::<f64>() < level.erase_rate {
            *v = 0.0;
        }
    }
    out
}

/// Draws `n` training and `n` ghost samples. Sample `i` (ghost samples
/// continue the index range) and each of its views use their own streams.
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let means = class_means(cfg.classes, cfg.dim, cfg.separation, cfg.seed);
    let masks = cfg
        .views
        .iter()
        .map(|v| occlusion_mask(v.kind, cfg.dim, cfg.overlap))
        .collect::<Result<Vec<_>>>()?;
    let levels: Vec<Option<DistortionLevel>> = cfg.views.iter().map(|v| v.level.map(LevelName::level)).collect();
    let total = 2 * cfg.n;
    let k = cfg.views.len();
    let mut views = vec![Array2::zeros((total, cfg.dim)); k];
    let mut labels = Vec::with_capacity(total);
    for i in 0..total {
        let mut r = rng::stream(cfg.seed, &[TAG_BASE, i as u64]);
        let y = r.random_range(0..cfg.classes);
        let base: Vec<f64> = means[y]
            .iter()
            .map(|m| {
                let z: f64 = StandardNormal.sample(&mut r);
                m + z
            })
            .collect();
        labels.push(y);
        for kv in 0..k {
            let x = match &levels[kv] {
                Some(l) => distort(&base, l, &mut rng::stream(cfg.seed, &[TAG_VIEW, i as u64, kv as u64])),
                None => base.clone(),
            };
            for (j, (&v, &keep)) in x.iter().zip(&masks[kv]).enumerate() {
                views[kv][[i, j]] = if keep { v } else { 0.0 };
            }
        }
    }
    let all = MultiViewData::new(views, labels, cfg.classes)?;
    let train_idx: Vec<usize> = (0..cfg.n).collect();
    let ghost_idx: Vec<usize> = (cfg.n..total).collect();
    Ok(SynthDataset {
        train: all.select(&train_idx),
        ghost: all.select(&ghost_idx),
        config: cfg.clone(),
    })
}

/// Column layout of a CSV file: `v{k}_{j}` for view `k`, coordinate `j`,
/// followed by `label`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub view_dims: Vec<usize>,
    pub classes: usize,
}

impl CsvSchema {
    pub fn of(data: &MultiViewData) -> Self {
        Self {
            view_dims: data.view_dims(),
            classes: data.classes,
        }
    }

    pub fn header(&self) -> Vec<String> {
        let mut cols: Vec<String> = self
            .view_dims
            .iter()
            .enumerate()
            .flat_map(|(k, &d)| (0..d).map(move |j| format!("v{k}_{j}")))
            .collect();
        cols.push("label".into());
        cols
    }
}

pub fn write_csv(path: &Path, data: &MultiViewData) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
    w.write_record(CsvSchema::of(data).header()).map_err(csv_io)?;
    let mut record = Vec::new();
    for i in 0..data.len() {
        record.clear();
        for v in &data.views {
            record.extend(v.row(i).iter().map(|x| format!("{x:?}")));
        }
        record.push(data.labels[i].to_string());
        w.write_record(&record).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            line: 0,
            reason: format!("{other:?}"),
        },
    }
}

/// Strict reader: the header must match `schema`, every cell must parse as
/// a finite number and labels must lie in `[0, classes)`. Line numbers in
/// errors are 1-based and count the header.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<MultiViewData> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(csv_io)?;
    let mut records = rdr.records();
    let header = match records.next() {
        Some(r) => r.map_err(csv_io)?,
        None => {
            return Err(Error::Parse {
                line: 1,
                reason: "empty file".into(),
            })
        }
    };
    let expected = schema.header();
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::Parse {
            line: 1,
            reason: format!("header does not match `{}`", expected.join(",")),
        });
    }
    let width = expected.len();
    let mut flat: Vec<Vec<f64>> = vec![Vec::new(); schema.view_dims.len()];
    let mut labels = Vec::new();
    for (row, rec) in records.enumerate() {
        let line = row + 2;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            reason: e.to_string(),
        })?;
        if rec.len() != width {
            return Err(Error::Parse {
                line,
                reason: format!("expected {width} columns, found {}", rec.len()),
            });
        }
        let mut cells = rec.iter();
        for (k, &d) in schema.view_dims.iter().enumerate() {
            for j in 0..d {
                let cell = cells.next().expect("width checked");
                let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                    line,
                    reason: format!("column v{k}_{j}: `{cell}` is not a number"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        line,
                        reason: format!("column v{k}_{j}: non-finite value"),
                    });
                }
                flat[k].push(v);
            }
        }
        let cell = cells.next().expect("width checked");
        let y: usize = cell.trim().parse().map_err(|_| Error::Parse {
            line,
            reason: format!("label `{cell}` is not a class index"),
        })?;
        if y >= schema.classes {
            return Err(Error::Parse {
                line,
                reason: format!("label {y} outside [0, {})", schema.classes),
            });
        }
        labels.push(y);
    }
    let n = labels.len();
    let views = flat
        .into_iter()
        .zip(&schema.view_dims)
        .map(|(v, &d)| Array2::from_shape_vec((n, d), v).expect("row-major fill"))
        .collect();
    MultiViewData::new(views, labels, schema.classes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DumpIndex {
    seed: u64,
    rows: usize,
    classes: usize,
    view_dims: Vec<usize>,
    layout: String,
}

/// Writes `<stem>.bin` (every view row-major, then the labels, all as
/// little-endian `f64`) and `<stem>.json` with shapes and seed.
pub fn dump_binary(dir: &Path, stem: &str, data: &MultiViewData, seed: u64) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut bytes = Vec::with_capacity(8 * (data.views.iter().map(|v| v.len()).sum::<usize>() + data.len()));
    for v in &data.views {
        for x in v.iter() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    for &y in &data.labels {
        bytes.extend_from_slice(&(y as f64).to_le_bytes());
    }
    fs::File::create(dir.join(format!("{stem}.bin")))?.write_all(&bytes)?;
    let index = DumpIndex {
        seed,
        rows: data.len(),
        classes: data.classes,
        view_dims: data.view_dims(),
        layout: "views row-major then labels, little-endian f64".into(),
    };
    fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&index)?)?;
    Ok(())
}

pub fn load_binary(dir: &Path, stem: &str) -> Result<MultiViewData> {
    let index: DumpIndex = serde_json::from_str(&fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
    let bytes = fs::read(dir.join(format!("{stem}.bin")))?;
    let expected = 8 * (index.rows * index.view_dims.iter().sum::<usize>() + index.rows);
    if bytes.len() != expected {
        return Err(Error::Decode {
            offset: bytes.len().min(expected),
            reason: format!("expected {expected} bytes, found {}", bytes.len()),
        });
    }
    let mut vals = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let views = index
        .view_dims
        .iter()
        .map(|&d| Array2::from_shape_vec((index.rows, d), vals.by_ref().take(index.rows * d).collect()).expect("sized"))
        .collect();
    let labels = vals.map(|y| y as usize).collect();
    MultiViewData::new(views, labels, index.classes)
}
