//! Domain datasets: synthetic shift generators, delimited-text tables,
//! normalization and seeded batching.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, Stream};

/// Floor on the per-column standard deviation in [`zscore_normalize`].
pub const ZSCORE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

/// `n × d` features with optional labels in `[0, K)`.
///
/// Source datasets are always labeled. Target labels may be present for
/// evaluation; training only ever sees a target through [`UnlabeledView`].
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    features: Tensor,
    labels: Option<Vec<usize>>,
    domain: Domain,
    class_count: usize,
}

impl DomainDataset {
    pub fn new(
        features: Tensor,
        labels: Option<Vec<usize>>,
        domain: Domain,
        class_count: usize,
    ) -> Result<Self> {
        let (n, _) = features.dims2("dataset")?;
        if class_count == 0 {
            return Err(Error::param("a dataset needs at least one class"));
        }
        match &labels {
            None if domain == Domain::Source => {
                return Err(Error::param("source datasets must be labeled"));
            }
            Some(l) if l.len() != n => {
                return Err(Error::shape(
                    "dataset",
                    format!("{} labels for {n} rows", l.len()),
                ));
            }
            Some(l) => {
                if let Some((i, y)) = l.iter().enumerate().find(|(_, y)| **y >= class_count) {
                    return Err(Error::domain(
                        "dataset",
                        format!("row {i}: label {y} outside [0, {class_count})"),
                    ));
                }
            }
            None => {}
        }
        Ok(Self {
            features,
            labels,
            domain,
            class_count,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Same data under another domain tag.
    pub fn with_domain(self, domain: Domain) -> Result<Self> {
        Self::new(self.features, self.labels, domain, self.class_count)
    }

    /// Widens the label space, e.g. to match a source with more classes.
    pub fn with_class_count(self, class_count: usize) -> Result<Self> {
        Self::new(self.features, self.labels, self.domain, class_count)
    }

    pub fn without_labels(self) -> Result<Self> {
        Self::new(self.features, None, self.domain, self.class_count)
    }

    pub fn unlabeled(&self) -> UnlabeledView<'_> {
        UnlabeledView {
            features: &self.features,
            class_count: self.class_count,
        }
    }
}

/// Features of a dataset with its labels out of reach.
#[derive(Clone, Copy, Debug)]
pub struct UnlabeledView<'a> {
    features: &'a Tensor,
    class_count: usize,
}

impl UnlabeledView<'_> {
    pub fn features(&self) -> &Tensor {
        self.features
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    TwoMoons,
    GaussianBlobs,
}

/// Parameters of a synthetic domain. Rotation acts on the first two
/// coordinates about the origin; translation (empty means zero) follows it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub generator: Generator,
    pub n: usize,
    pub noise: f64,
    #[serde(default)]
    pub rotation_degrees: f64,
    #[serde(default)]
    pub translation: Vec<f64>,
    pub seed: u64,
    /// Cluster centers for `gaussian_blobs`, one row per class.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centers: Option<Vec<Vec<f64>>>,
}

impl SyntheticSpec {
    pub fn two_moons(n: usize, noise: f64, rotation_degrees: f64, seed: u64) -> Self {
        Self {
            generator: Generator::TwoMoons,
            n,
            noise,
            rotation_degrees,
            translation: Vec::new(),
            seed,
            centers: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::param("synthetic spec needs n >= 1"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::param(format!(
                "noise must be a finite non-negative std, got {}",
                self.noise
            )));
        }
        if !self.rotation_degrees.is_finite() || self.translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("rotation and translation must be finite"));
        }
        Ok(())
    }
}

/// Dispatches on `spec.generator`; blobs read their centers from the spec.
pub fn generate(spec: &SyntheticSpec) -> Result<DomainDataset> {
    match spec.generator {
        Generator::TwoMoons => gen_two_moons(spec),
        Generator::GaussianBlobs => {
            let centers = spec
                .centers
                .as_ref()
                .ok_or_else(|| Error::param("gaussian_blobs needs `centers`"))?;
            gen_gaussian_blobs(spec, &Tensor::from_rows(centers)?)
        }
    }
}

/// Two interleaving half circles. The first `⌊n/2⌋` points form the upper
/// arc (class 0), the rest the lower arc (class 1) shifted by `(1, -0.5)`;
/// each arc is evenly spaced over `[0, π]`. Noise draws come in `(x, y)`
/// pairs per point, in row order.
pub fn gen_two_moons(spec: &SyntheticSpec) -> Result<DomainDataset> {
    if spec.generator != Generator::TwoMoons {
        return Err(Error::param("spec generator is not two_moons"));
    }
    spec.validate()?;
    let n_upper = spec.n / 2;
    let n_lower = spec.n - n_upper;
    let arc = |i: usize, m: usize| {
        if m <= 1 {
            0.0
        } else {
            std::f64::consts::PI * i as f64 / (m - 1) as f64
        }
    };
    let mut data = Vec::with_capacity(2 * spec.n);
    let mut labels = Vec::with_capacity(spec.n);
    for i in 0..n_upper {
        let t = arc(i, n_upper);
        data.extend([t.cos(), t.sin()]);
        labels.push(0);
    }
    for i in 0..n_lower {
        let t = arc(i, n_lower);
        data.extend([1.0 - t.cos(), 0.5 - t.sin()]);
        labels.push(1);
    }
    let mut stream = Stream::new(spec.seed);
    for v in &mut data {
        *v += spec.noise * stream.normal();
    }
    let mut features = Tensor::new(vec![spec.n, 2], data)?;
    transform(&mut features, spec)?;
    DomainDataset::new(features, Some(labels), Domain::Source, 2)
}

/// Point `i` belongs to class `i mod K` and is drawn isotropically around
/// its center with standard deviation `noise`.
pub fn gen_gaussian_blobs(spec: &SyntheticSpec, centers: &Tensor) -> Result<DomainDataset> {
    if spec.generator != Generator::GaussianBlobs {
        return Err(Error::param("spec generator is not gaussian_blobs"));
    }
    spec.validate()?;
    let (k, d) = centers.dims2("gen_gaussian_blobs")?;
    if k < 1 || d < 1 {
        return Err(Error::param(
            "gaussian_blobs needs at least one non-empty center",
        ));
    }
    let mut stream = Stream::new(spec.seed);
    let mut data = Vec::with_capacity(spec.n * d);
    let mut labels = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let c = i % k;
        for &m in centers.row(c) {
            data.push(m + spec.noise * stream.normal());
        }
        labels.push(c);
    }
    let mut features = Tensor::new(vec![spec.n, d], data)?;
    transform(&mut features, spec)?;
    DomainDataset::new(features, Some(labels), Domain::Source, k)
}

fn transform(x: &mut Tensor, spec: &SyntheticSpec) -> Result<()> {
    let (n, d) = x.dims2("transform")?;
    if !spec.translation.is_empty() && spec.translation.len() != d {
        return Err(Error::param(format!(
            "translation has {} entries, data has {d} columns",
            spec.translation.len()
        )));
    }
    if spec.rotation_degrees != 0.0 && d < 2 {
        return Err(Error::param("rotation needs at least two columns"));
    }
    let (s, c) = spec.rotation_degrees.to_radians().sin_cos();
    let data = x.data_mut();
    for i in 0..n {
        let row = &mut data[i * d..(i + 1) * d];
        if spec.rotation_degrees != 0.0 {
            let (a, b) = (row[0], row[1]);
            row[0] = c * a - s * b;
            row[1] = s * a + c * b;
        }
        for (v, t) in row.iter_mut().zip(&spec.translation) {
            *v += t;
        }
    }
    Ok(())
}

/// Column layout of a delimited feature table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableSchema {
    /// Empty selects every column other than the label column, in file order.
    #[serde(default)]
    pub feature_columns: Vec<String>,
    #[serde(default)]
    pub label_column: Option<String>,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    /// Label bound; inferred as `max label + 1` (at least 1) when absent.
    #[serde(default)]
    pub class_count: Option<usize>,
    pub domain: Domain,
}

fn default_delimiter() -> char {
    ','
}

impl TableSchema {
    pub fn new(domain: Domain, label_column: Option<&str>) -> Self {
        Self {
            feature_columns: Vec::new(),
            label_column: label_column.map(str::to_owned),
            delimiter: ',',
            class_count: None,
            domain,
        }
    }
}

fn delimiter_byte(c: char) -> Result<u8> {
    u8::try_from(c)
        .ok()
        .filter(u8::is_ascii)
        .ok_or_else(|| Error::param(format!("delimiter {c:?} is not ASCII")))
}

/// Reads a delimited table with one header row. Data rows are numbered from
/// 1 in parse errors.
pub fn load_table(path: &Path, schema: &TableSchema) -> Result<DomainDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_table(file, schema)
}

pub fn read_table<R: std::io::Read>(reader: R, schema: &TableSchema) -> Result<DomainDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delimiter_byte(schema.delimiter)?)
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Parse {
            row: 0,
            detail: e.to_string(),
        })?
        .iter()
        .map(str::to_owned)
        .collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse {
                row: 0,
                detail: format!("column `{name}` not in header {header:?}"),
            })
    };
    let label_idx = schema.label_column.as_deref().map(find).transpose()?;
    let feature_idx: Vec<usize> = if schema.feature_columns.is_empty() {
        (0..header.len())
            .filter(|i| Some(*i) != label_idx)
            .collect()
    } else {
        schema
            .feature_columns
            .iter()
            .map(|c| find(c))
            .collect::<Result<_>>()?
    };
    if feature_idx.is_empty() && label_idx.is_none() {
        return Err(Error::Parse {
            row: 0,
            detail: "no feature columns".into(),
        });
    }

    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut n = 0;
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Parse {
            row,
            detail: e.to_string(),
        })?;
        if record.len() != header.len() {
            return Err(Error::Parse {
                row,
                detail: format!("{} cells, header has {}", record.len(), header.len()),
            });
        }
        for &j in &feature_idx {
            let v: f64 = record[j].parse().map_err(|_| Error::Parse {
                row,
                detail: format!("column `{}`: `{}` is not a number", header[j], &record[j]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    detail: format!("column `{}` is not finite", header[j]),
                });
            }
            data.push(v);
        }
        if let Some(j) = label_idx {
            let y: usize = record[j].parse().map_err(|_| Error::Parse {
                row,
                detail: format!(
                    "label column `{}`: `{}` is not a class index",
                    header[j], &record[j]
                ),
            })?;
            if let Some(k) = schema.class_count {
                if y >= k {
                    return Err(Error::Parse {
                        row,
                        detail: format!("label {y} outside [0, {k})"),
                    });
                }
            }
            labels.push(y);
        }
        n += 1;
    }
    let features = Tensor::new(vec![n, feature_idx.len()], data)?;
    let class_count = schema
        .class_count
        .unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
    let labels = label_idx.map(|_| labels);
    if labels.is_none() && schema.domain == Domain::Source {
        return Err(Error::Parse {
            row: 0,
            detail: "source tables need a label column".into(),
        });
    }
    DomainDataset::new(features, labels, schema.domain, class_count)
}

/// Writes `x0, x1, ..., [label]` with shortest round-trip decimal floats.
pub fn save_table(ds: &DomainDataset, path: &Path, delimiter: char) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_table(ds, file, delimiter).map_err(|e| match e {
        Error::Parse { detail, .. } => Error::io(path, std::io::Error::other(detail)),
        other => other,
    })
}

pub fn write_table<W: std::io::Write>(
    ds: &DomainDataset,
    writer: W,
    delimiter: char,
) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Parse {
        row: 0,
        detail: e.to_string(),
    };
    let mut w = csv::WriterBuilder::new()
        .delimiter(delimiter_byte(delimiter)?)
        .from_writer(writer);
    let mut header: Vec<String> = (0..ds.dim()).map(|j| format!("x{j}")).collect();
    if ds.labels().is_some() {
        header.push("label".into());
    }
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = ds.features().row(i).iter().map(|v| v.to_string()).collect();
        if let Some(l) = ds.labels() {
            rec.push(l[i].to_string());
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Parse {
        row: 0,
        detail: e.to_string(),
    })?;
    Ok(())
}

/// Per-column location and scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZScoreStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ZScoreStats {
    /// Population mean and standard deviation of each column. The mean is
    /// accumulated relative to the first row, so constant columns get an
    /// exact mean.
    pub fn fit(x: &Tensor) -> Result<Self> {
        let (n, d) = x.dims2("zscore")?;
        if n == 0 {
            return Ok(Self {
                mean: vec![0.0; d],
                std: vec![1.0; d],
            });
        }
        let mut mean = vec![0.0; d];
        let mut std = vec![0.0; d];
        for j in 0..d {
            let x0 = x.get2(0, j);
            let shift: f64 = (0..n).map(|i| x.get2(i, j) - x0).sum::<f64>() / n as f64;
            let m = x0 + shift;
            let var = (0..n).map(|i| (x.get2(i, j) - m).powi(2)).sum::<f64>() / n as f64;
            mean[j] = m;
            std[j] = var.sqrt();
        }
        Ok(Self { mean, std })
    }
}

/// `(x - mean) / max(ε, std)` column-wise, using `stats` when given (target
/// data reuses source statistics) and the dataset's own otherwise.
pub fn zscore_normalize(
    ds: &DomainDataset,
    stats: Option<&ZScoreStats>,
) -> Result<(DomainDataset, ZScoreStats)> {
    let stats = match stats {
        Some(s) => s.clone(),
        None => ZScoreStats::fit(ds.features())?,
    };
    let d = ds.dim();
    if stats.mean.len() != d || stats.std.len() != d {
        return Err(Error::shape(
            "zscore_normalize",
            format!("stats for {} columns, data has {d}", stats.mean.len()),
        ));
    }
    let mut x = ds.features().clone();
    for (k, v) in x.data_mut().iter_mut().enumerate() {
        let j = k % d;
        *v = (*v - stats.mean[j]) / stats.std[j].max(ZSCORE_EPS);
    }
    let out = DomainDataset::new(x, ds.labels.clone(), ds.domain, ds.class_count)?;
    Ok((out, stats))
}

/// Index batches of one epoch: a permutation of `0..n` drawn from a stream
/// keyed by `(seed, epoch)`, cut into `batch_size` chunks with the short
/// remainder last.
pub fn batch_iter(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::param("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    Stream::derived(seed, &[epoch]).shuffle(&mut order);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// One training step's worth of indices from each domain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairedBatch {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

/// `ceil(max(n_s, n_t) / batch_size)` steps. Each domain walks its own
/// sequence of shuffled passes (pass `r` keyed by `(seed, domain, r)` and the
/// epoch), so the smaller domain recycles with a fresh order per pass.
pub fn paired_batches(
    n_source: usize,
    n_target: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<PairedBatch>> {
    if n_source == 0 || n_target == 0 {
        return Err(Error::param("both domains need at least one sample"));
    }
    if batch_size == 0 {
        return Err(Error::param("batch size must be at least 1"));
    }
    let steps = n_source.max(n_target).div_ceil(batch_size);
    let passes = |n: usize, domain: u64| -> Result<Vec<Vec<usize>>> {
        let mut out = Vec::with_capacity(steps);
        let mut r = 0;
        while out.len() < steps {
            out.extend(batch_iter(
                n,
                batch_size,
                derive_seed(seed, &[domain, r]),
                epoch,
            )?);
            r += 1;
        }
        out.truncate(steps);
        Ok(out)
    };
    let s = passes(n_source, 0)?;
    let t = passes(n_target, 1)?;
    Ok(s.into_iter()
        .zip(t)
        .map(|(source, target)| PairedBatch { source, target })
        .collect())
}
