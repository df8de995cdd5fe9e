//! Spatial datasets: CSV ingestion, geometry, normal scores, empirical
//! cross-variograms and train/test splitting.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::special::normal_quantile;

/// Two locations closer than this are treated as the same point.
pub const DUPLICATE_TOLERANCE: f64 = 1e-12;

/// `n` locations in `R^d` with `p` co-located variables.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialDataset {
    locations: Array2<f64>,
    values: Array2<f64>,
    names: Vec<String>,
    coord_names: Vec<String>,
}

impl SpatialDataset {
    pub fn new(locations: Array2<f64>, values: Array2<f64>, names: Vec<String>) -> Result<Self> {
        let d = locations.ncols();
        let coord_names = default_coord_names(d);
        Self::with_coord_names(locations, values, names, coord_names)
    }

    pub fn with_coord_names(
        locations: Array2<f64>,
        values: Array2<f64>,
        names: Vec<String>,
        coord_names: Vec<String>,
    ) -> Result<Self> {
        let (n, d) = locations.dim();
        if n == 0 || d == 0 {
            return Err(Error::input("dataset needs at least one location and one coordinate"));
        }
        if values.nrows() != n {
            return Err(Error::input(format!(
                "{} value rows for {} locations",
                values.nrows(),
                n
            )));
        }
        if values.ncols() == 0 {
            return Err(Error::input("dataset needs at least one variable"));
        }
        if names.len() != values.ncols() {
            return Err(Error::input(format!(
                "{} names for {} variables",
                names.len(),
                values.ncols()
            )));
        }
        if coord_names.len() != d {
            return Err(Error::input("coordinate name count does not match dimension"));
        }
        if locations.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("non-finite coordinate"));
        }
        if let Some((first, second)) = find_duplicate(&locations) {
            return Err(Error::DuplicateLocation { first, second });
        }
        Ok(Self {
            locations,
            values,
            names,
            coord_names,
        })
    }

    pub fn n(&self) -> usize {
        self.locations.nrows()
    }

    pub fn p(&self) -> usize {
        self.values.ncols()
    }

    pub fn d(&self) -> usize {
        self.locations.ncols()
    }

    pub fn locations(&self) -> &Array2<f64> {
        &self.locations
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn coord_names(&self) -> &[String] {
        &self.coord_names
    }

    pub fn column(&self, j: usize) -> ArrayView1<'_, f64> {
        self.values.column(j)
    }

    /// Rows `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            locations: self.locations.select(Axis(0), indices),
            values: self.values.select(Axis(0), indices),
            names: self.names.clone(),
            coord_names: self.coord_names.clone(),
        }
    }

    /// Single-variable dataset holding column `j`.
    pub fn variable(&self, j: usize) -> Self {
        Self {
            locations: self.locations.clone(),
            values: self.values.select(Axis(1), &[j]),
            names: vec![self.names[j].clone()],
            coord_names: self.coord_names.clone(),
        }
    }

    /// Replaces the value matrix (same shape).
    pub fn with_values(&self, values: Array2<f64>) -> Result<Self> {
        if values.dim() != self.values.dim() {
            return Err(Error::input("replacement values have a different shape"));
        }
        let mut out = self.clone();
        out.values = values;
        Ok(out)
    }

    /// Stacked observation vector in the requested ordering.
    pub fn stacked(&self, by_location: bool) -> Vec<f64> {
        let (n, p) = self.values.dim();
        let mut z = Vec::with_capacity(n * p);
        if by_location {
            for k in 0..n {
                for i in 0..p {
                    z.push(self.values[[k, i]]);
                }
            }
        } else {
            for i in 0..p {
                for k in 0..n {
                    z.push(self.values[[k, i]]);
                }
            }
        }
        z
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv_to(&mut file).map_err(|e| Error::io(path, e))
    }

    pub fn write_csv_to<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        let header: Vec<&str> = self
            .coord_names
            .iter()
            .chain(self.names.iter())
            .map(String::as_str)
            .collect();
        writeln!(out, "{}", header.join(","))?;
        for k in 0..self.n() {
            let row: Vec<String> = self
                .locations
                .row(k)
                .iter()
                .chain(self.values.row(k).iter())
                .map(|v| format!("{v}"))
                .collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

fn default_coord_names(d: usize) -> Vec<String> {
    const AXES: [&str; 3] = ["x", "y", "z"];
    (0..d)
        .map(|i| {
            AXES.get(i)
                .map(|s| s.to_string())
                .unwrap_or_else(|| format!("x{i}"))
        })
        .collect()
}

/// First pair of rows closer than [`DUPLICATE_TOLERANCE`], in row order.
fn find_duplicate(locations: &Array2<f64>) -> Option<(usize, usize)> {
    let n = locations.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| locations[[a, 0]].total_cmp(&locations[[b, 0]]));
    let mut found: Option<(usize, usize)> = None;
    for (pos, &a) in order.iter().enumerate() {
        for &b in &order[pos + 1..] {
            if locations[[b, 0]] - locations[[a, 0]] > DUPLICATE_TOLERANCE {
                break;
            }
            if distance(locations.row(a), locations.row(b)) <= DUPLICATE_TOLERANCE {
                let pair = (a.min(b), a.max(b));
                found = Some(match found {
                    Some(prev) if prev <= pair => prev,
                    _ => pair,
                });
            }
        }
    }
    found
}

/// Column selection for [`load_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub coords: Vec<String>,
    /// Variable columns; `None` takes every non-coordinate column in file order.
    pub values: Option<Vec<String>>,
}

impl CsvSchema {
    pub fn new(coords: &[&str], values: Option<&[&str]>) -> Self {
        Self {
            coords: coords.iter().map(|s| s.to_string()).collect(),
            values: values.map(|v| v.iter().map(|s| s.to_string()).collect()),
        }
    }

    /// Coordinates `x, y` (or `x, y, z`) followed by all other columns.
    pub fn planar() -> Self {
        Self::new(&["x", "y"], None)
    }
}

/// Reads a CSV file with a header row. Rows keep file order.
pub fn load_dataset(path: &Path, schema: &CsvSchema) -> Result<SpatialDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let csv_err = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let header: Vec<String> = reader
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(str::to_string)
        .collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let coord_idx: Vec<usize> = schema.coords.iter().map(|c| find(c)).collect::<Result<_>>()?;
    let value_names: Vec<String> = match &schema.values {
        Some(v) => v.clone(),
        None => header
            .iter()
            .filter(|h| !schema.coords.contains(h))
            .cloned()
            .collect(),
    };
    let value_idx: Vec<usize> = value_names.iter().map(|c| find(c)).collect::<Result<_>>()?;

    let mut coords = Vec::new();
    let mut vals = Vec::new();
    let mut n = 0;
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        // data rows are numbered from 1, header excluded
        let parse = |idx: usize| -> Result<f64> {
            let cell = record.get(idx).unwrap_or("");
            cell.parse::<f64>().map_err(|_| Error::Parse {
                row: row + 1,
                column: header[idx].clone(),
                value: cell.to_string(),
            })
        };
        for &c in &coord_idx {
            coords.push(parse(c)?);
        }
        for &c in &value_idx {
            vals.push(parse(c)?);
        }
        n += 1;
    }
    let locations = Array2::from_shape_vec((n, coord_idx.len()), coords)
        .map_err(|e| Error::input(e.to_string()))?;
    let values = Array2::from_shape_vec((n, value_idx.len()), vals)
        .map_err(|e| Error::input(e.to_string()))?;
    SpatialDataset::with_coord_names(locations, values, value_names, schema.coords.clone())
}

pub fn distance(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Symmetric Euclidean distance matrix with an exactly zero diagonal.
pub fn pairwise_distances(locations: &Array2<f64>) -> Array2<f64> {
    let n = locations.nrows();
    let mut out = Array2::zeros((n, n));
    for k in 0..n {
        for l in (k + 1)..n {
            let h = distance(locations.row(k), locations.row(l));
            out[[k, l]] = h;
            out[[l, k]] = h;
        }
    }
    out
}

/// k-nearest-neighbor queries over a fixed point set.
pub trait NeighborIndex {
    /// Up to `k` nearest points to `query`, sorted by `(distance, index)`,
    /// skipping `exclude`.
    fn nearest(&self, query: ArrayView1<'_, f64>, k: usize, exclude: Option<usize>)
        -> Vec<(usize, f64)>;
}

/// Exhaustive search; adequate for n up to ~10⁴.
pub struct BruteForceIndex<'a> {
    points: &'a Array2<f64>,
}

impl<'a> BruteForceIndex<'a> {
    pub fn new(points: &'a Array2<f64>) -> Self {
        Self { points }
    }
}

impl NeighborIndex for BruteForceIndex<'_> {
    fn nearest(
        &self,
        query: ArrayView1<'_, f64>,
        k: usize,
        exclude: Option<usize>,
    ) -> Vec<(usize, f64)> {
        let mut cand: Vec<(usize, f64)> = (0..self.points.nrows())
            .filter(|&l| Some(l) != exclude)
            .map(|l| (l, distance(query, self.points.row(l))))
            .collect();
        let by = |a: &(usize, f64), b: &(usize, f64)| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0));
        let k = k.min(cand.len());
        if k == 0 {
            return Vec::new();
        }
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, by);
            cand.truncate(k);
        }
        cand.sort_by(by);
        cand
    }
}

/// Per-location nearest-neighbor lists defining the composite-likelihood pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborGraph {
    pub v: usize,
    pub neighbors: Vec<Vec<usize>>,
}

impl NeighborGraph {
    pub fn n(&self) -> usize {
        self.neighbors.len()
    }

    /// Unordered pairs `(k, l)`, `k < l`, with `l ∈ N_k` or `k ∈ N_l`; each once, sorted.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs: Vec<(usize, usize)> = self
            .neighbors
            .iter()
            .enumerate()
            .flat_map(|(k, list)| list.iter().map(move |&l| (k.min(l), k.max(l))))
            .collect();
        pairs.sort_unstable();
        pairs.dedup();
        pairs
    }
}

pub fn nearest_neighbors(locations: &Array2<f64>, v: usize) -> Result<NeighborGraph> {
    nearest_neighbors_with(&BruteForceIndex::new(locations), locations, v)
}

pub fn nearest_neighbors_with<I: NeighborIndex>(
    index: &I,
    locations: &Array2<f64>,
    v: usize,
) -> Result<NeighborGraph> {
    if v == 0 {
        return Err(Error::input("neighbor count v must be positive"));
    }
    let n = locations.nrows();
    if n < 2 {
        return Err(Error::input("nearest neighbors need at least two locations"));
    }
    let neighbors = (0..n)
        .map(|k| {
            index
                .nearest(locations.row(k), v, Some(k))
                .into_iter()
                .map(|(l, _)| l)
                .collect()
        })
        .collect();
    Ok(NeighborGraph { v, neighbors })
}

/// Sorted distinct original values and their Gaussian scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalScoreTable {
    pub values: Vec<f64>,
    pub scores: Vec<f64>,
}

impl NormalScoreTable {
    /// Maps an original-scale value to the score scale (linear interpolation,
    /// clamped at the extremes).
    pub fn forward(&self, value: f64) -> f64 {
        interpolate(&self.values, &self.scores, value)
    }

    /// Maps a score back to the original scale.
    pub fn inverse(&self, score: f64) -> f64 {
        interpolate(&self.scores, &self.values, score)
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "value,score")?;
        for (v, s) in self.values.iter().zip(&self.scores) {
            writeln!(out, "{v},{s}")?;
        }
        Ok(())
    }
}

fn interpolate(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if x <= xs[0] {
        return ys[0];
    }
    let last = xs.len() - 1;
    if x >= xs[last] {
        return ys[last];
    }
    let hi = xs.partition_point(|&v| v <= x);
    let lo = hi - 1;
    if xs[lo] == x {
        return ys[lo];
    }
    let t = (x - xs[lo]) / (xs[hi] - xs[lo]);
    ys[lo] + t * (ys[hi] - ys[lo])
}

/// Rank-based Gaussian scores `Φ⁻¹((r - 0.5)/n)` with average ranks for ties.
pub fn normal_score_transform(values: ArrayView1<'_, f64>) -> Result<(Array1<f64>, NormalScoreTable)> {
    let n = values.len();
    if n < 2 {
        return Err(Error::input("normal score transform needs at least two values"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("normal score transform needs finite values"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    if values[order[0]] == values[order[n - 1]] {
        return Err(Error::input("all values identical; ranks are degenerate"));
    }
    let mut out = Array1::zeros(n);
    let mut table = NormalScoreTable {
        values: Vec::new(),
        scores: Vec::new(),
    };
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // 1-based ranks start+1..=end share their average
        let rank = (start + 1 + end) as f64 / 2.0;
        let score = normal_quantile((rank - 0.5) / n as f64);
        for &idx in &order[start..end] {
            out[idx] = score;
        }
        table.values.push(values[order[start]]);
        table.scores.push(score);
        start = end;
    }
    Ok((out, table))
}

/// Binned empirical (cross-)semivariogram of variables `i` and `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariogramEstimate {
    pub i: usize,
    pub j: usize,
    pub centers: Vec<f64>,
    /// `NaN` for bins without pairs.
    pub estimates: Vec<f64>,
    pub counts: Vec<usize>,
}

impl VariogramEstimate {
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "bin,estimate,count")?;
        for ((c, e), n) in self.centers.iter().zip(&self.estimates).zip(&self.counts) {
            writeln!(out, "{c},{e},{n}")?;
        }
        Ok(())
    }
}

/// `γ_ij(h) = 1/(2 N(h)) Σ (Z_i(s_k) - Z_i(s_l)) (Z_j(s_k) - Z_j(s_l))` over unordered
/// pairs with distance in bin `[edges[b], edges[b+1])` (last bin closed).
pub fn empirical_cross_variogram(
    dataset: &SpatialDataset,
    i: usize,
    j: usize,
    edges: &[f64],
) -> Result<VariogramEstimate> {
    let p = dataset.p();
    if i >= p || j >= p {
        return Err(Error::input(format!("variable index out of range (p = {p})")));
    }
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::input("bin edges must be strictly increasing with at least two entries"));
    }
    let nb = edges.len() - 1;
    let mut sums = vec![0.0; nb];
    let mut counts = vec![0usize; nb];
    let loc = dataset.locations();
    let z = dataset.values();
    let last = edges[nb];
    for k in 0..dataset.n() {
        for l in (k + 1)..dataset.n() {
            let h = distance(loc.row(k), loc.row(l));
            if h < edges[0] || h > last {
                continue;
            }
            let b = if h == last {
                nb - 1
            } else {
                edges.partition_point(|&e| e <= h) - 1
            };
            let di = z[[k, i]] - z[[l, i]];
            let dj = z[[k, j]] - z[[l, j]];
            sums[b] += di * dj;
            counts[b] += 1;
        }
    }
    let estimates = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c == 0 { f64::NAN } else { s / (2.0 * c as f64) })
        .collect();
    let centers = edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    Ok(VariogramEstimate {
        i,
        j,
        centers,
        estimates,
        counts,
    })
}

/// Random disjoint split; both parts keep file order.
pub fn train_test_split(
    dataset: &SpatialDataset,
    n_test: usize,
    seed: u64,
) -> Result<(SpatialDataset, SpatialDataset)> {
    let n = dataset.n();
    if n_test == 0 || n_test >= n {
        return Err(Error::input(format!(
            "n_test must satisfy 0 < n_test < n = {n}, got {n_test}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut r = rng::stream(seed, 0);
    rng::shuffle(&mut r, &mut idx);
    let mut test = idx[..n_test].to_vec();
    let mut train = idx[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((dataset.subset(&train), dataset.subset(&test)))
}
