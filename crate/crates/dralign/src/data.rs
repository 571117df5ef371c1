//! Dataset ingestion, preprocessing, subgroup views, stratified splits, and a
//! synthetic biased-data generator for self-contained experiments.
//!
//! Tables are immutable after construction (standardization builds a new
//! table); views are read-only index lists over a parent table. Preprocessing
//! is fit on the training split only and applied to the others, so no
//! statistics leak across splits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("column {0:?} not found in header")]
    UnknownColumn(String),
    #[error("column {column:?} has {got} distinct values after dropping missing rows; expected exactly 2")]
    NonBinaryColumn { column: String, got: usize },
    #[error("file has no data rows")]
    EmptyFile,
    #[error("subgroup cell (a={a}, y={y:?}) is empty")]
    EmptyCell { a: u8, y: Option<u8> },
    #[error("split fractions must be positive and sum to 1, got {0:?}")]
    BadFractions((f64, f64, f64)),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColumnKind {
    Numeric,
    CategoricalExpanded,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnMeta {
    pub name: String,
    pub kind: ColumnKind,
}

/// Dense feature matrix plus binary labels and binary sensitive attributes.
#[derive(Debug, Clone)]
pub struct DatasetTable {
    features: Vec<f64>,
    n_cols: usize,
    labels: Vec<u8>,
    attrs: Vec<u8>,
    columns: Vec<ColumnMeta>,
}

impl DatasetTable {
    pub fn new(
        features: Vec<f64>,
        n_cols: usize,
        labels: Vec<u8>,
        attrs: Vec<u8>,
        columns: Vec<ColumnMeta>,
    ) -> DatasetTable {
        assert_eq!(columns.len(), n_cols, "one ColumnMeta per feature column");
        assert_eq!(features.len(), n_cols * labels.len());
        assert_eq!(labels.len(), attrs.len());
        assert!(
            features.iter().all(|v| v.is_finite()),
            "features must be finite"
        );
        DatasetTable {
            features,
            n_cols,
            labels,
            attrs,
            columns,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn attr(&self, i: usize) -> u8 {
        self.attrs[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn attrs(&self) -> &[u8] {
        &self.attrs
    }

    pub fn columns(&self) -> &[ColumnMeta] {
        &self.columns
    }

    /// Count of rows in each `(a, y)` cell, indexed `[a][y]`.
    pub fn cell_counts(&self) -> [[usize; 2]; 2] {
        let mut counts = [[0usize; 2]; 2];
        for i in 0..self.n_rows() {
            counts[self.attrs[i] as usize][self.labels[i] as usize] += 1;
        }
        counts
    }

    /// View over the rows with attribute `a`, optionally restricted to label `y`.
    pub fn subgroup(&self, a: u8, y: Option<u8>) -> Result<SubgroupView<'_>, DataError> {
        let indices: Vec<u32> = (0..self.n_rows())
            .filter(|&i| self.attrs[i] == a && y.map_or(true, |y| self.labels[i] == y))
            .map(|i| i as u32)
            .collect();
        if indices.is_empty() {
            return Err(DataError::EmptyCell { a, y });
        }
        Ok(SubgroupView {
            table: self,
            indices,
        })
    }

    /// Canonical CSV serialization: feature columns by name, then `label` and
    /// `attr`. Loading it back with [`CsvSchema::canonical`] round-trips row
    /// and cell counts exactly.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), DataError> {
        let mut header: Vec<&str> = self.columns.iter().map(|c| c.name.as_str()).collect();
        header.push("label");
        header.push("attr");
        writeln!(w, "{}", header.join(","))?;
        for i in 0..self.n_rows() {
            let mut fields: Vec<String> = self.row(i).iter().map(|v| format!("{v:?}")).collect();
            fields.push(self.labels[i].to_string());
            fields.push(self.attrs[i].to_string());
            writeln!(w, "{}", fields.join(","))?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), DataError> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    fn take_rows(&self, idx: &[usize]) -> DatasetTable {
        let mut features = Vec::with_capacity(idx.len() * self.n_cols);
        let mut labels = Vec::with_capacity(idx.len());
        let mut attrs = Vec::with_capacity(idx.len());
        for &i in idx {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
            attrs.push(self.attrs[i]);
        }
        DatasetTable {
            features,
            n_cols: self.n_cols,
            labels,
            attrs,
            columns: self.columns.clone(),
        }
    }
}

/// Read-only view over one `(a)` or `(a, y)` cell of a parent table.
#[derive(Debug, Clone)]
pub struct SubgroupView<'a> {
    table: &'a DatasetTable,
    indices: Vec<u32>,
}

impl<'a> SubgroupView<'a> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn table(&self) -> &'a DatasetTable {
        self.table
    }

    pub fn rows(&self) -> impl Iterator<Item = &'a [f64]> + '_ {
        self.indices.iter().map(|&i| self.table.row(i as usize))
    }

    pub fn labels(&self) -> Vec<u8> {
        self.indices
            .iter()
            .map(|&i| self.table.label(i as usize))
            .collect()
    }

    /// Deterministic cap: keeps the first `cap` rows in index order.
    pub fn truncated(&self, cap: usize) -> SubgroupView<'a> {
        SubgroupView {
            table: self.table,
            indices: self.indices.iter().take(cap).copied().collect(),
        }
    }

    /// View over explicit row indices of the parent table.
    pub fn from_indices(table: &'a DatasetTable, indices: Vec<u32>) -> SubgroupView<'a> {
        SubgroupView { table, indices }
    }
}

/// Column roles for CSV ingestion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvSchema {
    pub label_column: String,
    /// Raw value mapped to label 1; any second distinct value maps to 0.
    pub positive_label: String,
    pub sensitive_column: String,
    /// Raw value mapped to attribute 1; any second distinct value maps to 0.
    pub sensitive_positive: String,
    /// Cell contents treated as missing; a row containing one is dropped.
    #[serde(default = "default_missing_markers")]
    pub missing_markers: Vec<String>,
}

fn default_missing_markers() -> Vec<String> {
    vec!["?".to_string(), String::new()]
}

impl CsvSchema {
    /// Schema matching [`DatasetTable::write_csv`] output.
    pub fn canonical() -> CsvSchema {
        CsvSchema {
            label_column: "label".into(),
            positive_label: "1".into(),
            sensitive_column: "attr".into(),
            sensitive_positive: "1".into(),
            missing_markers: default_missing_markers(),
        }
    }
}

/// Ingestion summary returned alongside the table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadReport {
    pub rows_read: usize,
    pub rows_dropped: usize,
}

/// Loads a headered CSV. Categorical feature columns are one-hot expanded
/// (levels sorted lexicographically), numeric columns kept as-is; rows with
/// missing values are dropped and counted. Standardization is a separate step
/// ([`Standardizer`]) so statistics can be fit on the training split alone.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<(DatasetTable, LoadReport), DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|s| s.to_string()).collect();

    let col_index = |name: &str| -> Result<usize, DataError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::UnknownColumn(name.to_string()))
    };
    let label_idx = col_index(&schema.label_column)?;
    let attr_idx = col_index(&schema.sensitive_column)?;

    let mut rows_read = 0usize;
    let mut rows_dropped = 0usize;
    let mut records: Vec<csv::StringRecord> = Vec::new();
    for record in reader.records() {
        let record = record?;
        rows_read += 1;
        let missing = record
            .iter()
            .any(|cell| schema.missing_markers.iter().any(|m| m == cell));
        if missing {
            rows_dropped += 1;
        } else {
            records.push(record);
        }
    }
    if records.is_empty() {
        return Err(DataError::EmptyFile);
    }

    let binary_map = |idx: usize, positive: &str, column: &str| -> Result<Vec<u8>, DataError> {
        let distinct: BTreeSet<&str> = records.iter().map(|r| &r[idx]).collect();
        if distinct.len() != 2 {
            return Err(DataError::NonBinaryColumn {
                column: column.to_string(),
                got: distinct.len(),
            });
        }
        Ok(records
            .iter()
            .map(|r| (r[idx] == *positive) as u8)
            .collect())
    };
    let labels = binary_map(label_idx, &schema.positive_label, &schema.label_column)?;
    let attrs = binary_map(attr_idx, &schema.sensitive_positive, &schema.sensitive_column)?;

    // Classify feature columns: numeric when every cell parses as f64.
    let feature_cols: Vec<usize> = (0..headers.len())
        .filter(|&i| i != label_idx && i != attr_idx)
        .collect();
    let mut columns: Vec<ColumnMeta> = Vec::new();
    let mut extractors: Vec<(usize, Option<Vec<String>>)> = Vec::new();
    for &ci in &feature_cols {
        let numeric = records.iter().all(|r| r[ci].parse::<f64>().is_ok());
        if numeric {
            columns.push(ColumnMeta {
                name: headers[ci].clone(),
                kind: ColumnKind::Numeric,
            });
            extractors.push((ci, None));
        } else {
            let levels: Vec<String> = records
                .iter()
                .map(|r| r[ci].to_string())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            for level in &levels {
                columns.push(ColumnMeta {
                    name: format!("{}={}", headers[ci], level),
                    kind: ColumnKind::CategoricalExpanded,
                });
            }
            extractors.push((ci, Some(levels)));
        }
    }

    let n_cols = columns.len();
    let mut features = Vec::with_capacity(records.len() * n_cols);
    for r in &records {
        for (ci, levels) in &extractors {
            match levels {
                None => features.push(r[*ci].parse::<f64>().unwrap()),
                Some(levels) => {
                    for level in levels {
                        features.push((r[*ci] == *level) as u8 as f64);
                    }
                }
            }
        }
    }

    Ok((
        DatasetTable::new(features, n_cols, labels, attrs, columns),
        LoadReport {
            rows_read,
            rows_dropped,
        },
    ))
}

/// Per-column mean/std fit on one table (numeric columns only) and applied to
/// any compatible table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Standardizer {
    mean: Vec<f64>,
    std: Vec<f64>,
    numeric: Vec<bool>,
}

impl Standardizer {
    pub fn fit(table: &DatasetTable) -> Standardizer {
        let n = table.n_rows() as f64;
        let numeric: Vec<bool> = table
            .columns
            .iter()
            .map(|c| c.kind == ColumnKind::Numeric)
            .collect();
        let mut mean = vec![0.0; table.n_cols];
        for i in 0..table.n_rows() {
            for (j, v) in table.row(i).iter().enumerate() {
                mean[j] += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; table.n_cols];
        for i in 0..table.n_rows() {
            for (j, v) in table.row(i).iter().enumerate() {
                var[j] += (v - mean[j]).powi(2);
            }
        }
        let std = var
            .iter()
            .map(|&v| {
                let s = (v / n).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, std, numeric }
    }

    pub fn apply(&self, table: &DatasetTable) -> DatasetTable {
        assert_eq!(table.n_cols, self.mean.len(), "column count mismatch");
        let mut out = table.clone();
        for i in 0..out.n_rows() {
            for j in 0..out.n_cols {
                if self.numeric[j] {
                    let v = &mut out.features[i * out.n_cols + j];
                    *v = (*v - self.mean[j]) / self.std[j];
                }
            }
        }
        out
    }
}

/// Stratified split by `(a, y)` cell: every split receives at least one row of
/// each non-trivial cell; deterministic per seed.
pub fn split(
    table: &DatasetTable,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(DatasetTable, DatasetTable, DatasetTable), DataError> {
    let (ft, fv, fe) = fractions;
    if ft <= 0.0 || fv <= 0.0 || fe <= 0.0 || (ft + fv + fe - 1.0).abs() > 1e-9 {
        return Err(DataError::BadFractions(fractions));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splits: [Vec<usize>; 3] = Default::default();
    for a in 0..2u8 {
        for y in 0..2u8 {
            let mut cell: Vec<usize> = (0..table.n_rows())
                .filter(|&i| table.attrs[i] == a && table.labels[i] == y)
                .collect();
            if cell.is_empty() {
                continue;
            }
            // Fisher-Yates shuffle.
            for i in (1..cell.len()).rev() {
                let j = rng.gen_range(0..=i);
                cell.swap(i, j);
            }
            let n = cell.len();
            let mut counts = largest_remainder(n, [ft, fv, fe]);
            if n >= 3 {
                // Give every split at least one row, taking from the largest.
                for s in 0..3 {
                    while counts[s] == 0 {
                        let donor = (0..3).max_by_key(|&d| counts[d]).unwrap();
                        counts[donor] -= 1;
                        counts[s] += 1;
                    }
                }
            }
            let mut offset = 0;
            for s in 0..3 {
                splits[s].extend_from_slice(&cell[offset..offset + counts[s]]);
                offset += counts[s];
            }
        }
    }
    for s in splits.iter_mut() {
        s.sort_unstable();
    }
    Ok((
        table.take_rows(&splits[0]),
        table.take_rows(&splits[1]),
        table.take_rows(&splits[2]),
    ))
}

fn largest_remainder(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|&e| e.floor() as usize).collect();
    let mut rest: usize = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&i, &j| {
        let ri = exact[i] - exact[i].floor();
        let rj = exact[j] - exact[j].floor();
        rj.partial_cmp(&ri).unwrap()
    });
    for &i in &order {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    [counts[0], counts[1], counts[2]]
}

/// Synthetic biased table. Features are standard normal shifted by
/// `bias` along a fixed direction for the `a=1` group; the label thresholds
/// the same direction plus Gaussian label noise:
///
/// ```text
/// x ~ N(0, I_d) + a·bias·u,  y = 1{u·x + noise·ε > 0},  u = 1/√d
/// ```
///
/// With `bias = 0` the two subgroups are identically distributed and a trained
/// classifier shows no demographic-parity gap beyond sampling noise; the gap
/// grows monotonically with `bias`.
pub fn synth_biased(n: usize, d: usize, bias: f64, noise: f64, seed: u64) -> DatasetTable {
    assert!(n >= 40, "need at least 40 samples");
    assert!(d >= 2, "need at least 2 features");
    assert!((0.0..=1.0).contains(&bias), "bias must lie in [0, 1]");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = 1.0 / (d as f64).sqrt();
    let mut features = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut attrs = Vec::with_capacity(n);
    for _ in 0..n {
        let a: u8 = rng.gen_range(0..2) as u8;
        let mut score = 0.0;
        for _ in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            let x = z + a as f64 * bias * u;
            features.push(x);
            score += u * x;
        }
        let eps: f64 = rng.sample(StandardNormal);
        labels.push((score + noise * eps > 0.0) as u8);
        attrs.push(a);
    }
    let columns = (0..d)
        .map(|j| ColumnMeta {
            name: format!("f{j}"),
            kind: ColumnKind::Numeric,
        })
        .collect();
    DatasetTable::new(features, d, labels, attrs, columns)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::io::Write;

    fn write_temp(content: &str) -> std::path::PathBuf {
        let mut path = std::env::temp_dir();
        let unique = format!(
            "dralign_test_{}_{}.csv",
            std::process::id(),
            NEXT.fetch_add(1, std::sync::atomic::Ordering::Relaxed)
        );
        path.push(unique);
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        path
    }
    static NEXT: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);

    fn toy_schema() -> CsvSchema {
        CsvSchema {
            label_column: "income".into(),
            positive_label: "high".into(),
            sensitive_column: "sex".into(),
            sensitive_positive: "F".into(),
            missing_markers: vec!["?".into(), "".into()],
        }
    }

    #[test]
    fn one_hot_expansion_width() {
        let path = write_temp(
            "age,color,income,sex\n\
             30,red,high,F\n\
             40,green,low,M\n\
             50,blue,high,M\n\
             35,red,low,F\n",
        );
        let (table, report) = load_csv(&path, &toy_schema()).unwrap();
        // 1 numeric + 3 one-hot columns.
        assert_eq!(table.n_cols(), 4);
        assert_eq!(table.n_rows(), 4);
        assert_eq!(report.rows_dropped, 0);
        let names: Vec<&str> = table.columns().iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, vec!["age", "color=blue", "color=green", "color=red"]);
        // Row 0: age 30, red.
        assert_eq!(table.row(0), &[30.0, 0.0, 0.0, 1.0]);
        assert_eq!(table.label(0), 1);
        assert_eq!(table.attr(0), 1);
        std::fs::remove_file(path).ok();
    }

    #[test]
    fn missing_rows_dropped_and_counted() {
        let path = write_temp(
            "age,income,sex\n\
             30,high,F\n\
             ?,low,M\n\
             50,high,M\n\
             35,low,F\n",
        );
        let (table, report) = load_csv(&path, &toy_schema()).unwrap();
        assert_eq!(table.n_rows(), 3);
        assert_eq!(report.rows_read, 4);
        assert_eq!(report.rows_dropped, 1);
        std::fs::remove_file(path).ok();
    }

    #[test]
    fn bad_columns_error() {
        let path = write_temp("age,income,sex\n30,high,F\n40,mid,M\n50,low,M\n");
        assert!(matches!(
            load_csv(&path, &toy_schema()),
            Err(DataError::NonBinaryColumn { .. })
        ));
        let mut schema = toy_schema();
        schema.label_column = "nope".into();
        assert!(matches!(
            load_csv(&path, &schema),
            Err(DataError::UnknownColumn(_))
        ));
        std::fs::remove_file(path).ok();
    }

    #[test]
    fn csv_roundtrip_preserves_counts() {
        let table = synth_biased(200, 3, 0.5, 0.4, 9);
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        let path = write_temp(std::str::from_utf8(&buf).unwrap());
        let (back, report) = load_csv(&path, &CsvSchema::canonical()).unwrap();
        assert_eq!(report.rows_dropped, 0);
        assert_eq!(back.n_rows(), table.n_rows());
        assert_eq!(back.cell_counts(), table.cell_counts());
        std::fs::remove_file(path).ok();
    }

    #[test]
    fn split_sizes_and_stratification() {
        let table = synth_biased(1000, 4, 0.6, 0.5, 3);
        let (tr, va, te) = split(&table, (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!(tr.n_rows() + va.n_rows() + te.n_rows(), 1000);
        // Cell rounding keeps each split within a few rows of its share.
        assert!((tr.n_rows() as i64 - 800).abs() <= 4);
        assert!((va.n_rows() as i64 - 100).abs() <= 4);
        for t in [&tr, &va, &te] {
            let counts = t.cell_counts();
            for a in 0..2 {
                for y in 0..2 {
                    assert!(counts[a][y] >= 1, "empty ({a},{y}) cell in a split");
                }
            }
        }
    }

    #[test]
    fn split_is_deterministic() {
        let table = synth_biased(300, 3, 0.4, 0.5, 1);
        let (a1, b1, c1) = split(&table, (0.6, 0.2, 0.2), 11).unwrap();
        let (a2, b2, c2) = split(&table, (0.6, 0.2, 0.2), 11).unwrap();
        for (x, y) in [(&a1, &a2), (&b1, &b2), (&c1, &c2)] {
            assert_eq!(x.labels(), y.labels());
            assert_eq!(x.features, y.features);
        }
        assert!(matches!(
            split(&table, (0.5, 0.5, 0.1), 1),
            Err(DataError::BadFractions(_))
        ));
    }

    #[test]
    fn synth_is_deterministic_and_balanced() {
        let a = synth_biased(500, 4, 0.8, 0.5, 42);
        let b = synth_biased(500, 4, 0.8, 0.5, 42);
        assert_eq!(a.features, b.features);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.attrs, b.attrs);
        // Attribute roughly balanced.
        let n1 = a.attrs.iter().filter(|&&v| v == 1).count();
        assert!((200..=300).contains(&n1), "attribute imbalance: {n1}");
    }

    #[test]
    fn subgroup_views_partition_the_table() {
        let table = synth_biased(200, 3, 0.5, 0.5, 8);
        let g0 = table.subgroup(0, None).unwrap();
        let g1 = table.subgroup(1, None).unwrap();
        assert_eq!(g0.len() + g1.len(), table.n_rows());

        let g01 = table.subgroup(0, Some(1)).unwrap();
        assert!(g01.len() <= g0.len());
        let set0: std::collections::HashSet<u32> = g0.indices().iter().copied().collect();
        assert!(g01.indices().iter().all(|i| set0.contains(i)));

        let total: usize = (0..2)
            .flat_map(|a| (0..2).map(move |y| (a, y)))
            .map(|(a, y)| table.subgroup(a, Some(y)).map(|v| v.len()).unwrap_or(0))
            .sum();
        assert_eq!(total, table.n_rows());
    }

    #[test]
    fn standardizer_fits_train_only() {
        let table = synth_biased(400, 3, 0.5, 0.5, 5);
        let (tr, va, _te) = split(&table, (0.6, 0.2, 0.2), 2).unwrap();
        let std = Standardizer::fit(&tr);
        let tr_s = std.apply(&tr);
        let va_s = std.apply(&va);
        // Train columns are exactly standardized.
        for j in 0..tr_s.n_cols() {
            let vals: Vec<f64> = (0..tr_s.n_rows()).map(|i| tr_s.row(i)[j]).collect();
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert_relative_eq!(mean, 0.0, epsilon = 1e-10);
            assert_relative_eq!(var, 1.0, epsilon = 1e-10);
        }
        // Validation columns are shifted by the *train* statistics, not their own.
        let j = 0;
        let vals: Vec<f64> = (0..va_s.n_rows()).map(|i| va_s.row(i)[j]).collect();
        let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() > 1e-12, "val mean coincidentally zero");
    }

    #[test]
    fn one_hot_columns_not_standardized() {
        let path = write_temp(
            "age,color,income,sex\n\
             30,red,high,F\n\
             40,green,low,M\n\
             50,blue,high,M\n\
             35,red,low,F\n",
        );
        let (table, _) = load_csv(&path, &toy_schema()).unwrap();
        let std = Standardizer::fit(&table);
        let out = std.apply(&table);
        for i in 0..out.n_rows() {
            for (j, c) in out.columns().iter().enumerate() {
                if c.kind == ColumnKind::CategoricalExpanded {
                    let v = out.row(i)[j];
                    assert!(v == 0.0 || v == 1.0);
                }
            }
        }
        std::fs::remove_file(path).ok();
    }
}
