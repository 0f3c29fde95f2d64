//! Grouped data model: ingestion, regressor construction with leave-out
//! means, within/between transforms and the identification checker.
//!
//! Each observation belongs to exactly one group `r` of size `m_r ≥ 2` with a
//! category label `D_r ∈ {1..J}`. The regressor row for individual `i` is
//! `z_ir = (1, x1_ir, lom(x2)_ir, x3_r)` where `lom(x2)_ir` is the mean of
//! `x2` over the other `m_r − 1` members of the group.
//!
//! Groups are stored sorted by id, and rows within a group are stored in a
//! canonical order (lexicographic by `(y, z)`), so that datasets differing
//! only by record order produce bit-identical downstream results.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// One group of observations with its assembled regressor matrix.
#[derive(Debug, Clone)]
pub struct GroupData {
    pub id: String,
    /// 1-based category label `D_r`.
    pub category: usize,
    /// Outcome vector, length `m`.
    pub y: DVector<f64>,
    /// Regressor matrix, `m × k_z`, first column is the intercept.
    pub z: DMatrix<f64>,
    /// Raw peer-characteristic columns (`m × k_{x2}`) as supplied; `z`
    /// carries their leave-out means, so these are kept for lossless
    /// flattening back to records.
    pub x2_raw: DMatrix<f64>,
}

impl GroupData {
    pub fn m(&self) -> usize {
        self.y.len()
    }
}

/// Within/between decomposition of one group.
#[derive(Debug, Clone)]
pub struct WithinBetween {
    pub y_dot: DVector<f64>,
    pub y_bar: f64,
    pub z_dot: DMatrix<f64>,
    /// Row vector of column means, length `k_z`.
    pub z_bar: DVector<f64>,
}

/// Deviations from group means for outcome and regressors.
pub fn within_between(g: &GroupData) -> WithinBetween {
    let m = g.m() as f64;
    let y_bar = g.y.sum() / m;
    let y_dot = g.y.map(|v| v - y_bar);
    let z_bar = DVector::from_fn(g.z.ncols(), |c, _| g.z.column(c).sum() / m);
    let mut z_dot = g.z.clone();
    for c in 0..g.z.ncols() {
        let mean = z_bar[c];
        for r in 0..g.z.nrows() {
            z_dot[(r, c)] -= mean;
        }
    }
    WithinBetween {
        y_dot,
        y_bar,
        z_dot,
        z_bar,
    }
}

/// Per-group sufficient statistics for the likelihood.
#[derive(Debug, Clone)]
pub(crate) struct GroupStats {
    pub m: usize,
    /// 0-based category index.
    pub cat: usize,
    pub ybar: f64,
    /// Within sum of squares `Ÿ′Ÿ`.
    pub yy_w: f64,
    /// `z̄_r` as a column vector (k).
    pub zbar: DVector<f64>,
    /// `Z̈′Ÿ` (k).
    pub zy_w: DVector<f64>,
    /// `Z̈′Z̈` (k×k).
    pub zz_w: DMatrix<f64>,
}

/// Sums over all groups sharing a `(size, category)` cell. Because the
/// likelihood coefficients depend on a group only through `(m_r, D_r)`, every
/// evaluation reduces to a loop over cells rather than groups.
#[derive(Debug, Clone)]
pub(crate) struct CellStats {
    pub m: usize,
    /// 0-based category index.
    pub cat: usize,
    pub count: usize,
    pub syy_w: f64,
    pub szy_w: DVector<f64>,
    pub szz_w: DMatrix<f64>,
    /// `Σ m ȳ²`
    pub smy2: f64,
    /// `Σ m ȳ z̄`
    pub smyz: DVector<f64>,
    /// `Σ m z̄ z̄′`
    pub smzz: DMatrix<f64>,
    /// `Σ z̄`
    pub szbar: DVector<f64>,
}

/// Immutable dataset of `R` groups with cached statistics.
#[derive(Debug, Clone)]
pub struct Dataset {
    groups: Vec<GroupData>,
    stats: Vec<GroupStats>,
    cells: Vec<CellStats>,
    j_categories: usize,
    k_z: usize,
    n_obs: usize,
    z_names: Vec<String>,
}

impl Dataset {
    /// Assemble a dataset from already-built groups. Validates group sizes,
    /// category coverage and regressor dimensions, then caches statistics.
    pub fn from_groups(mut groups: Vec<GroupData>, j_categories: usize) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::Domain("dataset has no groups".into()));
        }
        if j_categories == 0 {
            return Err(Error::Category("category count must be >= 1".into()));
        }
        let k_z = groups[0].z.ncols();
        let mut seen = vec![false; j_categories];
        for g in &groups {
            if g.m() < 2 {
                return Err(Error::SingletonGroup(g.id.clone()));
            }
            if g.x2_raw.ncols() > 0 && g.x2_raw.nrows() != g.m() {
                return Err(Error::Dimension(format!(
                    "group '{}' has x2_raw with {} rows for {} members",
                    g.id,
                    g.x2_raw.nrows(),
                    g.m()
                )));
            }
            if g.z.nrows() != g.m() || g.z.ncols() != k_z {
                return Err(Error::Dimension(format!(
                    "group '{}' has z of shape {}x{}, expected {}x{}",
                    g.id,
                    g.z.nrows(),
                    g.z.ncols(),
                    g.m(),
                    k_z
                )));
            }
            if g.category == 0 || g.category > j_categories {
                return Err(Error::Category(format!(
                    "group '{}' has category {} outside 1..={}",
                    g.id, g.category, j_categories
                )));
            }
            seen[g.category - 1] = true;
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(Error::Category(format!(
                "category {} has no groups",
                missing + 1
            )));
        }

        groups.sort_by(|a, b| a.id.cmp(&b.id));
        for g in &mut groups {
            canonicalize_rows(g);
        }

        let stats: Vec<GroupStats> = groups
            .iter()
            .map(|g| {
                let wb = within_between(g);
                GroupStats {
                    m: g.m(),
                    cat: g.category - 1,
                    ybar: wb.y_bar,
                    yy_w: wb.y_dot.dot(&wb.y_dot),
                    zy_w: wb.z_dot.transpose() * &wb.y_dot,
                    zz_w: wb.z_dot.transpose() * &wb.z_dot,
                    zbar: wb.z_bar,
                }
            })
            .collect();

        let mut cell_map: BTreeMap<(usize, usize), CellStats> = BTreeMap::new();
        for st in &stats {
            let cell = cell_map.entry((st.m, st.cat)).or_insert_with(|| CellStats {
                m: st.m,
                cat: st.cat,
                count: 0,
                syy_w: 0.0,
                szy_w: DVector::zeros(k_z),
                szz_w: DMatrix::zeros(k_z, k_z),
                smy2: 0.0,
                smyz: DVector::zeros(k_z),
                smzz: DMatrix::zeros(k_z, k_z),
                szbar: DVector::zeros(k_z),
            });
            let mf = st.m as f64;
            cell.count += 1;
            cell.syy_w += st.yy_w;
            cell.szy_w += &st.zy_w;
            cell.szz_w += &st.zz_w;
            cell.smy2 += mf * st.ybar * st.ybar;
            cell.smyz.axpy(mf * st.ybar, &st.zbar, 1.0);
            cell.smzz += mf * &st.zbar * st.zbar.transpose();
            cell.szbar += &st.zbar;
        }

        let n_obs = groups.iter().map(|g| g.m()).sum();
        let z_names = (0..k_z).map(|c| format!("z{c}")).collect();
        Ok(Self {
            groups,
            stats,
            cells: cell_map.into_values().collect(),
            j_categories,
            k_z,
            n_obs,
            z_names,
        })
    }

    pub fn groups(&self) -> &[GroupData] {
        &self.groups
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn j_categories(&self) -> usize {
        self.j_categories
    }

    pub fn k_z(&self) -> usize {
        self.k_z
    }

    /// Names of the assembled regressor columns.
    pub fn z_names(&self) -> &[String] {
        &self.z_names
    }

    pub fn set_z_names(&mut self, names: Vec<String>) {
        assert_eq!(names.len(), self.k_z);
        self.z_names = names;
    }

    pub(crate) fn stats(&self) -> &[GroupStats] {
        &self.stats
    }

    pub(crate) fn cells(&self) -> &[CellStats] {
        &self.cells
    }

    /// Number of groups per `(size, category)` cell, keyed by `(m, D)` with
    /// `D` 1-based.
    pub fn size_category_counts(&self) -> BTreeMap<(usize, usize), usize> {
        let mut out = BTreeMap::new();
        for c in &self.cells {
            out.insert((c.m, c.cat + 1), c.count);
        }
        out
    }
}

/// Sort rows of a group lexicographically by `(y, z row)` so permuting the
/// input records leaves all accumulated statistics bit-identical.
fn canonicalize_rows(g: &mut GroupData) {
    let m = g.m();
    let k = g.z.ncols();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        g.y[a].total_cmp(&g.y[b]).then_with(|| {
            (0..k)
                .map(|c| g.z[(a, c)].total_cmp(&g.z[(b, c)]))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    g.y = DVector::from_fn(m, |i, _| g.y[order[i]]);
    g.z = DMatrix::from_fn(m, k, |i, c| g.z[(order[i], c)]);
    let k2 = g.x2_raw.ncols();
    g.x2_raw = DMatrix::from_fn(m, k2, |i, c| g.x2_raw[(order[i], c)]);
}

/// One raw input record (one individual).
#[derive(Debug, Clone)]
pub struct Record {
    pub group: String,
    pub category: usize,
    pub y: f64,
    pub x1: Vec<f64>,
    pub x2: Vec<f64>,
    pub x3: Vec<f64>,
}

/// Names of the raw covariate columns, in the order their values appear in
/// each [`Record`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ColumnNames {
    pub x1: Vec<String>,
    pub x2: Vec<String>,
    pub x3: Vec<String>,
}

/// Ingestion limits.
#[derive(Debug, Clone)]
pub struct IngestOptions {
    /// Upper bound on group size; groups above it are rejected.
    pub max_group_size: usize,
    /// Category count; inferred from the data when `None`.
    pub j_categories: Option<usize>,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            max_group_size: 1000,
            j_categories: None,
        }
    }
}

const X3_CONSTANCY_TOL: f64 = 1e-9;

/// Assemble groups from raw records: collects rows by group id, builds
/// `z_ir = (1, x1_ir, lom(x2)_ir, x3_r)` with leave-out means over `m_r − 1`
/// peers, and validates that `x3` columns are constant within each group.
pub fn build_dataset(
    records: &[Record],
    names: &ColumnNames,
    opts: &IngestOptions,
) -> Result<Dataset> {
    if records.is_empty() {
        return Err(Error::Domain("no records".into()));
    }
    let (k1, k2, k3) = (names.x1.len(), names.x2.len(), names.x3.len());
    let mut by_group: BTreeMap<&str, Vec<&Record>> = BTreeMap::new();
    for (idx, rec) in records.iter().enumerate() {
        if rec.x1.len() != k1 || rec.x2.len() != k2 || rec.x3.len() != k3 {
            return Err(Error::Parse {
                line: idx + 1,
                msg: "covariate count differs from schema".into(),
            });
        }
        if !rec.y.is_finite()
            || rec.x1.iter().any(|v| !v.is_finite())
            || rec.x2.iter().any(|v| !v.is_finite())
            || rec.x3.iter().any(|v| !v.is_finite())
        {
            return Err(Error::Parse {
                line: idx + 1,
                msg: "non-finite value".into(),
            });
        }
        by_group.entry(&rec.group).or_default().push(rec);
    }

    let k_z = 1 + k1 + k2 + k3;
    let mut groups = Vec::with_capacity(by_group.len());
    let mut max_cat = 0usize;
    for (gid, rows) in &by_group {
        let m = rows.len();
        if m < 2 {
            return Err(Error::SingletonGroup((*gid).to_string()));
        }
        if m > opts.max_group_size {
            return Err(Error::Domain(format!(
                "group '{gid}' has {m} members, above the configured bound {}",
                opts.max_group_size
            )));
        }
        let category = rows[0].category;
        if category == 0 {
            return Err(Error::Category(format!(
                "group '{gid}' has category 0; categories are 1-based"
            )));
        }
        if rows.iter().any(|r| r.category != category) {
            return Err(Error::Category(format!(
                "group '{gid}' has inconsistent category labels"
            )));
        }
        max_cat = max_cat.max(category);

        for c in 0..k3 {
            let v0 = rows[0].x3[c];
            if rows.iter().any(|r| (r.x3[c] - v0).abs() > X3_CONSTANCY_TOL) {
                return Err(Error::Category(format!(
                    "group-level column '{}' varies within group '{gid}'",
                    names.x3[c]
                )));
            }
        }

        // leave-out means of x2 with divisor m - 1
        let sums: Vec<f64> = (0..k2)
            .map(|c| rows.iter().map(|r| r.x2[c]).sum())
            .collect();
        let mut z = DMatrix::zeros(m, k_z);
        let mut x2_raw = DMatrix::zeros(m, k2);
        let mut y = DVector::zeros(m);
        for (i, r) in rows.iter().enumerate() {
            y[i] = r.y;
            z[(i, 0)] = 1.0;
            for c in 0..k1 {
                z[(i, 1 + c)] = r.x1[c];
            }
            for c in 0..k2 {
                z[(i, 1 + k1 + c)] = (sums[c] - r.x2[c]) / (m as f64 - 1.0);
                x2_raw[(i, c)] = r.x2[c];
            }
            for c in 0..k3 {
                z[(i, 1 + k1 + k2 + c)] = r.x3[c];
            }
        }
        groups.push(GroupData {
            id: (*gid).to_string(),
            category,
            y,
            z,
            x2_raw,
        });
    }

    let j = match opts.j_categories {
        Some(j) => {
            if max_cat > j {
                return Err(Error::Category(format!(
                    "data contains category {max_cat} but J = {j}"
                )));
            }
            j
        }
        None => max_cat,
    };
    let mut d = Dataset::from_groups(groups, j)?;
    let mut z_names = Vec::with_capacity(k_z);
    z_names.push("intercept".to_string());
    z_names.extend(names.x1.iter().cloned());
    z_names.extend(names.x2.iter().map(|n| format!("lom_{n}")));
    z_names.extend(names.x3.iter().cloned());
    d.set_z_names(z_names);
    Ok(d)
}

/// Flatten a dataset back to raw records. The inverse of [`build_dataset`]
/// up to row order within a group: `x1` and `x3` come back out of the
/// assembled regressor matrix and `x2` from the retained raw columns, all
/// bit-identical to what was ingested.
pub fn flatten(d: &Dataset, names: &ColumnNames) -> Result<Vec<Record>> {
    let (k1, k2, k3) = (names.x1.len(), names.x2.len(), names.x3.len());
    if 1 + k1 + k2 + k3 != d.k_z() {
        return Err(Error::Dimension(format!(
            "column names describe {} regressors, dataset has {}",
            1 + k1 + k2 + k3,
            d.k_z()
        )));
    }
    let mut out = Vec::with_capacity(d.n_obs());
    for g in d.groups() {
        if g.x2_raw.ncols() != k2 {
            return Err(Error::Dimension(format!(
                "group '{}' carries {} raw x2 columns, expected {k2}",
                g.id,
                g.x2_raw.ncols()
            )));
        }
        for i in 0..g.m() {
            out.push(Record {
                group: g.id.clone(),
                category: g.category,
                y: g.y[i],
                x1: (0..k1).map(|c| g.z[(i, 1 + c)]).collect(),
                x2: (0..k2).map(|c| g.x2_raw[(i, c)]).collect(),
                x3: (0..k3).map(|c| g.z[(i, 1 + k1 + k2 + c)]).collect(),
            });
        }
    }
    Ok(out)
}

/// Parse the long-format CSV interface. Required columns `group`, `category`,
/// `y`; repeated optional columns `x1_*`, `x2_*`, `x3_*` in header order.
pub fn read_csv<R: Read>(reader: R) -> Result<(Vec<Record>, ColumnNames)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut col_group = None;
    let mut col_category = None;
    let mut col_y = None;
    let mut names = ColumnNames::default();
    let mut x1_idx = Vec::new();
    let mut x2_idx = Vec::new();
    let mut x3_idx = Vec::new();
    for (i, h) in headers.iter().enumerate() {
        match h {
            "group" => col_group = Some(i),
            "category" => col_category = Some(i),
            "y" => col_y = Some(i),
            _ if h.starts_with("x1_") => {
                names.x1.push(h.to_string());
                x1_idx.push(i);
            }
            _ if h.starts_with("x2_") => {
                names.x2.push(h.to_string());
                x2_idx.push(i);
            }
            _ if h.starts_with("x3_") => {
                names.x3.push(h.to_string());
                x3_idx.push(i);
            }
            other => {
                return Err(Error::Parse {
                    line: 0,
                    msg: format!("unrecognized column '{other}'"),
                })
            }
        }
    }
    let (col_group, col_category, col_y) = match (col_group, col_category, col_y) {
        (Some(g), Some(c), Some(y)) => (g, c, y),
        _ => {
            return Err(Error::Parse {
                line: 0,
                msg: "header must contain 'group', 'category' and 'y'".into(),
            })
        }
    };

    let parse_f64 = |field: &str, line: usize| -> Result<f64> {
        field.trim().parse::<f64>().map_err(|_| Error::Parse {
            line,
            msg: format!("cannot parse '{field}' as a number"),
        })
    };

    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let line = i + 2; // header is line 1
        let category = row[col_category]
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Parse {
                line,
                msg: format!("cannot parse category '{}'", &row[col_category]),
            })?;
        let mut rec = Record {
            group: row[col_group].to_string(),
            category,
            y: parse_f64(&row[col_y], line)?,
            x1: Vec::with_capacity(x1_idx.len()),
            x2: Vec::with_capacity(x2_idx.len()),
            x3: Vec::with_capacity(x3_idx.len()),
        };
        for &c in &x1_idx {
            rec.x1.push(parse_f64(&row[c], line)?);
        }
        for &c in &x2_idx {
            rec.x2.push(parse_f64(&row[c], line)?);
        }
        for &c in &x3_idx {
            rec.x3.push(parse_f64(&row[c], line)?);
        }
        records.push(rec);
    }
    Ok((records, names))
}

/// Read and assemble a dataset from a CSV file.
pub fn dataset_from_csv_path<P: AsRef<Path>>(path: P, opts: &IngestOptions) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let (records, names) = read_csv(file)?;
    build_dataset(&records, &names, opts)
}

/// Identification report for the size/category layout of a dataset.
#[derive(Debug, Clone)]
pub struct IdentReport {
    /// Groups per `(m, D)` cell, `D` 1-based.
    pub sizes_by_category: BTreeMap<(usize, usize), usize>,
    /// Some category contains two distinct group sizes.
    pub scenario_a: bool,
    /// Some size is present in two distinct categories; identification then
    /// additionally requires the category variances to actually differ.
    pub scenario_b: bool,
    pub identified: bool,
    pub j_categories: usize,
}

impl std::fmt::Display for IdentReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "groups per (size m, category j):")?;
        writeln!(f, "{:>6} {:>9} {:>7}", "m", "category", "groups")?;
        for (&(m, j), &count) in &self.sizes_by_category {
            writeln!(f, "{m:>6} {j:>9} {count:>7}")?;
        }
        writeln!(
            f,
            "scenario (a) size variation within a category: {}",
            self.scenario_a
        )?;
        writeln!(
            f,
            "scenario (b) shared size across categories:    {} (conditional on category variances differing)",
            self.scenario_b
        )?;
        write!(f, "identified: {}", self.identified)
    }
}

/// Check the two identification scenarios: (a) two groups of different sizes
/// share a category, or (b) two categories share a group size (which
/// identifies only when the category variances differ).
pub fn check_identification(d: &Dataset) -> IdentReport {
    let table = d.size_category_counts();
    let mut sizes_in_cat: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut cats_with_size: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(m, j) in table.keys() {
        sizes_in_cat.entry(j).or_default().push(m);
        cats_with_size.entry(m).or_default().push(j);
    }
    let scenario_a = sizes_in_cat.values().any(|v| v.len() >= 2);
    let scenario_b = cats_with_size.values().any(|v| v.len() >= 2);
    IdentReport {
        sizes_by_category: table,
        scenario_a,
        scenario_b,
        identified: scenario_a || (scenario_b && d.j_categories() >= 2),
        j_categories: d.j_categories(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(group: &str, category: usize, y: f64, x1: f64, x2: f64, x3: f64) -> Record {
        Record {
            group: group.into(),
            category,
            y,
            x1: vec![x1],
            x2: vec![x2],
            x3: vec![x3],
        }
    }

    fn names() -> ColumnNames {
        ColumnNames {
            x1: vec!["x1_a".into()],
            x2: vec!["x2_a".into()],
            x3: vec!["x3_a".into()],
        }
    }

    #[test]
    fn leave_out_mean_pair_swaps() {
        let records = vec![
            rec("g1", 1, 0.0, 0.0, 10.0, 1.0),
            rec("g1", 1, 1.0, 0.0, 20.0, 1.0),
        ];
        let d = build_dataset(&records, &names(), &IngestOptions::default()).unwrap();
        let g = &d.groups()[0];
        // lom column is column 2 (intercept, x1, lom_x2, x3); rows are in
        // canonical (y-sorted) order so y=0 row carries lom=20
        assert_eq!(g.z[(0, 2)], 20.0);
        assert_eq!(g.z[(1, 2)], 10.0);
    }

    #[test]
    fn leave_out_mean_triple() {
        let records = vec![
            rec("g1", 1, 1.0, 0.0, 1.0, 0.0),
            rec("g1", 1, 2.0, 0.0, 2.0, 0.0),
            rec("g1", 1, 3.0, 0.0, 3.0, 0.0),
        ];
        let d = build_dataset(&records, &names(), &IngestOptions::default()).unwrap();
        let g = &d.groups()[0];
        // hand computation: lom_i = (sum - x_i) / 2
        assert_eq!(g.z[(0, 2)], 2.5);
        assert_eq!(g.z[(1, 2)], 2.0);
        assert_eq!(g.z[(2, 2)], 1.5);
    }

    #[test]
    fn leave_out_mean_constant_column() {
        let records: Vec<Record> = (0..4)
            .map(|i| rec("g1", 1, i as f64, 0.0, 7.0, 0.0))
            .collect();
        let d = build_dataset(&records, &names(), &IngestOptions::default()).unwrap();
        let g = &d.groups()[0];
        for i in 0..4 {
            assert!((g.z[(i, 2)] - 7.0).abs() < 1e-15);
        }
    }

    #[test]
    fn singleton_group_rejected() {
        let records = vec![
            rec("solo", 1, 0.0, 0.0, 0.0, 0.0),
            rec("pair", 1, 0.0, 0.0, 0.0, 0.0),
            rec("pair", 1, 1.0, 0.0, 0.0, 0.0),
        ];
        let err = build_dataset(&records, &names(), &IngestOptions::default()).unwrap_err();
        assert!(matches!(err, Error::SingletonGroup(g) if g == "solo"));
    }

    #[test]
    fn varying_x3_rejected() {
        let records = vec![
            rec("g1", 1, 0.0, 0.0, 0.0, 1.0),
            rec("g1", 1, 1.0, 0.0, 0.0, 2.0),
        ];
        assert!(matches!(
            build_dataset(&records, &names(), &IngestOptions::default()),
            Err(Error::Category(_))
        ));
    }

    #[test]
    fn category_above_j_rejected() {
        let records = vec![
            rec("g1", 3, 0.0, 0.0, 0.0, 0.0),
            rec("g1", 3, 1.0, 0.0, 0.0, 0.0),
        ];
        let opts = IngestOptions {
            j_categories: Some(2),
            ..Default::default()
        };
        assert!(matches!(
            build_dataset(&records, &names(), &opts),
            Err(Error::Category(_))
        ));
    }

    #[test]
    fn missing_category_rejected() {
        // J inferred as 2 from labels, category 1 absent
        let records = vec![
            rec("g1", 2, 0.0, 0.0, 0.0, 0.0),
            rec("g1", 2, 1.0, 0.0, 0.0, 0.0),
        ];
        let opts = IngestOptions {
            j_categories: Some(2),
            ..Default::default()
        };
        assert!(matches!(
            build_dataset(&records, &names(), &opts),
            Err(Error::Category(_))
        ));
    }

    #[test]
    fn within_between_examples() {
        let g = GroupData {
            id: "g".into(),
            category: 1,
            y: nalgebra::dvector![1.0, 1.0, 1.0],
            z: DMatrix::repeat(3, 1, 1.0),
            x2_raw: DMatrix::zeros(3, 0),
        };
        let wb = within_between(&g);
        assert_eq!(wb.y_bar, 1.0);
        assert!(wb.y_dot.amax() == 0.0);

        let g = GroupData {
            id: "g".into(),
            category: 1,
            y: nalgebra::dvector![3.0, 1.0],
            z: DMatrix::repeat(2, 1, 1.0),
            x2_raw: DMatrix::zeros(2, 0),
        };
        let wb = within_between(&g);
        assert_eq!(wb.y_bar, 2.0);
        assert_eq!(wb.y_dot, nalgebra::dvector![1.0, -1.0]);

        let g = GroupData {
            id: "g".into(),
            category: 1,
            y: nalgebra::dvector![1.0, 2.0, 3.0, 6.0],
            z: DMatrix::repeat(4, 1, 1.0),
            x2_raw: DMatrix::zeros(4, 0),
        };
        let wb = within_between(&g);
        assert_eq!(wb.y_bar, 3.0);
        assert_eq!(wb.y_dot, nalgebra::dvector![-2.0, -1.0, 0.0, 3.0]);
    }

    #[test]
    fn identification_scenarios() {
        // all size 4, single category: not identified
        let mut records = Vec::new();
        for g in 0..3 {
            for i in 0..4 {
                records.push(rec(&format!("g{g}"), 1, (g * 4 + i) as f64, 0.0, 0.0, 0.0));
            }
        }
        let d = build_dataset(&records, &names(), &IngestOptions::default()).unwrap();
        let rep = check_identification(&d);
        assert!(!rep.scenario_a && !rep.scenario_b && !rep.identified);

        // sizes {3, 5} in one category
        let mut records = Vec::new();
        for i in 0..3 {
            records.push(rec("a", 1, i as f64, 0.0, 0.0, 0.0));
        }
        for i in 0..5 {
            records.push(rec("b", 1, i as f64, 0.0, 0.0, 0.0));
        }
        let d = build_dataset(&records, &names(), &IngestOptions::default()).unwrap();
        let rep = check_identification(&d);
        assert!(rep.scenario_a && rep.identified);

        // all size 4, two categories
        let mut records = Vec::new();
        for (g, cat) in [("a", 1), ("b", 2)] {
            for i in 0..4 {
                records.push(rec(g, cat, i as f64, 0.0, 0.0, 0.0));
            }
        }
        let d = build_dataset(&records, &names(), &IngestOptions::default()).unwrap();
        let rep = check_identification(&d);
        assert!(!rep.scenario_a && rep.scenario_b && rep.identified);
    }

    #[test]
    fn ident_report_counts_are_consistent() {
        let mut records = Vec::new();
        for (g, cat, m) in [("a", 1, 2), ("b", 1, 3), ("c", 2, 3), ("d", 2, 3)] {
            for i in 0..m {
                records.push(rec(g, cat, i as f64, 0.1 * i as f64, 0.0, 0.0));
            }
        }
        let d = build_dataset(&records, &names(), &IngestOptions::default()).unwrap();
        let rep = check_identification(&d);
        let r_total: usize = rep.sizes_by_category.values().sum();
        let n_total: usize = rep
            .sizes_by_category
            .iter()
            .map(|(&(m, _), &c)| m * c)
            .sum();
        assert_eq!(r_total, d.n_groups());
        assert_eq!(n_total, d.n_obs());
    }

    #[test]
    fn csv_round_trip() {
        let csv_text = "group,category,y,x1_a,x2_a,x3_a\n\
                        g1,1,1.5,0.1,0.2,3.0\n\
                        g2,2,0.5,0.4,0.5,4.0\n\
                        g1,1,2.5,0.3,0.6,3.0\n\
                        g2,2,1.0,0.7,0.8,4.0\n";
        let (records, names) = read_csv(csv_text.as_bytes()).unwrap();
        assert_eq!(records.len(), 4);
        assert_eq!(names.x2, vec!["x2_a".to_string()]);
        let d = build_dataset(&records, &names, &IngestOptions::default()).unwrap();
        assert_eq!(d.n_groups(), 2);
        assert_eq!(d.n_obs(), 4);
        assert_eq!(d.j_categories(), 2);
        // non-contiguous rows for g1 were collected together
        assert_eq!(d.groups()[0].m(), 2);

        // losslessness of the raw fields through grouping: every ingested
        // record comes back bit-identical (row order within a group is
        // canonical, so compare as sorted multisets)
        let flat = flatten(&d, &names).unwrap();
        assert_eq!(flat.len(), 4);
        let key = |r: &Record| {
            (
                r.group.clone(),
                r.category,
                r.y.to_bits(),
                r.x1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                r.x2.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                r.x3.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            )
        };
        let mut got: Vec<_> = flat.iter().map(key).collect();
        let mut want: Vec<_> = records.iter().map(key).collect();
        got.sort();
        want.sort();
        assert_eq!(got, want);
    }

    #[test]
    fn identification_is_monotone_in_adding_groups() {
        // once identified, adding any group cannot flip the report back
        let mut records = vec![
            rec("a", 1, 0.0, 0.1, 0.0, 0.0),
            rec("a", 1, 1.0, 0.2, 0.0, 0.0),
            rec("b", 1, 0.0, 0.3, 0.0, 0.0),
            rec("b", 1, 1.0, 0.4, 0.0, 0.0),
            rec("b", 1, 2.0, 0.5, 0.0, 0.0),
        ];
        let d = build_dataset(&records, &names(), &IngestOptions::default()).unwrap();
        assert!(check_identification(&d).identified);
        for extra in 0..4 {
            let gid = format!("x{extra}");
            for i in 0..4 {
                records.push(rec(&gid, 1, i as f64, 0.0, 0.0, 0.0));
            }
            let d = build_dataset(&records, &names(), &IngestOptions::default()).unwrap();
            assert!(check_identification(&d).identified, "lost after {extra}");
        }
    }

    #[test]
    fn csv_rejects_unknown_column() {
        let text = "group,category,y,bogus\n g,1,1.0,2.0\n";
        assert!(matches!(
            read_csv(text.as_bytes()),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn csv_rejects_missing_values() {
        let text = "group,category,y,x1_a\ng,1,,0.5\ng,1,1.0,0.5\n";
        let err = read_csv(text.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    proptest! {
        #[test]
        fn within_between_reconstructs_and_is_idempotent(
            y in proptest::collection::vec(-100.0f64..100.0, 2..10)
        ) {
            let m = y.len();
            let g = GroupData {
                id: "g".into(),
                category: 1,
                y: DVector::from_vec(y),
                z: DMatrix::repeat(m, 1, 1.0),
                x2_raw: DMatrix::zeros(m, 0),
            };
            let wb = within_between(&g);
            for i in 0..m {
                prop_assert!((wb.y_dot[i] + wb.y_bar - g.y[i]).abs() < 1e-9);
            }
            // column sums of deviations vanish
            prop_assert!(wb.y_dot.sum().abs() < 1e-9);
            // applying the transform to the deviations changes nothing
            let g2 = GroupData {
                y: wb.y_dot.clone(),
                ..g.clone()
            };
            let wb2 = within_between(&g2);
            prop_assert!(wb2.y_bar.abs() < 1e-9);
            for i in 0..m {
                prop_assert!((wb2.y_dot[i] - wb.y_dot[i]).abs() < 1e-9);
            }
        }
    }
}
