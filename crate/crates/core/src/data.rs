//! Cross-classified datasets: CSV ingestion, validation, and level indexing.
//!
//! Observations are stored in the observation-indexed form: a response
//! vector, an `N x p` design matrix *without* an intercept column (the
//! intercept is recovered from the fitted effects), and one level code per
//! way per observation. Level codes are assigned by order of first
//! appearance so repeated loads of the same file produce identical codes.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::Family;

/// Column mapping for CSV ingestion: one response column, zero or more
/// covariate columns, and one column per classification way.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub response: String,
    #[serde(default)]
    pub covariates: Vec<String>,
    pub ways: Vec<String>,
}

impl CsvSchema {
    fn validate(&self) -> Result<()> {
        if self.ways.is_empty() {
            return Err(Error::Config("schema needs at least one way column".into()));
        }
        let mut all: Vec<&String> = Vec::new();
        all.push(&self.response);
        all.extend(self.covariates.iter());
        all.extend(self.ways.iter());
        for (i, a) in all.iter().enumerate() {
            for b in &all[i + 1..] {
                if a == b {
                    return Err(Error::Config(format!("schema column '{a}' used twice")));
                }
            }
        }
        Ok(())
    }
}

/// Validated K-way cross-classified dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    family: Family,
    y: Vec<f64>,
    /// Row-major `n_obs x p` design matrix.
    x: Vec<f64>,
    p: usize,
    /// Per way: 0-based level code of each observation.
    ways: Vec<Vec<u32>>,
    level_counts: Vec<usize>,
    /// Per way: original labels in code order.
    level_labels: Vec<Vec<String>>,
    /// Rows dropped at load time because a used field was empty.
    pub rows_rejected: usize,
}

impl Dataset {
    /// Builds a dataset from raw label vectors, recoding each way's labels to
    /// contiguous codes by order of first appearance.
    pub fn from_parts(
        family: Family,
        y: Vec<f64>,
        x: Vec<f64>,
        p: usize,
        way_labels: Vec<Vec<String>>,
    ) -> Result<Dataset> {
        let n = y.len();
        let mut ways = Vec::with_capacity(way_labels.len());
        let mut level_labels = Vec::with_capacity(way_labels.len());
        for labels in &way_labels {
            if labels.len() != n {
                return Err(Error::Config("way column length mismatch".into()));
            }
            let mut lookup: HashMap<&str, u32> = HashMap::new();
            let mut codes = Vec::with_capacity(n);
            let mut ordered: Vec<String> = Vec::new();
            for l in labels {
                let next = lookup.len() as u32;
                let code = *lookup.entry(l.as_str()).or_insert_with(|| {
                    ordered.push(l.clone());
                    next
                });
                codes.push(code);
            }
            ways.push(codes);
            level_labels.push(ordered);
        }
        let level_counts = level_labels.iter().map(|l| l.len()).collect();
        let ds = Dataset {
            family,
            y,
            x,
            p,
            ways,
            level_counts,
            level_labels,
            rows_rejected: 0,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Builds a dataset from already-coded ways (0-based, contiguous). Labels
    /// are synthesized as `"1".."n_k"`.
    pub fn from_coded(
        family: Family,
        y: Vec<f64>,
        x: Vec<f64>,
        p: usize,
        ways: Vec<Vec<u32>>,
        level_counts: Vec<usize>,
    ) -> Result<Dataset> {
        let level_labels = level_counts
            .iter()
            .map(|&n| (1..=n).map(|l| l.to_string()).collect())
            .collect();
        let ds = Dataset {
            family,
            y,
            x,
            p,
            ways,
            level_counts,
            level_labels,
            rows_rejected: 0,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let n = self.y.len();
        if n == 0 {
            return Err(Error::Config("dataset has no observations".into()));
        }
        if self.ways.is_empty() {
            return Err(Error::Config("dataset needs at least one way".into()));
        }
        if self.x.len() != n * self.p {
            return Err(Error::Config(format!(
                "design matrix has {} entries, expected {}",
                self.x.len(),
                n * self.p
            )));
        }
        self.family.validate()?;
        for (i, &y) in self.y.iter().enumerate() {
            self.family
                .validate_response(y)
                .map_err(|e| Error::Domain(format!("row {}: {e}", i + 1)))?;
        }
        for v in &self.x {
            if !v.is_finite() {
                return Err(Error::Config("non-finite covariate value".into()));
            }
        }
        for (k, codes) in self.ways.iter().enumerate() {
            if codes.len() != n {
                return Err(Error::Config(format!("way {} length mismatch", k + 1)));
            }
            let n_k = self.level_counts[k];
            if n_k == 0 {
                return Err(Error::Config(format!("way {} has no levels", k + 1)));
            }
            let mut seen = vec![false; n_k];
            for &c in codes {
                let c = c as usize;
                if c >= n_k {
                    return Err(Error::Config(format!(
                        "way {} has out-of-range level code {c}",
                        k + 1
                    )));
                }
                seen[c] = true;
            }
            if let Some(missing) = seen.iter().position(|s| !s) {
                return Err(Error::Config(format!(
                    "way {} level {} never appears (phantom level)",
                    k + 1,
                    missing + 1
                )));
            }
            if self.level_labels[k].len() != n_k {
                return Err(Error::Config(format!("way {} label table mismatch", k + 1)));
            }
        }
        // No constant covariate column: the intercept lives in the effects.
        if n >= 2 {
            for j in 0..self.p {
                let first = self.x[j];
                if (1..n).all(|i| self.x[i * self.p + j] == first) {
                    return Err(Error::Config(format!(
                        "covariate column {} is constant; drop it (the intercept is recovered from the effects)",
                        j + 1
                    )));
                }
            }
        }
        Ok(())
    }

    /// Loads a CSV file (UTF-8, header row, RFC 4180 quoting). Rows with an
    /// empty value in any used column are rejected and counted; malformed
    /// non-empty cells are hard errors carrying the row/column location.
    pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema, family: Family) -> Result<Dataset> {
        schema.validate()?;
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path.as_ref())
            .map_err(|e| Error::Load {
                location: path.as_ref().display().to_string(),
                msg: e.to_string(),
            })?;
        let headers = reader
            .headers()
            .map_err(|e| Error::Load {
                location: "header".into(),
                msg: e.to_string(),
            })?
            .clone();
        let col = |name: &str| -> Result<usize> {
            headers.iter().position(|h| h == name).ok_or_else(|| Error::Load {
                location: "header".into(),
                msg: format!("missing column '{name}'"),
            })
        };
        let resp_col = col(&schema.response)?;
        let cov_cols: Vec<usize> = schema
            .covariates
            .iter()
            .map(|c| col(c))
            .collect::<Result<_>>()?;
        let way_cols: Vec<usize> = schema.ways.iter().map(|c| col(c)).collect::<Result<_>>()?;

        let p = cov_cols.len();
        let k_ways = way_cols.len();
        let mut y = Vec::new();
        let mut x = Vec::new();
        let mut way_labels: Vec<Vec<String>> = vec![Vec::new(); k_ways];
        let mut rejected = 0usize;

        for (row_idx, record) in reader.records().enumerate() {
            let row_no = row_idx + 2; // 1-based, after the header
            let record = record.map_err(|e| Error::Load {
                location: format!("row {row_no}"),
                msg: e.to_string(),
            })?;
            let field = |c: usize| record.get(c).unwrap_or("");
            // Missing-data policy: reject the row rather than impute.
            let used = std::iter::once(resp_col)
                .chain(cov_cols.iter().copied())
                .chain(way_cols.iter().copied());
            if used.clone().any(|c| field(c).trim().is_empty()) {
                rejected += 1;
                continue;
            }
            let resp_raw = field(resp_col).trim();
            let y_val = parse_response(&family, resp_raw).map_err(|msg| Error::Load {
                location: format!("row {row_no}, column '{}'", schema.response),
                msg,
            })?;
            y.push(y_val);
            for (j, &c) in cov_cols.iter().enumerate() {
                let v: f64 = field(c).trim().parse().map_err(|_| Error::Load {
                    location: format!("row {row_no}, column '{}'", schema.covariates[j]),
                    msg: format!("unparsable value '{}'", field(c)),
                })?;
                x.push(v);
            }
            for (k, &c) in way_cols.iter().enumerate() {
                way_labels[k].push(field(c).trim().to_string());
            }
        }
        if y.is_empty() {
            return Err(Error::Load {
                location: path.as_ref().display().to_string(),
                msg: if rejected > 0 {
                    format!("no usable rows ({rejected} rejected)")
                } else {
                    "empty file".into()
                },
            });
        }
        let mut ds = Dataset::from_parts(family, y, x, p, way_labels).map_err(|e| match e {
            Error::Config(msg) | Error::Domain(msg) => Error::Load {
                location: path.as_ref().display().to_string(),
                msg,
            },
            other => other,
        })?;
        ds.rows_rejected = rejected;
        Ok(ds)
    }

    /// Writes the dataset back to CSV (RFC 4180 quoting) with original
    /// labels; reloading the result reproduces codes, responses, and
    /// covariates bit-exactly.
    pub fn write_csv(&self, path: impl AsRef<Path>, schema: &CsvSchema) -> Result<()> {
        if schema.covariates.len() != self.p || schema.ways.len() != self.ways.len() {
            return Err(Error::Config("schema does not match dataset shape".into()));
        }
        let mut out = csv::Writer::from_path(path.as_ref()).map_err(|e| Error::Load {
            location: path.as_ref().display().to_string(),
            msg: e.to_string(),
        })?;
        let mut header = vec![schema.response.clone()];
        header.extend(schema.covariates.iter().cloned());
        header.extend(schema.ways.iter().cloned());
        let write_err = |e: csv::Error| Error::Load {
            location: path.as_ref().display().to_string(),
            msg: e.to_string(),
        };
        out.write_record(&header).map_err(write_err)?;
        let int_response = !matches!(self.family, Family::Gaussian);
        for i in 0..self.n_obs() {
            let mut fields = Vec::with_capacity(1 + self.p + self.ways.len());
            if int_response {
                fields.push(format!("{}", self.y[i] as i64));
            } else {
                fields.push(format!("{}", self.y[i]));
            }
            for j in 0..self.p {
                fields.push(format!("{}", self.x[i * self.p + j]));
            }
            for k in 0..self.ways.len() {
                fields.push(self.level_labels[k][self.ways[k][i] as usize].clone());
            }
            out.write_record(&fields).map_err(write_err)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Replaces the ordered-probit thresholds (e.g. after a null fit), keeping
    /// the data unchanged.
    pub fn with_thresholds(mut self, thresholds: Vec<f64>) -> Result<Dataset> {
        match &self.family {
            Family::OrderedProbit { thresholds: old } => {
                if thresholds.len() != old.len() {
                    return Err(Error::Config(format!(
                        "expected {} thresholds, got {}",
                        old.len(),
                        thresholds.len()
                    )));
                }
                self.family = Family::ordered_probit(thresholds)?;
                Ok(self)
            }
            _ => Err(Error::Config(
                "thresholds only apply to the ordered probit family".into(),
            )),
        }
    }

    pub fn family(&self) -> &Family {
        &self.family
    }

    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.p
    }

    pub fn n_ways(&self) -> usize {
        self.ways.len()
    }

    pub fn level_counts(&self) -> &[usize] {
        &self.level_counts
    }

    pub fn responses(&self) -> &[f64] {
        &self.y
    }

    #[inline]
    pub fn response(&self, i: usize) -> f64 {
        self.y[i]
    }

    #[inline]
    pub fn xrow(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    #[inline]
    pub fn way_code(&self, way: usize, i: usize) -> usize {
        self.ways[way][i] as usize
    }

    pub fn way_codes(&self, way: usize) -> &[u32] {
        &self.ways[way]
    }

    pub fn level_labels(&self, way: usize) -> &[String] {
        &self.level_labels[way]
    }

    /// 0-based level code for a label, if the label was seen at load time.
    pub fn level_code(&self, way: usize, label: &str) -> Option<usize> {
        self.level_labels[way].iter().position(|l| l == label)
    }

    /// Splits observations into two datasets by index predicate (used for
    /// hold-out evaluation). Each half is re-coded through the label path,
    /// so its level table covers exactly its own rows; held-out rows may
    /// then reference levels unseen in the other half, which is the
    /// unknown-level case prediction has to handle.
    pub fn split_by(&self, in_first: impl Fn(usize) -> bool) -> Result<(Dataset, Dataset)> {
        let take = |want: &dyn Fn(usize) -> bool| -> Result<Dataset> {
            let rows: Vec<usize> = (0..self.n_obs()).filter(|&i| want(i)).collect();
            let y = rows.iter().map(|&i| self.y[i]).collect();
            let x = rows
                .iter()
                .flat_map(|&i| self.xrow(i).iter().copied())
                .collect();
            let way_labels = (0..self.n_ways())
                .map(|k| {
                    rows.iter()
                        .map(|&i| self.level_labels[k][self.ways[k][i] as usize].clone())
                        .collect()
                })
                .collect();
            Dataset::from_parts(self.family.clone(), y, x, self.p, way_labels)
        };
        Ok((take(&|i| in_first(i))?, take(&|i| !in_first(i))?))
    }
}

fn parse_response(family: &Family, raw: &str) -> std::result::Result<f64, String> {
    match family {
        Family::Gaussian => raw
            .parse::<f64>()
            .map_err(|_| format!("unparsable real value '{raw}'")),
        Family::PoissonLog => {
            let v: u64 = raw
                .parse()
                .map_err(|_| format!("unparsable count '{raw}'"))?;
            if v > (1u64 << 53) {
                return Err(format!("count {v} overflows exact f64 range"));
            }
            Ok(v as f64)
        }
        Family::BernoulliLogit | Family::OrderedProbit { .. } => {
            let v: i64 = raw
                .parse()
                .map_err(|_| format!("unparsable integer '{raw}'"))?;
            Ok(v as f64)
        }
    }
}

/// For each way and level, the ascending list of member observation indices.
#[derive(Debug, Clone)]
pub struct LevelIndex {
    per_way: Vec<Vec<Vec<u32>>>,
}

impl LevelIndex {
    #[inline]
    pub fn members(&self, way: usize, level: usize) -> &[u32] {
        &self.per_way[way][level]
    }

    pub fn n_levels(&self, way: usize) -> usize {
        self.per_way[way].len()
    }
}

/// Builds the observation index backing per-group sums, so each block update
/// touches only its member observations.
pub fn build_level_index(ds: &Dataset) -> LevelIndex {
    let per_way = (0..ds.n_ways())
        .map(|k| {
            let mut levels: Vec<Vec<u32>> = vec![Vec::new(); ds.level_counts()[k]];
            for i in 0..ds.n_obs() {
                levels[ds.way_code(k, i)].push(i as u32);
            }
            levels
        })
        .collect();
    LevelIndex { per_way }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_csv(dir: &std::path::Path, body: &str) -> std::path::PathBuf {
        let path = dir.join("toy.csv");
        std::fs::write(&path, body).unwrap();
        path
    }

    fn schema() -> CsvSchema {
        CsvSchema {
            response: "y".into(),
            covariates: vec!["x1".into()],
            ways: vec!["u".into(), "m".into()],
        }
    }

    #[test]
    fn load_recodes_by_first_appearance() {
        let dir = tempdir();
        let path = toy_csv(
            &dir,
            "y,x1,u,m\n1.5,0.1,u1,m1\n2.5,0.4,u1,m2\n0.5,-0.2,u2,m1\n1.0,0.9,u2,m2\n",
        );
        let ds = Dataset::load_csv(&path, &schema(), Family::Gaussian).unwrap();
        assert_eq!(ds.n_obs(), 4);
        assert_eq!(ds.level_counts(), &[2, 2]);
        assert_eq!(ds.way_codes(0), &[0, 0, 1, 1]);
        assert_eq!(ds.way_codes(1), &[0, 1, 0, 1]);
        assert_eq!(ds.level_labels(0), &["u1".to_string(), "u2".to_string()]);
    }

    #[test]
    fn missing_response_column_is_named() {
        let dir = tempdir();
        let path = toy_csv(&dir, "x1,u,m\n0.1,u1,m1\n");
        let err = Dataset::load_csv(&path, &schema(), Family::Gaussian).unwrap_err();
        assert!(err.to_string().contains("missing column 'y'"), "{err}");
    }

    #[test]
    fn constant_covariate_rejected() {
        let dir = tempdir();
        let path = toy_csv(&dir, "y,x1,u,m\n1,1,u1,m1\n2,1,u2,m2\n3,1,u1,m2\n");
        let err = Dataset::load_csv(&path, &schema(), Family::Gaussian).unwrap_err();
        assert!(err.to_string().contains("constant"), "{err}");
    }

    #[test]
    fn empty_fields_reject_rows() {
        let dir = tempdir();
        let path = toy_csv(&dir, "y,x1,u,m\n1,0.1,u1,m1\n,0.2,u1,m2\n3,0.3,u2,m1\n");
        let ds = Dataset::load_csv(&path, &schema(), Family::Gaussian).unwrap();
        assert_eq!(ds.n_obs(), 2);
        assert_eq!(ds.rows_rejected, 1);
    }

    #[test]
    fn count_overflow_is_rejected() {
        let dir = tempdir();
        // 2^53 + 1 is not exactly representable as f64.
        let path = toy_csv(&dir, "y,x1,u,m\n1,0.1,u1,m1\n9007199254740993,0.2,u2,m2\n");
        let err = Dataset::load_csv(&path, &schema(), Family::PoissonLog).unwrap_err();
        assert!(err.to_string().contains("overflow"), "{err}");
        let path = toy_csv(&dir, "y,x1,u,m\n1,0.1,u1,m1\n3.5,0.2,u2,m2\n");
        let err = Dataset::load_csv(&path, &schema(), Family::PoissonLog).unwrap_err();
        assert!(err.to_string().contains("unparsable count"), "{err}");
    }

    #[test]
    fn unparsable_cell_carries_location() {
        let dir = tempdir();
        let path = toy_csv(&dir, "y,x1,u,m\n1,0.1,u1,m1\n2,zap,u2,m2\n");
        let err = Dataset::load_csv(&path, &schema(), Family::Gaussian).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 3") && msg.contains("x1"), "{msg}");
    }

    #[test]
    fn movielens_shaped_ordered_load() {
        let dir = tempdir();
        let mut body = String::from("rating,age,user,movie\n");
        for (r, u, m) in [(1, "a", "x"), (3, "a", "y"), (5, "b", "x"), (2, "b", "z")] {
            body.push_str(&format!("{r},{}.5,{u},{m}\n", r));
        }
        let path = dir.join("ml.csv");
        std::fs::write(&path, body).unwrap();
        let sch = CsvSchema {
            response: "rating".into(),
            covariates: vec!["age".into()],
            ways: vec!["user".into(), "movie".into()],
        };
        let ds = Dataset::load_csv(&path, &sch, Family::ordered_probit_default(5).unwrap()).unwrap();
        assert_eq!(ds.n_ways(), 2);
        assert_eq!(ds.level_counts(), &[2, 3]);
    }

    #[test]
    fn level_index_partitions() {
        let ds = Dataset::from_coded(
            Family::Gaussian,
            vec![1.0, 2.0, 3.0, 4.0],
            vec![0.0, 1.0, 2.0, 3.0],
            1,
            vec![vec![0, 0, 1, 1], vec![0, 1, 0, 1]],
            vec![2, 2],
        )
        .unwrap();
        let idx = build_level_index(&ds);
        assert_eq!(idx.members(0, 0), &[0, 1]);
        assert_eq!(idx.members(0, 1), &[2, 3]);
        let total: usize = (0..2).map(|l| idx.members(1, l).len()).sum();
        assert_eq!(total, 4);
    }

    #[test]
    fn singleton_dataset_three_ways() {
        let ds = Dataset::from_coded(
            Family::PoissonLog,
            vec![2.0],
            vec![],
            0,
            vec![vec![0], vec![0], vec![0]],
            vec![1, 1, 1],
        )
        .unwrap();
        let idx = build_level_index(&ds);
        for k in 0..3 {
            assert_eq!(idx.members(k, 0), &[0]);
        }
    }

    #[test]
    fn level_index_sizes_match_direct_tally() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let n = 1000;
        let n_levels = 37;
        let codes: Vec<u32> = (0..n).map(|_| rng.random_range(0..n_levels as u32)).collect();
        // Make every level appear.
        let mut codes = codes;
        for l in 0..n_levels {
            codes[l] = l as u32;
        }
        // Independent single-pass tally.
        let mut tally = vec![0usize; n_levels];
        for &c in &codes {
            tally[c as usize] += 1;
        }
        let ds = Dataset::from_coded(
            Family::BernoulliLogit,
            vec![1.0; n],
            (0..n).map(|i| i as f64).collect(),
            1,
            vec![codes],
            vec![n_levels],
        )
        .unwrap();
        let idx = build_level_index(&ds);
        for l in 0..n_levels {
            assert_eq!(idx.members(0, l).len(), tally[l]);
        }
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let dir = tempdir();
        // Labels with commas and quotes exercise the RFC 4180 quoting.
        let ds = Dataset::from_parts(
            Family::Gaussian,
            vec![1.25, -0.333333333333333314, 2.0, 4.0e-17],
            vec![0.1, std::f64::consts::PI, -7.25, 1e-300],
            1,
            vec![
                vec!["a,1".into(), "a,1".into(), "b\"2".into(), "b\"2".into()],
                vec!["m 1".into(), "m2".into(), "m2".into(), "m 1".into()],
            ],
        )
        .unwrap();
        let sch = schema();
        let path = dir.join("rt.csv");
        ds.write_csv(&path, &sch).unwrap();
        let back = Dataset::load_csv(&path, &sch, Family::Gaussian).unwrap();
        assert_eq!(back.responses(), ds.responses());
        assert_eq!(back.way_codes(0), ds.way_codes(0));
        assert_eq!(back.way_codes(1), ds.way_codes(1));
        assert_eq!(back.level_labels(0), ds.level_labels(0));
        for i in 0..ds.n_obs() {
            assert_eq!(back.xrow(i), ds.xrow(i));
        }
    }

    #[test]
    fn balanced_two_way_level_sizes() {
        // N = n*m with every (i, j) pair exactly once.
        let (n, m) = (3usize, 5usize);
        let mut ways = vec![Vec::new(), Vec::new()];
        for i in 0..n {
            for j in 0..m {
                ways[0].push(i as u32);
                ways[1].push(j as u32);
            }
        }
        let nm = n * m;
        let ds = Dataset::from_coded(
            Family::Gaussian,
            (0..nm).map(|v| v as f64).collect(),
            vec![],
            0,
            ways,
            vec![n, m],
        )
        .unwrap();
        let idx = build_level_index(&ds);
        for l in 0..n {
            assert_eq!(idx.members(0, l).len(), m);
        }
        for l in 0..m {
            assert_eq!(idx.members(1, l).len(), n);
        }
    }

    fn tempdir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!(
            "cge-data-test-{}-{}",
            std::process::id(),
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .unwrap()
                .as_nanos()
        ));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }
}
