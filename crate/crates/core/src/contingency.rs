//! Weighted vaccine-by-AE contingency tables, expected counts and naive
//! relative reporting rates.
//!
//! Cell counts are kept exactly as integer numerators over one common
//! denominator (the least common multiple of the vaccine counts seen on the
//! reports), so margins and totals are exact and AE-set reshuffling can be
//! checked for exact margin preservation.
//!
//! Margins count reports, not pairs: `y_i.` is the weighted number of reports
//! naming vaccine `i`, `y_.j` the number of reports naming AE `j`, and `y_..`
//! the number of reports. Then `M_ij = y_i. y_.j / y_..` is the expected cell
//! count when AE sets are independent of vaccine sets, and all three margins
//! depend only on the vaccine sets or only on the multiset of AE sets. When
//! every report names a single AE they coincide with the row, column and
//! grand sums of the cells.

use std::collections::HashMap;
use std::io::Write;

use thiserror::Error;

use crate::ingest::Report;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ContingencyError {
    #[error("no reports to tabulate")]
    NoReports,
    #[error("empty {0} universe")]
    EmptyUniverse(&'static str),
    #[error("table total is zero")]
    ZeroTotal,
    #[error("weight denominator overflow")]
    Overflow,
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Reports reduced to row/column indices against fixed universes. This is
/// the form the permutation engine works on: AE sets can be relinked to
/// other reports by index without touching strings.
#[derive(Debug, Clone)]
pub struct IndexedReports {
    vaccines: Vec<String>,
    aes: Vec<String>,
    denominator: u64,
    rows: Vec<Vec<usize>>,
    cols: Vec<Vec<usize>>,
    units: Vec<u64>,
}

impl IndexedReports {
    /// Indexes `reports` against the given universes. Vaccines and AEs outside
    /// the universes are ignored; the per-report weight still uses the full
    /// vaccine count of the report.
    pub fn new(
        reports: &[Report],
        ae_universe: &[String],
        vaccine_universe: &[String],
    ) -> Result<Self, ContingencyError> {
        if reports.is_empty() {
            return Err(ContingencyError::NoReports);
        }
        if ae_universe.is_empty() {
            return Err(ContingencyError::EmptyUniverse("AE"));
        }
        if vaccine_universe.is_empty() {
            return Err(ContingencyError::EmptyUniverse("vaccine"));
        }
        let row_of: HashMap<&str, usize> = vaccine_universe
            .iter()
            .enumerate()
            .map(|(i, v)| (v.as_str(), i))
            .collect();
        let col_of: HashMap<&str, usize> = ae_universe
            .iter()
            .enumerate()
            .map(|(j, a)| (a.as_str(), j))
            .collect();

        let mut denominator = 1u64;
        for r in reports {
            let n = r.vaccine_count() as u64;
            denominator = (denominator / gcd(denominator, n))
                .checked_mul(n)
                .ok_or(ContingencyError::Overflow)?;
        }

        let mut rows = Vec::with_capacity(reports.len());
        let mut cols = Vec::with_capacity(reports.len());
        let mut units = Vec::with_capacity(reports.len());
        for r in reports {
            rows.push(
                r.vaccines()
                    .iter()
                    .filter_map(|v| row_of.get(v.as_str()).copied())
                    .collect(),
            );
            cols.push(
                r.aes()
                    .iter()
                    .filter_map(|a| col_of.get(a.as_str()).copied())
                    .collect(),
            );
            units.push(denominator / r.vaccine_count() as u64);
        }
        Ok(Self {
            vaccines: vaccine_universe.to_vec(),
            aes: ae_universe.to_vec(),
            denominator,
            rows,
            cols,
            units,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn vaccines(&self) -> &[String] {
        &self.vaccines
    }

    pub fn aes(&self) -> &[String] {
        &self.aes
    }

    pub fn tabulate(&self) -> ContingencyTable {
        self.tabulate_with(|k| k)
    }

    /// Tabulates with the AE set of report `ae_source(k)` linked to the
    /// vaccines of report `k`. `ae_source` must be a permutation of
    /// `0..len()`.
    pub fn tabulate_with(&self, ae_source: impl Fn(usize) -> usize) -> ContingencyTable {
        let (n_rows, n_cols) = (self.vaccines.len(), self.aes.len());
        let mut numerators = vec![0u64; n_rows * n_cols];
        let mut row_margins = vec![0u64; n_rows];
        let mut col_margins = vec![0u64; n_cols];
        for (k, (rows, &unit)) in self.rows.iter().zip(&self.units).enumerate() {
            let cols = &self.cols[ae_source(k)];
            for &i in rows {
                row_margins[i] += unit;
                let base = i * n_cols;
                for &j in cols {
                    numerators[base + j] += unit;
                }
            }
            for &j in cols {
                col_margins[j] += self.denominator;
            }
        }
        ContingencyTable {
            vaccines: self.vaccines.clone(),
            aes: self.aes.clone(),
            numerators,
            denominator: self.denominator,
            row_margins,
            col_margins,
            total: self.denominator * self.rows.len() as u64,
        }
    }
}

/// Weighted I×J table with exact report-level margins.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContingencyTable {
    vaccines: Vec<String>,
    aes: Vec<String>,
    numerators: Vec<u64>,
    denominator: u64,
    row_margins: Vec<u64>,
    col_margins: Vec<u64>,
    total: u64,
}

impl ContingencyTable {
    /// Builds a table from row-major numerators over a common denominator,
    /// reading each unit as a report with one vaccine and one AE, so the
    /// margins are the row, column and grand sums.
    pub fn from_numerators(
        vaccines: Vec<String>,
        aes: Vec<String>,
        numerators: Vec<u64>,
        denominator: u64,
    ) -> Self {
        let n_cols = aes.len();
        assert_eq!(numerators.len(), vaccines.len() * n_cols);
        assert!(denominator > 0);
        let row_margins: Vec<u64> = numerators.chunks(n_cols.max(1)).map(|r| r.iter().sum()).collect();
        let mut col_margins = vec![0u64; n_cols];
        for row in numerators.chunks(n_cols.max(1)) {
            for (c, &v) in col_margins.iter_mut().zip(row) {
                *c += v;
            }
        }
        let total = row_margins.iter().sum();
        Self {
            vaccines,
            aes,
            numerators,
            denominator,
            row_margins,
            col_margins,
            total,
        }
    }

    /// Integer counts (denominator 1), mostly for fixtures.
    pub fn from_counts(vaccines: Vec<String>, aes: Vec<String>, counts: Vec<u64>) -> Self {
        Self::from_numerators(vaccines, aes, counts, 1)
    }

    pub fn vaccines(&self) -> &[String] {
        &self.vaccines
    }

    pub fn aes(&self) -> &[String] {
        &self.aes
    }

    pub fn n_rows(&self) -> usize {
        self.vaccines.len()
    }

    pub fn n_cols(&self) -> usize {
        self.aes.len()
    }

    pub fn denominator(&self) -> u64 {
        self.denominator
    }

    pub fn numerator(&self, i: usize, j: usize) -> u64 {
        self.numerators[i * self.aes.len() + j]
    }

    pub fn count(&self, i: usize, j: usize) -> f64 {
        self.numerator(i, j) as f64 / self.denominator as f64
    }

    /// Sum of all cells: the total pair weight.
    pub fn cell_total(&self) -> f64 {
        self.numerators.iter().sum::<u64>() as f64 / self.denominator as f64
    }

    /// Weighted number of reports naming vaccine `i`.
    pub fn row_margin(&self, i: usize) -> f64 {
        self.row_margins[i] as f64 / self.denominator as f64
    }

    /// Number of reports naming AE `j`.
    pub fn col_margin(&self, j: usize) -> f64 {
        self.col_margins[j] as f64 / self.denominator as f64
    }

    /// Number of reports.
    pub fn total(&self) -> f64 {
        self.total as f64 / self.denominator as f64
    }

    /// Exact margins as numerators over [`Self::denominator`].
    pub fn exact_margins(&self) -> (&[u64], &[u64], u64) {
        (&self.row_margins, &self.col_margins, self.total)
    }

    pub fn vaccine_index(&self, vaccine: &str) -> Option<usize> {
        self.vaccines.iter().position(|v| v == vaccine)
    }

    pub fn ae_index(&self, ae: &str) -> Option<usize> {
        self.aes.iter().position(|a| a == ae)
    }

    /// Wide CSV: first column vaccine id, one column per AE, six fractional
    /// digits.
    pub fn write_csv<W: Write>(&self, mut sink: W) -> std::io::Result<()> {
        let mut writer = csv::Writer::from_writer(&mut sink);
        let mut header = vec!["vaccine".to_string()];
        header.extend(self.aes.iter().cloned());
        writer.write_record(&header)?;
        for (i, v) in self.vaccines.iter().enumerate() {
            let mut row = vec![v.clone()];
            row.extend((0..self.n_cols()).map(|j| format!("{:.6}", self.count(i, j))));
            writer.write_record(&row)?;
        }
        writer.flush()?;
        Ok(())
    }
}

pub fn build_table(
    reports: &[Report],
    ae_universe: &[String],
    vaccine_universe: &[String],
) -> Result<ContingencyTable, ContingencyError> {
    Ok(IndexedReports::new(reports, ae_universe, vaccine_universe)?.tabulate())
}

/// Expected counts `M_ij = y_i. * y_.j / y_..` under independence.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedCounts {
    n_cols: usize,
    values: Vec<f64>,
}

impl ExpectedCounts {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n_cols + j]
    }

    pub fn n_rows(&self) -> usize {
        self.values.len().checked_div(self.n_cols).unwrap_or(0)
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

pub fn expected_counts(table: &ContingencyTable) -> Result<ExpectedCounts, ContingencyError> {
    let (rows, cols, total) = table.exact_margins();
    if total == 0 {
        return Err(ContingencyError::ZeroTotal);
    }
    let denom = table.denominator() as f64;
    let values = rows
        .iter()
        .flat_map(|&r| {
            cols.iter().map(move |&c| {
                // exact product in u128 before the single rounding step
                (u128::from(r) * u128::from(c)) as f64 / total as f64 / denom
            })
        })
        .collect();
    Ok(ExpectedCounts {
        n_cols: cols.len(),
        values,
    })
}

/// `y_ij / M_ij`; `None` where `M_ij = 0`.
pub fn naive_rr(table: &ContingencyTable, expected: &ExpectedCounts) -> Vec<Vec<Option<f64>>> {
    (0..table.n_rows())
        .map(|i| {
            (0..table.n_cols())
                .map(|j| {
                    let m = expected.get(i, j);
                    (m > 0.0).then(|| table.count(i, j) / m)
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(prefix: &str, n: usize) -> Vec<String> {
        (1..=n).map(|k| format!("{prefix}{k}")).collect()
    }

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn single_report() {
        let reports = vec![Report::new("r", ["V1"], ["a"]).unwrap()];
        let t = build_table(&reports, &s(&["a"]), &s(&["V1"])).unwrap();
        assert_eq!(t.count(0, 0), 1.0);
        assert_eq!(t.total(), 1.0);
    }

    #[test]
    fn multi_vaccine_report_splits_weight() {
        let reports = vec![Report::new("r", ["V1", "V2"], ["a"]).unwrap()];
        let t = build_table(&reports, &s(&["a"]), &s(&["V1", "V2"])).unwrap();
        assert_eq!(t.count(0, 0), 0.5);
        assert_eq!(t.count(1, 0), 0.5);
        assert_eq!(t.total(), 1.0);
    }

    #[test]
    fn hand_enumerated_pairs() {
        let reports = vec![
            Report::new("r1", ["V1"], ["a", "b"]).unwrap(),
            Report::new("r2", ["V2"], ["a"]).unwrap(),
        ];
        let t = build_table(&reports, &s(&["a", "b"]), &s(&["V1", "V2"])).unwrap();
        assert_eq!(
            [t.count(0, 0), t.count(0, 1), t.count(1, 0), t.count(1, 1)],
            [1.0, 1.0, 1.0, 0.0]
        );
        // one report names V1; two name a; two reports in all
        assert_eq!(t.row_margin(0), 1.0);
        assert_eq!(t.col_margin(0), 2.0);
        assert_eq!(t.total(), 2.0);
        assert_eq!(t.cell_total(), 3.0);
        let m = expected_counts(&t).unwrap();
        assert_eq!(m.get(0, 0), 1.0);
        assert_eq!(m.get(0, 1), 0.5);
        assert!((m.sum() - t.cell_total()).abs() < 1e-12);
    }

    #[test]
    fn single_term_reports_have_sum_margins() {
        let reports = vec![
            Report::new("r1", ["V1", "V2"], ["a"]).unwrap(),
            Report::new("r2", ["V2"], ["b"]).unwrap(),
            Report::new("r3", ["V1"], ["a"]).unwrap(),
        ];
        let t = build_table(&reports, &s(&["a", "b"]), &s(&["V1", "V2"])).unwrap();
        for i in 0..2 {
            let sum: f64 = (0..2).map(|j| t.count(i, j)).sum();
            assert!((t.row_margin(i) - sum).abs() < 1e-12);
        }
        for j in 0..2 {
            let sum: f64 = (0..2).map(|i| t.count(i, j)).sum();
            assert!((t.col_margin(j) - sum).abs() < 1e-12);
        }
        assert_eq!(t.total(), t.cell_total());
    }

    #[test]
    fn empty_reports_rejected() {
        assert_eq!(
            build_table(&[], &s(&["a"]), &s(&["V1"])).unwrap_err(),
            ContingencyError::NoReports
        );
    }

    #[test]
    fn mixed_denominators_stay_exact() {
        let reports = vec![
            Report::new("r1", ["V1", "V2", "V3"], ["a"]).unwrap(),
            Report::new("r2", ["V1", "V2"], ["a", "b"]).unwrap(),
        ];
        let t = build_table(&reports, &s(&["a", "b"]), &names("V", 3)).unwrap();
        assert_eq!(t.denominator(), 6);
        assert_eq!(t.numerator(0, 0), 2 + 3);
        assert!((t.count(0, 0) - 5.0 / 6.0).abs() < 1e-15);
        // 1 + 2 pair-weight units over 2 reports
        assert!((t.cell_total() - 3.0).abs() < 1e-12);
        assert_eq!(t.total(), 2.0);
        assert!((t.row_margin(0) - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn expected_uniform_and_diagonal() {
        let uni = ContingencyTable::from_counts(names("V", 2), names("a", 2), vec![10, 10, 10, 10]);
        let m = expected_counts(&uni).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(m.get(i, j), 10.0);
            }
        }
        let rr = naive_rr(&uni, &m);
        assert!(rr.iter().flatten().all(|x| *x == Some(1.0)));

        let diag = ContingencyTable::from_counts(names("V", 2), names("a", 2), vec![20, 0, 0, 20]);
        let m = expected_counts(&diag).unwrap();
        assert_eq!(m.get(0, 0), 10.0);
        let rr = naive_rr(&diag, &m);
        assert_eq!(rr[0][1], Some(0.0));
        assert_eq!(rr[0][0], Some(2.0));
    }

    #[test]
    fn zero_row_gives_zero_expected_and_missing_rr() {
        let t = ContingencyTable::from_counts(names("V", 2), names("a", 2), vec![0, 0, 3, 5]);
        let m = expected_counts(&t).unwrap();
        assert_eq!((m.get(0, 0), m.get(0, 1)), (0.0, 0.0));
        let rr = naive_rr(&t, &m);
        assert_eq!(rr[0], vec![None, None]);
        assert!((m.sum() - t.total()).abs() < 1e-12);
    }

    #[test]
    fn rr_reads_as_fold_excess() {
        // y_11 / M_11 with M_11 = 5 * 5 / 16 and y_11 = 4.
        let t = ContingencyTable::from_counts(names("V", 2), names("a", 2), vec![4, 1, 1, 10]);
        let m = expected_counts(&t).unwrap();
        let rr = naive_rr(&t, &m)[0][0].unwrap();
        assert!((rr - 4.0 / (25.0 / 16.0)).abs() < 1e-12);
    }

    #[test]
    fn zero_total_rejected() {
        let t = ContingencyTable::from_counts(names("V", 1), names("a", 1), vec![0]);
        assert_eq!(expected_counts(&t).unwrap_err(), ContingencyError::ZeroTotal);
    }

    #[test]
    fn csv_dump_has_six_decimals() {
        let reports = vec![Report::new("r", ["V1", "V2", "V3"], ["a"]).unwrap()];
        let t = build_table(&reports, &s(&["a"]), &names("V", 3)).unwrap();
        let mut out = Vec::new();
        t.write_csv(&mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "vaccine,a\nV1,0.333333\nV2,0.333333\nV3,0.333333\n"
        );
    }
}
