//! Report and ontology parsing, frequency filtering and per-pair weights.
//!
//! Reports are flat delimited text with a `report_id,vaccines,aes` header where
//! the list fields are themselves delimited (pipe by default). The ontology is
//! a `term,group` file mapping every AE term onto exactly one group.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: duplicate report id `{id}`")]
    DuplicateReport { line: usize, id: String },
    #[error("line {line}: term `{term}` mapped to both `{first}` and `{second}`")]
    ConflictingTerm {
        line: usize,
        term: String,
        first: String,
        second: String,
    },
    #[error("ontology is empty")]
    EmptyOntology,
    #[error("missing column `{0}` in header")]
    MissingColumn(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Field and list delimiters for the flat text formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextFormat {
    pub field_delimiter: u8,
    pub list_delimiter: char,
}

impl Default for TextFormat {
    fn default() -> Self {
        Self {
            field_delimiter: b',',
            list_delimiter: '|',
        }
    }
}

/// One spontaneous report.
///
/// Vaccine and AE identifiers are deduplicated and kept sorted. The per-pair
/// weight is `1 / |vaccines|` and is derived from the vaccine count on demand.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub report_id: String,
    vaccines: Vec<String>,
    aes: Vec<String>,
}

impl Report {
    pub fn new<V, A>(report_id: impl Into<String>, vaccines: V, aes: A) -> Result<Self, String>
    where
        V: IntoIterator,
        V::Item: Into<String>,
        A: IntoIterator,
        A::Item: Into<String>,
    {
        let vaccines = dedup_sorted(vaccines.into_iter().map(Into::into));
        let aes = dedup_sorted(aes.into_iter().map(Into::into));
        if vaccines.is_empty() {
            return Err("empty vaccine list".into());
        }
        if aes.is_empty() {
            return Err("empty AE list".into());
        }
        Ok(Self {
            report_id: report_id.into(),
            vaccines,
            aes,
        })
    }

    pub fn vaccines(&self) -> &[String] {
        &self.vaccines
    }

    pub fn aes(&self) -> &[String] {
        &self.aes
    }

    /// Number of distinct vaccines; the weight denominator.
    pub fn vaccine_count(&self) -> usize {
        self.vaccines.len()
    }

    pub fn weight(&self) -> f64 {
        1.0 / self.vaccines.len() as f64
    }

    /// Replaces the AE set. Used by filtering and by AE-set reshuffling.
    pub(crate) fn set_aes(&mut self, aes: Vec<String>) {
        self.aes = aes;
    }
}

fn dedup_sorted(items: impl Iterator<Item = String>) -> Vec<String> {
    items
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Single-level AE grouping: every term belongs to exactly one group.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ontology {
    term_to_group: BTreeMap<String, String>,
    groups: BTreeMap<String, Vec<String>>,
}

impl Ontology {
    /// Builds an ontology from `(term, group)` pairs. A term listed twice with
    /// the same group is accepted; with different groups it is an error.
    pub fn from_pairs<I, T, G>(pairs: I) -> Result<Self, IngestError>
    where
        I: IntoIterator<Item = (T, G)>,
        T: Into<String>,
        G: Into<String>,
    {
        let mut term_to_group = BTreeMap::new();
        for (idx, (term, group)) in pairs.into_iter().enumerate() {
            let (term, group) = (term.into(), group.into());
            insert_mapping(&mut term_to_group, term, group, idx + 1)?;
        }
        if term_to_group.is_empty() {
            return Err(IngestError::EmptyOntology);
        }
        Ok(Self::from_map(term_to_group))
    }

    fn from_map(term_to_group: BTreeMap<String, String>) -> Self {
        let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
        // BTreeMap iteration is sorted by term, so member lists come out sorted.
        for (term, group) in &term_to_group {
            groups.entry(group.clone()).or_default().push(term.clone());
        }
        Self {
            term_to_group,
            groups,
        }
    }

    pub fn group_of(&self, term: &str) -> Option<&str> {
        self.term_to_group.get(term).map(String::as_str)
    }

    pub fn contains(&self, term: &str) -> bool {
        self.term_to_group.contains_key(term)
    }

    /// Groups in sorted order with their sorted member terms.
    pub fn groups(&self) -> impl Iterator<Item = (&str, &[String])> {
        self.groups.iter().map(|(g, m)| (g.as_str(), m.as_slice()))
    }

    pub fn members(&self, group: &str) -> Option<&[String]> {
        self.groups.get(group).map(Vec::as_slice)
    }

    /// All terms, sorted.
    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.term_to_group.keys().map(String::as_str)
    }

    pub fn n_terms(&self) -> usize {
        self.term_to_group.len()
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.term_to_group.is_empty()
    }

    fn retain_terms(&self, keep: impl Fn(&str, &str) -> bool) -> Self {
        let map = self
            .term_to_group
            .iter()
            .filter(|(t, g)| keep(t, g))
            .map(|(t, g)| (t.clone(), g.clone()))
            .collect();
        Self::from_map(map)
    }
}

fn insert_mapping(
    map: &mut BTreeMap<String, String>,
    term: String,
    group: String,
    line: usize,
) -> Result<(), IngestError> {
    let term = term.trim().to_string();
    let group = group.trim().to_string();
    if term.is_empty() || group.is_empty() {
        return Err(IngestError::Malformed {
            line,
            reason: "empty term or group".into(),
        });
    }
    match map.get(&term) {
        Some(existing) if *existing != group => Err(IngestError::ConflictingTerm {
            line,
            term,
            first: existing.clone(),
            second: group,
        }),
        Some(_) => Ok(()),
        None => {
            map.insert(term, group);
            Ok(())
        }
    }
}

/// A predicate over an extra column of the reports file, applied before a
/// record becomes a [`Report`]. Typical use is age or date restriction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ColumnFilter {
    Equals { column: String, value: String },
    Range { column: String, min: f64, max: f64 },
}

impl ColumnFilter {
    /// Parses `col=value` or `col:min:max` (inclusive range).
    pub fn parse(text: &str) -> Result<Self, String> {
        if let Some((column, value)) = text.split_once('=') {
            return Ok(Self::Equals {
                column: column.trim().to_string(),
                value: value.trim().to_string(),
            });
        }
        let parts: Vec<&str> = text.split(':').collect();
        if parts.len() == 3 {
            let min = parts[1].trim().parse::<f64>().map_err(|e| e.to_string())?;
            let max = parts[2].trim().parse::<f64>().map_err(|e| e.to_string())?;
            return Ok(Self::Range {
                column: parts[0].trim().to_string(),
                min,
                max,
            });
        }
        Err(format!("unrecognized column filter `{text}`"))
    }

    fn column(&self) -> &str {
        match self {
            Self::Equals { column, .. } | Self::Range { column, .. } => column,
        }
    }

    fn accepts(&self, field: &str) -> bool {
        match self {
            Self::Equals { value, .. } => field.trim() == value,
            Self::Range { min, max, .. } => field
                .trim()
                .parse::<f64>()
                .map(|x| x >= *min && x <= *max)
                .unwrap_or(false),
        }
    }
}

impl std::fmt::Display for ColumnFilter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Equals { column, value } => write!(f, "{column}={value}"),
            Self::Range { column, min, max } => write!(f, "{column}:{min}:{max}"),
        }
    }
}

pub fn parse_reports<R: Read>(source: R) -> Result<Vec<Report>, IngestError> {
    parse_reports_with(source, TextFormat::default(), &[])
}

/// Parses a reports file. Records failing any column filter are skipped.
pub fn parse_reports_with<R: Read>(
    source: R,
    format: TextFormat,
    filters: &[ColumnFilter],
) -> Result<Vec<Report>, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(format.field_delimiter)
        .trim(csv::Trim::All)
        .flexible(false)
        .from_reader(source);
    let headers = reader.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| IngestError::MissingColumn(name.to_string()))
    };
    let (id_col, vax_col, ae_col) = (column("report_id")?, column("vaccines")?, column("aes")?);
    let filter_cols = filters
        .iter()
        .map(|f| column(f.column()))
        .collect::<Result<Vec<_>, _>>()?;

    let mut seen = HashSet::new();
    let mut reports = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            IngestError::Malformed {
                line,
                reason: e.to_string(),
            }
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let keep = filters
            .iter()
            .zip(&filter_cols)
            .all(|(f, &c)| f.accepts(record.get(c).unwrap_or("")));
        if !keep {
            continue;
        }
        let id = record.get(id_col).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(IngestError::Malformed {
                line,
                reason: "empty report id".into(),
            });
        }
        let split = |s: &str| {
            s.split(format.list_delimiter)
                .map(str::to_string)
                .collect::<Vec<_>>()
        };
        let report = Report::new(
            id.clone(),
            split(record.get(vax_col).unwrap_or("")),
            split(record.get(ae_col).unwrap_or("")),
        )
        .map_err(|reason| IngestError::Malformed { line, reason })?;
        if !seen.insert(id.clone()) {
            return Err(IngestError::DuplicateReport { line, id });
        }
        reports.push(report);
    }
    Ok(reports)
}

pub fn write_reports<W: Write>(
    sink: W,
    reports: &[Report],
    format: TextFormat,
) -> Result<(), IngestError> {
    let mut writer = csv::WriterBuilder::new()
        .delimiter(format.field_delimiter)
        .from_writer(sink);
    writer.write_record(["report_id", "vaccines", "aes"])?;
    let sep = format.list_delimiter.to_string();
    for r in reports {
        writer.write_record([
            r.report_id.as_str(),
            &r.vaccines.join(&sep),
            &r.aes.join(&sep),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

pub fn parse_ontology<R: Read>(source: R) -> Result<Ontology, IngestError> {
    parse_ontology_with(source, TextFormat::default())
}

pub fn parse_ontology_with<R: Read>(source: R, format: TextFormat) -> Result<Ontology, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(format.field_delimiter)
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers = reader.headers()?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| IngestError::MissingColumn(name.to_string()))
    };
    let (term_col, group_col) = (column("term")?, column("group")?);
    let mut map = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| IngestError::Malformed {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            reason: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        insert_mapping(
            &mut map,
            record.get(term_col).unwrap_or("").to_string(),
            record.get(group_col).unwrap_or("").to_string(),
            line,
        )?;
    }
    if map.is_empty() {
        return Err(IngestError::EmptyOntology);
    }
    Ok(Ontology::from_map(map))
}

pub fn write_ontology<W: Write>(sink: W, ontology: &Ontology) -> Result<(), IngestError> {
    let mut writer = csv::Writer::from_writer(sink);
    writer.write_record(["term", "group"])?;
    for (term, group) in &ontology.term_to_group {
        writer.write_record([term, group])?;
    }
    writer.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterPolicy {
    pub min_ae_frequency: usize,
    pub min_group_size: usize,
    pub vaccine_whitelist: Option<BTreeSet<String>>,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        Self {
            min_ae_frequency: 20,
            min_group_size: 15,
            vaccine_whitelist: None,
        }
    }
}

impl FilterPolicy {
    pub fn thresholds(min_ae_frequency: usize, min_group_size: usize) -> Self {
        Self {
            min_ae_frequency,
            min_group_size,
            vaccine_whitelist: None,
        }
    }
}

/// What the filters removed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterSummary {
    /// Distinct AE terms that appear on reports but not in the ontology.
    pub unmapped_terms: usize,
    /// Total report mentions of unmapped terms.
    pub unmapped_mentions: usize,
    pub rare_terms_removed: usize,
    pub groups_removed: usize,
    pub reports_dropped: usize,
}

#[derive(Debug, Clone)]
pub struct Filtered {
    pub reports: Vec<Report>,
    pub ontology: Ontology,
    pub summary: FilterSummary,
}

/// Applies, in order and exactly once: the vaccine whitelist, removal of
/// unmapped terms, the AE frequency filter, and the group-size filter. Reports
/// left with no AE (or no whitelisted vaccine) are dropped.
///
/// Report weights keep the original vaccine count: a whitelist narrows the
/// tabulated rows, not the number of vaccines the report mentioned.
pub fn apply_filters(reports: &[Report], ontology: &Ontology, policy: &FilterPolicy) -> Filtered {
    let mut summary = FilterSummary::default();
    let in_whitelist = |v: &str| {
        policy
            .vaccine_whitelist
            .as_ref()
            .is_none_or(|w| w.contains(v))
    };
    let mut kept: Vec<Report> = reports
        .iter()
        .filter(|r| r.vaccines().iter().any(|v| in_whitelist(v)))
        .cloned()
        .collect();

    let mut unmapped = BTreeSet::new();
    for r in &kept {
        for ae in r.aes() {
            if !ontology.contains(ae) {
                unmapped.insert(ae.clone());
                summary.unmapped_mentions += 1;
            }
        }
    }
    summary.unmapped_terms = unmapped.len();

    let mut frequency: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &kept {
        for ae in r.aes() {
            if ontology.contains(ae) {
                *frequency.entry(ae.as_str()).or_default() += 1;
            }
        }
    }
    let frequent = |t: &str| frequency.get(t).copied().unwrap_or(0) >= policy.min_ae_frequency;
    let after_freq = ontology.retain_terms(|t, _| frequent(t));
    summary.rare_terms_removed = ontology.n_terms() - after_freq.n_terms();

    let big_groups: BTreeSet<&str> = after_freq
        .groups()
        .filter(|(_, m)| m.len() >= policy.min_group_size)
        .map(|(g, _)| g)
        .collect();
    let filtered_ontology = after_freq.retain_terms(|_, g| big_groups.contains(g));
    summary.groups_removed = ontology.n_groups() - filtered_ontology.n_groups();

    let before = reports.len();
    for r in &mut kept {
        let aes: Vec<String> = r
            .aes()
            .iter()
            .filter(|a| filtered_ontology.contains(a))
            .cloned()
            .collect();
        r.set_aes(aes);
    }
    kept.retain(|r| !r.aes().is_empty());
    summary.reports_dropped = before - kept.len();

    Filtered {
        reports: kept,
        ontology: filtered_ontology,
        summary,
    }
}

/// Vaccines that appear on at least one report, sorted; restricted to the
/// whitelist when one is given.
pub fn vaccine_universe(reports: &[Report], whitelist: Option<&BTreeSet<String>>) -> Vec<String> {
    reports
        .iter()
        .flat_map(|r| r.vaccines().iter())
        .filter(|v| whitelist.is_none_or(|w| w.contains(*v)))
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reports(text: &str) -> Result<Vec<Report>, IngestError> {
        parse_reports(text.as_bytes())
    }

    #[test]
    fn single_vaccine_weight_is_one() {
        let r = reports("report_id,vaccines,aes\nr1,FLU,Fever\n").unwrap();
        assert_eq!(r[0].vaccines(), ["FLU"]);
        assert_eq!(r[0].aes(), ["Fever"]);
        assert_eq!(r[0].weight(), 1.0);
    }

    #[test]
    fn two_vaccines_weight_half() {
        let r = reports("report_id,vaccines,aes\nr2,FLU|MMR,Fever|Rash\n").unwrap();
        assert_eq!(r[0].weight(), 0.5);
        assert_eq!(r[0].weight() * r[0].vaccine_count() as f64, 1.0);
    }

    #[test]
    fn empty_vaccine_list_rejected_with_line() {
        let err = reports("report_id,vaccines,aes\nr1,FLU,Fever\nr3,,Fever\n").unwrap_err();
        match err {
            IngestError::Malformed { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn semicolon_format() {
        let fmt = TextFormat {
            field_delimiter: b';',
            list_delimiter: '|',
        };
        let r = parse_reports_with(
            "report_id;vaccines;aes\nr1; FLU; Fever\n".as_bytes(),
            fmt,
            &[],
        )
        .unwrap();
        assert_eq!(r[0].vaccines(), ["FLU"]);
    }

    #[test]
    fn duplicates_collapse_and_duplicate_ids_fail() {
        let r = reports("report_id,vaccines,aes\nr1,FLU|FLU|MMR,Fever|Fever\n").unwrap();
        assert_eq!(r[0].vaccine_count(), 2);
        assert_eq!(r[0].aes().len(), 1);
        let err = reports("report_id,vaccines,aes\nr1,FLU,Fever\nr1,MMR,Rash\n").unwrap_err();
        assert!(matches!(err, IngestError::DuplicateReport { line: 3, .. }));
    }

    #[test]
    fn column_filters_skip_records() {
        let text = "report_id,vaccines,aes,age\nr1,FLU,Fever,1\nr2,FLU,Rash,30\nr3,MMR,Rash,60\n";
        let filters = [ColumnFilter::parse("age:2:49").unwrap()];
        let r = parse_reports_with(text.as_bytes(), TextFormat::default(), &filters).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].report_id, "r2");
        let eq = [ColumnFilter::parse("age=60").unwrap()];
        let r = parse_reports_with(text.as_bytes(), TextFormat::default(), &eq).unwrap();
        assert_eq!(r[0].report_id, "r3");
    }

    #[test]
    fn ontology_partition() {
        let o = parse_ontology("term,group\nFever,General\nRash,Skin\n".as_bytes()).unwrap();
        assert_eq!(o.n_groups(), 2);
        assert!(o.groups().all(|(_, m)| m.len() == 1));
        let err = parse_ontology("term,group\nFever,General\nFever,Skin\n".as_bytes()).unwrap_err();
        assert!(matches!(err, IngestError::ConflictingTerm { line: 3, .. }));
        assert!(matches!(
            parse_ontology("term,group\n".as_bytes()),
            Err(IngestError::EmptyOntology)
        ));
    }

    #[test]
    fn large_ontology_round_trips() {
        let pairs: Vec<(String, String)> = (0..1477)
            .map(|t| (format!("term{t:04}"), format!("group{:02}", t % 42)))
            .collect();
        let o = Ontology::from_pairs(pairs).unwrap();
        assert_eq!((o.n_terms(), o.n_groups()), (1477, 42));
        let mut buf = Vec::new();
        write_ontology(&mut buf, &o).unwrap();
        assert_eq!(parse_ontology(buf.as_slice()).unwrap(), o);
    }

    fn fixture(freq_a: usize, group_size: usize) -> (Vec<Report>, Ontology) {
        // Group G has `group_size` terms each seen 25 times, plus term `a`
        // seen `freq_a` times in group H.
        let mut pairs = vec![("a".to_string(), "H".to_string())];
        let mut reports = Vec::new();
        for t in 0..group_size {
            pairs.push((format!("g{t}"), "G".into()));
            for k in 0..25 {
                reports.push(Report::new(format!("g{t}-{k}"), ["V1"], [format!("g{t}")]).unwrap());
            }
        }
        for k in 0..freq_a {
            reports.push(Report::new(format!("a-{k}"), ["V2"], ["a", "g0"]).unwrap());
        }
        (reports, Ontology::from_pairs(pairs).unwrap())
    }

    #[test]
    fn zero_policy_is_identity() {
        let (reports, ontology) = fixture(3, 4);
        let out = apply_filters(&reports, &ontology, &FilterPolicy::thresholds(0, 0));
        assert_eq!(out.reports, reports);
        assert_eq!(out.ontology, ontology);
    }

    #[test]
    fn rare_term_removed_everywhere() {
        let (reports, ontology) = fixture(19, 4);
        let out = apply_filters(&reports, &ontology, &FilterPolicy::thresholds(20, 0));
        assert!(!out.ontology.contains("a"));
        assert!(out.reports.iter().all(|r| !r.aes().contains(&"a".to_string())));
        // reports that mentioned `a` still carry g0
        assert_eq!(out.reports.len(), reports.len());
        let kept = apply_filters(&reports, &ontology, &FilterPolicy::thresholds(19, 0));
        assert!(kept.ontology.contains("a"));
    }

    #[test]
    fn small_group_removed() {
        let (reports, ontology) = fixture(30, 14);
        let out = apply_filters(&reports, &ontology, &FilterPolicy::thresholds(20, 15));
        assert!(out.ontology.is_empty());
        assert!(out.reports.is_empty());
        assert_eq!(out.summary.groups_removed, 2);
    }

    #[test]
    fn unmapped_terms_tallied_and_removed() {
        let ontology = Ontology::from_pairs([("Fever", "General")]).unwrap();
        let reports = vec![
            Report::new("r1", ["V1"], ["Fever", "Mystery"]).unwrap(),
            Report::new("r2", ["V1"], ["Mystery"]).unwrap(),
        ];
        let out = apply_filters(&reports, &ontology, &FilterPolicy::thresholds(0, 0));
        assert_eq!(out.summary.unmapped_terms, 1);
        assert_eq!(out.summary.unmapped_mentions, 2);
        assert_eq!(out.reports.len(), 1);
    }

    #[test]
    fn whitelist_keeps_original_weight() {
        let ontology = Ontology::from_pairs([("Fever", "General")]).unwrap();
        let reports = vec![
            Report::new("r1", ["FLU", "MMR"], ["Fever"]).unwrap(),
            Report::new("r2", ["MMR"], ["Fever"]).unwrap(),
        ];
        let policy = FilterPolicy {
            vaccine_whitelist: Some(["FLU".to_string()].into()),
            ..FilterPolicy::thresholds(0, 0)
        };
        let out = apply_filters(&reports, &ontology, &policy);
        assert_eq!(out.reports.len(), 1);
        assert_eq!(out.reports[0].weight(), 0.5);
        assert_eq!(
            vaccine_universe(&out.reports, policy.vaccine_whitelist.as_ref()),
            ["FLU"]
        );
    }
}
