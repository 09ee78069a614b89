//! Permutation significance with max statistics.
//!
//! The null relinks whole AE sets to reports, keeping each report's vaccine
//! set (and therefore its weight). Every row margin, column margin and the
//! total of the table are unchanged, so expected counts are computed once.
//! Each permuted dataset contributes the maximum of `s` over all vaccine-group
//! pairs (or of `λ̂` over all vaccine-AE cells); every observed statistic is
//! scored against that maximum null.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contingency::ContingencyError;
use crate::ingest::{vaccine_universe, Ontology, Report};
use crate::pipeline::{Analysis, FittedGroup};
use crate::zinb::FitConfig;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("reshuffling needs at least two reports, got {0}")]
    TooFewReports(usize),
    #[error("permutation count must be positive")]
    NoPermutations,
    #[error(transparent)]
    Table(#[from] ContingencyError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    GroupMaxS,
    AeMaxLambda,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermutationPlan {
    pub n_permutations: usize,
    pub seed: u64,
    pub statistic: Statistic,
}

impl Default for PermutationPlan {
    fn default() -> Self {
        Self {
            n_permutations: 1000,
            seed: 0,
            statistic: Statistic::GroupMaxS,
        }
    }
}

/// Sorted permutation maxima plus the observed maximum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullDistribution {
    pub statistic: Statistic,
    values: Vec<f64>,
    pub observed: f64,
    /// Group fits inside permutations that stopped short of the gradient
    /// tolerance. Their clamped estimates are still used.
    pub nonconverged_fits: usize,
}

impl NullDistribution {
    pub fn new(statistic: Statistic, mut values: Vec<f64>, observed: f64, nonconverged_fits: usize) -> Self {
        values.sort_by(f64::total_cmp);
        Self {
            statistic,
            values,
            observed,
            nonconverged_fits,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `(1 + #{null >= t}) / (N + 1)`; ties count against `t`.
    pub fn p_value(&self, t: f64) -> f64 {
        let below = self.values.partition_point(|&v| v < t);
        let at_or_above = self.values.len() - below;
        (1 + at_or_above) as f64 / (self.values.len() + 1) as f64
    }

    /// One value per line.
    pub fn write_values<W: Write>(&self, mut sink: W) -> std::io::Result<()> {
        for v in &self.values {
            writeln!(sink, "{v}")?;
        }
        Ok(())
    }
}

/// Relinks AE sets uniformly at random across reports; vaccine sets stay put.
pub fn reshuffle_ae_sets<R: Rng + ?Sized>(
    reports: &[Report],
    rng: &mut R,
) -> Result<Vec<Report>, SignalError> {
    if reports.len() < 2 {
        return Err(SignalError::TooFewReports(reports.len()));
    }
    let mut order: Vec<usize> = (0..reports.len()).collect();
    order.shuffle(rng);
    Ok(reports
        .iter()
        .zip(&order)
        .map(|(r, &src)| {
            let mut out = r.clone();
            out.set_aes(reports[src].aes().to_vec());
            out
        })
        .collect())
}

/// Builds the max-statistic null for `plan.statistic` from the ontology's
/// groups over the vaccines present on `reports`.
pub fn null_distribution(
    reports: &[Report],
    ontology: &Ontology,
    plan: &PermutationPlan,
    fit_config: &FitConfig,
) -> Result<NullDistribution, SignalError> {
    if plan.n_permutations == 0 {
        return Err(SignalError::NoPermutations);
    }
    if reports.len() < 2 {
        return Err(SignalError::TooFewReports(reports.len()));
    }
    let vaccines = vaccine_universe(reports, None);
    let analysis = Analysis::new(reports, ontology, &vaccines)?;
    let fits = analysis.fit_observed(fit_config);
    let observed = match plan.statistic {
        Statistic::GroupMaxS => analysis
            .group_signals(&fits)
            .iter()
            .map(|g| g.s)
            .fold(f64::NEG_INFINITY, f64::max),
        Statistic::AeMaxLambda => analysis
            .ae_posteriors(&fits)
            .iter()
            .map(|(_, a)| a.lambda_hat)
            .fold(f64::NEG_INFINITY, f64::max),
    };
    let maxima = analysis.permutation_maxima(plan.n_permutations, plan.seed, fit_config);
    let nonconverged = maxima.iter().map(|m| m.nonconverged).sum();
    let values = maxima
        .iter()
        .map(|m| match plan.statistic {
            Statistic::GroupMaxS => m.max_s,
            Statistic::AeMaxLambda => m.max_lambda,
        })
        .collect();
    Ok(NullDistribution::new(plan.statistic, values, observed, nonconverged))
}

pub fn assign_pvalues(observed: &[f64], null: &NullDistribution) -> Vec<f64> {
    observed.iter().map(|&t| null.p_value(t)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub vaccine: String,
    pub group: String,
    pub s: f64,
    pub p_value: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeRow {
    pub vaccine: String,
    pub ae: String,
    pub group: String,
    pub y: f64,
    pub m: f64,
    pub lambda_hat: f64,
    pub p_value: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalTable {
    pub group_rows: Vec<GroupRow>,
    pub ae_rows: Vec<AeRow>,
    pub alpha: f64,
    pub s_min: f64,
}

pub const DEFAULT_ALPHA: f64 = 0.01;
pub const DEFAULT_S_MIN: f64 = 3.0;

pub fn is_group_signal(s: f64, p_value: f64, alpha: f64, s_min: f64) -> bool {
    p_value <= alpha && s >= s_min
}

/// Marks group rows with `p <= alpha` and `s >= s_min`, and AE rows with
/// `p <= alpha`.
pub fn flag_signals(table: &SignalTable, alpha: f64, s_min: f64) -> SignalTable {
    let mut out = table.clone();
    out.alpha = alpha;
    out.s_min = s_min;
    for row in &mut out.group_rows {
        row.flagged = is_group_signal(row.s, row.p_value, alpha, s_min);
    }
    for row in &mut out.ae_rows {
        row.flagged = row.p_value <= alpha;
    }
    out
}

impl SignalTable {
    pub fn flagged_groups(&self) -> impl Iterator<Item = &GroupRow> {
        self.group_rows.iter().filter(|r| r.flagged)
    }

    pub fn flagged_aes(&self) -> impl Iterator<Item = &AeRow> {
        self.ae_rows.iter().filter(|r| r.flagged)
    }

    /// `vaccine,group,s,p_value,flagged`
    pub fn write_group_csv<W: Write>(&self, sink: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["vaccine", "group", "s", "p_value", "flagged"])?;
        for r in &self.group_rows {
            w.write_record([
                r.vaccine.clone(),
                r.group.clone(),
                fmt_sig(r.s),
                fmt_sig(r.p_value),
                r.flagged.to_string(),
            ])?;
        }
        w.flush()
    }

    /// `vaccine,ae,group,y,M,lambda_hat,p_value,flagged`
    pub fn write_ae_csv<W: Write>(&self, sink: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["vaccine", "ae", "group", "y", "M", "lambda_hat", "p_value", "flagged"])?;
        for r in &self.ae_rows {
            w.write_record([
                r.vaccine.clone(),
                r.ae.clone(),
                r.group.clone(),
                fmt_sig(r.y),
                fmt_sig(r.m),
                fmt_sig(r.lambda_hat),
                fmt_sig(r.p_value),
                r.flagged.to_string(),
            ])?;
        }
        w.flush()
    }
}

/// Six significant digits, plain notation where reasonable.
pub fn fmt_sig(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let mag = x.abs().log10().floor() as i32;
    if (-5..15).contains(&mag) {
        let decimals = (5 - mag).max(0) as usize;
        let s = format!("{x:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{x:.5e}")
    }
}

/// Fit diagnostics collected over a mining run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MineDiagnostics {
    pub groups_fitted: usize,
    pub observed_nonconverged: usize,
    pub boundary_estimates: usize,
    pub all_zero_vaccines: usize,
    pub dispersion_at_bound: usize,
    pub permutation_nonconverged: usize,
}

#[derive(Debug, Clone)]
pub struct MineOutput {
    pub analysis: Analysis,
    pub fits: Vec<FittedGroup>,
    pub signals: SignalTable,
    pub group_null: NullDistribution,
    pub ae_null: NullDistribution,
    pub diagnostics: MineDiagnostics,
}

/// Full run on filtered data: fit every group once, score group and AE
/// statistics against max nulls drawn from one shared set of permutation
/// fits, then flag.
pub fn mine(
    reports: &[Report],
    ontology: &Ontology,
    plan: &PermutationPlan,
    fit_config: &FitConfig,
    alpha: f64,
    s_min: f64,
) -> Result<MineOutput, SignalError> {
    if plan.n_permutations == 0 {
        return Err(SignalError::NoPermutations);
    }
    if reports.len() < 2 {
        return Err(SignalError::TooFewReports(reports.len()));
    }
    let vaccines = vaccine_universe(reports, None);
    let analysis = Analysis::new(reports, ontology, &vaccines)?;
    let fits = analysis.fit_observed(fit_config);
    let group_signals = analysis.group_signals(&fits);
    let posteriors = analysis.ae_posteriors(&fits);

    let maxima = analysis.permutation_maxima(plan.n_permutations, plan.seed, fit_config);
    let permutation_nonconverged = maxima.iter().map(|m| m.nonconverged).sum();
    let max_of = |it: &mut dyn Iterator<Item = f64>| it.fold(f64::NEG_INFINITY, f64::max);
    let group_null = NullDistribution::new(
        Statistic::GroupMaxS,
        maxima.iter().map(|m| m.max_s).collect(),
        max_of(&mut group_signals.iter().map(|g| g.s)),
        permutation_nonconverged,
    );
    let ae_null = NullDistribution::new(
        Statistic::AeMaxLambda,
        maxima.iter().map(|m| m.max_lambda).collect(),
        max_of(&mut posteriors.iter().map(|(_, a)| a.lambda_hat)),
        permutation_nonconverged,
    );

    let group_rows = group_signals
        .into_iter()
        .map(|g| GroupRow {
            p_value: group_null.p_value(g.s),
            vaccine: g.vaccine,
            group: g.group,
            s: g.s,
            flagged: false,
        })
        .collect();
    let ae_rows = posteriors
        .into_iter()
        .map(|(group, a)| AeRow {
            p_value: ae_null.p_value(a.lambda_hat),
            vaccine: a.vaccine,
            ae: a.ae,
            group,
            y: a.y,
            m: a.m,
            lambda_hat: a.lambda_hat,
            flagged: false,
        })
        .collect();
    let signals = flag_signals(
        &SignalTable {
            group_rows,
            ae_rows,
            alpha,
            s_min,
        },
        alpha,
        s_min,
    );

    let mut diagnostics = MineDiagnostics {
        groups_fitted: fits.len(),
        permutation_nonconverged,
        ..Default::default()
    };
    for f in &fits {
        diagnostics.observed_nonconverged += usize::from(!f.fit.converged);
        diagnostics.dispersion_at_bound += usize::from(f.fit.r_at_bound);
        for v in &f.fit.vaccines {
            diagnostics.boundary_estimates += usize::from(v.flags.any());
            diagnostics.all_zero_vaccines += usize::from(v.flags.all_zero);
        }
    }
    Ok(MineOutput {
        analysis,
        fits,
        signals,
        group_null,
        ae_null,
        diagnostics,
    })
}

/// Vaccines × groups matrix of `s`; cells without a fit are left empty.
pub fn write_heatmap<W: Write>(
    sink: W,
    vaccines: &[String],
    groups: &[String],
    rows: &[GroupRow],
) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let mut header = vec!["vaccine".to_string()];
    header.extend(groups.iter().cloned());
    w.write_record(&header)?;
    for v in vaccines {
        let mut record = vec![v.clone()];
        for g in groups {
            let cell = rows
                .iter()
                .find(|r| &r.vaccine == v && &r.group == g)
                .map(|r| fmt_sig(r.s))
                .unwrap_or_default();
            record.push(cell);
        }
        w.write_record(&record)?;
    }
    w.flush()
}
