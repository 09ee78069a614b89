//! Composition of the stages: table, expected counts, per-group fits,
//! shrinkage and the permutation nulls.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contingency::{expected_counts, ContingencyError, ContingencyTable, ExpectedCounts, IndexedReports};
use crate::ingest::{Ontology, Report};
use crate::shrink::{group_rr, posterior_lambda_mean, AePosterior, GroupSignal};
use crate::zinb::{fit_group, FitConfig, GroupFit, TableGroup};

/// Observed data prepared for fitting and permutation.
#[derive(Debug, Clone)]
pub struct Analysis {
    indexed: IndexedReports,
    table: ContingencyTable,
    expected: ExpectedCounts,
    groups: Vec<(String, TableGroup)>,
}

/// A fitted AE group.
#[derive(Debug, Clone)]
pub struct FittedGroup {
    pub name: String,
    pub fit: GroupFit,
}

/// Maxima of one (observed or permuted) dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Maxima {
    pub max_s: f64,
    pub max_lambda: f64,
    pub nonconverged: usize,
}

/// Seeded generator for permutation `index`. Each index owns a ChaCha
/// stream, so a replicate does not depend on which thread runs it or in
/// what order.
pub fn permutation_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

impl Analysis {
    /// Columns are the ontology terms (sorted); rows the given vaccines.
    pub fn new(
        reports: &[Report],
        ontology: &Ontology,
        vaccines: &[String],
    ) -> Result<Self, ContingencyError> {
        let aes: Vec<String> = ontology.terms().map(str::to_string).collect();
        let indexed = IndexedReports::new(reports, &aes, vaccines)?;
        let table = indexed.tabulate();
        let expected = expected_counts(&table)?;
        let groups = ontology
            .groups()
            .filter_map(|(name, members)| {
                let cols: Vec<usize> = members.iter().filter_map(|t| table.ae_index(t)).collect();
                TableGroup::from_table(&table, &expected, &cols).map(|g| (name.to_string(), g))
            })
            .collect();
        Ok(Self {
            indexed,
            table,
            expected,
            groups,
        })
    }

    pub fn table(&self) -> &ContingencyTable {
        &self.table
    }

    pub fn expected(&self) -> &ExpectedCounts {
        &self.expected
    }

    pub fn groups(&self) -> &[(String, TableGroup)] {
        &self.groups
    }

    pub fn n_reports(&self) -> usize {
        self.indexed.len()
    }

    pub fn fit_observed(&self, config: &FitConfig) -> Vec<FittedGroup> {
        self.groups
            .iter()
            .map(|(name, g)| FittedGroup {
                name: name.clone(),
                fit: fit_group(&g.design, config),
            })
            .collect()
    }

    pub fn group_signals(&self, fits: &[FittedGroup]) -> Vec<GroupSignal> {
        let mut out = Vec::new();
        for ((name, g), f) in self.groups.iter().zip(fits) {
            for (v, &row) in g.rows.iter().enumerate() {
                out.push(GroupSignal {
                    vaccine: self.table.vaccines()[row].clone(),
                    group: name.clone(),
                    s: group_rr(&f.fit.params(v)),
                });
            }
        }
        out
    }

    /// Posterior for every fitted cell, in group then design order.
    pub fn ae_posteriors(&self, fits: &[FittedGroup]) -> Vec<(String, AePosterior)> {
        let mut out = Vec::new();
        for ((name, g), f) in self.groups.iter().zip(fits) {
            for (n, &(i, j)) in g.cells.iter().enumerate() {
                let params = f.fit.params(g.design.vaccine_index[n]);
                out.push((
                    name.clone(),
                    AePosterior::new(
                        self.table.vaccines()[i].clone(),
                        self.table.aes()[j].clone(),
                        g.design.y[n],
                        g.design.offset[n],
                        &params,
                    ),
                ));
            }
        }
        out
    }

    fn maxima_for(&self, table: &ContingencyTable, config: &FitConfig) -> Maxima {
        let mut m = Maxima {
            max_s: f64::NEG_INFINITY,
            max_lambda: f64::NEG_INFINITY,
            nonconverged: 0,
        };
        for (_, g) in &self.groups {
            let design = g.with_counts_from(table);
            let fit = fit_group(&design, config);
            if !fit.converged {
                m.nonconverged += 1;
            }
            for v in 0..design.n_vaccines {
                m.max_s = m.max_s.max(group_rr(&fit.params(v)));
            }
            for n in 0..design.len() {
                let params = fit.params(design.vaccine_index[n]);
                m.max_lambda = m
                    .max_lambda
                    .max(posterior_lambda_mean(design.y[n], &params, design.offset[n]));
            }
        }
        m
    }

    /// Table with AE sets relinked according to permutation `index`.
    pub fn permuted_table(&self, seed: u64, index: u64) -> ContingencyTable {
        let mut order: Vec<usize> = (0..self.indexed.len()).collect();
        order.shuffle(&mut permutation_rng(seed, index));
        self.indexed.tabulate_with(|k| order[k])
    }

    /// Refits every group on `n` reshuffled datasets, reusing the observed
    /// expected counts. Results are indexed by permutation, independent of
    /// scheduling.
    pub fn permutation_maxima(&self, n: usize, seed: u64, config: &FitConfig) -> Vec<Maxima> {
        (0..n)
            .into_par_iter()
            .map(|k| {
                let table = self.permuted_table(seed, k as u64 + 1);
                self.maxima_for(&table, config)
            })
            .collect()
    }
}
