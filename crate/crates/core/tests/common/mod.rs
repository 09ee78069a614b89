#![allow(dead_code)]

use aesignal::ingest::{Ontology, Report};
use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn ontology(groups: usize, per_group: usize) -> Ontology {
    let pairs: Vec<(String, String)> = (0..groups)
        .flat_map(|g| (0..per_group).map(move |k| (format!("g{g}_t{k}"), format!("G{g}"))))
        .collect();
    Ontology::from_pairs(pairs).unwrap()
}

/// Reports whose AE sets are drawn independently of their vaccines. Each
/// report names one or two vaccines and one to three terms; terms have
/// uneven popularity.
pub fn global_null_reports(
    rng: &mut impl Rng,
    n_reports: usize,
    n_vaccines: usize,
    groups: usize,
    per_group: usize,
) -> Vec<Report> {
    let n_terms = groups * per_group;
    let term_weights: Vec<f64> = (0..n_terms).map(|t| 1.0 + (t % 4) as f64).collect();
    let terms = WeightedIndex::new(&term_weights).unwrap();
    (0..n_reports)
        .map(|i| {
            let mut vax = vec![format!("V{}", rng.random_range(0..n_vaccines))];
            if rng.random::<f64>() < 0.2 {
                vax.push(format!("V{}", rng.random_range(0..n_vaccines)));
            }
            let n_ae = rng.random_range(1..=3);
            let aes: Vec<String> = (0..n_ae)
                .map(|_| {
                    let t = terms.sample(rng);
                    format!("g{}_t{}", t / per_group, t % per_group)
                })
                .collect();
            Report::new(format!("r{i}"), vax, aes).unwrap()
        })
        .collect()
}

pub const PLANTED_VACCINE: &str = "V0";
pub const PLANTED_GROUP: &str = "G0";

/// Single-vaccine reports with one vaccine-group pair at relative reporting
/// rate 5 and every other pair near 1.
///
/// Vaccine `V0` and group `G0` each take a 2% share. For `V0`, `G0` is chosen
/// with probability `q` such that `P(G0 | V0) / P(G0) = 5`; other vaccines
/// choose `G0` with probability 0.02. Within a group terms are uniform, and
/// a report carries one term or, with probability 0.3, two from its group.
pub fn planted_reports(rng: &mut impl Rng, n_reports: usize) -> (Vec<Report>, Ontology) {
    const N_VAX: usize = 5;
    const N_GROUPS: usize = 6;
    const PER_GROUP: usize = 8;
    let v0 = 0.02;
    let g0 = 0.02;
    let p_g0 = (1.0 - v0) * g0 / (1.0 - 5.0 * v0);
    let q = 5.0 * p_g0;
    let vax_weights: Vec<f64> = (0..N_VAX)
        .map(|v| if v == 0 { v0 } else { (1.0 - v0) / (N_VAX - 1) as f64 })
        .collect();
    let vaccines = WeightedIndex::new(&vax_weights).unwrap();
    let reports = (0..n_reports)
        .map(|i| {
            let v = vaccines.sample(rng);
            let p_first = if v == 0 { q } else { g0 };
            let g = if rng.random::<f64>() < p_first {
                0
            } else {
                rng.random_range(1..N_GROUPS)
            };
            let n_ae = if rng.random::<f64>() < 0.3 { 2 } else { 1 };
            let aes: Vec<String> = (0..n_ae)
                .map(|_| format!("g{g}_t{}", rng.random_range(0..PER_GROUP)))
                .collect();
            Report::new(format!("r{i}"), [format!("V{v}")], aes).unwrap()
        })
        .collect();
    (reports, ontology(N_GROUPS, PER_GROUP))
}
