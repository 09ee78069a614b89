//! End-to-end mining on synthetic reports with one planted vaccine-group
//! association, including the permutation p-values.

use aesignal::ingest::{Ontology, Report};
use aesignal::signal::{mine, PermutationPlan, Statistic};
use aesignal::zinb::FitConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let groups = ["Cardiac", "Neuro", "Skin", "Respiratory"];
    let ontology = Ontology::from_pairs(
        groups
            .iter()
            .flat_map(|g| (0..6).map(move |k| (format!("{}_{k}", g.to_lowercase()), g.to_string()))),
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let reports: Vec<Report> = (0..6000)
        .map(|n| {
            let vaccine = format!("VAX{}", rng.random_range(0..4));
            // VAX0 reports skin terms five times as often as the rest
            let skin = if vaccine == "VAX0" { 0.5 } else { 1.0 / 6.0 };
            let group = if rng.random::<f64>() < skin {
                "Skin"
            } else {
                ["Cardiac", "Neuro", "Respiratory"][rng.random_range(0..3)]
            };
            let term = format!("{}_{}", group.to_lowercase(), rng.random_range(0..6));
            Report::new(format!("r{n}"), [vaccine], [term]).unwrap()
        })
        .collect();

    let plan = PermutationPlan {
        n_permutations: 199,
        seed: 7,
        statistic: Statistic::GroupMaxS,
    };
    let out = mine(&reports, &ontology, &plan, &FitConfig::default(), 0.05, 1.5)?;
    println!("{:<6} {:<12} {:>7} {:>7} flagged", "vaccine", "group", "s", "p");
    for row in &out.signals.group_rows {
        println!("{:<6} {:<12} {:>7.3} {:>7.3} {}", row.vaccine, row.group, row.s, row.p_value, row.flagged);
    }
    println!("top AE rows:");
    let mut aes = out.signals.ae_rows.clone();
    aes.sort_by(|a, b| b.lambda_hat.total_cmp(&a.lambda_hat));
    for row in aes.iter().take(5) {
        println!("  {} {} lambda {:.3} p {:.3}", row.vaccine, row.ae, row.lambda_hat, row.p_value);
    }
    println!("{:?}", out.diagnostics);
    Ok(())
}
