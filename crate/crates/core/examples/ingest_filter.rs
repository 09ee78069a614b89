//! Load a reports file and an ontology, then apply the frequency filters.
//!
//! cargo run --example ingest_filter [reports.csv ontology.csv]

use std::fs::File;

use aesignal::ingest::{apply_filters, parse_ontology, parse_reports, vaccine_universe, FilterPolicy};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures");
    let mut args = std::env::args().skip(1);
    let reports_path = args.next().unwrap_or(format!("{dir}/golden_reports.csv"));
    let ontology_path = args.next().unwrap_or(format!("{dir}/golden_ontology.csv"));

    let reports = parse_reports(File::open(&reports_path)?)?;
    let ontology = parse_ontology(File::open(&ontology_path)?)?;
    println!("{} reports, {} terms in {} groups", reports.len(), ontology.n_terms(), ontology.n_groups());

    for (min_ae, min_group) in [(1, 1), (2, 2), (3, 3)] {
        let f = apply_filters(&reports, &ontology, &FilterPolicy::thresholds(min_ae, min_group));
        println!(
            "min_ae_count={min_ae} min_group_size={min_group}: {} reports, {} terms, {} groups kept; {:?}",
            f.reports.len(),
            f.ontology.n_terms(),
            f.ontology.n_groups(),
            f.summary
        );
    }
    println!("vaccines: {:?}", vaccine_universe(&reports, None));
    Ok(())
}
