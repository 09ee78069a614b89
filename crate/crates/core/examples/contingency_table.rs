//! Weighted vaccine x AE table, expected counts and naive reporting ratios.

use aesignal::contingency::{build_table, expected_counts, naive_rr};
use aesignal::ingest::Report;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // The third report names two vaccines, so each of its pairs weighs 1/2.
    let reports = vec![
        Report::new("r1", ["VAXA"], ["fever", "rash"])?,
        Report::new("r2", ["VAXA"], ["fever"])?,
        Report::new("r3", ["VAXA", "VAXB"], ["cough"])?,
        Report::new("r4", ["VAXB"], ["cough", "fever"])?,
        Report::new("r5", ["VAXB"], ["rash"])?,
    ];
    let aes: Vec<String> = ["cough", "fever", "rash"].map(String::from).to_vec();
    let vaccines: Vec<String> = ["VAXA", "VAXB"].map(String::from).to_vec();

    let table = build_table(&reports, &aes, &vaccines)?;
    let expected = expected_counts(&table)?;
    let rr = naive_rr(&table, &expected);

    println!("{:<6} {:>8} {:>8} {:>8}", "", "y", "M", "y/M");
    for (i, v) in table.vaccines().iter().enumerate() {
        for (j, a) in table.aes().iter().enumerate() {
            let ratio = rr[i][j].map_or("-".to_string(), |x| format!("{x:.3}"));
            println!("{v}/{a:<6} {:>6.3} {:>8.3} {:>8}", table.count(i, j), expected.get(i, j), ratio);
        }
    }
    println!("reports={} cell total={}", table.total(), table.cell_total());
    table.write_csv(std::io::stdout())?;
    Ok(())
}
