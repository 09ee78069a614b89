//! Small bias/MSE study across group sizes, with and without inflated
//! offsets, written as long-format CSV.

use aesignal::sim::{emit_sim_plots, run_study, SimScenario};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for multiplier in [1.0, 5.0] {
        let scenario = SimScenario {
            name: format!("x{multiplier}"),
            group_sizes: vec![20, 50, 100, 200],
            n_replications: 100,
            offset_multiplier: multiplier,
            seed: 1,
            ..Default::default()
        };
        let report = run_study(&scenario)?;
        println!("offsets x{multiplier}: {}/{} fits did not converge", report.nonconverged, report.fits);
        for cell in &report.cells {
            let s = cell.s_summary();
            println!(
                "  vaccine {} size {:>3}: bias {:+.4} (se {:.4}) mse {:.4}  lambda mse {:.4}",
                cell.vaccine,
                cell.group_size,
                s.mean,
                s.se,
                s.mean_sq,
                cell.lambda_mse()
            );
        }
        if multiplier == 1.0 {
            let (mut group, mut ae) = (Vec::new(), Vec::new());
            emit_sim_plots(&report, &mut group, &mut ae)?;
            let text = String::from_utf8(group)?;
            println!("first rows of the group CSV:");
            text.lines().take(4).for_each(|l| println!("  {l}"));
        }
    }
    Ok(())
}
