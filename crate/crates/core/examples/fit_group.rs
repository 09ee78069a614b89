//! Fit the zero-inflated negative binomial model to one simulated AE group.

use aesignal::shrink::group_rr;
use aesignal::sim::{simulate_group, ParamSource, SimScenario};
use aesignal::zinb::{fit_group, FitConfig};

fn main() {
    let scenario = SimScenario {
        group_sizes: vec![150],
        param_source: ParamSource::Explicit {
            p: vec![0.1, 0.3, 0.5],
            mu: vec![0.5, 1.0, 4.0],
            r: 2.0,
        },
        seed: 42,
        ..Default::default()
    };
    let draw = simulate_group(&scenario, 150, 0);
    let design = draw.design();
    let fit = fit_group(&design, &FitConfig::default());

    println!(
        "converged={} after {} iterations, loglik {:.3} (start {:.3}), r = {:.3}",
        fit.converged, fit.iterations, fit.loglik, fit.initial_loglik, fit.r
    );
    for (v, truth) in scenario.true_params().iter().enumerate() {
        let est = fit.params(v);
        println!(
            "vaccine {v}: p {:.3} ({:.3})  mu {:.3} ({:.3})  s {:.3} ({:.3})",
            est.p,
            truth.p,
            est.mu,
            truth.mu,
            group_rr(&est),
            group_rr(truth)
        );
    }
}
