//! Monte Carlo oracles for the fitter, the simulator and the permutation null.

mod common;

use aesignal::signal::{mine, PermutationPlan, Statistic};
use aesignal::sim::{aggregate, run_study, simulate_group, ParamSource, SimScenario, ZIP_DISPERSION};
use aesignal::zinb::{fit_group, FitConfig, ParamClamp};

fn single_vaccine(p: f64, mu: f64, r: f64) -> SimScenario {
    SimScenario {
        name: "recovery".into(),
        group_sizes: vec![200],
        n_vaccines: 1,
        n_replications: 200,
        offset_range: (5.0, 50.0),
        param_source: ParamSource::Explicit {
            p: vec![p],
            mu: vec![mu],
            r,
        },
        seed: 11,
        ..Default::default()
    }
}

#[test]
fn fit_recovers_simulated_parameters() {
    let (p, mu, r) = (0.3, 2.0, 1.5);
    let report = run_study(&single_vaccine(p, mu, r)).unwrap();
    let est = &report.cell(0, 200).unwrap().estimates;
    for (name, truth, values) in [
        ("p", p, est.iter().map(|e| e.p).collect::<Vec<_>>()),
        ("mu", mu, est.iter().map(|e| e.mu).collect()),
        ("r", r, est.iter().map(|e| e.r).collect()),
    ] {
        let a = aggregate(&values);
        assert!(
            (a.mean - truth).abs() <= 3.0 * a.se,
            "{name}: mean {} truth {truth} se {}",
            a.mean,
            a.se
        );
    }
}

#[test]
fn zip_data_fit_reaches_poisson_limit() {
    let mut scenario = single_vaccine(0.3, 2.0, 1.5);
    scenario.zip_mode = true;
    let ln_r = ZIP_DISPERSION.ln();
    let zip_only = FitConfig {
        clamp: ParamClamp {
            ln_r_min: ln_r,
            ln_r_max: ln_r + 1e-9,
            ..ParamClamp::default()
        },
        ..FitConfig::default()
    };
    for rep in 0..20 {
        let design = simulate_group(&scenario, 200, rep).design();
        let free = fit_group(&design, &FitConfig::default());
        let zip = fit_group(&design, &zip_only);
        assert!(
            free.r >= 1e3 || free.loglik >= zip.loglik - 0.5,
            "rep {rep}: r {} loglik {} vs zip {}",
            free.r,
            free.loglik,
            zip.loglik
        );
    }
}

#[test]
fn simulated_rates_average_to_group_rr() {
    let (p, mu) = (0.4, 1.5);
    let scenario = SimScenario {
        group_sizes: vec![1000],
        n_vaccines: 1,
        param_source: ParamSource::Explicit {
            p: vec![p],
            mu: vec![mu],
            r: 1.2,
        },
        seed: 3,
        ..Default::default()
    };
    let mut ratios = Vec::with_capacity(100_000);
    for rep in 0..100 {
        let draw = simulate_group(&scenario, 1000, rep);
        ratios.extend(draw.y[0].iter().zip(&draw.offsets[0]).map(|(y, m)| y / m));
    }
    let a = aggregate(&ratios);
    assert!((a.mean - (1.0 - p) * mu).abs() <= 3.0 * a.se, "mean {} se {}", a.mean, a.se);
}

#[test]
fn global_null_maximum_inside_null_range() {
    let trials = 100;
    let mut inside = 0;
    for k in 0..trials {
        let mut rng = common::rng(9_000 + k);
        let reports = common::global_null_reports(&mut rng, 200, 3, 3, 4);
        let plan = PermutationPlan {
            n_permutations: 99,
            seed: k,
            statistic: Statistic::GroupMaxS,
        };
        let out = mine(&reports, &common::ontology(3, 4), &plan, &FitConfig::default(), 0.05, 0.0).unwrap();
        let null = out.group_null.values();
        let (lo, hi) = (null[0], null[null.len() - 1]);
        if (lo..=hi).contains(&out.group_null.observed) {
            inside += 1;
        }
    }
    assert!(inside >= 95, "{inside}/{trials} inside");
}
