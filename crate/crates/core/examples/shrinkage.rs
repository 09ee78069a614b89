//! AE-level posterior means next to raw ratios: sparse cells are pulled
//! toward the group while well-supported cells keep their own ratio.

use aesignal::shrink::{group_rr, posterior_lambda_mean, posterior_weights, posterior_zero_weight};
use aesignal::zinb::ZinbParams;

fn main() {
    let group = ZinbParams::new(0.4, 2.5, 1.5);
    println!("group s = {:.3}", group_rr(&group));
    println!("{:>6} {:>6} {:>8} {:>8} {:>6} {:>6}", "y", "M", "y/M", "lambda", "w1", "pi");
    for (y, m) in [(0.0, 0.5), (0.0, 20.0), (1.0, 0.2), (3.0, 1.0), (30.0, 10.0), (300.0, 100.0)] {
        let lambda = posterior_lambda_mean(y, &group, m);
        let w1 = posterior_weights(y, &group, m).map_or(f64::NAN, |w| w.0);
        let pi = if y == 0.0 { posterior_zero_weight(&group, m) } else { 0.0 };
        println!("{y:>6} {m:>6} {:>8.3} {lambda:>8.3} {w1:>6.3} {pi:>6.3}", y / m);
    }
}
