//! Monte-Carlo check of how much averaging two teachers reduces prediction
//! variance: near half at zero correlation, none at full correlation, and
//! (1 + rho)/2 in between.
//!
//! ```bash
//! cargo run --release --example variance_reduction
//! ```

use duoseg::pseudo::{variance_csv_row, variance_study, VarianceConfig, VARIANCE_CSV_HEADER};

fn main() {
    println!("{VARIANCE_CSV_HEADER}");
    for rho in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let report = variance_study(&VarianceConfig {
            rho,
            trials: 100_000,
            seed: 42,
            ..VarianceConfig::default()
        })
        .expect("valid study configuration");
        println!("{}", variance_csv_row(&report));
    }
    println!();
    println!("closed form: ratio = (1 + rho) / 2 when both teachers share the variance scale");
}
