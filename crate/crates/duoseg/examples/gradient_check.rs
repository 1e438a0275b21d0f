//! Finite-difference sweep over every differentiable operation and the
//! fully composed training loss on a micro instance.
//!
//! ```bash
//! cargo run --release --example gradient_check
//! ```

use duoseg::verify::finite_difference_sweep;

fn main() {
    let entries = finite_difference_sweep(7).expect("sweep builds");
    let mut worst: f64 = 0.0;
    for entry in &entries {
        println!(
            "{:<32} {:>4} coords  max rel err {:.3e}  {}",
            entry.name,
            entry.coords,
            entry.max_rel_err,
            if entry.passed { "PASS" } else { "FAIL" }
        );
        worst = worst.max(entry.max_rel_err);
    }
    println!("\nworst relative error anywhere: {worst:.3e} (tolerance 1e-4)");
    assert!(entries.iter().all(|e| e.passed));
}
