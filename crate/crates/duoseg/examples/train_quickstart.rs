//! Train the complete model on the default desk-scale setup and print the
//! per-epoch metrics table.
//!
//! ```bash
//! cargo run --release --example train_quickstart
//! ```

use duoseg::metrics::CONVERGENCE_THRESHOLD;
use duoseg::trainer::{run, TrainConfig, Variant};

fn main() {
    let cfg = TrainConfig {
        variant: Variant::Complete,
        seed: 7,
        epochs: 8,
        steps_per_epoch: 8,
        ..TrainConfig::default()
    };
    println!(
        "training {} for {} epochs × {} steps (seed {})",
        cfg.variant.name(),
        cfg.epochs,
        cfg.steps_per_epoch,
        cfg.seed
    );
    let output = run(cfg).expect("default configuration trains");
    println!("{}", output.history.pretty_table());

    let stats = output
        .history
        .convergence(CONVERGENCE_THRESHOLD)
        .expect("history is nonempty");
    match stats.first_epoch_below {
        Some(epoch) => println!(
            "total loss first dropped below {CONVERGENCE_THRESHOLD} at epoch {epoch}; terminal {:.4}",
            stats.terminal
        ),
        None => println!(
            "total loss stayed above {CONVERGENCE_THRESHOLD}; terminal {:.4}",
            stats.terminal
        ),
    }
    if let Some(row) = output.history.rows.last() {
        if let Some(shares) = &row.shares {
            println!(
                "encoder gradient shares: ce {:.2}, pseudo-label {:.2}, consistency {:.2}, regularizer {:.2}",
                shares.ce, shares.pl, shares.consist, shares.reg
            );
        }
    }
}
