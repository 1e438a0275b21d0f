//! Run every ablation rung on the fixed benchmark and print the mean mIoU
//! ladder: supervised baseline, single teacher, dual teachers, consensus
//! labels, and the complete model with attention-generated class weights.
//!
//! Two seeds keep this demo quick; the acceptance suite and the `ablate`
//! subcommand use five.
//!
//! ```bash
//! cargo run --release --example ablation_ladder
//! ```

use duoseg::trainer::{run_ablation, TrainConfig, Variant};

fn main() {
    let base = TrainConfig::benchmark(Variant::Complete, 0);
    let seeds = [1u64, 2];
    println!(
        "benchmark: {}x{} scenes, {} labeled / {} unlabeled, {} epochs x {} steps, seeds {:?}",
        base.dims.height,
        base.dims.width,
        base.labeled_scenes,
        base.unlabeled_scenes,
        base.epochs,
        base.steps_per_epoch,
        seeds
    );
    let result = run_ablation(&base, &Variant::ALL, &seeds).expect("benchmark runs");

    println!("\n{:<10} {:>10}", "variant", "mean mIoU");
    for variant in Variant::ALL {
        if let Some(mean) = result.mean_miou(variant) {
            println!("{:<10} {:>10.4}", variant.name(), mean);
        }
    }
    println!("\nper-run rows:");
    print!("{}", result.to_csv());
}
