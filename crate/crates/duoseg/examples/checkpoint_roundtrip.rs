//! Save a checkpoint mid-run, reload it, and show that the resumed run is
//! bitwise identical to an uninterrupted one.
//!
//! ```bash
//! cargo run --release --example checkpoint_roundtrip
//! ```

use duoseg::trainer::{run, run_from, TrainConfig, TrainState, Variant};

fn main() {
    let cfg = TrainConfig {
        variant: Variant::Complete,
        seed: 13,
        epochs: 6,
        steps_per_epoch: 4,
        eval_scenes: 4,
        ..TrainConfig::default()
    };

    let full = run(cfg.clone()).expect("uninterrupted run");

    let mut state = TrainState::new(cfg.clone()).expect("valid config");
    let labeled = state.labeled_pool().expect("labeled pool");
    let unlabeled = state.unlabeled_pool().expect("unlabeled pool");
    let eval = state.eval_pool().expect("eval pool");
    run_from(&mut state, &labeled, &unlabeled, &eval, 3).expect("first half");

    let path = std::env::temp_dir().join("duoseg_roundtrip.ckpt");
    state.save_checkpoint(&path).expect("save");
    println!("saved checkpoint at step {} to {}", state.step, path.display());

    let mut resumed = TrainState::load_checkpoint(&path, cfg).expect("load");
    run_from(&mut resumed, &labeled, &unlabeled, &eval, 3).expect("second half");

    let bits = |state: &TrainState| -> Vec<u64> {
        state
            .params
            .named_tensors()
            .iter()
            .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()))
            .collect()
    };
    let identical = bits(&full.state) == bits(&resumed);
    println!(
        "resumed-to-end parameters bitwise identical to the uninterrupted run: {identical}"
    );
    assert!(identical);
    std::fs::remove_file(&path).ok();
}
