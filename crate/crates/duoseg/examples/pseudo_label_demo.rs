//! Watch consensus pseudo-labels form during training: teacher agreement,
//! confidence coverage under the 0.95 threshold, and how accurate the
//! surviving labels are against the hidden ground truth.
//!
//! ```bash
//! cargo run --release --example pseudo_label_demo
//! ```

use duoseg::nets::{encode, head_forward};
use duoseg::pseudo::{consensus, softmax_rows, threshold_labels};
use duoseg::tensor::{Tape, Tensor};
use duoseg::trainer::{assemble_step_batch, train_step, TrainConfig, TrainState, Variant};

fn main() {
    let cfg = TrainConfig::benchmark(Variant::Dtc, 5);
    let mut state = TrainState::new(cfg.clone()).expect("valid config");
    let labeled = state.labeled_pool().expect("labeled pool");
    let unlabeled = state.unlabeled_pool().expect("unlabeled pool");

    println!(
        "{:>5} {:>9} {:>9} {:>10}",
        "step", "coverage", "label_acc", "disagree"
    );
    for checkpoint in 1..=6u64 {
        let until = checkpoint * 120;
        while state.step < until {
            let batch = assemble_step_batch(&labeled, &unlabeled, &cfg.batch, state.step)
                .expect("batch assembles");
            train_step(&mut state, &batch).expect("step succeeds");
        }

        // Teacher consensus over the whole unlabeled pool.
        let indices: Vec<usize> = (0..unlabeled.len()).collect();
        let images = unlabeled.stack_images(&indices);
        let mut tape = Tape::new();
        let enc = state.params.encoder.register(&mut tape);
        let t1 = state.params.teacher1.register(&mut tape);
        let t2 = state.params.teacher2.register(&mut tape);
        let images_var = tape.leaf(&images);
        let feats = encode(&mut tape, &enc, images_var, &cfg.dims).expect("encode");
        let l1 = head_forward(&mut tape, &t1, &feats, &cfg.dims).expect("teacher 1");
        let l2 = head_forward(&mut tape, &t2, &feats, &cfg.dims).expect("teacher 2");
        let as_tensor = |tape: &Tape, var| {
            Tensor::from_vec(tape.shape(var).to_vec(), tape.value(var).to_vec()).expect("copy")
        };
        let p1 = softmax_rows(&as_tensor(&tape, l1));
        let p2 = softmax_rows(&as_tensor(&tape, l2));
        let p_avg = consensus(&p1, &p2).expect("same shapes");
        let batch = threshold_labels(&p_avg, cfg.tau).expect("valid tau");

        // Hidden truth is legitimate here: this is analysis, not training.
        let mut truth = Vec::new();
        for i in &indices {
            truth.extend_from_slice(unlabeled.ground_truth(*i));
        }
        let confident = batch.confident_count();
        let correct = batch
            .labels
            .iter()
            .zip(&batch.mask)
            .zip(&truth)
            .filter(|((label, confident), t)| **confident && *label == *t)
            .count();
        let classes = cfg.dims.classes;
        let disagree = p1
            .data()
            .chunks(classes)
            .zip(p2.data().chunks(classes))
            .filter(|(a, b)| argmax(a) != argmax(b))
            .count();
        println!(
            "{:>5} {:>9.3} {:>9.4} {:>10.4}",
            state.step,
            confident as f64 / batch.mask.len() as f64,
            if confident > 0 {
                correct as f64 / confident as f64
            } else {
                f64::NAN
            },
            disagree as f64 / (p1.numel() / classes) as f64,
        );
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (c, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = c;
        }
    }
    best
}
