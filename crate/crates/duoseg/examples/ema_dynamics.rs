//! Exponential-moving-average mechanics in isolation: geometric decay
//! toward a frozen student, the exact update-bound residual, and the
//! alternating schedule that keeps two teachers distinct.
//!
//! ```bash
//! cargo run --release --example ema_dynamics
//! ```

use duoseg::ema::{ema_update, params_distance, verify_ema_bound, EmaConfig, TeacherPair};
use duoseg::nets::{init_params, ModelDims};

fn main() {
    let dims = ModelDims::default();
    let params = init_params(&dims, 11).expect("valid dims");
    let cfg = EmaConfig { alpha: 0.99 };

    // Geometric decay against a frozen student.
    let mut teacher = params.teacher1.clone();
    let student = {
        let mut s = params.student.clone();
        for v in s.weight.data_mut() {
            *v += 0.5;
        }
        s
    };
    let initial = params_distance(&teacher, &student);
    println!("decay toward a frozen student (alpha = {}):", cfg.alpha);
    for k in 1..=10 {
        let before = teacher.detached();
        ema_update(&mut teacher, &student, &cfg).expect("shapes match");
        let residual = verify_ema_bound(&before, &teacher, &student, &cfg);
        let distance = params_distance(&teacher, &student);
        let closed_form = cfg.alpha.powi(k) * initial;
        println!(
            "  k={k:>2}  distance {distance:.9}  closed form {closed_form:.9}  bound residual {residual:.2e}",
        );
    }

    // Alternating updates leave the idle teacher bitwise untouched.
    let mut pair = TeacherPair::new(&params.student, &dims, 0.01, 99);
    let t2_bits: Vec<u64> = pair.teacher2.weight.data().iter().map(|v| v.to_bits()).collect();
    pair.ema_step(&params.student, 0, &cfg, true).expect("even step");
    let t2_after: Vec<u64> = pair.teacher2.weight.data().iter().map(|v| v.to_bits()).collect();
    println!(
        "\neven step moved teacher 1 only; teacher 2 bitwise identical: {}",
        t2_bits == t2_after
    );
    pair.ema_step(&params.student, 1, &cfg, true).expect("odd step");
    println!("odd step updated teacher 2; last update step = {:?}", pair.last_update_step);
}
