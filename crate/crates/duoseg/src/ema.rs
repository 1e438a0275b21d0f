//! Exponential-moving-average teacher heads.
//!
//! Teachers follow the student as `θ_T ← α·θ_T + (1−α)·θ_S` and never carry
//! gradients. Two teachers tracking the same student are decorrelated by
//! perturbing their initial copies and by updating them on alternating
//! steps; see [`TeacherPair`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nets::{xavier_bound, HeadParams, ModelDims};
use crate::tensor::TensorError;

/// Smoothing configuration for teacher updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmaConfig {
    /// Smoothing coefficient in (0,1); weight kept on the old teacher.
    pub alpha: f64,
}

impl Default for EmaConfig {
    fn default() -> Self {
        Self { alpha: 0.99 }
    }
}

impl EmaConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(format!("alpha must lie in (0,1), got {}", self.alpha));
        }
        Ok(())
    }
}

/// One smoothed-average step: `teacher = α·teacher + (1−α)·student`.
/// No gradient is recorded; teacher tensors stay gradient-free.
pub fn ema_update(
    teacher: &mut HeadParams,
    student: &HeadParams,
    cfg: &EmaConfig,
) -> Result<(), TensorError> {
    teacher
        .weight
        .axpby(cfg.alpha, 1.0 - cfg.alpha, &student.weight)?;
    teacher.bias.axpby(cfg.alpha, 1.0 - cfg.alpha, &student.bias)?;
    Ok(())
}

/// Euclidean norm of the elementwise difference over weight and bias.
pub fn params_distance(a: &HeadParams, b: &HeadParams) -> f64 {
    let mut sum = 0.0;
    for (x, y) in a.weight.data().iter().zip(b.weight.data()) {
        sum += (x - y) * (x - y);
    }
    for (x, y) in a.bias.data().iter().zip(b.bias.data()) {
        sum += (x - y) * (x - y);
    }
    sum.sqrt()
}

/// Residual of the update bound's first equality:
/// `| ‖θ_T' − θ_T‖ − (1−α)·‖θ_S − θ_T‖ |`. Exact up to rounding, so the
/// residual of a genuine update stays below 1e-12.
pub fn verify_ema_bound(
    before: &HeadParams,
    after: &HeadParams,
    student_after: &HeadParams,
    cfg: &EmaConfig,
) -> f64 {
    let moved = params_distance(after, before);
    let gap = params_distance(student_after, before);
    (moved - (1.0 - cfg.alpha) * gap).abs()
}

/// The two teacher heads plus the step bookkeeping for alternating updates.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherPair {
    pub teacher1: HeadParams,
    pub teacher2: HeadParams,
    pub last_update_step: Option<u64>,
}

impl TeacherPair {
    /// Builds both teachers as gradient-free copies of the student, each
    /// perturbed by its own uniform noise at `perturb_scale` times the
    /// head's init bound. The perturbations are what make the two
    /// averages distinct.
    pub fn new(student: &HeadParams, dims: &ModelDims, perturb_scale: f64, seed: u64) -> Self {
        let bound = perturb_scale * xavier_bound(dims.feature_width, dims.classes);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perturbed = |src: &HeadParams| {
            let mut head = src.detached();
            for v in head.weight.data_mut() {
                *v += rng.random_range(-bound..bound);
            }
            for v in head.bias.data_mut() {
                *v += rng.random_range(-bound..bound);
            }
            head
        };
        Self {
            teacher1: perturbed(student),
            teacher2: perturbed(student),
            last_update_step: None,
        }
    }

    /// Copies without perturbation, for the single-teacher baseline.
    pub fn exact_copies(student: &HeadParams) -> Self {
        Self {
            teacher1: student.detached(),
            teacher2: student.detached(),
            last_update_step: None,
        }
    }

    /// Advances the pair after a student step. With `dual` set, teacher 1
    /// moves on even steps and teacher 2 on odd ones; otherwise teacher 1
    /// moves every step.
    pub fn ema_step(
        &mut self,
        student: &HeadParams,
        step: u64,
        cfg: &EmaConfig,
        dual: bool,
    ) -> Result<(), TensorError> {
        if dual {
            if step.is_multiple_of(2) {
                ema_update(&mut self.teacher1, student, cfg)?;
            } else {
                ema_update(&mut self.teacher2, student, cfg)?;
            }
        } else {
            ema_update(&mut self.teacher1, student, cfg)?;
        }
        self.last_update_step = Some(step);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{init_params, ModelDims};
    use crate::tensor::Tensor;

    fn head(weight: Vec<f64>, bias: Vec<f64>, d: usize, c: usize) -> HeadParams {
        HeadParams {
            weight: Tensor::from_vec(vec![d, c], weight).unwrap(),
            bias: Tensor::from_vec(vec![c], bias).unwrap(),
        }
    }

    fn random_head(seed: u64, d: usize, c: usize) -> HeadParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        head(
            (0..d * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
            (0..c).map(|_| rng.random_range(-1.0..1.0)).collect(),
            d,
            c,
        )
    }

    #[test]
    fn update_is_fixed_point_when_teacher_equals_student() {
        let student = random_head(1, 3, 2);
        let mut teacher = student.detached();
        ema_update(&mut teacher, &student, &EmaConfig { alpha: 0.99 }).unwrap();
        for (t, s) in teacher.weight.data().iter().zip(student.weight.data()) {
            assert!((t - s).abs() <= 1e-15 * s.abs().max(1.0));
        }
    }

    #[test]
    fn update_arithmetic_is_forced() {
        let student = head(vec![1.0, 1.0], vec![1.0], 2, 1);
        let mut teacher = head(vec![2.0, 2.0], vec![2.0], 2, 1);
        ema_update(&mut teacher, &student, &EmaConfig { alpha: 0.99 }).unwrap();
        for v in teacher.weight.data() {
            assert!((v - 1.99).abs() < 1e-15);
        }
    }

    #[test]
    fn half_alpha_moves_teacher_exactly_one() {
        let student = head(vec![2.0], vec![2.0], 1, 1);
        let mut teacher = head(vec![0.0], vec![0.0], 1, 1);
        let before = teacher.detached();
        ema_update(&mut teacher, &student, &EmaConfig { alpha: 0.5 }).unwrap();
        assert_eq!(teacher.weight.data(), &[1.0]);
        let res = verify_ema_bound(&before, &teacher, &student, &EmaConfig { alpha: 0.5 });
        assert!(res < 1e-12);
    }

    #[test]
    fn repeated_updates_decay_geometrically_against_frozen_student() {
        let cfg = EmaConfig { alpha: 0.99 };
        let student = random_head(2, 4, 3);
        let mut teacher = random_head(3, 4, 3);
        let initial_gap: Vec<f64> = teacher
            .weight
            .data()
            .iter()
            .zip(student.weight.data())
            .map(|(t, s)| t - s)
            .collect();
        for k in 1..=10 {
            ema_update(&mut teacher, &student, &cfg).unwrap();
            let factor = cfg.alpha.powi(k);
            for ((t, s), g0) in teacher
                .weight
                .data()
                .iter()
                .zip(student.weight.data())
                .zip(&initial_gap)
            {
                assert!(
                    ((t - s) - factor * g0).abs() < 1e-12,
                    "k={k}: gap {} expected {}",
                    t - s,
                    factor * g0
                );
            }
        }
    }

    #[test]
    fn bound_residual_vanishes_on_random_updates() {
        let cfg = EmaConfig { alpha: 0.99 };
        for seed in 0..50 {
            let student = random_head(seed, 5, 4);
            let mut teacher = random_head(seed + 1000, 5, 4);
            let before = teacher.detached();
            ema_update(&mut teacher, &student, &cfg).unwrap();
            let residual = verify_ema_bound(&before, &teacher, &student, &cfg);
            assert!(residual < 1e-12, "seed {seed}: residual {residual}");
        }
    }

    #[test]
    fn update_contracts_distance_by_alpha_exactly() {
        let cfg = EmaConfig { alpha: 0.9 };
        let student = random_head(7, 4, 4);
        let mut teacher = random_head(8, 4, 4);
        let before_dist = params_distance(&teacher, &student);
        ema_update(&mut teacher, &student, &cfg).unwrap();
        let after_dist = params_distance(&teacher, &student);
        assert!((after_dist - cfg.alpha * before_dist).abs() < 1e-12);
    }

    #[test]
    fn updating_one_teacher_leaves_the_other_bitwise_identical() {
        let dims = ModelDims::default();
        let params = init_params(&dims, 9).unwrap();
        let mut pair = TeacherPair::new(&params.student, &dims, 1e-2, 77);
        let frozen: Vec<u64> = pair.teacher2.weight.data().iter().map(|v| v.to_bits()).collect();
        pair.ema_step(&params.student, 0, &EmaConfig::default(), true)
            .unwrap();
        pair.ema_step(&params.student, 2, &EmaConfig::default(), true)
            .unwrap();
        let still: Vec<u64> = pair.teacher2.weight.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(frozen, still);
        assert_eq!(pair.last_update_step, Some(2));
    }

    #[test]
    fn pair_perturbations_differ_between_teachers() {
        let dims = ModelDims::default();
        let params = init_params(&dims, 9).unwrap();
        let pair = TeacherPair::new(&params.student, &dims, 1e-2, 77);
        assert_ne!(pair.teacher1.weight.data(), pair.teacher2.weight.data());
        let bound = 1e-2 * xavier_bound(dims.feature_width, dims.classes);
        for (t, s) in pair
            .teacher1
            .weight
            .data()
            .iter()
            .zip(params.student.weight.data())
        {
            assert!((t - s).abs() <= bound);
        }
        assert!(!pair.teacher1.weight.requires_grad());
    }

    #[test]
    fn alpha_outside_unit_interval_is_rejected() {
        assert!(EmaConfig { alpha: 0.0 }.validate().is_err());
        assert!(EmaConfig { alpha: 1.0 }.validate().is_err());
        assert!(EmaConfig { alpha: 0.99 }.validate().is_ok());
    }
}
