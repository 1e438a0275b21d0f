//! The joint optimization loop: forward both data streams, build
//! pseudo-labels from the teachers, combine the four losses, backpropagate
//! with the documented routing, step the student and class-weight module
//! with momentum SGD, then move the teachers by EMA.
//!
//! Five wirings ladder up the full system: supervised-only, single teacher
//! with fixed weights, dual teachers, dual-teacher consensus, and the
//! complete model with attention-generated class weights.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::ema::{ema_update, EmaConfig, TeacherPair};
use crate::losses::{
    consistency_loss, pseudo_label_loss, supervised_ce, total_loss, weight_regularizer,
    LossBreakdown, LossError, LossWeights,
};
use crate::metrics::{
    miou, normalize_shares, pixel_accuracy, EpochRow, GradShares, MetricsHistory,
};
use crate::nets::{
    cwt_forward, encode, head_forward, init_params, CwtVars, EncoderVars, FeatureVars, HeadVars,
    ModelDims, ModelError, ModelParams,
};
use crate::pseudo::{consensus, softmax_rows, threshold_labels, PseudoLabelBatch, PseudoLabelError};
use crate::synthdata::{make_split, make_unlabeled_pool, SceneBatch, SynthError, WeatherConfig};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    PseudoLabel(#[from] PseudoLabelError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite {component} = {value} at step {step}")]
    NonFinite {
        component: &'static str,
        value: f64,
        step: u64,
    },
}

/// Ablation ladder rung.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Variant {
    /// Supervised baseline: cross-entropy only, unit weights.
    Stb,
    /// Single teacher with fixed weights: its own pseudo-labels, no
    /// consistency.
    Stfw,
    /// Dual teachers, fixed weights, teacher-1 pseudo-labels, consistency
    /// on.
    Dtfw,
    /// Dual teachers with consensus pseudo-labels.
    Dtc,
    /// Everything, plus attention-generated class weights and their
    /// regularizer.
    Complete,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Stb,
        Variant::Stfw,
        Variant::Dtfw,
        Variant::Dtc,
        Variant::Complete,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Stb => "STB",
            Variant::Stfw => "STFW",
            Variant::Dtfw => "DTFW",
            Variant::Dtc => "DTC",
            Variant::Complete => "COMPLETE",
        }
    }

    pub fn parse(name: &str) -> Result<Self, TrainError> {
        match name.to_ascii_uppercase().as_str() {
            "STB" => Ok(Variant::Stb),
            "STFW" => Ok(Variant::Stfw),
            "DTFW" => Ok(Variant::Dtfw),
            "DTC" => Ok(Variant::Dtc),
            "COMPLETE" => Ok(Variant::Complete),
            other => Err(TrainError::Config(format!("unknown variant {other}"))),
        }
    }
}

/// Which components a variant wires in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VariantWiring {
    pub dual_teachers: bool,
    pub consensus: bool,
    pub class_weights: bool,
    pub consistency: bool,
    pub pseudo_labels: bool,
}

impl VariantWiring {
    pub fn uses_teachers(&self) -> bool {
        self.pseudo_labels || self.consistency
    }
}

/// Resolves a variant name into its component set.
pub fn make_variant(variant: Variant) -> VariantWiring {
    match variant {
        Variant::Stb => VariantWiring {
            dual_teachers: false,
            consensus: false,
            class_weights: false,
            consistency: false,
            pseudo_labels: false,
        },
        Variant::Stfw => VariantWiring {
            dual_teachers: false,
            consensus: false,
            class_weights: false,
            consistency: false,
            pseudo_labels: true,
        },
        Variant::Dtfw => VariantWiring {
            dual_teachers: true,
            consensus: false,
            class_weights: false,
            consistency: true,
            pseudo_labels: true,
        },
        Variant::Dtc => VariantWiring {
            dual_teachers: true,
            consensus: true,
            class_weights: false,
            consistency: true,
            pseudo_labels: true,
        },
        Variant::Complete => VariantWiring {
            dual_teachers: true,
            consensus: true,
            class_weights: true,
            consistency: true,
            pseudo_labels: true,
        },
    }
}

/// Per-step batch sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatchSpec {
    pub labeled: usize,
    pub unlabeled: usize,
}

impl Default for BatchSpec {
    fn default() -> Self {
        Self {
            labeled: 4,
            unlabeled: 4,
        }
    }
}

/// Full training configuration; every field has a default so a config file
/// may be empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub dims: ModelDims,
    pub weights: LossWeights,
    pub ema: EmaConfig,
    pub tau: f64,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch: BatchSpec,
    pub seed: u64,
    pub variant: Variant,
    /// Labeled training scenes.
    pub labeled_scenes: usize,
    /// Unlabeled training scenes.
    pub unlabeled_scenes: usize,
    /// Degradation levels cycled over the labeled pool. Scarce annotation
    /// concentrates on lightly degraded scenes.
    pub labeled_betas: Vec<f64>,
    /// Degradation levels cycled over the unlabeled and evaluation pools.
    pub betas: Vec<f64>,
    /// Interleave a night variant of every unlabeled/eval degradation
    /// level.
    pub night_cycle: bool,
    /// Held-out scenes for per-epoch evaluation, seed-disjoint from the
    /// pools.
    pub eval_scenes: usize,
    /// Relative scale of the teachers' initial decorrelation noise.
    pub teacher_perturb: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dims: ModelDims::default(),
            weights: LossWeights::default(),
            ema: EmaConfig::default(),
            tau: 0.95,
            lr: 0.05,
            momentum: 0.9,
            epochs: 10,
            steps_per_epoch: 8,
            batch: BatchSpec::default(),
            seed: 0,
            variant: Variant::Complete,
            labeled_scenes: 6,
            unlabeled_scenes: 42,
            labeled_betas: vec![0.2],
            betas: vec![0.2, 0.5, 0.7],
            night_cycle: false,
            eval_scenes: 12,
            teacher_perturb: 0.01,
        }
    }
}

impl TrainConfig {
    /// The fixed ablation benchmark: labels concentrate on clean and soft
    /// scenes while the unlabeled and evaluation pools span soft, medium
    /// and hard degradation. Teachers start with a strong decorrelation
    /// perturbation that the slow EMA keeps alive through the phase where
    /// pseudo-labels ignite.
    pub fn benchmark(variant: Variant, seed: u64) -> Self {
        Self {
            variant,
            seed,
            epochs: 30,
            steps_per_epoch: 24,
            lr: 0.02,
            dims: ModelDims {
                feature_width: 32,
                ..ModelDims::default()
            },
            batch: BatchSpec {
                labeled: 2,
                unlabeled: 6,
            },
            labeled_scenes: 6,
            unlabeled_scenes: 60,
            labeled_betas: vec![0.0, 0.2],
            betas: vec![0.2, 0.5, 0.7],
            night_cycle: false,
            eval_scenes: 36,
            teacher_perturb: 0.2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.dims.validate()?;
        self.ema.validate().map_err(TrainError::Config)?;
        self.weights.validate().map_err(TrainError::Config)?;
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(TrainError::Config(format!(
                "tau must lie in (0,1), got {}",
                self.tau
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::Config(format!(
                "momentum must lie in [0,1), got {}",
                self.momentum
            )));
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        if self.steps_per_epoch == 0 {
            return Err(TrainError::Config("steps_per_epoch must be at least 1".into()));
        }
        if self.batch.labeled == 0 {
            return Err(TrainError::Config("need at least one labeled sample per step".into()));
        }
        if self.labeled_scenes == 0 {
            return Err(TrainError::Config("need at least one labeled scene".into()));
        }
        if self.eval_scenes == 0 {
            return Err(TrainError::Config("eval_scenes must be at least 1".into()));
        }
        for beta in self.betas.iter().chain(&self.labeled_betas) {
            WeatherConfig::from_beta(*beta).validate()?;
        }
        Ok(())
    }

    /// Modes cycled over the unlabeled and evaluation pools.
    pub fn weather_modes(&self) -> Vec<WeatherConfig> {
        let mut modes: Vec<WeatherConfig> =
            self.betas.iter().map(|b| WeatherConfig::from_beta(*b)).collect();
        if self.night_cycle {
            let night: Vec<WeatherConfig> = modes
                .iter()
                .map(|m| m.with_night())
                .collect();
            modes.extend(night);
        }
        modes
    }

    /// Modes cycled over the labeled pool.
    pub fn labeled_modes(&self) -> Vec<WeatherConfig> {
        self.labeled_betas
            .iter()
            .map(|b| WeatherConfig::from_beta(*b))
            .collect()
    }
}

/// Everything a run owns between steps.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub cfg: TrainConfig,
    pub params: ModelParams,
    /// Momentum buffers, aligned with `params.trainable_mut()` order.
    velocity: Vec<(String, Tensor)>,
    pub step: u64,
}

const EVAL_SEED_SALT: u64 = 0x5EED_0F0E_17AB_F00D;
const UNLABELED_SEED_SALT: u64 = 0xDA7A_0B5C_0DE5_EED5;

impl TrainState {
    pub fn new(cfg: TrainConfig) -> Result<Self, TrainError> {
        let wiring = make_variant(cfg.variant);
        let mut params = init_params(&cfg.dims, cfg.seed)?;
        if wiring.uses_teachers() {
            let pair = if wiring.dual_teachers {
                TeacherPair::new(
                    &params.student,
                    &cfg.dims,
                    cfg.teacher_perturb,
                    cfg.seed.wrapping_add(1),
                )
            } else {
                TeacherPair::exact_copies(&params.student)
            };
            params.teacher1 = pair.teacher1;
            params.teacher2 = pair.teacher2;
        }
        let velocity = {
            let mut p = params.clone();
            p.trainable_mut()
                .into_iter()
                .map(|(name, t)| (name, Tensor::zeros(t.shape().to_vec())))
                .collect()
        };
        Ok(Self {
            cfg,
            params,
            velocity,
            step: 0,
        })
    }

    pub fn wiring(&self) -> VariantWiring {
        make_variant(self.cfg.variant)
    }

    /// Labeled training pool derived from the run seed.
    pub fn labeled_pool(&self) -> Result<SceneBatch, TrainError> {
        Ok(make_split(
            &self.cfg.dims,
            self.cfg.labeled_scenes,
            1.0,
            &self.cfg.labeled_modes(),
            self.cfg.seed,
        )?)
    }

    /// Unlabeled training pool, seed-disjoint from the labeled pool,
    /// covering the full degradation mix.
    pub fn unlabeled_pool(&self) -> Result<SceneBatch, TrainError> {
        Ok(make_unlabeled_pool(
            &self.cfg.dims,
            self.cfg.unlabeled_scenes,
            &self.cfg.weather_modes(),
            self.cfg.seed ^ UNLABELED_SEED_SALT,
        )?)
    }

    /// Held-out pool on a seed disjoint from both training pools.
    pub fn eval_pool(&self) -> Result<SceneBatch, TrainError> {
        Ok(make_split(
            &self.cfg.dims,
            self.cfg.eval_scenes,
            1.0,
            &self.cfg.weather_modes(),
            self.cfg.seed ^ EVAL_SEED_SALT,
        )?)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), TrainError> {
        let mut tensors: Vec<(String, &Tensor)> = self.params.named_tensors();
        for (name, t) in &self.velocity {
            tensors.push((format!("momentum.{name}"), t));
        }
        checkpoint::save(path, &self.cfg.dims, self.cfg.seed, self.step, &tensors)?;
        Ok(())
    }

    /// Restores a state saved by `save_checkpoint`. The config supplies
    /// everything the header does not carry; dims must agree.
    pub fn load_checkpoint(path: &Path, cfg: TrainConfig) -> Result<Self, TrainError> {
        let mut loaded = checkpoint::load(path)?;
        if loaded.header.dims != cfg.dims {
            return Err(TrainError::Config(format!(
                "checkpoint dims {:?} do not match config dims {:?}",
                loaded.header.dims, cfg.dims
            )));
        }
        let mut state = TrainState::new(cfg)?;
        state.step = loaded.header.step;
        for (name, tensor) in state.params.named_tensors_mut() {
            let mut restored = loaded.take_tensor(&name)?;
            if tensor.requires_grad() {
                restored = restored.with_grad();
            }
            *tensor = restored;
        }
        for (name, tensor) in &mut state.velocity {
            *tensor = loaded.take_tensor(&format!("momentum.{name}"))?;
        }
        Ok(state)
    }
}

/// One step's worth of images and labels, already stacked.
#[derive(Debug, Clone)]
pub struct StepBatch {
    pub labeled_images: Tensor,
    pub labeled_truth: Vec<usize>,
    pub unlabeled_images: Option<Tensor>,
}

/// Cycles deterministically through both pools: step `s` takes the next
/// `labeled`/`unlabeled` indices in round-robin order.
pub fn assemble_step_batch(
    labeled_pool: &SceneBatch,
    unlabeled_pool: &SceneBatch,
    spec: &BatchSpec,
    step: u64,
) -> Result<StepBatch, TrainError> {
    let labeled_ids = labeled_pool.labeled_indices();
    let unlabeled_ids = unlabeled_pool.unlabeled_indices();
    if labeled_ids.is_empty() {
        return Err(TrainError::Config("labeled pool has no labeled samples".into()));
    }
    let mut labeled = Vec::with_capacity(spec.labeled);
    for k in 0..spec.labeled {
        let idx = labeled_ids[((step as usize) * spec.labeled + k) % labeled_ids.len()];
        labeled.push(idx);
    }
    let labeled_images = labeled_pool.stack_images(&labeled);
    let mut labeled_truth = Vec::new();
    for idx in &labeled {
        labeled_truth.extend_from_slice(
            labeled_pool
                .training_labels(*idx)
                .expect("labeled index came from labeled_indices"),
        );
    }
    let unlabeled_images = if spec.unlabeled > 0 && !unlabeled_ids.is_empty() {
        let mut unlabeled = Vec::with_capacity(spec.unlabeled);
        for k in 0..spec.unlabeled {
            let idx =
                unlabeled_ids[((step as usize) * spec.unlabeled + k) % unlabeled_ids.len()];
            unlabeled.push(idx);
        }
        Some(unlabeled_pool.stack_images(&unlabeled))
    } else {
        None
    };
    Ok(StepBatch {
        labeled_images,
        labeled_truth,
        unlabeled_images,
    })
}

/// Registered vars and loss scalars for one step, for diagnostics and
/// routing checks as well as the step itself.
pub struct StepGraph {
    pub encoder: EncoderVars,
    pub student: HeadVars,
    pub teacher1: Option<HeadVars>,
    pub teacher2: Option<HeadVars>,
    pub cwt: Option<CwtVars>,
    pub trainable: Vec<(String, Var)>,
    pub ce: Var,
    pub pl: Var,
    pub consist: Var,
    pub reg: Var,
    pub confident: usize,
    pub unlabeled_pixels: usize,
    pub empty_mask: bool,
    pub empty_unlabeled: bool,
}

fn teacher_features(tape: &mut Tape, feats: &FeatureVars) -> Result<Var, TensorError> {
    // Shared encoder: both teacher heads read the same features, so the
    // concatenated teacher context is the pooled features twice.
    tape.concat_last(&[feats.pooled, feats.pooled])
}

/// Builds the full forward graph for one step under the given wiring.
pub fn build_step_graph(
    tape: &mut Tape,
    params: &ModelParams,
    cfg: &TrainConfig,
    batch: &StepBatch,
) -> Result<StepGraph, TrainError> {
    let wiring = make_variant(cfg.variant);
    let dims = &cfg.dims;

    let encoder = params.encoder.register(tape);
    let student = params.student.register(tape);
    let cwt = wiring.class_weights.then(|| params.cwt.register(tape));
    let teacher1 = wiring.uses_teachers().then(|| params.teacher1.register(tape));
    let teacher2 = (wiring.uses_teachers() && wiring.dual_teachers)
        .then(|| params.teacher2.register(tape));

    let mut trainable: Vec<(String, Var)> = vec![
        ("encoder.w1".into(), encoder.w1),
        ("encoder.b1".into(), encoder.b1),
        ("encoder.w2".into(), encoder.w2),
        ("encoder.b2".into(), encoder.b2),
        ("student.weight".into(), student.weight),
        ("student.bias".into(), student.bias),
    ];
    if let Some(c) = &cwt {
        trainable.push(("cwt.w_q".into(), c.w_q));
        trainable.push(("cwt.w_k".into(), c.w_k));
        trainable.push(("cwt.w_v".into(), c.w_v));
        trainable.push(("cwt.ln_gain".into(), c.ln_gain));
        trainable.push(("cwt.ln_bias".into(), c.ln_bias));
        trainable.push(("cwt.mlp_w1".into(), c.mlp_w1));
        trainable.push(("cwt.mlp_b1".into(), c.mlp_b1));
        trainable.push(("cwt.mlp_w2".into(), c.mlp_w2));
        trainable.push(("cwt.mlp_b2".into(), c.mlp_b2));
    }

    // Labeled stream.
    let b_l = batch.labeled_images.shape()[0];
    let labeled_images = tape.leaf(&batch.labeled_images);
    let feats_l = encode(tape, &encoder, labeled_images, dims)?;
    let logits_l = head_forward(tape, &student, &feats_l, dims)?;
    let w_l = match &cwt {
        Some(c) => {
            let h_t = teacher_features(tape, &feats_l)?;
            cwt_forward(tape, c, feats_l.pooled, h_t, dims)?
        }
        None => tape.constant(vec![b_l, dims.classes], vec![1.0; b_l * dims.classes])?,
    };
    let ce = supervised_ce(tape, logits_l, w_l, &batch.labeled_truth)?;

    // Unlabeled stream.
    let mut pl = tape.scalar(0.0);
    let mut consist = tape.scalar(0.0);
    let mut reg_parts: Vec<Var> = Vec::new();
    if wiring.class_weights {
        let r = weight_regularizer(tape, w_l)?;
        reg_parts.push(r);
    }
    let mut confident = 0usize;
    let mut unlabeled_pixels = 0usize;
    let mut empty_mask = false;
    let mut empty_unlabeled = !wiring.uses_teachers();

    match (&batch.unlabeled_images, wiring.uses_teachers()) {
        (Some(images), true) => {
            let b_u = images.shape()[0];
            let unlabeled_images = tape.leaf(images);
            let feats_u = encode(tape, &encoder, unlabeled_images, dims)?;
            let t1 = teacher1.as_ref().expect("teacher1 registered");
            let t1_logits = head_forward(tape, t1, &feats_u, dims)?;
            let t2_logits = match &teacher2 {
                Some(t2) => Some(head_forward(tape, t2, &feats_u, dims)?),
                None => None,
            };

            if wiring.consistency {
                let t2_logits = t2_logits.expect("consistency requires dual teachers");
                let (c, flag) = consistency_loss(tape, t1_logits, t2_logits, b_u)?;
                consist = c;
                empty_unlabeled = flag;
            }

            if wiring.pseudo_labels {
                let probs1 = softmax_rows(&Tensor::from_vec(
                    tape.shape(t1_logits).to_vec(),
                    tape.value(t1_logits).to_vec(),
                )?);
                let p_avg = if wiring.consensus {
                    let t2_logits = t2_logits.expect("consensus requires dual teachers");
                    let probs2 = softmax_rows(&Tensor::from_vec(
                        tape.shape(t2_logits).to_vec(),
                        tape.value(t2_logits).to_vec(),
                    )?);
                    consensus(&probs1, &probs2)?
                } else {
                    probs1
                };
                let plb: PseudoLabelBatch = threshold_labels(&p_avg, cfg.tau)?;
                confident = plb.confident_count();
                unlabeled_pixels = plb.mask.len();

                let logits_u = head_forward(tape, &student, &feats_u, dims)?;
                let w_u = match &cwt {
                    Some(c) => {
                        let h_t = teacher_features(tape, &feats_u)?;
                        let w = cwt_forward(tape, c, feats_u.pooled, h_t, dims)?;
                        let r = weight_regularizer(tape, w)?;
                        reg_parts.push(r);
                        w
                    }
                    None => {
                        tape.constant(vec![b_u, dims.classes], vec![1.0; b_u * dims.classes])?
                    }
                };
                let (p, flag) = pseudo_label_loss(tape, logits_u, w_u, &plb)?;
                pl = p;
                empty_mask = flag;
            }
        }
        _ => {
            empty_unlabeled = true;
        }
    }

    let reg = match reg_parts.len() {
        0 => tape.scalar(0.0),
        1 => reg_parts[0],
        _ => {
            let mut acc = reg_parts[0];
            for part in &reg_parts[1..] {
                acc = tape.add(acc, *part)?;
            }
            acc
        }
    };

    Ok(StepGraph {
        encoder,
        student,
        teacher1,
        teacher2,
        cwt,
        trainable,
        ce,
        pl,
        consist,
        reg,
        confident,
        unlabeled_pixels,
        empty_mask,
        empty_unlabeled,
    })
}

fn check_finite(
    component: &'static str,
    value: f64,
    step: u64,
) -> Result<(), TrainError> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(TrainError::NonFinite {
            component,
            value,
            step,
        })
    }
}

/// One optimization step. Returns the loss breakdown; errors out with the
/// offending component on any non-finite loss.
pub fn train_step(state: &mut TrainState, batch: &StepBatch) -> Result<LossBreakdown, TrainError> {
    let cfg = state.cfg.clone();
    let wiring = make_variant(cfg.variant);
    let mut tape = Tape::new();
    let graph = build_step_graph(&mut tape, &state.params, &cfg, batch)?;
    let total = total_loss(
        &mut tape,
        graph.ce,
        graph.pl,
        graph.consist,
        graph.reg,
        &cfg.weights,
    )?;

    let breakdown = LossBreakdown {
        ce: tape.scalar_value(graph.ce),
        pl: tape.scalar_value(graph.pl),
        consist: tape.scalar_value(graph.consist),
        reg: tape.scalar_value(graph.reg),
        total: tape.scalar_value(total),
        labeled: batch.labeled_images.shape()[0],
        unlabeled: batch
            .unlabeled_images
            .as_ref()
            .map(|t| t.shape()[0])
            .unwrap_or(0),
        confident: graph.confident,
        mask_fraction: if graph.unlabeled_pixels > 0 {
            graph.confident as f64 / graph.unlabeled_pixels as f64
        } else {
            0.0
        },
        empty_mask: graph.empty_mask,
        empty_unlabeled: graph.empty_unlabeled,
    };
    check_finite("ce", breakdown.ce, state.step)?;
    check_finite("pl", breakdown.pl, state.step)?;
    check_finite("consist", breakdown.consist, state.step)?;
    check_finite("reg", breakdown.reg, state.step)?;
    check_finite("total", breakdown.total, state.step)?;

    tape.backward(total)?;

    // Teachers are gradient-free by construction; the optimizer below never
    // sees them either.
    for vars in [&graph.teacher1, &graph.teacher2].into_iter().flatten() {
        debug_assert!(tape.grad(vars.weight).is_none());
        debug_assert!(tape.grad(vars.bias).is_none());
    }

    // Momentum SGD on encoder, student head, class-weight module. Vars not
    // on this step's graph (a module the wiring leaves out) keep their
    // velocity and parameters untouched.
    let lr = cfg.lr;
    let mu = cfg.momentum;
    let mut grads: std::collections::HashMap<String, Vec<f64>> = graph
        .trainable
        .iter()
        .map(|(name, var)| {
            let grad = tape
                .grad(*var)
                .expect("trainable leaves always carry gradients after backward");
            (name.clone(), grad.to_vec())
        })
        .collect();
    for ((velocity_name, velocity), (param_name, param)) in
        state.velocity.iter_mut().zip(state.params.trainable_mut())
    {
        debug_assert_eq!(*velocity_name, param_name);
        let Some(grad) = grads.remove(velocity_name) else {
            continue;
        };
        for (v, g) in velocity.data_mut().iter_mut().zip(&grad) {
            *v = mu * *v + g;
        }
        for (p, v) in param.data_mut().iter_mut().zip(velocity.data()) {
            *p -= lr * *v;
        }
    }
    debug_assert!(grads.is_empty(), "every graph var maps to a parameter");

    // EMA after the student step, alternating between the teachers.
    if wiring.uses_teachers() {
        if wiring.dual_teachers {
            if state.step.is_multiple_of(2) {
                ema_update(&mut state.params.teacher1, &state.params.student, &cfg.ema)?;
            } else {
                ema_update(&mut state.params.teacher2, &state.params.student, &cfg.ema)?;
            }
        } else {
            ema_update(&mut state.params.teacher1, &state.params.student, &cfg.ema)?;
        }
    }

    state.step += 1;
    Ok(breakdown)
}

/// Argmax predictions for a stacked image batch, using the weight-modulated
/// logits when the variant generates class weights.
pub fn predict(state: &TrainState, images: &Tensor) -> Result<Vec<usize>, TrainError> {
    let cfg = &state.cfg;
    let wiring = state.wiring();
    let dims = &cfg.dims;
    let mut tape = Tape::new();
    let encoder = state.params.encoder.register(&mut tape);
    let student = state.params.student.register(&mut tape);
    let images_var = tape.leaf(images);
    let feats = encode(&mut tape, &encoder, images_var, dims)?;
    let mut logits = head_forward(&mut tape, &student, &feats, dims)?;
    if wiring.class_weights {
        let cwt = state.params.cwt.register(&mut tape);
        let h_t = teacher_features(&mut tape, &feats)?;
        let w = cwt_forward(&mut tape, &cwt, feats.pooled, h_t, dims)?;
        logits = tape.mul_per_row(logits, w)?;
    }
    let values = tape.value(logits);
    let classes = dims.classes;
    let mut out = Vec::with_capacity(values.len() / classes);
    for row in values.chunks(classes) {
        let mut best = 0;
        for (c, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = c;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// Held-out evaluation over a whole scene batch: dataset-level mean IoU and
/// pixel accuracy.
pub fn evaluate(state: &TrainState, pool: &SceneBatch) -> Result<(f64, f64), TrainError> {
    let indices: Vec<usize> = (0..pool.len()).collect();
    let images = pool.stack_images(&indices);
    let pred = predict(state, &images)?;
    let mut truth = Vec::with_capacity(pred.len());
    for i in &indices {
        truth.extend_from_slice(pool.ground_truth(*i));
    }
    let miou_value = miou(&pred, &truth, state.cfg.dims.classes)
        .map_err(|e| TrainError::Config(e.to_string()))?;
    let acc = pixel_accuracy(&pred, &truth).map_err(|e| TrainError::Config(e.to_string()))?;
    Ok((miou_value, acc))
}

/// Encoder-gradient share of each λ-weighted component, via one backward
/// pass per component on a fresh tape.
pub fn grad_share_report(
    state: &TrainState,
    batch: &StepBatch,
) -> Result<Option<GradShares>, TrainError> {
    let cfg = &state.cfg;
    let mut norms = [0.0f64; 4];
    let lambdas = [
        1.0,
        cfg.weights.lambda1,
        cfg.weights.lambda2,
        cfg.weights.lambda3,
    ];
    for (slot, lambda) in lambdas.iter().enumerate() {
        let mut tape = Tape::new();
        let graph = build_step_graph(&mut tape, &state.params, cfg, batch)?;
        let component = [graph.ce, graph.pl, graph.consist, graph.reg][slot];
        let weighted = tape.scale(component, *lambda);
        tape.backward(weighted)?;
        let mut sum = 0.0;
        for var in [
            graph.encoder.w1,
            graph.encoder.b1,
            graph.encoder.w2,
            graph.encoder.b2,
        ] {
            if let Some(g) = tape.grad(var) {
                sum += g.iter().map(|v| v * v).sum::<f64>();
            }
        }
        norms[slot] = sum.sqrt();
    }
    Ok(normalize_shares(norms[0], norms[1], norms[2], norms[3]))
}

/// A finished run: per-step losses, per-epoch metrics, final state.
#[derive(Debug)]
pub struct RunOutput {
    pub history: MetricsHistory,
    pub step_losses: Vec<(u64, LossBreakdown)>,
    pub state: TrainState,
}

/// Trains for `epochs × steps_per_epoch` steps with a held-out evaluation
/// after every epoch. Fully deterministic in the config.
pub fn run(cfg: TrainConfig) -> Result<RunOutput, TrainError> {
    cfg.validate()?;
    let mut state = TrainState::new(cfg.clone())?;
    let labeled_pool = state.labeled_pool()?;
    let unlabeled_pool = state.unlabeled_pool()?;
    let eval_pool = state.eval_pool()?;
    run_from(&mut state, &labeled_pool, &unlabeled_pool, &eval_pool, cfg.epochs)
        .map(|(history, step_losses)| RunOutput {
            history,
            step_losses,
            state,
        })
}

/// Advances an existing state by `epochs` epochs; checkpoint resume uses
/// this with the restored step counter.
pub fn run_from(
    state: &mut TrainState,
    labeled_pool: &SceneBatch,
    unlabeled_pool: &SceneBatch,
    eval_pool: &SceneBatch,
    epochs: usize,
) -> Result<(MetricsHistory, Vec<(u64, LossBreakdown)>), TrainError> {
    let cfg = state.cfg.clone();
    let mut history = MetricsHistory::default();
    let mut step_losses = Vec::new();
    let first_epoch = (state.step / cfg.steps_per_epoch as u64) as usize;
    for epoch in first_epoch..first_epoch + epochs {
        let mut sums = [0.0f64; 5];
        let mut mask_fraction_sum = 0.0;
        let mut last_batch = None;
        for _ in 0..cfg.steps_per_epoch {
            let batch = assemble_step_batch(labeled_pool, unlabeled_pool, &cfg.batch, state.step)?;
            let breakdown = train_step(state, &batch)?;
            sums[0] += breakdown.ce;
            sums[1] += breakdown.pl;
            sums[2] += breakdown.consist;
            sums[3] += breakdown.reg;
            sums[4] += breakdown.total;
            mask_fraction_sum += breakdown.mask_fraction;
            step_losses.push((state.step - 1, breakdown));
            last_batch = Some(batch);
        }
        let steps = cfg.steps_per_epoch as f64;
        let (miou_value, acc) = evaluate(state, eval_pool)?;
        let shares = match &last_batch {
            Some(batch) => grad_share_report(state, batch)?,
            None => None,
        };
        history.push(EpochRow {
            epoch,
            miou: miou_value,
            pixel_acc: acc,
            ce: sums[0] / steps,
            pl: sums[1] / steps,
            consist: sums[2] / steps,
            reg: sums[3] / steps,
            total: sums[4] / steps,
            mask_fraction: mask_fraction_sum / steps,
            shares,
        });
    }
    // The unlabeled pool's hidden ground truth must never have been read.
    debug_assert_eq!(unlabeled_pool.hidden_truth_reads(), 0);
    Ok((history, step_losses))
}

/// Mean class-weight distance from unity over a scene batch, the quantity
/// the weight regularizer controls.
pub fn mean_weight_distance(state: &TrainState, pool: &SceneBatch) -> Result<f64, TrainError> {
    let dims = &state.cfg.dims;
    let indices: Vec<usize> = (0..pool.len()).collect();
    let images = pool.stack_images(&indices);
    let mut tape = Tape::new();
    let encoder = state.params.encoder.register(&mut tape);
    let cwt = state.params.cwt.register(&mut tape);
    let images_var = tape.leaf(&images);
    let feats = encode(&mut tape, &encoder, images_var, dims)?;
    let h_t = teacher_features(&mut tape, &feats)?;
    let w = cwt_forward(&mut tape, &cwt, feats.pooled, h_t, dims)?;
    let values = tape.value(w);
    let n = values.len() as f64;
    let dist = (values.iter().map(|v| (v - 1.0) * (v - 1.0)).sum::<f64>() / n).sqrt();
    Ok(dist)
}

/// One ablation cell: a variant trained on one seed.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub miou: f64,
    pub pixel_acc: f64,
    pub terminal_loss: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct AblationResult {
    pub rows: Vec<AblationRow>,
}

pub const ABLATION_CSV_HEADER: &str = "variant,seed,miou,pixel_acc,terminal_loss";

impl AblationResult {
    pub fn mean_miou(&self, variant: Variant) -> Option<f64> {
        let scores: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.variant == variant.name())
            .map(|r| r.miou)
            .collect();
        if scores.is_empty() {
            None
        } else {
            Some(scores.iter().sum::<f64>() / scores.len() as f64)
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(ABLATION_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.variant, r.seed, r.miou, r.pixel_acc, r.terminal_loss
            ));
        }
        out
    }
}

/// Runs every requested variant on every seed with the benchmark shape of
/// `base`, varying only variant and seed.
pub fn run_ablation(
    base: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
) -> Result<AblationResult, TrainError> {
    let mut result = AblationResult::default();
    for &variant in variants {
        for &seed in seeds {
            let cfg = TrainConfig {
                variant,
                seed,
                ..base.clone()
            };
            let output = run(cfg)?;
            let terminal_loss = output
                .history
                .rows
                .last()
                .map(|r| r.total)
                .unwrap_or(f64::NAN);
            result.rows.push(AblationRow {
                variant: variant.name().to_string(),
                seed,
                miou: output.history.final_miou().unwrap_or(0.0),
                pixel_acc: output
                    .history
                    .rows
                    .last()
                    .map(|r| r.pixel_acc)
                    .unwrap_or(0.0),
                terminal_loss,
            });
        }
    }
    Ok(result)
}
