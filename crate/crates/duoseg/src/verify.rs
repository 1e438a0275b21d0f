//! Full finite-difference verification sweep: every differentiable
//! operation, the composed network forwards, and the complete training loss
//! on a micro instance, each checked against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::losses::total_loss;
use crate::nets::{cwt_forward, encode, head_forward, HeadVars, ModelDims};
use crate::tensor::gradcheck::{compare_gradients, FD_EPS, FD_TOL};
use crate::tensor::{Tape, Tensor, Var};
use crate::trainer::{
    build_step_graph, BatchSpec, StepBatch, TrainConfig, TrainError, TrainState, Variant,
};

/// One sweep case: the worst relative error over every input coordinate.
#[derive(Debug, Clone)]
pub struct SweepEntry {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

pub const SWEEP_CSV_HEADER: &str = "case,coords,max_rel_err,passed";

pub fn sweep_csv_row(e: &SweepEntry) -> String {
    format!("{},{},{},{}", e.name, e.coords, e.max_rel_err, e.passed)
}

fn sweep_case(
    name: &str,
    shapes: &[Vec<usize>],
    data: &[Vec<f64>],
    build: &dyn Fn(&mut Tape, &[Var]) -> Var,
) -> SweepEntry {
    let mut tape = Tape::new();
    let vars: Vec<Var> = shapes
        .iter()
        .zip(data)
        .map(|(s, d)| {
            tape.leaf(
                &Tensor::from_vec(s.clone(), d.clone())
                    .expect("sweep shapes match data")
                    .with_grad(),
            )
        })
        .collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).expect("sweep losses are scalar");
    let analytic: Vec<f64> = vars
        .iter()
        .flat_map(|v| tape.grad(*v).expect("leaves carry grads").to_vec())
        .collect();

    let flat: Vec<f64> = data.iter().flatten().copied().collect();
    let mut eval = |probe: &[f64]| {
        let mut t = Tape::new();
        let mut offset = 0;
        let vars: Vec<Var> = shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                let v = t
                    .constant(s.clone(), probe[offset..offset + n].to_vec())
                    .expect("probe slices match shapes");
                offset += n;
                v
            })
            .collect();
        let loss = build(&mut t, &vars);
        t.scalar_value(loss)
    };
    let report = compare_gradients(&mut eval, &flat, &analytic, FD_EPS);
    SweepEntry {
        name: name.to_string(),
        coords: flat.len(),
        max_rel_err: report.max_rel_err,
        passed: report.passes(FD_TOL),
    }
}

fn vec_in(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Values bounded away from zero, keeping relu kinks outside FD reach.
fn vec_off_kink(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.2..1.5);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

/// The micro training instance used for the composed-loss check: two
/// streams of one 2×2 single-channel image each, two features, two classes.
pub fn micro_loss_config() -> TrainConfig {
    TrainConfig {
        dims: ModelDims {
            in_channels: 1,
            feature_width: 2,
            classes: 2,
            height: 2,
            width: 2,
            heads: 1,
        },
        batch: BatchSpec {
            labeled: 1,
            unlabeled: 1,
        },
        tau: 0.4,
        variant: Variant::Complete,
        seed: 3,
        labeled_scenes: 1,
        unlabeled_scenes: 1,
        labeled_betas: vec![0.0],
        betas: vec![0.2],
        ..TrainConfig::default()
    }
}

/// The micro state with its relu-waking nudges applied. The stock init at
/// this size can leave the encoder or the weight MLP entirely dead (D=2
/// layer norm output is binary, and a two-weight first layer can draw both
/// signs negative), which would make gradient checks vacuous.
pub fn micro_loss_state() -> Result<TrainState, TrainError> {
    let cfg = micro_loss_config();
    let mut state = TrainState::new(cfg)?;
    state.params.encoder.b1 = Tensor::from_vec(vec![2], vec![0.10, 0.15])
        .expect("bias shape")
        .with_grad();
    state.params.encoder.b2 = Tensor::from_vec(vec![2], vec![0.10, 0.12])
        .expect("bias shape")
        .with_grad();
    state.params.cwt.mlp_b1 = Tensor::from_vec(vec![2], vec![0.30, 0.25])
        .expect("bias shape")
        .with_grad();
    state.params.cwt.ln_bias = Tensor::from_vec(vec![2], vec![0.05, -0.04])
        .expect("bias shape")
        .with_grad();
    Ok(state)
}

/// The fixed two-stream batch the micro checks run on.
pub fn micro_loss_batch() -> StepBatch {
    StepBatch {
        labeled_images: Tensor::from_vec(vec![1, 2, 2, 1], vec![0.9, 0.1, 0.8, 0.2])
            .expect("image shape"),
        labeled_truth: vec![0, 1, 0, 1],
        unlabeled_images: Some(
            Tensor::from_vec(vec![1, 2, 2, 1], vec![0.3, 0.7, 0.4, 0.6]).expect("image shape"),
        ),
    }
}

fn micro_loss_entry() -> Result<SweepEntry, TrainError> {
    let cfg = micro_loss_config();
    let state = micro_loss_state()?;
    let batch = micro_loss_batch();

    // Analytic gradients for every trainable leaf.
    let mut tape = Tape::new();
    let graph = build_step_graph(&mut tape, &state.params, &cfg, &batch)?;
    let total = total_loss(
        &mut tape,
        graph.ce,
        graph.pl,
        graph.consist,
        graph.reg,
        &cfg.weights,
    )?;
    tape.backward(total)?;
    let analytic: Vec<f64> = graph
        .trainable
        .iter()
        .flat_map(|(_, var)| tape.grad(*var).expect("trainable grads").to_vec())
        .collect();

    // Finite differences over the same flattened parameter vector; every
    // probe rebuilds the whole graph from scratch.
    let mut probe_state = state.clone();
    let flat: Vec<f64> = {
        let mut p = state.params.clone();
        p.trainable_mut()
            .into_iter()
            .flat_map(|(_, t)| t.data().to_vec())
            .collect()
    };
    let cfg2 = cfg.clone();
    let batch2 = batch.clone();
    let mut eval = move |probe: &[f64]| -> f64 {
        let mut offset = 0;
        for (_, tensor) in probe_state.params.trainable_mut() {
            let n = tensor.numel();
            tensor
                .data_mut()
                .copy_from_slice(&probe[offset..offset + n]);
            offset += n;
        }
        let mut t = Tape::new();
        let graph = build_step_graph(&mut t, &probe_state.params, &cfg2, &batch2)
            .expect("probe graph builds");
        let total = total_loss(
            &mut t,
            graph.ce,
            graph.pl,
            graph.consist,
            graph.reg,
            &cfg2.weights,
        )
        .expect("probe total");
        t.scalar_value(total)
    };
    let report = compare_gradients(&mut eval, &flat, &analytic, FD_EPS);
    Ok(SweepEntry {
        name: "composed_total_loss_micro".to_string(),
        coords: flat.len(),
        max_rel_err: report.max_rel_err,
        passed: report.passes(FD_TOL),
    })
}

/// Runs the whole sweep. Deterministic in the seed; every entry must pass
/// for the gradcheck gate to go green.
pub fn finite_difference_sweep(seed: u64) -> Result<Vec<SweepEntry>, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();

    // ── elementwise and reductions ───────────────────────────────────
    let a = vec_in(&mut rng, 12, -2.0, 2.0);
    let b = vec_in(&mut rng, 12, -2.0, 2.0);
    entries.push(sweep_case(
        "add_sub_mul_scale_mean",
        &[vec![3, 4], vec![3, 4]],
        &[a, b],
        &|t, v| {
            let s = t.add(v[0], v[1]).unwrap();
            let d = t.sub(v[0], v[1]).unwrap();
            let p = t.mul(s, d).unwrap();
            let sc = t.scale(p, 0.37);
            t.mean_all(sc)
        },
    ));

    let x = vec_off_kink(&mut rng, 10);
    entries.push(sweep_case("relu_sum", &[vec![10]], &[x], &|t, v| {
        let r = t.relu(v[0]);
        t.sum_all(r)
    }));

    let x = vec_in(&mut rng, 8, 0.3, 3.0);
    entries.push(sweep_case("log_sum", &[vec![8]], &[x], &|t, v| {
        let l = t.log(v[0]);
        t.sum_all(l)
    }));

    // ── linear algebra ───────────────────────────────────────────────
    let a = vec_in(&mut rng, 12, -1.5, 1.5);
    let b = vec_in(&mut rng, 8, -1.5, 1.5);
    entries.push(sweep_case(
        "matmul_sum",
        &[vec![3, 4], vec![4, 2]],
        &[a, b],
        &|t, v| {
            let m = t.matmul(v[0], v[1]).unwrap();
            t.sum_all(m)
        },
    ));

    let a = vec_in(&mut rng, 6, -1.5, 1.5);
    entries.push(sweep_case("transpose_square", &[vec![2, 3]], &[a], &|t, v| {
        let tp = t.transpose(v[0]).unwrap();
        let sq = t.mul(tp, tp).unwrap();
        t.sum_all(sq)
    }));

    // ── row-structured ops ───────────────────────────────────────────
    let x = vec_in(&mut rng, 12, -2.0, 2.0);
    let mix = vec_in(&mut rng, 12, -1.0, 1.0);
    let mix2 = mix.clone();
    entries.push(sweep_case(
        "softmax_weighted",
        &[vec![3, 4]],
        &[x],
        &{
            move |t: &mut Tape, v: &[Var]| {
                let p = t.softmax(v[0]).unwrap();
                let w = t.constant(vec![3, 4], mix2.clone()).unwrap();
                let q = t.mul(p, w).unwrap();
                t.sum_all(q)
            }
        },
    ));

    let x = vec_in(&mut rng, 12, -2.0, 2.0);
    let pick = vec_in(&mut rng, 12, -1.0, 1.0);
    let pick2 = pick.clone();
    entries.push(sweep_case(
        "log_softmax_weighted",
        &[vec![3, 4]],
        &[x],
        &{
            move |t: &mut Tape, v: &[Var]| {
                let p = t.log_softmax(v[0]).unwrap();
                let w = t.constant(vec![3, 4], pick2.clone()).unwrap();
                let q = t.mul(p, w).unwrap();
                t.sum_all(q)
            }
        },
    ));

    let x = vec_in(&mut rng, 8, -2.0, 2.0);
    let g = vec_in(&mut rng, 4, 0.5, 1.5);
    let b = vec_in(&mut rng, 4, -0.5, 0.5);
    entries.push(sweep_case(
        "layer_norm_square",
        &[vec![2, 4], vec![4], vec![4]],
        &[x, g, b],
        &|t, v| {
            let ln = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            let sq = t.mul(ln, ln).unwrap();
            t.sum_all(sq)
        },
    ));

    // ── shape plumbing ───────────────────────────────────────────────
    let a = vec_in(&mut rng, 6, -1.0, 1.0);
    let b = vec_in(&mut rng, 4, -1.0, 1.0);
    entries.push(sweep_case(
        "concat_slice_reshape",
        &[vec![2, 3], vec![2, 2]],
        &[a, b],
        &|t, v| {
            let cat = t.concat_last(&[v[0], v[1]]).unwrap();
            let piece = t.slice_last(cat, 1, 3).unwrap();
            let r = t.reshape(piece, vec![3, 2]).unwrap();
            let sq = t.mul(r, r).unwrap();
            t.mean_all(sq)
        },
    ));

    let x = vec_in(&mut rng, 2 * 4 * 3, -1.0, 1.0);
    let bias = vec_in(&mut rng, 3, -0.5, 0.5);
    let w = vec_in(&mut rng, 2 * 3, 0.5, 1.5);
    entries.push(sweep_case(
        "add_bias_mul_per_row_softmax",
        &[vec![2, 4, 3], vec![3], vec![2, 3]],
        &[x, bias, w],
        &|t, v| {
            let biased = t.add_bias(v[0], v[1]).unwrap();
            let modulated = t.mul_per_row(biased, v[2]).unwrap();
            let lp = t.log_softmax(modulated).unwrap();
            let p = t.softmax(modulated).unwrap();
            let prod = t.mul(p, lp).unwrap();
            t.sum_all(prod)
        },
    ));

    let x = vec_in(&mut rng, 4 * 4 * 2, -1.0, 1.0);
    entries.push(sweep_case(
        "mix3x3_spatial_mean",
        &[vec![1, 4, 4, 2]],
        &[x],
        &|t, v| {
            let mixed = t.mix3x3(v[0], crate::nets::MIX_KERNEL_3X3).unwrap();
            let pooled = t.spatial_mean(mixed).unwrap();
            let sq = t.mul(pooled, pooled).unwrap();
            t.sum_all(sq)
        },
    ));

    // ── composed network forwards ────────────────────────────────────
    let dims = ModelDims {
        in_channels: 2,
        feature_width: 4,
        classes: 3,
        height: 3,
        width: 3,
        heads: 2,
    };
    let images = vec_in(&mut rng, dims.pixels() * dims.in_channels, 0.05, 0.95);
    let images2 = images.clone();
    let dims_enc = dims.clone();
    let shapes: Vec<Vec<usize>> = vec![
        vec![dims.in_channels, dims.feature_width],
        vec![dims.feature_width],
        vec![dims.feature_width, dims.feature_width],
        vec![dims.feature_width],
        vec![dims.feature_width, dims.classes],
        vec![dims.classes],
    ];
    let data: Vec<Vec<f64>> = shapes
        .iter()
        .map(|s| vec_in(&mut rng, s.iter().product(), -0.6, 0.6))
        .collect();
    entries.push(sweep_case(
        "encode_head_entropy",
        &shapes,
        &data,
        &{
            move |t: &mut Tape, v: &[Var]| {
                let enc = crate::nets::EncoderVars {
                    w1: v[0],
                    b1: v[1],
                    w2: v[2],
                    b2: v[3],
                };
                let head = HeadVars {
                    weight: v[4],
                    bias: v[5],
                };
                let images = t
                    .constant(
                        vec![1, dims_enc.height, dims_enc.width, dims_enc.in_channels],
                        images2.clone(),
                    )
                    .unwrap();
                let feats = encode(t, &enc, images, &dims_enc).unwrap();
                let logits = head_forward(t, &head, &feats, &dims_enc).unwrap();
                let p = t.softmax(logits).unwrap();
                let lp = t.log_softmax(logits).unwrap();
                let prod = t.mul(p, lp).unwrap();
                t.sum_all(prod)
            }
        },
    ));

    // Attention module with three samples and two heads.
    let d = dims.feature_width;
    let c = dims.classes;
    let batch_rows = 3usize;
    let cwt_shapes: Vec<Vec<usize>> = vec![
        vec![d, d],
        vec![2 * d, d],
        vec![2 * d, d],
        vec![d],
        vec![d],
        vec![d, d],
        vec![d],
        vec![d, c],
        vec![c],
    ];
    let mut cwt_data: Vec<Vec<f64>> = cwt_shapes
        .iter()
        .map(|s| vec_in(&mut rng, s.iter().product(), -0.6, 0.6))
        .collect();
    cwt_data[3] = vec_in(&mut rng, d, 0.8, 1.2); // layer norm gain positive
    cwt_data[6] = vec_in(&mut rng, d, 0.2, 0.4); // hidden bias off the kink
    let h_s = vec_in(&mut rng, batch_rows * d, -1.0, 1.0);
    let h_t = vec_in(&mut rng, batch_rows * 2 * d, -1.0, 1.0);
    let dims_cwt = dims.clone();
    entries.push(sweep_case(
        "cwt_attention_weights",
        &cwt_shapes,
        &cwt_data,
        &{
            move |t: &mut Tape, v: &[Var]| {
                let cwt = crate::nets::CwtVars {
                    w_q: v[0],
                    w_k: v[1],
                    w_v: v[2],
                    ln_gain: v[3],
                    ln_bias: v[4],
                    mlp_w1: v[5],
                    mlp_b1: v[6],
                    mlp_w2: v[7],
                    mlp_b2: v[8],
                };
                let h_s_var = t.constant(vec![batch_rows, d], h_s.clone()).unwrap();
                let h_t_var = t.constant(vec![batch_rows, 2 * d], h_t.clone()).unwrap();
                let w = cwt_forward(t, &cwt, h_s_var, h_t_var, &dims_cwt).unwrap();
                let sq = t.mul(w, w).unwrap();
                t.sum_all(sq)
            }
        },
    ));

    // ── the full composed training loss ──────────────────────────────
    entries.push(micro_loss_entry()?);

    Ok(entries)
}
