//! Parameter containers and forward passes: shared encoder, student and
//! teacher classification heads, and the attention module that turns pooled
//! student/teacher features into per-sample class weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Fixed 3×3 neighborhood mixing kernel. Shared by the encoder's spatial
/// pass and the scene generator's humidity blur.
pub const MIX_KERNEL_3X3: [[f64; 3]; 3] = [
    [0.05, 0.10, 0.05],
    [0.10, 0.40, 0.10],
    [0.05, 0.10, 0.05],
];

/// Epsilon for the class-weight module's LayerNorm.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model dims: {0}")]
    Config(String),
}

/// Core dimensionality of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    pub in_channels: usize,
    /// Feature width D.
    pub feature_width: usize,
    /// Class count C.
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    /// Attention head count; must divide `feature_width`.
    pub heads: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            in_channels: 3,
            feature_width: 16,
            classes: 4,
            height: 16,
            width: 16,
            heads: 4,
        }
    }
}

impl ModelDims {
    /// Per-head key width d_k.
    pub fn head_width(&self) -> usize {
        self.feature_width / self.heads
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.heads == 0 || !self.feature_width.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!(
                "feature width {} not divisible by {} heads",
                self.feature_width, self.heads
            )));
        }
        if self.classes < 2 {
            return Err(ModelError::Config(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.height == 0 || self.width == 0 || self.in_channels == 0 {
            return Err(ModelError::Config(
                "height, width and in_channels must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Shared encoder: a per-pixel two-layer MLP followed by one fixed 3×3
/// spatial mixing pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// Linear classification head, `feature_width -> classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Class-weight transformer: multi-head attention with student features as
/// queries and concatenated teacher features as keys/values, then
/// LayerNorm and an MLP down to one weight per class.
#[derive(Debug, Clone, PartialEq)]
pub struct CwtParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
}

/// Everything the trainer owns: encoder, student head, two teacher heads
/// (gradient-free), and the class-weight transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub student: HeadParams,
    pub teacher1: HeadParams,
    pub teacher2: HeadParams,
    pub cwt: CwtParams,
}

/// Per-pixel feature map plus its spatial mean, as tape vars.
#[derive(Debug, Clone, Copy)]
pub struct FeatureVars {
    /// `[B,H,W,D]`
    pub map: Var,
    /// `[B,D]`, the spatial mean of `map`.
    pub pooled: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct CwtVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data: Vec<f64> = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::from_vec(vec![fan_in, fan_out], data)
        .expect("xavier shape always matches data")
        .with_grad()
}

/// Xavier bound for a `fan_in -> fan_out` matrix, exposed for bound scans.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl EncoderParams {
    fn init(rng: &mut ChaCha8Rng, dims: &ModelDims) -> Self {
        let d = dims.feature_width;
        Self {
            w1: xavier(rng, dims.in_channels, d),
            b1: Tensor::zeros(vec![d]).with_grad(),
            w2: xavier(rng, d, d),
            b2: Tensor::zeros(vec![d]).with_grad(),
        }
    }

    pub fn register(&self, tape: &mut Tape) -> EncoderVars {
        EncoderVars {
            w1: tape.leaf(&self.w1),
            b1: tape.leaf(&self.b1),
            w2: tape.leaf(&self.w2),
            b2: tape.leaf(&self.b2),
        }
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }
}

impl HeadParams {
    fn init(rng: &mut ChaCha8Rng, dims: &ModelDims) -> Self {
        Self {
            weight: xavier(rng, dims.feature_width, dims.classes),
            bias: Tensor::zeros(vec![dims.classes]).with_grad(),
        }
    }

    /// Gradient-free copy, the form teacher heads live in.
    pub fn detached(&self) -> Self {
        Self {
            weight: Tensor::from_vec(self.weight.shape().to_vec(), self.weight.data().to_vec())
                .expect("copy preserves shape"),
            bias: Tensor::from_vec(self.bias.shape().to_vec(), self.bias.data().to_vec())
                .expect("copy preserves shape"),
        }
    }

    pub fn register(&self, tape: &mut Tape) -> HeadVars {
        HeadVars {
            weight: tape.leaf(&self.weight),
            bias: tape.leaf(&self.bias),
        }
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("weight", &self.weight), ("bias", &self.bias)]
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![("weight", &mut self.weight), ("bias", &mut self.bias)]
    }
}

impl CwtParams {
    fn init(rng: &mut ChaCha8Rng, dims: &ModelDims) -> Self {
        let d = dims.feature_width;
        let c = dims.classes;
        Self {
            w_q: xavier(rng, d, d),
            w_k: xavier(rng, 2 * d, d),
            w_v: xavier(rng, 2 * d, d),
            ln_gain: Tensor::full(vec![d], 1.0).with_grad(),
            ln_bias: Tensor::zeros(vec![d]).with_grad(),
            mlp_w1: xavier(rng, d, d),
            mlp_b1: Tensor::zeros(vec![d]).with_grad(),
            mlp_w2: xavier(rng, d, c),
            // Output bias starts at one so class weights begin near unity,
            // where the regularizer wants them.
            mlp_b2: Tensor::full(vec![c], 1.0).with_grad(),
        }
    }

    pub fn register(&self, tape: &mut Tape) -> CwtVars {
        CwtVars {
            w_q: tape.leaf(&self.w_q),
            w_k: tape.leaf(&self.w_k),
            w_v: tape.leaf(&self.w_v),
            ln_gain: tape.leaf(&self.ln_gain),
            ln_bias: tape.leaf(&self.ln_bias),
            mlp_w1: tape.leaf(&self.mlp_w1),
            mlp_b1: tape.leaf(&self.mlp_b1),
            mlp_w2: tape.leaf(&self.mlp_w2),
            mlp_b2: tape.leaf(&self.mlp_b2),
        }
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("ln_gain", &self.ln_gain),
            ("ln_bias", &self.ln_bias),
            ("mlp_w1", &self.mlp_w1),
            ("mlp_b1", &self.mlp_b1),
            ("mlp_w2", &self.mlp_w2),
            ("mlp_b2", &self.mlp_b2),
        ]
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("w_q", &mut self.w_q),
            ("w_k", &mut self.w_k),
            ("w_v", &mut self.w_v),
            ("ln_gain", &mut self.ln_gain),
            ("ln_bias", &mut self.ln_bias),
            ("mlp_w1", &mut self.mlp_w1),
            ("mlp_b1", &mut self.mlp_b1),
            ("mlp_w2", &mut self.mlp_w2),
            ("mlp_b2", &mut self.mlp_b2),
        ]
    }
}

/// Deterministic initialization: weights uniform in ±sqrt(6/(fan_in+fan_out)),
/// biases zero (except the class-weight output bias, which starts at one),
/// teacher heads exact gradient-free copies of the student head.
pub fn init_params(dims: &ModelDims, seed: u64) -> Result<ModelParams, ModelError> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let encoder = EncoderParams::init(&mut rng, dims);
    let student = HeadParams::init(&mut rng, dims);
    let teacher1 = student.detached();
    let teacher2 = student.detached();
    let cwt = CwtParams::init(&mut rng, dims);
    Ok(ModelParams {
        encoder,
        student,
        teacher1,
        teacher2,
        cwt,
    })
}

impl ModelParams {
    /// All tensors in checkpoint order, prefixed by component.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (name, t) in self.encoder.named_tensors() {
            out.push((format!("encoder.{name}"), t));
        }
        for (name, t) in self.student.named_tensors() {
            out.push((format!("student.{name}"), t));
        }
        for (name, t) in self.teacher1.named_tensors() {
            out.push((format!("teacher1.{name}"), t));
        }
        for (name, t) in self.teacher2.named_tensors() {
            out.push((format!("teacher2.{name}"), t));
        }
        for (name, t) in self.cwt.named_tensors() {
            out.push((format!("cwt.{name}"), t));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (name, t) in self.encoder.named_tensors_mut() {
            out.push((format!("encoder.{name}"), t));
        }
        for (name, t) in self.student.named_tensors_mut() {
            out.push((format!("student.{name}"), t));
        }
        for (name, t) in self.teacher1.named_tensors_mut() {
            out.push((format!("teacher1.{name}"), t));
        }
        for (name, t) in self.teacher2.named_tensors_mut() {
            out.push((format!("teacher2.{name}"), t));
        }
        for (name, t) in self.cwt.named_tensors_mut() {
            out.push((format!("cwt.{name}"), t));
        }
        out
    }

    /// Gradient-carrying tensors, the optimizer's update set. Teacher heads
    /// are deliberately absent.
    pub fn trainable_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (name, t) in self.encoder.named_tensors_mut() {
            out.push((format!("encoder.{name}"), t));
        }
        for (name, t) in self.student.named_tensors_mut() {
            out.push((format!("student.{name}"), t));
        }
        for (name, t) in self.cwt.named_tensors_mut() {
            out.push((format!("cwt.{name}"), t));
        }
        out
    }
}

/// Runs the shared encoder over a `[B,H,W,in_channels]` image batch.
pub fn encode(
    tape: &mut Tape,
    enc: &EncoderVars,
    images: Var,
    dims: &ModelDims,
) -> Result<FeatureVars, ModelError> {
    let shape = tape.shape(images).to_vec();
    if shape.len() != 4
        || shape[1] != dims.height
        || shape[2] != dims.width
        || shape[3] != dims.in_channels
    {
        return Err(TensorError::BadShape {
            op: "encode",
            expected: format!(
                "[B,{},{},{}] image batch",
                dims.height, dims.width, dims.in_channels
            ),
            got: shape,
        }
        .into());
    }
    let batch = shape[0];
    let pixels = batch * dims.pixels();
    let flat = tape.reshape(images, vec![pixels, dims.in_channels])?;
    let h1 = tape.matmul(flat, enc.w1)?;
    let h1 = tape.add_bias(h1, enc.b1)?;
    let h1 = tape.relu(h1);
    let h2 = tape.matmul(h1, enc.w2)?;
    let h2 = tape.add_bias(h2, enc.b2)?;
    let h2 = tape.relu(h2);
    let map = tape.reshape(
        h2,
        vec![batch, dims.height, dims.width, dims.feature_width],
    )?;
    let map = tape.mix3x3(map, MIX_KERNEL_3X3)?;
    let pooled = tape.spatial_mean(map)?;
    Ok(FeatureVars { map, pooled })
}

/// Per-pixel logits from a classification head: `[B,H,W,D] -> [B,H,W,C]`.
pub fn head_forward(
    tape: &mut Tape,
    head: &HeadVars,
    features: &FeatureVars,
    dims: &ModelDims,
) -> Result<Var, ModelError> {
    let shape = tape.shape(features.map).to_vec();
    if shape.len() != 4 || shape[3] != dims.feature_width {
        return Err(TensorError::BadShape {
            op: "head_forward",
            expected: format!("[B,H,W,{}] feature map", dims.feature_width),
            got: shape,
        }
        .into());
    }
    let (batch, h, w) = (shape[0], shape[1], shape[2]);
    let flat = tape.reshape(features.map, vec![batch * h * w, dims.feature_width])?;
    let logits = tape.matmul(flat, head.weight)?;
    let logits = tape.add_bias(logits, head.bias)?;
    Ok(tape.reshape(logits, vec![batch, h, w, dims.classes])?)
}

/// Scaled dot-product attention over the batch axis, one softmax per head.
/// Queries, keys and values are `[B,D]`; heads split the last axis.
pub fn multi_head_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<Var, ModelError> {
    let d = *tape.shape(q).last().expect("q has a last axis");
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(ModelError::Config(format!(
            "feature width {d} not divisible by {heads} heads"
        )));
    }
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut outputs = Vec::with_capacity(heads);
    for i in 0..heads {
        let q_i = tape.slice_last(q, i * dk, dk)?;
        let k_i = tape.slice_last(k, i * dk, dk)?;
        let v_i = tape.slice_last(v, i * dk, dk)?;
        let k_t = tape.transpose(k_i)?;
        let scores = tape.matmul(q_i, k_t)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax(scores)?;
        outputs.push(tape.matmul(attn, v_i)?);
    }
    Ok(tape.concat_last(&outputs)?)
}

/// Generates per-sample class weights `[B,C]` from pooled student features
/// `h_s [B,D]` and concatenated teacher features `h_t [B,2D]`.
pub fn cwt_forward(
    tape: &mut Tape,
    cwt: &CwtVars,
    h_s: Var,
    h_t: Var,
    dims: &ModelDims,
) -> Result<Var, ModelError> {
    let d = dims.feature_width;
    let s_shape = tape.shape(h_s).to_vec();
    let t_shape = tape.shape(h_t).to_vec();
    if s_shape.len() != 2 || s_shape[1] != d {
        return Err(TensorError::BadShape {
            op: "cwt_forward",
            expected: format!("[B,{d}] student features"),
            got: s_shape,
        }
        .into());
    }
    if t_shape.len() != 2 || t_shape[1] != 2 * d || t_shape[0] != s_shape[0] {
        return Err(TensorError::BadShape {
            op: "cwt_forward",
            expected: format!("[{},{}] teacher features", s_shape[0], 2 * d),
            got: t_shape,
        }
        .into());
    }
    let q = tape.matmul(h_s, cwt.w_q)?;
    let k = tape.matmul(h_t, cwt.w_k)?;
    let v = tape.matmul(h_t, cwt.w_v)?;
    let attended = multi_head_attention(tape, q, k, v, dims.heads)?;
    let normed = tape.layer_norm(attended, cwt.ln_gain, cwt.ln_bias, LAYER_NORM_EPS)?;
    let hidden = tape.matmul(normed, cwt.mlp_w1)?;
    let hidden = tape.add_bias(hidden, cwt.mlp_b1)?;
    let hidden = tape.relu(hidden);
    let weights = tape.matmul(hidden, cwt.mlp_w2)?;
    Ok(tape.add_bias(weights, cwt.mlp_b2)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{compare_gradients, FD_EPS, FD_TOL};
    use proptest::prelude::*;
    use rand::Rng;

    fn micro_dims() -> ModelDims {
        ModelDims {
            in_channels: 3,
            feature_width: 4,
            classes: 3,
            height: 4,
            width: 4,
            heads: 2,
        }
    }

    fn random_images(dims: &ModelDims, batch: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = batch * dims.pixels() * dims.in_channels;
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        Tensor::from_vec(
            vec![batch, dims.height, dims.width, dims.in_channels],
            data,
        )
        .unwrap()
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let dims = ModelDims::default();
        let a = init_params(&dims, 7).unwrap();
        let b = init_params(&dims, 7).unwrap();
        assert_eq!(a, b);
        let c = init_params(&dims, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn teachers_start_as_exact_student_copies() {
        let params = init_params(&ModelDims::default(), 3).unwrap();
        assert_eq!(params.teacher1.weight.data(), params.student.weight.data());
        assert_eq!(params.teacher2.bias.data(), params.student.bias.data());
        assert!(!params.teacher1.weight.requires_grad());
        assert!(!params.teacher2.weight.requires_grad());
        assert!(params.student.weight.requires_grad());
    }

    #[test]
    fn init_weights_respect_xavier_bounds() {
        let dims = ModelDims::default();
        let params = init_params(&dims, 11).unwrap();
        let d = dims.feature_width;
        let checks: Vec<(&Tensor, f64)> = vec![
            (&params.encoder.w1, xavier_bound(dims.in_channels, d)),
            (&params.encoder.w2, xavier_bound(d, d)),
            (&params.student.weight, xavier_bound(d, dims.classes)),
            (&params.cwt.w_q, xavier_bound(d, d)),
            (&params.cwt.w_k, xavier_bound(2 * d, d)),
            (&params.cwt.w_v, xavier_bound(2 * d, d)),
            (&params.cwt.mlp_w1, xavier_bound(d, d)),
            (&params.cwt.mlp_w2, xavier_bound(d, dims.classes)),
        ];
        for (tensor, bound) in checks {
            for v in tensor.data() {
                assert!(v.abs() <= bound, "|{v}| exceeds bound {bound}");
            }
        }
        assert!(params.encoder.b1.data().iter().all(|v| *v == 0.0));
        assert!(params.cwt.mlp_b2.data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn invalid_dims_are_rejected() {
        let dims = ModelDims {
            heads: 3, // does not divide 16
            ..ModelDims::default()
        };
        assert!(matches!(
            init_params(&dims, 0),
            Err(ModelError::Config(_))
        ));
        let dims = ModelDims {
            classes: 1,
            ..ModelDims::default()
        };
        assert!(init_params(&dims, 0).is_err());
    }

    #[test]
    fn encode_zero_image_with_zero_biases_gives_zero_features() {
        let dims = micro_dims();
        let params = init_params(&dims, 5).unwrap();
        let mut tape = Tape::new();
        let enc = params.encoder.register(&mut tape);
        let zero = Tensor::zeros(vec![2, dims.height, dims.width, dims.in_channels]);
        let images = tape.leaf(&zero);
        let feats = encode(&mut tape, &enc, images, &dims).unwrap();
        assert!(tape.value(feats.map).iter().all(|v| *v == 0.0));
        assert!(tape.value(feats.pooled).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn encode_identical_images_give_identical_rows() {
        let dims = micro_dims();
        let params = init_params(&dims, 5).unwrap();
        let one = random_images(&dims, 1, 9);
        let mut stacked = one.data().to_vec();
        stacked.extend_from_slice(one.data());
        let images = Tensor::from_vec(
            vec![2, dims.height, dims.width, dims.in_channels],
            stacked,
        )
        .unwrap();
        let mut tape = Tape::new();
        let enc = params.encoder.register(&mut tape);
        let images = tape.leaf(&images);
        let feats = encode(&mut tape, &enc, images, &dims).unwrap();
        let pooled = tape.value(feats.pooled);
        let d = dims.feature_width;
        assert_eq!(&pooled[..d], &pooled[d..]);
    }

    #[test]
    fn pooled_row_is_spatial_mean_of_map() {
        let dims = micro_dims();
        let params = init_params(&dims, 5).unwrap();
        let images = random_images(&dims, 2, 13);
        let mut tape = Tape::new();
        let enc = params.encoder.register(&mut tape);
        let images = tape.leaf(&images);
        let feats = encode(&mut tape, &enc, images, &dims).unwrap();
        let map = tape.value(feats.map);
        let pooled = tape.value(feats.pooled);
        let (px, d) = (dims.pixels(), dims.feature_width);
        for b in 0..2 {
            for di in 0..d {
                let mean: f64 = (0..px).map(|p| map[(b * px + p) * d + di]).sum::<f64>()
                    / px as f64;
                assert!((mean - pooled[b * d + di]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn encode_rejects_wrong_image_dims() {
        let dims = micro_dims();
        let params = init_params(&dims, 5).unwrap();
        let mut tape = Tape::new();
        let enc = params.encoder.register(&mut tape);
        let bad = Tensor::zeros(vec![1, dims.height, dims.width, dims.in_channels + 1]);
        let images = tape.leaf(&bad);
        assert!(encode(&mut tape, &enc, images, &dims).is_err());
    }

    #[test]
    fn head_with_zero_weights_emits_bias_everywhere() {
        let dims = micro_dims();
        let head = HeadParams {
            weight: Tensor::zeros(vec![dims.feature_width, dims.classes]),
            bias: Tensor::from_vec(vec![dims.classes], vec![1.0, 0.0, 0.0]).unwrap(),
        };
        let params = init_params(&dims, 5).unwrap();
        let images = random_images(&dims, 1, 21);
        let mut tape = Tape::new();
        let enc = params.encoder.register(&mut tape);
        let head_vars = head.register(&mut tape);
        let images = tape.leaf(&images);
        let feats = encode(&mut tape, &enc, images, &dims).unwrap();
        let logits = head_forward(&mut tape, &head_vars, &feats, &dims).unwrap();
        for pixel in tape.value(logits).chunks(dims.classes) {
            assert_eq!(pixel, &[1.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn head_is_linear_in_features() {
        let dims = micro_dims();
        let params = init_params(&dims, 5).unwrap();
        let head = HeadParams {
            weight: params.student.weight.clone(),
            bias: Tensor::zeros(vec![dims.classes]),
        };

        let run = |scale: f64| -> Vec<f64> {
            let mut tape = Tape::new();
            let head_vars = head.register(&mut tape);
            let n = dims.pixels() * dims.feature_width;
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let map_data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
            let map = tape
                .constant(
                    vec![1, dims.height, dims.width, dims.feature_width],
                    map_data,
                )
                .unwrap();
            let pooled = tape.spatial_mean(map).unwrap();
            let feats = FeatureVars { map, pooled };
            let logits = head_forward(&mut tape, &head_vars, &feats, &dims).unwrap();
            tape.value(logits).to_vec()
        };
        let ones = run(1.0);
        let doubled = run(2.0);
        for (a, b) in ones.iter().zip(&doubled) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn head_gradient_matches_finite_differences() {
        let dims = micro_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let weight: Vec<f64> = (0..dims.feature_width * dims.classes)
            .map(|_| rng.random_range(-0.5..0.5))
            .collect();
        let bias: Vec<f64> = (0..dims.classes).map(|_| rng.random_range(-0.5..0.5)).collect();
        let map_len = dims.pixels() * dims.feature_width;
        let map: Vec<f64> = (0..map_len).map(|_| rng.random_range(-1.0..1.0)).collect();

        let shapes: Vec<Vec<usize>> = vec![
            vec![dims.feature_width, dims.classes],
            vec![dims.classes],
        ];
        let inputs = vec![weight.clone(), bias.clone()];
        let dims2 = dims.clone();
        let map2 = map.clone();
        let build = move |t: &mut Tape, vars: &[Var]| {
            let map_var = t
                .constant(
                    vec![1, dims2.height, dims2.width, dims2.feature_width],
                    map2.clone(),
                )
                .unwrap();
            let pooled = t.spatial_mean(map_var).unwrap();
            let feats = FeatureVars {
                map: map_var,
                pooled,
            };
            let head_vars = HeadVars {
                weight: vars[0],
                bias: vars[1],
            };
            let logits = head_forward(t, &head_vars, &feats, &dims2).unwrap();
            let sm = t.softmax(logits).unwrap();
            let lg = t.log_softmax(logits).unwrap();
            let prod = t.mul(sm, lg).unwrap();
            t.sum_all(prod)
        };

        let mut tape = Tape::new();
        let vars: Vec<Var> = shapes
            .iter()
            .zip(&inputs)
            .map(|(s, d)| {
                tape.leaf(
                    &Tensor::from_vec(s.clone(), d.clone())
                        .unwrap()
                        .with_grad(),
                )
            })
            .collect();
        let loss = build(&mut tape, &vars);
        tape.backward(loss).unwrap();
        let analytic: Vec<f64> = vars
            .iter()
            .flat_map(|v| tape.grad(*v).unwrap().to_vec())
            .collect();
        let flat: Vec<f64> = inputs.iter().flatten().copied().collect();
        let mut eval = |probe: &[f64]| {
            let mut t = Tape::new();
            let mut offset = 0;
            let vars: Vec<Var> = shapes
                .iter()
                .map(|s| {
                    let n: usize = s.iter().product();
                    let v = t.constant(s.clone(), probe[offset..offset + n].to_vec()).unwrap();
                    offset += n;
                    v
                })
                .collect();
            let loss = build(&mut t, &vars);
            t.scalar_value(loss)
        };
        let report = compare_gradients(&mut eval, &flat, &analytic, FD_EPS);
        assert!(report.passes(FD_TOL), "rel err {}", report.max_rel_err);
    }

    #[test]
    fn single_sample_attention_returns_value_row() {
        // One query against one key: softmax weight is 1, output equals V.
        let mut tape = Tape::new();
        let q = tape.constant(vec![1, 4], vec![0.3, -0.2, 0.9, 0.1]).unwrap();
        let k = tape.constant(vec![1, 4], vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        let v = tape.constant(vec![1, 4], vec![0.7, -0.4, 0.2, 1.5]).unwrap();
        let out = multi_head_attention(&mut tape, q, k, v, 2).unwrap();
        assert_eq!(tape.value(out), tape.value(v));
    }

    #[test]
    fn cwt_matches_hand_rolled_attention_oracle() {
        // B=2, D=2, heads=1: every stage recomputed with plain loops.
        let dims = ModelDims {
            in_channels: 1,
            feature_width: 2,
            classes: 2,
            height: 1,
            width: 1,
            heads: 1,
        };
        let h_s = [[0.5, -0.3], [0.2, 0.8]];
        let h_t = [[0.1, 0.4, -0.2, 0.3], [0.6, -0.5, 0.2, 0.1]];
        let w_q = [[0.3, -0.1], [0.2, 0.5]];
        let w_k = [[0.4, 0.1], [-0.3, 0.2], [0.1, 0.6], [0.2, -0.4]];
        let w_v = [[0.5, -0.2], [0.1, 0.3], [-0.4, 0.2], [0.3, 0.1]];
        let mlp_w1 = [[0.6, -0.3], [0.2, 0.4]];
        let mlp_w2 = [[0.3, 0.2], [-0.1, 0.5]];
        let ln_gain = [1.1, 0.9];
        let ln_bias = [0.05, -0.05];
        let mlp_b1 = [0.01, -0.02];
        let mlp_b2 = [1.0, 1.0];

        // Independent route: scalar loops, no tape.
        let mut q = [[0.0; 2]; 2];
        let mut k = [[0.0; 2]; 2];
        let mut v = [[0.0; 2]; 2];
        for b in 0..2 {
            for j in 0..2 {
                for i in 0..2 {
                    q[b][j] += h_s[b][i] * w_q[i][j];
                }
                for i in 0..4 {
                    k[b][j] += h_t[b][i] * w_k[i][j];
                    v[b][j] += h_t[b][i] * w_v[i][j];
                }
            }
        }
        let scale = 1.0 / (2.0f64).sqrt();
        let mut expected = [[0.0; 2]; 2];
        for b in 0..2 {
            let s0 = (q[b][0] * k[0][0] + q[b][1] * k[0][1]) * scale;
            let s1 = (q[b][0] * k[1][0] + q[b][1] * k[1][1]) * scale;
            let m = s0.max(s1);
            let (e0, e1) = ((s0 - m).exp(), (s1 - m).exp());
            let z = e0 + e1;
            let (a0, a1) = (e0 / z, e1 / z);
            let attn = [a0 * v[0][0] + a1 * v[1][0], a0 * v[0][1] + a1 * v[1][1]];
            let mean = (attn[0] + attn[1]) / 2.0;
            let var = ((attn[0] - mean).powi(2) + (attn[1] - mean).powi(2)) / 2.0;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            let normed = [
                ln_gain[0] * (attn[0] - mean) * inv + ln_bias[0],
                ln_gain[1] * (attn[1] - mean) * inv + ln_bias[1],
            ];
            let hid = [
                (normed[0] * mlp_w1[0][0] + normed[1] * mlp_w1[1][0] + mlp_b1[0]).max(0.0),
                (normed[0] * mlp_w1[0][1] + normed[1] * mlp_w1[1][1] + mlp_b1[1]).max(0.0),
            ];
            for c in 0..2 {
                expected[b][c] = hid[0] * mlp_w2[0][c] + hid[1] * mlp_w2[1][c] + mlp_b2[c];
            }
        }

        // Implementation route.
        let flat = |m: &[[f64; 2]]| -> Vec<f64> { m.iter().flatten().copied().collect() };
        let cwt = CwtParams {
            w_q: Tensor::from_vec(vec![2, 2], flat(&w_q)).unwrap(),
            w_k: Tensor::from_vec(vec![4, 2], w_k.iter().flatten().copied().collect()).unwrap(),
            w_v: Tensor::from_vec(vec![4, 2], w_v.iter().flatten().copied().collect()).unwrap(),
            ln_gain: Tensor::from_vec(vec![2], ln_gain.to_vec()).unwrap(),
            ln_bias: Tensor::from_vec(vec![2], ln_bias.to_vec()).unwrap(),
            mlp_w1: Tensor::from_vec(vec![2, 2], flat(&mlp_w1)).unwrap(),
            mlp_b1: Tensor::from_vec(vec![2], mlp_b1.to_vec()).unwrap(),
            mlp_w2: Tensor::from_vec(vec![2, 2], flat(&mlp_w2)).unwrap(),
            mlp_b2: Tensor::from_vec(vec![2], mlp_b2.to_vec()).unwrap(),
        };
        let mut tape = Tape::new();
        let cwt_vars = cwt.register(&mut tape);
        let h_s_var = tape.constant(vec![2, 2], flat(&h_s)).unwrap();
        let h_t_var = tape
            .constant(vec![2, 4], h_t.iter().flatten().copied().collect())
            .unwrap();
        let w = cwt_forward(&mut tape, &cwt_vars, h_s_var, h_t_var, &dims).unwrap();
        let got = tape.value(w);
        for b in 0..2 {
            for c in 0..2 {
                assert!(
                    (got[b * 2 + c] - expected[b][c]).abs() < 1e-10,
                    "w[{b}][{c}] = {} expected {}",
                    got[b * 2 + c],
                    expected[b][c]
                );
            }
        }
    }

    #[test]
    fn cwt_rejects_bad_widths() {
        let dims = micro_dims();
        let params = init_params(&dims, 5).unwrap();
        let mut tape = Tape::new();
        let cwt = params.cwt.register(&mut tape);
        let h_s = tape.constant(vec![2, dims.feature_width], vec![0.0; 8]).unwrap();
        let bad_h_t = tape.constant(vec![2, dims.feature_width], vec![0.0; 8]).unwrap();
        assert!(cwt_forward(&mut tape, &cwt, h_s, bad_h_t, &dims).is_err());
    }

    proptest! {
        /// Permuting the batch permutes encoder outputs identically.
        #[test]
        fn encode_is_batch_order_equivariant(seed in 0u64..32) {
            let dims = micro_dims();
            let params = init_params(&dims, 5).unwrap();
            let a = random_images(&dims, 1, seed);
            let b = random_images(&dims, 1, seed.wrapping_add(1000));

            let pooled_of = |first: &Tensor, second: &Tensor| -> Vec<f64> {
                let mut data = first.data().to_vec();
                data.extend_from_slice(second.data());
                let images = Tensor::from_vec(
                    vec![2, dims.height, dims.width, dims.in_channels],
                    data,
                )
                .unwrap();
                let mut tape = Tape::new();
                let enc = params.encoder.register(&mut tape);
                let images = tape.leaf(&images);
                let feats = encode(&mut tape, &enc, images, &dims).unwrap();
                tape.value(feats.pooled).to_vec()
            };
            let ab = pooled_of(&a, &b);
            let ba = pooled_of(&b, &a);
            let d = dims.feature_width;
            prop_assert_eq!(&ab[..d], &ba[d..]);
            prop_assert_eq!(&ab[d..], &ba[..d]);
        }

        /// Duplicating every batch row leaves each row's class weights
        /// unchanged: attention renormalizes over the duplicated keys.
        #[test]
        fn cwt_is_invariant_to_batch_duplication(seed in 0u64..32) {
            let dims = micro_dims();
            let params = init_params(&dims, 5).unwrap();
            let d = dims.feature_width;
            let batch = 3usize;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h_s: Vec<f64> = (0..batch * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let h_t: Vec<f64> = (0..batch * 2 * d).map(|_| rng.random_range(-1.0..1.0)).collect();

            let weights_of = |s: &[f64], t: &[f64], b: usize| -> Vec<f64> {
                let mut tape = Tape::new();
                let cwt = params.cwt.register(&mut tape);
                let h_s = tape.constant(vec![b, d], s.to_vec()).unwrap();
                let h_t = tape.constant(vec![b, 2 * d], t.to_vec()).unwrap();
                let w = cwt_forward(&mut tape, &cwt, h_s, h_t, &dims).unwrap();
                tape.value(w).to_vec()
            };

            let base = weights_of(&h_s, &h_t, batch);
            let mut dup_s = h_s.clone();
            dup_s.extend_from_slice(&h_s);
            let mut dup_t = h_t.clone();
            dup_t.extend_from_slice(&h_t);
            let doubled = weights_of(&dup_s, &dup_t, 2 * batch);
            let c = dims.classes;
            for b in 0..batch {
                for j in 0..c {
                    let orig = base[b * c + j];
                    let dup = doubled[b * c + j];
                    prop_assert!((orig - dup).abs() < 1e-12, "{orig} vs {dup}");
                }
            }
        }
    }
}
