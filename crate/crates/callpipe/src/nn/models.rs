//! The desk-scale model zoo.
//!
//! Three convolutional families share one parameter store and one wiring
//! layer:
//!
//! * `cnn_small` — a plain conv/pool stack with two dense layers;
//! * `resnet_tiny` — a stem plus three residual stages (widths 1×/2×/4×,
//!   stride 2 entering stages 2–3) with projected skips on shape changes;
//! * `vgg_tiny` — three stages of doubled 3×3 convolutions with pooling.
//!
//! Every final classifier is named `head.linear` so finetuning can freeze
//! everything else by name. With `use_pcen_frontend`, a trainable
//! per-channel energy normalization (scalar alpha/delta/root, fixed
//! smoothing) runs on the input grid inside the model so those scalars
//! receive gradients.

use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dsp::PcenParams;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

use super::tape::{NodeId, Tape};
use super::tensor::Tensor;

/// Batch-norm epsilon used by the model zoo.
pub const BN_EPS: f64 = 1e-5;
/// Running-statistics update rate: `run ← (1−m)·run + m·batch`.
pub const BN_MOMENTUM: f64 = 0.1;

/// Architecture identifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    CnnSmall,
    ResnetTiny,
    VggTiny,
}

impl Architecture {
    pub fn id(self) -> &'static str {
        match self {
            Architecture::CnnSmall => "cnn_small",
            Architecture::ResnetTiny => "resnet_tiny",
            Architecture::VggTiny => "vgg_tiny",
        }
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Architecture> {
        match s {
            "cnn_small" => Ok(Architecture::CnnSmall),
            "resnet_tiny" => Ok(Architecture::ResnetTiny),
            "vgg_tiny" => Ok(Architecture::VggTiny),
            other => Err(Error::InvalidArgument(format!(
                "unknown architecture `{other}` (expected cnn_small, resnet_tiny, or vgg_tiny)"
            ))),
        }
    }
}

/// Everything needed to rebuild a model skeleton.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub num_classes: usize,
    /// Input frequency bins (`F` of the `[1 × F × T]` input).
    pub input_bins: usize,
    /// Input time frames (`T`).
    pub input_frames: usize,
    pub use_pcen_frontend: bool,
    pub pcen: PcenParams,
    /// Channel width of the first stage; later stages double it.
    pub base_width: usize,
    /// Width of the penultimate dense layer (cnn_small, vgg_tiny).
    pub hidden_dim: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("num_classes must be >= 2".into()));
        }
        if self.base_width == 0 || self.hidden_dim == 0 {
            return Err(Error::InvalidArgument("widths must be positive".into()));
        }
        let min_input = match self.architecture {
            Architecture::CnnSmall => 4,
            Architecture::ResnetTiny => 4,
            Architecture::VggTiny => 8,
        };
        if self.input_bins < min_input || self.input_frames < min_input {
            return Err(Error::InvalidArgument(format!(
                "{} needs input of at least {min_input}x{min_input}, got {}x{}",
                self.architecture.id(),
                self.input_bins,
                self.input_frames
            )));
        }
        self.pcen.validate()
    }
}

/// A named tensor with an optional gradient and a trainability flag.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub trainable: bool,
}

/// Batch-norm running statistics (not gradient-carrying).
#[derive(Debug, Clone)]
pub struct BnBuffer {
    pub name: String,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

/// A built model: spec, parameters, and batch-norm buffers.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: Vec<Parameter>,
    pub bn_buffers: Vec<BnBuffer>,
}

impl Model {
    pub fn param(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Total scalar count across all parameters.
    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }
}

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

struct Builder {
    rng: ChaCha8Rng,
    params: Vec<Parameter>,
    buffers: Vec<BnBuffer>,
}

impl Builder {
    /// He-uniform weight: `U(−b, b)` with `b = sqrt(6 / fan_in)`.
    fn he_uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = (6.0 / fan_in as f64).sqrt();
        let data = (0..shape.iter().product::<usize>())
            .map(|_| self.rng.gen_range(-bound..bound) as f32)
            .collect();
        Tensor::from_vec(shape, data).expect("sized data")
    }

    fn push(&mut self, name: String, value: Tensor, trainable: bool) {
        debug_assert!(!self.params.iter().any(|p| p.name == name), "duplicate {name}");
        self.params.push(Parameter { name, value, grad: None, trainable });
    }

    fn conv(&mut self, prefix: &str, cout: usize, cin: usize, k: usize) {
        let weight = self.he_uniform(&[cout, cin, k, k], cin * k * k);
        self.push(format!("{prefix}.weight"), weight, true);
        self.push(format!("{prefix}.bias"), Tensor::zeros(&[cout]), true);
    }

    fn linear(&mut self, prefix: &str, din: usize, dout: usize) {
        let weight = self.he_uniform(&[din, dout], din);
        self.push(format!("{prefix}.weight"), weight, true);
        self.push(format!("{prefix}.bias"), Tensor::zeros(&[dout]), true);
    }

    fn bn(&mut self, prefix: &str, channels: usize) {
        self.push(
            format!("{prefix}.gamma"),
            Tensor::from_vec(&[channels], vec![1.0; channels]).expect("sized"),
            true,
        );
        self.push(format!("{prefix}.beta"), Tensor::zeros(&[channels]), true);
        self.buffers.push(BnBuffer {
            name: prefix.to_string(),
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        });
    }
}

fn pool_out(len: usize) -> usize {
    (len - 2) / 2 + 1
}

/// Builds and initializes a model: He-uniform weights (fan-in), zero
/// biases, batch-norm gamma 1 / beta 0, deterministic under `seed`.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut b = Builder { rng: rng::derive(seed, Stream::Init), params: Vec::new(), buffers: Vec::new() };

    if spec.use_pcen_frontend {
        let t = spec.pcen.trainable;
        b.push("pcen.alpha".into(), Tensor::scalar(spec.pcen.alpha as f32), t);
        b.push("pcen.delta".into(), Tensor::scalar(spec.pcen.delta as f32), t);
        b.push("pcen.root".into(), Tensor::scalar(spec.pcen.root as f32), t);
    }

    let w = spec.base_width;
    let (f, t) = (spec.input_bins, spec.input_frames);
    match spec.architecture {
        Architecture::CnnSmall => {
            b.conv("conv1", w, 1, 5);
            b.conv("conv2", 2 * w, w, 5);
            let (fo, to) = (pool_out(pool_out(f)), pool_out(pool_out(t)));
            b.linear("fc1", 2 * w * fo * to, spec.hidden_dim);
            b.linear("head.linear", spec.hidden_dim, spec.num_classes);
        }
        Architecture::ResnetTiny => {
            b.conv("stem.conv", w, 1, 3);
            b.bn("stem.bn", w);
            for (i, (cin, cout, stride)) in
                [(w, w, 1usize), (w, 2 * w, 2), (2 * w, 4 * w, 2)].iter().enumerate()
            {
                let prefix = format!("stage{}", i + 1);
                b.conv(&format!("{prefix}.conv1"), *cout, *cin, 3);
                b.bn(&format!("{prefix}.bn1"), *cout);
                b.conv(&format!("{prefix}.conv2"), *cout, *cout, 3);
                b.bn(&format!("{prefix}.bn2"), *cout);
                if cin != cout || *stride != 1 {
                    let weight = b.he_uniform(&[*cout, *cin, 1, 1], *cin);
                    b.push(format!("{prefix}.proj.weight"), weight, true);
                    b.push(format!("{prefix}.proj.bias"), Tensor::zeros(&[*cout]), true);
                    b.bn(&format!("{prefix}.proj_bn"), *cout);
                }
            }
            b.linear("head.linear", 4 * w, spec.num_classes);
        }
        Architecture::VggTiny => {
            let mut cin = 1;
            for (i, mult) in [1usize, 2, 4].iter().enumerate() {
                let cout = w * mult;
                let prefix = format!("stage{}", i + 1);
                b.conv(&format!("{prefix}.conv1"), cout, cin, 3);
                b.conv(&format!("{prefix}.conv2"), cout, cout, 3);
                cin = cout;
            }
            let (fo, to) = (pool_out(pool_out(pool_out(f))), pool_out(pool_out(pool_out(t))));
            b.linear("fc1", 4 * w * fo * to, spec.hidden_dim);
            b.linear("head.linear", spec.hidden_dim, spec.num_classes);
        }
    }

    Ok(Model { spec: spec.clone(), params: b.params, bn_buffers: b.buffers })
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

/// Forward execution mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Record the tape with batch statistics; batch-norm updates are
    /// reported so the caller can fold them into the model.
    Train,
    /// Deterministic, side-effect-free inference using running statistics.
    Eval,
}

/// A completed forward pass: the tape, the logits node, and bookkeeping
/// to route gradients and batch-norm updates back to the model.
pub struct Forward {
    pub tape: Tape,
    pub logits: NodeId,
    param_nodes: Vec<Option<NodeId>>,
    bn_stats: Vec<(usize, Vec<f32>, Vec<f32>)>,
}

impl Forward {
    /// Copies gradients from the tape onto the model's trainable
    /// parameters. Call after [`Tape::backward`].
    pub fn write_grads(&self, model: &mut Model) -> Result<()> {
        for (i, node) in self.param_nodes.iter().enumerate() {
            if !model.params[i].trainable {
                model.params[i].grad = None;
                continue;
            }
            if let Some(node) = node {
                model.params[i].grad = self.tape.grad(*node).cloned();
            }
        }
        Ok(())
    }

    /// Folds train-mode batch statistics into the running buffers:
    /// `run ← (1−momentum)·run + momentum·batch`.
    pub fn apply_bn_updates(&self, model: &mut Model, momentum: f64) {
        for (buffer, mean, var) in &self.bn_stats {
            let buf = &mut model.bn_buffers[*buffer];
            for (r, &b) in buf.mean.iter_mut().zip(mean) {
                *r = ((1.0 - momentum) * *r as f64 + momentum * b as f64) as f32;
            }
            for (r, &b) in buf.var.iter_mut().zip(var) {
                *r = ((1.0 - momentum) * *r as f64 + momentum * b as f64) as f32;
            }
        }
    }
}

struct Wire<'m> {
    model: &'m Model,
    tape: Tape,
    mode: Mode,
    param_nodes: Vec<Option<NodeId>>,
    bn_stats: Vec<(usize, Vec<f32>, Vec<f32>)>,
}

impl<'m> Wire<'m> {
    fn new(model: &'m Model, mode: Mode) -> Wire<'m> {
        Wire {
            model,
            tape: Tape::new(),
            mode,
            param_nodes: vec![None; model.params.len()],
            bn_stats: Vec::new(),
        }
    }

    fn p(&mut self, name: &str) -> Result<NodeId> {
        let index = self
            .model
            .params
            .iter()
            .position(|p| p.name == name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter `{name}`")))?;
        if let Some(id) = self.param_nodes[index] {
            return Ok(id);
        }
        let p = &self.model.params[index];
        let id = self.tape.param(p.value.clone(), p.trainable);
        self.param_nodes[index] = Some(id);
        Ok(id)
    }

    fn conv(&mut self, x: NodeId, prefix: &str, stride: usize, pad: usize) -> Result<NodeId> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        self.tape.conv2d(x, w, b, stride, pad)
    }

    fn linear(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        self.tape.linear(x, w, b)
    }

    fn bn(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let gamma = self.p(&format!("{prefix}.gamma"))?;
        let beta = self.p(&format!("{prefix}.beta"))?;
        let buffer = self
            .model
            .bn_buffers
            .iter()
            .position(|b| b.name == prefix)
            .ok_or_else(|| Error::InvalidArgument(format!("no batchnorm buffer `{prefix}`")))?;
        let buf = &self.model.bn_buffers[buffer];
        let (id, stats) = match self.mode {
            Mode::Train => self.tape.batchnorm2d(x, gamma, beta, BN_EPS, None)?,
            Mode::Eval => {
                self.tape.batchnorm2d(x, gamma, beta, BN_EPS, Some((&buf.mean, &buf.var)))?
            }
        };
        if let Some((mean, var)) = stats {
            self.bn_stats.push((buffer, mean, var));
        }
        Ok(id)
    }

    fn pool(&mut self, x: NodeId) -> Result<NodeId> {
        self.tape.maxpool2d(x, 2, 2)
    }
}

fn wire_residual_block(
    w: &mut Wire<'_>,
    x: NodeId,
    prefix: &str,
    stride: usize,
    project: bool,
) -> Result<NodeId> {
    let y = w.conv(x, &format!("{prefix}.conv1"), stride, 1)?;
    let y = w.bn(y, &format!("{prefix}.bn1"))?;
    let y = w.tape.relu(y);
    let y = w.conv(y, &format!("{prefix}.conv2"), 1, 1)?;
    let y = w.bn(y, &format!("{prefix}.bn2"))?;
    let skip = if project {
        let s = w.conv(x, &format!("{prefix}.proj"), stride, 0)?;
        w.bn(s, &format!("{prefix}.proj_bn"))?
    } else {
        x
    };
    let sum = w.tape.add(y, skip)?;
    Ok(w.tape.relu(sum))
}

/// Runs the model on a `[N, 1, F, T]` batch.
///
/// Train mode records batch statistics for the caller to apply; eval mode
/// is deterministic and never mutates anything.
pub fn forward(model: &Model, batch: &Tensor, mode: Mode) -> Result<Forward> {
    let spec = &model.spec;
    let shape = batch.shape();
    if shape.len() != 4
        || shape[1] != 1
        || shape[2] != spec.input_bins
        || shape[3] != spec.input_frames
    {
        return Err(Error::Shape(format!(
            "batch {shape:?} does not match model input [N, 1, {}, {}]",
            spec.input_bins, spec.input_frames
        )));
    }

    let mut w = Wire::new(model, mode);
    let mut x = w.tape.leaf(batch.clone());

    if spec.use_pcen_frontend {
        let alpha = w.p("pcen.alpha")?;
        let delta = w.p("pcen.delta")?;
        let root = w.p("pcen.root")?;
        x = w.tape.pcen(x, alpha, delta, root, spec.pcen.smoothing, spec.pcen.eps)?;
    }

    let logits = match spec.architecture {
        Architecture::CnnSmall => {
            let x = w.conv(x, "conv1", 1, 2)?;
            let x = w.tape.relu(x);
            let x = w.pool(x)?;
            let x = w.conv(x, "conv2", 1, 2)?;
            let x = w.tape.relu(x);
            let x = w.pool(x)?;
            let x = w.tape.flatten(x)?;
            let x = w.linear(x, "fc1")?;
            let x = w.tape.relu(x);
            w.linear(x, "head.linear")?
        }
        Architecture::ResnetTiny => {
            let x = w.conv(x, "stem.conv", 1, 1)?;
            let x = w.bn(x, "stem.bn")?;
            let x = w.tape.relu(x);
            let x = wire_residual_block(&mut w, x, "stage1", 1, false)?;
            let x = wire_residual_block(&mut w, x, "stage2", 2, true)?;
            let x = wire_residual_block(&mut w, x, "stage3", 2, true)?;
            let x = w.tape.global_avg_pool(x)?;
            w.linear(x, "head.linear")?
        }
        Architecture::VggTiny => {
            let mut x = x;
            for stage in 1..=3 {
                x = w.conv(x, &format!("stage{stage}.conv1"), 1, 1)?;
                x = w.tape.relu(x);
                x = w.conv(x, &format!("stage{stage}.conv2"), 1, 1)?;
                x = w.tape.relu(x);
                x = w.pool(x)?;
            }
            let x = w.tape.flatten(x)?;
            let x = w.linear(x, "fc1")?;
            let x = w.tape.relu(x);
            w.linear(x, "head.linear")?
        }
    };

    Ok(Forward { tape: w.tape, logits, param_nodes: w.param_nodes, bn_stats: w.bn_stats })
}

/// Eval-mode logits for a batch.
pub fn forward_eval(model: &Model, batch: &Tensor) -> Result<Tensor> {
    let fwd = forward(model, batch, Mode::Eval)?;
    Ok(fwd.tape.value(fwd.logits).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn spec(arch: Architecture, f: usize, t: usize) -> ModelSpec {
        ModelSpec {
            architecture: arch,
            num_classes: 2,
            input_bins: f,
            input_frames: t,
            use_pcen_frontend: false,
            pcen: PcenParams::default(),
            base_width: 16,
            hidden_dim: 128,
        }
    }

    fn random_batch(n: usize, f: usize, t: usize, seed: u64) -> Tensor {
        let mut rng = rng::derive(seed, Stream::Init);
        Tensor::from_vec(
            &[n, 1, f, t],
            (0..n * f * t).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn cnn_small_parameter_count_is_golden() {
        let model = build_model(&spec(Architecture::CnnSmall, 64, 64), 0).unwrap();
        // conv1 416 + conv2 12832 + fc1 (8192·128 + 128) + head (128·2 + 2)
        assert_eq!(model.num_params(), 1_062_210);
    }

    #[test]
    fn same_seed_gives_bit_identical_weights() {
        for arch in [Architecture::CnnSmall, Architecture::ResnetTiny, Architecture::VggTiny] {
            let a = build_model(&spec(arch, 16, 16), 7).unwrap();
            let b = build_model(&spec(arch, 16, 16), 7).unwrap();
            assert_eq!(a.params.len(), b.params.len());
            for (pa, pb) in a.params.iter().zip(&b.params) {
                assert_eq!(pa.name, pb.name);
                let bits = |t: &Tensor| t.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(&pa.value), bits(&pb.value), "{}", pa.name);
            }
        }
    }

    #[test]
    fn pcen_frontend_adds_three_trainable_scalars() {
        let base = build_model(&spec(Architecture::CnnSmall, 16, 16), 0).unwrap();
        let mut with = spec(Architecture::CnnSmall, 16, 16);
        with.use_pcen_frontend = true;
        let with = build_model(&with, 0).unwrap();
        assert_eq!(with.num_params(), base.num_params() + 3);
        for name in ["pcen.alpha", "pcen.delta", "pcen.root"] {
            let p = with.param(name).unwrap();
            assert!(p.trainable);
            assert_eq!(p.value.numel(), 1);
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!("no_such_net".parse::<Architecture>().is_err());
        let mut bad = spec(Architecture::CnnSmall, 16, 16);
        bad.num_classes = 1;
        assert!(build_model(&bad, 0).is_err());
        let tiny = spec(Architecture::VggTiny, 4, 4);
        assert!(build_model(&tiny, 0).is_err());
    }

    #[test]
    fn zero_input_gives_finite_logits() {
        for arch in [Architecture::CnnSmall, Architecture::ResnetTiny, Architecture::VggTiny] {
            let model = build_model(&spec(arch, 16, 16), 1).unwrap();
            let logits = forward_eval(&model, &Tensor::zeros(&[1, 1, 16, 16])).unwrap();
            assert_eq!(logits.shape(), &[1, 2]);
            assert!(!logits.has_nan());
        }
    }

    #[test]
    fn eval_is_bit_deterministic() {
        let model = build_model(&spec(Architecture::ResnetTiny, 12, 12), 2).unwrap();
        let batch = random_batch(3, 12, 12, 5);
        let a = forward_eval(&model, &batch).unwrap();
        let b = forward_eval(&model, &batch).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn eval_has_no_cross_sample_coupling() {
        let model = build_model(&spec(Architecture::CnnSmall, 12, 12), 3).unwrap();
        let single = random_batch(1, 12, 12, 8);
        let solo = forward_eval(&model, &single).unwrap();
        // Duplicate the sample into a batch of 3.
        let mut data = Vec::new();
        for _ in 0..3 {
            data.extend_from_slice(single.data());
        }
        let batch = Tensor::from_vec(&[3, 1, 12, 12], data).unwrap();
        let logits = forward_eval(&model, &batch).unwrap();
        for n in 0..3 {
            for c in 0..2 {
                assert!((logits.data()[n * 2 + c] - solo.data()[c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn batch_permutation_permutes_logits() {
        let model = build_model(&spec(Architecture::VggTiny, 16, 16), 4).unwrap();
        let batch = random_batch(4, 16, 16, 9);
        let logits = forward_eval(&model, &batch).unwrap();

        let plane = 16 * 16;
        let perm = [2usize, 0, 3, 1];
        let mut permuted = Vec::new();
        for &src in &perm {
            permuted.extend_from_slice(&batch.data()[src * plane..(src + 1) * plane]);
        }
        let permuted = Tensor::from_vec(&[4, 1, 16, 16], permuted).unwrap();
        let plogits = forward_eval(&model, &permuted).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..2 {
                assert_eq!(
                    plogits.data()[dst * 2 + c].to_bits(),
                    logits.data()[src * 2 + c].to_bits()
                );
            }
        }
    }

    #[test]
    fn residual_block_with_zero_convs_is_identity() {
        let mut model = build_model(&spec(Architecture::ResnetTiny, 8, 8), 5).unwrap();
        for name in ["stage1.conv1.weight", "stage1.conv2.weight"] {
            let p = model.param_mut(name).unwrap();
            for v in p.value.data_mut() {
                *v = 0.0;
            }
        }
        // Non-negative input, as the block receives post-relu activations.
        let mut rng = rng::derive(6, Stream::Init);
        let input = Tensor::from_vec(
            &[2, 16, 8, 8],
            (0..2 * 16 * 8 * 8).map(|_| rng.gen_range(0.0f32..1.0)).collect(),
        )
        .unwrap();
        let mut w = Wire::new(&model, Mode::Eval);
        let x = w.tape.leaf(input.clone());
        let y = wire_residual_block(&mut w, x, "stage1", 1, false).unwrap();
        for (a, b) in w.tape.value(y).iter().zip(input.iter()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn train_forward_updates_running_stats_only_when_applied() {
        let mut model = build_model(&spec(Architecture::ResnetTiny, 8, 8), 6).unwrap();
        let batch = random_batch(4, 8, 8, 10);
        let before = model.bn_buffers[0].mean.clone();
        let fwd = forward(&model, &batch, Mode::Train).unwrap();
        assert_eq!(model.bn_buffers[0].mean, before, "forward alone must not mutate");
        fwd.apply_bn_updates(&mut model, BN_MOMENTUM);
        assert_ne!(model.bn_buffers[0].mean, before);
    }

    #[test]
    fn gradients_reach_trainable_params() {
        let mut model = build_model(&spec(Architecture::CnnSmall, 8, 8), 7).unwrap();
        let batch = random_batch(2, 8, 8, 11);
        let mut fwd = forward(&model, &batch, Mode::Train).unwrap();
        let loss = fwd.tape.softmax_cross_entropy(fwd.logits, &[0, 1]).unwrap();
        fwd.tape.backward(loss).unwrap();
        fwd.write_grads(&mut model).unwrap();
        for p in &model.params {
            assert!(p.grad.is_some(), "missing grad on {}", p.name);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let model = build_model(&spec(Architecture::CnnSmall, 8, 8), 0).unwrap();
        assert!(forward_eval(&model, &Tensor::zeros(&[1, 1, 9, 8])).is_err());
        assert!(forward_eval(&model, &Tensor::zeros(&[1, 2, 8, 8])).is_err());
    }
}
