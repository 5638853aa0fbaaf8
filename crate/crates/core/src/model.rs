//! The network: a small convolutional backbone and three heads.
//!
//! The backbone downsamples by the configured output stride through 3×3
//! convolutions; three two-layer heads then map the shared features to the
//! keypoint heatmap logits `A`, the box heatmap logits `B`, and the vector
//! field `D` (raw offsets in grid units). All heads share the same output
//! resolution.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::BranchVars;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    /// Image channels (1 for grayscale).
    pub input_channels: usize,
    /// Keypoints per instance.
    pub num_parts: usize,
    /// Output stride: image extents divide by this power of two.
    pub stride: usize,
    /// Width of the first backbone convolution.
    pub base_channels: usize,
    /// Width of the remaining backbone convolutions.
    pub feature_channels: usize,
    /// Width of the head convolutions.
    pub head_channels: usize,
    /// Full-resolution backbone convolutions after downsampling.
    pub refine_layers: usize,
    /// Hard budget on the total parameter count.
    pub max_params: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_channels: 1,
            num_parts: 3,
            stride: 4,
            base_channels: 16,
            feature_channels: 32,
            head_channels: 16,
            refine_layers: 2,
            max_params: 200_000,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0
            || self.num_parts == 0
            || self.base_channels == 0
            || self.feature_channels == 0
            || self.head_channels == 0
        {
            return Err(Error::Invalid("zero-sized model dimension".into()));
        }
        if self.stride == 0 || !self.stride.is_power_of_two() {
            return Err(Error::Invalid(format!(
                "stride {} must be a power of two",
                self.stride
            )));
        }
        Ok(())
    }

    /// Backbone plan: (in, out, stride) per conv layer.
    fn backbone_plan(&self) -> Vec<(usize, usize, usize)> {
        let mut plan = Vec::new();
        let downs = self.stride.trailing_zeros() as usize;
        let mut cin = self.input_channels;
        for i in 0..downs {
            let cout = if i == 0 { self.base_channels } else { self.feature_channels };
            plan.push((cin, cout, 2));
            cin = cout;
        }
        for _ in 0..self.refine_layers.max(1) {
            plan.push((cin, self.feature_channels, 1));
            cin = self.feature_channels;
        }
        plan
    }
}

/// Weight + bias of one convolution.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// All trainable tensors plus the configuration and init seed.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub seed: u64,
    pub backbone: Vec<ConvLayer>,
    pub head_a: Vec<ConvLayer>,
    pub head_b: Vec<ConvLayer>,
    pub head_d: Vec<ConvLayer>,
}

/// Branch outputs plus the parameter registration order of one forward pass;
/// needed to route gradients back into the parameter tensors.
pub struct ForwardPass {
    pub outs: BranchVars,
    param_vars: Vec<Var>,
}

/// Bias of the final box/heatmap convolutions, chosen so the initial
/// sigmoid confidence is about 0.01. Keeps early pseudo selections empty.
const PRIOR_LOGIT: Real = -4.59511985013459;

fn he_uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let fan_in: usize = shape[..3].iter().product();
    let limit = (6.0 / fan_in as Real).sqrt();
    let data = (0..shape.iter().product::<usize>())
        .map(|_| rng.gen_range(-limit..limit))
        .collect();
    Tensor::new(shape, data)
        .expect("finite by construction")
        .with_requires_grad(true)
}

fn small_uniform(rng: &mut ChaCha8Rng, shape: &[usize], limit: Real) -> Tensor {
    let data = (0..shape.iter().product::<usize>())
        .map(|_| rng.gen_range(-limit..limit))
        .collect();
    Tensor::new(shape, data)
        .expect("finite by construction")
        .with_requires_grad(true)
}

fn bias(cout: usize, value: Real) -> Tensor {
    Tensor::full(&[cout], value)
        .expect("finite")
        .with_requires_grad(true)
}

impl ModelParams {
    /// Deterministic initialization from a seed: fan-in-scaled uniform
    /// weights, zero biases, except the final heatmap/box layers which get
    /// small weights and the confidence prior bias.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = config.num_parts;

        let backbone = config
            .backbone_plan()
            .iter()
            .map(|&(cin, cout, _)| ConvLayer {
                weight: he_uniform(&mut rng, &[3, 3, cin, cout]),
                bias: bias(cout, 0.0),
            })
            .collect();

        let feat = config.feature_channels;
        let head = config.head_channels;
        let mut make_head = |out_channels: usize, final_bias: Real| -> Vec<ConvLayer> {
            alloc::vec![
                ConvLayer {
                    weight: he_uniform(&mut rng, &[3, 3, feat, head]),
                    bias: bias(head, 0.0),
                },
                ConvLayer {
                    weight: small_uniform(&mut rng, &[3, 3, head, out_channels], 0.01),
                    bias: bias(out_channels, final_bias),
                },
            ]
        };
        let head_a = make_head(k, PRIOR_LOGIT);
        let head_b = make_head(k, PRIOR_LOGIT);
        let head_d = make_head(2 * k, 0.0);

        let params = ModelParams {
            config: config.clone(),
            seed,
            backbone,
            head_a,
            head_b,
            head_d,
        };
        if params.param_count() > config.max_params {
            return Err(Error::Invalid(format!(
                "{} parameters exceed the budget of {}",
                params.param_count(),
                config.max_params
            )));
        }
        Ok(params)
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    fn groups(&self) -> [(&'static str, &Vec<ConvLayer>); 4] {
        [
            ("backbone", &self.backbone),
            ("head_a", &self.head_a),
            ("head_b", &self.head_b),
            ("head_d", &self.head_d),
        ]
    }

    /// Parameters in registration order with stable names.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (name, layers) in self.groups() {
            for (i, layer) in layers.iter().enumerate() {
                out.push((format!("{name}.{i}.weight"), &layer.weight));
                out.push((format!("{name}.{i}.bias"), &layer.bias));
            }
        }
        out
    }

    /// Mutable named parameters, ordered as [`ModelParams::named`].
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (name, layers) in [
            ("backbone", &mut self.backbone),
            ("head_a", &mut self.head_a),
            ("head_b", &mut self.head_b),
            ("head_d", &mut self.head_d),
        ] {
            for (i, layer) in layers.iter_mut().enumerate() {
                out.push((format!("{name}.{i}.weight"), &mut layer.weight));
                out.push((format!("{name}.{i}.bias"), &mut layer.bias));
            }
        }
        out
    }

    /// Mutable parameters in the same order as [`ModelParams::named`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layers in [
            &mut self.backbone,
            &mut self.head_a,
            &mut self.head_b,
            &mut self.head_d,
        ] {
            for layer in layers.iter_mut() {
                out.push(&mut layer.weight);
                out.push(&mut layer.bias);
            }
        }
        out
    }

    /// Runs the network on `[N,H,W,C]` frames, producing branch outputs of
    /// spatial size `H/stride × W/stride`.
    pub fn forward(&self, tape: &Tape, frames: &Tensor) -> Result<ForwardPass> {
        let shape = frames.shape();
        if shape.len() != 4 || shape[3] != self.config.input_channels {
            return Err(Error::Shape(format!(
                "frames must be [N,H,W,{}], got {shape:?}",
                self.config.input_channels
            )));
        }
        if shape[1] % self.config.stride != 0 || shape[2] % self.config.stride != 0 {
            return Err(Error::Shape(format!(
                "frame extents {}x{} not divisible by stride {}",
                shape[1], shape[2], self.config.stride
            )));
        }
        let n = shape[0];
        let (h, w) = (shape[1] / self.config.stride, shape[2] / self.config.stride);
        let k = self.config.num_parts;

        let mut param_vars = Vec::new();
        let mut conv = |tape: &Tape, x: &Var, layer: &ConvLayer, stride: usize| -> Result<Var> {
            let wv = tape.leaf(&layer.weight)?;
            let bv = tape.leaf(&layer.bias)?;
            param_vars.push(wv.clone());
            param_vars.push(bv.clone());
            x.conv2d(&wv, stride, 1)?.add(&bv)
        };

        let mut x = tape.constant(frames)?;
        for (layer, &(_, _, stride)) in self.backbone.iter().zip(&self.config.backbone_plan()) {
            x = conv(tape, &x, layer, stride)?.relu()?;
        }

        let mut branch = |tape: &Tape, layers: &[ConvLayer]| -> Result<Var> {
            let hid = conv(tape, &x, &layers[0], 1)?.relu()?;
            conv(tape, &hid, &layers[1], 1)
        };
        let a = branch(tape, &self.head_a)?;
        let b = branch(tape, &self.head_b)?;
        let d = branch(tape, &self.head_d)?.reshape(&[n, h, w, k, 2])?;

        Ok(ForwardPass {
            outs: BranchVars { a, b, d },
            param_vars,
        })
    }

    /// Moves the gradients of one backward pass into the parameter tensors
    /// (accumulating), ready for [`crate::engine::sgd_step`].
    pub fn absorb_grads(&mut self, pass: &ForwardPass) -> Result<()> {
        let vars = &pass.param_vars;
        let mut params = self.params_mut();
        if vars.len() != params.len() {
            return Err(Error::Invalid(
                "forward pass does not match this model's parameter list".into(),
            ));
        }
        for (p, v) in params.iter_mut().zip(vars) {
            let g = v.grad()?;
            p.accumulate_grad(g.data())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            input_channels: 1,
            num_parts: 2,
            stride: 4,
            base_channels: 4,
            feature_channels: 6,
            head_channels: 6,
            refine_layers: 1,
            max_params: 200_000,
        }
    }

    fn random_frames(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            shape,
            (0..shape.iter().product::<usize>())
                .map(|_| rng.gen_range(0.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = tiny_config();
        let a = ModelParams::init(&cfg, 7).unwrap();
        let b = ModelParams::init(&cfg, 7).unwrap();
        for ((na, ta), (nb, tb)) in a.named().iter().zip(b.named().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
        let c = ModelParams::init(&cfg, 8).unwrap();
        assert!(a
            .named()
            .iter()
            .zip(c.named().iter())
            .any(|((_, ta), (_, tc))| ta.data() != tc.data()));
    }

    #[test]
    fn initial_box_confidence_near_prior() {
        let cfg = tiny_config();
        let params = ModelParams::init(&cfg, 3).unwrap();
        let frames = random_frames(&[2, 16, 16, 1], 11);
        let tape = Tape::new();
        let pass = params.forward(&tape, &frames).unwrap();
        let b = pass.outs.b.value();
        let mean: Real = b
            .data()
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .sum::<Real>()
            / b.numel() as Real;
        assert!(
            (0.005..=0.02).contains(&mean),
            "initial box confidence {mean}"
        );
    }

    #[test]
    fn forward_shapes_and_finiteness() {
        let cfg = tiny_config();
        let params = ModelParams::init(&cfg, 0).unwrap();
        let tape = Tape::new();
        let frames = Tensor::zeros(&[1, 16, 24, 1]);
        let pass = params.forward(&tape, &frames).unwrap();
        assert_eq!(pass.outs.a.shape(), vec![1, 4, 6, 2]);
        assert_eq!(pass.outs.b.shape(), vec![1, 4, 6, 2]);
        assert_eq!(pass.outs.d.shape(), vec![1, 4, 6, 2, 2]);
    }

    #[test]
    fn forward_rejects_indivisible_extents() {
        let cfg = tiny_config();
        let params = ModelParams::init(&cfg, 0).unwrap();
        let tape = Tape::new();
        let frames = Tensor::zeros(&[1, 18, 16, 1]);
        assert!(params.forward(&tape, &frames).is_err());
    }

    #[test]
    fn batch_independence() {
        let cfg = tiny_config();
        let params = ModelParams::init(&cfg, 5).unwrap();
        let f1 = random_frames(&[1, 16, 16, 1], 21);
        let f2 = random_frames(&[1, 16, 16, 1], 22);
        let mut joint = f1.data().to_vec();
        joint.extend_from_slice(f2.data());
        let batch = Tensor::new(&[2, 16, 16, 1], joint).unwrap();

        let tape = Tape::new();
        let out_batch = params.forward(&tape, &batch).unwrap().outs.a.value();
        let out_1 = params.forward(&tape, &f1).unwrap().outs.a.value();
        let out_2 = params.forward(&tape, &f2).unwrap().outs.a.value();
        let half = out_batch.numel() / 2;
        assert_eq!(&out_batch.data()[..half], out_1.data());
        assert_eq!(&out_batch.data()[half..], out_2.data());
    }

    #[test]
    fn param_budget_enforced() {
        let mut cfg = tiny_config();
        cfg.max_params = 10;
        assert!(ModelParams::init(&cfg, 0).is_err());
    }

    #[test]
    fn default_config_within_budget() {
        let cfg = ModelConfig::default();
        let params = ModelParams::init(&cfg, 0).unwrap();
        assert!(params.param_count() <= cfg.max_params);
    }
}
