//! The depth-completion networks: context encoder, sparse depth encoder and the
//! demonstration / aggregation / prediction fusion block, plus the two
//! ablation baselines that share the same [`Model`] interface.

mod nets;

pub use nets::{
    aggregate, context_encoder, demonstrate, depth_encoder, depth_pretrain_head, forward, forward_context_only,
    forward_phase, forward_vanilla_baseline, predict, Phase,
};

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::layers::{
    ConvParams, DownBlockParams, ObservationMask, ResidualBlockParams, SparseConvParams, UpProjectionParams,
    SPARSE_CONV_EPS,
};
use crate::rng::SplitMix64;
use crate::tensor::{Graph, ParamGroup, Tensor, Var};

/// Which fusion strategy a model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Demonstration, masked aggregation, prediction.
    Inductive,
    /// Plain concatenation followed by nine residual blocks.
    Vanilla,
    /// RGB only.
    ContextOnly,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Inductive, Variant::Vanilla, Variant::ContextOnly];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Inductive => "inductive",
            Variant::Vanilla => "vanilla",
            Variant::ContextOnly => "context_only",
        }
    }

    pub fn uses_depth(self) -> bool {
        self != Variant::ContextOnly
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument {
                op: "Variant",
                msg: format!("unknown model variant {s:?}"),
            })
    }
}

/// The four parameter groups of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    ContextEncoder,
    DepthEncoder,
    Demonstration,
    Prediction,
}

impl Group {
    pub const ALL: [Group; 4] = [
        Group::ContextEncoder,
        Group::DepthEncoder,
        Group::Demonstration,
        Group::Prediction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::ContextEncoder => "context_encoder",
            Group::DepthEncoder => "depth_encoder",
            Group::Demonstration => "demonstration",
            Group::Prediction => "prediction",
        }
    }

    pub fn from_name(s: &str) -> Option<Group> {
        Group::ALL.into_iter().find(|g| g.name() == s)
    }
}

/// Kernel sizes of the sparse depth encoder, outermost first.
pub const DEPTH_KERNELS: [usize; 5] = [11, 7, 5, 3, 3];
pub const DEMONSTRATION_BLOCKS: usize = 4;
pub const PREDICTION_BLOCKS: usize = 5;
pub const VANILLA_FUSION_BLOCKS: usize = 9;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Width of the full-resolution stem of the context encoder.
    pub stem_channels: usize,
    /// Widths of the three stride-2 encoder stages.
    pub context_widths: [usize; 3],
    /// C_x
    pub context_channels: usize,
    /// C_d
    pub depth_channels: usize,
    /// C_r
    pub demo_channels: usize,
    /// Width of the prediction (or vanilla fusion) residual blocks.
    pub predict_channels: usize,
    /// 3 or 5 sparse convolution layers.
    pub depth_layers: usize,
    /// Aggregation tile size; 0 means the whole image.
    pub aggregation_window: usize,
    pub sparse_eps: f64,
    /// Sparse depth is multiplied by this before the depth encoder so that
    /// metric depths enter at unit scale.
    pub depth_input_scale: f64,
    /// Initial bias of the final depth head.
    pub head_bias: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Inductive,
            stem_channels: 16,
            context_widths: [16, 32, 64],
            context_channels: 16,
            depth_channels: 16,
            demo_channels: 32,
            predict_channels: 32,
            depth_layers: 3,
            aggregation_window: 0,
            sparse_eps: SPARSE_CONV_EPS,
            depth_input_scale: 0.3,
            head_bias: 1.0,
        }
    }
}

impl ModelConfig {
    /// A narrow configuration for gradient checks and fast tests.
    pub fn tiny(variant: Variant) -> Self {
        Self {
            variant,
            stem_channels: 2,
            context_widths: [2, 2, 4],
            context_channels: 2,
            depth_channels: 2,
            demo_channels: 2,
            predict_channels: 2,
            ..Self::default()
        }
    }

    /// Channel counts after each decoder concat: (up1 + e2, up2 + e1, up3 + stem).
    pub(crate) fn decoder_widths(&self) -> [usize; 3] {
        let [w0, w1, w2] = self.context_widths;
        let c1 = w2 / 2 + w1;
        let c2 = c1 / 2 + w0;
        let c3 = c2 / 2 + self.stem_channels;
        [c1, c2, c3]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument { op: "ModelConfig", msg });
        if self.depth_layers != 3 && self.depth_layers != 5 {
            return bad(format!("depth_layers must be 3 or 5, got {}", self.depth_layers));
        }
        let [c1, c2, _] = self.decoder_widths();
        if self.context_widths[2] % 2 != 0 || c1 % 2 != 0 || c2 % 2 != 0 {
            return bad(format!(
                "up-projection inputs must have even width, got {}, {c1}, {c2}",
                self.context_widths[2]
            ));
        }
        let widths = [
            self.stem_channels,
            self.context_channels,
            self.depth_channels,
            self.demo_channels,
            self.predict_channels,
        ];
        if widths.contains(&0) || self.context_widths.contains(&0) {
            return bad("channel widths must be positive".into());
        }
        if !(self.sparse_eps > 0.0) {
            return bad(format!("sparse_eps must be positive, got {}", self.sparse_eps));
        }
        if !(self.depth_input_scale > 0.0 && self.depth_input_scale.is_finite()) {
            return bad(format!(
                "depth_input_scale must be positive, got {}",
                self.depth_input_scale
            ));
        }
        Ok(())
    }
}

/// Parameters of a depth-completion network, split into four groups.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub context_encoder: ParamGroup,
    pub depth_encoder: ParamGroup,
    pub demonstration: ParamGroup,
    pub prediction: ParamGroup,
}

/// Adds a conv weight and bias. `gain` scales the He standard deviation.
fn add_conv(
    group: &mut ParamGroup,
    name: &str,
    (out_ch, in_ch, k): (usize, usize, usize),
    gain: f64,
    rng: &mut SplitMix64,
) -> Result<()> {
    let fan_in = (in_ch * k * k) as f64;
    let std = gain * (2.0 / fan_in).sqrt();
    let w = (0..out_ch * in_ch * k * k).map(|_| std * rng.normal()).collect();
    group.insert(format!("{name}.weight"), Tensor::new(&[out_ch, in_ch, k, k], w)?)?;
    group.insert(format!("{name}.bias"), Tensor::zeros(&[out_ch]))
}

/// Sparse convolutions divide by the observed count, so independent per-tap
/// weights would shrink the output by roughly the window area. Each kernel
/// instead starts spatially flat (a masked average followed by a channel mix
/// with He variance over input channels) plus a little per-tap noise.
fn add_sparse_conv(
    group: &mut ParamGroup,
    name: &str,
    (out_ch, in_ch, k): (usize, usize, usize),
    rng: &mut SplitMix64,
) -> Result<()> {
    let std = (2.0 / in_ch as f64).sqrt();
    let mut w = Vec::with_capacity(out_ch * in_ch * k * k);
    for _ in 0..out_ch * in_ch {
        let a = std * rng.normal();
        w.extend((0..k * k).map(|_| a + SPARSE_TAP_NOISE * std * rng.normal()));
    }
    group.insert(format!("{name}.weight"), Tensor::new(&[out_ch, in_ch, k, k], w)?)?;
    group.insert(format!("{name}.bias"), Tensor::zeros(&[out_ch]))
}

const SPARSE_TAP_NOISE: f64 = 0.1;

/// Residual branches start small so deep stacks begin close to identity.
const RESIDUAL_GAIN: f64 = 0.1;
const HEAD_GAIN: f64 = 0.5;

fn add_residual(group: &mut ParamGroup, name: &str, c: usize, rng: &mut SplitMix64) -> Result<()> {
    add_conv(group, &format!("{name}.conv1"), (c, c, 3), 1.0, rng)?;
    add_conv(group, &format!("{name}.conv2"), (c, c, 3), RESIDUAL_GAIN, rng)
}

fn add_down(group: &mut ParamGroup, name: &str, cin: usize, cout: usize, rng: &mut SplitMix64) -> Result<()> {
    add_conv(group, &format!("{name}.conv1"), (cout, cin, 3), 1.0, rng)?;
    add_conv(group, &format!("{name}.conv2"), (cout, cout, 3), RESIDUAL_GAIN, rng)?;
    add_conv(group, &format!("{name}.shortcut"), (cout, cin, 1), 1.0, rng)
}

fn add_up(group: &mut ParamGroup, name: &str, c: usize, rng: &mut SplitMix64) -> Result<()> {
    add_conv(group, &format!("{name}.main1"), (c / 2, c, 5), 1.0, rng)?;
    add_conv(group, &format!("{name}.main2"), (c / 2, c / 2, 3), RESIDUAL_GAIN, rng)?;
    add_conv(group, &format!("{name}.projection"), (c / 2, c, 5), 1.0, rng)
}

fn set_bias(group: &mut ParamGroup, name: &str, value: f64) {
    if let Some(p) = group.get_mut(name) {
        p.value.data_mut().fill(value);
    }
}

impl Model {
    /// Fresh model with He-initialized weights drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::new(seed);
        let c = &config;
        let [w0, w1, w2] = c.context_widths;
        let [c1, c2, c3] = c.decoder_widths();

        let mut ctx = ParamGroup::new();
        add_conv(&mut ctx, "stem", (c.stem_channels, 3, 3), 1.0, &mut rng)?;
        add_down(&mut ctx, "down1", c.stem_channels, w0, &mut rng)?;
        add_down(&mut ctx, "down2", w0, w1, &mut rng)?;
        add_down(&mut ctx, "down3", w1, w2, &mut rng)?;
        add_up(&mut ctx, "up1", w2, &mut rng)?;
        add_up(&mut ctx, "up2", c1, &mut rng)?;
        add_up(&mut ctx, "up3", c2, &mut rng)?;
        add_conv(&mut ctx, "head", (c.context_channels, c3, 1), HEAD_GAIN, &mut rng)?;

        let mut depth = ParamGroup::new();
        let mut demo = ParamGroup::new();
        let mut pred = ParamGroup::new();
        if c.variant.uses_depth() {
            let mut cin = 1;
            for (i, &k) in DEPTH_KERNELS[..c.depth_layers].iter().enumerate() {
                add_sparse_conv(&mut depth, &format!("scn{i}"), (c.depth_channels, cin, k), &mut rng)?;
                cin = c.depth_channels;
            }
            add_conv(&mut depth, "head", (1, c.depth_channels, 1), HEAD_GAIN, &mut rng)?;
            set_bias(&mut depth, "head.bias", c.head_bias);
        }
        match c.variant {
            Variant::Inductive => {
                let cin = c.context_channels + c.depth_channels;
                add_conv(&mut demo, "input", (c.demo_channels, cin, 1), 1.0, &mut rng)?;
                for i in 0..DEMONSTRATION_BLOCKS {
                    add_residual(&mut demo, &format!("rb{i}"), c.demo_channels, &mut rng)?;
                }
                let cin = c.context_channels + c.demo_channels;
                add_conv(&mut pred, "input", (c.predict_channels, cin, 1), 1.0, &mut rng)?;
                for i in 0..PREDICTION_BLOCKS {
                    add_residual(&mut pred, &format!("rb{i}"), c.predict_channels, &mut rng)?;
                }
            }
            Variant::Vanilla => {
                let cin = c.context_channels + c.depth_channels;
                add_conv(&mut pred, "input", (c.predict_channels, cin, 1), 1.0, &mut rng)?;
                for i in 0..VANILLA_FUSION_BLOCKS {
                    add_residual(&mut pred, &format!("rb{i}"), c.predict_channels, &mut rng)?;
                }
            }
            Variant::ContextOnly => {
                add_conv(
                    &mut pred,
                    "input",
                    (c.predict_channels, c.context_channels, 1),
                    1.0,
                    &mut rng,
                )?;
                for i in 0..PREDICTION_BLOCKS {
                    add_residual(&mut pred, &format!("rb{i}"), c.predict_channels, &mut rng)?;
                }
            }
        }
        add_conv(&mut pred, "head", (1, c.predict_channels, 1), HEAD_GAIN, &mut rng)?;
        set_bias(&mut pred, "head.bias", c.head_bias);

        Ok(Self {
            config,
            context_encoder: ctx,
            depth_encoder: depth,
            demonstration: demo,
            prediction: pred,
        })
    }

    pub fn group(&self, g: Group) -> &ParamGroup {
        match g {
            Group::ContextEncoder => &self.context_encoder,
            Group::DepthEncoder => &self.depth_encoder,
            Group::Demonstration => &self.demonstration,
            Group::Prediction => &self.prediction,
        }
    }

    pub fn group_mut(&mut self, g: Group) -> &mut ParamGroup {
        match g {
            Group::ContextEncoder => &mut self.context_encoder,
            Group::DepthEncoder => &mut self.depth_encoder,
            Group::Demonstration => &mut self.demonstration,
            Group::Prediction => &mut self.prediction,
        }
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        Group::ALL.iter().map(|&g| self.group(g).numel()).sum()
    }

    /// Parameters used at inference time (excludes the depth pretraining head).
    pub fn num_inference_params(&self) -> usize {
        let aux: usize = ["head.weight", "head.bias"]
            .iter()
            .filter_map(|n| self.depth_encoder.get(n))
            .map(|p| p.value.len())
            .sum();
        self.num_params() - aux
    }

    /// Every parameter as (`group.name`, param), groups in fixed order.
    pub fn named_params(&self) -> impl Iterator<Item = (String, &crate::tensor::Param)> {
        Group::ALL
            .into_iter()
            .flat_map(move |g| self.group(g).iter().map(move |(n, p)| (format!("{}.{n}", g.name()), p)))
    }

    /// Registers every parameter as a graph leaf. Parameters in `trainable`
    /// groups track gradients; the rest enter as constants.
    pub fn bind(&self, g: &mut Graph, trainable: &[Group]) -> Bindings {
        let mut vars = HashMap::new();
        for group in Group::ALL {
            let train = trainable.contains(&group);
            for (name, p) in self.group(group).iter() {
                let t = p.value.clone();
                let v = if train { g.param(t) } else { g.constant(t) };
                vars.insert(format!("{}.{name}", group.name()), v);
            }
        }
        Bindings {
            vars,
            trainable: trainable.to_vec(),
        }
    }

    /// Copies leaf gradients from a graph after backward into the trainable groups.
    pub fn collect_grads(&mut self, g: &Graph, b: &Bindings) -> Result<()> {
        for &group in &b.trainable {
            let gname = group.name();
            for (name, p) in self.group_mut(group).iter_mut() {
                let full = format!("{gname}.{name}");
                let var = b.var(&full)?;
                let grad = g.grad(var).ok_or_else(|| Error::MissingGrad(full.clone()))?;
                p.value.set_grad(grad.to_vec())?;
            }
        }
        Ok(())
    }

    /// Inference: full forward pass for this model's variant, no gradients.
    pub fn predict_depth(&self, rgb: &Tensor, sparse_depth: &Tensor, mask: &ObservationMask) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, &[]);
        let rgb = g.constant(rgb.clone());
        let sparse = g.constant(sparse_depth.clone());
        let out = match self.config.variant {
            Variant::Inductive => forward(&mut g, &b, &self.config, rgb, sparse, mask)?,
            Variant::Vanilla => forward_vanilla_baseline(&mut g, &b, &self.config, rgb, sparse, mask)?,
            Variant::ContextOnly => forward_context_only(&mut g, &b, &self.config, rgb)?,
        };
        Ok(g.value(out).clone())
    }
}

/// Name-to-leaf map produced by [`Model::bind`].
#[derive(Debug, Clone)]
pub struct Bindings {
    vars: HashMap<String, Var>,
    trainable: Vec<Group>,
}

impl Bindings {
    /// Bindings from explicit leaves, keyed by full `group.name` parameter names.
    pub fn new(vars: HashMap<String, Var>, trainable: Vec<Group>) -> Self {
        Self { vars, trainable }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn conv(&self, prefix: &str) -> Result<ConvParams> {
        Ok(ConvParams {
            weight: self.var(&format!("{prefix}.weight"))?,
            bias: self.var(&format!("{prefix}.bias"))?,
        })
    }

    pub fn sparse_conv(&self, prefix: &str, epsilon: f64) -> Result<SparseConvParams> {
        let c = self.conv(prefix)?;
        Ok(SparseConvParams {
            weight: c.weight,
            bias: c.bias,
            epsilon,
        })
    }

    pub fn residual(&self, prefix: &str) -> Result<ResidualBlockParams> {
        Ok(ResidualBlockParams {
            conv1: self.conv(&format!("{prefix}.conv1"))?,
            conv2: self.conv(&format!("{prefix}.conv2"))?,
        })
    }

    pub fn down(&self, prefix: &str) -> Result<DownBlockParams> {
        Ok(DownBlockParams {
            conv1: self.conv(&format!("{prefix}.conv1"))?,
            conv2: self.conv(&format!("{prefix}.conv2"))?,
            shortcut: self.conv(&format!("{prefix}.shortcut"))?,
        })
    }

    pub fn up(&self, prefix: &str) -> Result<UpProjectionParams> {
        Ok(UpProjectionParams {
            main1: self.conv(&format!("{prefix}.main1"))?,
            main2: self.conv(&format!("{prefix}.main2"))?,
            projection: self.conv(&format!("{prefix}.projection"))?,
        })
    }

    pub fn trainable(&self) -> &[Group] {
        &self.trainable
    }
}
