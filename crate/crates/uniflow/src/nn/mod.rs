//! The prompt-conditioned backbone: prompt generator, task blocks, the
//! symmetric encoder-decoder, and the prompt-to-field map.
//!
//! All learnable weights live in a [`ParamSet`] with a fixed construction
//! order; that order is the checkpoint serialization order.

pub mod count;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Padding, Shape, Tensor, Val};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Where the spatial pooling happens in the prompt generator.
///
/// `Literal` pools first and runs 1x1 convs on the pooled color statistics.
/// `PoolLate` runs 3x3 stride-2 convs at full resolution and pools at the
/// end, which lets the prompt see local texture (noise vs blur) rather than
/// only global color means.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Literal,
    PoolLate,
}

impl std::str::FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(PromptMode::Literal),
            "pool_late" => Ok(PromptMode::PoolLate),
            other => Err(Error::Config(format!(
                "unknown prompt mode '{other}' (use literal or pool_late)"
            ))),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    /// Encoder depth; level l runs at 1/2^l resolution.
    pub levels: usize,
    /// Channels at the top level, doubling per level.
    pub base_channels: usize,
    /// Prompt width d.
    pub prompt_dim: usize,
    pub prompt_mode: PromptMode,
    pub in_channels: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            levels: 3,
            base_channels: 16,
            prompt_dim: 16,
            prompt_mode: PromptMode::Literal,
            in_channels: 3,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(Error::Config("levels must be >= 1".into()));
        }
        if self.base_channels < 4 {
            return Err(Error::Config("base_channels must be >= 4".into()));
        }
        if self.prompt_dim < 1 {
            return Err(Error::Config("prompt_dim must be >= 1".into()));
        }
        if self.in_channels < 1 {
            return Err(Error::Config("in_channels must be >= 1".into()));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Input extents must divide by this for the encoder to reach the bottom.
    pub fn required_divisor(&self) -> usize {
        1 << (self.levels - 1)
    }
}

/// The task prompt: z of shape (N, d, 1, 1) with every element in (0, 0.1).
#[derive(Clone, Debug)]
pub struct PromptVector {
    pub z: Tensor,
    pub dim: usize,
    pub mode: PromptMode,
}

/// Handle into a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn from_index(i: usize) -> Self {
        ParamId(i)
    }

    pub fn index(&self) -> usize {
        self.0
    }
}

/// Named learnable tensors in a fixed, documented order.
///
/// The order is exactly the construction order of [`Model::new`]:
/// prompt generator, encoder level by level (task block then downsample
/// conv), decoder from the deepest stage up (fusion conv then task block),
/// final output conv, then the prompt-field map. Checkpoints serialize
/// parameter payloads in this order.
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
        }
    }

    fn add(&mut self, name: impl Into<String>, mut t: Tensor) -> ParamId {
        t.set_requires_grad(true);
        let id = ParamId(self.entries.len());
        self.entries.push((name.into(), t));
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.data().len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.entries.iter_mut() {
            t.zero_grad();
        }
    }

    /// All parameter values flattened in serialization order.
    pub fn flat_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_scalars());
        for (_, t) in &self.entries {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Overwrite all parameters from a flat vector in serialization order.
    pub fn set_flat_values(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.total_scalars() {
            return Err(Error::Config(format!(
                "flat parameter vector has {} values, model needs {}",
                flat.len(),
                self.total_scalars()
            )));
        }
        let mut off = 0;
        for (_, t) in self.entries.iter_mut() {
            let n = t.data().len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// All gradients flattened in serialization order (zeros where absent).
    pub fn flat_grads(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_scalars());
        for (_, t) in &self.entries {
            match t.grad() {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat(0.0).take(t.data().len())),
            }
        }
        out
    }

    /// Insert every parameter as a graph leaf, in order.
    pub fn bind(&self, g: &mut Graph, track_grads: bool) -> Result<Vec<Val>> {
        let mut vals = Vec::with_capacity(self.entries.len());
        for (_, t) in &self.entries {
            vals.push(g.leaf(t.shape(), t.data().to_vec(), track_grads)?);
        }
        Ok(vals)
    }

    /// Pull leaf gradients out of a consumed graph, accumulating into the
    /// parameter grad buffers.
    pub fn absorb_grads(&mut self, g: &Graph, vals: &[Val]) {
        for ((_, t), v) in self.entries.iter_mut().zip(vals) {
            if let Some(grad) = g.grad(*v) {
                t.accumulate_grad(grad);
            }
        }
    }
}

struct Conv {
    weight: ParamId,
    /// Convs feeding straight into a GroupNorm carry no bias: the mean
    /// subtraction absorbs it exactly, leaving a dead parameter.
    bias: Option<ParamId>,
}

struct Affine {
    gamma: ParamId,
    beta: ParamId,
}

struct Lin {
    weight: ParamId,
    bias: ParamId,
}

/// One prompt-modulated unit: ConvBlock(x) + alpha * MLP(z).
struct TaskBlock {
    conv1: Conv,
    gn1: Affine,
    conv2: Conv,
    gn2: Affine,
    mlp: Lin,
    alpha: ParamId,
    groups: usize,
}

struct PromptGenerator {
    conv1: Conv,
    gn1: Affine,
    conv2: Conv,
    gn2: Affine,
}

struct UNet {
    enc: Vec<TaskBlock>,
    down: Vec<Conv>,
    fuse: Vec<Conv>,
    dec: Vec<TaskBlock>,
    out: Conv,
}

struct PromptField {
    lin: Lin,
    gain: ParamId,
}

/// The full parameterized backbone.
pub struct Model {
    pub config: ArchConfig,
    pub params: ParamSet,
    prompt: PromptGenerator,
    unet: UNet,
    field: PromptField,
}

const GN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-6;

fn gn_groups(channels: usize) -> usize {
    channels.min(8)
}

impl Model {
    /// Build a model with seeded He-style initialization. Per-block alpha
    /// starts at 0.1 and the prompt-field gain at 0.01.
    pub fn new(config: ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let d = config.prompt_dim;

        let kp = match config.prompt_mode {
            PromptMode::Literal => 1,
            PromptMode::PoolLate => 3,
        };
        let prompt = PromptGenerator {
            conv1: conv_init(
                &mut params,
                "prompt.conv1",
                config.in_channels,
                2 * d,
                kp,
                BiasInit::Randn(0.05),
                &mut rng,
            ),
            gn1: affine_init(&mut params, "prompt.gn1", 2 * d),
            conv2: conv_init(
                &mut params,
                "prompt.conv2",
                2 * d,
                d,
                kp,
                BiasInit::Randn(0.05),
                &mut rng,
            ),
            gn2: affine_init(&mut params, "prompt.gn2", d),
        };

        let mut enc = Vec::new();
        let mut down = Vec::new();
        for l in 0..config.levels {
            let cin = if l == 0 {
                config.in_channels
            } else {
                config.channels(l)
            };
            let cout = config.channels(l);
            enc.push(task_block_init(
                &mut params,
                &format!("enc{l}"),
                cin,
                cout,
                d,
                &mut rng,
            ));
            if l + 1 < config.levels {
                down.push(conv_init(
                    &mut params,
                    &format!("down{l}"),
                    cout,
                    config.channels(l + 1),
                    3,
                    BiasInit::Zero,
                    &mut rng,
                ));
            }
        }

        let mut fuse = Vec::new();
        let mut dec = Vec::new();
        for l in (0..config.levels.saturating_sub(1)).rev() {
            let c_up = config.channels(l + 1);
            let c_skip = config.channels(l);
            fuse.push(conv_init(
                &mut params,
                &format!("dec{l}.fuse"),
                c_up + c_skip,
                c_skip,
                3,
                BiasInit::Zero,
                &mut rng,
            ));
            dec.push(task_block_init(
                &mut params,
                &format!("dec{l}"),
                c_skip,
                c_skip,
                d,
                &mut rng,
            ));
        }

        let out = conv_init(
            &mut params,
            "out",
            config.channels(0),
            config.in_channels,
            3,
            BiasInit::Zero,
            &mut rng,
        );

        let field = PromptField {
            lin: lin_init(&mut params, "phi", d, config.in_channels, &mut rng),
            gain: params.add("phi.gain", Tensor::scalar(0.01)),
        };

        Ok(Model {
            config,
            params,
            prompt,
            unet: UNet {
                enc,
                down,
                fuse,
                dec,
                out,
            },
            field,
        })
    }

    /// Per-channel standardization over the spatial extents of each sample:
    /// (x - mean_c) / (std_c + 1e-6). Parameter-free preprocessing, computed
    /// off the tape.
    pub fn normalize_input(x: &Tensor) -> Tensor {
        let s = x.shape();
        let plane = s.h() * s.w();
        let mut out = Tensor::zeros(s);
        for nc in 0..s.n() * s.c() {
            let src = &x.data()[nc * plane..(nc + 1) * plane];
            let mean = src.iter().sum::<f64>() / plane as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
            let denom = var.sqrt() + NORM_EPS;
            for (o, v) in out.data_mut()[nc * plane..(nc + 1) * plane]
                .iter_mut()
                .zip(src)
            {
                *o = (v - mean) / denom;
            }
        }
        out
    }

    fn apply_conv(
        &self,
        g: &mut Graph,
        pv: &[Val],
        conv: &Conv,
        x: Val,
        stride: usize,
        pad: Padding,
    ) -> Result<Val> {
        let w = pv[conv.weight.0];
        let b = match conv.bias {
            Some(id) => pv[id.0],
            None => {
                let cout = g.shape(w).n();
                g.zeros(Shape::new(1, cout, 1, 1))?
            }
        };
        g.conv2d(x, w, b, stride, pad)
    }

    /// Z = 0.1 * sigmoid(GN2(Conv2(GELU(GN1(Conv1(pooled or full-res
    /// normalized input)))))), shape (N, d, 1, 1).
    pub fn prompt_generate(&self, g: &mut Graph, pv: &[Val], x: &Tensor) -> Result<Val> {
        let normalized = Self::normalize_input(x);
        let (stem, stride2) = match self.config.prompt_mode {
            PromptMode::Literal => {
                // The spatial mean of a standardized channel is identically
                // (mean - mean)/(std + eps) = 0, so literal mode pools to
                // exact zeros and the prompt is driven by the stem biases.
                let pooled = Tensor::zeros(Shape::new(x.shape().n(), x.shape().c(), 1, 1));
                (g.input(&pooled)?, false)
            }
            PromptMode::PoolLate => {
                if x.shape().h() < 4 || x.shape().w() < 4 {
                    return Err(Error::Shape(format!(
                        "pool_late prompt mode needs H,W >= 4, got {}",
                        x.shape()
                    )));
                }
                (g.input(&normalized)?, true)
            }
        };

        let pad = if stride2 {
            Padding::Zeros(1)
        } else {
            Padding::Zeros(0)
        };
        let mut cur = self.apply_conv(g, pv, &self.prompt.conv1, stem, 1, pad)?;
        if stride2 {
            cur = g.subsample2(cur)?;
        }
        cur = g.group_norm(
            cur,
            pv[self.prompt.gn1.gamma.0],
            pv[self.prompt.gn1.beta.0],
            1,
            GN_EPS,
        )?;
        cur = g.gelu(cur)?;
        cur = self.apply_conv(g, pv, &self.prompt.conv2, cur, 1, pad)?;
        if stride2 {
            cur = g.subsample2(cur)?;
        }
        cur = g.group_norm(
            cur,
            pv[self.prompt.gn2.gamma.0],
            pv[self.prompt.gn2.beta.0],
            1,
            GN_EPS,
        )?;
        cur = g.sigmoid(cur)?;
        if stride2 {
            cur = g.spatial_mean(cur)?;
        }
        g.scale(cur, 0.1)
    }

    fn task_block(&self, g: &mut Graph, pv: &[Val], tb: &TaskBlock, x: Val, z: Val) -> Result<Val> {
        let mut cur = self.apply_conv(g, pv, &tb.conv1, x, 1, Padding::Zeros(1))?;
        cur = g.group_norm(
            cur,
            pv[tb.gn1.gamma.0],
            pv[tb.gn1.beta.0],
            tb.groups,
            GN_EPS,
        )?;
        cur = g.gelu(cur)?;
        cur = self.apply_conv(g, pv, &tb.conv2, cur, 1, Padding::Zeros(1))?;
        cur = g.group_norm(
            cur,
            pv[tb.gn2.gamma.0],
            pv[tb.gn2.beta.0],
            tb.groups,
            GN_EPS,
        )?;

        let modulation = g.linear(z, pv[tb.mlp.weight.0], pv[tb.mlp.bias.0])?;
        let scaled = g.mul(modulation, pv[tb.alpha.0])?;
        g.add(cur, scaled)
    }

    /// The symmetric encoder-decoder; output spatial extents equal the input.
    pub fn unet_forward(&self, g: &mut Graph, pv: &[Val], x: Val, z: Val) -> Result<Val> {
        let s = g.shape(x);
        let div = self.config.required_divisor();
        if s.h() % div != 0 || s.w() % div != 0 {
            return Err(Error::Shape(format!(
                "input extents {}x{} must be divisible by {div} for {} levels",
                s.h(),
                s.w(),
                self.config.levels
            )));
        }
        let mut cur = x;
        let mut skips = Vec::new();
        for l in 0..self.config.levels {
            cur = self.task_block(g, pv, &self.unet.enc[l], cur, z)?;
            if l + 1 < self.config.levels {
                skips.push(cur);
                cur = self.apply_conv(g, pv, &self.unet.down[l], cur, 1, Padding::Zeros(1))?;
                cur = g.subsample2(cur)?;
            }
        }
        for (stage, l) in (0..self.config.levels.saturating_sub(1)).rev().enumerate() {
            cur = g.upsample_nearest(cur, 2)?;
            cur = g.concat_channels(cur, skips[l])?;
            cur = self.apply_conv(g, pv, &self.unet.fuse[stage], cur, 1, Padding::Zeros(1))?;
            cur = self.task_block(g, pv, &self.unet.dec[stage], cur, z)?;
        }
        self.apply_conv(g, pv, &self.unet.out, cur, 1, Padding::Zeros(1))
    }

    /// gain * linear(z): a per-channel constant guidance field, materialized
    /// at the target spatial shape.
    pub fn prompt_field(&self, g: &mut Graph, pv: &[Val], z: Val, shape: Shape) -> Result<Val> {
        let lin = g.linear(z, pv[self.field.lin.weight.0], pv[self.field.lin.bias.0])?;
        let scaled = g.mul(lin, pv[self.field.gain.0])?;
        let canvas = g.zeros(shape)?;
        g.add(canvas, scaled)
    }

    /// Convenience off-tape prompt extraction for diagnostics and dumps.
    pub fn prompt_vector(&self, x: &Tensor) -> Result<PromptVector> {
        let mut g = Graph::new();
        let pv = self.params.bind(&mut g, false)?;
        let z = self.prompt_generate(&mut g, &pv, x)?;
        Ok(PromptVector {
            z: g.to_tensor(z),
            dim: self.config.prompt_dim,
            mode: self.config.prompt_mode,
        })
    }

    /// Zero every parameter; useful for the degenerate-output contracts.
    pub fn zero_all_params(&mut self) {
        for i in 0..self.params.len() {
            let t = self.params.tensor_mut(ParamId(i));
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Look up a parameter id by its serialized name.
    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.params
            .entries
            .iter()
            .position(|(n, _)| n == name)
            .map(ParamId)
    }
}

#[derive(Clone, Copy)]
enum BiasInit {
    Zero,
    /// Small random values; breaks the degenerate constant-input point the
    /// literal prompt mode would otherwise start from.
    Randn(f64),
    None,
}

fn conv_init(
    params: &mut ParamSet,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    bias: BiasInit,
    rng: &mut ChaCha8Rng,
) -> Conv {
    let fan_in = (cin * k * k) as f64;
    let std = (2.0 / fan_in).sqrt();
    let weight = params.add(
        format!("{name}.weight"),
        Tensor::randn(Shape::new(cout, cin, k, k), std, rng),
    );
    let bias = match bias {
        BiasInit::Zero => Some(params.add(
            format!("{name}.bias"),
            Tensor::zeros(Shape::new(1, cout, 1, 1)),
        )),
        BiasInit::Randn(std) => Some(params.add(
            format!("{name}.bias"),
            Tensor::randn(Shape::new(1, cout, 1, 1), std, rng),
        )),
        BiasInit::None => None,
    };
    Conv { weight, bias }
}

fn affine_init(params: &mut ParamSet, name: &str, channels: usize) -> Affine {
    Affine {
        gamma: params.add(
            format!("{name}.gamma"),
            Tensor::full(Shape::new(1, channels, 1, 1), 1.0),
        ),
        beta: params.add(
            format!("{name}.beta"),
            Tensor::zeros(Shape::new(1, channels, 1, 1)),
        ),
    }
}

fn lin_init(
    params: &mut ParamSet,
    name: &str,
    cin: usize,
    cout: usize,
    rng: &mut ChaCha8Rng,
) -> Lin {
    let std = (2.0 / cin as f64).sqrt();
    Lin {
        weight: params.add(
            format!("{name}.weight"),
            Tensor::randn(Shape::new(cout, cin, 1, 1), std, rng),
        ),
        bias: params.add(
            format!("{name}.bias"),
            Tensor::zeros(Shape::new(1, cout, 1, 1)),
        ),
    }
}

fn task_block_init(
    params: &mut ParamSet,
    name: &str,
    cin: usize,
    cout: usize,
    d: usize,
    rng: &mut ChaCha8Rng,
) -> TaskBlock {
    TaskBlock {
        conv1: conv_init(
            params,
            &format!("{name}.conv1"),
            cin,
            cout,
            3,
            BiasInit::None,
            rng,
        ),
        gn1: affine_init(params, &format!("{name}.gn1"), cout),
        conv2: conv_init(
            params,
            &format!("{name}.conv2"),
            cout,
            cout,
            3,
            BiasInit::None,
            rng,
        ),
        gn2: affine_init(params, &format!("{name}.gn2"), cout),
        mlp: lin_init(params, &format!("{name}.mlp"), d, cout, rng),
        alpha: params.add(format!("{name}.alpha"), Tensor::scalar(0.1)),
        groups: gn_groups(cout),
    }
}
