//! Monolithic vision transformer whose every block emits a class token that
//! the shared classifier head can read.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Tensor, Var, LAYER_NORM_EPS};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
}

impl Default for ViTConfig {
    /// Desk-scale default: 32px RGB, 4px patches, 6 blocks of width 64.
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch_size: 4,
            embed_dim: 64,
            num_heads: 4,
            num_blocks: 6,
            mlp_ratio: 4,
            num_classes: 7,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.image_size,
            self.channels,
            self.patch_size,
            self.embed_dim,
            self.num_heads,
            self.num_blocks,
            self.mlp_ratio,
            self.num_classes,
        ]
        .iter()
        .all(|&v| v > 0);
        if !positive {
            return Err(Error::Config(format!("non-positive field in {self:?}")));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Patch tokens plus the class token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }
}

/// Parameter indices of one transformer block.
#[derive(Clone, Copy, Debug)]
struct BlockParams {
    norm1_gain: usize,
    norm1_bias: usize,
    qkv_weight: usize,
    qkv_bias: usize,
    proj_weight: usize,
    proj_bias: usize,
    norm2_gain: usize,
    norm2_bias: usize,
    fc1_weight: usize,
    fc1_bias: usize,
    fc2_weight: usize,
    fc2_bias: usize,
}

#[derive(Clone, Copy, Debug)]
struct Layout {
    patch_weight: usize,
    patch_bias: usize,
    class_token: usize,
    pos_embed: usize,
    norm_gain: usize,
    norm_bias: usize,
    head_weight: usize,
    head_bias: usize,
}

#[derive(Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    TruncNormal,
    /// Glorot-style uniform from fan-in and fan-out.
    Uniform(usize, usize),
    /// Uniform in `±1/sqrt(fan_in)`, keeping initial logits near uniform.
    FanIn(usize),
}

struct LayoutBuilder {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.inits.push(init);
        self.names.len() - 1
    }
}

fn build_layout(cfg: &ViTConfig) -> (LayoutBuilder, Layout, Vec<BlockParams>) {
    let d = cfg.embed_dim;
    let h = cfg.mlp_dim();
    let mut b = LayoutBuilder {
        names: Vec::new(),
        shapes: Vec::new(),
        inits: Vec::new(),
    };
    let patch_weight = b.push(
        "patch_embed.weight".into(),
        vec![cfg.patch_dim(), d],
        Init::Uniform(cfg.patch_dim(), d),
    );
    let patch_bias = b.push("patch_embed.bias".into(), vec![d], Init::Zeros);
    let class_token = b.push("cls_token".into(), vec![1, d], Init::TruncNormal);
    let pos_embed = b.push(
        "pos_embed".into(),
        vec![cfg.num_tokens(), d],
        Init::TruncNormal,
    );
    let blocks = (0..cfg.num_blocks)
        .map(|i| {
            let mut p =
                |n: &str, shape: Vec<usize>, init| b.push(format!("blocks.{i}.{n}"), shape, init);
            BlockParams {
                norm1_gain: p("norm1.gain", vec![d], Init::Ones),
                norm1_bias: p("norm1.bias", vec![d], Init::Zeros),
                qkv_weight: p("attn.qkv.weight", vec![d, 3 * d], Init::Uniform(d, 3 * d)),
                qkv_bias: p("attn.qkv.bias", vec![3 * d], Init::Zeros),
                proj_weight: p("attn.proj.weight", vec![d, d], Init::Uniform(d, d)),
                proj_bias: p("attn.proj.bias", vec![d], Init::Zeros),
                norm2_gain: p("norm2.gain", vec![d], Init::Ones),
                norm2_bias: p("norm2.bias", vec![d], Init::Zeros),
                fc1_weight: p("mlp.fc1.weight", vec![d, h], Init::Uniform(d, h)),
                fc1_bias: p("mlp.fc1.bias", vec![h], Init::Zeros),
                fc2_weight: p("mlp.fc2.weight", vec![h, d], Init::Uniform(h, d)),
                fc2_bias: p("mlp.fc2.bias", vec![d], Init::Zeros),
            }
        })
        .collect();
    let norm_gain = b.push("norm.gain".into(), vec![d], Init::Ones);
    let norm_bias = b.push("norm.bias".into(), vec![d], Init::Zeros);
    let head_weight = b.push(
        "head.weight".into(),
        vec![d, cfg.num_classes],
        Init::FanIn(d),
    );
    let head_bias = b.push("head.bias".into(), vec![cfg.num_classes], Init::Zeros);
    let layout = Layout {
        patch_weight,
        patch_bias,
        class_token,
        pos_embed,
        norm_gain,
        norm_bias,
        head_weight,
        head_bias,
    };
    (b, layout, blocks)
}

/// Parameters and architecture of the transformer. Parameters are stored in
/// a fixed order (see [`ViTModel::param_names`]); the classifier head is the
/// single head shared by every sub-model.
#[derive(Clone, Debug)]
pub struct ViTModel {
    config: ViTConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    layout: Layout,
    blocks: Vec<BlockParams>,
}

impl PartialEq for ViTModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.names == other.names && self.params == other.params
    }
}

fn trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let normal = Normal::new(0.0, std).expect("positive std");
    loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            return v;
        }
    }
}

impl ViTModel {
    /// Deterministic initialization from `seed`.
    pub fn init(config: ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (builder, layout, blocks) = build_layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = builder
            .shapes
            .iter()
            .zip(&builder.inits)
            .map(|(shape, init)| {
                let n: usize = shape.iter().product();
                let data: Vec<f64> = match *init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::TruncNormal => (0..n).map(|_| trunc_normal(&mut rng, 0.02)).collect(),
                    Init::FanIn(fan_in) => {
                        let a = 1.0 / (fan_in as f64).sqrt();
                        (0..n).map(|_| rng.random_range(-a..a)).collect()
                    }
                    Init::Uniform(fan_in, fan_out) => {
                        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                        (0..n).map(|_| rng.random_range(-a..a)).collect()
                    }
                };
                Tensor::new(shape.clone(), data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            names: builder.names,
            params,
            layout,
            blocks,
        })
    }

    /// Rebuilds a model from named parameters (e.g. a checkpoint). Names and
    /// shapes must match the layout implied by `config` exactly.
    pub fn from_named(config: ViTConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let (builder, layout, blocks) = build_layout(&config);
        if named.len() != builder.names.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, found {}",
                builder.names.len(),
                named.len()
            )));
        }
        let mut params = Vec::with_capacity(named.len());
        for ((name, t), (want, shape)) in named
            .into_iter()
            .zip(builder.names.iter().zip(&builder.shapes))
        {
            if &name != want || t.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "parameter {name} {:?} where {want} {shape:?} expected",
                    t.shape()
                )));
            }
            params.push(t);
        }
        Ok(Self {
            config,
            names: builder.names,
            params,
            layout,
            blocks,
        })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Registers every parameter on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundModel<'t, '_> {
        BoundModel {
            model: self,
            vars: self.params.iter().map(|p| tape.param(p.clone())).collect(),
        }
    }

    /// Convenience: bind and run the forward pass.
    pub fn forward<'t>(&self, tape: &'t Tape, batch: &Tensor) -> Result<ForwardTrace<'t>> {
        self.bind(tape).forward(batch)
    }

    /// All parameters rounded through `f32`, as a checkpoint stores them.
    pub fn rounded_to_f32(&self) -> Self {
        let mut m = self.clone();
        for p in &mut m.params {
            *p = p.rounded_to_f32();
        }
        m
    }
}

/// A model whose parameters are registered on a tape.
pub struct BoundModel<'t, 'm> {
    model: &'m ViTModel,
    vars: Vec<Var<'t>>,
}

/// Classifier pipeline shared by all sub-models: final norm, then head.
#[derive(Clone, Copy)]
pub struct ClassifierHead<'t> {
    norm_gain: Var<'t>,
    norm_bias: Var<'t>,
    weight: Var<'t>,
    bias: Var<'t>,
}

impl<'t> ClassifierHead<'t> {
    /// `[B, d]` class tokens to `[B, C]` logits.
    pub fn apply(&self, class_token: Var<'t>) -> Result<Var<'t>> {
        class_token
            .layer_norm(self.norm_gain, self.norm_bias, LAYER_NORM_EPS)?
            .matmul(self.weight)?
            .add(self.bias)
    }
}

/// Everything the losses and the analysis tools need from one forward pass.
pub struct ForwardTrace<'t> {
    /// `[B, C]` logits of the full model.
    pub logits: Var<'t>,
    /// Class token emitted by each block, each `[B, d]`.
    pub class_tokens: Vec<Var<'t>>,
    /// Final-block attention weights `[B, heads, T, T]`.
    pub attention: Var<'t>,
    pub head: ClassifierHead<'t>,
    pub config: ViTConfig,
}

impl<'t> ForwardTrace<'t> {
    pub fn batch_size(&self) -> usize {
        self.logits.shape()[0]
    }

    /// Logits of sub-model `block`: the shared head applied to that block's
    /// class token.
    pub fn sub_model_logits(&self, block: usize) -> Result<Var<'t>> {
        let Some(&token) = self.class_tokens.get(block) else {
            return Err(Error::Input(format!(
                "block {block} out of range for {} blocks",
                self.class_tokens.len()
            )));
        };
        self.head.apply(token)
    }

    /// Head-averaged final-block attention of the class token over the patch
    /// tokens for one example, in patch-grid order.
    pub fn class_attention(&self, example: usize) -> Result<Vec<f64>> {
        let att = self.attention.value();
        let (b, heads, t) = (att.shape()[0], att.shape()[1], att.shape()[2]);
        if example >= b {
            return Err(Error::Input(format!(
                "example {example} out of range for batch {b}"
            )));
        }
        let mut row = vec![0.0; t - 1];
        for h in 0..heads {
            let base = ((example * heads + h) * t) * t; // query row 0 = class token
            for (j, r) in row.iter_mut().enumerate() {
                *r += att.data()[base + 1 + j];
            }
        }
        for r in &mut row {
            *r /= heads as f64;
        }
        Ok(row)
    }

    /// Nearest-neighbour upsampling of a patch-grid vector to `[H, W]`.
    pub fn upsample(&self, per_patch: &[f64]) -> Result<Tensor> {
        let grid = self.config.grid();
        if per_patch.len() != grid * grid {
            return shape_err(format!(
                "{} values for a {grid}x{grid} grid",
                per_patch.len()
            ));
        }
        let p = self.config.patch_size;
        let size = self.config.image_size;
        let mut out = vec![0.0; size * size];
        for y in 0..size {
            for x in 0..size {
                out[y * size + x] = per_patch[(y / p) * grid + x / p];
            }
        }
        Tensor::new(vec![size, size], out)
    }

    /// [`Self::class_attention`] min-max normalized and upsampled to
    /// `[H, W]`. A constant row normalizes to all zeros.
    pub fn attention_map(&self, example: usize) -> Result<Tensor> {
        let mut row = self.class_attention(example)?;
        let (lo, hi) = row
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let span = hi - lo;
        for r in &mut row {
            *r = if span > 0.0 { (*r - lo) / span } else { 0.0 };
        }
        self.upsample(&row)
    }
}

impl<'t, 'm> BoundModel<'t, 'm> {
    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    /// Gradient for every parameter, in parameter order.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    }

    fn head(&self) -> ClassifierHead<'t> {
        let l = &self.model.layout;
        ClassifierHead {
            norm_gain: self.vars[l.norm_gain],
            norm_bias: self.vars[l.norm_bias],
            weight: self.vars[l.head_weight],
            bias: self.vars[l.head_bias],
        }
    }

    /// Pre-norm forward pass over a `[B, C, H, W]` batch.
    pub fn forward(&self, batch: &Tensor) -> Result<ForwardTrace<'t>> {
        let cfg = &self.model.config;
        let s = batch.shape();
        if s.len() != 4 || s[1] != cfg.channels || s[2] != cfg.image_size || s[3] != cfg.image_size
        {
            return shape_err(format!(
                "batch {s:?} does not match [B, {}, {}, {}]",
                cfg.channels, cfg.image_size, cfg.image_size
            ));
        }
        let b = s[0];
        let tape = self.vars[0].tape();
        let (d, t, heads, dh) = (
            cfg.embed_dim,
            cfg.num_tokens(),
            cfg.num_heads,
            cfg.head_dim(),
        );
        let v = |i: usize| self.vars[i];
        let l = &self.model.layout;

        let patches = tape.constant(patchify_batch(batch, cfg.patch_size)?);
        let tokens = patches.matmul(v(l.patch_weight))?.add(v(l.patch_bias))?;
        let cls = v(l.class_token).expand_leading(b)?;
        let mut x = Var::concat(&[cls, tokens], 1)?.add(v(l.pos_embed))?;

        let scale = 1.0 / (dh as f64).sqrt();
        let mut class_tokens = Vec::with_capacity(cfg.num_blocks);
        let mut attention = None;
        for blk in &self.model.blocks {
            let a = x.layer_norm(v(blk.norm1_gain), v(blk.norm1_bias), LAYER_NORM_EPS)?;
            let qkv = a
                .matmul(v(blk.qkv_weight))?
                .add(v(blk.qkv_bias))?
                .reshape(&[b, t, 3, heads, dh])?
                .permute(&[2, 0, 3, 1, 4])?;
            let part = |i: usize| qkv.narrow(0, i, 1)?.reshape(&[b, heads, t, dh]);
            let (q, k, val) = (part(0)?, part(1)?, part(2)?);
            let att = q.bmm(k, true)?.scale(scale).softmax(3)?;
            let mixed = att
                .bmm(val, false)?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[b, t, d])?
                .matmul(v(blk.proj_weight))?
                .add(v(blk.proj_bias))?;
            x = x.add(mixed)?;
            let hidden = x
                .layer_norm(v(blk.norm2_gain), v(blk.norm2_bias), LAYER_NORM_EPS)?
                .matmul(v(blk.fc1_weight))?
                .add(v(blk.fc1_bias))?
                .gelu()
                .matmul(v(blk.fc2_weight))?
                .add(v(blk.fc2_bias))?;
            x = x.add(hidden)?;
            if x.shape() != [b, t, d] {
                return Err(Error::Invariant(format!(
                    "block output {:?}, expected {:?}",
                    x.shape(),
                    [b, t, d]
                )));
            }
            class_tokens.push(x.narrow(1, 0, 1)?.reshape(&[b, d])?);
            attention = Some(att);
        }
        let head = self.head();
        let last = *class_tokens.last().expect("at least one block");
        Ok(ForwardTrace {
            logits: head.apply(last)?,
            class_tokens,
            attention: attention.expect("at least one block"),
            head,
            config: cfg.clone(),
        })
    }
}

/// `[C, H, W]` image to `[m, C·p²]` patch rows, patches in row-major grid
/// order, each row laid out channel, then row, then column.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let &[c, h, w] = image.shape() else {
        return shape_err(format!(
            "patchify expects [C, H, W], got {:?}",
            image.shape()
        ));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return shape_err(format!(
            "{h}x{w} image not divisible into {patch}px patches"
        ));
    }
    let (gh, gw) = (h / patch, w / patch);
    let dim = c * patch * patch;
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..c {
                for y in 0..patch {
                    let row = (ch * h + py * patch + y) * w + px * patch;
                    out.extend_from_slice(&src[row..row + patch]);
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, dim], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(
    patches: &Tensor,
    channels: usize,
    height: usize,
    width: usize,
    patch: usize,
) -> Result<Tensor> {
    if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
        return shape_err("image not divisible into patches");
    }
    let (gh, gw) = (height / patch, width / patch);
    let dim = channels * patch * patch;
    if patches.shape() != [gh * gw, dim] {
        return shape_err(format!(
            "patches {:?} vs [{}, {dim}]",
            patches.shape(),
            gh * gw
        ));
    }
    let mut out = vec![0.0; channels * height * width];
    let src = patches.data();
    let mut i = 0;
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..channels {
                for y in 0..patch {
                    let row = (ch * height + py * patch + y) * width + px * patch;
                    out[row..row + patch].copy_from_slice(&src[i..i + patch]);
                    i += patch;
                }
            }
        }
    }
    Tensor::new(vec![channels, height, width], out)
}

fn patchify_batch(batch: &Tensor, patch: usize) -> Result<Tensor> {
    let s = batch.shape();
    let per = s[1] * s[2] * s[3];
    let mut data = Vec::with_capacity(batch.numel());
    let mut rows = 0;
    let mut dim = 0;
    for img in batch.data().chunks_exact(per) {
        let p = patchify(&Tensor::new(s[1..].to_vec(), img.to_vec())?, patch)?;
        rows = p.shape()[0];
        dim = p.shape()[1];
        data.extend(p.into_data());
    }
    Tensor::new(vec![s[0], rows, dim], data)
}
