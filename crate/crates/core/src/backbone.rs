//! Four-stage hybrid backbone: hybrid (conv + global attention) stages 1–2,
//! switching windowed stages 3–4, stride-2 downsampling in between.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{flatten, patch_partition, re_view, FeatureMap, PatchEmbed, TokenGrid};
use crate::dual_switching::ds_block;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::hnb::{hnb_stage, HnbStageParams};
use crate::layers::{BlockParams, Init, Linear};
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tensor};

pub const NUM_STAGES: usize = 4;
/// Default channels per attention head.
pub const HEAD_DIM: usize = 32;

/// Named hyperparameter bundles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    V1,
    Plus,
    Max,
    Micro,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::V1, Variant::Plus, Variant::Max, Variant::Micro];

    pub fn name(self) -> &'static str {
        match self {
            Variant::V1 => "hyneter-1.0",
            Variant::Plus => "hyneter-plus",
            Variant::Max => "hyneter-max",
            Variant::Micro => "hyneter-micro",
        }
    }

    pub fn config(self) -> ModelConfig {
        let (d, cnn, blocks, window, classes, image) = match self {
            Variant::V1 => (96, [2, 2, 2, 2], [2, 2, 2, 2], 7, 1000, 224),
            Variant::Plus => (96, [2, 2, 3, 2], [2, 2, 6, 2], 7, 1000, 224),
            Variant::Max => (128, [2, 2, 6, 2], [2, 2, 18, 2], 7, 1000, 224),
            Variant::Micro => (16, [1, 1, 1, 1], [1, 1, 1, 1], 4, 3, 32),
        };
        ModelConfig {
            d,
            cnn_layers: cnn,
            transformer_blocks: blocks,
            patch: 4,
            window,
            delta: 1.0,
            enable_hnb: true,
            enable_ds: true,
            heads: default_heads(d),
            mlp_ratio: 4.0,
            num_classes: classes,
            image_size: image,
            in_channels: 3,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    /// Accepts the full name or the short suffix (`1.0`, `plus`, `max`, `micro`).
    fn from_str(s: &str) -> Result<Self> {
        let short = s.strip_prefix("hyneter-").unwrap_or(s);
        Variant::ALL
            .into_iter()
            .find(|v| v.name().strip_prefix("hyneter-") == Some(short))
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::invalid("variant", format!("unknown variant `{s}`; expected one of {}", names.join(", ")))
            })
    }
}

/// Heads per stage: stage channels / [`HEAD_DIM`], at least one.
pub fn default_heads(d: usize) -> [usize; NUM_STAGES] {
    std::array::from_fn(|i| ((d << i) / HEAD_DIM).max(1))
}

/// Hyperparameters of one backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Stage-1 channels; stage `i` has `d·2^i` (0-based).
    pub d: usize,
    pub cnn_layers: [usize; NUM_STAGES],
    pub transformer_blocks: [usize; NUM_STAGES],
    pub patch: usize,
    /// Attention window of stages 3–4, clamped to the grid when larger.
    pub window: usize,
    pub delta: f64,
    pub enable_hnb: bool,
    pub enable_ds: bool,
    pub heads: [usize; NUM_STAGES],
    pub mlp_ratio: f64,
    pub num_classes: usize,
    /// Input side length; fixes the positional embedding size.
    pub image_size: usize,
    pub in_channels: usize,
}

impl ModelConfig {
    pub fn stage_channels(&self) -> [usize; NUM_STAGES] {
        std::array::from_fn(|i| self.d << i)
    }

    /// Square grid side of each stage for the configured image size.
    pub fn stage_grids(&self) -> [usize; NUM_STAGES] {
        let g0 = self.image_size / self.patch.max(1);
        std::array::from_fn(|i| g0 >> i)
    }

    /// Window actually used by stages 3–4 (index 2, 3); `None` for global stages.
    pub fn stage_windows(&self) -> [Option<usize>; NUM_STAGES] {
        let grids = self.stage_grids();
        std::array::from_fn(|i| (i >= 2).then(|| self.window.min(grids[i])))
    }

    /// Whether stage `i` (0-based) carries a convolution branch.
    pub fn has_conv_branch(&self, stage: usize) -> bool {
        self.enable_hnb && stage < 2 && self.cnn_layers[stage] > 0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::invalid("model config", detail));
        if self.d == 0 || self.patch == 0 || self.window == 0 || self.num_classes == 0 || self.in_channels == 0 {
            return bad("d, patch, window, num_classes and in_channels must be positive".into());
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return bad(format!("delta must be positive, got {}", self.delta));
        }
        if !(self.mlp_ratio > 0.0 && self.mlp_ratio.is_finite()) {
            return bad(format!("mlp_ratio must be positive, got {}", self.mlp_ratio));
        }
        let unit = self.patch * (1 << (NUM_STAGES - 1));
        if self.image_size == 0 || self.image_size % unit != 0 {
            return bad(format!(
                "image_size {} must be a positive multiple of patch·8 = {unit}",
                self.image_size
            ));
        }
        for (i, (&c, &h)) in self.stage_channels().iter().zip(&self.heads).enumerate() {
            if h == 0 || c % h != 0 {
                return bad(format!("stage {}: {c} channels not divisible by {h} heads", i + 1));
            }
        }
        let grids = self.stage_grids();
        for i in 2..NUM_STAGES {
            if self.window < grids[i] && grids[i] % self.window != 0 {
                return bad(format!(
                    "stage {}: grid {}x{} is not divisible by window {}",
                    i + 1,
                    grids[i],
                    grids[i],
                    self.window
                ));
            }
        }
        Ok(())
    }
}

/// Stride-2 2x2 convolution doubling channels between stages.
#[derive(Debug, Clone, PartialEq)]
pub struct Downsample {
    pub weight: String,
    pub bias: String,
    pub in_channels: usize,
}

impl Downsample {
    fn new(index: usize, in_channels: usize) -> Self {
        Downsample {
            weight: format!("downsample.{index}.weight"),
            bias: format!("downsample.{index}.bias"),
            in_channels,
        }
    }

    fn init<T: Scalar>(&self, store: &mut ParamStore<T>, init: Init) -> Result<()> {
        let c = self.in_channels;
        init.conv_fan_in(store, &self.weight, &[2 * c, c, 2, 2])?;
        init.constant(store, &self.bias, &[2 * c], 0.0)
    }

    pub fn param_count(&self) -> usize {
        let c = self.in_channels;
        2 * c * c * 4 + 2 * c
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: &TokenGrid) -> Result<TokenGrid> {
        let fm = re_view(g, x)?;
        let w = g.param(store, &self.weight)?;
        let b = g.param(store, &self.bias)?;
        let y = g.conv2d(fm.map, w, Some(b), 2, 0)?;
        let fm = FeatureMap::from_var(g, y)?;
        flatten(g, &fm)
    }
}

/// Stage wiring.
#[derive(Debug, Clone, PartialEq)]
pub enum Stage {
    Hybrid(HnbStageParams),
    Switching {
        blocks: Vec<BlockParams>,
        window: usize,
        switch: bool,
    },
}

impl Stage {
    pub fn blocks(&self) -> &[BlockParams] {
        match self {
            Stage::Hybrid(p) => &p.transformer_branch,
            Stage::Switching { blocks, .. } => blocks,
        }
    }

    fn blocks_mut(&mut self) -> &mut [BlockParams] {
        match self {
            Stage::Hybrid(p) => &mut p.transformer_branch,
            Stage::Switching { blocks, .. } => blocks,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Stage::Hybrid(p) => p.param_count(),
            Stage::Switching { blocks, .. } => blocks.iter().map(BlockParams::param_count).sum(),
        }
    }
}

/// Layout of every parameter bundle in the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub patch_embed: PatchEmbed,
    pub pos_embed: String,
    pub stages: Vec<Stage>,
    pub downsample: Vec<Downsample>,
    pub head: Linear,
}

/// Built backbone with its parameters.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar = f64> {
    config: ModelConfig,
    params: ParamStore<T>,
    layout: Layout,
}

/// Result of a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// Stage outputs as `[N, C, H, W]` feature maps.
    pub stages: [FeatureMap; NUM_STAGES],
    pub logits: Var,
}

/// Scalar parameter counts `(total, backbone)` for `config`, computed from
/// the wiring alone without allocating any parameters.
pub fn count_config_params(config: &ModelConfig) -> Result<(usize, usize)> {
    config.validate()?;
    let layout = Model::<f32>::wire(config)?;
    let backbone = layout.patch_embed.param_count()
        + config.stage_grids()[0].pow(2) * config.d
        + layout.stages.iter().map(Stage::param_count).sum::<usize>()
        + layout.downsample.iter().map(Downsample::param_count).sum::<usize>();
    Ok((backbone + layout.head.param_count(), backbone))
}

/// Build a model from a variant name (`hyneter-1.0`, `plus`, ...).
pub fn build_variant<T: Scalar>(name: &str, seed: u64) -> Result<Model<T>> {
    Model::build(name.parse::<Variant>()?.config(), seed)
}

impl<T: Scalar> Model<T> {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Self::wire(&config)?;
        let mut params = ParamStore::new();
        let init = Init { seed };
        layout.patch_embed.init(&mut params, init)?;
        let l0 = config.stage_grids()[0].pow(2);
        init.trunc_normal(&mut params, &layout.pos_embed, &[l0, config.d])?;
        for stage in &layout.stages {
            match stage {
                Stage::Hybrid(p) => p.init(&mut params, init)?,
                Stage::Switching { blocks, .. } => {
                    for b in blocks {
                        b.init(&mut params, init)?;
                    }
                }
            }
        }
        for ds in &layout.downsample {
            ds.init(&mut params, init)?;
        }
        layout.head.init(&mut params, init)?;
        Ok(Model { config, params, layout })
    }

    fn wire(config: &ModelConfig) -> Result<Layout> {
        let channels = config.stage_channels();
        let windows = config.stage_windows();
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for (i, &c) in channels.iter().enumerate() {
            let blocks = (0..config.transformer_blocks[i])
                .map(|j| {
                    BlockParams::new(
                        &format!("stages.{i}.blocks.{j}"),
                        c,
                        config.heads[i],
                        config.mlp_ratio,
                        Some(config.delta),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(if i < 2 {
                let conv = if config.has_conv_branch(i) { config.cnn_layers[i] } else { 0 };
                Stage::Hybrid(HnbStageParams::new(&format!("stages.{i}"), c, conv, blocks))
            } else {
                Stage::Switching {
                    blocks,
                    window: windows[i].expect("windowed stage"),
                    switch: config.enable_ds,
                }
            });
        }
        Ok(Layout {
            patch_embed: PatchEmbed::new("patch_embed", config.in_channels, config.d, config.patch, false),
            pos_embed: "pos_embed".to_string(),
            stages,
            downsample: (0..NUM_STAGES - 1).map(|i| Downsample::new(i, channels[i])).collect(),
            head: Linear::new("head", channels[NUM_STAGES - 1], config.num_classes, true),
        })
    }

    /// Same parameters with the score-scaler branch removed from every attention.
    pub fn without_score_scaler(mut self) -> Self {
        for stage in &mut self.layout.stages {
            for b in stage.blocks_mut() {
                b.attn.delta = None;
            }
        }
        self
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Exact number of scalar parameters, classification head included.
    pub fn count_params(&self) -> usize {
        self.params.scalar_count()
    }

    /// Scalar parameters excluding the classification head.
    pub fn count_backbone_params(&self) -> usize {
        self.count_params() - self.layout.head.param_count()
    }

    /// Record a forward pass of `images: [N, C, S, S]` into `g`.
    pub fn forward(&self, g: &mut Graph<T>, images: Var) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let s = cfg.image_size;
        match *g.shape(images) {
            [n, c, h, w] if n > 0 && c == cfg.in_channels && h == s && w == s => {}
            ref other => {
                return Err(Error::shape(
                    "forward",
                    format!("expected images [N, {}, {s}, {s}], got {other:?}", cfg.in_channels),
                ))
            }
        }
        let store = &self.params;
        let mut x = patch_partition(g, store, images, &self.layout.patch_embed, Some(&self.layout.pos_embed))?;
        let mut maps = Vec::with_capacity(NUM_STAGES);
        for (i, stage) in self.layout.stages.iter().enumerate() {
            if i > 0 {
                x = self.layout.downsample[i - 1].forward(g, store, &x)?;
            }
            x = match stage {
                Stage::Hybrid(p) => hnb_stage(g, store, &x, p)?,
                Stage::Switching { blocks, window, switch } => {
                    for b in blocks {
                        x = ds_block(g, store, &x, b, *window, *switch)?;
                    }
                    x
                }
            };
            maps.push(re_view(g, &x)?);
        }
        let pooled = g.mean_tokens(x.tokens)?;
        let logits = self.layout.head.forward(g, store, pooled)?;
        Ok(ForwardOutput {
            stages: maps.try_into().expect("four stages"),
            logits,
        })
    }

    /// Forward pass without keeping the graph: `(stage maps, logits)`.
    pub fn infer(&self, images: &Tensor<T>) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
        let mut g = Graph::new();
        let x = g.input(images.clone());
        let out = self.forward(&mut g, x)?;
        let maps = out.stages.iter().map(|m| g.value(m.map).clone()).collect();
        Ok((maps, g.value(out.logits).clone()))
    }

    /// Mean cross-entropy of `images` against `labels`.
    pub fn loss(&self, images: &Tensor<T>, labels: &[usize]) -> Result<T> {
        let mut g = Graph::new();
        let x = g.input(images.clone());
        let out = self.forward(&mut g, x)?;
        let loss = g.cross_entropy(out.logits, labels)?;
        Ok(g.value(loss).data()[0])
    }

    /// Cross-entropy loss, its gradient for every parameter, and the logits.
    pub fn loss_and_grads(
        &self,
        images: &Tensor<T>,
        labels: &[usize],
    ) -> Result<(T, std::collections::BTreeMap<String, Tensor<T>>, Tensor<T>)> {
        let mut g = Graph::new();
        let x = g.input(images.clone());
        let out = self.forward(&mut g, x)?;
        let loss = g.cross_entropy(out.logits, labels)?;
        let grads = g.backward(loss)?.for_params(&self.params);
        Ok((g.value(loss).data()[0], grads, g.value(out.logits).clone()))
    }
}
