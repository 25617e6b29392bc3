//! Hybrid stage: a Transformer branch and a parallel multi-granularity
//! convolution branch, fused by a tanh-gated Hadamard product plus residual.
//!
//! ```text
//! X  = re_view(blocks(S))
//! S1 = conv_branch(re_view(S))        each layer: k1(S) + k3(S) + k5(S)
//! X2 = tanh(X ⊙ S1)
//! out = flatten(X + X2)
//! ```

use crate::attention::{flatten, re_view, FeatureMap, TokenGrid};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{join, BlockParams, Init};
use crate::scalar::Scalar;
use crate::tensor::ParamStore;

/// Kernel sizes of one multi-granularity layer; padding is `(k - 1) / 2`.
pub const GRANULARITIES: [usize; 3] = [1, 3, 5];

/// Three parallel same-padded convolutions whose outputs are summed.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTriple {
    /// Weight paths, one per entry of [`GRANULARITIES`].
    pub weights: [String; 3],
    pub biases: Option<[String; 3]>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvTriple {
    pub fn new(prefix: &str, in_channels: usize, out_channels: usize, bias: bool) -> Self {
        let name = |k: usize, what: &str| join(prefix, &format!("k{k}.{what}"));
        ConvTriple {
            weights: GRANULARITIES.map(|k| name(k, "weight")),
            biases: bias.then(|| GRANULARITIES.map(|k| name(k, "bias"))),
            in_channels,
            out_channels,
        }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, init: Init) -> Result<()> {
        for (path, k) in self.weights.iter().zip(GRANULARITIES) {
            init.conv_fan_in(store, path, &[self.out_channels, self.in_channels, k, k])?;
        }
        if let Some(bs) = &self.biases {
            for b in bs {
                init.constant(store, b, &[self.out_channels], 0.0)?;
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let w: usize = GRANULARITIES
            .iter()
            .map(|k| self.out_channels * self.in_channels * k * k)
            .sum();
        w + if self.biases.is_some() { 3 * self.out_channels } else { 0 }
    }
}

/// `Conv_1(S) + Conv_3(S) + Conv_5(S)`, stride 1, same padding.
pub fn multi_granularity_conv<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    s: &FeatureMap,
    layer: &ConvTriple,
) -> Result<FeatureMap> {
    if s.channels != layer.in_channels {
        return Err(Error::shape(
            "multi_granularity_conv",
            format!("input has {} channels, layer expects {}", s.channels, layer.in_channels),
        ));
    }
    let mut sum: Option<Var> = None;
    for (i, k) in GRANULARITIES.into_iter().enumerate() {
        let w = g.param(store, &layer.weights[i])?;
        let b = match &layer.biases {
            Some(bs) => Some(g.param(store, &bs[i])?),
            None => None,
        };
        let y = g.conv2d(s.map, w, b, 1, (k - 1) / 2)?;
        sum = Some(match sum {
            Some(acc) => g.add(acc, y)?,
            None => y,
        });
    }
    FeatureMap::from_var(g, sum.expect("three kernels"))
}

/// Parameters of one hybrid stage.
#[derive(Debug, Clone, PartialEq)]
pub struct HnbStageParams {
    /// Stacked multi-granularity layers, GELU between consecutive layers.
    /// Empty means the convolution branch is absent.
    pub conv_branch: Vec<ConvTriple>,
    pub transformer_branch: Vec<BlockParams>,
    pub channels: usize,
}

impl HnbStageParams {
    pub fn new(prefix: &str, channels: usize, conv_layers: usize, blocks: Vec<BlockParams>) -> Self {
        HnbStageParams {
            conv_branch: (0..conv_layers)
                .map(|i| ConvTriple::new(&join(prefix, &format!("conv.{i}")), channels, channels, false))
                .collect(),
            transformer_branch: blocks,
            channels,
        }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, init: Init) -> Result<()> {
        for b in &self.transformer_branch {
            b.init(store, init)?;
        }
        for c in &self.conv_branch {
            c.init(store, init)?;
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.transformer_branch.iter().map(BlockParams::param_count).sum::<usize>()
            + self.conv_branch.iter().map(ConvTriple::param_count).sum::<usize>()
    }
}

/// Run the convolution branch on a feature map.
pub fn conv_branch<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    s: &FeatureMap,
    layers: &[ConvTriple],
) -> Result<FeatureMap> {
    let mut cur = *s;
    for (i, layer) in layers.iter().enumerate() {
        if i > 0 {
            let act = g.gelu(cur.map);
            cur = cur.with_map(act);
        }
        cur = multi_granularity_conv(g, store, &cur, layer)?;
    }
    Ok(cur)
}

/// One hybrid stage over `s`, with global attention in every block.
///
/// Without a convolution branch the result is exactly the Transformer
/// branch's output.
pub fn hnb_stage<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    s: &TokenGrid,
    params: &HnbStageParams,
) -> Result<TokenGrid> {
    if s.channels != params.channels {
        return Err(Error::shape(
            "hnb_stage",
            format!("input has {} channels, stage expects {}", s.channels, params.channels),
        ));
    }
    let mut t = *s;
    for block in &params.transformer_branch {
        t = block.forward(g, store, t, None)?;
    }
    if params.conv_branch.is_empty() {
        return Ok(t);
    }
    let x = re_view(g, &t)?;
    let s_map = re_view(g, s)?;
    let s1 = conv_branch(g, store, &s_map, &params.conv_branch)?;
    fuse(g, &x, &s1)
}

/// `flatten(X + tanh(X ⊙ S1))`.
pub fn fuse<T: Scalar>(g: &mut Graph<T>, x: &FeatureMap, s1: &FeatureMap) -> Result<TokenGrid> {
    let x1 = g.mul(x.map, s1.map)?;
    let x2 = g.tanh(x1);
    let out = g.add(x.map, x2)?;
    flatten(g, &x.with_map(out))
}
