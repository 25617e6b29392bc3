//! Parameter bundles addressed by path inside a [`ParamStore`].
//!
//! A bundle records the paths of its tensors plus static hyperparameters; the
//! tensors themselves live in the store so the whole model can be enumerated,
//! checkpointed and differentiated by path.

use crate::attention::{gmsa, AttentionParams, TokenGrid};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::{param_rng, ParamStore, Tensor};

/// Std of the truncated normal used for projection weights.
pub const PROJ_INIT_STD: f64 = 0.02;

/// Deterministic initializer: each tensor's values depend only on `(seed, path)`.
#[derive(Debug, Clone, Copy)]
pub struct Init {
    pub seed: u64,
}

impl Init {
    pub fn trunc_normal<T: Scalar>(&self, store: &mut ParamStore<T>, path: &str, shape: &[usize]) -> Result<()> {
        let mut rng = param_rng(self.seed, path);
        store.insert(path, Tensor::trunc_normal(shape, PROJ_INIT_STD, &mut rng))
    }

    /// Normal with variance `1 / fan_in`, fan-in = `Cin·kh·kw`.
    pub fn conv_fan_in<T: Scalar>(&self, store: &mut ParamStore<T>, path: &str, shape: &[usize]) -> Result<()> {
        let fan_in: usize = shape[1..].iter().product();
        let mut rng = param_rng(self.seed, path);
        store.insert(path, Tensor::randn(shape, (1.0 / fan_in as f64).sqrt(), &mut rng))
    }

    pub fn constant<T: Scalar>(&self, store: &mut ParamStore<T>, path: &str, shape: &[usize], v: f64) -> Result<()> {
        store.insert(path, Tensor::full(shape, T::lit(v)))
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// `x · W + b` with `W: [din, dout]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(prefix: &str, din: usize, dout: usize, bias: bool) -> Self {
        Linear {
            weight: join(prefix, "weight"),
            bias: bias.then(|| join(prefix, "bias")),
            din,
            dout,
        }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, init: Init) -> Result<()> {
        init.trunc_normal(store, &self.weight, &[self.din, self.dout])?;
        if let Some(b) = &self.bias {
            init.constant(store, b, &[self.dout], 0.0)?;
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.din * self.dout + if self.bias.is_some() { self.dout } else { 0 }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight)?;
        let b = self.bias.as_deref().map(|p| g.param(store, p)).transpose()?;
        g.linear(x, w, b)
    }
}

/// Layer normalization over the channel axis.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: String,
    pub shift: String,
    pub channels: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(prefix: &str, channels: usize) -> Self {
        LayerNorm {
            gain: join(prefix, "gain"),
            shift: join(prefix, "shift"),
            channels,
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, init: Init) -> Result<()> {
        init.constant(store, &self.gain, &[self.channels], 1.0)?;
        init.constant(store, &self.shift, &[self.channels], 0.0)
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gain = g.param(store, &self.gain)?;
        let shift = g.param(store, &self.shift)?;
        g.layer_norm(x, gain, shift, T::lit(self.eps))
    }
}

/// Two-layer perceptron with GELU in between.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(prefix: &str, channels: usize, hidden: usize) -> Self {
        Mlp {
            fc1: Linear::new(&join(prefix, "fc1"), channels, hidden, true),
            fc2: Linear::new(&join(prefix, "fc2"), hidden, channels, true),
        }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, init: Init) -> Result<()> {
        self.fc1.init(store, init)?;
        self.fc2.init(store, init)
    }

    pub fn param_count(&self) -> usize {
        self.fc1.param_count() + self.fc2.param_count()
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }
}

/// Pre-norm Transformer block:
/// `x = x + attn(LN(x))`, then `x = x + MLP(LN(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub norm1: LayerNorm,
    pub attn: AttentionParams,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl BlockParams {
    pub fn new(prefix: &str, channels: usize, heads: usize, mlp_ratio: f64, delta: Option<f64>) -> Result<Self> {
        let hidden = ((channels as f64) * mlp_ratio).round() as usize;
        Ok(BlockParams {
            norm1: LayerNorm::new(&join(prefix, "norm1"), channels),
            attn: AttentionParams::new(&join(prefix, "attn"), channels, heads, delta)?,
            norm2: LayerNorm::new(&join(prefix, "norm2"), channels),
            mlp: Mlp::new(&join(prefix, "mlp"), channels, hidden.max(1)),
        })
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, init: Init) -> Result<()> {
        self.norm1.init(store, init)?;
        self.attn.init(store, init)?;
        self.norm2.init(store, init)?;
        self.mlp.init(store, init)
    }

    pub fn param_count(&self) -> usize {
        self.norm1.param_count() + self.attn.param_count() + self.norm2.param_count() + self.mlp.param_count()
    }

    /// Attention (global when `window` is `None`) and MLP sub-blocks with residuals.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: TokenGrid,
        window: Option<usize>,
    ) -> Result<TokenGrid> {
        let h = self.norm1.forward(g, store, x.tokens)?;
        let h = gmsa(g, store, &x.with_tokens(h), &self.attn, window)?;
        let x1 = g.add(h.tokens, x.tokens)?;
        let h = self.norm2.forward(g, store, x1)?;
        let h = self.mlp.forward(g, store, h)?;
        let x2 = g.add(h, x1)?;
        Ok(x.with_tokens(x2))
    }
}
