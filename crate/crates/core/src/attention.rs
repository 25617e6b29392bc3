//! Patch embedding, token/feature-map re-viewing and multi-head self-attention
//! with an off-diagonal score scaler.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{join, Init, Linear};
use crate::scalar::Scalar;
use crate::tensor::ParamStore;

pub use crate::ops::scaled_scores;

/// Tokens `[N, L, C]` with the spatial grid they came from, `L = rows·cols`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenGrid {
    pub tokens: Var,
    pub batch: usize,
    pub grid: (usize, usize),
    pub channels: usize,
}

impl TokenGrid {
    pub fn len(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Same layout, different values.
    pub fn with_tokens(&self, tokens: Var) -> Self {
        TokenGrid { tokens, ..*self }
    }

    /// Wrap an existing `[N, L, C]` node, checking it against `grid`.
    pub fn from_var<T: Scalar>(g: &Graph<T>, tokens: Var, grid: (usize, usize)) -> Result<Self> {
        let &[n, l, c] = g.shape(tokens) else {
            return Err(Error::shape("token grid", format!("expected [N,L,C], got {:?}", g.shape(tokens))));
        };
        if l != grid.0 * grid.1 {
            return Err(Error::shape(
                "token grid",
                format!("{l} tokens cannot form a {}x{} grid", grid.0, grid.1),
            ));
        }
        Ok(TokenGrid { tokens, batch: n, grid, channels: c })
    }
}

/// Feature map `[N, C, H, W]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureMap {
    pub map: Var,
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl FeatureMap {
    pub fn from_var<T: Scalar>(g: &Graph<T>, map: Var) -> Result<Self> {
        let &[n, c, h, w] = g.shape(map) else {
            return Err(Error::shape("feature map", format!("expected [N,C,H,W], got {:?}", g.shape(map))));
        };
        Ok(FeatureMap { map, batch: n, channels: c, height: h, width: w })
    }

    pub fn with_map(&self, map: Var) -> Self {
        FeatureMap { map, ..*self }
    }
}

/// `[N, L, C] -> [N, C, rows, cols]`; token `r·cols + c` lands at `(r, c)`.
pub fn re_view<T: Scalar>(g: &mut Graph<T>, x: &TokenGrid) -> Result<FeatureMap> {
    let (n, c) = (x.batch, x.channels);
    let (h, w) = x.grid;
    let shape = g.shape(x.tokens);
    if shape != [n, h * w, c] {
        return Err(Error::shape(
            "re_view",
            format!("tokens {shape:?} do not match grid {h}x{w} with {c} channels"),
        ));
    }
    let l = h * w;
    let mut index = Vec::with_capacity(n * c * l);
    for b in 0..n {
        for ch in 0..c {
            for p in 0..l {
                index.push((b * l + p) * c + ch);
            }
        }
    }
    let map = g.gather(x.tokens, Arc::new(index), &[n, c, h, w])?;
    Ok(FeatureMap { map, batch: n, channels: c, height: h, width: w })
}

/// Inverse of [`re_view`].
pub fn flatten<T: Scalar>(g: &mut Graph<T>, x: &FeatureMap) -> Result<TokenGrid> {
    let (n, c, h, w) = (x.batch, x.channels, x.height, x.width);
    let shape = g.shape(x.map);
    if shape != [n, c, h, w] {
        return Err(Error::shape(
            "flatten",
            format!("map {shape:?} does not match recorded [{n}, {c}, {h}, {w}]"),
        ));
    }
    let l = h * w;
    let mut index = Vec::with_capacity(n * c * l);
    for b in 0..n {
        for p in 0..l {
            for ch in 0..c {
                index.push((b * c + ch) * l + p);
            }
        }
    }
    let tokens = g.gather(x.map, Arc::new(index), &[n, l, c])?;
    Ok(TokenGrid { tokens, batch: n, grid: (h, w), channels: c })
}

/// Non-overlapping patch embedding via a `patch x patch` stride-`patch` convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbed {
    pub weight: String,
    pub bias: Option<String>,
    pub patch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl PatchEmbed {
    pub fn new(prefix: &str, in_channels: usize, out_channels: usize, patch: usize, bias: bool) -> Self {
        PatchEmbed {
            weight: join(prefix, "weight"),
            bias: bias.then(|| join(prefix, "bias")),
            patch,
            in_channels,
            out_channels,
        }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, init: Init) -> Result<()> {
        init.conv_fan_in(store, &self.weight, &[self.out_channels, self.in_channels, self.patch, self.patch])?;
        if let Some(b) = &self.bias {
            init.constant(store, b, &[self.out_channels], 0.0)?;
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.patch * self.patch
            + if self.bias.is_some() { self.out_channels } else { 0 }
    }
}

/// Split `images: [N, C, H, W]` into `patch x patch` tiles, embed each linearly
/// and add the positional embedding `pos: [L, C']` when given.
pub fn patch_partition<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    images: Var,
    embed: &PatchEmbed,
    pos: Option<&str>,
) -> Result<TokenGrid> {
    let &[_, _, h, w] = g.shape(images) else {
        return Err(Error::shape("patch_partition", format!("expected [N,C,H,W], got {:?}", g.shape(images))));
    };
    let p = embed.patch;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::invalid(
            "patch_partition",
            format!("image {h}x{w} must be divisible by the patch size {p}"),
        ));
    }
    let wt = g.param(store, &embed.weight)?;
    let bias = embed.bias.as_deref().map(|b| g.param(store, b)).transpose()?;
    let map = g.conv2d(images, wt, bias, p, 0)?;
    let fm = FeatureMap::from_var(g, map)?;
    let grid = flatten(g, &fm)?;
    match pos {
        Some(path) => {
            let pe = g.param(store, path)?;
            let tokens = g.add_broadcast(grid.tokens, pe)?;
            Ok(grid.with_tokens(tokens))
        }
        None => Ok(grid),
    }
}

/// Multi-head attention projections plus the score scaler.
///
/// `delta: None` removes the scaler from the computation entirely;
/// `Some(d)` multiplies every off-diagonal logit by `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub head_dim: usize,
    pub delta: Option<f64>,
}

impl AttentionParams {
    pub fn new(prefix: &str, channels: usize, heads: usize, delta: Option<f64>) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::invalid(
                "attention",
                format!("{channels} channels cannot be split into {heads} heads"),
            ));
        }
        if let Some(d) = delta {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::invalid("attention", format!("delta must be positive, got {d}")));
            }
        }
        Ok(AttentionParams {
            q: Linear::new(&join(prefix, "q"), channels, channels, true),
            k: Linear::new(&join(prefix, "k"), channels, channels, true),
            v: Linear::new(&join(prefix, "v"), channels, channels, true),
            proj: Linear::new(&join(prefix, "proj"), channels, channels, true),
            heads,
            head_dim: channels / heads,
            delta,
        })
    }

    pub fn channels(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, init: Init) -> Result<()> {
        for l in [&self.q, &self.k, &self.v, &self.proj] {
            l.init(store, init)?;
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        [&self.q, &self.k, &self.v, &self.proj]
            .iter()
            .map(|l| l.param_count())
            .sum()
    }
}

/// Gather indices taking `[N, L, C]` to `[N·windows·heads, wh·ww, head_dim]`.
fn window_heads_index(n: usize, grid: (usize, usize), tile: (usize, usize), heads: usize, dh: usize) -> Vec<usize> {
    let (h, w) = grid;
    let (wh, ww) = tile;
    let c = heads * dh;
    let l = h * w;
    let mut index = Vec::with_capacity(n * l * c);
    for b in 0..n {
        for wy in 0..h / wh {
            for wx in 0..w / ww {
                for head in 0..heads {
                    for ty in 0..wh {
                        for tx in 0..ww {
                            let pos = (wy * wh + ty) * w + wx * ww + tx;
                            let base = (b * l + pos) * c + head * dh;
                            index.extend(base..base + dh);
                        }
                    }
                }
            }
        }
    }
    index
}

fn invert(index: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; index.len()];
    for (i, &src) in index.iter().enumerate() {
        inv[src] = i;
    }
    inv
}

/// Multi-head self-attention over `x`.
///
/// With `window: None` every token attends to all tokens of its image. With
/// `Some(w)` the grid is tiled into `w x w` windows and attention runs inside
/// each tile independently; both grid extents must be divisible by `w`.
pub fn gmsa<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: &TokenGrid,
    params: &AttentionParams,
    window: Option<usize>,
) -> Result<TokenGrid> {
    let (h, w) = x.grid;
    if x.channels != params.channels() {
        return Err(Error::shape(
            "gmsa",
            format!("{} token channels vs {} attention channels", x.channels, params.channels()),
        ));
    }
    let tile = match window {
        None => (h, w),
        Some(win) => {
            if win == 0 || h % win != 0 || w % win != 0 {
                return Err(Error::invalid(
                    "gmsa",
                    format!("grid {h}x{w} is not divisible by window {win}"),
                ));
            }
            (win, win)
        }
    };
    let (n, l, c) = (x.batch, h * w, x.channels);
    let (heads, dh) = (params.heads, params.head_dim);
    let lw = tile.0 * tile.1;
    let nb = n * (l / lw) * heads;

    let q = params.q.forward(g, store, x.tokens)?;
    let k = params.k.forward(g, store, x.tokens)?;
    let v = params.v.forward(g, store, x.tokens)?;

    let index = Arc::new(window_heads_index(n, x.grid, tile, heads, dh));
    let split = [nb, lw, dh];
    let q = g.gather(q, index.clone(), &split)?;
    let k = g.gather(k, index.clone(), &split)?;
    let v = g.gather(v, index.clone(), &split)?;

    let scores = g.scaled_scores(q, k, params.delta.map(T::lit))?;
    let probs = g.softmax_rows(scores);
    let mixed = g.bmm(probs, v)?;

    let merged = g.gather(mixed, Arc::new(invert(&index)), &[n, l, c])?;
    let out = params.proj.forward(g, store, merged)?;
    Ok(x.with_tokens(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_attention(c: usize, delta: Option<f64>) -> (ParamStore, AttentionParams) {
        let p = AttentionParams::new("attn", c, 1, delta).unwrap();
        let mut store = ParamStore::new();
        for l in [&p.q, &p.k, &p.v, &p.proj] {
            store.insert(&l.weight, Tensor::eye(c)).unwrap();
            store.insert(l.bias.as_ref().unwrap(), Tensor::zeros(&[c])).unwrap();
        }
        (store, p)
    }

    #[test]
    fn patch_partition_grid_sizes() {
        for (size, l, grid) in [(8, 4, (2, 2)), (32, 64, (8, 8))] {
            let embed = PatchEmbed::new("pe", 3, 5, 4, false);
            let mut store = ParamStore::<f64>::new();
            embed.init(&mut store, Init { seed: 0 }).unwrap();
            let mut g = Graph::new();
            let img = g.input(Tensor::zeros(&[1, 3, size, size]));
            let tg = patch_partition(&mut g, &store, img, &embed, None).unwrap();
            assert_eq!(tg.grid, grid);
            assert_eq!(g.shape(tg.tokens), [1, l, 5]);
            assert!(g.value(tg.tokens).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn patch_partition_rejects_indivisible() {
        let embed = PatchEmbed::new("pe", 3, 5, 4, false);
        let mut store = ParamStore::<f64>::new();
        embed.init(&mut store, Init { seed: 0 }).unwrap();
        let mut g = Graph::new();
        let img = g.input(Tensor::zeros(&[1, 3, 10, 8]));
        let err = patch_partition(&mut g, &store, img, &embed, None).unwrap_err();
        assert!(err.to_string().contains("patch size 4"), "{err}");
    }

    #[test]
    fn re_view_places_tokens_spatially() {
        let mut g = Graph::<f64>::new();
        // 1 image, 2x3 grid, 2 channels; token p has values (p, 10p)
        let data: Vec<f64> = (0..6).flat_map(|p| [p as f64, 10.0 * p as f64]).collect();
        let t = g.input(Tensor::new(vec![1, 6, 2], data).unwrap());
        let tg = TokenGrid::from_var(&g, t, (2, 3)).unwrap();
        let fm = re_view(&mut g, &tg).unwrap();
        let v = g.value(fm.map);
        assert_eq!(v.shape(), [1, 2, 2, 3]);
        for r in 0..2 {
            for c in 0..3 {
                assert_eq!(v.data()[r * 3 + c], (r * 3 + c) as f64);
                assert_eq!(v.data()[6 + r * 3 + c], 10.0 * (r * 3 + c) as f64);
            }
        }
        let back = flatten(&mut g, &fm).unwrap();
        assert!(g.value(back.tokens).bit_eq(g.value(t)));
    }

    #[test]
    fn single_token_grid_is_one_by_one_map() {
        let mut g = Graph::<f64>::new();
        let t = g.input(Tensor::from_f64(vec![1, 1, 3], &[1.0, 2.0, 3.0]).unwrap());
        let tg = TokenGrid::from_var(&g, t, (1, 1)).unwrap();
        let fm = re_view(&mut g, &tg).unwrap();
        assert_eq!(g.shape(fm.map), [1, 3, 1, 1]);
    }

    #[test]
    fn re_view_rejects_grid_mismatch() {
        let mut g = Graph::<f64>::new();
        let t = g.input(Tensor::zeros(&[1, 6, 2]));
        assert!(TokenGrid::from_var(&g, t, (2, 2)).is_err());
        let bad = TokenGrid { tokens: t, batch: 1, grid: (2, 2), channels: 2 };
        assert!(re_view(&mut g, &bad).is_err());
    }

    #[test]
    fn single_token_identity_attention_returns_input() {
        let (store, p) = identity_attention(3, Some(1.7));
        let mut g = Graph::new();
        let t = g.input(Tensor::from_f64(vec![1, 1, 3], &[0.3, -1.0, 2.0]).unwrap());
        let tg = TokenGrid::from_var(&g, t, (1, 1)).unwrap();
        let out = gmsa(&mut g, &store, &tg, &p, None).unwrap();
        assert!(g.value(out.tokens).bit_eq(g.value(t)));
    }

    #[test]
    fn two_token_identity_attention_matches_hand_mixture() {
        let (store, p) = identity_attention(2, Some(1.0));
        let x = [[0.5, -1.0], [2.0, 0.25]];
        let mut g = Graph::new();
        let t = g.input(Tensor::from_f64(vec![1, 2, 2], &[x[0][0], x[0][1], x[1][0], x[1][1]]).unwrap());
        let tg = TokenGrid::from_var(&g, t, (1, 2)).unwrap();
        let out = gmsa(&mut g, &store, &tg, &p, None).unwrap();
        let got = g.value(out.tokens).data().to_vec();
        for i in 0..2 {
            let s: Vec<f64> = (0..2)
                .map(|j| (x[i][0] * x[j][0] + x[i][1] * x[j][1]) / 2f64.sqrt())
                .collect();
            let z: f64 = s.iter().map(|v| v.exp()).sum();
            for c in 0..2 {
                let want: f64 = (0..2).map(|j| s[j].exp() / z * x[j][c]).sum();
                assert!((got[i * 2 + c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn full_extent_window_equals_global() {
        let p = AttentionParams::new("attn", 8, 2, Some(1.3)).unwrap();
        let mut store = ParamStore::<f64>::new();
        p.init(&mut store, Init { seed: 5 }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(&[2, 16, 8], 1.0, &mut rng);
        let run = |window| {
            let mut g = Graph::new();
            let t = g.input(x.clone());
            let tg = TokenGrid::from_var(&g, t, (4, 4)).unwrap();
            let out = gmsa(&mut g, &store, &tg, &p, window).unwrap();
            g.value(out.tokens).clone()
        };
        assert!(run(None).bit_eq(&run(Some(4))));
        assert!(!run(None).bit_eq(&run(Some(2))));
    }

    #[test]
    fn window_must_divide_grid() {
        let p = AttentionParams::new("attn", 4, 1, None).unwrap();
        let mut store = ParamStore::<f64>::new();
        p.init(&mut store, Init { seed: 0 }).unwrap();
        let mut g = Graph::new();
        let t = g.input(Tensor::zeros(&[1, 6, 4]));
        let tg = TokenGrid::from_var(&g, t, (2, 3)).unwrap();
        assert!(gmsa(&mut g, &store, &tg, &p, Some(2)).is_err());
    }

    #[test]
    fn heads_must_divide_channels() {
        assert!(AttentionParams::new("a", 10, 3, None).is_err());
        assert!(AttentionParams::new("a", 12, 3, Some(0.0)).is_err());
        let p = AttentionParams::new("a", 12, 3, Some(2.0)).unwrap();
        assert_eq!(p.head_dim * p.heads, 12);
    }
}
