#![allow(dead_code)]

pub mod suites;

use hyneter::ops;
use hyneter::{ModelConfig, Tensor};

/// Parameter counts `(total, backbone)` from per-layer formulas.
pub fn closed_form_counts(cfg: &ModelConfig) -> (usize, usize) {
    let grid = cfg.image_size / cfg.patch;
    let mut n = cfg.d * cfg.in_channels * cfg.patch * cfg.patch + grid * grid * cfg.d;
    for stage in 0..4 {
        let c = cfg.d << stage;
        let hidden = (c as f64 * cfg.mlp_ratio).round() as usize;
        let block = 2 * c + 4 * (c * c + c) + 2 * c + (c * hidden + hidden) + (hidden * c + c);
        n += cfg.transformer_blocks[stage] * block;
        if cfg.enable_hnb && stage < 2 {
            n += cfg.cnn_layers[stage] * c * c * (1 + 9 + 25);
        }
        if stage < 3 {
            n += 2 * c * c * 4 + 2 * c;
        }
    }
    let head = (cfg.d << 3) * cfg.num_classes + cfg.num_classes;
    (n + head, n)
}

fn get<'a>(params: &'a hyneter::ParamStore, path: &str) -> &'a Tensor {
    params.get(path).unwrap_or_else(|e| panic!("{e}"))
}

fn map_to_tokens(map: &Tensor) -> Tensor {
    let &[n, c, h, w] = map.shape() else { panic!("rank 4") };
    let l = h * w;
    let mut out = vec![0.0; n * l * c];
    for b in 0..n {
        for ch in 0..c {
            for p in 0..l {
                out[(b * l + p) * c + ch] = map.data()[(b * c + ch) * l + p];
            }
        }
    }
    Tensor::new(vec![n, l, c], out).unwrap()
}

fn tokens_to_map(tokens: &Tensor, h: usize, w: usize) -> Tensor {
    let &[n, l, c] = tokens.shape() else { panic!("rank 3") };
    let mut out = vec![0.0; n * l * c];
    for b in 0..n {
        for p in 0..l {
            for ch in 0..c {
                out[(b * c + ch) * l + p] = tokens.data()[(b * l + p) * c + ch];
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out).unwrap()
}

fn add(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

fn dense(params: &hyneter::ParamStore, prefix: &str, x: &Tensor) -> Tensor {
    let rows = x.len() / x.shape().last().unwrap();
    let flat = x.clone().reshape(&[rows, *x.shape().last().unwrap()]).unwrap();
    let w = get(params, &format!("{prefix}.weight"));
    let b = get(params, &format!("{prefix}.bias"));
    let y = ops::linear(&flat, w, Some(b)).unwrap();
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = w.shape()[1];
    y.reshape(&shape).unwrap()
}

fn norm(params: &hyneter::ParamStore, prefix: &str, x: &Tensor) -> Tensor {
    let g = get(params, &format!("{prefix}.gain"));
    let s = get(params, &format!("{prefix}.shift"));
    ops::layer_norm(x, g, s, 1e-5).unwrap().0
}

/// Plain windowed attention: loops over images, windows and heads, each
/// handled as its own small matrix problem.
fn attention(
    params: &hyneter::ParamStore,
    prefix: &str,
    x: &Tensor,
    grid: usize,
    heads: usize,
    window: usize,
    delta: f64,
) -> Tensor {
    let &[n, l, c] = x.shape() else { panic!() };
    let dh = c / heads;
    let q = dense(params, &format!("{prefix}.q"), x);
    let k = dense(params, &format!("{prefix}.k"), x);
    let v = dense(params, &format!("{prefix}.v"), x);
    let mut merged = vec![0.0; n * l * c];
    let per = grid / window;
    for b in 0..n {
        for wy in 0..per {
            for wx in 0..per {
                let positions: Vec<usize> = (0..window * window)
                    .map(|t| (wy * window + t / window) * grid + wx * window + t % window)
                    .collect();
                for head in 0..heads {
                    let pick = |src: &Tensor| {
                        let mut m = Vec::with_capacity(positions.len() * dh);
                        for &p in &positions {
                            m.extend_from_slice(&src.data()[(b * l + p) * c + head * dh..][..dh]);
                        }
                        Tensor::new(vec![1, positions.len(), dh], m).unwrap()
                    };
                    let (qw, kw, vw) = (pick(&q), pick(&k), pick(&v));
                    let scores = ops::scaled_scores(&qw, &kw, Some(delta)).unwrap();
                    let probs = ops::softmax_rows(&scores);
                    let out = ops::bmm(&probs, &vw).unwrap();
                    for (t, &p) in positions.iter().enumerate() {
                        merged[(b * l + p) * c + head * dh..][..dh].copy_from_slice(&out.data()[t * dh..][..dh]);
                    }
                }
            }
        }
    }
    let merged = Tensor::new(vec![n, l, c], merged).unwrap();
    dense(params, &format!("{prefix}.proj"), &merged)
}

fn block(params: &hyneter::ParamStore, prefix: &str, x: &Tensor, grid: usize, heads: usize, window: usize, delta: f64) -> Tensor {
    let h = norm(params, &format!("{prefix}.norm1"), x);
    let h = attention(params, &format!("{prefix}.attn"), &h, grid, heads, window, delta);
    let x1 = add(&h, x);
    let h = norm(params, &format!("{prefix}.norm2"), &x1);
    let h = dense(params, &format!("{prefix}.mlp.fc1"), &h).map(ops::gelu);
    let h = dense(params, &format!("{prefix}.mlp.fc2"), &h);
    add(&h, &x1)
}

/// Pure windowed-Transformer pyramid: patch embedding, two global-attention
/// stages, two windowed stages, stride-2 merges and a mean-pooled head.
/// Reads parameters by path from `params`; returns stage maps and logits.
pub fn plain_transformer_forward(cfg: &ModelConfig, params: &hyneter::ParamStore, images: &Tensor) -> (Vec<Tensor>, Tensor) {
    let n = images.shape()[0];
    let embed = ops::conv2d(images, get(params, "patch_embed.weight"), None, cfg.patch, 0).unwrap();
    let mut grid = cfg.image_size / cfg.patch;
    let mut x = map_to_tokens(&embed);
    let pos = get(params, "pos_embed");
    let data = x.data().iter().enumerate().map(|(i, v)| v + pos.data()[i % pos.len()]).collect();
    x = Tensor::new(x.shape().to_vec(), data).unwrap();

    let mut maps = Vec::new();
    for stage in 0..4 {
        if stage > 0 {
            let map = tokens_to_map(&x, grid, grid);
            let w = get(params, &format!("downsample.{}.weight", stage - 1));
            let b = get(params, &format!("downsample.{}.bias", stage - 1));
            x = map_to_tokens(&ops::conv2d(&map, w, Some(b), 2, 0).unwrap());
            grid /= 2;
        }
        let window = if stage < 2 { grid } else { cfg.window.min(grid) };
        for j in 0..cfg.transformer_blocks[stage] {
            x = block(params, &format!("stages.{stage}.blocks.{j}"), &x, grid, cfg.heads[stage], window, cfg.delta);
        }
        maps.push(tokens_to_map(&x, grid, grid));
    }

    let &[_, l, c] = x.shape() else { panic!() };
    let mut pooled = vec![0.0; n * c];
    for b in 0..n {
        for t in 0..l {
            for j in 0..c {
                pooled[b * c + j] += x.data()[(b * l + t) * c + j];
            }
        }
    }
    for v in &mut pooled {
        *v /= l as f64;
    }
    let pooled = Tensor::new(vec![n, c], pooled).unwrap();
    let logits = ops::linear(&pooled, get(params, "head.weight"), Some(get(params, "head.bias"))).unwrap();
    (maps, logits)
}

/// `[n, 3, s, s]` standard-normal images.
pub fn random_images(n: usize, s: usize, seed: u64) -> Tensor {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(&[n, 3, s, s], 1.0, &mut rng)
}

/// Configuration whose stage-3 grid holds several windows.
pub fn windowed_config() -> ModelConfig {
    ModelConfig {
        image_size: 64,
        window: 2,
        transformer_blocks: [1, 1, 2, 1],
        ..hyneter::Variant::Micro.config()
    }
}

/// Pearson coefficient from raw sums, `n·Σxy − Σx·Σy` over the product of
/// root variances, evaluated in a different order from the library.
pub fn pearson_oracle(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let sx: f64 = xs.iter().sum();
    let sy: f64 = ys.iter().sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let syy: f64 = ys.iter().map(|y| y * y).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}
