//! Finite-difference gradient suites, one per operation. Each returns the
//! worst relative error over all checked coordinates for one seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hyneter::attention::{gmsa, AttentionParams, TokenGrid};
use hyneter::dual_switching::ds_block;
use hyneter::gradcheck::{check_fn, rel_error, STEP};
use hyneter::hnb::{hnb_stage, HnbStageParams};
use hyneter::layers::{BlockParams, Init};
use hyneter::{Graph, ParamStore, Result, Tensor, Var};

pub const OPS: [&str; 7] = ["conv2d", "linear", "softmax", "layer_norm", "gmsa", "hnb_stage", "ds_block"];

pub fn run(op: &str, seed: u64) -> f64 {
    match op {
        "conv2d" => conv2d(seed),
        "linear" => linear(seed),
        "softmax" => softmax(seed),
        "layer_norm" => layer_norm(seed),
        "gmsa" => attention(seed),
        "hnb_stage" => hnb(seed),
        "ds_block" => switching(seed),
        other => panic!("unknown op {other}"),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, r)
}

/// Generic scalar readout: a fixed random weighting of every output element,
/// scaled so the readout stays of order one whatever the output size.
fn readout(g: &mut Graph, y: Var, r: &mut ChaCha8Rng) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::randn(&shape, 1.0 / (n as f64).sqrt(), r);
    g.weighted_sum(y, w)
}

fn worst_inputs<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check_fn(inputs, STEP, f).unwrap().worst_rel_error()
}

fn conv2d(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (k, stride, pad) = [(3, 1, 1), (3, 2, 1), (2, 2, 0), (5, 1, 2), (1, 1, 0)][seed as usize % 5];
    let x = randn(&[2, 3, 5, 5], &mut r);
    let w = randn(&[4, 3, k, k], &mut r);
    let b = randn(&[4], &mut r);
    let ro = seed.wrapping_mul(31);
    worst_inputs(&[x, w, b], move |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
        readout(g, y, &mut rng(ro))
    })
}

fn linear(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = randn(&[3, 4], &mut r);
    let w = randn(&[4, 5], &mut r);
    let b = randn(&[5], &mut r);
    let ro = seed.wrapping_mul(37);
    worst_inputs(&[x, w, b], move |g, v| {
        let y = g.linear(v[0], v[1], Some(v[2]))?;
        readout(g, y, &mut rng(ro))
    })
}

fn softmax(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = Tensor::randn(&[4, 6], 2.0, &mut r);
    let ro = seed.wrapping_mul(41);
    worst_inputs(&[x], move |g, v| {
        let y = g.softmax_rows(v[0]);
        readout(g, y, &mut rng(ro))
    })
}

fn layer_norm(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = randn(&[3, 5], &mut r);
    let gain = randn(&[5], &mut r);
    let shift = randn(&[5], &mut r);
    let ro = seed.wrapping_mul(43);
    worst_inputs(&[x, gain, shift], move |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
        readout(g, y, &mut rng(ro))
    })
}

/// Check the gradient of `f` with respect to its token input and every
/// parameter in `store`.
fn worst_with_params<F>(store: &ParamStore, input: &Tensor, readout_seed: u64, f: F) -> f64
where
    F: Fn(&mut Graph, &ParamStore, Var) -> Result<Var>,
{
    let eval = |store: &ParamStore, input: &Tensor, grads: bool| {
        let mut g = Graph::new();
        let x = g.input(input.clone());
        let y = f(&mut g, store, x).unwrap();
        let out = readout(&mut g, y, &mut rng(readout_seed)).unwrap();
        let value = g.value(out).data()[0];
        let grads = grads.then(|| {
            let gr = g.backward(out).unwrap();
            (gr.wrt(x, input), gr.for_params(store))
        });
        (value, grads)
    };
    let (_, grads) = eval(store, input, true);
    let (gx, gp) = grads.unwrap();
    let mut worst: f64 = 0.0;

    let mut work = input.clone();
    for i in 0..input.len() {
        let orig = work.data()[i];
        work.data_mut()[i] = orig + STEP;
        let plus = eval(store, &work, false).0;
        work.data_mut()[i] = orig - STEP;
        let minus = eval(store, &work, false).0;
        work.data_mut()[i] = orig;
        let (a, n) = (gx.data()[i], (plus - minus) / (2.0 * STEP));
        worst = worst.max(rel_error(a, n));
    }

    let mut work = store.clone();
    let paths: Vec<String> = store.paths().map(str::to_string).collect();
    for path in paths {
        for i in 0..store.get(&path).unwrap().len() {
            let orig = store.get(&path).unwrap().data()[i];
            work.get_mut(&path).unwrap().data_mut()[i] = orig + STEP;
            let plus = eval(&work, input, false).0;
            work.get_mut(&path).unwrap().data_mut()[i] = orig - STEP;
            let minus = eval(&work, input, false).0;
            work.get_mut(&path).unwrap().data_mut()[i] = orig;
            let (a, n) = (gp[&path].data()[i], (plus - minus) / (2.0 * STEP));
            worst = worst.max(rel_error(a, n));
        }
    }
    worst
}

/// Replace every parameter with standard-normal values scaled by `std`.
fn randomize(store: &mut ParamStore, std: f64, r: &mut ChaCha8Rng) {
    for (_, t) in store.iter_mut() {
        *t = Tensor::randn(t.shape(), std, r);
    }
}

const C: usize = 4;
const GRID: (usize, usize) = (4, 4);

fn tokens(g: &Graph, x: Var) -> TokenGrid {
    TokenGrid::from_var(g, x, GRID).unwrap()
}

fn attention(seed: u64) -> f64 {
    let mut r = rng(seed);
    let delta = [None, Some(1.0), Some(1.5), Some(2.5)][seed as usize % 4];
    let window = if seed % 2 == 0 { None } else { Some(2) };
    let params = AttentionParams::new("attn", C, 2, delta).unwrap();
    let mut store = ParamStore::new();
    params.init(&mut store, Init { seed }).unwrap();
    randomize(&mut store, 0.5, &mut r);
    let x = randn(&[2, GRID.0 * GRID.1, C], &mut r);
    worst_with_params(&store, &x, seed ^ 0xa5, |g, s, x| {
        let t = tokens(g, x);
        Ok(gmsa(g, s, &t, &params, window)?.tokens)
    })
}

fn hnb(seed: u64) -> f64 {
    let mut r = rng(seed);
    let block = BlockParams::new("stage.blocks.0", C, 2, 2.0, Some(1.0 + (seed % 3) as f64 * 0.5)).unwrap();
    let params = HnbStageParams::new("stage", C, 2, vec![block]);
    let mut store = ParamStore::new();
    params.init(&mut store, Init { seed }).unwrap();
    randomize(&mut store, 0.4, &mut r);
    let x = randn(&[1, GRID.0 * GRID.1, C], &mut r);
    worst_with_params(&store, &x, seed ^ 0x5a, |g, s, x| {
        let t = tokens(g, x);
        Ok(hnb_stage(g, s, &t, &params)?.tokens)
    })
}

fn switching(seed: u64) -> f64 {
    let mut r = rng(seed);
    let block = BlockParams::new("block", C, 2, 2.0, Some(1.0)).unwrap();
    let mut store = ParamStore::new();
    block.init(&mut store, Init { seed }).unwrap();
    randomize(&mut store, 0.4, &mut r);
    let x = randn(&[1, GRID.0 * GRID.1, C], &mut r);
    let switch = seed % 4 != 3;
    worst_with_params(&store, &x, seed ^ 0x3c, |g, s, x| {
        let t = tokens(g, x);
        Ok(ds_block(g, s, &t, &block, 2, switch)?.tokens)
    })
}
