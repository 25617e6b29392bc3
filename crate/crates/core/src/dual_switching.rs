//! Dual Switching: a fixed spatial permutation applied before attention in
//! the windowed stages.
//!
//! The permutation acts on columns and rows separately, in this order:
//!
//! 1. swap adjacent columns `(2j, 2j+1)`;
//! 2. swap adjacent rows `(2i, 2i+1)`;
//! 3. interlaced swap of columns `(4k, 4k+2)` and `(4k+1, 4k+3)`, then the same
//!    on rows.
//!
//! A column or row whose partner does not exist stays put in that step, which
//! keeps the map a bijection for every grid shape.

use std::collections::HashMap;
use std::sync::{Arc, OnceLock, RwLock};

use crate::attention::{flatten, re_view, FeatureMap, TokenGrid};
use crate::error::Result;
use crate::graph::Graph;
use crate::layers::BlockParams;
use crate::scalar::Scalar;
use crate::tensor::ParamStore;

/// Destination of each source position of a `rows x cols` grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DsPermutation {
    pub grid: (usize, usize),
    /// `mapping[src] = dst`, row-major flat indices.
    pub mapping: Vec<usize>,
}

fn pair_swap(i: usize, extent: usize) -> usize {
    let j = i ^ 1;
    if j < extent {
        j
    } else {
        i
    }
}

fn interlaced_swap(i: usize, extent: usize) -> usize {
    let j = i ^ 2;
    if j < extent {
        j
    } else {
        i
    }
}

/// Where index `i` of an axis of length `extent` ends up after all steps.
pub fn axis_destination(i: usize, extent: usize) -> usize {
    interlaced_swap(pair_swap(i, extent), extent)
}

impl DsPermutation {
    pub fn new(rows: usize, cols: usize) -> Self {
        let mut mapping = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let dr = axis_destination(r, rows);
            for c in 0..cols {
                mapping.push(dr * cols + axis_destination(c, cols));
            }
        }
        DsPermutation { grid: (rows, cols), mapping }
    }

    /// Shared instance for a grid shape, built at most once per shape.
    pub fn cached(rows: usize, cols: usize) -> Arc<DsPermutation> {
        static CACHE: OnceLock<RwLock<HashMap<(usize, usize), Arc<DsPermutation>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(Default::default);
        if let Some(p) = cache.read().expect("cache poisoned").get(&(rows, cols)) {
            return p.clone();
        }
        let mut w = cache.write().expect("cache poisoned");
        w.entry((rows, cols))
            .or_insert_with(|| Arc::new(DsPermutation::new(rows, cols)))
            .clone()
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    /// `inverse()[dst] = src`.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.mapping.len()];
        for (src, &dst) in self.mapping.iter().enumerate() {
            inv[dst] = src;
        }
        inv
    }

    /// Permute a row-major plane: `out[mapping[i]] = plane[i]`.
    pub fn apply<V: Copy>(&self, plane: &[V]) -> Vec<V> {
        assert_eq!(plane.len(), self.mapping.len());
        let mut out = plane.to_vec();
        for (src, &dst) in self.mapping.iter().enumerate() {
            out[dst] = plane[src];
        }
        out
    }
}

/// Permute every channel plane of `x` with the grid's [`DsPermutation`].
pub fn ds_permute<T: Scalar>(g: &mut Graph<T>, x: &FeatureMap) -> Result<FeatureMap> {
    let perm = DsPermutation::cached(x.height, x.width);
    let inv = perm.inverse();
    let plane = x.height * x.width;
    let planes = x.batch * x.channels;
    let mut index = Vec::with_capacity(planes * plane);
    for p in 0..planes {
        index.extend(inv.iter().map(|&src| p * plane + src));
    }
    let shape = [x.batch, x.channels, x.height, x.width];
    let map = g.gather(x.map, Arc::new(index), &shape)?;
    Ok(x.with_map(map))
}

/// One block of a switching stage:
///
/// ```text
/// X  = flatten(ds_permute(re_view(X)))      (skipped when `switch` is false)
/// X  = GMSA(LN(X)) + X
/// X' = MLP(LN(X)) + X
/// ```
pub fn ds_block<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: &TokenGrid,
    params: &BlockParams,
    window: usize,
    switch: bool,
) -> Result<TokenGrid> {
    let x = if switch {
        let fm = re_view(g, x)?;
        let fm = ds_permute(g, &fm)?;
        flatten(g, &fm)?
    } else {
        *x
    };
    params.forward(g, store, x, Some(window))
}
