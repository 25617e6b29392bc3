use std::sync::Arc;

use hyneter::attention::{flatten, re_view, FeatureMap, TokenGrid};
use hyneter::dual_switching::{axis_destination, ds_permute, DsPermutation};
use hyneter::{Graph, Tensor};

const MAX_GRID: usize = 12;

fn grids() -> impl Iterator<Item = (usize, usize)> {
    (1..=MAX_GRID).flat_map(|h| (1..=MAX_GRID).map(move |w| (h, w)))
}

#[test]
fn bijection_on_every_grid() {
    for (h, w) in grids() {
        let p = DsPermutation::new(h, w);
        let mut seen = vec![false; h * w];
        for &d in &p.mapping {
            assert!(!seen[d], "{h}x{w}: {d} hit twice");
            seen[d] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }
}

#[test]
fn inverse_composes_to_identity() {
    for (h, w) in grids() {
        let p = DsPermutation::new(h, w);
        let inv = p.inverse();
        for i in 0..h * w {
            assert_eq!(inv[p.mapping[i]], i);
            assert_eq!(p.mapping[inv[i]], i);
        }
    }
}

#[test]
fn two_by_two_swaps_to_anti_diagonal() {
    let p = DsPermutation::new(2, 2);
    assert_eq!(p.apply(&['a', 'b', 'c', 'd']), ['d', 'c', 'b', 'a']);
}

#[test]
fn positions_in_full_tiles_stay_in_their_tile() {
    for (h, w) in grids() {
        let p = DsPermutation::new(h, w);
        for r in 0..(h / 4) * 4 {
            for c in 0..(w / 4) * 4 {
                let d = p.mapping[r * w + c];
                let (dr, dc) = (d / w, d % w);
                assert_eq!((dr / 4, dc / 4), (r / 4, c / 4), "{h}x{w}: ({r},{c}) -> ({dr},{dc})");
            }
        }
    }
}

#[test]
fn axis_steps_match_hand_application() {
    // adjacent swap (0,1)(2,3).. then interlaced swap (0,2)(1,3)(4,6)(5,7)..
    fn by_hand(i: usize, n: usize) -> usize {
        let adjacent = if i % 2 == 0 { i + 1 } else { i - 1 };
        let j = if adjacent < n { adjacent } else { i };
        let interlaced = if (j / 2) % 2 == 0 { j + 2 } else { j - 2 };
        if interlaced < n { interlaced } else { j }
    }
    for n in 1..=MAX_GRID {
        for i in 0..n {
            assert_eq!(axis_destination(i, n), by_hand(i, n), "extent {n}, index {i}");
        }
    }
}

#[test]
fn permute_is_value_independent_gather() {
    for (h, w) in grids() {
        let c = 2;
        let data: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::new(vec![1, c, h, w], data.clone()).unwrap());
        let fm = FeatureMap::from_var(&g, x).unwrap();
        let out = ds_permute(&mut g, &fm).unwrap();
        let p = DsPermutation::new(h, w);
        for ch in 0..c {
            let plane = &data[ch * h * w..][..h * w];
            let expect = p.apply(plane);
            assert_eq!(&g.value(out.map).data()[ch * h * w..][..h * w], &expect[..]);
        }
    }
}

#[test]
fn permute_commutes_with_token_round_trip() {
    let (h, w, c) = (6, 4, 3);
    let mut g = Graph::<f64>::new();
    let t = g.input(Tensor::new(vec![1, h * w, c], (0..h * w * c).map(|i| i as f64).collect()).unwrap());
    let tg = TokenGrid::from_var(&g, t, (h, w)).unwrap();
    let fm = re_view(&mut g, &tg).unwrap();
    let permuted = ds_permute(&mut g, &fm).unwrap();
    let back = flatten(&mut g, &permuted).unwrap();
    let p = DsPermutation::new(h, w);
    let tokens = g.value(t).data();
    for src in 0..h * w {
        let dst = p.mapping[src];
        assert_eq!(&g.value(back.tokens).data()[dst * c..][..c], &tokens[src * c..][..c]);
    }
}

#[test]
fn cache_builds_once_per_shape() {
    let handles: Vec<_> = (0..8)
        .map(|_| std::thread::spawn(|| DsPermutation::cached(7, 9)))
        .collect();
    let perms: Vec<Arc<DsPermutation>> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    for p in &perms {
        assert!(Arc::ptr_eq(p, &perms[0]));
    }
    assert_eq!(*perms[0], DsPermutation::new(7, 9));
}
