#![allow(dead_code)]

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use srdl::backbone::FeatureMap;
use srdl::car::CarParameters;
use srdl::graph::GraphState;
use srdl::heads::ClassifierParameters;
use srdl::nn::Parameters;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform2(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(lo..hi))
}

pub fn feature_map(rng: &mut ChaCha8Rng, w: usize, h: usize, d: usize) -> FeatureMap {
    FeatureMap::new(Array3::from_shape_simple_fn((w, h, d), || rng.random_range(-1.0..1.0))).unwrap()
}

pub fn graph(rng: &mut ChaCha8Rng, c: usize, d: usize, layers: usize) -> GraphState {
    GraphState {
        nodes: uniform2(rng, c, d, -1.0, 1.0),
        adjacency: uniform2(rng, c, c, -1.0, 1.0),
        weights: (0..layers).map(|_| uniform2(rng, d, d, -0.8, 0.8)).collect(),
        negative_slope: 0.2,
    }
}

pub fn classifier(rng: &mut ChaCha8Rng, c: usize, d: usize) -> ClassifierParameters {
    ClassifierParameters {
        weight: uniform2(rng, c, d, -1.0, 1.0),
        bias: Array1::from_shape_simple_fn(c, || rng.random_range(-0.5..0.5)),
    }
}

pub fn car(seed: u64, d: usize, e: usize) -> CarParameters {
    CarParameters::init(d, e, seed)
}

/// Worst relative error between `analytic` and central differences of
/// `loss` over every scalar of `params`. The denominator is
/// `max(|analytic|, |numeric|, floor)` so round-off on near-zero entries is
/// judged absolutely.
pub fn worst_relative_error<P, F>(params: &P, analytic: &P, loss: F, h: f64, floor: f64) -> (f64, String)
where
    P: Parameters + Clone,
    F: Fn(&P) -> f64,
{
    let mut worst = (0.0, String::new());
    let grads = analytic.tensors();
    let n_tensors = params.tensors().len();
    for t in 0..n_tensors {
        let len = params.tensors()[t].1.len();
        for i in 0..len {
            let shifted = |delta: f64| {
                let mut p = params.clone();
                p.tensors_mut()[t].1[i] += delta;
                loss(&p)
            };
            let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
            let a = grads[t].1[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if err > worst.0 {
                worst = (err, format!("{}[{i}]: analytic {a:e}, numeric {numeric:e}", grads[t].0));
            }
        }
    }
    worst
}

/// Random prediction set with `n` images and `c` categories. Scores are
/// sometimes quantized so ties and threshold hits occur.
pub fn prediction_set(rng: &mut ChaCha8Rng, n: usize, c: usize) -> srdl::metrics::PredictionSet {
    let levels = [0usize, 2, 5, 10][rng.random_range(0..4)];
    let density = rng.random_range(0.05..0.6);
    let scores = Array2::from_shape_simple_fn((n, c), || {
        let s: f64 = rng.random_range(0.0..=1.0);
        if levels == 0 {
            s
        } else {
            (s * levels as f64).round() / levels as f64
        }
    });
    let labels = Array2::from_shape_simple_fn((n, c), || u8::from(rng.random_bool(density)));
    let ids = (0..n).map(|i| format!("img{i}")).collect();
    srdl::metrics::PredictionSet::new(ids, scores, labels).unwrap()
}

/// Straightforward metric definitions, no sorting and no shared helpers.
#[derive(Debug, Clone)]
pub struct NaiveMetrics {
    pub aps: Vec<Option<f64>>,
    pub map: f64,
    pub op: f64,
    pub or: f64,
    pub of1: f64,
    pub cp: f64,
    pub cr: f64,
    pub cf1: f64,
}

pub fn naive_metrics(scores: &Array2<f64>, labels: &Array2<u8>, threshold: f64) -> NaiveMetrics {
    let (n, c) = scores.dim();
    let mut aps = Vec::new();
    for k in 0..c {
        // rank of item i: one plus the items strictly ahead of it
        let rank = |i: usize| {
            1 + (0..n)
                .filter(|&j| scores[[j, k]] > scores[[i, k]] || (scores[[j, k]] == scores[[i, k]] && j < i))
                .count()
        };
        let positives: Vec<usize> = (0..n).filter(|&i| labels[[i, k]] == 1).collect();
        if positives.is_empty() {
            aps.push(None);
            continue;
        }
        let mut total = 0.0;
        for &i in &positives {
            let r = rank(i);
            let hits = positives.iter().filter(|&&j| rank(j) <= r).count();
            total += hits as f64 / r as f64;
        }
        aps.push(Some(total / positives.len() as f64));
    }
    let defined: Vec<f64> = aps.iter().flatten().copied().collect();
    let map = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
    let f1 = |p: f64, r: f64| if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    let (mut sc, mut sp, mut sg) = (0.0, 0.0, 0.0);
    let (mut cp, mut cr) = (0.0, 0.0);
    for k in 0..c {
        let (mut nc, mut np, mut ng) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let predicted = scores[[i, k]] >= threshold;
            let truth = labels[[i, k]] == 1;
            if predicted {
                np += 1.0;
            }
            if truth {
                ng += 1.0;
            }
            if predicted && truth {
                nc += 1.0;
            }
        }
        sc += nc;
        sp += np;
        sg += ng;
        cp += div(nc, np);
        cr += div(nc, ng);
    }
    let (op, or) = (div(sc, sp), div(sc, sg));
    let (cp, cr) = (div(cp, c as f64), div(cr, c as f64));
    NaiveMetrics {
        aps,
        map,
        op,
        or,
        of1: f1(op, or),
        cp,
        cr,
        cf1: f1(cp, cr),
    }
}

/// Brute-force dominant interval: every candidate `[a, b]` is checked
/// against the definition directly.
pub fn brute_interval(m: &[f64], alpha: f64) -> (usize, usize) {
    let n = m.len();
    let peak = m.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut best: Option<(usize, usize)> = None;
    for a in 0..n {
        for b in a..n {
            let inside = (a..=b).all(|i| m[i] >= alpha);
            let maximal = (a == 0 || m[a - 1] < alpha) && (b + 1 == n || m[b + 1] < alpha);
            let peaked = (a..=b).any(|i| m[i] == peak);
            if inside && maximal && peaked {
                let better = match best {
                    None => true,
                    Some((x, y)) => b - a > y - x,
                };
                if better {
                    best = Some((a, b));
                }
            }
        }
    }
    best.unwrap_or_else(|| {
        let at = (0..n).find(|&i| m[i] == peak).unwrap();
        (at, at)
    })
}

/// Brute-force rectangle for a `[x, y]` map, `None` when a marginal is flat.
pub fn brute_region(sa: &Array2<f64>, alpha: f64) -> Option<((usize, usize), (usize, usize))> {
    let (w, h) = sa.dim();
    let mut px = vec![f64::NEG_INFINITY; w];
    let mut py = vec![f64::NEG_INFINITY; h];
    for x in 0..w {
        for y in 0..h {
            px[x] = px[x].max(sa[[x, y]]);
            py[y] = py[y].max(sa[[x, y]]);
        }
    }
    let norm = |v: &mut Vec<f64>| {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi == lo {
            return false;
        }
        for t in v.iter_mut() {
            *t = (*t - lo) / (hi - lo);
        }
        true
    };
    if !norm(&mut px) || !norm(&mut py) {
        return None;
    }
    Some((brute_interval(&px, alpha), brute_interval(&py, alpha)))
}
