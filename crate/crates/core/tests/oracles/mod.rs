//! Independent reference implementations shared by the property tests and
//! the acceptance suite. They favour obviousness over speed.
#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::BTreeMap;

/// Per-class `(tp, fp, fn, iou_sum)` from an all-pairs IoU table and an
/// exhaustive search over one-to-one matchings of pairs with IoU > 0.5.
/// Points whose ground-truth class is `void` are ignored.
pub fn panoptic_counts(
    pred_sem: &[u16],
    pred_inst: &[u32],
    gt_sem: &[u16],
    gt_inst: &[u32],
    n_things: u16,
    n_classes: usize,
    void: u16,
) -> Vec<(u64, u64, u64, f64)> {
    type Seg = (u16, u32);
    let seg = |s: u16, i: u32| -> Seg { (s, if s < n_things { i } else { 0 }) };
    let mut pred: BTreeMap<Seg, Vec<usize>> = BTreeMap::new();
    let mut gt: BTreeMap<Seg, Vec<usize>> = BTreeMap::new();
    for p in 0..gt_sem.len() {
        if gt_sem[p] == void {
            continue;
        }
        pred.entry(seg(pred_sem[p], pred_inst[p])).or_default().push(p);
        gt.entry(seg(gt_sem[p], gt_inst[p])).or_default().push(p);
    }
    let mut out = vec![(0u64, 0u64, 0u64, 0.0f64); n_classes];
    for class in 0..n_classes as u16 {
        let ps: Vec<(&Seg, &Vec<usize>)> = pred.iter().filter(|(k, _)| k.0 == class).collect();
        let gs: Vec<(&Seg, &Vec<usize>)> = gt.iter().filter(|(k, _)| k.0 == class).collect();
        // all-pairs table of (intersection, union)
        let table: Vec<Vec<(u64, u64)>> = ps
            .iter()
            .map(|(_, a)| {
                gs.iter()
                    .map(|(_, b)| {
                        let i = a.iter().filter(|x| b.contains(x)).count() as u64;
                        (i, a.len() as u64 + b.len() as u64 - i)
                    })
                    .collect()
            })
            .collect();
        let good = |pi: usize, gi: usize| {
            let (i, u) = table[pi][gi];
            i > 0 && i as f64 / u as f64 > 0.5
        };
        // exhaustive search: every gt picks an unused qualifying pred or nothing
        let mut best: Vec<(usize, usize)> = Vec::new();
        let mut cur: Vec<(usize, usize)> = Vec::new();
        let mut used = vec![false; ps.len()];
        fn search(
            gi: usize,
            n_g: usize,
            n_p: usize,
            good: &dyn Fn(usize, usize) -> bool,
            used: &mut Vec<bool>,
            cur: &mut Vec<(usize, usize)>,
            best: &mut Vec<(usize, usize)>,
        ) {
            if cur.len() + (n_g - gi) <= best.len() {
                return;
            }
            if gi == n_g {
                *best = cur.clone();
                return;
            }
            for pi in 0..n_p {
                if !used[pi] && good(pi, gi) {
                    used[pi] = true;
                    cur.push((pi, gi));
                    search(gi + 1, n_g, n_p, good, used, cur, best);
                    cur.pop();
                    used[pi] = false;
                }
            }
            search(gi + 1, n_g, n_p, good, used, cur, best);
        }
        search(0, gs.len(), ps.len(), &good, &mut used, &mut cur, &mut best);
        best.sort_by_key(|&(pi, gi)| (gi, pi));
        let tp = best.len() as u64;
        let iou_sum = best.iter().fold(0.0, |acc, &(pi, gi)| {
            let (i, u) = table[pi][gi];
            acc + i as f64 / u as f64
        });
        out[class as usize] = (tp, ps.len() as u64 - tp, gs.len() as u64 - tp, iou_sum);
    }
    out
}

/// PQ, SQ and RQ of one class from its counts.
pub fn class_quality(tp: u64, fp: u64, fn_: u64, iou_sum: f64) -> (f64, f64, f64) {
    let sq = if tp == 0 { 0.0 } else { iou_sum / tp as f64 };
    let d = tp as f64 + 0.5 * fn_ as f64 + 0.5 * fp as f64;
    let rq = if d == 0.0 { 0.0 } else { tp as f64 / d };
    (sq * rq, sq, rq)
}

/// Inverse-distance interpolation over the `k` nearest centers, found by
/// sorting every center by `(distance, index)`.
pub fn v2p(centers: &[[f64; 3]], features: &[Vec<f64>], p: [f64; 3], k: usize, eps: f64) -> Vec<f64> {
    let mut d: Vec<(f64, usize)> = centers
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let v = [c[0] - p[0], c[1] - p[1], c[2] - p[2]];
            ((v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt(), i)
        })
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.truncate(k);
    let inv: Vec<f64> = d.iter().map(|&(dist, _)| 1.0 / (dist + eps)).collect();
    let total: f64 = inv.iter().sum();
    let mut out = vec![0.0; features[0].len()];
    for (&(_, i), w) in d.iter().zip(&inv) {
        for (o, f) in out.iter_mut().zip(&features[i]) {
            *o += (w / total) * f;
        }
    }
    out
}

use dqformer_core::cloud::VOID_LABEL;
use dqformer_core::matrix::Matrix;
use dqformer_core::query::{Query, QueryKind, QueryProposal};
use rand::Rng;

/// Random prediction / ground-truth pair with at most 5 classes, 20
/// segments and 200 points: `(pred_sem, pred_inst, gt_sem, gt_inst, n_things, n_classes)`.
pub type PanopticCase = (Vec<u16>, Vec<u32>, Vec<u16>, Vec<u32>, u16, usize);

pub fn random_panoptic_case<R: Rng>(rng: &mut R) -> PanopticCase {
    let n_classes = rng.random_range(2..=5usize);
    let n_things = rng.random_range(1..n_classes) as u16;
    let n = rng.random_range(1..=200usize);
    let segments = |rng: &mut R, count: usize| -> Vec<(u16, u32)> {
        (0..count)
            .map(|i| {
                let c = rng.random_range(0..n_classes) as u16;
                (c, if c < n_things { i as u32 + 1 } else { 0 })
            })
            .collect()
    };
    let n_gt = rng.random_range(1..=10usize);
    let n_pred = rng.random_range(0..=10usize);
    let gt_segs = segments(rng, n_gt);
    let pred_segs = segments(rng, n_pred);
    let keep = rng.random_range(0.0..1.0);
    let mut out: PanopticCase = (vec![], vec![], vec![], vec![], n_things, n_classes);
    for _ in 0..n {
        let g = gt_segs[rng.random_range(0..n_gt)];
        let void = rng.random_bool(0.05);
        out.2.push(if void { VOID_LABEL } else { g.0 });
        out.3.push(if void { 0 } else { g.1 });
        // mostly copy the ground truth (with a relabelled id) so matches occur
        let p = if n_pred == 0 || rng.random_bool(keep) {
            (g.0, if g.1 > 0 { g.1 * 7 + 3 } else { 0 })
        } else {
            pred_segs[rng.random_range(0..n_pred)]
        };
        out.0.push(p.0);
        out.1.push(p.1);
    }
    out
}

/// Thing proposals crowded into a few buckets with near-duplicate and
/// exactly duplicated embeddings.
pub fn random_proposals<R: Rng>(rng: &mut R, n: usize, dim: usize) -> Vec<QueryProposal> {
    let base: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    (0..n)
        .map(|_| {
            let b = &base[rng.random_range(0..base.len())];
            let embedding = if rng.random_bool(0.3) {
                b.clone()
            } else {
                b.iter().map(|v| v + rng.random_range(-0.2..0.2)).collect()
            };
            QueryProposal {
                embedding,
                class: rng.random_range(0..3),
                kind: QueryKind::Thing,
                level: rng.random_range(0..3),
                cell: None,
                pos: Some([rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]),
                score: rng.random_range(0.0..1.0),
            }
        })
        .collect()
}

/// Random soft masks for `n_thing` thing queries over `n_things` thing
/// classes plus one query per stuff class.
pub fn random_masks<R: Rng>(rng: &mut R, n_points: usize, n_thing: usize, n_things: u16, n_stuff: u16) -> (Matrix, Vec<Query>) {
    let mut queries: Vec<Query> = (0..n_thing)
        .map(|_| Query {
            embedding: vec![],
            class: rng.random_range(0..n_things),
            kind: QueryKind::Thing,
            pos: Some([0.0, 0.0]),
            score: rng.random_range(0.0..1.0),
        })
        .collect();
    for s in 0..n_stuff {
        queries.push(Query {
            embedding: vec![],
            class: n_things + s,
            kind: QueryKind::Stuff,
            pos: None,
            score: 1.0,
        });
    }
    // a few templates so that duplicates overlap strongly
    let templates: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..n_points).map(|_| rng.random_range(0.0..1.0)).collect())
        .collect();
    let mut m = Matrix::zeros(queries.len(), n_points);
    for r in 0..queries.len() {
        let t = &templates[rng.random_range(0..templates.len())];
        let noise = rng.random_range(0.0..0.4);
        for c in 0..n_points {
            let v: f64 = t[c] + rng.random_range(-noise..=noise);
            m.data[r * n_points + c] = v.clamp(0.0, 1.0);
        }
    }
    (m, queries)
}
