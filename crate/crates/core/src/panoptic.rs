//! Duplicate-mask fusion and per-point panoptic assembly.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::query::{Query, QueryKind};

/// Per-point panoptic output.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct PanopticLabeling {
    pub semantic: Vec<u16>,
    /// 0 for stuff points.
    pub instance: Vec<u32>,
    /// Index of the winning query, or -1 where the semantic fallback applied.
    pub winner: Vec<i32>,
    /// Soft mask value of the winner (0 on fallback points).
    pub score: Vec<f64>,
}

impl PanopticLabeling {
    pub fn len(&self) -> usize {
        self.semantic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.semantic.is_empty()
    }

    /// Instances only on thing classes, dense ids from 1, one class per id.
    pub fn validate(&self, n_things: u16) -> Result<()> {
        if self.instance.len() != self.semantic.len() {
            return Err(Error::Contract("labeling arrays differ in length".to_string()));
        }
        let mut class_of: Vec<Option<u16>> = Vec::new();
        for (i, (&s, &inst)) in self.semantic.iter().zip(&self.instance).enumerate() {
            if (inst > 0) != (s < n_things) {
                return Err(Error::Validation {
                    index: i,
                    reason: format!("instance {inst} on class {s}"),
                });
            }
            if inst > 0 {
                let k = inst as usize;
                if class_of.len() < k {
                    class_of.resize(k, None);
                }
                match class_of[k - 1] {
                    Some(c) if c != s => {
                        return Err(Error::Validation {
                            index: i,
                            reason: format!("instance {inst} spans classes"),
                        })
                    }
                    _ => class_of[k - 1] = Some(s),
                }
            }
        }
        if class_of.iter().any(Option::is_none) {
            return Err(Error::Validation {
                index: 0,
                reason: "instance ids are not dense".to_string(),
            });
        }
        Ok(())
    }
}

fn support(row: &[f64]) -> Vec<bool> {
    row.iter().map(|&v| v >= 0.5).collect()
}

fn mask_score(soft: &[f64], sup: &[bool]) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for (&v, &b) in soft.iter().zip(sup) {
        if b {
            s += v;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut uni) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        uni += (x || y) as usize;
    }
    if uni == 0 {
        0.0
    } else {
        inter as f64 / uni as f64
    }
}

/// One greedy pass; returns whether anything merged.
fn fuse_pass(soft: &mut Vec<Vec<f64>>, sup: &mut Vec<Vec<bool>>, queries: &mut Vec<Query>, iou_thresh: f64) -> bool {
    let n = queries.len();
    let scores: Vec<f64> = (0..n).map(|i| mask_score(&soft[i], &sup[i])).collect();
    let mut order: Vec<usize> = (0..n).filter(|&i| queries[i].kind == QueryKind::Thing).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut accepted: Vec<usize> = Vec::new();
    let mut removed = vec![false; n];
    for &i in &order {
        let target = accepted
            .iter()
            .copied()
            .find(|&a| queries[a].class == queries[i].class && iou(&sup[a], &sup[i]) >= iou_thresh);
        match target {
            Some(a) => {
                removed[i] = true;
                let (si, ui) = (soft[i].clone(), sup[i].clone());
                for j in 0..si.len() {
                    soft[a][j] = soft[a][j].max(si[j]);
                    sup[a][j] |= ui[j];
                }
            }
            None => accepted.push(i),
        }
    }
    if !removed.iter().any(|&r| r) {
        return false;
    }
    let keep: Vec<usize> = (0..n).filter(|&i| !removed[i]).collect();
    *soft = keep.iter().map(|&i| core::mem::take(&mut soft[i])).collect();
    *sup = keep.iter().map(|&i| core::mem::take(&mut sup[i])).collect();
    *queries = keep.iter().map(|&i| queries[i].clone()).collect();
    true
}

/// Merges duplicate thing masks. Masks are binarized at 0.5; within a class,
/// masks are visited by mean soft value over their support (highest first)
/// and a mask whose IoU with an accepted one reaches `iou_thresh` is folded
/// into it (support union, soft maximum; the accepted query is kept). Passes
/// repeat until nothing merges, so the result is a fixed point. Survivors
/// keep their original relative order; stuff masks are untouched.
pub fn fuse_masks(masks: &Matrix, queries: &[Query], iou_thresh: f64) -> (Matrix, Vec<Query>) {
    assert_eq!(masks.rows, queries.len(), "one mask per query");
    let mut soft: Vec<Vec<f64>> = (0..masks.rows).map(|r| masks.row(r).to_vec()).collect();
    let mut sup: Vec<Vec<bool>> = soft.iter().map(|r| support(r)).collect();
    let mut qs = queries.to_vec();
    while fuse_pass(&mut soft, &mut sup, &mut qs, iou_thresh) {}
    let data: Vec<f64> = soft.into_iter().flatten().collect();
    (Matrix::from_vec(qs.len(), masks.cols, data), qs)
}

/// Per-point argmax over soft masks (lowest index on ties). Points whose best
/// value is below 0.5, or all points when there are no queries, take the
/// `fallback` class with instance 0; `fallback` must hold stuff classes.
/// Each thing query that wins a point gets its own instance id, numbered
/// from 1 in query order.
pub fn assemble(masks: &Matrix, queries: &[Query], fallback: &[u16]) -> PanopticLabeling {
    let n = fallback.len();
    assert!(queries.is_empty() || masks.cols == n, "mask width");
    let mut out = PanopticLabeling {
        semantic: fallback.to_vec(),
        instance: vec![0; n],
        winner: vec![-1; n],
        score: vec![0.0; n],
    };
    for p in 0..n {
        let mut best: Option<(usize, f64)> = None;
        for q in 0..queries.len() {
            let v = masks.get(q, p);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((q, v));
            }
        }
        if let Some((q, v)) = best {
            if v >= 0.5 {
                out.winner[p] = q as i32;
                out.score[p] = v;
                out.semantic[p] = queries[q].class;
            }
        }
    }
    let mut ids = vec![0u32; queries.len()];
    let mut used = vec![false; queries.len()];
    for &w in &out.winner {
        if w >= 0 {
            used[w as usize] = true;
        }
    }
    let mut next = 1;
    for (q, query) in queries.iter().enumerate() {
        if used[q] && query.kind == QueryKind::Thing {
            ids[q] = next;
            next += 1;
        }
    }
    for p in 0..n {
        if out.winner[p] >= 0 {
            out.instance[p] = ids[out.winner[p] as usize];
        }
    }
    out
}
