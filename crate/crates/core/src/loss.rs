//! Heatmap focal loss, sampled BCE + Dice mask loss and the auxiliary
//! semantic cross-entropy.

use alloc::sync::Arc;
use alloc::vec::Vec;

use log::warn;
use rand::seq::index;
use rand::Rng;

use crate::autograd::{FocalParams, MaskRow, Tape, Var};
use crate::math;
use crate::matrix::Matrix;
use crate::targets::GroundTruth;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalSettings {
    pub alpha: f64,
    pub beta: f64,
    pub clamp: f64,
}

impl Default for FocalSettings {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 4.0,
            clamp: 1e-6,
        }
    }
}

/// Penalty-reduced focal term of one cell.
pub fn focal_term(p: f64, y: f64, s: FocalSettings) -> f64 {
    let p = p.clamp(s.clamp, 1.0 - s.clamp);
    if y == 1.0 {
        -math::pow(1.0 - p, s.alpha) * math::ln(p)
    } else {
        -math::pow(1.0 - y, s.beta) * math::pow(p, s.alpha) * math::ln(1.0 - p)
    }
}

/// Heatmap inputs of one level.
#[derive(Clone, Debug)]
pub struct LevelHeatmaps {
    pub center_logits: Var,
    pub center_target: Arc<Matrix>,
    pub stuff_logits: Var,
    pub stuff_target: Arc<Matrix>,
}

/// Σ over levels of the thing focal loss divided by `n_q` plus the stuff
/// focal loss divided by the level's pixel count.
pub fn heatmap_loss(tape: &mut Tape, levels: &[LevelHeatmaps], n_q: usize, s: FocalSettings) -> Var {
    let mut terms = Vec::with_capacity(2 * levels.len());
    for l in levels {
        let pixels = l.stuff_target.rows as f64;
        let th = FocalParams {
            alpha: s.alpha,
            beta: s.beta,
            clamp: s.clamp,
            norm: n_q as f64,
        };
        terms.push(tape.focal_loss(l.center_logits, l.center_target.clone(), th));
        let st = FocalParams { norm: pixels, ..th };
        terms.push(tape.focal_loss(l.stuff_logits, l.stuff_target.clone(), st));
    }
    sum(tape, &terms)
}

pub fn sum(tape: &mut Tape, terms: &[Var]) -> Var {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t);
    }
    acc
}

/// Sampled supervision rows for the matched queries. A thing row takes
/// `min(s_th, |object|)` object points and fills up to `s_all` from the rest
/// of the scene; a stuff row takes `s_all` scene points. When `s_all` covers
/// the scene every valid point is used.
pub fn sample_mask_rows<R: Rng>(
    matches: &[Option<usize>],
    gt: &GroundTruth,
    s_th: usize,
    s_all: usize,
    rng: &mut R,
) -> Vec<MaskRow> {
    let pool = &gt.valid;
    let n = pool.len();
    let mut member = alloc::vec![false; gt.n_points];
    let mut rows = Vec::new();
    for (row, m) in matches.iter().enumerate() {
        let Some(seg) = *m else {
            continue;
        };
        let seg = &gt.segments[seg];
        let points: Vec<u32> = if s_all >= n {
            pool.clone()
        } else if seg.instance > 0 {
            let k = s_th.min(seg.points.len()).min(s_all);
            let mut chosen: Vec<u32> = index::sample(rng, seg.points.len(), k)
                .into_iter()
                .map(|i| seg.points[i])
                .collect();
            for &c in &chosen {
                member[c as usize] = true;
            }
            let rest: Vec<u32> = pool.iter().copied().filter(|&p| !member[p as usize]).collect();
            let extra = (s_all - k).min(rest.len());
            chosen.extend(index::sample(rng, rest.len(), extra).into_iter().map(|i| rest[i]));
            for &c in &chosen {
                member[c as usize] = false;
            }
            chosen.sort_unstable();
            chosen
        } else {
            let mut c: Vec<u32> = index::sample(rng, n, s_all).into_iter().map(|i| pool[i]).collect();
            c.sort_unstable();
            c
        };
        for &p in &seg.points {
            member[p as usize] = true;
        }
        let target = points.iter().map(|&p| if member[p as usize] { 1.0 } else { 0.0 }).collect();
        for &p in &seg.points {
            member[p as usize] = false;
        }
        rows.push(MaskRow { row, points, target });
    }
    rows
}

/// Deep-supervised mask loss: Σ over the given mask-logit matrices of the
/// mean BCE + Dice over `rows`. Returns `None` (and warns) when no query
/// matched.
pub fn mask_loss(tape: &mut Tape, mask_logits: &[Var], rows: Arc<Vec<MaskRow>>) -> Option<Var> {
    if rows.is_empty() {
        warn!("mask loss skipped: no query matched the ground truth");
        return None;
    }
    let terms: Vec<Var> = mask_logits.iter().map(|&m| tape.bce_dice(m, rows.clone())).collect();
    Some(sum(tape, &terms))
}

/// Mean cross-entropy over the valid points.
pub fn semantic_loss(tape: &mut Tape, logits: Var, gt: &GroundTruth) -> Var {
    let x = if gt.valid.len() == gt.n_points {
        logits
    } else {
        let idx: Vec<usize> = gt.valid.iter().map(|&i| i as usize).collect();
        tape.gather_rows(logits, &idx)
    };
    let labels = gt.valid.iter().map(|&i| gt.semantic[i as usize] as u32).collect();
    tape.cross_entropy(x, Arc::new(labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::bce_dice_row;
    use crate::cloud::LabeledPointCloud;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn focal_hand_values() {
        let s = FocalSettings::default();
        assert!((focal_term(0.5, 1.0, s) - 0.25 * core::f64::consts::LN_2).abs() < 1e-12);
        assert!((focal_term(0.5, 0.0, s) - 0.25 * core::f64::consts::LN_2).abs() < 1e-12);
        assert!((focal_term(0.5, 1.0, s) - 0.1733).abs() < 1e-4);
        assert!(focal_term(1.0, 1.0, s) <= 1e-5);
        assert!(focal_term(0.0, 0.0, s) <= 1e-5);
    }

    #[test]
    fn focal_node_matches_terms() {
        let mut t = Tape::new();
        let logits = Matrix::from_vec(1, 3, vec![0.0, 1.0, -2.0]);
        let y = Matrix::from_vec(1, 3, vec![1.0, 0.3, 0.0]);
        let l = t.param(logits.clone());
        let p = FocalParams {
            alpha: 2.0,
            beta: 4.0,
            clamp: 1e-6,
            norm: 2.0,
        };
        let v = t.focal_loss(l, Arc::new(y.clone()), p);
        let expect: f64 = (0..3)
            .map(|i| focal_term(math::sigmoid(logits.data[i]), y.data[i], FocalSettings::default()))
            .sum::<f64>()
            / 2.0;
        assert!((t.scalar(v) - expect).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_disjoint_masks() {
        let big = 40.0;
        let r = MaskRow {
            row: 0,
            points: vec![0, 1, 2],
            target: vec![1.0, 0.0, 1.0],
        };
        let (bce, dice) = bce_dice_row(&[big, -big, big], &r);
        assert!(bce <= 1e-5);
        assert!(dice.abs() <= 1e-6);
        let (_, dice) = bce_dice_row(&[-big, big, -big], &r);
        assert!((dice - 1.0).abs() < 1e-6);
    }

    #[test]
    fn uniform_semantic_logits_give_ln_k() {
        let cloud = LabeledPointCloud {
            positions: vec![[0.0; 3]; 4],
            intensity: vec![0.0; 4],
            semantic: vec![0, 3, 5, 1],
            instance: vec![1, 0, 0, 2],
            n_thing_classes: 3,
            n_stuff_classes: 3,
        };
        let gt = GroundTruth::from_cloud(&cloud);
        let mut t = Tape::new();
        let l = t.param(Matrix::zeros(4, 6));
        let v = semantic_loss(&mut t, l, &gt);
        assert!((t.scalar(v) - math::ln(6.0)).abs() < 1e-12);
        assert!((t.scalar(v) - 1.7918).abs() < 1e-4);
    }

    #[test]
    fn thing_rows_sample_object_then_scene() {
        let n = 50;
        let cloud = LabeledPointCloud {
            positions: vec![[0.0; 3]; n],
            intensity: vec![0.0; n],
            semantic: (0..n).map(|i| if i < 10 { 0 } else { 3 }).collect(),
            instance: (0..n).map(|i| if i < 10 { 1 } else { 0 }).collect(),
            n_thing_classes: 3,
            n_stuff_classes: 3,
        };
        let gt = GroundTruth::from_cloud(&cloud);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows = sample_mask_rows(&[Some(0), None, Some(1)], &gt, 4, 20, &mut rng);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].points.len(), 20);
        let pos: f64 = rows[0].target.iter().sum();
        assert!(pos >= 4.0);
        assert_eq!(rows[1].row, 2);
        assert_eq!(rows[1].points.len(), 20);
        let full = sample_mask_rows(&[Some(0)], &gt, 4, 1000, &mut rng);
        assert_eq!(full[0].points, (0..n as u32).collect::<Vec<_>>());
        assert_eq!(full[0].target.iter().sum::<f64>(), 10.0);
    }
}
