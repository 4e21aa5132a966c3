//! Panoptic quality (PQ), segmentation quality (SQ), recognition quality (RQ)
//! and PQ† with per-class and things/stuff aggregation.
//!
//! Segments are `(class, instance)` groups for thing classes and whole
//! classes for stuff. A predicted and a ground-truth segment of the same
//! class form a true positive iff their IoU exceeds 0.5, which makes the
//! matching unique. Void ground-truth points are dropped from both sides.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::cloud::{LabeledPointCloud, VOID_LABEL};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub iou_sum: f64,
}

impl ClassCounts {
    pub fn present(&self) -> bool {
        self.tp + self.fp + self.fn_ > 0
    }

    pub fn sq(&self) -> f64 {
        if self.tp == 0 {
            0.0
        } else {
            self.iou_sum / self.tp as f64
        }
    }

    pub fn rq(&self) -> f64 {
        let d = self.tp as f64 + 0.5 * self.fn_ as f64 + 0.5 * self.fp as f64;
        if d == 0.0 {
            0.0
        } else {
            self.tp as f64 / d
        }
    }

    pub fn pq(&self) -> f64 {
        self.sq() * self.rq()
    }
}

/// Matching counts per class; pooled over scenes by [`PanopticCounts::merge`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanopticCounts {
    pub n_things: u16,
    pub classes: Vec<ClassCounts>,
}

impl PanopticCounts {
    pub fn new(n_things: u16, n_classes: usize) -> Self {
        Self {
            n_things,
            classes: vec![ClassCounts::default(); n_classes],
        }
    }

    pub fn merge(&mut self, other: &PanopticCounts) {
        assert_eq!(self.classes.len(), other.classes.len(), "taxonomy mismatch");
        for (a, b) in self.classes.iter_mut().zip(&other.classes) {
            a.tp += b.tp;
            a.fp += b.fp;
            a.fn_ += b.fn_;
            a.iou_sum += b.iou_sum;
        }
    }

    pub fn report(&self) -> PanopticReport {
        let mut classes = Vec::new();
        for (c, k) in self.classes.iter().enumerate() {
            if !k.present() {
                continue;
            }
            classes.push(ClassReport {
                class: c as u16,
                thing: (c as u16) < self.n_things,
                pq: k.pq(),
                sq: k.sq(),
                rq: k.rq(),
                tp: k.tp,
                fp: k.fp,
                fn_: k.fn_,
                mean_iou: k.sq(),
            });
        }
        let mean = |f: &dyn Fn(&ClassReport) -> Option<f64>| {
            let v: Vec<f64> = classes.iter().filter_map(f).collect();
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        PanopticReport {
            pq: mean(&|c| Some(c.pq)),
            sq: mean(&|c| Some(c.sq)),
            rq: mean(&|c| Some(c.rq)),
            pq_dagger: mean(&|c| Some(if c.thing { c.pq } else { c.sq })),
            pq_th: mean(&|c| c.thing.then_some(c.pq)),
            pq_st: mean(&|c| (!c.thing).then_some(c.pq)),
            sq_th: mean(&|c| c.thing.then_some(c.sq)),
            sq_st: mean(&|c| (!c.thing).then_some(c.sq)),
            rq_th: mean(&|c| c.thing.then_some(c.rq)),
            rq_st: mean(&|c| (!c.thing).then_some(c.rq)),
            classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: u16,
    pub thing: bool,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    /// Mean IoU over true positives.
    pub mean_iou: f64,
}

/// All values in `[0, 1]`. Aggregates are unweighted means over classes
/// present in ground truth or prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanopticReport {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub pq_dagger: f64,
    pub pq_th: f64,
    pub pq_st: f64,
    pub sq_th: f64,
    pub sq_st: f64,
    pub rq_th: f64,
    pub rq_st: f64,
    pub classes: Vec<ClassReport>,
}

impl PanopticReport {
    pub fn class(&self, class: u16) -> Option<&ClassReport> {
        self.classes.iter().find(|c| c.class == class)
    }
}

/// Per-class counts of one scene.
pub fn count(
    pred_semantic: &[u16],
    pred_instance: &[u32],
    gt_semantic: &[u16],
    gt_instance: &[u32],
    n_things: u16,
    n_classes: usize,
) -> Result<PanopticCounts> {
    let n = gt_semantic.len();
    if pred_semantic.len() != n || pred_instance.len() != n || gt_instance.len() != n {
        return Err(Error::Contract(format!(
            "prediction has {} points, ground truth {}",
            pred_semantic.len(),
            n
        )));
    }
    // a segment is (class, instance id), with id 0 for every stuff class
    type Segment = (u16, u32);
    let key = |s: u16, i: u32| -> Segment { (s, if s < n_things { i } else { 0 }) };
    let mut pred_area: BTreeMap<Segment, u64> = BTreeMap::new();
    let mut gt_area: BTreeMap<Segment, u64> = BTreeMap::new();
    let mut inter: BTreeMap<(Segment, Segment), u64> = BTreeMap::new();
    for p in 0..n {
        let gs = gt_semantic[p];
        if gs == VOID_LABEL {
            continue;
        }
        let ps = pred_semantic[p];
        if gs as usize >= n_classes || ps as usize >= n_classes {
            return Err(Error::Contract(format!("class id out of range at point {p}")));
        }
        let g = key(gs, gt_instance[p]);
        let q = key(ps, pred_instance[p]);
        *gt_area.entry(g).or_default() += 1;
        *pred_area.entry(q).or_default() += 1;
        if g.0 == q.0 {
            *inter.entry((g, q)).or_default() += 1;
        }
    }
    let mut counts = PanopticCounts::new(n_things, n_classes);
    let mut matched_pred = BTreeMap::new();
    let mut matched_gt = BTreeMap::new();
    // ground-truth order keeps the IoU sum independent of predicted ids
    for (&(g, q), &i) in &inter {
        let u = pred_area[&q] + gt_area[&g] - i;
        let iou = i as f64 / u as f64;
        if iou > 0.5 {
            let c = &mut counts.classes[q.0 as usize];
            c.tp += 1;
            c.iou_sum += iou;
            matched_pred.insert(q, ());
            matched_gt.insert(g, ());
        }
    }
    for q in pred_area.keys() {
        if !matched_pred.contains_key(q) {
            counts.classes[q.0 as usize].fp += 1;
        }
    }
    for g in gt_area.keys() {
        if !matched_gt.contains_key(g) {
            counts.classes[g.0 as usize].fn_ += 1;
        }
    }
    Ok(counts)
}

pub fn count_scene(pred_semantic: &[u16], pred_instance: &[u32], gt: &LabeledPointCloud) -> Result<PanopticCounts> {
    count(
        pred_semantic,
        pred_instance,
        &gt.semantic,
        &gt.instance,
        gt.n_thing_classes,
        (gt.n_thing_classes + gt.n_stuff_classes) as usize,
    )
}

pub fn evaluate(pred_semantic: &[u16], pred_instance: &[u32], gt: &LabeledPointCloud) -> Result<PanopticReport> {
    Ok(count_scene(pred_semantic, pred_instance, gt)?.report())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts_of(ps: &[u16], pi: &[u32], gs: &[u16], gi: &[u32]) -> PanopticCounts {
        count(ps, pi, gs, gi, 2, 4).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let s = [0, 0, 1, 2, 3, 3];
        let i = [1, 1, 2, 0, 0, 0];
        let r = counts_of(&s, &i, &s, &i).report();
        assert_eq!((r.pq, r.sq, r.rq), (1.0, 1.0, 1.0));
        assert_eq!(r.classes.len(), 4);
    }

    #[test]
    fn iou_point_six_and_point_four() {
        // gt instance: points 0..5; prediction covers 0..3 plus 5,6 -> 3/5 = 0.6? use exact sizes
        let gs = [0u16, 0, 0, 0, 0, 2, 2, 2, 2, 2];
        let gi = [1u32, 1, 1, 1, 1, 0, 0, 0, 0, 0];
        // pred thing over points 0,1,2 (inter 3, union 5) -> IoU 0.6
        let ps = [0u16, 0, 0, 2, 2, 2, 2, 2, 2, 2];
        let pi = [1u32, 1, 1, 0, 0, 0, 0, 0, 0, 0];
        let r = counts_of(&ps, &pi, &gs, &gi).report();
        let c = r.class(0).unwrap();
        assert!((c.pq - 0.6).abs() < 1e-12);
        assert!((c.sq - 0.6).abs() < 1e-12);
        assert_eq!(c.rq, 1.0);
        // pred over 0,1 (inter 2, union 5) -> 0.4
        let ps = [0u16, 0, 2, 2, 2, 2, 2, 2, 2, 2];
        let pi = [1u32, 1, 0, 0, 0, 0, 0, 0, 0, 0];
        let r = counts_of(&ps, &pi, &gs, &gi).report();
        let c = r.class(0).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.pq), (0, 1, 1, 0.0));
    }

    #[test]
    fn pooled_rq_two_thirds() {
        let gs = [0u16, 0, 2];
        let gi = [1u32, 1, 0];
        let mut pooled = counts_of(&gs, &gi, &gs, &gi);
        let empty = counts_of(&[2, 2, 2], &[0, 0, 0], &gs, &gi);
        pooled.merge(&empty);
        let r = pooled.report();
        assert!((r.class(0).unwrap().rq - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn instance_ids_are_labels_only() {
        let gs = [0u16, 0, 1, 1, 3];
        let gi = [1u32, 1, 2, 2, 0];
        let a = counts_of(&gs, &[5, 5, 9, 9, 0], &gs, &gi);
        let b = counts_of(&gs, &[9, 9, 5, 5, 0], &gs, &gi);
        assert_eq!(a, b);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(count(&[0], &[1], &[0, 0], &[1, 1], 2, 4).is_err());
    }
}
