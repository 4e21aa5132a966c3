//! Randomized invariants checked against the reference implementations in
//! `oracles`.

mod oracles;

use dqformer_core::cloud::{LabelTaxonomy, LabeledPointCloud, VOID_LABEL};
use dqformer_core::matrix::Matrix;
use dqformer_core::metrics::count;
use dqformer_core::panoptic::{assemble, fuse_masks};
use dqformer_core::query::fuse_thing_proposals;
use dqformer_core::synth::{instance_bev_boxes, synthesize_scene, SceneRecipe};
use dqformer_core::voxel::{v2p_interpolate, v2p_weights, voxelize_points, VoxelGridSpec, V2P_EPS};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Grid with power-of-two voxel sizes so that coordinate arithmetic on
/// dyadic points is exact.
fn dyadic_spec() -> VoxelGridSpec {
    VoxelGridSpec {
        origin: [-8.0, -8.0, -2.0],
        voxel_size: [0.25, 0.25, 0.5],
        dims: [64, 64, 16],
        level_scales: vec![0.25, 0.5, 1.0],
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn translation_by_whole_voxels_shifts_indices(seed in any::<u64>()) {
        let mut r = rng(seed);
        let spec = dyadic_spec();
        let pts: Vec<[f64; 3]> = (0..50)
            .map(|_| {
                core::array::from_fn(|a| {
                    let lo = spec.origin[a];
                    let span = spec.dims[a] as f64 * spec.voxel_size[a];
                    lo + (r.random_range(0..(span * 128.0) as i64) as f64 + 0.5) / 128.0
                })
            })
            .collect();
        let shift: [i64; 3] = [r.random_range(-20..20), r.random_range(-20..20), r.random_range(-4..4)];
        let moved: Vec<[f64; 3]> = pts
            .iter()
            .map(|p| core::array::from_fn(|a| p[a] + shift[a] as f64 * spec.voxel_size[a]))
            .collect();
        for (p, q) in pts.iter().zip(&moved) {
            if let (Some(a), Some(b)) = (spec.full_index(*p), spec.full_index(*q)) {
                for k in 0..3 {
                    prop_assert_eq!(b[k] as i64 - a[k] as i64, shift[k]);
                }
            }
        }
    }

    #[test]
    fn v2p_matches_brute_force(seed in any::<u64>(), k in 1usize..5) {
        let mut r = rng(seed);
        let spec = dyadic_spec();
        let n = r.random_range(1..=100usize);
        // clustered voxels so that the lattice ring search is exercised
        let cloud: Vec<[f64; 3]> = (0..n)
            .map(|_| [r.random_range(-1.5..1.5), r.random_range(-1.5..1.5), r.random_range(-1.0..1.0)])
            .collect();
        let grid = voxelize_points(&cloud, &spec, 2);
        let nv = grid.n_voxels();
        let feats: Vec<Vec<f64>> = (0..nv).map(|_| (0..3).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let grid = grid.with_features(Matrix::from_rows(&feats));
        let centers: Vec<[f64; 3]> = (0..nv).map(|i| grid.center(i)).collect();
        let queries: Vec<[f64; 3]> = (0..20)
            .map(|_| [r.random_range(-2.5..2.5), r.random_range(-2.5..2.5), r.random_range(-1.5..1.5)])
            .collect();
        let got = v2p_interpolate(&grid, &queries, k).unwrap();
        let w = v2p_weights(&grid, &queries, k).unwrap();
        for (i, q) in queries.iter().enumerate() {
            let want = oracles::v2p(&centers, &feats, *q, k, V2P_EPS);
            prop_assert_eq!(got.row(i), &want[..]);
            let (_, ws) = w.row(i);
            prop_assert!(ws.iter().all(|&x| x >= 0.0));
            prop_assert!((ws.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn thing_fusion_respects_classes(seed in any::<u64>(), theta in 0.0f64..1.2) {
        let mut r = rng(seed);
        let props = oracles::random_proposals(&mut r, 40, 4);
        let fused = fuse_thing_proposals(&props, theta, 1.0);
        let mut seen = vec![false; props.len()];
        for f in &fused {
            for &m in &f.members {
                prop_assert_eq!(props[m].class, f.query.class);
                prop_assert!(!seen[m]);
                seen[m] = true;
            }
        }
        prop_assert!(seen.iter().all(|&s| s));
        if theta > 1.0 {
            prop_assert_eq!(fused.len(), props.len());
        }
    }

    #[test]
    fn theta_one_merges_identical_embeddings_only(seed in any::<u64>()) {
        let mut r = rng(seed);
        let props = oracles::random_proposals(&mut r, 40, 4);
        for f in fuse_thing_proposals(&props, 1.0, 1.0) {
            let first = &props[f.members[0]].embedding;
            for &m in &f.members {
                prop_assert_eq!(&props[m].embedding, first);
            }
        }
    }

    #[test]
    fn mask_fusion_is_idempotent(seed in any::<u64>(), iou in 0.05f64..=1.0) {
        let mut r = rng(seed);
        let (m, q) = oracles::random_masks(&mut r, 60, 8, 3, 2);
        let (m1, q1) = fuse_masks(&m, &q, iou);
        let (m2, q2) = fuse_masks(&m1, &q1, iou);
        prop_assert_eq!(&m1, &m2);
        prop_assert_eq!(q1, q2);
    }

    #[test]
    fn assembled_labels_are_valid(seed in any::<u64>(), n_thing in 0usize..8) {
        let mut r = rng(seed);
        let (m, q) = oracles::random_masks(&mut r, 50, n_thing, 3, 2);
        let fallback: Vec<u16> = (0..50).map(|_| r.random_range(3..5)).collect();
        let lab = assemble(&m, &q, &fallback);
        prop_assert!(lab.validate(3).is_ok());
        let (fm, fq) = fuse_masks(&m, &q, 0.5);
        prop_assert!(assemble(&fm, &fq, &fallback).validate(3).is_ok());
    }

    #[test]
    fn metric_matches_oracle(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (ps, pi, gs, gi, nt, nc) = oracles::random_panoptic_case(&mut r);
        let got = count(&ps, &pi, &gs, &gi, nt, nc).unwrap();
        let want = oracles::panoptic_counts(&ps, &pi, &gs, &gi, nt, nc, VOID_LABEL);
        for (c, w) in got.classes.iter().zip(&want) {
            prop_assert_eq!((c.tp, c.fp, c.fn_), (w.0, w.1, w.2));
            prop_assert_eq!(c.iou_sum, w.3);
            prop_assert!((c.pq() - c.sq() * c.rq()).abs() < 1e-12);
        }
        let report = got.report();
        prop_assert!(report.pq_dagger >= report.pq - 1e-12);
    }

    #[test]
    fn metric_ignores_instance_id_permutation(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (ps, pi, gs, gi, nt, nc) = oracles::random_panoptic_case(&mut r);
        // a bijection on ids: multiply by an odd constant modulo 2^32
        let relabel: Vec<u32> = pi.iter().map(|&i| if i == 0 { 0 } else { i.wrapping_mul(2_654_435_761) }).collect();
        let a = count(&ps, &pi, &gs, &gi, nt, nc).unwrap().report();
        let b = count(&ps, &relabel, &gs, &gi, nt, nc).unwrap().report();
        prop_assert_eq!(a, b);
    }
}

/// Checks invariants of several default scenes.
#[test]
fn synthetic_scenes_keep_things_apart_and_in_the_minority() {
    let tax = LabelTaxonomy::synthetic();
    for seed in 0..6u64 {
        let cloud: LabeledPointCloud = synthesize_scene(&SceneRecipe { seed, ..Default::default() }, &tax).unwrap();
        cloud.validate().unwrap();
        let boxes = instance_bev_boxes(&cloud);
        for (i, (_, a)) in boxes.iter().enumerate() {
            for (_, b) in &boxes[i + 1..] {
                let overlap = a[0] < b[2] && b[0] < a[2] && a[1] < b[3] && b[1] < a[3];
                assert!(!overlap, "seed {seed}: footprints {a:?} and {b:?} overlap");
            }
        }
        let things = cloud.instance.iter().filter(|&&i| i > 0).count();
        let frac = things as f64 / cloud.len() as f64;
        assert!(frac < 0.5, "seed {seed}: thing fraction {frac}");
    }
}
