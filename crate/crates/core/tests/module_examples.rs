//! Worked examples and structural invariants of the trainable modules.

use std::sync::Arc;

use dqformer_core::autograd::Tape;
use dqformer_core::decoder::{Decoder, PointFeatures};
use dqformer_core::encoder::{Encoder, EncoderShape};
use dqformer_core::geometry::{prepare_points, GeometryOptions, SceneGeometry};
use dqformer_core::matrix::Matrix;
use dqformer_core::params::ParamStore;
use dqformer_core::query::QueryHeads;
use dqformer_core::voxel::VoxelGridSpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn identity(n: usize) -> Matrix {
    Matrix::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
}

fn toy_spec() -> VoxelGridSpec {
    VoxelGridSpec {
        origin: [-12.8, -12.8, -1.0],
        voxel_size: [0.4, 0.4, 0.3],
        dims: [64, 64, 16],
        level_scales: vec![0.125, 0.25, 0.5, 1.0],
    }
}

const OPTS: GeometryOptions = GeometryOptions {
    knn: 3,
    range_feature: true,
    embed_dim: 8,
};

fn geometry(points: &[[f64; 3]]) -> SceneGeometry {
    let intensity: Vec<f32> = (0..points.len()).map(|i| (i % 7) as f32 / 7.0).collect();
    prepare_points(points, &intensity, &toy_spec(), OPTS).unwrap()
}

fn encoder(store: &mut ParamStore, geo: &SceneGeometry) -> Encoder {
    Encoder::new(
        store,
        EncoderShape {
            point_features: geo.point_features.cols,
            channels: 6,
            embed_dim: OPTS.embed_dim,
            n_levels: geo.n_levels(),
        },
    )
}

fn voxel_features(geo: &SceneGeometry, store: &ParamStore, enc: &Encoder) -> Vec<Matrix> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let out = enc.forward(&mut tape, &p, geo);
    out.voxel.iter().map(|&v| tape.value(v).clone()).collect()
}

fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| [rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0), rng.random_range(-0.9..2.0)])
        .collect()
}

#[test]
fn stuff_head_attends_with_softmax_over_pixels() {
    // c = 2, one stuff class, identity projections, two pixels e1 and e2
    let mut store = ParamStore::new(0);
    let heads = QueryHeads::new(&mut store, &[1], 2, 2, 1, 1);
    for name in ["stuff.phi_q", "stuff.phi_k", "stuff.phi_v", "stuff.phi_query"] {
        store.assign(&format!("{name}.weight"), identity(2)).unwrap();
        store.assign(&format!("{name}.bias"), Matrix::zeros(1, 2)).unwrap();
    }
    let learn = Matrix::from_rows(&[vec![2f64.sqrt() * 2f64.ln(), 0.0]]);
    store.assign("stuff.learn", learn).unwrap();

    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let emb = tape.constant(identity(2));
    let (logits, queries) = heads.stuff_head(&mut tape, &p, emb);
    let logits = tape.value(logits);
    assert!((logits.get(0, 0) - 2f64.ln()).abs() < 1e-12);
    assert!(logits.get(1, 0).abs() < 1e-12);
    // the query is the attention-weighted pixel embedding (2/3, 1/3)
    let q = tape.value(queries);
    assert!((q.get(0, 0) - 2.0 / 3.0).abs() < 1e-12);
    assert!((q.get(0, 1) - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn single_pixel_stuff_query_is_that_pixel() {
    let mut store = ParamStore::new(3);
    let heads = QueryHeads::new(&mut store, &[1], 4, 4, 1, 2);
    for name in ["stuff.phi_v", "stuff.phi_query"] {
        store.assign(&format!("{name}.weight"), identity(4)).unwrap();
        store.assign(&format!("{name}.bias"), Matrix::zeros(1, 4)).unwrap();
    }
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let pixel = Matrix::from_rows(&[vec![0.3, -1.0, 2.0, 0.5]]);
    let emb = tape.constant(pixel.clone());
    let (_, queries) = heads.stuff_head(&mut tape, &p, emb);
    let q = tape.value(queries);
    for r in 0..2 {
        for c in 0..4 {
            assert!((q.get(r, c) - pixel.get(0, c)).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_voxels_give_zero_bev_embedding() {
    let geo = geometry(&[[0.1, 0.2, 0.3], [3.0, -2.0, 1.0], [3.1, -2.1, 1.1]]);
    let depths: Vec<usize> = geo.levels.iter().map(|l| l.bev.depth).collect();
    let mut store = ParamStore::new(5);
    let heads = QueryHeads::new(&mut store, &depths, 8, 4, 2, 2);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    for (l, lg) in geo.levels.iter().enumerate() {
        let voxel = tape.constant(Matrix::zeros(lg.grid.n_voxels(), 8));
        let emb = heads.bev_embed(&mut tape, &p, voxel, l, lg);
        assert!(tape.value(emb).data.iter().all(|&v| v == 0.0), "level {l}");
    }
}

#[test]
fn zero_center_head_predicts_one_half() {
    let mut store = ParamStore::new(5);
    let heads = QueryHeads::new(&mut store, &[1], 4, 3, 2, 1);
    let names: Vec<String> = store.iter().map(|(_, n, _)| n.to_string()).filter(|n| n.starts_with("center.")).collect();
    for n in names {
        let (r, c) = store.get(store.id(&n).unwrap()).shape();
        store.assign(&n, Matrix::zeros(r, c)).unwrap();
    }
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let emb = tape.constant(Matrix::from_fn(5, 4, |r, c| (r * 4 + c) as f64 * 0.1));
    let logits = heads.center_head(&mut tape, &p, emb);
    let prob = tape.value(logits).map(|x| 1.0 / (1.0 + (-x).exp()));
    assert!(prob.data.iter().all(|&v| v == 0.5));
}

struct DecoderCase {
    store: ParamStore,
    decoder: Decoder,
    queries: Matrix,
    features: Matrix,
    embedding: Matrix,
    prev: Matrix,
}

fn decoder_case(seed: u64, nq: usize, np: usize, c: usize) -> DecoderCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new(seed);
    let decoder = Decoder::new(&mut store, c, 2, 2, 16);
    let mut rand = |r, k| Matrix::from_fn(r, k, |_, _| rng.random_range(-1.0..1.0));
    DecoderCase {
        queries: rand(nq, c),
        features: rand(np, c),
        embedding: rand(np, c),
        prev: rand(nq, np),
        store,
        decoder,
    }
}

/// Runs block 0 and returns (queries, logits, attention weights per head).
fn run_block(case: &DecoderCase, queries: &Matrix, prev: &Matrix, masked: bool) -> (Matrix, Matrix, Vec<Matrix>) {
    let mut tape = Tape::new();
    let p = case.store.bind(&mut tape, false);
    let q = tape.constant(queries.clone());
    let f = PointFeatures::Points(tape.constant(case.features.clone()));
    let prev = tape.constant(prev.clone());
    let emb = tape.constant(case.embedding.clone());
    let (x, l, w) = case.decoder.block(&mut tape, &p, 0, q, &f, prev, emb, masked).unwrap();
    (
        tape.value(x).clone(),
        tape.value(l).clone(),
        w.iter().map(|&v| tape.value(v).clone()).collect(),
    )
}

#[test]
fn single_point_ignores_previous_mask() {
    let case = decoder_case(1, 1, 1, 4);
    let a = run_block(&case, &case.queries, &Matrix::filled(1, 1, 5.0), true);
    let b = run_block(&case, &case.queries, &Matrix::filled(1, 1, -5.0), true);
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
}

#[test]
fn full_mask_equals_unmasked_attention() {
    let case = decoder_case(2, 5, 30, 8);
    let ones = Matrix::filled(5, 30, 3.0);
    let a = run_block(&case, &case.queries, &ones, true);
    let b = run_block(&case, &case.queries, &ones, false);
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
}

#[test]
fn masked_attention_rows_are_distributions() {
    let case = decoder_case(3, 6, 40, 8);
    let (_, _, weights) = run_block(&case, &case.queries, &case.prev, true);
    for w in &weights {
        for r in 0..w.rows {
            let row = w.row(r);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            // keys outside the previous mask get no weight
            let prev = case.prev.row(r);
            if prev.iter().any(|&x| x >= 0.0) {
                for (wv, pv) in row.iter().zip(prev) {
                    if *pv < 0.0 {
                        assert!(*wv < 1e-300);
                    }
                }
            }
        }
    }
}

#[test]
fn block_is_equivariant_to_query_order() {
    let case = decoder_case(4, 6, 25, 8);
    let perm = [3usize, 0, 5, 1, 4, 2];
    let (x, l, _) = run_block(&case, &case.queries, &case.prev, true);
    let (px, pl, _) = run_block(&case, &case.queries.gather_rows(&perm), &case.prev.gather_rows(&perm), true);
    assert!(px.max_abs_diff(&x.gather_rows(&perm)) < 1e-12);
    assert!(pl.max_abs_diff(&l.gather_rows(&perm)) < 1e-12);
}

#[test]
fn one_point_occupies_one_voxel_per_level() {
    let geo = geometry(&[[1.0, -2.0, 0.5]]);
    let mut store = ParamStore::new(9);
    let enc = encoder(&mut store, &geo);
    let feats = voxel_features(&geo, &store, &enc);
    assert_eq!(feats.len(), 4);
    for f in &feats {
        assert_eq!(f.shape(), (1, OPTS.embed_dim));
    }
}

#[test]
fn voxel_features_ignore_point_order_and_duplicates() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pts = random_points(&mut rng, 300);
    let geo = geometry(&pts);
    let mut store = ParamStore::new(9);
    let enc = encoder(&mut store, &geo);
    let base = voxel_features(&geo, &store, &enc);

    let mut order: Vec<usize> = (0..pts.len()).collect();
    order.reverse();
    order.rotate_left(17);
    let shuffled: Vec<[f64; 3]> = order.iter().map(|&i| pts[i]).collect();
    // intensity follows the point, so rebuild it in the same order
    let intensity: Vec<f32> = order.iter().map(|&i| (i % 7) as f32 / 7.0).collect();
    let geo_s = prepare_points(&shuffled, &intensity, &toy_spec(), OPTS).unwrap();
    assert_eq!(voxel_features(&geo_s, &store, &enc), base);

    let doubled: Vec<[f64; 3]> = pts.iter().chain(&pts).copied().collect();
    let intensity: Vec<f32> = (0..2 * pts.len()).map(|i| ((i % pts.len()) % 7) as f32 / 7.0).collect();
    let geo_d = prepare_points(&doubled, &intensity, &toy_spec(), OPTS).unwrap();
    assert_eq!(voxel_features(&geo_d, &store, &enc), base);
}

#[test]
fn voxel_key_projection_equals_point_projection() {
    // interpolating voxel keys equals projecting interpolated point features
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let geo = geometry(&random_points(&mut rng, 120));
    let mut store = ParamStore::new(13);
    let enc = encoder(&mut store, &geo);
    let decoder = Decoder::new(&mut store, OPTS.embed_dim, 1, 2, 16);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let out = enc.forward(&mut tape, &p, &geo);
    let l = geo.n_levels() - 1;
    let nq = 4;
    let queries = tape.constant(Matrix::from_fn(nq, OPTS.embed_dim, |r, c| ((r + 2 * c) % 5) as f64 * 0.2 - 0.4));
    let prev = tape.constant(Matrix::filled(nq, geo.n_points(), 1.0));
    let emb = out.point[l];
    let by_voxel = PointFeatures::Voxels(out.voxel[l], Arc::clone(&geo.levels[l].v2p));
    let by_point = PointFeatures::Points(out.point[l]);
    let (a, _, _) = decoder.block(&mut tape, &p, 0, queries, &by_voxel, prev, emb, false).unwrap();
    let (b, _, _) = decoder.block(&mut tape, &p, 0, queries, &by_point, prev, emb, false).unwrap();
    assert!(tape.value(a).max_abs_diff(tape.value(b)) < 1e-9);
}
