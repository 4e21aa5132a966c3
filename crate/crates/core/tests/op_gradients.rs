//! Finite-difference checks of every differentiable tape operation.

use std::sync::Arc;

use dqformer_core::autograd::{FocalParams, MaskRow, Tape, Var};
use dqformer_core::conv::{BevLayout, ConvShape};
use dqformer_core::gradcheck::{check_params, GradCheckOptions};
use dqformer_core::matrix::{Csr, Matrix};
use dqformer_core::params::{Bound, ParamId, ParamStore};
use dqformer_core::Result;

const TOL: f64 = 1e-4;

/// Scalar readout with fixed, non-uniform weights so that every output
/// entry contributes a distinct gradient.
fn readout(t: &mut Tape, v: Var) -> Var {
    let (r, c) = t.value(v).shape();
    let w = Matrix::from_fn(r, c, |i, j| 0.3 + ((i * 7 + j * 3) % 11) as f64 * 0.17 - 0.9);
    let w = t.constant(w);
    let m = t.mul(v, w);
    t.sum_all(m)
}

fn assert_grads<F>(store: &ParamStore, f: F)
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let r = check_params(store, f, GradCheckOptions::default()).unwrap();
    assert!(r.checked > 0);
    assert!(r.max_rel_error < TOL, "{r:?}");
}

fn store_with(shapes: &[(usize, usize)]) -> (ParamStore, Vec<ParamId>) {
    let mut s = ParamStore::new(11);
    let ids = shapes
        .iter()
        .enumerate()
        .map(|(i, &(r, c))| s.uniform(&format!("p{i}"), r, c, 1))
        .collect();
    (s, ids)
}

#[test]
fn dense_algebra() {
    let (s, id) = store_with(&[(3, 4), (4, 5), (3, 4), (1, 4), (3, 1)]);
    assert_grads(&s, |t, p| {
        let (a, b, c, row, col) = (p.var(id[0]), p.var(id[1]), p.var(id[2]), p.var(id[3]), p.var(id[4]));
        let ab = t.matmul(a, b);
        let act = t.matmul_t(a, c);
        let tr = t.transpose(act);
        let x = t.add(a, c);
        let x = t.sub(x, a);
        let x = t.mul(x, c);
        let x = t.scale(x, 1.7);
        let x = t.add_row(x, row);
        let x = t.mul_row(x, row);
        let x = t.mul_col(x, col);
        let sig = t.sigmoid(x);
        let parts = [readout(t, ab), readout(t, tr), readout(t, sig)];
        let cat = t.concat_rows(&parts);
        Ok(t.sum_all(cat))
    });
}

#[test]
fn normalization_and_softmax() {
    let (s, id) = store_with(&[(4, 6), (1, 6), (1, 6)]);
    assert_grads(&s, |t, p| {
        let x = t.scale(p.var(id[0]), 3.0);
        let sm = t.softmax_rows(x);
        let ln = t.layer_norm(x, p.var(id[1]), p.var(id[2]), 1e-5);
        let mean = t.mean_rows(ln);
        let a = readout(t, sm);
        let b = readout(t, ln);
        let c = readout(t, mean);
        let sum = t.add(a, b);
        Ok(t.add(sum, c))
    });
}

#[test]
fn relu_and_indexing() {
    let (s, id) = store_with(&[(5, 3), (5, 2)]);
    let csr = Arc::new(Csr::from_groups(&[
        vec![(0, 0.5), (3, 0.25)],
        vec![(4, 1.0)],
        vec![(1, 0.2), (2, 0.3), (4, 0.5)],
    ]));
    let groups = Csr::from_groups(&[vec![(0, 1.0), (1, 1.0)], vec![(2, 1.0), (3, 1.0), (4, 1.0)]]);
    assert_grads(&s, |t, p| {
        let a = p.var(id[0]);
        let r = t.relu(a);
        let g = t.gather_rows(a, &[4, 0, 4]);
        let m = t.sparse_mix(a, csr.clone());
        let mx = t.group_max(a, &groups);
        let cat = t.concat_cols(&[a, p.var(id[1])]);
        let sl = t.slice_cols(cat, 2, 3);
        let parts = [readout(t, r), readout(t, g), readout(t, m), readout(t, mx), readout(t, sl)];
        let all = t.concat_rows(&parts);
        Ok(t.sum_all(all))
    });
}

#[test]
fn convolutions() {
    let shape = ConvShape {
        height: 3,
        width: 4,
        ksize: 3,
        cin: 2,
        cout: 3,
    };
    let (s, id) = store_with(&[(12, 2), (18, 3), (5, 2), (9 * 2 * 2, 3)]);
    let layout = Arc::new(BevLayout {
        height: 3,
        width: 3,
        depth: 2,
        cells: vec![[0, 0, 0], [0, 0, 1], [1, 2, 0], [2, 1, 1], [2, 2, 0]],
    });
    assert_grads(&s, |t, p| {
        let y = t.conv2d(p.var(id[0]), p.var(id[1]), shape);
        let b = t.bev_conv(p.var(id[2]), p.var(id[3]), layout.clone());
        let a = readout(t, y);
        let c = readout(t, b);
        Ok(t.add(a, c))
    });
}

#[test]
fn losses() {
    let (s, id) = store_with(&[(6, 2), (2, 5), (4, 3)]);
    let target = Arc::new(Matrix::from_fn(6, 2, |r, c| if r == 2 && c == 1 { 1.0 } else { (r as f64) * 0.1 }));
    let rows = Arc::new(vec![
        MaskRow {
            row: 0,
            points: vec![0, 2, 4],
            target: vec![1.0, 0.0, 1.0],
        },
        MaskRow {
            row: 1,
            points: vec![1, 3],
            target: vec![0.0, 1.0],
        },
    ]);
    let labels = Arc::new(vec![0u32, 2, 1, 2]);
    assert_grads(&s, |t, p| {
        let logits = t.scale(p.var(id[0]), 4.0);
        let focal = t.focal_loss(
            logits,
            target.clone(),
            FocalParams {
                alpha: 2.0,
                beta: 4.0,
                clamp: 1e-6,
                norm: 3.0,
            },
        );
        let bd = t.bce_dice(p.var(id[1]), rows.clone());
        let ce = t.cross_entropy(p.var(id[2]), labels.clone());
        let x = t.add(focal, bd);
        Ok(t.add(x, ce))
    });
}
