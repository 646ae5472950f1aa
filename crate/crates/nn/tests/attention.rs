//! Structural properties of the attention modules and the two models.

use rand::Rng;
use rand_distr::StandardNormal;
use tensorformer_core::rng::stream;
use tensorformer_core::Volume4D;
use tensorformer_nn::autodiff::{Matrix, Tape};
use tensorformer_nn::{predict_volume, AttentionMode, ModelConfig, ModelS, ModelST, TensorModel};

fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = stream(seed, 97, 0);
    Matrix::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

fn signals(rows: usize, seed: u64) -> Matrix {
    let mut rng = stream(seed, 96, 0);
    Matrix::from_shape_fn((rows, 6), |_| rng.gen_range(0.1..1.0))
}

fn permute_rows(m: &Matrix, perm: &[usize]) -> Matrix {
    Matrix::from_shape_fn(m.dim(), |(i, j)| m[[perm[i], j]])
}

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut stream(seed, 95, 0));
    p
}

fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut t = Tape::new();
    let a = t.input(random(64, 125, 1) * 30.0);
    let s = t.softmax_rows(a).unwrap();
    for row in t.value(s).unwrap().rows() {
        assert!((row.sum() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }
}

#[test]
fn zero_query_key_weights_give_uniform_attention() {
    let cfg = ModelConfig {
        patch: 2,
        d_model: 5,
        d_head: 3,
        heads: 1,
        layers: 1,
        stabilizers: false,
        ..ModelConfig::default()
    };
    let mut m = ModelS::new(cfg, 4).unwrap();
    for w in ["s.block0.head0.wq", "s.block0.head0.wk"] {
        let id = m.store.find(w).unwrap();
        m.store.value_mut(id).fill(0.0);
    }
    let x = signals(8, 1);
    let get = |n: &str| m.store.value(m.store.find(n).unwrap()).clone();
    let h0 = x.dot(&get("s.embed.w")) + get("s.embed.pos");
    let v = h0.dot(&get("s.block0.head0.wv"));
    let mean = v.mean_axis(ndarray::Axis(0)).unwrap().insert_axis(ndarray::Axis(0));
    let y = (mean.dot(&get("s.block0.out.w")) + get("s.block0.out.b")).mapv(|a| a.max(0.0));
    let want = y.dot(&get("s.head.w")) + get("s.head.b");
    let got = m.predict_patch(&x).unwrap();
    for row in got.rows() {
        for (a, b) in row.iter().zip(want.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

/// Row permutation changes only the summation order inside attention, so
/// equality holds to rounding.
const EQUIVARIANCE_TOL: f64 = 1e-12;

#[test]
fn permutation_equivariance_without_positional_encoding() {
    for attention in [AttentionMode::Softmax, AttentionMode::Unnormalized] {
        for stabilizers in [false, true] {
            let cfg = ModelConfig {
                patch: 3,
                d_model: 16,
                d_head: 8,
                attention,
                stabilizers,
                ..ModelConfig::default()
            };
            let m = ModelS::new(cfg, 6).unwrap();
            let x = signals(27, 2);
            let perm = permutation(27, 3);
            let y = m.predict_patch(&x).unwrap();
            let yp = m.predict_patch(&permute_rows(&x, &perm)).unwrap();
            let scale = y.iter().fold(1.0f64, |a, b| a.max(b.abs()));
            assert!(
                max_abs_diff(&yp, &permute_rows(&y, &perm)) <= EQUIVARIANCE_TOL * scale,
                "{attention:?} stabilizers={stabilizers}"
            );
        }
    }
}

#[test]
fn nonzero_positional_encoding_breaks_equivariance() {
    let cfg = ModelConfig {
        patch: 3,
        d_model: 16,
        d_head: 8,
        ..ModelConfig::default()
    };
    let mut m = ModelS::new(cfg, 6).unwrap();
    let pos = m.positional_encoding();
    *m.store.value_mut(pos) = random(27, 16, 9) * 0.5;
    let x = signals(27, 2);
    let perm = permutation(27, 3);
    let y = m.predict_patch(&x).unwrap();
    let yp = m.predict_patch(&permute_rows(&x, &perm)).unwrap();
    assert!(max_abs_diff(&yp, &permute_rows(&y, &perm)) > 1e-6);
}

#[test]
fn zeroed_tensor_branch_ignores_stage_one_input() {
    let cfg = ModelConfig {
        patch: 2,
        d_model: 8,
        d_head: 4,
        ..ModelConfig::default()
    };
    let s = ModelS::new(cfg, 1).unwrap();
    let mut st = ModelST::new(&s, 2).unwrap();
    let x = signals(8, 4);
    let (t1, t2) = (random(8, 6, 5), random(8, 6, 6));
    assert_ne!(st.predict_with(&x, &t1).unwrap(), st.predict_with(&x, &t2).unwrap());
    let w = st.head_weight();
    st.store.value_mut(w).slice_mut(ndarray::s![8.., ..]).fill(0.0);
    assert_eq!(st.predict_with(&x, &t1).unwrap(), st.predict_with(&x, &t2).unwrap());
}

#[test]
fn model_st_uses_stage_one_output() {
    let cfg = ModelConfig {
        patch: 2,
        d_model: 8,
        d_head: 4,
        ..ModelConfig::default()
    };
    let s = ModelS::new(cfg, 1).unwrap();
    let st = ModelST::new(&s, 2).unwrap();
    let x = signals(8, 7);
    let direct = st.predict_with(&x, &s.predict_patch(&x).unwrap()).unwrap();
    assert_eq!(st.predict_patch(&x).unwrap(), direct);
}

#[test]
fn predict_volume_shapes_delegation_and_constant_interior() {
    let cfg = ModelConfig {
        patch: 3,
        d_model: 8,
        d_head: 4,
        ..ModelConfig::default()
    };
    let mut m = ModelS::new(cfg, 3).unwrap();
    let pos = m.positional_encoding();
    *m.store.value_mut(pos) = random(27, 8, 2) * 0.3;

    // a single full patch: prediction equals the per-patch forward pass
    let x = signals(27, 8);
    let vol = Volume4D::<f64>::from_voxels([3, 3, 3], 6, |c, out| {
        out.copy_from_slice(x.row(c[0] * 9 + c[1] * 3 + c[2]).as_slice().unwrap())
    });
    let pred = predict_volume(&m, &vol, None, 1).unwrap();
    let direct = m.predict_patch(&x).unwrap() / 1000.0;
    for (i, v) in pred.voxels().enumerate() {
        for (a, b) in v.iter().zip(direct.row(i)) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    // constant input: every voxel sees the same set of patch positions in
    // the interior, so the averaged output is constant there
    let cvol = Volume4D::<f64>::from_voxels([9, 9, 9], 6, |_, out| out.copy_from_slice(&[0.4, 0.5, 0.6, 0.3, 0.7, 0.45]));
    let mut mask = vec![true; 729];
    mask[0] = false;
    let pred = predict_volume(&m, &cvol, Some(&mask), 1).unwrap();
    assert_eq!(pred.dims(), [9, 9, 9]);
    assert_eq!(pred.channels(), 6);
    assert!(pred.voxel_at(0).iter().all(|&x| x == 0.0));
    let centre = pred.voxel([4, 4, 4]).to_vec();
    for c in [[2, 2, 2], [3, 5, 4], [6, 6, 6], [2, 6, 3]] {
        for (a, b) in pred.voxel(c).iter().zip(&centre) {
            assert!((a - b).abs() < 1e-12 * b.abs().max(1e-3), "{c:?}");
        }
    }
}
