use dat_core::gradcheck::grad_check;
use dat_core::{ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.get2(i, p) * b.get2(p, j);
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_matches_triple_loop(m in 1usize..9, k in 1usize..9, n in 1usize..9, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = Tensor::randn(&[m, k], 1.0, &mut r);
        let b = Tensor::randn(&[k, n], 1.0, &mut r);
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul(va, vb).unwrap();
        for (x, y) in tape.value(c).data().iter().zip(naive_matmul(&a, &b)) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..12, scale in 0.1f64..50.0, seed in any::<u64>()) {
        let x = Tensor::randn(&[rows, cols], scale, &mut rng(seed));
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let v = tape.constant(x);
        let s = tape.softmax(v, 1).unwrap();
        let out = tape.value(s);
        for r in 0..rows {
            let row = out.row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn layer_norm_centres_rows(rows in 1usize..6, d in 2usize..16, shift in -100.0f64..100.0, seed in any::<u64>()) {
        let mut x = Tensor::randn(&[rows, d], 3.0, &mut rng(seed));
        x.data_mut().iter_mut().for_each(|v| *v += shift);
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let v = tape.constant(x);
        let g = tape.constant(Tensor::ones(&[d]));
        let b = tape.constant(Tensor::zeros(&[d]));
        let y = tape.layer_norm(v, g, b, 1e-5).unwrap();
        let out = tape.value(y);
        for r in 0..rows {
            let mean = out.row(r).iter().sum::<f64>() / d as f64;
            prop_assert!(mean.abs() < 1e-10);
        }
    }

    #[test]
    fn concat_then_slice_is_identity(l in 1usize..7, w1 in 1usize..6, w2 in 1usize..6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = Tensor::randn(&[l, w1], 1.0, &mut r);
        let b = Tensor::randn(&[l, w2], 1.0, &mut r);
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let (va, vb) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
        let c = tape.concat(&[va, vb], 1).unwrap();
        let sa = tape.slice(c, 1, 0, w1).unwrap();
        let sb = tape.slice(c, 1, w1, w1 + w2).unwrap();
        prop_assert_eq!(tape.value(sa).data(), a.data());
        prop_assert_eq!(tape.value(sb).data(), b.data());

        // weighting the concatenation routes each weight back to its source
        let w = Tensor::randn(&[l, w1 + w2], 1.0, &mut r);
        let wv = tape.constant(w.clone());
        let p = tape.mul(c, wv).unwrap();
        let loss = tape.sum(p).unwrap();
        tape.backward(loss).unwrap();
        let (ga, gb) = (tape.grad(va).unwrap(), tape.grad(vb).unwrap());
        for i in 0..l {
            prop_assert_eq!(ga.row(i), &w.row(i)[..w1]);
            prop_assert_eq!(gb.row(i), &w.row(i)[w1..]);
        }
    }

    #[test]
    fn forward_is_bitwise_repeatable(seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = Tensor::randn(&[5, 8], 1.0, &mut r);
        let w = Tensor::randn(&[8, 8], 1.0, &mut r);
        let run = || {
            let store = ParamStore::new();
            let mut tape = Tape::new(&store);
            let (vx, vw) = (tape.constant(x.clone()), tape.constant(w.clone()));
            let h = tape.matmul(vx, vw).unwrap();
            let h = tape.gelu(h).unwrap();
            let s = tape.softmax(h, 1).unwrap();
            tape.value(s).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }
}

/// Each op, differentiated through a random projection of its output.
#[test]
fn every_op_matches_central_differences() {
    let mut r = rng(11);
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::randn(&[4, 6], 1.0, &mut r));
    let b = store.add("b", Tensor::randn(&[6, 3], 1.0, &mut r));
    let c = store.add("c", Tensor::randn(&[4, 6], 1.0, &mut r));
    let g = store.add("g", Tensor::randn(&[6], 1.0, &mut r));
    let bias = store.add("bias", Tensor::randn(&[6], 1.0, &mut r));
    let proj = Tensor::randn(&[4, 6], 1.0, &mut r);
    let proj3 = Tensor::randn(&[4, 3], 1.0, &mut r);
    let labels: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();

    type Case = (&'static str, Box<dyn Fn(&mut Tape) -> dat_core::Result<dat_core::Var>>);
    let p6 = proj.clone();
    let cases: Vec<Case> = vec![
        ("matmul", Box::new(move |t: &mut Tape| {
            let (va, vb) = (t.param(a), t.param(b));
            let y = t.matmul(va, vb)?;
            let w = t.constant(proj3.clone());
            let y = t.mul(y, w)?;
            t.sum(y)
        })),
        ("add_mul_scale", Box::new({
            let p = p6.clone();
            move |t: &mut Tape| {
                let (va, vc) = (t.param(a), t.param(c));
                let s = t.add(va, vc)?;
                let m = t.mul(s, va)?;
                let m = t.scale(m, -0.7)?;
                let d = t.sub(m, vc)?;
                let w = t.constant(p.clone());
                let y = t.mul(d, w)?;
                t.mean(y)
            }
        })),
        ("gelu", Box::new({
            let p = p6.clone();
            move |t: &mut Tape| {
                let va = t.param(a);
                let y = t.gelu(va)?;
                let w = t.constant(p.clone());
                let y = t.mul(y, w)?;
                t.sum(y)
            }
        })),
        ("softmax_both_axes", Box::new({
            let p = p6.clone();
            move |t: &mut Tape| {
                let va = t.param(a);
                let s1 = t.softmax(va, 1)?;
                let s0 = t.softmax(va, 0)?;
                let y = t.add(s1, s0)?;
                let w = t.constant(p.clone());
                let y = t.mul(y, w)?;
                t.sum(y)
            }
        })),
        ("layer_norm", Box::new({
            let p = p6.clone();
            move |t: &mut Tape| {
                let (va, vg, vb) = (t.param(a), t.param(g), t.param(bias));
                let y = t.layer_norm(va, vg, vb, 1e-5)?;
                let w = t.constant(p.clone());
                let y = t.mul(y, w)?;
                t.sum(y)
            }
        })),
        ("add_row", Box::new({
            let p = p6.clone();
            move |t: &mut Tape| {
                let (va, vb) = (t.param(a), t.param(bias));
                let y = t.add_row(va, vb)?;
                let y = t.gelu(y)?;
                let w = t.constant(p.clone());
                let y = t.mul(y, w)?;
                t.sum(y)
            }
        })),
        ("concat_slice", Box::new({
            let p = p6.clone();
            move |t: &mut Tape| {
                let (va, vc) = (t.param(a), t.param(c));
                let cat = t.concat(&[va, vc], 0)?;
                let top = t.slice(cat, 0, 2, 6)?;
                let y = t.gelu(top)?;
                let w = t.constant(p.clone());
                let y = t.mul(y, w)?;
                t.sum(y)
            }
        })),
        ("mse", Box::new({
            let labels = labels.clone();
            move |t: &mut Tape| {
                let (va, vb) = (t.param(a), t.param(b));
                let y = t.matmul(va, vb)?;
                let mut weights = vec![1.0; 12];
                weights[3] = 0.0;
                t.mse(y, &labels, &weights)
            }
        })),
        ("ccc_loss", Box::new(move |t: &mut Tape| {
            let (va, vb) = (t.param(a), t.param(b));
            let y = t.matmul(va, vb)?;
            t.ccc_loss(y, &labels, &[1.0; 12])
        })),
    ];
    for (name, f) in cases {
        let report = grad_check(&mut store, f, 1e-5, 200, 3).unwrap();
        assert!(report.passes(1e-5), "{name}: {report:?}");
    }
}

#[test]
fn reused_parameter_gradients_add_up() {
    // y = sum(x ⊙ x ⊙ x) through three uses of x → 3x²
    let mut store = ParamStore::new();
    let x = store.add("x", Tensor::vector(vec![0.5, -1.0, 2.0]));
    let mut tape = Tape::new(&store);
    let v = tape.param(x);
    let v2 = tape.param(x);
    let sq = tape.mul(v, v2).unwrap();
    let cube = tape.mul(sq, v).unwrap();
    let loss = tape.sum(cube).unwrap();
    tape.backward(loss).unwrap();
    let g = tape.param_grads();
    assert_eq!(g.get(x).data(), &[0.75, 3.0, 12.0]);
}

#[test]
fn reset_allows_a_second_backward() {
    let mut store = ParamStore::new();
    let x = store.add("x", Tensor::vector(vec![1.0, 2.0]));
    let mut tape = Tape::new(&store);
    for _ in 0..2 {
        let v = tape.param(x);
        let s = tape.sum(v).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.backward(s).is_err());
        assert_eq!(tape.param_grads().get(x).data(), &[1.0, 1.0]);
        tape.reset();
        assert!(tape.is_empty());
    }
}
