//! Dense `f64` tensors and a reverse-mode tape.
//!
//! Everything the attention model needs and nothing more: matrix products,
//! elementwise arithmetic, a single row-broadcast, trig and activation
//! functions, row softmax, row/column gathers, and reductions.

mod tape;
mod tensor;

pub use tape::{Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use proptest::prelude::*;

    fn mat(m: usize, n: usize, v: &[f64]) -> Tensor {
        Tensor::matrix(m, n, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_orthogonal() {
        let mut tape = Tape::new();
        let i2 = tape.constant(mat(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(mat(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let p = tape.matmul(i2, b).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let r = tape.constant(mat(1, 2, &[1.0, 0.0]));
        let c = tape.constant(mat(2, 1, &[0.0, 1.0]));
        let p = tape.matmul(r, c).unwrap();
        assert_eq!(tape.value(p).data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]).unwrap());
        let b = tape.constant(Tensor::zeros(vec![2, 3]).unwrap());
        match tape.matmul(a, b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn matmul_gradient_example() {
        let mut tape = Tape::new();
        let a = tape.leaf(mat(1, 2, &[1.0, 2.0]).with_grad(true));
        let b = tape.constant(mat(2, 1, &[3.0, 5.0]));
        let p = tape.matmul(a, b).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[3.0, 5.0]);
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(mat(3, 2, &[0.0, 0.0, 1000.0, 1000.0, 0.0, 3f64.ln()]));
        let s = tape.softmax_rows(x);
        let v = tape.value(s).data();
        assert_eq!(&v[..4], &[0.5, 0.5, 0.5, 0.5]);
        assert!((v[4] - 0.25).abs() < 1e-15);
        assert!((v[5] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::new(vec![3], vec![0.3, -1.0, 2.0])
                .unwrap()
                .with_grad(true),
        );
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1], vec![0.0]).unwrap().with_grad(true));
        let y = tape.sin(x);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_repeat() {
        let mut tape = Tape::new();
        let x = tape.leaf(mat(1, 2, &[1.0, 2.0]).with_grad(true));
        let y = tape.sin(x);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::State(_))));
        tape.reset();
        tape.backward(s).unwrap();
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(mat(1, 2, &[1.0, 2.0]).with_grad(true));
        let unused = tape.leaf(mat(1, 3, &[1.0, 2.0, 3.0]).with_grad(true));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(unused).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn causal_mask_blocks_future() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![3, 3]).unwrap());
        let m = tape.causal_mask(x).unwrap();
        let s = tape.softmax_rows(m);
        let v = tape.value(s);
        for i in 0..3 {
            for j in 0..3 {
                let want = if j <= i { 1.0 / (i as f64 + 1.0) } else { 0.0 };
                assert!((v.get(i, j) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn block_matmul_matches_per_block_products() {
        let mut tape = Tape::new();
        let a = tape
            .constant(Tensor::matrix(4, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap());
        let b = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        // blocks: a0 = rows 0..2 against b0 = row 0; a1 = rows 2..4 against b1 = row 1
        let s = tape.block_matmul_nt(a, b, 2).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0, 3.0, 6.0, 8.0]);
        let w = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let v = tape.constant(Tensor::matrix(4, 1, vec![1.0, 1.0, 10.0, 100.0]).unwrap());
        let o = tape.block_matmul(w, v, 2).unwrap();
        assert_eq!(tape.value(o).data(), &[3.0, 430.0]);
        assert!(tape.block_matmul_nt(a, b, 3).is_err());
    }

    /// Central-difference oracle: rebuilds the graph for every perturbation.
    fn numeric_grad(
        inputs: &[Tensor],
        which: usize,
        f: &dyn Fn(&mut Tape, &[Var]) -> Var,
    ) -> Vec<f64> {
        let h = 1e-5;
        let mut out = Vec::new();
        for k in 0..inputs[which].len() {
            let eval = |delta: f64| {
                let mut tape = Tape::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, t)| {
                        let mut t = t.clone();
                        if i == which {
                            t.data_mut()[k] += delta;
                        }
                        tape.constant(t)
                    })
                    .collect();
                let y = f(&mut tape, &vars);
                tape.value(y).data()[0]
            };
            out.push((eval(h) - eval(-h)) / (2.0 * h));
        }
        out
    }

    fn check_grads(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> Result<(), String> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| tape.leaf(t.clone().with_grad(true)))
            .collect();
        let y = f(&mut tape, &vars);
        tape.backward(y).unwrap();
        for (i, v) in vars.iter().enumerate() {
            let analytic = tape.grad(*v).unwrap();
            let numeric = numeric_grad(inputs, i, f);
            for (a, n) in analytic.iter().zip(&numeric) {
                let tol = (1e-4 * a.abs().max(n.abs())).max(1e-7);
                if (a - n).abs() > tol {
                    return Err(format!("input {i}: analytic {a} vs numeric {n}"));
                }
            }
        }
        Ok(())
    }

    fn arb_matrix(m: usize, n: usize) -> impl Strategy<Value = Tensor> {
        prop::collection::vec(-2.0f64..2.0, m * n)
            .prop_map(move |v| Tensor::matrix(m, n, v).unwrap())
    }

    fn dims() -> impl Strategy<Value = (usize, usize, usize)> {
        (1usize..=8, 1usize..=8, 1usize..=8)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn matmul_grad_matches_fd(ins in dims().prop_flat_map(|(m, k, n)| (arb_matrix(m, k), arb_matrix(k, n), arb_matrix(m, n)))) {
            let ins = vec![ins.0, ins.1, ins.2];
            // weighted sum so every output entry has a distinct adjoint
            let f = |t: &mut Tape, v: &[Var]| {
                let p = t.matmul(v[0], v[1]).unwrap();
                let q = t.mul(p, v[2]).unwrap();
                t.sum(q)
            };
            prop_assert!(check_grads(&ins, &f).is_ok(), "{:?}", check_grads(&ins, &f));
        }

        #[test]
        fn elementwise_grads_match_fd(a in arb_matrix(3, 4), b in arb_matrix(3, 4), w in arb_matrix(3, 4)) {
            let ins = vec![a, b, w];
            let f = |t: &mut Tape, v: &[Var]| {
                let s = t.sin(v[0]);
                let c = t.cos(v[1]);
                let p = t.mul(s, c).unwrap();
                let d = t.sub(p, v[1]).unwrap();
                let e = t.add(d, v[0]).unwrap();
                let sp = t.softplus(e);
                let ex = t.exp(v[1]);
                let l = t.log(ex);
                let q = t.mul(sp, v[2]).unwrap();
                let q = t.add(q, l).unwrap();
                let q = t.scale(q, 0.7);
                t.mean(q)
            };
            prop_assert!(check_grads(&ins, &f).is_ok(), "{:?}", check_grads(&ins, &f));
        }

        #[test]
        fn relu_grad_matches_fd(a in arb_matrix(4, 5), w in arb_matrix(4, 5)) {
            // keep away from the kink where central differences are meaningless
            let mut a = a;
            for x in a.data_mut() {
                if x.abs() < 1e-3 { *x += 0.01; }
            }
            let ins = vec![a, w];
            let f = |t: &mut Tape, v: &[Var]| {
                let r = t.relu(v[0]);
                let q = t.mul(r, v[1]).unwrap();
                t.sum(q)
            };
            prop_assert!(check_grads(&ins, &f).is_ok());
        }

        #[test]
        fn softmax_family_grads_match_fd((m, n, _k) in dims(), a in arb_matrix(8, 8), w in arb_matrix(8, 8)) {
            let a = Tensor::matrix(m, n, a.data()[..m * n].to_vec()).unwrap();
            let w = Tensor::matrix(m, n, w.data()[..m * n].to_vec()).unwrap();
            let ins = vec![a, w];
            let f = |t: &mut Tape, v: &[Var]| {
                let s = t.softmax_rows(v[0]);
                let ls = t.log_softmax_rows(v[0]);
                let q = t.mul(s, v[1]).unwrap();
                let r = t.add(q, ls).unwrap();
                t.sum(r)
            };
            prop_assert!(check_grads(&ins, &f).is_ok(), "{:?}", check_grads(&ins, &f));
        }

        #[test]
        fn softmax_rows_are_distributions(a in arb_matrix(6, 7)) {
            let mut tape = Tape::new();
            let x = tape.constant(a);
            let s = tape.softmax_rows(x);
            let v = tape.value(s);
            for i in 0..6 {
                let row = v.row_slice(i);
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                prop_assert!(row.iter().all(|&p| p > 0.0 && p <= 1.0));
            }
        }

        #[test]
        fn shape_ops_grads_match_fd((m, n, _k) in dims(), a in arb_matrix(8, 8), w in arb_matrix(8, 16)) {
            let a = Tensor::matrix(m, n, a.data()[..m * n].to_vec()).unwrap();
            let r = Tensor::row(w.data()[..n].to_vec()).unwrap();
            let ins = vec![a, r];
            let f = move |t: &mut Tape, v: &[Var]| {
                let x = t.add_row(v[0], v[1]).unwrap();
                let x = t.mul_row(x, v[1]).unwrap();
                let tr = t.transpose(x);
                let back = t.transpose(tr);
                let c = t.concat_cols(&[x, back]).unwrap();
                let rows = t.concat_rows(&[c, c]).unwrap();
                let sl = t.slice_rows(rows, m / 2, m / 2 + m).unwrap();
                let sc = t.slice_cols(sl, 0, n + 1).unwrap();
                let gr = t.gather_rows(sc, &[0, m - 1, 0]).unwrap();
                let gc = t.gather_cols(gr, &[0, 0, 1]).unwrap();
                let pick = t.pick_per_row(gc, &[2, 1, 0]).unwrap();
                let rs = t.sum_cols(gr);
                let rs = t.reshape(rs, vec![1, 3]).unwrap();
                let rs = t.transpose(rs);
                let sq = t.mul(pick, rs).unwrap();
                let sq = t.sin(sq);
                t.sum(sq)
            };
            prop_assert!(check_grads(&ins, &f).is_ok(), "{:?}", check_grads(&ins, &f));
        }

        #[test]
        fn block_matmul_grads_match_fd(b in 1usize..=3, ra in 1usize..=3, rb in 1usize..=3, h in 1usize..=3, seed in arb_matrix(9, 9)) {
            let take = |n: usize, off: usize| seed.data().iter().cycle().skip(off).take(n).cloned().collect::<Vec<f64>>();
            let q = Tensor::matrix(b * ra, h, take(b * ra * h, 0)).unwrap();
            let k = Tensor::matrix(b * rb, h, take(b * rb * h, 7)).unwrap();
            let v = Tensor::matrix(b * rb, h, take(b * rb * h, 13)).unwrap();
            let w = Tensor::matrix(b * ra, h, take(b * ra * h, 29)).unwrap();
            let ins = vec![q, k, v, w];
            let f = move |t: &mut Tape, x: &[Var]| {
                let s = t.block_matmul_nt(x[0], x[1], b).unwrap();
                let p = t.softmax_rows(s);
                let o = t.block_matmul(p, x[2], b).unwrap();
                let o = t.mul(o, x[3]).unwrap();
                t.sum(o)
            };
            prop_assert!(check_grads(&ins, &f).is_ok(), "{:?}", check_grads(&ins, &f));
        }

        #[test]
        fn masked_softmax_grads_match_fd(a in arb_matrix(5, 5), w in arb_matrix(5, 5)) {
            let ins = vec![a, w];
            let f = |t: &mut Tape, v: &[Var]| {
                let last = t.slice_rows(v[0], 2, 5).unwrap();
                let m = t.causal_mask(last).unwrap();
                let s = t.softmax_rows(m);
                let ww = t.slice_rows(v[1], 0, 3).unwrap();
                let q = t.mul(s, ww).unwrap();
                t.sum(q)
            };
            prop_assert!(check_grads(&ins, &f).is_ok());
        }
    }

    #[test]
    fn replay_after_reset_is_bitwise_identical() {
        let mut tape = Tape::new();
        let a = tape.leaf(mat(2, 3, &[0.1, -0.4, 0.9, 1.3, 0.2, -0.7]).with_grad(true));
        let b = tape.leaf(mat(3, 2, &[0.5, 0.1, -0.3, 0.8, 0.2, 0.6]).with_grad(true));
        let p = tape.matmul(a, b).unwrap();
        let s = tape.softmax_rows(p);
        let l = tape.log(s);
        let loss = tape.mean(l);
        tape.backward(loss).unwrap();
        let first = (
            tape.grad(a).unwrap().to_vec(),
            tape.grad(b).unwrap().to_vec(),
        );
        tape.reset();
        tape.backward(loss).unwrap();
        let second = (
            tape.grad(a).unwrap().to_vec(),
            tape.grad(b).unwrap().to_vec(),
        );
        assert_eq!(
            first.0.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            second.0.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(
            first.1.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            second.1.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }
}
