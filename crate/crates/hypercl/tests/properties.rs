//! Randomized invariant checks: gradients against finite differences across
//! the whole op vocabulary, generator locality/dependency structure, and
//! algebraic identities of the regularizers and metrics.

use proptest::prelude::*;

use hypercl::gradcheck::finite_difference_check;
use hypercl::hypernet::{generate_flat_plain, GenOpts, HypernetState};
use hypercl::regularize::{iwr_regularizer, snapshot_regularizer, FisherDiag};
use hypercl::target::predictive_entropy;
use hypercl::{build_layout, HyperDims, ModelKind, Scenario, Tape, Tensor};

const GRAD_TOL: f64 = 1e-5;

fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-2.0..2.0f64, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_chain_gradients_match_finite_differences(
        a in finite_vec(6), b in finite_vec(8)
    ) {
        // loss(a) = sum(relu(A . B)) with A 2x3, B 3x4 wait: 3x4 needs 12.
        let f = |x: &[f64]| {
            let mut tape = Tape::new();
            let av = tape.constant(Tensor::matrix(2, 3, x.to_vec()).unwrap());
            let bv = tape.constant(Tensor::matrix(3, 2, b[..6].to_vec()).unwrap());
            let c = tape.matmul(av, bv).unwrap();
            let r = tape.relu(c);
            let s = tape.sum(r);
            tape.value(s).item()
        };
        let mut tape = Tape::new();
        let av = tape.param("a", &Tensor::matrix(2, 3, a.clone()).unwrap());
        let bv = tape.constant(Tensor::matrix(3, 2, b[..6].to_vec()).unwrap());
        let c = tape.matmul(av, bv).unwrap();
        let r = tape.relu(c);
        let s = tape.sum(r);
        let grads = tape.backward(s).unwrap();
        // relu kinks can break finite differences; nudge away from zero
        let pre = tape.value(c).data().to_vec();
        prop_assume!(pre.iter().all(|v| v.abs() > 1e-3));
        let err = finite_difference_check(f, &a, grads.param("a").unwrap(), 1e-6).unwrap();
        prop_assert!(err < GRAD_TOL, "max rel err {err}");
    }

    #[test]
    fn elementwise_and_activation_gradients(x in finite_vec(5), y in finite_vec(5)) {
        let f = |v: &[f64]| {
            let mut tape = Tape::new();
            let xv = tape.constant(Tensor::row(v.to_vec()));
            let yv = tape.constant(Tensor::row(y.clone()));
            let h = tape.hadamard(xv, yv).unwrap();
            let sg = tape.sigmoid(h);
            let th = tape.tanh(sg);
            let sq = tape.square(th);
            let s = tape.sum(sq);
            tape.value(s).item()
        };
        let mut tape = Tape::new();
        let xv = tape.param("x", &Tensor::row(x.clone()));
        let yv = tape.constant(Tensor::row(y.clone()));
        let h = tape.hadamard(xv, yv).unwrap();
        let sg = tape.sigmoid(h);
        let th = tape.tanh(sg);
        let sq = tape.square(th);
        let s = tape.sum(sq);
        let grads = tape.backward(s).unwrap();
        let err = finite_difference_check(f, &x, grads.param("x").unwrap(), 1e-6).unwrap();
        prop_assert!(err < GRAD_TOL, "max rel err {err}");
    }

    #[test]
    fn cross_entropy_gradients(logits in finite_vec(6), label in 0usize..3) {
        let labels = vec![label, 2 - label];
        let f = |v: &[f64]| {
            let mut tape = Tape::new();
            let l = tape.constant(Tensor::matrix(2, 3, v.to_vec()).unwrap());
            let loss = tape.softmax_cross_entropy(l, &labels).unwrap();
            tape.value(loss).item()
        };
        let mut tape = Tape::new();
        let l = tape.param("logits", &Tensor::matrix(2, 3, logits.clone()).unwrap());
        let loss = tape.softmax_cross_entropy(l, &labels).unwrap();
        prop_assert!(tape.value(loss).item() >= 0.0);
        let grads = tape.backward(loss).unwrap();
        let err =
            finite_difference_check(f, &logits, grads.param("logits").unwrap(), 1e-6).unwrap();
        prop_assert!(err < GRAD_TOL, "max rel err {err}");
    }

    #[test]
    fn concat_slice_broadcast_gradients(x in finite_vec(4), bias in finite_vec(2)) {
        let f = |v: &[f64]| {
            let mut tape = Tape::new();
            let a = tape.constant(Tensor::row(v[..2].to_vec()));
            let b = tape.constant(Tensor::row(v[2..].to_vec()));
            let cat = tape.concat_row(&[a, b]).unwrap();
            let sl = tape.slice_cols(cat, 1, 2).unwrap();
            let bv = tape.constant(Tensor::row(bias.clone()));
            let sum = tape.add_row_broadcast(sl, bv).unwrap();
            let sq = tape.square(sum);
            let s = tape.sum(sq);
            tape.value(s).item()
        };
        let mut tape = Tape::new();
        let a = tape.param("x", &Tensor::row(x[..2].to_vec()));
        let b = tape.param("y", &Tensor::row(x[2..].to_vec()));
        let cat = tape.concat_row(&[a, b]).unwrap();
        let sl = tape.slice_cols(cat, 1, 2).unwrap();
        let bv = tape.constant(Tensor::row(bias.clone()));
        let sum = tape.add_row_broadcast(sl, bv).unwrap();
        let sq = tape.square(sum);
        let s = tape.sum(sq);
        let grads = tape.backward(s).unwrap();
        let mut analytic = grads.param_or_zeros("x", 2);
        analytic.extend(grads.param_or_zeros("y", 2));
        let err = finite_difference_check(f, &x, &analytic, 1e-6).unwrap();
        prop_assert!(err < GRAD_TOL, "max rel err {err}");
    }

    #[test]
    fn entropy_is_bounded_and_shift_invariant(logits in finite_vec(8), shift in -5.0..5.0f64) {
        let h = predictive_entropy(&logits);
        prop_assert!(h >= 0.0);
        prop_assert!(h <= (logits.len() as f64).ln() + 1e-12);
        let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
        prop_assert!((predictive_entropy(&shifted) - h).abs() < 1e-9);
    }

    #[test]
    fn flatten_unflatten_roundtrip(
        input_dim in 1usize..6,
        hidden in 1usize..6,
        n_classes in 2usize..5,
        chunk in 1usize..9,
        seed_vals in finite_vec(8)
    ) {
        let layout =
            build_layout(input_dim, &[hidden], n_classes, Scenario::Cl2, 1, chunk).unwrap();
        let flat: Vec<f64> = (0..layout.total_params)
            .map(|i| seed_vals[i % seed_vals.len()] + i as f64 * 1e-3)
            .collect();
        let tensors = layout.unflatten(&flat).unwrap();
        prop_assert_eq!(layout.flatten(&tensors).unwrap(), flat);
        prop_assert!(layout.n_chunks * layout.chunk_size >= layout.total_params);
        prop_assert!(layout.n_chunks * layout.chunk_size - layout.total_params < chunk);
    }

    #[test]
    fn hnet_is_local_lstm_is_forward_causal(seed in 0u64..500, which in 0usize..4) {
        let layout = build_layout(2, &[3], 2, Scenario::Cl1, 2, 5).unwrap();
        let dims = HyperDims { d_e: 3, d_c: 3, d_h: 4, chunk_size: 5, lstm_biases: false };
        for kind in [ModelKind::Hnet, ModelKind::LstmNet] {
            let mut hn = HypernetState::new(kind, dims, layout.n_chunks, seed);
            hn.begin_task(0).unwrap();
            let base =
                generate_flat_plain(&hn.params, kind, dims, &layout, 0, &GenOpts::default())
                    .unwrap();
            hn.params
                .get_mut(&format!("emb.chunk.{which}"))
                .unwrap()
                .data_mut()[0] += 0.5;
            let bumped =
                generate_flat_plain(&hn.params, kind, dims, &layout, 0, &GenOpts::default())
                    .unwrap();
            for j in 0..layout.n_chunks {
                let lo = j * layout.chunk_size;
                let hi = layout.total_params.min(lo + layout.chunk_size);
                let changed = base[lo..hi] != bumped[lo..hi];
                if j < which {
                    // nothing upstream of the perturbed chunk may move, ever
                    prop_assert!(!changed, "{kind:?}: chunk {j} changed by bump at {which}");
                }
                if kind.is_feedforward() && j > which {
                    prop_assert!(!changed, "hnet: downstream chunk {j} changed");
                }
            }
        }
    }

    #[test]
    fn regularizer_is_nonnegative_and_uniform_fisher_is_identity(
        seed in 0u64..200, bump in -0.5..0.5f64
    ) {
        let layout = build_layout(2, &[3], 2, Scenario::Cl1, 2, 5).unwrap();
        let dims = HyperDims { d_e: 3, d_c: 3, d_h: 4, chunk_size: 5, lstm_biases: false };
        let mut hn = HypernetState::new(ModelKind::LstmNet, dims, layout.n_chunks, seed);
        hn.begin_task(0).unwrap();
        hn.begin_task(1).unwrap();
        hn.capture_snapshot();
        let snap = hn.snapshot.clone().unwrap();
        hn.params.get_mut("hn.w_out").unwrap().data_mut()[0] += bump;

        let r = snapshot_regularizer(&hn.params, &snap, hn.kind, dims, &layout, 1).unwrap();
        prop_assert!(r >= 0.0);
        let uniform = vec![FisherDiag {
            task: 0,
            values: vec![1.0; layout.total_params],
            scale: 1.0,
        }];
        let ri =
            iwr_regularizer(&hn.params, &snap, hn.kind, dims, &layout, 1, &uniform).unwrap();
        prop_assert!((r - ri).abs() <= 1e-12, "snapshot {r} vs uniform iwr {ri}");
    }

    #[test]
    fn generation_is_deterministic_in_the_seed(seed in 0u64..1000) {
        let layout = build_layout(2, &[3], 2, Scenario::Cl1, 2, 5).unwrap();
        let dims = HyperDims { d_e: 3, d_c: 3, d_h: 4, chunk_size: 5, lstm_biases: false };
        let make = || {
            let mut hn = HypernetState::new(ModelKind::LstmNet, dims, layout.n_chunks, seed);
            hn.begin_task(0).unwrap();
            generate_flat_plain(&hn.params, hn.kind, dims, &layout, 0, &GenOpts::default())
                .unwrap()
        };
        let (a, b) = (make(), make());
        prop_assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
