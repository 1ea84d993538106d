//! Property tests for the spec-level invariants that hold over whole input
//! families rather than single examples.

use proptest::prelude::*;

use smudge_core::io;
use smudge_core::schedule::NoiseSchedule;
use smudge_core::tape::Tape;
use smudge_core::tensor::Tensor;

fn finite_vec(len: usize, mag: f64) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-mag..mag, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // Softmax rows are nonnegative and sum to 1 within 1e-12 for inputs with
    // magnitude up to 1e3.
    #[test]
    fn softmax_rows_sum_to_one(data in finite_vec(12, 1e3)) {
        let x = Tensor::new(vec![3, 4], data).unwrap();
        let s = x.softmax_rows().unwrap();
        for r in 0..3 {
            let sum: f64 = (0..4).map(|c| s.at2(r, c)).sum();
            prop_assert!((sum - 1.0).abs() < 1e-12, "row {r} sums to {sum}");
            for c in 0..4 {
                prop_assert!(s.at2(r, c) >= 0.0);
            }
        }
    }

    // Operations are deterministic: identical inputs give bit-identical
    // outputs.
    #[test]
    fn operations_deterministic(a in finite_vec(12, 10.0), b in finite_vec(12, 10.0)) {
        let x = Tensor::new(vec![3, 4], a).unwrap();
        let y = Tensor::new(vec![4, 3], b).unwrap();
        let p1 = x.matmul(&y).unwrap();
        let p2 = x.matmul(&y).unwrap();
        prop_assert_eq!(p1.data(), p2.data());
        let s1 = x.softmax_rows().unwrap();
        let s2 = x.softmax_rows().unwrap();
        for (u, v) in s1.data().iter().zip(s2.data()) {
            prop_assert_eq!(u.to_bits(), v.to_bits());
        }
    }

    // Forward diffusion followed by exact denoising with the true noise
    // recovers the clean signal to 1e-12.
    #[test]
    fn q_sample_roundtrip(x0v in finite_vec(8, 5.0), epsv in finite_vec(8, 5.0), t in 1usize..=1000) {
        let sched = NoiseSchedule::build(1000, 1e-4, 2e-2, 50).unwrap();
        let x0 = Tensor::new(vec![8], x0v).unwrap();
        let eps = Tensor::new(vec![8], epsv).unwrap();
        let z = sched.q_sample(&x0, t, &eps).unwrap();
        let abar = sched.alpha_bar(t);
        let recovered = z
            .zip_map(&eps, "test", |zi, ei| (zi - (1.0 - abar).sqrt() * ei) / abar.sqrt())
            .unwrap();
        for (r, x) in recovered.data().iter().zip(x0.data()) {
            prop_assert!((r - x).abs() < 1e-12);
        }
    }

    // The deterministic step and its algebraic inverse compose to the
    // identity on any inference pair for any shared noise prediction.
    #[test]
    fn ddim_invert_identity(zv in finite_vec(8, 5.0), ev in finite_vec(8, 5.0), idx in 0usize..50) {
        let sched = NoiseSchedule::build(1000, 1e-4, 2e-2, 50).unwrap();
        let (t, p) = sched.infer_pairs()[idx];
        let z = Tensor::new(vec![8], zv).unwrap();
        let eps = Tensor::new(vec![8], ev).unwrap();
        let stepped = smudge_core::sampler::ddim_step(&sched, &z, &eps, t, p, 0.0, None).unwrap();
        let back = smudge_core::sampler::ddim_invert_step(&sched, &stepped, &eps, t, p).unwrap();
        for (a, b) in back.data().iter().zip(z.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    // Reverse-mode gradients of a random composite agree with central finite
    // differences.
    #[test]
    fn tape_gradient_matches_finite_differences(xv in finite_vec(6, 1.0), wv in finite_vec(9, 1.0)) {
        let x0 = Tensor::new(vec![2, 3], xv).unwrap();
        let w = Tensor::new(vec![3, 3], wv).unwrap();
        let f = |x: &Tensor| -> f64 {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let wv = tape.leaf(w.clone());
            let h = tape.matmul(xv, wv).unwrap();
            let h = tape.tanh(h).unwrap();
            let s = tape.softmax_rows(h).unwrap();
            let m = tape.mean(s).unwrap();
            let q = tape.mul(m, m).unwrap();
            let top = tape.slice_rows(s, 0, 1).unwrap();
            let bot = tape.slice_rows(s, 1, 1).unwrap();
            let c = tape.cosine_sim(top, bot).unwrap();
            let total = tape.add(q, c).unwrap();
            tape.value(total).item().unwrap()
        };
        let mut tape = Tape::new();
        let xvar = tape.leaf(x0.clone());
        let wvar = tape.leaf(w.clone());
        let h = tape.matmul(xvar, wvar).unwrap();
        let h = tape.tanh(h).unwrap();
        let s = tape.softmax_rows(h).unwrap();
        let m = tape.mean(s).unwrap();
        let q = tape.mul(m, m).unwrap();
        let top = tape.slice_rows(s, 0, 1).unwrap();
        let bot = tape.slice_rows(s, 1, 1).unwrap();
        let c = tape.cosine_sim(top, bot).unwrap();
        let total = tape.add(q, c).unwrap();
        let g = tape.grad(total, xvar).unwrap();
        let fd = smudge_core::oracle::finite_diff_grad(&x0, 1e-5, f);
        let err = smudge_core::oracle::rel_err(&g, &fd);
        prop_assert!(err < 1e-4, "rel err {err}");
    }

    // TNSR encoding round-trips bit-exactly.
    #[test]
    fn tnsr_roundtrip(data in finite_vec(12, 1e6), rows in 1usize..4) {
        let cols = 12 / rows;
        let t = Tensor::new(vec![rows, cols], data[..rows * cols].to_vec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tnsr");
        io::write_tensor(&path, &t).unwrap();
        let back = io::read_tensor(&path).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    // Guidance energies stay in [0, 2] and are invariant to uniform positive
    // scaling of both compared sets.
    #[test]
    fn energy_bounds_and_scale_invariance(
        zv in finite_vec(64, 3.0),
        gv in finite_vec(64, 3.0),
        scale_a in 0.1f64..10.0,
        scale_b in 0.1f64..10.0,
    ) {
        use smudge_core::guidance::{energy_edit, EditSpec, EditTask};
        use smudge_core::sampler::{BankEntry, MemoryBank};

        let z = Tensor::new(vec![8, 8], zv).unwrap();
        let g = Tensor::new(vec![8, 8], gv).unwrap();
        let mut bank = MemoryBank::new(vec![8, 8]);
        bank.insert(10, BankEntry {
            z_gud: g.clone(),
            z_ref: None,
            kv_gud: Vec::new(),
            kv_ref: Vec::new(),
        });
        let mut mask = Tensor::zeros(&[8, 8]);
        mask.data_mut()[5 * 8 + 5] = 1.0;
        let spec = EditSpec {
            task: EditTask::Move,
            mask,
            region_map: vec![((2, 2), (5, 5))],
            reference_id: None,
        };
        let e = energy_edit(&z, &bank, &spec, 10).unwrap();
        prop_assert!((0.0..=2.0 + 1e-9).contains(&e), "energy {e}");

        let mut bank2 = MemoryBank::new(vec![8, 8]);
        bank2.insert(10, BankEntry {
            z_gud: g.scale(scale_b),
            z_ref: None,
            kv_gud: Vec::new(),
            kv_ref: Vec::new(),
        });
        let e2 = energy_edit(&z.scale(scale_a), &bank2, &spec, 10).unwrap();
        prop_assert!((e - e2).abs() < 1e-6, "{e} vs {e2}");
    }
}
