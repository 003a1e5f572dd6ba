use grounded::gradcheck::finite_diff_check;
use grounded::params::{Binding, ParamStore};
use grounded::rng::Rng;
use grounded::selector::{
    apply_selection, context_token, make_queries, perturb, score, select, soft_probs, ste_weights, vote_mask,
    SelectMode, SelectorParams,
};
use grounded::{Tape, Tensor};

fn store(d: usize, seed: u64) -> (ParamStore, SelectorParams) {
    let mut ps = ParamStore::new();
    let sp = SelectorParams::new(&mut ps, d, &mut Rng::new(seed));
    (ps, sp)
}

fn rms_normalize(row: &[f64]) -> Vec<f64> {
    let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
    let r = 1.0 / (ms + 1e-6).sqrt();
    row.iter().map(|v| v * r).collect()
}

#[test]
fn single_guidance_token_fixes_every_query() {
    let (ps, sp) = store(6, 0);
    let mut rng = Rng::new(1);
    let tape = Tape::new();
    let p = ps.bind(&tape, false);
    let hv = tape.constant(rng.normal_tensor(&[5, 6], 1.0));
    let hq_t = rng.normal_tensor(&[1, 6], 1.0);
    let hq = tape.constant(hq_t.clone());
    let q = make_queries(&hv, &hq, &sp, &p).unwrap().value();
    let expect = rms_normalize(hq_t.data());
    for i in 0..5 {
        for (a, b) in q.row_slice(i).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn queries_are_convex_combinations() {
    // Three guidance tokens in 2-D: barycentric coordinates of every query
    // must be nonnegative and reproduce it exactly.
    let (ps, sp) = store(2, 0);
    for seed in 0..50 {
        let mut rng = Rng::new(seed);
        let tape = Tape::new();
        let p = ps.bind(&tape, false);
        let hv = tape.constant(rng.normal_tensor(&[7, 2], 1.0));
        let hq_t = rng.normal_tensor(&[3, 2], 1.0);
        let verts: Vec<Vec<f64>> = (0..3).map(|i| rms_normalize(hq_t.row_slice(i))).collect();
        let q = make_queries(&hv, &tape.constant(hq_t), &sp, &p).unwrap().value();
        let (a, b, c) = (&verts[0], &verts[1], &verts[2]);
        let det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
        if det.abs() < 1e-3 {
            continue;
        }
        for i in 0..7 {
            let x = q.row_slice(i);
            let l1 = ((x[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (x[1] - a[1])) / det;
            let l2 = ((b[0] - a[0]) * (x[1] - a[1]) - (x[0] - a[0]) * (b[1] - a[1])) / det;
            let l0 = 1.0 - l1 - l2;
            for l in [l0, l1, l2] {
                assert!(l > -1e-9, "seed {seed} row {i}: coordinate {l}");
            }
            let rx = l0 * a[0] + l1 * b[0] + l2 * c[0] - x[0];
            let ry = l0 * a[1] + l1 * b[1] + l2 * c[1] - x[1];
            assert!(rx.abs() < 1e-9 && ry.abs() < 1e-9);
        }
    }
}

#[test]
fn query_and_score_gradients() {
    for seed in 0..20 {
        let (ps, sp) = store(4, seed);
        let mut rng = Rng::new(seed + 100);
        let mut inputs = vec![rng.normal_tensor(&[5, 4], 1.0), rng.normal_tensor(&[3, 4], 1.0)];
        // Perturb the unit gains so their gradients are exercised off the init point.
        for p in ps.iter() {
            let noise = rng.normal_tensor(p.value.shape(), 0.1);
            let data = p.value.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
            inputs.push(Tensor::new(p.value.shape(), data).unwrap());
        }
        let r = finite_diff_check(
            |tape, v| {
                let p = Binding::from_vars(v[2..].to_vec());
                let q = make_queries(&v[0], &v[1], &sp, &p)?;
                let s = score(&q, &v[0], &sp, &p)?;
                let w = tape.constant(Rng::new(5).normal_tensor(&[5, 5], 1.0));
                s.mul(&w)?.sum()
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-5, "seed {seed}: {r:?}");
    }
}

#[test]
fn single_token_score_is_scaled_cosine() {
    let (ps, sp) = store(4, 0);
    let tape = Tape::new();
    let p = ps.bind(&tape, false);
    let q_t = Tensor::row(&[1.0, -2.0, 0.5, 3.0]);
    let v_t = Tensor::row(&[0.3, 0.1, -1.0, 2.0]);
    let s = score(&tape.constant(q_t.clone()), &tape.constant(v_t.clone()), &sp, &p).unwrap().value();
    assert_eq!(s.shape(), &[1, 1]);
    let (qn, vn) = (rms_normalize(q_t.data()), rms_normalize(v_t.data()));
    let expect = qn.iter().zip(&vn).map(|(a, b)| a * b).sum::<f64>() / 2.0;
    assert!((s.data()[0] - expect).abs() < 1e-12);
}

#[test]
fn scores_are_bounded_by_sqrt_d() {
    let d = 8;
    let (ps, sp) = store(d, 0);
    for seed in 0..50 {
        let mut rng = Rng::new(seed);
        let tape = Tape::new();
        let p = ps.bind(&tape, false);
        let hv = tape.constant(rng.normal_tensor(&[6, d], 3.0));
        let hq = tape.constant(rng.normal_tensor(&[4, d], 3.0));
        let q = make_queries(&hv, &hq, &sp, &p).unwrap();
        let s = score(&q, &hv, &sp, &p).unwrap().value();
        assert!(s.data().iter().all(|v| v.abs() <= (d as f64).sqrt() + 1e-12));
    }
}

#[test]
fn perturbation_contract() {
    let tape = Tape::new();
    let s_t = Rng::new(0).normal_tensor(&[4, 4], 1.0);
    let s = tape.constant(s_t.clone());
    assert_eq!(perturb(&s, 0.0, &mut Rng::new(1)).unwrap().value(), s_t);
    let a = perturb(&s, 0.5, &mut Rng::new(9)).unwrap().value();
    let b = perturb(&s, 0.5, &mut Rng::new(9)).unwrap().value();
    assert_eq!(a, b);
    assert!(perturb(&s, -1.0, &mut Rng::new(9)).is_err());
}

#[test]
fn tiny_noise_preserves_argmax() {
    let tape = Tape::new();
    let s_t = Rng::new(3).normal_tensor(&[6, 6], 1.0);
    let s = tape.constant(s_t.clone());
    let reference = vote_mask(&s_t);
    for seed in 0..1000 {
        let p = perturb(&s, 1e-6, &mut Rng::new(seed)).unwrap().value();
        assert_eq!(vote_mask(&p), reference, "seed {seed}");
    }
}

#[test]
fn kept_count_is_within_bounds() {
    let mut rng = Rng::new(4);
    for _ in 0..200 {
        let n = 1 + rng.index(30);
        let s = rng.normal_tensor(&[n, n], 1.0);
        let (m, votes) = vote_mask(&s);
        let kept = m.iter().filter(|&&k| k).count();
        assert!((1..=n).contains(&kept));
        assert_eq!(votes.iter().sum::<usize>(), n);
    }
}

#[test]
fn soft_probability_limits() {
    let mut rng = Rng::new(5);
    for _ in 0..20 {
        let n = 2 + rng.index(12);
        let tape = Tape::new();
        let s_t = rng.normal_tensor(&[n, n], 10.0);
        let s = tape.constant(s_t.clone());
        // Scores live in [-√D, √D]; the flat limit is checked on that scale.
        let bounded = tape.constant(rng.uniform_tensor(&[n, n]).map(|u| 2.0 * u - 1.0));
        for alpha in [1e-3, 0.1, 1.0, 7.0] {
            let (_, pbar) = soft_probs(&s, alpha).unwrap();
            assert!((pbar.value().sum() - 1.0).abs() < 1e-9);
        }
        let (_, hot) = soft_probs(&bounded, 1e6).unwrap();
        assert!(hot.value().data().iter().all(|p| (p - 1.0 / n as f64).abs() < 1e-6));
        let (_, cold) = soft_probs(&s, 1e-4).unwrap();
        let (_, votes) = vote_mask(&s_t);
        for (p, v) in cold.value().data().iter().zip(&votes) {
            assert!((p - *v as f64 / n as f64).abs() < 1e-3);
        }
    }
}

#[test]
fn ste_gradient_equals_soft_gradient() {
    // Two graphs over the same scores: sum(w) and sum(p̄). Their gradients
    // with respect to the scores must agree exactly.
    for seed in 0..20 {
        let mut rng = Rng::new(seed);
        let s_t = rng.normal_tensor(&[6, 6], 1.0);
        let weight = rng.normal_tensor(&[1, 6], 1.0);

        let via_w = {
            let tape = Tape::new();
            let s = tape.leaf(s_t.clone());
            let (_, pbar) = soft_probs(&s, 0.5).unwrap();
            let (mask, _) = vote_mask(&s_t);
            let w = ste_weights(&mask, &pbar).unwrap();
            let hard: Vec<f64> = mask.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
            assert_eq!(w.value().data(), hard.as_slice());
            tape.backward(w.mul(&tape.constant(weight.clone())).unwrap().sum().unwrap()).unwrap();
            tape.grad(s).unwrap()
        };
        let via_p = {
            let tape = Tape::new();
            let s = tape.leaf(s_t.clone());
            let (_, pbar) = soft_probs(&s, 0.5).unwrap();
            tape.backward(pbar.mul(&tape.constant(weight.clone())).unwrap().sum().unwrap()).unwrap();
            tape.grad(s).unwrap()
        };
        assert_eq!(via_w, via_p);
    }
}

#[test]
fn hard_path_carries_no_gradient() {
    let tape = Tape::new();
    let p = tape.leaf(Tensor::row(&[0.2, 0.5, 0.3]));
    let w = ste_weights(&[false, true, false], &p).unwrap();
    let sg_only = w.sub(&p).unwrap();
    tape.backward(sg_only.sum().unwrap()).unwrap();
    // w - p̄ leaves only m - sg(p̄), which must contribute nothing.
    assert_eq!(tape.grad(p).unwrap().data(), &[0.0; 3]);
}

#[test]
fn full_mask_is_identity_selection() {
    let tape = Tape::new();
    let hv_t = Rng::new(1).normal_tensor(&[4, 3], 1.0);
    let hv = tape.constant(hv_t.clone());
    let ones = tape.constant(Tensor::full(&[1, 4], 1.0));
    let (c, kept) = apply_selection(&hv, &ones, &[true; 4]).unwrap();
    assert_eq!(c.value(), hv_t);
    assert_eq!(kept, vec![0, 1, 2, 3]);
}

fn build<'t>(
    ps: &ParamStore,
    sp: &SelectorParams,
    hq_t: &Tensor,
    seed: u64,
    tape: &'t Tape,
    hv: grounded::Var<'t>,
) -> grounded::Result<(grounded::Var<'t>, Vec<bool>)> {
    let p = ps.bind(tape, false);
    let hq = tape.constant(hq_t.clone());
    let sel = select(&hv, &hq, sp, &p, SelectMode::Train { alpha: 0.7 }, &mut Rng::new(seed))?;
    let w = tape.constant(Rng::new(3).normal_tensor(&[sel.compact.rows(), 4], 1.0));
    Ok((sel.compact.mul(&w)?.sum()?, sel.mask))
}

#[test]
fn gather_and_scale_gradient_matches_differences() {
    // Fixed mask, soft weights as a free input: both the gather and the
    // scaling must differentiate correctly.
    let mask = [true, false, true, true, false];
    for seed in 0..20 {
        let mut rng = Rng::new(seed);
        let inputs = [rng.normal_tensor(&[5, 4], 1.0), rng.uniform_tensor(&[1, 5])];
        let r = finite_diff_check(
            |tape, v| {
                let (c, _) = apply_selection(&v[0], &v[1], &mask)?;
                let w = tape.constant(Rng::new(3).normal_tensor(&[3, 4], 1.0));
                c.mul(&w)?.sum()
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-5, "seed {seed}: {r:?}");
    }
}

#[test]
fn unkept_rows_learn_through_soft_path() {
    let (ps, sp) = store(4, 7);
    let mut checked_unkept = 0;
    for seed in 0..10 {
        let hv_t = Rng::new(seed + 40).normal_tensor(&[5, 4], 1.0);
        let hq_t = Rng::new(seed + 80).normal_tensor(&[2, 4], 1.0);
        let tape = Tape::new();
        let hv = tape.leaf(hv_t.clone());
        let (loss, mask) = build(&ps, &sp, &hq_t, seed, &tape, hv).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(hv).unwrap();
        for (j, &k) in mask.iter().enumerate() {
            if !k {
                assert!(g.row_slice(j).iter().any(|v| v.abs() > 0.0), "unkept row {j} lost its soft path");
                checked_unkept += 1;
            }
        }
    }
    assert!(checked_unkept > 0);
}

#[test]
fn context_token_examples() {
    let tape = Tape::new();
    let r = [0.5, -1.0, 2.0];
    let hv = tape.constant(Tensor::from_rows(&[&r, &r, &r, &r]));
    let eye = tape.constant(Tensor::identity(3));
    assert_eq!(context_token(&hv, &eye).unwrap().value().data(), &r);

    let mut rng = Rng::new(2);
    let hv_t = rng.normal_tensor(&[5, 3], 1.0);
    let wc_t = rng.normal_tensor(&[3, 3], 1.0);
    let wc = tape.constant(wc_t.clone());
    let one = context_token(&tape.constant(hv_t.clone()), &wc).unwrap().value();
    let two = context_token(&tape.constant(hv_t.map(|v| 2.0 * v)), &wc).unwrap().value();
    assert!(one.map(|v| 2.0 * v).max_abs_diff(&two) < 1e-14);

    // d sum(g ⊙ ctx)/dH_v = (1/N_v)·gᵀ·W_c on every row.
    let g = [1.0, -2.0, 0.5];
    let hv = tape.leaf(hv_t);
    let ctx = context_token(&hv, &wc).unwrap();
    tape.backward(ctx.mul(&tape.constant(Tensor::row(&g))).unwrap().sum().unwrap()).unwrap();
    let grad = tape.grad(hv).unwrap();
    let mut expect = [0.0; 3];
    for (i, gi) in g.iter().enumerate() {
        for (j, e) in expect.iter_mut().enumerate() {
            *e += gi * wc_t.get(i, j) / 5.0;
        }
    }
    for row in 0..5 {
        for (a, b) in grad.row_slice(row).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}

#[test]
fn zero_noise_selection_ignores_the_seed() {
    let (ps, sp) = store(8, 0);
    let mut rng = Rng::new(11);
    let hv_t = rng.normal_tensor(&[20, 8], 1.0);
    let hq_t = rng.normal_tensor(&[4, 8], 1.0);
    let run = |mode, seed| {
        let tape = Tape::new();
        let p = ps.bind(&tape, false);
        let s = select(&tape.constant(hv_t.clone()), &tape.constant(hq_t.clone()), &sp, &p, mode, &mut Rng::new(seed))
            .unwrap();
        (s.mask, s.weights.value())
    };
    assert_eq!(run(SelectMode::Train { alpha: 0.0 }, 1), run(SelectMode::Train { alpha: 0.0 }, 2));
    assert_eq!(run(SelectMode::Infer, 1).0, run(SelectMode::Train { alpha: 0.0 }, 5).0);
    assert_eq!(run(SelectMode::Train { alpha: 0.3 }, 8), run(SelectMode::Train { alpha: 0.3 }, 8));
}

#[test]
fn inference_compact_rows_are_bitwise_originals() {
    let (ps, sp) = store(8, 0);
    let mut rng = Rng::new(12);
    let hv_t = rng.normal_tensor(&[30, 8], 1.0);
    let tape = Tape::new();
    let p = ps.bind(&tape, false);
    let hq = tape.constant(rng.normal_tensor(&[3, 8], 1.0));
    for mode in [SelectMode::Infer, SelectMode::Train { alpha: 0.2 }] {
        let s = select(&tape.constant(hv_t.clone()), &hq, &sp, &p, mode, &mut Rng::new(0)).unwrap();
        let c = s.compact.value();
        for (r, &j) in s.kept.iter().enumerate() {
            assert_eq!(c.row_slice(r), hv_t.row_slice(j));
        }
        assert!((s.probs.value().sum() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn random_scores_keep_about_sixty_three_percent() {
    let mut rng = Rng::new(21);
    let trials = 200;
    let mut total = 0.0;
    for _ in 0..trials {
        let (m, _) = vote_mask(&rng.normal_tensor(&[100, 100], 1.0));
        total += m.iter().filter(|&&k| k).count() as f64 / 100.0;
    }
    let mean = total / trials as f64;
    let expect = 1.0 - (1.0f64 - 0.01).powi(100);
    assert!((mean - expect).abs() < 0.03, "{mean} vs {expect}");
}

struct PinCase<'a> {
    ps: &'a ParamStore,
    sp: &'a SelectorParams,
    hq: Tensor,
    probe: Tensor,
    seed: u64,
}

impl PinCase<'_> {
    fn loss<'t>(&self, tape: &'t Tape, hv: grounded::Var<'t>, mode: SelectMode) -> grounded::Result<(grounded::Var<'t>, Vec<bool>, Tensor)> {
        let p = self.ps.bind(tape, false);
        let sel = select(&hv, &tape.constant(self.hq.clone()), self.sp, &p, mode, &mut Rng::new(self.seed))?;
        let w = tape.constant(self.probe.gather_rows(&sel.kept));
        Ok((sel.compact.mul(&w)?.sum()?, sel.mask, sel.probs.value()))
    }
}

#[test]
fn pinned_selection_exposes_ste_gradient_to_differences() {
    let (ps, sp) = store(4, 7);
    for seed in 0..10 {
        let hv_t = Rng::new(seed + 40).normal_tensor(&[5, 4], 1.0);
        let case = PinCase {
            ps: &ps,
            sp: &sp,
            hq: Rng::new(seed + 80).normal_tensor(&[2, 4], 1.0),
            probe: Rng::new(3).normal_tensor(&[5, 4], 1.0),
            seed,
        };
        let tape = Tape::new();
        let hv = tape.leaf(hv_t.clone());
        let (train, mask, anchor) = case.loss(&tape, hv, SelectMode::Train { alpha: 0.7 }).unwrap();
        tape.backward(train).unwrap();
        let g_train = tape.grad(hv).unwrap();

        let pinned = SelectMode::Pinned { alpha: 0.7, mask, anchor };
        let tape = Tape::new();
        let hv = tape.leaf(hv_t.clone());
        let (at_pin, ..) = case.loss(&tape, hv, pinned.clone()).unwrap();
        assert_eq!(at_pin.item(), train.item());
        tape.backward(at_pin).unwrap();
        assert_eq!(tape.grad(hv).unwrap(), g_train);

        let r = finite_diff_check(|tape, v| Ok(case.loss(tape, v[0], pinned.clone())?.0), &[hv_t], 1e-5).unwrap();
        assert!(r.max_rel_err < 1e-5, "seed {seed}: {r:?}");
    }
}
