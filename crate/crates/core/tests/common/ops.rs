//! Catalogue of differentiable tape ops, each built on a random instance and
//! compared with central differences.

use grounded::autodiff::embedding_lookup;
use grounded::gradcheck::{finite_diff_check, GradCheck};
use grounded::rng::Rng;
use grounded::{Result, Tape, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-5;

/// Contracts `out` with a fixed random weight so every output element
/// carries a distinct cotangent.
fn project<'t>(tape: &'t Tape, out: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let w = Rng::new(seed ^ 0xabcd).normal_tensor(&[out.rows(), out.cols()], 1.0);
    out.mul(&tape.constant(w))?.sum()
}

fn dims(rng: &mut Rng) -> (usize, usize, usize) {
    (1 + rng.index(4), 1 + rng.index(5), 1 + rng.index(4))
}

fn run<F>(inputs: Vec<Tensor>, f: F) -> GradCheck
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    finite_diff_check(f, &inputs, STEP).expect("scalar output")
}

pub fn matmul(seed: u64) -> GradCheck {
    let mut rng = Rng::new(seed);
    let (m, k, n) = dims(&mut rng);
    let a = rng.normal_tensor(&[m, k], 1.0);
    let b = rng.normal_tensor(&[k, n], 1.0);
    run(vec![a, b], |t, v| project(t, v[0].matmul(&v[1])?, 1))
}

pub fn matmul_t(seed: u64) -> GradCheck {
    let mut rng = Rng::new(seed);
    let (m, k, n) = dims(&mut rng);
    let a = rng.normal_tensor(&[m, k], 1.0);
    let b = rng.normal_tensor(&[n, k], 1.0);
    run(vec![a, b], |t, v| project(t, v[0].matmul_t(&v[1])?, 2))
}

pub fn transpose(seed: u64) -> GradCheck {
    let mut rng = Rng::new(seed);
    let (m, n, _) = dims(&mut rng);
    run(vec![rng.normal_tensor(&[m, n], 1.0)], |t, v| project(t, v[0].transpose()?, 3))
}

pub fn add_sub_mul(seed: u64) -> GradCheck {
    let mut rng = Rng::new(seed);
    let (m, n, _) = dims(&mut rng);
    let a = rng.normal_tensor(&[m, n], 1.0);
    let b = rng.normal_tensor(&[m, n], 1.0);
    let c = rng.normal_tensor(&[m, n], 1.0);
    run(vec![a, b, c], |t, v| {
        project(t, v[0].add(&v[1])?.mul(&v[2])?.sub(&v[1].mul(&v[1])?)?, 4)
    })
}

pub fn scale(seed: u64) -> GradCheck {
    let mut rng = Rng::new(seed);
    let (m, n, _) = dims(&mut rng);
    run(vec![rng.normal_tensor(&[m, n], 1.0)], |t, v| project(t, v[0].scale(-1.7)?, 5))
}

pub fn row_broadcasts(seed: u64) -> GradCheck {
    let mut rng = Rng::new(seed);
    let (m, n, _) = dims(&mut rng);
    let x = rng.normal_tensor(&[m, n], 1.0);
    let r = rng.normal_tensor(&[1, n], 1.0);
    let s = rng.normal_tensor(&[1, n], 1.0);
    run(vec![x, r, s], |t, v| project(t, v[0].add_row(&v[1])?.mul_row(&v[2])?, 6))
}

pub fn scale_rows(seed: u64) -> GradCheck {
    let mut rng = Rng::new(seed);
    let (m, n, _) = dims(&mut rng);
    let x = rng.normal_tensor(&[m, n], 1.0);
    let s = rng.normal_tensor(&[m, 1], 1.0);
    run(vec![x, s], |t, v| project(t, v[0].scale_rows(&v[1])?, 7))
}

pub fn softmax_rows(seed: u64) -> GradCheck {
    let mut rng = Rng::new(seed);
    let (m, n, _) = dims(&mut rng);
    run(vec![rng.normal_tensor(&[m, n], 2.0)], |t, v| project(t, v[0].softmax_rows()?, 8))
}

pub fn softmax_rows_masked(seed: u64) -> GradCheck {
    let mut rng = Rng::new(seed);
    let (m, n, _) = dims(&mut rng);
    let n = n + 1;
    let mut mask: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.6).collect();
    mask[rng.index(n)] = true;
    run(vec![rng.normal_tensor(&[m, n], 2.0)], move |t, v| {
        project(t, v[0].softmax_rows_masked(&mask)?, 9)
    })
}

pub fn rmsnorm(seed: u64) -> GradCheck {
    // One column makes d(out)/dx ~ eps/|x|^3, below the difference noise floor.
    let mut rng = Rng::new(seed);
    let (m, n, _) = dims(&mut rng);
    let n = n + 1;
    let x = rng.normal_tensor(&[m, n], 1.5);
    let g = rng.normal_tensor(&[1, n], 1.0);
    run(vec![x, g], |t, v| project(t, v[0].rmsnorm(&v[1])?, 10))
}

pub fn gelu_silu(seed: u64) -> GradCheck {
    let mut rng = Rng::new(seed);
    let (m, n, _) = dims(&mut rng);
    let a = rng.normal_tensor(&[m, n], 2.0);
    let b = rng.normal_tensor(&[m, n], 2.0);
    run(vec![a, b], |t, v| project(t, v[0].gelu()?.add(&v[1].silu()?)?, 11))
}

pub fn reductions(seed: u64) -> GradCheck {
    let mut rng = Rng::new(seed);
    let (m, n, _) = dims(&mut rng);
    run(vec![rng.normal_tensor(&[m, n], 1.0)], |t, v| {
        let mr = project(t, v[0].mean_rows()?, 12)?;
        let s = v[0].mul(&v[0])?.sum()?;
        let mu = v[0].mean()?;
        mr.add(&s)?.add(&mu.scale(3.0)?)
    })
}

pub fn concat_and_slice(seed: u64) -> GradCheck {
    let mut rng = Rng::new(seed);
    let (m, n, k) = dims(&mut rng);
    let a = rng.normal_tensor(&[m, n], 1.0);
    let b = rng.normal_tensor(&[k, n], 1.0);
    let c = rng.normal_tensor(&[m + k, 2], 1.0);
    run(vec![a, b, c], move |t, v| {
        let rows = t.concat_rows(&[v[0], v[1]])?;
        let wide = t.concat_cols(&[rows, v[2]])?;
        project(t, wide.slice_cols(1, n + 1)?, 13)
    })
}

pub fn gather_and_embedding(seed: u64) -> GradCheck {
    let mut rng = Rng::new(seed);
    let (m, n, _) = dims(&mut rng);
    let m = m + 2;
    let idx: Vec<usize> = (0..5).map(|_| rng.index(m)).collect();
    run(vec![rng.normal_tensor(&[m, n], 1.0)], move |t, v| {
        let g = v[0].gather_rows(&idx)?;
        let e = embedding_lookup(&v[0], &idx[..2])?;
        project(t, g, 14)?.add(&project(t, e, 15)?)
    })
}

pub fn attention_composite(seed: u64) -> GradCheck {
    let mut rng = Rng::new(seed);
    let (m, d, _) = dims(&mut rng);
    let x = rng.normal_tensor(&[m + 1, d + 1], 1.0);
    let wq = rng.normal_tensor(&[d + 1, d + 1], 0.5);
    let g = rng.normal_tensor(&[1, d + 1], 1.0);
    run(vec![x, wq, g], |t, v| {
        let h = v[0].rmsnorm(&v[2])?;
        let q = h.matmul(&v[1])?;
        let a = q.matmul_t(&h)?.scale(0.5)?.softmax_rows()?;
        project(t, a.matmul(&h)?.gelu()?, 16)
    })
}

pub type Case = (&'static str, fn(u64) -> GradCheck);

pub const CASES: &[Case] = &[
    ("matmul", matmul),
    ("matmul_t", matmul_t),
    ("transpose", transpose),
    ("add/sub/mul", add_sub_mul),
    ("scale", scale),
    ("add_row/mul_row", row_broadcasts),
    ("scale_rows", scale_rows),
    ("softmax_rows", softmax_rows),
    ("softmax_rows_masked", softmax_rows_masked),
    ("rmsnorm", rmsnorm),
    ("gelu/silu", gelu_silu),
    ("mean_rows/sum/mean", reductions),
    ("concat/slice", concat_and_slice),
    ("gather_rows/embedding_lookup", gather_and_embedding),
    ("attention composite", attention_composite),
];
