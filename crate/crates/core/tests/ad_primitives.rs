//! Every primitive's reverse rule against central finite differences.

use maukf::linalg::{backward, Eager, Graph, Matrix, Prim, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-6;
const TOL: f64 = 1e-5;
const TRIALS: usize = 100;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| normal(rng))
}

fn spd(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
    let a = randn(rng, n, n);
    a.matmul(&a.transpose()).unwrap().add(&Matrix::identity(n)).unwrap()
}

/// Scalar probe `Σ out ⊙ weights`, evaluated without a tape.
fn probe(prim: &Prim, inputs: &[Matrix], weights: &Matrix) -> f64 {
    let refs: Vec<&Matrix> = inputs.iter().collect();
    let out = Eager.apply(prim.clone(), &refs).unwrap();
    out.hadamard(weights).unwrap().sum()
}

/// `‖analytic − fd‖∞ / max(‖analytic‖∞, ‖fd‖∞, 1e-8)` with norms taken over
/// the full gradient (all inputs stacked).
fn check(prim: Prim, inputs: Vec<Matrix>, rng: &mut ChaCha8Rng) -> f64 {
    let refs: Vec<&Matrix> = inputs.iter().collect();
    let out = Eager.apply(prim.clone(), &refs).unwrap();
    let weights = randn(rng, out.rows(), out.cols());

    let mut tape = Tape::new();
    let ids: Vec<_> = inputs.iter().map(|m| tape.param(m.clone())).collect();
    let y = tape.record(prim.clone(), &ids).unwrap();
    let w = tape.constant(weights.clone());
    let yw = tape.record(Prim::Hadamard, &[y, w]).unwrap();
    let loss = tape.record(Prim::Sum, &[yw]).unwrap();
    let grads = backward(&tape, loss, &ids).unwrap();

    let mut diff = 0.0f64;
    let mut scale = 1e-8f64;
    for (k, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).unwrap();
        let mut fd = Matrix::zeros(inputs[k].rows(), inputs[k].cols());
        for i in 0..inputs[k].len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= STEP;
            fd.data_mut()[i] = (probe(&prim, &plus, &weights) - probe(&prim, &minus, &weights)) / (2.0 * STEP);
        }
        scale = scale.max(analytic.max_abs()).max(fd.max_abs());
        diff = diff.max(analytic.max_abs_diff(&fd));
    }
    diff / scale
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..=6), rng.gen_range(1..=6))
}

fn run(name: &str, mut make: impl FnMut(&mut ChaCha8Rng) -> (Prim, Vec<Matrix>)) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ name.len() as u64 ^ (name.as_bytes()[0] as u64) << 8);
    let mut worst = 0.0f64;
    for _ in 0..TRIALS {
        let (prim, inputs) = make(&mut rng);
        worst = worst.max(check(prim, inputs, &mut rng));
    }
    assert!(worst < TOL, "{name}: max relative error {worst:e}");
}

#[test]
fn elementwise_binary() {
    run("add", |rng| {
        let (r, c) = dims(rng);
        (Prim::Add, vec![randn(rng, r, c), randn(rng, r, c)])
    });
    run("sub", |rng| {
        let (r, c) = dims(rng);
        (Prim::Sub, vec![randn(rng, r, c), randn(rng, r, c)])
    });
    run("hadamard", |rng| {
        let (r, c) = dims(rng);
        (Prim::Hadamard, vec![randn(rng, r, c), randn(rng, r, c)])
    });
    run("atan2", |rng| {
        let (r, c) = dims(rng);
        let y = randn(rng, r, c);
        // keep points away from the origin and the branch cut
        let x = Matrix::from_fn(r, c, |_, _| 0.5 + rng.gen::<f64>() * 2.0);
        (Prim::Atan2, vec![y, x])
    });
}

#[test]
fn scale_matmul_transpose() {
    run("scale", |rng| {
        let (r, c) = dims(rng);
        (Prim::Scale(normal(rng)), vec![randn(rng, r, c)])
    });
    run("matmul", |rng| {
        let (r, k) = dims(rng);
        let c = rng.gen_range(1..=6);
        (Prim::MatMul, vec![randn(rng, r, k), randn(rng, k, c)])
    });
    run("transpose", |rng| {
        let (r, c) = dims(rng);
        (Prim::Transpose, vec![randn(rng, r, c)])
    });
}

#[test]
fn activations() {
    run("tanh", |rng| {
        let (r, c) = dims(rng);
        (Prim::Tanh, vec![randn(rng, r, c)])
    });
    run("sigmoid", |rng| {
        let (r, c) = dims(rng);
        (Prim::Sigmoid, vec![randn(rng, r, c)])
    });
    run("relu", |rng| {
        let (r, c) = dims(rng);
        // stay off the kink
        let x = Matrix::from_fn(r, c, |_, _| {
            let v = normal(rng);
            if v.abs() < 1e-3 { 0.5 } else { v }
        });
        (Prim::Relu, vec![x])
    });
    run("exp", |rng| {
        let (r, c) = dims(rng);
        (Prim::Exp, vec![randn(rng, r, c)])
    });
    run("sin", |rng| {
        let (r, c) = dims(rng);
        (Prim::Sin, vec![randn(rng, r, c)])
    });
    run("cos", |rng| {
        let (r, c) = dims(rng);
        (Prim::Cos, vec![randn(rng, r, c)])
    });
}

#[test]
fn softmax_and_layer_norm() {
    run("softmax", |rng| {
        let (r, c) = dims(rng);
        (Prim::SoftmaxRows, vec![randn(rng, r, c)])
    });
    run("layer_norm", |rng| {
        let (d, k) = (rng.gen_range(2..=6), rng.gen_range(1..=3));
        (Prim::LayerNorm, vec![randn(rng, d, k), randn(rng, d, 1), randn(rng, d, 1)])
    });
}

#[test]
fn cholesky_and_solve() {
    run("cholesky", |rng| {
        let n = rng.gen_range(1..=6);
        (Prim::Cholesky, vec![spd(rng, n)])
    });
    run("solve_spd", |rng| {
        let n = rng.gen_range(1..=6);
        let c = rng.gen_range(1..=6);
        (Prim::SolveSpd, vec![spd(rng, n), randn(rng, n, c)])
    });
}

#[test]
fn structural() {
    run("weighted_outer", |rng| {
        let (n, m) = dims(rng);
        let p = rng.gen_range(1..=6);
        (Prim::WeightedOuter, vec![randn(rng, n, m), randn(rng, m, 1), randn(rng, p, m)])
    });
    run("concat_cols", |rng| {
        let r = rng.gen_range(1..=6);
        (Prim::ConcatCols, vec![randn(rng, r, 2), randn(rng, r, 1), randn(rng, r, 3)])
    });
    run("concat_rows", |rng| {
        let c = rng.gen_range(1..=6);
        (Prim::ConcatRows, vec![randn(rng, 1, c), randn(rng, 3, c)])
    });
    run("slice", |rng| {
        let (r, c) = dims(rng);
        let r0 = rng.gen_range(0..r);
        let c0 = rng.gen_range(0..c);
        let prim = Prim::Slice {
            rows: (r0, rng.gen_range(r0 + 1..=r)),
            cols: (c0, rng.gen_range(c0 + 1..=c)),
        };
        (prim, vec![randn(rng, r, c)])
    });
    run("add_col", |rng| {
        let (r, c) = dims(rng);
        (Prim::AddCol, vec![randn(rng, r, c), randn(rng, r, 1)])
    });
    run("sub_col", |rng| {
        let (r, c) = dims(rng);
        (Prim::SubCol, vec![randn(rng, r, c), randn(rng, r, 1)])
    });
    run("sum", |rng| {
        let (r, c) = dims(rng);
        (Prim::Sum, vec![randn(rng, r, c)])
    });
    run("wrap_row", |rng| {
        let (r, c) = dims(rng);
        let row = rng.gen_range(0..r);
        (Prim::WrapRow(row), vec![randn(rng, r, c)])
    });
}

#[test]
fn motion_and_sensor() {
    run("ct_transition", |rng| {
        let m = rng.gen_range(1..=6);
        let x = Matrix::from_fn(5, m, |r, _| match r {
            4 => {
                if rng.gen_bool(0.3) {
                    1e-5 * normal(rng)
                } else {
                    normal(rng)
                }
            }
            _ => 10.0 * normal(rng),
        });
        (Prim::CtTransition { dt: 0.1 }, vec![x])
    });
    run("range_bearing", |rng| {
        let m = rng.gen_range(1..=6);
        let x = Matrix::from_fn(5, m, |r, _| match r {
            0 => 5.0 + rng.gen::<f64>() * 100.0,
            _ => 10.0 * normal(rng),
        });
        (Prim::RangeBearing, vec![x])
    });
}

#[test]
fn cholesky_frobenius_at_diag_4_9() {
    let p = Matrix::from_diag(&[4.0, 9.0]);
    let mut tape = Tape::new();
    let id = tape.param(p.clone());
    let l = tape.cholesky(&id).unwrap();
    let loss = tape.sum_squares(&l).unwrap();
    let g = backward(&tape, loss, &[id]).unwrap();
    let analytic = g.get(id).unwrap();

    let f = |m: &Matrix| {
        let l = Eager.cholesky(m).unwrap();
        l.hadamard(&l).unwrap().sum()
    };
    let h = 1e-6;
    for i in 0..2 {
        for j in 0..2 {
            let mut plus = p.clone();
            plus.add_at(i, j, h);
            let mut minus = p.clone();
            minus.add_at(i, j, -h);
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            let a = analytic.get(i, j);
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-12);
            assert!(rel < 1e-6 || (a.abs() < 1e-9 && fd.abs() < 1e-9), "({i},{j}): {a} vs {fd}");
        }
    }
    // ‖chol(P)‖²_F = trace(P) for any SPD P, so the adjoint is the identity
    assert!(analytic.max_abs_diff(&Matrix::identity(2)) < 1e-12);
}

#[test]
fn eager_and_taped_forward_are_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = spd(&mut rng, 5);
    let b = randn(&mut rng, 5, 3);
    let run = |g: &mut dyn FnMut(&Matrix, &Matrix) -> Matrix| g(&a, &b);
    let eager = run(&mut |a, b| {
        let mut e = Eager;
        let l = e.cholesky(a).unwrap();
        let x = e.solve_spd(a, b).unwrap();
        let y = e.matmul(&l, &x).unwrap();
        e.tanh(&y).unwrap()
    });
    let mut tape = Tape::new();
    let ia = tape.param(a.clone());
    let ib = tape.param(b.clone());
    let l = tape.cholesky(&ia).unwrap();
    let x = tape.solve_spd(&ia, &ib).unwrap();
    let y = tape.matmul(&l, &x).unwrap();
    let t = tape.tanh(&y).unwrap();
    let taped = tape.value(t);
    assert!(eager.data().iter().zip(taped.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    assert!(tape.replay_matches().unwrap());
}

