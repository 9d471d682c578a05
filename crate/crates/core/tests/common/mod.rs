#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use u2traj::nn::{Grads, ParamStore, Tape, Var};
use u2traj::Mat;

/// Central-difference step.
pub const H: f64 = 1e-5;
/// Relative tolerance between analytic and numeric gradients.
pub const RTOL: f64 = 1e-4;
/// Absolute floor for entries that are (nearly) zero.
pub const ATOL: f64 = 1e-8;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn assert_close(analytic: f64, numeric: f64, what: &str) {
    let tol = RTOL * analytic.abs().max(numeric.abs()) + ATOL;
    assert!(
        (analytic - numeric).abs() <= tol,
        "{what}: analytic {analytic:.10e} numeric {numeric:.10e}"
    );
}

pub fn central(f: impl Fn(f64) -> f64, x: f64) -> f64 {
    (f(x + H) - f(x - H)) / (2.0 * H)
}

pub fn rand_mat(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
    Mat {
        rows,
        cols,
        data: (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    }
}

pub fn rand_vec(len: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Up to `count` indices spread over `0..len`.
pub fn probe_indices(len: usize, count: usize) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    (0..count).map(|i| i * (len - 1) / (count - 1)).collect()
}

/// Checks parameter gradients of a scalar objective `f` against central
/// differences on a few entries of every parameter.
pub fn check_params(ps: &mut ParamStore, grads: &Grads, per_param: usize, f: impl Fn(&ParamStore) -> f64, what: &str) {
    let ids: Vec<_> = ps.ids().collect();
    for id in ids {
        let name = ps.name(id).to_string();
        for i in probe_indices(ps.get(id).data.len(), per_param) {
            let x0 = ps.get(id).data[i];
            ps.get_mut(id).data[i] = x0 + H;
            let up = f(ps);
            ps.get_mut(id).data[i] = x0 - H;
            let down = f(ps);
            ps.get_mut(id).data[i] = x0;
            let numeric = (up - down) / (2.0 * H);
            assert_close(grads.get(id).data[i], numeric, &format!("{what} {name}[{i}]"));
        }
    }
}

fn project(out: &Mat, proj: &Mat) -> f64 {
    out.data.iter().zip(&proj.data).map(|(a, b)| a * b).sum()
}

/// Checks gradients of `sum(build(x) ⊙ P)` for a random projection `P` with
/// respect to every parameter in `ps` and every input entry.
pub fn check_graph(ps: &mut ParamStore, input: &Mat, build: impl Fn(&mut Tape, Var) -> Var, what: &str) {
    let eval = |ps: &ParamStore, x: &Mat| -> Mat {
        let mut tape = Tape::new(ps);
        let v = tape.constant(x.clone());
        let y = build(&mut tape, v);
        tape.value(y).clone()
    };
    let shape = eval(ps, input);
    let proj = rand_mat(shape.rows, shape.cols, &mut rng(99));

    let mut grads = ps.zero_grads();
    let dx = {
        let mut tape = Tape::new(ps);
        let v = tape.constant(input.clone());
        let y = build(&mut tape, v);
        let all = tape.backward(y, proj.clone(), &mut grads);
        all[0].clone().unwrap_or_else(|| Mat::zeros(input.rows, input.cols))
    };
    check_params(ps, &grads, 6, |p| project(&eval(p, input), &proj), what);
    for i in probe_indices(input.data.len(), 24) {
        let numeric = central(
            |v| {
                let mut x = input.clone();
                x.data[i] = v;
                project(&eval(ps, &x), &proj)
            },
            input.data[i],
        );
        assert_close(dx.data[i], numeric, &format!("{what} input[{i}]"));
    }
}
