//! Central finite-difference gradient checking.
//!
//! Only forward values are used to build the numeric estimate, so the
//! check is independent of the backward rules it verifies.

use crate::error::Result;
use crate::real::Real;
use crate::tape::{Tape, Var};

/// Outcome of one check: worst norm-relative error over all inputs.
#[derive(Clone, Debug)]
pub struct Report {
    pub max_rel_error: f64,
    pub worst_input: usize,
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

/// Compares analytic and numeric gradients of `f` at `inputs`.
///
/// `f` receives a fresh tape and one leaf per input (shape, values) and
/// must return a scalar. It is called once per perturbed coordinate, so
/// any randomness inside it must be reseeded per call.
pub fn check<F>(inputs: &[(Vec<usize>, Vec<f64>)], h: f64, mut f: F) -> Result<Report>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let (out_tape, vars) = run(inputs, &inputs.iter().map(|(_, v)| v.clone()).collect::<Vec<_>>(), &mut f)?;
    let grads = out_tape.0.backward(out_tape.1)?;

    let mut vals: Vec<Vec<f64>> = inputs.iter().map(|(_, v)| v.clone()).collect();
    let mut report = Report {
        max_rel_error: 0.0,
        worst_input: 0,
    };
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; vals[i].len()]);
        let mut numeric = vec![0.0; vals[i].len()];
        for j in 0..vals[i].len() {
            let orig = vals[i][j];
            vals[i][j] = orig + h;
            let up = run(inputs, &vals, &mut f)?.0.value();
            vals[i][j] = orig - h;
            let down = run(inputs, &vals, &mut f)?.0.value();
            vals[i][j] = orig;
            numeric[j] = (up - down) / (2.0 * h);
        }
        let err = rel_error(&analytic, &numeric);
        if err > report.max_rel_error {
            report = Report {
                max_rel_error: err,
                worst_input: i,
            };
        }
    }
    Ok(report)
}

struct Evaluated(Tape<f64>, Var);

impl Evaluated {
    fn value(&self) -> f64 {
        self.0.scalar(self.1)
    }
}

fn run<F>(inputs: &[(Vec<usize>, Vec<f64>)], vals: &[Vec<f64>], f: &mut F) -> Result<(Evaluated, Vec<Var>)>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .zip(vals)
        .map(|((shape, _), v)| tape.var(shape, v.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    Ok((Evaluated(tape, out), vars))
}

/// Reduces any tensor to a scalar through a fixed random projection, so a
/// gradient check exercises every output coordinate.
pub fn project<T: Real>(tape: &mut Tape<T>, v: Var, weights: &[T]) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let w = tape.constant(&shape, weights[..tape.value(v).len()].to_vec())?;
    let p = tape.mul(v, w)?;
    tape.sum(p)
}

/// Every differentiable operator on [`Tape`], by name.
pub const OPERATORS: &[&str] = &[
    "matmul",
    "matmul_nt",
    "bmm",
    "bmm_nt",
    "add",
    "sub",
    "mul",
    "add_row",
    "mul_row",
    "mul_groups",
    "scale",
    "relu",
    "gelu",
    "elu",
    "leaky_relu",
    "layer_norm",
    "softmax",
    "log_softmax",
    "segment_softmax",
    "dropout",
    "cross_entropy",
    "gather_rows",
    "scatter_add_rows",
    "concat_cols",
    "concat_rows",
    "reshape",
    "permute",
    "sum",
    "mean",
    "sum_last",
];

fn randn(rng: &mut impl rand::Rng, n: usize) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Runs one randomized finite-difference check of operator `name`
/// (see [`OPERATORS`]) with step `h`.
pub fn check_operator(name: &str, rng: &mut impl rand::Rng, h: f64) -> Result<Report> {
    use crate::error::AutogradError;
    let m = rng.random_range(2..6);
    let k = rng.random_range(2..6);
    let n = rng.random_range(2..6);
    let proj = randn(rng, 4096);
    let mat = |rng: &mut _, r: usize, c: usize| (vec![r, c], randn(rng, r * c));
    let p = proj.clone();
    macro_rules! unary {
        ($method:ident $(, $arg:expr)*) => {{
            let a = mat(rng, m, n);
            check(&[a], h, |t, v| {
                let y = t.$method(v[0] $(, $arg)*)?;
                project(t, y, &p)
            })
        }};
    }
    macro_rules! binary {
        ($method:ident) => {{
            let (a, b) = (mat(rng, m, n), mat(rng, m, n));
            check(&[a, b], h, |t, v| {
                let y = t.$method(v[0], v[1])?;
                project(t, y, &p)
            })
        }};
    }
    match name {
        "matmul" => {
            let (a, b) = (mat(rng, m, k), mat(rng, k, n));
            check(&[a, b], h, |t, v| {
                let y = t.matmul(v[0], v[1], false)?;
                project(t, y, &p)
            })
        }
        "matmul_nt" => {
            let (a, b) = (mat(rng, m, k), mat(rng, n, k));
            check(&[a, b], h, |t, v| {
                let y = t.matmul(v[0], v[1], true)?;
                project(t, y, &p)
            })
        }
        "bmm" | "bmm_nt" => {
            let nt = name == "bmm_nt";
            let bsz = rng.random_range(1..4);
            let a = (vec![bsz, m, k], randn(rng, bsz * m * k));
            let b = if nt {
                (vec![bsz, n, k], randn(rng, bsz * n * k))
            } else {
                (vec![bsz, k, n], randn(rng, bsz * k * n))
            };
            check(&[a, b], h, |t, v| {
                let y = t.bmm(v[0], v[1], nt)?;
                project(t, y, &p)
            })
        }
        "add" => binary!(add),
        "sub" => binary!(sub),
        "mul" => binary!(mul),
        "add_row" | "mul_row" => {
            let (a, r) = (mat(rng, m, n), (vec![n], randn(rng, n)));
            let mul = name == "mul_row";
            check(&[a, r], h, |t, v| {
                let y = if mul { t.mul_row(v[0], v[1])? } else { t.add_row(v[0], v[1])? };
                project(t, y, &p)
            })
        }
        "mul_groups" => {
            let (a, w) = (mat(rng, m, n * k), mat(rng, m, n));
            check(&[a, w], h, |t, v| {
                let y = t.mul_groups(v[0], v[1])?;
                project(t, y, &p)
            })
        }
        "scale" => unary!(scale, 0.37),
        "relu" => unary!(relu),
        "gelu" => unary!(gelu),
        "elu" => unary!(elu, 1.0),
        "leaky_relu" => unary!(leaky_relu, 0.2),
        "softmax" => unary!(softmax),
        "log_softmax" => unary!(log_softmax),
        "sum_last" => unary!(sum_last),
        "layer_norm" => {
            let (x, g, b) = (mat(rng, m, n + 2), (vec![n + 2], randn(rng, n + 2)), (vec![n + 2], randn(rng, n + 2)));
            check(&[x, g, b], h, |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                project(t, y, &p)
            })
        }
        "segment_softmax" => {
            let e = m * 3;
            let segs = rng.random_range(1..m + 1);
            let seg: Vec<usize> = (0..e).map(|_| rng.random_range(0..segs)).collect();
            check(&[mat(rng, e, k)], h, |t, v| {
                let y = t.segment_softmax(v[0], &seg, segs)?;
                project(t, y, &p)
            })
        }
        "dropout" => {
            let seed: u64 = rng.random();
            check(&[mat(rng, m, n)], h, |t, v| {
                let mut r = <rand::rngs::StdRng as rand::SeedableRng>::seed_from_u64(seed);
                let y = t.dropout(v[0], 0.3, &mut r)?;
                project(t, y, &p)
            })
        }
        "cross_entropy" => {
            let targets: Vec<usize> = (0..m).map(|_| rng.random_range(0..n)).collect();
            let weights: Vec<f64> = (0..m).map(|i| if i == 0 { 0.0 } else { rng.random_range(0.5..2.0) }).collect();
            check(&[mat(rng, m, n)], h, |t, v| t.cross_entropy(v[0], &targets, &weights))
        }
        "gather_rows" => {
            let idx: Vec<usize> = (0..k + 2).map(|_| rng.random_range(0..m)).collect();
            check(&[mat(rng, m, n)], h, |t, v| {
                let y = t.gather_rows(v[0], &idx)?;
                project(t, y, &p)
            })
        }
        "scatter_add_rows" => {
            let idx: Vec<usize> = (0..m).map(|_| rng.random_range(0..k)).collect();
            check(&[mat(rng, m, n)], h, |t, v| {
                let y = t.scatter_add_rows(v[0], &idx, k)?;
                project(t, y, &p)
            })
        }
        "concat_cols" => {
            let (a, b) = (mat(rng, m, n), mat(rng, m, k));
            check(&[a, b], h, |t, v| {
                let y = t.concat_cols(&[v[0], v[1], v[0]])?;
                project(t, y, &p)
            })
        }
        "concat_rows" => {
            let (a, b) = (mat(rng, m, n), mat(rng, k, n));
            check(&[a, b], h, |t, v| {
                let y = t.concat_rows(&[v[0], v[1]])?;
                project(t, y, &p)
            })
        }
        "reshape" => {
            check(&[mat(rng, m, n * k)], h, |t, v| {
                let y = t.reshape(v[0], &[m * n, k])?;
                project(t, y, &p)
            })
        }
        "permute" => {
            let a = (vec![m, n, k, 2], randn(rng, m * n * k * 2));
            check(&[a], h, |t, v| {
                let y = t.permute(v[0], &[2, 0, 3, 1])?;
                project(t, y, &p)
            })
        }
        "sum" => check(&[mat(rng, m, n)], h, |t, v| {
            let s = t.sum(v[0])?;
            t.mul(s, s)
        }),
        "mean" => check(&[mat(rng, m, n)], h, |t, v| {
            let s = t.mean(v[0])?;
            t.mul(s, s)
        }),
        other => Err(AutogradError::UnknownParam(other.to_string())),
    }
}

