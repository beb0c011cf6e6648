//! Central finite-difference gradient checking.
//!
//! Only the forward function is evaluated here, so the check stays
//! independent of the backward rules it validates.

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// ‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂, floor)
    pub rel_error: f64,
    pub max_abs_error: f64,
}

fn central(f: &mut dyn FnMut(&[f32]) -> f32, probe: &mut [f32], i: usize, h: f32) -> f64 {
    let orig = probe[i];
    probe[i] = orig + h;
    let hi = f(probe) as f64;
    probe[i] = orig - h;
    let lo = f(probe) as f64;
    probe[i] = orig;
    let step = ((orig + h) as f64) - ((orig - h) as f64);
    (hi - lo) / step
}

/// Central differences of `f` around `x`, one coordinate at a time, with one
/// Richardson step over `h` and `h/2` (truncation error O(h⁴)). Differences
/// are formed in f64 from f32 evaluations.
pub fn numeric_gradient(f: &mut dyn FnMut(&[f32]) -> f32, x: &[f32], h: f32) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let coarse = central(f, &mut probe, i, h);
            let fine = central(f, &mut probe, i, h / 2.0);
            (4.0 * fine - coarse) / 3.0
        })
        .collect()
}

/// Compares `analytic` with central differences of `f` at `x`.
///
/// `floor` keeps the relative error meaningful when the true gradient is
/// (nearly) zero.
pub fn check(
    f: &mut dyn FnMut(&[f32]) -> f32,
    x: &[f32],
    analytic: &[f32],
    h: f32,
    floor: f64,
) -> GradCheck {
    assert_eq!(x.len(), analytic.len(), "gradient length mismatch");
    let numeric = numeric_gradient(f, x, h);
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nn = 0.0;
    let mut max_abs: f64 = 0.0;
    for (&a, &n) in analytic.iter().zip(&numeric) {
        let a = a as f64;
        diff += (a - n) * (a - n);
        na += a * a;
        nn += n * n;
        max_abs = max_abs.max((a - n).abs());
    }
    let denom = na.sqrt().max(nn.sqrt()).max(floor);
    GradCheck {
        rel_error: diff.sqrt() / denom,
        max_abs_error: max_abs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let x = [1.0f32, -2.0, 0.5];
        let analytic: Vec<f32> = x.iter().map(|v| 2.0 * v).collect();
        let mut f = |v: &[f32]| v.iter().map(|a| a * a).sum::<f32>();
        let r = check(&mut f, &x, &analytic, 1e-2, 1e-6);
        assert!(r.rel_error < 1e-4, "{r:?}");
        let wrong = [0.0f32, 0.0, 0.0];
        assert!(check(&mut f, &x, &wrong, 1e-2, 1e-6).rel_error > 0.5);
    }
}

pub mod ops {
    //! Randomized finite-difference checks for every differentiable tape op.

    use rand::Rng;

    use super::{check, GradCheck};
    use crate::rng::{stream, StreamRng};
    use crate::{Tape, Tensor, Var};

    type Build = fn(&mut Tape<'_>, &[Var], &OpCase) -> Var;

    /// One randomized instance: input tensors plus the op that combines them.
    pub struct OpCase {
        pub name: &'static str,
        pub inputs: Vec<Tensor>,
        /// Op-specific integer arguments (axis, slice start, ...).
        pub args: Vec<usize>,
        build: Build,
    }

    fn dim(rng: &mut StreamRng) -> usize {
        rng.random_range(1..=8)
    }

    fn rand_tensor(rng: &mut StreamRng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-1.5f32..1.5)).collect();
        Tensor::new(shape.to_vec(), data).expect("finite")
    }

    /// Values bounded away from zero, for ops with a kink there.
    fn rand_away_from_zero(rng: &mut StreamRng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let m = rng.random_range(0.1f32..1.5);
                if rng.random::<bool>() {
                    m
                } else {
                    -m
                }
            })
            .collect();
        Tensor::new(shape.to_vec(), data).expect("finite")
    }

    /// Rows with standard deviation at least 0.3, so normalization is well
    /// conditioned at the finite-difference step.
    fn rand_spread_rows(rng: &mut StreamRng, rows: usize, d: usize) -> Tensor {
        let mut data = Vec::with_capacity(rows * d);
        for _ in 0..rows {
            loop {
                let row: Vec<f32> = (0..d).map(|_| rng.random_range(-1.5f32..1.5)).collect();
                let mean = row.iter().sum::<f32>() / d as f32;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / d as f32;
                if d == 1 || var.sqrt() >= 0.3 {
                    data.extend(row);
                    break;
                }
            }
        }
        Tensor::new(vec![rows, d], data).expect("finite")
    }

    fn case(name: &'static str, inputs: Vec<Tensor>, args: Vec<usize>, build: Build) -> OpCase {
        OpCase {
            name,
            inputs,
            args,
            build,
        }
    }

    /// All op cases for one seed. Every dimension is at most 8.
    pub fn cases(seed: u64) -> Vec<OpCase> {
        let mut r = stream(seed, "gradcheck-ops");
        let r = &mut r;
        let mut out = Vec::new();
        let (m, k, n) = (dim(r), dim(r), dim(r));
        out.push(case(
            "matmul",
            vec![rand_tensor(r, &[m, k]), rand_tensor(r, &[k, n])],
            vec![],
            |t, v, _| t.matmul(v[0], v[1]).unwrap(),
        ));
        let (a, b) = (dim(r), dim(r));
        out.push(case("transpose", vec![rand_tensor(r, &[a, b])], vec![], |t, v, _| {
            t.transpose(v[0]).unwrap()
        }));
        let shape = [dim(r), dim(r)];
        out.push(case(
            "add",
            vec![rand_tensor(r, &shape), rand_tensor(r, &shape)],
            vec![],
            |t, v, _| t.add(v[0], v[1]).unwrap(),
        ));
        out.push(case(
            "sub",
            vec![rand_tensor(r, &shape), rand_tensor(r, &shape)],
            vec![],
            |t, v, _| t.sub(v[0], v[1]).unwrap(),
        ));
        out.push(case(
            "mul",
            vec![rand_tensor(r, &shape), rand_tensor(r, &shape)],
            vec![],
            |t, v, _| t.mul(v[0], v[1]).unwrap(),
        ));
        out.push(case(
            "add-scalar",
            vec![rand_tensor(r, &shape), rand_tensor(r, &[1])],
            vec![],
            |t, v, _| t.add(v[0], v[1]).unwrap(),
        ));
        out.push(case(
            "sub-scalar",
            vec![rand_tensor(r, &shape), rand_tensor(r, &[1])],
            vec![],
            |t, v, _| t.sub(v[0], v[1]).unwrap(),
        ));
        out.push(case(
            "mul-scalar",
            vec![rand_tensor(r, &shape), rand_tensor(r, &[1])],
            vec![],
            |t, v, _| t.mul(v[0], v[1]).unwrap(),
        ));
        out.push(case("scale", vec![rand_tensor(r, &shape)], vec![], |t, v, _| {
            t.scale(v[0], -0.7).unwrap()
        }));
        out.push(case("affine", vec![rand_tensor(r, &shape)], vec![], |t, v, _| {
            let n = t.value(v[0]).len();
            let b: Vec<f64> = (0..n).map(|i| 0.1 * i as f64 - 0.3).collect();
            t.affine(v[0], 0.85, &b).unwrap()
        }));
        out.push(case("gelu", vec![rand_tensor(r, &shape)], vec![], |t, v, _| {
            t.gelu(v[0]).unwrap()
        }));
        out.push(case(
            "relu",
            vec![rand_away_from_zero(r, &shape)],
            vec![],
            |t, v, _| t.relu(v[0]).unwrap(),
        ));
        out.push(case("sum", vec![rand_tensor(r, &shape)], vec![], |t, v, _| {
            t.sum(v[0]).unwrap()
        }));
        out.push(case("mean", vec![rand_tensor(r, &shape)], vec![], |t, v, _| {
            t.mean(v[0]).unwrap()
        }));
        let s3 = [dim(r), dim(r), dim(r)];
        let axis = r.random_range(0..3);
        out.push(case(
            "softmax",
            vec![rand_tensor(r, &s3)],
            vec![axis],
            |t, v, c| t.softmax(v[0], c.args[0]).unwrap(),
        ));
        let (rows, d) = (dim(r), r.random_range(2..=8));
        let gamma = rand_away_from_zero(r, &[d]);
        out.push(case(
            "layernorm",
            vec![rand_spread_rows(r, rows, d), gamma, rand_tensor(r, &[d])],
            vec![],
            |t, v, _| t.layernorm(v[0], v[1], v[2], 1e-5).unwrap(),
        ));
        let (a, b) = (dim(r), dim(r));
        out.push(case("reshape", vec![rand_tensor(r, &[a, b])], vec![], |t, v, _| {
            let n = t.value(v[0]).len();
            t.reshape(v[0], vec![n]).unwrap()
        }));
        let c = dim(r);
        out.push(case(
            "concat_rows",
            {
                let (r1, r2) = (dim(r), dim(r));
                vec![rand_tensor(r, &[r1, c]), rand_tensor(r, &[r2, c])]
            },
            vec![],
            |t, v, _| t.concat_rows(v).unwrap(),
        ));
        let rr = dim(r);
        out.push(case(
            "concat_cols",
            {
                let (c1, c2) = (dim(r), dim(r));
                vec![rand_tensor(r, &[rr, c1]), rand_tensor(r, &[rr, c2])]
            },
            vec![],
            |t, v, _| t.concat_cols(v).unwrap(),
        ));
        let cols = r.random_range(2..=8);
        let start = r.random_range(0..cols - 1);
        let len = r.random_range(1..=cols - start);
        let rows = dim(r);
        out.push(case(
            "slice_cols",
            vec![rand_tensor(r, &[rows, cols])],
            vec![start, len],
            |t, v, c| t.slice_cols(v[0], c.args[0], c.args[1]).unwrap(),
        ));
        let (reps, len) = (dim(r), dim(r));
        out.push(case(
            "repeat_rows",
            vec![rand_tensor(r, &[len])],
            vec![reps],
            |t, v, c| t.repeat_rows(v[0], c.args[0]).unwrap(),
        ));
        let (a, b) = (dim(r), dim(r));
        out.push(case(
            "mean_rows",
            vec![rand_tensor(r, &[a, b])],
            vec![],
            |t, v, _| t.mean_rows(v[0]).unwrap(),
        ));
        let p = r.random_range(1..=4);
        let (gh, gw) = (r.random_range(1..=8 / p), r.random_range(1..=8 / p));
        let ch = r.random_range(1..=3);
        out.push(case(
            "patchify",
            vec![rand_tensor(r, &[ch, gh * p, gw * p])],
            vec![p],
            |t, v, c| t.patchify(v[0], c.args[0]).unwrap(),
        ));
        out
    }

    fn weights(seed: u64, name: &str, n: usize) -> Tensor {
        let mut r = stream(seed, name);
        let data = (0..n).map(|_| r.random_range(-1.0f32..1.0)).collect();
        Tensor::new(vec![n], data).expect("finite")
    }

    /// Loss = Σ w ⊙ op(inputs) with fixed random `w`; returns the loss and
    /// the analytic gradient wrt all inputs, concatenated.
    fn loss_of(c: &OpCase, inputs: &[Tensor], seed: u64) -> (f32, Vec<f32>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let y = (c.build)(&mut tape, &vars, c);
        let n = tape.value(y).len();
        let flat = tape.reshape(y, vec![n]).unwrap();
        let w = tape.constant(weights(seed, c.name, n));
        let prod = tape.mul(flat, w).unwrap();
        let loss = tape.sum(prod).unwrap();
        let value = tape.value(loss)[0];
        let grads = tape.backward(loss).unwrap();
        let mut all = Vec::new();
        for (v, t) in vars.iter().zip(inputs) {
            match grads.get(*v) {
                Some(g) => all.extend_from_slice(g),
                None => all.extend(std::iter::repeat_n(0.0, t.numel())),
            }
        }
        (value, all)
    }

    /// Runs the finite-difference check on one case.
    pub fn check_case(c: &OpCase, seed: u64) -> GradCheck {
        let (_, analytic) = loss_of(c, &c.inputs, seed);
        let sizes: Vec<usize> = c.inputs.iter().map(Tensor::numel).collect();
        let flat: Vec<f32> = c.inputs.iter().flat_map(|t| t.data().to_vec()).collect();
        let mut f = |x: &[f32]| {
            let mut off = 0;
            let ins: Vec<Tensor> = c
                .inputs
                .iter()
                .zip(&sizes)
                .map(|(t, &s)| {
                    let out = Tensor::new(t.shape().to_vec(), x[off..off + s].to_vec()).unwrap();
                    off += s;
                    out
                })
                .collect();
            loss_of(c, &ins, seed).0
        };
        check(&mut f, &flat, &analytic, 1e-2, 1e-3)
    }
}
