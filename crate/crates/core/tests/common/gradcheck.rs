//! Central finite differences against `Tape::backward`.

use hdt::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Absolute slack for gradients that are zero up to round-off.
pub const ABS_FLOOR: f64 = 1e-7;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Builds `sum(f(inputs) ⊙ r)` for a fixed random projection `r`, so the
/// check covers the full vector-Jacobian product rather than one output.
fn projected_loss(
    tape: &mut Tape,
    vars: &[Var],
    f: &dyn Fn(&mut Tape, &[Var]) -> Var,
    proj_seed: u64,
) -> Var {
    let out = f(tape, vars);
    let shape = tape.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(proj_seed);
    let r = tape.constant(random_tensor(&mut rng, &shape));
    let prod = tape.mul(out, r).unwrap();
    tape.sum(prod)
}

/// Largest relative error between analytic and numeric gradients over all
/// input elements, or the first offending element when the tolerance fails.
pub fn check(
    inputs: &[Tensor],
    f: impl Fn(&mut Tape, &[Var]) -> Var,
    tape_seed: Option<u64>,
    proj_seed: u64,
) -> Result<f64, String> {
    let new_tape = || match tape_seed {
        Some(s) => Tape::training(s),
        None => Tape::eval(),
    };
    let mut tape = new_tape();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = projected_loss(&mut tape, &vars, &f, proj_seed);
    let grads = tape.backward(loss).map_err(|e| e.to_string())?;

    let eval = |perturbed: &[Tensor]| {
        let mut tape = new_tape();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.leaf(t.clone())).collect();
        let l = projected_loss(&mut tape, &vars, &f, proj_seed);
        tape.value(l).item()
    };

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(&tape, vars[i])
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let a = analytic.data()[j];
            let err = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            if err > REL_TOL * scale + ABS_FLOOR {
                return Err(format!(
                    "input {i} element {j}: analytic {a:.9e} vs numeric {numeric:.9e}"
                ));
            }
            if scale > ABS_FLOOR {
                worst = worst.max(err / scale);
            }
        }
    }
    Ok(worst)
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

/// One differentiable op under test: a name, input shapes, and the forward
/// expression. `tape_seed` is set for ops that need a training tape.
pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub build: Build,
    pub training: bool,
    /// Input transform applied to the random draws (e.g. integer-free ranges).
    pub input_scale: f64,
}

fn case(
    name: &'static str,
    shapes: &[&[usize]],
    build: impl Fn(&mut Tape, &[Var]) -> Var + 'static,
) -> OpCase {
    OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        build: Box::new(build),
        training: false,
        input_scale: 1.0,
    }
}

/// Every differentiable op on the tape.
pub fn all_cases() -> Vec<OpCase> {
    let mut cases = vec![
        case("matmul", &[&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1]).unwrap()),
        case("bmm", &[&[2, 3, 4], &[2, 4, 2]], |t, v| t.bmm(v[0], v[1]).unwrap()),
        case("add", &[&[2, 3], &[2, 3]], |t, v| t.add(v[0], v[1]).unwrap()),
        case("sub", &[&[2, 3], &[2, 3]], |t, v| t.sub(v[0], v[1]).unwrap()),
        case("mul", &[&[2, 3], &[2, 3]], |t, v| t.mul(v[0], v[1]).unwrap()),
        case("add_trailing", &[&[2, 3, 4], &[3, 4]], |t, v| {
            t.add_trailing(v[0], v[1]).unwrap()
        }),
        case("linear", &[&[2, 3, 4], &[4, 5], &[5]], |t, v| {
            t.linear(v[0], v[1], Some(v[2])).unwrap()
        }),
        case("add_axis", &[&[2, 3, 4], &[3]], |t, v| t.add_axis(v[0], v[1], 1).unwrap()),
        case("scale", &[&[5]], |t, v| t.scale(v[0], -1.7)),
        case("add_scalar", &[&[5]], |t, v| {
            let y = t.add_scalar(v[0], 0.3);
            t.square(y)
        }),
        case("reshape", &[&[2, 6]], |t, v| {
            let r = t.reshape(v[0], &[3, 4]).unwrap();
            t.square(r)
        }),
        case("permute", &[&[2, 3, 4]], |t, v| {
            let p = t.permute(v[0], &[2, 0, 1]).unwrap();
            let r = t.reshape(p, &[4, 6]).unwrap();
            let w = t.constant(Tensor::new(vec![6, 1], (0..6).map(|i| i as f64 - 2.5).collect()).unwrap());
            t.matmul(r, w).unwrap()
        }),
        case("relu", &[&[12]], |t, v| t.relu(v[0])),
        case("leaky_relu", &[&[12]], |t, v| t.leaky_relu(v[0], 0.2)),
        case("tanh", &[&[12]], |t, v| t.tanh(v[0])),
        case("sigmoid", &[&[12]], |t, v| t.sigmoid(v[0])),
        case("log_sigmoid", &[&[12]], |t, v| t.log_sigmoid(v[0])),
        case("clamp", &[&[12]], |t, v| t.clamp(v[0], -0.5, 0.5)),
        case("square", &[&[12]], |t, v| t.square(v[0])),
        case("sum", &[&[3, 4]], |t, v| {
            let s = t.square(v[0]);
            t.sum(s)
        }),
        case("mean", &[&[3, 4]], |t, v| {
            let s = t.square(v[0]);
            t.mean(s)
        }),
        case("softmax_last", &[&[3, 5]], |t, v| t.softmax_last(v[0])),
        case("causal_softmax", &[&[2, 4, 4]], |t, v| {
            let m = t.causal_mask(v[0]).unwrap();
            t.softmax_last(m)
        }),
        case("layer_norm", &[&[3, 6], &[6], &[6]], |t, v| {
            t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()
        }),
        case("embedding", &[&[5, 3]], |t, v| t.embedding(v[0], &[4, 0, 4, 2]).unwrap()),
        case("concat", &[&[2, 2, 3], &[2, 1, 3]], |t, v| t.concat(&[v[0], v[1]], 1).unwrap()),
        case("slice", &[&[3, 5, 2]], |t, v| t.slice(v[0], 1, 1, 3).unwrap()),
        case("conv1d", &[&[2, 8], &[3, 2, 4]], |t, v| t.conv1d(v[0], v[1], 2, 1).unwrap()),
        case("conv1d_k3", &[&[2, 3, 6], &[4, 3, 3]], |t, v| {
            t.conv1d(v[0], v[1], 1, 1).unwrap()
        }),
        case("conv1d_transpose", &[&[2, 4], &[2, 3, 4]], |t, v| {
            t.conv1d_transpose(v[0], v[1], 2, 1).unwrap()
        }),
        case("softmax_cross_entropy", &[&[4, 5]], |t, v| {
            t.softmax_cross_entropy(v[0], &[0, 4, 2, 2]).unwrap()
        }),
        case("l2_normalize_rows", &[&[4, 3]], |t, v| t.l2_normalize_rows(v[0], 1e-8)),
    ];
    let mut dropout = case("dropout", &[&[20]], |t, v| {
        let d = t.dropout(v[0], 0.3);
        t.square(d)
    });
    dropout.training = true;
    cases.push(dropout);
    cases
}

/// Runs `instances` random draws of every op; returns `(name, worst rel err)`.
pub fn run_suite(instances: usize, seed: u64) -> Vec<(String, Result<f64, String>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    all_cases()
        .into_iter()
        .map(|c| {
            let mut worst = 0.0f64;
            for i in 0..instances {
                let inputs: Vec<Tensor> = c
                    .shapes
                    .iter()
                    .map(|s| random_tensor(&mut rng, s).map(|x| x * c.input_scale))
                    .collect();
                let tape_seed = c.training.then_some(seed ^ (i as u64 + 1));
                match check(&inputs, &c.build, tape_seed, rng.random()) {
                    Ok(w) => worst = worst.max(w),
                    Err(e) => return (c.name.to_string(), Err(format!("instance {i}: {e}"))),
                }
            }
            (c.name.to_string(), Ok(worst))
        })
        .collect()
}
