//! Central finite-difference checks of every differentiable op.

use pdlab_autograd::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

type Build = dyn Fn(&mut Graph, &[Var]) -> Var;

/// Reduces an arbitrary-shape output to a scalar with fixed random weights
/// so every output element contributes.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Var {
    let shape = g.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.input(Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0)));
    let p = g.mul(y, w).unwrap();
    g.sum(p)
}

fn eval(inputs: &[Tensor], build: &Build, seed: u64) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let y = build(&mut g, &vars);
    let l = weighted_sum(&mut g, y, seed);
    g.value(l).item().unwrap()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

/// Returns the worst relative error over all inputs.
fn check(name: &str, inputs: Vec<Tensor>, build: &Build) -> f64 {
    let seed = 99;
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let y = build(&mut g, &vars);
    let l = weighted_sum(&mut g, y, seed);
    g.backward(l).unwrap();

    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        let mut numeric = vec![0.0; inputs[k].numel()];
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= H;
            numeric[i] = (eval(&plus, build, seed) - eval(&minus, build, seed)) / (2.0 * H);
        }
        let e = rel_err(&analytic, &numeric);
        assert!(e < TOL, "{name}: input {k} relative error {e:e}");
        worst = worst.max(e);
    }
    worst
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.5..1.5))
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..=4)
}

/// Checks every op on two rounds of random shapes; returns how many cases
/// ran and the worst relative error. Panics on the first failing case.
pub fn elementary_ops() -> (usize, f64) {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checked = 0;
    for _ in 0..2 {
        let (a, b, c) = (dim(&mut rng) + 1, dim(&mut rng), dim(&mut rng) + 1);
        let cases: Vec<(&str, Vec<Tensor>, Box<Build>)> = vec![
            (
                "add",
                vec![rand_tensor(&mut rng, &[a, b]), rand_tensor(&mut rng, &[a, b])],
                Box::new(|g: &mut Graph, v: &[Var]| g.add(v[0], v[1]).unwrap()),
            ),
            (
                "add_suffix_broadcast",
                vec![rand_tensor(&mut rng, &[a, b, c]), rand_tensor(&mut rng, &[c])],
                Box::new(|g: &mut Graph, v: &[Var]| g.add(v[0], v[1]).unwrap()),
            ),
            (
                "add_general_broadcast",
                vec![rand_tensor(&mut rng, &[a, b, c]), rand_tensor(&mut rng, &[a, 1, c])],
                Box::new(|g: &mut Graph, v: &[Var]| g.add(v[0], v[1]).unwrap()),
            ),
            (
                "sub",
                vec![rand_tensor(&mut rng, &[a, c]), rand_tensor(&mut rng, &[1, c])],
                Box::new(|g: &mut Graph, v: &[Var]| g.sub(v[0], v[1]).unwrap()),
            ),
            (
                "mul_broadcast",
                vec![rand_tensor(&mut rng, &[a, b]), rand_tensor(&mut rng, &[a, 1])],
                Box::new(|g: &mut Graph, v: &[Var]| g.mul(v[0], v[1]).unwrap()),
            ),
            (
                "scale",
                vec![rand_tensor(&mut rng, &[a, b])],
                Box::new(|g: &mut Graph, v: &[Var]| g.scale(v[0], -2.5)),
            ),
            (
                "matmul",
                vec![rand_tensor(&mut rng, &[a, b]), rand_tensor(&mut rng, &[b, c])],
                Box::new(|g: &mut Graph, v: &[Var]| g.matmul(v[0], v[1]).unwrap()),
            ),
            (
                "matmul_batched",
                vec![rand_tensor(&mut rng, &[2, a, b]), rand_tensor(&mut rng, &[2, b, c])],
                Box::new(|g: &mut Graph, v: &[Var]| g.matmul(v[0], v[1]).unwrap()),
            ),
            (
                "matmul_shared_rhs",
                vec![rand_tensor(&mut rng, &[2, a, b]), rand_tensor(&mut rng, &[b, c])],
                Box::new(|g: &mut Graph, v: &[Var]| g.matmul(v[0], v[1]).unwrap()),
            ),
            (
                "permute",
                vec![rand_tensor(&mut rng, &[a, b, c])],
                Box::new(|g: &mut Graph, v: &[Var]| g.permute(v[0], &[1, 2, 0]).unwrap()),
            ),
            (
                "transpose_reshape",
                vec![rand_tensor(&mut rng, &[a, c])],
                Box::new(|g: &mut Graph, v: &[Var]| {
                    let t = g.transpose(v[0]).unwrap();
                    let n = g.value(t).numel();
                    g.reshape(t, &[n]).unwrap()
                }),
            ),
            (
                "concat",
                vec![rand_tensor(&mut rng, &[a, b, c]), rand_tensor(&mut rng, &[a, 2, c])],
                Box::new(|g: &mut Graph, v: &[Var]| g.concat(&[v[0], v[1], v[0]], 1).unwrap()),
            ),
            (
                "slice",
                vec![rand_tensor(&mut rng, &[a, c + 1])],
                Box::new(|g: &mut Graph, v: &[Var]| g.slice(v[0], 1, 1, 2).unwrap()),
            ),
            (
                "gather_rows",
                vec![rand_tensor(&mut rng, &[4, c])],
                Box::new(|g: &mut Graph, v: &[Var]| g.gather_rows(v[0], &[3, 0, 3, 1]).unwrap()),
            ),
            (
                "layer_norm",
                vec![
                    rand_tensor(&mut rng, &[a, c + 2]),
                    rand_tensor(&mut rng, &[c + 2]),
                    rand_tensor(&mut rng, &[c + 2]),
                ],
                Box::new(|g: &mut Graph, v: &[Var]| g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()),
            ),
            (
                "gelu",
                vec![rand_tensor(&mut rng, &[a, b])],
                Box::new(|g: &mut Graph, v: &[Var]| g.gelu(v[0])),
            ),
            (
                "softmax",
                vec![rand_tensor(&mut rng, &[a, c])],
                Box::new(|g: &mut Graph, v: &[Var]| g.softmax(v[0]).unwrap()),
            ),
            (
                "log_softmax",
                vec![rand_tensor(&mut rng, &[a, c])],
                Box::new(|g: &mut Graph, v: &[Var]| g.log_softmax(v[0]).unwrap()),
            ),
            (
                "exp",
                vec![rand_tensor(&mut rng, &[a, b])],
                Box::new(|g: &mut Graph, v: &[Var]| g.exp(v[0])),
            ),
            (
                "log",
                vec![Tensor::from_fn(&[a, b], |i| 0.5 + 0.3 * i as f64)],
                Box::new(|g: &mut Graph, v: &[Var]| g.log(v[0])),
            ),
            (
                "sum_axis",
                vec![rand_tensor(&mut rng, &[a, b, c])],
                Box::new(|g: &mut Graph, v: &[Var]| g.sum_axis(v[0], 1).unwrap()),
            ),
            (
                "mean",
                vec![rand_tensor(&mut rng, &[a, b])],
                Box::new(|g: &mut Graph, v: &[Var]| g.mean(v[0])),
            ),
            (
                "l2_normalize",
                vec![rand_tensor(&mut rng, &[a, c + 1])],
                Box::new(|g: &mut Graph, v: &[Var]| g.l2_normalize(v[0]).unwrap()),
            ),
            (
                "dropout_fixed_mask",
                vec![rand_tensor(&mut rng, &[a, b])],
                Box::new(move |g: &mut Graph, v: &[Var]| {
                    let n = g.value(v[0]).numel();
                    let mask = (0..n).map(|i| if i % 3 == 0 { 0.0 } else { 1.0 / 0.7 }).collect();
                    g.dropout_with_mask(v[0], mask).unwrap()
                }),
            ),
            (
                "cosine_similarity",
                vec![rand_tensor(&mut rng, &[a, c + 1]), rand_tensor(&mut rng, &[b + 1, c + 1])],
                Box::new(|g: &mut Graph, v: &[Var]| g.cosine_similarity(v[0], v[1]).unwrap()),
            ),
        ];
        for (name, inputs, build) in cases {
            let e = check(name, inputs, build.as_ref());
            worst = worst.max(e);
            checked += 1;
        }
    }
    (checked, worst)
}

#[test]
fn elementary_ops_match_finite_differences() {
    let (checked, worst) = elementary_ops();
    assert!(checked >= 20);
    assert!(worst < TOL);
}

pub fn two_layer_mlp() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = vec![
        rand_tensor(&mut rng, &[5, 4]),
        rand_tensor(&mut rng, &[4, 6]),
        rand_tensor(&mut rng, &[6]),
        rand_tensor(&mut rng, &[6, 3]),
        rand_tensor(&mut rng, &[3]),
    ];
    let build = |g: &mut Graph, v: &[Var]| {
        let h = g.matmul(v[0], v[1]).unwrap();
        let h = g.add(h, v[2]).unwrap();
        let h = g.gelu(h);
        let o = g.matmul(h, v[3]).unwrap();
        let o = g.add(o, v[4]).unwrap();
        let ls = g.log_softmax(o).unwrap();
        let picked = g.slice(ls, 1, 0, 1).unwrap();
        let m = g.mean(picked);
        g.neg(m)
    };
    check("mlp", inputs, &build)
}

#[test]
fn two_layer_mlp_matches_finite_differences() {
    let e = two_layer_mlp();
    println!("two-layer mlp rel err {e:.2e}");
}
