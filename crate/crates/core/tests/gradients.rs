use aros_core::adgraph::{check_gradients, check_leaf_gradients, Activation, Layer, MlpParams, Tape, Var};
use aros_core::stabnet::{loss_sl, HeadMode, LossConfig, NodeDynamics, OrthoHead};
use aros_core::{Result, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-6;
const FLOOR: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Random linear functional of `v`, so no gradient entry cancels by symmetry.
fn project(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = random(tape.shape(v), -1.0, 1.0, &mut rng);
    let w = tape.leaf(w);
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

fn assert_op(name: &str, inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
    let r = check_leaf_gradients(inputs, STEP, FLOOR, |t, v| {
        let out = f(t, v)?;
        project(t, out, 7)
    })
    .unwrap();
    assert!(r.passes(TOL), "{name}: {r:?}");
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[3, 4], -2.0, 2.0, &mut rng);
    let b = random(&[3, 4], -2.0, 2.0, &mut rng);
    let pos = random(&[3, 4], 0.5, 3.0, &mut rng);
    assert_op("add", &[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
    assert_op("sub", &[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]));
    assert_op("mul", &[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]));
    assert_op("neg", &[a.clone()], |t, v| Ok(t.neg(v[0])));
    assert_op("scale", &[a.clone()], |t, v| Ok(t.scale(v[0], -1.7)));
    assert_op("add_scalar", &[a.clone()], |t, v| Ok(t.add_scalar(v[0], 0.3)));
    assert_op("tanh", &[a.clone()], |t, v| Ok(t.tanh(v[0])));
    assert_op("exp", &[a.clone()], |t, v| Ok(t.exp(v[0])));
    assert_op("log", &[pos.clone()], |t, v| Ok(t.log(v[0])));
    assert_op("sqrt", &[pos.clone()], |t, v| Ok(t.sqrt(v[0])));
    assert_op("abs", &[a.clone()], |t, v| Ok(t.abs(v[0])));
    // Entries strictly inside and strictly outside the clamp window.
    let c = Tensor::vector(vec![-3.0, -0.4, 0.1, 0.7, 2.5]);
    assert_op("clamp", &[c], |t, v| Ok(t.clamp(v[0], -1.0, 1.0)));
}

#[test]
fn scalar_and_reduction_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&[3, 4], -2.0, 2.0, &mut rng);
    let s = Tensor::scalar(1.3);
    assert_op("mul_by_scalar", &[a.clone(), s.clone()], |t, v| {
        t.mul_by_scalar(v[0], v[1])
    });
    assert_op("div_by_scalar", &[a.clone(), s.clone()], |t, v| {
        t.div_by_scalar(v[0], v[1])
    });
    assert_op("sum", &[a.clone()], |t, v| Ok(t.sum(v[0])));
    assert_op("mean", &[a.clone()], |t, v| Ok(t.mean(v[0])));
    assert_op("sum_last", &[random(&[2, 3, 4], -1.0, 1.0, &mut rng)], |t, v| {
        t.sum_last(v[0])
    });
    assert_op("row_norm", &[a.clone()], |t, v| t.row_norm(v[0]));
    // Well-separated entries keep the argmax fixed under the perturbation.
    let m = Tensor::from_rows(&[&[0.1, 2.0, -1.0], &[3.0, 0.5, 1.0]]);
    assert_op("row_max", &[m], |t, v| t.row_max(v[0]));
}

#[test]
fn matrix_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&[3, 4], -1.0, 1.0, &mut rng);
    let b = random(&[4, 2], -1.0, 1.0, &mut rng);
    assert_op("matmul", &[a.clone(), b.clone()], |t, v| t.matmul(v[0], v[1]));
    assert_op("transpose", &[a.clone()], |t, v| t.transpose(v[0]));
    assert_op("add_row", &[a.clone(), random(&[4], -1.0, 1.0, &mut rng)], |t, v| {
        t.add_row(v[0], v[1])
    });
    assert_op("row_softmax", &[a.clone()], |t, v| t.row_softmax(v[0]));
    assert_op("cross_entropy", &[a.clone()], |t, v| t.cross_entropy(v[0], &[0, 3, 1]));
    assert_op("slice_cols", &[a.clone()], |t, v| t.slice_cols(v[0], 1, 3));
    assert_op(
        "concat_cols",
        &[a.clone(), random(&[3, 2], -1.0, 1.0, &mut rng)],
        |t, v| t.concat_cols(&[v[0], v[1]]),
    );
    assert_op("reshape", &[a.clone()], |t, v| t.reshape(v[0], &[2, 6]));
    assert_op("diag", &[random(&[4], -1.0, 1.0, &mut rng)], |t, v| t.diag(v[0]));
}

#[test]
fn batched_and_image_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cube = random(&[2, 3, 3], -1.0, 1.0, &mut rng);
    assert_op("batch_diag", &[cube.clone()], |t, v| t.batch_diag(v[0]));
    let s = random(&[2, 3], -1.0, 1.0, &mut rng);
    assert_op(
        "batch_row_scale/batched",
        &[random(&[2, 3, 4], -1.0, 1.0, &mut rng), s.clone()],
        |t, v| t.batch_row_scale(v[0], v[1]),
    );
    assert_op(
        "batch_row_scale/shared",
        &[random(&[3, 4], -1.0, 1.0, &mut rng), s],
        |t, v| t.batch_row_scale(v[0], v[1]),
    );
    assert_op(
        "batch_left_matmul",
        &[
            random(&[5, 3], -1.0, 1.0, &mut rng),
            random(&[2, 3, 4], -1.0, 1.0, &mut rng),
        ],
        |t, v| t.batch_left_matmul(v[0], v[1]),
    );
    assert_op(
        "conv3x3",
        &[
            random(&[2, 5, 6], 0.0, 1.0, &mut rng),
            random(&[3, 3, 3], -1.0, 1.0, &mut rng),
            random(&[3], -1.0, 1.0, &mut rng),
        ],
        |t, v| t.conv3x3(v[0], v[1], v[2]),
    );
    assert_op("avg_pool2", &[random(&[2, 2 * 5 * 4], -1.0, 1.0, &mut rng)], |t, v| {
        t.avg_pool2(v[0], 2, 5, 4)
    });
}

fn mlp_from(values: &[Tensor], activation: Activation) -> Result<MlpParams> {
    let layers = values
        .chunks(2)
        .map(|p| Layer {
            weight: p[0].clone(),
            bias: p[1].clone(),
        })
        .collect();
    MlpParams::from_layers("net", layers, activation, false)
}

fn flat_params(net: &MlpParams) -> Vec<Tensor> {
    net.layers
        .iter()
        .flat_map(|l| [l.weight.clone(), l.bias.clone()])
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn random_mlp_and_jacobian_gradients(
        seed in any::<u64>(),
        dims in proptest::collection::vec(1usize..5, 2..4),
        batch in 1usize..4,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = MlpParams::init("net", &dims, Activation::Tanh, false, 1.0, &mut rng).unwrap();
        let mut values = flat_params(&net);
        // Non-zero biases exercise the bias path.
        for v in values.iter_mut().skip(1).step_by(2) {
            *v = random(v.shape(), -0.5, 0.5, &mut rng);
        }
        values.push(random(&[batch, dims[0]], -1.0, 1.0, &mut rng));
        let r = check_gradients(&values, STEP, FLOOR, |t, vals| {
            let (params, x) = vals.split_at(vals.len() - 1);
            let net = mlp_from(params, Activation::Tanh)?;
            let vars = net.register(t)?;
            let xv = t.leaf(x[0].clone());
            let y = vars.forward(t, xv)?;
            let mut loss = project(t, y, seed)?;
            if dims[0] == *dims.last().unwrap() {
                let j = vars.jacobian_batch(t, xv)?;
                let lj = project(t, j, seed.wrapping_add(1))?;
                loss = t.add(loss, lj)?;
            }
            let mut order: Vec<Var> = vars.weights.iter().zip(&vars.biases).flat_map(|(w, b)| [*w, *b]).collect();
            order.push(xv);
            Ok((loss, order))
        }).unwrap();
        prop_assert!(r.passes(TOL), "{:?}", r);
    }
}

#[test]
fn stability_loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (d, hidden, b) = (4, 6, 5);
    let dynamics = NodeDynamics::init(d, hidden, 1.0, 1.0, 4, 3).unwrap();
    let head = OrthoHead::init(d, HeadMode::Orthonormal, 4).unwrap();
    let labels = [0, 1, 1, 0, 1];
    let mut values = flat_params(&dynamics.net);
    values[1] = random(&[hidden], -0.3, 0.3, &mut rng);
    values.push(head.raw.clone());
    values.push(random(&[b, d], -1.0, 1.0, &mut rng));
    let cfg = LossConfig::default();
    let r = check_gradients(&values, STEP, FLOOR, |t, vals| {
        let n = vals.len();
        let mut dynm = dynamics.clone();
        dynm.net = mlp_from(&vals[..n - 2], Activation::Tanh)?;
        let vars = dynm.net.register(t)?;
        let raw = t.param("head.v", vals[n - 2].clone());
        let w = head.weight_on_tape(t, raw)?;
        let z = t.leaf(vals[n - 1].clone());
        let (loss, _) = loss_sl(t, z, &labels, &dynm, &vars, w, &cfg)?;
        let mut order: Vec<Var> = vars
            .weights
            .iter()
            .zip(&vars.biases)
            .flat_map(|(w, b)| [*w, *b])
            .collect();
        order.extend([raw, z]);
        Ok((loss, order))
    })
    .unwrap();
    assert!(r.passes(TOL), "{r:?}");
}
