//! Central finite differences against the analytic backward rule of every
//! primitive, in 64-bit.

use layoutlab_autodiff::{NodeId, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0)).unwrap()
}

/// Builds `sum(f(leaves) ⊙ w)` for a fixed random `w` so that every output
/// coordinate contributes to the checked gradient.
fn check<F>(name: &str, inputs: Vec<Tensor<f64>>, f: F)
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> NodeId,
{
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe = {
        let mut tape = Tape::new();
        let ids: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &ids);
        random(&mut rng, tape.value(out).shape())
    };
    let eval = |inputs: &[Tensor<f64>]| -> (f64, Tape<f64>, Vec<NodeId>, NodeId) {
        let mut tape = Tape::new();
        let ids: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &ids);
        let w = tape.constant(probe.clone());
        let prod = tape.mul(out, w).unwrap();
        let loss = tape.sum(prod);
        (tape.value(loss).item().unwrap(), tape, ids, loss)
    };
    let (_, tape, ids, loss) = eval(&inputs);
    let grads = tape.backward(loss).unwrap();
    for (which, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).unwrap();
        for j in 0..inputs[which].len() {
            let mut plus = inputs.clone();
            plus[which].data_mut()[j] += STEP;
            let mut minus = inputs.clone();
            minus[which].data_mut()[j] -= STEP;
            let numeric = (eval(&plus).0 - eval(&minus).0) / (2.0 * STEP);
            let a = analytic.data()[j];
            // Coordinates whose true gradient is ~0 are compared on an
            // absolute 1e-9 scale.
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5);
            assert!(rel < TOL, "{name}: input {which} coord {j}: analytic {a} vs numeric {numeric} (rel {rel:e})");
        }
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

#[test]
fn matmul_variants() {
    let mut r = rng();
    check("matmul", vec![random(&mut r, &[3, 4]), random(&mut r, &[4, 5])], |t, x| t.matmul(x[0], x[1]).unwrap());
    check("matmul_t", vec![random(&mut r, &[3, 4]), random(&mut r, &[5, 4])], |t, x| t.matmul_t(x[0], x[1]).unwrap());
    check("bmm", vec![random(&mut r, &[2, 3, 4]), random(&mut r, &[2, 4, 2])], |t, x| {
        t.bmm(x[0], x[1], false).unwrap()
    });
    check("bmm_t", vec![random(&mut r, &[2, 3, 4]), random(&mut r, &[2, 5, 4])], |t, x| {
        t.bmm(x[0], x[1], true).unwrap()
    });
}

#[test]
fn elementwise_with_broadcast() {
    let mut r = rng();
    check("add", vec![random(&mut r, &[3, 4]), random(&mut r, &[4])], |t, x| t.add(x[0], x[1]).unwrap());
    check("sub", vec![random(&mut r, &[2, 3, 4]), random(&mut r, &[3, 4])], |t, x| t.sub(x[0], x[1]).unwrap());
    check("mul", vec![random(&mut r, &[3, 4]), random(&mut r, &[4])], |t, x| t.mul(x[0], x[1]).unwrap());
    check("mul_self", vec![random(&mut r, &[5])], |t, x| t.mul(x[0], x[0]).unwrap());
    check("scale", vec![random(&mut r, &[3, 2])], |t, x| t.scale(x[0], -2.5));
}

#[test]
fn normalizers_and_activations() {
    let mut r = rng();
    check("softmax", vec![random(&mut r, &[3, 5])], |t, x| t.softmax(x[0]));
    check("log_softmax", vec![random(&mut r, &[3, 5])], |t, x| t.log_softmax(x[0]));
    check("gelu", vec![random(&mut r, &[4, 3]).map(|v| v * 3.0)], |t, x| t.gelu(x[0]));
    check("layernorm", vec![random(&mut r, &[3, 6]), random(&mut r, &[6]), random(&mut r, &[6])], |t, x| {
        t.layernorm(x[0], x[1], x[2], 1e-5).unwrap()
    });
}

#[test]
fn masked_softmax() {
    let mut r = rng();
    let allowed = [true, false, false, true, true, false, true, true, true];
    check("masked_fill+softmax", vec![random(&mut r, &[2, 3, 3])], move |t, x| {
        let m = t.masked_fill(x[0], &allowed).unwrap();
        t.softmax(m)
    });
}

#[test]
fn reductions_and_indexing() {
    let mut r = rng();
    check("mean", vec![random(&mut r, &[3, 4])], |t, x| t.mean(x[0]));
    check("sum", vec![random(&mut r, &[3, 4])], |t, x| t.sum(x[0]));
    check("embedding", vec![random(&mut r, &[5, 3])], |t, x| t.embedding(x[0], &[4, 0, 4, 2]).unwrap());
    check("gather_rows", vec![random(&mut r, &[4, 3])], |t, x| t.gather_rows(x[0], &[3, 1, 3]).unwrap());
    check("pick_per_row", vec![random(&mut r, &[3, 4])], |t, x| t.pick_per_row(x[0], &[0, 3, 3]).unwrap());
}

#[test]
fn layout_primitives() {
    let mut r = rng();
    check("split_heads", vec![random(&mut r, &[2 * 3, 4])], |t, x| t.split_heads(x[0], 2, 3, 2).unwrap());
    check("merge_heads", vec![random(&mut r, &[4, 3, 2])], |t, x| t.merge_heads(x[0], 2, 2).unwrap());
    check("concat_cols", vec![random(&mut r, &[3, 2]), random(&mut r, &[3, 4])], |t, x| {
        t.concat_cols(x[0], x[1]).unwrap()
    });
    check("reshape", vec![random(&mut r, &[3, 4])], |t, x| t.reshape(x[0], [2, 6]).unwrap());
}

#[test]
fn two_layer_mlp_with_cross_entropy() {
    let mut r = rng();
    let inputs = vec![
        random(&mut r, &[4, 3]),
        random(&mut r, &[3, 6]),
        random(&mut r, &[6]),
        random(&mut r, &[6, 5]),
        random(&mut r, &[5]),
    ];
    check("mlp", inputs, |t, x| {
        let h = t.matmul(x[0], x[1]).unwrap();
        let h = t.add(h, x[2]).unwrap();
        let h = t.gelu(h);
        let o = t.matmul(h, x[3]).unwrap();
        let o = t.add(o, x[4]).unwrap();
        let lp = t.log_softmax(o);
        let picked = t.pick_per_row(lp, &[0, 4, 2, 2]).unwrap();
        let nll = t.mean(picked);
        t.scale(nll, -1.0)
    });
}
