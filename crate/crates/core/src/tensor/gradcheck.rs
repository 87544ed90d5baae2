//! Central finite differences for verifying analytic gradients.
//!
//! Checks run in `f64`: the `1e-4` step size leaves too little headroom in
//! single precision. The graph builder is re-invoked per perturbation, so it
//! must be deterministic (clone any RNG it consumes).

use super::tape::{NodeId, Tape};
use super::{Parameter, Scalar};

/// Numeric gradient of `build`'s scalar output w.r.t. every parameter
/// element, by central differences with step `h`.
pub fn numeric_grads<F, B>(params: &mut [Parameter<F>], h: f64, mut build: B) -> Vec<Vec<F>>
where
    F: Scalar,
    B: FnMut(&mut Tape<F>, &[Parameter<F>]) -> NodeId,
{
    let eval = |params: &[Parameter<F>], build: &mut B| -> f64 {
        let mut tape = Tape::new(false);
        let loss = build(&mut tape, params);
        tape.scalar_value(loss).to_f64()
    };

    let mut out = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let n = params[pi].tensor.len();
        let mut grad = vec![F::ZERO; n];
        for i in 0..n {
            let orig = params[pi].tensor.data()[i];
            params[pi].tensor.data_mut()[i] = orig + F::from_f64(h);
            let up = eval(params, &mut build);
            params[pi].tensor.data_mut()[i] = orig - F::from_f64(h);
            let down = eval(params, &mut build);
            params[pi].tensor.data_mut()[i] = orig;
            grad[i] = F::from_f64((up - down) / (2.0 * h));
        }
        out.push(grad);
    }
    out
}

/// Analytic gradients of `build`'s scalar output via the tape.
pub fn analytic_grads<F, B>(params: &mut [Parameter<F>], mut build: B) -> Vec<Vec<F>>
where
    F: Scalar,
    B: FnMut(&mut Tape<F>, &[Parameter<F>]) -> NodeId,
{
    for p in params.iter_mut() {
        p.tensor.grad_mut();
        p.tensor.zero_grad();
    }
    let mut tape = Tape::new(false);
    let loss = build(&mut tape, params);
    tape.backward(loss, params).expect("backward");
    params
        .iter()
        .map(|p| p.tensor.grad().unwrap().to_vec())
        .collect()
}

/// Largest relative disagreement between analytic and numeric gradients.
///
/// Relative error uses `|a - n| / max(|a| + |n|, floor)` so near-zero
/// gradients do not blow up the ratio.
pub fn max_relative_error<F, B>(params: &mut [Parameter<F>], h: f64, mut build: B) -> f64
where
    F: Scalar,
    B: FnMut(&mut Tape<F>, &[Parameter<F>]) -> NodeId,
{
    let analytic = analytic_grads(params, &mut build);
    let numeric = numeric_grads(params, h, &mut build);
    let mut worst = 0.0f64;
    for (a_vec, n_vec) in analytic.iter().zip(&numeric) {
        for (&a, &n) in a_vec.iter().zip(n_vec) {
            let (a, n) = (a.to_f64(), n.to_f64());
            let denom = (a.abs() + n.abs()).max(1e-6);
            let rel = (a - n).abs() / denom;
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;
    use crate::tensor::Tensor;

    fn rand_param(name: &str, shape: &[usize], rng: &mut RngState) -> Parameter<f64> {
        Parameter::new(name, Tensor::rand_uniform(shape, -0.9, 0.9, rng))
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = RngState::new(41);
        let mut params = vec![
            rand_param("a", &[3, 4], &mut rng),
            rand_param("b", &[4, 2], &mut rng),
        ];
        let weights: Vec<f64> = (0..6).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let err = max_relative_error(&mut params, 1e-4, |tape, ps| {
            let a = tape.leaf(0, &ps[0].tensor);
            let b = tape.leaf(1, &ps[1].tensor);
            let c = tape.matmul(a, b).unwrap();
            let w = tape.input(&[3, 2], weights.clone());
            let prod = tape.mul(c, w).unwrap();
            tape.sum_all(prod)
        });
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn sigmoid_tanh_gradients_match_finite_differences() {
        let mut rng = RngState::new(42);
        let mut params = vec![rand_param("x", &[5, 5], &mut rng)];
        let err = max_relative_error(&mut params, 1e-4, |tape, ps| {
            let x = tape.leaf(0, &ps[0].tensor);
            let s = tape.sigmoid(x);
            let t = tape.tanh(s);
            tape.sum_all(t)
        });
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn cross_entropy_gradients_match_finite_differences() {
        let mut rng = RngState::new(43);
        let mut params = vec![rand_param("logits", &[6, 5], &mut rng)];
        let targets = vec![0u32, 3, 4, 9, 1, 2]; // 9 = ignore
        let err = max_relative_error(&mut params, 1e-4, |tape, ps| {
            let l = tape.leaf(0, &ps[0].tensor);
            tape.softmax_cross_entropy(l, &targets, 9).unwrap()
        });
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut rng = RngState::new(44);
        let mut params = vec![
            rand_param("q", &[2, 3], &mut rng),
            rand_param("steps0", &[2, 3], &mut rng),
            rand_param("steps1", &[2, 3], &mut rng),
            rand_param("steps2", &[1, 3], &mut rng),
        ];
        let weights: Vec<f64> = (0..6).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let err = max_relative_error(&mut params, 1e-4, |tape, ps| {
            let q = tape.leaf(0, &ps[0].tensor);
            let s0 = tape.leaf(1, &ps[1].tensor);
            let s1 = tape.leaf(2, &ps[2].tensor);
            let s2 = tape.leaf(3, &ps[3].tensor);
            let ann = tape.stack_time(&[s0, s1, s2]).unwrap();
            let scores = tape.attn_scores(q, ann).unwrap();
            let w = tape.masked_softmax(scores, vec![3, 2]).unwrap();
            let ctx = tape.attn_context(w, ann).unwrap();
            let wts = tape.input(&[2, 3], weights.clone());
            let prod = tape.mul(ctx, wts).unwrap();
            tape.sum_all(prod)
        });
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn gru_cell_gradients_match_finite_differences() {
        let mut rng = RngState::new(45);
        let hidden = 3;
        let mut params = vec![
            rand_param("gi", &[2, 3 * hidden], &mut rng),
            rand_param("gh", &[2, 3 * hidden], &mut rng),
            rand_param("h", &[2, hidden], &mut rng),
        ];
        let err = max_relative_error(&mut params, 1e-4, |tape, ps| {
            let gi = tape.leaf(0, &ps[0].tensor);
            let gh = tape.leaf(1, &ps[1].tensor);
            let h = tape.leaf(2, &ps[2].tensor);
            let h2 = tape.gru_cell(gi, gh, h).unwrap();
            tape.sum_all(h2)
        });
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn structural_op_gradients_match_finite_differences() {
        let mut rng = RngState::new(46);
        let mut params = vec![
            rand_param("x", &[4, 3], &mut rng),
            rand_param("y", &[4, 2], &mut rng),
            rand_param("b", &[3], &mut rng),
        ];
        let err = max_relative_error(&mut params, 1e-4, |tape, ps| {
            let x = tape.leaf(0, &ps[0].tensor);
            let y = tape.leaf(1, &ps[1].tensor);
            let b = tape.leaf(2, &ps[2].tensor);
            let xb = tape.add_bias(x, b).unwrap();
            let cat = tape.concat_cols(xb, y).unwrap(); // [4×5]
            let perm = tape.permute_rows(cat, &[2, 0, 3, 1]).unwrap();
            let pre = tape.prefix_rows(perm, 3).unwrap();
            let rows = tape.concat_rows(&[pre, pre]).unwrap();
            tape.sum_all(rows)
        });
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn embed_and_gather_gradients_match_finite_differences() {
        let mut rng = RngState::new(47);
        let mut params = vec![rand_param("table", &[5, 3], &mut rng)];
        let err = max_relative_error(&mut params, 1e-4, |tape, ps| {
            let t = tape.leaf(0, &ps[0].tensor);
            let e = tape.embed(t, &[1, 4, 1, 0]).unwrap(); // repeated ids scatter-add
            let ann = tape.stack_time(&[e, e]).unwrap();
            let g = tape.gather_time(ann, &[0, 1, 0, 1]).unwrap();
            tape.sum_all(g)
        });
        assert!(err < 1e-4, "max rel err {err}");
    }
}
