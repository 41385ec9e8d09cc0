//! Minimal dense reverse-mode differentiation for desk-scale CNN training.

mod graph;
pub mod kernels;
mod ops;
mod optim;
mod params;

pub use graph::{BackwardFn, Gradients, Graph, ParamBinder, Var};
pub use ops::{BatchStats, BN_EPS};
pub use optim::{Adam, Optimizer, OptimizerKind, Sgd};
pub use params::{ParamId, ParamStore, Parameter};

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Tensor;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference check of `f` with respect to each input, reducing
    /// the op output to a scalar through fixed random weights.
    fn check<F>(inputs: Vec<Tensor>, f: F, tol: f64)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let probe = {
            let mut g = Graph::new();
            let vs: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            let out = f(&mut g, &vs);
            rand_tensor(&mut rng, g.value(out).shape())
        };
        let eval = |ins: &[Tensor]| -> f64 {
            let mut g = Graph::new();
            let vs: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
            let out = f(&mut g, &vs);
            g.value(out).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let mut g = Graph::new();
        let vs: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let out = f(&mut g, &vs);
        let pv = g.constant(probe.clone());
        let loss = weighted_sum(&mut g, out, pv);
        let grads = g.gradients(loss).unwrap();
        let h = 1e-5;
        for (k, v) in vs.iter().enumerate() {
            let an = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
            for i in 0..inputs[k].numel() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[i] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = an.data()[i];
                let denom = fd.abs().max(a.abs()).max(1e-3);
                assert!(
                    (fd - a).abs() / denom < tol,
                    "input {k} elem {i}: fd {fd} vs analytic {a}"
                );
            }
        }
    }

    fn weighted_sum(g: &mut Graph, x: Var, w: Var) -> Var {
        let xv = g.value(x).clone();
        let wv = g.value(w).clone();
        let s: f64 = xv.data().iter().zip(wv.data()).map(|(a, b)| a * b).sum();
        g.custom(
            &[x, w],
            Tensor::scalar(s),
            Box::new(move |gr, inputs, _| {
                Ok(vec![Some(inputs[1].map(|v| v * gr.item())), None])
            }),
        )
    }

    #[test]
    fn conv2d_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[2, 2, 3, 3]);
        let w = rand_tensor(&mut rng, &[2, 2, 3, 3]);
        check(vec![x.clone(), w.clone()], |g, v| g.conv2d(v[0], v[1], 1, 1).unwrap(), 1e-6);
        let x = rand_tensor(&mut rng, &[1, 3, 5, 5]);
        let w = rand_tensor(&mut rng, &[2, 3, 3, 3]);
        check(vec![x, w], |g, v| g.conv2d(v[0], v[1], 2, 1).unwrap(), 1e-6);
    }

    #[test]
    fn batchnorm_train_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[3, 2, 2, 2]);
        let gm = rand_tensor(&mut rng, &[2]);
        let bt = rand_tensor(&mut rng, &[2]);
        check(
            vec![x, gm, bt],
            |g, v| g.batch_norm_train(v[0], v[1], v[2], BN_EPS).unwrap().0,
            1e-5,
        );
    }

    #[test]
    fn batchnorm_eval_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[2, 2, 2, 2]);
        let gm = rand_tensor(&mut rng, &[2]);
        let bt = rand_tensor(&mut rng, &[2]);
        check(
            vec![x, gm, bt],
            |g, v| g.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2], &[0.5, 2.0], BN_EPS).unwrap(),
            1e-6,
        );
    }

    #[test]
    fn misc_op_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[2, 2, 4, 4]);
        check(vec![x.clone()], |g, v| g.max_pool2d(v[0], 2, 2).unwrap(), 1e-6);
        check(vec![x.clone()], |g, v| g.global_avg_pool(v[0]).unwrap(), 1e-6);
        check(vec![x.clone()], |g, v| g.relu(v[0]), 1e-6);
        let b = rand_tensor(&mut rng, &[2]);
        check(vec![x.clone(), b], |g, v| g.add_channel_bias(v[0], v[1]).unwrap(), 1e-6);
        let w = rand_tensor(&mut rng, &[3, 32]);
        let bl = rand_tensor(&mut rng, &[3]);
        check(vec![x.clone(), w, bl], |g, v| g.linear(v[0], v[1], Some(v[2])).unwrap(), 1e-6);
        let y = rand_tensor(&mut rng, &[2, 2, 4, 4]);
        check(vec![x.clone(), y], |g, v| g.add(v[0], v[1]).unwrap(), 1e-6);
        check(vec![x], |g, v| g.channel_mask(v[0], &[1.0, 0.0]).unwrap(), 1e-6);
        let logits = rand_tensor(&mut rng, &[4, 3]);
        check(vec![logits], |g, v| g.cross_entropy(v[0], &[0, 2, 1, 2]).unwrap(), 1e-6);
        let a = rand_tensor(&mut rng, &[5]);
        check(vec![a], |g, v| g.abs_sum_scaled(v[0], 0.7), 1e-6);
    }

    #[test]
    fn relu_examples() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::from_vec(vec![-1.5, 0.7, -1.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.7, 0.0]);
        let s = g.abs_sum_scaled(y, 1.0);
        let grads = g.gradients(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn uniform_logits_cross_entropy() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(&[1, 10]));
        let ce = g.cross_entropy(l, &[3]).unwrap();
        assert!((g.value(ce).item() - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn backward_twice_rejected() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::from_vec(vec![1.0, -2.0]), true);
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let s = g.abs_sum_scaled(w, 1.0);
        g.backward(s, &mut store).unwrap();
        assert!(g.backward(s, &mut store).is_err());
        assert_eq!(store.get(id).grad.as_ref().unwrap().data(), &[1.0, -1.0]);
    }

    #[test]
    fn grads_accumulate_across_graphs() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::from_vec(vec![3.0]), true);
        for _ in 0..2 {
            let mut g = Graph::new();
            let w = g.param(&store, id);
            let s = g.abs_sum_scaled(w, 2.0);
            g.backward(s, &mut store).unwrap();
        }
        assert_eq!(store.get(id).grad.as_ref().unwrap().data(), &[4.0]);
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::from_vec(vec![1.0, 2.0]));
        let y = g.relu(x);
        assert!(g.gradients(y).is_err());
    }

    #[test]
    fn shape_errors_name_op() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let e = g.conv2d(x, w, 1, 1).unwrap_err().to_string();
        assert!(e.contains("conv2d") && e.contains("[1, 2, 4, 4]"), "{e}");
    }

    #[test]
    fn deterministic_forward() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let x = rand_tensor(&mut rng, &[2, 3, 6, 6]);
            let w = rand_tensor(&mut rng, &[4, 3, 3, 3]);
            let mut g = Graph::new();
            let (x, w) = (g.constant(x), g.constant(w));
            let y = g.conv2d(x, w, 1, 1).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run().data(), run().data());
    }
}
