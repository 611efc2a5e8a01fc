use super::graph::ParamSet;

/// Plain SGD: `value -= lr * grad`, then gradients are zeroed.
pub fn sgd_step(params: &mut ParamSet, lr: f32) {
    for p in params.iter_mut() {
        let updated = p.value.zip_map(&p.grad, |v, g| v - lr * g).expect("grad shape equals value shape");
        p.value = updated;
    }
    params.zero_grads();
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::Tensor;

    #[test]
    fn single_step() {
        let mut ps = ParamSet::new();
        let id = ps.add("v", Tensor::from_vec(vec![1.0]).unwrap());
        ps.get_mut(id).grad = Tensor::from_vec(vec![2.0]).unwrap();
        sgd_step(&mut ps, 0.5);
        assert_eq!(ps.value(id).data(), &[0.0]);
        assert_eq!(ps.get(id).grad.data(), &[0.0]);
        sgd_step(&mut ps, 0.5);
        assert_eq!(ps.value(id).data(), &[0.0]);
    }

    #[test]
    fn quadratic_iteration() {
        // f(x) = x^2, f' = 2x, x <- x - 0.25 * 2x = x / 2
        let mut ps = ParamSet::new();
        let id = ps.add("x", Tensor::from_vec(vec![1.0]).unwrap());
        let mut trace = vec![];
        for _ in 0..2 {
            let mut g = Graph::new();
            let x = g.param(&ps, id);
            let x2 = g.mul(x, x).unwrap();
            let sq = g.sum(x2);
            g.backward(sq, &mut ps).unwrap();
            sgd_step(&mut ps, 0.25);
            trace.push(ps.value(id).data()[0]);
        }
        assert_eq!(trace, vec![0.5, 0.25]);
    }
}
