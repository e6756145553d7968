use autodiff::fd::{central_directional, central_gradient, relative_error};
use autodiff::{Dual, Graph, Mat, ParamSet, RowMask, Scalar, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat<f64> {
    Mat::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Exercises every op once; returns the scalar loss node.
fn composite<T: Scalar>(g: &mut Graph<T>, p: &[Var]) -> Var {
    let (x, w, b, gain, bias, table) = (p[0], p[1], p[2], p[3], p[4], p[5]);
    let h = g.matmul(x, w);
    let h = g.add_row(h, b);
    let h = g.layer_norm(h, gain, bias);
    let t = g.tanh(h);
    let s = g.sigmoid(h);
    let m = g.mul(t, s);
    let r = g.relu(h);
    let m = g.add(m, r);
    let left = g.slice_cols(m, 0, 2);
    let right = g.slice_cols(m, 2, 2);
    let att = g.matmul_t(left, right);
    let att = g.scale(att, 0.7);
    let att = g.softmax_rows(att, RowMask::Causal);
    let mixed = g.matmul(att, m);
    let cat = g.concat_cols(&[left, right]);
    let diff = g.sub(mixed, cat);
    let top = g.slice_rows(diff, 0, 2);
    let bottom = g.slice_rows(diff, 2, 1);
    let stacked = g.concat_rows(&[bottom, top]);
    let emb = g.gather(table, &[2, 0, 2]);
    let dots = g.row_dot(stacked, emb);
    let ls = g.log_sigmoid(dots);
    let pooled = g.mean_rows(stacked);
    let scalar = g.sum(pooled);
    let scaled = g.scale_by(ls, scalar);
    let logits = g.matmul_t(stacked, table);
    let ce = g.cross_entropy(logits, &[1, 0, 2], Some(&[true, true, true, false]));
    let tail = g.sum(scaled);
    g.add(ce, tail)
}

fn params(seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    ps.add("x", random_mat(&mut rng, 3, 3));
    ps.add("w", random_mat(&mut rng, 3, 4));
    ps.add("b", random_mat(&mut rng, 1, 4));
    ps.add("gain", random_mat(&mut rng, 1, 4));
    ps.add("bias", random_mat(&mut rng, 1, 4));
    ps.add("table", random_mat(&mut rng, 4, 4));
    ps
}

fn loss_at(ps: &ParamSet, flat: &[f64]) -> f64 {
    let mut q = ps.clone();
    q.set_flat(flat);
    let mut g = Graph::<f64>::new();
    let vars = q.bind(&mut g);
    let out = composite(&mut g, &vars);
    g.scalar_value(out)
}

fn grad_at(ps: &ParamSet, flat: &[f64]) -> Vec<f64> {
    let mut q = ps.clone();
    q.set_flat(flat);
    let mut g = Graph::<f64>::new();
    let vars = q.bind(&mut g);
    let out = composite(&mut g, &vars);
    q.flat_grad(&g.backward(out), &vars)
}

#[test]
fn backward_matches_central_differences() {
    for seed in 0..5 {
        let ps = params(seed);
        let x = ps.flat();
        let analytic = grad_at(&ps, &x);
        let numeric = central_gradient(|z| loss_at(&ps, z), &x, 1e-5);
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-6, "seed {seed}: relative error {err}");
    }
}

#[test]
fn dual_tangent_of_gradient_is_hessian_vector_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for seed in 0..3 {
        let ps = params(seed);
        let x = ps.flat();
        let v: Vec<f64> = (0..x.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut g = Graph::<Dual>::new();
        let vars = ps.bind_dual(&mut g, &v);
        let out = composite(&mut g, &vars);
        let grads = g.backward(out);
        let flat = ps.flat_grad(&grads, &vars);
        let hv: Vec<f64> = flat.iter().map(|d| d.eps).collect();
        let primal: Vec<f64> = flat.iter().map(|d| d.re).collect();

        // Primal part must equal the plain f64 gradient bit-for-bit in value.
        let plain = grad_at(&ps, &x);
        assert!(relative_error(&primal, &plain) < 1e-12);

        // Tangent part vs finite differences of the gradient along v.
        let numeric: Vec<f64> = (0..x.len())
            .map(|i| central_directional(|z| grad_at(&ps, z)[i], &x, &v, 1e-5))
            .collect();
        let err = relative_error(&hv, &numeric);
        assert!(err < 1e-6, "seed {seed}: hvp relative error {err}");
    }
}

#[test]
fn detach_blocks_gradient_and_tangent() {
    let mut g = Graph::<Dual>::new();
    let a = g.leaf(Mat::from_vec(1, 2, vec![Dual::new(1.0, 1.0), Dual::new(2.0, 1.0)]));
    let d = g.detach(a);
    assert_eq!(g.value(d).data[0].eps, 0.0);
    let prod = g.mul(a, d);
    let s = g.sum(prod);
    let grads = g.backward(s);
    // d(a·stop(a))/da = stop(a), so the gradient is the primal value only.
    let ga = grads.get(a).unwrap();
    assert_eq!(ga.data[0].re, 1.0);
    assert_eq!(ga.data[1].re, 2.0);
    assert_eq!(ga.data[0].eps, 0.0);
}

#[test]
fn masked_softmax_entries_are_exactly_zero() {
    let mut g = Graph::<f64>::new();
    let a = g.leaf(Mat::from_vec(2, 3, vec![0.1, 5.0, -1.0, 0.3, 0.2, 9.0]));
    let s = g.softmax_rows(a, RowMask::Cols(vec![true, false, true]));
    let v = g.value(s);
    assert_eq!(v.get(0, 1), 0.0);
    assert_eq!(v.get(1, 1), 0.0);
    assert!((v.get(0, 0) + v.get(0, 2) - 1.0).abs() < 1e-15);
}
