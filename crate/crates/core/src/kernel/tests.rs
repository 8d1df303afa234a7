use rand::Rng as _;

use super::*;
use crate::rng::stream;

fn rand_tensor(rng: &mut crate::rng::Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Central differences of a scalar function of one tensor.
fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
    let h = 1e-5;
    (0..x.len())
        .map(|i| {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

#[test]
fn matmul_identity() {
    let mut g = Graph::new();
    let eye = g.input(Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap());
    let a = Tensor::new(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
    let av = g.input(a.clone());
    let y = g.matmul(eye, av).unwrap();
    assert_eq!(g.value(y), &a);
}

#[test]
fn matmul_shape_error_names_op_and_shapes() {
    let mut g = Graph::new();
    let a = g.input(Tensor::zeros(&[2, 3]));
    let b = g.input(Tensor::zeros(&[2, 3]));
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn softmax_uniform_on_zeros() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[1, 4]));
    let y = g.softmax(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.25; 4]);
}

#[test]
fn softmax_empty_axis_rejected() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[3, 0]));
    assert!(g.softmax(x).is_err());
}

#[test]
fn sum_loss_gives_ones() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::new(vec![4], vec![0.3, -1.0, 2.0, 5.0]).unwrap());
    let mut g = Graph::new();
    let wv = g.param(&store, w);
    let loss = g.sum(wv);
    g.backward(loss, &mut store).unwrap();
    assert_eq!(store.grad(w), &[1.0; 4]);
}

#[test]
fn repeated_backward_accumulates() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let mut g = Graph::new();
    let wv = g.param(&store, w);
    let loss = g.sum(wv);
    g.backward(loss, &mut store).unwrap();
    g.backward(loss, &mut store).unwrap();
    assert_eq!(store.grad(w), &[2.0, 2.0]);
    store.zero_grad();
    assert_eq!(store.grad(w), &[0.0, 0.0]);
}

#[test]
fn squared_error_at_target_has_zero_grad() {
    let t = Tensor::new(vec![3], vec![0.5, -0.25, 4.0]).unwrap();
    let mut store = ParamStore::new();
    let w = store.add("w", t.clone());
    let mut g = Graph::new();
    let wv = g.param(&store, w);
    let tv = g.input(t);
    let d = g.sub(wv, tv).unwrap();
    let sq = g.mul(d, d).unwrap();
    let loss = g.mean(sq).unwrap();
    g.backward(loss, &mut store).unwrap();
    assert_eq!(store.grad(w), &[0.0; 3]);
}

#[test]
fn non_scalar_loss_rejected() {
    let mut store = ParamStore::new();
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[2]));
    assert!(g.backward(x, &mut store).is_err());
}

#[test]
fn grad_reversal_is_identity_forward_and_negates_backward() {
    let mut rng = stream(3, &[]);
    let x0 = rand_tensor(&mut rng, &[3, 4]);
    let weights = rand_tensor(&mut rng, &[3, 4]);
    let lambda = 0.7;
    let mut store = ParamStore::new();
    let mut g = Graph::new();
    let x = g.leaf(x0.clone());
    let r = g.grad_reversal(x, lambda);
    assert_eq!(
        g.value(r).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        x0.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    let wv = g.input(weights.clone());
    let p = g.mul(r, wv).unwrap();
    let loss = g.sum(p);
    let grads = g.backward(loss, &mut store).unwrap();
    let gx = grads.get(x).unwrap();
    for (gi, wi) in gx.iter().zip(weights.data()) {
        assert_eq!(*gi, -lambda * wi);
    }
}

#[test]
fn conv1d_matches_finite_differences() {
    let mut rng = stream(11, &[]);
    let x0 = rand_tensor(&mut rng, &[2, 2, 16]);
    let w0 = rand_tensor(&mut rng, &[3, 2, 5]);
    let b0 = rand_tensor(&mut rng, &[3]);
    let r = rand_tensor(&mut rng, &[2, 3, 8]);
    let eval = |x: &Tensor, w: &Tensor, b: &Tensor| -> f64 {
        let mut g = Graph::new();
        let (x, w, b) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
        let y = g.conv1d(x, w, b, 2, 2).unwrap();
        g.value(y).data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    };
    let mut store = ParamStore::new();
    let mut g = Graph::new();
    let (x, w, b) = (g.leaf(x0.clone()), g.leaf(w0.clone()), g.leaf(b0.clone()));
    let y = g.conv1d(x, w, b, 2, 2).unwrap();
    assert_eq!(g.shape(y), &[2, 3, 8]);
    let rv = g.input(r.clone());
    let p = g.mul(y, rv).unwrap();
    let loss = g.sum(p);
    let grads = g.backward(loss, &mut store).unwrap();
    let nx = numeric_grad(&x0, &|t| eval(t, &w0, &b0));
    let nw = numeric_grad(&w0, &|t| eval(&x0, t, &b0));
    let nb = numeric_grad(&b0, &|t| eval(&x0, &w0, t));
    assert!(max_rel_err(grads.get(x).unwrap(), &nx) < 1e-4);
    assert!(max_rel_err(grads.get(w).unwrap(), &nw) < 1e-4);
    assert!(max_rel_err(grads.get(b).unwrap(), &nb) < 1e-4);
}

#[test]
fn two_layer_relu_l1_matches_finite_differences() {
    let mut rng = stream(5, &[]);
    let x = rand_tensor(&mut rng, &[6, 4]);
    let t = rand_tensor(&mut rng, &[6, 2]);
    let mut store = ParamStore::new();
    let l1 = Dense::new(&mut store, "l1", 4, 8, &mut rng);
    let l2 = Dense::new(&mut store, "l2", 8, 2, &mut rng);
    // Nonzero biases so the check exercises them.
    for id in [l1.b, l2.b] {
        let v = rand_tensor(&mut rng, store.value(id).shape());
        *store.value_mut(id) = v;
    }
    let loss_of = |store: &ParamStore| -> (Graph, Var) {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let h = l1.forward(&mut g, store, xv).unwrap();
        let h = g.relu(h);
        let y = l2.forward(&mut g, store, h).unwrap();
        let tv = g.input(t.clone());
        let d = g.sub(y, tv).unwrap();
        let a = g.abs(d);
        let loss = g.mean(a).unwrap();
        (g, loss)
    };
    let (g, loss) = loss_of(&store);
    g.backward(loss, &mut store).unwrap();
    for id in store.trainable_ids() {
        let analytic = store.grad(id).to_vec();
        let base = store.value(id).clone();
        let numeric = numeric_grad(&base, &|p| {
            let mut s = store.clone();
            *s.value_mut(id) = p.clone();
            let (g, l) = loss_of(&s);
            g.value(l).data()[0]
        });
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < 1e-4, "{}: {err}", store.name(id));
    }
}

#[test]
fn lstm_cell_matches_finite_differences() {
    let mut rng = stream(9, &[]);
    let (bsz, input, hid) = (3, 4, 5);
    let tensors: Vec<Tensor> = [
        vec![bsz, input],
        vec![bsz, hid],
        vec![bsz, hid],
        vec![4 * hid, input],
        vec![4 * hid, hid],
        vec![4 * hid],
    ]
    .iter()
    .map(|s| rand_tensor(&mut rng, s))
    .collect();
    let r = rand_tensor(&mut rng, &[bsz, 2 * hid]);
    let eval = |ts: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let v: Vec<Var> = ts.iter().map(|t| g.input(t.clone())).collect();
        let y = g.lstm_cell(v[0], v[1], v[2], v[3], v[4], v[5]).unwrap();
        g.value(y).data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    };
    let mut store = ParamStore::new();
    let mut g = Graph::new();
    let v: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone())).collect();
    let y = g.lstm_cell(v[0], v[1], v[2], v[3], v[4], v[5]).unwrap();
    let rv = g.input(r.clone());
    let p = g.mul(y, rv).unwrap();
    let loss = g.sum(p);
    let grads = g.backward(loss, &mut store).unwrap();
    for i in 0..tensors.len() {
        let numeric = numeric_grad(&tensors[i], &|t| {
            let mut ts = tensors.clone();
            ts[i] = t.clone();
            eval(&ts)
        });
        let err = max_rel_err(grads.get(v[i]).unwrap(), &numeric);
        assert!(err < 1e-4, "input {i}: {err}");
    }
}

#[test]
fn batchnorm_eval_mode_leaves_store_untouched() {
    let mut rng = stream(1, &[]);
    let mut store = ParamStore::new();
    let bn = BatchNorm1d::new(&mut store, "bn", 3);
    let before = store.checksum();
    let mut g = Graph::new();
    let x = g.input(rand_tensor(&mut rng, &[4, 3, 5]));
    let mut updates = Vec::new();
    bn.forward(&mut g, &store, x, Mode::Eval, &mut updates).unwrap();
    assert!(updates.is_empty());
    assert_eq!(store.checksum(), before);
    bn.forward(&mut g, &store, x, Mode::Train, &mut updates).unwrap();
    updates[0].apply(&mut store);
    assert_ne!(store.checksum(), before);
}
