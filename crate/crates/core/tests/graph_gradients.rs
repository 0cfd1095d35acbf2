use fssr_core::gradcheck::{central_difference, relative_error};
use fssr_core::nn::{BatchNorm, Graph, Mode, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

/// Contracts `out` with a fixed random tensor so every output element matters.
fn project(g: &mut Graph, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = random(g.shape(out), &mut rng);
    let value: f64 = g.value(out).data().iter().zip(r.data()).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
    g.scalar_with_grads("project", &[out], value, vec![Some(r)]).unwrap()
}

/// Compares graph gradients w.r.t. every input against central differences.
fn check<F>(inputs: Vec<Tensor>, build: F, tol: f64)
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let run = |ins: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.input_with_grad(t.clone())).collect();
        let out = build(&mut g, &vars);
        let loss = project(&mut g, out, 99);
        (g, vars, loss)
    };
    let (g, vars, loss) = run(&inputs);
    let grads = g.backward(loss).unwrap();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).unwrap().to_f64();
        let x = inputs[which].to_f64();
        let fd = central_difference(
            |v| {
                let mut ins = inputs.clone();
                ins[which] = Tensor::from_f64(inputs[which].shape(), v).unwrap();
                let (g, _, loss) = run(&ins);
                g.value(loss).item() as f64
            },
            &x,
            1e-2,
        );
        let err = relative_error(&analytic, &fd);
        assert!(err < tol, "input {which}: relative error {err}");
    }
}

#[test]
fn conv2d_strided_padded() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = vec![random(&[2, 3, 7, 6], &mut rng), random(&[4, 3, 3, 2], &mut rng), random(&[4], &mut rng)];
    check(inputs, |g, v| g.conv2d(v[0], v[1], Some(v[2]), (2, 1), (1, 1)).unwrap(), 2e-3);
}

#[test]
fn conv2d_rectangular_stride() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = vec![random(&[1, 2, 9, 11], &mut rng), random(&[3, 2, 3, 3], &mut rng)];
    check(inputs, |g, v| g.conv2d(v[0], v[1], None, (3, 2), (0, 1)).unwrap(), 2e-3);
}

#[test]
fn max_pool_overlapping_windows() {
    // Distinct, well-separated values keep the argmax stable under perturbation.
    let mut vals: Vec<f32> = (0..2 * 2 * 7 * 8).map(|i| i as f32 * 0.37).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in (1..vals.len()).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    let x = Tensor::from_vec(&[2, 2, 7, 8], vals).unwrap();
    check(vec![x.clone()], |g, v| g.max_pool2d(v[0], (3, 3), (2, 2), (0, 0)).unwrap(), 1e-3);
    check(vec![x.clone()], |g, v| g.max_pool2d(v[0], (3, 3), (2, 2), (1, 1)).unwrap(), 1e-3);
    check(vec![x], |g, v| g.max_pool2d(v[0], (5, 3), (3, 2), (0, 0)).unwrap(), 1e-3);
}

#[test]
fn linear_tanh_relu_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = vec![random(&[3, 5], &mut rng), random(&[4, 5], &mut rng), random(&[4], &mut rng)];
    check(
        inputs,
        |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2])).unwrap();
            let t = g.tanh(y);
            let r = g.relu(y);
            let s = g.add(t, r).unwrap();
            let s = g.scale(s, 1.5);
            let s = g.reshape(s, &[3, 2, 2]).unwrap();
            g.mean_axis(s, 1).unwrap()
        },
        2e-3,
    );
}

#[test]
fn batch_norm_training_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let bn = BatchNorm::new(&mut store, "bn", 3);
    store.set(bn.ids.scale, Tensor::from_vec(&[3], vec![1.3, 0.7, -0.4]).unwrap()).unwrap();
    store.set(bn.ids.shift, Tensor::from_vec(&[3], vec![0.1, -0.2, 0.3]).unwrap()).unwrap();
    let x = random(&[4, 3, 2, 2], &mut rng);

    check(vec![x.clone()], |g, v| bn.forward(g, &store, v[0], Mode::Train).unwrap(), 5e-3);
    check(vec![x.clone()], |g, v| bn.forward(g, &store, v[0], Mode::Eval).unwrap(), 2e-3);

    let run = |s: &ParamStore| {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = bn.forward(&mut g, s, xv, Mode::Train).unwrap();
        let loss = project(&mut g, y, 7);
        (g, loss)
    };
    let (g, loss) = run(&store);
    let grads = g.backward(loss).unwrap();
    for id in [bn.ids.scale, bn.ids.shift] {
        let analytic = grads.param(id).unwrap().to_f64();
        let fd = central_difference(
            |v| {
                let mut s = store.clone();
                s.set(id, Tensor::from_f64(&[3], v).unwrap()).unwrap();
                let (g, loss) = run(&s);
                g.value(loss).item() as f64
            },
            &store.get(id).to_f64(),
            1e-2,
        );
        assert!(relative_error(&analytic, &fd) < 2e-3);
    }
}

#[test]
fn batch_norm_updates_running_statistics_in_training_only() {
    let mut store = ParamStore::new();
    let bn = BatchNorm::new(&mut store, "bn", 1);
    let x = Tensor::from_vec(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    bn.forward(&mut g, &store, xv, Mode::Train).unwrap();
    let updates = g.take_buffer_updates();
    assert_eq!(updates.len(), 2);
    assert!((updates[0].1.data()[0] - 0.25).abs() < 1e-6);
    // Unbiased variance of [1, 2, 3, 4] is 5/3.
    assert!((updates[1].1.data()[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-6);

    let mut g = Graph::new();
    let xv = g.input(x);
    bn.forward(&mut g, &store, xv, Mode::Eval).unwrap();
    assert!(g.take_buffer_updates().is_empty());
}

#[test]
fn shared_input_accumulates() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    check(
        vec![random(&[2, 3], &mut rng)],
        |g, v| {
            let a = g.tanh(v[0]);
            g.add(a, v[0]).unwrap()
        },
        2e-3,
    );
}
