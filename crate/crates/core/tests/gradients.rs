mod common;

use common::*;
use planting::{DistillLoss, Error, PlantableNetwork, Tape, Tensor4};

fn analytic(
    net: &PlantableNetwork,
    x: &Tensor4,
    teacher: Option<&Tensor4>,
    targets: &[usize],
    loss: &DistillLoss,
) -> Vec<Tensor4> {
    let mut tape = Tape::new();
    let (logits, params) = net.forward_taped(&mut tape, x.clone()).unwrap();
    let l = loss.record(&mut tape, logits, teacher, targets).unwrap();
    let grads = tape.backward(l).unwrap();
    params.iter().map(|&p| grads.get(p).unwrap()).collect()
}

fn check_full_network(loss: DistillLoss) {
    let net = cifar_net(4, 11);
    let mut r = rng(5);
    let x = random_tensor([2, 3, 32, 32], &mut r);
    let teacher = random_tensor([2, 10, 1, 1], &mut r);
    let targets = [3, 7];
    let g = analytic(&net, &x, Some(&teacher), &targets, &loss);
    let (worst, checked) = gradient_check(
        &net,
        |n| {
            loss.value(&n.forward(&x).unwrap(), Some(&teacher), &targets)
                .unwrap()
        },
        &g,
        1e-5,
    );
    assert_eq!(checked, net.param_count());
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn full_network_cross_entropy_gradients() {
    check_full_network(DistillLoss::new(1.0).unwrap());
}

#[test]
fn full_network_distillation_gradients() {
    check_full_network(DistillLoss::new(0.5).unwrap());
}

#[test]
fn sum_loss_gradient_is_ones() {
    let mut r = rng(1);
    let mut tape = Tape::new();
    let x = tape.param(random_tensor([2, 3, 4, 5], &mut r));
    let s = tape.sum(x).unwrap();
    let g = tape.backward(s).unwrap().get(x).unwrap();
    assert!(g.data().iter().all(|&v| v == 1.0));
}

#[test]
fn op_gradients_match_finite_differences() {
    let mut r = rng(2);
    let x0 = random_tensor([2, 3, 6, 4], &mut r);
    let w0 = random_tensor([4, 3, 3, 3], &mut r);
    let b0 = random_tensor([4, 1, 1, 1], &mut r);
    let f0 = random_tensor([5, 24, 1, 1], &mut r);
    let fb = random_tensor([5, 1, 1, 1], &mut r);
    let targets = [1, 4];
    // conv -> relu -> pool -> linear -> CE
    let eval = |x: &Tensor4, w: &Tensor4, b: &Tensor4, taped: bool| -> (f64, Vec<Tensor4>) {
        let mut tape = Tape::new();
        let vars = [x, w, b, &f0, &fb].map(|t| tape.param(t.clone()));
        let c = tape.conv2d(vars[0], vars[1], vars[2]).unwrap();
        let a = tape.relu(c).unwrap();
        let p = tape.maxpool2x2(a).unwrap();
        let z = tape.linear(p, vars[3], vars[4]).unwrap();
        let l = tape.softmax_cross_entropy(z, &targets).unwrap();
        let value = tape.value(l).unwrap().data()[0];
        if !taped {
            return (value, vec![]);
        }
        let g = tape.backward(l).unwrap();
        (value, vars.iter().map(|&v| g.get(v).unwrap()).collect())
    };
    let (_, grads) = eval(&x0, &w0, &b0, true);
    let h = 1e-6;
    for (which, base) in [&x0, &w0, &b0].into_iter().enumerate() {
        for i in 0..base.len() {
            let shift = |d: f64| {
                let mut t = base.clone();
                t.data_mut()[i] += d;
                let mut args = [x0.clone(), w0.clone(), b0.clone()];
                args[which] = t;
                eval(&args[0], &args[1], &args[2], false).0
            };
            let fd = (shift(h) - shift(-h)) / (2.0 * h);
            let a = grads[which].data()[i];
            assert!(
                rel_err(a, fd) < 1e-5,
                "tensor {which} index {i}: {a} vs {fd}"
            );
        }
    }
}

#[test]
fn backward_is_deterministic() {
    let net = cifar_net(4, 3);
    let mut r = rng(9);
    let x = random_tensor([3, 3, 32, 32], &mut r);
    let loss = DistillLoss::new(1.0).unwrap();
    let a = analytic(&net, &x, None, &[0, 1, 2], &loss);
    let b = analytic(&net, &x, None, &[0, 1, 2], &loss);
    assert!(a.iter().zip(&b).all(|(p, q)| p.bit_eq(q)));
}

#[test]
fn foreign_variable_is_rejected() {
    let mut a = Tape::new();
    let mut b = Tape::new();
    let x = a.param(Tensor4::scalar(1.0));
    let y = b.param(Tensor4::scalar(1.0));
    let s = a.sum(x).unwrap();
    assert!(matches!(b.backward(s), Err(Error::NotRecorded)));
    assert!(matches!(b.sum(x), Err(Error::NotRecorded)));
    let _ = y;
}
