//! Finite-difference gradient checks for every differentiable op.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tensor::gradcheck::check_full;
use tensor::{concat, ConvSpec, LinearMap, PadMode, Result, Tape, Tensor, Var};

const TOL: f64 = 1e-5;
const H: f64 = 1e-5;

fn rand(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Reduces any tensor to a scalar through a fixed random projection so
/// that every output entry contributes a distinct weight.
fn project<'t>(t: &'t Tape, v: Var<'t>) -> Result<Var<'t>> {
    let w = t.constant(rand(&v.shape(), 999))?;
    v.mul(w)?.sum()
}

macro_rules! gc {
    ($name:ident, [$($shape:expr),*], |$t:ident, $v:ident| $body:expr) => {
        #[test]
        fn $name() {
            let inputs: Vec<Tensor> = vec![$($shape),*]
                .into_iter()
                .enumerate()
                .map(|(i, s): (usize, Vec<usize>)| rand(&s, 17 + i as u64))
                .collect();
            let r = check_full(|$t: &Tape, $v: &[Var]| { let out: Var = $body?; project($t, out) }, &inputs, H).unwrap();
            assert!(r.passes(TOL), "{:?}", r);
        }
    };
}

gc!(add, [vec![2, 3], vec![2, 3]], |t, v| v[0].add(v[1]));
gc!(sub, [vec![2, 3], vec![2, 3]], |t, v| v[0].sub(v[1]));
gc!(mul, [vec![2, 3], vec![2, 3]], |t, v| v[0].mul(v[1]));
gc!(div, [vec![2, 3], vec![2, 3]], |t, v| v[0].div(v[1].square()?.add_scalar(0.5)?));
gc!(scale_and_shift, [vec![4]], |t, v| v[0].scale(-1.7)?.add_scalar(0.3));
gc!(square, [vec![5]], |t, v| v[0].square());
gc!(relu, [vec![3, 4]], |t, v| v[0].relu());
gc!(sigmoid, [vec![6]], |t, v| v[0].sigmoid());
gc!(softplus, [vec![6]], |t, v| v[0].softplus());
gc!(exp, [vec![6]], |t, v| v[0].exp());
gc!(soft_threshold, [vec![2, 5], vec![2, 5]], |t, v| v[0].scale(2.0)?.soft_threshold(v[1].square()?.scale(0.1)?));
gc!(conv_zero_s1, [vec![1, 2, 5, 5], vec![3, 2, 3, 3]], |t, v| v[0].conv2d(v[1], ConvSpec::new(PadMode::Zero, 1)));
gc!(conv_circ_s2, [vec![2, 2, 6, 6], vec![2, 2, 3, 3]], |t, v| v[0].conv2d(v[1], ConvSpec::new(PadMode::Circular, 2)));
gc!(conv_depthwise, [vec![1, 3, 5, 4], vec![3, 1, 3, 3]], |t, v| v[0].conv2d(v[1], ConvSpec::depthwise(PadMode::Zero, 3)));
gc!(conv_transpose, [vec![1, 2, 3, 3], vec![2, 3, 3, 3]], |t, v| v[0].conv2d_transpose(v[1], ConvSpec::new(PadMode::Zero, 2), (6, 6)));
gc!(mul_channels, [vec![2, 3, 2, 2], vec![2, 3]], |t, v| v[0].mul_channels(v[1]));
gc!(add_channels, [vec![2, 3, 2, 2], vec![3]], |t, v| v[0].add_channels(v[1]));
gc!(matmul, [vec![3, 4], vec![4, 2]], |t, v| v[0].matmul(v[1]));
gc!(matmul_transposed, [vec![4, 3], vec![2, 4]], |t, v| v[0].matmul_t(v[1], true, true));
gc!(matmul_batched, [vec![2, 3, 4], vec![2, 4, 2]], |t, v| v[0].matmul(v[1]));
gc!(matmul_broadcast_weight, [vec![2, 3, 4], vec![2, 4]], |t, v| v[0].matmul_t(v[1], false, true));
gc!(matmul_broadcast_lhs, [vec![3, 2], vec![2, 3, 4]], |t, v| v[0].matmul_t(v[1], true, false));
gc!(fully_connected, [vec![2, 5], vec![3, 5], vec![3]], |t, v| v[0].fully_connected(v[1], v[2]));
gc!(softmax_last, [vec![2, 5]], |t, v| v[0].softmax(1));
gc!(softmax_first, [vec![4, 3]], |t, v| v[0].softmax(0));
gc!(layer_norm, [vec![2, 4, 3], vec![4], vec![4]], |t, v| v[0].layer_norm(v[1], v[2], 1, 1e-6));
gc!(concat_channels, [vec![1, 2, 3, 3], vec![1, 1, 3, 3]], |t, v| concat(&[v[0], v[1]], 1));
gc!(reshape_permute, [vec![2, 3, 4]], |t, v| v[0].permute(&[2, 0, 1])?.reshape(vec![4, 6]));
gc!(narrow, [vec![2, 5, 3]], |t, v| v[0].narrow(1, 1, 3));
gc!(upsample2, [vec![1, 2, 3, 4]], |t, v| v[0].upsample2());
gc!(avg_pool2, [vec![1, 2, 4, 6]], |t, v| v[0].avg_pool2());
gc!(global_avg_pool, [vec![2, 3, 3, 2]], |t, v| v[0].global_avg_pool());
gc!(sum, [vec![3, 2]], |t, v| v[0].square()?.sum());
gc!(mean, [vec![3, 2]], |t, v| v[0].square()?.mean());

struct Dense(Tensor);

impl LinearMap for Dense {
    fn in_shape(&self) -> Vec<usize> {
        vec![self.0.shape()[1]]
    }
    fn out_shape(&self) -> Vec<usize> {
        vec![self.0.shape()[0]]
    }
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (m, n) = (self.0.shape()[0], self.0.shape()[1]);
        Tensor::new(vec![m], (0..m).map(|i| (0..n).map(|j| self.0.data()[i * n + j] * x.data()[j]).sum()).collect())
    }
    fn adjoint(&self, y: &Tensor) -> Result<Tensor> {
        let (m, n) = (self.0.shape()[0], self.0.shape()[1]);
        Tensor::new(vec![n], (0..n).map(|j| (0..m).map(|i| self.0.data()[i * n + j] * y.data()[i]).sum()).collect())
    }
}

#[test]
fn linear_map_op() {
    let a: Rc<dyn LinearMap> = Rc::new(Dense(rand(&[3, 4], 5)));
    let r = check_full(
        |t, v| {
            let y = v[0].linear_map(a.clone())?;
            let z = y.square()?.linear_adjoint(a.clone())?;
            project(t, z)
        },
        &[rand(&[4], 6)],
        H,
    )
    .unwrap();
    assert!(r.passes(TOL), "{:?}", r);
}

#[test]
fn conv_energy_kernel_gradient_per_element() {
    let x = rand(&[1, 2, 5, 5], 1);
    let k = rand(&[3, 2, 3, 3], 2);
    let r = check_full(
        |_t, v| v[0].conv2d(v[1], ConvSpec::new(PadMode::Zero, 1))?.square()?.sum()?.scale(0.5),
        &[x, k],
        H,
    )
    .unwrap();
    assert!(r.max_entry_error <= 1e-6, "{:?}", r);
}

#[test]
fn composed_chain_conv_softmax_fc_mse() {
    let inputs = vec![
        rand(&[2, 2, 4, 4], 1),
        rand(&[3, 2, 3, 3], 2),
        rand(&[5, 12], 3),
        rand(&[5], 4),
        rand(&[2, 5], 5),
    ];
    let r = check_full(
        |_t, v| {
            let y = v[0].conv2d(v[1], ConvSpec::new(PadMode::Zero, 2))?; // [2,3,2,2]
            let s = y.reshape(vec![2, 12])?.softmax(1)?;
            let o = s.fully_connected(v[2], v[3])?;
            o.sub(v[4])?.square()?.mean()
        },
        &inputs,
        H,
    )
    .unwrap();
    assert!(r.relative_error <= 1e-5, "{:?}", r);
}

#[test]
fn shared_parameter_accumulates() {
    let w = Tensor::new(vec![2], vec![0.5, -1.0]).unwrap();
    let tape = Tape::new();
    let a = tape.param("w", &w).unwrap();
    let b = tape.param("w", &w).unwrap();
    let loss = a.mul(b).unwrap().sum().unwrap();
    let g = tape.backward(loss).unwrap();
    let grads = tape.param_grads(&g);
    assert_eq!(grads.len(), 1);
    assert_eq!(grads[0].1.data(), &[1.0, -2.0]);
}
