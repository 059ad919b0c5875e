//! Randomised instances of every differentiable tape operation, ready to be
//! fed to [`check_gradients`](crate::check_gradients).

use rand::Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// One operation applied to concrete random inputs.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub f: OpFn,
}

impl std::fmt::Debug for OpCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let shapes: Vec<_> = self.inputs.iter().map(|t| t.shape().to_vec()).collect();
        write!(f, "{}{:?}", self.name, shapes)
    }
}

fn case(name: &'static str, inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> OpCase {
    OpCase {
        name,
        inputs,
        f: Box::new(f),
    }
}

/// `per_op` random instances of each differentiable operation.
pub fn op_catalog<R: Rng + ?Sized>(rng: &mut R, per_op: usize) -> Vec<OpCase> {
    let mut cases = Vec::new();
    for _ in 0..per_op {
        let (r, c) = (2 + rng_dim(rng, 4), 2 + rng_dim(rng, 4));
        let k = 1 + rng_dim(rng, 4);
        let mut randn = |shape: Vec<usize>| Tensor::<f64>::randn(shape, 1.0, rng);

        cases.push(case("add", vec![randn(vec![r, c]), randn(vec![r, c])], |t, v| t.add(v[0], v[1])));
        cases.push(case("sub", vec![randn(vec![r, c]), randn(vec![r, c])], |t, v| t.sub(v[0], v[1])));
        cases.push(case("mul", vec![randn(vec![r, c]), randn(vec![r, c])], |t, v| t.mul(v[0], v[1])));
        cases.push(case("scale", vec![randn(vec![r, c])], |t, v| Ok(t.scale(v[0], -1.7))));
        cases.push(case("add_scalar", vec![randn(vec![r, c])], |t, v| Ok(t.add_scalar(v[0], 0.3))));
        cases.push(case("exp", vec![randn(vec![r, c])], |t, v| Ok(t.exp(v[0]))));
        cases.push(case(
            "log",
            vec![Tensor::rand_uniform(vec![r, c], 0.5, 2.0, rng)],
            |t, v| Ok(t.log(v[0])),
        ));
        let mut randn = |shape: Vec<usize>| Tensor::<f64>::randn(shape, 1.0, rng);
        cases.push(case("relu", vec![randn(vec![r, c])], |t, v| Ok(t.relu(v[0]))));
        cases.push(case("leaky_relu", vec![randn(vec![r, c])], |t, v| Ok(t.leaky_relu(v[0], 0.2))));
        cases.push(case("tanh", vec![randn(vec![r, c])], |t, v| Ok(t.tanh(v[0]))));
        cases.push(case("softplus", vec![randn(vec![r, c])], |t, v| Ok(t.softplus(v[0]))));
        cases.push(case("square", vec![randn(vec![r, c])], |t, v| Ok(t.square(v[0]))));
        cases.push(case("sum", vec![randn(vec![r, c])], |t, v| Ok(t.sum(v[0]))));
        cases.push(case("mean", vec![randn(vec![r, c])], |t, v| Ok(t.mean(v[0]))));
        cases.push(case("sum_axis0", vec![randn(vec![r, c])], |t, v| t.sum_axis(v[0], 0)));
        cases.push(case("mean_axis1", vec![randn(vec![r, c])], |t, v| t.mean_axis(v[0], 1)));
        cases.push(case("max_axis1", vec![randn(vec![r, c])], |t, v| t.max_axis(v[0], 1)));
        cases.push(case("reshape", vec![randn(vec![r, c])], move |t, v| t.reshape(v[0], vec![c, r])));
        cases.push(case("transpose", vec![randn(vec![r, c])], |t, v| t.transpose(v[0])));
        cases.push(case("matmul", vec![randn(vec![r, k]), randn(vec![k, c])], |t, v| t.matmul(v[0], v[1])));
        cases.push(case("add_row_vector", vec![randn(vec![r, c]), randn(vec![c])], |t, v| {
            t.add_row_vector(v[0], v[1])
        }));
        cases.push(case("softmax_rows", vec![randn(vec![r, c])], |t, v| t.softmax_rows(v[0])));
        cases.push(case("log_softmax_rows", vec![randn(vec![r, c])], |t, v| t.log_softmax_rows(v[0])));
        cases.push(case("l2_normalize_rows", vec![randn(vec![r, c])], |t, v| t.l2_normalize_rows(v[0], 1e-7)));
        cases.push(case("concat", vec![randn(vec![r, c]), randn(vec![k, c])], |t, v| t.concat(&[v[0], v[1]])));
        let idx: Vec<usize> = (0..r + 1).map(|i| (i * 7 + 1) % r).collect();
        cases.push(case("gather_rows", vec![randn(vec![r, c, 2])], move |t, v| t.gather_rows(v[0], &idx)));
        let picks: Vec<usize> = (0..r).map(|i| (i * 3) % c).collect();
        cases.push(case("pick_cols", vec![randn(vec![r, c])], move |t, v| t.pick_cols(v[0], &picks)));
        cases.push(case(
            "batched_row_matvec",
            vec![randn(vec![r, k]), randn(vec![r, k, c])],
            |t, v| t.batched_row_matvec(v[0], v[1]),
        ));

        let (h, w, ch) = (2 + rng_dim(rng, 4), 2 + rng_dim(rng, 4), 1 + rng_dim(rng, 3));
        let window = [1, 3, 5][rng_dim(rng, 3)];
        let mut randn = |shape: Vec<usize>| Tensor::<f64>::randn(shape, 1.0, rng);
        cases.push(case("unfold", vec![randn(vec![h, w, ch])], move |t, v| t.unfold(v[0], window)));
        cases.push(case("avg_pool_hwc", vec![randn(vec![2 * h, 2 * w, ch])], |t, v| t.avg_pool_hwc(v[0], 2)));
        cases.push(case("instance_norm", vec![randn(vec![ch, h + 1, w + 1])], |t, v| {
            t.instance_norm(v[0], 1e-5)
        }));
        cases.push(case("pad_reflect", vec![randn(vec![ch, h + 1, w + 1])], |t, v| t.pad_reflect(v[0], 1)));
        cases.push(case("upsample_nearest2x", vec![randn(vec![ch, h, w])], |t, v| t.upsample_nearest2x(v[0])));

        let (out_ch, kernel) = (1 + rng_dim(rng, 3), [1, 3][rng_dim(rng, 2)]);
        let stride = 1 + rng_dim(rng, 2);
        let pad = rng_dim(rng, 2);
        let mut randn = |shape: Vec<usize>| Tensor::<f64>::randn(shape, 1.0, rng);
        cases.push(case(
            "conv2d",
            vec![randn(vec![ch, h + 2, w + 2]), randn(vec![out_ch, ch, kernel, kernel]), randn(vec![out_ch])],
            move |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, pad),
        ));
        cases.push(case(
            "conv_transpose2d",
            vec![randn(vec![ch, h, w]), randn(vec![ch, out_ch, 3, 3]), randn(vec![out_ch])],
            |t, v| t.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1, 1),
        ));
    }
    cases
}

fn rng_dim<R: Rng + ?Sized>(rng: &mut R, n: usize) -> usize {
    rng.random_range(0..n)
}
