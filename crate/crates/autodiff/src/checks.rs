//! Randomized finite-difference checks for every differentiable primitive.
//!
//! Each check wraps one primitive in `sum(r ⊙ op(inputs))` with a random
//! constant `r`, so every output coordinate contributes a distinct upstream
//! gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::gradcheck_many;
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::Tensor;

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn project(tape: &mut Tape, v: Var, weights: &Tensor) -> Result<Var> {
    let r = tape.constant(weights.clone());
    let p = tape.mul(v, r)?;
    tape.sum(p)
}

/// Worst relative gradient error for `kind` on random inputs drawn from
/// `seed`.
pub fn check_op(kind: OpKind, seed: u64, h: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut u = |shape: &[usize]| uniform(shape, -1.0, 1.0, &mut rng);

    let (inputs, out_shape): (Vec<Tensor>, Vec<usize>) = match kind {
        OpKind::Leaf => return Ok(0.0),
        OpKind::Add => (vec![u(&[3, 4]), u(&[4])], vec![3, 4]),
        OpKind::Sub => (vec![u(&[2, 3, 4]), u(&[3, 1])], vec![2, 3, 4]),
        OpKind::Mul => (vec![u(&[3, 4]), u(&[3, 1])], vec![3, 4]),
        OpKind::Div => (vec![u(&[3, 4]), u(&[4]).map(|v| 1.5 + v.abs())], vec![3, 4]),
        OpKind::Scale | OpKind::Offset | OpKind::Gelu | OpKind::Sigmoid => {
            (vec![u(&[3, 5]).map(|v| 3.0 * v)], vec![3, 5])
        }
        OpKind::MatMul => (
            vec![u(&[2, 3, 4]), u(&[4, 5]), u(&[2, 5, 3])],
            vec![2, 3, 3],
        ),
        OpKind::Transpose => (vec![u(&[2, 3, 4])], vec![2, 4, 3]),
        OpKind::Reshape => (vec![u(&[2, 6])], vec![3, 4]),
        OpKind::BroadcastTo => (vec![u(&[3, 1])], vec![2, 3, 4]),
        OpKind::Concat => (vec![u(&[2, 3]), u(&[2, 5])], vec![2, 8]),
        OpKind::Narrow => (vec![u(&[4, 6])], vec![4, 3]),
        OpKind::Sum | OpKind::Mean => (vec![u(&[3, 4])], vec![]),
        OpKind::SumAxis => (vec![u(&[2, 3, 4])], vec![2, 4]),
        OpKind::Gather => (vec![u(&[5, 3])], vec![4, 3]),
        OpKind::Softmax => (vec![u(&[3, 5]).map(|v| 2.0 * v)], vec![3, 5]),
        OpKind::LayerNorm => (
            vec![u(&[3, 6]), u(&[6]).map(|v| 1.0 + v), u(&[6])],
            vec![3, 6],
        ),
        OpKind::Ln => (vec![u(&[3, 4]).map(|v| 0.5 + v.abs())], vec![3, 4]),
        OpKind::Clamp => (
            // Keep every coordinate well away from the kinks at ±0.5.
            vec![u(&[4, 4]).map(|v| {
                if (v.abs() - 0.5).abs() < 0.05 {
                    v * 0.5
                } else {
                    v
                }
            })],
            vec![4, 4],
        ),
        OpKind::Dropout => (vec![u(&[4, 5])], vec![4, 5]),
    };
    let weights = if out_shape.is_empty() {
        Tensor::scalar(rng.random_range(0.5..1.5))
    } else {
        uniform(&out_shape, -1.0, 1.0, &mut rng)
    };
    let dropout_seed = rng.random::<u64>();

    let f = |t: &mut Tape, v: &[Var]| -> Result<Var> {
        let out = match kind {
            OpKind::Leaf => unreachable!(),
            OpKind::Add => t.add(v[0], v[1])?,
            OpKind::Sub => t.sub(v[0], v[1])?,
            OpKind::Mul => t.mul(v[0], v[1])?,
            OpKind::Div => t.div(v[0], v[1])?,
            OpKind::Scale => t.scale(v[0], -2.5)?,
            OpKind::Offset => {
                let o = t.offset(v[0], 0.75)?;
                t.mul(o, o)?
            }
            OpKind::MatMul => {
                let ab = t.matmul(v[0], v[1])?;
                t.matmul(ab, v[2])?
            }
            OpKind::Transpose => t.transpose(v[0])?,
            OpKind::Reshape => t.reshape(v[0], &[3, 4])?,
            OpKind::BroadcastTo => t.broadcast_to(v[0], &[2, 3, 4])?,
            OpKind::Concat => t.concat(&[v[0], v[1]], 1)?,
            OpKind::Narrow => t.narrow(v[0], 1, 2, 3)?,
            OpKind::Sum => {
                let sq = t.mul(v[0], v[0])?;
                t.sum(sq)?
            }
            OpKind::Mean => {
                let sq = t.mul(v[0], v[0])?;
                t.mean(sq)?
            }
            OpKind::SumAxis => t.sum_axis(v[0], 1)?,
            OpKind::Gather => t.gather_rows(v[0], &[4, 0, 4, 2])?,
            OpKind::Softmax => t.softmax(v[0])?,
            OpKind::LayerNorm => t.layer_norm(v[0], v[1], v[2], 1e-5)?,
            OpKind::Gelu => t.gelu(v[0])?,
            OpKind::Sigmoid => t.sigmoid(v[0])?,
            OpKind::Ln => t.ln(v[0])?,
            OpKind::Clamp => t.clamp(v[0], -0.5, 0.5)?,
            OpKind::Dropout => {
                let mut drop_rng = ChaCha8Rng::seed_from_u64(dropout_seed);
                t.dropout(v[0], 0.3, true, &mut drop_rng)?
            }
        };
        project(t, out, &weights)
    };
    let errs = gradcheck_many(f, &inputs, h)?;
    Ok(errs.into_iter().fold(0.0, f64::max))
}
