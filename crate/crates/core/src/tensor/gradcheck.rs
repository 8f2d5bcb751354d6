//! Central finite-difference verification of analytic gradients.

use super::{Tape, Tensor, TensorId};
use crate::error::{Error, Result};

/// Compares the analytic gradient of `sum(f(inputs))` against central finite
/// differences, perturbing every coordinate of every input.
///
/// Returns the maximum of `|analytic - numeric| / max(1, |numeric|)` over all
/// input coordinates. Meant to run at f64; `epsilon` is the probe step
/// (1e-5 in the verification suite).
///
/// A probe interval that straddles a relu kink or flips a max argmax makes
/// the central difference invalid at that scale, so coordinates that
/// disagree at `epsilon` are re-probed at `epsilon/8` and `epsilon/64` and
/// score their best scale; a genuine gradient bug disagrees at every scale.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId>,
{
    let eval = |inputs: &[Tensor<f64>]| -> Result<(f64, Vec<Option<Vec<f64>>>, bool)> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = inputs
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.requires_grad = true;
                tape.leaf(&t)
            })
            .collect();
        let out = f(&mut tape, &ids)?;
        if !tape.value(out).iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "grad_check forward",
            });
        }
        let loss = tape.sum_all(out);
        let loss_v = tape.value_scalar(loss);
        tape.backward(loss)?;
        let grads = ids
            .iter()
            .map(|id| tape.grad(*id).map(|g| g.to_vec()))
            .collect();
        Ok((loss_v, grads, true))
    };

    let (_, analytic, _) = eval(inputs)?;

    let mut worst = 0.0f64;
    for (pi, input) in inputs.iter().enumerate() {
        let ga = analytic[pi]
            .as_ref()
            .map(|g| g.as_slice())
            .unwrap_or(&[]);
        for ci in 0..input.numel() {
            let probe = |step: f64| -> Result<f64> {
                let mut plus = inputs.to_vec();
                plus[pi].data[ci] += step;
                let mut minus = inputs.to_vec();
                minus[pi].data[ci] -= step;
                let (lp, _, _) = eval(&plus)?;
                let (lm, _, _) = eval(&minus)?;
                if !lp.is_finite() || !lm.is_finite() {
                    return Err(Error::NonFinite {
                        context: "grad_check probe",
                    });
                }
                Ok((lp - lm) / (2.0 * step))
            };
            let a = if ga.is_empty() { 0.0 } else { ga[ci] };
            let mut err = f64::INFINITY;
            for scale in [1.0, 8.0, 64.0] {
                let numeric = probe(epsilon / scale)?;
                err = err.min((a - numeric).abs() / numeric.abs().max(1.0));
                if err <= 1e-6 {
                    break;
                }
            }
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

/// Finite-difference verification of every differentiable operation on
/// seeded shapes up to 2x4x8x8. Returns `(check name, max relative error)`
/// pairs; relu-adjacent inputs are kept away from the kink at zero.
pub fn op_gradient_suite(epsilon: f64) -> Result<Vec<(&'static str, f64)>> {
    use crate::tensor::{Axis, ReduceKind, Shape};

    fn seeded(n: usize, c: usize, h: usize, w: usize, seed: u64, away_from_zero: bool) -> Tensor<f64> {
        let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(12345);
        let data = (0..n * c * h * w)
            .map(|_| {
                state = state
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                let u = ((state >> 11) as f64) / (1u64 << 53) as f64;
                let v = u * 2.0 - 1.0;
                if away_from_zero && v.abs() < 0.05 {
                    v + 0.1
                } else {
                    v
                }
            })
            .collect();
        Tensor::new(Shape::new(n, c, h, w).unwrap(), data).unwrap()
    }

    let mut out = Vec::new();
    let mut run = |name: &'static str, err: Result<f64>| -> Result<()> {
        out.push((name, err?));
        Ok(())
    };

    run(
        "conv2d 3x3 pad1",
        grad_check(
            |t, ids| t.conv2d(ids[0], ids[1], Some(ids[2]), 1, 1),
            &[seeded(2, 3, 6, 6, 1, false), seeded(4, 3, 3, 3, 2, false), seeded(1, 4, 1, 1, 3, false)],
            epsilon,
        ),
    )?;
    run(
        "conv2d 1x1",
        grad_check(
            |t, ids| t.conv2d(ids[0], ids[1], Some(ids[2]), 1, 0),
            &[seeded(1, 4, 4, 4, 4, false), seeded(2, 4, 1, 1, 5, false), seeded(1, 2, 1, 1, 6, false)],
            epsilon,
        ),
    )?;
    run(
        "conv2d 2x2 stride2",
        grad_check(
            |t, ids| t.conv2d(ids[0], ids[1], None, 2, 0),
            &[seeded(1, 2, 6, 6, 7, false), seeded(3, 2, 2, 2, 8, false)],
            epsilon,
        ),
    )?;
    run(
        "conv2d 7x7 pad3",
        grad_check(
            |t, ids| t.conv2d(ids[0], ids[1], None, 1, 3),
            &[seeded(1, 2, 8, 8, 9, false), seeded(1, 2, 7, 7, 10, false)],
            epsilon,
        ),
    )?;
    run(
        "conv_transpose2d 2x2",
        grad_check(
            |t, ids| t.conv_transpose2d(ids[0], ids[1], Some(ids[2])),
            &[seeded(2, 3, 4, 4, 11, false), seeded(3, 2, 2, 2, 12, false), seeded(1, 2, 1, 1, 13, false)],
            epsilon,
        ),
    )?;
    run(
        "maxpool2",
        grad_check(
            |t, ids| t.maxpool2(ids[0]),
            &[seeded(2, 2, 8, 8, 14, false)],
            epsilon,
        ),
    )?;
    run(
        "relu",
        grad_check(
            |t, ids| Ok(t.relu(ids[0])),
            &[seeded(2, 4, 8, 8, 15, true)],
            epsilon,
        ),
    )?;
    run(
        "sigmoid",
        grad_check(
            |t, ids| Ok(t.sigmoid(ids[0])),
            &[seeded(2, 4, 8, 8, 16, false)],
            epsilon,
        ),
    )?;
    run(
        "add broadcast spatial-map",
        grad_check(
            |t, ids| t.add(ids[0], ids[1]),
            &[seeded(2, 4, 6, 6, 17, false), seeded(2, 1, 6, 6, 18, false)],
            epsilon,
        ),
    )?;
    run(
        "mul broadcast channel-vector",
        grad_check(
            |t, ids| t.mul(ids[0], ids[1]),
            &[seeded(2, 4, 6, 6, 19, false), seeded(2, 4, 1, 1, 20, false)],
            epsilon,
        ),
    )?;
    run(
        "sub",
        grad_check(
            |t, ids| t.sub(ids[0], ids[1]),
            &[seeded(1, 2, 4, 4, 21, false), seeded(1, 2, 4, 4, 22, false)],
            epsilon,
        ),
    )?;
    run(
        "div",
        grad_check(
            |t, ids| t.div(ids[0], ids[1]),
            &[seeded(1, 2, 4, 4, 23, false), {
                let mut b = seeded(1, 2, 4, 4, 24, false);
                for v in b.data.iter_mut() {
                    *v = v.abs() + 1.0;
                }
                b
            }],
            epsilon,
        ),
    )?;
    run(
        "concat_channels",
        grad_check(
            |t, ids| t.concat_channels(ids[0], ids[1]),
            &[seeded(2, 2, 4, 4, 25, false), seeded(2, 3, 4, 4, 26, false)],
            epsilon,
        ),
    )?;
    run(
        "slice_channels",
        grad_check(
            |t, ids| t.slice_channels(ids[0], 1, 3),
            &[seeded(1, 4, 4, 4, 27, false)],
            epsilon,
        ),
    )?;
    run(
        "slice_batch",
        grad_check(
            |t, ids| t.slice_batch(ids[0], 1),
            &[seeded(2, 2, 4, 4, 28, false)],
            epsilon,
        ),
    )?;
    run(
        "reduce channel mean",
        grad_check(
            |t, ids| Ok(t.reduce(ids[0], Axis::Channel, ReduceKind::Mean)),
            &[seeded(2, 4, 4, 4, 29, false)],
            epsilon,
        ),
    )?;
    run(
        "reduce channel max",
        grad_check(
            |t, ids| Ok(t.reduce(ids[0], Axis::Channel, ReduceKind::Max)),
            &[seeded(2, 4, 4, 4, 30, false)],
            epsilon,
        ),
    )?;
    run(
        "reduce spatial mean",
        grad_check(
            |t, ids| Ok(t.reduce(ids[0], Axis::Spatial, ReduceKind::Mean)),
            &[seeded(2, 4, 4, 4, 31, false)],
            epsilon,
        ),
    )?;
    run(
        "reduce spatial max",
        grad_check(
            |t, ids| Ok(t.reduce(ids[0], Axis::Spatial, ReduceKind::Max)),
            &[seeded(2, 4, 4, 4, 32, false)],
            epsilon,
        ),
    )?;
    run(
        "affine",
        grad_check(
            |t, ids| Ok(t.affine(ids[0], -1.5, 0.25)),
            &[seeded(1, 2, 4, 4, 33, false)],
            epsilon,
        ),
    )?;
    run(
        "sigmoid-mul chain",
        grad_check(
            |t, ids| {
                let s = t.sigmoid(ids[0]);
                let m = t.mul(s, ids[1])?;
                Ok(t.sigmoid(m))
            },
            &[seeded(1, 2, 4, 4, 34, false), seeded(1, 2, 4, 4, 35, false)],
            epsilon,
        ),
    )?;
    Ok(out)
}
