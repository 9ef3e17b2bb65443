//! Finite-difference gradient verification.
//!
//! This is the oracle every analytic backward rule is held against: the same
//! scalar-producing closure is evaluated at `point ± step` per coordinate and
//! the central difference is compared to the tape's gradient.

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use super::NumericsError;

/// Compares the tape gradient of `f` at `point` against central differences.
///
/// `f` receives a fresh graph and the node holding the current point, and
/// must return a scalar loss node. Returns the maximum relative error
/// `|analytic - numeric| / max(1e-8, |numeric|)` over all coordinates.
///
/// Central differences carry cancellation noise of order `eps * |loss| /
/// step`; coordinates whose discrepancy sits below that floor (for example
/// dead-ReLU weights with an exactly-zero analytic gradient) are counted as
/// agreeing — at that magnitude the numeric side is measuring rounding, not
/// the derivative.
pub fn grad_check<F>(point: &Tensor, step: f64, f: F) -> Result<f64, NumericsError>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId, NumericsError>,
{
    if !(step.is_finite() && step > 0.0) {
        return Err(NumericsError::InvalidArg {
            what: format!("grad_check step {step} must be positive"),
        });
    }

    // Analytic pass.
    let mut g = Graph::new();
    let x = g.param(point.clone());
    let loss = f(&mut g, x)?;
    g.backward(loss)?;
    let analytic = g
        .grad(x)
        .ok_or_else(|| NumericsError::InvalidArg {
            what: "grad_check: loss does not depend on the checked point".into(),
        })?
        .to_vec();
    let loss_scale = g.value(loss).item().abs().max(1.0);
    let noise_floor = 1e-12 * loss_scale / step;

    // Numeric pass, one coordinate at a time.
    let eval = |values: &[f64]| -> Result<f64, NumericsError> {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(point.shape().to_vec(), values.to_vec())?);
        let loss = f(&mut g, x)?;
        Ok(g.value(loss).item())
    };
    let mut worst = 0.0f64;
    let mut values = point.values().to_vec();
    for i in 0..values.len() {
        let orig = values[i];
        values[i] = orig + step;
        let hi = eval(&values)?;
        values[i] = orig - step;
        let lo = eval(&values)?;
        values[i] = orig;
        let numeric = (hi - lo) / (2.0 * step);
        let diff = (analytic[i] - numeric).abs();
        if diff <= noise_floor {
            continue;
        }
        let rel = diff / numeric.abs().max(1e-8);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::graph::Reduction;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rand_tensor(rng: &mut ChaCha20Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
        Tensor::new(shape.to_vec(), values).unwrap()
    }

    /// Scalarizes an arbitrary output through a fixed random linear
    /// functional so every output coordinate influences the loss.
    fn scalarize(g: &mut Graph, y: NodeId, rng: &mut ChaCha20Rng) -> NodeId {
        let shape = g.value(y).shape().to_vec();
        let n: usize = shape.iter().product();
        let flat = g.reshape(y, vec![1, n]).unwrap();
        let coeffs: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c = g.input(Tensor::new(vec![n, 1], coeffs).unwrap());
        g.matmul(flat, c).unwrap()
    }

    #[test]
    fn exact_on_linear_functions_and_rejects_constant_loss() {
        // mean(x) is linear, so central differences are exact up to roundoff.
        let point = Tensor::new(vec![1, 3], vec![0.5, 1.0, 2.0]).unwrap();
        let err = grad_check(&point, 1e-5, |g, x| {
            let m = g.mean_axis(x, 1)?;
            g.reshape(m, vec![1])
        })
        .unwrap();
        assert!(err < 1e-9, "linear loss should be exact, got {err}");

        // A loss that ignores the checked point is a misuse worth flagging.
        let res = grad_check(&point, 1e-5, |g, _x| {
            let c = g.param(Tensor::scalar(3.0));
            g.reshape(c, vec![1])
        });
        assert!(res.is_err());
    }

    #[test]
    fn every_primitive_passes_grad_check_on_three_shapes() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let tol = 1e-4;

        // matmul: grad wrt left and right operand.
        for (m, k, n) in [(1, 1, 1), (2, 3, 4), (5, 2, 3)] {
            let a = rand_tensor(&mut rng, &[m, k]);
            let b = rand_tensor(&mut rng, &[k, n]);
            let r1 = rng.clone();
            let e = grad_check(&a, 1e-5, |g, x| {
                let bb = g.input(b.clone());
                let y = g.matmul(x, bb)?;
                Ok(scalarize(g, y, &mut r1.clone()))
            })
            .unwrap();
            assert!(e < tol, "matmul-left {m}x{k}x{n}: {e}");
            let r2 = rng.clone();
            let e = grad_check(&b, 1e-5, |g, x| {
                let aa = g.input(a.clone());
                let y = g.matmul(aa, x)?;
                Ok(scalarize(g, y, &mut r2.clone()))
            })
            .unwrap();
            assert!(e < tol, "matmul-right {m}x{k}x{n}: {e}");
        }

        // Elementwise/broadcast binary ops.
        for shape in [[1usize, 4], [3, 3], [6, 2]] {
            let a = rand_tensor(&mut rng, &shape);
            let b = rand_tensor(&mut rng, &shape);
            for which in ["add", "mul"] {
                let r = rng.clone();
                let e = grad_check(&a, 1e-5, |g, x| {
                    let bb = g.input(b.clone());
                    let y = match which {
                        "add" => g.add(x, bb)?,
                        _ => g.mul(x, bb)?,
                    };
                    Ok(scalarize(g, y, &mut r.clone()))
                })
                .unwrap();
                assert!(e < tol, "{which} {shape:?}: {e}");
            }
            let bias = rand_tensor(&mut rng, &[1, shape[1]]);
            let r = rng.clone();
            let e = grad_check(&bias, 1e-5, |g, x| {
                let m = g.input(a.clone());
                let y = g.add_bias(m, x)?;
                Ok(scalarize(g, y, &mut r.clone()))
            })
            .unwrap();
            assert!(e < tol, "add_bias {shape:?}: {e}");
            let col = rand_tensor(&mut rng, &[shape[0], 1]);
            let r = rng.clone();
            let e = grad_check(&col, 1e-5, |g, x| {
                let m = g.input(a.clone());
                let y = g.scale_rows(m, x)?;
                Ok(scalarize(g, y, &mut r.clone()))
            })
            .unwrap();
            assert!(e < tol, "scale_rows-col {shape:?}: {e}");
            let r = rng.clone();
            let e = grad_check(&a, 1e-5, |g, x| {
                let c = g.input(col.clone());
                let y = g.scale_rows(x, c)?;
                Ok(scalarize(g, y, &mut r.clone()))
            })
            .unwrap();
            assert!(e < tol, "scale_rows-m {shape:?}: {e}");
        }

        // Unary activations (points kept away from the relu kink).
        for shape in [[2usize, 2], [1, 6], [4, 3]] {
            let mut a = rand_tensor(&mut rng, &shape);
            // Nudge any coordinate too close to zero away from the kink.
            let vals: Vec<f64> = a
                .values()
                .iter()
                .map(|&v| if v.abs() < 0.05 { v + 0.1 } else { v })
                .collect();
            a = Tensor::new(shape.to_vec(), vals).unwrap();
            for which in ["relu", "sigmoid", "tanh", "softmax", "scale_const"] {
                let r = rng.clone();
                let e = grad_check(&a, 1e-5, |g, x| {
                    let y = match which {
                        "relu" => g.relu(x),
                        "sigmoid" => g.sigmoid(x),
                        "tanh" => g.tanh(x),
                        "softmax" => g.softmax_last(x)?,
                        _ => g.scale_const(x, -1.7)?,
                    };
                    Ok(scalarize(g, y, &mut r.clone()))
                })
                .unwrap();
                assert!(e < tol, "{which} {shape:?}: {e}");
            }
        }

        // mean_axis both axes, three shapes.
        for shape in [[2usize, 5], [4, 1], [3, 3]] {
            let a = rand_tensor(&mut rng, &shape);
            for axis in [0, 1] {
                let r = rng.clone();
                let e = grad_check(&a, 1e-5, |g, x| {
                    let y = g.mean_axis(x, axis)?;
                    Ok(scalarize(g, y, &mut r.clone()))
                })
                .unwrap();
                assert!(e < tol, "mean_axis{axis} {shape:?}: {e}");
            }
        }

        // concat / slice_cols / reshape.
        for shape in [[2usize, 3], [1, 4], [3, 2]] {
            let a = rand_tensor(&mut rng, &shape);
            let b = rand_tensor(&mut rng, &shape);
            for axis in [0, 1] {
                let r = rng.clone();
                let e = grad_check(&a, 1e-5, |g, x| {
                    let bb = g.input(b.clone());
                    let y = g.concat(axis, &[x, bb])?;
                    Ok(scalarize(g, y, &mut r.clone()))
                })
                .unwrap();
                assert!(e < tol, "concat{axis} {shape:?}: {e}");
            }
            let r = rng.clone();
            let e = grad_check(&a, 1e-5, |g, x| {
                let y = g.slice_cols(x, shape[1] - 1, 1)?;
                Ok(scalarize(g, y, &mut r.clone()))
            })
            .unwrap();
            assert!(e < tol, "slice_cols {shape:?}: {e}");
            let r = rng.clone();
            let e = grad_check(&a, 1e-5, |g, x| {
                let y = g.reshape(x, vec![shape[0] * shape[1]])?;
                let y2 = g.reshape(y, vec![1, shape[0] * shape[1]])?;
                Ok(scalarize(g, y2, &mut r.clone()))
            })
            .unwrap();
            assert!(e < tol, "reshape {shape:?}: {e}");
        }

        // 3-D window ops: slice_rect3 and overlay_rect3 (both operands).
        for (hw, ph, pw) in [(4usize, 2usize, 2usize), (6, 3, 2), (5, 1, 4)] {
            let base = rand_tensor(&mut rng, &[hw, hw, 3]);
            let patch = rand_tensor(&mut rng, &[ph, pw, 3]);
            let r = rng.clone();
            let e = grad_check(&base, 1e-5, |g, x| {
                let y = g.slice_rect3(x, 1, 0, ph, pw)?;
                Ok(scalarize(g, y, &mut r.clone()))
            })
            .unwrap();
            assert!(e < tol, "slice_rect3 {hw}: {e}");
            let r = rng.clone();
            let e = grad_check(&base, 1e-5, |g, x| {
                let p = g.input(patch.clone());
                let y = g.overlay_rect3(x, p, 1, 1)?;
                Ok(scalarize(g, y, &mut r.clone()))
            })
            .unwrap();
            assert!(e < tol, "overlay_rect3-base {hw}: {e}");
            let r = rng.clone();
            let e = grad_check(&patch, 1e-5, |g, x| {
                let b = g.input(base.clone());
                let y = g.overlay_rect3(b, x, 1, 1)?;
                Ok(scalarize(g, y, &mut r.clone()))
            })
            .unwrap();
            assert!(e < tol, "overlay_rect3-patch {hw}: {e}");
        }

        // embedding_mean wrt the table.
        for (vocab, emb) in [(5usize, 3usize), (8, 2), (3, 4)] {
            let table = rand_tensor(&mut rng, &[vocab, emb]);
            let seqs = vec![vec![0, 1, 1], vec![vocab - 1], vec![2, 0]];
            let r = rng.clone();
            let e = grad_check(&table, 1e-5, |g, x| {
                let y = g.embedding_mean(x, &seqs)?;
                Ok(scalarize(g, y, &mut r.clone()))
            })
            .unwrap();
            assert!(e < tol, "embedding_mean {vocab}x{emb}: {e}");
        }

        // cross_entropy wrt logits: plain, weighted, and sum-reduced.
        for (rows, cols) in [(1usize, 2usize), (3, 4), (5, 3)] {
            let logits = rand_tensor(&mut rng, &[rows, cols]);
            let targets: Vec<usize> = (0..rows).map(|i| i % cols).collect();
            let weights: Vec<f64> = (0..rows).map(|i| 0.25 + (i as f64) * 0.5).collect();
            for (label, w, red) in [
                ("ce-mean", None, Reduction::Mean),
                ("ce-wmean", Some(weights.clone()), Reduction::Mean),
                ("ce-wsum", Some(weights.clone()), Reduction::Sum),
            ] {
                let e = grad_check(&logits, 1e-5, |g, x| {
                    g.cross_entropy(x, &targets, w.as_deref(), red)
                })
                .unwrap();
                assert!(e < tol, "{label} {rows}x{cols}: {e}");
            }
        }
    }

    #[test]
    fn composite_network_grad_check_under_1e4() {
        // A miniature of the real models: embedding-ish input -> linear ->
        // tanh -> attention-style softmax mix -> linear -> cross-entropy.
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let w = rand_tensor(&mut rng, &[4, 6]);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[1, 6]);
        let e = grad_check(&w, 1e-5, |g, p| {
            let xn = g.input(x.clone());
            let bn = g.input(b.clone());
            let h = g.matmul(xn, p)?;
            let h = g.add_bias(h, bn)?;
            let h = g.tanh(h);
            let a = g.softmax_last(h)?;
            let mixed = g.mul(a, h)?;
            g.cross_entropy(mixed, &[1, 0, 5], None, Reduction::Mean)
        })
        .unwrap();
        assert!(e < 1e-4, "composite: {e}");
    }
}
