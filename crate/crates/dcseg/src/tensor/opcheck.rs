//! Finite-difference sweep over every registered op.
//!
//! Each op gets a batch of random small shapes; inputs are drawn away
//! from non-differentiable points (the relu kink, clamp edges, the
//! sqrt/log domain boundary) since central differences are only valid
//! where the op is smooth.

use super::{grad_check, Graph, NodeId, Tensor, TensorError};
use crate::transform::{sample_transform, TransformConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct OpSweepEntry {
    pub op: &'static str,
    pub shapes: usize,
    pub max_rel_err: f64,
}

/// Sweep all registered ops; entries are sorted worst-first.
pub fn sweep_registered_ops(
    shapes_per_op: usize,
    eps: f64,
    seed: u64,
) -> Result<Vec<OpSweepEntry>, TensorError> {
    let ops: &[&'static str] = &[
        "conv3d",
        "upsample3d",
        "instance_norm",
        "relu",
        "sigmoid",
        "square",
        "sqrt",
        "log",
        "exp",
        "recip",
        "clamp",
        "add",
        "sub",
        "mul",
        "scalar_mul",
        "sum",
        "mean",
        "concat",
        "slice_channels",
        "mask_select",
        "spatial_transform",
    ];
    let mut entries = Vec::with_capacity(ops.len());
    for (k, op) in ops.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64 * 7919));
        let mut worst = 0.0f64;
        for _ in 0..shapes_per_op {
            let err = check_one(op, &mut rng, eps)?;
            worst = worst.max(err);
        }
        entries.push(OpSweepEntry {
            op,
            shapes: shapes_per_op,
            max_rel_err: worst,
        });
    }
    entries.sort_by(|a, b| b.max_rel_err.total_cmp(&a.max_rel_err));
    Ok(entries)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

/// Values in `[-1, 1]` but at least `margin` away from zero.
fn rand_tensor_off_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let mag = rng.gen_range(margin..1.0);
            if rng.gen::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

fn small_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let rank = rng.gen_range(1..=3usize);
    (0..rank).map(|_| rng.gen_range(1..=5usize)).collect()
}

fn small_dims5(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![
        rng.gen_range(1..=2),
        rng.gen_range(1..=3),
        rng.gen_range(2..=4),
        rng.gen_range(2..=4),
        rng.gen_range(2..=4),
    ]
}

fn check_one(op: &str, rng: &mut ChaCha8Rng, eps: f64) -> Result<f64, TensorError> {
    let mut g = Graph::<f64>::new();
    let out = build_op(op, &mut g, rng)?;
    let scalar = g.mean(out)?;
    let report = grad_check(&mut g, scalar, eps)?;
    Ok(report.max_rel_err())
}

fn build_op(op: &str, g: &mut Graph<f64>, rng: &mut ChaCha8Rng) -> Result<NodeId, TensorError> {
    match op {
        "conv3d" => {
            let ci = rng.gen_range(1..=2);
            let co = rng.gen_range(1..=2);
            let k = rng.gen_range(1..=3);
            let stride = rng.gen_range(1..=2);
            let pad = rng.gen_range(0..=1);
            let sp = rng.gen_range(k.max(2)..=k + 3);
            let x = g.param("x", rand_tensor(rng, &[1, ci, sp, sp, sp], -1.0, 1.0));
            let w = g.param("w", rand_tensor(rng, &[co, ci, k, k, k], -1.0, 1.0));
            let b = g.param("b", rand_tensor(rng, &[co], -0.5, 0.5));
            g.conv3d(x, w, Some(b), stride, pad)
        }
        "upsample3d" => {
            let shape = small_dims5(rng);
            let x = g.param("x", rand_tensor(rng, &shape, -1.0, 1.0));
            g.upsample3d(x, 2)
        }
        "instance_norm" => {
            let shape = small_dims5(rng);
            let c = shape[1];
            let x = g.param("x", rand_tensor(rng, &shape, -1.0, 1.0));
            let gamma = g.param("gamma", rand_tensor(rng, &[c], 0.5, 1.5));
            let beta = g.param("beta", rand_tensor(rng, &[c], -0.5, 0.5));
            g.instance_norm(x, gamma, beta, 1e-5)
        }
        "relu" => {
            let shape = small_shape(rng);
            let x = g.param("x", rand_tensor_off_zero(rng, &shape, 1e-2));
            g.relu(x)
        }
        "sigmoid" => {
            let shape = small_shape(rng);
            let x = g.param("x", rand_tensor(rng, &shape, -3.0, 3.0));
            g.sigmoid(x)
        }
        "square" => {
            let shape = small_shape(rng);
            let x = g.param("x", rand_tensor(rng, &shape, -1.0, 1.0));
            g.square(x)
        }
        "sqrt" => {
            let shape = small_shape(rng);
            let x = g.param("x", rand_tensor(rng, &shape, 0.1, 2.0));
            g.sqrt(x)
        }
        "log" => {
            let shape = small_shape(rng);
            let x = g.param("x", rand_tensor(rng, &shape, 0.1, 2.0));
            g.log(x)
        }
        "exp" => {
            let shape = small_shape(rng);
            let x = g.param("x", rand_tensor(rng, &shape, -2.0, 2.0));
            g.exp(x)
        }
        "recip" => {
            let shape = small_shape(rng);
            let x = g.param("x", rand_tensor(rng, &shape, 0.2, 2.0));
            g.recip(x)
        }
        "clamp" => {
            // Keep samples clear of both edges.
            let shape = small_shape(rng);
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|_| match rng.gen_range(0..3) {
                    0 => rng.gen_range(0.0..0.23),
                    1 => rng.gen_range(0.27..0.73),
                    _ => rng.gen_range(0.77..1.0),
                })
                .collect();
            let x = g.param("x", Tensor::from_vec(shape, data)?);
            g.clamp(x, 0.25, 0.75)
        }
        "add" | "sub" | "mul" => {
            let shape = small_shape(rng);
            let a = g.param("a", rand_tensor(rng, &shape, -1.0, 1.0));
            let b = g.param("b", rand_tensor(rng, &shape, -1.0, 1.0));
            match op {
                "add" => g.add(a, b),
                "sub" => g.sub(a, b),
                _ => g.mul(a, b),
            }
        }
        "scalar_mul" => {
            let shape = small_shape(rng);
            let x = g.param("x", rand_tensor(rng, &shape, -1.0, 1.0));
            g.scalar_mul(x, rng.gen_range(-2.0..2.0))
        }
        "sum" => {
            let shape = small_shape(rng);
            let x = g.param("x", rand_tensor(rng, &shape, -1.0, 1.0));
            g.sum(x)
        }
        "mean" => {
            let shape = small_shape(rng);
            let x = g.param("x", rand_tensor(rng, &shape, -1.0, 1.0));
            g.mean(x)
        }
        "concat" => {
            let shape = small_dims5(rng);
            let mut other = shape.clone();
            other[1] = rng.gen_range(1..=3);
            let a = g.param("a", rand_tensor(rng, &shape, -1.0, 1.0));
            let b = g.param("b", rand_tensor(rng, &other, -1.0, 1.0));
            g.concat(a, b)
        }
        "slice_channels" => {
            let mut shape = small_dims5(rng);
            shape[1] = rng.gen_range(2..=4);
            let start = rng.gen_range(0..shape[1] - 1);
            let len = rng.gen_range(1..=shape[1] - start);
            let x = g.param("x", rand_tensor(rng, &shape, -1.0, 1.0));
            g.slice_channels(x, start, len)
        }
        "mask_select" => {
            let shape = small_shape(rng);
            let n: usize = shape.iter().product();
            let mask: Vec<f64> = (0..n).map(|_| f64::from(rng.gen::<bool>())).collect();
            let x = g.param("x", rand_tensor(rng, &shape, -1.0, 1.0));
            let m = g.constant(Tensor::from_vec(shape, mask)?);
            g.mask_select(x, m)
        }
        "spatial_transform" => {
            let mut cfg = TransformConfig::default();
            cfg.max_shift = 2;
            let t = sample_transform(rng, &cfg).expect("nonempty pool");
            let shape = small_dims5(rng);
            let x = g.param("x", rand_tensor(rng, &shape, -1.0, 1.0));
            g.spatial_transform(x, t)
        }
        other => Err(TensorError::InvalidArgument(format!(
            "unknown op in sweep: {other}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_registered_op_matches_finite_differences() {
        let entries = sweep_registered_ops(50, 1e-6, 20240601).unwrap();
        assert_eq!(entries.len(), 21);
        for e in &entries {
            assert!(
                e.max_rel_err < 1e-6,
                "{} exceeded tolerance: {}",
                e.op,
                e.max_rel_err
            );
        }
    }
}
