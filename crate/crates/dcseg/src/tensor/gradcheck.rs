//! Central-difference verification of the reverse pass.
//!
//! Only meaningful in `f64`: the difference quotient loses roughly half
//! the mantissa, which in `f32` leaves nothing to compare against.

use super::{Graph, NodeId, TensorError};

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub node: NodeId,
    /// `|analytic - fd| / max(1, |fd|)`, maximized over elements.
    pub max_rel_err: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// One entry per trainable leaf, worst first.
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.first().map(|e| e.max_rel_err).unwrap_or(0.0)
    }
}

/// Compare the analytic gradient of `output` w.r.t. every trainable
/// leaf against central differences with step `eps`.
///
/// The graph is re-evaluated twice per parameter element and restored
/// afterwards; on return its values and gradients match a fresh
/// forward+backward at the original leaves.
pub fn grad_check(
    graph: &mut Graph<f64>,
    output: NodeId,
    eps: f64,
) -> Result<GradCheckReport, TensorError> {
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(TensorError::InvalidArgument(format!(
            "central-difference step must lie in (0, 1e-3], got {eps}"
        )));
    }
    graph.backward(output)?;
    let params = graph.params();

    let mut analytic: Vec<Vec<f64>> = Vec::with_capacity(params.len());
    for (_, id) in &params {
        let g = graph
            .grad(*id)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; graph.value(*id).numel()]);
        analytic.push(g);
    }

    let mut entries = Vec::with_capacity(params.len());
    for ((name, id), grads) in params.iter().zip(&analytic) {
        let numel = graph.value(*id).numel();
        let mut max_rel_err = 0.0f64;
        let mut worst_index = 0usize;
        for flat in 0..numel {
            graph.nudge_leaf(*id, flat, eps);
            graph.reforward()?;
            let f_plus = graph.scalar_value(output)?;
            graph.nudge_leaf(*id, flat, -2.0 * eps);
            graph.reforward()?;
            let f_minus = graph.scalar_value(output)?;
            graph.nudge_leaf(*id, flat, eps);

            let fd = (f_plus - f_minus) / (2.0 * eps);
            let rel = (grads[flat] - fd).abs() / fd.abs().max(1.0);
            if rel > max_rel_err {
                max_rel_err = rel;
                worst_index = flat;
            }
        }
        entries.push(GradCheckEntry {
            name: name.clone(),
            node: *id,
            max_rel_err,
            worst_index,
        });
    }

    // Leave the graph in its original state.
    graph.reforward()?;
    graph.backward(output)?;

    entries.sort_by(|a, b| b.max_rel_err.total_cmp(&a.max_rel_err));
    Ok(GradCheckReport { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn linear_map_is_exact() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", Tensor::from_vec(vec![4], vec![0.5, -1.0, 2.0, 0.1]).unwrap());
        let y = g.scalar_mul(x, 3.0).unwrap();
        let s = g.sum(y).unwrap();
        let report = grad_check(&mut g, s, 1e-5).unwrap();
        assert!(report.max_rel_err() < 1e-10, "{:?}", report.entries);
    }

    #[test]
    fn eps_zero_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", Tensor::scalar(1.0));
        let s = g.sum(x).unwrap();
        assert!(matches!(
            grad_check(&mut g, s, 0.0),
            Err(TensorError::InvalidArgument(_))
        ));
        assert!(matches!(
            grad_check(&mut g, s, 1e-2),
            Err(TensorError::InvalidArgument(_))
        ));
    }

    #[test]
    fn report_is_sorted_by_error() {
        let mut g = Graph::<f64>::new();
        // One smooth path and one exactly-linear path; the smooth one
        // must sort first.
        let a = g.param("a", Tensor::scalar(0.3));
        let b = g.param("b", Tensor::scalar(0.7));
        let ea = g.exp(a).unwrap();
        let sb = g.scalar_mul(b, 2.0).unwrap();
        let both = g.add(ea, sb).unwrap();
        let out = g.sum(both).unwrap();
        let report = grad_check(&mut g, out, 1e-5).unwrap();
        assert_eq!(report.entries.len(), 2);
        assert!(report.entries[0].max_rel_err >= report.entries[1].max_rel_err);
        assert!(report.max_rel_err() < 1e-8);
    }
}
