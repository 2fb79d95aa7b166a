//! Central finite-difference checks of graph gradients.

use std::collections::HashMap;

use super::{Graph, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Largest norm-wise relative error over all parameters.
    pub worst_relative_error: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates skipped because a perturbation flipped a relu.
    pub skipped: usize,
}

/// Compares `backward` against central differences with step `h` for every
/// trainable parameter of a graph whose output is a single value.
///
/// Relu is not differentiable at 0, so a coordinate whose `±h` perturbation
/// changes any relu on/off state is skipped rather than compared.
pub fn check_gradients(
    graph: &mut Graph,
    inputs: &HashMap<String, Tensor>,
    params: &ParamStore,
    h: f64,
) -> Result<GradCheck> {
    let out = graph.forward(inputs, params)?;
    if out.numel() != 1 {
        return Err(Error::Config(format!(
            "gradient check needs a scalar output, got shape {:?}",
            out.shape()
        )));
    }
    let base_pattern = graph.activation_pattern();
    let analytic = graph.backward(&Tensor::scalar(1.0))?;
    let mut result = GradCheck {
        worst_relative_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut p = params.clone();
    for (name, grad) in &analytic {
        let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
        for i in 0..grad.numel() {
            let orig = p.get(name).expect("graph param").data()[i];
            p.get_mut(name).expect("graph param").data_mut()[i] = orig + h;
            let up = graph.forward(inputs, &p)?.item();
            let up_flip = graph.activation_pattern() != base_pattern;
            p.get_mut(name).expect("graph param").data_mut()[i] = orig - h;
            let down = graph.forward(inputs, &p)?.item();
            let down_flip = graph.activation_pattern() != base_pattern;
            p.get_mut(name).expect("graph param").data_mut()[i] = orig;
            if up_flip || down_flip {
                result.skipped += 1;
                continue;
            }
            result.checked += 1;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[i];
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
        let denom = na.sqrt().max(nn.sqrt());
        let rel = if denom < 1e-10 { diff.sqrt() } else { diff.sqrt() / denom };
        result.worst_relative_error = result.worst_relative_error.max(rel);
    }
    // Leave the graph holding the unperturbed pass.
    graph.forward(inputs, params)?;
    Ok(result)
}
