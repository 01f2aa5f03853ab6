//! Plain stochastic gradient descent.

use crate::error::{Error, Result};
use crate::tensor::ParamGroup;

/// `p <- p - lr * grad` for every entry, then clears the gradients.
///
/// Fails without touching anything if any entry is missing its gradient.
pub fn sgd_step(group: &mut ParamGroup, lr: f64) -> Result<()> {
    if let Some((name, _)) = group.entries().iter().find(|(_, t)| t.grad().is_none()) {
        return Err(Error::contract(format!(
            "sgd_step: parameter '{name}' in group {} has no gradient",
            group.tag()
        )));
    }
    for t in group.tensors_mut() {
        let grad = t.grad().expect("checked above").to_vec();
        for (p, g) in t.data_mut().iter_mut().zip(&grad) {
            *p -= lr * g;
        }
        t.zero_grad();
    }
    Ok(())
}
