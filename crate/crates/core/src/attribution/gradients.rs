use crate::error::{Error, Result};
use crate::model::Model;
use crate::types::{AttributionSet, Entry, Instance, Kind, RankOrder, Unit};

pub struct IgResult {
    pub set: AttributionSet,
    /// `sum(IG) - (logit_target(x) - logit_target(baseline))`, when the model
    /// exposes logits.
    pub completeness_gap: Option<f64>,
}

/// Integrated gradients from the all-mask baseline, midpoint Riemann sum
/// over `steps` points.
pub fn integrated_gradients(
    model: &dyn Model,
    instance: &Instance,
    steps: usize,
    target: usize,
    order: RankOrder,
) -> Result<IgResult> {
    if !model.capabilities().grad_dot {
        return Err(Error::UnsupportedCapability("grad_dot"));
    }
    if steps == 0 {
        return Err(Error::Contract("integrated gradients needs at least one step".into()));
    }
    let tokens = instance.sequence();
    let baseline = vec![model.mask_token().to_string(); tokens.len()];
    let mut ig = vec![0.0; tokens.len()];
    for t in 1..=steps {
        let alpha = (t as f64 - 0.5) / steps as f64;
        let g = model.grad_dot(&tokens, &baseline, alpha, target)?;
        if g.len() != tokens.len() {
            return Err(Error::protocol("values", format!("expected {} values, got {}", tokens.len(), g.len())));
        }
        for (acc, v) in ig.iter_mut().zip(g) {
            *acc += v;
        }
    }
    ig.iter_mut().for_each(|v| *v /= steps as f64);

    let completeness_gap = match (model.logits(&tokens), model.logits(&baseline)) {
        (Ok(zx), Ok(zb)) => Some(ig.iter().sum::<f64>() - (zx[target] - zb[target])),
        _ => None,
    };
    let entries = ig.iter().enumerate().map(|(i, &s)| Entry::new(Unit::Token(i), s)).collect();
    let set = AttributionSet::new(&instance.id, Kind::TokenEx, "ig", entries, order)?;
    Ok(IgResult { set, completeness_gap })
}
