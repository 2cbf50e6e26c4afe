use crate::error::Result;
use crate::model::{check_input, Capabilities, Model, Prediction};

/// Returns the same distribution for every input.
#[derive(Debug, Clone)]
pub struct ConstantModel {
    id: String,
    probs: Vec<f64>,
    mask: String,
}

impl ConstantModel {
    pub fn new(probs: Vec<f64>, mask: impl Into<String>) -> Result<Self> {
        Prediction::from_probs(probs.clone())?;
        Ok(ConstantModel { id: "builtin:constant".into(), probs, mask: mask.into() })
    }
}

impl Model for ConstantModel {
    fn id(&self) -> &str {
        &self.id
    }

    fn classes(&self) -> usize {
        self.probs.len()
    }

    fn mask_token(&self) -> &str {
        &self.mask
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities::default()
    }

    fn predict(&self, tokens: &[String]) -> Result<Prediction> {
        check_input(self, tokens)?;
        Prediction::from_probs(self.probs.clone())
    }
}
