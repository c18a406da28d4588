use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{self, check_input};
use super::ClassHead;
use crate::autodiff::{softmax_rows, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Shared trunk with a Wasserstein critic head `D` and an expandable
/// auxiliary classification head `D'`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticNet {
    pub params: ParamStore,
    in_dim: usize,
    hidden: Vec<usize>,
    slope: f64,
    num_classes: usize,
    expansions: Vec<(usize, usize)>,
}

impl CriticNet {
    pub fn new<R: Rng + ?Sized>(
        in_dim: usize,
        hidden: Vec<usize>,
        classes: usize,
        slope: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if hidden.is_empty() || classes == 0 {
            return Err(Error::InvalidArgument(
                "critic needs a hidden layer and at least one class".into(),
            ));
        }
        let mut params = ParamStore::new();
        let mut fan_in = in_dim;
        for (l, &w) in hidden.iter().enumerate() {
            layers::init_hidden(&mut params, &format!("trunk.{l}"), fan_in, w, slope, rng);
            fan_in = w;
        }
        layers::init_linear(&mut params, "critic", fan_in, 1, rng);
        layers::init_linear(&mut params, "aux", fan_in, classes, rng);
        Ok(CriticNet {
            params,
            in_dim,
            hidden,
            slope,
            num_classes: classes,
            expansions: Vec::new(),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn depth(&self) -> usize {
        self.hidden.len()
    }

    /// Names of the shared trunk parameters.
    pub fn trunk_names(&self) -> Vec<String> {
        (0..self.hidden.len())
            .flat_map(|l| [format!("trunk.{l}.w"), format!("trunk.{l}.b")])
            .collect()
    }

    pub fn critic_names(&self) -> Vec<String> {
        let mut v = self.trunk_names();
        v.extend(["critic.w".to_string(), "critic.b".to_string()]);
        v
    }

    pub fn aux_names(&self) -> Vec<String> {
        let mut v = self.trunk_names();
        v.extend(self.output_names());
        v
    }

    pub fn trunk(&self, g: &mut Graph, x: Var) -> Result<Var> {
        check_input(g.value(x), self.in_dim, "critic input")?;
        let mut h = x;
        for l in 0..self.hidden.len() {
            let a = layers::dense(g, &self.params, &format!("trunk.{l}"), h)?;
            h = g.leaky_relu(a, self.slope)?;
        }
        Ok(h)
    }

    /// Unbounded critic scores, `[n, 1]`.
    pub fn critic_head(&self, g: &mut Graph, features: Var) -> Result<Var> {
        layers::dense(g, &self.params, "critic", features)
    }

    pub fn aux_logits(&self, g: &mut Graph, features: Var) -> Result<Var> {
        layers::dense(g, &self.params, "aux", features)
    }

    pub fn score(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.trunk(g, x)?;
        self.critic_head(g, h)
    }

    /// Critic scores for a batch, no sigmoid.
    pub fn discriminator_forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::no_grad();
        let xv = g.constant(x.clone());
        let s = self.score(&mut g, xv)?;
        Ok(g.value(s).clone())
    }

    /// Auxiliary-head class probabilities for a batch.
    pub fn aux_classifier_forward(&self, x: &Tensor) -> Result<Tensor> {
        self.class_probs(x)
    }
}

impl ClassHead for CriticNet {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn logits(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.trunk(g, x)?;
        self.aux_logits(g, h)
    }

    fn class_probs(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::no_grad();
        let xv = g.constant(x.clone());
        let l = self.logits(&mut g, xv)?;
        Ok(softmax_rows(g.value(l)))
    }

    fn expand_output_layer(&mut self, new_total: usize, rng: &mut dyn rand::RngCore) -> Result<()> {
        layers::expand_columns(&mut self.params, "aux", new_total, rng)?;
        self.expansions.push((self.num_classes, new_total));
        self.num_classes = new_total;
        Ok(())
    }

    fn output_names(&self) -> Vec<String> {
        vec!["aux.w".to_string(), "aux.b".to_string()]
    }

    fn expansions(&self) -> &[(usize, usize)] {
        &self.expansions
    }
}
