use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{self, check_input};
use super::ClassHead;
use crate::autodiff::{softmax_rows, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Independent classifier `C`: leaky-relu feature stack plus an expandable
/// class-logit layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierNet {
    pub params: ParamStore,
    in_dim: usize,
    hidden: Vec<usize>,
    slope: f64,
    num_classes: usize,
    expansions: Vec<(usize, usize)>,
}

impl ClassifierNet {
    pub fn new<R: Rng + ?Sized>(
        in_dim: usize,
        hidden: Vec<usize>,
        classes: usize,
        slope: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if classes == 0 {
            return Err(Error::InvalidArgument("classifier needs a class".into()));
        }
        let mut params = ParamStore::new();
        let mut fan_in = in_dim;
        for (l, &w) in hidden.iter().enumerate() {
            layers::init_hidden(&mut params, &format!("feat.{l}"), fan_in, w, slope, rng);
            fan_in = w;
        }
        layers::init_linear(&mut params, "out", fan_in, classes, rng);
        Ok(ClassifierNet {
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

    pub fn feature_names(&self) -> Vec<String> {
        (0..self.hidden.len())
            .flat_map(|l| [format!("feat.{l}.w"), format!("feat.{l}.b")])
            .collect()
    }

    pub fn classifier_forward(&self, x: &Tensor) -> Result<Tensor> {
        self.class_probs(x)
    }
}

impl ClassHead for ClassifierNet {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn logits(&self, g: &mut Graph, x: Var) -> Result<Var> {
        check_input(g.value(x), self.in_dim, "classifier input")?;
        let mut h = x;
        for l in 0..self.hidden.len() {
            let a = layers::dense(g, &self.params, &format!("feat.{l}"), h)?;
            h = g.leaky_relu(a, self.slope)?;
        }
        layers::dense(g, &self.params, "out", h)
    }

    fn class_probs(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::no_grad();
        let xv = g.constant(x.clone());
        let l = self.logits(&mut g, xv)?;
        Ok(softmax_rows(g.value(l)))
    }

    fn expand_output_layer(&mut self, new_total: usize, rng: &mut dyn rand::RngCore) -> Result<()> {
        layers::expand_columns(&mut self.params, "out", new_total, rng)?;
        self.expansions.push((self.num_classes, new_total));
        self.num_classes = new_total;
        Ok(())
    }

    fn output_names(&self) -> Vec<String> {
        vec!["out.w".to_string(), "out.b".to_string()]
    }

    fn expansions(&self) -> &[(usize, usize)] {
        &self.expansions
    }
}
