use rand::Rng;

use crate::tensor::{Graph, Linear, ParamStore, Var};
use crate::Scalar;

/// Semantic concept predictor.
///
/// A shared MLP runs on every encoder token, a max over tokens pools them into
/// one vector, and a two-layer MLP maps that to `K` concept logits.
#[derive(Clone, Debug)]
pub struct ConceptHead {
    pub shared: Linear,
    pub hidden: Linear,
    pub out: Linear,
}

/// Concept logits and their sigmoid probabilities, both `[K]`.
#[derive(Clone, Copy, Debug)]
pub struct ConceptOutput {
    pub logits: Var,
    pub probs: Var,
}

impl ConceptHead {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        token_dim: usize,
        hidden: [usize; 2],
        concepts: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            shared: Linear::new(
                store,
                &format!("{name}.shared"),
                token_dim,
                hidden[0],
                true,
                rng,
            ),
            hidden: Linear::new(
                store,
                &format!("{name}.hidden"),
                hidden[0],
                hidden[1],
                true,
                rng,
            ),
            out: Linear::new(
                store,
                &format!("{name}.out"),
                hidden[1],
                concepts,
                true,
                rng,
            ),
        }
    }

    pub fn concepts(&self) -> usize {
        self.out.fan_out
    }

    /// `tokens` is `[T', D]`.
    pub fn forward<T: Scalar>(&self, g: &Graph<'_, T>, tokens: Var, dropout: f64) -> ConceptOutput {
        let per_token = g.dropout(g.tape.relu(self.shared.forward(g, tokens)), dropout);
        let pooled = g.tape.max_axis(per_token, 0);
        let pooled = g.tape.reshape(pooled, &[1, self.shared.fan_out]);
        let h = g.dropout(g.tape.relu(self.hidden.forward(g, pooled)), dropout);
        let logits = g.tape.reshape(self.out.forward(g, h), &[self.out.fan_out]);
        ConceptOutput {
            logits,
            probs: g.tape.sigmoid(logits),
        }
    }
}
