use serde::{Deserialize, Serialize};

use crate::error::PolicyError;
use crate::model::PdmpModel;

/// Ordinary feedback selector: one action index per interior grid state and
/// per boundary point. Between grid points the action of the cell owner
/// (the upstream grid point of the flow line) applies.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeedbackPolicy {
    pub interior: Vec<usize>,
    pub boundary: Vec<usize>,
}

impl FeedbackPolicy {
    /// Lowest feasible action index everywhere.
    pub fn lowest_index(model: &PdmpModel) -> Self {
        let n = model.n_interior();
        let pick = |s: usize| *model.actions.feasible[s].iter().min().expect("non-empty");
        Self {
            interior: (0..n).map(pick).collect(),
            boundary: (n..model.n_states()).map(pick).collect(),
        }
    }

    pub fn constant(model: &PdmpModel, action: usize) -> Self {
        Self {
            interior: vec![action; model.n_interior()],
            boundary: vec![action; model.grid.n_boundary()],
        }
    }

    /// Uniformly random feasible selector.
    pub fn random<R: rand::Rng>(model: &PdmpModel, rng: &mut R) -> Self {
        use rand::seq::SliceRandom;
        let n = model.n_interior();
        let mut pick = |s: usize| *model.actions.feasible[s].choose(rng).expect("non-empty");
        let interior = (0..n).map(&mut pick).collect();
        let boundary = (n..model.n_states()).map(&mut pick).collect();
        Self { interior, boundary }
    }

    pub fn action(&self, state: usize) -> usize {
        let n = self.interior.len();
        if state < n {
            self.interior[state]
        } else {
            self.boundary[state - n]
        }
    }

    pub fn check(&self, model: &PdmpModel) -> Result<(), PolicyError> {
        if self.interior.len() != model.n_interior() {
            return Err(PolicyError::Length {
                what: "interior",
                expected: model.n_interior(),
                found: self.interior.len(),
            });
        }
        if self.boundary.len() != model.grid.n_boundary() {
            return Err(PolicyError::Length {
                what: "boundary",
                expected: model.grid.n_boundary(),
                found: self.boundary.len(),
            });
        }
        for s in 0..model.n_states() {
            let a = self.action(s);
            if !model.actions.is_feasible(s, a) {
                return Err(PolicyError::Infeasible {
                    state: s,
                    action: a,
                });
            }
        }
        Ok(())
    }

    /// Number of states (interior and boundary) where the two selectors differ.
    pub fn changed_states(&self, other: &Self) -> usize {
        self.interior
            .iter()
            .zip(&other.interior)
            .chain(self.boundary.iter().zip(&other.boundary))
            .filter(|(a, b)| a != b)
            .count()
    }
}
