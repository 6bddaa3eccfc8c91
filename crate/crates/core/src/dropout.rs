use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::TensorError;
use crate::graph::{Graph, NodeId};
use crate::scalar::Scalar;

/// Inverted dropout driven by a seeded mask stream.
#[derive(Clone, Debug)]
pub struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        Dropout {
            rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Zeroes each element with probability `rate` and rescales survivors by
    /// `1 / (1 - rate)`. A zero rate records nothing.
    pub fn apply<S: Scalar>(&mut self, g: &mut Graph<S>, x: NodeId) -> Result<NodeId, TensorError> {
        if self.rate == 0.0 {
            return Ok(x);
        }
        let keep = S::of(1.0 / (1.0 - self.rate));
        let mask = (0..g.value(x).len())
            .map(|_| if self.rng.gen::<f64>() < self.rate { S::zero() } else { keep })
            .collect();
        g.dropout(x, mask)
    }
}

/// Applies `dropout` when present, otherwise passes `x` through.
pub fn maybe_dropout<S: Scalar>(
    dropout: &mut Option<&mut Dropout>,
    g: &mut Graph<S>,
    x: NodeId,
) -> Result<NodeId, TensorError> {
    match dropout {
        Some(d) => d.apply(g, x),
        None => Ok(x),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn mask_is_seeded_and_inverted() {
        let run = |seed| {
            let mut g = Graph::<f64>::new();
            let x = g.constant(Tensor::full(&[1, 1000], 1.0));
            let y = Dropout::new(0.2, seed).apply(&mut g, x).unwrap();
            g.value(y).data().to_vec()
        };
        let a = run(5);
        assert_eq!(a, run(5));
        assert!(a.iter().all(|&v| v == 0.0 || v == 1.25));
        let dropped = a.iter().filter(|&&v| v == 0.0).count();
        assert!((120..280).contains(&dropped), "{dropped}");
    }
}
