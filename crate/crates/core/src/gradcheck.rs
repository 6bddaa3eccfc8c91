//! Central finite-difference verification of analytic gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::batch::Batch;
use crate::config::{TrainConfig, Variant};
use crate::corpus::TokenizedDoc;
use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::model::FaetModel;
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vocab::build_vocab;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates sampled per parameter group (all of them for smaller groups).
    pub samples_per_group: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            samples_per_group: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupCheck {
    pub name: String,
    pub checked: usize,
    pub nonzero: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_error <= self.tolerance)
    }
}

/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn evaluate<S: Scalar, F>(store: &ParamStore<S>, objective: &mut F) -> Result<f64>
where
    F: FnMut(&mut Graph<S>, &Bound) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let loss = objective(&mut g, &bound)?;
    Ok(g.value(loss).item().as_f64())
}

/// Compares backward-pass gradients of `objective` with central differences.
///
/// `objective` must be deterministic: it is re-run twice per checked
/// coordinate. Coordinates with a nonzero analytic gradient are preferred so
/// the check exercises real signal paths.
pub fn finite_difference_check<S: Scalar, F>(
    store: &mut ParamStore<S>,
    mut objective: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<S>, &Bound) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let loss = objective(&mut g, &bound)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<S>> = store
        .ids()
        .map(|id| {
            g.grad(bound.node(id))
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(store.value(id).shape()))
        })
        .collect();
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let h = S::of(cfg.step);
    let mut groups = Vec::new();
    let ids: Vec<_> = store.ids().collect();
    for (id, grad) in ids.into_iter().zip(&analytic) {
        let param = store.get(id);
        let (_, cols) = param.value.dims2();
        let usable: Vec<usize> = (0..param.value.len())
            .filter(|k| !param.frozen_rows.contains(&(k / cols.max(1))))
            .collect();
        let mut nonzero: Vec<usize> = usable
            .iter()
            .copied()
            .filter(|&k| grad.data()[k] != S::zero())
            .collect();
        let nonzero_count = nonzero.len();
        nonzero.shuffle(&mut rng);
        let mut picked: Vec<usize> = nonzero.into_iter().take(cfg.samples_per_group).collect();
        if picked.len() < cfg.samples_per_group {
            let mut rest: Vec<usize> = usable.iter().copied().filter(|k| !picked.contains(k)).collect();
            rest.shuffle(&mut rng);
            picked.extend(rest.into_iter().take(cfg.samples_per_group - picked.len()));
        }
        picked.sort_unstable();

        let mut worst = 0.0f64;
        for &k in &picked {
            let original = store.value(id).data()[k];
            store.get_mut(id).value.data_mut()[k] = original + h;
            let plus = evaluate(store, &mut objective)?;
            store.get_mut(id).value.data_mut()[k] = original - h;
            let minus = evaluate(store, &mut objective)?;
            store.get_mut(id).value.data_mut()[k] = original;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            worst = worst.max(relative_error(grad.data()[k].as_f64(), numeric));
        }
        groups.push(GroupCheck {
            name: store.get(id).name.clone(),
            checked: picked.len(),
            nonzero: nonzero_count,
            max_rel_error: worst,
        });
    }
    Ok(GradCheckReport {
        groups,
        tolerance: cfg.tolerance,
    })
}

/// Gradient check of a function of plain input tensors (named `x0`, `x1`, ...).
pub fn check_function<S: Scalar, F>(
    inputs: Vec<Tensor<S>>,
    mut f: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<S>, &[NodeId]) -> Result<NodeId>,
{
    let mut store = ParamStore::new();
    let ids: Vec<_> = inputs
        .into_iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("x{i}"), t))
        .collect();
    finite_difference_check(
        &mut store,
        |g, bound| {
            let nodes: Vec<NodeId> = ids.iter().map(|&id| bound.node(id)).collect();
            f(g, &nodes)
        },
        cfg,
    )
}

/// Gradient check of the full training loss on a seeded one-document
/// instance with three text tokens and two emojis.
pub fn model_gradcheck(variant: Variant, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let doc = TokenizedDoc::new(&["so", "not", "fine"], &["E_SMILE", "E_CRY"], Some(1));
    let config = TrainConfig {
        d: 3,
        d_w: 4,
        n_filters: 2,
        kernel_widths: vec![1, 2],
        dropout: 0.0,
        variant,
        seed: cfg.seed,
        ..TrainConfig::default()
    };
    let vocab = build_vocab(std::slice::from_ref(&doc), 1);
    let mut model = FaetModel::<f64>::new(config, vocab)?;
    let batch = Batch::from_encoded(&[model.encode(&doc)]);
    let loss_cfg = model.loss_config();
    let net = model.net.clone();
    finite_difference_check(
        &mut model.params,
        |g, bound| Ok(net.batch_loss(g, bound, &batch, &loss_cfg, &mut None)?.total),
        cfg,
    )
}
