use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::auxiliary::update_target;
use crate::model::{ModelState, Phase};
use crate::optim::AdamState;
use crate::rng;

use super::eval::primary_objective;
use super::{aux_term, batch_loss, view_seed, Corpus, Sample, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean over batches of the primary loss.
    pub train_primary: f64,
    /// Mean over batches of the auxiliary loss (before weighting by γ).
    pub train_aux: Option<f64>,
    pub valid_primary: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointReport {
    pub epochs: Vec<EpochStats>,
    /// Epoch whose parameters were kept, if selection ran.
    pub best_epoch: Option<usize>,
}

/// Adam on `L_Pri + γ·L_Aux` over shuffled mini-batches, with an EMA update
/// of the target adaptor and projector after every step. Keeps the epoch
/// with the lowest validation `L_Pri` when validation data exists and
/// `select_best` is set.
pub fn joint_train(state: &mut ModelState, corpus: &Corpus, cfg: &TrainConfig) -> Result<JointReport> {
    cfg.validate()?;
    if corpus.train.is_empty() {
        return Err(Error::invalid("joint training needs training cascades"));
    }
    state.enter_phase(Phase::Joint);
    let parts = Phase::Joint.trainable();
    let mask = state.config.mask_index();
    let mut adam = AdamState::new(cfg.lr);
    let mut report = JointReport {
        epochs: Vec::new(),
        best_epoch: None,
    };
    let mut best: Option<(f64, ModelState)> = None;
    let mut order: Vec<usize> = (0..corpus.train.len()).collect();

    for epoch in 0..cfg.joint_epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::derived(cfg.seed, "joint-order", epoch as u64));
        let (mut pri_sum, mut aux_sum, mut batches) = (0.0, 0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &corpus.train[i]).collect();
            let diag = |e: Error| {
                let ids: Vec<&str> = batch.iter().map(|s| s.id.as_str()).collect();
                Error::Aborted(alloc::format!(
                    "joint training stopped at epoch {epoch}, batch {b} (cascades {ids:?}): {e}"
                ))
            };
            let mut g = Graph::new();
            let vars = state
                .bind_with_encoders(&mut g, parts, &corpus.graph, &corpus.ops)
                .map_err(diag)?;
            let mut aux = |g: &mut Graph, s: &Sample| {
                aux_term(
                    g,
                    vars.online(),
                    vars.ema_target(),
                    &vars.tables,
                    s,
                    mask,
                    view_seed(cfg.seed, &s.id, epoch as u64),
                )
            };
            let loss = batch_loss(
                &mut g,
                &vars.net(&vars.adaptor),
                &batch,
                cfg.lambda,
                state.config.mask_seen,
                Some((cfg.gamma, &mut aux)),
            )
            .map_err(diag)?;
            let grads = g.backward(loss.total).map_err(diag)?;
            let gv: Vec<_> = vars.vars_of(parts).into_iter().map(|v| grads.get_or_zero(v)).collect();
            adam.step(&mut state.tensors_mut_of(parts), &gv).map_err(diag)?;
            update_target(&mut state.target_adaptor, &state.adaptor, cfg.tau)?;
            update_target(&mut state.target_projector, &state.projector, cfg.tau)?;

            pri_sum += g.value(loss.primary).item();
            if let Some(a) = loss.aux {
                aux_sum += g.value(a).item();
            }
            batches += 1;
        }
        let mut stats = EpochStats {
            epoch,
            train_primary: pri_sum / batches as f64,
            train_aux: (cfg.gamma > 0.0).then_some(aux_sum / batches as f64),
            valid_primary: None,
        };
        if cfg.select_best && !corpus.valid.is_empty() {
            let tables = state.user_tables(&corpus.graph, &corpus.ops)?;
            let v = primary_objective(state, &tables, &corpus.valid, cfg.lambda)?;
            stats.valid_primary = Some(v);
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, state.clone()));
                report.best_epoch = Some(epoch);
            }
        }
        log::info!(
            "joint epoch {epoch}: train L_pri {:.6}, L_aux {:?}, valid L_pri {:?}",
            stats.train_primary,
            stats.train_aux,
            stats.valid_primary
        );
        report.epochs.push(stats);
    }
    if let Some((_, s)) = best {
        *state = s;
    }
    Ok(report)
}
