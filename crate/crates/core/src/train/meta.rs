use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::FastWeights;
use crate::model::{ModelState, Partition, Phase, UserTableValues};
use crate::module::{grads_for, Module};
use crate::optim::AdamState;
use crate::rng::{self, derive_seed};
use crate::tensor::Tensor;

use super::eval::{inner_adapt, meta_objective};
use super::{aux_term, batch_loss, view_seed, Corpus, Sample, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct MetaEpoch {
    pub epoch: usize,
    /// Mean `L_Meta` over the tasks that ran.
    pub mean_meta: f64,
    pub tasks: usize,
    pub skipped: usize,
    pub valid_meta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaReport {
    /// Mean `L_Meta` of each outer iteration.
    pub iterations: Vec<f64>,
    pub epochs: Vec<MetaEpoch>,
    pub best_epoch: Option<usize>,
}

/// First-order meta-auxiliary training. Each outer iteration takes
/// `meta_batch` cascades; for each, `inner_steps` SGD steps on the
/// auxiliary loss give task weights φ, and the gradient of
/// `L_Pri(φ) + γ·L_Aux(φ)` with respect to φ (and the heads) is summed into
/// an Adam step on the model. User encoders and the generic encoder stay
/// frozen.
pub fn meta_train(state: &mut ModelState, corpus: &Corpus, cfg: &TrainConfig) -> Result<MetaReport> {
    cfg.validate()?;
    if state.phase != Phase::Joint {
        return Err(Error::invalid(alloc::format!(
            "meta-training starts from a joint checkpoint, got phase `{}`",
            state.phase.name()
        )));
    }
    if corpus.train.is_empty() {
        return Err(Error::invalid("meta-training needs training cascades"));
    }
    state.enter_phase(Phase::Meta);
    let tables = state.user_tables(&corpus.graph, &corpus.ops)?;
    let parts = Phase::Meta.trainable();
    let mut adam = AdamState::new(cfg.meta_lr);
    let mut report = MetaReport {
        iterations: Vec::new(),
        epochs: Vec::new(),
        best_epoch: None,
    };
    let mut best: Option<(f64, ModelState)> = None;
    let mut order: Vec<usize> = (0..corpus.train.len()).collect();

    for epoch in 0..cfg.meta_epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::derived(cfg.seed, "meta-order", epoch as u64));
        let epoch_seed = derive_seed(cfg.seed, "meta-epoch", epoch as u64);
        let (mut total, mut ran, mut skipped) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(cfg.meta_batch) {
            let mut sum: Option<Vec<Tensor>> = None;
            let (mut iter_total, mut iter_ran) = (0.0, 0usize);
            for &i in chunk {
                let s = &corpus.train[i];
                match task_gradient(state, &tables, s, cfg, epoch_seed) {
                    Ok((value, grads)) => {
                        match &mut sum {
                            None => sum = Some(grads),
                            Some(acc) => {
                                for (a, g) in acc.iter_mut().zip(&grads) {
                                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                        *x += y;
                                    }
                                }
                            }
                        }
                        iter_total += value;
                        iter_ran += 1;
                    }
                    Err(e @ (Error::NonFinite(_) | Error::Domain { .. })) => {
                        log::warn!("meta epoch {epoch}: skipping cascade {}: {e}", s.id);
                        skipped += 1;
                    }
                    Err(e) => return Err(e),
                }
            }
            if let Some(grads) = sum {
                adam.step(&mut state.tensors_mut_of(parts), &grads)?;
                report.iterations.push(iter_total / iter_ran as f64);
            }
            total += iter_total;
            ran += iter_ran;
        }
        let tasks = ran + skipped;
        if skipped as f64 > cfg.max_skip_fraction * tasks as f64 {
            return Err(Error::Aborted(alloc::format!(
                "meta epoch {epoch}: {skipped} of {tasks} tasks skipped"
            )));
        }
        let mut stats = MetaEpoch {
            epoch,
            mean_meta: if ran > 0 { total / ran as f64 } else { f64::NAN },
            tasks,
            skipped,
            valid_meta: None,
        };
        if cfg.select_best && !corpus.valid.is_empty() {
            let v = meta_objective(state, &tables, &corpus.valid, cfg)?;
            stats.valid_meta = Some(v);
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, state.clone()));
                report.best_epoch = Some(epoch);
            }
        }
        log::info!(
            "meta epoch {epoch}: mean L_meta {:.6}, skipped {skipped}/{tasks}, valid {:?}",
            stats.mean_meta,
            stats.valid_meta
        );
        report.epochs.push(stats);
    }
    if let Some((_, s)) = best {
        *state = s;
    }
    Ok(report)
}

/// `L_Meta(c; φ_c)` and its first-order gradient, ordered like the
/// meta-phase trainable partitions (adaptor, projector, predictor, heads).
fn task_gradient(
    state: &ModelState,
    tables: &UserTableValues,
    s: &Sample,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(f64, Vec<Tensor>)> {
    let fast: FastWeights = inner_adapt(state, tables, s, cfg.inner_steps, cfg.inner_lr, seed)?;
    let heads = [Partition::MacroHead, Partition::MicroHead];
    let mut g = Graph::new();
    let theta = state.bind_with_tables(&mut g, &heads, tables);
    let fv = fast.bind(&mut g, true);
    let mut aux = |g: &mut Graph, s: &Sample| {
        aux_term(
            g,
            fv.online(&theta.encoder),
            theta.self_target(),
            &theta.tables,
            s,
            state.config.mask_index(),
            view_seed(seed, &s.id, cfg.inner_steps as u64),
        )
    };
    let loss = batch_loss(
        &mut g,
        &theta.net(&fv.adaptor),
        &[s],
        cfg.lambda,
        state.config.mask_seen,
        Some((cfg.gamma, &mut aux)),
    )?;
    let grads = g.backward(loss.total)?;
    let mut out = grads_for(&grads, &fv);
    out.extend(theta.vars_of(&heads).into_iter().map(|v| grads.get_or_zero(v)));
    Ok((g.value(loss.total).item(), out))
}
