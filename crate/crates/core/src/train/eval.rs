use alloc::vec::Vec;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::metrics::{rank_of, Averaging, CascadeRow, EvalReport, DEFAULT_KS};
use crate::model::FastWeights;
use crate::model::{ModelState, UserTableValues};
use crate::module::{grads_for, Module};
use crate::optim::sgd_step;

use super::{aux_term, batch_loss, primary_terms, view_seed, Sample, TrainConfig};

/// `δ` plain SGD steps on the auxiliary loss of `s`, starting from the
/// model's adaptor, projector and predictor. The model itself is the
/// target branch and is never modified.
pub fn inner_adapt(
    state: &ModelState,
    tables: &UserTableValues,
    s: &Sample,
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<FastWeights> {
    let mut fast = state.fast_weights();
    for step in 0..steps {
        let mut g = Graph::new();
        let theta = state.bind_with_tables(&mut g, &[], tables);
        let fv = fast.bind(&mut g, true);
        let loss = aux_term(
            &mut g,
            fv.online(&theta.encoder),
            theta.self_target(),
            &theta.tables,
            s,
            state.config.mask_index(),
            view_seed(seed, &s.id, step as u64),
        )?;
        let grads = g.backward(loss)?;
        let gv = grads_for(&grads, &fv);
        sgd_step(&mut fast.tensors_mut(), &gv, lr)?;
    }
    Ok(fast)
}

/// Test-time adaptation of a trained model to one cascade.
pub fn ttt_adapt(state: &ModelState, tables: &UserTableValues, s: &Sample, ttt: &TttSettings) -> Result<FastWeights> {
    if s.seq.is_empty() {
        return Err(Error::invalid("test-time adaptation needs a non-empty cascade"));
    }
    inner_adapt(state, tables, s, ttt.steps, ttt.lr, ttt.seed)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TttSettings {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    /// Score every position after the first instead of the held-out suffix.
    pub all_positions: bool,
    pub averaging: Averaging,
    pub ks: Vec<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            all_positions: false,
            averaging: Averaging::Position,
            ks: DEFAULT_KS.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub popularity: f64,
    /// `(position, rank)` of the true user at each scored position.
    pub ranks: Vec<(usize, usize)>,
    pub skipped: usize,
}

/// Popularity from the observed prefix and next-user ranks, using `fast`
/// in place of the model's own adapted partitions when given.
pub fn predict(
    state: &ModelState,
    tables: &UserTableValues,
    s: &Sample,
    fast: Option<&FastWeights>,
    all_positions: bool,
) -> Result<Prediction> {
    let mut g = Graph::new();
    let theta = state.bind_with_tables(&mut g, &[], tables);
    let fv = fast.map(|f| f.bind(&mut g, false));
    let adaptor = fv.as_ref().map_or(&theta.adaptor, |f| &f.adaptor);
    let out = theta.net(adaptor).forward(&mut g, &s.seq, s.observed)?;
    let popularity = g.value(out.macro_pred).item();
    let mut ranks = Vec::new();
    let mut skipped = 0;
    if let Some(logits) = out.micro_logits {
        let scores = g.value(logits);
        let first = if all_positions { 1 } else { s.observed.max(1) };
        for pos in first..s.seq.len() {
            let excluded: &[usize] = if state.config.mask_seen { &s.seq[..pos] } else { &[] };
            match rank_of(scores.row(pos - 1), s.seq[pos], excluded) {
                Some(r) => ranks.push((pos, r)),
                None => {
                    log::warn!("cascade {}: true user at position {pos} is masked; skipped", s.id);
                    skipped += 1;
                }
            }
        }
    }
    Ok(Prediction {
        popularity,
        ranks,
        skipped,
    })
}

/// Evaluation row for one cascade, adapting first when `ttt` is given.
pub fn evaluate_one(
    state: &ModelState,
    tables: &UserTableValues,
    s: &Sample,
    ttt: Option<&TttSettings>,
    opts: &EvalOptions,
) -> Result<CascadeRow> {
    let fast = match ttt {
        Some(t) => Some(ttt_adapt(state, tables, s, t)?),
        None => None,
    };
    let p = predict(state, tables, s, fast.as_ref(), opts.all_positions)?;
    CascadeRow::new(s.id.clone(), s.final_size, p.popularity, p.ranks, p.skipped)
}

/// Sequential evaluation over `samples`; the model is never modified.
pub fn evaluate(
    state: &ModelState,
    tables: &UserTableValues,
    samples: &[Sample],
    ttt: Option<&TttSettings>,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let rows = samples
        .iter()
        .map(|s| evaluate_one(state, tables, s, ttt, opts))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_rows(rows, &opts.ks, opts.averaging)
}

/// `L_Pri` over a whole set with the model's own parameters.
pub fn primary_objective(state: &ModelState, tables: &UserTableValues, samples: &[Sample], lambda: f64) -> Result<f64> {
    let mut micro = Vec::new();
    let mut macro_ = Vec::new();
    for s in samples {
        let mut g = Graph::new();
        let theta = state.bind_with_tables(&mut g, &[], tables);
        let (mi, ma) = primary_terms(&mut g, &theta.net(&theta.adaptor), s, state.config.mask_seen)?;
        if let Some(mi) = mi {
            micro.push(g.value(mi).item());
        }
        macro_.push(g.value(ma).item());
    }
    if macro_.is_empty() {
        return Err(Error::invalid("primary objective over an empty set"));
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    Ok((1.0 - lambda) * mean(&micro) + lambda * mean(&macro_))
}

/// `L_Meta(c; φ_c)` for one cascade after `δ` inner steps.
pub(crate) fn meta_value(state: &ModelState, tables: &UserTableValues, s: &Sample, cfg: &TrainConfig, seed: u64) -> Result<f64> {
    let fast = inner_adapt(state, tables, s, cfg.inner_steps, cfg.inner_lr, seed)?;
    let mut g = Graph::new();
    let theta = state.bind_with_tables(&mut g, &[], tables);
    let fv = fast.bind(&mut g, false);
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
    Ok(g.value(loss.total).item())
}

/// Mean adapted `L_Meta` over a set.
pub fn meta_objective(state: &ModelState, tables: &UserTableValues, samples: &[Sample], cfg: &TrainConfig) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("meta objective over an empty set"));
    }
    let mut total = 0.0;
    for s in samples {
        total += meta_value(state, tables, s, cfg, cfg.seed)?;
    }
    Ok(total / samples.len() as f64)
}
