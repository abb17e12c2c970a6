//! The training loop: per batch, the composite loss
//! `L = L_rec + lambda1 * L_peo + lambda2 * L_ms` is recorded on a tape,
//! differentiated, and applied with Adam. Everything is a pure function of
//! (config, split, seed).

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::backbone;
use crate::config::{ConfigError, EpochLosses, ExperimentConfig};
use crate::dataset::{sample_train_negatives, DatasetError, InteractionDataset, SplitSet};
use crate::engine::{
    grad_check, mix_seed, EngineError, GradCheckReport, OptimConfig, ParamStore, Tape, Var,
};
use crate::model::{shape_spec, ITEM_TABLE, USER_TABLE};
use crate::msvr::{self, CoalitionGame, MsBatch};
use crate::peo::{self, HeadNames};

#[derive(Error, Debug)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("numeric fault at epoch {epoch}, batch {batch}: {source}")]
    Numeric {
        epoch: usize,
        batch: usize,
        source: EngineError,
    },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

mod tags {
    pub const SHUFFLE: u64 = 0x534846;
    pub const REC_NEG: u64 = 0x524e47;
    pub const PEO_NEG: u64 = 0x504e47;
    pub const MS_PART_USER: u64 = 0x4d5355;
    pub const MS_PART_ITEM: u64 = 0x4d5349;
    pub const MS_CAP_USER: u64 = 0x435055;
    pub const MS_CAP_ITEM: u64 = 0x435049;
}

pub struct TrainOutput {
    pub store: ParamStore,
    pub epoch_losses: Vec<EpochLosses>,
}

pub fn train(cfg: &ExperimentConfig, split: &SplitSet) -> Result<TrainOutput, TrainError> {
    cfg.validate()?;
    let train_ds = &split.train;
    let spec = shape_spec(cfg, train_ds.num_users(), train_ds.num_items());
    let mut store = ParamStore::init(&spec, cfg.seed)?;
    let optim = OptimConfig {
        learning_rate: cfg.learning_rate,
        batch_size: cfg.batch,
        epochs: cfg.epochs,
        seed: cfg.seed,
        ..OptimConfig::default()
    };
    let pairs: Vec<(usize, usize)> = train_ds.ordered_pairs().collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[tags::SHUFFLE, epoch as u64]));
        order.shuffle(&mut rng);
        let mut sums = EpochLosses {
            rec: 0.0,
            peo: 0.0,
            ms: 0.0,
            total: 0.0,
        };
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch).enumerate() {
            let batch: Vec<(usize, usize)> = chunk.iter().map(|&ix| pairs[ix]).collect();
            let losses = run_step(cfg, &mut store, &optim, train_ds, &batch, epoch, batch_idx)
                .map_err(|source| match source {
                    StepError::Engine(source) => TrainError::Numeric {
                        epoch,
                        batch: batch_idx,
                        source,
                    },
                    StepError::Dataset(e) => TrainError::Dataset(e),
                })?;
            sums.rec += losses.rec;
            sums.peo += losses.peo;
            sums.ms += losses.ms;
            sums.total += losses.total;
            batches += 1;
        }
        let n = batches.max(1) as f64;
        epoch_losses.push(EpochLosses {
            rec: sums.rec / n,
            peo: sums.peo / n,
            ms: sums.ms / n,
            total: sums.total / n,
        });
    }
    Ok(TrainOutput {
        store,
        epoch_losses,
    })
}

enum StepError {
    Engine(EngineError),
    Dataset(DatasetError),
}

impl From<EngineError> for StepError {
    fn from(e: EngineError) -> Self {
        StepError::Engine(e)
    }
}

impl From<DatasetError> for StepError {
    fn from(e: DatasetError) -> Self {
        StepError::Dataset(e)
    }
}

fn run_step(
    cfg: &ExperimentConfig,
    store: &mut ParamStore,
    optim: &OptimConfig,
    train_ds: &InteractionDataset,
    batch: &[(usize, usize)],
    epoch: usize,
    batch_idx: usize,
) -> Result<EpochLosses, StepError> {
    let plan = BatchPlan::derive(cfg, store, train_ds, batch, epoch, batch_idx)?;
    let mut tape = Tape::new();
    let graph = build_batch_losses(cfg, store, &plan, &mut tape);
    let losses = EpochLosses {
        rec: tape.value(graph.rec).item(),
        peo: graph.peo.map(|v| tape.value(v).item()).unwrap_or(0.0),
        ms: graph.ms.map(|v| tape.value(v).item()).unwrap_or(0.0),
        total: tape.value(graph.total).item(),
    };
    let grads = tape.backward(graph.total)?;
    store.adam_step(&grads, optim)?;
    Ok(losses)
}

/// Everything sampled for one batch, frozen so the forward pass is an exact
/// function of the parameter store: negatives, ranking triples, capped lists,
/// and the per-position weights of the sampled coalition partitions (the
/// gates are constants for differentiation).
pub struct BatchPlan {
    batch_len: usize,
    rec_u_rows: Vec<usize>,
    rec_i_rows: Vec<usize>,
    rec_labels: Vec<f64>,
    triples: (Vec<usize>, Vec<usize>, Vec<usize>),
    ms_user: MsBatch,
    ms_item: MsBatch,
}

impl BatchPlan {
    pub fn derive(
        cfg: &ExperimentConfig,
        store: &ParamStore,
        train_ds: &InteractionDataset,
        batch: &[(usize, usize)],
        epoch: usize,
        batch_idx: usize,
    ) -> Result<Self, DatasetError> {
        let seed = cfg.seed;
        let mut rec_u_rows = Vec::with_capacity(batch.len() * (1 + cfg.train_negatives));
        let mut rec_i_rows = Vec::with_capacity(rec_u_rows.capacity());
        let mut rec_labels = Vec::with_capacity(rec_u_rows.capacity());
        for (j, &(u, pos)) in batch.iter().enumerate() {
            let negs = sample_train_negatives(
                train_ds,
                u,
                cfg.train_negatives,
                mix_seed(
                    seed,
                    &[tags::REC_NEG, epoch as u64, batch_idx as u64, j as u64],
                ),
            )?;
            rec_u_rows.push(u);
            rec_i_rows.push(pos);
            rec_labels.push(1.0);
            for n in negs {
                rec_u_rows.push(u);
                rec_i_rows.push(n);
                rec_labels.push(0.0);
            }
        }

        let mut triples = (Vec::new(), Vec::new(), Vec::new());
        if cfg.peo && cfg.lambda1 > 0.0 {
            for (j, &(u, pos)) in batch.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
                    seed,
                    &[tags::PEO_NEG, epoch as u64, batch_idx as u64, j as u64],
                ));
                if let Some(neg) = uniform_negative(train_ds, u, &mut rng) {
                    triples.0.push(u);
                    triples.1.push(pos);
                    triples.2.push(neg);
                }
            }
        }

        // Representations as the partition sampler sees them right now.
        let repr = Representations::derive(cfg, store);
        let mut ms_user = MsBatch::default();
        let mut ms_item = MsBatch::default();
        if cfg.msvr_mode.enabled() && cfg.lambda2 > 0.0 {
            if cfg.msvr_mode.user_side() {
                for &u in distinct(batch.iter().map(|&(u, _)| u)).iter() {
                    push_side(
                        &mut ms_user,
                        repr.users.row(u),
                        u,
                        train_ds.user_list(u),
                        |item| repr.items.row(item),
                        cfg.coalition_cap,
                        mix_seed(seed, &[tags::MS_CAP_USER, u as u64, epoch as u64]),
                        mix_seed(seed, &[tags::MS_PART_USER, u as u64, epoch as u64]),
                    );
                }
            }
            if cfg.msvr_mode.item_side() {
                for &i in distinct(batch.iter().map(|&(_, i)| i)).iter() {
                    push_side(
                        &mut ms_item,
                        repr.items.row(i),
                        i,
                        train_ds.item_list(i),
                        |user| repr.users.row(user),
                        cfg.coalition_cap,
                        mix_seed(seed, &[tags::MS_CAP_ITEM, i as u64, epoch as u64]),
                        mix_seed(seed, &[tags::MS_PART_ITEM, i as u64, epoch as u64]),
                    );
                }
            }
        }
        Ok(BatchPlan {
            batch_len: batch.len(),
            rec_u_rows,
            rec_i_rows,
            rec_labels,
            triples,
            ms_user,
            ms_item,
        })
    }
}

struct Representations {
    users: crate::engine::Tensor,
    items: crate::engine::Tensor,
}

impl Representations {
    fn derive(cfg: &ExperimentConfig, store: &ParamStore) -> Self {
        let mut tape = Tape::new();
        let u = tape.param(USER_TABLE, store.get(USER_TABLE));
        let i = tape.param(ITEM_TABLE, store.get(ITEM_TABLE));
        if cfg.peo {
            let (mu_u, _) = peo::build_mean(&mut tape, store, u, &HeadNames::user(), cfg.peo_bias);
            let (mu_i, _) = peo::build_mean(&mut tape, store, i, &HeadNames::item(), cfg.peo_bias);
            Representations {
                users: tape.value(mu_u).clone(),
                items: tape.value(mu_i).clone(),
            }
        } else {
            Representations {
                users: tape.value(u).clone(),
                items: tape.value(i).clone(),
            }
        }
    }
}

/// The loss components of one batch as tape scalars.
pub struct LossGraph {
    pub rec: Var,
    /// Per-example mean of the distribution-similarity ranking loss.
    pub peo: Option<Var>,
    /// Per-example mean of the coalition valuation loss.
    pub ms: Option<Var>,
    pub total: Var,
}

/// Record the composite loss for a frozen batch plan. Given the same plan
/// this reconstructs the identical forward pass from any parameter store,
/// which is exactly what finite-difference checking needs.
pub fn build_batch_losses(
    cfg: &ExperimentConfig,
    store: &ParamStore,
    plan: &BatchPlan,
    tape: &mut Tape,
) -> LossGraph {
    let user_names = HeadNames::user();
    let item_names = HeadNames::item();

    let user_table = tape.param(USER_TABLE, store.get(USER_TABLE));
    let item_table = tape.param(ITEM_TABLE, store.get(ITEM_TABLE));
    let (mu_users, xs_users, mu_items, xs_items) = if cfg.peo {
        let (mu_u, xs_u) = peo::build_mean(tape, store, user_table, &user_names, cfg.peo_bias);
        let (mu_i, xs_i) = peo::build_mean(tape, store, item_table, &item_names, cfg.peo_bias);
        (mu_u, Some(xs_u), mu_i, Some(xs_i))
    } else {
        (user_table, None, item_table, None)
    };

    let rec_users = tape.select_rows(mu_users, plan.rec_u_rows.clone());
    let rec_items = tape.select_rows(mu_items, plan.rec_i_rows.clone());
    let scores = backbone::build_pair_scores(tape, store, cfg.backbone, rec_users, rec_items);
    let rec = backbone::build_rec_loss(tape, scores, plan.rec_labels.clone());

    let peo_term = if !plan.triples.0.is_empty() {
        let (t_users, t_pos, t_neg) = &plan.triples;
        let count = t_users.len() as f64;
        let xs_u = xs_users.expect("peo heads required for triples");
        let xs_i = xs_items.expect("peo heads required for triples");
        let mu_u = tape.select_rows(mu_users, t_users.clone());
        let xs_u_sel = tape.select_rows(xs_u, t_users.clone());
        let sig_u = peo::build_sigma(tape, store, xs_u_sel, &user_names);
        let mu_p = tape.select_rows(mu_items, t_pos.clone());
        let xs_p = tape.select_rows(xs_i, t_pos.clone());
        let sig_p = peo::build_sigma(tape, store, xs_p, &item_names);
        let mu_n = tape.select_rows(mu_items, t_neg.clone());
        let xs_n = tape.select_rows(xs_i, t_neg.clone());
        let sig_n = peo::build_sigma(tape, store, xs_n, &item_names);
        let d_pos = peo::build_neg_w2(tape, mu_u, mu_p, sig_u, sig_p);
        let d_neg = peo::build_neg_w2(tape, mu_u, mu_n, sig_u, sig_n);
        let sum = peo::build_peo_loss(tape, d_pos, d_neg);
        Some(tape.scale(sum, 1.0 / count))
    } else {
        None
    };

    let user_loss = (!plan.ms_user.is_empty())
        .then(|| msvr::build_ms_side_loss(tape, mu_users, mu_items, &plan.ms_user));
    let item_loss = (!plan.ms_item.is_empty())
        .then(|| msvr::build_ms_side_loss(tape, mu_items, mu_users, &plan.ms_item));
    let ms_term = match (user_loss, item_loss) {
        (Some(a), Some(b)) => Some(tape.add(a, b)),
        (Some(a), None) => Some(a),
        (None, Some(b)) => Some(b),
        (None, None) => None,
    }
    .map(|s| tape.scale(s, 1.0 / plan.batch_len as f64));

    let mut total = rec;
    if let Some(p) = peo_term {
        let scaled = tape.scale(p, cfg.lambda1);
        total = tape.add(total, scaled);
    }
    if let Some(m) = ms_term {
        let scaled = tape.scale(m, cfg.lambda2);
        total = tape.add(total, scaled);
    }
    LossGraph {
        rec,
        peo: peo_term,
        ms: ms_term,
        total,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossComponent {
    Rec,
    Peo,
    Ms,
    Total,
}

/// Finite-difference check of one batch's analytic gradients for the chosen
/// loss component, with sampling structures (negatives, triples, gates)
/// frozen from the unperturbed store.
pub fn grad_check_component(
    cfg: &ExperimentConfig,
    split: &SplitSet,
    component: LossComponent,
    coords_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport, TrainError> {
    cfg.validate()?;
    let train_ds = &split.train;
    let spec = shape_spec(cfg, train_ds.num_users(), train_ds.num_items());
    let store = ParamStore::init(&spec, cfg.seed)?;
    let pairs: Vec<(usize, usize)> = train_ds.ordered_pairs().collect();
    let batch: Vec<(usize, usize)> = pairs.into_iter().take(cfg.batch).collect();
    let plan = BatchPlan::derive(cfg, &store, train_ds, &batch, 0, 0)?;
    let report = grad_check(
        &store,
        |s, tape| {
            let graph = build_batch_losses(cfg, s, &plan, tape);
            match component {
                LossComponent::Rec => graph.rec,
                LossComponent::Peo => graph.peo.expect("peo component not active"),
                LossComponent::Ms => graph.ms.expect("ms component not active"),
                LossComponent::Total => graph.total,
            }
        },
        coords_per_tensor,
        seed,
    )?;
    Ok(report)
}

/// First-occurrence-order distinct values.
fn distinct(values: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for v in values {
        if seen.insert(v) {
            out.push(v);
        }
    }
    out
}

/// Uniform non-interacted item; None if the user interacted with everything.
fn uniform_negative<R: Rng>(ds: &InteractionDataset, user: usize, rng: &mut R) -> Option<usize> {
    let m = ds.num_items();
    if ds.user_list(user).len() >= m {
        return None;
    }
    loop {
        let i = rng.gen_range(0..m);
        if !ds.interacted(user, i) {
            return Some(i);
        }
    }
}

/// Build one owner's contribution to a side loss: cap the list, derive
/// combination probabilities from the current representations, sample the
/// partition, and attach the per-position linear weights.
#[allow(clippy::too_many_arguments)]
fn push_side<'a, F>(
    ms: &mut MsBatch,
    owner_mu: &[f64],
    owner: usize,
    list: &[usize],
    member_mu: F,
    cap: usize,
    cap_seed: u64,
    partition_seed: u64,
) where
    F: Fn(usize) -> &'a [f64],
{
    if list.len() < 2 {
        return;
    }
    let capped = msvr::capped_subsample(list, cap, cap_seed);
    let members: Vec<&[f64]> = capped.iter().map(|&e| member_mu(e)).collect();
    let game = CoalitionGame::from_list(owner_mu, members);
    let probs = game.coalition_probs();
    let partition = msvr::sample_partition(&probs, partition_seed);
    let weights = msvr::element_weights(&partition);
    ms.push_list(owner, &capped, &weights);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::MsvrMode;
    use crate::dataset::{split, SplitMode};

    /// Tiny synthetic dataset: two user groups with disjoint item tastes.
    pub(crate) fn toy_split(users_per_group: usize, items_per_group: usize) -> SplitSet {
        let mut pairs = Vec::new();
        let num_users = users_per_group * 2;
        let num_items = items_per_group * 2;
        for u in 0..num_users {
            let base = if u < users_per_group { 0 } else { items_per_group };
            for j in 0..items_per_group {
                pairs.push((u, base + j));
            }
        }
        let ds = InteractionDataset::from_pairs(num_users, num_items, &pairs);
        split(&ds, SplitMode::LeaveOneOut, 7).unwrap()
    }

    fn desk_config() -> ExperimentConfig {
        ExperimentConfig {
            d: 8,
            epochs: 3,
            batch: 16,
            train_negatives: 4,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn loss_decreases_on_toy_set() {
        let split = toy_split(5, 8);
        let cfg = ExperimentConfig {
            peo: false,
            msvr_mode: MsvrMode::Off,
            lambda1: 0.0,
            lambda2: 0.0,
            epochs: 100,
            d: 8,
            batch: 16,
            train_negatives: 4,
            learning_rate: 0.01,
            ..ExperimentConfig::default()
        };
        let out = train(&cfg, &split).unwrap();
        let first = out.epoch_losses.first().unwrap().rec;
        let last = out.epoch_losses.last().unwrap().rec;
        assert!(
            last < first * 0.7,
            "rec loss should fall substantially: {first} -> {last}"
        );
    }

    #[test]
    fn all_components_logged_nonzero_with_defaults() {
        let split = toy_split(4, 6);
        let cfg = desk_config();
        let out = train(&cfg, &split).unwrap();
        let e = &out.epoch_losses[0];
        assert!(e.rec > 0.0);
        assert!(e.peo > 0.0);
        assert!(e.ms != 0.0);
        assert!((e.total - (e.rec + cfg.lambda1 * e.peo + cfg.lambda2 * e.ms)).abs() < 1e-9);
    }

    #[test]
    fn zero_lambdas_and_msvr_off_match_plain_backbone_trace() {
        let split = toy_split(4, 6);
        let plain = ExperimentConfig {
            peo: false,
            msvr_mode: MsvrMode::Off,
            lambda1: 0.0,
            lambda2: 0.0,
            ..desk_config()
        };
        let off = ExperimentConfig {
            peo: false,
            msvr_mode: MsvrMode::Off,
            lambda1: 0.0,
            lambda2: 0.0,
            ..desk_config()
        };
        let a = train(&plain, &split).unwrap();
        let b = train(&off, &split).unwrap();
        assert_eq!(a.epoch_losses, b.epoch_losses);
        for name in a.store.names() {
            assert_eq!(a.store.get(name).data(), b.store.get(name).data());
        }
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let split = toy_split(4, 6);
        let cfg = desk_config();
        let a = train(&cfg, &split).unwrap();
        let b = train(&cfg, &split).unwrap();
        assert_eq!(a.epoch_losses, b.epoch_losses);
        for name in a.store.names() {
            assert_eq!(a.store.get(name).data(), b.store.get(name).data());
        }
    }

    #[test]
    fn msvr_user_only_mode_trains_and_logs_ms() {
        let split = toy_split(4, 6);
        let cfg = ExperimentConfig {
            msvr_mode: MsvrMode::UserOnly,
            peo: false,
            lambda1: 0.0,
            ..desk_config()
        };
        let out = train(&cfg, &split).unwrap();
        assert!(out.epoch_losses[0].ms != 0.0);
    }

    #[test]
    fn composite_gradients_match_finite_differences() {
        let split = toy_split(3, 5);
        let cfg = ExperimentConfig {
            d: 6,
            batch: 8,
            train_negatives: 3,
            ..ExperimentConfig::default()
        };
        for component in [
            LossComponent::Rec,
            LossComponent::Peo,
            LossComponent::Ms,
            LossComponent::Total,
        ] {
            let report = grad_check_component(&cfg, &split, component, 4, 11).unwrap();
            assert!(
                report.max_rel_err < 1e-3,
                "{component:?} rel err {} at {:?}",
                report.max_rel_err,
                report.worst
            );
        }
    }
}
