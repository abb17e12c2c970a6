//! Read-only model snapshot: materialized user/item representations derived
//! from a [`ParamStore`], plus the enhancement-aware user representation used
//! for ranking, explanations, and counterfactual interventions.

use rayon::prelude::*;

use crate::backbone::{self, BackboneKind};
use crate::config::{EnhanceMode, ExperimentConfig};
use crate::engine::{mix_seed, ParamStore, ShapeSpec, Tensor};
use crate::msvr::{self, CoalitionGame};
use crate::peo::{self, HeadNames};

pub const USER_TABLE: &str = "user_table";
pub const ITEM_TABLE: &str = "item_table";

/// Seed-stream tags.
pub mod tags {
    pub const ENHANCE: u64 = 0x454e48;
    pub const CAP: u64 = 0x434150;
    pub const EVAL_NEG: u64 = 0x45564e;
}

/// The tensors a configuration trains.
pub fn shape_spec(cfg: &ExperimentConfig, num_users: usize, num_items: usize) -> ShapeSpec {
    let d = cfg.d;
    let mut tensors = vec![
        (USER_TABLE.to_string(), num_users, d),
        (ITEM_TABLE.to_string(), num_items, d),
    ];
    if cfg.peo {
        for names in [HeadNames::user(), HeadNames::item()] {
            for n in names.all() {
                tensors.push((n.to_string(), d, d));
            }
        }
    }
    if cfg.backbone == BackboneKind::TwoTower {
        tensors.push((backbone::USER_TOWER.to_string(), d, d));
        tensors.push((backbone::ITEM_TOWER.to_string(), d, d));
    }
    ShapeSpec { tensors, dim: d }
}

/// Behavior toggles the view needs from the experiment config.
#[derive(Debug, Clone, Copy)]
pub struct ViewSettings {
    pub peo: bool,
    pub peo_bias: bool,
    pub backbone: BackboneKind,
    pub enhance: EnhanceMode,
    pub coalition_cap: usize,
    pub seed: u64,
}

impl ViewSettings {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        ViewSettings {
            peo: cfg.peo,
            peo_bias: cfg.peo_bias,
            backbone: cfg.backbone,
            enhance: cfg.enhance,
            coalition_cap: cfg.coalition_cap,
            seed: cfg.seed,
        }
    }
}

/// Chosen best coalition for a user's list, in entity ids.
#[derive(Debug, Clone)]
pub struct ChosenCoalition {
    pub items: Vec<usize>,
    pub phi: f64,
    pub degenerate: bool,
}

/// Materialized representations for every entity under a frozen store.
pub struct ModelView {
    settings: ViewSettings,
    mu_users: Tensor,
    mu_items: Tensor,
    tower_items: Option<Tensor>,
    user_tower: Option<Tensor>,
}

impl ModelView {
    pub fn new(store: &ParamStore, settings: ViewSettings) -> Self {
        let mu_users = if settings.peo {
            derive_mu(store, USER_TABLE, &HeadNames::user(), settings.peo_bias)
        } else {
            store.get(USER_TABLE).clone()
        };
        let mu_items = if settings.peo {
            derive_mu(store, ITEM_TABLE, &HeadNames::item(), settings.peo_bias)
        } else {
            store.get(ITEM_TABLE).clone()
        };
        let (tower_items, user_tower) = match settings.backbone {
            BackboneKind::Mf => (None, None),
            BackboneKind::TwoTower => {
                let p_item = store.get(backbone::ITEM_TOWER);
                let mut t = Tensor::zeros(mu_items.rows(), mu_items.cols());
                for r in 0..mu_items.rows() {
                    let proj = backbone::project_tower(mu_items.row(r), p_item);
                    t.row_mut(r).copy_from_slice(&proj);
                }
                (Some(t), Some(store.get(backbone::USER_TOWER).clone()))
            }
        };
        ModelView {
            settings,
            mu_users,
            mu_items,
            tower_items,
            user_tower,
        }
    }

    pub fn settings(&self) -> &ViewSettings {
        &self.settings
    }

    pub fn num_users(&self) -> usize {
        self.mu_users.rows()
    }

    pub fn num_items(&self) -> usize {
        self.mu_items.rows()
    }

    pub fn user_mu(&self, u: usize) -> &[f64] {
        self.mu_users.row(u)
    }

    pub fn item_mu(&self, i: usize) -> &[f64] {
        self.mu_items.row(i)
    }

    /// Score an item against an arbitrary user representation vector.
    pub fn score_vec(&self, user_vec: &[f64], item: usize) -> f64 {
        match self.settings.backbone {
            BackboneKind::Mf => backbone::mf_score(user_vec, self.mu_items.row(item)),
            BackboneKind::TwoTower => {
                let tu = backbone::project_tower(user_vec, self.user_tower.as_ref().unwrap());
                crate::engine::dot(&tu, self.tower_items.as_ref().unwrap().row(item))
            }
        }
    }

    /// Order-preserving uniform subsample when a list exceeds the cap.
    pub fn capped_list(&self, list: &[usize], user: usize) -> Vec<usize> {
        msvr::capped_subsample(
            list,
            self.settings.coalition_cap,
            mix_seed(self.settings.seed, &[tags::CAP, user as u64]),
        )
    }

    /// Best coalition over the user's (capped) interaction list, partition
    /// sampled deterministically per user.
    pub fn best_coalition_for(&self, user: usize, list: &[usize]) -> Option<ChosenCoalition> {
        if list.is_empty() {
            return None;
        }
        let capped = self.capped_list(list, user);
        let owner = self.mu_users.row(user);
        if capped.len() == 1 {
            // One interaction: no coalition exists; report the lone item with
            // its raw prediction error (unit coefficient) and flag it.
            let game = CoalitionGame::from_list(owner, vec![self.mu_items.row(capped[0])]);
            return Some(ChosenCoalition {
                items: capped.clone(),
                phi: game.per_item_error(0),
                degenerate: true,
            });
        }
        let members: Vec<&[f64]> = capped.iter().map(|&i| self.mu_items.row(i)).collect();
        let game = CoalitionGame::from_list(owner, members);
        let probs = game.coalition_probs();
        let partition = msvr::sample_partition(
            &probs,
            mix_seed(self.settings.seed, &[tags::ENHANCE, user as u64]),
        );
        let best = msvr::best_coalition(&game, &partition);
        Some(ChosenCoalition {
            items: best.positions.iter().map(|&p| capped[p]).collect(),
            phi: best.phi,
            degenerate: best.degenerate,
        })
    }

    /// The representation used to rank items for `user`, given its current
    /// interaction list. With enhancement off this is just the user's mu; with
    /// `replace` it is the average-aggregated best-coalition prototype.
    pub fn user_representation(&self, user: usize, list: &[usize]) -> (Vec<f64>, Option<ChosenCoalition>) {
        let mu = self.mu_users.row(user);
        if self.settings.enhance == EnhanceMode::Off {
            return (mu.to_vec(), None);
        }
        match self.best_coalition_for(user, list) {
            None => (mu.to_vec(), None),
            Some(chosen) => {
                let members: Vec<&[f64]> =
                    chosen.items.iter().map(|&i| self.mu_items.row(i)).collect();
                let enhanced = msvr::enhance_embedding(mu, &members);
                (enhanced, Some(chosen))
            }
        }
    }
}

fn derive_mu(store: &ParamStore, table: &str, names: &HeadNames, bias: bool) -> Tensor {
    let x = store.get(table);
    let (rows, d) = x.shape();
    let w1 = store.get(&names.proj);
    let w2a = store.get(&names.mean_a);
    let w2b = store.get(&names.mean_b);
    let mut out = Tensor::zeros(rows, d);
    out.data_mut()
        .par_chunks_mut(d)
        .enumerate()
        .for_each(|(r, dst)| {
            let xr = x.row(r);
            let xs = peo::project(xr, w1);
            let mu = peo::mean_head(xr, &xs, w2a, w2b, bias);
            dst.copy_from_slice(&mu);
        });
    out
}

/// Sigma vectors derived for a set of entities (exposed for the embedding
/// dump and diagnostics; ranking only consumes mu).
pub fn derive_sigma(store: &ParamStore, table: &str, names: &HeadNames, row: usize) -> Vec<f64> {
    let x = store.get(table).row(row);
    let xs = peo::project(x, store.get(&names.proj));
    peo::sigma_head(&xs, store.get(&names.sigma_a), store.get(&names.sigma_b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::ParamStore;

    fn toy_config(d: usize) -> ExperimentConfig {
        ExperimentConfig {
            d,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn zero_heads_make_view_match_raw_tables() {
        let cfg = toy_config(4);
        let spec = shape_spec(&cfg, 3, 5);
        let mut store = ParamStore::init(&spec, 2).unwrap();
        // Zero every head weight: residual mean head passes the table through.
        for names in [HeadNames::user(), HeadNames::item()] {
            for n in names.all() {
                for v in store.get_mut(n).data_mut() {
                    *v = 0.0;
                }
            }
        }
        let view = ModelView::new(&store, ViewSettings::from_config(&cfg));
        assert_eq!(view.mu_users.data(), store.get(USER_TABLE).data());
        assert_eq!(view.mu_items.data(), store.get(ITEM_TABLE).data());
        // And scoring equals the plain backbone score.
        let raw = backbone::mf_score(store.get(USER_TABLE).row(0), store.get(ITEM_TABLE).row(1));
        assert_eq!(view.score_vec(view.user_mu(0), 1), raw);
    }

    #[test]
    fn capped_list_preserves_order_and_is_deterministic() {
        let cfg = ExperimentConfig {
            coalition_cap: 8,
            d: 2,
            ..ExperimentConfig::default()
        };
        let spec = shape_spec(&cfg, 2, 40);
        let store = ParamStore::init(&spec, 4).unwrap();
        let view = ModelView::new(&store, ViewSettings::from_config(&cfg));
        let list: Vec<usize> = (0..30).collect();
        let a = view.capped_list(&list, 0);
        let b = view.capped_list(&list, 0);
        assert_eq!(a, b);
        assert_eq!(a.len(), 8);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(a, sorted, "subsample must preserve list order");
    }

    #[test]
    fn single_interaction_user_gets_degenerate_explanation() {
        let cfg = toy_config(3);
        let spec = shape_spec(&cfg, 1, 4);
        let store = ParamStore::init(&spec, 9).unwrap();
        let view = ModelView::new(&store, ViewSettings::from_config(&cfg));
        let chosen = view.best_coalition_for(0, &[2]).unwrap();
        assert!(chosen.degenerate);
        assert_eq!(chosen.items, vec![2]);
    }

    #[test]
    fn enhancement_replaces_representation_only_when_enabled() {
        let mut cfg = toy_config(3);
        let spec = shape_spec(&cfg, 2, 6);
        let store = ParamStore::init(&spec, 33).unwrap();

        cfg.enhance = EnhanceMode::Off;
        let view = ModelView::new(&store, ViewSettings::from_config(&cfg));
        let (repr, chosen) = view.user_representation(0, &[0, 1, 2, 3]);
        assert_eq!(repr, view.user_mu(0).to_vec());
        assert!(chosen.is_none());

        cfg.enhance = EnhanceMode::Replace;
        let view = ModelView::new(&store, ViewSettings::from_config(&cfg));
        let (repr, chosen) = view.user_representation(0, &[0, 1, 2, 3]);
        let chosen = chosen.expect("must pick a coalition");
        let members: Vec<&[f64]> = chosen.items.iter().map(|&i| view.item_mu(i)).collect();
        let expect = msvr::enhance_embedding(view.user_mu(0), &members);
        assert_eq!(repr, expect);
    }
}
