//! Pluggable backbone scorers and the recommendation loss. Backbones consume
//! whatever user/item representations they are handed, which is the whole
//! plug-in contract: enhanced representations drop in without touching the
//! scoring code.

use crate::engine::{dot, softplus, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneKind {
    Mf,
    TwoTower,
}

impl std::str::FromStr for BackboneKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mf" => Ok(BackboneKind::Mf),
            "twotower" => Ok(BackboneKind::TwoTower),
            other => Err(format!("unknown backbone '{other}'")),
        }
    }
}

impl std::fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BackboneKind::Mf => write!(f, "mf"),
            BackboneKind::TwoTower => write!(f, "twotower"),
        }
    }
}

pub const USER_TOWER: &str = "user_tower";
pub const ITEM_TOWER: &str = "item_tower";

/// Inner product of user and item vectors.
pub fn mf_score(u: &[f64], v: &[f64]) -> f64 {
    assert_eq!(u.len(), v.len(), "mf_score dimension mismatch");
    dot(u, v)
}

/// Dot product of ReLU-projected vectors: ReLU(P_u u) . ReLU(P_i v).
pub fn twotower_score(u: &[f64], v: &[f64], p_user: &Tensor, p_item: &Tensor) -> f64 {
    assert_eq!(u.len(), v.len(), "twotower_score dimension mismatch");
    let tu = project_tower(u, p_user);
    let ti = project_tower(v, p_item);
    dot(&tu, &ti)
}

pub fn project_tower(x: &[f64], p: &Tensor) -> Vec<f64> {
    assert_eq!(p.cols(), x.len(), "tower projection dimension mismatch");
    (0..p.rows()).map(|r| dot(p.row(r), x).max(0.0)).collect()
}

/// Mean binary cross-entropy of sigmoid(score) against 1 for positives and 0
/// for negatives, given raw scores.
pub fn rec_loss_value(scores: &[f64], labels: &[f64]) -> f64 {
    assert_eq!(scores.len(), labels.len());
    let total: f64 = scores
        .iter()
        .zip(labels.iter())
        .map(|(&z, &y)| softplus(z) - z * y)
        .sum();
    total / scores.len() as f64
}

/// Rowwise scores for paired user/item representation rows, switching on the
/// backbone. The tower projections are extra `d x d` parameters.
pub fn build_pair_scores(
    tape: &mut Tape,
    store: &ParamStore,
    kind: BackboneKind,
    user_rows: Var,
    item_rows: Var,
) -> Var {
    match kind {
        BackboneKind::Mf => tape.rowwise_dot(user_rows, item_rows),
        BackboneKind::TwoTower => {
            let pu = tape.param(USER_TOWER, store.get(USER_TOWER));
            let pi = tape.param(ITEM_TOWER, store.get(ITEM_TOWER));
            let tu = tape.linear(user_rows, pu);
            let tu = tape.relu(tu);
            let ti = tape.linear(item_rows, pi);
            let ti = tape.relu(ti);
            tape.rowwise_dot(tu, ti)
        }
    }
}

/// Mean BCE over the batch's logits, fused with the sigmoid.
pub fn build_rec_loss(tape: &mut Tape, logits: Var, labels: Vec<f64>) -> Var {
    tape.bce_with_logits_mean(logits, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mf_score_arithmetic_and_symmetry() {
        assert_eq!(mf_score(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(mf_score(&[1.0, 2.0], &[3.0, 4.0]), 11.0);
        let u = [0.3, -0.7, 0.2];
        let v = [1.1, 0.4, -0.9];
        assert_eq!(mf_score(&u, &v), mf_score(&v, &u));
    }

    #[test]
    #[should_panic(expected = "dimension mismatch")]
    fn mf_score_rejects_dimension_mismatch() {
        mf_score(&[1.0, 2.0], &[1.0]);
    }

    #[test]
    fn twotower_reduces_to_mf_under_identity_projections() {
        let mut id = Tensor::zeros(2, 2);
        id.set(0, 0, 1.0);
        id.set(1, 1, 1.0);
        let u = [0.5, 0.25];
        let v = [0.125, 1.0];
        assert_eq!(twotower_score(&u, &v, &id, &id), mf_score(&u, &v));
        assert_eq!(twotower_score(&[0.0, 0.0], &v, &id, &id), 0.0);
    }

    #[test]
    fn rec_loss_closed_forms() {
        // All scores 0: loss = ln 2 per example.
        let loss = rec_loss_value(&[0.0, 0.0, 0.0], &[1.0, 0.0, 0.0]);
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        // Saturation: huge positive score for the positive, huge negative for
        // negatives.
        let loss = rec_loss_value(&[40.0, -40.0, -40.0], &[1.0, 0.0, 0.0]);
        assert!(loss < 1e-12);
        // Nonnegative always.
        assert!(rec_loss_value(&[3.0, -1.0], &[0.0, 1.0]) > 0.0);
    }

    #[test]
    fn twotower_gradient_matches_finite_differences() {
        use crate::engine::{grad_check, ParamStore, ShapeSpec};
        let d = 4;
        let store = ParamStore::init(
            &ShapeSpec {
                tensors: vec![
                    ("user_table".into(), 3, d),
                    ("item_table".into(), 3, d),
                    (USER_TOWER.into(), d, d),
                    (ITEM_TOWER.into(), d, d),
                ],
                dim: d,
            },
            31,
        )
        .unwrap();
        let report = grad_check(
            &store,
            |s, tape| {
                let users = tape.param("user_table", s.get("user_table"));
                let items = tape.param("item_table", s.get("item_table"));
                let u = tape.select_rows(users, vec![0, 1, 2, 0]);
                let i = tape.select_rows(items, vec![1, 2, 0, 2]);
                let scores = build_pair_scores(tape, s, BackboneKind::TwoTower, u, i);
                build_rec_loss(tape, scores, vec![1.0, 0.0, 1.0, 0.0])
            },
            8,
            71,
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-3,
            "two-tower grad check failed: {} {:?}",
            report.max_rel_err,
            report.worst
        );
    }
}
