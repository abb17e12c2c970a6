//! Distribution heads over entity embeddings and the contrastive ranking loss
//! on the negative squared 2-Wasserstein similarity between diagonal
//! Gaussians.

use crate::engine::{dot, softplus, ParamStore, Tape, Tensor, Var};

/// Per-entity diagonal Gaussian: mean vector and elementwise-nonnegative
/// deviation vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianEmbedding {
    pub mean: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl GaussianEmbedding {
    pub fn new(mean: Vec<f64>, sigma: Vec<f64>) -> Self {
        assert_eq!(mean.len(), sigma.len(), "mean/sigma length mismatch");
        debug_assert!(sigma.iter().all(|&s| s >= 0.0), "sigma must be nonnegative");
        GaussianEmbedding { mean, sigma }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Tensor names for one side's projection and head weights.
#[derive(Debug, Clone)]
pub struct HeadNames {
    pub proj: String,
    pub mean_a: String,
    pub mean_b: String,
    pub sigma_a: String,
    pub sigma_b: String,
}

impl HeadNames {
    pub fn for_side(side: &str) -> Self {
        HeadNames {
            proj: format!("{side}_proj"),
            mean_a: format!("{side}_mean_a"),
            mean_b: format!("{side}_mean_b"),
            sigma_a: format!("{side}_sigma_a"),
            sigma_b: format!("{side}_sigma_b"),
        }
    }

    pub fn user() -> Self {
        Self::for_side("user")
    }

    pub fn item() -> Self {
        Self::for_side("item")
    }

    pub fn all(&self) -> [&str; 5] {
        [
            &self.proj,
            &self.mean_a,
            &self.mean_b,
            &self.sigma_a,
            &self.sigma_b,
        ]
    }
}

fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    assert_eq!(w.cols(), x.len(), "matvec dimension mismatch");
    (0..w.rows()).map(|r| dot(w.row(r), x)).collect()
}

/// x* = ReLU(W1 x).
pub fn project(x: &[f64], w1: &Tensor) -> Vec<f64> {
    matvec(w1, x).into_iter().map(|v| v.max(0.0)).collect()
}

/// mu = x + W2b ReLU(W2a x*), or without the residual term when `bias` is
/// off (the ablation variant).
pub fn mean_head(x: &[f64], x_star: &[f64], w2a: &Tensor, w2b: &Tensor, bias: bool) -> Vec<f64> {
    let h: Vec<f64> = matvec(w2a, x_star).into_iter().map(|v| v.max(0.0)).collect();
    let out = matvec(w2b, &h);
    if bias {
        out.iter().zip(x.iter()).map(|(a, b)| a + b).collect()
    } else {
        out
    }
}

/// sigma = softplus(W3b ReLU(W3a x*)), strictly positive for finite inputs.
pub fn sigma_head(x_star: &[f64], w3a: &Tensor, w3b: &Tensor) -> Vec<f64> {
    let h: Vec<f64> = matvec(w3a, x_star).into_iter().map(|v| v.max(0.0)).collect();
    matvec(w3b, &h).into_iter().map(softplus).collect()
}

/// Negative squared 2-Wasserstein distance between diagonal Gaussians:
/// -(||mu_a - mu_b||^2 + ||sigma_a - sigma_b||^2).
pub fn neg_w2(a: &GaussianEmbedding, b: &GaussianEmbedding) -> f64 {
    assert_eq!(a.dim(), b.dim(), "neg_w2 dimension mismatch");
    let mut acc = 0.0;
    for k in 0..a.dim() {
        let dm = a.mean[k] - b.mean[k];
        let ds = a.sigma[k] - b.sigma[k];
        acc += dm * dm + ds * ds;
    }
    -acc
}

/// Ranking loss over (user, interacted item, non-interacted item) triples:
/// sum of -ln(sigmoid(d(u, j) - d(u, k))). Minimizing this widens the
/// similarity gap between interacted and non-interacted pairs.
pub fn peo_loss(
    triples: &[(GaussianEmbedding, GaussianEmbedding, GaussianEmbedding)],
) -> f64 {
    triples
        .iter()
        .map(|(u, pos, neg)| {
            let margin = neg_w2(u, pos) - neg_w2(u, neg);
            softplus(-margin)
        })
        .sum()
}

// ---------------------------------------------------------------------------
// Tape builders: the same computations batched over row matrices, recorded
// for reverse-mode gradients.
// ---------------------------------------------------------------------------

/// mu rows for every row of `x`; also returns x* for reuse by the sigma head.
pub fn build_mean(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    names: &HeadNames,
    bias: bool,
) -> (Var, Var) {
    let w1 = tape.param(&names.proj, store.get(&names.proj));
    let xs = tape.linear(x, w1);
    let xs = tape.relu(xs);
    let w2a = tape.param(&names.mean_a, store.get(&names.mean_a));
    let h = tape.linear(xs, w2a);
    let h = tape.relu(h);
    let w2b = tape.param(&names.mean_b, store.get(&names.mean_b));
    let out = tape.linear(h, w2b);
    let mu = if bias { tape.add(x, out) } else { out };
    (mu, xs)
}

/// sigma rows for every row of `x_star`.
pub fn build_sigma(tape: &mut Tape, store: &ParamStore, x_star: Var, names: &HeadNames) -> Var {
    let w3a = tape.param(&names.sigma_a, store.get(&names.sigma_a));
    let h = tape.linear(x_star, w3a);
    let h = tape.relu(h);
    let w3b = tape.param(&names.sigma_b, store.get(&names.sigma_b));
    let out = tape.linear(h, w3b);
    tape.softplus(out)
}

/// Rowwise -(||mu_a - mu_b||^2 + ||sigma_a - sigma_b||^2) -> column vector.
pub fn build_neg_w2(tape: &mut Tape, mu_a: Var, mu_b: Var, sig_a: Var, sig_b: Var) -> Var {
    let dm = tape.sub(mu_a, mu_b);
    let qm = tape.rowwise_dot(dm, dm);
    let ds = tape.sub(sig_a, sig_b);
    let qs = tape.rowwise_dot(ds, ds);
    let s = tape.add(qm, qs);
    tape.scale(s, -1.0)
}

/// Σ -ln(sigmoid(d_pos - d_neg)) over rowwise distances.
pub fn build_peo_loss(tape: &mut Tape, d_pos: Var, d_neg: Var) -> Var {
    let margin = tape.sub(d_pos, d_neg);
    tape.neg_log_sigmoid_sum(margin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity(d: usize) -> Tensor {
        let mut t = Tensor::zeros(d, d);
        for i in 0..d {
            t.set(i, i, 1.0);
        }
        t
    }

    #[test]
    fn project_clamps_negatives() {
        let w = identity(2);
        assert_eq!(project(&[1.0, -2.0], &w), vec![1.0, 0.0]);
        assert_eq!(project(&[0.0, 0.0], &w), vec![0.0, 0.0]);
    }

    #[test]
    fn project_output_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = Tensor::uniform(3, 3, -1.0, 1.0, &mut rng);
        for _ in 0..50 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            assert!(project(&x, &w).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn mean_head_with_zero_weights_is_residual_identity() {
        let z = Tensor::zeros(2, 2);
        let x = [0.7, -0.3];
        let xs = [0.5, 0.5];
        assert_eq!(mean_head(&x, &xs, &z, &z, true), vec![0.7, -0.3]);
        assert_eq!(mean_head(&[0.0, 0.0], &xs, &z, &z, true), vec![0.0, 0.0]);
        // Ablation variant drops the residual term entirely.
        assert_eq!(mean_head(&x, &xs, &z, &z, false), vec![0.0, 0.0]);
    }

    #[test]
    fn sigma_head_zero_weights_gives_ln2() {
        let z = Tensor::zeros(2, 2);
        let s = sigma_head(&[1.0, 1.0], &z, &z);
        for v in s {
            assert!((v - 2f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn sigma_head_strictly_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w3a = Tensor::uniform(3, 3, -1.0, 1.0, &mut rng);
        let w3b = Tensor::uniform(3, 3, -1.0, 1.0, &mut rng);
        for _ in 0..50 {
            let xs: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..2.0)).collect();
            assert!(sigma_head(&xs, &w3a, &w3b).iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn neg_w2_identity_and_hand_values() {
        let a = GaussianEmbedding::new(vec![0.3, -0.2], vec![0.5, 0.1]);
        assert_eq!(neg_w2(&a, &a), 0.0);

        let u = GaussianEmbedding::new(vec![1.0, 0.0], vec![0.4, 0.4]);
        let v = GaussianEmbedding::new(vec![0.0, 1.0], vec![0.4, 0.4]);
        assert!((neg_w2(&u, &v) + 2.0).abs() < 1e-15);

        let p = GaussianEmbedding::new(vec![0.2, 0.2], vec![1.0, 1.0]);
        let q = GaussianEmbedding::new(vec![0.2, 0.2], vec![0.0, 0.0]);
        assert!((neg_w2(&p, &q) + 2.0).abs() < 1e-15);
    }

    #[test]
    fn neg_w2_permutation_equivariant() {
        let a = GaussianEmbedding::new(vec![0.1, 0.7, -0.4], vec![0.2, 0.9, 0.3]);
        let b = GaussianEmbedding::new(vec![-0.5, 0.2, 0.8], vec![0.4, 0.1, 0.6]);
        let perm = [2usize, 0, 1];
        let ap = GaussianEmbedding::new(
            perm.iter().map(|&k| a.mean[k]).collect(),
            perm.iter().map(|&k| a.sigma[k]).collect(),
        );
        let bp = GaussianEmbedding::new(
            perm.iter().map(|&k| b.mean[k]).collect(),
            perm.iter().map(|&k| b.sigma[k]).collect(),
        );
        assert!((neg_w2(&a, &b) - neg_w2(&ap, &bp)).abs() < 1e-15);
    }

    fn random_gaussian(rng: &mut ChaCha8Rng, d: usize) -> GaussianEmbedding {
        GaussianEmbedding::new(
            (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            (0..d).map(|_| rng.gen_range(0.0..2.0)).collect(),
        )
    }

    #[test]
    fn sqrt_neg_w2_satisfies_metric_axioms_on_random_triples() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..500 {
            let a = random_gaussian(&mut rng, 4);
            let b = random_gaussian(&mut rng, 4);
            let c = random_gaussian(&mut rng, 4);
            let dab = (-neg_w2(&a, &b)).sqrt();
            let dba = (-neg_w2(&b, &a)).sqrt();
            let dac = (-neg_w2(&a, &c)).sqrt();
            let dbc = (-neg_w2(&b, &c)).sqrt();
            assert!(dab >= 0.0);
            assert_eq!(dab, dba);
            assert!(dac <= dab + dbc + 1e-9, "triangle violated");
        }
    }

    #[test]
    fn peo_loss_equal_distances_is_ln2_per_triple() {
        let u = GaussianEmbedding::new(vec![0.0, 0.0], vec![0.5, 0.5]);
        let j = GaussianEmbedding::new(vec![1.0, 0.0], vec![0.5, 0.5]);
        let k = GaussianEmbedding::new(vec![0.0, 1.0], vec![0.5, 0.5]);
        let one = peo_loss(&[(u.clone(), j.clone(), k.clone())]);
        assert!((one - 2f64.ln()).abs() < 1e-12);
        let three = peo_loss(&[
            (u.clone(), j.clone(), k.clone()),
            (u.clone(), j.clone(), k.clone()),
            (u, j, k),
        ]);
        assert!((three - 3.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn peo_loss_saturates_to_zero_and_is_monotone_in_margin() {
        let u = GaussianEmbedding::new(vec![0.0], vec![0.0]);
        let pos = GaussianEmbedding::new(vec![0.0], vec![0.0]); // d = 0
        let far = GaussianEmbedding::new(vec![100.0], vec![0.0]); // d = -10000
        let loss = peo_loss(&[(u.clone(), pos.clone(), far.clone())]);
        assert!(loss < 1e-12, "saturated loss should vanish, got {loss}");

        // Strictly decreasing in the margin.
        let mut last = f64::INFINITY;
        for step in 0..20 {
            let neg = GaussianEmbedding::new(vec![step as f64 * 0.5], vec![0.0]);
            let l = peo_loss(&[(u.clone(), pos.clone(), neg)]);
            assert!(l < last);
            last = l;
        }
    }

    #[test]
    fn tape_heads_match_plain_functions() {
        use crate::engine::{ParamStore, ShapeSpec};
        let d = 4;
        let names = HeadNames::user();
        let mut tensors = vec![("user_table".to_string(), 3, d)];
        for n in names.all() {
            tensors.push((n.to_string(), d, d));
        }
        let store = ParamStore::init(&ShapeSpec { tensors, dim: d }, 13).unwrap();

        let mut tape = Tape::new();
        let x = tape.param("user_table", store.get("user_table"));
        let (mu, xs) = build_mean(&mut tape, &store, x, &names, true);
        let sigma = build_sigma(&mut tape, &store, xs, &names);

        for r in 0..3 {
            let xrow = store.get("user_table").row(r).to_vec();
            let x_star = project(&xrow, store.get(&names.proj));
            let mu_plain = mean_head(
                &xrow,
                &x_star,
                store.get(&names.mean_a),
                store.get(&names.mean_b),
                true,
            );
            let sig_plain = sigma_head(&x_star, store.get(&names.sigma_a), store.get(&names.sigma_b));
            for c in 0..d {
                assert!((tape.value(mu).get(r, c) - mu_plain[c]).abs() < 1e-12);
                assert!((tape.value(sigma).get(r, c) - sig_plain[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn peo_gradient_matches_finite_differences() {
        use crate::engine::{grad_check, ParamStore, ShapeSpec};
        let d = 5;
        let n_users = 3;
        let n_items = 3;
        let user_names = HeadNames::user();
        let item_names = HeadNames::item();
        let mut tensors = vec![
            ("user_table".to_string(), n_users, d),
            ("item_table".to_string(), n_items, d),
        ];
        for n in user_names.all().into_iter().chain(item_names.all()) {
            tensors.push((n.to_string(), d, d));
        }
        let store = ParamStore::init(&ShapeSpec { tensors, dim: d }, 5).unwrap();

        let report = grad_check(
            &store,
            |s, tape| {
                let users = tape.param("user_table", s.get("user_table"));
                let items = tape.param("item_table", s.get("item_table"));
                let (mu_u, xs_u) = build_mean(tape, s, users, &user_names, true);
                let sig_u = build_sigma(tape, s, xs_u, &user_names);
                let (mu_i, xs_i) = build_mean(tape, s, items, &item_names, true);
                let sig_i = build_sigma(tape, s, xs_i, &item_names);
                // triples: (u, pos, neg) = (0, 0, 1), (1, 1, 2), (2, 2, 0)
                let mu_u = tape.select_rows(mu_u, vec![0, 1, 2]);
                let sig_u = tape.select_rows(sig_u, vec![0, 1, 2]);
                let mu_p = tape.select_rows(mu_i, vec![0, 1, 2]);
                let sig_p = tape.select_rows(sig_i, vec![0, 1, 2]);
                let mu_n = tape.select_rows(mu_i, vec![1, 2, 0]);
                let sig_n = tape.select_rows(sig_i, vec![1, 2, 0]);
                let d_pos = build_neg_w2(tape, mu_u, mu_p, sig_u, sig_p);
                let d_neg = build_neg_w2(tape, mu_u, mu_n, sig_u, sig_n);
                build_peo_loss(tape, d_pos, d_neg)
            },
            6,
            2024,
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-3,
            "PEO grad check failed: {} {:?}",
            report.max_rel_err,
            report.worst
        );
    }
}
