//! Coalition valuation over interaction lists: the set-value function,
//! single-item and coalition-level Shapley-style marginals, Bernoulli
//! coalition partitioning, the MS training loss, best-coalition extraction,
//! and embedding enhancement.

use std::cell::{Cell, RefCell};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{dot, Tape, Var};

#[derive(Error, Debug)]
pub enum MsvrError {
    #[error("coalition of size {size} is not below the list length {list_len}")]
    CoalitionTooLarge { size: usize, list_len: usize },
    #[error("coalition must be nonempty")]
    EmptyCoalition,
}

/// One side's cooperative game: an owner embedding against the members of its
/// interaction list, with lazily cached per-member prediction errors.
///
/// For the user side the owner is a user and members are the items of its
/// list; the item side swaps the roles. Members are addressed by list
/// position.
pub struct CoalitionGame<'a> {
    owner_mu: &'a [f64],
    member_mu: Vec<&'a [f64]>,
    interacted: Vec<bool>,
    errors: RefCell<Vec<Option<f64>>>,
    error_evals: Cell<usize>,
}

impl<'a> CoalitionGame<'a> {
    pub fn new(owner_mu: &'a [f64], member_mu: Vec<&'a [f64]>, interacted: Vec<bool>) -> Self {
        assert_eq!(member_mu.len(), interacted.len());
        let n = member_mu.len();
        CoalitionGame {
            owner_mu,
            member_mu,
            interacted,
            errors: RefCell::new(vec![None; n]),
            error_evals: Cell::new(0),
        }
    }

    /// Game where every member is an interacted partner (the usual case:
    /// members come straight from the owner's list).
    pub fn from_list(owner_mu: &'a [f64], member_mu: Vec<&'a [f64]>) -> Self {
        let n = member_mu.len();
        Self::new(owner_mu, member_mu, vec![true; n])
    }

    pub fn len(&self) -> usize {
        self.member_mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.member_mu.is_empty()
    }

    /// How many per-member errors have actually been computed; the cost
    /// contract is one evaluation per member regardless of how many
    /// coalitions are valued.
    pub fn error_eval_count(&self) -> usize {
        self.error_evals.get()
    }

    /// |dot(mu_owner, mu_member) - indicator| for the member at `pos`.
    pub fn per_item_error(&self, pos: usize) -> f64 {
        if let Some(e) = self.errors.borrow()[pos] {
            return e;
        }
        let indicator = if self.interacted[pos] { 1.0 } else { 0.0 };
        let e = (dot(self.owner_mu, self.member_mu[pos]) - indicator).abs();
        self.errors.borrow_mut()[pos] = Some(e);
        self.error_evals.set(self.error_evals.get() + 1);
        e
    }

    /// Total error over a subset of positions (Kahan-compensated so the
    /// bracket identities hold to tight tolerance).
    pub fn set_value(&self, positions: &[usize]) -> f64 {
        let mut sum = 0.0;
        let mut comp = 0.0;
        for &p in positions {
            let y = self.per_item_error(p) - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
        sum
    }

    /// Weighted marginal of deleting the coalition `c` from the full list:
    /// coefficient(n, |c|) * (v(R) - v(R \ c)). The bracket reduces exactly
    /// to the sum of the coalition members' errors, which is how it is
    /// computed (never by re-summing the complement).
    pub fn nu(&self, coalition: &[usize]) -> Result<f64, MsvrError> {
        if coalition.is_empty() {
            return Err(MsvrError::EmptyCoalition);
        }
        let n = self.len();
        if coalition.len() >= n {
            return Err(MsvrError::CoalitionTooLarge {
                size: coalition.len(),
                list_len: n,
            });
        }
        let bracket = self.set_value(coalition);
        Ok(coefficient(n, coalition.len()) * bracket)
    }

    /// phi for an item in no coalition: phi(j) = nu({j}).
    pub fn shapley_item(&self, pos: usize) -> Result<f64, MsvrError> {
        self.nu(&[pos])
    }

    /// Coalition-level value: phi(c) = nu(c) * |c| / 2 + sum of singleton nu.
    pub fn multivariate_shapley(&self, coalition: &[usize]) -> Result<f64, MsvrError> {
        let joint = self.nu(coalition)?;
        let mut singles = 0.0;
        for &p in coalition {
            singles += self.nu(&[p])?;
        }
        Ok(joint * coalition.len() as f64 / 2.0 + singles)
    }

    /// Per-member share inside a coalition: phi(j in c) = nu(c)/2 + nu(j)/2.
    pub fn shapley_member(&self, coalition: &[usize], pos: usize) -> Result<f64, MsvrError> {
        debug_assert!(coalition.contains(&pos));
        Ok(self.nu(coalition)? / 2.0 + self.nu(&[pos])? / 2.0)
    }

    /// Adjacent-pair combination probabilities: p_k = clamp(cos(mu_k, mu_{k+1}), 0, 1).
    pub fn coalition_probs(&self) -> Vec<f64> {
        let n = self.len();
        if n < 2 {
            return Vec::new();
        }
        (0..n - 1)
            .map(|k| cosine(self.member_mu[k], self.member_mu[k + 1]).clamp(0.0, 1.0))
            .collect()
    }

    /// Like [`CoalitionGame::coalition_probs`] but zeroed for two-member
    /// lists: there the only candidate pair is the entire list, and deleting
    /// the whole list has no defined marginal, so such lists partition into
    /// singletons. This is the distribution partition sampling draws from.
    pub fn gate_probs(&self) -> Vec<f64> {
        if self.len() == 2 {
            return vec![0.0];
        }
        self.coalition_probs()
    }
}

/// (|c|-1)! (n-|c|)! / n!  ==  1 / (|c| * C(n, |c|)).
pub fn coefficient(n: usize, size: usize) -> f64 {
    debug_assert!(size >= 1 && size <= n);
    let mut binom = 1.0;
    for t in 1..=size {
        binom *= (n - size + t) as f64 / t as f64;
    }
    1.0 / (size as f64 * binom)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionElement {
    /// Adjacent pair starting at this position (covers pos, pos + 1).
    Coalition(usize),
    Singleton(usize),
}

/// Disjoint cover of list positions by sampled coalitions and singletons.
#[derive(Debug, Clone)]
pub struct CoalitionPartition {
    pub probs: Vec<f64>,
    pub gates: Vec<bool>,
    pub elements: Vec<PartitionElement>,
    len: usize,
}

impl CoalitionPartition {
    pub fn list_len(&self) -> usize {
        self.len
    }

    pub fn coalitions(&self) -> impl Iterator<Item = usize> + '_ {
        self.elements.iter().filter_map(|e| match e {
            PartitionElement::Coalition(k) => Some(*k),
            PartitionElement::Singleton(_) => None,
        })
    }
}

/// Left-to-right scan: an unclaimed position draws its gate; success claims
/// the pair and skips the next gate, failure leaves the position a singleton.
pub fn sample_partition(probs: &[f64], seed: u64) -> CoalitionPartition {
    let n = if probs.is_empty() { 1 } else { probs.len() + 1 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gates = vec![false; probs.len()];
    let mut elements = Vec::new();
    let mut pos = 0usize;
    while pos < n {
        if pos < probs.len() && rng.gen::<f64>() < probs[pos] {
            gates[pos] = true;
            elements.push(PartitionElement::Coalition(pos));
            pos += 2;
        } else {
            elements.push(PartitionElement::Singleton(pos));
            pos += 1;
        }
    }
    CoalitionPartition {
        probs: probs.to_vec(),
        gates,
        elements,
        len: n,
    }
}

/// One Monte-Carlo sample of the side loss: -(sum of phi over the partition's
/// coalitions and singletons). Lists shorter than 2 contribute 0.
pub fn ms_loss_side(game: &CoalitionGame, partition: &CoalitionPartition) -> f64 {
    if game.len() < 2 {
        return 0.0;
    }
    debug_assert_eq!(partition.list_len(), game.len());
    let mut total = 0.0;
    for e in &partition.elements {
        total += match e {
            PartitionElement::Coalition(k) => game.multivariate_shapley(&[*k, *k + 1]).unwrap(),
            PartitionElement::Singleton(p) => game.shapley_item(*p).unwrap(),
        };
    }
    -total
}

/// Per-position weights w such that ms_loss_side == -(sum of w_j * e_j) for
/// the given partition. Coalition members pick up both the joint and the
/// singleton coefficient; singletons only the latter. This is the linear form
/// the training tape differentiates, with gates held constant.
pub fn element_weights(partition: &CoalitionPartition) -> Vec<f64> {
    let n = partition.list_len();
    if n < 2 {
        return vec![0.0; n];
    }
    let c1 = coefficient(n, 1);
    let c2 = coefficient(n, 2);
    let mut w = vec![0.0; n];
    for e in &partition.elements {
        match e {
            PartitionElement::Coalition(k) => {
                w[*k] = c2 + c1;
                w[*k + 1] = c2 + c1;
            }
            PartitionElement::Singleton(p) => {
                w[*p] = c1;
            }
        }
    }
    w
}

/// Order-preserving uniform subsample of a list when it exceeds `cap`;
/// bounds the per-owner valuation cost on very long interaction lists.
pub fn capped_subsample(list: &[usize], cap: usize, seed: u64) -> Vec<usize> {
    if list.len() <= cap {
        return list.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..list.len()).collect();
    for k in 0..cap {
        let j = rng.gen_range(k..idx.len());
        idx.swap(k, j);
    }
    idx.truncate(cap);
    idx.sort_unstable();
    idx.into_iter().map(|p| list[p]).collect()
}

/// The argmax-phi element of a sampled partition. An all-singleton partition
/// has no coalition to report; the best singleton is returned flagged
/// degenerate. Ties break toward the lowest position.
#[derive(Debug, Clone)]
pub struct BestCoalition {
    /// Positions of the chosen element (two for a coalition, one for a
    /// degenerate singleton).
    pub positions: Vec<usize>,
    pub phi: f64,
    pub degenerate: bool,
}

pub fn best_coalition(game: &CoalitionGame, partition: &CoalitionPartition) -> BestCoalition {
    let mut best: Option<(usize, f64)> = None;
    for k in partition.coalitions() {
        let phi = game.multivariate_shapley(&[k, k + 1]).unwrap();
        let better = match best {
            None => true,
            Some((_, cur)) => phi > cur,
        };
        if better {
            best = Some((k, phi));
        }
    }
    if let Some((k, phi)) = best {
        return BestCoalition {
            positions: vec![k, k + 1],
            phi,
            degenerate: false,
        };
    }
    // All singletons: fall back to the best single item.
    let mut best_pos = 0;
    let mut best_phi = f64::NEG_INFINITY;
    for e in &partition.elements {
        if let PartitionElement::Singleton(p) = e {
            let phi = game.shapley_item(*p).unwrap();
            if phi > best_phi {
                best_phi = phi;
                best_pos = *p;
            }
        }
    }
    BestCoalition {
        positions: vec![best_pos],
        phi: best_phi,
        degenerate: true,
    }
}

/// Average-aggregation enhancement: the mean of the owner's embedding and the
/// chosen element's member embeddings.
pub fn enhance_embedding(owner_mu: &[f64], member_mu: &[&[f64]]) -> Vec<f64> {
    let d = owner_mu.len();
    let count = (member_mu.len() + 1) as f64;
    let mut out = owner_mu.to_vec();
    for m in member_mu {
        assert_eq!(m.len(), d);
        for (o, v) in out.iter_mut().zip(m.iter()) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= count;
    }
    out
}

/// Emitted explanation record: the chosen coalition for a (user,
/// recommendation) pair together with its value. The coalition items are the
/// removal set used by the counterfactual metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Explanation {
    pub user: usize,
    pub item: usize,
    pub rank: usize,
    pub coalition_items: Vec<usize>,
    pub phi: f64,
    pub degenerate: bool,
}

impl Explanation {
    /// Tab-separated dump line: `user item rank coalition phi`, coalition
    /// items comma-separated.
    pub fn to_line(&self) -> String {
        let coal: Vec<String> = self.coalition_items.iter().map(|i| i.to_string()).collect();
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.user,
            self.item,
            self.rank,
            coal.join(","),
            self.phi
        )
    }
}

// ---------------------------------------------------------------------------
// Tape builder for the training loss.
// ---------------------------------------------------------------------------

/// Index bundle for one side of the MS loss: paired rows into the owner and
/// member representation matrices plus the per-position weight from a frozen
/// partition.
#[derive(Default)]
pub struct MsBatch {
    pub owner_rows: Vec<usize>,
    pub member_rows: Vec<usize>,
    pub weights: Vec<f64>,
}

impl MsBatch {
    pub fn is_empty(&self) -> bool {
        self.owner_rows.is_empty()
    }

    /// Append one owner's capped list with partition weights attached.
    pub fn push_list(&mut self, owner: usize, members: &[usize], weights: &[f64]) {
        debug_assert_eq!(members.len(), weights.len());
        for (m, w) in members.iter().zip(weights.iter()) {
            self.owner_rows.push(owner);
            self.member_rows.push(*m);
            self.weights.push(*w);
        }
    }
}

/// -(sum of w * |dot(mu_owner, mu_member) - 1|) as a tape scalar. All listed
/// members are interacted pairs, so the indicator is identically 1.
pub fn build_ms_side_loss(tape: &mut Tape, owner_mat: Var, member_mat: Var, batch: &MsBatch) -> Var {
    let neg_w: Vec<f64> = batch.weights.iter().map(|w| -w).collect();
    tape.weighted_abs_pair_dots(
        owner_mat,
        member_mat,
        batch.owner_rows.clone(),
        batch.member_rows.clone(),
        neg_w,
        1.0,
    )
}
