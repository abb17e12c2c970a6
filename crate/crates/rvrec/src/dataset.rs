//! Ratings ingestion, binarization, k-core filtering, splits, and negative
//! samplers for implicit-feedback training and evaluation.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("split error: user {user} has {have} interactions, needs at least {need}")]
    Split { user: usize, have: usize, need: usize },
    #[error("sampling error: user {user} has no candidate items")]
    Sampling { user: usize },
    #[error("snapshot error: {0}")]
    Snapshot(String),
}

/// One line of a raw ratings file. Timestamps are carried through but ignored
/// downstream; list order is the interaction order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawRating {
    pub user_id: u64,
    pub item_id: u64,
    pub rating: f64,
    pub timestamp: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RatingsFormat {
    DoubleColon,
    Tab,
    Comma,
}

impl RatingsFormat {
    fn split_line<'a>(&self, line: &'a str) -> Vec<&'a str> {
        match self {
            RatingsFormat::DoubleColon => line.split("::").collect(),
            RatingsFormat::Tab => line.split('\t').collect(),
            RatingsFormat::Comma => line.split(',').collect(),
        }
    }
}

impl std::str::FromStr for RatingsFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "double-colon" => Ok(RatingsFormat::DoubleColon),
            "tab" => Ok(RatingsFormat::Tab),
            "comma" => Ok(RatingsFormat::Comma),
            other => Err(format!("unknown ratings format '{other}'")),
        }
    }
}

impl std::fmt::Display for RatingsFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            RatingsFormat::DoubleColon => "double-colon",
            RatingsFormat::Tab => "tab",
            RatingsFormat::Comma => "comma",
        };
        write!(f, "{s}")
    }
}

pub fn load_ratings(path: &Path, format: RatingsFormat) -> Result<Vec<RawRating>, DatasetError> {
    let file = std::fs::File::open(path)?;
    load_ratings_from(file, format)
}

pub fn load_ratings_from<R: Read>(
    r: R,
    format: RatingsFormat,
) -> Result<Vec<RawRating>, DatasetError> {
    let reader = BufReader::new(r);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields = format.split_line(line.trim_end());
        if fields.len() != 4 {
            return Err(DatasetError::Parse {
                line: lineno,
                message: format!("expected 4 fields, got {}", fields.len()),
            });
        }
        let parse_int = |s: &str, what: &str| -> Result<u64, DatasetError> {
            s.trim().parse().map_err(|_| DatasetError::Parse {
                line: lineno,
                message: format!("bad {what} '{s}'"),
            })
        };
        let user_id = parse_int(fields[0], "user id")?;
        let item_id = parse_int(fields[1], "item id")?;
        let rating: f64 = fields[2].trim().parse().map_err(|_| DatasetError::Parse {
            line: lineno,
            message: format!("bad rating '{}'", fields[2]),
        })?;
        let timestamp: i64 = fields[3].trim().parse().map_err(|_| DatasetError::Parse {
            line: lineno,
            message: format!("bad timestamp '{}'", fields[3]),
        })?;
        out.push(RawRating {
            user_id,
            item_id,
            rating,
            timestamp,
        });
    }
    Ok(out)
}

/// Binary interaction matrix in adjacency form. `user_lists[u]` preserves
/// input order; `item_lists` is the exact transpose.
#[derive(Debug, Clone)]
pub struct InteractionDataset {
    num_users: usize,
    num_items: usize,
    user_lists: Vec<Vec<usize>>,
    item_lists: Vec<Vec<usize>>,
    pairs: HashSet<(u32, u32)>,
    item_popularity: Vec<usize>,
    popularity_prefix: Vec<u64>,
}

impl InteractionDataset {
    /// Build from dense-indexed pairs, preserving order. Duplicate pairs are
    /// rejected; callers dedup first.
    pub fn from_pairs(num_users: usize, num_items: usize, pairs: &[(usize, usize)]) -> Self {
        let mut user_lists = vec![Vec::new(); num_users];
        let mut item_lists = vec![Vec::new(); num_items];
        let mut set = HashSet::with_capacity(pairs.len());
        for &(u, i) in pairs {
            assert!(u < num_users && i < num_items, "pair out of range");
            let fresh = set.insert((u as u32, i as u32));
            assert!(fresh, "duplicate pair ({u}, {i})");
            user_lists[u].push(i);
            item_lists[i].push(u);
        }
        let item_popularity: Vec<usize> = item_lists.iter().map(|l| l.len()).collect();
        let mut popularity_prefix = Vec::with_capacity(num_items + 1);
        let mut acc = 0u64;
        popularity_prefix.push(0);
        for &p in &item_popularity {
            acc += p as u64;
            popularity_prefix.push(acc);
        }
        InteractionDataset {
            num_users,
            num_items,
            user_lists,
            item_lists,
            pairs: set,
            item_popularity,
            popularity_prefix,
        }
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_interactions(&self) -> usize {
        self.pairs.len()
    }

    pub fn user_list(&self, u: usize) -> &[usize] {
        &self.user_lists[u]
    }

    pub fn item_list(&self, i: usize) -> &[usize] {
        &self.item_lists[i]
    }

    pub fn item_popularity(&self, i: usize) -> usize {
        self.item_popularity[i]
    }

    pub fn interacted(&self, u: usize, i: usize) -> bool {
        self.pairs.contains(&(u as u32, i as u32))
    }

    /// Pairs in canonical order: users ascending, each user's list order.
    pub fn ordered_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.user_lists
            .iter()
            .enumerate()
            .flat_map(|(u, list)| list.iter().map(move |&i| (u, i)))
    }

    pub fn sparsity(&self) -> f64 {
        let cells = self.num_users as f64 * self.num_items as f64;
        if cells == 0.0 {
            0.0
        } else {
            1.0 - self.num_interactions() as f64 / cells
        }
    }

    pub fn avg_interactions_per_user(&self) -> f64 {
        if self.num_users == 0 {
            0.0
        } else {
            self.num_interactions() as f64 / self.num_users as f64
        }
    }
}

/// Keep only ratings strictly above `threshold`, re-index densely in order of
/// first appearance, and collapse duplicate (user, item) pairs keeping the
/// first.
pub fn binarize(ratings: &[RawRating], threshold: f64) -> InteractionDataset {
    let mut user_index: HashMap<u64, usize> = HashMap::new();
    let mut item_index: HashMap<u64, usize> = HashMap::new();
    let mut seen: HashSet<(usize, usize)> = HashSet::new();
    let mut pairs = Vec::new();
    for r in ratings {
        if r.rating > threshold {
            let next_u = user_index.len();
            let u = *user_index.entry(r.user_id).or_insert(next_u);
            let next_i = item_index.len();
            let i = *item_index.entry(r.item_id).or_insert(next_i);
            if seen.insert((u, i)) {
                pairs.push((u, i));
            }
        }
    }
    InteractionDataset::from_pairs(user_index.len(), item_index.len(), &pairs)
}

/// Iteratively drop users and items with fewer than `k` interactions until a
/// fixed point, then re-index densely (stable order).
pub fn k_core_filter(ds: &InteractionDataset, k: usize) -> InteractionDataset {
    assert!(k >= 1, "k must be >= 1");
    let mut pairs: Vec<(usize, usize)> = ds.ordered_pairs().collect();
    loop {
        let mut user_count = vec![0usize; ds.num_users];
        let mut item_count = vec![0usize; ds.num_items];
        for &(u, i) in &pairs {
            user_count[u] += 1;
            item_count[i] += 1;
        }
        let kept: Vec<(usize, usize)> = pairs
            .iter()
            .copied()
            .filter(|&(u, i)| user_count[u] >= k && item_count[i] >= k)
            .collect();
        if kept.len() == pairs.len() {
            break;
        }
        pairs = kept;
    }
    // Dense re-index in order of first appearance.
    let mut user_index: HashMap<usize, usize> = HashMap::new();
    let mut item_index: HashMap<usize, usize> = HashMap::new();
    let mut reindexed = Vec::with_capacity(pairs.len());
    for (u, i) in pairs {
        let next_u = user_index.len();
        let nu = *user_index.entry(u).or_insert(next_u);
        let next_i = item_index.len();
        let ni = *item_index.entry(i).or_insert(next_i);
        reindexed.push((nu, ni));
    }
    InteractionDataset::from_pairs(user_index.len(), item_index.len(), &reindexed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMode {
    LeaveOneOut,
    ColdStart,
}

impl std::str::FromStr for SplitMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "leave-one-out" => Ok(SplitMode::LeaveOneOut),
            "cold-start" => Ok(SplitMode::ColdStart),
            other => Err(format!("unknown split mode '{other}'")),
        }
    }
}

impl std::fmt::Display for SplitMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SplitMode::LeaveOneOut => write!(f, "leave-one-out"),
            SplitMode::ColdStart => write!(f, "cold-start"),
        }
    }
}

/// Train dataset plus one held-out validation and test item per user.
#[derive(Debug, Clone)]
pub struct SplitSet {
    pub train: InteractionDataset,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub mode: SplitMode,
}

/// Leave-one-out holds out each user's final two interactions (list order):
/// second-to-last for validation, last for test. Cold-start keeps exactly one
/// train interaction and holds out one validation and one test, chosen
/// uniformly at random under `seed`.
pub fn split(
    ds: &InteractionDataset,
    mode: SplitMode,
    seed: u64,
) -> Result<SplitSet, DatasetError> {
    let mut validation = vec![0usize; ds.num_users()];
    let mut test = vec![0usize; ds.num_users()];
    let mut train_pairs = Vec::new();
    for u in 0..ds.num_users() {
        let list = ds.user_list(u);
        if list.len() < 3 {
            return Err(DatasetError::Split {
                user: u,
                have: list.len(),
                need: 3,
            });
        }
        match mode {
            SplitMode::LeaveOneOut => {
                let n = list.len();
                validation[u] = list[n - 2];
                test[u] = list[n - 1];
                for &i in &list[..n - 2] {
                    train_pairs.push((u, i));
                }
            }
            SplitMode::ColdStart => {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(crate::engine::mix_seed(seed, &[0x434f4c44, u as u64]));
                // Choose three distinct positions, roles in draw order.
                let n = list.len();
                let a = rng.gen_range(0..n);
                let b = loop {
                    let x = rng.gen_range(0..n);
                    if x != a {
                        break x;
                    }
                };
                let c = loop {
                    let x = rng.gen_range(0..n);
                    if x != a && x != b {
                        break x;
                    }
                };
                train_pairs.push((u, list[a]));
                validation[u] = list[b];
                test[u] = list[c];
            }
        }
    }
    let train = InteractionDataset::from_pairs(ds.num_users(), ds.num_items(), &train_pairs);
    Ok(SplitSet {
        train,
        validation,
        test,
        mode,
    })
}

/// `n` items drawn with probability proportional to item popularity, with
/// replacement, excluding the user's interactions in `ds` (pass the train
/// set). Rejection sampling against the cumulative popularity table keeps the
/// conditional distribution exactly proportional among allowed items.
pub fn sample_train_negatives(
    ds: &InteractionDataset,
    user: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<usize>, DatasetError> {
    let total = *ds.popularity_prefix.last().unwrap_or(&0);
    let excluded_mass: u64 = ds
        .user_list(user)
        .iter()
        .map(|&i| ds.item_popularity[i] as u64)
        .sum();
    if total == 0 || total == excluded_mass {
        return Err(DatasetError::Sampling { user });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let x = rng.gen_range(0..total);
        // First index whose prefix exceeds x.
        let item = match ds.popularity_prefix.binary_search(&(x + 1)) {
            Ok(pos) => pos,
            Err(pos) => pos,
        } - 1;
        if !ds.interacted(user, item) {
            out.push(item);
        }
    }
    Ok(out)
}

/// Up to `n` items uniform WITHOUT replacement over items the user has not
/// interacted with in `ds` (pass the full pre-split dataset so train,
/// validation and test positives are all excluded). Returns all candidates if
/// fewer than `n` exist.
pub fn sample_eval_negatives(
    ds: &InteractionDataset,
    user: usize,
    n: usize,
    seed: u64,
) -> Vec<usize> {
    let mut candidates: Vec<usize> = (0..ds.num_items())
        .filter(|&i| !ds.interacted(user, i))
        .collect();
    if candidates.len() <= n {
        return candidates;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Partial Fisher-Yates: fix the first n slots.
    for k in 0..n {
        let j = rng.gen_range(k..candidates.len());
        candidates.swap(k, j);
    }
    candidates.truncate(n);
    candidates
}

/// Portable snapshot: header `N M |I| seed`, then one `u i` pair per line.
pub fn write_snapshot<W: Write>(
    ds: &InteractionDataset,
    seed: u64,
    w: &mut W,
) -> Result<(), DatasetError> {
    writeln!(
        w,
        "{} {} {} {}",
        ds.num_users(),
        ds.num_items(),
        ds.num_interactions(),
        seed
    )?;
    for (u, i) in ds.ordered_pairs() {
        writeln!(w, "{u} {i}")?;
    }
    Ok(())
}

pub fn read_snapshot<R: Read>(r: R) -> Result<(InteractionDataset, u64), DatasetError> {
    let mut lines = BufReader::new(r).lines();
    let header = lines
        .next()
        .ok_or_else(|| DatasetError::Snapshot("empty snapshot".into()))??;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 4 {
        return Err(DatasetError::Snapshot(format!(
            "bad header '{header}', expected 'N M |I| seed'"
        )));
    }
    let n: usize = parts[0]
        .parse()
        .map_err(|_| DatasetError::Snapshot("bad N".into()))?;
    let m: usize = parts[1]
        .parse()
        .map_err(|_| DatasetError::Snapshot("bad M".into()))?;
    let count: usize = parts[2]
        .parse()
        .map_err(|_| DatasetError::Snapshot("bad interaction count".into()))?;
    let seed: u64 = parts[3]
        .parse()
        .map_err(|_| DatasetError::Snapshot("bad seed".into()))?;
    let mut pairs = Vec::with_capacity(count);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let u: usize = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| DatasetError::Snapshot(format!("bad pair line '{line}'")))?;
        let i: usize = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| DatasetError::Snapshot(format!("bad pair line '{line}'")))?;
        pairs.push((u, i));
    }
    if pairs.len() != count {
        return Err(DatasetError::Snapshot(format!(
            "expected {count} pairs, got {}",
            pairs.len()
        )));
    }
    Ok((InteractionDataset::from_pairs(n, m, &pairs), seed))
}
