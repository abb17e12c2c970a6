//! Batch-surface operations behind the CLI subcommands: prepare a dataset
//! snapshot, train, evaluate, explain, and dump embeddings. Every operation
//! is a pure function of (config, files), so identical invocations reproduce
//! identical artifacts.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::config::{ConfigError, DatasetStats, ExperimentConfig, RunManifest};
use crate::dataset::{
    self, read_snapshot, write_snapshot, DatasetError, InteractionDataset, SplitSet,
};
use crate::engine::{EngineError, ParamStore};
use crate::eval::{self, MetricsReport};
use crate::model::{ModelView, ViewSettings};
use crate::msvr::Explanation;
use crate::peo::HeadNames;
use crate::train::{self, TrainError};

#[derive(Error, Debug)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("checkpoint/config mismatch: {0}")]
    Mismatch(String),
    #[error("unknown user id {0}")]
    UnknownUser(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ExperimentError {
    /// One-word machine-parseable category for CLI error lines.
    pub fn category(&self) -> &'static str {
        match self {
            ExperimentError::Config(_) => "config",
            ExperimentError::Dataset(DatasetError::Io(_)) => "io",
            ExperimentError::Dataset(DatasetError::Parse { .. }) => "parse",
            ExperimentError::Dataset(_) => "data",
            ExperimentError::Engine(EngineError::NumericFault { .. }) => "numeric",
            ExperimentError::Engine(EngineError::Checkpoint(_)) => "checkpoint",
            ExperimentError::Engine(_) => "engine",
            ExperimentError::Train(TrainError::Numeric { .. }) => "numeric",
            ExperimentError::Train(TrainError::Dataset(_)) => "data",
            ExperimentError::Train(_) => "train",
            ExperimentError::Mismatch(_) => "checkpoint",
            ExperimentError::UnknownUser(_) => "data",
            ExperimentError::Io(_) => "io",
        }
    }
}

pub fn dataset_stats(ds: &InteractionDataset) -> DatasetStats {
    DatasetStats {
        users: ds.num_users(),
        items: ds.num_items(),
        interactions: ds.num_interactions(),
        sparsity: ds.sparsity(),
        avg_interactions_per_user: ds.avg_interactions_per_user(),
    }
}

/// Ingest the raw ratings file, binarize, k-core filter, and write the
/// portable snapshot. Returns the filtered dataset's statistics.
pub fn cmd_prepare(
    cfg: &ExperimentConfig,
    out_snapshot: &Path,
) -> Result<DatasetStats, ExperimentError> {
    cfg.validate()?;
    let ratings = dataset::load_ratings(Path::new(&cfg.data), cfg.format)?;
    let ds = dataset::binarize(&ratings, cfg.threshold);
    let core = dataset::k_core_filter(&ds, cfg.k_core);
    let mut w = BufWriter::new(File::create(out_snapshot)?);
    write_snapshot(&core, cfg.seed, &mut w)?;
    w.flush()?;
    Ok(dataset_stats(&core))
}

pub fn load_snapshot_file(path: &Path) -> Result<(InteractionDataset, u64), ExperimentError> {
    let f = File::open(path)?;
    Ok(read_snapshot(BufReader::new(f))?)
}

fn split_from(cfg: &ExperimentConfig, ds: &InteractionDataset) -> Result<SplitSet, ExperimentError> {
    Ok(dataset::split(ds, cfg.split, cfg.seed)?)
}

/// Train on a prepared snapshot; writes the checkpoint and returns the run
/// manifest (with final ranking metrics filled in).
pub fn cmd_train(
    cfg: &ExperimentConfig,
    snapshot: &Path,
    checkpoint_out: &Path,
) -> Result<RunManifest, ExperimentError> {
    cfg.validate()?;
    let (full, _snapshot_seed) = load_snapshot_file(snapshot)?;
    let split = split_from(cfg, &full)?;
    let out = train::train(cfg, &split)?;
    let mut w = BufWriter::new(File::create(checkpoint_out)?);
    out.store.save(&mut w, full.num_users(), full.num_items())?;
    w.flush()?;
    let view = ModelView::new(&out.store, ViewSettings::from_config(cfg));
    let metrics = eval::evaluate_ranking(&view, &full, &split, &[5, 10], cfg.eval_negatives, cfg.seed);
    Ok(RunManifest {
        config: cfg.to_pairs(),
        dataset: dataset_stats(&full),
        epoch_losses: out.epoch_losses,
        metrics: Some(metrics),
        checkpoint: checkpoint_out.display().to_string(),
    })
}

fn load_checkpoint(
    cfg: &ExperimentConfig,
    full: &InteractionDataset,
    checkpoint: &Path,
) -> Result<ParamStore, ExperimentError> {
    let f = File::open(checkpoint)?;
    let (store, n, m) = ParamStore::load(BufReader::new(f))?;
    if store.dim() != cfg.d {
        return Err(ExperimentError::Mismatch(format!(
            "checkpoint d = {}, config d = {}",
            store.dim(),
            cfg.d
        )));
    }
    if n != full.num_users() || m != full.num_items() {
        return Err(ExperimentError::Mismatch(format!(
            "checkpoint is for {}x{} entities, snapshot has {}x{}",
            n,
            m,
            full.num_users(),
            full.num_items()
        )));
    }
    for names in [HeadNames::user(), HeadNames::item()] {
        for t in names.all() {
            if cfg.peo && !store.contains(t) {
                return Err(ExperimentError::Mismatch(format!(
                    "config enables distribution heads but checkpoint lacks {t}"
                )));
            }
        }
    }
    Ok(store)
}

/// HR/NDCG at 5 and 10; with `explain = true` also PN/PS/F_NS at K in {1, 5}.
pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    snapshot: &Path,
    checkpoint: &Path,
    explain: bool,
) -> Result<MetricsReport, ExperimentError> {
    cfg.validate()?;
    let (full, _) = load_snapshot_file(snapshot)?;
    let split = split_from(cfg, &full)?;
    let store = load_checkpoint(cfg, &full, checkpoint)?;
    let view = ModelView::new(&store, ViewSettings::from_config(cfg));
    let mut report =
        eval::evaluate_ranking(&view, &full, &split, &[5, 10], cfg.eval_negatives, cfg.seed);
    if explain {
        for k in [1usize, 5] {
            let mut all = Vec::new();
            for u in 0..full.num_users() {
                all.extend(eval::explanations_for_user(
                    &view,
                    &full,
                    &split,
                    u,
                    k,
                    cfg.eval_negatives,
                    cfg.seed,
                ));
            }
            let pn = eval::pn(&view, &full, &split, &all, k, cfg.eval_negatives, cfg.seed);
            let ps = eval::ps(&view, &full, &split, &all, k, cfg.eval_negatives, cfg.seed);
            let f_ns = match (pn, ps) {
                (Some(a), Some(b)) => Some(eval::f_ns(a, b)),
                _ => None,
            };
            report
                .explain
                .insert(k, eval::ExplainMetrics { pn, ps, f_ns });
        }
    }
    Ok(report)
}

/// Explanation records for the given users' top-K recommendations.
pub fn cmd_explain(
    cfg: &ExperimentConfig,
    snapshot: &Path,
    checkpoint: &Path,
    users: &[usize],
    k: usize,
) -> Result<Vec<Explanation>, ExperimentError> {
    cfg.validate()?;
    let (full, _) = load_snapshot_file(snapshot)?;
    let split = split_from(cfg, &full)?;
    let store = load_checkpoint(cfg, &full, checkpoint)?;
    let view = ModelView::new(&store, ViewSettings::from_config(cfg));
    let mut out = Vec::new();
    for &u in users {
        if u >= full.num_users() {
            return Err(ExperimentError::UnknownUser(u));
        }
        out.extend(eval::explanations_for_user(
            &view,
            &full,
            &split,
            u,
            k,
            cfg.eval_negatives,
            cfg.seed,
        ));
    }
    Ok(out)
}

/// Write the representation vectors, one entity per line:
/// `kind id v1 ... vd` with kind U or I.
pub fn cmd_dump_embeddings<W: Write>(
    cfg: &ExperimentConfig,
    snapshot: &Path,
    checkpoint: &Path,
    w: &mut W,
) -> Result<(), ExperimentError> {
    cfg.validate()?;
    let (full, _) = load_snapshot_file(snapshot)?;
    let store = load_checkpoint(cfg, &full, checkpoint)?;
    let view = ModelView::new(&store, ViewSettings::from_config(cfg));
    for u in 0..view.num_users() {
        let row: Vec<String> = view.user_mu(u).iter().map(|v| format!("{v}")).collect();
        writeln!(w, "U {} {}", u, row.join(" "))?;
    }
    for i in 0..view.num_items() {
        let row: Vec<String> = view.item_mu(i).iter().map(|v| format!("{v}")).collect();
        writeln!(w, "I {} {}", i, row.join(" "))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::MsvrMode;
    use std::io::Read;

    fn write_toy_ratings(dir: &Path) -> std::path::PathBuf {
        // 6 users x 6 items, dense enough to survive a 2-core.
        let mut text = String::new();
        for u in 1..=6 {
            for i in 1..=6 {
                let r = if (u + i) % 7 == 0 { 2 } else { 5 };
                text.push_str(&format!("{u}::{i}::{r}::0\n"));
            }
        }
        let path = dir.join("ratings.dat");
        std::fs::write(&path, text).unwrap();
        path
    }

    fn toy_config(data: &Path) -> ExperimentConfig {
        ExperimentConfig {
            data: data.display().to_string(),
            k_core: 2,
            d: 6,
            epochs: 4,
            batch: 8,
            train_negatives: 3,
            eval_negatives: 4,
            msvr_mode: MsvrMode::Both,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn prepare_train_evaluate_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ratings = write_toy_ratings(dir.path());
        let cfg = toy_config(&ratings);
        let snapshot = dir.path().join("snap.txt");
        let stats = cmd_prepare(&cfg, &snapshot).unwrap();
        assert!(stats.users >= 4 && stats.interactions > 0);

        // Byte-identical snapshot on re-run.
        let bytes_a = std::fs::read(&snapshot).unwrap();
        cmd_prepare(&cfg, &snapshot).unwrap();
        let bytes_b = std::fs::read(&snapshot).unwrap();
        assert_eq!(bytes_a, bytes_b);

        let ckpt = dir.path().join("model.ckpt");
        let manifest = cmd_train(&cfg, &snapshot, &ckpt).unwrap();
        assert_eq!(manifest.epoch_losses.len(), cfg.epochs);
        let metrics = manifest.metrics.as_ref().unwrap();
        assert!(metrics.hr.contains_key(&5) && metrics.hr.contains_key(&10));

        let report = cmd_evaluate(&cfg, &snapshot, &ckpt, true).unwrap();
        for k in [1usize, 5] {
            let m = report.explain.get(&k).expect("explain metrics");
            for v in [m.pn, m.ps, m.f_ns].into_iter().flatten() {
                assert!((0.0..=1.0).contains(&v));
            }
        }
        // Key surface of the report.
        let lines = report.to_lines();
        assert!(lines.iter().any(|l| l.starts_with("hr@5\t")));
        assert!(lines.iter().any(|l| l.starts_with("ndcg@10\t")));
        assert!(lines.iter().any(|l| l.starts_with("pn@1\t")));
    }

    #[test]
    fn evaluate_rejects_mismatched_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let ratings = write_toy_ratings(dir.path());
        let cfg = toy_config(&ratings);
        let snapshot = dir.path().join("snap.txt");
        cmd_prepare(&cfg, &snapshot).unwrap();
        let ckpt = dir.path().join("model.ckpt");
        cmd_train(&cfg, &snapshot, &ckpt).unwrap();

        let mut wrong = cfg.clone();
        wrong.d = cfg.d + 1;
        let err = cmd_evaluate(&wrong, &snapshot, &ckpt, false).unwrap_err();
        assert_eq!(err.category(), "checkpoint");
    }

    #[test]
    fn explain_flags_unknown_user_and_contains_train_items() {
        let dir = tempfile::tempdir().unwrap();
        let ratings = write_toy_ratings(dir.path());
        let cfg = toy_config(&ratings);
        let snapshot = dir.path().join("snap.txt");
        cmd_prepare(&cfg, &snapshot).unwrap();
        let ckpt = dir.path().join("model.ckpt");
        cmd_train(&cfg, &snapshot, &ckpt).unwrap();

        let err = cmd_explain(&cfg, &snapshot, &ckpt, &[999], 5).unwrap_err();
        assert!(matches!(err, ExperimentError::UnknownUser(999)));

        let (full, _) = load_snapshot_file(&snapshot).unwrap();
        let split = dataset::split(&full, cfg.split, cfg.seed).unwrap();
        let explanations = cmd_explain(&cfg, &snapshot, &ckpt, &[0, 1], 3).unwrap();
        assert!(!explanations.is_empty());
        for ex in &explanations {
            for item in &ex.coalition_items {
                assert!(
                    split.train.user_list(ex.user).contains(item),
                    "coalition item {item} not in user {}'s train list",
                    ex.user
                );
            }
        }
    }

    #[test]
    fn dump_embeddings_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let ratings = write_toy_ratings(dir.path());
        let cfg = toy_config(&ratings);
        let snapshot = dir.path().join("snap.txt");
        cmd_prepare(&cfg, &snapshot).unwrap();
        let ckpt = dir.path().join("model.ckpt");
        cmd_train(&cfg, &snapshot, &ckpt).unwrap();

        let mut buf = Vec::new();
        cmd_dump_embeddings(&cfg, &snapshot, &ckpt, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let (full, _) = load_snapshot_file(&snapshot).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), full.num_users() + full.num_items());

        let store = {
            let f = File::open(&ckpt).unwrap();
            let mut r = BufReader::new(f);
            let mut s = String::new();
            r.read_to_string(&mut s).unwrap();
            ParamStore::load(s.as_bytes()).unwrap().0
        };
        let view = ModelView::new(&store, ViewSettings::from_config(&cfg));
        for line in lines {
            let mut it = line.split_whitespace();
            let kind = it.next().unwrap();
            assert!(kind == "U" || kind == "I");
            let id: usize = it.next().unwrap().parse().unwrap();
            let vals: Vec<f64> = it.map(|t| t.parse().unwrap()).collect();
            let expect = if kind == "U" {
                view.user_mu(id)
            } else {
                view.item_mu(id)
            };
            assert_eq!(vals, expect, "dump must round-trip at full precision");
        }
    }
}
