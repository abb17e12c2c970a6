use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::Gradients;
use super::tensor::Tensor;
use super::{mix_seed, EngineError};

/// Shapes requested at initialization time: (name, rows, cols).
#[derive(Clone, Debug)]
pub struct ShapeSpec {
    pub tensors: Vec<(String, usize, usize)>,
    /// Embedding dimension; initialization bound is 1/sqrt(d) for every tensor.
    pub dim: usize,
}

/// Adam hyperparameters and the training-shape knobs that travel with them.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 512,
            epochs: 100,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if !(self.learning_rate > 0.0) {
            return Err(EngineError::InvalidConfig(
                "learning_rate must be > 0".into(),
            ));
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(EngineError::InvalidConfig(
                "beta1 and beta2 must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Named dense parameter tensors plus Adam state.
#[derive(Clone, Debug)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
    adam_m: BTreeMap<String, Tensor>,
    adam_v: BTreeMap<String, Tensor>,
    step: u64,
    dim: usize,
}

impl ParamStore {
    /// Deterministic initialization: every entry uniform in (-1/sqrt(d), 1/sqrt(d)).
    /// Each tensor's stream is keyed by its name, so the same tensor gets the
    /// same values regardless of which other tensors a config asks for.
    pub fn init(spec: &ShapeSpec, seed: u64) -> Result<Self, EngineError> {
        if spec.dim == 0 {
            return Err(EngineError::InvalidConfig("embedding dim must be >= 1".into()));
        }
        let bound = 1.0 / (spec.dim as f64).sqrt();
        let mut tensors = BTreeMap::new();
        for (name, rows, cols) in spec.tensors.iter() {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0x494e4954, fnv1a(name)]));
            let t = Tensor::uniform(*rows, *cols, -bound, bound, &mut rng);
            tensors.insert(name.clone(), t);
        }
        Ok(ParamStore {
            tensors,
            adam_m: BTreeMap::new(),
            adam_v: BTreeMap::new(),
            step: 0,
            dim: spec.dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter tensor: {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter tensor: {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Standard Adam with bias correction over every tensor that has a
    /// gradient. Tensors not mentioned by `grads` keep their current value
    /// and moments.
    pub fn adam_step(&mut self, grads: &Gradients, cfg: &OptimConfig) -> Result<(), EngineError> {
        cfg.validate()?;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, g) in grads.iter() {
            let p = self
                .tensors
                .get_mut(name)
                .ok_or_else(|| EngineError::InvalidConfig(format!("gradient for unknown tensor {name}")))?;
            if g.shape() != p.shape() {
                return Err(EngineError::ShapeMismatch {
                    tensor: name.clone(),
                    expected: p.shape(),
                    got: g.shape(),
                });
            }
            let m = self
                .adam_m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.rows(), p.cols()));
            let v = self
                .adam_v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.rows(), p.cols()));
            let (pd, md, vd, gd) = (p.data_mut(), m.data_mut(), v.data_mut(), g.data());
            for i in 0..gd.len() {
                let gi = gd[i];
                md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gi;
                vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                pd[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
            if !p.all_finite() {
                return Err(EngineError::NumericFault {
                    tensor: name.clone(),
                });
            }
        }
        Ok(())
    }

    /// Write header `d N M step` then each tensor as `name rows cols` followed
    /// by one row per line. f64 Display round-trips exactly, so the file is
    /// lossless.
    pub fn save<W: Write>(&self, w: &mut W, n: usize, m: usize) -> Result<(), EngineError> {
        writeln!(w, "{} {} {} {}", self.dim, n, m, self.step)?;
        for (name, t) in self.tensors.iter() {
            writeln!(w, "{} {} {}", name, t.rows(), t.cols())?;
            for r in 0..t.rows() {
                let row: Vec<String> = t.row(r).iter().map(|v| format!("{v}")).collect();
                writeln!(w, "{}", row.join(" "))?;
            }
        }
        Ok(())
    }

    /// Inverse of [`ParamStore::save`]; returns the store plus the (N, M)
    /// recorded in the header.
    pub fn load<R: Read>(r: R) -> Result<(Self, usize, usize), EngineError> {
        let mut lines = BufReader::new(r).lines();
        let header = lines
            .next()
            .ok_or_else(|| EngineError::Checkpoint("empty checkpoint".into()))??;
        let head: Vec<&str> = header.split_whitespace().collect();
        if head.len() != 4 {
            return Err(EngineError::Checkpoint(format!(
                "bad header: expected 'd N M step', got '{header}'"
            )));
        }
        let dim: usize = head[0]
            .parse()
            .map_err(|_| EngineError::Checkpoint("bad d in header".into()))?;
        let n: usize = head[1]
            .parse()
            .map_err(|_| EngineError::Checkpoint("bad N in header".into()))?;
        let m: usize = head[2]
            .parse()
            .map_err(|_| EngineError::Checkpoint("bad M in header".into()))?;
        let step: u64 = head[3]
            .parse()
            .map_err(|_| EngineError::Checkpoint("bad step in header".into()))?;
        let mut tensors = BTreeMap::new();
        while let Some(line) = lines.next() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(EngineError::Checkpoint(format!(
                    "bad tensor header line: '{line}'"
                )));
            }
            let name = parts[0].to_string();
            let rows: usize = parts[1]
                .parse()
                .map_err(|_| EngineError::Checkpoint(format!("bad rows for {name}")))?;
            let cols: usize = parts[2]
                .parse()
                .map_err(|_| EngineError::Checkpoint(format!("bad cols for {name}")))?;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let row_line = lines
                    .next()
                    .ok_or_else(|| EngineError::Checkpoint(format!("truncated tensor {name}")))??;
                for tok in row_line.split_whitespace() {
                    let v: f64 = tok
                        .parse()
                        .map_err(|_| EngineError::Checkpoint(format!("bad value in {name}")))?;
                    data.push(v);
                }
            }
            if data.len() != rows * cols {
                return Err(EngineError::Checkpoint(format!(
                    "tensor {name}: expected {} values, got {}",
                    rows * cols,
                    data.len()
                )));
            }
            tensors.insert(name, Tensor::from_vec(rows, cols, data));
        }
        Ok((
            ParamStore {
                tensors,
                adam_m: BTreeMap::new(),
                adam_v: BTreeMap::new(),
                step,
                dim,
            },
            n,
            m,
        ))
    }
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
