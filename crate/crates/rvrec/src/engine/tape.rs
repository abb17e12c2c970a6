use std::collections::BTreeMap;

use rayon::prelude::*;

use super::tensor::{axpy, Tensor};
use super::EngineError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Gradients of a scalar loss with respect to named parameters.
#[derive(Default, Debug, Clone)]
pub struct Gradients {
    map: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    fn accumulate(&mut self, name: &str, grad: Tensor) {
        match self.map.get_mut(name) {
            Some(t) => t.add_assign(&grad),
            None => {
                self.map.insert(name.to_string(), grad);
            }
        }
    }

    /// a*self + b*other, matching keys unioned.
    pub fn linear_combination(a: f64, x: &Gradients, b: f64, y: &Gradients) -> Gradients {
        let mut out = Gradients::default();
        for (name, t) in x.map.iter() {
            let mut s = t.clone();
            for v in s.data_mut() {
                *v *= a;
            }
            out.accumulate(name, s);
        }
        for (name, t) in y.map.iter() {
            let mut s = t.clone();
            for v in s.data_mut() {
                *v *= b;
            }
            out.accumulate(name, s);
        }
        out
    }
}

type BackFn = Box<dyn Fn(&Tensor, &Tensor, &[&Tensor]) -> Vec<Tensor>>;

enum Back {
    Constant,
    Param(String),
    Op { parents: Vec<Var>, back: BackFn },
}

struct Node {
    label: &'static str,
    value: Tensor,
    back: Back,
}

/// Record-and-replay reverse-mode differentiation over the fixed graphs used
/// by the training losses. One tape per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

// Row counts below which rayon overhead outweighs the win.
const PAR_THRESHOLD: usize = 256;

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, label: &'static str, value: Tensor, back: Back) -> Var {
        self.nodes.push(Node { label, value, back });
        Var(self.nodes.len() - 1)
    }

    /// A value that does not require gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push("constant", value, Back::Constant)
    }

    /// A named parameter leaf; `backward` reports its gradient under `name`.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        self.push("param", value.clone(), Back::Param(name.to_string()))
    }

    /// y = x · wᵀ, i.e. every row of `x` mapped through the weight matrix `w`
    /// (`w` is `out x in`, rows of `x` are `in`-dimensional).
    pub fn linear(&mut self, x: Var, w: Var) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(xv.cols(), wv.cols(), "linear: inner dimension mismatch");
        let (b, k) = xv.shape();
        let o = wv.rows();
        let mut y = Tensor::zeros(b, o);
        matmul_xwt(xv, wv, &mut y);
        let back: BackFn = Box::new(move |g, _y, parents| {
            let (xv, wv) = (parents[0], parents[1]);
            let mut dx = Tensor::zeros(b, k);
            // dX = g · w
            if b >= PAR_THRESHOLD {
                dx.data_mut()
                    .par_chunks_mut(k)
                    .zip(g.data().par_chunks(o))
                    .for_each(|(dxr, gr)| {
                        for (oi, &gv) in gr.iter().enumerate() {
                            if gv != 0.0 {
                                axpy(gv, wv.row(oi), dxr);
                            }
                        }
                    });
            } else {
                for bi in 0..b {
                    let dxr = dx.row_mut(bi);
                    for oi in 0..o {
                        let gv = g.get(bi, oi);
                        if gv != 0.0 {
                            axpy(gv, wv.row(oi), dxr);
                        }
                    }
                }
            }
            // dW = gᵀ · x
            let mut dw = Tensor::zeros(o, k);
            if o >= 2 && b >= PAR_THRESHOLD {
                dw.data_mut()
                    .par_chunks_mut(k)
                    .enumerate()
                    .for_each(|(oi, dwr)| {
                        for bi in 0..b {
                            let gv = g.get(bi, oi);
                            if gv != 0.0 {
                                axpy(gv, xv.row(bi), dwr);
                            }
                        }
                    });
            } else {
                for bi in 0..b {
                    let xr = xv.row(bi);
                    for oi in 0..o {
                        let gv = g.get(bi, oi);
                        if gv != 0.0 {
                            axpy(gv, xr, dw.row_mut(oi));
                        }
                    }
                }
            }
            vec![dx, dw]
        });
        self.push(
            "linear",
            y,
            Back::Op {
                parents: vec![x, w],
                back,
            },
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = xv.shape();
        let data = xv.data().iter().map(|&v| v.max(0.0)).collect();
        let back: BackFn = Box::new(move |g, _y, parents| {
            let xv = parents[0];
            let dx = g
                .data()
                .iter()
                .zip(xv.data().iter())
                .map(|(&gv, &v)| if v > 0.0 { gv } else { 0.0 })
                .collect();
            vec![Tensor::from_vec(r, c, dx)]
        });
        self.push(
            "relu",
            Tensor::from_vec(r, c, data),
            Back::Op {
                parents: vec![x],
                back,
            },
        )
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = xv.shape();
        let data = xv.data().iter().map(|&v| softplus(v)).collect();
        let back: BackFn = Box::new(move |g, _y, parents| {
            let xv = parents[0];
            let dx = g
                .data()
                .iter()
                .zip(xv.data().iter())
                .map(|(&gv, &v)| gv * sigmoid(v))
                .collect();
            vec![Tensor::from_vec(r, c, dx)]
        });
        self.push(
            "softplus",
            Tensor::from_vec(r, c, data),
            Back::Op {
                parents: vec![x],
                back,
            },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add: shape mismatch");
        let (r, c) = av.shape();
        let data = av
            .data()
            .iter()
            .zip(bv.data().iter())
            .map(|(x, y)| x + y)
            .collect();
        let back: BackFn = Box::new(move |g, _y, _p| vec![g.clone(), g.clone()]);
        self.push(
            "add",
            Tensor::from_vec(r, c, data),
            Back::Op {
                parents: vec![a, b],
                back,
            },
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "sub: shape mismatch");
        let (r, c) = av.shape();
        let data = av
            .data()
            .iter()
            .zip(bv.data().iter())
            .map(|(x, y)| x - y)
            .collect();
        let back: BackFn = Box::new(move |g, _y, _p| {
            let mut nb = g.clone();
            for v in nb.data_mut() {
                *v = -*v;
            }
            vec![g.clone(), nb]
        });
        self.push(
            "sub",
            Tensor::from_vec(r, c, data),
            Back::Op {
                parents: vec![a, b],
                back,
            },
        )
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let xv = self.value(x);
        let (r, c) = xv.shape();
        let data = xv.data().iter().map(|&v| v * k).collect();
        let back: BackFn = Box::new(move |g, _y, _p| {
            let mut dx = g.clone();
            for v in dx.data_mut() {
                *v *= k;
            }
            vec![dx]
        });
        self.push(
            "scale",
            Tensor::from_vec(r, c, data),
            Back::Op {
                parents: vec![x],
                back,
            },
        )
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        let xv = self.value(x);
        let (r, c) = xv.shape();
        let data = xv.data().iter().map(|&v| v + k).collect();
        let back: BackFn = Box::new(move |g, _y, _p| vec![g.clone()]);
        self.push(
            "add_scalar",
            Tensor::from_vec(r, c, data),
            Back::Op {
                parents: vec![x],
                back,
            },
        )
    }

    /// |x| elementwise; subgradient 0 at the kink.
    pub fn abs(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = xv.shape();
        let data = xv.data().iter().map(|&v| v.abs()).collect();
        let back: BackFn = Box::new(move |g, _y, parents| {
            let xv = parents[0];
            let dx = g
                .data()
                .iter()
                .zip(xv.data().iter())
                .map(|(&gv, &v)| {
                    if v > 0.0 {
                        gv
                    } else if v < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                })
                .collect();
            vec![Tensor::from_vec(r, c, dx)]
        });
        self.push(
            "abs",
            Tensor::from_vec(r, c, data),
            Back::Op {
                parents: vec![x],
                back,
            },
        )
    }

    /// Gather rows of `x` by index (repetition allowed); backward scatter-adds.
    pub fn select_rows(&mut self, x: Var, indices: Vec<usize>) -> Var {
        let xv = self.value(x);
        let (src_rows, c) = xv.shape();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in &indices {
            assert!(i < src_rows, "select_rows: index out of range");
            data.extend_from_slice(xv.row(i));
        }
        let n = indices.len();
        let back: BackFn = Box::new(move |g, _y, _p| {
            let mut dx = Tensor::zeros(src_rows, c);
            for (out_row, &src) in indices.iter().enumerate() {
                axpy(1.0, g.row(out_row), dx.row_mut(src));
            }
            vec![dx]
        });
        self.push(
            "select_rows",
            Tensor::from_vec(n, c, data),
            Back::Op {
                parents: vec![x],
                back,
            },
        )
    }

    /// Per-row dot product of two equally shaped matrices -> column vector.
    pub fn rowwise_dot(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "rowwise_dot: shape mismatch");
        let (r, c) = av.shape();
        let mut data = Vec::with_capacity(r);
        for i in 0..r {
            data.push(super::tensor::dot(av.row(i), bv.row(i)));
        }
        let back: BackFn = Box::new(move |g, _y, parents| {
            let (av, bv) = (parents[0], parents[1]);
            let mut da = Tensor::zeros(r, c);
            let mut db = Tensor::zeros(r, c);
            for i in 0..r {
                let gv = g.get(i, 0);
                if gv != 0.0 {
                    axpy(gv, bv.row(i), da.row_mut(i));
                    axpy(gv, av.row(i), db.row_mut(i));
                }
            }
            vec![da, db]
        });
        self.push(
            "rowwise_dot",
            Tensor::from_vec(r, 1, data),
            Back::Op {
                parents: vec![a, b],
                back,
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = xv.shape();
        let s: f64 = xv.data().iter().sum();
        let back: BackFn = Box::new(move |g, _y, _p| {
            let gv = g.item();
            vec![Tensor::from_vec(r, c, vec![gv; r * c])]
        });
        self.push(
            "sum",
            Tensor::scalar(s),
            Back::Op {
                parents: vec![x],
                back,
            },
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Σ w_i · x_i over the flattened elements of `x`.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), weights.len(), "weighted_sum: length mismatch");
        let (r, c) = xv.shape();
        let s: f64 = xv
            .data()
            .iter()
            .zip(weights.iter())
            .map(|(v, w)| v * w)
            .sum();
        let back: BackFn = Box::new(move |g, _y, _p| {
            let gv = g.item();
            let dx = weights.iter().map(|w| gv * w).collect();
            vec![Tensor::from_vec(r, c, dx)]
        });
        self.push(
            "weighted_sum",
            Tensor::scalar(s),
            Back::Op {
                parents: vec![x],
                back,
            },
        )
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 labels,
    /// fused for numerical stability.
    pub fn bce_with_logits_mean(&mut self, logits: Var, labels: Vec<f64>) -> Var {
        let zv = self.value(logits);
        assert_eq!(zv.len(), labels.len(), "bce: length mismatch");
        let (r, c) = zv.shape();
        let n = labels.len() as f64;
        let s: f64 = zv
            .data()
            .iter()
            .zip(labels.iter())
            .map(|(&z, &y)| softplus(z) - z * y)
            .sum();
        let back: BackFn = Box::new(move |g, _y, parents| {
            let zv = parents[0];
            let gv = g.item();
            let dz = zv
                .data()
                .iter()
                .zip(labels.iter())
                .map(|(&z, &y)| gv * (sigmoid(z) - y) / n)
                .collect();
            vec![Tensor::from_vec(r, c, dz)]
        });
        self.push(
            "bce_with_logits_mean",
            Tensor::scalar(s / n),
            Back::Op {
                parents: vec![logits],
                back,
            },
        )
    }

    /// Σ −ln(sigmoid(x_i)) — the BPR objective for a vector of margins.
    pub fn neg_log_sigmoid_sum(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = xv.shape();
        let s: f64 = xv.data().iter().map(|&v| softplus(-v)).sum();
        let back: BackFn = Box::new(move |g, _y, parents| {
            let xv = parents[0];
            let gv = g.item();
            let dx = xv
                .data()
                .iter()
                .map(|&v| gv * (sigmoid(v) - 1.0))
                .collect();
            vec![Tensor::from_vec(r, c, dx)]
        });
        self.push(
            "neg_log_sigmoid_sum",
            Tensor::scalar(s),
            Back::Op {
                parents: vec![x],
                back,
            },
        )
    }

    /// Σ_k w_k · |dot(a[ra_k], b[rb_k]) - target| as a scalar, fused so the
    /// gathered row pairs are never materialized. The absolute-value
    /// subgradient at the kink is 0.
    pub fn weighted_abs_pair_dots(
        &mut self,
        a: Var,
        b: Var,
        rows_a: Vec<usize>,
        rows_b: Vec<usize>,
        weights: Vec<f64>,
        target: f64,
    ) -> Var {
        assert_eq!(rows_a.len(), rows_b.len());
        assert_eq!(rows_a.len(), weights.len());
        let (av, bv) = (self.value(a), self.value(b));
        let (ar, c) = av.shape();
        let (br, c2) = bv.shape();
        assert_eq!(c, c2, "weighted_abs_pair_dots: column mismatch");
        let mut total = 0.0;
        let mut signs = Vec::with_capacity(rows_a.len());
        for k in 0..rows_a.len() {
            let r = super::tensor::dot(av.row(rows_a[k]), bv.row(rows_b[k])) - target;
            signs.push(if r > 0.0 {
                1.0
            } else if r < 0.0 {
                -1.0
            } else {
                0.0
            });
            total += weights[k] * r.abs();
        }
        let back: BackFn = Box::new(move |g, _y, parents| {
            let (av, bv) = (parents[0], parents[1]);
            let gv = g.item();
            let mut da = Tensor::zeros(ar, c);
            let mut db = Tensor::zeros(br, c);
            for k in 0..rows_a.len() {
                let s = gv * weights[k] * signs[k];
                if s != 0.0 {
                    axpy(s, bv.row(rows_b[k]), da.row_mut(rows_a[k]));
                    axpy(s, av.row(rows_a[k]), db.row_mut(rows_b[k]));
                }
            }
            vec![da, db]
        });
        self.push(
            "weighted_abs_pair_dots",
            Tensor::scalar(total),
            Back::Op {
                parents: vec![a, b],
                back,
            },
        )
    }

    /// Reverse sweep from a scalar `root`; returns gradients keyed by
    /// parameter name. Fails with the offending tensor's name if a NaN or Inf
    /// shows up anywhere in the sweep.
    pub fn backward(&self, root: Var) -> Result<Gradients, EngineError> {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::default();
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !g.all_finite() {
                return Err(EngineError::NumericFault {
                    tensor: self.nodes[i].label.to_string(),
                });
            }
            match &self.nodes[i].back {
                Back::Constant => {}
                Back::Param(name) => {
                    if !g.all_finite() {
                        return Err(EngineError::NumericFault {
                            tensor: name.clone(),
                        });
                    }
                    out.accumulate(name, g);
                }
                Back::Op { parents, back } => {
                    let pvals: Vec<&Tensor> = parents.iter().map(|p| &self.nodes[p.0].value).collect();
                    let contribs = back(&g, &self.nodes[i].value, &pvals);
                    debug_assert_eq!(contribs.len(), parents.len());
                    for (contrib, parent) in contribs.into_iter().zip(parents.iter()) {
                        match grads[parent.0].as_mut() {
                            Some(t) => t.add_assign(&contrib),
                            None => grads[parent.0] = Some(contrib),
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

fn matmul_xwt(x: &Tensor, w: &Tensor, y: &mut Tensor) {
    let o = w.rows();
    let k = x.cols();
    let run_row = |xr: &[f64], yr: &mut [f64]| {
        for oi in 0..o {
            yr[oi] = super::tensor::dot(xr, &w.data()[oi * k..(oi + 1) * k]);
        }
    };
    if x.rows() >= PAR_THRESHOLD {
        y.data_mut()
            .par_chunks_mut(o)
            .zip(x.data().par_chunks(k))
            .for_each(|(yr, xr)| run_row(xr, yr));
    } else {
        for bi in 0..x.rows() {
            let xr = &x.data()[bi * k..(bi + 1) * k];
            run_row(xr, &mut y.data_mut()[bi * o..(bi + 1) * o]);
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
