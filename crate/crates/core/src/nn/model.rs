//! Model families, parameter layouts and batched forward/backward.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::graph::GraphSpec;
use super::layers::{
    apply_channel_mask, apply_mask, dropout_mask, pool_mean, pool_mean_backward, relu_backward,
    relu_inplace, sigmoid, Conv3d, ConvGeom, Csr, GatCache, GatLayer, Linear, SeCache,
    SqueezeExcite,
};
use super::params::{LayoutBuilder, ParamStore, Slot};
use crate::data::DENSE_CHANNELS;
use crate::error::{invalid_config, invalid_input, Error, Result};
use crate::par;
use crate::seed::{self, Rng};

pub const EMBEDDING_DIM: usize = 16;
pub const SE_REDUCTION: usize = 16;
pub const BUDGET_TOLERANCE: f64 = 0.05;
/// Samples per gradient chunk for flat inputs. Chunking is fixed by the
/// model, never by the thread count, so results do not depend on it.
pub const CHUNK: usize = 32;
/// Spatial models chunk by activation columns (cells or nodes times
/// samples) to keep im2col buffers cache-sized.
pub const SPATIAL_CHUNK_COLUMNS: usize = 1152;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Logistic,
    Mlp,
    CnnSe,
    Gat,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Logistic, Family::Mlp, Family::CnnSe, Family::Gat];
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Logistic => "logistic",
            Family::Mlp => "mlp",
            Family::CnnSe => "cnn_se",
            Family::Gat => "gat",
        })
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logistic" => Ok(Self::Logistic),
            "mlp" => Ok(Self::Mlp),
            "cnn_se" | "cnn" => Ok(Self::CnnSe),
            "gat" => Ok(Self::Gat),
            _ => Err(invalid_config(format!(
                "unknown model family '{s}' (expected logistic, mlp, cnn_se, gat)"
            ))),
        }
    }
}

/// What one input sample looks like to the model.
#[derive(Debug, Clone, PartialEq)]
pub enum InputShape {
    /// Flat feature vector.
    Flat { dim: usize },
    /// Dense `6 x nx x ny x nz` box, channel-major.
    Dense { dims: [usize; 3] },
    /// Flat vector of `values_per_node` values per graph node.
    Graph {
        graph: Arc<GraphSpec>,
        values_per_node: usize,
    },
}

impl InputShape {
    pub fn sample_len(&self) -> usize {
        match self {
            InputShape::Flat { dim } => *dim,
            InputShape::Dense { dims } => DENSE_CHANNELS * dims.iter().product::<usize>(),
            InputShape::Graph {
                graph,
                values_per_node,
            } => graph.n_nodes() * values_per_node,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub family: Family,
    pub width: usize,
    /// Training subjects, one embedding each.
    pub subjects: Vec<String>,
    pub embedding_dim: usize,
    pub dropout: f64,
    pub input: InputShape,
    /// Cubic conv kernel edge (cnn only).
    pub kernel: usize,
}

impl ModelSpec {
    pub fn new(family: Family, input: InputShape, subjects: Vec<String>) -> Self {
        Self {
            family,
            width: 8,
            subjects,
            embedding_dim: EMBEDDING_DIM,
            dropout: 0.0,
            input,
            kernel: 3,
        }
    }

    pub fn with_width(mut self, w: usize) -> Self {
        self.width = w;
        self
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        self.dropout = p;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid_config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.width == 0 {
            return Err(invalid_config("width must be >= 1"));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(invalid_config("conv kernel must be odd"));
        }
        let ok = matches!(
            (self.family, &self.input),
            (Family::Logistic | Family::Mlp, InputShape::Flat { .. })
                | (Family::CnnSe, InputShape::Dense { .. })
                | (Family::Gat, InputShape::Graph { .. })
        );
        if !ok {
            return Err(invalid_config(format!(
                "{} cannot take input {:?}",
                self.family, self.input
            )));
        }
        if self.family != Family::Logistic && self.subjects.is_empty() {
            return Err(invalid_config("at least one training subject is required"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        layout(self).0.count()
    }

    /// Picks the width whose parameter count is closest to `target`.
    pub fn solve_width(mut self, target: usize) -> Result<Self> {
        if self.family == Family::Logistic {
            return Ok(self);
        }
        let count = |w: usize| self.clone().with_width(w).param_count();
        let (mut lo, mut hi) = (1usize, 1usize);
        while count(hi) < target && hi < 1 << 16 {
            lo = hi;
            hi *= 2;
        }
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if count(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let best = [lo, hi]
            .into_iter()
            .min_by_key(|&w| count(w).abs_diff(target))
            .expect("two candidates");
        let got = count(best);
        if (got as f64 - target as f64).abs() > BUDGET_TOLERANCE * target as f64 {
            return Err(invalid_config(format!(
                "parameter budget {target} unreachable for {}: closest achievable is {got} (width {best})",
                self.family
            )));
        }
        self.width = best;
        Ok(self)
    }
}

#[derive(Debug, Clone)]
enum Arch {
    Logistic(Linear),
    Mlp([Linear; 3]),
    Cnn {
        convs: [Conv3d; 2],
        ses: [SqueezeExcite; 2],
        fcs: [Linear; 2],
        geom: Arc<ConvGeom>,
    },
    Gat {
        gats: [GatLayer; 2],
        fcs: [Linear; 2],
        csr: Arc<Csr>,
    },
}

fn linear(b: &mut LayoutBuilder, name: &str, out: usize, inp: usize) -> Linear {
    Linear {
        w: b.add(format!("{name}.w"), out, inp),
        b: b.add(format!("{name}.b"), out, 1),
    }
}

fn layout(spec: &ModelSpec) -> (LayoutBuilder, Arch, Option<Slot>) {
    let mut b = LayoutBuilder::default();
    let w = spec.width;
    let e = spec.embedding_dim;
    let arch = match (&spec.family, &spec.input) {
        (Family::Logistic, InputShape::Flat { dim }) => {
            Arch::Logistic(linear(&mut b, "out", 1, *dim))
        }
        (Family::Mlp, InputShape::Flat { dim }) => Arch::Mlp([
            linear(&mut b, "fc1", w, dim + e),
            linear(&mut b, "fc2", w, w + e),
            linear(&mut b, "fc3", 1, w + e),
        ]),
        (Family::CnnSe, InputShape::Dense { dims }) => {
            let r = (w / SE_REDUCTION).max(1);
            let taps = spec.kernel.pow(3);
            let mut convs = Vec::new();
            let mut ses = Vec::new();
            for (i, cin) in [DENSE_CHANNELS, w].into_iter().enumerate() {
                convs.push(Conv3d {
                    w: b.add(format!("conv{}.w", i + 1), w, taps * cin),
                    b: b.add(format!("conv{}.b", i + 1), w, 1),
                    cin,
                });
                ses.push(SqueezeExcite {
                    fc1: linear(&mut b, &format!("se{}.fc1", i + 1), r, w),
                    fc2: linear(&mut b, &format!("se{}.fc2", i + 1), w, r),
                });
            }
            Arch::Cnn {
                convs: [convs[0], convs[1]],
                ses: [ses[0], ses[1]],
                fcs: [
                    linear(&mut b, "fc1", w, w + e),
                    linear(&mut b, "fc2", 1, w + e),
                ],
                geom: Arc::new(ConvGeom::new(*dims, spec.kernel)),
            }
        }
        (
            Family::Gat,
            InputShape::Graph {
                graph,
                values_per_node,
            },
        ) => {
            let f0 = values_per_node + 3;
            let mut gats = Vec::new();
            for (i, fin) in [f0, w].into_iter().enumerate() {
                let n = format!("gat{}", i + 1);
                gats.push(GatLayer {
                    w: b.add(format!("{n}.w"), w, fin),
                    a_src: b.add(format!("{n}.a_src"), w, 1),
                    a_dst: b.add(format!("{n}.a_dst"), w, 1),
                    b: b.add(format!("{n}.b"), w, 1),
                });
            }
            let nodes = graph.n_nodes();
            Arch::Gat {
                gats: [gats[0], gats[1]],
                fcs: [
                    linear(&mut b, "fc1", w, nodes * w + e),
                    linear(&mut b, "fc2", 1, w + e),
                ],
                csr: Arc::new(Csr::with_self_loops(&graph.neighbors)),
            }
        }
        _ => unreachable!("validated family/input pairing"),
    };
    let emb = (spec.family != Family::Logistic).then(|| b.add("embedding", e, spec.subjects.len()));
    (b, arch, emb)
}

pub enum Mode<'a> {
    Eval,
    Train(&'a mut Rng),
}

impl Mode<'_> {
    fn rng(&mut self) -> Option<&mut Rng> {
        match self {
            Mode::Eval => None,
            Mode::Train(r) => Some(r),
        }
    }
}

struct FcLayerCache {
    mask: Option<Vec<f64>>,
    xin: DMatrix<f64>,
    y: DMatrix<f64>,
    rows_h: usize,
}

struct ConvBlockCache {
    mask: Option<Vec<f64>>,
    cols: DMatrix<f64>,
    y: DMatrix<f64>,
    se: SeCache,
}

struct GatBlockCache {
    mask: Option<Vec<f64>>,
    h: DMatrix<f64>,
    c: GatCache,
}

enum Body {
    Logistic {
        x: DMatrix<f64>,
    },
    Mlp,
    Cnn {
        blocks: Vec<ConvBlockCache>,
    },
    Gat {
        blocks: Vec<GatBlockCache>,
        feat: usize,
    },
}

/// Everything backward needs from one forward pass.
pub struct Tape {
    body: Body,
    fc: Vec<FcLayerCache>,
    subjects: Vec<Option<usize>>,
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamStore,
    arch: Arch,
    emb: Option<Slot>,
}

fn vstack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
    out.rows_mut(0, a.nrows()).copy_from(a);
    out.rows_mut(a.nrows(), b.nrows()).copy_from(b);
    out
}

impl Model {
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let (b, arch, emb) = layout(&spec);
        let mut params = ParamStore::from_layout(b.tensors);
        let mut rng = seed::rng(seed);
        for t in &params.tensors {
            let r = t.slot.range();
            if t.name == "embedding" {
                for v in &mut params.values[r] {
                    *v = StandardNormal.sample(&mut rng);
                }
                continue;
            }
            // Biases and attention vectors share the bound of their layer's weights.
            let fan_in = if t.name.ends_with(".w") {
                t.slot.cols
            } else {
                layer_fan_in(&params.tensors, &t.name)
            };
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            for v in &mut params.values[r] {
                *v = rng.random_range(-bound..=bound);
            }
        }
        Ok(Self {
            spec,
            params,
            arch,
            emb,
        })
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Samples per chunk in batched forward and backward passes.
    pub fn chunk(&self) -> usize {
        match &self.spec.input {
            InputShape::Flat { .. } => CHUNK,
            InputShape::Dense { dims } => {
                (SPATIAL_CHUNK_COLUMNS / dims.iter().product::<usize>()).max(1)
            }
            InputShape::Graph { graph, .. } => (SPATIAL_CHUNK_COLUMNS / graph.n_nodes()).max(1),
        }
    }

    pub fn sample_len(&self) -> usize {
        self.spec.input.sample_len()
    }

    /// Maps subject names to embedding rows; unseen subjects give `None`.
    pub fn subject_slots<S: AsRef<str>>(&self, names: &[S]) -> Vec<Option<usize>> {
        names
            .iter()
            .map(|n| self.spec.subjects.iter().position(|s| s == n.as_ref()))
            .collect()
    }

    fn embeddings(&self, p: &[f64], subjects: &[Option<usize>]) -> DMatrix<f64> {
        let slot = self.emb.expect("embedding present");
        let e = DMatrix::from_column_slice(slot.rows, slot.cols, &p[slot.range()]);
        let mean = e.column_mean();
        let mut out = DMatrix::zeros(slot.rows, subjects.len());
        for (j, s) in subjects.iter().enumerate() {
            match s {
                Some(k) => out.column_mut(j).copy_from(&e.column(*k)),
                None => out.column_mut(j).copy_from(&mean),
            }
        }
        out
    }

    fn fc_forward(
        &self,
        fcs: &[Linear],
        h0: DMatrix<f64>,
        emb: &DMatrix<f64>,
        mode: &mut Mode,
        cache: &mut Vec<FcLayerCache>,
    ) -> DMatrix<f64> {
        let p = &self.params.values;
        let mut h = h0;
        for (l, fc) in fcs.iter().enumerate() {
            let mask = match mode.rng() {
                Some(r) if self.spec.dropout > 0.0 => {
                    let m = dropout_mask(h.len(), self.spec.dropout, r);
                    apply_mask(&mut h, &m);
                    Some(m)
                }
                _ => None,
            };
            let rows_h = h.nrows();
            let xin = vstack(&h, emb);
            let mut y = fc.forward(p, &xin);
            if l + 1 < fcs.len() {
                relu_inplace(&mut y);
            }
            h = y.clone();
            cache.push(FcLayerCache {
                mask,
                xin,
                y,
                rows_h,
            });
        }
        h
    }

    fn fc_backward(
        &self,
        fcs: &[Linear],
        cache: &[FcLayerCache],
        dlogits: DMatrix<f64>,
        g: &mut [f64],
        demb: &mut DMatrix<f64>,
    ) -> DMatrix<f64> {
        let p = &self.params.values;
        let mut dy = dlogits;
        for (l, fc) in fcs.iter().enumerate().rev() {
            let c = &cache[l];
            if l + 1 < fcs.len() {
                relu_backward(&c.y, &mut dy);
            }
            let dx = fc.backward(p, g, &c.xin, &dy);
            *demb += dx.rows(c.rows_h, dx.nrows() - c.rows_h);
            let mut dh = dx.rows(0, c.rows_h).into_owned();
            if let Some(m) = &c.mask {
                apply_mask(&mut dh, m);
            }
            dy = dh;
        }
        dy
    }

    /// Forward pass on `n` samples laid out back to back in `x`.
    pub fn forward(&self, x: &[f64], subjects: &[Option<usize>], mut mode: Mode) -> Result<Tape> {
        let n = subjects.len();
        let len = self.sample_len();
        if x.len() != n * len {
            return Err(invalid_input(format!(
                "batch has {} values, expected {n} x {len}",
                x.len()
            )));
        }
        let embedded = self.emb.is_some();
        if embedded && matches!(mode, Mode::Train(_)) && subjects.iter().any(Option::is_none) {
            return Err(invalid_input("unknown subject in training mode"));
        }
        if let Some(k) = subjects
            .iter()
            .flatten()
            .find(|&&k| embedded && k >= self.spec.subjects.len())
        {
            return Err(invalid_input(format!("subject index {k} out of range")));
        }
        let p = &self.params.values;
        let mut fc = Vec::new();
        let (body, out) = match &self.arch {
            Arch::Logistic(l) => {
                let xm = DMatrix::from_column_slice(len, n, x);
                let y = l.forward(p, &xm);
                (Body::Logistic { x: xm }, y)
            }
            Arch::Mlp(fcs) => {
                let emb = self.embeddings(p, subjects);
                let y = self.fc_forward(
                    fcs,
                    DMatrix::from_column_slice(len, n, x),
                    &emb,
                    &mut mode,
                    &mut fc,
                );
                (Body::Mlp, y)
            }
            Arch::Cnn {
                convs,
                ses,
                fcs,
                geom,
            } => {
                let cells = geom.cells;
                let mut h = DMatrix::zeros(DENSE_CHANNELS, n * cells);
                {
                    let hs = h.as_mut_slice();
                    for b in 0..n {
                        let s = &x[b * len..(b + 1) * len];
                        for k in 0..DENSE_CHANNELS {
                            for c in 0..cells {
                                hs[(b * cells + c) * DENSE_CHANNELS + k] = s[k * cells + c];
                            }
                        }
                    }
                }
                let mut blocks = Vec::new();
                for (conv, se) in convs.iter().zip(ses) {
                    let mask = match mode.rng() {
                        Some(r) if self.spec.dropout > 0.0 => {
                            let m = dropout_mask(h.nrows() * n, self.spec.dropout, r);
                            apply_channel_mask(&mut h, &m, cells);
                            Some(m)
                        }
                        _ => None,
                    };
                    let (mut y, cols) = conv.forward(p, &h, geom);
                    relu_inplace(&mut y);
                    let (o, sec) = se.forward(p, &y, cells);
                    blocks.push(ConvBlockCache {
                        mask,
                        cols,
                        y,
                        se: sec,
                    });
                    h = o;
                }
                let pooled = pool_mean(&h, cells);
                let emb = self.embeddings(p, subjects);
                let y = self.fc_forward(fcs, pooled, &emb, &mut mode, &mut fc);
                (Body::Cnn { blocks }, y)
            }
            Arch::Gat { gats, fcs, csr } => {
                let InputShape::Graph {
                    graph,
                    values_per_node: vpn,
                } = &self.spec.input
                else {
                    unreachable!()
                };
                let nodes = graph.n_nodes();
                let f0 = vpn + 3;
                let mut h = DMatrix::zeros(f0, n * nodes);
                for b in 0..n {
                    for i in 0..nodes {
                        let mut col = h.column_mut(b * nodes + i);
                        for k in 0..*vpn {
                            col[k] = x[b * len + i * vpn + k];
                        }
                        for a in 0..3 {
                            col[vpn + a] = graph.positions[i][a];
                        }
                    }
                }
                let mut blocks = Vec::new();
                for gat in gats {
                    let mask = match mode.rng() {
                        Some(r) if self.spec.dropout > 0.0 => {
                            let m = dropout_mask(h.len(), self.spec.dropout, r);
                            apply_mask(&mut h, &m);
                            Some(m)
                        }
                        _ => None,
                    };
                    let (o, c) = gat.forward(p, &h, csr);
                    blocks.push(GatBlockCache { mask, h, c });
                    h = o;
                }
                let feat = h.nrows();
                let flat = DMatrix::from_vec(feat * nodes, n, h.data.as_vec().clone());
                let emb = self.embeddings(p, subjects);
                let y = self.fc_forward(fcs, flat, &emb, &mut mode, &mut fc);
                (Body::Gat { blocks, feat }, y)
            }
        };
        Ok(Tape {
            body,
            fc,
            subjects: subjects.to_vec(),
            logits: out.as_slice().to_vec(),
        })
    }

    /// Accumulates gradients of `sum_i dlogits[i] * logit_i` into `g`.
    pub fn backward(&self, tape: &Tape, dlogits: &[f64], g: &mut [f64]) {
        let p = &self.params.values;
        let n = tape.subjects.len();
        let dl = DMatrix::from_row_slice(1, n, dlogits);
        let mut demb = DMatrix::zeros(self.spec.embedding_dim, n);
        match (&self.arch, &tape.body) {
            (Arch::Logistic(l), Body::Logistic { x }) => {
                l.backward(p, g, x, &dl);
                return;
            }
            (Arch::Mlp(fcs), Body::Mlp) => {
                self.fc_backward(fcs, &tape.fc, dl, g, &mut demb);
            }
            (
                Arch::Cnn {
                    convs,
                    ses,
                    fcs,
                    geom,
                },
                Body::Cnn { blocks },
            ) => {
                let cells = geom.cells;
                let dpool = self.fc_backward(fcs, &tape.fc, dl, g, &mut demb);
                let mut dh = pool_mean_backward(&dpool, cells);
                for (i, ((conv, se), blk)) in convs.iter().zip(ses).zip(blocks).enumerate().rev() {
                    let mut dy = se.backward(p, g, &blk.y, &blk.se, &dh, cells);
                    relu_backward(&blk.y, &mut dy);
                    // The input gradient of the first block is never used.
                    let Some(dx) = conv.backward(p, g, &blk.cols, &dy, geom, i > 0) else {
                        break;
                    };
                    dh = dx;
                    if let Some(m) = &blk.mask {
                        apply_channel_mask(&mut dh, m, cells);
                    }
                }
            }
            (Arch::Gat { gats, fcs, csr }, Body::Gat { blocks, feat }) => {
                let dflat = self.fc_backward(fcs, &tape.fc, dl, g, &mut demb);
                let nodes = csr.n_nodes();
                let mut dh = DMatrix::from_vec(*feat, n * nodes, dflat.data.as_vec().clone());
                for (gat, blk) in gats.iter().zip(blocks).rev() {
                    dh = gat.backward(p, g, &blk.h, &blk.c, &dh, csr);
                    if let Some(m) = &blk.mask {
                        apply_mask(&mut dh, m);
                    }
                }
            }
            _ => unreachable!("tape from a different architecture"),
        }
        let slot = self.emb.expect("embedding present");
        let ge = &mut g[slot.range()];
        for (j, s) in tape.subjects.iter().enumerate() {
            if let Some(k) = s {
                for r in 0..slot.rows {
                    ge[k * slot.rows + r] += demb[(r, j)];
                }
            }
        }
    }

    /// Eval-mode logits, chunked.
    pub fn predict_logits(&self, x: &[f64], subjects: &[Option<usize>]) -> Result<Vec<f64>> {
        let len = self.sample_len();
        let n = subjects.len();
        let chunk = self.chunk();
        let chunks = par::map_range(n.div_ceil(chunk), |c| {
            let (lo, hi) = (c * chunk, ((c + 1) * chunk).min(n));
            self.forward(&x[lo * len..hi * len], &subjects[lo..hi], Mode::Eval)
                .map(|t| t.logits)
        });
        let mut out = Vec::with_capacity(n);
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }

    pub fn predict_proba(&self, x: &[f64], subjects: &[Option<usize>]) -> Result<Vec<f64>> {
        Ok(self
            .predict_logits(x, subjects)?
            .into_iter()
            .map(sigmoid)
            .collect())
    }

    /// Mean binary cross-entropy over the batch; gradients are written to
    /// `params.grads` (overwriting). Dropout masks derive from `seed`.
    pub fn loss_and_grad(
        &mut self,
        x: &[f64],
        y: &[f64],
        subjects: &[Option<usize>],
        seed: u64,
    ) -> Result<f64> {
        let n = y.len();
        if n == 0 || subjects.len() != n {
            return Err(invalid_input("empty or mismatched batch"));
        }
        let len = self.sample_len();
        let np = self.n_params();
        let this = &*self;
        let chunk = self.chunk();
        let parts = par::map_range(n.div_ceil(chunk), |c| -> Result<(f64, Vec<f64>)> {
            let (lo, hi) = (c * chunk, (c + 1).saturating_mul(chunk).min(n));
            let mut rng = seed::rng(seed::derive(seed, &[c as u64]));
            let tape = this.forward(
                &x[lo * len..hi * len],
                &subjects[lo..hi],
                Mode::Train(&mut rng),
            )?;
            let (loss, dz) = bce_with_logits(&tape.logits, &y[lo..hi]);
            let dz: Vec<f64> = dz.into_iter().map(|d| d / n as f64).collect();
            let mut g = vec![0.0; np];
            this.backward(&tape, &dz, &mut g);
            Ok((loss, g))
        });
        self.params.zero_grad();
        let mut total = 0.0;
        for part in parts {
            let (l, g) = part?;
            total += l;
            self.params
                .grads
                .iter_mut()
                .zip(&g)
                .for_each(|(a, b)| *a += b);
        }
        let loss = total / n as f64;
        if !loss.is_finite() {
            self.params.check_finite()?;
            return Err(Error::NonFinite {
                layer: "loss".into(),
            });
        }
        self.params.check_finite()?;
        Ok(loss)
    }
}

fn layer_fan_in(tensors: &[super::params::TensorInfo], name: &str) -> usize {
    let layer = name.rsplit_once('.').map_or(name, |(l, _)| l);
    if let Some(w) = tensors.iter().find(|t| t.name == format!("{layer}.w")) {
        return if name.ends_with(".a_src") || name.ends_with(".a_dst") {
            w.slot.rows
        } else {
            w.slot.cols
        };
    }
    1
}

/// Summed BCE with logits and its derivative per logit. Labels may be soft.
pub fn bce_with_logits(z: &[f64], y: &[f64]) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut d = Vec::with_capacity(z.len());
    for (&zi, &yi) in z.iter().zip(y) {
        loss += zi.max(0.0) - zi * yi + (-zi.abs()).exp().ln_1p();
        d.push(sigmoid(zi) - yi);
    }
    (loss, d)
}

#[cfg(test)]
#[path = "model_tests.rs"]
mod tests;
