//! Batched layer primitives with explicit backward passes.
//!
//! Activations are column-major `features x columns` matrices. For spatial
//! layers a column is one lattice cell (or graph node) of one sample, with
//! sample-major column order.

use nalgebra::DMatrix;
use rand::Rng as _;

use super::params::Slot;
use crate::seed::Rng;

/// Column-major operand, optionally transposed.
#[derive(Clone, Copy)]
pub(crate) struct Op<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub t: bool,
}

impl<'a> Op<'a> {
    pub fn n(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self {
            data,
            rows,
            cols,
            t: false,
        }
    }

    pub fn m(m: &'a DMatrix<f64>) -> Self {
        Self::n(m.as_slice(), m.nrows(), m.ncols())
    }

    pub fn tr(self) -> Self {
        Self { t: !self.t, ..self }
    }

    fn dims(&self) -> (usize, usize) {
        if self.t {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.t {
            (self.rows as isize, 1)
        } else {
            (1, self.rows as isize)
        }
    }
}

/// `c = alpha * a * b + beta * c`, with `c` column-major `m x n`.
pub(crate) fn gemm(alpha: f64, a: Op, b: Op, beta: f64, c: &mut [f64]) {
    assert_eq!(c.len(), a.dims().0 * b.dims().1);
    // SAFETY: `c` holds exactly `m * n` initialised elements.
    unsafe { gemm_raw(alpha, a, b, beta, c.as_mut_ptr()) }
}

/// # Safety
/// `c` must be valid for writes of `m * n` elements; when `beta != 0` they
/// must also be initialised.
unsafe fn gemm_raw(alpha: f64, a: Op, b: Op, beta: f64, c: *mut f64) {
    let (m, k) = a.dims();
    let (k2, n) = b.dims();
    assert_eq!(k, k2, "inner dimensions");
    assert_eq!(a.data.len(), m * k);
    assert_eq!(b.data.len(), k * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m * n {
            *c.add(i) = if beta == 0.0 { 0.0 } else { *c.add(i) * beta };
        }
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    matrixmultiply::dgemm(
        m,
        k,
        n,
        alpha,
        a.data.as_ptr(),
        rsa,
        csa,
        b.data.as_ptr(),
        rsb,
        csb,
        beta,
        c,
        1,
        m as isize,
    );
}

/// `a * b` into a fresh matrix. The output is never zero-filled: with
/// `beta = 0` the kernel writes every element before reading any.
pub(crate) fn matmul(a: Op, b: Op) -> DMatrix<f64> {
    let m = a.dims().0;
    let n = b.dims().1;
    let mut buf: Vec<f64> = Vec::with_capacity(m * n);
    // SAFETY: capacity covers m * n; beta = 0 means the buffer is only written,
    // and every element is written before `set_len`.
    unsafe {
        gemm_raw(1.0, a, b, 0.0, buf.as_mut_ptr());
        buf.set_len(m * n);
    }
    DMatrix::from_vec(m, n, buf)
}

/// Fully connected layer, `w: out x in`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: Slot,
    pub b: Slot,
}

impl Linear {
    pub fn forward(&self, p: &[f64], x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = matmul(
            Op::n(&p[self.w.range()], self.w.rows, self.w.cols),
            Op::m(x),
        );
        add_bias(&mut y, &p[self.b.range()]);
        y
    }

    /// Accumulates parameter gradients into `g` and returns `dx`.
    pub fn backward(
        &self,
        p: &[f64],
        g: &mut [f64],
        x: &DMatrix<f64>,
        dy: &DMatrix<f64>,
    ) -> DMatrix<f64> {
        gemm(1.0, Op::m(dy), Op::m(x).tr(), 1.0, &mut g[self.w.range()]);
        accumulate_bias(&mut g[self.b.range()], dy);
        matmul(
            Op::n(&p[self.w.range()], self.w.rows, self.w.cols).tr(),
            Op::m(dy),
        )
    }
}

pub(crate) fn add_bias(y: &mut DMatrix<f64>, b: &[f64]) {
    for mut col in y.column_iter_mut() {
        for (v, bi) in col.iter_mut().zip(b) {
            *v += bi;
        }
    }
}

pub(crate) fn accumulate_bias(gb: &mut [f64], dy: &DMatrix<f64>) {
    for col in dy.column_iter() {
        for (g, d) in gb.iter_mut().zip(col.iter()) {
            *g += d;
        }
    }
}

pub(crate) fn relu_inplace(x: &mut DMatrix<f64>) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes `dy` where the forward output was not positive.
pub(crate) fn relu_backward(y: &DMatrix<f64>, dy: &mut DMatrix<f64>) {
    for (d, v) in dy.iter_mut().zip(y.iter()) {
        if *v <= 0.0 {
            *d = 0.0;
        }
    }
}

/// Inverted-dropout scale factors, one per element.
pub(crate) fn dropout_mask(len: usize, p: f64, rng: &mut Rng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..len)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect()
}

pub(crate) fn apply_mask(x: &mut DMatrix<f64>, mask: &[f64]) {
    x.iter_mut().zip(mask).for_each(|(v, m)| *v *= m);
}

/// Expands a per-(channel, sample) mask to all `cells` columns of each sample.
pub(crate) fn apply_channel_mask(x: &mut DMatrix<f64>, mask: &[f64], cells: usize) {
    let c = x.nrows();
    for (j, mut col) in x.column_iter_mut().enumerate() {
        let b = j / cells;
        for (k, v) in col.iter_mut().enumerate() {
            *v *= mask[b * c + k];
        }
    }
}

/// Neighbour table for a same-padded cubic kernel on a box lattice.
#[derive(Debug, Clone)]
pub struct ConvGeom {
    pub cells: usize,
    pub taps: usize,
    nbr: Vec<u32>,
}

const NONE: u32 = u32::MAX;

impl ConvGeom {
    pub fn new(dims: [usize; 3], kernel: usize) -> Self {
        assert!(kernel % 2 == 1);
        let r = (kernel / 2) as i64;
        let cells = dims.iter().product();
        let taps = kernel.pow(3);
        let mut nbr = Vec::with_capacity(cells * taps);
        let d = dims.map(|x| x as i64);
        for x in 0..d[0] {
            for y in 0..d[1] {
                for z in 0..d[2] {
                    for dx in -r..=r {
                        for dy in -r..=r {
                            for dz in -r..=r {
                                let q = [x + dx, y + dy, z + dz];
                                let inside = (0..3).all(|a| q[a] >= 0 && q[a] < d[a]);
                                nbr.push(if inside {
                                    ((q[0] * d[1] + q[1]) * d[2] + q[2]) as u32
                                } else {
                                    NONE
                                });
                            }
                        }
                    }
                }
            }
        }
        Self { cells, taps, nbr }
    }
}

/// Same-padded 3D convolution, `w: cout x (taps * cin)`.
#[derive(Debug, Clone, Copy)]
pub struct Conv3d {
    pub w: Slot,
    pub b: Slot,
    pub cin: usize,
}

/// Gathers each column's kernel neighbourhood: output row `t * ch + c` of
/// column `j` holds channel `c` of the cell at tap `t` (zero off the box).
/// `flip` reverses the tap order, which turns the gather into its adjoint
/// pattern on symmetric kernels.
fn gather_taps(x: &DMatrix<f64>, geom: &ConvGeom, flip: bool) -> DMatrix<f64> {
    let ch = x.nrows();
    let n = x.ncols();
    let rows = geom.taps * ch;
    let xs = x.as_slice();
    let mut out = Vec::with_capacity(rows * n);
    for j in 0..n {
        let (b, cell) = (j / geom.cells, j % geom.cells);
        let base = b * geom.cells;
        let nbr = &geom.nbr[cell * geom.taps..(cell + 1) * geom.taps];
        for t in 0..geom.taps {
            let q = if flip { nbr[geom.taps - 1 - t] } else { nbr[t] };
            if q == NONE {
                out.extend(std::iter::repeat_n(0.0, ch));
            } else {
                let src = (base + q as usize) * ch;
                out.extend_from_slice(&xs[src..src + ch]);
            }
        }
    }
    DMatrix::from_vec(rows, n, out)
}

impl Conv3d {
    pub fn im2col(&self, x: &DMatrix<f64>, geom: &ConvGeom) -> DMatrix<f64> {
        debug_assert_eq!(x.nrows(), self.cin);
        gather_taps(x, geom, false)
    }

    /// Returns the output and the im2col buffer needed for backward.
    pub fn forward(
        &self,
        p: &[f64],
        x: &DMatrix<f64>,
        geom: &ConvGeom,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let cols = self.im2col(x, geom);
        let mut y = matmul(
            Op::n(&p[self.w.range()], self.w.rows, self.w.cols),
            Op::m(&cols),
        );
        add_bias(&mut y, &p[self.b.range()]);
        (y, cols)
    }

    /// Accumulates parameter gradients; returns `dx` when `need_dx`.
    ///
    /// `dx` gathers `dy` over the mirrored neighbourhood and applies the
    /// channel-transposed kernel, so it needs no scatter.
    pub fn backward(
        &self,
        p: &[f64],
        g: &mut [f64],
        cols: &DMatrix<f64>,
        dy: &DMatrix<f64>,
        geom: &ConvGeom,
        need_dx: bool,
    ) -> Option<DMatrix<f64>> {
        gemm(
            1.0,
            Op::m(dy),
            Op::m(cols).tr(),
            1.0,
            &mut g[self.w.range()],
        );
        accumulate_bias(&mut g[self.b.range()], dy);
        if !need_dx {
            return None;
        }
        let (cout, cin, taps) = (self.w.rows, self.cin, geom.taps);
        let w = &p[self.w.range()];
        // wf[c, t * cout + o] = w[o, t * cin + c]
        let mut wf = vec![0.0; cin * taps * cout];
        for t in 0..taps {
            for o in 0..cout {
                for c in 0..cin {
                    wf[(t * cout + o) * cin + c] = w[(t * cin + c) * cout + o];
                }
            }
        }
        let dcols = gather_taps(dy, geom, true);
        Some(matmul(Op::n(&wf, cin, taps * cout), Op::m(&dcols)))
    }
}

/// Squeeze-excite gate: `x * sigmoid(W2 relu(W1 mean(x) + b1) + b2)` per channel.
#[derive(Debug, Clone, Copy)]
pub struct SqueezeExcite {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct SeCache {
    s: DMatrix<f64>,
    z: DMatrix<f64>,
    gate: DMatrix<f64>,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean over the `cells` columns of each sample: `C x B`.
pub(crate) fn pool_mean(x: &DMatrix<f64>, cells: usize) -> DMatrix<f64> {
    let c = x.nrows();
    let b = x.ncols() / cells;
    let mut s = DMatrix::zeros(c, b);
    for (j, col) in x.column_iter().enumerate() {
        let mut t = s.column_mut(j / cells);
        t += col;
    }
    s /= cells as f64;
    s
}

pub(crate) fn pool_mean_backward(ds: &DMatrix<f64>, cells: usize) -> DMatrix<f64> {
    let mut dx = DMatrix::zeros(ds.nrows(), ds.ncols() * cells);
    let inv = 1.0 / cells as f64;
    for (j, mut col) in dx.column_iter_mut().enumerate() {
        col.copy_from(&ds.column(j / cells));
        col *= inv;
    }
    dx
}

impl SqueezeExcite {
    pub fn forward(&self, p: &[f64], x: &DMatrix<f64>, cells: usize) -> (DMatrix<f64>, SeCache) {
        let s = pool_mean(x, cells);
        let mut z = self.fc1.forward(p, &s);
        relu_inplace(&mut z);
        let mut gate = self.fc2.forward(p, &z);
        gate.iter_mut().for_each(|v| *v = sigmoid(*v));
        let mut y = x.clone();
        for (j, mut col) in y.column_iter_mut().enumerate() {
            col.component_mul_assign(&gate.column(j / cells));
        }
        (y, SeCache { s, z, gate })
    }

    pub fn backward(
        &self,
        p: &[f64],
        g: &mut [f64],
        x: &DMatrix<f64>,
        cache: &SeCache,
        dy: &DMatrix<f64>,
        cells: usize,
    ) -> DMatrix<f64> {
        let mut dx = dy.clone();
        let mut dgate = DMatrix::zeros(cache.gate.nrows(), cache.gate.ncols());
        for (j, mut col) in dx.column_iter_mut().enumerate() {
            let b = j / cells;
            let mut dgb = dgate.column_mut(b);
            dgb += col.component_mul(&x.column(j));
            col.component_mul_assign(&cache.gate.column(b));
        }
        dgate.zip_apply(&cache.gate, |d, s| *d *= s * (1.0 - s));
        let mut dz = self.fc2.backward(p, g, &cache.z, &dgate);
        relu_backward(&cache.z, &mut dz);
        let ds = self.fc1.backward(p, g, &cache.s, &dz);
        dx += pool_mean_backward(&ds, cells);
        dx
    }
}

/// Compressed adjacency with self-loops first in every row.
#[derive(Debug, Clone)]
pub struct Csr {
    pub offsets: Vec<usize>,
    pub index: Vec<usize>,
}

impl Csr {
    pub fn with_self_loops(neighbors: &[Vec<usize>]) -> Self {
        let mut offsets = vec![0];
        let mut index = Vec::new();
        for (i, nb) in neighbors.iter().enumerate() {
            index.push(i);
            index.extend(nb.iter().copied().filter(|&j| j != i));
            offsets.push(index.len());
        }
        Self { offsets, index }
    }

    pub fn n_nodes(&self) -> usize {
        self.offsets.len() - 1
    }
}

pub const LEAKY_SLOPE: f64 = 0.2;

/// Single-head additive graph attention with ReLU output.
#[derive(Debug, Clone, Copy)]
pub struct GatLayer {
    pub w: Slot,
    pub a_src: Slot,
    pub a_dst: Slot,
    pub b: Slot,
}

pub struct GatCache {
    z: DMatrix<f64>,
    /// Attention weights per (sample, edge).
    alpha: Vec<f64>,
    /// Pre-activation attention logits per (sample, edge).
    pre: Vec<f64>,
    y: DMatrix<f64>,
}

impl GatLayer {
    pub fn forward(&self, p: &[f64], h: &DMatrix<f64>, g: &Csr) -> (DMatrix<f64>, GatCache) {
        let n = g.n_nodes();
        let f = self.w.rows;
        let z = matmul(Op::n(&p[self.w.range()], f, self.w.cols), Op::m(h));
        let a_src = &p[self.a_src.range()];
        let a_dst = &p[self.a_dst.range()];
        let bias = &p[self.b.range()];
        let batch = z.ncols() / n;
        let ne = g.index.len();
        let mut alpha = vec![0.0; batch * ne];
        let mut pre = vec![0.0; batch * ne];
        let mut y = DMatrix::zeros(f, z.ncols());
        let zs = z.as_slice();
        let dot = |a: &[f64], col: usize| -> f64 {
            a.iter()
                .zip(&zs[col * f..(col + 1) * f])
                .map(|(x, y)| x * y)
                .sum()
        };
        for b in 0..batch {
            let base = b * n;
            let sd: Vec<f64> = (0..n).map(|j| dot(a_dst, base + j)).collect();
            for i in 0..n {
                let si = dot(a_src, base + i);
                let (lo, hi) = (g.offsets[i], g.offsets[i + 1]);
                let mut mx = f64::NEG_INFINITY;
                for e in lo..hi {
                    let v = si + sd[g.index[e]];
                    pre[b * ne + e] = v;
                    let l = if v > 0.0 { v } else { LEAKY_SLOPE * v };
                    alpha[b * ne + e] = l;
                    mx = mx.max(l);
                }
                let mut sum = 0.0;
                for e in lo..hi {
                    let a = (alpha[b * ne + e] - mx).exp();
                    alpha[b * ne + e] = a;
                    sum += a;
                }
                let mut out = y.column_mut(base + i);
                for e in lo..hi {
                    let a = alpha[b * ne + e] / sum;
                    alpha[b * ne + e] = a;
                    out.axpy(a, &z.column(base + g.index[e]), 1.0);
                }
                for (o, bb) in out.iter_mut().zip(bias) {
                    *o = (*o + bb).max(0.0);
                }
            }
        }
        (y.clone(), GatCache { z, alpha, pre, y })
    }

    pub fn backward(
        &self,
        p: &[f64],
        grads: &mut [f64],
        h: &DMatrix<f64>,
        c: &GatCache,
        dy: &DMatrix<f64>,
        g: &Csr,
    ) -> DMatrix<f64> {
        let n = g.n_nodes();
        let f = self.w.rows;
        let batch = c.z.ncols() / n;
        let ne = g.index.len();
        let mut dout = dy.clone();
        relu_backward(&c.y, &mut dout);
        accumulate_bias(&mut grads[self.b.range()], &dout);
        let a_src = p[self.a_src.range()].to_vec();
        let a_dst = p[self.a_dst.range()].to_vec();
        let mut dz = DMatrix::zeros(f, c.z.ncols());
        let mut da_src = vec![0.0; f];
        let mut da_dst = vec![0.0; f];
        for b in 0..batch {
            let base = b * n;
            let mut ds = vec![0.0; n];
            let mut dd = vec![0.0; n];
            for i in 0..n {
                let (lo, hi) = (g.offsets[i], g.offsets[i + 1]);
                let doi = dout.column(base + i);
                let mut dalpha = Vec::with_capacity(hi - lo);
                let mut weighted = 0.0;
                for e in lo..hi {
                    let j = base + g.index[e];
                    let a = c.alpha[b * ne + e];
                    let mut dzj = dz.column_mut(j);
                    dzj.axpy(a, &doi, 1.0);
                    let da = doi.dot(&c.z.column(j));
                    weighted += a * da;
                    dalpha.push(da);
                }
                for (k, e) in (lo..hi).enumerate() {
                    let a = c.alpha[b * ne + e];
                    let de = a * (dalpha[k] - weighted);
                    let slope = if c.pre[b * ne + e] > 0.0 {
                        1.0
                    } else {
                        LEAKY_SLOPE
                    };
                    let dp = de * slope;
                    ds[i] += dp;
                    dd[g.index[e]] += dp;
                }
            }
            for j in 0..n {
                let zc = c.z.column(base + j);
                for k in 0..f {
                    da_src[k] += ds[j] * zc[k];
                    da_dst[k] += dd[j] * zc[k];
                }
                let mut dzj = dz.column_mut(base + j);
                for k in 0..f {
                    dzj[k] += ds[j] * a_src[k] + dd[j] * a_dst[k];
                }
            }
        }
        for (gv, d) in grads[self.a_src.range()].iter_mut().zip(&da_src) {
            *gv += d;
        }
        for (gv, d) in grads[self.a_dst.range()].iter_mut().zip(&da_dst) {
            *gv += d;
        }
        gemm(
            1.0,
            Op::m(&dz),
            Op::m(h).tr(),
            1.0,
            &mut grads[self.w.range()],
        );
        matmul(Op::n(&p[self.w.range()], f, self.w.cols).tr(), Op::m(&dz))
    }
}
