//! Ragged rotation-covariant features.
//!
//! A [`CovariantTensor`] holds, for each degree `ℓ = 0..=l_max`, a complex
//! `channels × (2ℓ+1)` block. Rotating the underlying geometry by `R` maps
//! every block row `x` to `D^ℓ(R) x`. The products and linear maps here
//! commute with that action; [`t_inv`] removes it.
//!
//! The [`tape`] submodule records the same operations on an
//! [`autodiff::Tape`](crate::autodiff::Tape) over interleaved `(re, im)`
//! storage.

pub mod tape;

use std::sync::OnceLock;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::so3::{CgTable, CgTerm};

/// Largest degree supported by the shared coupling table.
pub const MAX_DEGREE: usize = 8;

/// Coupling coefficients for all degrees up to [`MAX_DEGREE`], built once.
pub fn cg_table() -> &'static CgTable {
    static TABLE: OnceLock<CgTable> = OnceLock::new();
    TABLE.get_or_init(|| CgTable::new(MAX_DEGREE))
}

/// Channel count per degree.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CovLayout {
    channels: Vec<usize>,
}

impl CovLayout {
    pub fn new(channels: Vec<usize>) -> Result<Self> {
        if channels.is_empty() || channels.len() > MAX_DEGREE + 1 {
            return Err(Error::InvalidArgument(format!(
                "need between 1 and {} degrees, got {}",
                MAX_DEGREE + 1,
                channels.len()
            )));
        }
        Ok(CovLayout { channels })
    }

    /// Same channel count `tau` at every degree up to `l_max`.
    pub fn uniform(l_max: usize, tau: usize) -> Self {
        CovLayout::new(vec![tau; l_max + 1]).expect("l_max within table range")
    }

    pub fn l_max(&self) -> usize {
        self.channels.len() - 1
    }

    pub fn channels(&self, l: usize) -> usize {
        self.channels[l]
    }

    pub fn channel_counts(&self) -> &[usize] {
        &self.channels
    }

    /// Complex offset of the degree-`l` block.
    pub fn offset(&self, l: usize) -> usize {
        (0..l).map(|k| self.channels[k] * (2 * k + 1)).sum()
    }

    /// Number of complex entries.
    pub fn size(&self) -> usize {
        self.offset(self.channels.len())
    }

    /// Width of [`t_inv`] output.
    pub fn invariant_size(&self) -> usize {
        2 * self.channels[0] + 2 * self.channels.iter().sum::<usize>()
    }

    /// Layout of [`cg_product_pairs`] on inputs of this layout: one block per
    /// admissible `(ℓ1, ℓ2)` pair, each with this layout's channel count.
    pub fn pair_layout(&self, l_max_out: usize) -> Result<Self> {
        let tau = self.uniform_channels()?;
        let counts = (0..=l_max_out)
            .map(|l| degree_pairs(self.l_max(), l).len() * tau)
            .collect();
        CovLayout::new(counts)
    }

    /// The shared channel count, if every degree has the same one.
    pub fn uniform_channels(&self) -> Result<usize> {
        let tau = self.channels[0];
        if self.channels.iter().any(|&c| c != tau) {
            return Err(Error::InvalidArgument(format!(
                "channel-wise products need equal channel counts, got {:?}",
                self.channels
            )));
        }
        Ok(tau)
    }
}

/// Admissible `(ℓ1, ℓ2)` with both at most `l_in` coupling to `l`, in
/// lexicographic order.
pub fn degree_pairs(l_in: usize, l: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for l1 in 0..=l_in {
        for l2 in 0..=l_in {
            if l1.abs_diff(l2) <= l && l <= l1 + l2 {
                out.push((l1, l2));
            }
        }
    }
    out
}

/// Ragged collection of complex `channels × (2ℓ+1)` blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariantTensor {
    layout: CovLayout,
    /// `[ℓ][channel][m]`, `m = -ℓ..=ℓ`.
    data: Vec<Complex64>,
}

impl CovariantTensor {
    pub fn zeros(layout: CovLayout) -> Self {
        let n = layout.size();
        CovariantTensor {
            layout,
            data: vec![Complex64::new(0.0, 0.0); n],
        }
    }

    pub fn from_data(layout: CovLayout, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != layout.size() {
            return Err(Error::InvalidArgument(format!(
                "layout needs {} entries, got {}",
                layout.size(),
                data.len()
            )));
        }
        Ok(CovariantTensor { layout, data })
    }

    /// Build from per-degree blocks; block `ℓ` must have `2ℓ+1` columns.
    pub fn from_parts(parts: &[DMatrix<Complex64>]) -> Result<Self> {
        for (l, p) in parts.iter().enumerate() {
            if p.ncols() != 2 * l + 1 {
                return Err(Error::InvalidArgument(format!(
                    "degree {l} block has {} columns, expected {}",
                    p.ncols(),
                    2 * l + 1
                )));
            }
        }
        let layout = CovLayout::new(parts.iter().map(|p| p.nrows()).collect())?;
        let mut data = Vec::with_capacity(layout.size());
        for p in parts {
            for c in 0..p.nrows() {
                data.extend(p.row(c).iter());
            }
        }
        Ok(CovariantTensor { layout, data })
    }

    /// From interleaved `(re, im)` storage.
    pub fn from_interleaved(layout: CovLayout, values: &[f64]) -> Result<Self> {
        let data = complex_from_interleaved(values);
        CovariantTensor::from_data(layout, data)
    }

    pub fn to_interleaved(&self) -> Vec<f64> {
        interleave(&self.data)
    }

    pub fn layout(&self) -> &CovLayout {
        &self.layout
    }

    pub fn l_max(&self) -> usize {
        self.layout.l_max()
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    /// Degree-`l` block as a slice, row-major `channels × (2l+1)`.
    pub fn block(&self, l: usize) -> &[Complex64] {
        let o = self.layout.offset(l);
        &self.data[o..o + self.layout.channels(l) * (2 * l + 1)]
    }

    pub fn block_mut(&mut self, l: usize) -> &mut [Complex64] {
        let o = self.layout.offset(l);
        let n = self.layout.channels(l) * (2 * l + 1);
        &mut self.data[o..o + n]
    }

    pub fn part(&self, l: usize) -> DMatrix<Complex64> {
        DMatrix::from_row_slice(self.layout.channels(l), 2 * l + 1, self.block(l))
    }

    pub fn get(&self, l: usize, channel: usize, m: i64) -> Complex64 {
        self.block(l)[channel * (2 * l + 1) + (m + l as i64) as usize]
    }

    pub fn set(&mut self, l: usize, channel: usize, m: i64, v: Complex64) {
        self.block_mut(l)[channel * (2 * l + 1) + (m + l as i64) as usize] = v;
    }

    /// Apply `wigner[ℓ]` to every channel of block `ℓ`.
    pub fn rotate(&self, wigner: &[DMatrix<Complex64>]) -> Result<Self> {
        if wigner.len() <= self.l_max() {
            return Err(Error::InvalidArgument(format!(
                "need Wigner matrices up to degree {}",
                self.l_max()
            )));
        }
        let mut out = self.clone();
        for l in 0..=self.l_max() {
            let d = &wigner[l];
            let dim = 2 * l + 1;
            let src = self.block(l).to_vec();
            for (dst, row) in out.block_mut(l).chunks_mut(dim).zip(src.chunks(dim)) {
                for i in 0..dim {
                    dst[i] = (0..dim).map(|j| d[(i, j)] * row[j]).sum();
                }
            }
        }
        Ok(out)
    }

    pub fn scale(&self, s: f64) -> Self {
        CovariantTensor {
            layout: self.layout.clone(),
            data: self.data.iter().map(|z| z * s).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.layout != other.layout {
            return Err(Error::InvalidArgument("layout mismatch in addition".into()));
        }
        Ok(CovariantTensor {
            layout: self.layout.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    /// Σ |x|² over all entries.
    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(Complex64::norm_sqr).sum()
    }
}

/// Rotation-invariant features in the order `ξ1 ⊕ (⊕_ℓ ξ2_ℓ ⊕ ξ3_ℓ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InvariantVector(pub Vec<f64>);

/// Per-degree complex mixing matrices, `W_ℓ: out_ℓ × in_ℓ`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovWeights {
    pub parts: Vec<DMatrix<Complex64>>,
}

impl CovWeights {
    pub fn identity(layout: &CovLayout) -> Self {
        CovWeights {
            parts: layout
                .channel_counts()
                .iter()
                .map(|&c| DMatrix::identity(c, c))
                .collect(),
        }
    }

    pub fn out_layout(&self) -> Result<CovLayout> {
        CovLayout::new(self.parts.iter().map(|w| w.nrows()).collect())
    }
}

pub(crate) fn complex_from_interleaved(v: &[f64]) -> Vec<Complex64> {
    v.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect()
}

pub(crate) fn interleave(v: &[Complex64]) -> Vec<f64> {
    v.iter().flat_map(|z| [z.re, z.im]).collect()
}

/// `out[o][m] += Σ_c w[o][c] x[c][m]` on one degree block.
pub(crate) fn linear_kernel(
    x: &[Complex64],
    w: &[Complex64],
    n_in: usize,
    n_out: usize,
    dim: usize,
    out: &mut [Complex64],
) {
    for o in 0..n_out {
        let dst = &mut out[o * dim..(o + 1) * dim];
        for c in 0..n_in {
            let wv = w[o * n_in + c];
            if wv == Complex64::new(0.0, 0.0) {
                continue;
            }
            for (d, s) in dst.iter_mut().zip(&x[c * dim..(c + 1) * dim]) {
                *d += wv * s;
            }
        }
    }
}

/// `out[c] += Σ coeff a[c][m1] b[c][m2]` for every channel.
pub(crate) fn cg_kernel(
    a: &[Complex64],
    b: &[Complex64],
    terms: &[CgTerm],
    tau: usize,
    (da, db, dout): (usize, usize, usize),
    out: &mut [Complex64],
) {
    for c in 0..tau {
        let (ac, bc) = (&a[c * da..(c + 1) * da], &b[c * db..(c + 1) * db]);
        let oc = &mut out[c * dout..(c + 1) * dout];
        for t in terms {
            oc[t.out] += ac[t.a] * bc[t.b] * t.coeff;
        }
    }
}

fn check_same_layout(a: &CovariantTensor, b: &CovariantTensor) -> Result<usize> {
    if a.layout != b.layout {
        return Err(Error::InvalidArgument(format!(
            "channel mismatch: {:?} vs {:?}",
            a.layout.channels, b.layout.channels
        )));
    }
    a.layout.uniform_channels()
}

/// Channel-wise Clebsch-Gordan product summed over all input degree pairs,
/// truncated at `l_max_out`.
pub fn cg_product_channelwise(
    a: &CovariantTensor,
    b: &CovariantTensor,
    l_max_out: usize,
) -> Result<CovariantTensor> {
    let tau = check_same_layout(a, b)?;
    if l_max_out > MAX_DEGREE {
        return Err(Error::InvalidArgument(format!("degree {l_max_out} too large")));
    }
    let table = cg_table();
    let mut out = CovariantTensor::zeros(CovLayout::uniform(l_max_out, tau));
    for l in 0..=l_max_out {
        for (l1, l2) in degree_pairs(a.l_max(), l) {
            cg_kernel(
                a.block(l1),
                b.block(l2),
                table.terms(l1, l2, l),
                tau,
                (2 * l1 + 1, 2 * l2 + 1, 2 * l + 1),
                out.block_mut(l),
            );
        }
    }
    Ok(out)
}

/// Channel-wise Clebsch-Gordan product keeping one channel block per
/// admissible `(ℓ1, ℓ2)` pair, pairs in lexicographic order.
pub fn cg_product_pairs(
    a: &CovariantTensor,
    b: &CovariantTensor,
    l_max_out: usize,
) -> Result<CovariantTensor> {
    let tau = check_same_layout(a, b)?;
    let layout = a.layout.pair_layout(l_max_out)?;
    let table = cg_table();
    let mut out = CovariantTensor::zeros(layout);
    for l in 0..=l_max_out {
        let dim = 2 * l + 1;
        let block = out.block_mut(l);
        for (k, (l1, l2)) in degree_pairs(a.l_max(), l).into_iter().enumerate() {
            cg_kernel(
                a.block(l1),
                b.block(l2),
                table.terms(l1, l2, l),
                tau,
                (2 * l1 + 1, 2 * l2 + 1, dim),
                &mut block[k * tau * dim..(k + 1) * tau * dim],
            );
        }
    }
    Ok(out)
}

/// `output_ℓ = W_ℓ x_ℓ`.
pub fn covariant_linear(x: &CovariantTensor, w: &CovWeights) -> Result<CovariantTensor> {
    if w.parts.len() != x.l_max() + 1 {
        return Err(Error::InvalidArgument(format!(
            "{} weight blocks for {} degrees",
            w.parts.len(),
            x.l_max() + 1
        )));
    }
    for (l, wl) in w.parts.iter().enumerate() {
        if wl.ncols() != x.layout.channels(l) {
            return Err(Error::InvalidArgument(format!(
                "degree {l}: weight has {} columns, input has {} channels",
                wl.ncols(),
                x.layout.channels(l)
            )));
        }
    }
    let mut out = CovariantTensor::zeros(w.out_layout()?);
    for (l, wl) in w.parts.iter().enumerate() {
        let wrow: Vec<Complex64> = (0..wl.nrows())
            .flat_map(|i| (0..wl.ncols()).map(move |j| (i, j)))
            .map(|(i, j)| wl[(i, j)])
            .collect();
        linear_kernel(
            x.block(l),
            &wrow,
            wl.ncols(),
            wl.nrows(),
            2 * l + 1,
            out.block_mut(l),
        );
    }
    Ok(out)
}

/// Concatenate along the channel axis, degree by degree.
pub fn concat_channels(parts: &[&CovariantTensor]) -> Result<CovariantTensor> {
    let l_max = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to concatenate".into()))?
        .l_max();
    if parts.iter().any(|p| p.l_max() != l_max) {
        return Err(Error::InvalidArgument("degree mismatch in concatenation".into()));
    }
    let layout = CovLayout::new(
        (0..=l_max)
            .map(|l| parts.iter().map(|p| p.layout.channels(l)).sum())
            .collect(),
    )?;
    let mut data = Vec::with_capacity(layout.size());
    for l in 0..=l_max {
        for p in parts {
            data.extend_from_slice(p.block(l));
        }
    }
    CovariantTensor::from_data(layout, data)
}

/// `ξ1 ⊕ (⊕_ℓ ξ2 ⊕ ξ3)`: the `ℓ = 0` entries as `(re, im)` pairs, then per
/// degree `Re z + Im z` with `z = Σ_m (-1)^m x^m x^{-m}`, then `Σ_m |x^m|²`.
pub fn t_inv(x: &CovariantTensor) -> InvariantVector {
    let mut out = Vec::with_capacity(x.layout.invariant_size());
    for z in x.block(0) {
        out.push(z.re);
        out.push(z.im);
    }
    for l in 0..=x.l_max() {
        let dim = 2 * l + 1;
        let block = x.block(l);
        for row in block.chunks(dim) {
            let z: Complex64 = (0..dim)
                .map(|i| {
                    let sign = if (i + l) % 2 == 0 { 1.0 } else { -1.0 };
                    row[i] * row[dim - 1 - i] * sign
                })
                .sum();
            out.push(z.re + z.im);
        }
        for row in block.chunks(dim) {
            out.push(row.iter().map(Complex64::norm_sqr).sum());
        }
    }
    InvariantVector(out)
}

/// `W_ℓ [s_ℓ ⊕ d s_ℓ ⊕ (d s ⊗ d s)_ℓ]` with the pair-block product.
pub fn t_cov(d: f64, s: &CovariantTensor, w: &CovWeights) -> Result<CovariantTensor> {
    if !(d >= 0.0) {
        return Err(Error::InvalidArgument(format!("distance {d} must be >= 0")));
    }
    let ds = s.scale(d);
    let cg = cg_product_pairs(&ds, &ds, s.l_max())?;
    let cat = concat_channels(&[s, &ds, &cg])?;
    covariant_linear(&cat, w)
}
