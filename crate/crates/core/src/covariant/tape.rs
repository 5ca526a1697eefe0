//! Covariant operations recorded on an autodiff tape.
//!
//! Values are `rows × 2·layout.size()` with each row an interleaved
//! `(re, im)` copy of a [`CovariantTensor`](super::CovariantTensor). Complex
//! gradients follow `G = ∂L/∂re + i ∂L/∂im`, so for `y = a b` the rule is
//! `G_a += G_y conj(b)`.

use nalgebra::DMatrix;
use num_complex::Complex64;

use super::{
    cg_kernel, cg_table, complex_from_interleaved, degree_pairs, interleave, linear_kernel,
    CovLayout,
};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

fn c(v: &[f64]) -> Vec<Complex64> {
    complex_from_interleaved(v)
}

fn add_complex(dst: &mut [f64], src: &[Complex64]) {
    for (d, s) in dst.chunks_exact_mut(2).zip(src) {
        d[0] += s.re;
        d[1] += s.im;
    }
}

fn check_width(tape: &Tape, x: Var, layout: &CovLayout) -> Result<usize> {
    let (rows, cols) = tape.shape(x);
    if cols != 2 * layout.size() {
        return Err(Error::InvalidArgument(format!(
            "covariant value has {cols} columns, layout needs {}",
            2 * layout.size()
        )));
    }
    Ok(rows)
}

/// Per-degree channel mixing `y_ℓ = W_ℓ x_ℓ`. `weights[ℓ]` is `out × 2 in`
/// interleaved.
pub fn linear(tape: &Tape, x: Var, layout: &CovLayout, weights: &[Var]) -> Result<(Var, CovLayout)> {
    let rows = check_width(tape, x, layout)?;
    if weights.len() != layout.l_max() + 1 {
        return Err(Error::InvalidArgument(format!(
            "{} weight blocks for {} degrees",
            weights.len(),
            layout.l_max() + 1
        )));
    }
    let mut outs = Vec::with_capacity(weights.len());
    for (l, &w) in weights.iter().enumerate() {
        let (o, cols) = tape.shape(w);
        if cols != 2 * layout.channels(l) {
            return Err(Error::InvalidArgument(format!(
                "degree {l}: weight has {} complex columns, input has {} channels",
                cols / 2,
                layout.channels(l)
            )));
        }
        outs.push(o);
    }
    let out_layout = CovLayout::new(outs)?;
    let (lin, lout) = (layout.clone(), out_layout.clone());
    let wvals: Vec<Vec<Complex64>> = weights.iter().map(|&w| tape.with_value(w, c)).collect();
    let xv = tape.with_value(x, c);
    let (nin, nout) = (lin.size(), lout.size());
    let mut out = vec![Complex64::new(0.0, 0.0); rows * nout];
    for r in 0..rows {
        let xr = &xv[r * nin..(r + 1) * nin];
        let or = &mut out[r * nout..(r + 1) * nout];
        for l in 0..=lin.l_max() {
            let dim = 2 * l + 1;
            let (oi, oo) = (lin.offset(l), lout.offset(l));
            let (ci, co) = (lin.channels(l), lout.channels(l));
            linear_kernel(&xr[oi..oi + ci * dim], &wvals[l], ci, co, dim, &mut or[oo..oo + co * dim]);
        }
    }
    let parents: Vec<Var> = std::iter::once(x).chain(weights.iter().copied()).collect();
    let var = tape.push(
        interleave(&out),
        rows,
        2 * nout,
        &parents,
        Box::new(move |g, p, _, pg| {
            let g = c(g);
            let xv = c(p[0]);
            for l in 0..=lin.l_max() {
                let dim = 2 * l + 1;
                let (oi, oo) = (lin.offset(l), lout.offset(l));
                let (ci, co) = (lin.channels(l), lout.channels(l));
                let w = c(p[1 + l]);
                if let Some(gx) = pg.get(0) {
                    let mut acc = vec![Complex64::new(0.0, 0.0); ci * dim];
                    for r in 0..rows {
                        acc.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
                        let gr = &g[r * nout + oo..r * nout + oo + co * dim];
                        for o in 0..co {
                            for ch in 0..ci {
                                let wc = w[o * ci + ch].conj();
                                for m in 0..dim {
                                    acc[ch * dim + m] += wc * gr[o * dim + m];
                                }
                            }
                        }
                        add_complex(&mut gx[2 * (r * nin + oi)..2 * (r * nin + oi + ci * dim)], &acc);
                    }
                }
                if let Some(gw) = pg.get(1 + l) {
                    let mut acc = vec![Complex64::new(0.0, 0.0); co * ci];
                    for r in 0..rows {
                        let gr = &g[r * nout + oo..r * nout + oo + co * dim];
                        let xr = &xv[r * nin + oi..r * nin + oi + ci * dim];
                        for o in 0..co {
                            for ch in 0..ci {
                                acc[o * ci + ch] += (0..dim)
                                    .map(|m| gr[o * dim + m] * xr[ch * dim + m].conj())
                                    .sum::<Complex64>();
                            }
                        }
                    }
                    add_complex(gw, &acc);
                }
            }
        }),
    );
    Ok((var, out_layout))
}

#[derive(Clone, Copy)]
struct PlanItem {
    l1: usize,
    l2: usize,
    l: usize,
    /// Complex offset inside the output row.
    out_offset: usize,
}

fn cg_node(
    tape: &Tape,
    a: Var,
    b: Var,
    layout: &CovLayout,
    out_layout: CovLayout,
    plan: Vec<PlanItem>,
) -> Result<(Var, CovLayout)> {
    let rows = check_width(tape, a, layout)?;
    if check_width(tape, b, layout)? != rows {
        return Err(Error::InvalidArgument("row mismatch in product".into()));
    }
    let tau = layout.uniform_channels()?;
    let table = cg_table();
    let lin = layout.clone();
    let (nin, nout) = (lin.size(), out_layout.size());
    let av = tape.with_value(a, c);
    let bv = tape.with_value(b, c);
    let mut out = vec![Complex64::new(0.0, 0.0); rows * nout];
    for r in 0..rows {
        let (ar, br) = (&av[r * nin..(r + 1) * nin], &bv[r * nin..(r + 1) * nin]);
        let or = &mut out[r * nout..(r + 1) * nout];
        for it in &plan {
            let (d1, d2, d) = (2 * it.l1 + 1, 2 * it.l2 + 1, 2 * it.l + 1);
            let (o1, o2) = (lin.offset(it.l1), lin.offset(it.l2));
            cg_kernel(
                &ar[o1..o1 + tau * d1],
                &br[o2..o2 + tau * d2],
                table.terms(it.l1, it.l2, it.l),
                tau,
                (d1, d2, d),
                &mut or[it.out_offset..it.out_offset + tau * d],
            );
        }
    }
    let var = tape.push(
        interleave(&out),
        rows,
        2 * nout,
        &[a, b],
        Box::new(move |g, p, _, pg| {
            let g = c(g);
            let (av, bv) = (c(p[0]), c(p[1]));
            let mut ga = vec![Complex64::new(0.0, 0.0); av.len()];
            let mut gb = vec![Complex64::new(0.0, 0.0); bv.len()];
            for r in 0..rows {
                for it in &plan {
                    let (d1, d2, d) = (2 * it.l1 + 1, 2 * it.l2 + 1, 2 * it.l + 1);
                    let (o1, o2) = (r * nin + lin.offset(it.l1), r * nin + lin.offset(it.l2));
                    let go = r * nout + it.out_offset;
                    for ch in 0..tau {
                        for t in table.terms(it.l1, it.l2, it.l) {
                            let gz = g[go + ch * d + t.out] * t.coeff;
                            let ia = o1 + ch * d1 + t.a;
                            let ib = o2 + ch * d2 + t.b;
                            ga[ia] += gz * bv[ib].conj();
                            gb[ib] += gz * av[ia].conj();
                        }
                    }
                }
            }
            if let Some(x) = pg.get(0) {
                add_complex(x, &ga);
            }
            if let Some(x) = pg.get(1) {
                add_complex(x, &gb);
            }
        }),
    );
    Ok((var, out_layout))
}

/// Channel-wise product summed over degree pairs, truncated at `l_max_out`.
pub fn cg_channelwise(
    tape: &Tape,
    a: Var,
    b: Var,
    layout: &CovLayout,
    l_max_out: usize,
) -> Result<(Var, CovLayout)> {
    let tau = layout.uniform_channels()?;
    let out_layout = CovLayout::uniform(l_max_out, tau);
    let plan = (0..=l_max_out)
        .flat_map(|l| {
            let off = out_layout.offset(l);
            degree_pairs(layout.l_max(), l)
                .into_iter()
                .map(move |(l1, l2)| PlanItem { l1, l2, l, out_offset: off })
        })
        .collect();
    cg_node(tape, a, b, layout, out_layout, plan)
}

/// Channel-wise product with one channel block per degree pair.
pub fn cg_pairs(
    tape: &Tape,
    a: Var,
    b: Var,
    layout: &CovLayout,
    l_max_out: usize,
) -> Result<(Var, CovLayout)> {
    let tau = layout.uniform_channels()?;
    let out_layout = layout.pair_layout(l_max_out)?;
    let plan = (0..=l_max_out)
        .flat_map(|l| {
            let off = out_layout.offset(l);
            degree_pairs(layout.l_max(), l)
                .into_iter()
                .enumerate()
                .map(move |(k, (l1, l2))| PlanItem {
                    l1,
                    l2,
                    l,
                    out_offset: off + k * tau * (2 * l + 1),
                })
        })
        .collect();
    cg_node(tape, a, b, layout, out_layout, plan)
}

/// Channel-axis concatenation, degree by degree.
pub fn concat(tape: &Tape, parts: &[(Var, &CovLayout)]) -> Result<(Var, CovLayout)> {
    let l_max = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to concatenate".into()))?
        .1
        .l_max();
    if parts.iter().any(|(_, l)| l.l_max() != l_max) {
        return Err(Error::InvalidArgument("degree mismatch in concatenation".into()));
    }
    let out_layout = CovLayout::new(
        (0..=l_max)
            .map(|l| parts.iter().map(|(_, p)| p.channels(l)).sum())
            .collect(),
    )?;
    // source column of each output real, as (part, column)
    let mut map = Vec::with_capacity(2 * out_layout.size());
    for l in 0..=l_max {
        for (k, (_, p)) in parts.iter().enumerate() {
            let start = 2 * p.offset(l);
            let len = 2 * p.channels(l) * (2 * l + 1);
            map.extend((start..start + len).map(|col| (k, col)));
        }
    }
    let mut tables: Vec<Var> = Vec::with_capacity(parts.len());
    let rows = check_width(tape, parts[0].0, parts[0].1)?;
    for (v, p) in parts {
        if check_width(tape, *v, p)? != rows {
            return Err(Error::InvalidArgument("row mismatch in concatenation".into()));
        }
        tables.push(*v);
    }
    let widths: Vec<usize> = parts.iter().map(|(_, p)| 2 * p.size()).collect();
    let vals: Vec<Vec<f64>> = tables.iter().map(|&v| tape.value(v)).collect();
    let n = map.len();
    let mut out = vec![0.0; rows * n];
    for r in 0..rows {
        for (j, &(k, col)) in map.iter().enumerate() {
            out[r * n + j] = vals[k][r * widths[k] + col];
        }
    }
    let var = tape.push(
        out,
        rows,
        n,
        &tables,
        Box::new(move |g, _, _, pg| {
            for r in 0..rows {
                for (j, &(k, col)) in map.iter().enumerate() {
                    if let Some(gk) = pg.get(k) {
                        gk[r * widths[k] + col] += g[r * n + j];
                    }
                }
            }
        }),
    );
    Ok((var, out_layout))
}

/// Row-wise invariant features, see [`super::t_inv`].
pub fn t_inv(tape: &Tape, x: Var, layout: &CovLayout) -> Result<Var> {
    let rows = check_width(tape, x, layout)?;
    let lay = layout.clone();
    let n = lay.size();
    let width = lay.invariant_size();
    let xv = tape.with_value(x, c);
    let mut out = Vec::with_capacity(rows * width);
    for r in 0..rows {
        let t = super::CovariantTensor::from_data(lay.clone(), xv[r * n..(r + 1) * n].to_vec())?;
        out.extend(super::t_inv(&t).0);
    }
    let var = tape.push(
        out,
        rows,
        width,
        &[x],
        Box::new(move |g, p, _, pg| {
            let Some(gx) = pg.get(0) else { return };
            let xv = c(p[0]);
            let mut gc = vec![Complex64::new(0.0, 0.0); xv.len()];
            for r in 0..rows {
                let gr = &g[r * width..(r + 1) * width];
                let xr = &xv[r * n..(r + 1) * n];
                let gcr = &mut gc[r * n..(r + 1) * n];
                let tau0 = lay.channels(0);
                for ch in 0..tau0 {
                    gcr[ch] += Complex64::new(gr[2 * ch], gr[2 * ch + 1]);
                }
                let mut k = 2 * tau0;
                for l in 0..=lay.l_max() {
                    let dim = 2 * l + 1;
                    let off = lay.offset(l);
                    let tau = lay.channels(l);
                    for ch in 0..tau {
                        let gz = Complex64::new(gr[k + ch], gr[k + ch]);
                        let base = off + ch * dim;
                        for i in 0..dim {
                            let sign = if (i + l) % 2 == 0 { 2.0 } else { -2.0 };
                            let dz = xr[base + dim - 1 - i] * sign;
                            gcr[base + i] += gz * dz.conj();
                        }
                    }
                    k += tau;
                    for ch in 0..tau {
                        let gn = gr[k + ch];
                        let base = off + ch * dim;
                        for i in 0..dim {
                            gcr[base + i] += xr[base + i] * (2.0 * gn);
                        }
                    }
                    k += tau;
                }
            }
            add_complex(gx, &gc);
        }),
    );
    Ok(var)
}

/// Per-channel squashing `x ↦ x / sqrt(1 + Σ_m |x^m|²)`, applied to every
/// `(ℓ, channel)` row independently. Rotation covariant since the norm is
/// invariant.
pub fn squash(tape: &Tape, x: Var, layout: &CovLayout) -> Result<Var> {
    let rows = check_width(tape, x, layout)?;
    // real-valued group boundaries within a row
    let mut groups = Vec::new();
    for l in 0..=layout.l_max() {
        let len = 2 * (2 * l + 1);
        let start = 2 * layout.offset(l);
        for ch in 0..layout.channels(l) {
            groups.push((start + ch * len, len));
        }
    }
    let width = 2 * layout.size();
    let xv = tape.value(x);
    let mut out = xv.clone();
    for r in 0..rows {
        for &(s, len) in &groups {
            let seg = &mut out[r * width + s..r * width + s + len];
            let n: f64 = seg.iter().map(|v| v * v).sum();
            let f = 1.0 / (1.0 + n).sqrt();
            seg.iter_mut().for_each(|v| *v *= f);
        }
    }
    Ok(tape.push(
        out,
        rows,
        width,
        &[x],
        Box::new(move |g, p, _, pg| {
            let Some(gx) = pg.get(0) else { return };
            for r in 0..rows {
                for &(s, len) in &groups {
                    let o = r * width + s;
                    let xs = &p[0][o..o + len];
                    let gs = &g[o..o + len];
                    let n: f64 = xs.iter().map(|v| v * v).sum();
                    let f = 1.0 / (1.0 + n).sqrt();
                    let df = -f * f * f;
                    let gx_dot: f64 = gs.iter().zip(xs).map(|(a, b)| a * b).sum();
                    for j in 0..len {
                        gx[o + j] += gs[j] * f + gx_dot * df * xs[j];
                    }
                }
            }
        }),
    ))
}

/// Apply a fixed matrix per degree along the `m` axis, `x_ℓ[c] ↦ M_ℓ x_ℓ[c]`.
/// With Wigner matrices this is the rotation action.
pub fn apply_m_matrices(
    tape: &Tape,
    x: Var,
    layout: &CovLayout,
    mats: &[DMatrix<Complex64>],
) -> Result<Var> {
    let rows = check_width(tape, x, layout)?;
    if mats.len() <= layout.l_max() {
        return Err(Error::InvalidArgument("missing degree matrices".into()));
    }
    let lay = layout.clone();
    let mats: Vec<DMatrix<Complex64>> = mats[..=lay.l_max()].to_vec();
    let n = lay.size();
    let apply = move |v: &[Complex64], adjoint: bool| -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); v.len()];
        for r in 0..v.len() / n {
            for l in 0..=lay.l_max() {
                let dim = 2 * l + 1;
                let m = &mats[l];
                let off = r * n + lay.offset(l);
                for ch in 0..lay.channels(l) {
                    let b = off + ch * dim;
                    for i in 0..dim {
                        out[b + i] = (0..dim)
                            .map(|j| {
                                let mij = if adjoint { m[(j, i)].conj() } else { m[(i, j)] };
                                mij * v[b + j]
                            })
                            .sum();
                    }
                }
            }
        }
        out
    };
    let out = tape.with_value(x, |v| apply(&c(v), false));
    Ok(tape.push(
        interleave(&out),
        rows,
        2 * n,
        &[x],
        Box::new(move |g, _, _, pg| {
            if let Some(gx) = pg.get(0) {
                add_complex(gx, &apply(&c(g), true));
            }
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::super::{self as cov, CovariantTensor, CovWeights};
    use super::*;
    use crate::autodiff::{finite_difference, relative_error};
    use crate::so3::{random_rotation, WignerSolver};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Check tape gradients of `f(x)` (x flat) against central differences.
    fn grad_check(x: &[f64], f: &dyn Fn(&Tape, Var) -> Var) {
        let t = Tape::new();
        let v = t.leaf(x.to_vec(), 1, x.len());
        let out = f(&t, v);
        let g = t.backward(out).unwrap().get(v).unwrap().to_vec();
        let fd = finite_difference(x, 1e-5, |p| {
            let t = Tape::new();
            let v = t.leaf(p.to_vec(), 1, p.len());
            let o = f(&t, v);
            t.scalar(o)
        });
        for (a, b) in g.iter().zip(&fd) {
            assert!(relative_error(*a, *b, 1e-3) < 1e-4, "{a} vs {b}");
        }
    }

    fn weighted_sum(t: &Tape, v: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, cols) = t.shape(v);
        let w = t.constant(rand_vec(r * cols, &mut rng), r, cols);
        let sq = t.square(v);
        t.add(t.sum(t.mul(v, w)), t.scale(t.sum(sq), 0.3))
    }

    #[test]
    fn tape_ops_match_plain_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let layout = CovLayout::uniform(2, 2);
        let rows = 3;
        let xs: Vec<CovariantTensor> = (0..rows)
            .map(|_| {
                CovariantTensor::from_interleaved(layout.clone(), &rand_vec(2 * layout.size(), &mut rng))
                    .unwrap()
            })
            .collect();
        let flat: Vec<f64> = xs.iter().flat_map(|x| x.to_interleaved()).collect();
        let t = Tape::new();
        let x = t.constant(flat, rows, 2 * layout.size());

        let (p, pl) = cg_pairs(&t, x, x, &layout, 2).unwrap();
        let (s, _) = cg_channelwise(&t, x, x, &layout, 3).unwrap();
        let inv = t_inv(&t, x, &layout).unwrap();
        let wparts: Vec<DMatrix<Complex64>> = (0..=2)
            .map(|_| DMatrix::from_fn(3, 2, |_, _| Complex64::new(rng.random(), rng.random())))
            .collect();
        let wv: Vec<Var> = wparts
            .iter()
            .map(|m| {
                let vals: Vec<f64> = (0..3)
                    .flat_map(|i| (0..2).flat_map(move |j| [m[(i, j)].re, m[(i, j)].im]))
                    .collect();
                t.constant(vals, 3, 4)
            })
            .collect();
        let (lin, ll) = linear(&t, x, &layout, &wv).unwrap();
        for (r, xr) in xs.iter().enumerate() {
            let row = |v: Var| t.with_value(v, |vals| {
                let w = vals.len() / rows;
                vals[r * w..(r + 1) * w].to_vec()
            });
            let ep = cov::cg_product_pairs(xr, xr, 2).unwrap();
            assert_eq!(ep.layout(), &pl);
            for (a, b) in row(p).iter().zip(ep.to_interleaved()) {
                assert!((a - b).abs() < 1e-14);
            }
            let es = cov::cg_product_channelwise(xr, xr, 3).unwrap();
            for (a, b) in row(s).iter().zip(es.to_interleaved()) {
                assert!((a - b).abs() < 1e-14);
            }
            assert_eq!(row(inv), cov::t_inv(xr).0);
            let el = cov::covariant_linear(xr, &CovWeights { parts: wparts.clone() }).unwrap();
            assert_eq!(el.layout(), &ll);
            for (a, b) in row(lin).iter().zip(el.to_interleaved()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn gradients_of_fused_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let layout = CovLayout::uniform(2, 2);
        let n = 2 * layout.size();
        let solver = WignerSolver::new(2);
        for inst in 0..20 {
            let d = solver.solve(&random_rotation(&mut rng)).unwrap();
            let x = rand_vec(2 * n + 36, &mut rng);
            let lay = layout.clone();
            grad_check(&x, &move |t, v| {
                let a = t.reshape(t.slice_cols(v, 0, 2 * n), 2, n);
                let (p, pl) = cg_pairs(t, a, a, &lay, 2).unwrap();
                let (s, sl) = cg_channelwise(t, a, a, &lay, 2).unwrap();
                let ws: Vec<Var> = (0..3)
                    .map(|l| t.reshape(t.slice_cols(v, 2 * n + 12 * l, 2 * n + 12 * (l + 1)), 3, 4))
                    .collect();
                let (lin, ll) = linear(t, s, &sl, &ws).unwrap();
                let sq = squash(t, lin, &ll).unwrap();
                let (cat, cl) = concat(t, &[(sq, &ll), (p, &pl)]).unwrap();
                let rot = apply_m_matrices(t, cat, &cl, &d).unwrap();
                let inv = t_inv(t, rot, &cl).unwrap();
                t.add(weighted_sum(t, inv, inst), weighted_sum(t, rot, inst + 100))
            });
        }
    }
}
