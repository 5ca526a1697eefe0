use super::{ParentGrads, Tape, Var};

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    fn unary(
        &self,
        x: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let (r, c) = self.shape(x);
        let out: Vec<f64> = self.with_value(x, |v| v.iter().map(|&a| f(a)).collect());
        self.push(
            out,
            r,
            c,
            &[x],
            Box::new(move |g, p, y, pg: &mut ParentGrads| {
                if let Some(gx) = pg.get(0) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * df(p[0][i], y[i]);
                    }
                }
            }),
        )
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(b), (r, c), "add shape mismatch");
        let out: Vec<f64> = {
            let (va, vb) = (self.value(a), self.value(b));
            va.iter().zip(&vb).map(|(x, y)| x + y).collect()
        };
        self.push(
            out,
            r,
            c,
            &[a, b],
            Box::new(|g, _, _, pg| {
                for k in 0..2 {
                    if let Some(gx) = pg.get(k) {
                        add_into(gx, g);
                    }
                }
            }),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(b), (r, c), "sub shape mismatch");
        let out: Vec<f64> = {
            let (va, vb) = (self.value(a), self.value(b));
            va.iter().zip(&vb).map(|(x, y)| x - y).collect()
        };
        self.push(
            out,
            r,
            c,
            &[a, b],
            Box::new(|g, _, _, pg| {
                if let Some(ga) = pg.get(0) {
                    add_into(ga, g);
                }
                if let Some(gb) = pg.get(1) {
                    for (d, s) in gb.iter_mut().zip(g) {
                        *d -= s;
                    }
                }
            }),
        )
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(b), (r, c), "mul shape mismatch");
        let out: Vec<f64> = {
            let (va, vb) = (self.value(a), self.value(b));
            va.iter().zip(&vb).map(|(x, y)| x * y).collect()
        };
        self.push(
            out,
            r,
            c,
            &[a, b],
            Box::new(|g, p, _, pg| {
                if let Some(ga) = pg.get(0) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * p[1][i];
                    }
                }
                if let Some(gb) = pg.get(1) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * p[0][i];
                    }
                }
            }),
        )
    }

    /// `c * x` for a constant `c`.
    pub fn scale(&self, x: Var, c: f64) -> Var {
        self.unary(x, move |a| c * a, move |_, _| c)
    }

    /// `x + c` for a constant `c`.
    pub fn add_scalar(&self, x: Var, c: f64) -> Var {
        self.unary(x, move |a| a + c, |_, _| 1.0)
    }

    pub fn neg(&self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    /// `s * x` where `s` is a one-element variable.
    pub fn mul_scalar(&self, x: Var, s: Var) -> Var {
        let (r, c) = self.shape(x);
        let sv = self.scalar(s);
        let out: Vec<f64> = self.with_value(x, |v| v.iter().map(|a| a * sv).collect());
        self.push(
            out,
            r,
            c,
            &[x, s],
            Box::new(|g, p, _, pg| {
                let s = p[1][0];
                if let Some(gx) = pg.get(0) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * s;
                    }
                }
                if let Some(gs) = pg.get(1) {
                    gs[0] += g.iter().zip(p[0]).map(|(a, b)| a * b).sum::<f64>();
                }
            }),
        )
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, |a| a.max(0.0), |a, _| if a > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, f64::exp, |_, y| y)
    }

    pub fn log(&self, x: Var) -> Var {
        self.unary(x, f64::ln, |a, _| 1.0 / a)
    }

    pub fn square(&self, x: Var) -> Var {
        self.unary(x, |a| a * a, |a, _| 2.0 * a)
    }

    /// Elementwise clamp; the gradient is zero where the bound is active.
    pub fn clamp(&self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(
            x,
            move |a| a.clamp(lo, hi),
            move |a, _| if a < lo || a > hi { 0.0 } else { 1.0 },
        )
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn minimum(&self, a: Var, b: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(b), (r, c), "minimum shape mismatch");
        let out: Vec<f64> = {
            let (va, vb) = (self.value(a), self.value(b));
            va.iter().zip(&vb).map(|(x, y)| x.min(*y)).collect()
        };
        self.push(
            out,
            r,
            c,
            &[a, b],
            Box::new(|g, p, _, pg| {
                for i in 0..g.len() {
                    let first = p[0][i] <= p[1][i];
                    if let Some(ga) = pg.get(0) {
                        if first {
                            ga[i] += g[i];
                        }
                    }
                    if let Some(gb) = pg.get(1) {
                        if !first {
                            gb[i] += g[i];
                        }
                    }
                }
            }),
        )
    }

    pub fn sum(&self, x: Var) -> Var {
        let s: f64 = self.with_value(x, |v| v.iter().sum());
        self.push(
            vec![s],
            1,
            1,
            &[x],
            Box::new(|g, _, _, pg| {
                if let Some(gx) = pg.get(0) {
                    for a in gx.iter_mut() {
                        *a += g[0];
                    }
                }
            }),
        )
    }

    pub fn mean(&self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let s = self.sum(x);
        self.scale(s, 1.0 / (r * c) as f64)
    }

    /// `x W^T + b` for `x: n × in`, `W: out × in`, `b: out`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, din) = self.shape(x);
        let (dout, win) = self.shape(w);
        assert_eq!(din, win, "linear input width mismatch");
        let mut out = vec![0.0; n * dout];
        {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let wv = &nodes[w.0].value;
            for i in 0..n {
                let xi = &xv[i * din..(i + 1) * din];
                for o in 0..dout {
                    let wo = &wv[o * din..(o + 1) * din];
                    out[i * dout + o] = xi.iter().zip(wo).map(|(a, b)| a * b).sum();
                }
            }
            if let Some(b) = b {
                let bv = &nodes[b.0].value;
                assert_eq!(bv.len(), dout, "linear bias width mismatch");
                for row in out.chunks_mut(dout) {
                    add_into(row, bv);
                }
            }
        }
        let parents: Vec<Var> = std::iter::once(x).chain(Some(w)).chain(b).collect();
        self.push(
            out,
            n,
            dout,
            &parents,
            Box::new(move |g, p, _, pg| {
                let (xv, wv) = (p[0], p[1]);
                if let Some(gx) = pg.get(0) {
                    for i in 0..n {
                        let gi = &g[i * dout..(i + 1) * dout];
                        let gxi = &mut gx[i * din..(i + 1) * din];
                        for (o, &go) in gi.iter().enumerate() {
                            if go != 0.0 {
                                let wo = &wv[o * din..(o + 1) * din];
                                for (a, w) in gxi.iter_mut().zip(wo) {
                                    *a += go * w;
                                }
                            }
                        }
                    }
                }
                if let Some(gw) = pg.get(1) {
                    for i in 0..n {
                        let xi = &xv[i * din..(i + 1) * din];
                        for o in 0..dout {
                            let go = g[i * dout + o];
                            if go != 0.0 {
                                let gwo = &mut gw[o * din..(o + 1) * din];
                                for (a, x) in gwo.iter_mut().zip(xi) {
                                    *a += go * x;
                                }
                            }
                        }
                    }
                }
                if p.len() > 2 {
                    if let Some(gb) = pg.get(2) {
                        for row in g.chunks(dout) {
                            add_into(gb, row);
                        }
                    }
                }
            }),
        )
    }

    /// Concatenate along columns; all inputs need the same row count.
    pub fn concat_cols(&self, xs: &[Var]) -> Var {
        let shapes: Vec<(usize, usize)> = xs.iter().map(|&v| self.shape(v)).collect();
        let rows = shapes[0].0;
        assert!(shapes.iter().all(|s| s.0 == rows), "concat row mismatch");
        let widths: Vec<usize> = shapes.iter().map(|s| s.1).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        {
            let nodes = self.nodes.borrow();
            let mut off = 0;
            for (v, &w) in xs.iter().zip(&widths) {
                let val = &nodes[v.0].value;
                for r in 0..rows {
                    out[r * total + off..r * total + off + w]
                        .copy_from_slice(&val[r * w..(r + 1) * w]);
                }
                off += w;
            }
        }
        self.push(
            out,
            rows,
            total,
            xs,
            Box::new(move |g, _, _, pg| {
                let mut off = 0;
                for (k, &w) in widths.iter().enumerate() {
                    if let Some(gk) = pg.get(k) {
                        for r in 0..rows {
                            add_into(
                                &mut gk[r * w..(r + 1) * w],
                                &g[r * total + off..r * total + off + w],
                            );
                        }
                    }
                    off += w;
                }
            }),
        )
    }

    /// Columns `start..end` of every row.
    pub fn slice_cols(&self, x: Var, start: usize, end: usize) -> Var {
        let (rows, cols) = self.shape(x);
        assert!(start <= end && end <= cols, "slice out of range");
        let w = end - start;
        let out: Vec<f64> = self.with_value(x, |v| {
            (0..rows)
                .flat_map(|r| v[r * cols + start..r * cols + end].iter().copied())
                .collect()
        });
        self.push(
            out,
            rows,
            w,
            &[x],
            Box::new(move |g, _, _, pg| {
                if let Some(gx) = pg.get(0) {
                    for r in 0..rows {
                        add_into(&mut gx[r * cols + start..r * cols + end], &g[r * w..(r + 1) * w]);
                    }
                }
            }),
        )
    }

    /// Row `i` as a `1 × cols` value.
    pub fn row(&self, x: Var, i: usize) -> Var {
        let (rows, cols) = self.shape(x);
        assert!(i < rows, "row out of range");
        let out = self.with_value(x, |v| v[i * cols..(i + 1) * cols].to_vec());
        self.push(
            out,
            1,
            cols,
            &[x],
            Box::new(move |g, _, _, pg| {
                if let Some(gx) = pg.get(0) {
                    add_into(&mut gx[i * cols..(i + 1) * cols], g);
                }
            }),
        )
    }

    /// Flat entry `i` as a scalar.
    pub fn pick(&self, x: Var, i: usize) -> Var {
        let v = self.with_value(x, |v| v[i]);
        self.push(
            vec![v],
            1,
            1,
            &[x],
            Box::new(move |g, _, _, pg| {
                if let Some(gx) = pg.get(0) {
                    gx[i] += g[0];
                }
            }),
        )
    }

    /// Reinterpret the flat value with a new shape.
    pub fn reshape(&self, x: Var, rows: usize, cols: usize) -> Var {
        let out = self.value(x);
        assert_eq!(out.len(), rows * cols, "reshape size mismatch");
        self.push(
            out,
            rows,
            cols,
            &[x],
            Box::new(|g, _, _, pg| {
                if let Some(gx) = pg.get(0) {
                    add_into(gx, g);
                }
            }),
        )
    }

    /// Column sums, `n × k -> 1 × k`.
    pub fn sum_rows(&self, x: Var) -> Var {
        let (rows, cols) = self.shape(x);
        let mut out = vec![0.0; cols];
        self.with_value(x, |v| {
            for r in v.chunks(cols) {
                add_into(&mut out, r);
            }
        });
        self.push(
            out,
            1,
            cols,
            &[x],
            Box::new(move |g, _, _, pg| {
                if let Some(gx) = pg.get(0) {
                    for r in 0..rows {
                        add_into(&mut gx[r * cols..(r + 1) * cols], g);
                    }
                }
            }),
        )
    }

    /// Log-probabilities of a categorical restricted to `mask`. Masked entries
    /// are `-inf` and receive exactly zero gradient.
    pub fn masked_log_softmax(&self, logits: Var, mask: &[bool]) -> Var {
        let (r, c) = self.shape(logits);
        let out = self.with_value(logits, |v| masked_log_softmax(v, mask));
        let mask = mask.to_vec();
        self.push(
            out,
            r,
            c,
            &[logits],
            Box::new(move |g, _, y, pg| {
                if let Some(gx) = pg.get(0) {
                    let total: f64 = (0..g.len()).filter(|&i| mask[i]).map(|i| g[i]).sum();
                    for i in 0..g.len() {
                        if mask[i] {
                            gx[i] += g[i] - y[i].exp() * total;
                        }
                    }
                }
            }),
        )
    }

    /// Entropy of the masked categorical defined by `logits`.
    pub fn masked_entropy(&self, logits: Var, mask: &[bool]) -> Var {
        let lp = self.with_value(logits, |v| masked_log_softmax(v, mask));
        let h: f64 = lp
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(l, _)| -l.exp() * l)
            .sum();
        let mask = mask.to_vec();
        self.push(
            vec![h],
            1,
            1,
            &[logits],
            Box::new(move |g, _, y, pg| {
                if let Some(gx) = pg.get(0) {
                    for i in 0..gx.len() {
                        if mask[i] {
                            let p = lp[i].exp();
                            gx[i] += -g[0] * p * (lp[i] + y[0]);
                        }
                    }
                }
            }),
        )
    }

    /// `log Σ_m softmax(logits)_m N(x; μ_m, exp(log_sigma_m)²)`; all four
    /// inputs are differentiable, `x` is a scalar.
    pub fn gmm_log_density(&self, logits: Var, means: Var, log_sigma: Var, x: Var) -> Var {
        let (l, mu, ls, xv) = (
            self.value(logits),
            self.value(means),
            self.value(log_sigma),
            self.scalar(x),
        );
        assert!(l.len() == mu.len() && mu.len() == ls.len(), "mixture size mismatch");
        let (out, resp, pis) = gmm_parts(&l, &mu, &ls, xv);
        self.push(
            vec![out],
            1,
            1,
            &[logits, means, log_sigma, x],
            Box::new(move |g, p, _, pg| {
                let g = g[0];
                let (mu, ls, x) = (p[1], p[2], p[3][0]);
                let z: Vec<f64> = (0..mu.len()).map(|m| (x - mu[m]) / ls[m].exp()).collect();
                if let Some(gl) = pg.get(0) {
                    for m in 0..gl.len() {
                        gl[m] += g * (resp[m] - pis[m]);
                    }
                }
                if let Some(gm) = pg.get(1) {
                    for m in 0..gm.len() {
                        gm[m] += g * resp[m] * z[m] / ls[m].exp();
                    }
                }
                if let Some(gs) = pg.get(2) {
                    for m in 0..gs.len() {
                        gs[m] += g * resp[m] * (z[m] * z[m] - 1.0);
                    }
                }
                if let Some(gx) = pg.get(3) {
                    gx[0] -= g * (0..mu.len())
                        .map(|m| resp[m] * z[m] / ls[m].exp())
                        .sum::<f64>();
                }
            }),
        )
    }
}

/// Masked log-softmax on plain values; masked entries are `-inf`.
pub(crate) fn masked_log_softmax(v: &[f64], mask: &[bool]) -> Vec<f64> {
    assert_eq!(v.len(), mask.len(), "mask length mismatch");
    let max = v
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(a, _)| *a)
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + v.iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(a, _)| (a - max).exp())
            .sum::<f64>()
            .ln();
    v.iter()
        .zip(mask)
        .map(|(a, &m)| if m { a - lse } else { f64::NEG_INFINITY })
        .collect()
}

/// Returns `(log density, responsibilities, mixture weights)`.
fn gmm_parts(logits: &[f64], mu: &[f64], log_sigma: &[f64], x: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let all = vec![true; logits.len()];
    let lp = masked_log_softmax(logits, &all);
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let comp: Vec<f64> = (0..mu.len())
        .map(|m| {
            let z = (x - mu[m]) / log_sigma[m].exp();
            lp[m] - log_sigma[m] - half_log_2pi - 0.5 * z * z
        })
        .collect();
    let max = comp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = comp.iter().map(|c| (c - max).exp()).sum();
    let out = max + s.ln();
    let resp = comp.iter().map(|c| (c - out).exp()).collect();
    let pis = lp.iter().map(|l| l.exp()).collect();
    (out, resp, pis)
}

#[cfg(test)]
mod tests {
    use super::super::{finite_difference, relative_error, Tape};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Compare tape gradients of `f` against central differences at `x`.
    fn check(x: &[f64], f: impl Fn(&Tape, super::Var) -> super::Var) {
        let tape = Tape::new();
        let v = tape.leaf(x.to_vec(), 1, x.len());
        let out = f(&tape, v);
        let g = tape.backward(out).unwrap().get(v).unwrap().to_vec();
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

    #[test]
    fn elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(0.2..2.0)).collect();
            check(&x, |t, v| {
                let a = t.tanh(v);
                let b = t.log(t.exp(t.square(a)));
                let c = t.mul(b, v);
                let d = t.add_scalar(t.scale(c, 1.7), 0.3);
                let e = t.minimum(d, t.scale(v, 0.9));
                t.sum(t.clamp(e, -5.0, 5.0))
            });
        }
    }

    #[test]
    fn linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let x: Vec<f64> = (0..(2 * 3 + 4 * 3 + 4)).map(|_| rng.random_range(-1.0..1.0)).collect();
            check(&x, |t, v| {
                let xs = t.reshape(t.slice_cols(v, 0, 6), 2, 3);
                let w = t.reshape(t.slice_cols(v, 6, 18), 4, 3);
                let b = t.slice_cols(v, 18, 22);
                let y = t.linear(xs, w, Some(b));
                let r = t.row(t.relu(y), 1);
                let s = t.sum_rows(t.tanh(y));
                t.add(t.sum(t.square(r)), t.sum(t.concat_cols(&[s, r])))
            });
        }
    }

    #[test]
    fn masked_softmax_and_entropy_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mask = [true, false, true, true];
        for _ in 0..50 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            check(&x, |t, v| {
                let lp = t.masked_log_softmax(v, &mask);
                let h = t.masked_entropy(v, &mask);
                t.add(t.scale(t.pick(lp, 2), 1.3), h)
            });
        }
    }

    #[test]
    fn gmm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..50 {
            let x: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
            check(&x, |t, v| {
                let l = t.slice_cols(v, 0, 3);
                let m = t.slice_cols(v, 3, 6);
                let s = t.slice_cols(v, 6, 9);
                let xx = t.pick(v, 9);
                t.gmm_log_density(l, m, s, xx)
            });
        }
    }

    #[test]
    fn masked_entries_get_zero_gradient() {
        let t = Tape::new();
        let v = t.leaf(vec![1.0, 2.0, 3.0], 1, 3);
        let mask = [true, false, true];
        let lp = t.masked_log_softmax(v, &mask);
        let out = t.add(t.pick(lp, 0), t.masked_entropy(v, &mask));
        let g = t.backward(out).unwrap();
        assert_eq!(g.get(v).unwrap()[1], 0.0);
    }

    #[test]
    fn mul_scalar_gradient() {
        let t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0], 1, 2);
        let s = t.leaf(vec![3.0], 1, 1);
        let y = t.sum(t.mul_scalar(x, s));
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[3.0, 3.0]);
        assert_eq!(g.get(s).unwrap(), &[3.0]);
    }

    proptest! {
        #[test]
        fn masked_softmax_shift_invariant(
            logits in proptest::collection::vec(-5.0f64..5.0, 1..8),
            shift in -10.0f64..10.0,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut mask: Vec<bool> = logits.iter().map(|_| rng.random_bool(0.6)).collect();
            mask[0] = true;
            let a = super::masked_log_softmax(&logits, &mask);
            let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
            let b = super::masked_log_softmax(&shifted, &mask);
            let total: f64 = a.iter().map(|l| l.exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            for ((x, y), m) in a.iter().zip(&b).zip(&mask) {
                if *m {
                    prop_assert!((x.exp() - y.exp()).abs() < 1e-12);
                } else {
                    prop_assert_eq!(x.exp(), 0.0);
                }
            }
        }
    }
}
