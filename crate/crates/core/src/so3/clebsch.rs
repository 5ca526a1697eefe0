const MAX_FACT: usize = 64;

fn factorials() -> &'static [f64; MAX_FACT] {
    use std::sync::OnceLock;
    static TABLE: OnceLock<[f64; MAX_FACT]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [1.0; MAX_FACT];
        for i in 1..MAX_FACT {
            t[i] = t[i - 1] * i as f64;
        }
        t
    })
}

/// Clebsch-Gordan coefficient `<l1 m1; l2 m2 | l m>` (Racah formula). Zero
/// outside the selection rules.
pub fn cg_coeff(l1: usize, l2: usize, l: usize, m1: i64, m2: i64, m: i64) -> f64 {
    let (l1i, l2i, li) = (l1 as i64, l2 as i64, l as i64);
    if m1 + m2 != m || m1.abs() > l1i || m2.abs() > l2i || m.abs() > li {
        return 0.0;
    }
    if li < (l1i - l2i).abs() || li > l1i + l2i {
        return 0.0;
    }
    let f = factorials();
    let fi = |n: i64| f[n as usize];
    let pre = ((2 * li + 1) as f64 * fi(l1i + l2i - li) * fi(l1i - l2i + li) * fi(-l1i + l2i + li)
        / fi(l1i + l2i + li + 1))
    .sqrt()
        * (fi(li + m) * fi(li - m) * fi(l1i - m1) * fi(l1i + m1) * fi(l2i - m2) * fi(l2i + m2))
            .sqrt();
    let k_min = 0.max(l2i - li - m1).max(l1i - li + m2);
    let k_max = (l1i + l2i - li).min(l1i - m1).min(l2i + m2);
    let mut sum = 0.0;
    for k in k_min..=k_max {
        let denom = fi(k)
            * fi(l1i + l2i - li - k)
            * fi(l1i - m1 - k)
            * fi(l2i + m2 - k)
            * fi(li - l2i + m1 + k)
            * fi(li - l1i - m2 + k);
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        sum += sign / denom;
    }
    pre * sum
}

/// One non-zero coupling `out[m] += coeff * a[m1] * b[m2]`, indices into
/// flattened `lm` vectors.
#[derive(Debug, Clone, Copy)]
pub struct CgTerm {
    pub a: usize,
    pub b: usize,
    pub out: usize,
    pub coeff: f64,
}

/// Precomputed non-zero couplings for all `(l1, l2) -> l` with every degree
/// at most `l_max`.
#[derive(Debug, Clone)]
pub struct CgTable {
    l_max: usize,
    /// Indexed by `(l1 * (l_max+1) + l2) * (l_max+1) + l`.
    blocks: Vec<Vec<CgTerm>>,
}

impl CgTable {
    pub fn new(l_max: usize) -> Self {
        let n = l_max + 1;
        let mut blocks = vec![Vec::new(); n * n * n];
        for l1 in 0..=l_max {
            for l2 in 0..=l_max {
                for l in 0..=l_max {
                    let block = &mut blocks[(l1 * n + l2) * n + l];
                    for m1 in -(l1 as i64)..=(l1 as i64) {
                        for m2 in -(l2 as i64)..=(l2 as i64) {
                            let m = m1 + m2;
                            if m.unsigned_abs() as usize > l {
                                continue;
                            }
                            let c = cg_coeff(l1, l2, l, m1, m2, m);
                            if c != 0.0 {
                                // local offsets within each l-block
                                block.push(CgTerm {
                                    a: (m1 + l1 as i64) as usize,
                                    b: (m2 + l2 as i64) as usize,
                                    out: (m + l as i64) as usize,
                                    coeff: c,
                                });
                            }
                        }
                    }
                }
            }
        }
        CgTable { l_max, blocks }
    }

    pub fn l_max(&self) -> usize {
        self.l_max
    }

    /// Couplings for `(l1, l2) -> l`; offsets are `m + l` within each block.
    pub fn terms(&self, l1: usize, l2: usize, l: usize) -> &[CgTerm] {
        let n = self.l_max + 1;
        &self.blocks[(l1 * n + l2) * n + l]
    }

    /// `true` if `(l1, l2) -> l` is allowed by the triangle rule and has at
    /// least one non-zero term.
    pub fn admissible(&self, l1: usize, l2: usize, l: usize) -> bool {
        l + l1.min(l2) >= l1.max(l2) && l <= l1 + l2
    }
}
