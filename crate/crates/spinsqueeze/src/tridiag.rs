//! Small real symmetric tridiagonal toolkit: pivoted LU, Sturm counts and
//! inverse iteration.

/// LU factors of a tridiagonal matrix with partial pivoting.
pub(crate) struct TriLu {
    dl: Vec<f64>,
    d: Vec<f64>,
    du: Vec<f64>,
    du2: Vec<f64>,
    swap: Vec<bool>,
}

impl TriLu {
    /// Factors the matrix with sub-diagonal `dl`, diagonal `d` and super-diagonal `du`.
    pub(crate) fn new(mut dl: Vec<f64>, mut d: Vec<f64>, mut du: Vec<f64>) -> Self {
        let n = d.len();
        let mut du2 = vec![0.0; n.saturating_sub(2)];
        let mut swap = vec![false; n.saturating_sub(1)];
        for i in 0..n.saturating_sub(1) {
            if d[i].abs() >= dl[i].abs() {
                if d[i] != 0.0 {
                    let f = dl[i] / d[i];
                    dl[i] = f;
                    d[i + 1] -= f * du[i];
                }
            } else {
                let f = d[i] / dl[i];
                d[i] = dl[i];
                dl[i] = f;
                let t = du[i];
                du[i] = d[i + 1];
                d[i + 1] = t - f * d[i + 1];
                if i + 2 < n {
                    du2[i] = du[i + 1];
                    du[i + 1] = -f * du[i + 1];
                }
                swap[i] = true;
            }
        }
        let tiny = f64::EPSILON * d.iter().fold(1.0f64, |m, x| m.max(x.abs()));
        for x in d.iter_mut() {
            if x.abs() < tiny {
                *x = tiny;
            }
        }
        TriLu { dl, d, du, du2, swap }
    }

    pub(crate) fn solve(&self, b: &mut [f64]) {
        let n = self.d.len();
        for i in 0..n.saturating_sub(1) {
            if self.swap[i] {
                let t = b[i] - self.dl[i] * b[i + 1];
                b[i] = b[i + 1];
                b[i + 1] = t;
            } else {
                b[i + 1] -= self.dl[i] * b[i];
            }
        }
        b[n - 1] /= self.d[n - 1];
        if n > 1 {
            b[n - 2] = (b[n - 2] - self.du[n - 2] * b[n - 1]) / self.d[n - 2];
        }
        for i in (0..n.saturating_sub(2)).rev() {
            b[i] = (b[i] - self.du[i] * b[i + 1] - self.du2[i] * b[i + 2]) / self.d[i];
        }
    }
}

/// Unit eigenvector for an eigenvalue known to high accuracy, by inverse iteration.
///
/// The sign is fixed so that the largest component is positive.
pub(crate) fn eigenvector_near(diag: &[f64], off: &[f64], shift: f64) -> Vec<f64> {
    let dim = diag.len();
    if dim == 1 {
        return vec![1.0];
    }
    let lu = TriLu::new(off.to_vec(), diag.iter().map(|a| a - shift).collect(), off.to_vec());
    let mut state = 0x9e37_79b9_7f4a_7c15u64;
    let mut v: Vec<f64> = (0..dim)
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            0.5 + (state >> 11) as f64 / (1u64 << 53) as f64
        })
        .collect();
    for _ in 0..3 {
        lu.solve(&mut v);
        let s = 1.0 / v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x *= s);
    }
    let imax = v
        .iter()
        .enumerate()
        .fold(0, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
    if v[imax] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    v
}

/// Number of eigenvalues strictly below `sigma`.
pub(crate) fn sturm_count(diag: &[f64], off: &[f64], sigma: f64) -> usize {
    let tiny = f64::MIN_POSITIVE.sqrt();
    let mut count = 0;
    let mut q = diag[0] - sigma;
    for i in 0..diag.len() {
        if i > 0 {
            q = diag[i] - sigma - off[i - 1] * off[i - 1] / q;
        }
        if q == 0.0 {
            q = -tiny;
        }
        if q < 0.0 {
            count += 1;
        }
    }
    count
}

/// Lowest eigenvalue by Sturm bisection and its eigenvector.
pub(crate) fn lowest_eigenpair(diag: &[f64], off: &[f64]) -> (f64, Vec<f64>) {
    let n = diag.len();
    let radius = |i: usize| {
        (if i > 0 { off[i - 1].abs() } else { 0.0 }) + (if i + 1 < n { off[i].abs() } else { 0.0 })
    };
    let mut lo = (0..n).map(|i| diag[i] - radius(i)).fold(f64::INFINITY, f64::min);
    let mut hi = (0..n).map(|i| diag[i] + radius(i)).fold(f64::NEG_INFINITY, f64::max);
    let scale = lo.abs().max(hi.abs()).max(f64::MIN_POSITIVE);
    while hi - lo > 4.0 * f64::EPSILON * scale {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if sturm_count(diag, off, mid) >= 1 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let lambda = 0.5 * (lo + hi);
    (lambda, eigenvector_near(diag, off, lambda - 1e-10 * scale))
}
