use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Entropic transport plan between two discrete marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingPlan<S: Scalar = f64> {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows × cols`.
    pub matrix: Vec<S>,
    pub row_marginal: Vec<S>,
    pub col_marginal: Vec<S>,
    pub epsilon: S,
    pub iterations: usize,
    /// L1 distance between the plan's row sums and the row marginal.
    pub violation: S,
}

impl<S: Scalar> CouplingPlan<S> {
    pub fn get(&self, i: usize, j: usize) -> S {
        self.matrix[i * self.cols + j]
    }

    pub fn transport_cost(&self, cost: &[S]) -> S {
        self.matrix.iter().zip(cost).map(|(&p, &c)| p * c).sum()
    }

    pub fn row_sums(&self) -> Vec<S> {
        self.matrix.chunks(self.cols).map(|r| r.iter().copied().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<S> {
        let mut out = vec![S::zero(); self.cols];
        for row in self.matrix.chunks(self.cols) {
            out.iter_mut().zip(row).for_each(|(o, &v)| *o = *o + v);
        }
        out
    }

    /// Shannon entropy `−Σ p log p` of the plan.
    pub fn entropy(&self) -> S {
        -self.matrix.iter().filter(|&&p| p > S::zero()).map(|&p| p * p.ln()).sum::<S>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornConfig<S: Scalar = f64> {
    /// Absolute regularisation. `None` means `relative_epsilon × mean(cost)`.
    pub epsilon: Option<S>,
    pub relative_epsilon: f64,
    pub max_iter: usize,
    /// Stop once the L1 row-marginal violation drops below this.
    pub tol: f64,
    /// `None` means uniform.
    pub row_marginal: Option<Vec<S>>,
    pub col_marginal: Option<Vec<S>>,
}

impl<S: Scalar> Default for SinkhornConfig<S> {
    fn default() -> Self {
        Self { epsilon: None, relative_epsilon: 0.05, max_iter: 2000, tol: 1e-9, row_marginal: None, col_marginal: None }
    }
}

pub fn mean_cost<S: Scalar>(cost: &[S]) -> S {
    cost.iter().copied().sum::<S>() / S::from_usize(cost.len().max(1)).unwrap()
}

fn check_marginal<S: Scalar>(m: Option<&Vec<S>>, n: usize, which: &str) -> Result<Vec<S>> {
    let Some(m) = m else {
        return Ok(vec![S::one() / S::from_usize(n).unwrap(); n]);
    };
    if m.len() != n {
        return Err(Error::Dimension(format!("{which} marginal has {} entries, expected {n}", m.len())));
    }
    if let Some(i) = m.iter().position(|&v| !(v > S::zero()) || !v.is_finite()) {
        return Err(Error::Parameter(format!("{which} marginal entry {i} is {} (must be positive)", m[i])));
    }
    let total = m.iter().copied().sum::<S>().as_f64();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Parameter(format!("{which} marginal sums to {total}, not 1")));
    }
    Ok(m.clone())
}

fn log_sum_exp<S: Scalar>(vals: impl Iterator<Item = S> + Clone) -> S {
    let mx = vals.clone().fold(S::neg_infinity(), S::max);
    if mx == S::neg_infinity() {
        return mx;
    }
    mx + vals.map(|v| (v - mx).exp()).sum::<S>().ln()
}

struct State<'a, S: Scalar> {
    cost: &'a [S],
    n0: usize,
    n1: usize,
    a: Vec<S>,
    b: Vec<S>,
    f: Vec<S>,
    g: Vec<S>,
    u: Vec<S>,
    v: Vec<S>,
    kernel: Vec<S>,
}

impl<S: Scalar> State<'_, S> {
    /// One exact log-domain update of both potentials.
    fn log_update(&mut self, eps: S) {
        let (n0, n1) = (self.n0, self.n1);
        for i in 0..n0 {
            let row = (0..n1).map(|j| (self.g[j] - self.cost[i * n1 + j]) / eps);
            self.f[i] = eps * self.a[i].ln() - eps * log_sum_exp(row);
        }
        for j in 0..n1 {
            let col = (0..n0).map(|i| (self.f[i] - self.cost[i * n1 + j]) / eps);
            self.g[j] = eps * self.b[j].ln() - eps * log_sum_exp(col);
        }
    }

    /// Fold the scalings into the potentials and rebuild the kernel.
    fn absorb(&mut self, eps: S) {
        for i in 0..self.n0 {
            self.f[i] = self.f[i] + eps * self.u[i].ln();
            self.u[i] = S::one();
        }
        for j in 0..self.n1 {
            self.g[j] = self.g[j] + eps * self.v[j].ln();
            self.v[j] = S::one();
        }
        self.rebuild(eps);
    }

    fn rebuild(&mut self, eps: S) {
        let n1 = self.n1;
        for i in 0..self.n0 {
            for j in 0..n1 {
                self.kernel[i * n1 + j] = ((self.f[i] + self.g[j] - self.cost[i * n1 + j]) / eps).exp();
            }
        }
    }

    fn k_v(&self, out: &mut [S]) {
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.kernel[i * self.n1..(i + 1) * self.n1];
            *o = row.iter().zip(&self.v).map(|(&k, &v)| k * v).sum();
        }
    }

    fn kt_u(&self, out: &mut [S]) {
        out.iter_mut().for_each(|o| *o = S::zero());
        for i in 0..self.n0 {
            let ui = self.u[i];
            let row = &self.kernel[i * self.n1..(i + 1) * self.n1];
            out.iter_mut().zip(row).for_each(|(o, &k)| *o = *o + k * ui);
        }
    }

    /// Scaling iterations at fixed `eps` until the row violation is below
    /// `tol`, `budget` iterations pass, or progress stalls (less than a
    /// halving over 100 iterations). Returns (iterations, violation).
    fn run(&mut self, eps: S, tol: S, budget: usize) -> (usize, S) {
        let bound = S::lit(1e100);
        let mut kv = vec![S::zero(); self.n0];
        let mut ktu = vec![S::zero(); self.n1];
        let mut history: Vec<S> = Vec::new();
        let mut it = 0;
        loop {
            self.k_v(&mut kv);
            let violation: S = (0..self.n0).map(|i| (self.u[i] * kv[i] - self.a[i]).abs()).sum();
            history.push(violation);
            let stalled = it >= 200 && violation > S::lit(0.5) * history[it - 100];
            if violation < tol || it >= budget || stalled {
                return (it, violation);
            }
            it += 1;
            for i in 0..self.n0 {
                self.u[i] = self.a[i] / kv[i];
            }
            self.kt_u(&mut ktu);
            for j in 0..self.n1 {
                self.v[j] = self.b[j] / ktu[j];
            }
            let unstable = self.u.iter().chain(&self.v).any(|&x| !x.is_finite() || x > bound || x < S::one() / bound);
            if unstable {
                if self.u.iter().chain(&self.v).any(|x| !x.is_finite() || *x == S::zero()) {
                    // Kernel underflow: restart from an exact log-domain step.
                    self.u.iter_mut().chain(self.v.iter_mut()).for_each(|x| *x = S::one());
                    self.log_update(eps);
                    self.rebuild(eps);
                } else {
                    self.absorb(eps);
                }
            }
        }
    }

    /// Column-exact `g` for the current `f`, the resulting plan and the
    /// semi-dual objective `a·f + b·g`.
    fn semi_dual(&self, f: &[S], eps: S) -> (Vec<S>, Vec<S>, S) {
        let (n0, n1) = (self.n0, self.n1);
        let g: Vec<S> = (0..n1)
            .map(|j| {
                let col = (0..n0).map(|i| (f[i] - self.cost[i * n1 + j]) / eps);
                eps * self.b[j].ln() - eps * log_sum_exp(col)
            })
            .collect();
        let mut p = vec![S::zero(); n0 * n1];
        for i in 0..n0 {
            for j in 0..n1 {
                p[i * n1 + j] = ((f[i] + g[j] - self.cost[i * n1 + j]) / eps).exp();
            }
        }
        let obj = f.iter().zip(&self.a).map(|(&x, &w)| x * w).sum::<S>()
            + g.iter().zip(&self.b).map(|(&x, &w)| x * w).sum::<S>();
        (g, p, obj)
    }

    /// Damped Newton ascent on the semi-dual in `f`. Used when scaling
    /// iterations stall, which happens on near-degenerate problems at small
    /// `eps`. On return `u`, `v` are reset and the kernel holds the plan.
    fn newton(&mut self, eps: S, tol: S, max_steps: usize) -> (usize, S) {
        let (n0, n1) = (self.n0, self.n1);
        self.f.iter_mut().zip(&self.u).for_each(|(f, &u)| *f = *f + eps * u.ln());
        let mut f = self.f.clone();
        let (mut g, mut p, mut obj) = self.semi_dual(&f, eps);
        let row_viol = |p: &[S]| -> (Vec<S>, S) {
            let r: Vec<S> = p.chunks(n1).map(|row| row.iter().copied().sum()).collect();
            let v = r.iter().zip(&self.a).map(|(&x, &w)| (x - w).abs()).sum();
            (r, v)
        };
        let (mut r, mut violation) = row_viol(&p);
        let mut steps = 0;
        while violation >= tol && steps < max_steps {
            steps += 1;
            // (diag(r) − P diag(1/b) Pᵀ + 11ᵀ/n0) δ = ε (a − r)
            let mut h = nalgebra::DMatrix::<f64>::zeros(n0, n0);
            for i in 0..n0 {
                for k in i..n0 {
                    let mut acc = 0.0;
                    for j in 0..n1 {
                        acc += (p[i * n1 + j] * p[k * n1 + j] / self.b[j]).as_f64();
                    }
                    let val = if i == k { r[i].as_f64() - acc } else { -acc } + 1.0 / n0 as f64;
                    h[(i, k)] = val;
                    h[(k, i)] = val;
                }
            }
            let rhs = nalgebra::DVector::from_iterator(n0, (0..n0).map(|i| (eps * (self.a[i] - r[i])).as_f64()));
            let Some(delta) = h.lu().solve(&rhs) else { break };
            let mut alpha = S::one();
            let mut accepted = false;
            for _ in 0..30 {
                let trial: Vec<S> = f.iter().zip(delta.iter()).map(|(&x, &d)| x + alpha * S::lit(d)).collect();
                let (tg, tp, tobj) = self.semi_dual(&trial, eps);
                let (tr, tv) = row_viol(&tp);
                if tobj.is_finite() && (tobj > obj || tv < violation) {
                    (f, g, p, obj, r, violation) = (trial, tg, tp, tobj, tr, tv);
                    accepted = true;
                    break;
                }
                alpha = alpha * S::lit(0.5);
            }
            if !accepted {
                break;
            }
        }
        self.f = f;
        self.g = g;
        self.u.iter_mut().chain(self.v.iter_mut()).for_each(|x| *x = S::one());
        self.kernel = p;
        (steps, violation)
    }
}

/// Entropic OT between `a` (rows) and `b` (columns) under `cost`.
///
/// Runs Sinkhorn scaling on a kernel built from log-domain potentials; scalings
/// are absorbed into the potentials whenever they leave `[1e-100, 1e100]`.
/// For `ε` well below the cost scale the solve is warm-started through a
/// geometric ε schedule, and a stalled solve finishes with damped Newton
/// steps on the semi-dual. The returned plan has exact column sums and row sums
/// within `tol` (L1).
pub fn sinkhorn<S: Scalar>(cost: &[S], n0: usize, n1: usize, cfg: &SinkhornConfig<S>) -> Result<CouplingPlan<S>> {
    if n0 == 0 || n1 == 0 || cost.len() != n0 * n1 {
        return Err(Error::Dimension(format!("cost of {} entries for a {n0}x{n1} problem", cost.len())));
    }
    if let Some(i) = cost.iter().position(|c| !c.is_finite()) {
        return Err(Error::NonFinite(format!("cost entry {i} is {}", cost[i])));
    }
    let a = check_marginal(cfg.row_marginal.as_ref(), n0, "row")?;
    let b = check_marginal(cfg.col_marginal.as_ref(), n1, "column")?;
    let scale = mean_cost(cost);
    let eps = match cfg.epsilon {
        Some(e) => e,
        None if scale > S::zero() => scale * S::lit(cfg.relative_epsilon),
        None => S::one(),
    };
    if !(eps > S::zero()) || !eps.is_finite() {
        return Err(Error::Parameter(format!("epsilon {eps} must be positive")));
    }
    let mut st = State {
        cost,
        n0,
        n1,
        a,
        b,
        f: vec![S::zero(); n0],
        g: vec![S::zero(); n1],
        u: vec![S::one(); n0],
        v: vec![S::one(); n1],
        kernel: vec![S::zero(); n0 * n1],
    };

    let tol = S::lit(cfg.tol);
    let mut total = 0;
    // ε schedule: halve from the cost scale down to the target.
    let mut schedule = Vec::new();
    let mut e = eps;
    let start = scale * S::lit(0.05);
    while e < start {
        schedule.push(e);
        e = e * S::lit(2.0);
    }
    schedule.reverse();
    for &stage_eps in schedule.iter().filter(|&&s| s != eps) {
        st.log_update(stage_eps);
        st.u.iter_mut().chain(st.v.iter_mut()).for_each(|x| *x = S::one());
        st.rebuild(stage_eps);
        let (it, _) = st.run(stage_eps, S::lit(1e-3), 100);
        st.absorb(stage_eps);
        total += it;
    }
    st.log_update(eps);
    st.u.iter_mut().chain(st.v.iter_mut()).for_each(|x| *x = S::one());
    st.rebuild(eps);
    let (it, mut violation) = st.run(eps, tol, cfg.max_iter);
    total += it + 1;
    if !(violation < tol) {
        let (steps, v) = st.newton(eps, tol, 100);
        total += steps;
        violation = v;
    }
    if !(violation < tol) {
        return Err(Error::NoConvergence { iterations: total, violation: violation.as_f64() });
    }
    let mut matrix = st.kernel;
    for i in 0..n0 {
        for j in 0..n1 {
            matrix[i * n1 + j] = st.u[i] * matrix[i * n1 + j] * st.v[j];
        }
    }
    Ok(CouplingPlan {
        rows: n0,
        cols: n1,
        matrix,
        row_marginal: st.a,
        col_marginal: st.b,
        epsilon: eps,
        iterations: total,
        violation,
    })
}
