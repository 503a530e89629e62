use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::table::ProbTable;

use super::TaskModel;

#[derive(Clone, Copy, Debug)]
pub struct ValueIterationConfig<F> {
    pub tol: F,
    pub max_iterations: usize,
}

impl<F: Scalar> ValueIterationConfig<F> {
    pub fn new(tol: F) -> Self {
        Self { tol, max_iterations: 100_000 }
    }
}

#[derive(Clone, Debug)]
pub struct ValueSolution<F> {
    pub values: Vec<F>,
    /// Greedy joint action per state.
    pub policy: Vec<usize>,
    pub iterations: usize,
    /// Max-norm difference between the last two iterates.
    pub gap: F,
}

pub fn value_iteration<F: Scalar>(model: &TaskModel<F>, tol: F) -> Result<ValueSolution<F>> {
    value_iteration_with(model, &ValueIterationConfig::new(tol))
}

/// Infinite-horizon value iteration on the model's discount.
///
/// With `gamma < 1` the stopping gap is tightened to `tol * (1 - gamma) / (2 gamma)`
/// so the returned values sit within `tol / 2` of the fixed point; the iterate
/// gap is then also below `tol`.
pub fn value_iteration_with<F: Scalar>(
    model: &TaskModel<F>,
    cfg: &ValueIterationConfig<F>,
) -> Result<ValueSolution<F>> {
    if !(cfg.tol > F::zero()) {
        return Err(Error::Config("value iteration tolerance must be positive".into()));
    }
    let gamma = model.gamma();
    let stop = if gamma < F::one() {
        cfg.tol.min(cfg.tol * (F::one() - gamma) / (F::lit(2.0) * gamma))
    } else {
        cfg.tol
    };
    let ns = model.n_states();
    let na = model.n_joint_actions();
    let mut v = vec![F::zero(); ns];
    let mut next = vec![F::zero(); ns];
    let mut gap = F::infinity();
    for it in 1..=cfg.max_iterations {
        gap = F::zero();
        for s in 0..ns {
            let mut best = F::neg_infinity();
            for a in 0..na {
                let q = backup(model, &v, s, a);
                if q > best {
                    best = q;
                }
            }
            gap = gap.max((best - v[s]).abs());
            next[s] = best;
        }
        std::mem::swap(&mut v, &mut next);
        if gap <= stop {
            let policy = greedy(model, &v);
            return Ok(ValueSolution { values: v, policy, iterations: it, gap });
        }
    }
    Err(Error::NotConverged { iterations: cfg.max_iterations, gap: gap.as_f64() })
}

#[inline]
fn backup<F: Scalar>(model: &TaskModel<F>, v: &[F], s: usize, a: usize) -> F {
    let mut acc = F::zero();
    for (sp, p) in model.transition(s, a).iter() {
        acc += p * v[sp];
    }
    model.reward(s, a) + model.gamma() * acc
}

fn greedy<F: Scalar>(model: &TaskModel<F>, v: &[F]) -> Vec<usize> {
    (0..model.n_states())
        .map(|s| {
            let mut best = (0, F::neg_infinity());
            for a in 0..model.n_joint_actions() {
                let q = backup(model, v, s, a);
                if q > best.1 {
                    best = (a, q);
                }
            }
            best.0
        })
        .collect()
}

/// One-step lookahead values `Q(s, a)`, laid out as `s * |A| + a`.
pub fn q_values<F: Scalar>(model: &TaskModel<F>, v: &[F]) -> Vec<F> {
    let na = model.n_joint_actions();
    let mut q = Vec::with_capacity(model.n_states() * na);
    for s in 0..model.n_states() {
        for a in 0..na {
            q.push(backup(model, v, s, a));
        }
    }
    q
}

/// Splits a deterministic joint greedy policy into one table per member.
pub fn greedy_member_policies<F: Scalar>(
    model: &TaskModel<F>,
    policy: &[usize],
) -> Vec<ProbTable<F>> {
    (0..model.n_members())
        .map(|j| {
            let mut b = ProbTable::builder(model.n_actions(j));
            for &a in policy {
                b.push_one_hot(model.joint().component(a, j));
            }
            b.finish()
        })
        .collect()
}

/// Visits every joint action with non-zero probability under independent
/// member rows.
pub(crate) fn for_each_joint_action<F: Scalar>(
    model: &TaskModel<F>,
    rows: &[crate::table::Row<'_, F>],
    mut f: impl FnMut(usize, F),
) {
    fn rec<F: Scalar>(
        model: &TaskModel<F>,
        rows: &[crate::table::Row<'_, F>],
        j: usize,
        a: usize,
        p: F,
        f: &mut dyn FnMut(usize, F),
    ) {
        if j == rows.len() {
            f(a, p);
            return;
        }
        let stride = model.joint().stride(j);
        for (aj, pj) in rows[j].iter() {
            rec(model, rows, j + 1, a + aj * stride, p * pj, f);
        }
    }
    rec(model, rows, 0, 0, F::one(), &mut f);
}

/// Exact expected discounted return of independent member policies over a
/// finite horizon, by backward induction.
///
/// `policy[j]` has one row per state over member `j`'s actions.
pub fn evaluate_policy<F: Scalar>(
    model: &TaskModel<F>,
    policy: &[ProbTable<F>],
    start: &[F],
    horizon: usize,
) -> Result<F> {
    if policy.len() != model.n_members() {
        return Err(Error::Dimension(format!(
            "{} member policies for {} members",
            policy.len(),
            model.n_members()
        )));
    }
    for (j, p) in policy.iter().enumerate() {
        if p.n_rows() != model.n_states() || p.n_cols() != model.n_actions(j) {
            return Err(Error::Dimension(format!(
                "policy of member {j} is {}x{}, expected {}x{}",
                p.n_rows(),
                p.n_cols(),
                model.n_states(),
                model.n_actions(j)
            )));
        }
    }
    if start.len() != model.n_states() {
        return Err(Error::Dimension(format!(
            "start distribution has {} entries for {} states",
            start.len(),
            model.n_states()
        )));
    }
    let ns = model.n_states();
    let gamma = model.gamma();
    let mut v = vec![F::zero(); ns];
    let mut next = vec![F::zero(); ns];
    let mut rows = Vec::with_capacity(policy.len());
    for _ in 0..horizon {
        for s in 0..ns {
            rows.clear();
            rows.extend(policy.iter().map(|p| p.row(s)));
            let mut acc = F::zero();
            for_each_joint_action(model, &rows, |a, pa| {
                let mut cont = F::zero();
                for (sp, pt) in model.transition(s, a).iter() {
                    cont += pt * v[sp];
                }
                acc += pa * (model.reward(s, a) + gamma * cont);
            });
            next[s] = acc;
        }
        std::mem::swap(&mut v, &mut next);
    }
    Ok(start.iter().zip(&v).map(|(&p, &x)| p * x).sum())
}
