//! Sparse conditional-probability tables with row interning.
//!
//! Many rows of the tables used here are identical (deterministic successor
//! rules, uniform prior rows of a learned model), so each logical row points
//! at a slot in a shared pool of distinct sparse rows.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Borrowed view of one sparse row.
#[derive(Clone, Copy, Debug)]
pub struct Row<'a, F> {
    pub cols: &'a [u32],
    pub probs: &'a [F],
}

impl<'a, F: Scalar> Row<'a, F> {
    pub fn len(&self) -> usize {
        self.cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cols.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, F)> + 'a {
        let probs = self.probs;
        self.cols
            .iter()
            .zip(probs.iter())
            .map(|(&c, &p)| (c as usize, p))
    }

    pub fn get(&self, col: usize) -> F {
        match self.cols.binary_search(&(col as u32)) {
            Ok(i) => self.probs[i],
            Err(_) => F::zero(),
        }
    }

    pub fn sum(&self) -> F {
        self.probs.iter().copied().sum()
    }

    /// Index of the largest entry; ties go to the lowest column.
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<(usize, F)> = None;
        for (c, p) in self.iter() {
            match best {
                Some((_, bp)) if p <= bp => {}
                _ => best = Some((c, p)),
            }
        }
        best.map(|(c, _)| c)
    }

    /// Inverse-CDF sample from a uniform draw in `[0, 1)`.
    pub fn sample(&self, u: f64) -> Option<usize> {
        let total = self.sum().as_f64();
        if self.is_empty() || total <= 0.0 {
            return None;
        }
        let target = u * total;
        let mut acc = 0.0;
        let mut last = None;
        for (c, p) in self.iter() {
            let p = p.as_f64();
            if p <= 0.0 {
                continue;
            }
            acc += p;
            last = Some(c);
            if target < acc {
                return Some(c);
            }
        }
        last
    }

    pub fn to_dense(&self, n_cols: usize) -> Vec<F> {
        let mut out = vec![F::zero(); n_cols];
        for (c, p) in self.iter() {
            out[c] = p;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbTable<F> {
    n_cols: usize,
    slots: Vec<u32>,
    offsets: Vec<u32>,
    cols: Vec<u32>,
    probs: Vec<F>,
}

impl<F: Scalar> ProbTable<F> {
    pub fn builder(n_cols: usize) -> ProbTableBuilder<F> {
        ProbTableBuilder::new(n_cols)
    }

    /// Table in which every row is the same distribution.
    pub fn constant(n_rows: usize, n_cols: usize, row: &[(usize, F)]) -> Self {
        let mut b = Self::builder(n_cols);
        let slot = b.intern(row.iter().copied());
        b.push_slot_repeat(slot, n_rows);
        b.finish()
    }

    pub fn uniform(n_rows: usize, n_cols: usize) -> Self {
        let p = F::one() / F::lit(n_cols as f64);
        let row: Vec<(usize, F)> = (0..n_cols).map(|c| (c, p)).collect();
        Self::constant(n_rows, n_cols, &row)
    }

    pub fn from_dense_rows(n_cols: usize, rows: &[Vec<F>]) -> Self {
        let mut b = Self::builder(n_cols);
        for r in rows {
            b.push_dense(r);
        }
        b.finish()
    }

    pub fn n_rows(&self) -> usize {
        self.slots.len()
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    /// Number of distinct stored rows.
    pub fn n_distinct(&self) -> usize {
        self.offsets.len() - 1
    }

    #[inline]
    pub fn row(&self, r: usize) -> Row<'_, F> {
        self.slot_row(self.slots[r] as usize)
    }

    #[inline]
    fn slot_row(&self, slot: usize) -> Row<'_, F> {
        let lo = self.offsets[slot] as usize;
        let hi = self.offsets[slot + 1] as usize;
        Row {
            cols: &self.cols[lo..hi],
            probs: &self.probs[lo..hi],
        }
    }

    pub fn slot_of(&self, r: usize) -> usize {
        self.slots[r] as usize
    }

    #[inline]
    pub fn prob(&self, r: usize, c: usize) -> F {
        self.row(r).get(c)
    }

    /// Mean number of stored entries per logical row.
    pub fn mean_nnz(&self) -> f64 {
        if self.slots.is_empty() {
            return 0.0;
        }
        let total: usize = self
            .slots
            .iter()
            .map(|&s| (self.offsets[s as usize + 1] - self.offsets[s as usize]) as usize)
            .sum();
        total as f64 / self.slots.len() as f64
    }

    /// Rows that are not distributions: `(row, sum)` for bad sums, plus rows
    /// with entries outside `[0, 1]` or column indices out of range.
    pub fn row_violations(&self, tol: F) -> Vec<RowViolation> {
        let n_slots = self.n_distinct();
        let mut slot_problem: Vec<Option<RowProblem>> = Vec::with_capacity(n_slots);
        for slot in 0..n_slots {
            let row = self.slot_row(slot);
            let mut problem = None;
            for (c, p) in row.iter() {
                if c >= self.n_cols {
                    problem = Some(RowProblem::ColumnOutOfRange(c));
                    break;
                }
                if !(p >= F::zero() && p <= F::one() + tol) {
                    problem = Some(RowProblem::ProbabilityOutOfRange(p.as_f64()));
                    break;
                }
            }
            if problem.is_none() {
                let s = row.sum();
                if (s - F::one()).abs() > tol {
                    problem = Some(RowProblem::BadSum(s.as_f64()));
                }
            }
            slot_problem.push(problem);
        }
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(r, &s)| {
                slot_problem[s as usize].map(|problem| RowViolation { row: r, problem })
            })
            .collect()
    }

    /// Converts the stored probabilities into another scalar type.
    pub fn cast<G: Scalar>(&self) -> ProbTable<G> {
        ProbTable {
            n_cols: self.n_cols,
            slots: self.slots.clone(),
            offsets: self.offsets.clone(),
            cols: self.cols.clone(),
            probs: self.probs.iter().map(|p| G::lit(p.as_f64())).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RowProblem {
    BadSum(f64),
    ProbabilityOutOfRange(f64),
    ColumnOutOfRange(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RowViolation {
    pub row: usize,
    pub problem: RowProblem,
}

impl std::fmt::Display for RowProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RowProblem::BadSum(s) => write!(f, "sums to {s}"),
            RowProblem::ProbabilityOutOfRange(p) => write!(f, "has probability {p} outside [0, 1]"),
            RowProblem::ColumnOutOfRange(c) => write!(f, "references column {c} out of range"),
        }
    }
}

pub struct ProbTableBuilder<F> {
    n_cols: usize,
    slots: Vec<u32>,
    offsets: Vec<u32>,
    cols: Vec<u32>,
    probs: Vec<F>,
    pool: HashMap<Vec<(u32, u64)>, u32>,
    scratch: Vec<(u32, F)>,
    key: Vec<(u32, u64)>,
}

impl<F: Scalar> ProbTableBuilder<F> {
    pub fn new(n_cols: usize) -> Self {
        Self {
            n_cols,
            slots: Vec::new(),
            offsets: vec![0],
            cols: Vec::new(),
            probs: Vec::new(),
            pool: HashMap::new(),
            scratch: Vec::new(),
            key: Vec::new(),
        }
    }

    pub fn with_capacity(n_cols: usize, rows: usize) -> Self {
        let mut b = Self::new(n_cols);
        b.slots.reserve(rows);
        b
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Stores a row in the pool (or finds its twin) without appending it.
    /// Exact zeros are dropped and duplicate columns are merged.
    pub fn intern(&mut self, entries: impl IntoIterator<Item = (usize, F)>) -> u32 {
        self.scratch.clear();
        self.scratch
            .extend(entries.into_iter().filter(|(_, p)| *p != F::zero()).map(|(c, p)| (c as u32, p)));
        self.scratch.sort_by_key(|e| e.0);
        let mut w = 0;
        for i in 0..self.scratch.len() {
            if w > 0 && self.scratch[w - 1].0 == self.scratch[i].0 {
                let p = self.scratch[i].1;
                self.scratch[w - 1].1 += p;
            } else {
                self.scratch[w] = self.scratch[i];
                w += 1;
            }
        }
        self.scratch.truncate(w);
        self.key.clear();
        self.key.extend(self.scratch.iter().map(|&(c, p)| (c, p.bits())));
        if let Some(&slot) = self.pool.get(self.key.as_slice()) {
            return slot;
        }
        let slot = (self.offsets.len() - 1) as u32;
        for &(c, p) in &self.scratch {
            self.cols.push(c);
            self.probs.push(p);
        }
        self.offsets.push(self.cols.len() as u32);
        self.pool.insert(self.key.clone(), slot);
        slot
    }

    pub fn push_row(&mut self, entries: impl IntoIterator<Item = (usize, F)>) {
        let slot = self.intern(entries);
        self.slots.push(slot);
    }

    pub fn push_dense(&mut self, row: &[F]) {
        self.push_row(row.iter().copied().enumerate());
    }

    pub fn push_one_hot(&mut self, col: usize) {
        self.push_row(std::iter::once((col, F::one())));
    }

    pub fn push_slot(&mut self, slot: u32) {
        self.slots.push(slot);
    }

    pub fn push_slot_repeat(&mut self, slot: u32, count: usize) {
        self.slots.extend(std::iter::repeat(slot).take(count));
    }

    pub fn finish(self) -> ProbTable<F> {
        ProbTable {
            n_cols: self.n_cols,
            slots: self.slots,
            offsets: self.offsets,
            cols: self.cols,
            probs: self.probs,
        }
    }
}

/// On-disk layout: the pool of distinct rows plus run-length encoded row-to-slot
/// assignments.
#[derive(Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct ProbTableRepr<F> {
    pub n_rows: usize,
    pub n_cols: usize,
    pub rows: Vec<Vec<(u32, F)>>,
    pub slot_runs: Vec<(u32, u32)>,
}

impl<F: Scalar> From<&ProbTable<F>> for ProbTableRepr<F> {
    fn from(t: &ProbTable<F>) -> Self {
        let rows = (0..t.n_distinct())
            .map(|s| {
                let r = t.slot_row(s);
                r.cols.iter().copied().zip(r.probs.iter().copied()).collect()
            })
            .collect();
        let mut slot_runs: Vec<(u32, u32)> = Vec::new();
        for &s in &t.slots {
            match slot_runs.last_mut() {
                Some((last, n)) if *last == s => *n += 1,
                _ => slot_runs.push((s, 1)),
            }
        }
        ProbTableRepr {
            n_rows: t.n_rows(),
            n_cols: t.n_cols,
            rows,
            slot_runs,
        }
    }
}

impl<F: Scalar> TryFrom<ProbTableRepr<F>> for ProbTable<F> {
    type Error = Error;

    fn try_from(r: ProbTableRepr<F>) -> Result<Self> {
        let mut offsets = Vec::with_capacity(r.rows.len() + 1);
        offsets.push(0u32);
        let mut cols = Vec::new();
        let mut probs = Vec::new();
        for row in &r.rows {
            for &(c, p) in row {
                if c as usize >= r.n_cols {
                    return Err(Error::Dimension(format!(
                        "column {c} out of range for table with {} columns",
                        r.n_cols
                    )));
                }
                cols.push(c);
                probs.push(p);
            }
            offsets.push(cols.len() as u32);
        }
        let mut slots = Vec::with_capacity(r.n_rows);
        for &(s, n) in &r.slot_runs {
            if s as usize >= r.rows.len() {
                return Err(Error::Dimension(format!("slot {s} out of range")));
            }
            slots.extend(std::iter::repeat(s).take(n as usize));
        }
        if slots.len() != r.n_rows {
            return Err(Error::Dimension(format!(
                "slot runs cover {} rows, header says {}",
                slots.len(),
                r.n_rows
            )));
        }
        Ok(ProbTable {
            n_cols: r.n_cols,
            slots,
            offsets,
            cols,
            probs,
        })
    }
}

impl<F: Scalar> Serialize for ProbTable<F> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ProbTableRepr::from(self).serialize(s)
    }
}

impl<'de, F: Scalar> Deserialize<'de> for ProbTable<F> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = ProbTableRepr::<F>::deserialize(d)?;
        ProbTable::try_from(repr).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identical_rows_share_a_slot() {
        let mut b = ProbTable::<f64>::builder(3);
        b.push_row([(0, 0.5), (2, 0.5)]);
        b.push_row([(2, 0.5), (0, 0.5)]);
        b.push_one_hot(1);
        let t = b.finish();
        assert_eq!(t.n_rows(), 3);
        assert_eq!(t.n_distinct(), 2);
        assert_eq!(t.slot_of(0), t.slot_of(1));
        assert_eq!(t.prob(2, 1), 1.0);
        assert_eq!(t.prob(2, 0), 0.0);
    }

    #[test]
    fn zeros_dropped_and_duplicates_merged() {
        let mut b = ProbTable::<f64>::builder(4);
        b.push_row([(3, 0.25), (1, 0.0), (3, 0.25), (0, 0.5)]);
        let t = b.finish();
        let r = t.row(0);
        assert_eq!(r.cols, &[0, 3]);
        assert_eq!(r.probs, &[0.5, 0.5]);
    }

    #[test]
    fn violations_report_every_row_of_a_bad_slot() {
        let mut b = ProbTable::<f64>::builder(2);
        b.push_row([(0, 0.9)]);
        b.push_row([(0, 1.0)]);
        b.push_row([(0, 0.9)]);
        let t = b.finish();
        let v = t.row_violations(1e-9);
        assert_eq!(v.len(), 2);
        assert_eq!(v[0].row, 0);
        assert_eq!(v[1].row, 2);
        assert!(matches!(v[0].problem, RowProblem::BadSum(s) if (s - 0.9).abs() < 1e-12));
    }

    #[test]
    fn argmax_prefers_lowest_column_on_ties() {
        let t = ProbTable::<f64>::from_dense_rows(3, &[vec![0.4, 0.2, 0.4]]);
        assert_eq!(t.row(0).argmax(), Some(0));
    }

    #[test]
    fn sampling_follows_cumulative_mass() {
        let t = ProbTable::<f64>::from_dense_rows(3, &[vec![0.2, 0.0, 0.8]]);
        assert_eq!(t.row(0).sample(0.0), Some(0));
        assert_eq!(t.row(0).sample(0.19), Some(0));
        assert_eq!(t.row(0).sample(0.2), Some(2));
        assert_eq!(t.row(0).sample(0.999_999), Some(2));
    }

    proptest! {
        #[test]
        fn json_round_trip_is_exact(rows in proptest::collection::vec(
            proptest::collection::vec(0.0f64..1.0, 4), 1..30)) {
            let rows: Vec<Vec<f64>> = rows.into_iter().map(|r| {
                let s: f64 = r.iter().sum::<f64>() + 1e-3;
                r.into_iter().map(|x| x / s).collect()
            }).collect();
            let t = ProbTable::from_dense_rows(4, &rows);
            let json = serde_json::to_string(&t).unwrap();
            let back: ProbTable<f64> = serde_json::from_str(&json).unwrap();
            prop_assert_eq!(t, back);
        }
    }
}
