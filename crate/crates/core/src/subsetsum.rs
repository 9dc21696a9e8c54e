//! Cardinality-constrained subset-sum over reals.
//!
//! Pick exactly `k` of `n` values whose sum lies strictly inside
//! `(lower, upper)` and sits as close as possible to a bound `b` from one
//! side. Up to [`MITM_MAX`] values the search is exact (meet-in-the-middle);
//! beyond that a depth-first branch-and-bound runs under a node budget.

use crate::{Error, Result};

/// Largest `n` solved by meet-in-the-middle.
pub const MITM_MAX: usize = 30;
/// Largest `n` accepted by [`brute_force_subset`].
pub const BRUTE_FORCE_MAX: usize = 22;
pub const DEFAULT_NODE_BUDGET: u64 = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    /// Largest sum not exceeding the bound.
    MaxSumAtMost(f64),
    /// Smallest sum strictly above the bound.
    MinSumAbove(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubsetQuery {
    pub values: Vec<f64>,
    pub k: usize,
    pub lower: f64,
    pub upper: f64,
    pub target: Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubsetSolution {
    pub mask: Vec<bool>,
    pub sum: f64,
    /// False when the branch-and-bound budget ran out before proving optimality.
    pub exact: bool,
}

impl SubsetQuery {
    fn validate(&self) -> Result<()> {
        if self.k > self.values.len() {
            return Err(Error::Domain(format!(
                "subset size {} exceeds {} values",
                self.k,
                self.values.len()
            )));
        }
        if !(self.lower < self.upper) {
            return Err(Error::Domain(format!(
                "empty interval ({}, {})",
                self.lower, self.upper
            )));
        }
        let b = match self.target {
            Target::MaxSumAtMost(b) | Target::MinSumAbove(b) => b,
        };
        if !(b >= self.lower && b <= self.upper) {
            return Err(Error::Domain(format!(
                "bound {b} outside [{}, {}]",
                self.lower, self.upper
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite subset value".into()));
        }
        Ok(())
    }

    fn admits(&self, sum: f64) -> bool {
        sum > self.lower
            && sum < self.upper
            && match self.target {
                Target::MaxSumAtMost(b) => sum <= b,
                Target::MinSumAbove(b) => sum > b,
            }
    }

    /// Whether `(sum, key)` beats the incumbent. Keys order masks
    /// lexicographically (index 0 first, unselected before selected).
    fn improves(&self, sum: f64, key: u64, best: Option<(f64, u64)>) -> bool {
        match best {
            None => true,
            Some((bs, bk)) => {
                let closer = match self.target {
                    Target::MaxSumAtMost(_) => sum > bs,
                    Target::MinSumAbove(_) => sum < bs,
                };
                closer || (sum == bs && key < bk)
            }
        }
    }
}

fn lex_key(bits: u64) -> u64 {
    bits.reverse_bits()
}

fn mask_from_bits(bits: u64, n: usize) -> Vec<bool> {
    (0..n).map(|i| bits >> i & 1 == 1).collect()
}

/// Solves the query exactly for `n ≤ 30`, otherwise by budgeted branch-and-bound.
pub fn solve_subset(query: &SubsetQuery) -> Result<Option<SubsetSolution>> {
    solve_subset_with_budget(query, DEFAULT_NODE_BUDGET)
}

pub fn solve_subset_with_budget(query: &SubsetQuery, node_budget: u64) -> Result<Option<SubsetSolution>> {
    query.validate()?;
    if query.values.len() <= MITM_MAX {
        Ok(meet_in_the_middle(query))
    } else {
        Ok(branch_and_bound(query, node_budget))
    }
}

/// Subset sums of `values`, grouped by subset size; each entry is `(sum, bits)`.
fn half_sums(values: &[f64]) -> Vec<Vec<(f64, u64)>> {
    let n = values.len();
    let mut sums = vec![0.0f64; 1 << n];
    let mut groups = vec![Vec::new(); n + 1];
    groups[0].push((0.0, 0));
    for bits in 1usize..(1 << n) {
        let low = bits.trailing_zeros() as usize;
        sums[bits] = sums[bits & (bits - 1)] + values[low];
        groups[bits.count_ones() as usize].push((sums[bits], bits as u64));
    }
    groups
}

fn meet_in_the_middle(query: &SubsetQuery) -> Option<SubsetSolution> {
    let n = query.values.len();
    let split = n / 2;
    let left = half_sums(&query.values[..split]);
    let mut right = half_sums(&query.values[split..]);
    for group in &mut right {
        group.sort_by(|a, b| {
            a.0.total_cmp(&b.0)
                .then_with(|| lex_key(a.1 << split).cmp(&lex_key(b.1 << split)))
        });
    }

    let k = query.k;
    let mut best: Option<(f64, u64)> = None;
    let lo_j = k.saturating_sub(n - split);
    for j in lo_j..=k.min(split) {
        let rgroup = &right[k - j];
        if rgroup.is_empty() {
            continue;
        }
        for &(lsum, lbits) in &left[j] {
            let mut consider = |idx: usize| {
                let (rsum, rbits) = rgroup[idx];
                let sum = lsum + rsum;
                let bits = lbits | (rbits << split);
                if query.admits(sum) && query.improves(sum, lex_key(bits), best) {
                    best = Some((sum, lex_key(bits)));
                }
                sum
            };
            match query.target {
                Target::MaxSumAtMost(b) => {
                    let count =
                        rgroup.partition_point(|&(r, _)| lsum + r <= b && lsum + r < query.upper);
                    if count == 0 {
                        continue;
                    }
                    let top = consider(count - 1);
                    for idx in (0..count - 1).rev() {
                        if lsum + rgroup[idx].0 != top {
                            break;
                        }
                        consider(idx);
                    }
                }
                Target::MinSumAbove(b) => {
                    let first =
                        rgroup.partition_point(|&(r, _)| !(lsum + r > b && lsum + r > query.lower));
                    if first == rgroup.len() {
                        continue;
                    }
                    let bottom = consider(first);
                    for idx in first + 1..rgroup.len() {
                        if lsum + rgroup[idx].0 != bottom {
                            break;
                        }
                        consider(idx);
                    }
                }
            }
        }
    }
    best.map(|(sum, key)| SubsetSolution {
        mask: mask_from_bits(key.reverse_bits(), n),
        sum,
        exact: true,
    })
}

struct BranchState<'a> {
    query: &'a SubsetQuery,
    order: Vec<usize>,
    sorted: Vec<f64>,
    prefix: Vec<f64>,
    chosen: Vec<bool>,
    best: Option<(f64, Vec<bool>)>,
    nodes: u64,
    budget: u64,
}

impl BranchState<'_> {
    /// Sum of the `r` largest values among sorted positions `i..`.
    fn max_add(&self, i: usize, r: usize) -> f64 {
        self.prefix[i + r] - self.prefix[i]
    }

    /// Sum of the `r` smallest values among sorted positions `i..`.
    fn min_add(&self, r: usize) -> f64 {
        let n = self.sorted.len();
        self.prefix[n] - self.prefix[n - r]
    }

    fn search(&mut self, i: usize, picked: usize, sum: f64) -> bool {
        self.nodes += 1;
        if self.nodes > self.budget {
            return false;
        }
        let q = self.query;
        let n = self.sorted.len();
        let r = q.k - picked;
        if r == 0 {
            if q.admits(sum) {
                let better = match &self.best {
                    None => true,
                    Some((bs, _)) => match q.target {
                        Target::MaxSumAtMost(_) => sum > *bs,
                        Target::MinSumAbove(_) => sum < *bs,
                    },
                };
                if better {
                    let mut mask = vec![false; n];
                    for (pos, &c) in self.chosen.iter().enumerate() {
                        if c {
                            mask[self.order[pos]] = true;
                        }
                    }
                    self.best = Some((sum, mask));
                }
            }
            return true;
        }
        if n - i < r {
            return true;
        }
        let hi = sum + self.max_add(i, r);
        let lo = sum + self.min_add(r);
        let prune = match q.target {
            Target::MaxSumAtMost(b) => {
                hi <= q.lower
                    || lo > b
                    || lo >= q.upper
                    || self.best.as_ref().is_some_and(|(bs, _)| hi.min(b) <= *bs)
            }
            Target::MinSumAbove(b) => {
                hi <= b
                    || hi <= q.lower
                    || lo >= q.upper
                    || self.best.as_ref().is_some_and(|(bs, _)| lo.max(b) >= *bs)
            }
        };
        if prune {
            return true;
        }
        self.chosen[i] = true;
        let ok = self.search(i + 1, picked + 1, sum + self.sorted[i]);
        self.chosen[i] = false;
        ok && self.search(i + 1, picked, sum)
    }
}

fn branch_and_bound(query: &SubsetQuery, budget: u64) -> Option<SubsetSolution> {
    let n = query.values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| query.values[b].total_cmp(&query.values[a]).then(a.cmp(&b)));
    let sorted: Vec<f64> = order.iter().map(|&i| query.values[i]).collect();
    let mut prefix = vec![0.0; n + 1];
    for (i, v) in sorted.iter().enumerate() {
        prefix[i + 1] = prefix[i] + v;
    }
    let mut state = BranchState {
        query,
        order,
        sorted,
        prefix,
        chosen: vec![false; n],
        best: None,
        nodes: 0,
        budget,
    };
    let exact = state.search(0, 0, 0.0);
    state.best.map(|(sum, mask)| SubsetSolution { mask, sum, exact })
}

/// Full enumeration of all `C(n, k)` subsets; the test oracle for [`solve_subset`].
pub fn brute_force_subset(query: &SubsetQuery) -> Result<Option<SubsetSolution>> {
    query.validate()?;
    let n = query.values.len();
    if n > BRUTE_FORCE_MAX {
        return Err(Error::Domain(format!(
            "brute force refuses n = {n} > {BRUTE_FORCE_MAX}"
        )));
    }
    let k = query.k;
    let mut best: Option<(f64, u64)> = None;
    let mut visit = |bits: u64| {
        let sum: f64 = (0..n)
            .filter(|i| bits >> i & 1 == 1)
            .map(|i| query.values[i])
            .sum();
        if query.admits(sum) && query.improves(sum, lex_key(bits), best) {
            best = Some((sum, lex_key(bits)));
        }
    };
    if k == 0 {
        visit(0);
    } else {
        // Gosper's hack walks every n-bit word with exactly k ones.
        let mut bits: u64 = (1 << k) - 1;
        while bits < (1 << n) {
            visit(bits);
            let c = bits & bits.wrapping_neg();
            let r = bits + c;
            bits = (((r ^ bits) >> 2) / c) | r;
        }
    }
    Ok(best.map(|(sum, key)| SubsetSolution {
        mask: mask_from_bits(key.reverse_bits(), n),
        sum,
        exact: true,
    }))
}
