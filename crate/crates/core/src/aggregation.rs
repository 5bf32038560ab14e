//! Subset sums over per-block summaries.
//!
//! The forward pass needs `H_i = Σ_{j marginal in row i} h_j` (and `Z_i`
//! likewise); the backward pass needs the same kind of sum over block-rows
//! for each block-column. Three interchangeable strategies are provided:
//!
//! * direct: walk the member list and add.
//! * complement: start from the precomputed total and subtract non-members.
//! * Four Russians: split the items into groups of `g` consecutive blocks,
//!   precompute all `2^g` subset sums per group, then one lookup per group.
//!
//! Results agree up to floating-point reassociation.
//!
//! # Operation counting
//!
//! [`OpCounter`] counts block operations, where one operation is a `d x d`
//! matrix add (or subtract) together with its length-`d` vector add.
//! Accumulators start from zero (or from the total, for complement), so
//! direct costs one addition per member, complement one subtraction per
//! non-member, and Four Russians one addition per group with a non-empty
//! sub-mask. Building a group table of `s` items costs `2^s - 1` operations.

use serde::Serialize;

use crate::config::{AggregationStrategy, AutoThresholds, MAX_GROUP_SIZE};
use crate::error::{Result, SlaError};
use crate::tensor::{Real, Tensor};

/// Block operations performed by an aggregation strategy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct OpCounter {
    pub additions: u64,
    pub subtractions: u64,
    pub table_build: u64,
    pub lookups: u64,
}

impl OpCounter {
    /// Additions and subtractions, including table construction.
    pub fn total(&self) -> u64 {
        self.additions + self.subtractions + self.table_build
    }

    pub fn merge(&mut self, other: &OpCounter) {
        self.additions += other.additions;
        self.subtractions += other.subtractions;
        self.table_build += other.table_build;
        self.lookups += other.lookups;
    }
}

/// A sequence of `(d x d matrix, length-d vector)` items with their totals.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockSums<T> {
    pub mats: Vec<Tensor<T>>,
    pub vecs: Vec<Vec<T>>,
    pub mat_total: Tensor<T>,
    pub vec_total: Vec<T>,
}

impl<T: Real> BlockSums<T> {
    pub fn new(mats: Vec<Tensor<T>>, vecs: Vec<Vec<T>>) -> Result<Self> {
        let first = mats
            .first()
            .ok_or_else(|| SlaError::Shape("BlockSums needs at least one item".into()))?;
        let shape = first.shape();
        let width = vecs.first().map_or(0, Vec::len);
        if mats.len() != vecs.len()
            || mats.iter().any(|m| m.shape() != shape)
            || vecs.iter().any(|v| v.len() != width)
        {
            return Err(SlaError::Shape("inconsistent BlockSums items".into()));
        }
        let mut mat_total = Tensor::zeros(shape.0, shape.1);
        let mut vec_total = vec![T::zero(); width];
        for (m, v) in mats.iter().zip(&vecs) {
            mat_total.add_assign(m)?;
            add_vec(&mut vec_total, v);
        }
        Ok(BlockSums {
            mats,
            vecs,
            mat_total,
            vec_total,
        })
    }

    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    fn zero_pair(&self) -> (Tensor<T>, Vec<T>) {
        let (r, c) = self.mat_total.shape();
        (Tensor::zeros(r, c), vec![T::zero(); self.vec_total.len()])
    }
}

fn add_vec<T: Real>(acc: &mut [T], v: &[T]) {
    for (a, &b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

fn sub_vec<T: Real>(acc: &mut [T], v: &[T]) {
    for (a, &b) in acc.iter_mut().zip(v) {
        *a -= b;
    }
}

/// Sum of the listed items, ascending order.
pub fn aggregate_direct<T: Real>(
    sums: &BlockSums<T>,
    idx: &[usize],
    counter: &mut OpCounter,
) -> (Tensor<T>, Vec<T>) {
    let (mut h, mut z) = sums.zero_pair();
    for &j in idx {
        h.add_assign(&sums.mats[j]).expect("uniform item shapes");
        add_vec(&mut z, &sums.vecs[j]);
        counter.additions += 1;
    }
    (h, z)
}

/// Total minus the listed (complement) items. `complement_idx` must be
/// distinct; when it lists every item the result is exactly zero rather
/// than the rounding residue of the subtraction.
pub fn aggregate_complement<T: Real>(
    sums: &BlockSums<T>,
    complement_idx: &[usize],
    counter: &mut OpCounter,
) -> (Tensor<T>, Vec<T>) {
    if complement_idx.len() == sums.len() {
        counter.subtractions += complement_idx.len() as u64;
        return sums.zero_pair();
    }
    let mut h = sums.mat_total.clone();
    let mut z = sums.vec_total.clone();
    for &j in complement_idx {
        h.sub_assign(&sums.mats[j]).expect("uniform item shapes");
        sub_vec(&mut z, &sums.vecs[j]);
        counter.subtractions += 1;
    }
    (h, z)
}

/// Zeroes the coordinates of an aggregated `(H, Z)` pair that cancelled to
/// within rounding.
///
/// Only valid when every vector item is non-negative, as the feature-map
/// sums `z_j` are. Then `|H[a, :]| ≤ Z[a] max|V|`, so a coordinate `Z[a]`
/// that is zero up to rounding (relu can zero a coordinate across whole
/// blocks) takes its row of `H` with it. Complement sums and Gray-code
/// tables subtract, leaving residues of order `T_n ε` times the totals,
/// which a small denominator would otherwise amplify. Direct sums only add
/// and are left alone.
pub fn clear_cancelled<T: Real>(
    strategy: AggregationStrategy,
    sums: &BlockSums<T>,
    h: &mut Tensor<T>,
    z: &mut [T],
) {
    if strategy == AggregationStrategy::Direct {
        return;
    }
    let rel = T::lit(2.0 * (sums.len() + 1) as f64) * T::epsilon();
    for (a, (za, &total)) in z.iter_mut().zip(&sums.vec_total).enumerate() {
        if za.abs() <= rel * total.abs() {
            *za = T::zero();
            h.row_mut(a).fill(T::zero());
        }
    }
}

#[derive(Clone, Debug)]
struct GroupTable<T> {
    start: usize,
    size: usize,
    mats: Vec<Tensor<T>>,
    vecs: Vec<Vec<T>>,
}

/// All `2^g` subset sums of each group of `g` consecutive items.
///
/// Entry `m` of a group table holds the sum of items `start + b` for every
/// bit `b` set in `m`. The last group may be smaller than `g`.
#[derive(Clone, Debug)]
pub struct FourRussiansTables<T> {
    g: usize,
    n_items: usize,
    groups: Vec<GroupTable<T>>,
}

impl<T: Real> FourRussiansTables<T> {
    pub fn group_size(&self) -> usize {
        self.g
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    /// Table entry `mask` of group `group`.
    pub fn entry(&self, group: usize, mask: usize) -> (&Tensor<T>, &[T]) {
        let t = &self.groups[group];
        (&t.mats[mask], &t.vecs[mask])
    }
}

/// Builds every group table in Gray-code order, so each entry is the
/// previous entry plus or minus a single item.
pub fn build_four_russians_tables<T: Real>(
    sums: &BlockSums<T>,
    g: usize,
    counter: &mut OpCounter,
) -> Result<FourRussiansTables<T>> {
    if g == 0 || g > MAX_GROUP_SIZE {
        return Err(SlaError::Config(format!(
            "group size g={g} outside [1, {MAX_GROUP_SIZE}]"
        )));
    }
    let (zero_m, zero_v) = sums.zero_pair();
    let mut groups = Vec::with_capacity(sums.len().div_ceil(g));
    for start in (0..sums.len()).step_by(g) {
        let size = g.min(sums.len() - start);
        let entries = 1usize << size;
        let mut mats = vec![zero_m.clone(); entries];
        let mut vecs = vec![zero_v.clone(); entries];
        let mut prev = 0usize;
        for k in 1..entries {
            let gray = k ^ (k >> 1);
            let bit = k.trailing_zeros() as usize;
            let item = start + bit;
            let mut m = mats[prev].clone();
            let mut v = vecs[prev].clone();
            if gray & (1 << bit) != 0 {
                m.add_assign(&sums.mats[item])?;
                add_vec(&mut v, &sums.vecs[item]);
            } else {
                m.sub_assign(&sums.mats[item])?;
                sub_vec(&mut v, &sums.vecs[item]);
            }
            mats[gray] = m;
            vecs[gray] = v;
            prev = gray;
        }
        counter.table_build += (entries - 1) as u64;
        groups.push(GroupTable {
            start,
            size,
            mats,
            vecs,
        });
    }
    Ok(FourRussiansTables {
        g,
        n_items: sums.len(),
        groups,
    })
}

/// One lookup per group; groups with an empty sub-mask are skipped.
pub fn aggregate_four_russians<T: Real>(
    tables: &FourRussiansTables<T>,
    members: &[bool],
    counter: &mut OpCounter,
) -> Result<(Tensor<T>, Vec<T>)> {
    if members.len() != tables.n_items {
        return Err(SlaError::Shape(format!(
            "bitmask of length {} for {} items",
            members.len(),
            tables.n_items
        )));
    }
    let first = &tables.groups[0];
    let (r, c) = first.mats[0].shape();
    let mut h = Tensor::zeros(r, c);
    let mut z = vec![T::zero(); first.vecs[0].len()];
    for table in &tables.groups {
        let sub = group_submask(members, table.start, table.size);
        counter.lookups += 1;
        if sub == 0 {
            continue;
        }
        h.add_assign(&table.mats[sub])?;
        add_vec(&mut z, &table.vecs[sub]);
        counter.additions += 1;
    }
    Ok((h, z))
}

fn group_submask(members: &[bool], start: usize, size: usize) -> usize {
    members[start..start + size]
        .iter()
        .enumerate()
        .fold(0, |acc, (b, &on)| if on { acc | (1 << b) } else { acc })
}

/// Resolves `Auto` against the overall member fraction.
pub fn resolve_strategy(
    strategy: AggregationStrategy,
    auto: &AutoThresholds,
    member_fraction: f64,
) -> AggregationStrategy {
    match strategy {
        AggregationStrategy::Auto => auto.resolve(member_fraction),
        s => s,
    }
}

/// A strategy bound to its item set, with any tables prebuilt.
pub enum Aggregator<'a, T> {
    Direct(&'a BlockSums<T>),
    Complement(&'a BlockSums<T>),
    FourRussians(FourRussiansTables<T>),
}

impl<'a, T: Real> Aggregator<'a, T> {
    /// `strategy` must already be resolved (not `Auto`).
    pub fn prepare(
        strategy: AggregationStrategy,
        sums: &'a BlockSums<T>,
        g: usize,
        counter: &mut OpCounter,
    ) -> Result<Self> {
        Ok(match strategy {
            AggregationStrategy::Direct => Aggregator::Direct(sums),
            AggregationStrategy::Complement => Aggregator::Complement(sums),
            AggregationStrategy::FourRussians => {
                Aggregator::FourRussians(build_four_russians_tables(sums, g, counter)?)
            }
            AggregationStrategy::Auto => {
                return Err(SlaError::Config("unresolved Auto aggregation strategy".into()))
            }
        })
    }

    pub fn strategy(&self) -> AggregationStrategy {
        match self {
            Aggregator::Direct(_) => AggregationStrategy::Direct,
            Aggregator::Complement(_) => AggregationStrategy::Complement,
            Aggregator::FourRussians(_) => AggregationStrategy::FourRussians,
        }
    }

    /// Sum over the items flagged in `members`.
    pub fn aggregate(&self, members: &[bool], counter: &mut OpCounter) -> Result<(Tensor<T>, Vec<T>)> {
        match self {
            Aggregator::Direct(sums) => {
                let idx: Vec<usize> = (0..members.len()).filter(|&j| members[j]).collect();
                Ok(aggregate_direct(sums, &idx, counter))
            }
            Aggregator::Complement(sums) => {
                let idx: Vec<usize> = (0..members.len()).filter(|&j| !members[j]).collect();
                Ok(aggregate_complement(sums, &idx, counter))
            }
            Aggregator::FourRussians(tables) => aggregate_four_russians(tables, members, counter),
        }
    }
}

/// Operation counts a strategy would incur over the given member rows,
/// without touching any data. Mirrors the counting of the real kernels.
pub fn count_operations<'m>(
    strategy: AggregationStrategy,
    g: usize,
    n_items: usize,
    rows: impl IntoIterator<Item = &'m [bool]>,
) -> OpCounter {
    let mut counter = OpCounter::default();
    if strategy == AggregationStrategy::FourRussians {
        for start in (0..n_items).step_by(g) {
            let size = g.min(n_items - start);
            counter.table_build += (1u64 << size) - 1;
        }
    }
    for members in rows {
        let on = members.iter().filter(|&&b| b).count() as u64;
        match strategy {
            AggregationStrategy::Direct => counter.additions += on,
            AggregationStrategy::Complement => counter.subtractions += n_items as u64 - on,
            AggregationStrategy::FourRussians => {
                for start in (0..n_items).step_by(g) {
                    let size = g.min(n_items - start);
                    counter.lookups += 1;
                    if group_submask(members, start, size) != 0 {
                        counter.additions += 1;
                    }
                }
            }
            AggregationStrategy::Auto => {}
        }
    }
    counter
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_tensor, SplitMix64};

    fn random_sums(rng: &mut SplitMix64, n: usize, d: usize) -> BlockSums<f64> {
        let mats = (0..n).map(|_| gaussian_tensor(rng, d, d, 1.0)).collect();
        let vecs = (0..n).map(|_| (0..d).map(|_| rng.next_f64()).collect()).collect();
        BlockSums::new(mats, vecs).unwrap()
    }

    fn scalar_sums(values: &[f64]) -> BlockSums<f64> {
        BlockSums::new(
            values.iter().map(|&v| Tensor::from_vec(1, 1, vec![v]).unwrap()).collect(),
            values.iter().map(|&v| vec![v]).collect(),
        )
        .unwrap()
    }

    fn naive(sums: &BlockSums<f64>, members: &[bool]) -> (Tensor<f64>, Vec<f64>) {
        let (r, c) = sums.mat_total.shape();
        let mut h = Tensor::zeros(r, c);
        let mut z = vec![0.0; sums.vec_total.len()];
        for (j, _) in members.iter().enumerate().filter(|(_, &b)| b) {
            for x in 0..r {
                for y in 0..c {
                    h.set(x, y, h.get(x, y) + sums.mats[j].get(x, y));
                }
            }
            for (a, b) in z.iter_mut().zip(&sums.vecs[j]) {
                *a += b;
            }
        }
        (h, z)
    }

    fn vec_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn direct_edge_cases() {
        let mut rng = SplitMix64::new(1);
        let sums = random_sums(&mut rng, 6, 3);
        let mut c = OpCounter::default();
        let (h, z) = aggregate_direct(&sums, &[], &mut c);
        assert_eq!(h.max_abs(), 0.0);
        assert!(z.iter().all(|&v| v == 0.0));
        let (h, z) = aggregate_direct(&sums, &[0, 1, 2, 3, 4, 5], &mut c);
        assert_eq!(h, sums.mat_total);
        assert_eq!(z, sums.vec_total);
        assert_eq!(c.additions, 6);
    }

    #[test]
    fn complement_edge_cases() {
        let mut rng = SplitMix64::new(2);
        let sums = random_sums(&mut rng, 5, 2);
        let mut c = OpCounter::default();
        let (h, z) = aggregate_complement(&sums, &[], &mut c);
        assert_eq!((h, z), (sums.mat_total.clone(), sums.vec_total.clone()));
        let (h, z) = aggregate_complement(&sums, &[0, 1, 2, 3, 4], &mut c);
        assert_eq!(h.max_abs(), 0.0);
        assert!(z.iter().all(|&v| v == 0.0));
        assert_eq!(c.subtractions, 5);
    }

    #[test]
    fn cancelled_coordinates_are_cleared() {
        // coordinate 1 is zero in the kept item, as relu produces
        let mats = vec![
            Tensor::from_rows(&[&[0.5, 0.25], &[0.0, 0.0]]).unwrap(),
            Tensor::from_rows(&[&[0.3, 0.7], &[0.1, 1.3]]).unwrap(),
            Tensor::from_rows(&[&[0.9, 0.4], &[0.2, 0.6]]).unwrap(),
        ];
        let vecs: Vec<Vec<f64>> = vec![vec![0.5, 0.0], vec![0.25, 0.1], vec![0.75, 0.2]];
        let sums = BlockSums::new(mats, vecs).unwrap();
        let mut c = OpCounter::default();
        let (mut h, mut z) = aggregate_complement(&sums, &[1, 2], &mut c);
        assert_ne!(z[1], 0.0, "expected a rounding residue");
        clear_cancelled(AggregationStrategy::Complement, &sums, &mut h, &mut z);
        assert_eq!(z, [0.5, 0.0]);
        assert_eq!(h.row(1), &[0.0, 0.0]);
        assert!((h.get(0, 1) - 0.25).abs() < 1e-15);

        let (mut h, mut z) = aggregate_direct(&sums, &[0], &mut c);
        let before = (h.clone(), z.clone());
        clear_cancelled(AggregationStrategy::Direct, &sums, &mut h, &mut z);
        assert_eq!((h, z), before);
    }

    #[test]
    fn strategies_match_naive_sum() {
        for seed in 0..50u64 {
            let mut rng = SplitMix64::new(seed);
            let n = 1 + rng.next_below(20);
            let sums = random_sums(&mut rng, n, 3);
            let members: Vec<bool> = (0..n).map(|_| rng.next_f64() < 0.5).collect();
            let (eh, ez) = naive(&sums, &members);
            for strategy in [
                AggregationStrategy::Direct,
                AggregationStrategy::Complement,
                AggregationStrategy::FourRussians,
            ] {
                let mut c = OpCounter::default();
                let agg = Aggregator::prepare(strategy, &sums, 1 + (seed as usize % 5), &mut c).unwrap();
                let (h, z) = agg.aggregate(&members, &mut c).unwrap();
                let tol = if strategy == AggregationStrategy::Direct { 1e-12 } else { 1e-10 };
                assert!(crate::tensor::max_rel_error(&h, &eh) <= tol, "{strategy:?} seed {seed}");
                assert!(vec_err(&z, &ez) <= tol * 10.0);
            }
        }
    }

    #[test]
    fn tables_small_groups() {
        let sums = scalar_sums(&[3.0, 5.0, 7.0]);
        let mut c = OpCounter::default();
        let t1 = build_four_russians_tables(&sums, 1, &mut c).unwrap();
        assert_eq!(t1.n_groups(), 3);
        for j in 0..3 {
            assert_eq!(t1.entry(j, 0).0.get(0, 0), 0.0);
            assert_eq!(t1.entry(j, 1).0.get(0, 0), [3.0, 5.0, 7.0][j]);
        }
        let t2 = build_four_russians_tables(&sums, 2, &mut c).unwrap();
        let g0: Vec<f64> = (0..4).map(|m| t2.entry(0, m).0.get(0, 0)).collect();
        assert_eq!(g0, [0.0, 3.0, 5.0, 8.0]);
        // Ragged tail: one item, two entries.
        assert_eq!(t2.entry(1, 1).1, &[7.0]);
        assert!(build_four_russians_tables(&sums, 21, &mut c).is_err());
        assert!(build_four_russians_tables(&sums, 0, &mut c).is_err());
    }

    #[test]
    fn table_additivity_over_disjoint_pairs() {
        for g in 1..=4usize {
            let mut rng = SplitMix64::new(g as u64);
            let sums = random_sums(&mut rng, g * 3, 3);
            let mut c = OpCounter::default();
            let tables = build_four_russians_tables(&sums, g, &mut c).unwrap();
            assert_eq!(c.table_build, 3 * ((1 << g) - 1));
            for group in 0..tables.n_groups() {
                let full = (1usize << g) - 1;
                let (h_full, _) = tables.entry(group, full);
                let mut group_sum = Tensor::zeros(3, 3);
                for b in 0..g {
                    group_sum.add_assign(&sums.mats[group * g + b]).unwrap();
                }
                assert!(crate::tensor::max_rel_error(h_full, &group_sum) <= 1e-12);
                for a in 0..=full {
                    for b in 0..=full {
                        if a & b != 0 {
                            continue;
                        }
                        let (ha, za) = tables.entry(group, a);
                        let (hb, zb) = tables.entry(group, b);
                        let (hab, zab) = tables.entry(group, a | b);
                        let sum = ha.add(hb).unwrap();
                        assert!(hab.sub(&sum).unwrap().max_abs() <= 1e-10);
                        let zsum: Vec<f64> = za.iter().zip(zb).map(|(x, y)| x + y).collect();
                        assert!(vec_err(zab, &zsum) <= 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn four_russians_bounds() {
        let mut rng = SplitMix64::new(77);
        let sums = random_sums(&mut rng, 32, 4);
        let mut c = OpCounter::default();
        let tables = build_four_russians_tables(&sums, 4, &mut c).unwrap();
        let (h, _) = aggregate_four_russians(&tables, &[false; 32], &mut c).unwrap();
        assert_eq!(h.max_abs(), 0.0);
        let (h, z) = aggregate_four_russians(&tables, &[true; 32], &mut c).unwrap();
        assert!(crate::tensor::max_rel_error(&h, &sums.mat_total) <= 1e-10);
        assert!(vec_err(&z, &sums.vec_total) <= 1e-10);
        assert!(aggregate_four_russians(&tables, &[true; 31], &mut c).is_err());
    }

    #[test]
    fn dry_run_counts_match_execution() {
        let mut rng = SplitMix64::new(4);
        let n = 19;
        let sums = random_sums(&mut rng, n, 2);
        let rows: Vec<Vec<bool>> = (0..12).map(|_| (0..n).map(|_| rng.next_f64() < 0.4).collect()).collect();
        for strategy in [
            AggregationStrategy::Direct,
            AggregationStrategy::Complement,
            AggregationStrategy::FourRussians,
        ] {
            let mut c = OpCounter::default();
            let agg = Aggregator::prepare(strategy, &sums, 4, &mut c).unwrap();
            for r in &rows {
                agg.aggregate(r, &mut c).unwrap();
            }
            let dry = count_operations(strategy, 4, n, rows.iter().map(Vec::as_slice));
            assert_eq!(c, dry, "{strategy:?}");
        }
    }

    #[test]
    fn auto_is_rejected_unresolved() {
        let sums = scalar_sums(&[1.0]);
        let mut c = OpCounter::default();
        assert!(Aggregator::prepare(AggregationStrategy::Auto, &sums, 2, &mut c).is_err());
        let resolved = resolve_strategy(AggregationStrategy::Auto, &AutoThresholds::default(), 0.9);
        assert_eq!(resolved, AggregationStrategy::Complement);
    }
}
