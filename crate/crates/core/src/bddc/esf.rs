use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::netmodel::{HopTable, NetworkCase, PmuPlacement};

/// Separates correlated multi-PMU excursions (stressed operation) from
/// scattered bad data.
///
/// With `S` the PMUs owning flagged features, group sizes `p` are scanned
/// from `|S|` down to `min_group`. At each size every `p`-subset of `S`
/// whose members are pairwise at most `p` hops apart has its features
/// removed from the flag set. The scan ends at the first size that removes
/// anything.
#[derive(Clone, Debug)]
pub struct EsfFilter {
    /// PMU position owning each feature.
    owner: Vec<usize>,
    /// Pairwise hop distances between PMU buses, `None` across islands.
    hops: Vec<Vec<Option<u32>>>,
    min_group: usize,
}

impl EsfFilter {
    pub fn new(placement: &PmuPlacement, case: &NetworkCase, min_group: usize) -> Result<Self> {
        if min_group < 2 {
            return Err(Error::Validation(format!(
                "minimum group size must be at least 2, got {min_group}"
            )));
        }
        let table = HopTable::new(case, &placement.pmu_buses)?;
        let k = placement.pmu_buses.len();
        let hops = (0..k)
            .map(|i| (0..k).map(|j| table.between_sources(i, j)).collect())
            .collect();
        let owner = placement
            .feature_schema
            .iter()
            .map(|f| {
                placement
                    .pmu_buses
                    .iter()
                    .position(|&b| b == f.bus)
                    .ok_or_else(|| Error::Schema(format!("feature {} has no PMU", f.name)))
            })
            .collect::<Result<_>>()?;
        Ok(EsfFilter {
            owner,
            hops,
            min_group,
        })
    }

    pub fn n_features(&self) -> usize {
        self.owner.len()
    }

    fn close(&self, a: usize, b: usize, p: usize) -> bool {
        self.hops[a][b].is_some_and(|d| d as usize <= p)
    }

    /// Adds to `out` every member of a `p`-subset of `cands` that is
    /// pairwise within `p` hops.
    fn collect_groups(&self, cands: &[usize], p: usize, out: &mut BTreeSet<usize>) {
        fn extend(
            f: &EsfFilter,
            cands: &[usize],
            p: usize,
            chosen: &mut Vec<usize>,
            start: usize,
            out: &mut BTreeSet<usize>,
        ) {
            if chosen.len() == p {
                out.extend(chosen.iter().copied());
                return;
            }
            let need = p - chosen.len();
            for i in start..cands.len() {
                if cands.len() - i < need {
                    break;
                }
                let c = cands[i];
                if chosen.iter().all(|&o| f.close(o, c, p)) {
                    chosen.push(c);
                    extend(f, cands, p, chosen, i + 1, out);
                    chosen.pop();
                }
            }
        }
        extend(self, cands, p, &mut Vec::with_capacity(p), 0, out);
    }

    /// PMUs whose flags are suppressed and the group size that triggered it.
    pub fn extreme_group(&self, ibfs: &[usize]) -> Option<(BTreeSet<usize>, usize)> {
        let pmus: Vec<usize> = ibfs
            .iter()
            .map(|&i| self.owner[i])
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        for p in (self.min_group..=pmus.len()).rev() {
            let mut hit = BTreeSet::new();
            self.collect_groups(&pmus, p, &mut hit);
            if !hit.is_empty() {
                return Some((hit, p));
            }
        }
        None
    }

    pub fn filter(&self, ibfs: &[usize]) -> Vec<usize> {
        match self.extreme_group(ibfs) {
            Some((group, _)) => ibfs
                .iter()
                .copied()
                .filter(|&i| !group.contains(&self.owner[i]))
                .collect(),
            None => ibfs.to_vec(),
        }
    }
}

/// One-shot form of [`EsfFilter::filter`] with the minimum group size of 2.
pub fn esf_filter(
    ibfs: &[usize],
    placement: &PmuPlacement,
    case: &NetworkCase,
) -> Result<Vec<usize>> {
    Ok(EsfFilter::new(placement, case, 2)?.filter(ibfs))
}
