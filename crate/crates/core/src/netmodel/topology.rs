//! Graph queries over in-service branches: hop distances and N-1 outages.

use std::collections::VecDeque;

use super::{BranchId, BusId, NetworkCase, PmuPlacement};
use crate::error::{Error, Result};

fn adjacency(case: &NetworkCase, skip: Option<usize>) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); case.n_buses()];
    for (k, br) in case.branches().iter().enumerate() {
        if !br.in_service || Some(k) == skip {
            continue;
        }
        let f = case.bus_index(br.from_bus).expect("validated");
        let t = case.bus_index(br.to_bus).expect("validated");
        adj[f].push(t);
        adj[t].push(f);
    }
    adj
}

fn bfs(adj: &[Vec<usize>], source: usize) -> Vec<Option<u32>> {
    let mut dist = vec![None; adj.len()];
    dist[source] = Some(0);
    let mut queue = VecDeque::from([source]);
    while let Some(u) = queue.pop_front() {
        let d = dist[u].expect("queued nodes have a distance");
        for &v in &adj[u] {
            if dist[v].is_none() {
                dist[v] = Some(d + 1);
                queue.push_back(v);
            }
        }
    }
    dist
}

/// Hop counts from `source` to every bus (bus order), `None` if unreachable.
pub fn bfs_hops(case: &NetworkCase, source: BusId) -> Result<Vec<Option<u32>>> {
    let s = case.bus_index(source)?;
    Ok(bfs(&adjacency(case, None), s))
}

pub(super) fn unreachable_from_slack(case: &NetworkCase, skip: Option<usize>) -> Vec<BusId> {
    let dist = bfs(&adjacency(case, skip), case.slack_index());
    dist.iter()
        .zip(case.buses())
        .filter(|(d, _)| d.is_none())
        .map(|(_, b)| b.id)
        .collect()
}

/// Shortest path length in branches between two buses, `None` if they are in
/// different islands.
pub fn hop_distance(case: &NetworkCase, a: BusId, b: BusId) -> Result<Option<u32>> {
    let bi = case.bus_index(b)?;
    Ok(bfs_hops(case, a)?[bi])
}

/// Hop distance from `bus` to the closest PMU bus.
pub fn min_hops_to_pmus(
    case: &NetworkCase,
    placement: &PmuPlacement,
    bus: BusId,
) -> Result<Option<u32>> {
    let table = HopTable::new(case, &placement.pmu_buses)?;
    table.min_to_sources(case.bus_index(bus)?)
}

/// BFS distances from a fixed set of source buses.
#[derive(Clone, Debug)]
pub struct HopTable {
    sources: Vec<BusId>,
    bus_ids: Vec<BusId>,
    dist: Vec<Vec<Option<u32>>>,
}

impl HopTable {
    pub fn new(case: &NetworkCase, sources: &[BusId]) -> Result<Self> {
        let adj = adjacency(case, None);
        let dist = sources
            .iter()
            .map(|&s| Ok(bfs(&adj, case.bus_index(s)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(HopTable {
            sources: sources.to_vec(),
            bus_ids: case.buses().iter().map(|b| b.id).collect(),
            dist,
        })
    }

    pub fn sources(&self) -> &[BusId] {
        &self.sources
    }

    /// Distance between the `i`-th source and the bus at index `bus_idx`.
    pub fn from_source(&self, i: usize, bus_idx: usize) -> Option<u32> {
        self.dist[i][bus_idx]
    }

    /// Distance between two sources, addressed by position in [`Self::sources`].
    pub fn between_sources(&self, i: usize, j: usize) -> Option<u32> {
        let target = self.sources[j];
        let idx = self
            .bus_ids
            .iter()
            .position(|&b| b == target)
            .expect("source is a bus");
        self.dist[i][idx]
    }

    pub fn min_to_sources(&self, bus_idx: usize) -> Result<Option<u32>> {
        if self.sources.is_empty() {
            return Err(Error::Validation("placement has no PMU buses".into()));
        }
        Ok(self.dist.iter().filter_map(|d| d[bus_idx]).min())
    }
}

/// Takes a branch out of service, refusing outages that create an island.
pub fn apply_branch_outage(case: &NetworkCase, branch: BranchId) -> Result<NetworkCase> {
    let k = case.branch_index(branch)?;
    if !case.branches()[k].in_service {
        return Err(Error::BranchOutOfService(branch.0));
    }
    let before = unreachable_from_slack(case, None);
    let after = unreachable_from_slack(case, Some(k));
    if after.len() > before.len() {
        let component = after
            .into_iter()
            .filter(|b| !before.contains(b))
            .map(|b| b.0)
            .collect();
        return Err(Error::Islanding {
            branch: branch.0,
            component,
        });
    }
    let out = case.with_branch_status(branch, false)?;
    Ok(out.renamed(format!("{}-out{}", case.name(), branch)))
}

/// In-service branches whose single outage leaves the system connected,
/// sorted by branch id.
pub fn enumerate_n1_topologies(case: &NetworkCase) -> Result<Vec<BranchId>> {
    if !case.is_connected() {
        return Err(Error::Validation(
            "N-1 enumeration needs a connected case".into(),
        ));
    }
    let mut ids: Vec<BranchId> = case
        .branches()
        .iter()
        .enumerate()
        .filter(|(k, br)| br.in_service && unreachable_from_slack(case, Some(*k)).is_empty())
        .map(|(_, br)| br.id)
        .collect();
    ids.sort();
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{ieee118, triangle, two_bus, IEEE118_PMU_BUSES};

    #[test]
    fn identity_and_direct_neighbours() {
        let case = triangle();
        assert_eq!(hop_distance(&case, BusId(2), BusId(2)).unwrap(), Some(0));
        for (a, b) in [(1, 2), (2, 3), (1, 3)] {
            assert_eq!(hop_distance(&case, BusId(a), BusId(b)).unwrap(), Some(1));
        }
        assert!(matches!(
            hop_distance(&case, BusId(1), BusId(7)),
            Err(Error::UnknownBus(7))
        ));
    }

    #[test]
    fn outaged_branch_is_not_traversed() {
        let case = triangle().with_branch_status(BranchId(1), false).unwrap();
        assert_eq!(hop_distance(&case, BusId(1), BusId(2)).unwrap(), Some(2));
    }

    #[test]
    fn min_hops_on_triangle() {
        let case = triangle();
        let pl = PmuPlacement::new(&case, &[BusId(1)]).unwrap();
        assert_eq!(min_hops_to_pmus(&case, &pl, BusId(1)).unwrap(), Some(0));
        assert_eq!(min_hops_to_pmus(&case, &pl, BusId(3)).unwrap(), Some(1));
        let empty = PmuPlacement::new(&case, &[]).unwrap();
        assert!(min_hops_to_pmus(&case, &empty, BusId(3)).is_err());
    }

    #[test]
    fn ieee118_far_buses_are_six_or_more_hops_from_pmus() {
        let case = ieee118();
        let buses: Vec<BusId> = IEEE118_PMU_BUSES.iter().map(|&b| BusId(b)).collect();
        let table = HopTable::new(&case, &buses).unwrap();
        let max = (0..case.n_buses())
            .map(|i| table.min_to_sources(i).unwrap().unwrap())
            .max()
            .unwrap();
        assert!(max >= 6, "max hops {max}");
    }

    #[test]
    fn outage_errors_and_success() {
        let tri = triangle();
        for id in 1..=3 {
            let out = apply_branch_outage(&tri, BranchId(id)).unwrap();
            assert!(out.is_connected());
            assert!(matches!(
                apply_branch_outage(&out, BranchId(id)),
                Err(Error::BranchOutOfService(_))
            ));
        }
        match apply_branch_outage(&two_bus(), BranchId(1)) {
            Err(Error::Islanding { component, .. }) => assert_eq!(component, vec![2]),
            other => panic!("expected islanding, got {other:?}"),
        }
    }

    #[test]
    fn outage_then_restore_is_identity() {
        let tri = triangle();
        let out = apply_branch_outage(&tri, BranchId(2)).unwrap();
        let back = out
            .with_branch_status(BranchId(2), true)
            .unwrap()
            .renamed(tri.name());
        assert_eq!(back, tri);
    }

    #[test]
    fn n1_counts() {
        assert_eq!(enumerate_n1_topologies(&triangle()).unwrap().len(), 3);
        assert!(enumerate_n1_topologies(&two_bus()).unwrap().is_empty());
    }

    #[test]
    fn ieee118_n1_and_named_outages() {
        let case = ieee118();
        let ids = enumerate_n1_topologies(&case).unwrap();
        assert_eq!(ids.len(), 177);
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
        let br = case.branch_between(BusId(75), BusId(77)).unwrap().id;
        let t2 = apply_branch_outage(&case, br).unwrap();
        assert!(t2.is_connected());
    }
}
