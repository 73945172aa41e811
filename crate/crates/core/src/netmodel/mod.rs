//! Bus/branch network model.
//!
//! A [`NetworkCase`] is validated when it is built and never mutated
//! afterwards; every edit (outage, new injections) returns a fresh case.
//! Quantities are per-unit, angles radians, branches are π-models with the
//! total charging susceptance split half per end.

mod cases;
mod matpower;
mod placement;
mod topology;
mod ybus;

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use cases::{ieee118, synthetic_grid, three_bus, triangle, two_bus, IEEE118_PMU_BUSES};
pub use matpower::parse_matpower;
pub use placement::{feature_map, Feature, FeatureKind, PmuPlacement};
pub use topology::{
    apply_branch_outage, bfs_hops, enumerate_n1_topologies, hop_distance, min_hops_to_pmus,
    HopTable,
};
pub use ybus::build_ybus;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BusId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BranchId(pub u32);

impl fmt::Display for BusId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for BranchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BusKind {
    #[serde(rename = "slack")]
    Slack,
    #[serde(rename = "PV")]
    Pv,
    #[serde(rename = "PQ")]
    Pq,
}

/// `{re, im}` object form used by case files.
mod complex_obj {
    use num_complex::Complex64;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Repr {
        re: f64,
        im: f64,
    }

    pub fn serialize<S: Serializer>(c: &Complex64, s: S) -> Result<S::Ok, S::Error> {
        Repr { re: c.re, im: c.im }.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Complex64, D::Error> {
        let r = Repr::deserialize(d)?;
        Ok(Complex64::new(r.re, r.im))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BusRecord {
    pub id: BusId,
    pub kind: BusKind,
    /// Net active injection, generation minus load.
    pub p_inj: f64,
    /// Net reactive injection. Ignored by the power flow at PV and slack buses.
    pub q_inj: f64,
    #[serde(with = "complex_obj", default)]
    pub shunt_admittance: Complex64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_setpoint: Option<f64>,
    /// Active load contained in `p_inj`; informational, used when scaling loads.
    #[serde(default)]
    pub p_load: f64,
    #[serde(default)]
    pub q_load: f64,
}

impl BusRecord {
    pub fn pq(id: u32, p_inj: f64, q_inj: f64) -> Self {
        BusRecord {
            id: BusId(id),
            kind: BusKind::Pq,
            p_inj,
            q_inj,
            shunt_admittance: Complex64::new(0.0, 0.0),
            v_setpoint: None,
            p_load: (-p_inj).max(0.0),
            q_load: if p_inj < 0.0 { -q_inj } else { 0.0 },
        }
    }

    pub fn pv(id: u32, p_inj: f64, v: f64) -> Self {
        BusRecord {
            kind: BusKind::Pv,
            v_setpoint: Some(v),
            ..Self::pq(id, p_inj, 0.0)
        }
    }

    pub fn slack(id: u32, v: f64) -> Self {
        BusRecord {
            kind: BusKind::Slack,
            v_setpoint: Some(v),
            ..Self::pq(id, 0.0, 0.0)
        }
    }

    pub fn with_shunt(mut self, y: Complex64) -> Self {
        self.shunt_admittance = y;
        self
    }

    pub fn with_load(mut self, p: f64, q: f64) -> Self {
        self.p_load = p;
        self.q_load = q;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchRecord {
    pub id: BranchId,
    pub from_bus: BusId,
    pub to_bus: BusId,
    #[serde(with = "complex_obj")]
    pub series_impedance: Complex64,
    #[serde(default)]
    pub shunt_susceptance_total: f64,
    #[serde(default = "default_true")]
    pub in_service: bool,
}

fn default_true() -> bool {
    true
}

impl BranchRecord {
    pub fn new(id: u32, from: u32, to: u32, z: Complex64) -> Self {
        BranchRecord {
            id: BranchId(id),
            from_bus: BusId(from),
            to_bus: BusId(to),
            series_impedance: z,
            shunt_susceptance_total: 0.0,
            in_service: true,
        }
    }

    pub fn with_charging(mut self, b_total: f64) -> Self {
        self.shunt_susceptance_total = b_total;
        self
    }

    pub fn series_admittance(&self) -> Complex64 {
        self.series_impedance.inv()
    }

    /// The bus at the other end from `bus`, if `bus` is a terminal.
    pub fn other_end(&self, bus: BusId) -> Option<BusId> {
        if self.from_bus == bus {
            Some(self.to_bus)
        } else if self.to_bus == bus {
            Some(self.from_bus)
        } else {
            None
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CaseFile {
    name: String,
    #[serde(default = "default_base")]
    base_mva: f64,
    buses: Vec<BusRecord>,
    branches: Vec<BranchRecord>,
}

fn default_base() -> f64 {
    100.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "CaseFile", into = "CaseFile")]
pub struct NetworkCase {
    name: String,
    base_mva: f64,
    buses: Vec<BusRecord>,
    branches: Vec<BranchRecord>,
    bus_index: HashMap<BusId, usize>,
    branch_index: HashMap<BranchId, usize>,
    slack: usize,
}

impl PartialEq for NetworkCase {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.base_mva == other.base_mva
            && self.buses == other.buses
            && self.branches == other.branches
    }
}

impl TryFrom<CaseFile> for NetworkCase {
    type Error = Error;

    fn try_from(f: CaseFile) -> Result<Self> {
        NetworkCase::with_base(f.name, f.base_mva, f.buses, f.branches)
    }
}

impl From<NetworkCase> for CaseFile {
    fn from(c: NetworkCase) -> Self {
        CaseFile {
            name: c.name,
            base_mva: c.base_mva,
            buses: c.buses,
            branches: c.branches,
        }
    }
}

impl NetworkCase {
    pub fn new(
        name: impl Into<String>,
        buses: Vec<BusRecord>,
        branches: Vec<BranchRecord>,
    ) -> Result<Self> {
        Self::with_base(name, 100.0, buses, branches)
    }

    pub fn with_base(
        name: impl Into<String>,
        base_mva: f64,
        buses: Vec<BusRecord>,
        branches: Vec<BranchRecord>,
    ) -> Result<Self> {
        let invalid = |msg: String| Err(Error::Validation(msg));
        if buses.is_empty() {
            return invalid("case has no buses".into());
        }
        if !(base_mva > 0.0) {
            return invalid(format!("base MVA must be positive, got {base_mva}"));
        }
        let mut bus_index = HashMap::with_capacity(buses.len());
        let mut slack = None;
        for (i, b) in buses.iter().enumerate() {
            if bus_index.insert(b.id, i).is_some() {
                return invalid(format!("duplicate bus id {}", b.id));
            }
            if !b.p_inj.is_finite()
                || !b.q_inj.is_finite()
                || !b.shunt_admittance.re.is_finite()
                || !b.shunt_admittance.im.is_finite()
            {
                return invalid(format!("bus {} has non-finite data", b.id));
            }
            match b.kind {
                BusKind::Slack | BusKind::Pv => match b.v_setpoint {
                    Some(v) if v > 0.0 && v.is_finite() => {}
                    _ => return invalid(format!("bus {} needs a positive voltage setpoint", b.id)),
                },
                BusKind::Pq => {}
            }
            if b.kind == BusKind::Slack {
                if slack.is_some() {
                    return invalid("more than one slack bus".into());
                }
                slack = Some(i);
            }
        }
        let Some(slack) = slack else {
            return invalid("case has no slack bus".into());
        };
        let mut branch_index = HashMap::with_capacity(branches.len());
        for (k, br) in branches.iter().enumerate() {
            if branch_index.insert(br.id, k).is_some() {
                return invalid(format!("duplicate branch id {}", br.id));
            }
            if br.from_bus == br.to_bus {
                return invalid(format!("branch {} is a self-loop", br.id));
            }
            for end in [br.from_bus, br.to_bus] {
                if !bus_index.contains_key(&end) {
                    return invalid(format!("branch {} references unknown bus {end}", br.id));
                }
            }
            let z = br.series_impedance;
            if !(z.norm() > 0.0) || !z.re.is_finite() || !z.im.is_finite() {
                return invalid(format!("branch {} has zero or non-finite impedance", br.id));
            }
            if !br.shunt_susceptance_total.is_finite() {
                return invalid(format!("branch {} has non-finite charging", br.id));
            }
        }
        Ok(NetworkCase {
            name: name.into(),
            base_mva,
            buses,
            branches,
            bus_index,
            branch_index,
            slack,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn base_mva(&self) -> f64 {
        self.base_mva
    }

    pub fn buses(&self) -> &[BusRecord] {
        &self.buses
    }

    pub fn branches(&self) -> &[BranchRecord] {
        &self.branches
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn slack_index(&self) -> usize {
        self.slack
    }

    pub fn bus_index(&self, id: BusId) -> Result<usize> {
        self.bus_index
            .get(&id)
            .copied()
            .ok_or(Error::UnknownBus(id.0))
    }

    pub fn bus(&self, id: BusId) -> Result<&BusRecord> {
        Ok(&self.buses[self.bus_index(id)?])
    }

    pub fn branch_index(&self, id: BranchId) -> Result<usize> {
        self.branch_index
            .get(&id)
            .copied()
            .ok_or(Error::UnknownBranch(id.0))
    }

    pub fn branch(&self, id: BranchId) -> Result<&BranchRecord> {
        Ok(&self.branches[self.branch_index(id)?])
    }

    /// In-service branches touching `bus`, ordered by branch id.
    pub fn incident_branches(&self, bus: BusId) -> Vec<&BranchRecord> {
        let mut v: Vec<&BranchRecord> = self
            .branches
            .iter()
            .filter(|b| b.in_service && (b.from_bus == bus || b.to_bus == bus))
            .collect();
        v.sort_by_key(|b| b.id);
        v
    }

    /// Finds the in-service branch joining two buses (lowest id if parallel).
    pub fn branch_between(&self, a: BusId, b: BusId) -> Option<&BranchRecord> {
        self.branches
            .iter()
            .filter(|br| {
                br.in_service
                    && ((br.from_bus == a && br.to_bus == b)
                        || (br.from_bus == b && br.to_bus == a))
            })
            .min_by_key(|br| br.id)
    }

    pub fn is_connected(&self) -> bool {
        topology::unreachable_from_slack(self, None).is_empty()
    }

    /// Returns a copy with one branch's status changed. No connectivity check.
    pub fn with_branch_status(&self, id: BranchId, in_service: bool) -> Result<Self> {
        let k = self.branch_index(id)?;
        let mut out = self.clone();
        out.branches[k].in_service = in_service;
        Ok(out)
    }

    /// Returns a copy with new per-bus injections (indexed like [`Self::buses`])
    /// and an optional slack voltage. Topology is untouched so no re-validation
    /// beyond finiteness is needed.
    pub fn with_injections(&self, p: &[f64], q: &[f64], slack_v: Option<f64>) -> Result<Self> {
        if p.len() != self.buses.len() || q.len() != self.buses.len() {
            return Err(Error::Dimension(format!(
                "injection vectors have {}/{} entries for {} buses",
                p.len(),
                q.len(),
                self.buses.len()
            )));
        }
        let mut out = self.clone();
        for (b, (&pi, &qi)) in out.buses.iter_mut().zip(p.iter().zip(q)) {
            if !pi.is_finite() || !qi.is_finite() {
                return Err(Error::Validation(format!(
                    "non-finite injection at bus {}",
                    b.id
                )));
            }
            b.p_inj = pi;
            b.q_inj = qi;
        }
        if let Some(v) = slack_v {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Validation(format!(
                    "slack voltage must be positive, got {v}"
                )));
            }
            out.buses[self.slack].v_setpoint = Some(v);
        }
        Ok(out)
    }

    pub fn renamed(&self, name: impl Into<String>) -> Self {
        let mut out = self.clone();
        out.name = name.into();
        out
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Loads a JSON case, or MATPOWER text when the extension is `.m`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "m") {
            parse_matpower(&text)
        } else {
            Self::from_json_str(&text)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn z(x: f64) -> Complex64 {
        Complex64::new(0.0, x)
    }

    #[test]
    fn rejects_duplicate_bus_and_missing_slack() {
        let r = NetworkCase::new(
            "dup",
            vec![BusRecord::slack(1, 1.0), BusRecord::pq(1, 0.0, 0.0)],
            vec![],
        );
        assert!(matches!(r, Err(Error::Validation(_))));
        let r = NetworkCase::new("noslack", vec![BusRecord::pq(1, 0.0, 0.0)], vec![]);
        assert!(matches!(r, Err(Error::Validation(_))));
        let r = NetworkCase::new(
            "twoslack",
            vec![BusRecord::slack(1, 1.0), BusRecord::slack(2, 1.0)],
            vec![],
        );
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn rejects_bad_branches() {
        let buses = || vec![BusRecord::slack(1, 1.0), BusRecord::pq(2, 0.0, 0.0)];
        let r = NetworkCase::new("self", buses(), vec![BranchRecord::new(1, 1, 1, z(0.1))]);
        assert!(r.is_err());
        let r = NetworkCase::new(
            "dangling",
            buses(),
            vec![BranchRecord::new(1, 1, 3, z(0.1))],
        );
        assert!(r.is_err());
        let r = NetworkCase::new("zero", buses(), vec![BranchRecord::new(1, 1, 2, z(0.0))]);
        assert!(r.is_err());
        let mut pv = BusRecord::pv(2, 0.0, 1.0);
        pv.v_setpoint = Some(-1.0);
        let r = NetworkCase::new("badv", vec![BusRecord::slack(1, 1.0), pv], vec![]);
        assert!(r.is_err());
    }

    #[test]
    fn json_round_trip_validates() {
        let case = three_bus();
        let s = case.to_json_string().unwrap();
        assert!(s.contains("\"re\""));
        let back = NetworkCase::from_json_str(&s).unwrap();
        assert_eq!(back, case);
        let broken = s.replace("\"slack\"", "\"PQ\"");
        assert!(NetworkCase::from_json_str(&broken).is_err());
    }

    #[test]
    fn branch_lookup_helpers() {
        let case = triangle();
        assert_eq!(case.incident_branches(BusId(1)).len(), 2);
        let br = case.branch_between(BusId(3), BusId(1)).unwrap();
        assert_eq!(br.other_end(BusId(1)), Some(BusId(3)));
        assert!(case.bus(BusId(9)).is_err());
    }
}
