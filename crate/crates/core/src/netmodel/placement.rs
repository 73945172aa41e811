use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{BranchId, BusId, NetworkCase};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureKind {
    VMag,
    VAng,
    IMag,
    IAng,
}

impl FeatureKind {
    pub fn is_angle(self) -> bool {
        matches!(self, FeatureKind::VAng | FeatureKind::IAng)
    }
}

/// One real-valued PMU input. Current features are measured at the PMU bus
/// end of `branch`, flowing towards `far_bus`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Feature {
    pub kind: FeatureKind,
    pub bus: BusId,
    pub branch: Option<BranchId>,
    pub far_bus: Option<BusId>,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PmuPlacement {
    pub pmu_buses: Vec<BusId>,
    pub feature_schema: Vec<Feature>,
}

impl PmuPlacement {
    /// Places PMUs on `buses` (in the given order) and derives the schema.
    pub fn new(case: &NetworkCase, buses: &[BusId]) -> Result<Self> {
        let mut seen = HashSet::new();
        for &b in buses {
            case.bus(b)?;
            if !seen.insert(b) {
                return Err(Error::Validation(format!("PMU bus {b} listed twice")));
            }
        }
        let mut schema = Vec::new();
        for &bus in buses {
            schema.push(voltage_feature(FeatureKind::VMag, bus));
            schema.push(voltage_feature(FeatureKind::VAng, bus));
            let incident = case.incident_branches(bus);
            for br in &incident {
                let far = br.other_end(bus).expect("incident");
                let parallel = incident
                    .iter()
                    .filter(|o| o.other_end(bus) == Some(far))
                    .count()
                    > 1;
                let suffix = if parallel {
                    format!("#{}", br.id)
                } else {
                    String::new()
                };
                for (kind, tag) in [(FeatureKind::IMag, "Imag"), (FeatureKind::IAng, "Iang")] {
                    schema.push(Feature {
                        kind,
                        bus,
                        branch: Some(br.id),
                        far_bus: Some(far),
                        name: format!("{tag}@{bus}-{far}{suffix}"),
                    });
                }
            }
        }
        Ok(PmuPlacement {
            pmu_buses: buses.to_vec(),
            feature_schema: schema,
        })
    }

    pub fn from_ids(case: &NetworkCase, ids: &[u32]) -> Result<Self> {
        let buses: Vec<BusId> = ids.iter().map(|&i| BusId(i)).collect();
        Self::new(case, &buses)
    }

    pub fn n_features(&self) -> usize {
        self.feature_schema.len()
    }

    pub fn n_phasors(&self) -> usize {
        self.feature_schema.len() / 2
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.feature_schema.iter().map(|f| f.name.clone()).collect()
    }

    /// Feature indices owned by the PMU at `bus`.
    pub fn features_of(&self, bus: BusId) -> Vec<usize> {
        self.feature_schema
            .iter()
            .enumerate()
            .filter(|(_, f)| f.bus == bus)
            .map(|(i, _)| i)
            .collect()
    }

    /// Reads a JSON array of bus ids.
    pub fn from_json_ids(case: &NetworkCase, text: &str) -> Result<Self> {
        let ids: Vec<u32> = serde_json::from_str(text)?;
        Self::from_ids(case, &ids)
    }
}

fn voltage_feature(kind: FeatureKind, bus: BusId) -> Feature {
    let tag = if kind == FeatureKind::VMag {
        "Vmag"
    } else {
        "Vang"
    };
    Feature {
        kind,
        bus,
        branch: None,
        far_bus: None,
        name: format!("{tag}@bus{bus}"),
    }
}

/// Re-derives the feature schema of `placement` on `case` (e.g. after an
/// outage removed PMU current channels).
pub fn feature_map(case: &NetworkCase, placement: &PmuPlacement) -> Result<PmuPlacement> {
    PmuPlacement::new(case, &placement.pmu_buses)
}
