//! KPI channel schema and the six root-cause classes.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, data_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Layer {
    Phy,
    Mac,
    Rlc,
    Pdcp,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KpiDescriptor {
    pub name: String,
    pub layer: Layer,
    pub unit: String,
}

// Full input set, in file order.
const SELECTED: &[(&str, Layer, &str)] = &[
    ("UL_DMRS_SINR", Layer::Phy, "dB"),
    ("UL_WB_PRE_SINR", Layer::Phy, "dB"),
    ("UL_SRS_RSRP", Layer::Phy, "dBm"),
    ("UL_DMRS_RSRP_AVG", Layer::Phy, "dBm"),
    ("SS_SINR", Layer::Phy, "dB"),
    ("RSRP_DIFF_NEIGH_CNT", Layer::Phy, "count"),
    ("TOP1_NEIGH_SSB_RSRP", Layer::Phy, "dBm"),
    ("SERV_SSB_RSRP", Layer::Phy, "dBm"),
    ("SERV_SSB_RSRQ", Layer::Phy, "dB"),
    ("CQI_AVG_CW0", Layer::Phy, "index"),
    ("DL_PRB_UTIL", Layer::Mac, "ratio"),
    ("UL_PRB_UTIL", Layer::Mac, "ratio"),
    ("DL_CCE_FAIL_RATE", Layer::Mac, "ratio"),
    ("UL_CCE_FAIL_RATE", Layer::Mac, "ratio"),
    ("CCE_UTIL_RATE", Layer::Mac, "ratio"),
    ("DL_CCE_USAGE_RATIO", Layer::Mac, "ratio"),
    ("COMMON_CCE_USAGE", Layer::Mac, "ratio"),
    ("UL_CCE_USAGE_RATIO", Layer::Mac, "ratio"),
    ("UL_SCHED_FAIL_RATE_CCE", Layer::Mac, "ratio"),
    ("UL_SCHED_FAIL_CNT_CCE", Layer::Mac, "count"),
    ("DL_SCHED_FAIL_RATE_CCE", Layer::Mac, "ratio"),
    ("DL_SCHED_FAIL_CNT_CCE", Layer::Mac, "count"),
    ("DL_CCE_FAIL_CNT_TOTAL", Layer::Mac, "count"),
    ("DL_CCE_FAIL_RATE_TOTAL", Layer::Mac, "ratio"),
    ("DL_CCE_FAIL_CNT_QUOTA", Layer::Mac, "count"),
    ("DL_CCE_FAIL_CNT_CONFLICT", Layer::Mac, "count"),
    ("UL_CCE_FAIL_CNT_TOTAL", Layer::Mac, "count"),
    ("UL_CCE_FAIL_RATE_TOTAL", Layer::Mac, "ratio"),
    ("UL_CCE_FAIL_CNT_CONFLICT", Layer::Mac, "count"),
    ("DL_RLC_TPUT", Layer::Rlc, "Mbit"),
    ("DL_RLC_LASTTTI_RATIO", Layer::Rlc, "ratio"),
    ("UL_RLC_TPUT", Layer::Rlc, "Mbit"),
    ("UL_RLC_SMALLPKT_RATIO", Layer::Rlc, "ratio"),
    ("PDCP_DL_TPUT", Layer::Pdcp, "Mbit"),
    ("PDCP_DL_LATENCY", Layer::Pdcp, "ms"),
    ("PDCP_UL_TPUT", Layer::Pdcp, "Mbit"),
    ("PDCP_UL_LATENCY", Layer::Pdcp, "ms"),
];

// KPIs referenced by the uplink-coverage labeling rule.
const RULE_EXAMPLE: &[(&str, Layer, &str)] = &[
    ("PDCP_UL_LATENCY", Layer::Pdcp, "ms"),
    ("PDCP_DL_LATENCY", Layer::Pdcp, "ms"),
    ("RLC_UL_LATENCY", Layer::Rlc, "ms"),
    ("RLC_DL_LATENCY", Layer::Rlc, "ms"),
    ("UL_RLC_RETX_SDU", Layer::Rlc, "count"),
    ("UL_RLC_SDU", Layer::Rlc, "count"),
    ("UL_RBLER", Layer::Phy, "ratio"),
    ("DL_RBLER", Layer::Phy, "ratio"),
    ("UL_DTX_Ratio", Layer::Mac, "ratio"),
    ("UL_MAC_HARQ_RETX_MAX", Layer::Mac, "count"),
    ("DL_MAC_HARQ_RETX_MAX", Layer::Mac, "count"),
    ("UL_DMRS_RSRP_MIN", Layer::Phy, "dBm"),
    ("UL_SRS_RSRP", Layer::Phy, "dBm"),
];

/// Ordered channel list. Row `i` of every sample is channel `i`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KpiSchema {
    descriptors: Vec<KpiDescriptor>,
}

impl KpiSchema {
    pub fn new(descriptors: Vec<KpiDescriptor>) -> Result<Self> {
        if descriptors.is_empty() {
            return config_err("schema has no channels");
        }
        let mut seen = HashMap::new();
        for (i, d) in descriptors.iter().enumerate() {
            if let Some(j) = seen.insert(d.name.as_str(), i) {
                return config_err(format!("duplicate KPI `{}` at positions {j} and {i}", d.name));
            }
        }
        Ok(Self { descriptors })
    }

    /// The full selected-feature list followed by the labeling-rule KPIs it
    /// does not already contain.
    pub fn default_schema() -> Self {
        let mut out: Vec<KpiDescriptor> = Vec::new();
        for &(name, layer, unit) in SELECTED.iter().chain(RULE_EXAMPLE) {
            if out.iter().all(|d| d.name != name) {
                out.push(KpiDescriptor {
                    name: name.to_string(),
                    layer,
                    unit: unit.to_string(),
                });
            }
        }
        Self { descriptors: out }
    }

    pub fn m(&self) -> usize {
        self.descriptors.len()
    }

    pub fn descriptors(&self) -> &[KpiDescriptor] {
        &self.descriptors
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.descriptors.iter().map(|d| d.name.as_str())
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.descriptors.iter().position(|d| d.name == name)
    }

    pub fn require(&self, name: &str) -> Result<usize> {
        match self.index(name) {
            Some(i) => Ok(i),
            None => data_err(format!("schema has no KPI named `{name}`")),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: KpiSchema = serde_json::from_str(text)?;
        Self::new(s.descriptors)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum RootCause {
    UplinkInterference = 1,
    UplinkWeakCoverage = 2,
    DownlinkInterference = 3,
    DownlinkWeakCoverage = 4,
    TrafficChannelOverload = 5,
    ControlChannelOverload = 6,
}

pub const NUM_CLASSES: usize = 6;

impl RootCause {
    pub const ALL: [RootCause; NUM_CLASSES] = [
        RootCause::UplinkInterference,
        RootCause::UplinkWeakCoverage,
        RootCause::DownlinkInterference,
        RootCause::DownlinkWeakCoverage,
        RootCause::TrafficChannelOverload,
        RootCause::ControlChannelOverload,
    ];

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            1..=6 => Ok(Self::ALL[id as usize - 1]),
            _ => data_err(format!("unknown class id {id}")),
        }
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }

    pub fn id(self) -> u8 {
        self as u8
    }

    /// Zero-based position, used for logits and one-hot targets.
    pub fn index(self) -> usize {
        self as usize - 1
    }

    pub fn name(self) -> &'static str {
        match self {
            RootCause::UplinkInterference => "Uplink Interference",
            RootCause::UplinkWeakCoverage => "Uplink Weak Coverage",
            RootCause::DownlinkInterference => "Downlink Interference",
            RootCause::DownlinkWeakCoverage => "Downlink Weak Coverage",
            RootCause::TrafficChannelOverload => "Traffic Channel Overload",
            RootCause::ControlChannelOverload => "Control Channel Overload",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }
}

impl TryFrom<u8> for RootCause {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        RootCause::from_id(v).map_err(|e| e.to_string())
    }
}

impl From<RootCause> for u8 {
    fn from(c: RootCause) -> u8 {
        c.id()
    }
}

impl fmt::Display for RootCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schema_is_deduplicated_union() {
        let s = KpiSchema::default_schema();
        let mut expected: Vec<&str> = SELECTED.iter().map(|r| r.0).collect();
        for r in RULE_EXAMPLE {
            if !expected.contains(&r.0) {
                expected.push(r.0);
            }
        }
        assert_eq!(s.m(), expected.len());
        assert_eq!(s.names().collect::<Vec<_>>(), expected);
        assert!(KpiSchema::new(s.descriptors().to_vec()).is_ok());
    }

    #[test]
    fn class_ids_and_names_are_a_bijection() {
        for (i, c) in RootCause::ALL.iter().enumerate() {
            assert_eq!(c.id() as usize, i + 1);
            assert_eq!(RootCause::from_id(c.id()).unwrap(), *c);
            assert_eq!(RootCause::from_name(c.name()), Some(*c));
        }
        assert!(RootCause::from_id(0).is_err());
        assert!(RootCause::from_id(7).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let d = KpiDescriptor {
            name: "X".into(),
            layer: Layer::Phy,
            unit: String::new(),
        };
        assert!(KpiSchema::new(vec![d.clone(), d]).is_err());
    }

    #[test]
    fn schema_json_round_trip() {
        let s = KpiSchema::default_schema();
        assert_eq!(KpiSchema::from_json(&s.to_json().unwrap()).unwrap(), s);
    }
}
