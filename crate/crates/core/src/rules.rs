//! Threshold rules that assign weak labels to KPI samples.
//!
//! A rule is a conjunction of groups; a group is a disjunction of
//! conditions. Each condition reduces one channel (or a per-timestep ratio of
//! two channels) over the window and compares it with a threshold. Rules are
//! tried in ascending class id and the first match wins.

use serde::{Deserialize, Serialize};

use crate::dataset::KpiSample;
use crate::error::{config_err, data_err, Result};
use crate::schema::{KpiSchema, RootCause};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Comparator {
    Ge,
    Le,
    Gt,
    Lt,
}

impl Comparator {
    pub fn holds(self, value: f64, threshold: f64) -> bool {
        match self {
            Comparator::Ge => value >= threshold,
            Comparator::Le => value <= threshold,
            Comparator::Gt => value > threshold,
            Comparator::Lt => value < threshold,
        }
    }

    /// True when larger values satisfy the comparison.
    pub fn is_upper(self) -> bool {
        matches!(self, Comparator::Ge | Comparator::Gt)
    }

    /// Reduction under which "any timestep crosses" is equivalent to the
    /// reduced value crossing.
    pub fn default_reduction(self) -> Reduction {
        if self.is_upper() {
            Reduction::Max
        } else {
            Reduction::Min
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Max,
    Min,
    Mean,
}

impl Reduction {
    pub fn apply(self, xs: impl Iterator<Item = f64>) -> f64 {
        match self {
            Reduction::Max => xs.fold(f64::NEG_INFINITY, f64::max),
            Reduction::Min => xs.fold(f64::INFINITY, f64::min),
            Reduction::Mean => {
                let (s, n) = xs.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
                s / n as f64
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KpiCondition {
    pub kpi: String,
    pub comparator: Comparator,
    pub threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reduction: Option<Reduction>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatioCondition {
    /// `[numerator, denominator]`.
    pub ratio_of: [String; 2],
    pub epsilon: f64,
    pub comparator: Comparator,
    pub threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reduction: Option<Reduction>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Condition {
    Ratio(RatioCondition),
    Kpi(KpiCondition),
}

impl Condition {
    pub fn kpi(name: &str, comparator: Comparator, threshold: f64) -> Self {
        Condition::Kpi(KpiCondition {
            kpi: name.to_string(),
            comparator,
            threshold,
            reduction: None,
        })
    }

    pub fn ratio(num: &str, den: &str, epsilon: f64, comparator: Comparator, threshold: f64) -> Self {
        Condition::Ratio(RatioCondition {
            ratio_of: [num.to_string(), den.to_string()],
            epsilon,
            comparator,
            threshold,
            reduction: None,
        })
    }

    pub fn comparator(&self) -> Comparator {
        match self {
            Condition::Kpi(c) => c.comparator,
            Condition::Ratio(c) => c.comparator,
        }
    }

    pub fn threshold(&self) -> f64 {
        match self {
            Condition::Kpi(c) => c.threshold,
            Condition::Ratio(c) => c.threshold,
        }
    }

    pub fn reduction(&self) -> Reduction {
        let r = match self {
            Condition::Kpi(c) => c.reduction,
            Condition::Ratio(c) => c.reduction,
        };
        r.unwrap_or_else(|| self.comparator().default_reduction())
    }

    fn kpis(&self) -> Vec<&str> {
        match self {
            Condition::Kpi(c) => vec![c.kpi.as_str()],
            Condition::Ratio(c) => vec![c.ratio_of[0].as_str(), c.ratio_of[1].as_str()],
        }
    }
}

/// Members are OR-ed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Group {
    pub any_of: Vec<Condition>,
}

impl Group {
    pub fn one(c: Condition) -> Self {
        Self { any_of: vec![c] }
    }
}

/// Groups are AND-ed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rule {
    pub class_id: u8,
    #[serde(default)]
    pub name: String,
    pub groups: Vec<Group>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleSet {
    pub rules: Vec<Rule>,
}

#[derive(Clone, Copy, Debug)]
enum Operand {
    Channel(usize),
    Ratio { num: usize, den: usize, eps: f64 },
}

#[derive(Clone, Debug)]
pub(crate) struct CompiledCondition {
    operand: Operand,
    pub(crate) comparator: Comparator,
    pub(crate) threshold: f64,
    pub(crate) reduction: Reduction,
}

impl CompiledCondition {
    /// Value of the operand at timestep `t`.
    fn at(&self, s: &KpiSample, t: usize) -> f64 {
        let l = s.len();
        let d = s.values().data();
        match self.operand {
            Operand::Channel(c) => d[c * l + t],
            Operand::Ratio { num, den, eps } => d[num * l + t] / (d[den * l + t] + eps),
        }
    }

    pub(crate) fn reduced(&self, s: &KpiSample) -> f64 {
        self.reduction.apply((0..s.len()).map(|t| self.at(s, t)))
    }

    pub(crate) fn holds(&self, s: &KpiSample) -> bool {
        self.comparator.holds(self.reduced(s), self.threshold)
    }

    /// The channel a generator should move to flip this condition; for a
    /// ratio it is the numerator.
    pub(crate) fn channel(&self) -> usize {
        match self.operand {
            Operand::Channel(c) => c,
            Operand::Ratio { num, .. } => num,
        }
    }

    pub(crate) fn ratio_denominator(&self) -> Option<(usize, f64)> {
        match self.operand {
            Operand::Channel(_) => None,
            Operand::Ratio { den, eps, .. } => Some((den, eps)),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct CompiledRule {
    pub(crate) class: RootCause,
    pub(crate) groups: Vec<Vec<CompiledCondition>>,
}

impl CompiledRule {
    pub(crate) fn matches(&self, s: &KpiSample) -> bool {
        self.groups.iter().all(|g| g.iter().any(|c| c.holds(s)))
    }
}

/// A rule set resolved against a schema, ready for evaluation.
#[derive(Clone, Debug)]
pub struct CompiledRuleSet {
    m: usize,
    pub(crate) rules: Vec<CompiledRule>,
}

impl CompiledRuleSet {
    pub(crate) fn rule(&self, class: RootCause) -> Option<&CompiledRule> {
        self.rules.iter().find(|r| r.class == class)
    }
}

impl RuleSet {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn compile(&self, schema: &KpiSchema) -> Result<CompiledRuleSet> {
        let mut rules = Vec::with_capacity(self.rules.len());
        for r in &self.rules {
            let class = RootCause::from_id(r.class_id)
                .map_err(|_| crate::error::RcaError::Config(format!("rule for unknown class id {}", r.class_id)))?;
            if rules.iter().any(|c: &CompiledRule| c.class == class) {
                return config_err(format!("two rules for class {}", r.class_id));
            }
            if r.groups.is_empty() || r.groups.iter().any(|g| g.any_of.is_empty()) {
                return config_err(format!("rule for class {} has an empty group", r.class_id));
            }
            let mut groups = Vec::with_capacity(r.groups.len());
            for g in &r.groups {
                let mut members = Vec::with_capacity(g.any_of.len());
                for c in &g.any_of {
                    for k in c.kpis() {
                        if schema.index(k).is_none() {
                            return data_err(format!("rule for class {} references unknown KPI `{k}`", r.class_id));
                        }
                    }
                    if !c.threshold().is_finite() {
                        return config_err(format!("non-finite threshold in rule for class {}", r.class_id));
                    }
                    let operand = match c {
                        Condition::Kpi(k) => Operand::Channel(schema.index(&k.kpi).unwrap()),
                        Condition::Ratio(q) => {
                            if !(q.epsilon >= 0.0) || !q.epsilon.is_finite() {
                                return config_err(format!("ratio epsilon must be finite and >= 0, got {}", q.epsilon));
                            }
                            Operand::Ratio {
                                num: schema.index(&q.ratio_of[0]).unwrap(),
                                den: schema.index(&q.ratio_of[1]).unwrap(),
                                eps: q.epsilon,
                            }
                        }
                    };
                    members.push(CompiledCondition {
                        operand,
                        comparator: c.comparator(),
                        threshold: c.threshold(),
                        reduction: c.reduction(),
                    });
                }
                groups.push(members);
            }
            rules.push(CompiledRule { class, groups });
        }
        rules.sort_by_key(|r| r.class);
        Ok(CompiledRuleSet { m: schema.m(), rules })
    }

    /// Built-in rules. The uplink weak-coverage rule is the five-condition
    /// operator rule; the others follow the same pattern for their own
    /// channels. In every rule the last group is the most class-specific one.
    pub fn default_rules() -> Self {
        use Comparator::*;
        let any = |cs: Vec<Condition>| Group { any_of: cs };
        let one = Group::one;
        let k = Condition::kpi;
        let ul_latency = || any(vec![k("PDCP_UL_LATENCY", Ge, 200.0), k("RLC_UL_LATENCY", Ge, 200.0)]);
        let dl_latency = || any(vec![k("PDCP_DL_LATENCY", Ge, 200.0), k("RLC_DL_LATENCY", Ge, 200.0)]);
        let any_latency = || {
            any(vec![
                k("PDCP_DL_LATENCY", Ge, 200.0),
                k("PDCP_UL_LATENCY", Ge, 200.0),
                k("RLC_DL_LATENCY", Ge, 200.0),
                k("RLC_UL_LATENCY", Ge, 200.0),
            ])
        };
        let rule = |class: RootCause, groups: Vec<Group>| Rule {
            class_id: class.id(),
            name: class.name().to_string(),
            groups,
        };
        RuleSet {
            rules: vec![
                rule(
                    RootCause::UplinkInterference,
                    vec![ul_latency(), one(k("UL_RBLER", Ge, 0.1)), one(k("UL_WB_PRE_SINR", Le, -3.0))],
                ),
                rule(
                    RootCause::UplinkWeakCoverage,
                    vec![
                        any(vec![k("PDCP_DL_LATENCY", Ge, 200.0), k("PDCP_UL_LATENCY", Ge, 200.0)]),
                        any(vec![k("RLC_DL_LATENCY", Ge, 200.0), k("RLC_UL_LATENCY", Ge, 200.0)]),
                        one(Condition::ratio("UL_RLC_RETX_SDU", "UL_RLC_SDU", 1e-5, Gt, 0.1)),
                        any(vec![
                            k("DL_RBLER", Ge, 0.1),
                            k("UL_RBLER", Ge, 0.1),
                            k("UL_DTX_Ratio", Ge, 0.2),
                            k("UL_MAC_HARQ_RETX_MAX", Ge, 50.0),
                            k("DL_MAC_HARQ_RETX_MAX", Ge, 50.0),
                        ]),
                        any(vec![k("UL_DMRS_RSRP_MIN", Le, -125.0), k("UL_SRS_RSRP", Le, -130.0)]),
                    ],
                ),
                rule(
                    RootCause::DownlinkInterference,
                    vec![
                        dl_latency(),
                        one(k("DL_RBLER", Ge, 0.1)),
                        one(k("SS_SINR", Le, 0.0)),
                        one(k("RSRP_DIFF_NEIGH_CNT", Ge, 3.0)),
                    ],
                ),
                rule(
                    RootCause::DownlinkWeakCoverage,
                    vec![dl_latency(), one(k("CQI_AVG_CW0", Le, 6.0)), one(k("SERV_SSB_RSRP", Le, -115.0))],
                ),
                rule(
                    RootCause::TrafficChannelOverload,
                    vec![any_latency(), any(vec![k("DL_PRB_UTIL", Ge, 0.9), k("UL_PRB_UTIL", Ge, 0.9)])],
                ),
                rule(
                    RootCause::ControlChannelOverload,
                    vec![
                        any_latency(),
                        any(vec![
                            k("DL_CCE_FAIL_RATE", Ge, 0.1),
                            k("UL_CCE_FAIL_RATE", Ge, 0.1),
                            k("DL_SCHED_FAIL_RATE_CCE", Ge, 0.1),
                            k("UL_SCHED_FAIL_RATE_CCE", Ge, 0.1),
                        ]),
                        one(k("CCE_UTIL_RATE", Ge, 0.85)),
                    ],
                ),
            ],
        }
    }
}

/// First class (ascending id) whose rule the sample satisfies.
pub fn rule_label(sample: &KpiSample, rules: &CompiledRuleSet) -> Result<Option<RootCause>> {
    if sample.m() != rules.m {
        return data_err(format!(
            "sample `{}` has {} channels, rules were compiled for {}",
            sample.id,
            sample.m(),
            rules.m
        ));
    }
    Ok(rules.rules.iter().find(|r| r.matches(sample)).map(|r| r.class))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_rules_compile_and_round_trip() {
        let schema = KpiSchema::default_schema();
        let rs = RuleSet::default_rules();
        rs.compile(&schema).unwrap();
        let back = RuleSet::from_json(&rs.to_json().unwrap()).unwrap();
        assert_eq!(back, rs);
    }

    #[test]
    fn unknown_kpi_and_class_rejected() {
        let schema = KpiSchema::default_schema();
        let bad = RuleSet {
            rules: vec![Rule {
                class_id: 1,
                name: String::new(),
                groups: vec![Group::one(Condition::kpi("NOPE", Comparator::Ge, 1.0))],
            }],
        };
        assert!(bad.compile(&schema).is_err());
        let bad_class = RuleSet {
            rules: vec![Rule {
                class_id: 9,
                name: String::new(),
                groups: vec![Group::one(Condition::kpi("SS_SINR", Comparator::Ge, 1.0))],
            }],
        };
        assert!(bad_class.compile(&schema).is_err());
    }

    #[test]
    fn json_condition_forms_parse() {
        let text = r#"{"rules":[{"class_id":2,"groups":[
            {"any_of":[{"kpi":"UL_SRS_RSRP","comparator":"le","threshold":-130}]},
            {"any_of":[{"ratio_of":["UL_RLC_RETX_SDU","UL_RLC_SDU"],"epsilon":1e-5,"comparator":"gt","threshold":0.1,"reduction":"mean"}]}
        ]}]}"#;
        let rs = RuleSet::from_json(text).unwrap();
        match &rs.rules[0].groups[1].any_of[0] {
            Condition::Ratio(r) => assert_eq!(r.reduction, Some(Reduction::Mean)),
            other => panic!("{other:?}"),
        }
        assert_eq!(rs.rules[0].groups[0].any_of[0].reduction(), Reduction::Min);
        assert!(RuleSet::from_json(r#"{"rules":[{"class_id":1,"groups":[{"any_of":[{"kpi":"A","comparator":"eq","threshold":1}]}]}]}"#).is_err());
    }
}
