//! Synthetic degraded-session generator.
//!
//! Every sample is a healthy baseline (per-session offsets plus AR(1)
//! fluctuation) with one degradation episode. The episode carries the true
//! class's signature on its characteristic channels, scaled by severity.
//! The generator then makes the labeling rules agree with a chosen *target*
//! class: the target rule's conditions are planted during the episode
//! plateau and one class-specific condition of every other rule is clipped
//! to its failing side.
//!
//! The target is normally the true class. Below `clean_above` severity a
//! sample may instead take its partner class as target (1<->2, 3<->4, 5<->6):
//! its own rule is suppressed and the partner's rule fires, while the
//! signature still belongs to the true class. That is the systematic rule
//! noise the weak labels carry.

use serde::{Deserialize, Serialize};

use qoe_numeric::{par, Rng};

use crate::dataset::{KpiSample, LabelSource, LabeledDataset};
use crate::error::{config_err, data_err, Result};
use crate::rules::{rule_label, CompiledCondition, CompiledRuleSet};
use crate::schema::{KpiSchema, RootCause};

#[derive(Clone, Copy, Debug)]
struct ChannelModel {
    name: &'static str,
    base: f64,
    session_sd: f64,
    noise_sd: f64,
    lo: f64,
    hi: f64,
}

const fn ch(name: &'static str, base: f64, session_sd: f64, noise_sd: f64, lo: f64, hi: f64) -> ChannelModel {
    ChannelModel {
        name,
        base,
        session_sd,
        noise_sd,
        lo,
        hi,
    }
}

const BIG: f64 = 1e6;

const CHANNELS: &[ChannelModel] = &[
    ch("UL_DMRS_SINR", 15.0, 3.0, 1.5, -20.0, 40.0),
    ch("UL_WB_PRE_SINR", 12.0, 3.0, 1.5, -20.0, 40.0),
    ch("UL_SRS_RSRP", -97.0, 6.0, 1.5, -140.0, -44.0),
    ch("UL_DMRS_RSRP_AVG", -95.0, 6.0, 1.5, -140.0, -44.0),
    ch("SS_SINR", 14.0, 3.0, 1.5, -20.0, 40.0),
    ch("RSRP_DIFF_NEIGH_CNT", 0.5, 0.4, 0.5, 0.0, 16.0),
    ch("TOP1_NEIGH_SSB_RSRP", -108.0, 5.0, 1.5, -140.0, -44.0),
    ch("SERV_SSB_RSRP", -90.0, 6.0, 1.5, -140.0, -44.0),
    ch("SERV_SSB_RSRQ", -10.0, 1.5, 0.6, -20.0, -3.0),
    ch("CQI_AVG_CW0", 11.0, 1.2, 0.5, 0.0, 15.0),
    ch("DL_PRB_UTIL", 0.45, 0.1, 0.03, 0.0, 1.0),
    ch("UL_PRB_UTIL", 0.35, 0.1, 0.03, 0.0, 1.0),
    ch("DL_CCE_FAIL_RATE", 0.01, 0.005, 0.004, 0.0, 1.0),
    ch("UL_CCE_FAIL_RATE", 0.01, 0.005, 0.004, 0.0, 1.0),
    ch("CCE_UTIL_RATE", 0.4, 0.08, 0.03, 0.0, 1.0),
    ch("DL_CCE_USAGE_RATIO", 0.55, 0.05, 0.02, 0.0, 1.0),
    ch("COMMON_CCE_USAGE", 0.15, 0.03, 0.015, 0.0, 1.0),
    ch("UL_CCE_USAGE_RATIO", 0.3, 0.05, 0.02, 0.0, 1.0),
    ch("UL_SCHED_FAIL_RATE_CCE", 0.01, 0.005, 0.004, 0.0, 1.0),
    ch("UL_SCHED_FAIL_CNT_CCE", 4.0, 2.0, 1.5, 0.0, BIG),
    ch("DL_SCHED_FAIL_RATE_CCE", 0.01, 0.005, 0.004, 0.0, 1.0),
    ch("DL_SCHED_FAIL_CNT_CCE", 5.0, 2.0, 1.5, 0.0, BIG),
    ch("DL_CCE_FAIL_CNT_TOTAL", 8.0, 3.0, 2.0, 0.0, BIG),
    ch("DL_CCE_FAIL_RATE_TOTAL", 0.01, 0.005, 0.004, 0.0, 1.0),
    ch("DL_CCE_FAIL_CNT_QUOTA", 3.0, 1.5, 1.0, 0.0, BIG),
    ch("DL_CCE_FAIL_CNT_CONFLICT", 3.0, 1.5, 1.0, 0.0, BIG),
    ch("UL_CCE_FAIL_CNT_TOTAL", 6.0, 2.0, 1.5, 0.0, BIG),
    ch("UL_CCE_FAIL_RATE_TOTAL", 0.01, 0.005, 0.004, 0.0, 1.0),
    ch("UL_CCE_FAIL_CNT_CONFLICT", 2.0, 1.0, 1.0, 0.0, BIG),
    ch("DL_RLC_TPUT", 20.0, 7.0, 2.5, 0.0, BIG),
    ch("DL_RLC_LASTTTI_RATIO", 0.3, 0.07, 0.04, 0.0, 1.0),
    ch("UL_RLC_TPUT", 5.0, 2.0, 0.8, 0.0, BIG),
    ch("UL_RLC_SMALLPKT_RATIO", 0.3, 0.07, 0.04, 0.0, 1.0),
    ch("PDCP_DL_TPUT", 22.0, 7.0, 2.5, 0.0, BIG),
    ch("PDCP_DL_LATENCY", 60.0, 15.0, 8.0, 0.0, BIG),
    ch("PDCP_UL_TPUT", 5.5, 2.0, 0.8, 0.0, BIG),
    ch("PDCP_UL_LATENCY", 50.0, 12.0, 8.0, 0.0, BIG),
    ch("RLC_UL_LATENCY", 40.0, 10.0, 6.0, 0.0, BIG),
    ch("RLC_DL_LATENCY", 45.0, 10.0, 6.0, 0.0, BIG),
    ch("UL_RLC_RETX_SDU", 6.0, 3.0, 2.0, 0.0, BIG),
    ch("UL_RLC_SDU", 200.0, 50.0, 15.0, 1.0, BIG),
    ch("UL_RBLER", 0.03, 0.01, 0.008, 0.0, 1.0),
    ch("DL_RBLER", 0.03, 0.01, 0.008, 0.0, 1.0),
    ch("UL_DTX_Ratio", 0.05, 0.02, 0.012, 0.0, 1.0),
    ch("UL_MAC_HARQ_RETX_MAX", 8.0, 3.0, 2.0, 0.0, BIG),
    ch("DL_MAC_HARQ_RETX_MAX", 8.0, 3.0, 2.0, 0.0, BIG),
    ch("UL_DMRS_RSRP_MIN", -102.0, 6.0, 2.0, -140.0, -44.0),
];

/// Channels reported as whole numbers.
const INTEGER_CHANNELS: &[&str] = &["RSRP_DIFF_NEIGH_CNT"];

/// `(child, parent)`: the child reuses the parent's session offset draw.
const COUPLED: &[(&str, &str)] = &[
    ("UL_DMRS_RSRP_MIN", "UL_DMRS_RSRP_AVG"),
    ("UL_SRS_RSRP", "UL_DMRS_RSRP_AVG"),
    ("RLC_UL_LATENCY", "PDCP_UL_LATENCY"),
    ("RLC_DL_LATENCY", "PDCP_DL_LATENCY"),
    ("PDCP_DL_TPUT", "DL_RLC_TPUT"),
    ("PDCP_UL_TPUT", "UL_RLC_TPUT"),
    ("UL_WB_PRE_SINR", "UL_DMRS_SINR"),
];

/// Episode shift of each channel at full severity.
fn signature(class: RootCause) -> &'static [(&'static str, f64)] {
    match class {
        RootCause::UplinkInterference => &[
            ("PDCP_UL_LATENCY", 220.0),
            ("RLC_UL_LATENCY", 200.0),
            ("UL_WB_PRE_SINR", -16.0),
            ("UL_DMRS_SINR", -18.0),
            ("UL_RBLER", 0.12),
            ("UL_MAC_HARQ_RETX_MAX", 35.0),
            ("UL_RLC_RETX_SDU", 25.0),
            ("UL_RLC_TPUT", -2.5),
            ("PDCP_UL_TPUT", -2.5),
            ("UL_PRB_UTIL", 0.15),
        ],
        RootCause::UplinkWeakCoverage => &[
            ("PDCP_UL_LATENCY", 220.0),
            ("RLC_UL_LATENCY", 200.0),
            ("UL_DMRS_RSRP_AVG", -28.0),
            ("UL_DMRS_RSRP_MIN", -30.0),
            ("UL_SRS_RSRP", -30.0),
            ("UL_DTX_Ratio", 0.2),
            ("UL_RLC_RETX_SDU", 30.0),
            ("UL_DMRS_SINR", -7.0),
            ("UL_WB_PRE_SINR", -6.0),
            ("UL_RLC_SMALLPKT_RATIO", 0.2),
            ("UL_RLC_TPUT", -3.0),
            ("PDCP_UL_TPUT", -3.0),
        ],
        RootCause::DownlinkInterference => &[
            ("PDCP_DL_LATENCY", 220.0),
            ("RLC_DL_LATENCY", 200.0),
            ("SS_SINR", -17.0),
            ("RSRP_DIFF_NEIGH_CNT", 4.0),
            ("TOP1_NEIGH_SSB_RSRP", 18.0),
            ("SERV_SSB_RSRQ", -6.0),
            ("DL_RBLER", 0.12),
            ("DL_MAC_HARQ_RETX_MAX", 30.0),
            ("CQI_AVG_CW0", -4.0),
            ("DL_RLC_TPUT", -10.0),
            ("PDCP_DL_TPUT", -10.0),
        ],
        RootCause::DownlinkWeakCoverage => &[
            ("PDCP_DL_LATENCY", 220.0),
            ("RLC_DL_LATENCY", 200.0),
            ("SERV_SSB_RSRP", -30.0),
            ("CQI_AVG_CW0", -6.0),
            ("TOP1_NEIGH_SSB_RSRP", -12.0),
            ("SS_SINR", -6.0),
            ("SERV_SSB_RSRQ", -3.0),
            ("DL_RBLER", 0.05),
            ("DL_RLC_TPUT", -12.0),
            ("PDCP_DL_TPUT", -12.0),
            ("DL_RLC_LASTTTI_RATIO", 0.2),
        ],
        RootCause::TrafficChannelOverload => &[
            ("PDCP_DL_LATENCY", 200.0),
            ("RLC_DL_LATENCY", 150.0),
            ("PDCP_UL_LATENCY", 80.0),
            ("DL_PRB_UTIL", 0.5),
            ("UL_PRB_UTIL", 0.35),
            ("DL_RLC_LASTTTI_RATIO", -0.15),
            ("DL_RLC_TPUT", -8.0),
            ("PDCP_DL_TPUT", -8.0),
            ("CCE_UTIL_RATE", 0.2),
            ("DL_CCE_USAGE_RATIO", 0.1),
        ],
        RootCause::ControlChannelOverload => &[
            ("PDCP_DL_LATENCY", 200.0),
            ("RLC_DL_LATENCY", 150.0),
            ("PDCP_UL_LATENCY", 120.0),
            ("CCE_UTIL_RATE", 0.5),
            ("DL_CCE_FAIL_RATE", 0.15),
            ("UL_CCE_FAIL_RATE", 0.1),
            ("DL_SCHED_FAIL_RATE_CCE", 0.12),
            ("UL_SCHED_FAIL_RATE_CCE", 0.1),
            ("DL_SCHED_FAIL_CNT_CCE", 40.0),
            ("UL_SCHED_FAIL_CNT_CCE", 30.0),
            ("DL_CCE_FAIL_CNT_TOTAL", 50.0),
            ("DL_CCE_FAIL_RATE_TOTAL", 0.12),
            ("DL_CCE_FAIL_CNT_QUOTA", 20.0),
            ("DL_CCE_FAIL_CNT_CONFLICT", 15.0),
            ("UL_CCE_FAIL_CNT_TOTAL", 35.0),
            ("UL_CCE_FAIL_RATE_TOTAL", 0.1),
            ("UL_CCE_FAIL_CNT_CONFLICT", 12.0),
            ("COMMON_CCE_USAGE", 0.15),
            ("DL_PRB_UTIL", 0.2),
        ],
    }
}

pub fn partner(class: RootCause) -> RootCause {
    use RootCause::*;
    match class {
        UplinkInterference => UplinkWeakCoverage,
        UplinkWeakCoverage => UplinkInterference,
        DownlinkInterference => DownlinkWeakCoverage,
        DownlinkWeakCoverage => DownlinkInterference,
        TrafficChannelOverload => ControlChannelOverload,
        ControlChannelOverload => TrafficChannelOverload,
    }
}

/// Shape of the generated data. Defaults are the calibrated regime.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorParams {
    /// Partner-rule probability at severity 0.5 and below.
    pub mimic_max: f64,
    /// No partner-rule samples at or above this severity.
    pub clean_above: f64,
    /// Exponent of the mimic probability curve between 0.5 and `clean_above`.
    pub mimic_shape: f64,
    pub signature_gain: f64,
    /// Per-sample multiplicative jitter of each signature shift.
    pub signature_jitter: f64,
    pub session_gain: f64,
    pub noise_gain: f64,
    pub ar_phi: f64,
    pub episode_min: usize,
    pub episode_max: usize,
    /// Upper bound on random transient bursts per sample.
    pub max_bursts: usize,
    /// Burst amplitude in units of the channel's session + noise spread.
    pub burst_amplitude: f64,
    /// Planted-condition margin in units of channel noise.
    pub plant_margin: f64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            mimic_max: 0.35,
            clean_above: 0.8,
            mimic_shape: 0.0,
            signature_gain: 0.6,
            signature_jitter: 0.2,
            session_gain: 1.0,
            noise_gain: 1.0,
            ar_phi: 0.5,
            episode_min: 10,
            episode_max: 20,
            max_bursts: 3,
            burst_amplitude: 3.0,
            plant_margin: 1.0,
        }
    }
}

impl GeneratorParams {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.mimic_max) || !unit(self.clean_above) || !unit(self.ar_phi.abs()) {
            return config_err("mimic_max, clean_above and |ar_phi| must lie in [0, 1]");
        }
        if self.episode_min < 3 || self.episode_min > self.episode_max {
            return config_err("episode length range must satisfy 3 <= min <= max");
        }
        for v in [
            self.mimic_shape,
            self.signature_gain,
            self.signature_jitter,
            self.session_gain,
            self.noise_gain,
            self.burst_amplitude,
            self.plant_margin,
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return config_err("generator gains must be finite and non-negative");
            }
        }
        Ok(())
    }

    pub fn mimic_probability(&self, severity: f64) -> f64 {
        if severity >= self.clean_above {
            return 0.0;
        }
        let span = (self.clean_above - 0.5).max(1e-9);
        let u = ((self.clean_above - severity) / span).clamp(0.0, 1.0);
        self.mimic_max * u.powf(self.mimic_shape)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub class_id: u8,
    pub n_samples: usize,
    pub seed: u64,
    pub severity: f64,
    pub l: usize,
}

/// One generated session plus the generator's bookkeeping.
#[derive(Clone, Debug)]
pub struct Generated {
    pub sample: KpiSample,
    pub class: RootCause,
    /// Class whose rule was made to fire.
    pub rule_target: RootCause,
    pub severity: f64,
}

/// Generator bound to a schema and a rule set.
pub struct Generator<'a> {
    models: Vec<ChannelModel>,
    integer: Vec<bool>,
    couple_parent: Vec<Option<usize>>,
    signatures: Vec<Vec<(usize, f64)>>,
    rules: &'a CompiledRuleSet,
    params: GeneratorParams,
    l: usize,
}

impl<'a> Generator<'a> {
    pub fn new(schema: &KpiSchema, rules: &'a CompiledRuleSet, params: GeneratorParams, l: usize) -> Result<Self> {
        params.validate()?;
        if l < params.episode_min + 2 {
            return config_err(format!("sequence length {l} too short for episodes of {}", params.episode_min));
        }
        let mut models = Vec::with_capacity(schema.m());
        for name in schema.names() {
            // Channels the generator has no model for are flat noise.
            let m = CHANNELS
                .iter()
                .find(|c| c.name == name)
                .copied()
                .unwrap_or(ch("", 0.0, 1.0, 0.3, -BIG, BIG));
            models.push(m);
        }
        for c in CHANNELS {
            if schema.index(c.name).is_none() {
                return data_err(format!("schema is missing generator channel `{}`", c.name));
            }
        }
        let integer = schema.names().map(|n| INTEGER_CHANNELS.contains(&n)).collect();
        let mut couple_parent = vec![None; schema.m()];
        for (child, parent) in COUPLED {
            couple_parent[schema.require(child)?] = Some(schema.require(parent)?);
        }
        let signatures = RootCause::ALL
            .iter()
            .map(|&c| signature(c).iter().map(|&(n, d)| Ok((schema.require(n)?, d))).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            models,
            integer,
            couple_parent,
            signatures,
            rules,
            params,
            l,
        })
    }

    pub fn params(&self) -> &GeneratorParams {
        &self.params
    }

    /// Deterministic in `(rng state, class, severity)`.
    pub fn generate(&self, id: String, class: RootCause, severity: f64, rng: &mut Rng) -> Result<Generated> {
        if !(0.0..=1.0).contains(&severity) {
            return config_err(format!("severity {severity} outside [0, 1]"));
        }
        let p = &self.params;
        let m = self.models.len();
        let l = self.l;
        let mut x = vec![0.0; m * l];

        let session: Vec<f64> = (0..m).map(|_| rng.normal()).collect();
        for c in 0..m {
            let md = &self.models[c];
            let z = self.couple_parent[c].map_or(session[c], |q| 0.7 * session[q] + 0.3 * session[c]);
            let offset = md.base + p.session_gain * md.session_sd * z;
            let innov = (1.0 - p.ar_phi * p.ar_phi).sqrt();
            let mut e = rng.normal() * md.noise_sd;
            for t in 0..l {
                x[c * l + t] = offset + p.noise_gain * e;
                e = p.ar_phi * e + innov * md.noise_sd * rng.normal();
            }
        }

        let profile = self.episode(rng);
        for &(c, delta) in &self.signatures[class.index()] {
            let jitter = 1.0 + p.signature_jitter * rng.normal();
            let amp = p.signature_gain * severity * delta * jitter.max(0.0);
            for t in 0..l {
                x[c * l + t] += profile[t] * amp;
            }
        }

        let bursts = rng.below(p.max_bursts + 1);
        for _ in 0..bursts {
            let c = rng.below(m);
            let width = rng.int_inclusive(2, 6).min(l);
            let start = rng.below(l - width + 1);
            let md = &self.models[c];
            let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
            let amp = sign * p.burst_amplitude * (md.session_sd + md.noise_sd) * rng.uniform_range(0.5, 1.0);
            for t in start..start + width {
                x[c * l + t] += amp;
            }
        }

        for c in 0..m {
            let md = &self.models[c];
            for v in &mut x[c * l..(c + 1) * l] {
                *v = v.clamp(md.lo, md.hi);
                if self.integer[c] {
                    *v = v.round();
                }
            }
        }

        let mimic = rng.uniform() < p.mimic_probability(severity);
        let target = if mimic { partner(class) } else { class };
        let margin_scale = p.plant_margin * (1.0 + 2.0 * severity);
        if let Some(rule) = self.rules.rule(target) {
            for group in &rule.groups {
                if group.iter().any(|c| holds_raw(c, &x, l)) {
                    continue;
                }
                let best = group
                    .iter()
                    .max_by(|a, b| self.closeness(a, &x).partial_cmp(&self.closeness(b, &x)).unwrap())
                    .unwrap();
                self.plant(best, &mut x, &profile, margin_scale, rng);
            }
        }
        for rule in &self.rules.rules {
            if rule.class == target {
                continue;
            }
            for cond in rule.groups.last().unwrap() {
                self.block(cond, &mut x);
            }
        }

        let sample = KpiSample::from_rows(id, m, l, x)?;
        let got = rule_label(&sample, self.rules)?;
        let expected = self.rules.rule(target).map(|_| target);
        if got != expected {
            return data_err(format!(
                "generator could not realise rule target {target:?} for sample `{}` (rules gave {got:?})",
                sample.id
            ));
        }
        Ok(Generated {
            sample,
            class,
            rule_target: target,
            severity,
        })
    }

    /// Trapezoid in [0, 1]: ramp up, plateau of at least one step, ramp down.
    fn episode(&self, rng: &mut Rng) -> Vec<f64> {
        let l = self.l;
        let p = &self.params;
        let dur = rng.int_inclusive(p.episode_min, p.episode_max).min(l - 2);
        let ramp = 3.min((dur - 1) / 2);
        let start = rng.int_inclusive(1, l - dur - 1);
        let mut prof = vec![0.0; l];
        for (k, v) in prof[start..start + dur].iter_mut().enumerate() {
            let up = (k + 1) as f64 / (ramp + 1) as f64;
            let down = (dur - k) as f64 / (ramp + 1) as f64;
            *v = up.min(down).min(1.0);
        }
        prof
    }

    /// How far the condition already leans toward holding, in noise units.
    fn closeness(&self, c: &CompiledCondition, x: &[f64]) -> f64 {
        let l = self.l;
        let sample_view = reduced_raw(c, x, l);
        let sd = match c.ratio_denominator() {
            Some(_) => c.threshold.abs().max(0.01),
            None => self.models[c.channel()].noise_sd.max(1e-9),
        };
        let d = (sample_view - c.threshold) / sd;
        if c.comparator.is_upper() {
            d
        } else {
            -d
        }
    }

    fn plant(&self, c: &CompiledCondition, x: &mut [f64], profile: &[f64], margin_scale: f64, rng: &mut Rng) {
        let l = self.l;
        let ch = c.channel();
        let md = self.models[ch];
        let up = c.comparator.is_upper();
        let sgn = if up { 1.0 } else { -1.0 };
        match c.ratio_denominator() {
            Some((den, eps)) => {
                let r = c.threshold + sgn * 0.25 * c.threshold.abs().max(0.01) * margin_scale;
                for t in 0..l {
                    let want = r * (x[den * l + t] + eps);
                    let cur = x[ch * l + t];
                    let gap = if up { (want - cur).max(0.0) } else { (want - cur).min(0.0) };
                    x[ch * l + t] = cur + profile[t] * gap;
                }
            }
            None => {
                let mut target = c.threshold + sgn * md.noise_sd * margin_scale;
                if !(md.lo..=md.hi).contains(&target) {
                    target = 0.5 * (c.threshold + if up { md.hi } else { md.lo });
                }
                for t in 0..l {
                    let jitter = sgn * 0.5 * md.noise_sd * rng.normal().abs();
                    let want = (target + jitter).clamp(md.lo, md.hi);
                    let cur = x[ch * l + t];
                    let gap = if up { (want - cur).max(0.0) } else { (want - cur).min(0.0) };
                    let mut v = cur + profile[t] * gap;
                    if self.integer[ch] {
                        v = if up { v.ceil() } else { v.floor() };
                    }
                    x[ch * l + t] = v;
                }
            }
        }
    }

    /// Clips every timestep onto the failing side of `c` with a margin.
    fn block(&self, c: &CompiledCondition, x: &mut [f64]) {
        let l = self.l;
        let ch = c.channel();
        let md = self.models[ch];
        let up = c.comparator.is_upper();
        match c.ratio_denominator() {
            Some((den, eps)) => {
                let thr = c.threshold.abs().max(0.01);
                let r = if up { c.threshold - 0.125 * thr } else { c.threshold + 0.125 * thr };
                for t in 0..l {
                    let lim = r * (x[den * l + t] + eps);
                    let v = &mut x[ch * l + t];
                    *v = if up { v.min(lim) } else { v.max(lim) };
                }
            }
            None => {
                let margin = 0.5 * md.noise_sd;
                let mut lim = if up { c.threshold - margin } else { c.threshold + margin };
                if self.integer[ch] {
                    lim = if up { (c.threshold - margin.max(1e-9)).floor() } else { (c.threshold + margin.max(1e-9)).ceil() };
                }
                for v in &mut x[ch * l..(ch + 1) * l] {
                    *v = if up { v.min(lim) } else { v.max(lim) };
                }
            }
        }
    }
}

fn reduced_raw(c: &CompiledCondition, x: &[f64], l: usize) -> f64 {
    let m = x.len() / l;
    // Borrowing the compiled evaluator keeps the reduction semantics in one place.
    let s = KpiSample::from_rows("", m, l, x.to_vec()).expect("finite generator values");
    c.reduced(&s)
}

fn holds_raw(c: &CompiledCondition, x: &[f64], l: usize) -> bool {
    c.comparator.holds(reduced_raw(c, x, l), c.threshold)
}

/// Generates `n_samples` sessions of one class at fixed severity.
pub fn synth_generate(
    config: &ScenarioConfig,
    schema: &KpiSchema,
    rules: &CompiledRuleSet,
    params: &GeneratorParams,
) -> Result<Vec<KpiSample>> {
    let class = RootCause::from_id(config.class_id)?;
    if config.n_samples < 1 {
        return config_err("n_samples >= 1 required");
    }
    let gen = Generator::new(schema, rules, params.clone(), config.l)?;
    let root = Rng::seed_from_u64(config.seed).split("scenario").split_index("class", class.id() as u64);
    let out = par::map_indexed(config.n_samples, |i| {
        let mut rng = root.split_index("sample", i as u64);
        gen.generate(format!("c{}-{i:05}", class.id()), class, config.severity, &mut rng)
            .map(|g| g.sample)
    });
    out.into_iter().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolConfig {
    pub n_rule: usize,
    pub n_expert: usize,
    /// Extra expert-labelled sessions reserved for measuring test accuracy.
    pub n_holdout: usize,
    pub l: usize,
    pub seed: u64,
    pub rule_severity: [f64; 2],
    pub expert_severity: [f64; 2],
    pub generator: GeneratorParams,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            n_rule: 3000,
            n_expert: 185,
            n_holdout: 600,
            l: crate::dataset::DEFAULT_LEN,
            seed: 2024,
            rule_severity: [0.5, 1.0],
            expert_severity: [0.5, 1.0],
            generator: GeneratorParams::default(),
        }
    }
}

impl PoolConfig {
    /// Shrinks pool sizes by `factor` (floor); expert-labelled pools keep at
    /// least one sample per class.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0 && factor <= 1.0) {
            return config_err(format!("scale {factor} must be in (0, 1]"));
        }
        let f = |n: usize| (n as f64 * factor).floor() as usize;
        Ok(Self {
            n_rule: f(self.n_rule).max(1),
            n_expert: f(self.n_expert).max(6),
            n_holdout: f(self.n_holdout).max(6),
            ..self.clone()
        })
    }
}

pub struct Pools {
    pub rule: LabeledDataset,
    /// Generating class of each rule-pool sample.
    pub rule_truth: Vec<RootCause>,
    pub expert: LabeledDataset,
    pub holdout: LabeledDataset,
}

impl Pools {
    /// Fraction of rule-pool labels that differ from the generating class.
    pub fn rule_noise_rate(&self) -> f64 {
        let wrong = self.rule.labels.iter().zip(&self.rule_truth).filter(|(a, b)| a != b).count();
        wrong as f64 / self.rule.len().max(1) as f64
    }
}

fn severity_in(range: [f64; 2], rng: &mut Rng) -> f64 {
    rng.uniform_range(range[0], range[1])
}

/// Rule-labelled, expert-labelled and holdout pools. Classes cycle through
/// 1..6 so generated classes are balanced; rule-pool candidates for which no
/// rule fires are discarded.
pub fn generate_pools(cfg: &PoolConfig, schema: &KpiSchema, rules: &CompiledRuleSet) -> Result<Pools> {
    for r in [cfg.rule_severity, cfg.expert_severity] {
        if !(0.0 <= r[0] && r[0] <= r[1] && r[1] <= 1.0) {
            return config_err(format!("severity range {r:?} must satisfy 0 <= lo <= hi <= 1"));
        }
    }
    let gen = Generator::new(schema, rules, cfg.generator.clone(), cfg.l)?;
    let root = Rng::seed_from_u64(cfg.seed).split("pools");

    let expert_like = |label: &str, prefix: &str, n: usize| -> Result<LabeledDataset> {
        let stream = root.split(label);
        let got = par::map_indexed(n, |i| {
            let mut rng = stream.split_index("sample", i as u64);
            let class = RootCause::from_index(i % 6);
            let s = severity_in(cfg.expert_severity, &mut rng);
            gen.generate(format!("{prefix}{i:05}"), class, s, &mut rng)
        });
        let got = got.into_iter().collect::<Result<Vec<_>>>()?;
        let labels = got.iter().map(|g| g.class).collect();
        LabeledDataset::uniform(schema.clone(), got.into_iter().map(|g| g.sample).collect(), labels, LabelSource::Expert)
    };
    let expert = expert_like("expert", "e", cfg.n_expert)?;
    let holdout = expert_like("holdout", "h", cfg.n_holdout)?;

    let stream = root.split("rule");
    let mut samples = Vec::with_capacity(cfg.n_rule);
    let mut labels = Vec::with_capacity(cfg.n_rule);
    let mut truth = Vec::with_capacity(cfg.n_rule);
    let mut next = 0usize;
    let batch = 256;
    while samples.len() < cfg.n_rule {
        if next > 20 * cfg.n_rule + 1000 {
            return data_err("rules fire too rarely to fill the rule-labelled pool");
        }
        let got = par::map_indexed(batch, |k| {
            let i = next + k;
            let mut rng = stream.split_index("sample", i as u64);
            let class = RootCause::from_index(i % 6);
            let s = severity_in(cfg.rule_severity, &mut rng);
            let g = gen.generate(format!("r{i:05}"), class, s, &mut rng)?;
            let y = rule_label(&g.sample, rules)?;
            Ok::<_, crate::error::RcaError>((g, y))
        });
        next += batch;
        for item in got {
            let (g, y) = item?;
            if samples.len() == cfg.n_rule {
                break;
            }
            if let Some(y) = y {
                samples.push(g.sample);
                labels.push(y);
                truth.push(g.class);
            }
        }
    }
    let rule = LabeledDataset::uniform(schema.clone(), samples, labels, LabelSource::Rule)?;
    Ok(Pools {
        rule,
        rule_truth: truth,
        expert,
        holdout,
    })
}
