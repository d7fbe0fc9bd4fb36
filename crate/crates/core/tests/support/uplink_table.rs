// Hand-built cases for the uplink weak-coverage rule. Each case starts from a
// sample meeting all five conditions at timestep 1 (zeros elsewhere) and edits
// a few channels.

use qoe_rca::{KpiSample, KpiSchema, RootCause};

pub struct Case {
    pub name: &'static str,
    pub edits: &'static [(&'static str, f64)],
    pub expected: Option<RootCause>,
}

const BASE: &[(&str, f64)] = &[
    ("PDCP_UL_LATENCY", 250.0),
    ("RLC_UL_LATENCY", 210.0),
    ("UL_RLC_RETX_SDU", 2.0),
    ("UL_RLC_SDU", 10.0),
    ("UL_RBLER", 0.15),
    ("UL_DMRS_RSRP_MIN", -130.0),
];

const C2: Option<RootCause> = Some(RootCause::UplinkWeakCoverage);

pub const CASES: &[Case] = &[
    Case { name: "all five hold", edits: &[], expected: C2 },
    Case { name: "pdcp latency just below", edits: &[("PDCP_UL_LATENCY", 199.99)], expected: None },
    Case { name: "pdcp latency at threshold", edits: &[("PDCP_UL_LATENCY", 200.0)], expected: C2 },
    Case { name: "rlc latency just below", edits: &[("RLC_UL_LATENCY", 199.99)], expected: None },
    Case { name: "zero sdu, retx 2e-6", edits: &[("UL_RLC_SDU", 0.0), ("UL_RLC_RETX_SDU", 2e-6)], expected: C2 },
    Case { name: "zero sdu, retx 5e-7", edits: &[("UL_RLC_SDU", 0.0), ("UL_RLC_RETX_SDU", 5e-7)], expected: None },
    Case { name: "ratio above 0.1 only without epsilon", edits: &[("UL_RLC_RETX_SDU", 1.0000002)], expected: None },
    Case { name: "ratio above 0.1 with epsilon", edits: &[("UL_RLC_RETX_SDU", 1.000002)], expected: C2 },
    Case { name: "rbler just below", edits: &[("UL_RBLER", 0.0999)], expected: None },
    Case { name: "dtx at threshold rescues", edits: &[("UL_RBLER", 0.0999), ("UL_DTX_Ratio", 0.2)], expected: C2 },
    Case { name: "dmrs rsrp at threshold", edits: &[("UL_DMRS_RSRP_MIN", -125.0)], expected: C2 },
    Case { name: "both rsrp conditions fail", edits: &[("UL_DMRS_RSRP_MIN", -120.0), ("UL_SRS_RSRP", -125.0)], expected: None },
];

pub const LEN: usize = 4;

pub fn build(schema: &KpiSchema, edits: &[(&str, f64)]) -> KpiSample {
    let m = schema.m();
    let mut data = vec![0.0; m * LEN];
    for &(name, v) in BASE.iter().chain(edits) {
        data[schema.index(name).unwrap() * LEN + 1] = v;
    }
    KpiSample::from_rows("case", m, LEN, data).unwrap()
}
