//! Trace JSONL serialization.
//!
//! One line per generation step, wrapping a [`StepTrace`] with the corpus
//! item id and the run seed so per-item curves can be rebuilt later. Floats
//! are written with 17 significant digits, which round-trips `f64` exactly
//! and keeps repeated runs byte-identical.

use std::fmt::Write as _;

use serde::Deserialize;

use crate::backend::TokenId;
use crate::engine::StepTrace;

/// Formats a float with 17 significant digits as a JSON number literal.
pub fn format_f64(v: f64) -> String {
    debug_assert!(v.is_finite(), "trace floats are finite by construction");
    format!("{v:.16e}")
}

fn push_opt_float(out: &mut String, name: &str, value: Option<f64>) {
    if let Some(v) = value {
        let _ = write!(out, ",\"{name}\":{}", format_f64(v));
    }
}

fn push_usize_list(out: &mut String, name: &str, values: &[usize]) {
    let _ = write!(out, ",\"{name}\":[");
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "{v}");
    }
    out.push(']');
}

fn push_u32_list(out: &mut String, name: &str, values: &[u32]) {
    let _ = write!(out, ",\"{name}\":[");
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "{v}");
    }
    out.push(']');
}

fn push_top_k(out: &mut String, name: &str, entries: &[(u32, f64)]) {
    let _ = write!(out, ",\"{name}\":[");
    for (i, (id, p)) in entries.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "[{id},{}]", format_f64(*p));
    }
    out.push(']');
}

/// Renders one trace line (without the trailing newline).
pub fn trace_line(id: &str, seed: u64, trace: &StepTrace) -> String {
    let mut out = String::with_capacity(256);
    let id_json = serde_json::to_string(id).expect("string serializes");
    let _ = write!(
        out,
        "{{\"id\":{id_json},\"seed\":{seed},\"step\":{},\"chosen\":{}",
        trace.step, trace.chosen.0
    );
    push_opt_float(&mut out, "alpha2", trace.alpha2);
    if let Some(eta) = trace.eta {
        let _ = write!(out, ",\"eta\":{eta}");
    }
    if let Some(kept) = &trace.kept_text_positions {
        push_usize_list(&mut out, "kept_text_positions", kept);
    }
    if let Some(pruned) = &trace.pruned_text_tokens {
        push_u32_list(&mut out, "pruned_text_tokens", pruned);
    }
    if let Some(kept) = &trace.kept_visual_positions {
        push_usize_list(&mut out, "kept_visual_positions", kept);
    }
    push_top_k(&mut out, "top_orig", &trace.top_orig);
    if let Some(entries) = &trace.top_vis_hal {
        push_top_k(&mut out, "top_vis_hal", entries);
    }
    if let Some(entries) = &trace.top_vis_txt_hal {
        push_top_k(&mut out, "top_vis_txt_hal", entries);
    }
    push_opt_float(&mut out, "vd", trace.vd);
    push_opt_float(&mut out, "vtd", trace.vtd);
    push_opt_float(&mut out, "jsd_hal", trace.jsd_hal);
    out.push('}');
    out
}

/// One parsed trace line: a [`StepTrace`] plus its item id and run seed.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct TraceLine {
    pub id: String,
    pub seed: u64,
    pub step: u64,
    pub chosen: TokenId,
    #[serde(default)]
    pub alpha2: Option<f64>,
    #[serde(default)]
    pub eta: Option<usize>,
    #[serde(default)]
    pub kept_text_positions: Option<Vec<usize>>,
    #[serde(default)]
    pub pruned_text_tokens: Option<Vec<u32>>,
    #[serde(default)]
    pub kept_visual_positions: Option<Vec<usize>>,
    pub top_orig: Vec<(u32, f64)>,
    #[serde(default)]
    pub top_vis_hal: Option<Vec<(u32, f64)>>,
    #[serde(default)]
    pub top_vis_txt_hal: Option<Vec<(u32, f64)>>,
    #[serde(default)]
    pub vd: Option<f64>,
    #[serde(default)]
    pub vtd: Option<f64>,
    #[serde(default)]
    pub jsd_hal: Option<f64>,
}

impl TraceLine {
    pub fn parse(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(line)
    }

    pub fn into_step_trace(self) -> StepTrace {
        StepTrace {
            step: self.step,
            chosen: self.chosen,
            alpha2: self.alpha2,
            eta: self.eta,
            kept_text_positions: self.kept_text_positions,
            pruned_text_tokens: self.pruned_text_tokens,
            kept_visual_positions: self.kept_visual_positions,
            top_orig: self.top_orig,
            top_vis_hal: self.top_vis_hal,
            top_vis_txt_hal: self.top_vis_txt_hal,
            vd: self.vd,
            vtd: self.vtd,
            jsd_hal: self.jsd_hal,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_trace() -> StepTrace {
        StepTrace {
            step: 3,
            chosen: TokenId(2),
            alpha2: Some(0.061_836_546_545_359_62),
            eta: Some(10),
            kept_text_positions: Some(vec![1, 2, 3]),
            pruned_text_tokens: Some(vec![5, 5]),
            kept_visual_positions: Some(vec![0]),
            top_orig: vec![(2, 0.5), (3, 0.25), (0, 0.125)],
            top_vis_hal: Some(vec![(3, 0.75), (2, 0.25)]),
            top_vis_txt_hal: None,
            vd: Some(0.25),
            vtd: None,
            jsd_hal: None,
        }
    }

    #[test]
    fn floats_use_17_significant_digits() {
        assert_eq!(format_f64(0.5), "5.0000000000000000e-1");
        assert_eq!(format_f64(1.0 / 3.0), "3.3333333333333331e-1");
        assert_eq!(format_f64(-2.0), "-2.0000000000000000e0");
    }

    #[test]
    fn formatted_floats_round_trip_exactly() {
        for &v in &[
            0.1,
            1.0 / 3.0,
            std::f64::consts::E - 1.0,
            1e-300,
            6.02e23,
            -0.061_836_546_545_359_62,
        ] {
            let parsed: f64 = format_f64(v).parse().unwrap();
            assert_eq!(parsed.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn line_round_trips_through_parser() {
        let trace = sample_trace();
        let line = trace_line("item-1", 42, &trace);
        let parsed = TraceLine::parse(&line).unwrap();
        assert_eq!(parsed.id, "item-1");
        assert_eq!(parsed.seed, 42);
        assert_eq!(parsed.into_step_trace(), trace);
    }

    #[test]
    fn absent_fields_stay_absent() {
        let trace = StepTrace {
            step: 1,
            chosen: TokenId(4),
            alpha2: None,
            eta: None,
            kept_text_positions: None,
            pruned_text_tokens: None,
            kept_visual_positions: None,
            top_orig: vec![(4, 1.0)],
            top_vis_hal: None,
            top_vis_txt_hal: None,
            vd: None,
            vtd: None,
            jsd_hal: None,
        };
        let line = trace_line("x", 0, &trace);
        assert!(!line.contains("alpha2"));
        assert!(!line.contains("vd"));
        assert!(!line.contains("kept_text_positions"));
        let parsed = TraceLine::parse(&line).unwrap();
        assert_eq!(parsed.into_step_trace(), trace);
    }

    #[test]
    fn id_strings_are_escaped() {
        let trace = sample_trace();
        let line = trace_line("we\"ird\\id", 1, &trace);
        let parsed = TraceLine::parse(&line).unwrap();
        assert_eq!(parsed.id, "we\"ird\\id");
    }

    #[test]
    fn line_is_valid_json() {
        let line = trace_line("item-1", 0, &sample_trace());
        let value: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(value["step"], 3);
        assert_eq!(value["chosen"], 2);
        assert!((value["top_orig"][0][1].as_f64().unwrap() - 0.5).abs() < 1e-15);
    }
}
