//! Browser bindings: the contraction trace of a single-target build, the
//! distance `P` between two simple functions, and a small double-genericity
//! demo. Every entry point returns a JSON string.

use std::sync::Arc;

use serde_json::{json, Value as Json};
use wasm_bindgen::prelude::*;

use univharm::builder::{build, BuildSpec, Target};
use univharm::schedule::{Block, Schedule};
use univharm::span::{double_genericity, DemoConfig};
use univharm::{CRat, CorrectionPolicy, Rational, SimpleFunction, TreeConfig};

/// Largest horizon the page accepts for the demo.
pub const DEMO_HORIZON_LIMIT: u64 = 720;

fn tree_from(config: &str, depth: usize) -> Result<Arc<TreeConfig>, String> {
    if config.trim().is_empty() || config.trim() == "binary" {
        return Ok(Arc::new(TreeConfig::binary(depth)));
    }
    let tree = TreeConfig::from_json(config).map_err(|e| e.to_string())?;
    Ok(Arc::new(tree.with_depth_cap(depth)))
}

fn rational(s: &str) -> Result<Rational, String> {
    s.trim().parse().map_err(|e: univharm::Error| e.to_string())
}

/// Level-by-level `P` for target `(1, 0)` on level 1, initial value 0, a
/// two-level transition and a hold to `horizon`.
pub fn contraction_trace_json(horizon: u64, fixed_child: Option<usize>) -> Result<Json, String> {
    if !(3..=64).contains(&horizon) {
        return Err(format!("horizon {horizon} outside 3..=64"));
    }
    let tree = Arc::new(TreeConfig::binary(horizon as usize));
    let one = CRat::one();
    let h = SimpleFunction::new(tree.clone(), 1, 1, vec![one, CRat::zero()]).map_err(|e| e.to_string())?;
    let schedule = Schedule {
        horizon,
        blocks: vec![Block { target: 1, eps: Rational::from_ratio(1, 5), transition: [1, 2], hold: [3, horizon] }],
    };
    let policy = fixed_child.map_or(CorrectionPolicy::ArgminQ, CorrectionPolicy::Fixed);
    let spec = BuildSpec::new(tree, vec![Target::new(h, "(1,0)")], schedule, vec![CRat::zero()]).with_policy(policy);
    let result = build(spec).map_err(|e| e.to_string())?;
    let rows: Vec<Json> = result
        .log
        .iter()
        .map(|r| {
            json!({
                "level": r.level,
                "P": r.p_exact.as_ref().map(ToString::to_string),
                "P_float": r.p_value,
                "bound": r.bound.as_ref().map(ToString::to_string),
            })
        })
        .collect();
    Ok(json!({"horizon": horizon, "policy": policy, "levels": rows}))
}

/// `P(a, b)` for two simple functions in the JSON file format.
pub fn metric_json(config: &str, a: &str, b: &str) -> Result<Json, String> {
    let parse = |s: &str| serde_json::from_str::<Json>(s).map_err(|e| e.to_string());
    let (a, b) = (parse(a)?, parse(b)?);
    let level = |d: &Json| d.get("level").and_then(Json::as_u64).unwrap_or(0) as usize;
    let tree = tree_from(config, level(&a).max(level(&b)).max(1))?;
    let f = SimpleFunction::<CRat>::from_json(tree.clone(), &a).map_err(|e| e.to_string())?;
    let g = SimpleFunction::<CRat>::from_json(tree, &b).map_err(|e| e.to_string())?;
    let p = f.metric_p(&g).map_err(|e| e.to_string())?;
    let exact = f.metric_p_exact(&g).map_err(|e| e.to_string())?;
    Ok(json!({"P": p, "P_exact": exact.map(|e| e.to_string())}))
}

/// The double-genericity demo on the binary tree at a small horizon.
pub fn demo_json(horizon: u64, targets: usize, eps: &str, seed: u64) -> Result<Json, String> {
    if horizon > DEMO_HORIZON_LIMIT {
        return Err(format!("horizon {horizon} exceeds the page limit {DEMO_HORIZON_LIMIT}"));
    }
    let config = DemoConfig { horizon, targets, eps: rational(eps)?, combos: 4, seed, ..DemoConfig::default() };
    let report = double_genericity(Arc::new(TreeConfig::binary(horizon as usize)), &config).map_err(|e| e.to_string())?;
    Ok(json!({"passed": report.passed(), "text": report.to_text(), "report": report.to_json()}))
}

fn respond(out: Result<Json, String>) -> Result<String, JsError> {
    out.map(|j| j.to_string()).map_err(|e| JsError::new(&e))
}

/// `fixed_child < 0` selects the smallest-weight child.
#[wasm_bindgen(js_name = contractionTrace)]
pub fn contraction_trace(horizon: u32, fixed_child: i32) -> Result<String, JsError> {
    respond(contraction_trace_json(horizon as u64, usize::try_from(fixed_child).ok()))
}

#[wasm_bindgen]
pub fn metric(config: &str, a: &str, b: &str) -> Result<String, JsError> {
    respond(metric_json(config, a, b))
}

#[wasm_bindgen]
pub fn demo(horizon: u32, targets: u32, eps: &str, seed: u32) -> Result<String, JsError> {
    respond(demo_json(horizon as u64, targets as usize, eps, seed as u64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contraction_trace_starts_with_the_known_values() {
        let out = contraction_trace_json(12, Some(1)).unwrap();
        let p: Vec<&str> = out["levels"].as_array().unwrap()[..3].iter().map(|r| r["P"].as_str().unwrap()).collect();
        assert_eq!(p, ["1/4", "1/6", "1/10"]);
        assert!(contraction_trace_json(2, None).is_err());
    }

    #[test]
    fn metric_of_file_format_functions() {
        let a = r#"{"level": 1, "m": 1, "values": [[["1/1", "0/1"]], [["0/1", "0/1"]]]}"#;
        let b = r#"{"level": 1, "m": 1, "values": [[["0/1", "0/1"]], [["0/1", "0/1"]]]}"#;
        let out = metric_json("binary", a, b).unwrap();
        assert_eq!(out["P_exact"], "1/4");
        assert!(metric_json("binary", a, "{").is_err());
    }

    #[test]
    fn small_demo_runs() {
        let out = demo_json(128, 2, "1/10", 1).unwrap();
        assert_eq!(out["passed"], true);
        assert!(out["text"].as_str().unwrap().contains("[FM]"));
        assert!(demo_json(10_000, 2, "1/10", 1).is_err());
    }
}
