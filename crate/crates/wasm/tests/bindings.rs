use univharm_wasm::{contraction_trace, demo, metric, metric_json};

#[test]
fn bindings_return_json() {
    let trace: serde_json::Value = serde_json::from_str(&contraction_trace(8, -1).unwrap()).unwrap();
    assert_eq!(trace["levels"].as_array().unwrap().len(), 8);
    assert_eq!(trace["policy"], "ArgminQ");

    let a = r#"{"level": 2, "m": 1, "values": [[["1/1","0/1"]], [["1/1","0/1"]], [["0/1","0/1"]], [["0/1","1/1"]]]}"#;
    let b = r#"{"level": 0, "m": 1, "values": [[["0/1","0/1"]]]}"#;
    let out: serde_json::Value = serde_json::from_str(&metric("binary", a, b).unwrap()).unwrap();
    assert_eq!(out["P_exact"], "3/8");
    assert_eq!(metric_json("binary", a, b).unwrap(), out);

    let report: serde_json::Value = serde_json::from_str(&demo(64, 1, "1/10", 3).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
}
