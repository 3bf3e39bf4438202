//! The module driven from an embedded interpreter.

use pyo3::ffi::c_str;
use pyo3::prelude::*;
use simstudent::simstudent;

fn with_module<R>(f: impl FnOnce(Python<'_>) -> PyResult<R>) -> R {
    static INIT: std::sync::Once = std::sync::Once::new();
    INIT.call_once(|| {
        pyo3::append_to_inittab!(simstudent);
        Python::initialize();
    });
    Python::attach(|py| f(py).unwrap_or_else(|e| panic!("{e}")))
}

#[test]
fn profiles_metrics_and_filter_from_python() {
    with_module(|py| {
        py.run(
            c_str!(
                r#"
import simstudent as s
p = s.sample_profile(3)
assert p == s.sample_profile(3)
assert s.validate_profile(p) == []
assert p["major"] in s.render_profile(p)
assert s.filter_candidates(["a", "b"], [9.0, 8.0], [9.0, 9.0], 8.0) == ["a"]
assert s.filter_candidates(["a", "b"], [9.0, 8.0], [9.0, 9.0], 8.0, rule="average") == ["a", "b"]
m = s.ranking_metrics({"a": 9.0, "b": 7.0}, {"a": 6.0, "b": 9.0}, k=2)
assert m["precision"] == 0.5 and m["pairwise_accuracy"] == 0.0
"#
            ),
            None,
            None,
        )
    });
}

#[test]
fn propagation_preserves_uniform_scores() {
    let scores: Vec<f64> = with_module(|py| {
        let m = py.import("simstudent")?;
        let out = m.getattr("propagate")?.call1((vec![vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0]], vec![5.0; 3]))?;
        out.get_item("scores")?.extract()
    });
    assert!(scores.iter().all(|x| (x - 5.0).abs() < 1e-9), "{scores:?}");
}

#[test]
fn errors_map_to_python_exceptions() {
    with_module(|py| {
        py.run(
            c_str!(
                r#"
import simstudent as s
try:
    s.filter_candidates(["a"], [9.0], [9.0], rule="sometimes")
    raise AssertionError("bad rule accepted")
except ValueError:
    pass
try:
    s.run_pipeline("/nonexistent/out", config="/nonexistent/config.toml")
    raise AssertionError("missing config accepted")
except s.PipelineError as e:
    assert e.args[1] == 2, e.args
"#
            ),
            None,
            None,
        )
    });
}
