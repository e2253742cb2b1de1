use pyo3::prelude::*;
use pyo3::types::PyDict;

fn with_module<R>(f: impl FnOnce(Python<'_>, &Bound<'_, PyDict>) -> R) -> R {
    Python::initialize();
    Python::attach(|py| {
        let m = pyo3::wrap_pymodule!(artprompt_py::python_module)(py);
        let globals = PyDict::new(py);
        globals.set_item("ap", m).unwrap();
        f(py, &globals)
    })
}

fn run(py: Python<'_>, globals: &Bound<'_, PyDict>, code: &str) {
    let code = std::ffi::CString::new(code).unwrap();
    if let Err(e) = py.run(&code, Some(globals), None) {
        e.display(py);
        panic!("python snippet failed");
    }
}

#[test]
fn loss_and_probability() {
    with_module(|py, g| {
        run(
            py,
            g,
            r#"
import math
cfg = ap.LossConfig()
assert cfg.alpha == 5.0 and cfg.beta == 10.0
assert abs(cfg.gamma + 0.277) < 1e-12
assert cfg.loss(0.0, 1) == 10.0
assert abs(cfg.loss(10.0, 1) - 10 * math.exp(-2.77)) < 1e-12
assert abs(ap.contrastive_loss(0.3, 0) - 5 * 0.09) < 1e-12
assert ap.attribution_probability(0.25) == 0.75
assert ap.attribution_probability(1.5) is None
try:
    ap.LossConfig(c_p=0.0)
    raise AssertionError("accepted c_p = 0")
except ap.ArtpromptError:
    pass
"#,
        );
    });
}

#[test]
fn retrieval_and_attribution_from_distances() {
    with_module(|py, g| {
        run(
            py,
            g,
            r#"
out = ap.retrieval_test(
    [("q", "A")],
    [("g1", "B"), ("g2", "A")],
    [[0.1, 0.2]],
    thresholds=[0.15, 0.3],
    n_max=2,
)
assert [s["threshold"] for s in out] == [0.15, 0.3]
low, high = out
assert [p["p_n"] for p in low["per_n"]] == [0.0, 0.0]
assert [p["p_n"] for p in high["per_n"]] == [0.0, 1.0]

r = ap.attribute("q", [("A", [("a1", 0.2)]), ("B", [("b1", 0.9)])], 0.5)
assert r["decision"]["name"] == "A"
assert r["per_artist"][0]["vote_count"] == 1
assert r["per_artist"][1]["vote_count"] == 0
"#,
        );
    });
}

#[test]
fn manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    with_module(|py, g| {
        g.set_item("root", dir.path()).unwrap();
        run(
            py,
            g,
            r#"
m = ap.generate_toy_corpus(root, styles=2, originals=5, synthetics=5)
assert len(m) == 20
assert m.validate(root)["violations"] == []
s = m.split(4)
assert sum(r["split"] == "train" for r in s.records()) == 16
mixed = m.mix(3, 1)
assert len(mixed) == 12
s.save(root / "m.jsonl")
assert len(ap.Manifest.load(root / "m.jsonl")) == 20
cfg = ap.RunConfig.from_toml("seed = 4\n")
assert cfg.to_dict()["seed"] == 4
assert ap.run_cli(["nope"]) == 2
"#,
        );
    });
}
