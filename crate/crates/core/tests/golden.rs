//! Bit-exact comparisons against values from `fixtures/golden.py`.

use bgm::metrics::Metric;
use bgm::retrieval::{cosine_similarity, embed};
use serde_json::Value;

fn fixture(name: &str) -> Value {
    let path = format!("{}/tests/fixtures/{name}", env!("CARGO_MANIFEST_DIR"));
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn float(v: &Value) -> f64 {
    v.as_str().unwrap().parse().unwrap()
}

#[test]
fn metric_kernels_match_reference_bit_for_bit() {
    let cases = fixture("metric_golden.json");
    let cases = cases.as_array().unwrap();
    assert_eq!(cases.len(), 10);
    for c in cases {
        let metric: Metric = c["metric"].as_str().unwrap().parse().unwrap();
        let (p, t) = (c["prediction"].as_str().unwrap(), c["target"].as_str().unwrap());
        let got = metric.score(p, t).unwrap();
        let want = float(&c["score"]);
        assert_eq!(got.to_bits(), want.to_bits(), "{metric} {p:?} vs {t:?}: {got} != {want}");
    }
}

#[test]
fn embeddings_match_reference_bit_for_bit() {
    let g = fixture("embedding_golden.json");
    for c in g["embeddings"].as_array().unwrap() {
        let dim = c["dim"].as_u64().unwrap() as usize;
        let seed = c["seed"].as_u64().unwrap();
        let e = embed(c["text"].as_str().unwrap(), dim, seed).unwrap();
        let mut want = vec![0.0f64; dim];
        for nz in c["nonzeros"].as_array().unwrap() {
            want[nz[0].as_u64().unwrap() as usize] = float(&nz[1]);
        }
        let got: Vec<u64> = e.values().iter().map(|x| x.to_bits()).collect();
        let want: Vec<u64> = want.iter().map(|x| x.to_bits()).collect();
        assert_eq!(got, want, "{}", c["text"]);
    }
    for c in g["cosines"].as_array().unwrap() {
        let dim = c["dim"].as_u64().unwrap() as usize;
        let seed = c["seed"].as_u64().unwrap();
        let a = embed(c["a"].as_str().unwrap(), dim, seed).unwrap();
        let b = embed(c["b"].as_str().unwrap(), dim, seed).unwrap();
        let got = cosine_similarity(&a, &b).unwrap();
        assert_eq!(got.to_bits(), float(&c["cosine"]).to_bits(), "{got}");
    }
}
