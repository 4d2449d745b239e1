use std::collections::HashSet;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use chronicle_core::metrics::{candidate_filter, ConceptIndex, Novelty};
use chronicle_core::model::{model_version, save_model};
use chronicle_core::ontology::ConceptRow;
use chronicle_core::{ConceptType, Model, ModelConfig, Ontology, SamplerConfig, Vocab};
use chronicle_service::{router, ErrorBody, ForecastResponse, GenerateResponse, Health, SaliencyResponse, Service, Source, VocabResponse};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn ontology() -> Ontology {
    let mut rows = vec![
        ConceptRow::new("dm2", "Type 2 diabetes mellitus", ConceptType::Disorder, &[]),
        ConceptRow::new("dm1", "Type 1 Diabetes", ConceptType::Disorder, &[]),
        ConceptRow::new("htn", "Hypertension", ConceptType::Disorder, &[]),
        ConceptRow::new("met", "Metformin", ConceptType::Substance, &[]),
        ConceptRow::new("ins", "Insulin", ConceptType::Substance, &[]),
        ConceptRow::new("cough", "Cough", ConceptType::Finding, &[]),
        ConceptRow::new("xray", "Chest X-ray", ConceptType::Procedure, &[]),
    ];
    for i in 0..60 {
        rows.push(ConceptRow::new(&format!("g{i:02}"), &format!("generic disorder {i}"), ConceptType::Disorder, &[]));
    }
    Ontology::from_rows(rows).unwrap()
}

fn model() -> Model {
    let mut spellings: Vec<String> =
        ["<PAD>", "<UNK>", "SEX:F", "SEX:M", "ETH:Black", "ETH:White", "AGE:43", "AGE:70", "SEP", "DEATH"]
            .map(String::from)
            .to_vec();
    spellings.extend(["dm2", "dm1", "htn", "met", "ins", "cough", "xray"].map(|c| format!("C:{c}")));
    spellings.extend((0..60).map(|i| format!("C:g{i:02}")));
    let cfg = ModelConfig { n_layers: 2, n_heads: 2, embedding_dim: 16, context_len: 16, feedforward_dim: 32, dropout: 0.0 };
    Model::new(cfg, Vocab::from_spellings(spellings).unwrap(), 11).unwrap()
}

fn app() -> (axum::Router, Arc<Service>) {
    let s = Arc::new(Service::new(model(), ontology()));
    (router(s.clone()), s)
}

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(b) => req.body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

fn prompt() -> Vec<&'static str> {
    vec!["SEX:F", "ETH:Black", "AGE:43"]
}

#[tokio::test]
async fn health_reports_the_weight_checksum() {
    let (app, s) = app();
    let (status, body) = call(&app, "GET", "/v1/health", None).await;
    assert_eq!(status, StatusCode::OK);
    let h: Health = serde_json::from_slice(&body).unwrap();
    assert_eq!(h.status, "ok");
    assert_eq!(h.model_version, model_version(s.model()));
    assert_eq!(h.model_version.len(), 16);
}

#[tokio::test]
async fn forecast_matches_the_library_byte_for_byte() {
    let (app, _) = app();
    let (status, body) = call(&app, "POST", "/v1/forecast", Some(json!({"tokens": prompt(), "k": 5}))).await;
    assert_eq!(status, StatusCode::OK);

    // Independent computation straight from the core crate.
    let m = model();
    let o = ontology();
    let tokens: Vec<u32> = prompt().iter().map(|s| m.vocab.lookup(s).unwrap()).collect();
    let dist = m.next_distribution(&tokens).unwrap();
    let index = ConceptIndex::new(&m.vocab, &o);
    let ranked = candidate_filter(&dist, &index, None, None, &HashSet::new(), 5);
    let q = |v: Value| v.to_string();
    let expected: Vec<String> = ranked
        .iter()
        .map(|c| {
            format!(
                r#"{{"concept":{},"token":{},"name":{},"type":{},"probability":{},"novelty":"New"}}"#,
                q(json!(c.concept.as_str())),
                q(json!(format!("C:{}", c.concept))),
                q(json!(o.get(&c.concept).unwrap().name)),
                q(json!(c.concept_type.name())),
                q(json!(c.probability)),
            )
        })
        .collect();
    assert_eq!(String::from_utf8(body.clone()).unwrap(), format!(r#"{{"candidates":[{}]}}"#, expected.join(",")));

    let r: ForecastResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(r.candidates.len(), 5);
    assert!(r.candidates.windows(2).all(|w| w[0].probability >= w[1].probability));
}

#[tokio::test]
async fn forecast_filters_by_type_and_novelty() {
    let (app, _) = app();
    let tokens = ["SEX:M", "ETH:White", "AGE:70", "C:htn", "SEP", "C:met"];
    let (_, body) = call(&app, "POST", "/v1/forecast", Some(json!({"tokens": tokens, "k": 3, "type": "Substance"}))).await;
    let r: ForecastResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(r.candidates.len(), 2, "only two substances exist");
    assert!(r.candidates.iter().all(|c| c.concept_type == ConceptType::Substance));
    let met = r.candidates.iter().find(|c| c.concept.as_str() == "met").unwrap();
    assert_eq!(met.novelty, Novelty::Recurring);

    let (_, body) =
        call(&app, "POST", "/v1/forecast", Some(json!({"tokens": tokens, "k": 100, "novelty": "Recurring"}))).await;
    let r: ForecastResponse = serde_json::from_slice(&body).unwrap();
    let got: HashSet<&str> = r.candidates.iter().map(|c| c.concept.as_str()).collect();
    assert_eq!(got, HashSet::from(["htn", "met"]));

    let (_, body) = call(&app, "POST", "/v1/forecast", Some(json!({"tokens": tokens, "k": 100, "type": "Disorder"}))).await;
    let r: ForecastResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(r.candidates.len(), 63);
}

#[tokio::test]
async fn malformed_and_unknown_tokens_are_400_with_position() {
    let (app, _) = app();
    let (status, body) =
        call(&app, "POST", "/v1/forecast", Some(json!({"tokens": ["SEX:F", "ETH:Black", "AGE:abc"], "k": 5}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let e: ErrorBody = serde_json::from_slice(&body).unwrap();
    assert_eq!(e.error, "malformed_token");
    assert!(e.detail.contains("token 2"), "{}", e.detail);

    let (status, body) = call(&app, "POST", "/v1/forecast", Some(json!({"tokens": ["SEX:F", "C:nope"], "k": 5}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let e: ErrorBody = serde_json::from_slice(&body).unwrap();
    assert_eq!(e.error, "unknown_token");
    assert!(e.detail.contains("token 1"));

    let (status, _) = call(&app, "POST", "/v1/forecast", Some(json!({"tokens": ["<PAD>"], "k": 5}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn bad_k_and_bodies_are_rejected() {
    let (app, _) = app();
    for k in [0, 101] {
        let (status, body) = call(&app, "POST", "/v1/forecast", Some(json!({"tokens": prompt(), "k": k}))).await;
        assert_eq!(status, StatusCode::BAD_REQUEST);
        assert_eq!(serde_json::from_slice::<ErrorBody>(&body).unwrap().error, "bad_request");
    }
    let (status, _) = call(&app, "POST", "/v1/forecast", Some(json!({"tokens": prompt(), "k": 100}))).await;
    assert_eq!(status, StatusCode::OK);
    let (status, body) = call(&app, "POST", "/v1/forecast", Some(json!({"nope": 1}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(serde_json::from_slice::<ErrorBody>(&body).unwrap().error, "bad_request");
    let (status, _) = call(&app, "POST", "/v1/forecast", Some(json!({"tokens": [], "k": 3}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn too_long_is_422() {
    let (app, _) = app();
    let long: Vec<&str> = std::iter::repeat_n("C:htn", 17).collect();
    for (uri, body) in [
        ("/v1/forecast", json!({"tokens": long, "k": 5})),
        ("/v1/generate", json!({"prompt": long})),
        ("/v1/saliency", json!({"tokens": long, "target": "C:htn"})),
    ] {
        let (status, body) = call(&app, "POST", uri, Some(body)).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{uri}");
        assert_eq!(serde_json::from_slice::<ErrorBody>(&body).unwrap().error, "sequence_too_long");
    }
}

#[tokio::test]
async fn generate_marks_spans_and_repeats_with_the_seed() {
    let (app, s) = app();
    let req = json!({"prompt": prompt(), "top_k": 5, "seed": 4, "max_new_tokens": 6});
    let (status, a) = call(&app, "POST", "/v1/generate", Some(req.clone())).await;
    assert_eq!(status, StatusCode::OK);
    let (_, b) = call(&app, "POST", "/v1/generate", Some(req)).await;
    assert_eq!(a, b);

    let r: GenerateResponse = serde_json::from_slice(&a).unwrap();
    assert!(r.items[..3].iter().all(|i| i.source == Source::Prompt));
    assert!(r.items[3..].iter().all(|i| i.source == Source::Generated));
    let m = s.model();
    let prompt_idx: Vec<u32> = prompt().iter().map(|t| m.vocab.lookup(t).unwrap()).collect();
    let lib = m.generate(&prompt_idx, &SamplerConfig { top_k: 5, seed: 4, max_new_tokens: 6, ..SamplerConfig::default() }).unwrap();
    let spelled: Vec<&str> = lib.indices().iter().map(|&i| m.vocab.spelling(i)).collect();
    assert_eq!(r.items.iter().map(|i| i.token.as_str()).collect::<Vec<_>>(), spelled);

    let (_, body) = call(&app, "POST", "/v1/generate", Some(json!({"prompt": prompt(), "max_new_tokens": 0}))).await;
    let r: GenerateResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(r.items.iter().map(|i| i.token.as_str()).collect::<Vec<_>>(), prompt());
}

#[tokio::test]
async fn greedy_generation_follows_the_forecast_argmax() {
    let (app, _) = app();
    let (_, body) =
        call(&app, "POST", "/v1/generate", Some(json!({"prompt": prompt(), "top_k": 1, "max_new_tokens": 4}))).await;
    let r: GenerateResponse = serde_json::from_slice(&body).unwrap();
    let m = model();
    let mut seq: Vec<String> = prompt().iter().map(|s| s.to_string()).collect();
    for item in &r.items[3..] {
        let idx: Vec<u32> = seq.iter().map(|s| m.vocab.lookup(s).unwrap()).collect();
        let p = m.next_distribution(&idx).unwrap();
        let best = (2..p.len()).fold(2, |b, i| if p[i] > p[b] { i } else { b });
        assert_eq!(item.token, m.vocab.spelling(best as u32));
        seq.push(item.token.clone());
    }
}

#[tokio::test]
async fn saliency_is_aligned_and_exact() {
    let (app, s) = app();
    let tokens = ["SEX:F", "ETH:Black", "AGE:43", "C:dm2", "SEP"];
    let (status, body) = call(&app, "POST", "/v1/saliency", Some(json!({"tokens": tokens, "target": "C:met"}))).await;
    assert_eq!(status, StatusCode::OK);
    let r: SaliencyResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(r.scores.len(), tokens.len());
    assert!((r.scores.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    let m = s.model();
    let idx: Vec<u32> = tokens.iter().map(|t| m.vocab.lookup(t).unwrap()).collect();
    assert_eq!(r.scores, m.saliency(&idx, m.vocab.lookup("C:met").unwrap()).unwrap());

    let (_, body) = call(&app, "POST", "/v1/saliency", Some(json!({"tokens": ["SEX:F"], "target": "C:met"}))).await;
    assert_eq!(serde_json::from_slice::<SaliencyResponse>(&body).unwrap().scores, vec![1.0]);

    let (status, body) = call(&app, "POST", "/v1/saliency", Some(json!({"tokens": ["SEX:F"], "target": "C:zzz"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(serde_json::from_slice::<ErrorBody>(&body).unwrap().error, "unknown_token");
}

#[tokio::test]
async fn vocab_search_is_case_insensitive_and_capped() {
    let (app, _) = app();
    let (status, body) = call(&app, "GET", "/v1/vocab?query=DIAB", None).await;
    assert_eq!(status, StatusCode::OK);
    let r: VocabResponse = serde_json::from_slice(&body).unwrap();
    let ids: Vec<&str> = r.hits.iter().map(|h| h.concept.as_str()).collect();
    assert_eq!(ids, ["dm2", "dm1"]);
    assert_eq!(r.hits[0].token, "C:dm2");

    let (_, body) = call(&app, "GET", "/v1/vocab?query=generic", None).await;
    assert_eq!(serde_json::from_slice::<VocabResponse>(&body).unwrap().hits.len(), 50);
    let (_, body) = call(&app, "GET", "/v1/vocab", None).await;
    assert_eq!(serde_json::from_slice::<VocabResponse>(&body).unwrap().hits.len(), 50);
    let (_, body) = call(&app, "GET", "/v1/vocab?query=zzzz", None).await;
    assert!(serde_json::from_slice::<VocabResponse>(&body).unwrap().hits.is_empty());
}

#[test]
fn loads_from_disk_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let m = model();
    save_model(&m, dir.join("model")).unwrap();
    let mut f = std::fs::File::create(dir.join("ontology.tsv")).unwrap();
    ontology().write(&mut f).unwrap();
    let s = Service::load(dir.join("model"), dir.join("ontology.tsv")).unwrap();
    assert_eq!(s.health().model_version, model_version(&m));
    assert!(Service::load(dir.join("missing"), dir.join("ontology.tsv")).is_err());
}

#[tokio::test]
async fn desk_scale_requests_finish_within_two_seconds() {
    let mut spellings: Vec<String> = ["<PAD>", "<UNK>", "SEX:F", "ETH:Black", "AGE:43", "SEP"].map(String::from).to_vec();
    spellings.extend((0..60).map(|i| format!("C:g{i:02}")));
    let cfg = ModelConfig { n_layers: 2, n_heads: 4, embedding_dim: 128, context_len: 520, feedforward_dim: 512, dropout: 0.0 };
    let m = Model::new(cfg, Vocab::from_spellings(spellings).unwrap(), 1).unwrap();
    let app = router(Arc::new(Service::new(m, ontology())));
    let mut tokens: Vec<String> = prompt().iter().map(|s| s.to_string()).collect();
    tokens.extend((0..500).map(|i| format!("C:g{:02}", i % 60)));
    for (uri, body) in [
        ("/v1/forecast", json!({"tokens": tokens, "k": 100})),
        ("/v1/saliency", json!({"tokens": tokens, "target": "C:g01"})),
        ("/v1/generate", json!({"prompt": tokens[..256], "max_new_tokens": 64})),
    ] {
        let start = std::time::Instant::now();
        let (status, _) = call(&app, "POST", uri, Some(body)).await;
        assert_eq!(status, StatusCode::OK);
        assert!(start.elapsed().as_secs_f64() < 2.0, "{uri} took {:?}", start.elapsed());
    }
}
