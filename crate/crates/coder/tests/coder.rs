use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::Mutex;

use rand::Rng;
use vidpeak_coder::*;
use vidpeak_core::ctml::{Coder, CtmlRecord, Feature};
use vidpeak_core::rng::keyed_rng;

struct Scripted {
    replies: Mutex<VecDeque<String>>,
    seen: Mutex<Vec<ChatPayload>>,
}

impl Scripted {
    fn new(replies: &[&str]) -> Self {
        Self {
            replies: Mutex::new(replies.iter().map(|s| s.to_string()).collect()),
            seen: Mutex::new(Vec::new()),
        }
    }
}

impl ChatBackend for Scripted {
    fn complete(&self, payload: &ChatPayload) -> Result<String, TransportError> {
        self.seen.lock().unwrap().push(payload.clone());
        Ok(self.replies.lock().unwrap().pop_front().expect("script exhausted"))
    }
}

fn frames(n: i64) -> Vec<FrameRef> {
    (-n..=n)
        .map(|o| FrameRef {
            offset: o,
            image: FrameImage::Url {
                url: format!("https://frames.example/v1/{o}.jpg"),
            },
        })
        .collect()
}

fn request(features: Vec<Feature>) -> CodingRequest {
    CodingRequest {
        video_id: "v1".into(),
        t: 120,
        transcript: Some("so the derivative of x squared is two x".into()),
        slide_text: Some("Derivatives".into()),
        frames: frames(10),
        features,
    }
}

fn text_of(payload: &ChatPayload) -> String {
    payload
        .messages
        .iter()
        .flat_map(|m| &m.content)
        .filter_map(|c| match c {
            ContentPart::Text { text } => Some(text.as_str()),
            ContentPart::ImageUrl { .. } => None,
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn images(payload: &ChatPayload) -> usize {
    payload
        .messages
        .iter()
        .flat_map(|m| &m.content)
        .filter(|c| matches!(c, ContentPart::ImageUrl { .. }))
        .count()
}

#[test]
fn prompt_embeds_description_and_key() {
    let mut req = request(vec![Feature::Formula]);
    req.transcript = None;
    let p = build_prompt(&req, &PromptOptions::default()).unwrap();
    let text = text_of(&p);
    assert!(text.contains(Feature::Formula.description()));
    assert!(text.contains("\"formula\""));
    assert!(text.contains("0 (absent) or 1 (present)"));
    assert!(text.contains("central five seconds"));
    assert!(!text.contains("\"instructor\""));
    assert_eq!(images(&p), 1, "center frame only");
    assert_eq!(p.response_format.kind, "json_object");
}

#[test]
fn missing_modality_names_the_feature() {
    let mut req = request(vec![Feature::Redundancy]);
    req.transcript = None;
    match build_prompt(&req, &PromptOptions::default()) {
        Err(CoderError::IncompletePayload(f)) => assert_eq!(f, "redundancy"),
        other => panic!("{other:?}"),
    }
    let mut req = request(vec![Feature::VisualBreakpoint]);
    req.frames.retain(|f| f.offset == 0);
    assert!(matches!(
        build_prompt(&req, &PromptOptions::default()),
        Err(CoderError::IncompletePayload(f)) if f == "visual_breakpoint"
    ));
}

#[test]
fn prompt_is_deterministic() {
    let req = request(Vec::new());
    let a = serde_json::to_vec(&build_prompt(&req, &PromptOptions::default()).unwrap()).unwrap();
    let b = serde_json::to_vec(&build_prompt(&req, &PromptOptions::default()).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn frame_count_is_configurable() {
    let req = request(vec![Feature::Annotating]);
    let full = build_prompt(&req, &PromptOptions::default()).unwrap();
    assert_eq!(images(&full), 21);
    let opts = PromptOptions {
        frame_count: 5,
        ..PromptOptions::default()
    };
    let few = build_prompt(&req, &opts).unwrap();
    assert_eq!(images(&few), 5);
    assert!(text_of(&few).contains("Frame at t+0 s:"));
    let one = build_prompt(&req, &PromptOptions { frame_count: 1, ..opts }).unwrap();
    assert_eq!(images(&one), 1);
    assert!(text_of(&one).contains("Frame at t+0 s:"));
}

fn full_reply(values: &[(Feature, u8)]) -> String {
    let mut obj = serde_json::Map::new();
    for f in Feature::ALL {
        let v = values.iter().find(|(g, _)| *g == f).map_or(if f.is_ordinal() { 3 } else { 0 }, |x| x.1);
        obj.insert(f.key().into(), v.into());
    }
    serde_json::Value::Object(obj).to_string()
}

#[test]
fn valid_reply_round_trips() {
    let reply = full_reply(&[(Feature::Formula, 1), (Feature::Redundancy, 5)]);
    let backend = Scripted::new(&[&reply]);
    let c = code_moment(&backend, &request(Vec::new()), &PromptOptions::default(), 2).unwrap();
    let rec = c.record().unwrap();
    assert_eq!(rec.coder, Coder::Machine);
    assert_eq!(rec.get(Feature::Formula), 1);
    assert_eq!(rec.get(Feature::Redundancy), 5);
    assert_eq!(rec.get(Feature::VisualComplexity), 3);
    assert_eq!(c.audit.len(), 1);
    assert!(c.audit[0].accepted);
    assert_eq!(c.audit[0].response, reply);
    assert_eq!(c.audit[0].request_sha256.len(), 64);
}

#[test]
fn out_of_range_reply_is_retried_once() {
    let bad = full_reply(&[(Feature::VisualComplexity, 7)]);
    let good = full_reply(&[(Feature::VisualComplexity, 4)]);
    let backend = Scripted::new(&[&bad, &good]);
    let c = code_moment(&backend, &request(Vec::new()), &PromptOptions::default(), 2).unwrap();
    assert_eq!(c.values[&Feature::VisualComplexity], 4);
    let seen = backend.seen.lock().unwrap();
    assert_eq!(seen.len(), 2);
    let follow = seen[1].messages.last().unwrap();
    assert_eq!(follow.role, "user");
    let ContentPart::Text { text } = &follow.content[0] else { panic!() };
    assert!(text.contains("visual_complexity"), "{text}");
    assert_eq!(seen[1].messages[seen[1].messages.len() - 2].role, "assistant");
    assert!(!c.audit[0].accepted && c.audit[1].accepted);
}

#[test]
fn malformed_replies_exhaust_the_budget() {
    let backend = Scripted::new(&["sure! here you go", "```json\n{}\n```", "{\"formula\": 1"]);
    match code_moment(&backend, &request(vec![Feature::Formula]), &PromptOptions::default(), 2) {
        Err(CoderError::CodingFailed { transcript, .. }) => assert_eq!(transcript.len(), 3),
        other => panic!("{other:?}"),
    }
}

#[test]
fn strict_parsing() {
    let f = [Feature::Formula, Feature::Redundancy];
    assert!(parse_reply("{\"formula\": 1, \"redundancy\": 2}", &f).is_ok());
    assert!(parse_reply(" {\"formula\": 1, \"redundancy\": 2}\n", &f).is_ok());
    assert!(parse_reply("{\"formula\": 1}", &f).unwrap_err().contains("missing key \"redundancy\""));
    assert!(parse_reply("{\"formula\": 1, \"redundancy\": 2, \"x\": 0}", &f).unwrap_err().contains("unexpected key"));
    assert!(parse_reply("{\"formula\": 1.5, \"redundancy\": 2}", &f).is_err());
    assert!(parse_reply("{\"formula\": \"1\", \"redundancy\": 2}", &f).is_err());
    assert!(parse_reply("{\"formula\": 2, \"redundancy\": 2}", &f).is_err());
    assert!(parse_reply("[1, 2]", &f).is_err());
}

struct ByMoment;

impl ChatBackend for ByMoment {
    fn complete(&self, payload: &ChatPayload) -> Result<String, TransportError> {
        let text = text_of(payload);
        let t: i64 = text.split("at t = ").nth(1).unwrap().split(' ').next().unwrap().parse().unwrap();
        std::thread::sleep(std::time::Duration::from_millis((7 * t as u64) % 5));
        Ok(full_reply(&[(Feature::Formula, (t % 2) as u8)]))
    }
}

#[test]
fn batch_preserves_input_order() {
    let reqs: Vec<CodingRequest> = (0..40)
        .map(|t| CodingRequest {
            t,
            ..request(Vec::new())
        })
        .collect();
    let out = code_batch(&ByMoment, &reqs, &PromptOptions::default(), 0, 4);
    for (t, r) in out.iter().enumerate() {
        let c = r.as_ref().unwrap();
        assert_eq!(c.t, t as i64);
        assert_eq!(c.values[&Feature::Formula], (t % 2) as u8);
    }
    let mut buf = Vec::new();
    write_audit(&out.iter().map(|r| r.as_ref().unwrap()).collect::<Vec<_>>(), &mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 40);
}

fn record(t: i64, coder: Coder, values: [u8; 15]) -> CtmlRecord {
    CtmlRecord {
        video_id: "v".into(),
        t,
        coder,
        values,
    }
}

#[test]
fn identical_codings_agree_perfectly() {
    let mut rng = keyed_rng(1, "agree", &[]);
    let mut adj = Vec::new();
    for t in 0..50 {
        let mut v = [0u8; 15];
        for f in Feature::ALL {
            v[f.index()] = if f.is_ordinal() { rng.random_range(1..=5) } else { rng.random_range(0..=1) };
        }
        adj.push(record(t, Coder::Adjudicated, v));
    }
    let machine: Vec<CtmlRecord> = adj.iter().map(|r| CtmlRecord { coder: Coder::Machine, ..r.clone() }).collect();
    let reports = agreement_vs_humans(&machine, &adj).unwrap();
    assert_eq!(reports.len(), 15);
    for r in reports {
        assert_eq!(r.kappa, 1.0, "{:?}", r.feature);
        assert_eq!(r.weighted, r.feature.is_ordinal());
    }
    let other: Vec<CtmlRecord> = machine.iter().map(|r| CtmlRecord { t: r.t + 1000, ..r.clone() }).collect();
    assert!(matches!(agreement_vs_humans(&other, &adj), Err(CoderError::Ctml(_))));
}

#[test]
fn coin_flip_coder_is_near_chance() {
    // 100 replications of 200 items: kappa of independent fair coins
    // against balanced labels stays within 0.15 of zero.
    let mut within = 0;
    let mut total = 0;
    let mut sum = 0.0;
    for rep in 0..100 {
        let mut rng = keyed_rng(7, "coin", &[rep]);
        let mut adj = Vec::new();
        let mut machine = Vec::new();
        for t in 0..200 {
            let balanced = (t % 2) as u8;
            let mut a = [balanced; 15];
            let mut m = [0u8; 15];
            for f in Feature::ALL {
                if f.is_ordinal() {
                    a[f.index()] = 1 + (t % 5) as u8;
                    m[f.index()] = rng.random_range(1..=5);
                } else {
                    m[f.index()] = u8::from(rng.random::<bool>());
                }
            }
            adj.push(record(t, Coder::Adjudicated, a));
            machine.push(record(t, Coder::Machine, m));
        }
        for r in agreement_vs_humans(&machine, &adj).unwrap() {
            total += 1;
            sum += r.kappa;
            within += usize::from(r.kappa.abs() <= 0.15);
        }
    }
    let mean = sum / total as f64;
    assert!(mean.abs() < 0.02, "mean kappa {mean}");
    assert!(within as f64 / total as f64 >= 0.95, "{within} of {total}");
}

/// Serves canned HTTP responses, one per connection, recording requests.
fn serve(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<(String, String)>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let handle = std::thread::spawn(move || {
        let mut seen = Vec::new();
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream);
            let mut headers = String::new();
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                headers.push_str(&line);
            }
            let mut req_body = vec![0; len];
            reader.read_exact(&mut req_body).unwrap();
            seen.push((headers, String::from_utf8(req_body).unwrap()));
            let mut stream = reader.into_inner();
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
        seen
    });
    (format!("http://{addr}/v1"), handle)
}

fn completion(content: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
}

fn endpoint(url: String) -> EndpointConfig {
    EndpointConfig {
        base_url: url,
        backoff_base_ms: 5,
        transport_retries: 2,
        timeout_secs: 10,
        ..EndpointConfig::default()
    }
}

#[test]
fn http_backend_backs_off_on_429() {
    let reply = full_reply(&[(Feature::Formula, 1)]);
    let (url, server) = serve(vec![(429, "{}".into()), (503, "busy".into()), (200, completion(&reply))]);
    let backend = HttpBackend::with_token(&endpoint(url), "secret-token".into());
    let c = code_moment(&backend, &request(Vec::new()), &PromptOptions::default(), 0).unwrap();
    assert_eq!(c.values[&Feature::Formula], 1);
    let seen = server.join().unwrap();
    assert_eq!(seen.len(), 3);
    for (headers, body) in &seen {
        assert!(headers.to_ascii_lowercase().contains("authorization: bearer secret-token"));
        assert!(headers.starts_with("POST /v1/chat/completions"));
        let p: ChatPayload = serde_json::from_str(body).unwrap();
        assert_eq!(p.temperature, 0.0);
    }
}

#[test]
fn http_backend_reports_persistent_failure() {
    let (url, server) = serve(vec![(500, "a".into()), (500, "b".into()), (500, "c".into())]);
    let backend = HttpBackend::with_token(&endpoint(url), "t".into());
    let err = backend.complete(&build_prompt(&request(Vec::new()), &PromptOptions::default()).unwrap()).unwrap_err();
    assert_eq!(err.status, Some(500));
    assert_eq!(err.attempts, 3);
    assert_eq!(err.backoff_ms, 15);
    server.join().unwrap();

    let (url, server) = serve(vec![(401, "no".into())]);
    let backend = HttpBackend::with_token(&endpoint(url), "t".into());
    let err = backend.complete(&build_prompt(&request(Vec::new()), &PromptOptions::default()).unwrap()).unwrap_err();
    assert_eq!((err.status, err.attempts), (Some(401), 1));
    server.join().unwrap();
}

#[test]
fn token_comes_from_the_environment() {
    let config = EndpointConfig {
        auth_env: "VIDPEAK_TEST_TOKEN_THAT_IS_NEVER_SET".into(),
        ..EndpointConfig::default()
    };
    assert!(matches!(HttpBackend::from_env(&config), Err(CoderError::MissingToken(v)) if v == config.auth_env));
    let bad = EndpointConfig {
        max_concurrent: 0,
        ..EndpointConfig::default()
    };
    assert!(matches!(bad.validate(), Err(CoderError::Config(_))));
}
