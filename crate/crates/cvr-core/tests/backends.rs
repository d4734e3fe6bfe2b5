//! Backend contract tests: the capturing-mock HTTP checks for the remote
//! policy, and interchangeability of all three backends inside the engine.

use std::io::{Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::sync::Arc;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cvr_core::episode::{
    run_episode, EpisodeConfig, EpisodeInputs, EpisodeOutcome, SimEnvironment,
};
use cvr_core::grpo::templates::TemplateSet;
use cvr_core::grpo::{PolicyParams, StateKeyConfig};
use cvr_core::policy::{
    Policy, PolicyError, RemotePolicy, RemotePolicyConfig, ScriptedPolicy, SoftmaxPolicy,
    TurnContext,
};
use cvr_core::script::generate::{generate_template_script, GeneratorKnobs, ScriptFamily};

// ---------------------------------------------------------------------------
// Minimal scripted HTTP mock
// ---------------------------------------------------------------------------

enum MockStep {
    /// Reply 200 with a chat completion whose content is this text.
    Content(&'static str),
    /// Reply with this bare status code.
    Status(u16),
    /// Accept the request and go silent until the client times out.
    Hang,
}

struct CapturedRequest {
    headers: String,
    body: serde_json::Value,
}

/// Serves the scripted steps one connection at a time and forwards each
/// captured request to the channel.
fn spawn_mock(steps: Vec<MockStep>) -> (String, mpsc::Receiver<CapturedRequest>) {
    let listener = TcpListener::bind("127.0.0.1:0").expect("bind mock listener");
    let addr = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        for step in steps {
            let Ok((mut stream, _)) = listener.accept() else {
                return;
            };
            let (headers, body) = read_http_request(&mut stream);
            if let Ok(body) = serde_json::from_slice::<serde_json::Value>(&body) {
                let _ = tx.send(CapturedRequest { headers, body });
            }
            match step {
                MockStep::Content(text) => {
                    let payload = serde_json::json!({
                        "choices": [{"message": {"role": "assistant", "content": text}}]
                    })
                    .to_string();
                    let response = format!(
                        "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}",
                        payload.len(),
                        payload
                    );
                    let _ = stream.write_all(response.as_bytes());
                }
                MockStep::Status(code) => {
                    let response = format!(
                        "HTTP/1.1 {code} ERR\r\ncontent-length: 0\r\nconnection: close\r\n\r\n"
                    );
                    let _ = stream.write_all(response.as_bytes());
                }
                MockStep::Hang => {
                    std::thread::sleep(Duration::from_millis(1500));
                }
            }
        }
    });
    (addr, rx)
}

fn read_http_request(stream: &mut std::net::TcpStream) -> (String, Vec<u8>) {
    let mut buffer = Vec::new();
    let mut chunk = [0u8; 4096];
    let mut header_end = None;
    while header_end.is_none() {
        let Ok(n) = stream.read(&mut chunk) else {
            return (String::new(), buffer);
        };
        if n == 0 {
            return (String::new(), buffer);
        }
        buffer.extend_from_slice(&chunk[..n]);
        header_end = buffer.windows(4).position(|w| w == b"\r\n\r\n");
    }
    let header_end = header_end.unwrap() + 4;
    let headers = String::from_utf8_lossy(&buffer[..header_end]).to_lowercase();
    let content_length: usize = headers
        .lines()
        .find_map(|l| l.strip_prefix("content-length:"))
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(0);
    while buffer.len() < header_end + content_length {
        let Ok(n) = stream.read(&mut chunk) else {
            break;
        };
        if n == 0 {
            break;
        }
        buffer.extend_from_slice(&chunk[..n]);
    }
    (headers, buffer[header_end..].to_vec())
}

fn remote_config(endpoint: String) -> RemotePolicyConfig {
    serde_json::from_value(serde_json::json!({
        "endpoint": endpoint,
        "model": "test-model",
        "timeout_s": 0.5,
        "retries": 2,
        "backoff_ms": 5,
    }))
    .unwrap()
}

fn ctx<'a>(rendered: &'a str) -> TurnContext<'a> {
    TurnContext {
        rendered_state: rendered,
        question: "",
        turn_index: 0,
        history: &[],
        tolerance: false,
    }
}

const CANNED_ANSWER: &str = r#"{"action":"answer","thought":"mock","final_answer":"AC"}"#;

#[test]
fn remote_round_trip_sends_the_documented_defaults() {
    let (endpoint, rx) = spawn_mock(vec![MockStep::Content(CANNED_ANSWER)]);
    let mut policy = RemotePolicy::new(remote_config(endpoint)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let text = policy.decide(&ctx("the rendered state"), &mut rng).unwrap();
    assert_eq!(text, CANNED_ANSWER);

    let request = rx.recv_timeout(Duration::from_secs(1)).unwrap();
    let body = &request.body;
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["temperature"], serde_json::json!(0.0));
    assert_eq!(body["max_tokens"], serde_json::json!(8192));
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(body["messages"][1]["role"], "user");
    assert_eq!(body["messages"][1]["content"], "the rendered state");
    // Exactly one request was made.
    assert!(rx.recv_timeout(Duration::from_millis(200)).is_err());
}

#[test]
fn transient_server_errors_are_retried_with_backoff() {
    let (endpoint, rx) = spawn_mock(vec![
        MockStep::Status(500),
        MockStep::Status(500),
        MockStep::Content(CANNED_ANSWER),
    ]);
    let mut policy = RemotePolicy::new(remote_config(endpoint)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let text = policy.decide(&ctx("state"), &mut rng).unwrap();
    assert_eq!(text, CANNED_ANSWER);
    let mut requests = 0;
    while rx.recv_timeout(Duration::from_millis(100)).is_ok() {
        requests += 1;
    }
    assert_eq!(requests, 3);
}

#[test]
fn timeouts_surface_as_a_distinct_error_without_fabricated_text() {
    let (endpoint, _rx) = spawn_mock(vec![MockStep::Hang, MockStep::Hang]);
    let mut config = remote_config(endpoint);
    config.timeout_s = 0.2;
    config.retries = 1;
    let mut policy = RemotePolicy::new(config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let err = policy.decide(&ctx("state"), &mut rng).unwrap_err();
    assert!(matches!(err, PolicyError::Timeout { attempts: 2 }), "{err}");
}

#[test]
fn api_key_from_the_environment_becomes_a_bearer_header() {
    let (endpoint, rx) = spawn_mock(vec![MockStep::Content(CANNED_ANSWER)]);
    std::env::set_var(cvr_core::policy::API_KEY_ENV, "secret-key-for-test");
    let mut policy = RemotePolicy::new(remote_config(endpoint)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let result = policy.decide(&ctx("state"), &mut rng);
    std::env::remove_var(cvr_core::policy::API_KEY_ENV);
    result.unwrap();
    let request = rx.recv_timeout(Duration::from_secs(1)).unwrap();
    assert!(
        request
            .headers
            .contains("authorization: bearer secret-key-for-test"),
        "{}",
        request.headers
    );
}

#[test]
fn client_errors_are_not_retried() {
    let (endpoint, rx) = spawn_mock(vec![MockStep::Status(401), MockStep::Content(CANNED_ANSWER)]);
    let mut policy = RemotePolicy::new(remote_config(endpoint)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let err = policy.decide(&ctx("state"), &mut rng).unwrap_err();
    assert!(matches!(err, PolicyError::Status { code: 401 }));
    let mut requests = 0;
    while rx.recv_timeout(Duration::from_millis(100)).is_ok() {
        requests += 1;
    }
    assert_eq!(requests, 1);
}

#[test]
fn policy_transport_failure_marks_the_episode_errored() {
    let (endpoint, _rx) = spawn_mock(vec![MockStep::Hang]);
    let mut config = remote_config(endpoint);
    config.timeout_s = 0.2;
    config.retries = 0;
    let mut policy = RemotePolicy::new(config).unwrap();
    let script =
        generate_template_script(ScriptFamily::ChoiceBehavior, 8, &GeneratorKnobs::default())
            .unwrap();
    let inputs = EpisodeInputs::from_script(&script, "");
    let environment = SimEnvironment { script: &script };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let trajectory = run_episode(
        &inputs,
        &mut policy,
        &environment,
        &EpisodeConfig::default(),
        &mut rng,
    );
    assert!(matches!(trajectory.outcome, EpisodeOutcome::Errored(_)));
}

// ---------------------------------------------------------------------------
// Interchangeability: the same engine runs all three backends
// ---------------------------------------------------------------------------

#[test]
fn all_three_backends_run_the_same_fixture_through_the_engine() {
    let script =
        generate_template_script(ScriptFamily::ChoiceBehavior, 21, &GeneratorKnobs::default())
            .unwrap();
    let config = EpisodeConfig::default();
    let environment = SimEnvironment { script: &script };
    let inputs = EpisodeInputs::from_script(&script, "");

    // Scripted.
    let mut scripted = ScriptedPolicy::new(vec![
        r#"{"action":"get_caption","thought":"t","params":{"video_index":1}}"#.into(),
        r#"{"action":"answer","thought":"t","final_answer":"A"}"#.into(),
    ])
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let scripted_run = run_episode(&inputs, &mut scripted, &environment, &config, &mut rng);
    assert!(matches!(scripted_run.outcome, EpisodeOutcome::Answered(_)));

    // Softmax.
    let params = Arc::new(PolicyParams::new_uniform(TemplateSet::standard().names()));
    let mut softmax = SoftmaxPolicy::new(params, &script, StateKeyConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let softmax_run = run_episode(&inputs, &mut softmax, &environment, &config, &mut rng);
    assert!(!softmax_run.errored());

    // Remote, against the mock.
    let (endpoint, _rx) = spawn_mock(vec![
        MockStep::Content(r#"{"action":"get_caption","thought":"t","params":{"video_index":2}}"#),
        MockStep::Content(r#"{"action":"answer","thought":"t","final_answer":"AB"}"#),
    ]);
    let mut remote = RemotePolicy::new(remote_config(endpoint)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let remote_run = run_episode(&inputs, &mut remote, &environment, &config, &mut rng);
    assert!(
        matches!(remote_run.outcome, EpisodeOutcome::Answered(_)),
        "{:?}",
        remote_run.outcome
    );
    assert_eq!(remote_run.tool_calls, 1);
}
