//! Remote suspect client against an in-process HTTP server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use radioscope::hashing::{SecretKey, TokenId};
use radioscope::models::remote::{Capability, RemoteClient, RemoteConfig, RemoteError};
use radioscope::models::SamplingConfig;
use radioscope::pipelines::{
    detect_closed, detect_open, DetectOptions, PipelineError, Supervision, Suspect,
};
use radioscope::schemes::WatermarkConfig;
use serde_json::Value;

const V: usize = 16;

struct Request {
    auth: Option<String>,
    context: Vec<TokenId>,
}

enum Reply {
    /// Close the connection without answering.
    Drop,
    Status(u16, String),
}

fn ok(body: Value) -> Reply {
    Reply::Status(200, body.to_string())
}

fn read_request(stream: &mut TcpStream) -> Option<Request> {
    let mut reader = BufReader::new(stream);
    let mut len = 0usize;
    let mut auth = None;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).ok()? == 0 {
            return None;
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((name, value)) = line.split_once(':') {
            match name.to_ascii_lowercase().as_str() {
                "content-length" => len = value.trim().parse().ok()?,
                "authorization" => auth = Some(value.trim().to_string()),
                _ => {}
            }
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).ok()?;
    let v: Value = serde_json::from_slice(&body).ok()?;
    let context = v["context"]
        .as_array()?
        .iter()
        .map(|x| x.as_u64().unwrap() as TokenId)
        .collect();
    Some(Request { auth, context })
}

/// Serves `handler(request_index, request)` on a local port.
fn serve<F>(handler: F) -> (String, Arc<AtomicUsize>)
where
    F: Fn(usize, Option<&Request>) -> Reply + Send + 'static,
{
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/next", listener.local_addr().unwrap());
    let count = Arc::new(AtomicUsize::new(0));
    let seen = count.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let i = seen.fetch_add(1, Ordering::SeqCst);
            if let Reply::Drop = handler(i, None) {
                drop(stream);
                continue;
            }
            let req = read_request(&mut stream);
            let Reply::Status(code, body) = handler(i, req.as_ref()) else {
                continue;
            };
            let _ = write!(
                stream,
                "HTTP/1.1 {code} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
        }
    });
    (url, count)
}

fn client(url: &str) -> RemoteClient {
    let mut cfg = RemoteConfig::new(url, V);
    cfg.base_delay = Duration::from_millis(1);
    cfg.timeout = Duration::from_secs(5);
    RemoteClient::new(cfg)
}

/// Echoes `last + 1` with logits peaked there.
fn echo(with_logits: bool) -> impl Fn(usize, Option<&Request>) -> Reply {
    move |_, req| {
        let Some(req) = req else {
            return Reply::Status(200, String::new());
        };
        let next = req.context.last().map_or(0, |&t| (t + 1) % V as u32);
        let mut body = serde_json::json!({ "token": next });
        if with_logits {
            let logits: Vec<f64> = (0..V).map(|t| if t as u32 == next { 5.0 } else { 0.0 }).collect();
            body["logits"] = serde_json::json!(logits);
        }
        ok(body)
    }
}

#[test]
fn echo_with_and_without_logits() {
    let (url, _) = serve(echo(true));
    let c = client(&url);
    let step = c.next_token(&[3, 4]).unwrap();
    assert_eq!(step.token, 5);
    assert_eq!(step.capability(), Capability::Open);
    assert_eq!(c.predict(&[7]).unwrap(), Some(8));
    assert_eq!(c.complete(&[1], 3).unwrap(), vec![2, 3, 4]);

    let (url, _) = serve(echo(false));
    let c = client(&url);
    let step = c.next_token(&[3]).unwrap();
    assert_eq!(step.capability(), Capability::Closed);
    assert_eq!(c.predict(&[3]).unwrap(), None);
}

#[test]
fn dropped_connections_are_retried() {
    let inner = echo(true);
    let (url, count) = serve(move |i, req| if i < 3 { Reply::Drop } else { inner(i, req) });
    let c = client(&url);
    assert_eq!(c.next_token(&[1]).unwrap().token, 2);
    assert_eq!(count.load(Ordering::SeqCst), 4);
}

#[test]
fn persistent_server_errors_exhaust_attempts() {
    let (url, count) = serve(|_, _| Reply::Status(503, "{}".into()));
    let c = client(&url);
    match c.next_token(&[1]) {
        Err(RemoteError::Transport { attempts, .. }) => assert_eq!(attempts, 5),
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(count.load(Ordering::SeqCst), 5);
}

#[test]
fn auth_and_client_errors_are_not_retried() {
    let (url, count) = serve(|_, _| Reply::Status(401, "{}".into()));
    assert_eq!(client(&url).next_token(&[1]), Err(RemoteError::Auth(401)));
    assert_eq!(count.load(Ordering::SeqCst), 1);

    let (url, count) = serve(|_, _| Reply::Status(404, "{}".into()));
    assert_eq!(client(&url).next_token(&[1]), Err(RemoteError::Status(404)));
    assert_eq!(count.load(Ordering::SeqCst), 1);
}

#[test]
fn credentials_are_sent_as_bearer_token() {
    let (url, _) = serve(|_, req| match req.and_then(|r| r.auth.as_deref()) {
        Some("Bearer s3cret") => ok(serde_json::json!({ "token": 1 })),
        _ => Reply::Status(403, "{}".into()),
    });
    let mut cfg = RemoteConfig::new(&url, V);
    cfg.credentials = Some("s3cret".into());
    assert_eq!(RemoteClient::new(cfg).next_token(&[0]).unwrap().token, 1);
    assert_eq!(client(&url).next_token(&[0]), Err(RemoteError::Auth(403)));
}

#[test]
fn malformed_payloads_are_rejected() {
    for body in [
        "not json".to_string(),
        serde_json::json!({ "token": 99 }).to_string(),
        serde_json::json!({ "token": 1, "logits": [0.0, 1.0] }).to_string(),
    ] {
        let (url, count) = serve(move |_, _| Reply::Status(200, body.clone()));
        assert!(matches!(
            client(&url).next_token(&[1]),
            Err(RemoteError::Malformed(_))
        ));
        assert_eq!(count.load(Ordering::SeqCst), 1);
    }
}

fn wm() -> WatermarkConfig {
    WatermarkConfig::kgw(SecretKey::new(42).unwrap(), 2, V, 0.25, 3.0).unwrap()
}

#[test]
fn open_detection_needs_logits() {
    let (url, _) = serve(echo(false));
    let c = client(&url);
    let texts = vec![vec![1u32, 5, 9, 2, 7, 3]];
    let r = detect_open(
        Suspect::Remote(&c),
        &texts,
        &wm(),
        &DetectOptions::new(Supervision::Unsupervised),
    );
    assert!(matches!(r, Err(PipelineError::Capability(_))));

    let (url, _) = serve(echo(true));
    let c = client(&url);
    let r = detect_open(
        Suspect::Remote(&c),
        &texts,
        &wm(),
        &DetectOptions::new(Supervision::Unsupervised),
    )
    .unwrap();
    assert_eq!(r.n_scored, 4);
}

#[test]
fn closed_detection_reports_partial_progress() {
    // the first prompt completes, then the server goes away
    let inner = echo(false);
    let (url, _) = serve(move |i, req| {
        if i < 4 {
            inner(i, req)
        } else {
            Reply::Status(500, "{}".into())
        }
    });
    let mut cfg = RemoteConfig::new(&url, V);
    cfg.base_delay = Duration::from_millis(1);
    cfg.max_attempts = 2;
    cfg.max_in_flight = 1;
    let c = RemoteClient::new(cfg);
    let prompts = vec![vec![1u32, 6], vec![9u32, 12]];
    let sampling = SamplingConfig {
        max_tokens: 4,
        ..Default::default()
    };
    let r = detect_closed(
        Suspect::Remote(&c),
        &prompts,
        &wm(),
        None,
        &sampling,
        &DetectOptions::new(Supervision::Unsupervised),
    );
    match r {
        Err(PipelineError::Remote { error, partial }) => {
            assert!(matches!(error, RemoteError::Transport { attempts: 2, .. }));
            assert_eq!(partial.n_scored, 3);
            assert_eq!(partial.n_documents, 2);
        }
        other => panic!("unexpected {other:?}"),
    }
}
