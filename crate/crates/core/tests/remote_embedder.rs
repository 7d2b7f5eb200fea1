use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use ewi_core::textembed::{EmbedError, Embedder, RemoteEmbedder, RemoteEmbedderConfig};

/// Serves one scripted `(status, body)` per connection and records request bodies.
fn mock_server(script: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<String>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for (status, body) in script {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some((name, value)) = line.split_once(':') {
                    if name.eq_ignore_ascii_case("content-length") {
                        length = value.trim().parse().unwrap();
                    }
                }
            }
            let mut request = vec![0; length];
            reader.read_exact(&mut request).unwrap();
            log.lock().unwrap().push(String::from_utf8(request).unwrap());
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (format!("http://{addr}/embed"), seen)
}

fn client(endpoint: String, dim: usize) -> RemoteEmbedder {
    RemoteEmbedder::new(RemoteEmbedderConfig {
        endpoint,
        model: "test-model".into(),
        dim,
        timeout_ms: 2_000,
        max_retries: 2,
        max_in_flight: 1,
    })
    .unwrap()
}

#[test]
fn returns_vector_and_sends_model_and_text() {
    let (endpoint, seen) = mock_server(vec![(200, r#"{"vector":[0.5,-1.0,2.0]}"#.into())]);
    let v = client(endpoint, 3).embed("furosemide 40 mg").unwrap();
    assert_eq!(v, vec![0.5, -1.0, 2.0]);
    let body: serde_json::Value = serde_json::from_str(&seen.lock().unwrap()[0]).unwrap();
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["input"], "furosemide 40 mg");
}

#[test]
fn server_errors_are_retried() {
    let (endpoint, seen) = mock_server(vec![
        (503, "{}".into()),
        (500, "{}".into()),
        (200, r#"{"vector":[1.0,2.0]}"#.into()),
    ]);
    assert_eq!(client(endpoint, 2).embed("x").unwrap(), vec![1.0, 2.0]);
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn client_errors_fail_without_retry() {
    let (endpoint, seen) = mock_server(vec![(400, "{}".into())]);
    match client(endpoint, 2).embed("x") {
        Err(EmbedError::Transport { attempts, .. }) => assert_eq!(attempts, 1),
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(seen.lock().unwrap().len(), 1);
}

#[test]
fn wrong_dimension_is_rejected() {
    let (endpoint, _) = mock_server(vec![(200, r#"{"vector":[1.0]}"#.into())]);
    assert!(matches!(
        client(endpoint, 4).embed("x"),
        Err(EmbedError::Dimension { expected: 4, got: 1 })
    ));
}

#[test]
fn unreachable_service_exhausts_retries() {
    // Bind then drop to obtain a port with nothing listening.
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    match client(format!("http://127.0.0.1:{port}/embed"), 2).embed("x") {
        Err(EmbedError::Transport { attempts, .. }) => assert_eq!(attempts, 3),
        other => panic!("unexpected {other:?}"),
    }
}
