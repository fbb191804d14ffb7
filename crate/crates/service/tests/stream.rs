use futures_util::StreamExt;
use nestdiff_service::{serve, AppState, PredictionEvent, ServiceConfig};
use serde_json::json;
use tokio::net::TcpListener;
use tokio_tungstenite::tungstenite::Message;

async fn next_event<S>(ws: &mut S) -> PredictionEvent
where
    S: StreamExt<Item = Result<Message, tokio_tungstenite::tungstenite::Error>> + Unpin,
{
    loop {
        match ws.next().await.expect("stream open").expect("frame") {
            Message::Text(text) => return serde_json::from_str(&text).unwrap(),
            Message::Ping(_) | Message::Pong(_) => continue,
            other => panic!("unexpected frame {other:?}"),
        }
    }
}

#[tokio::test]
async fn stream_replays_backlog_then_follows() {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(serve(listener, AppState::new(ServiceConfig::default()), async {
        let _ = stopped.await;
    }));

    let http = reqwest::Client::new();
    let post = |path: String, body: serde_json::Value| {
        let req = http.post(format!("http://{addr}{path}")).json(&body);
        async move {
            let resp = req.send().await.unwrap();
            assert!(resp.status().is_success(), "{}", resp.status());
            resp.json::<serde_json::Value>().await.unwrap()
        }
    };
    let desc = post(
        "/sessions".into(),
        json!({
            "prior": { "component": [{ "weight": 1.0, "mean": [0.0, 0.0], "cov": [[1.0, 0.0], [0.0, 1.0]] }] },
            "plan": { "outer_steps": 2, "inner_steps": 4 },
            "branches": 2,
        }),
    )
    .await;
    let id = desc["id"].as_str().unwrap().to_string();
    post(format!("/sessions/{id}/advance"), json!({})).await;

    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/sessions/{id}/events")).await.unwrap();
    let mut seen = Vec::new();
    // First outer step: 3 inner predictions plus the boundary, per branch.
    for _ in 0..8 {
        seen.push(next_event(&mut ws).await);
    }
    assert!(seen.iter().all(|e| e.session == id && e.outer_step == 0));
    assert_eq!(seen.iter().filter(|e| e.boundary).count(), 2);

    post(format!("/sessions/{id}/advance"), json!({})).await;
    for _ in 0..2 {
        seen.push(next_event(&mut ws).await);
    }
    assert!(seen[8..].iter().all(|e| e.boundary && e.outer_step == 1 && e.nfe == 8));
    assert!(seen
        .windows(2)
        .all(|w| (w[0].outer_step, w[0].nfe, w[0].branch) < (w[1].outer_step, w[1].nfe, w[1].branch)));

    let missing = tokio_tungstenite::connect_async(format!("ws://{addr}/sessions/nope/events")).await;
    assert!(missing.is_err());

    stop.send(()).unwrap();
    drop(ws);
    server.await.unwrap().unwrap();
}
