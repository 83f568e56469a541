//! Two ways onto the same dispatcher: a raw TCP stream of length-prefixed
//! JSON frames (4-byte big-endian length, then the message), and an HTTP
//! server with a WebSocket endpoint for browsers.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::{SinkExt, StreamExt};
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};

use crate::error::{Result, ServiceError};
use crate::protocol::{Command, Request, Response, MAX_FRAME_BYTES};
use crate::session::Service;

/// Read one length-prefixed frame; `None` on a clean end of stream.
pub async fn read_frame(r: &mut (impl AsyncRead + Unpin)) -> Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len).await {
        Ok(_) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let n = u32::from_be_bytes(len) as usize;
    if n > MAX_FRAME_BYTES {
        return Err(ServiceError::FrameTooLarge(n));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).await?;
    Ok(Some(buf))
}

pub async fn write_frame(w: &mut (impl AsyncWrite + Unpin), body: &[u8]) -> Result<()> {
    let n = u32::try_from(body.len()).map_err(|_| ServiceError::FrameTooLarge(body.len()))?;
    w.write_all(&n.to_be_bytes()).await?;
    w.write_all(body).await?;
    w.flush().await?;
    Ok(())
}

/// Generation is CPU-bound; keep it off the async workers.
async fn dispatch(service: &Arc<Service>, body: Vec<u8>) -> Vec<u8> {
    let s = service.clone();
    tokio::task::spawn_blocking(move || s.dispatch_json(&body))
        .await
        .expect("dispatch does not panic")
}

async fn serve_stream(service: Arc<Service>, mut stream: TcpStream) -> Result<()> {
    while let Some(body) = read_frame(&mut stream).await? {
        let reply = dispatch(&service, body).await;
        write_frame(&mut stream, &reply).await?;
    }
    Ok(())
}

/// Accept length-prefixed connections until the listener fails.
pub async fn serve_tcp(service: Arc<Service>, listener: TcpListener) -> Result<()> {
    loop {
        let (stream, _) = listener.accept().await?;
        let s = service.clone();
        tokio::spawn(async move {
            // A broken connection only ends that connection.
            let _ = serve_stream(s, stream).await;
        });
    }
}

/// `GET /health`, `GET /skeleton`, `GET /styles`, `POST /rpc` (one JSON
/// request per body) and `GET /ws` (one JSON request per text message).
pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/health", get(|s| simple(s, Command::Health)))
        .route("/skeleton", get(|s| simple(s, Command::Skeleton)))
        .route("/styles", get(|s| simple(s, Command::Styles)))
        .route("/rpc", post(rpc))
        .route("/ws", get(ws_upgrade))
        .with_state(service)
}

async fn simple(State(service): State<Arc<Service>>, command: Command) -> Json<Response> {
    Json(service.dispatch(Request::new(command)))
}

async fn rpc(State(service): State<Arc<Service>>, body: axum::body::Bytes) -> impl IntoResponse {
    let reply = dispatch(&service, body.to_vec()).await;
    ([(axum::http::header::CONTENT_TYPE, "application/json")], reply)
}

async fn ws_upgrade(State(service): State<Arc<Service>>, ws: WebSocketUpgrade) -> impl IntoResponse {
    ws.on_upgrade(move |socket| ws_session(service, socket))
}

async fn ws_session(service: Arc<Service>, socket: WebSocket) {
    let (mut tx, mut rx) = socket.split();
    while let Some(Ok(msg)) = rx.next().await {
        let body = match msg {
            Message::Text(t) => t.as_bytes().to_vec(),
            Message::Binary(b) => b.to_vec(),
            Message::Close(_) => break,
            _ => continue,
        };
        let reply = dispatch(&service, body).await;
        let text = String::from_utf8(reply).expect("serde_json emits UTF-8");
        if tx.send(Message::Text(text.into())).await.is_err() {
            break;
        }
    }
}

/// Bind both listeners and serve until either fails.
pub async fn serve(service: Arc<Service>, tcp: SocketAddr, http: SocketAddr) -> Result<()> {
    let tcp = TcpListener::bind(tcp).await?;
    let http = TcpListener::bind(http).await?;
    let app = router(service.clone());
    tokio::select! {
        r = serve_tcp(service, tcp) => r,
        r = axum::serve(http, app) => r.map_err(ServiceError::from),
    }
}
