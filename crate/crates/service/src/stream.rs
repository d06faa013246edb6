//! WebSocket mirror of the frame endpoint: binary PNG messages in, one JSON
//! frame response (or error body) out per message. Frame indices continue
//! from the session's last accepted frame.

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::response::Response;

use crate::error::{ApiError, ApiResult};
use crate::{ingest_frame, AppState, Session, Shared};

pub(crate) async fn stream(
    State(st): State<AppState>,
    Path(id): Path<String>,
    ws: WebSocketUpgrade,
) -> ApiResult<Response> {
    let session = st.session(&id).await?;
    {
        let mut g = session.lock().await;
        let live = g.live_mut()?;
        if live.stream_active {
            return Err(ApiError::conflict(format!("session {id} already has an active stream")));
        }
        live.stream_active = true;
    }
    Ok(ws.on_upgrade(move |socket| run(socket, session)))
}

async fn run(mut socket: WebSocket, session: Shared<Session>) {
    while let Some(Ok(msg)) = socket.recv().await {
        let reply = match msg {
            Message::Binary(png) => {
                let index = {
                    let g = session.lock().await;
                    g.live.as_ref().and_then(|l| l.last_index).map_or(0, |i| i + 1)
                };
                match ingest_frame(&session, index, png).await {
                    Ok(r) => serde_json::to_string(&r),
                    Err(e) => serde_json::to_string(&e.body()),
                }
            }
            Message::Text(_) => serde_json::to_string(&ApiError::bad_request("send frames as binary PNG messages").body()),
            Message::Close(_) => break,
            _ => continue,
        };
        let text = reply.unwrap_or_else(|e| format!("{{\"code\":\"internal\",\"message\":\"{e}\",\"detail\":null}}"));
        if socket.send(Message::Text(text.into())).await.is_err() {
            break;
        }
    }
    if let Some(live) = session.lock().await.live.as_mut() {
        live.stream_active = false;
    }
}
