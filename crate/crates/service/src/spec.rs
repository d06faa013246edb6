//! Machine-readable description of the API, served at `/api/spec`.

use axum::Json;
use serde_json::{json, Value};

pub(crate) async fn api_spec() -> Json<Value> {
    Json(description())
}

fn op(summary: &str, request: Value, response: Value) -> Value {
    json!({ "summary": summary, "request": request, "response": response })
}

pub(crate) fn description() -> Value {
    let error = json!({ "code": "string", "message": "string", "detail": "any" });
    json!({
        "openapi": "3.0.0-lite",
        "info": { "title": "slidereg service", "version": env!("CARGO_PKG_VERSION") },
        "error_body": error,
        "paths": {
            "/api/spec": { "get": op("this document", Value::Null, json!("object")) },
            "/sessions": { "post": op(
                "create a session",
                json!({ "mode": "live_guidance|verification|simulation", "profile": "microscope id",
                        "magnification?": "100|400|1000", "patch_center?": {"x": "px", "y": "px"},
                        "target?": {"target_center": {"x": "px", "y": "px"}, "target_radius": "px"},
                        "target_radius?": "px", "stage_mm?": ["x", "y"] }),
                json!({ "session_id": "string", "mode": "string", "profile": "string" })) },
            "/sessions/{id}": { "get": op("session state", Value::Null, json!("session view")) },
            "/sessions/{id}/frames": { "post": op(
                "ingest one frame; query `index` must increase; 409 otherwise",
                json!("image/png body, ?index=N"),
                json!({ "index": "int", "shift": {"x": "px", "y": "px"}, "confidence": "0..1",
                        "guidance": {"view_vector": "px", "stage_vector_mm": "mm", "arrived": "bool", "lock": "locked|lost"},
                        "arrived": "bool", "lock": "locked|lost", "patch_center": "px", "target": "target" })) },
            "/sessions/{id}/stream": { "get": op(
                "WebSocket; binary PNG messages in, frame responses out; one stream per session",
                Value::Null, Value::Null) },
            "/transfer/run": { "post": op(
                "start (or reuse) a transfer job for a region",
                json!({ "region_id": "string" }), json!({ "job_id": "string", "status": "queued|running|done|failed" })) },
            "/transfer/jobs/{id}": { "get": op(
                "job progress and TransferRecords", Value::Null,
                json!({ "job_id": "string", "region_id": "string", "content_hash": "hex", "status": "string",
                        "records": "TransferRecord[]", "halted": "edge failure or null", "error": "string|null" })) },
            "/verify/queue": { "get": op("annotations needing review", Value::Null,
                json!([{ "reference": "region:slot:annotation", "region_id": "string", "slot": "slot", "annotation": "Annotation" }])) },
            "/verify/{reference}": { "post": op(
                "accept, correct, add or delete an annotation",
                json!({ "action": "accept|correct|add|delete",
                        "payload?": { "box?": ["x1", "y1", "x2", "y2"], "dx?": "px", "dy?": "px", "label?": "class" },
                        "who?": "operator id" }),
                json!({ "annotation": "Annotation|null", "audit": "AuditEntry[]" })) },
            "/regions": { "get": op("all regions", Value::Null, json!("RegionEntry[]")) },
            "/regions/{id}": { "get": op("one region", Value::Null, json!("RegionEntry")) },
            "/regions/{id}/images/{slot}": { "get": op("slot image", Value::Null, json!("image/png")) },
            "/calibration": {
                "get": op("stored calibration maps", Value::Null, json!("CalibrationMap[]")),
                "post": op("fit and store a calibration",
                    json!({ "kind": "cross_magnification|cross_microscope",
                            "from": {"microscope": "id", "magnification": "int"},
                            "to": {"microscope": "id", "magnification": "int"},
                            "pairs": [[["x", "y"], ["x", "y"]]] }),
                    json!("CalibrationMap")) }
        }
    })
}
