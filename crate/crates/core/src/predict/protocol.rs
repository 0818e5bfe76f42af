//! Model-adapter wire protocol.
//!
//! Every message is `u32 LE header_len ‖ JSON header ‖ payload`, where the payload length
//! is the header's `payload_len` (absent means 0).

use std::io::{self, Read, Write};

use geo::{LineString, Polygon};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::predict::{Capabilities, InstanceClass, InstanceObject, SemanticPrediction};

pub const PROTOCOL_VERSION: u64 = 1;

/// Headers longer than this are treated as a protocol violation.
pub const MAX_HEADER_LEN: usize = 64 << 20;

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub header: Value,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(header: Value, payload: Vec<u8>) -> Self {
        Frame { header, payload }
    }

    pub fn kind(&self) -> &str {
        self.header.get("type").and_then(Value::as_str).unwrap_or("")
    }

    pub fn id(&self) -> Option<u64> {
        self.header.get("id").and_then(Value::as_u64)
    }
}

/// Writes one frame; `payload_len` in the header is set from the payload.
pub fn write_frame(w: &mut impl Write, header: &Value, payload: &[u8]) -> io::Result<()> {
    let mut header = header.clone();
    if let Value::Object(m) = &mut header {
        if !payload.is_empty() || m.contains_key("payload_len") {
            m.insert("payload_len".into(), json!(payload.len()));
        }
    }
    let bytes = serde_json::to_vec(&header)?;
    let len = u32::try_from(bytes.len()).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "header too long"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&bytes)?;
    w.write_all(payload)?;
    w.flush()
}

/// Reads one frame. `Ok(None)` on a clean end of stream before a new frame starts.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Frame>> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(Error::Protocol("stream ended inside a frame length".into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_HEADER_LEN {
        return Err(Error::Protocol(format!("header length {len} exceeds limit")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Protocol(format!("truncated header: {e}")))?;
    let header: Value =
        serde_json::from_slice(&buf).map_err(|e| Error::Protocol(format!("header is not JSON: {e}")))?;
    if !header.is_object() {
        return Err(Error::Protocol("header is not a JSON object".into()));
    }
    let payload_len = match header.get("payload_len") {
        None | Some(Value::Null) => 0,
        Some(v) => v
            .as_u64()
            .ok_or_else(|| Error::Protocol("payload_len is not a non-negative integer".into()))?
            as usize,
    };
    let mut payload = vec![0u8; payload_len];
    r.read_exact(&mut payload)
        .map_err(|e| Error::Protocol(format!("truncated payload: {e}")))?;
    Ok(Some(Frame { header, payload }))
}

pub fn hello(capabilities: Capabilities) -> Value {
    let mut caps = Vec::new();
    if capabilities.semantic {
        caps.push("semantic");
    }
    if capabilities.instance {
        caps.push("instance");
    }
    json!({"type": "hello", "version": PROTOCOL_VERSION, "capabilities": caps})
}

/// Validates a hello frame and returns the advertised capabilities.
pub fn parse_hello(frame: &Frame) -> Result<Capabilities> {
    if frame.kind() != "hello" {
        return Err(Error::Protocol(format!("expected hello, got {:?}", frame.kind())));
    }
    let version = frame.header.get("version").and_then(Value::as_u64);
    if version != Some(PROTOCOL_VERSION) {
        return Err(Error::Protocol(format!(
            "protocol version mismatch: adapter speaks {}, expected {PROTOCOL_VERSION}",
            frame.header.get("version").map(|v| v.to_string()).unwrap_or_else(|| "nothing".into())
        )));
    }
    let mut caps = Capabilities::default();
    let list = frame
        .header
        .get("capabilities")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Protocol("hello without capabilities".into()))?;
    for c in list {
        match c.as_str() {
            Some("semantic") => caps.semantic = true,
            Some("instance") => caps.instance = true,
            _ => {}
        }
    }
    Ok(caps)
}

pub fn request_header(kind: &str, id: u64, width: usize, height: usize) -> Value {
    json!({
        "type": kind,
        "id": id,
        "width": width,
        "height": height,
        "bands": 3,
        "dtype": "u8",
        "payload_len": width * height * 3,
    })
}

pub fn semantic_result(id: u64, pred: &SemanticPrediction) -> (Value, Vec<u8>) {
    let payload: Vec<u8> = pred.confidence.iter().flat_map(|v| v.to_le_bytes()).collect();
    let header = json!({
        "type": "semantic_result",
        "id": id,
        "width": pred.width,
        "height": pred.height,
        "dtype": "f32",
        "payload_len": payload.len(),
    });
    (header, payload)
}

pub fn error_header(id: Option<u64>, message: &str) -> Value {
    json!({"type": "error", "id": id, "message": message})
}

#[derive(Serialize, Deserialize)]
struct WireInstance {
    class: String,
    score: f64,
    polygon: Vec<[f64; 2]>,
    #[serde(default)]
    holes: Vec<Vec<[f64; 2]>>,
}

fn ring_to_wire(ring: &LineString<f64>) -> Vec<[f64; 2]> {
    ring.coords().map(|c| [c.x, c.y]).collect()
}

fn ring_from_wire(ring: &[[f64; 2]]) -> LineString<f64> {
    LineString::from(ring.iter().map(|p| (p[0], p[1])).collect::<Vec<_>>())
}

pub fn instance_result(id: u64, instances: &[InstanceObject]) -> Value {
    let wire: Vec<WireInstance> = instances
        .iter()
        .map(|i| WireInstance {
            class: i.class.as_str().into(),
            score: i.score,
            polygon: ring_to_wire(i.geometry.exterior()),
            holes: i.geometry.interiors().iter().map(ring_to_wire).collect(),
        })
        .collect();
    json!({"type": "instance_result", "id": id, "instances": wire, "payload_len": 0})
}

fn check_response(frame: &Frame, expect: &str, id: u64) -> Result<()> {
    if frame.kind() == "error" {
        let msg = frame.header.get("message").and_then(Value::as_str).unwrap_or("unspecified");
        return Err(Error::Predictor(format!("adapter error for request {id}: {msg}")));
    }
    if frame.kind() != expect {
        return Err(Error::Protocol(format!("expected {expect}, got {:?}", frame.kind())));
    }
    if frame.id() != Some(id) {
        return Err(Error::Protocol(format!("response id {:?} does not match request {id}", frame.id())));
    }
    Ok(())
}

pub fn parse_semantic_result(frame: &Frame, id: u64, width: usize, height: usize) -> Result<SemanticPrediction> {
    check_response(frame, "semantic_result", id)?;
    let dim = |k: &str| frame.header.get(k).and_then(Value::as_u64).map(|v| v as usize);
    if dim("width") != Some(width) || dim("height") != Some(height) {
        return Err(Error::Protocol(format!(
            "semantic result is {:?}x{:?}, expected {width}x{height}",
            dim("width"),
            dim("height")
        )));
    }
    if frame.header.get("dtype").and_then(Value::as_str) != Some("f32") {
        return Err(Error::Protocol("semantic result dtype must be f32".into()));
    }
    if frame.payload.len() != width * height * 4 {
        return Err(Error::Protocol(format!(
            "semantic payload has {} bytes, expected {}",
            frame.payload.len(),
            width * height * 4
        )));
    }
    let confidence: Vec<f32> = frame
        .payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let pred = SemanticPrediction {
        width,
        height,
        confidence,
    };
    pred.validate(width, height)?;
    Ok(pred)
}

pub fn parse_instance_result(frame: &Frame, id: u64) -> Result<Vec<InstanceObject>> {
    check_response(frame, "instance_result", id)?;
    let list = frame
        .header
        .get("instances")
        .cloned()
        .ok_or_else(|| Error::Protocol("instance_result without instances".into()))?;
    let wire: Vec<WireInstance> =
        serde_json::from_value(list).map_err(|e| Error::Protocol(format!("bad instance list: {e}")))?;
    wire.into_iter()
        .map(|w| {
            let class = InstanceClass::parse(&w.class)
                .ok_or_else(|| Error::Protocol(format!("unknown instance class {:?}", w.class)))?;
            if !(0.0..=1.0).contains(&w.score) {
                return Err(Error::Protocol(format!("instance score {} outside [0, 1]", w.score)));
            }
            let geometry = Polygon::new(ring_from_wire(&w.polygon), w.holes.iter().map(|h| ring_from_wire(h)).collect());
            Ok(InstanceObject {
                class,
                score: w.score,
                geometry,
            })
        })
        .collect()
}
