//! Scriptable adapter used by the test suites.
//!
//! Usage: tcd-mock-adapter --mode <echo-semantic|greenness|hang|garbage>
//!        [--version N] [--crash-after N] [--delay-ms N]

use std::io::{self, BufWriter, Write};
use std::process::ExitCode;
use std::time::Duration;

use serde_json::{json, Value};
use tcd_core::predict::protocol::{self, Frame};
use tcd_core::predict::{Capabilities, GreennessPredictor, Predictor, SemanticPrediction, TileInput};
use tcd_core::raster::{PixelBlock, RasterWindow};

struct Opts {
    mode: String,
    version: u64,
    crash_after: Option<u64>,
    delay: Duration,
}

fn parse_args() -> Result<Opts, String> {
    let mut opts = Opts {
        mode: "greenness".into(),
        version: protocol::PROTOCOL_VERSION,
        crash_after: None,
        delay: Duration::ZERO,
    };
    let mut args = std::env::args().skip(1);
    while let Some(a) = args.next() {
        let mut val = || args.next().ok_or(format!("{a} needs a value"));
        match a.as_str() {
            "--mode" => opts.mode = val()?,
            "--version" => opts.version = val()?.parse().map_err(|e| format!("{e}"))?,
            "--crash-after" => opts.crash_after = Some(val()?.parse().map_err(|e| format!("{e}"))?),
            "--delay-ms" => opts.delay = Duration::from_millis(val()?.parse().map_err(|e| format!("{e}"))?),
            _ => return Err(format!("unknown argument {a}")),
        }
    }
    Ok(opts)
}

fn tile_block(frame: &Frame) -> Result<PixelBlock, String> {
    let dim = |k: &str| frame.header.get(k).and_then(Value::as_u64).map(|v| v as usize);
    let (w, h) = (dim("width").ok_or("missing width")?, dim("height").ok_or("missing height")?);
    if frame.payload.len() < w * h * 3 {
        return Err("payload underrun".into());
    }
    PixelBlock::from_u8(w, h, 3, frame.payload[..w * h * 3].to_vec()).map_err(|e| e.to_string())
}

fn answer(opts: &Opts, frame: &Frame) -> Result<(Value, Vec<u8>), String> {
    let id = frame.id().ok_or("missing id")?;
    let block = tile_block(frame)?;
    let tile = TileInput::new(RasterWindow::full(block.width, block.height), &block);
    let g = GreennessPredictor::default();
    match (frame.kind(), opts.mode.as_str()) {
        ("predict_semantic", "echo-semantic") => {
            let rgb = block.as_u8().unwrap_or_default();
            let pred = SemanticPrediction {
                width: block.width,
                height: block.height,
                confidence: rgb.chunks_exact(3).map(|p| p[1] as f32 / 255.0).collect(),
            };
            Ok(protocol::semantic_result(id, &pred))
        }
        ("predict_semantic", _) => {
            let pred = g.predict_semantic(&tile).map_err(|e| e.to_string())?;
            Ok(protocol::semantic_result(id, &pred))
        }
        ("predict_instances", "greenness") => {
            let inst = g.predict_instances(&tile).map_err(|e| e.to_string())?;
            Ok((protocol::instance_result(id, &inst), Vec::new()))
        }
        (kind, mode) => Err(format!("{mode} cannot serve {kind}")),
    }
}

fn main() -> ExitCode {
    let opts = match parse_args() {
        Ok(o) => o,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };
    if opts.mode == "hang" {
        std::thread::sleep(Duration::from_secs(3600));
        return ExitCode::SUCCESS;
    }
    let mut out = BufWriter::new(io::stdout().lock());
    let mut input = io::stdin().lock();
    if opts.mode == "garbage" {
        let _ = out.write_all(b"this is not a frame");
        let _ = out.flush();
        return ExitCode::SUCCESS;
    }
    let caps = Capabilities {
        semantic: true,
        instance: opts.mode == "greenness",
    };
    let mut hello = protocol::hello(caps);
    hello["version"] = json!(opts.version);
    if protocol::write_frame(&mut out, &hello, &[]).is_err() {
        return ExitCode::FAILURE;
    }
    let mut served = 0u64;
    loop {
        let frame = match protocol::read_frame(&mut input) {
            Ok(Some(f)) => f,
            Ok(None) => return ExitCode::SUCCESS,
            Err(e) => {
                let _ = protocol::write_frame(&mut out, &protocol::error_header(None, &e.to_string()), &[]);
                return ExitCode::FAILURE;
            }
        };
        if opts.crash_after.is_some_and(|n| served >= n) {
            eprintln!("mock adapter crashing after {served} requests");
            std::process::exit(3);
        }
        std::thread::sleep(opts.delay);
        let (header, payload) = match answer(&opts, &frame) {
            Ok(r) => r,
            Err(msg) => (protocol::error_header(frame.id(), &msg), Vec::new()),
        };
        if protocol::write_frame(&mut out, &header, &payload).is_err() {
            return ExitCode::FAILURE;
        }
        served += 1;
    }
}
