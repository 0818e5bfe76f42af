use std::time::{Duration, Instant};

use tcd_core::predict::adapter::{spawn_adapter, AdapterOptions};
use tcd_core::predict::{GreennessPredictor, Predictor, TileInput};
use tcd_core::raster::{PixelBlock, RasterWindow};

fn mock(args: &[&str]) -> Vec<String> {
    std::iter::once(env!("CARGO_BIN_EXE_tcd-mock-adapter").to_string())
        .chain(args.iter().map(|s| s.to_string()))
        .collect()
}

fn block(w: usize, h: usize) -> PixelBlock {
    let mut data = Vec::with_capacity(w * h * 3);
    for r in 0..h {
        for c in 0..w {
            data.extend_from_slice(&[(c * 3 % 256) as u8, ((r * 5 + c) % 256) as u8, (r % 256) as u8]);
        }
    }
    PixelBlock::from_u8(w, h, 3, data).unwrap()
}

#[test]
fn echo_semantic_handshake_and_result() {
    let p = spawn_adapter(&mock(&["--mode", "echo-semantic"]), AdapterOptions::default()).unwrap();
    let caps = p.capabilities();
    assert!(caps.semantic && !caps.instance);
    let b = block(40, 30);
    let out = p.predict_semantic(&TileInput::new(RasterWindow::full(40, 30), &b)).unwrap();
    let rgb = b.as_u8().unwrap();
    for (i, v) in out.confidence.iter().enumerate() {
        assert_eq!(*v, rgb[i * 3 + 1] as f32 / 255.0);
    }
    assert!(p.predict_instances(&TileInput::new(RasterWindow::full(40, 30), &b)).is_err());
}

#[test]
fn greenness_adapter_matches_builtin() {
    let p = spawn_adapter(&mock(&["--mode", "greenness"]), AdapterOptions::default()).unwrap();
    let b = block(64, 48);
    let tile = TileInput::new(RasterWindow::full(64, 48), &b);
    let local = GreennessPredictor::default();
    assert_eq!(p.predict_semantic(&tile).unwrap(), local.predict_semantic(&tile).unwrap());
    let remote = p.predict_instances(&tile).unwrap();
    assert_eq!(remote.len(), local.predict_instances(&tile).unwrap().len());
}

#[test]
fn version_mismatch_is_rejected() {
    let err = spawn_adapter(&mock(&["--mode", "greenness", "--version", "999"]), AdapterOptions::default())
        .err()
        .expect("must fail");
    assert!(err.to_string().contains("version mismatch"), "{err}");
}

#[test]
fn handshake_timeout() {
    let opts = AdapterOptions {
        handshake_timeout: Duration::from_millis(300),
        ..Default::default()
    };
    let t = Instant::now();
    let err = spawn_adapter(&mock(&["--mode", "hang"]), opts).err().expect("must time out");
    assert!(err.to_string().contains("timed out"), "{err}");
    assert!(t.elapsed() < Duration::from_secs(5));
}

#[test]
fn garbage_handshake_is_protocol_error() {
    assert!(spawn_adapter(&mock(&["--mode", "garbage"]), AdapterOptions::default()).is_err());
}

#[test]
fn missing_program_fails_to_spawn() {
    let err = spawn_adapter(&["/nonexistent/adapter".to_string()], AdapterOptions::default())
        .err()
        .expect("must fail");
    assert!(err.to_string().contains("cannot spawn"), "{err}");
}

#[test]
fn killed_adapter_is_an_error_then_respawned() {
    let p = spawn_adapter(&mock(&["--mode", "greenness", "--crash-after", "1"]), AdapterOptions::default()).unwrap();
    let b = block(16, 16);
    let tile = TileInput::new(RasterWindow::full(16, 16), &b);
    assert!(p.predict_semantic(&tile).is_ok());
    let err = p.predict_semantic(&tile).unwrap_err();
    assert!(err.to_string().contains("crashing"), "{err}");
    assert!(p.predict_semantic(&tile).is_ok());
}

#[test]
fn request_timeout() {
    let opts = AdapterOptions {
        request_timeout: Duration::from_millis(200),
        ..Default::default()
    };
    let p = spawn_adapter(&mock(&["--mode", "greenness", "--delay-ms", "5000"]), opts).unwrap();
    let b = block(8, 8);
    let err = p.predict_semantic(&TileInput::new(RasterWindow::full(8, 8), &b)).unwrap_err();
    assert!(err.to_string().contains("timed out"), "{err}");
}

#[test]
fn pool_serves_concurrent_requests() {
    let opts = AdapterOptions {
        processes: 3,
        ..Default::default()
    };
    let p = spawn_adapter(&mock(&["--mode", "echo-semantic"]), opts).unwrap();
    assert_eq!(p.max_concurrency(), Some(3));
    let b = block(32, 32);
    std::thread::scope(|s| {
        for _ in 0..6 {
            s.spawn(|| {
                for _ in 0..5 {
                    let out = p.predict_semantic(&TileInput::new(RasterWindow::full(32, 32), &b)).unwrap();
                    assert_eq!(out.confidence.len(), 1024);
                }
            });
        }
    });
}
