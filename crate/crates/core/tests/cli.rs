use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use caatp::image::{load_image, save_image};
use caatp::style::render_text;
use caatp::synth::generate_base;

fn caatp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_caatp")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn error_json(o: &Output) -> serde_json::Value {
    let err = String::from_utf8(o.stderr.clone()).unwrap();
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    serde_json::from_str(lines[0]).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    image: PathBuf,
    model: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let image = root.join("a.png");
    save_image(&generate_base(2, 1, 24).unwrap()[0], &image).unwrap();
    let model = root.join("m.ckpt");
    let o = caatp(&["train", "--init-only", "--out", p(&model)]);
    assert!(o.status.success(), "{o:?}");
    Fixture {
        _dir: dir,
        root,
        image,
        model,
    }
}

#[test]
fn retouch_writes_image_and_prints_sentence() {
    let f = fixture();
    let out = f.root.join("b.png");
    let o = caatp(&[
        "retouch", "--model", p(&f.model), "--image", p(&f.image), "--delta", "1,0,0,0,0,-1", "--out", p(&out),
    ]);
    assert!(o.status.success(), "{o:?}");
    assert_eq!(stdout(&o).trim_end(), render_text(&[1.0, 0.0, 0.0, 0.0, 0.0, -1.0]));
    // The untrained model is the identity.
    assert_eq!(load_image(&out).unwrap(), load_image(&f.image).unwrap());
}

#[test]
fn retouch_writes_weight_maps() {
    let f = fixture();
    let maps = f.root.join("maps");
    let o = caatp(&[
        "retouch", "--model", p(&f.model), "--image", p(&f.image), "--delta", "0,0,0,0,0,0", "--out",
        p(&f.root.join("c.png")), "--weights-dir", p(&maps),
    ]);
    assert!(o.status.success(), "{o:?}");
    let planes: Vec<Vec<u8>> = (0..5)
        .map(|j| caatp::image::decode_gray_png(&std::fs::read(maps.join(format!("weight_{j}.png"))).unwrap()).unwrap().2)
        .collect();
    for px in 0..planes[0].len() {
        assert_eq!(planes.iter().map(|pl| u32::from(pl[px])).sum::<u32>(), 255);
    }
}

#[test]
fn auto_mode_without_predictor_names_the_artifact() {
    let f = fixture();
    let o = caatp(&["retouch", "--model", p(&f.model), "--image", p(&f.image), "--auto", "--out", p(&f.root.join("x.png"))]);
    assert_eq!(o.status.code(), Some(1));
    let e = error_json(&o);
    assert_eq!(e["error"], "missing_artifact");
    assert!(e["message"].as_str().unwrap().contains("attribute predictor checkpoint"));

    let o = caatp(&[
        "retouch", "--model", p(&f.model), "--image", p(&f.image), "--auto", "--atp", p(&f.root.join("none.ckpt")),
        "--out", p(&f.root.join("x.png")),
    ]);
    assert_eq!(error_json(&o)["error"], "missing_artifact");
}

#[test]
fn failures_are_one_json_line() {
    let f = fixture();
    let o = caatp(&["retouch", "--model", p(&f.root.join("nope.ckpt")), "--image", p(&f.image), "--delta", "0,0,0,0,0,0", "--out", "x.png"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_json(&o)["error"], "missing_artifact");

    let bad = f.root.join("bad.png");
    std::fs::write(&bad, b"not a png").unwrap();
    let o = caatp(&["attrs", "--image", p(&bad)]);
    assert_eq!(error_json(&o)["error"], "image");

    let o = caatp(&["retouch", "--model", p(&f.model), "--image", p(&f.image), "--delta", "1,2", "--out", "x.png"]);
    assert_eq!(error_json(&o)["error"], "config");

    let o = caatp(&["color-count", "--frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_json(&o)["error"], "usage");

    assert!(caatp(&["--help"]).status.success());
    assert!(stdout(&caatp(&["retouch", "--help"])).contains("--delta"));
}

#[test]
fn image_inspection_commands() {
    let f = fixture();
    let o = caatp(&["attrs", "--image", p(&f.image)]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(v.to_string().contains("brightness"), "{v}");

    let o = caatp(&["color-count", "--image", p(&f.image)]);
    let n: usize = stdout(&o).trim().parse().unwrap();
    assert_eq!(n, caatp::curves::unique_color_count(&load_image(&f.image).unwrap()));
}

#[test]
fn predictor_training_and_prediction() {
    let f = fixture();
    let atp = f.root.join("atp.ckpt");
    let o = caatp(&["train-atp", "--out", p(&atp), "--samples", "400", "--steps", "1500"]);
    assert!(o.status.success(), "{o:?}");
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(v["heldout_mae"].as_f64().unwrap() < 0.25, "{v}");

    let o = caatp(&["predict-style", "--model", p(&atp), "--image", p(&f.image)]);
    assert!(o.status.success(), "{o:?}");
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let text = v["text"].as_str().unwrap();
    assert!(caatp::style::parse_text(text).is_ok());
    for k in ["s_x", "s_y_hat", "delta"] {
        assert_eq!(v[k].as_array().unwrap().len(), 6);
    }

    let o = caatp(&[
        "retouch", "--model", p(&f.model), "--image", p(&f.image), "--auto", "--atp", p(&atp), "--out",
        p(&f.root.join("auto.png")),
    ]);
    assert!(o.status.success(), "{o:?}");
    assert_eq!(stdout(&o).trim_end(), text);
}

#[test]
fn data_training_and_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = caatp(&["gen-data", "--out", p(&data), "--count", "8", "--size", "16", "--seed", "3"]);
    assert!(o.status.success(), "{o:?}");
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["content_hash"].as_str().unwrap().len(), 64);

    let cfg = dir.path().join("train.cfg");
    std::fs::write(
        &cfg,
        "epochs = 2\nbatch_size = 2\nn = 2\np = 6\nl = 16\nd = 6\nencoder_size = 16\nencoder_widths = 3,4,5,6\nweight_widths = 2,3,3\n",
    )
    .unwrap();
    let model = dir.path().join("m.ckpt");
    let log = dir.path().join("log.jsonl");
    let o = caatp(&["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&model), "--log", p(&log)]);
    assert!(o.status.success(), "{o:?}");
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[1]["loss"].is_number() && lines[1]["val_psnr"].is_number());

    let o = caatp(&["eval", "--model", p(&model), "--data", p(&data)]);
    assert!(o.status.success(), "{o:?}");
    let r: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(r["count"], 3);
    assert!(r["psnr"].as_f64().unwrap() > 5.0);

    let o = caatp(&["train", "--out", p(&model)]);
    assert_eq!(error_json(&o)["error"], "missing_artifact");
}

#[test]
fn grad_check_passes() {
    let o = caatp(&["grad-check"]);
    assert!(o.status.success(), "{o:?}");
    let results: Vec<serde_json::Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(results.len() > 20);
    assert!(results.iter().all(|r| r["max_rel_error"].as_f64().unwrap() < 1e-4));
}

fn http_get(port: u16, path: &str) -> Option<String> {
    let mut s = TcpStream::connect(("127.0.0.1", port)).ok()?;
    s.set_read_timeout(Some(Duration::from_secs(5))).ok()?;
    write!(s, "GET {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").ok()?;
    let mut buf = String::new();
    s.read_to_string(&mut buf).ok()?;
    Some(buf)
}

#[test]
fn serve_reads_port_from_environment() {
    let f = fixture();
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut child = Command::new(env!("CARGO_BIN_EXE_caatp"))
        .args(["serve", "--model", p(&f.model)])
        .env("CAATP_PORT", port.to_string())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let start = Instant::now();
    let mut reply = None;
    while start.elapsed() < Duration::from_secs(30) {
        if let Some(r) = http_get(port, "/health") {
            reply = Some(r);
            break;
        }
        std::thread::sleep(Duration::from_millis(100));
    }
    child.kill().unwrap();
    child.wait().unwrap();
    let reply = reply.expect("server answered");
    assert!(reply.starts_with("HTTP/1.1 200"), "{reply}");
    assert!(reply.contains("\"status\":\"ok\""), "{reply}");
}
