use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fusecast"))
}

struct Serving {
    child: Child,
    fuse1: SocketAddr,
    http: Option<SocketAddr>,
}

impl Drop for Serving {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn serve(args: &[&str]) -> Serving {
    let mut child = bin()
        .arg("serve")
        .args(["--transport", "fuse1:0", "--control", "0"])
        .args(args)
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
    let (mut fuse1, mut http) = (None, None);
    let want_http = args.contains(&"--http");
    while fuse1.is_none() || (want_http && http.is_none()) {
        let line = lines.next().expect("server exited early").unwrap();
        if let Some(a) = line.strip_prefix("fuse1 listening on ") {
            fuse1 = Some(a.parse().unwrap());
        }
        if let Some(a) = line.strip_prefix("http listening on ") {
            http = Some(a.parse().unwrap());
        }
    }
    std::thread::spawn(move || for _ in lines {});
    Serving { child, fuse1: fuse1.unwrap(), http }
}

fn http_get(addr: SocketAddr, path: &str) -> (String, String) {
    let mut s = TcpStream::connect(addr).unwrap();
    write!(s, "GET {path} HTTP/1.1\r\nHost: localhost\r\n\r\n").unwrap();
    let mut text = String::new();
    s.read_to_string(&mut text).unwrap();
    let (head, body) = text.split_once("\r\n\r\n").unwrap();
    (head.to_owned(), body.to_owned())
}

fn interrupt(child: &mut Child) -> i32 {
    unsafe { libc::kill(child.id() as i32, libc::SIGINT) };
    let deadline = Instant::now() + Duration::from_secs(10);
    loop {
        if let Some(status) = child.try_wait().unwrap() {
            return status.code().unwrap_or(-1);
        }
        assert!(Instant::now() < deadline, "server ignored SIGINT");
        std::thread::sleep(Duration::from_millis(20));
    }
}

#[test]
fn help_lists_flags() {
    let out = bin().args(["serve", "--help"]).output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    for flag in ["--scene", "--sources", "--size", "--tick", "--transport", "--http", "--control", "--metrics", "--token"] {
        assert!(text.contains(flag), "serve --help lacks {flag}");
    }
    let out = bin().args(["bench", "--help"]).output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    for flag in ["--mode", "--channels", "--duration", "--bandwidth", "--base-delay", "--count", "--out"] {
        assert!(text.contains(flag), "bench --help lacks {flag}");
    }
}

#[test]
fn too_many_sources_is_config_error() {
    let out = bin().args(["serve", "--sources", "synthetic:257", "--transport", "fuse1:0"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("CapacityExceeded"));
}

#[test]
fn bad_scene_file_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scene.json");
    std::fs::write(&path, r#"{"canvas":{"width":640,"height":360},"tick_rate":30,"channels":[{"id":1,"board":false,"control_group":true}]}"#).unwrap();
    let out = bin().args(["serve", "--transport", "fuse1:0", "--scene"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("DanglingControlGroup"));
}

#[test]
fn taken_port_is_bind_error() {
    let taken = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = taken.local_addr().unwrap().port();
    let out = bin()
        .args(["serve", "--sources", "synthetic:1", "--control", "0", "--transport"])
        .arg(format!("fuse1:{port}"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn serve_meta_then_sigint() {
    let mut s = serve(&["--sources", "synthetic:4", "--size", "1280x720", "--tick", "30", "--http", "0"]);
    let http = s.http.unwrap();
    let deadline = Instant::now() + Duration::from_secs(5);
    let meta = loop {
        let (head, body) = http_get(http, "/meta");
        if head.starts_with("HTTP/1.1 200") {
            let v: serde_json::Value = serde_json::from_str(&body).unwrap();
            if v["channels"].as_array().unwrap().len() == 4 {
                break v;
            }
        }
        assert!(Instant::now() < deadline, "meta never listed 4 channels");
        std::thread::sleep(Duration::from_millis(50));
    };
    assert_eq!((meta["width"].as_u64(), meta["height"].as_u64()), (Some(1280), Some(720)));
    assert_eq!(interrupt(&mut s.child), 0);
    TcpListener::bind(s.fuse1).expect("fuse1 port released");
    TcpListener::bind(http).expect("http port released");
}

#[test]
fn client_verifies_three_channels() {
    let s = serve(&["--sources", "synthetic:3", "--size", "640x360", "--source-size", "320x180"]);
    let out = bin()
        .args(["client", "--verify", "--duration", "2s", "--source-size", "320x180", "--connect"])
        .arg(s.fuse1.to_string())
        .output()
        .unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{text}{}", String::from_utf8_lossy(&out.stderr));
    assert!(text.contains("mean latency:"));
    assert!(text.contains("max sync spread:"));
    assert!(text.contains("0 mismatched, 0 undecodable"));
}

#[test]
fn client_with_wrong_source_size_fails_verification() {
    let s = serve(&["--sources", "synthetic:2", "--size", "640x360", "--source-size", "320x180"]);
    let out = bin()
        .args(["client", "--verify", "--duration", "1s", "--source-size", "64x16", "--connect"])
        .arg(s.fuse1.to_string())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn client_against_stopped_server_exits_4() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let out = bin().args(["client", "--duration", "1s", "--connect"]).arg(format!("127.0.0.1:{port}")).output().unwrap();
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn bench_fused_writes_reports_and_table() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("fused.csv");
    let out = bin()
        .args(["bench", "--mode", "fused", "--channels", "1,2", "--duration", "2s", "--warmup", "300ms", "--out"])
        .arg(&out_path)
        .output()
        .unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{text}");
    assert_eq!(text.lines().filter(|l| l.starts_with("fused ")).count(), 2, "{text}");
    let csv = std::fs::read_to_string(dir.path().join("fused-fused-n2.csv")).unwrap();
    assert!(csv.starts_with("t_us,channel,metric,value\n0,,config.mode,fused\n"));
    assert!(csv.contains(",latency_us,"));
}

#[test]
fn bench_config_echo_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let echo = |name: &str| {
        let path = dir.path().join(name);
        let out = bin()
            .args(["bench", "--channels", "1", "--duration", "1s", "--warmup", "200ms", "--out"])
            .arg(&path)
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0));
        std::fs::read_to_string(path).unwrap().lines().filter(|l| l.contains(",config.")).map(str::to_owned).collect::<Vec<_>>()
    };
    let a = echo("a.csv");
    assert!(!a.is_empty());
    assert_eq!(a, echo("b.csv"));
}

#[test]
fn bench_response_prints_per_kind() {
    let out = bin().args(["bench", "--mode", "response", "--channels", "3", "--count", "20"]).output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{text}");
    assert!(text.lines().any(|l| l.starts_with("select ") && l.contains(" 20 ")), "{text}");
    assert!(text.contains("timeouts: 0"));
}

#[test]
fn bench_rejects_bad_params() {
    let out = bin().args(["bench", "--channels", "0"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().args(["bench", "--bandwidth", "fast"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
