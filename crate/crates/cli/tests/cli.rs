use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn qosmw(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qosmw"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_scenario(dir: &Path, assertion: &str) -> String {
    let text = format!(
        r#"
name = "cli-tiny"
duration_ms = 400

[gateway]
service_time_ms = 2
worker_pool_size = 4

[autonomic]
enabled = false

[[injectors]]
profile = {{ name = "Hi", rate = 20.0, arrival = {{ kind = "periodic" }}, priority_hint = "HIGH" }}

[[assertions]]
kind = "accounting_closure"

{assertion}
"#
    );
    let path = dir.join("tiny.toml");
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn lists_bundled_scenarios() {
    let o = qosmw(&["scenarios"]);
    assert!(o.status.success());
    let names: Vec<String> = stdout(&o).lines().map(str::to_string).collect();
    assert_eq!(names, ["nursing-home", "wfq-demo", "balancer-demo"]);
}

#[test]
fn validate_prints_the_parsed_scenario() {
    let o = qosmw(&["validate", "--scenario", "nursing-home"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["name"], "nursing-home");
    assert_eq!(v["injectors"].as_array().unwrap().len(), 3);
}

#[test]
fn malformed_scenario_exits_2_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "name = \"x\"\n[gateway\n").unwrap();
    let o = qosmw(&["validate", "--scenario", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 2"), "{err}");
}

#[test]
fn passing_run_exits_0_and_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_scenario(dir.path(), "");
    let out = dir.path().join("out");
    let o = qosmw(&["run", "--scenario", &scenario, "--mode", "both", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("[PASS]"));
    for mode in ["baseline", "managed"] {
        let summary = out.join(mode).join("summary.json");
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(summary).unwrap()).unwrap();
        assert_eq!(v["passed"], true);
        assert!(out.join(mode).join("requests.csv").exists());
    }
}

#[test]
fn failing_assertion_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write_scenario(
        dir.path(),
        "[[assertions]]\nkind = \"mean_rtt_below\"\ninjector = \"Hi\"\nms = 0.0\n",
    );
    let o = qosmw(&["run", "--scenario", &scenario, "--mode", "baseline"]);
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
    assert!(stdout(&o).contains("[FAIL]"));
}

#[test]
fn unknown_scenario_exits_2() {
    let o = qosmw(&["run", "--scenario", "no-such-scenario"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn run_gateway_serves() {
    let mut child = Command::new(env!("CARGO_BIN_EXE_qosmw"))
        .args(["run-gateway", "--listen", "127.0.0.1:0", "--service-time-ms", "1"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let addr = line.trim().rsplit(' ').next().unwrap().to_string();

    let mut s = TcpStream::connect(&addr).unwrap();
    write!(
        s,
        "POST /app/data HTTP/1.1\r\nhost: {addr}\r\ncontent-length: 2\r\nconnection: close\r\n\r\n{{}}"
    )
    .unwrap();
    let mut reply = String::new();
    s.read_to_string(&mut reply).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(reply.starts_with("HTTP/1.1 201") || reply.starts_with("HTTP/1.1 200"), "{reply}");
}
