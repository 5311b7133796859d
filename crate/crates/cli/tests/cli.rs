use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

fn simulstream(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_simulstream"))
        .args(args)
        .env("SIMULSTREAM_LOG", "off")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = simulstream(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    simulstream(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn corpus(dir: &Path) {
    ok(&[
        "gen",
        "--out",
        s(dir),
        "--train",
        "300",
        "--dev",
        "0",
        "--test",
        "30",
        "--dim",
        "8",
        "--shift",
        "es=0,fr=2",
    ]);
}

fn payload(path: &Path) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    assert!(v.as_object_mut().unwrap().remove("generated_at").is_some());
    v
}

#[test]
fn generate_train_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    let train = dir.path().join("train.tsv");
    let test = dir.path().join("test.tsv");
    let model = dir.path().join("model.json");
    let stdout = ok(&[
        "train",
        "--manifest",
        s(&train),
        "--k",
        "es=1,fr=3",
        "--dim",
        "8",
        "--out",
        s(&model),
    ]);
    assert!(stdout.starts_with("nll/token\t"));
    assert!(dir.path().join("model.json.log.json").exists());

    let agent = format!("model:{}", s(&model));
    let mut runs = Vec::new();
    for (workers, name) in [("1", "a.json"), ("1", "b.json"), ("4", "c.json")] {
        let out = dir.path().join(name);
        let stdout = ok(&[
            "eval",
            "--manifest",
            s(&test),
            "--k",
            "es=1,fr=3",
            "--mode",
            "async",
            "--agent",
            &agent,
            "--workers",
            workers,
            "--dim",
            "8",
            "--out",
            s(&out),
        ]);
        assert!(stdout.contains("es\tk=1\tbleu=100.00"), "{stdout}");
        assert!(stdout.contains("fr\tk=3\tbleu=100.00"), "{stdout}");
        assert!(dir.path().join(name.replace(".json", ".tsv")).exists());
        runs.push(payload(&out));
    }
    assert_eq!(runs[0], runs[1]);
    assert_eq!(runs[0], runs[2]);
}

#[test]
fn report_pivots_sync_runs_by_k() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    let test = dir.path().join("test.tsv");
    let mut files = Vec::new();
    for k in ["3", "4"] {
        let out = dir.path().join(format!("k{k}.json"));
        ok(&[
            "eval",
            "--manifest",
            s(&test),
            "--k",
            k,
            "--languages",
            "es,fr",
            "--dim",
            "8",
            "--out",
            s(&out),
        ]);
        files.push(out);
    }
    let tsv = ok(&["report", s(&files[0]), s(&files[1])]);
    assert_eq!(tsv, "lang\tk=3\tk=4\nes\t100.00\t100.00\nfr\t100.00\t100.00\n");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    let test = dir.path().join("test.tsv");
    let test = s(&test);
    assert_eq!(code(&["eval", "--manifest", test, "--k", "es=1", "--dim", "8"]), 0);
    // Sync mode with unequal k, a bad agent and a bad flag are configuration errors.
    assert_eq!(code(&["eval", "--manifest", test, "--k", "es=1,fr=2", "--dim", "8"]), 1);
    assert_eq!(
        code(&[
            "eval",
            "--manifest",
            test,
            "--k",
            "es=1",
            "--agent",
            "psychic",
            "--dim",
            "8"
        ]),
        1
    );
    assert_eq!(code(&["eval", "--manifest", test, "--k", "es=1", "--bogus"]), 1);
    // Missing data and the wrong feature dimension are data errors.
    assert_eq!(
        code(&["eval", "--manifest", s(&dir.path().join("none.tsv")), "--k", "es=1"]),
        2
    );
    assert_eq!(code(&["eval", "--manifest", test, "--k", "es=1", "--dim", "5"]), 2);
    // No agent listens on a closed port.
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let agent = format!("tcp://127.0.0.1:{port}");
    assert_eq!(
        code(&[
            "eval",
            "--manifest",
            test,
            "--k",
            "es=1",
            "--agent",
            &agent,
            "--dim",
            "8"
        ]),
        3
    );
    assert_eq!(code(&["--help"]), 0);
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn served_agent_matches_in_process_agent() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    let test = dir.path().join("test.tsv");
    let mut child = Command::new(env!("CARGO_BIN_EXE_simulstream"))
        .args([
            "serve",
            "--agent",
            "uniform:4",
            "--manifest",
            s(&test),
            "--dim",
            "8",
            "--endpoint",
            "tcp://127.0.0.1:0",
        ])
        .env("SIMULSTREAM_LOG", "info")
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let stderr = child.stderr.take().unwrap();
    let server = Server(child);
    let addr = BufReader::new(stderr)
        .lines()
        .map(Result::unwrap)
        .find_map(|l| l.split_once("on tcp://").map(|(_, a)| a.trim().to_owned()))
        .expect("server announces its address");

    let local = dir.path().join("local.json");
    let remote = dir.path().join("remote.json");
    ok(&[
        "eval",
        "--manifest",
        s(&test),
        "--k",
        "es=2,fr=3",
        "--mode",
        "async",
        "--agent",
        "uniform:4",
        "--dim",
        "8",
        "--out",
        s(&local),
    ]);
    ok(&[
        "eval",
        "--manifest",
        s(&test),
        "--k",
        "es=2,fr=3",
        "--mode",
        "async",
        "--agent",
        &format!("tcp://{addr}"),
        "--workers",
        "3",
        "--dim",
        "8",
        "--out",
        s(&remote),
    ]);
    let (mut a, mut b) = (payload(&local), payload(&remote));
    assert_ne!(a["config"]["agent"], b["config"]["agent"]);
    a.as_object_mut().unwrap().remove("config");
    b.as_object_mut().unwrap().remove("config");
    assert_eq!(a, b);
    drop(server);
}
