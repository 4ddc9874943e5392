use std::path::Path;
use std::process::{Command, Output};
use std::sync::OnceLock;

const WORLD: &str = "frames = 40\nheight = 16\nwidth = 16\ngrid = 6\n";

const TRAIN: &str = r#"
data = "data"
train_frames = 30
val_frames = 4
steps_phase1 = 8
steps_phase2 = 6
batch_size = 2
feature_channels = 2
hyper_channels = 2
hidden_channels = 3
head_channels = 2
tau1 = 1
tau2 = 1
"#;

/// One server for the whole file, on its own runtime thread.
fn server() -> &'static str {
    static ADDR: OnceLock<String> = OnceLock::new();
    ADDR.get_or_init(|| {
        let (tx, rx) = std::sync::mpsc::channel();
        std::thread::spawn(move || {
            let rt = tokio::runtime::Runtime::new().unwrap();
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                tx.send(format!("http://{}", listener.local_addr().unwrap())).unwrap();
                tocom_server::serve(listener).await.unwrap();
            });
        });
        rx.recv().unwrap()
    })
}

fn tocom(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tocom"))
        .current_dir(dir)
        .env_remove("TOCOM_SERVER")
        .arg("--server")
        .arg(server())
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = tocom(dir, args);
    assert!(
        out.status.success(),
        "tocom {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn full_workflow_with_relative_paths() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("world.toml"), WORLD).unwrap();
    std::fs::write(dir.join("train.toml"), TRAIN).unwrap();

    let health = ok(dir, &["health"]);
    assert!(health.contains("\"status\": \"ok\""), "{health}");

    let s = ok(dir, &["gen-data", "--spec", "world.toml", "--out", "data"]);
    assert!(s.contains("40 frames from 2 cameras"), "{s}");

    let s = ok(dir, &["train", "--phase", "1", "--config", "train.toml", "--out", "p1.tocp"]);
    assert!(s.contains("phase 1"), "{s}");
    let s = ok(dir, &["train", "--config", "train.toml", "--out", "run.tocp"]);
    assert!(s.contains("tau1 1, tau2 1"), "{s}");
    assert!(dir.join("run.tocp").exists());

    let s = ok(
        dir,
        &["evaluate", "--ckpt", "run.tocp", "--data", "data", "--csv", "rd.csv", "--frames", "34..40", "--dump-bitmaps", "maps"],
    );
    let rec: serde_json::Value = serde_json::from_str(&s).unwrap();
    assert_eq!(rec["config_id"], "run");
    assert!(rec["bits_measured"].as_f64().unwrap() > 0.0);
    let csv = std::fs::read_to_string(dir.join("rd.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2, "{csv}");
    assert_eq!(std::fs::read_dir(dir.join("maps")).unwrap().count(), 12);

    let s = ok(dir, &["baseline", "--data", "data", "--q", "3", "--csv", "base.csv", "--ckpt", "run.tocp", "--frames", "34..40"]);
    let rec: serde_json::Value = serde_json::from_str(&s).unwrap();
    assert_eq!(rec["q"], 3);
    assert!(dir.join("base.csv").exists());

    let s = ok(dir, &["encode", "--ckpt", "run.tocp", "--data", "data", "--out", "s.tocs", "--frames", "34..37"]);
    assert!(s.starts_with("6 packets"), "{s}");

    let s = ok(dir, &["decode", "--ckpt", "run.tocp", "--stream", "s.tocs", "--fuse"]);
    let lines: Vec<&str> = s.lines().collect();
    assert_eq!(lines.iter().filter(|l| l.starts_with("device ")).count(), 6, "{s}");
    assert!(lines[0].contains("t=35 hierarchical"), "{s}");
    assert!(lines.iter().any(|l| l.contains("temporal")), "{s}");
    assert!(lines[6].starts_with("occupied cells:") && lines[6].ends_with("of 36"), "{s}");
    assert_eq!(lines.len(), 7 + 6);

    // The decode session is closed even on success.
    let health = ok(dir, &["health"]);
    assert!(health.contains("\"sessions\": 0"), "{health}");
}

#[test]
fn sweep_writes_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(
        dir.join("grid.toml"),
        format!(
            "seeds = [1]\ntrain = true\ncheckpoint_dir = \"ckpt\"\n[world]\n{WORLD}[base]\ntrain_frames = 30\nval_frames = 4\nsteps_phase1 = 4\nsteps_phase2 = 3\nbatch_size = 2\nfeature_channels = 2\nhyper_channels = 2\nhidden_channels = 3\nhead_channels = 2\n[[point]]\nid = \"p\"\ntau1 = 1\ntau2 = 0\nbeta = 0.01\n"
        ),
    )
    .unwrap();
    let s = ok(dir, &["sweep", "--grid", "grid.toml", "--csv", "sweep.csv"]);
    assert!(s.starts_with("1 records"), "{s}");
    let csv = std::fs::read_to_string(dir.join("sweep.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("p,"), "{csv}");
}

#[test]
fn failures_exit_non_zero_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    let out = tocom(dir, &["evaluate", "--ckpt", "nope.tocp", "--data", "data", "--csv", "x.csv"]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("404") && err.contains("nope.tocp"), "{err}");
    assert!(!dir.join("x.csv").exists());

    let out = tocom(dir, &["train", "--phase", "3", "--config", "t.toml", "--out", "o"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("phase"));

    let out = tocom(dir, &["baseline", "--data", "d", "--q", "9", "--csv", "c"]);
    assert!(!out.status.success());

    let out = tocom(dir, &["evaluate", "--ckpt", "a", "--data", "b", "--csv", "c", "--frames", "5..2"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("END must exceed START"));

    let out = tocom(dir, &["decode", "--ckpt", "a", "--stream", "missing.tocs"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("missing.tocs"));
}

#[test]
fn unreachable_server_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    // Bind and drop to get a port nothing listens on.
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let out = Command::new(env!("CARGO_BIN_EXE_tocom"))
        .current_dir(tmp.path())
        .args(["--server", &format!("http://127.0.0.1:{port}"), "health"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(!stderr(&out).is_empty());
}
