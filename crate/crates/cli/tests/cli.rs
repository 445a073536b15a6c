//! Drives the `geoind` binary end to end.

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use geoind_core::{GeoPoint, Projection};

fn geoind(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geoind")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn ok(o: Output) -> Output {
    assert_eq!(code(&o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
    o
}

struct Dir(tempfile::TempDir);

impl Dir {
    fn new() -> Dir {
        Dir(tempfile::tempdir().unwrap())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.0.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_str().unwrap().to_owned()
    }
}

fn synth(dir: &Dir, name: &str, extra: &[&str]) -> String {
    let out = dir.s(name);
    let mut args = vec!["synth", "--output", &out, "--seed", "3"];
    args.extend_from_slice(extra);
    ok(geoind(&args));
    out
}

/// (user, true, released) rows of a perturbed CSV.
fn released_rows(path: &Path) -> Vec<(String, GeoPoint, GeoPoint)> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    rdr.records()
        .map(|r| {
            let r = r.unwrap();
            let f = |i: usize| r[i].parse::<f64>().unwrap();
            (r[0].to_owned(), GeoPoint { lat: f(2), lon: f(3) }, GeoPoint { lat: f(4), lon: f(5) })
        })
        .collect()
}

fn eval_rows(out: &Output) -> Vec<(String, String, String, f64)> {
    let mut rdr = csv::Reader::from_reader(&out.stdout[..]);
    rdr.records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].to_owned(), r[1].to_owned(), r[2].to_owned(), r[3].parse().unwrap())
        })
        .collect()
}

#[test]
fn help_documents_every_flag() {
    let top = ok(geoind(&["--help"]));
    let text = String::from_utf8(top.stdout).unwrap();
    for sub in ["perturb", "eval", "sweep", "bench", "synth", "serve"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
    let flags: &[(&str, &[&str])] = &[
        ("perturb", &["--mechanism", "--epsilon", "--epsilon-total", "--delta", "--seed", "--input", "--output"]),
        ("eval", &["--metrics", "--window-len", "--grid-cells", "--region-side", "--density", "--seed", "--jobs"]),
        ("sweep", &["--mechanism", "--epsilon", "--delta", "--window-len", "--grid-cells", "--jobs"]),
        ("bench", &["--mechanism", "--n", "--warmup", "--epsilon", "--seed"]),
        ("synth", &["--kind", "--traces", "--fixes", "--step", "--seed"]),
        ("serve", &["--listen", "--density", "--field-radius", "--session-ttl", "--snapshot"]),
    ];
    for (sub, names) in flags {
        let help = String::from_utf8(ok(geoind(&[sub, "--help"])).stdout).unwrap();
        for n in *names {
            assert!(help.contains(n), "{sub} --help lacks {n}");
        }
        assert!(help.contains("--config"));
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&geoind(&["bench", "--bogus"])), 1);
    assert_eq!(code(&geoind(&["nope"])), 1);
    assert_eq!(code(&geoind(&["bench", "--n", "999"])), 1);
    let dir = Dir::new();
    let input = synth(&dir, "t.csv", &["--fixes", "10"]);
    // trpsm without a budget; flags are checked before any work.
    let o = geoind(&["perturb", "--input", &input, "--mechanism", "trpsm", "--epsilon", "0.1"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("epsilon-total"));
    let o = geoind(&["perturb", "--input", "/does/not/exist.csv", "--mechanism", "psm", "--epsilon", "-1"]);
    assert_eq!(code(&o), 1);
    let o = geoind(&["perturb", "--input", "/does/not/exist.csv", "--mechanism", "psm", "--epsilon", "0.1"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn perturb_is_byte_identical_per_seed() {
    let dir = Dir::new();
    let input = synth(&dir, "t.csv", &["--traces", "3", "--fixes", "200"]);
    let run = |seed: &str, out: &str| {
        ok(geoind(&[
            "perturb", "--input", &input, "--output", &dir.s(out), "--mechanism", "psm", "--epsilon", "0.1",
            "--seed", seed,
        ]));
        std::fs::read(dir.path(out)).unwrap()
    };
    let a = run("9", "a.csv");
    assert_eq!(a, run("9", "b.csv"));
    assert_ne!(a, run("10", "c.csv"));
    let header = String::from_utf8_lossy(&a[..a.iter().position(|&b| b == b'\n').unwrap()]).to_string();
    assert_eq!(header, "user_id,timestamp,lat,lon,released_lat,released_lon");
}

#[test]
fn trpsm_on_stationary_traces_holds_its_release() {
    let dir = Dir::new();
    let input = synth(&dir, "s.csv", &["--kind", "stationary", "--traces", "20", "--fixes", "30"]);
    let out = dir.s("r.csv");
    // With ε_T = 2ε any crossing after the first fix exhausts the budget,
    // so every surviving row repeats that user's first release.
    let o = geoind(&[
        "perturb", "--input", &input, "--output", &out, "--mechanism", "trpsm", "--epsilon", "0.1",
        "--epsilon-total", "0.2", "--delta", "5", "--seed", "4",
    ]);
    assert_eq!(code(&o), 3, "expected at least one truncated trace");
    assert!(String::from_utf8_lossy(&o.stderr).contains("budget exhausted"));
    let rows = released_rows(Path::new(&out));
    let mut users: Vec<&str> = rows.iter().map(|r| r.0.as_str()).collect();
    users.dedup();
    assert_eq!(users.len(), 20);
    for u in users {
        let mine: Vec<_> = rows.iter().filter(|r| r.0 == u).collect();
        assert!(mine.iter().all(|r| r.2 == mine[0].2), "user {u} released more than once");
    }
    // A wide δ keeps every trace whole.
    let o = geoind(&[
        "perturb", "--input", &input, "--output", &out, "--mechanism", "trpsm", "--epsilon", "0.1",
        "--epsilon-total", "0.2", "--delta", "150", "--seed", "4",
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(released_rows(Path::new(&out)).len(), 600);
}

#[test]
fn plm_displaces_about_twice_as_far_as_psm() {
    let dir = Dir::new();
    let input = synth(&dir, "w.csv", &["--traces", "4", "--fixes", "5000"]);
    let mean = |mech: &str| {
        let out = dir.s(&format!("{mech}.csv"));
        ok(geoind(&["perturb", "--input", &input, "--output", &out, "--mechanism", mech, "--epsilon", "0.1", "--seed", "1"]));
        let rows = released_rows(Path::new(&out));
        let proj = Projection::new(rows[0].1).unwrap();
        let sum: f64 = rows
            .iter()
            .map(|(_, x, z)| geoind_core::distance(proj.project(*x).unwrap(), proj.project(*z).unwrap()))
            .sum();
        sum / rows.len() as f64
    };
    let (plm, psm) = (mean("plm"), mean("psm"));
    let ratio = plm / psm;
    assert!((1.9..=2.1).contains(&ratio), "plm {plm:.2} psm {psm:.2} ratio {ratio:.3}");
}

#[test]
fn eval_metrics() {
    let dir = Dir::new();
    let input = synth(&dir, "w.csv", &["--traces", "2", "--fixes", "300"]);

    // Identity pairs: the truth file doubles as its own release.
    let o = ok(geoind(&["eval", "--input", &input, "--released", &input, "--metrics", "mne"]));
    let rows = eval_rows(&o);
    assert_eq!(rows.len(), 1);
    assert_eq!((rows[0].0.as_str(), rows[0].3), ("mne", 0.0));

    let short = synth(&dir, "short.csv", &["--traces", "2", "--fixes", "299"]);
    assert_eq!(code(&geoind(&["eval", "--input", &input, "--released", &short])), 2);
    assert_eq!(code(&geoind(&["eval", "--input", &input])), 2, "no released columns");

    let commute = synth(&dir, "c.csv", &["--kind", "commute", "--traces", "20", "--fixes", "400"]);
    let rel = dir.s("c_psm.csv");
    ok(geoind(&["perturb", "--input", &commute, "--output", &rel, "--mechanism", "psm", "--epsilon", "0.1", "--seed", "2"]));
    let o = ok(geoind(&["eval", "--input", &rel, "--metrics", "bayes,catchable", "--window-len", "1,25"]));
    let rows = eval_rows(&o);
    let get = |metric: &str, col: usize, key: &str| {
        rows.iter()
            .find(|r| r.0 == metric && (if col == 1 { &r.1 } else { &r.2 }) == key)
            .unwrap_or_else(|| panic!("{metric} {key} missing from {rows:?}"))
            .3
    };
    let (r1, r25) = (get("bayes_risk", 1, "1"), get("bayes_risk", 1, "25"));
    assert!(r25 <= r1, "risk(25) {r25} > risk(1) {r1}");
    let (sparse, dense) = (get("catchable_pct", 2, "sparse"), get("catchable_pct", 2, "dense"));
    assert!(dense >= sparse - 2.0, "dense {dense} sparse {sparse}");
    assert!((0.0..=100.0).contains(&sparse));
}

#[test]
fn sweep_and_bench_emit_rows() {
    let dir = Dir::new();
    let input = synth(&dir, "c.csv", &["--kind", "commute", "--traces", "4", "--fixes", "200"]);
    let o = ok(geoind(&[
        "sweep", "--input", &input, "--mechanism", "psm,trpsm", "--epsilon", "0.5,1", "--delta", "5,20", "--window-len", "1",
        "--jobs", "1",
    ]));
    let text = String::from_utf8(o.stdout).unwrap();
    // 2 psm cells + 4 trpsm cells, one window length each.
    assert_eq!(text.lines().count(), 1 + 6, "{text}");
    let par = ok(geoind(&[
        "sweep", "--input", &input, "--mechanism", "psm,trpsm", "--epsilon", "0.5,1", "--delta", "5,20", "--window-len", "1",
        "--jobs", "2",
    ]));
    assert_eq!(String::from_utf8(par.stdout).unwrap(), text, "sweep depends on --jobs");

    let o = ok(geoind(&["bench", "--n", "1000", "--warmup", "10"]));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.starts_with("mechanism,mean_ms,p50_ms,p95_ms,p99_ms,n"), "{text}");
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn config_file_supplies_flags_and_command_line_wins() {
    let dir = Dir::new();
    let input = synth(&dir, "t.csv", &["--fixes", "50"]);
    let conf = dir.path("run.conf");
    std::fs::write(&conf, format!("# perturb settings\nmechanism = psm\nepsilon = 0.5\nseed = 11\ninput = {input}\n")).unwrap();
    let conf = conf.to_str().unwrap();

    let from_conf = ok(geoind(&["perturb", "--config", conf])).stdout;
    let explicit = ok(geoind(&["perturb", "--input", &input, "--mechanism", "psm", "--epsilon", "0.5", "--seed", "11"])).stdout;
    assert_eq!(from_conf, explicit);

    let overridden = ok(geoind(&["perturb", "--config", conf, "--epsilon", "0.1"])).stdout;
    let explicit = ok(geoind(&["perturb", "--input", &input, "--mechanism", "psm", "--epsilon", "0.1", "--seed", "11"])).stdout;
    assert_eq!(overridden, explicit);

    std::fs::write(dir.path("bad.conf"), "volume = 11\n").unwrap();
    assert_eq!(code(&geoind(&["perturb", "--config", &dir.s("bad.conf")])), 1);
    assert_eq!(code(&geoind(&["perturb", "--config", &dir.s("missing.conf")])), 1);
}

struct Served {
    child: Child,
    base: String,
}

impl Served {
    fn start(extra: &[&str]) -> Served {
        let mut child = Command::new(env!("CARGO_BIN_EXE_geoind"))
            .args(["serve", "--listen", "127.0.0.1:0"])
            .args(extra)
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        let base = line.trim().strip_prefix("listening on ").expect("address line").to_owned();
        Served { child, base }
    }

    fn interrupt(mut self) -> i32 {
        let pid = self.child.id().to_string();
        assert!(Command::new("kill").args(["-INT", &pid]).status().unwrap().success());
        self.child.wait().unwrap().code().unwrap_or(-1)
    }
}

impl Drop for Served {
    fn drop(&mut self) {
        let _ = self.child.kill();
    }
}

#[tokio::test]
async fn serve_answers_and_flushes_on_interrupt() {
    let dir = Dir::new();
    let snap = dir.s("snap.json");
    let served = Served::start(&["--seed", "5", "--snapshot", &snap]);
    let client = reqwest::Client::new();
    let health: serde_json::Value =
        client.get(format!("{}/healthz", served.base)).send().await.unwrap().json().await.unwrap();
    assert_eq!(health["status"], "ok");

    let bad = client
        .post(format!("{}/PrivAR", served.base))
        .header("content-type", "application/json")
        .body("[1,2")
        .send()
        .await
        .unwrap();
    assert_eq!(bad.status().as_u16(), 400);

    let body = serde_json::json!({
        "session_id": "s1", "mechanism": "psm", "epsilon": 0.5, "density": "dense",
        "true_location": {"lat": 39.9042, "lon": 116.4074}, "timestamp": "2024-05-01T12:00:00Z"
    });
    let r = client.post(format!("{}/PrivAR", served.base)).json(&body).send().await.unwrap();
    assert_eq!(r.status().as_u16(), 200);

    assert_eq!(served.interrupt(), 0);
    let snap: serde_json::Value = serde_json::from_slice(&std::fs::read(&snap).unwrap()).unwrap();
    assert_eq!(snap["sessions"][0]["session_id"], "s1");
}

#[test]
fn serve_bind_failure_is_nonzero() {
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = taken.local_addr().unwrap().to_string();
    let o = geoind(&["serve", "--listen", &addr]);
    assert_eq!(code(&o), 2);
}
