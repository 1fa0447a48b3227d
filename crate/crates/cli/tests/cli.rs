use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use singrav::apps::{edit_move, EditMask, EmptySample};
use singrav::volume::{read_sgrv, RadianceVolume};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_singrav"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Value {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().rev().find(|l| l.starts_with('{')).unwrap_or_else(|| panic!("{text}"));
    serde_json::from_str(line).unwrap()
}

fn read_volume(p: &Path) -> RadianceVolume {
    read_sgrv(std::fs::read(p).unwrap().as_slice()).unwrap()
}

const TINY: &[&str] = &[
    "--toy",
    "--set",
    "pyramid.hidden_channels=4",
    "--set",
    "pyramid.sr_channels=[4,4]",
    "--set",
    "pyramid.layers=3",
    "--set",
    "synthetic.rig.count=4",
    "--set",
    "synthetic.rig.width=48",
    "--set",
    "synthetic.rig.height=48",
    "--set",
    "synthetic.volume_res=12",
    "--set",
    "synthetic.samples=32",
    "--set",
    "train.epochs_per_scale=2",
    "--set",
    "train.recon_only_epochs=1",
    "--set",
    "train.samples=[16,16,16]",
];

fn with<'a>(head: &[&'a str], tail: &[&'a str]) -> Vec<&'a str> {
    head.iter().chain(tail).copied().collect()
}

#[test]
fn help_lists_every_subcommand() {
    let out = run(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["prepare", "train", "generate", "render", "animate", "edit", "export-mesh", "evaluate", "serve"] {
        assert!(text.contains(sub), "{sub}");
    }
    let out = run(&["edit", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in ["--volume", "--op", "--src", "--dst", "--empty-point", "--out", "--set", "--config", "--seed"] {
        assert!(text.contains(flag), "{flag}");
    }
}

#[test]
fn usage_errors_exit_two_with_json() {
    for args in [
        vec!["frobnicate"],
        vec!["render", "--volume"],
        vec!["edit", "--volume", "v", "--op", "twist", "--out", "o"],
        vec!["edit", "--volume", "v", "--op", "move", "--src", "1,2", "--out", "o"],
    ] {
        let out = run(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert_eq!(stderr_json(&out)["code"], "usage");
    }
}

#[test]
fn runtime_errors_exit_one_with_json() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.sgrv");
    let out_png = dir.path().join("x.png");
    let out = run(&["render", "--volume", missing.to_str().unwrap(), "--out", out_png.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let e = stderr_json(&out);
    assert_eq!(e["code"], "runtime");
    assert!(e["message"].as_str().unwrap().contains("none.sgrv"));
    let out = run(&["--set", "train.nope=1", "render", "--volume", "v", "--out", "o"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_json(&out)["message"].as_str().unwrap().contains("nope"));
}

#[test]
fn toy_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| -> PathBuf { dir.path().join(s) };
    let s = |p: &PathBuf| p.to_str().unwrap().to_string();
    let (data, cache, ckpt, gen) = (p("data"), p("cache"), p("ckpt"), p("gen"));

    let prep = ok(&with(TINY, &["--seed", "3", "prepare", "--out", &s(&data), "--kind", "boxes", "--cache", &s(&cache)]));
    assert_eq!(prep["views"], 4);
    assert!(data.join("resolved_config.json").exists());
    let manifest = prep["manifest"].as_str().unwrap().to_string();

    let train = ok(&with(TINY, &["train", "--dataset", &manifest, "--checkpoint", &s(&ckpt), "--cache", &s(&cache)]));
    assert_eq!(train["trained"], serde_json::json!([true, true, true]));
    assert!(ckpt.join("train_log.csv").exists());
    assert!(ckpt.join("resolved_config.json").exists());

    let g = ok(&with(TINY, &["generate", "--checkpoint", &s(&ckpt), "--seed", "7", "--count", "3", "--out", &s(&gen)]));
    assert_eq!(g["scenes"].as_array().unwrap().len(), 3);
    for seed in 7..10 {
        for ext in ["sgrv", "png", "noise.safetensors"] {
            assert!(gen.join(format!("scene_{seed:06}.{ext}")).exists(), "{seed} {ext}");
        }
    }
    let scene = gen.join("scene_000007.sgrv");
    let again = p("again");
    ok(&with(TINY, &["generate", "--checkpoint", &s(&ckpt), "--seed", "7", "--out", &s(&again)]));
    assert_eq!(std::fs::read(&scene).unwrap(), std::fs::read(again.join("scene_000007.sgrv")).unwrap());

    let png = p("view.png");
    ok(&with(TINY, &["render", "--volume", &s(&scene), "--out", &s(&png), "--width", "20", "--height", "10", "--depth-out", &s(&p("view_depth.png"))]));
    let img = singrav::io::decode_rgb_png(&std::fs::read(&png).unwrap()).unwrap();
    assert_eq!(img.shape(), &[3, 10, 20]);

    let frames = p("frames");
    let a = ok(&with(TINY, &["animate", "--checkpoint", &s(&ckpt), "--noise", &s(&gen.join("scene_000007.noise.safetensors")), "--out", &s(&frames), "--steps", "3"]));
    assert_eq!(a["frames"], 3);
    assert!(frames.join("index.json").exists() && frames.join("frame_0002.png").exists());

    let moved = p("moved.sgrv");
    ok(&with(TINY, &[
        "edit", "--volume", &s(&scene), "--op", "move",
        "--src", "-1,-1,-1,-0.5,0,0", "--dst", "0.5,0.05,0.05,1,1,1",
        "--empty-point", "0.9,0.9,-0.9", "--out", &s(&moved),
    ]));
    let v = read_volume(&scene);
    let src = EditMask::new([-1.0, -1.0, -1.0], [-0.5, 0.0, 0.0]);
    let dst = EditMask::new([0.5, 0.05, 0.05], [1.0, 1.0, 1.0]);
    let expect = edit_move(&v, &src, &dst, EmptySample::at(&v, [0.9, 0.9, -0.9])).unwrap();
    assert_eq!(read_volume(&moved), expect);

    let stl = p("mesh.stl");
    let m = ok(&["export-mesh", "--volume", &s(&scene), "--out", &s(&stl)]);
    let tris = m["triangles"].as_u64().unwrap() as usize;
    assert_eq!(std::fs::read(&stl).unwrap().len(), 84 + 50 * tris);
    let obj = p("mesh.obj");
    ok(&["export-mesh", "--volume", &s(&scene), "--out", &s(&obj)]);
    assert!(std::fs::read_to_string(&obj).unwrap().starts_with("# singrav mesh"));

    let report = p("report.json");
    let e = ok(&with(TINY, &["evaluate", "--checkpoint", &s(&ckpt), "--dataset", &manifest, "--views", "4", "--samples", "3", "--out", &s(&report)]));
    assert!(e["sifid_mv"].as_f64().unwrap().is_finite());
    assert!(e["diversity_mv"].as_f64().unwrap().is_finite());
    let full: Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(full["per_view"].as_array().unwrap().len(), 4);

    let bad = run(&with(TINY, &["--set", "train.lr=0.5", "train", "--dataset", &manifest, "--checkpoint", &s(&ckpt), "--cache", &s(&cache)]));
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr_json(&bad)["message"].as_str().unwrap().contains("training configuration"));
}

#[test]
fn serve_reads_the_port_from_the_environment() {
    use std::io::{Read, Write};
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let dir = tempfile::tempdir().unwrap();
    let mut child = bin()
        .args(["serve", "--scenes", dir.path().to_str().unwrap()])
        .env("SINGRAV_PORT", port.to_string())
        .stdout(std::process::Stdio::null())
        .stderr(std::process::Stdio::null())
        .spawn()
        .unwrap();
    let mut reply = String::new();
    for _ in 0..100 {
        if let Ok(mut s) = std::net::TcpStream::connect(("127.0.0.1", port)) {
            s.write_all(b"GET /health HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").unwrap();
            s.read_to_string(&mut reply).unwrap();
            break;
        }
        std::thread::sleep(std::time::Duration::from_millis(50));
    }
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(reply.starts_with("HTTP/1.1 200"), "{reply}");
    assert!(reply.contains("\"checkpoint_loaded\":false"));
}
