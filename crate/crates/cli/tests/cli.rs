use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3
T = 10
N = 3
train_scenes = 4
test_scenes = 2
mask_strategy = "gap"
gap_len = 4
channels = 8
heads = 2
ffn = 16
step_emb = 8
agent_emb = 4
max_agents = 3
epochs = 1
batch = 4
K = 3
rank_width = 8
rank_heads = 2
rank_ffn = 16
rank_epochs = 1
sweep_s_hat = [50, 20]
sweep_scenes = 1
data_dir = "data"
out_dir = "out"
checkpoint = "out/denoiser.ckpt"
rank_checkpoint = "out/rank.ckpt"
"#;

fn u2traj(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_u2traj"))
        .current_dir(dir)
        .env("RAYON_NUM_THREADS", "1")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = u2traj(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn bad_config_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("u2traj.toml"), "zeta = 7\n").unwrap();
    let out = u2traj(dir.path(), &["gen-data"]);
    assert_eq!(out.status.code(), Some(2));
    std::fs::write(dir.path().join("u2traj.toml"), "no_such_key = 1\n").unwrap();
    assert_eq!(u2traj(dir.path(), &["gen-data"]).status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(u2traj(dir.path(), &["-c", "nope.toml", "train"]).status.code(), Some(3));
    std::fs::write(dir.path().join("u2traj.toml"), TINY).unwrap();
    // no checkpoint yet
    assert_eq!(u2traj(dir.path(), &["sample"]).status.code(), Some(3));
    assert_eq!(u2traj(dir.path(), &["plot", "missing.modes", "-o", "x.svg"]).status.code(), Some(3));
}

#[test]
fn full_pipeline_is_reproducible_and_plots() {
    let run = |dir: &Path| {
        std::fs::write(dir.join("u2traj.toml"), TINY).unwrap();
        ok(dir, &["gen-data"]);
        ok(dir, &["train"]);
        ok(dir, &["sample"]);
        let eval = ok(dir, &["eval"]);
        ok(dir, &["rank-train"]);
        let rank = ok(dir, &["rank-eval"]);
        let sweep = ok(dir, &["sweep-shat"]);
        (eval, rank, sweep)
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run(a.path());
    assert!(ra.0.contains("min_sade"), "{}", ra.0);
    assert_eq!(ra.2.lines().count(), 3);
    assert_eq!(ra, run(b.path()));

    let modes: Vec<_> = std::fs::read_dir(a.path().join("out/modes"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(modes.len(), 2);
    for p in &modes {
        assert_eq!(std::fs::read(p).unwrap(), std::fs::read(b.path().join("out/modes").join(p.file_name().unwrap())).unwrap());
    }
    let m = modes[0].to_str().unwrap();
    ok(a.path(), &["plot", m, "-o", "traj.svg"]);
    ok(a.path(), &["plot", m, "-o", "scatter.svg", "--scatter"]);
    for f in ["traj.svg", "scatter.svg"] {
        let svg = std::fs::read_to_string(a.path().join(f)).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }
    assert_eq!(u2traj(a.path(), &["plot", m, "-o", "x.svg", "--mode", "9"]).status.code(), Some(2));
}
