use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn m2p(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_m2p"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = r#"{
  "corpus": {"generate": {
    "synth": {"width": 32, "height": 32, "frames": 6, "radius_range": [7.0, 10.0], "tracks_per_object": 3},
    "train_clips": 2, "heldout_clips": 2, "seed": 11
  }},
  "model": {"patch": 4, "channels": 6, "refiner_hidden": 4},
  "iterations": 3,
  "batch_size": 2,
  "groups": 2,
  "points_per_group": 5,
  "probe_every": 2
}"#;

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.json");
    fs::write(&path, TINY).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_writes_a_clip_json_per_clip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("corpus");
    let o = m2p(&["gen", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for split in ["train", "heldout"] {
        let clips: Vec<_> = fs::read_dir(out.join(split)).unwrap().collect();
        assert_eq!(clips.len(), 2);
        for c in clips {
            assert!(c.unwrap().path().join("clip.json").is_file());
        }
    }
}

#[test]
fn unknown_config_key_exits_2_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"iterations": 3, "learning_rat": 0.1}"#).unwrap();
    let o = m2p(&["train", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rat"), "{}", stderr(&o));
}

#[test]
fn invalid_config_value_exits_2_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"tau": 1.5}"#).unwrap();
    let o = m2p(&["eval", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("tau"), "{}", stderr(&o));
}

#[test]
fn unknown_flag_and_bad_query_exit_2() {
    let o = m2p(&["gen", "--out", "x", "--frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    let o = m2p(&["track", "--out", "x", "--query", "1,2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("x,y,frame"));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = m2p(&[
        "eval",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&dir.path().join("nope.m2p")),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gradcheck_on_reference_config_passes() {
    let o = m2p(&["gradcheck", "--seed", "1"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    let line = stdout(&o)
        .lines()
        .find(|l| l.starts_with("max_rel_error"))
        .unwrap()
        .to_string();
    let v: f64 = line.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!(v < 1e-4);
    // full precision on stdout
    assert!(line.contains('e') && line.split_whitespace().nth(1).unwrap().len() >= 20);
}

#[test]
fn eval_of_random_init_gives_a_valid_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("eval");
    for mode in ["first", "strided"] {
        let o = m2p(&[
            "eval",
            "--config",
            s(&cfg),
            "--out",
            s(&out),
            "--mode",
            mode,
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let csv = fs::read_to_string(out.join(format!("eval_{mode}.csv"))).unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next(),
            Some("clip,mode,delta1,delta2,delta4,delta8,delta16,delta_avg,n_points")
        );
        assert_eq!(lines.count(), 2);
        let avg: f64 = stdout(&o)
            .lines()
            .find_map(|l| l.strip_prefix("delta_avg "))
            .unwrap()
            .parse()
            .unwrap();
        assert!((0.0..=1.0).contains(&avg));
        assert!(out.join(format!("eval_{mode}.json")).is_file());
    }
}

#[test]
fn train_is_reproducible_across_thread_counts_and_seed_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = |name: &str, threads: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = m2p(&[
            "--threads",
            threads,
            "train",
            "--config",
            s(&cfg),
            "--seed",
            seed,
            "--out",
            s(&out),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        (
            fs::read(out.join("checkpoint.m2p")).unwrap(),
            fs::read_to_string(out.join("train_log.csv")).unwrap(),
        )
    };
    let a = run("a", "1", "7");
    let b = run("b", "4", "7");
    let c = run("c", "1", "8");
    assert_eq!(a, b);
    assert_ne!(a.0, c.0);
    assert!(a
        .1
        .starts_with("iter,l_lsc,l_mlc,l_mbc,l_total,delta_avg,skipped_groups,mlc_active_frac\n"));
    assert_eq!(a.1.lines().count(), 4);
}

#[test]
fn train_resumes_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let short = dir.path().join("short.json");
    fs::write(
        &short,
        TINY.replace("\"iterations\": 3", "\"iterations\": 1"),
    )
    .unwrap();
    let full = dir.path().join("full");
    let half = dir.path().join("half");
    let resumed = dir.path().join("resumed");
    assert!(m2p(&["train", "--config", s(&cfg), "--out", s(&full)])
        .status
        .success());
    assert!(m2p(&["train", "--config", s(&short), "--out", s(&half)])
        .status
        .success());
    let o = m2p(&[
        "train",
        "--config",
        s(&cfg),
        "--out",
        s(&resumed),
        "--checkpoint",
        s(&half.join("checkpoint.m2p")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read(full.join("checkpoint.m2p")).unwrap(),
        fs::read(resumed.join("checkpoint.m2p")).unwrap()
    );
}

#[test]
fn track_writes_one_track_per_query() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("track");
    let o = m2p(&[
        "track",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--clip",
        "heldout_0001",
        "--query",
        "10,12,0",
        "--query",
        "20.5,3,2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("tracks.csv")).unwrap();
    // header plus 2 tracks x 6 frames
    assert_eq!(csv.lines().count(), 1 + 2 * 6);
    assert_eq!(stdout(&o).lines().count(), 2);

    let o = m2p(&[
        "track",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--query",
        "99,1,0",
    ]);
    assert_eq!(o.status.code(), Some(1));
    let o = m2p(&[
        "track",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--clip",
        "nope",
        "--query",
        "1,1,0",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn viz_writes_well_formed_svg_for_various_queries() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let queries: [Option<&str>; 4] = [None, Some("0,0,0"), Some("31,31,5"), Some("15.25,7.75,3")];
    for (i, q) in queries.iter().enumerate() {
        let out = dir.path().join(format!("viz{i}"));
        let mut args = vec![
            "viz",
            "--config",
            s(&cfg),
            "--out",
            s(&out),
            "--clip",
            "train_0000",
        ];
        if let Some(q) = q {
            args.extend(["--query", q]);
        }
        let o = m2p(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        for f in ["heatmap.svg", "tracks.svg"] {
            let text = fs::read_to_string(out.join(f)).unwrap();
            let doc = roxmltree::Document::parse(&text).unwrap_or_else(|e| panic!("{f}: {e}"));
            assert_eq!(doc.root_element().tag_name().name(), "svg");
        }
        let heat = fs::read_to_string(out.join("heatmap.svg")).unwrap();
        // one label per frame
        assert_eq!(heat.matches(">t=").count(), 6);
    }
}
