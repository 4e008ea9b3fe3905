use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ovdet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ovdet"))
        .args(args)
        .env("OVDET_OUT_DIR", dir)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY_TOML: &str = r#"
[train]
iterations = 2
batch_size = 2
lr = 0.001

[train.model]
hidden_dim = 16
num_heads = 2
ffn_dim = 24
num_object_queries = 6
encoder_layers = 1
decoder_layers = 1
"#;

#[test]
fn help_states_every_default() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["gen-data", "train", "eval", "ablate", "losscurve", "gradcheck", "inspect"] {
        let o = ovdet(dir.path(), &[sub, "--help"]);
        assert_eq!(code(&o), 0);
        let text = String::from_utf8_lossy(&o.stdout).into_owned();
        // Every option line, excluding help itself, carries a default.
        let mut opts = 0;
        let lines: Vec<&str> = text.lines().collect();
        for (i, l) in lines.iter().enumerate() {
            let t = l.trim_start();
            if !t.starts_with("--") || t.starts_with("--help") {
                continue;
            }
            opts += 1;
            let block: String = lines[i..].iter().take_while(|x| !x.trim().is_empty()).copied().collect();
            let has_default = block.contains("[default") || block.contains("[env: OVDET_OUT_DIR");
            assert!(has_default, "{sub}: {t}\n{text}");
        }
        assert!(opts > 0, "{sub}");
    }
}

#[test]
fn unknown_flags_and_bad_values_are_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&ovdet(dir.path(), &["train", "--nope"])), 1);
    assert_eq!(code(&ovdet(dir.path(), &["gradcheck", "--scope", "everything"])), 1);
    assert_eq!(code(&ovdet(dir.path(), &["frobnicate"])), 1);
    let o = ovdet(dir.path(), &["gradcheck", "--corrupt", "no.such.group"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn stage_two_without_init_from_names_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let o = ovdet(dir.path(), &["train", "--stage", "2"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--init-from"), "{}", stderr(&o));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "[train]\nlearning_rate = 0.1\n").unwrap();
    let o = ovdet(dir.path(), &["train", "--config", "c.toml"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("learning_rate"));
}

#[test]
fn missing_input_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = ovdet(dir.path(), &["eval", "--checkpoint", "absent.ovd"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn gradcheck_negative_control_fails_with_the_group_named() {
    let dir = tempfile::tempdir().unwrap();
    let ok = ovdet(dir.path(), &["gradcheck", "--scope", "losses", "--out", "g.txt"]);
    assert_eq!(code(&ok), 0, "{}", stderr(&ok));
    let bad = ovdet(dir.path(), &["gradcheck", "--scope", "losses", "--corrupt", "focal"]);
    assert_eq!(code(&bad), 3);
    assert!(stderr(&bad).contains("focal"));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
    let again = ovdet(dir.path(), &["gradcheck", "--scope", "losses", "--out", "g.txt"]);
    assert_eq!(ok.stdout, again.stdout);
    let text = fs::read_to_string(dir.path().join("g.txt")).unwrap();
    assert!(text.starts_with("# ovdet gradcheck --scope losses --out g.txt\n# seed 0\n"));
}

#[test]
fn pipeline_runs_and_reruns_byte_identically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        fs::write(dir.join("tiny.toml"), TINY_TOML).unwrap();
        let steps: [&[&str]; 6] = [
            &["gen-data", "--count", "12", "--seed", "3"],
            &["gen-data", "--split", "heldout", "--count", "4", "--seed", "4", "--out", "heldout.jsonl"],
            &["train", "--config", "tiny.toml", "--checkpoint", "s1.ovd", "--metrics", "m1.csv"],
            &[
                "train", "--config", "tiny.toml", "--stage", "2", "--init-from", "s1.ovd", "--checkpoint", "s2.ovd",
                "--metrics", "m2.csv",
            ],
            &["eval", "--checkpoint", "s1.ovd", "--csv", "e1.csv", "--report", "r1.txt"],
            &["eval", "--checkpoint", "s2.ovd", "--csv", "e2.csv"],
        ];
        for args in steps {
            let o = ovdet(dir, args);
            assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
        }
    }
    for f in ["scenes.jsonl", "heldout.jsonl", "s1.ovd", "s2.ovd", "m1.csv", "m2.csv", "e1.csv", "e2.csv", "r1.txt"] {
        let x = fs::read(a.path().join(f)).unwrap();
        let y = fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs between runs");
    }
    let m1 = fs::read_to_string(a.path().join("m1.csv")).unwrap();
    let mut lines = m1.lines();
    assert_eq!(lines.next(), Some("# ovdet train --config tiny.toml --checkpoint s1.ovd --metrics m1.csv"));
    assert_eq!(lines.next(), Some("# seed 0"));
    assert!(lines.next().unwrap().starts_with("iteration,lr,obj_cls"));
    assert_eq!(lines.count(), 2);
    let r1 = fs::read_to_string(a.path().join("r1.txt")).unwrap();
    assert!(r1.contains("fusion false") && r1.contains("zero-shot"));
    let e2 = fs::read_to_string(a.path().join("e2.csv")).unwrap();
    assert!(e2.lines().nth(2).unwrap().starts_with("map_50_95"));

    let o = ovdet(a.path(), &["inspect", "--checkpoint", "s2.ovd"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    for needle in ["stage           2", "fusion          true", "[train]", "[split]", "heldout_combos"] {
        assert!(text.contains(needle), "{needle} missing from\n{text}");
    }
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY_TOML).unwrap();
    assert_eq!(code(&ovdet(dir.path(), &["gen-data", "--count", "4"])), 0);
    let o = ovdet(dir.path(), &["train", "--config", "tiny.toml", "--iterations", "1", "--seed", "9"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(m.lines().count(), 4);
    assert!(m.contains("# seed 9"));
}

#[test]
fn resume_continues_to_the_same_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // No learning-rate drop inside either schedule, so a 2-step run extended
    // to 4 follows the same rates as a straight 4-step run.
    let toml = TINY_TOML.replace("iterations = 2", "iterations = 4\nlr_drop_fraction = 0.99");
    fs::write(d.join("tiny.toml"), toml).unwrap();
    assert_eq!(code(&ovdet(d, &["gen-data", "--count", "8"])), 0);
    let full = ovdet(d, &["train", "--config", "tiny.toml", "--checkpoint", "full.ovd"]);
    assert_eq!(code(&full), 0, "{}", stderr(&full));
    let part = ovdet(d, &["train", "--config", "tiny.toml", "--iterations", "2", "--checkpoint", "part.ovd"]);
    assert_eq!(code(&part), 0);
    let res = ovdet(d, &["train", "--resume", "part.ovd", "--iterations", "4", "--checkpoint", "resumed.ovd"]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    assert!(fs::read(d.join("resumed.ovd")).unwrap() == fs::read(d.join("full.ovd")).unwrap());
    assert!(fs::read(d.join("part.ovd")).unwrap() != fs::read(d.join("full.ovd")).unwrap());
}

#[test]
fn losscurve_writes_reference_rows() {
    let dir = tempfile::tempdir().unwrap();
    let o = ovdet(dir.path(), &["losscurve"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let curve = fs::read_to_string(dir.path().join("losscurve.csv")).unwrap();
    let row = curve.lines().find(|l| l.starts_with("0.1,")).unwrap();
    let v: Vec<f64> = row.split(',').map(|x| x.parse().unwrap()).collect();
    assert!((v[1] - 0.46632).abs() < 1e-4);
    assert!((v[2] - 3.53875).abs() < 1e-4);
    let surface = fs::read_to_string(dir.path().join("losssurface.csv")).unwrap();
    assert_eq!(surface.lines().filter(|l| !l.starts_with('#')).count(), 1 + 999 * 20);
}
