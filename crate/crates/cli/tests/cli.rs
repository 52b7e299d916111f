use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

const CONFIG: &str = "schema_version = 1\nsample_budget = 40\n[pretrain]\nsteps = 200\n[eval]\nevery = 20\nsamples = 40\ndrift_samples = 10\nfinal_samples = 30\n";

fn tailorpo(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_tailorpo"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                files.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    files
}

fn pipeline(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::write(dir.join("cfg.toml"), CONFIG).unwrap();
    for args in [
        &["pretrain", "--config", "cfg.toml"][..],
        &[
            "finetune",
            "--config",
            "cfg.toml",
            "--method",
            "tailorpo-g",
            "--seed",
            "3",
        ],
        &[
            "finetune", "--config", "cfg.toml", "--method", "d3po", "--seed", "3",
        ],
    ] {
        let out = tailorpo(dir, args);
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    snapshot(dir)
}

#[test]
fn repeated_pipelines_write_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (fa, fb) = (pipeline(a.path()), pipeline(b.path()));
    assert!(fa.len() > 3, "{:?}", fa.keys().collect::<Vec<_>>());
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (name, bytes) in &fa {
        assert!(bytes == &fb[name], "{name} differs");
    }
}

#[test]
fn gradcheck_exits_successfully_and_bad_input_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = tailorpo(dir.path(), &["gradcheck", "--instances", "5"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stdout)
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("all checks passed"));

    std::fs::write(dir.path().join("bad.toml"), "schema_version = 99\n").unwrap();
    assert!(!tailorpo(dir.path(), &["finetune", "--config", "bad.toml"])
        .status
        .success());
    assert!(
        !tailorpo(dir.path(), &["finetune"]).status.success(),
        "missing pretrained checkpoint must fail"
    );
}
