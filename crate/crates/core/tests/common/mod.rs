#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::OnceLock;

use sha2::{Digest, Sha256};
use tailorpo_core::harness::{pretrain_checkpoint, RunConfig};
use tailorpo_core::nnet::{params_digest, Checkpoint};

/// Default-config pretrained checkpoint, built once per test binary and
/// cached on disk across binaries under a name keyed by the config.
pub fn pretrained() -> &'static Checkpoint {
    static CELL: OnceLock<Checkpoint> = OnceLock::new();
    CELL.get_or_init(|| load_or_pretrain(&RunConfig::default()))
}

pub fn load_or_pretrain(cfg: &RunConfig) -> Checkpoint {
    let key = {
        let text = cfg.to_toml().unwrap();
        let digest = Sha256::digest(text.as_bytes());
        digest
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect::<String>()
    };
    let path = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("pretrained-{key}.ckpt"));
    if let Ok(ckpt) = Checkpoint::load(&path) {
        if ckpt.metadata.get("digest") == Some(&params_digest(&ckpt.params)) {
            return ckpt;
        }
    }
    let (ckpt, _) = pretrain_checkpoint(cfg).unwrap();
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    ckpt.save(&tmp).unwrap();
    std::fs::rename(&tmp, &path).unwrap();
    ckpt
}
