//! Small end-to-end command runs for determinism checks.

use std::path::{Path, PathBuf};

use lowshot::experiment::config::ConfigMap;
use lowshot::experiment::{cmd_compare, cmd_gem, cmd_run, cmd_saliency, cmd_synth, ExperimentConfig};

use super::snapshot;

pub const TINY: &str = "
synth.n_t = 60
synth.n_s = 70
model.base_width = 2
lowshot.coarse_epochs = 1
lowshot.fine_epochs = 2
lowshot.finetune_epochs = 1
lowshot.tau = 0.1
lowshot.k = 2
gabor.epochs = 5
";

pub fn config(extra: &[(&str, String)]) -> ExperimentConfig {
    let mut map = ConfigMap::parse(TINY, "tiny").unwrap();
    for (k, v) in extra {
        map.set(k, v);
    }
    ExperimentConfig::from_map(&map).unwrap()
}

/// Every command once into `dir`; returns the snapshot of the tree.
pub fn run_everything(dir: &Path, images: &[PathBuf]) -> Vec<(String, Vec<u8>)> {
    let out = |name: &str| ("out_dir", dir.join(name).display().to_string());
    cmd_synth(&config(&[out("synth"), ("synth.n_t", "12".into()), ("synth.n_s", "56".into())])).unwrap();
    cmd_run(&config(&[out("run"), ("variant", "plain".into())])).unwrap();
    cmd_compare(&config(&[out("compare"), ("seeds", "0,1".into())])).unwrap();
    let ckpt = dir.join("compare/checkpoints/data_feature_level_0/step4.ckpt").display().to_string();
    let list = images.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(",");
    cmd_saliency(&config(&[out("saliency"), ("checkpoint", ckpt.clone()), ("images", list)])).unwrap();
    cmd_gem(&config(&[out("gem"), ("checkpoint", ckpt.clone())])).unwrap();
    cmd_gem(&config(&[out("gem"), ("checkpoint", ckpt), ("masked", "true".into())])).unwrap();
    snapshot(dir)
}

/// Files whose contents differ between two snapshots, or that exist in
/// only one of them.
pub fn differences(a: &[(String, Vec<u8>)], b: &[(String, Vec<u8>)]) -> Vec<String> {
    let mut diff = Vec::new();
    let names = |s: &[(String, Vec<u8>)]| s.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>();
    if names(a) != names(b) {
        diff.push(format!("file lists differ: {:?} vs {:?}", names(a), names(b)));
    }
    for ((na, ba), (_, bb)) in a.iter().zip(b) {
        if ba != bb {
            diff.push(na.clone());
        }
    }
    diff
}
