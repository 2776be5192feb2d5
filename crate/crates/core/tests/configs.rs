//! Every shipped benchmark config must parse, validate, resolve, and expand
//! into a runnable task matrix (planning only — no training here).

use shiftlab::bench::{materialize_domains, plan_tasks, BenchConfig};
use std::path::PathBuf;

fn configs_dir() -> PathBuf {
    PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

fn shipped_configs() -> Vec<PathBuf> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(configs_dir())
        .expect("configs directory")
        .map(|e| e.expect("dir entry").path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    paths
}

#[test]
fn the_documented_scenarios_are_present() {
    let names: Vec<String> = shipped_configs()
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    for expected in [
        "blob_shift.json",
        "default.json",
        "noise_ladder.json",
        "rotation_grid.json",
    ] {
        assert!(names.contains(&expected.to_string()), "missing {expected}");
    }
}

#[test]
fn every_shipped_config_parses_resolves_and_plans() {
    for path in shipped_configs() {
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        let cfg = BenchConfig::from_path(&path)
            .unwrap_or_else(|e| panic!("{name} failed to load: {e}"));
        let resolved = cfg
            .resolved()
            .unwrap_or_else(|e| panic!("{name} failed to resolve: {e}"));
        // A resolved config is explicit: baseline first, every optimizer set.
        assert_eq!(
            resolved.algorithms[0].algorithm.name(),
            "source_only",
            "{name}: baseline must come first after resolution"
        );
        assert!(
            resolved.algorithms.iter().all(|a| a.optim.is_some()),
            "{name}: resolution left an optimizer unset"
        );
        let datasets = materialize_domains(&resolved.domains)
            .unwrap_or_else(|e| panic!("{name} failed to materialize: {e}"));
        let tasks = plan_tasks(&resolved, &datasets)
            .unwrap_or_else(|e| panic!("{name} failed to plan: {e}"));
        let pairs = resolved.domains.len() * (resolved.domains.len() - 1);
        assert_eq!(
            tasks.len(),
            resolved.algorithms.len() * pairs,
            "{name}: task matrix size mismatch"
        );
        for task in &tasks {
            task.validate()
                .unwrap_or_else(|e| panic!("{name} planned an invalid task: {e}"));
        }
    }
}
