use sharedrep::harness::{emit, manifest_path, run_trial, sweep, Manifest, Method, ScenarioConfig, AGREEMENT_GAP, RESULTS_HEADER};
use sharedrep::io::read_json;
use sharedrep::world::WorldConfig;
use sharedrep::Error;

fn small_scenario() -> ScenarioConfig {
    ScenarioConfig {
        world: WorldConfig {
            num_prompts: 3,
            num_responses: 3,
            feature_dim: 4,
            shared_dim: 2,
            num_groups: 3,
            group_proportions: vec![0.4, 0.4, 0.2],
            ..WorldConfig::default()
        },
        n_grid: vec![128, 256, 512, 1024],
        minority_grid: vec![0.2],
        seeds: (0..10).collect(),
        ..ScenarioConfig::default()
    }
}

fn count_rows(text: &str, method: &str, group: usize) -> usize {
    text.lines()
        .skip(1)
        .filter(|l| {
            let cols: Vec<&str> = l.split(',').collect();
            cols[3] == method && cols[4] == group.to_string()
        })
        .count()
}

#[test]
fn sweep_rows_and_manifest_are_complete() {
    let scenario = small_scenario();
    let outcome = sweep(&scenario, Some(2)).unwrap();
    assert!(outcome.errors.is_empty(), "{:?}", outcome.errors);
    let dir = tempfile::tempdir().unwrap();
    let manifest = emit(&outcome, dir.path()).unwrap();
    assert!(!manifest.incomplete);
    assert_eq!(manifest.grid_cells, 40);

    let text = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), RESULTS_HEADER.join(","));
    for method in ["sharedrep", "maxmin", "gold"] {
        for group in 0..3 {
            assert_eq!(count_rows(&text, method, group), 40, "{method} group {group}");
        }
    }

    let on_disk: Manifest = read_json(&dir.path().join("meta.json")).unwrap();
    assert_eq!(on_disk.files, manifest.files);
    assert_eq!(on_disk.scenario, scenario);
    for entry in &manifest.files {
        let path = manifest_path(dir.path(), entry);
        let body = std::fs::read_to_string(&path).unwrap();
        assert_eq!(body.lines().count() - 1, entry.rows, "{}", entry.path);
    }
    let results = manifest.files.iter().find(|f| f.path == "results.csv").unwrap();
    assert_eq!(results.rows, 40 * 3 * 3);
    let trials = manifest.files.iter().find(|f| f.path == "trials.csv").unwrap();
    assert_eq!(trials.rows, 40);
}

#[test]
fn trial_invariants_hold() {
    let scenario = small_scenario();
    for seed in 0..6 {
        let t = run_trial(&scenario, seed, 512, 0.2).unwrap();
        assert_eq!(t.minority_group, 2);
        for m in &t.methods {
            for g in &m.groups {
                assert!(g.subopt >= -1e-9, "{g:?}");
                assert!(g.best_response_subopt >= -1e-9);
                assert!(g.param_error >= 0.0);
            }
        }
        let gold = t.method(Method::Gold).unwrap();
        if t.group_selection_agreement.is_some() {
            assert!(gold.duality_gap <= AGREEMENT_GAP);
        }
        assert!(t.all_converged());
    }
}

#[test]
fn rerun_gives_identical_results_file() {
    let scenario = ScenarioConfig {
        n_grid: vec![256],
        seeds: vec![5, 9],
        ..small_scenario()
    };
    let read = |jobs| {
        let dir = tempfile::tempdir().unwrap();
        emit(&sweep(&scenario, Some(jobs)).unwrap(), dir.path()).unwrap();
        std::fs::read(dir.path().join("results.csv")).unwrap()
    };
    assert_eq!(read(1), read(3));
}

#[test]
fn gold_baseline_is_reproducible() {
    let scenario = ScenarioConfig {
        methods: vec![Method::Gold],
        ..ScenarioConfig::default()
    };
    let a = run_trial(&scenario, 3, 256, 0.2).unwrap();
    let b = run_trial(&scenario, 3, 256, 0.2).unwrap();
    let m = a.minority_group;
    let x = a.method(Method::Gold).unwrap().groups[m].subopt;
    let y = b.method(Method::Gold).unwrap().groups[m].subopt;
    assert!(x.is_finite());
    assert_eq!(x.to_bits(), y.to_bits());
}

#[test]
fn empty_method_list_fails_before_any_trial() {
    let scenario = ScenarioConfig {
        methods: vec![],
        ..small_scenario()
    };
    assert!(matches!(sweep(&scenario, None), Err(Error::InvalidConfig { field: "methods", .. })));
}

#[test]
fn write_failure_marks_manifest_incomplete() {
    let scenario = ScenarioConfig {
        n_grid: vec![128],
        seeds: vec![0],
        ..small_scenario()
    };
    let outcome = sweep(&scenario, Some(1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    // A directory where the trials table should go makes that write fail.
    std::fs::create_dir_all(dir.path().join("trials.csv")).unwrap();
    assert!(emit(&outcome, dir.path()).is_err());
    let manifest: Manifest = read_json(&dir.path().join("meta.json")).unwrap();
    assert!(manifest.incomplete);
    assert_eq!(manifest.files.len(), 1);
    assert_eq!(manifest.files[0].path, "results.csv");
    assert!(dir.path().join("results.csv").is_file());
}

#[test]
fn empty_minority_surfaces_as_trial_error() {
    let scenario = ScenarioConfig {
        n_grid: vec![64],
        minority_grid: vec![0.0],
        seeds: vec![0],
        methods: vec![Method::Maxmin],
        ..small_scenario()
    };
    let outcome = sweep(&scenario, Some(1)).unwrap();
    assert!(outcome.results.is_empty());
    assert_eq!(outcome.errors.len(), 1);
    assert!(!outcome.all_converged());
}
