use std::fs;

use mhmm::simulate::{InitialChoice, ScenarioSpec};
use mhmm::study::{iteration_path, run_study, Population, StudySettings};

fn scenario(id: &str, zeta: f64) -> ScenarioSpec {
    ScenarioSpec {
        id: id.into(),
        group: Population::baseline().group(zeta, 0.1).unwrap(),
        n_subjects: 3,
        n_occasions: 80,
        zeta,
        q_var: 0.1,
        n_sim: 3,
        seed: 17,
        initial: InitialChoice::Stationary,
    }
}

fn settings() -> StudySettings {
    StudySettings {
        n_iter: 150,
        burn_in: 75,
        ..StudySettings::default()
    }
}

fn ledger_rows(out: &std::path::Path) -> Vec<String> {
    fs::read_to_string(out.join("ledger.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(String::from)
        .collect()
}

#[test]
fn ledger_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let scenarios = [scenario("a", 0.25), scenario("b", 0.5)];

    let first = run_study(&scenarios, &settings(), out, 2, false).unwrap();
    assert_eq!((first.computed, first.skipped), (6, 0));
    assert_eq!(first.reports.len(), 2);
    assert_eq!(ledger_rows(out).len(), 6);
    let results = fs::read(&first.results_path).unwrap();
    let record_b1 = fs::read(iteration_path(out, "b", 1)).unwrap();

    fs::remove_file(iteration_path(out, "b", 1)).unwrap();
    let resumed = run_study(&scenarios, &settings(), out, 2, true).unwrap();
    assert_eq!((resumed.computed, resumed.skipped), (1, 5));
    assert_eq!(ledger_rows(out).len(), 6);
    assert_eq!(fs::read(iteration_path(out, "b", 1)).unwrap(), record_b1);
    assert_eq!(fs::read(&resumed.results_path).unwrap(), results);
}

#[test]
fn records_do_not_depend_on_thread_count() {
    let scenarios = [scenario("a", 0.25), scenario("b", 0.5)];
    let d1 = tempfile::tempdir().unwrap();
    let d4 = tempfile::tempdir().unwrap();
    run_study(&scenarios, &settings(), d1.path(), 1, false).unwrap();
    run_study(&scenarios, &settings(), d4.path(), 4, false).unwrap();
    for sc in &scenarios {
        for it in 0..3 {
            assert_eq!(
                fs::read(iteration_path(d1.path(), &sc.id, it)).unwrap(),
                fs::read(iteration_path(d4.path(), &sc.id, it)).unwrap()
            );
        }
    }
    assert_eq!(
        fs::read(d1.path().join("results.csv")).unwrap(),
        fs::read(d4.path().join("results.csv")).unwrap()
    );
}

#[test]
fn noiseless_iteration_tracks_truth() {
    let mut sc = scenario("exact", 0.0);
    sc.group = Population::baseline().group(0.0, 0.0).unwrap();
    sc.q_var = 0.0;
    sc.n_subjects = 10;
    sc.n_occasions = 400;
    let rec = mhmm::study::run_iteration(
        &sc,
        0,
        &StudySettings {
            n_iter: 600,
            burn_in: 300,
            ..StudySettings::default()
        },
    )
    .unwrap();
    for p in rec
        .params
        .iter()
        .filter(|p| p.name.starts_with("emiss_mean."))
    {
        assert!(
            (p.estimate - p.truth).abs() < 0.1,
            "{} {} vs {}",
            p.name,
            p.estimate,
            p.truth
        );
    }
    for p in rec.params.iter().filter(|p| p.name.starts_with("gamma.")) {
        assert!(
            (p.estimate - p.truth).abs() < 0.05,
            "{} {} vs {}",
            p.name,
            p.estimate,
            p.truth
        );
    }
}
