use biascl::runner::{
    load_records, report, run_scenario, write_report, MethodConfig, RunConfig,
};
use biascl::stream::{make_scenario, read_records, write_records, Preset, ScenarioConfig};
use biascl::trainers::{HyperConfig, Method};

fn config(method: Method, seeds: Vec<u64>) -> RunConfig {
    RunConfig {
        scenario: ScenarioConfig {
            n_train: 40,
            n_test: 20,
            ..ScenarioConfig::preset(Preset::TwoTaskBackward)
        },
        method: MethodConfig {
            id: method,
            ..MethodConfig::default()
        },
        hyper: HyperConfig {
            epochs: 3,
            hidden: vec![16],
            ..HyperConfig::default()
        },
        seeds,
        ..RunConfig::default()
    }
}

#[test]
fn replay_of_everything_retains_the_first_task_better_than_fine_tuning() {
    let seeds: Vec<u64> = (0..6).collect();
    let first_task_after_second = |method: Method| {
        let mut c = config(method, seeds.clone());
        c.scenario.n_train = 100;
        c.scenario.bias_level = Some(0);
        c.hyper.epochs = 10;
        c.hyper.memory_fraction = 1.0;
        let records = run_scenario(&c).unwrap();
        records.iter().map(|r| r.accuracy.rows[1][0]).sum::<f64>() / records.len() as f64
    };
    let ft = first_task_after_second(Method::FineTuning);
    let er = first_task_after_second(Method::Er);
    assert!(er > ft, "ER {er} vs fine-tuning {ft}");
}

#[test]
fn records_persist_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs");
    for method in [Method::FineTuning, Method::Lwf] {
        let mut c = config(method, vec![0, 1]);
        c.output = Some(runs.clone());
        run_scenario(&c).unwrap();
    }
    let records = load_records(&runs).unwrap();
    // two methods × two levels × two seeds
    assert_eq!(records.len(), 8);
    let rep = report(&records).unwrap();
    assert_eq!(rep.table.len(), 2);
    assert!(rep.table.iter().all(|r| r.runs == 4));
    let tables = dir.path().join("tables");
    write_report(&rep, &tables).unwrap();
    for name in ["table.csv", "dca.csv", "curves.csv", "cka.csv", "accumulation.csv"] {
        assert!(tables.join(name).exists(), "{name}");
    }
}

#[test]
fn streams_round_trip_through_jsonl() {
    let c = config(Method::FineTuning, vec![0]);
    let stream = make_scenario(&c.scenario, 9).unwrap();
    let mut buf = Vec::new();
    write_records(&stream, &mut buf).unwrap();
    let back = read_records(buf.as_slice()).unwrap();
    assert_eq!(back, stream);
}
