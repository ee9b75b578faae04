use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const MODEL: &str = r#"{"mode":"discrete","m":2,"p":3,"pi":[0.5,0.5],
 "trans":[[0.95,0.05],[0.08,0.92]],
 "law":[[[0.92,0.06,0.02],[0.08,0.86,0.06],[0.03,0.12,0.85]],
        [[0.80,0.15,0.05],[0.03,0.80,0.17],[0.01,0.05,0.94]]]}"#;

const CONTINUOUS_MODEL: &str = r#"{"mode":"continuous","m":2,"p":2,"pi":[0.5,0.5],
 "trans":[[-0.01,0.01],[0.02,-0.02]],
 "law":[[[-0.001,0.001],[0.002,-0.002]],[[-0.004,0.004],[0.0005,-0.0005]]]}"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_migfilter"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn discrete_pipeline(dir: &Path) -> Vec<Vec<u8>> {
    fs::write(dir.join("model.json"), MODEL).unwrap();
    fs::write(
        dir.join("sim.json"),
        r#"{"mode":"discrete","entities_per_rating":[200,200,200],"horizon":60,"seed":3,"step_length_days":30}"#,
    )
    .unwrap();
    ok(
        dir,
        &[
            "simulate",
            "--model",
            "model.json",
            "--config",
            "sim.json",
            "--out",
            "panel.csv",
            "--hidden-out",
            "hidden.csv",
        ],
    );
    ok(
        dir,
        &[
            "calibrate",
            "--panel",
            "panel.csv",
            "--states",
            "2",
            "--restarts",
            "3",
            "--seed",
            "7",
            "--out",
            "fit.json",
        ],
    );
    ok(
        dir,
        &[
            "filter",
            "--model",
            "fit.json",
            "--panel",
            "panel.csv",
            "--out",
            "traj.csv",
        ],
    );
    ok(
        dir,
        &[
            "forecast",
            "--model",
            "fit.json",
            "--trajectory",
            "traj.csv",
            "--horizon",
            "3",
            "--out",
            "forecast.csv",
        ],
    );
    ok(
        dir,
        &[
            "evaluate",
            "--trajectory",
            "traj.csv",
            "--panel",
            "panel.csv",
            "--out",
            "eval.json",
        ],
    );
    ok(
        dir,
        &[
            "backtest",
            "--panel",
            "panel.csv",
            "--states",
            "2",
            "--train-steps",
            "40",
            "--refit-steps",
            "10",
            "--restarts",
            "2",
            "--out",
            "backtest.json",
        ],
    );
    [
        "panel.csv",
        "hidden.csv",
        "fit.json",
        "traj.csv",
        "forecast.csv",
        "eval.json",
        "backtest.json",
    ]
    .iter()
    .map(|f| fs::read(dir.join(f)).unwrap())
    .collect()
}

#[test]
fn discrete_pipeline_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = discrete_pipeline(a.path());
    assert_eq!(first, discrete_pipeline(b.path()));

    let traj = String::from_utf8(first[3].clone()).unwrap();
    assert_eq!(traj.lines().count(), 62);
    assert!(traj.starts_with("t,I_1,I_2,nu_1_1,"));
    let fit: serde_json::Value = serde_json::from_slice(&first[2]).unwrap();
    assert_eq!(fit["m"], 2);
    assert!(fit["diagnostics"]["loglik"].as_f64().unwrap() < 0.0);
    let eval: serde_json::Value = serde_json::from_slice(&first[5]).unwrap();
    assert_eq!(eval["model"]["transitions"].as_array().unwrap().len(), 6);
    let forecast = String::from_utf8(first[4].clone()).unwrap();
    assert!(forecast.lines().nth(1).unwrap().starts_with("0,3,"));
}

#[test]
fn continuous_pipeline_runs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("model.json"), CONTINUOUS_MODEL).unwrap();
    fs::write(
        d.join("sim.json"),
        r#"{"mode":"continuous","entities_per_rating":[100,100],"horizon":600,"seed":1}"#,
    )
    .unwrap();
    ok(
        d,
        &[
            "simulate",
            "--model",
            "model.json",
            "--config",
            "sim.json",
            "--out",
            "events.csv",
        ],
    );
    ok(
        d,
        &[
            "aggregate",
            "--events",
            "events.csv",
            "--step-days",
            "1",
            "--out",
            "daily.csv",
        ],
    );
    ok(
        d,
        &[
            "aggregate",
            "--events",
            "events.csv",
            "--out",
            "monthly.csv",
        ],
    );
    ok(
        d,
        &[
            "filter",
            "--model",
            "model.json",
            "--events",
            "events.csv",
            "--report-step",
            "30",
            "--out",
            "traj.csv",
        ],
    );
    ok(
        d,
        &[
            "evaluate",
            "--trajectory",
            "traj.csv",
            "--panel",
            "monthly.csv",
        ],
    );
    ok(
        d,
        &[
            "calibrate",
            "--panel",
            "daily.csv",
            "--step-days",
            "1",
            "--states",
            "2",
            "--mode",
            "continuous",
            "--subintervals",
            "8",
            "--restarts",
            "1",
            "--max-iters",
            "20",
            "--out",
            "fit.json",
        ],
    );
    let fit: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("fit.json")).unwrap()).unwrap();
    assert_eq!(fit["mode"], "continuous");
    assert_eq!(fit["diagnostics"]["fine_grid"]["interval_length"], 0.125);
    ok(
        d,
        &[
            "filter",
            "--model",
            "fit.json",
            "--panel",
            "daily.csv",
            "--step-days",
            "1",
            "--subintervals",
            "8",
            "--report-step",
            "30",
        ],
    );
}

#[test]
fn ratings_become_a_panel() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("ratings.csv"),
        "entity_id,date,rating\nx,2000-01-01,A\nx,2000-03-01,B\ny,2000-01-01,B\ny,2000-04-15,WR\n",
    )
    .unwrap();
    let out = ok(
        d,
        &[
            "build-panel",
            "--ratings",
            "ratings.csv",
            "--labels",
            "A,B",
            "--end",
            "2000-04-01",
        ],
    );
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(
        text,
        "t,Y_1,Y_2,N_1_1,N_1_2,N_2_1,N_2_2\n1,1,1,1,0,0,1\n2,1,1,0,1,0,1\n3,0,2,0,0,0,2\n"
    );
}

#[test]
fn exit_codes_follow_error_families() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // missing input file is a data error
    assert_eq!(
        run(
            d,
            &["filter", "--model", "nope.json", "--panel", "nope.csv"]
        )
        .status
        .code(),
        Some(1)
    );
    // bad arguments
    assert_eq!(run(d, &["calibrate", "--states"]).status.code(), Some(1));
    assert_eq!(run(d, &["--help"]).status.code(), Some(0));

    fs::write(
        d.join("panel.csv"),
        "t,Y_1,Y_2,N_1_1,N_1_2,N_2_1,N_2_2\n1,2,1,1,1,0,1\n",
    )
    .unwrap();
    fs::write(
        d.join("bad.json"),
        r#"{"mode":"discrete","m":1,"p":2,"pi":[1.0],"trans":[[1.0]],"law":[[[0.5,0.6],[0.0,1.0]]]}"#,
    )
    .unwrap();
    assert_eq!(
        run(
            d,
            &["filter", "--model", "bad.json", "--panel", "panel.csv"]
        )
        .status
        .code(),
        Some(2)
    );

    // a migration the model rules out in every state
    fs::write(
        d.join("frozen.json"),
        r#"{"mode":"discrete","m":1,"p":2,"pi":[1.0],"trans":[[1.0]],"law":[[[1.0,0.0],[0.0,1.0]]]}"#,
    )
    .unwrap();
    let out = run(
        d,
        &["filter", "--model", "frozen.json", "--panel", "panel.csv"],
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("impossible"));

    fs::write(
        d.join("short.csv"),
        "t,Y_1,Y_2,N_1_1,N_1_2,N_2_1,N_2_2\n1,2,1,1,1\n",
    )
    .unwrap();
    assert_eq!(
        run(
            d,
            &["filter", "--model", "frozen.json", "--panel", "short.csv"]
        )
        .status
        .code(),
        Some(1)
    );
}
