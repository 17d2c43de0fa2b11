//! The file-based workflow behind the command-line tool: simulate to CSV,
//! then load, fit and export through the same entry points as `mixture-mte`.

use std::path::PathBuf;

use mixture_mte::cli::{cmd_aggregate, cmd_fit, cmd_simulate, RunConfig};

fn main() {
    let dir = std::env::temp_dir().join("mixture-mte-example");
    let config = |extra: &str| {
        let text = format!(r#"{{"dgp": {{"n": 6000}}, "em": {{"n_starts": 2}}, "out": {:?}{extra}}}"#, dir);
        RunConfig::from_json(&text).unwrap()
    };
    std::fs::create_dir_all(&dir).unwrap();
    let written = cmd_simulate(&config("")).unwrap();
    show(&written);

    let data = dir.join("simulated.csv");
    let fit = config(&format!(r#", "data": {{"path": {data:?}}}"#));
    show(&cmd_fit(&fit).unwrap());
    show(&cmd_aggregate(&fit).unwrap());

    let report = std::fs::read_to_string(dir.join("aggregate_report.json")).unwrap();
    println!("{}", &report[..report.len().min(600)]);
}

fn show(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}
