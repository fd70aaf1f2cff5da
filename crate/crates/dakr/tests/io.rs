use std::fs;
use std::path::Path;
use std::process::Command;

use dakr::checkpoint::{load_buffer, load_params, BUFFER_FILE, PARAMS_FILE};
use dakr::{ablate, config, export, report};
use dakr_core::train::{prepare_domains, synthesize_domains, RunConfig};

fn tiny() -> RunConfig {
    RunConfig {
        domains: 2,
        samples_per_domain: 12,
        image_size: 8,
        levels: 2,
        base_channels: 2,
        epochs: 2,
        batch_size: 2,
        buffer_capacity: 4,
        lr_first: 1e-2,
        lr_rest: 1e-2,
        ..RunConfig::default()
    }
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dakr"))
}

fn write_json(path: &Path, text: &str) {
    fs::write(path, text).unwrap();
}

#[test]
fn exported_domains_read_back() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = export::write_domains(dir.path(), 2, 11, 8, 12).unwrap();
    let (m2, read) = export::read_domains(dir.path()).unwrap();
    assert_eq!(m2, manifest);
    let direct = synthesize_domains(2, 11, 8, 12).unwrap();
    for (a, b) in read.iter().zip(&direct) {
        assert_eq!(a.spec, b.spec);
        for (sa, sb) in [(&a.train, &b.train), (&a.val, &b.val), (&a.test, &b.test)] {
            assert_eq!(sa.len(), sb.len());
            for (x, y) in sa.iter().zip(sb) {
                assert_eq!(x.mask, y.mask);
                assert!(x.image.iter().zip(&y.image).all(|(p, q)| (p - q).abs() <= 0.5 / 65535.0 + 1e-15));
            }
        }
    }
    let mut membership: Vec<usize> = manifest.domains[0].split.train.clone();
    membership.extend(&manifest.domains[0].split.val);
    membership.extend(&manifest.domains[0].split.test);
    membership.sort();
    assert_eq!(membership, (0..12).collect::<Vec<_>>());
}

#[test]
fn tampered_export_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = export::write_domains(dir.path(), 2, 3, 8, 12).unwrap();
    let victim = dir.path().join(&manifest.domains[1].files[4].image);
    let mut bytes = fs::read(&victim).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(&victim, bytes).unwrap();
    let err = export::read_domains(dir.path()).unwrap_err();
    assert!(err.to_string().contains("SHA-256"));
}

#[test]
fn single_run_file_inventory_and_csv_round_trip() {
    let config = tiny();
    let domains = prepare_domains(&config).unwrap();
    let out = ablate::run_cell(&config, &domains, &mut |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let written = report::write_run(&out.result, dir.path(), false).unwrap();
    let mut names: Vec<String> = written.iter().map(|p| p.file_name().unwrap().to_string_lossy().into()).collect();
    names.sort();
    assert_eq!(names, ["curves.csv", "dice.csv", "hd95.csv", "iou.csv", "run.json"]);
    let csvs = names.iter().filter(|n| n.ends_with(".csv") && *n != "curves.csv").count();
    assert_eq!(csvs, 3);

    let json = report::read_run(&dir.path().join("run.json")).unwrap();
    assert_eq!(json, out.result);
    for (name, summary) in [("dice", json.dice_summary), ("iou", json.iou_summary), ("hd95", json.hd95_summary)] {
        let m = report::read_matrix_csv(&dir.path().join(format!("{}.csv", name))).unwrap();
        assert_eq!(m.bwt().unwrap().to_bits(), summary.bwt.to_bits(), "{} bwt", name);
        assert_eq!(m.avg().unwrap().to_bits(), summary.avg.to_bits(), "{} avg", name);
    }
    let curves = fs::read_to_string(dir.path().join("curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 2 + 1);
}

#[test]
fn cells_differing_only_in_seed() {
    let a = tiny();
    let b = RunConfig { seed: 1, ..a.clone() };
    let outs = ablate::run_grid(&[a.clone(), b.clone()], 2, &|_, _| {}).unwrap();
    assert_ne!(outs[0].result.dice, outs[1].result.dice);
    assert_eq!(RunConfig { seed: 0, ..outs[1].result.config.clone() }, outs[0].result.config);
    let serial = ablate::run_grid(&[a, b], 1, &|_, _| {}).unwrap();
    for (p, s) in outs.iter().zip(&serial) {
        assert_eq!(p.result.dice, s.result.dice);
    }
}

#[test]
fn report_over_grid_output() {
    let cells = vec![tiny(), RunConfig { seed: 4, ..tiny() }, tiny().seq()];
    let results: Vec<_> =
        ablate::run_grid(&cells, 1, &|_, _| {}).unwrap().into_iter().map(|o| o.result).collect();
    let dir = tempfile::tempdir().unwrap();
    report::write_report(&results, dir.path(), true).unwrap();
    let runs = report::load_runs(dir.path()).unwrap();
    assert_eq!(runs.len(), 3);
    let rows = report::aggregate(&results).unwrap();
    assert_eq!(rows.len(), 2);
    let full = rows.iter().find(|r| r.key == "REKD+CRA+CNA").unwrap();
    assert_eq!(full.runs, 2);
    let mean = (results[0].dice_summary.bwt + results[1].dice_summary.bwt) / 2.0;
    assert_eq!(full.means[0].1, mean);
    let table = fs::read_to_string(dir.path().join("aggregate.csv")).unwrap();
    assert!(table.starts_with("method,signature,runs,dice_avg,dice_bwt"));
    assert_eq!(table.lines().count(), 3);
    let svgs = fs::read_dir(dir.path())
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().join("forgetting.svg").is_file())
        .count();
    assert_eq!(svgs, 3);
}

#[test]
fn checked_in_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let desk = config::load_config(&root.join("desk.json")).unwrap();
    assert_eq!(desk, RunConfig { label: desk.label.clone(), ..RunConfig::desk() });
    let grid = config::load_grid(&root.join("ablation_grid.json")).unwrap();
    assert_eq!(grid, ablate::standard_grid(&RunConfig::desk(), &[0, 1, 2, 3, 4]));
}

#[test]
fn cli_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.json");
    write_json(&cfg, &config::to_json(&tiny()));
    let out = dir.path().join("run");
    let status = bin().args(["train", "--quiet", "--svg", "--config"]).arg(&cfg).arg("--out").arg(&out).status().unwrap();
    assert_eq!(status.code(), Some(0));
    for f in ["run.json", "dice.csv", "iou.csv", "hd95.csv", "curves.csv", "forgetting.svg", PARAMS_FILE, BUFFER_FILE] {
        assert!(out.join(f).is_file(), "missing {}", f);
    }
    let (c, _) = load_params(&out.join(PARAMS_FILE)).unwrap();
    assert_eq!(c, tiny());
    let buffer = load_buffer(&out.join(BUFFER_FILE)).unwrap();
    assert_eq!(buffer.entries.len(), 4);

    let data = dir.path().join("data");
    let status = bin()
        .args(["gen", "--domains", "2", "--seed", "0", "--image-size", "8", "--samples", "12", "--out"])
        .arg(&data)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let eval = bin().arg("eval").arg("--checkpoint").arg(out.join(PARAMS_FILE)).arg("--domains").arg(&data).output().unwrap();
    assert_eq!(eval.status.code(), Some(0), "{}", String::from_utf8_lossy(&eval.stderr));
    let rows: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 2);
    // Same data seed, so the last row of the Dice matrix is reproduced up to 16-bit quantization.
    let result = report::read_run(&out.join("run.json")).unwrap();
    for (i, row) in rows.as_array().unwrap().iter().enumerate() {
        let expected = result.dice.get(1, i).unwrap();
        assert!((row["dice"].as_f64().unwrap() - expected).abs() < 0.02);
    }

    let status = bin().arg("report").arg("--runs").arg(dir.path()).status().unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(dir.path().join("aggregate.csv").is_file());
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let typo = dir.path().join("typo.json");
    write_json(&typo, r#"{"epochs": 2, "lamda1": 0.1}"#);
    let code = |args: &[&std::ffi::OsStr]| bin().args(args).output().unwrap().status.code();
    let out = dir.path().join("o");
    assert_eq!(code(&["train".as_ref(), "--config".as_ref(), typo.as_os_str(), "--out".as_ref(), out.as_os_str()]), Some(2));
    let grid = dir.path().join("grid.json");
    write_json(&grid, &format!("[{}, {}]", config::to_json(&tiny()), config::to_json(&RunConfig { data_seed: 1, ..tiny() })));
    assert_eq!(code(&["ablate".as_ref(), "--grid".as_ref(), grid.as_os_str(), "--out".as_ref(), out.as_os_str()]), Some(2));
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    assert_eq!(code(&["report".as_ref(), "--runs".as_ref(), empty.as_os_str()]), Some(2));
    let missing = dir.path().join("nope.ckpt");
    assert_eq!(code(&["eval".as_ref(), "--checkpoint".as_ref(), missing.as_os_str(), "--domains".as_ref(), empty.as_os_str()]), Some(3));
}
