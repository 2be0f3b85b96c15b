//! End-to-end runs through the library harness and the `tscnn` binary.

use std::path::Path;
use std::process::{Command, Output};

use tscnn::data::{generate_dataset, read_dataset, DatasetConfig, PhantomConfig, Sample};
use tscnn::harness::{
    evaluate, prepare_triplets, read_trace_csv, train_run, RunConfig, SUMMARY_HEADER,
};
use tscnn::metrics::{aggregate, median};

fn tscnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tscnn"))
        .args(args)
        .output()
        .unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn expect_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn exit_codes() {
    let none = tscnn(&[]);
    assert_eq!(none.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&none.stderr).contains("Usage"));
    assert_eq!(tscnn(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(tscnn(&["eval", "--checkpoint", "x"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.tsck");
    let out = tscnn(&[
        "eval",
        "--checkpoint",
        path(&missing),
        "--data",
        ".",
        "--out",
        "m.csv",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(stderr.trim().lines().count(), 1, "{stderr}");
    assert!(stderr.starts_with("error: "));
    assert!(!dir.path().join("m.csv").exists());
}

#[test]
fn gradcheck_reports_every_op() {
    let out = tscnn(&["gradcheck"]);
    expect_ok(&out);
    let table = String::from_utf8_lossy(&out.stdout);
    for op in ["conv2d", "batch_norm2d", "sbfl"] {
        assert!(
            table.lines().any(|l| l.starts_with(op)),
            "{op} missing from\n{table}"
        );
    }
    assert!(!table.contains("FAIL"));
}

#[test]
fn gen_train_eval_plot_produce_declared_files() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(
        root.join("data.cfg"),
        "volumes = 3\nsize = 32\nslices = 4\nseed = 3\n",
    )
    .unwrap();
    std::fs::write(
        root.join("run.cfg"),
        "base_channels = 2\nimage_size = 32\nepochs = 2\nsteps_per_epoch = 2\nbatch_size = 2\ndata = phantoms\nout = run\n",
    )
    .unwrap();
    expect_ok(&tscnn(&[
        "gen-data",
        "--config",
        path(&root.join("data.cfg")),
        "--out",
        path(&root.join("phantoms")),
    ]));
    let samples = read_dataset(&root.join("phantoms")).unwrap();
    assert_eq!(samples.len(), 3);

    expect_ok(&tscnn(&["train", "--config", path(&root.join("run.cfg"))]));
    for f in ["model.tsck", "model.cfg", "model.manifest.txt", "trace.csv"] {
        assert!(root.join("run").join(f).is_file(), "{f}");
    }
    let manifest = std::fs::read_to_string(root.join("run/model.manifest.txt")).unwrap();
    assert!(manifest
        .lines()
        .any(|l| l.starts_with("encoder.stem.weight 2,1,3,3")));
    let trace = read_trace_csv(&root.join("run/trace.csv")).unwrap();
    assert_eq!(trace.len(), 4);
    assert_eq!((trace[3].step, trace[3].epoch), (4, 2));
    let pixels = (2 * 16 * 16) as f64;
    for r in &trace {
        let recomposed = r.beta * r.sum_fg / pixels + (1.0 - r.beta) * r.sum_bg / pixels;
        assert!(
            (recomposed - r.total).abs() < 2e-6,
            "{recomposed} vs {}",
            r.total
        );
    }

    let csv = root.join("eval.csv");
    expect_ok(&tscnn(&[
        "eval",
        "--checkpoint",
        path(&root.join("run/model.tsck")),
        "--data",
        path(&root.join("phantoms")),
        "--out",
        path(&csv),
    ]));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 1 + 3 * 4 + 1);
    assert!(text.lines().last().unwrap().starts_with("MEDIAN,"));

    let svg = root.join("loss.svg");
    expect_ok(&tscnn(&[
        "plot-loss",
        "--trace",
        path(&root.join("run/trace.csv")),
        "--out",
        path(&svg),
    ]));
    roxmltree::Document::parse(&std::fs::read_to_string(&svg).unwrap()).unwrap();
}

fn column_medians(csvs: &[String]) -> Vec<f64> {
    let mut cols = vec![Vec::new(); 4];
    for text in csvs {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        for row in reader.records() {
            let row = row.unwrap();
            if &row[0] == "MEDIAN" {
                continue;
            }
            for (c, col) in cols.iter_mut().enumerate() {
                col.push(row[c + 1].parse::<f64>().unwrap());
            }
        }
    }
    cols.iter().map(|c| median(c).unwrap()).collect()
}

#[test]
fn pooled_row_matches_recomputation_from_fold_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(
        root.join("data.cfg"),
        "volumes = 5\nsize = 32\nslices = 3\nseed = 8\n",
    )
    .unwrap();
    std::fs::write(
        root.join("cv.cfg"),
        "model = residual_unet\nloss = fl\nbase_channels = 2\nimage_size = 32\nepochs = 1\nsteps_per_epoch = 3\n\
         batch_size = 2\nfolds = 2\ndata = phantoms\nout = cv\n",
    )
    .unwrap();
    expect_ok(&tscnn(&[
        "gen-data",
        "--config",
        path(&root.join("data.cfg")),
        "--out",
        path(&root.join("phantoms")),
    ]));
    let out = tscnn(&[
        "--jobs",
        "2",
        "cross-validate",
        "--config",
        path(&root.join("cv.cfg")),
    ]);
    expect_ok(&out);

    let folds: Vec<String> = (0..2)
        .map(|i| std::fs::read_to_string(root.join(format!("cv/fold{i}/metrics.csv"))).unwrap())
        .collect();
    let rows: usize = folds.iter().map(|t| t.lines().count() - 2).sum();
    assert_eq!(rows, 5 * 3);
    let medians = column_medians(&folds);
    let summary = std::fs::read_to_string(root.join("cv/summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines[0], SUMMARY_HEADER);
    assert_eq!(lines.len(), 1 + 2 + 1);
    let pooled: Vec<f64> = lines[3]
        .split(',')
        .skip(1)
        .map(|v| v.parse().unwrap())
        .collect();
    assert!(lines[3].starts_with("residual_unet-fl,"));
    for (a, b) in pooled.iter().zip(&medians) {
        assert!((a - b).abs() <= 1e-6, "{pooled:?} vs {medians:?}");
    }
    assert!(String::from_utf8_lossy(&out.stdout).contains("residual_unet-fl/fold1"));
}

#[test]
fn phantom_training_descends_and_beats_empty_predictions() {
    let samples: Vec<Sample> = generate_dataset(&DatasetConfig {
        volumes: 8,
        phantom: PhantomConfig {
            size: 64,
            slices: 8,
            seed: 500,
            ..PhantomConfig::default()
        },
        spacing_mm: 1.0,
    })
    .unwrap();
    let refs: Vec<&Sample> = samples.iter().collect();
    let mut cfg = RunConfig {
        image_size: 64,
        epochs: 20,
        steps_per_epoch: 20,
        ..RunConfig::default()
    };
    cfg.model.base_channels = 8;
    cfg.model.input_size = 32;
    let (model, trace) = train_run(&cfg, &prepare_triplets(&refs, 64).unwrap()).unwrap();
    let means = trace.epoch_means();
    assert_eq!(means.len(), 20);
    assert!(
        means[19].total < means[0].total,
        "{} !< {}",
        means[19].total,
        means[0].total
    );

    let records = evaluate(&model, &refs, 64).unwrap();
    let trained = aggregate(&records).unwrap().dsc;
    let empty_dsc: Vec<f64> = records
        .iter()
        .map(|r| if r.gt_empty { 1.0 } else { 0.0 })
        .collect();
    let baseline = median(&empty_dsc).unwrap();
    assert!(
        trained > baseline,
        "trained {trained} vs empty baseline {baseline}"
    );
}
