use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use oodseg::npy::{encode, read_score_map};
use oodseg::{
    entropy_map, extract_segments, feature_weights, label_segments, pixel_pr_curve,
    read_feature_csv, write_feature_csv, write_npy, Benchmark, Connectivity, FeatureTable,
    MetaModel, ProbMap, SceneConfig,
};

fn oodseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oodseg"))
        .args(args)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_config() -> SceneConfig {
    SceneConfig {
        height: 48,
        width: 48,
        n_regions: 5,
        n_ood_blobs: 2,
        blob_radius_range: [4.0, 7.0],
        ..SceneConfig::default()
    }
}

fn synth_dir(dir: &Path, scenes: usize) -> PathBuf {
    fs::create_dir_all(dir).unwrap();
    let cfg_path = dir.join("cfg.json");
    fs::write(&cfg_path, serde_json::to_string(&small_config()).unwrap()).unwrap();
    let out = dir.join("bench");
    let res = oodseg(&[
        "synth",
        "--config",
        s(&cfg_path),
        "--scenes",
        &scenes.to_string(),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    out
}

#[test]
fn score_uniform_map_and_library_parity() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("prob.npy");
    let uniform = ProbMap::new(4, 4, 3, vec![1.0 / 3.0; 48]).unwrap();
    write_npy(&uniform, &input).unwrap();
    let out = dir.path().join("score.npy");
    assert_eq!(
        code(&oodseg(&[
            "score",
            "--in",
            s(&input),
            "--metric",
            "entropy",
            "--out",
            s(&out)
        ])),
        0
    );
    assert!(read_score_map(&out)
        .unwrap()
        .data()
        .iter()
        .all(|&v| v == 1.0));
    assert_eq!(fs::read(&out).unwrap(), encode(&entropy_map(&uniform)));

    for metric in ["margin", "maxprob"] {
        assert_eq!(
            code(&oodseg(&[
                "score",
                "--in",
                s(&input),
                "--metric",
                metric,
                "--out",
                s(&out)
            ])),
            0
        );
    }
    assert_eq!(
        code(&oodseg(&[
            "score",
            "--in",
            s(&input),
            "--metric",
            "softmax",
            "--out",
            s(&out)
        ])),
        2
    );
}

#[test]
fn score_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("bad.npy");
    let bad = ProbMap::new_unvalidated(2, 2, 2, vec![0.9; 8]).unwrap();
    write_npy(&bad, &input).unwrap();
    let out = dir.path().join("score.npy");
    let res = oodseg(&["score", "--in", s(&input), "--out", s(&out)]);
    assert_eq!(code(&res), 2);
    assert!(!res.stderr.is_empty());
    assert_eq!(
        code(&oodseg(&[
            "score",
            "--in",
            s(&input),
            "--out",
            s(&out),
            "--no-validate"
        ])),
        0
    );
    let missing = dir.path().join("missing.npy");
    assert_eq!(
        code(&oodseg(&["score", "--in", s(&missing), "--out", s(&out)])),
        3
    );
    assert_eq!(code(&oodseg(&["score", "--out", s(&out)])), 2);
}

#[test]
fn segments_tables() {
    let dir = tempfile::tempdir().unwrap();
    let prob = dir.path().join("prob.npy");
    let mut hot = vec![0.0; 5 * 5 * 3];
    for px in 0..25 {
        hot[px * 3 + px % 3] = 1.0;
    }
    write_npy(&ProbMap::new(5, 5, 3, hot).unwrap(), &prob).unwrap();
    let out = dir.path().join("seg.csv");
    assert_eq!(
        code(&oodseg(&[
            "segments",
            "--prob",
            s(&prob),
            "--t",
            "0.5",
            "--out",
            s(&out)
        ])),
        0
    );
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("id,row_min,col_min,row_max,col_max,"));

    assert_eq!(
        code(&oodseg(&[
            "segments",
            "--prob",
            s(&prob),
            "--t",
            "0",
            "--min-size",
            "1",
            "--out",
            s(&out)
        ])),
        0
    );
    let table = read_feature_csv(&out).unwrap();
    assert!(!table.rows.is_empty());
    assert_eq!(
        table.rows.iter().map(|r| r.features.size).sum::<f64>(),
        25.0
    );

    assert_eq!(
        code(&oodseg(&[
            "segments",
            "--prob",
            s(&prob),
            "--t",
            "1.5",
            "--out",
            s(&out)
        ])),
        2
    );
    assert_eq!(
        code(&oodseg(&[
            "segments",
            "--prob",
            s(&prob),
            "--t",
            "0.5",
            "--connectivity",
            "6",
            "--out",
            s(&out)
        ])),
        2
    );
}

#[test]
fn segments_match_library_on_synthetic_scene() {
    let dir = tempfile::tempdir().unwrap();
    let bench_dir = synth_dir(dir.path(), 1);
    let bench = Benchmark::load(&bench_dir).unwrap();
    let pair = &bench.scenes[0];
    let prob = bench_dir.join("scene_0_prob_boosted.npy");
    let gt = bench_dir.join("scene_0_gt.npy");
    let out = dir.path().join("seg.csv");
    let res = oodseg(&[
        "segments",
        "--prob",
        s(&prob),
        "--t",
        "0.4",
        "--connectivity",
        "8",
        "--min-size",
        "3",
        "--gt",
        s(&gt),
        "--tau-tp",
        "0.5",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));

    let segments = extract_segments(&pair.boosted, 0.4, Connectivity::Eight, 3).unwrap();
    let labels = label_segments(&segments, &pair.gt, 0.5).unwrap();
    let expected = dir.path().join("expected.csv");
    write_feature_csv(
        &FeatureTable::from_segments(&segments).with_labels(&labels),
        &expected,
    )
    .unwrap();
    assert_eq!(fs::read(&out).unwrap(), fs::read(&expected).unwrap());
    assert!(fs::read_to_string(&out)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .ends_with(",label"));
}

fn labelled_table(dir: &Path) -> PathBuf {
    let bench_dir = synth_dir(dir, 2);
    let out = dir.join("seg.csv");
    let res = oodseg(&[
        "segments",
        "--prob",
        s(&bench_dir.join("scene_0_prob_plain.npy")),
        "--t",
        "0.3",
        "--min-size",
        "1",
        "--gt",
        s(&bench_dir.join("scene_0_gt.npy")),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&res), 0);
    out
}

#[test]
fn fit_meta_writes_loadable_model_and_ranking() {
    let dir = tempfile::tempdir().unwrap();
    let table = labelled_table(dir.path());
    let model_path = dir.path().join("model.json");
    let res = oodseg(&[
        "fit-meta",
        "--features",
        s(&table),
        "--lambda",
        "0.01",
        "--out",
        s(&model_path),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let model = MetaModel::load(&model_path).unwrap();
    assert_eq!(model.l2_lambda, 0.01);

    let (rows, labels) = read_feature_csv(&table).unwrap().labelled_rows();
    let expected = MetaModel::fit_segments(
        &rows,
        &labels,
        oodseg::FitOptions {
            l2_lambda: 0.01,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(model, expected);
    let printed: Vec<String> = String::from_utf8(res.stdout)
        .unwrap()
        .lines()
        .map(|l| l.split_whitespace().nth(1).unwrap().to_string())
        .collect();
    let ranked: Vec<String> = feature_weights(&expected)
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    assert_eq!(printed, ranked);
}

#[test]
fn fit_meta_single_class_and_empty_tables() {
    let dir = tempfile::tempdir().unwrap();
    let table = labelled_table(dir.path());
    let text = fs::read_to_string(&table).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    let ones: Vec<String> = lines
        .map(|l| {
            let mut cells: Vec<&str> = l.split(',').collect();
            *cells.last_mut().unwrap() = "1";
            cells.join(",")
        })
        .collect();
    let single = dir.path().join("single.csv");
    fs::write(&single, format!("{header}\n{}\n", ones.join("\n"))).unwrap();
    let model_path = dir.path().join("model.json");
    assert_eq!(
        code(&oodseg(&[
            "fit-meta",
            "--features",
            s(&single),
            "--out",
            s(&model_path)
        ])),
        0
    );
    let model = MetaModel::load(&model_path).unwrap();
    assert!(model.bias.is_finite() && model.bias > 0.0);

    let empty = dir.path().join("empty.csv");
    fs::write(&empty, format!("{header}\n")).unwrap();
    assert_eq!(
        code(&oodseg(&[
            "fit-meta",
            "--features",
            s(&empty),
            "--out",
            s(&model_path)
        ])),
        2
    );
}

#[test]
fn eval_tables_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let bench_dir = synth_dir(dir.path(), 3);
    let table = labelled_table(&dir.path().join("train"));
    let model_path = dir.path().join("model.json");
    assert_eq!(
        code(&oodseg(&[
            "fit-meta",
            "--features",
            s(&table),
            "--out",
            s(&model_path)
        ])),
        0
    );

    let out = dir.path().join("sweep.csv");
    let res = oodseg(&[
        "eval",
        "--bench",
        s(&bench_dir),
        "--grid",
        "0.5",
        "--model",
        s(&model_path),
        "--coverage",
        "0.5",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 1 + 4);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("sweep.summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["meta_available"], true);
    assert_eq!(summary["combinations"].as_array().unwrap().len(), 4);

    let res = oodseg(&[
        "eval",
        "--bench",
        s(&bench_dir),
        "--grid",
        "0.3,0.6,0.9",
        "--out",
        s(&out),
        "--jobs",
        "2",
    ]);
    assert_eq!(code(&res), 0);
    let csv = fs::read_to_string(&out).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 3);
    assert!(csv
        .lines()
        .skip(1)
        .all(|l| l.split(',').nth(2) == Some("0")));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("sweep.summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["meta_available"], false);

    let bench = Benchmark::load(&bench_dir).unwrap();
    for combo in summary["combinations"].as_array().unwrap() {
        let boosted = combo["ood_training"].as_bool().unwrap();
        let scores: Vec<_> = bench
            .scenes
            .iter()
            .map(|p| entropy_map(p.probs(boosted)))
            .collect();
        let gts: Vec<_> = bench.scenes.iter().map(|p| p.gt.clone()).collect();
        assert_eq!(
            combo["auprc"].as_f64().unwrap(),
            pixel_pr_curve(&scores, &gts).unwrap().auprc
        );
    }

    let serial = dir.path().join("serial.csv");
    assert_eq!(
        code(&oodseg(&[
            "eval",
            "--bench",
            s(&bench_dir),
            "--grid",
            "0.3,0.6,0.9",
            "--out",
            s(&serial)
        ])),
        0
    );
    assert_eq!(fs::read(&serial).unwrap(), csv.into_bytes());

    for grid in ["0.3,0.3", "0.3,x", "1.5", ""] {
        assert_eq!(
            code(&oodseg(&[
                "eval",
                "--bench",
                s(&bench_dir),
                "--grid",
                grid,
                "--out",
                s(&out)
            ])),
            2,
            "{grid}"
        );
    }
}

#[test]
fn synth_outputs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth_dir(&dir.path().join("a"), 1);
    let res = oodseg(&[
        "synth",
        "--config",
        s(&dir.path().join("a/cfg.json")),
        "--scenes",
        "1",
        "--out",
        s(&dir.path().join("b")),
    ]);
    assert_eq!(
        String::from_utf8(res.stdout).unwrap().trim(),
        s(&dir.path().join("b/manifest.json"))
    );
    let mut names: Vec<_> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(
        names,
        [
            "manifest.json",
            "scene_0_gt.npy",
            "scene_0_prob_boosted.npy",
            "scene_0_prob_plain.npy"
        ]
    );
    for name in &names {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(dir.path().join("b").join(name)).unwrap()
        );
    }
    assert!(Benchmark::load(&a)
        .unwrap()
        .scenes
        .iter()
        .all(|p| p.boosted.validate().is_ok() && p.plain.validate().is_ok()));
}

#[test]
fn synth_error_codes() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    assert_eq!(
        code(&oodseg(&[
            "synth",
            "--scenes",
            "1",
            "--out",
            s(&blocker.join("sub"))
        ])),
        3
    );
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"num_classes": 1}"#).unwrap();
    assert_eq!(
        code(&oodseg(&[
            "synth",
            "--config",
            s(&cfg),
            "--scenes",
            "1",
            "--out",
            s(&dir.path().join("o"))
        ])),
        2
    );
    fs::write(&cfg, r#"{"colour": 3}"#).unwrap();
    assert_eq!(
        code(&oodseg(&[
            "synth",
            "--config",
            s(&cfg),
            "--scenes",
            "1",
            "--out",
            s(&dir.path().join("o"))
        ])),
        2
    );
}
