use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use udakit::data::{generate, load_table, Domain, SyntheticSpec, TableSchema};
use udakit::trainer::Checkpoint;

fn udakit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_udakit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn moons_spec(n: usize, rotation: f64, seed: u64) -> String {
    format!(
        "generator = \"two_moons\"\nn = {n}\nnoise = 0.1\nrotation_degrees = {rotation:?}\nseed = {seed}\n"
    )
}

fn write_run_config(dir: &Path, n: usize, epochs: usize, source_only: bool) -> PathBuf {
    let coeffs = if source_only {
        "beta = 0.0\ngamma = 0.0\ndelta = 0.0\neta = 0.0\nlambda_max = 0.0\n"
    } else {
        ""
    };
    let text = format!(
        "schema_version = 1\n[train]\nlr = 1e-3\nepochs = {epochs}\n{coeffs}\n[source.synthetic]\n{}\n[target.synthetic]\n{}",
        moons_spec(n, 0.0, 0),
        moons_spec(n, 45.0, 1)
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn gen(dir: &Path, name: &str, spec: &str) -> PathBuf {
    let spec_path = dir.join(format!("{name}.toml"));
    std::fs::write(&spec_path, spec).unwrap();
    let out = dir.join(format!("{name}.csv"));
    let o = udakit(&["gen-data", s(&spec_path), s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

#[test]
fn train_missing_config_names_the_path() {
    let o = udakit(&["train", "/no/such/run.toml", "--out", "/tmp/unused"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/no/such/run.toml"), "{}", stderr(&o));
}

#[test]
fn train_config_errors_exit_2_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_run_config(dir.path(), 50, 1, false);
    let text = std::fs::read_to_string(&cfg).unwrap();
    std::fs::write(&cfg, text.replace("epochs = 1", "epochs = \"one\"")).unwrap();
    let o = udakit(&["train", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line"), "{}", stderr(&o));

    std::fs::write(
        &cfg,
        text.replace("schema_version = 1", "schema_version = 7"),
    )
    .unwrap();
    let o = udakit(&["train", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("schema_version 7"), "{}", stderr(&o));
}

#[test]
fn one_epoch_run_writes_artifacts_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_run_config(dir.path(), 200, 1, false);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let started = Instant::now();
    let o = udakit(&["train", s(&cfg), "--out", s(&a)]);
    assert!(started.elapsed().as_secs() < 60);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in [
        "manifest.json",
        "metrics.jsonl",
        "timings.jsonl",
        "checkpoint.json",
    ] {
        assert!(a.join(f).is_file(), "{f} missing");
    }
    let metrics = std::fs::read_to_string(a.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 1);
    let rec: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    assert!(rec["losses"]["composite"].as_f64().unwrap().is_finite());
    assert!(rec.get("wall_seconds").is_none());

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["train"]["epochs"], 1);
    assert_eq!(manifest["source"]["kind"], "synthetic");
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);

    let o = udakit(&["train", s(&cfg), "--out", s(&b), "--quiet"]);
    assert!(o.status.success());
    assert_eq!(
        std::fs::read(a.join("metrics.jsonl")).unwrap(),
        std::fs::read(b.join("metrics.jsonl")).unwrap()
    );
    assert_eq!(
        std::fs::read(a.join("checkpoint.json")).unwrap(),
        std::fs::read(b.join("checkpoint.json")).unwrap()
    );
}

#[test]
fn output_dir_resolves_relative_to_the_config_and_file_datasets_work() {
    let dir = tempfile::tempdir().unwrap();
    let src = gen(dir.path(), "src", &moons_spec(80, 0.0, 3));
    // Target as an unlabeled table with a different delimiter.
    let tgt_text =
        std::fs::read_to_string(gen(dir.path(), "tgt", &moons_spec(60, 30.0, 4))).unwrap();
    let unlabeled: String = tgt_text
        .lines()
        .map(|l| l.split(',').take(2).collect::<Vec<_>>().join(";") + "\n")
        .collect();
    std::fs::write(dir.path().join("tgt_unlabeled.csv"), unlabeled).unwrap();
    let cfg = dir.path().join("files.toml");
    std::fs::write(
        &cfg,
        format!(
            "schema_version = 1\noutput_dir = \"out\"\n[train]\nepochs = 2\nlr = 1e-3\n\
             [source.file]\npath = \"{}\"\nlabel_column = \"label\"\n\
             [target.file]\npath = \"tgt_unlabeled.csv\"\ndelimiter = \";\"\n",
            src.file_name().unwrap().to_str().unwrap()
        ),
    )
    .unwrap();
    let o = udakit(&["train", s(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = std::fs::read_to_string(dir.path().join("out/manifest.json")).unwrap();
    let manifest: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    assert_eq!(manifest["target"]["kind"], "file");
    assert_eq!(manifest["target"]["sha256"].as_str().unwrap().len(), 64);
    let metrics = std::fs::read_to_string(dir.path().join("out/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    assert!(metrics.contains("\"target_accuracy\":null"));
}

#[test]
fn eval_reports_accuracy_and_rejects_bad_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_run_config(dir.path(), 1000, 20, true);
    let run = dir.path().join("run");
    let o = udakit(&["train", s(&cfg), "--out", s(&run), "--quiet"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ck = run.join("checkpoint.json");
    let src = gen(dir.path(), "src", &moons_spec(1000, 0.0, 0));

    let o = udakit(&["eval", "--checkpoint", s(&ck), "--data", s(&src)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let last = out.lines().last().unwrap();
    let acc: f64 = last.parse().unwrap();
    assert_eq!(last.split('.').nth(1).unwrap().len(), 4);
    assert!(acc >= 0.95, "source accuracy {acc}");

    let text = std::fs::read_to_string(&src).unwrap();
    let unlabeled: String = text
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_owned() + "\n")
        .collect();
    let path = dir.path().join("unlabeled.csv");
    std::fs::write(&path, unlabeled).unwrap();
    let o = udakit(&["eval", "--checkpoint", s(&ck), "--data", s(&path)]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("labeled"));

    let wide: String = text
        .lines()
        .enumerate()
        .map(|(i, l)| {
            if i == 0 {
                format!("extra,{l}\n")
            } else {
                format!("1.0,{l}\n")
            }
        })
        .collect();
    std::fs::write(&path, wide).unwrap();
    let o = udakit(&["eval", "--checkpoint", s(&ck), "--data", s(&path)]);
    assert_eq!(o.status.code(), Some(4));

    std::fs::write(&path, "x0,x1,label\n0.1,0.2,zero\n").unwrap();
    let o = udakit(&["eval", "--checkpoint", s(&ck), "--data", s(&path)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("row 1"), "{}", stderr(&o));

    let o = udakit(&["eval", "--checkpoint", s(&src), "--data", s(&src)]);
    assert_eq!(o.status.code(), Some(2));
}

fn write_rows(path: &Path, header: &str, rows: &[Vec<f64>]) {
    let mut text = format!("{header}\n");
    for r in rows {
        text.push_str(&r.iter().map(f64::to_string).collect::<Vec<_>>().join(","));
        text.push('\n');
    }
    std::fs::write(path, text).unwrap();
}

fn parse_losses(out: &str) -> std::collections::HashMap<String, f64> {
    out.lines()
        .filter_map(|l| l.split_once(": "))
        .map(|(k, v)| (k.to_owned(), v.parse().unwrap()))
        .collect()
}

#[test]
fn losses_closed_forms_and_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let feats = vec![
        vec![0.0, 1.0],
        vec![0.5, -1.0],
        vec![2.0, 0.3],
        vec![-1.0, 0.0],
    ];
    write_rows(&p("f.csv"), "a,b", &feats);
    std::fs::write(p("y.csv"), "class\n0\n1\n1\n0\n").unwrap();
    write_rows(&p("z.csv"), "z0,z1", &vec![vec![0.0, 0.0]; 4]);
    let [f, y, z, ds, dt] = ["f.csv", "y.csv", "z.csv", "ds.csv", "dt.csv"].map(&p);
    let o = udakit(&[
        "losses",
        "--source-features",
        s(&f),
        "--source-labels",
        s(&y),
        "--target-features",
        s(&f),
        "--target-logits",
        s(&z),
        "--oracle",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v = parse_losses(&stdout(&o));
    assert!(v["mmd"].abs() < 1e-12);
    assert!((v["mcc"] - 0.5).abs() < 1e-12);
    assert!(v["im"].abs() < 1e-12);
    assert!(v["oracle_max_abs_deviation"] < 1e-9);
    assert!(!v.contains_key("dis"));

    write_rows(&p("ds.csv"), "d", &vec![vec![0.5]; 4]);
    write_rows(&p("dt.csv"), "d", &vec![vec![0.5]; 4]);
    let base = [
        "losses",
        "--source-features",
        s(&f),
        "--source-labels",
        s(&y),
        "--target-features",
        s(&f),
        "--target-logits",
        s(&z),
    ];
    let mut args = base.to_vec();
    args.extend([
        "--disc-source",
        s(&ds),
        "--disc-target",
        s(&dt),
        "--bandwidth",
        "1.0",
    ]);
    let o = udakit(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!((parse_losses(&stdout(&o))["dis"] - 2.0 * 2f64.ln()).abs() < 1e-12);

    // Label outside the logit classes, then too few rows.
    std::fs::write(p("y.csv"), "class\n0\n1\n2\n0\n").unwrap();
    assert_eq!(udakit(&base).status.code(), Some(2));
    std::fs::write(p("y.csv"), "class\n0\n1\n").unwrap();
    let o = udakit(&base);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("labels"), "{}", stderr(&o));
    std::fs::write(p("y.csv"), "class\n0\n1\n1\n0\n").unwrap();
    std::fs::write(p("z.csv"), "z0,z1\n0,0\n0,nan\n0,0\n0,0\n").unwrap();
    assert_eq!(udakit(&base).status.code(), Some(2));
}

#[test]
fn losses_oracle_agrees_on_random_tables() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let mut rng = udakit::rng::Stream::new(17);
    let mut m = |n: usize, d: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| rng.normal()).collect())
            .collect()
    };
    write_rows(&p("fs.csv"), "a,b,c", &m(12, 3));
    write_rows(&p("ft.csv"), "a,b,c", &m(9, 3));
    write_rows(&p("zt.csv"), "p,q,r,s", &m(9, 4));
    std::fs::write(p("ys.csv"), "label\n0\n1\n2\n3\n0\n1\n2\n3\n0\n1\n2\n3\n").unwrap();
    let o = udakit(&[
        "losses",
        "--source-features",
        s(&p("fs.csv")),
        "--source-labels",
        s(&p("ys.csv")),
        "--target-features",
        s(&p("ft.csv")),
        "--target-logits",
        s(&p("zt.csv")),
        "--temperature",
        "1.5",
        "--oracle",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v = parse_losses(&stdout(&o));
    assert!(v["oracle_max_abs_deviation"] < 1e-9);
    assert!(v["mmd"] > 0.0 && v["plmmd"] >= -1e-10);
}

#[test]
fn gradcheck_passes_and_negative_control_fails() {
    let o = udakit(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    let rows: Vec<&str> = out.lines().skip(1).collect();
    assert_eq!(rows.len(), 6);
    for (row, name) in rows.iter().zip(["clc", "dis", "mmd", "plmmd", "mcc", "im"]) {
        assert!(row.starts_with(name) && row.ends_with("ok"), "{row}");
    }

    let o = udakit(&["gradcheck", "--seeds", "2", "--corrupt-backward"]);
    assert_eq!(o.status.code(), Some(5));
    assert!(stderr(&o).contains("mcc (seeds 0, 1)"), "{}", stderr(&o));
}

#[test]
fn gen_data_round_trips_and_respects_the_spec() {
    let dir = tempfile::tempdir().unwrap();
    let spec = moons_spec(137, 45.0, 9);
    let out = gen(dir.path(), "a", &spec);
    let loaded = load_table(&out, &TableSchema::new(Domain::Source, Some("label"))).unwrap();
    let direct = generate(&toml::from_str::<SyntheticSpec>(&spec).unwrap()).unwrap();
    assert_eq!(loaded.len(), 137);
    assert_eq!(loaded.features(), direct.features());
    assert_eq!(loaded.labels(), direct.labels());

    let other = gen(dir.path(), "b", &moons_spec(137, 45.0, 10));
    assert_ne!(std::fs::read(&out).unwrap(), std::fs::read(&other).unwrap());

    let blobs = gen(
        dir.path(),
        "c",
        "generator = \"gaussian_blobs\"\nn = 30\nnoise = 0.5\nseed = 1\ncenters = [[0.0, 0.0, 0.0], [3.0, 3.0, 3.0], [-3.0, 0.0, 3.0]]\n",
    );
    let loaded = load_table(&blobs, &TableSchema::new(Domain::Source, Some("label"))).unwrap();
    assert_eq!(
        (loaded.len(), loaded.dim(), loaded.class_count()),
        (30, 3, 3)
    );

    let bad = dir.path().join("bad.toml");
    for text in [
        moons_spec(0, 0.0, 1),
        moons_spec(10, 0.0, 1).replace("noise = 0.1", "noise = -1.0"),
        "n = 10\n".into(),
    ] {
        std::fs::write(&bad, text).unwrap();
        let o = udakit(&["gen-data", s(&bad), s(&dir.path().join("x.csv"))]);
        assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    }
}

#[test]
fn embed_writes_centered_projection() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_run_config(dir.path(), 100, 2, false);
    let run = dir.path().join("run");
    assert!(udakit(&["train", s(&cfg), "--out", s(&run), "--quiet"])
        .status
        .success());
    let ck_path = run.join("checkpoint.json");
    let data = gen(dir.path(), "t", &moons_spec(75, 45.0, 1));
    let out = dir.path().join("embed.csv");
    let o = udakit(&[
        "embed",
        "--checkpoint",
        s(&ck_path),
        "--data",
        s(&data),
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("x,y,label"));
    let pts: Vec<[f64; 2]> = lines
        .map(|l| {
            let c: Vec<f64> = l.split(',').map(|v| v.parse().unwrap()).collect();
            [c[0], c[1]]
        })
        .collect();
    assert_eq!(pts.len(), 75);
    let n = pts.len() as f64;
    let mean = |j: usize| pts.iter().map(|p| p[j]).sum::<f64>() / n;
    assert!(mean(0).abs() < 1e-9 && mean(1).abs() < 1e-9);

    // Compare with the variance of the checkpoint's own features.
    let ck = Checkpoint::load(&ck_path).unwrap();
    let ds = load_table(&data, &TableSchema::new(Domain::Target, Some("label"))).unwrap();
    let (ds, _) = udakit::data::zscore_normalize(&ds, ck.normalization.as_ref()).unwrap();
    let f = ck.models.features(ds.features()).unwrap();
    let col_var = |j: usize| {
        let m = (0..f.rows()).map(|i| f.get2(i, j)).sum::<f64>() / n;
        (0..f.rows())
            .map(|i| (f.get2(i, j) - m).powi(2))
            .sum::<f64>()
            / n
    };
    let total: f64 = (0..f.cols()).map(col_var).sum();
    let proj: f64 = (0..2)
        .map(|j| pts.iter().map(|p| p[j].powi(2)).sum::<f64>() / n)
        .sum();
    assert!(proj <= total + 1e-9, "{proj} > {total}");

    let tiny = dir.path().join("tiny.csv");
    std::fs::write(&tiny, "x0,x1\n0.1,0.2\n0.3,0.4\n").unwrap();
    let o = udakit(&[
        "embed",
        "--checkpoint",
        s(&ck_path),
        "--data",
        s(&tiny),
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("3 rows"), "{}", stderr(&o));
}
