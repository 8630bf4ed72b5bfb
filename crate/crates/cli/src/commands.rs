use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use udakit::autodiff::Tensor;
use udakit::data::{
    generate, load_table, save_table, zscore_normalize, Domain, DomainDataset, SyntheticSpec,
    TableSchema, ZScoreStats,
};
use udakit::embed::pca_2d;
use udakit::trainer::{evaluate, train_with, Checkpoint, LossBreakdown, TrainConfig};
use udakit::verify::{
    library_losses, oracle_losses, run_gradsuite, LossInputs, GRADSUITE_TOLERANCE,
};
use udakit::Error;

use crate::config::{sha256_hex, Provenance, RunConfig};
use crate::error::{io_error, CliError, CliResult};
use crate::{EmbedArgs, EvalArgs, GenDataArgs, GradcheckArgs, LossesArgs, TrainArgs};

/// Deviation at or above which `losses --oracle` fails.
pub const ORACLE_TOLERANCE: f64 = 1e-9;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMINGS_FILE: &str = "timings.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

fn emit(out: &mut dyn Write, line: std::fmt::Arguments<'_>) -> CliResult<()> {
    out.write_fmt(line)
        .and_then(|()| out.write_all(b"\n"))
        .map_err(|e| CliError::input(format!("stdout: {e}")))
}

/// Written once, before the first step.
#[derive(Serialize)]
struct RunManifest<'a> {
    tool: &'static str,
    tool_version: &'static str,
    config_path: &'a Path,
    config_sha256: String,
    config: &'a RunConfig,
    source: Provenance,
    target: Provenance,
    output_dir: &'a Path,
}

/// One line of the metrics file. Wall-clock time lives in the timings file
/// so reruns produce identical metrics bytes.
#[derive(Serialize)]
struct MetricsRecord<'a> {
    epoch: usize,
    losses: &'a LossBreakdown,
    source_accuracy: f64,
    target_accuracy: Option<f64>,
}

#[derive(Serialize)]
struct TimingRecord {
    epoch: usize,
    wall_seconds: f64,
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| io_error(path, e))
}

fn json_line(w: &mut impl Write, path: &Path, value: &impl Serialize) -> udakit::Result<()> {
    let line = serde_json::to_string(value).map_err(|e| Error::io(path, e.into()))?;
    writeln!(w, "{line}")
        .and_then(|()| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Training inputs of a run configuration, normalized as configured.
pub struct Prepared {
    pub source: DomainDataset,
    /// Keeps its labels, if any, for per-epoch evaluation only.
    pub target: DomainDataset,
    pub normalization: Option<ZScoreStats>,
    pub source_provenance: Provenance,
    pub target_provenance: Provenance,
}

/// Loads both domains (relative paths against `base`), aligns their class
/// counts and applies source z-score statistics to both when enabled.
pub fn prepare_datasets(cfg: &RunConfig, base: &Path) -> CliResult<Prepared> {
    let (source, source_provenance) = cfg
        .source
        .resolve(Domain::Source, base)
        .map_err(|e| e.context("[source]"))?;
    let (target, target_provenance) = cfg
        .target
        .resolve(Domain::Target, base)
        .map_err(|e| e.context("[target]"))?;
    if source.labels().is_none() {
        return Err(CliError::input("[source] needs labels"));
    }
    if source.dim() != target.dim() {
        return Err(CliError::shape(format!(
            "source has {} feature columns, target {}",
            source.dim(),
            target.dim()
        )));
    }
    // Unlabeled target tables cannot know the class count.
    let k = source
        .class_count()
        .max(target.labels().map_or(0, |_| target.class_count()));
    let source = source.with_class_count(k)?;
    let target = target.with_class_count(k)?;
    let (source, target, normalization) = if cfg.normalize {
        let (s, stats) = zscore_normalize(&source, None)?;
        let (t, _) = zscore_normalize(&target, Some(&stats))?;
        (s, t, Some(stats))
    } else {
        (source, target, None)
    };
    Ok(Prepared {
        source,
        target,
        normalization,
        source_provenance,
        target_provenance,
    })
}

pub fn train(args: &TrainArgs, out: &mut dyn Write) -> CliResult<()> {
    let (cfg, bytes) = RunConfig::load(&args.config)?;
    let base = args.config.parent().unwrap_or(Path::new(""));
    let out_dir: PathBuf = match (&args.out, &cfg.output_dir) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => base.join(o),
        (None, None) => {
            return Err(CliError::input(format!(
                "{}: no output directory (set `output_dir` or pass --out)",
                args.config.display()
            )))
        }
    };

    let Prepared {
        source,
        target,
        normalization,
        source_provenance,
        target_provenance,
    } = prepare_datasets(&cfg, base)?;

    std::fs::create_dir_all(&out_dir).map_err(|e| io_error(&out_dir, e))?;
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME"),
        tool_version: env!("CARGO_PKG_VERSION"),
        config_path: &args.config,
        config_sha256: sha256_hex(&bytes),
        config: &cfg,
        source: source_provenance,
        target: target_provenance,
        output_dir: &out_dir,
    };
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let text =
        serde_json::to_string_pretty(&manifest).map_err(|e| CliError::input(e.to_string()))?;
    std::fs::write(&manifest_path, text + "\n").map_err(|e| io_error(&manifest_path, e))?;

    let metrics_path = out_dir.join(METRICS_FILE);
    let timings_path = out_dir.join(TIMINGS_FILE);
    let mut metrics = create(&metrics_path)?;
    let mut timings = create(&timings_path)?;
    let target_eval = target.labels().is_some().then_some(&target);
    let (models, history) =
        train_with(&cfg.train, &source, target.unlabeled(), target_eval, |m| {
            json_line(
                &mut metrics,
                &metrics_path,
                &MetricsRecord {
                    epoch: m.epoch,
                    losses: &m.losses,
                    source_accuracy: m.source_accuracy,
                    target_accuracy: m.target_accuracy,
                },
            )?;
            json_line(
                &mut timings,
                &timings_path,
                &TimingRecord {
                    epoch: m.epoch,
                    wall_seconds: m.wall_seconds,
                },
            )?;
            if !args.quiet {
                let tgt = m
                    .target_accuracy
                    .map_or(String::new(), |a| format!("  target_acc {a:.4}"));
                writeln!(
                    out,
                    "epoch {:>3}  loss {:.6}  source_acc {:.4}{tgt}",
                    m.epoch, m.losses.composite, m.source_accuracy
                )
                .map_err(|e| Error::io("<stdout>", e))?;
            }
            Ok(())
        })?;

    let ck_path = out_dir.join(CHECKPOINT_FILE);
    Checkpoint::new(cfg.train.clone(), normalization, models).save(&ck_path)?;
    if let Some(acc) = history.last().and_then(|m| m.target_accuracy) {
        emit(out, format_args!("final target accuracy {acc:.4}"))?;
    }
    emit(out, format_args!("wrote {}", out_dir.display()))
}

/// Header names of a delimited file.
fn header_of(path: &Path, delimiter: char) -> CliResult<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let first = text.lines().next().unwrap_or("");
    Ok(first
        .split(delimiter)
        .map(|h| h.trim().to_owned())
        .collect())
}

/// Loads a table for a checkpoint: features in the checkpoint's input layout,
/// labels when `label_column` exists, then the checkpoint's normalization.
fn load_for_checkpoint(
    ck: &Checkpoint,
    path: &Path,
    label_column: &str,
    delimiter: char,
) -> CliResult<DomainDataset> {
    let labeled = header_of(path, delimiter)?
        .iter()
        .any(|h| h == label_column);
    let schema = TableSchema {
        feature_columns: Vec::new(),
        label_column: labeled.then(|| label_column.to_owned()),
        delimiter,
        class_count: Some(ck.models.class_count()),
        domain: Domain::Target,
    };
    let ds = load_table(path, &schema).map_err(|e| CliError::from(e).context(path.display()))?;
    if ds.dim() != ck.models.input_dim() {
        return Err(CliError::shape(format!(
            "{}: {} feature columns, checkpoint expects {}",
            path.display(),
            ds.dim(),
            ck.models.input_dim()
        )));
    }
    match &ck.normalization {
        Some(stats) => Ok(zscore_normalize(&ds, Some(stats))?.0),
        None => Ok(ds),
    }
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Checkpoint::load(path).map_err(|e| CliError::from(e).context(path.display()))
}

pub fn eval(args: &EvalArgs, out: &mut dyn Write) -> CliResult<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let ds = load_for_checkpoint(&ck, &args.data, &args.label_column, args.delimiter)?;
    if ds.labels().is_none() {
        return Err(CliError::shape(format!(
            "{}: no `{}` column; evaluation needs labeled data",
            args.data.display(),
            args.label_column
        )));
    }
    let acc = evaluate(&ck.models, &ds)?;
    emit(out, format_args!("{acc:.4}"))
}

fn read_matrix(path: &Path, delimiter: char) -> CliResult<Tensor> {
    let mut schema = TableSchema::new(Domain::Target, None);
    schema.delimiter = delimiter;
    let ds = load_table(path, &schema).map_err(|e| CliError::from(e).context(path.display()))?;
    Ok(ds.features().clone())
}

fn read_labels(path: &Path, delimiter: char) -> CliResult<Vec<usize>> {
    let header = header_of(path, delimiter)?;
    let column = match header.as_slice() {
        [only] => only.clone(),
        _ if header.iter().any(|h| h == "label") => "label".to_owned(),
        _ => {
            return Err(CliError::input(format!(
                "{}: expected a `label` column or a single column, found {header:?}",
                path.display()
            )))
        }
    };
    let mut schema = TableSchema::new(Domain::Source, Some(&column));
    schema.delimiter = delimiter;
    let ds = load_table(path, &schema).map_err(|e| CliError::from(e).context(path.display()))?;
    Ok(ds.labels().expect("label column requested").to_vec())
}

fn read_column(path: &Path, delimiter: char, rows: usize) -> CliResult<Tensor> {
    let t = read_matrix(path, delimiter)?;
    if t.cols() != 1 || t.rows() != rows {
        return Err(CliError::input(format!(
            "{}: expected {rows} rows in one column, found {}x{}",
            path.display(),
            t.rows(),
            t.cols()
        )));
    }
    Ok(t)
}

pub fn losses(args: &LossesArgs, out: &mut dyn Write) -> CliResult<()> {
    let train = match &args.config {
        Some(p) => RunConfig::load(p)?.0.train,
        None => TrainConfig::default(),
    };
    let d = args.delimiter;
    let source_features = read_matrix(&args.source_features, d)?;
    let target_features = read_matrix(&args.target_features, d)?;
    let discriminator = match (&args.disc_source, &args.disc_target) {
        (Some(s), Some(t)) => Some((
            read_column(s, d, source_features.rows())?,
            read_column(t, d, target_features.rows())?,
        )),
        _ => None,
    };
    let mut kernel = train.kernel;
    if let Some(b) = args.bandwidth {
        kernel.fixed_bandwidth = Some(b);
    }
    let inputs = LossInputs {
        source_labels: read_labels(&args.source_labels, d)?,
        target_logits: read_matrix(&args.target_logits, d)?,
        source_features,
        target_features,
        discriminator,
        temperature: args.temperature.unwrap_or(train.temperature),
        kernel,
    };
    // Every inconsistency between the files is a schema problem here.
    let schema_error = |e: Error| match e {
        Error::NonFinite(_) => CliError::from(e),
        e => CliError::input(e.to_string()),
    };
    let lib = library_losses(&inputs).map_err(schema_error)?;
    emit(out, format_args!("mmd: {}", lib.mmd))?;
    emit(out, format_args!("plmmd: {}", lib.plmmd))?;
    emit(out, format_args!("mcc: {}", lib.mcc))?;
    emit(out, format_args!("im: {}", lib.im))?;
    if let Some(dis) = lib.dis {
        emit(out, format_args!("dis: {dis}"))?;
    }
    if args.oracle {
        let dev = lib.max_deviation(&oracle_losses(&inputs));
        emit(out, format_args!("oracle_max_abs_deviation: {dev:e}"))?;
        // A NaN deviation fails too.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(dev < ORACLE_TOLERANCE) {
            return Err(CliError::verification(format!(
                "library and oracle differ by {dev:e} (tolerance {ORACLE_TOLERANCE:e})"
            )));
        }
    }
    Ok(())
}

pub fn gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> CliResult<()> {
    if args.seeds == 0 {
        return Err(CliError::input("--seeds must be at least 1"));
    }
    let rows = run_gradsuite(args.seeds, args.corrupt_backward)?;
    emit(
        out,
        format_args!("{:<6} {:>12} {:>5}  status", "loss", "worst_rel", "seed"),
    )?;
    for r in &rows {
        let status = if r.passed() { "ok" } else { "FAIL" };
        emit(
            out,
            format_args!(
                "{:<6} {:>12.3e} {:>5}  {status}",
                r.loss.name(),
                r.worst,
                r.worst_seed
            ),
        )?;
    }
    let failing: Vec<String> = rows
        .iter()
        .filter(|r| !r.passed())
        .map(|r| {
            let seeds: Vec<String> = r.failures.iter().map(u64::to_string).collect();
            format!("{} (seeds {})", r.loss.name(), seeds.join(", "))
        })
        .collect();
    if failing.is_empty() {
        Ok(())
    } else {
        Err(CliError::verification(format!(
            "relative error reached {GRADSUITE_TOLERANCE:e} for {}",
            failing.join("; ")
        )))
    }
}

pub fn gen_data(args: &GenDataArgs, out: &mut dyn Write) -> CliResult<()> {
    let text = std::fs::read_to_string(&args.spec).map_err(|e| io_error(&args.spec, e))?;
    let spec: SyntheticSpec = toml::from_str(&text).map_err(|e| {
        CliError::input(format!(
            "{}: {}",
            args.spec.display(),
            e.to_string().trim_end()
        ))
    })?;
    let ds =
        generate(&spec).map_err(|e| CliError::input(e.to_string()).context(args.spec.display()))?;
    save_table(&ds, &args.out, ',')?;
    emit(
        out,
        format_args!("wrote {} rows to {}", ds.len(), args.out.display()),
    )
}

pub fn embed(args: &EmbedArgs, out: &mut dyn Write) -> CliResult<()> {
    let ck = load_checkpoint(&args.checkpoint)?;
    let ds = load_for_checkpoint(&ck, &args.data, &args.label_column, args.delimiter)?;
    let proj = pca_2d(&ck.models.features(ds.features())?)?;
    let mut w = create(&args.out)?;
    let write_err = |e| io_error(&args.out, e);
    let labels = ds.labels();
    writeln!(w, "{}", if labels.is_some() { "x,y,label" } else { "x,y" }).map_err(write_err)?;
    for i in 0..proj.rows() {
        match labels {
            Some(l) => writeln!(w, "{},{},{}", proj.get2(i, 0), proj.get2(i, 1), l[i]),
            None => writeln!(w, "{},{}", proj.get2(i, 0), proj.get2(i, 1)),
        }
        .map_err(write_err)?;
    }
    w.flush().map_err(write_err)?;
    emit(
        out,
        format_args!("wrote {} points to {}", proj.rows(), args.out.display()),
    )
}
