use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context, Result};
use sha2::{Digest, Sha256};

use super::{
    Cli, Command, EvalArgs, ExperimentConfig, GenDataArgs, GradcamArgs, ModelFlags, PcaArgs, ReportArgs, RunArgs,
    Split, TrainArgs,
};
use crate::checkpoint::ParamStore;
use crate::datagen::{
    augment_to_share, class_distribution, generate_parallel, holdout_extract, GenSpec, LabeledImageSet, Provenance,
    NORMAL,
};
use crate::error::Error;
use crate::evalkit::{comparison_tables, emit_report, read_report, EvalReport};
use crate::interpret::{cam_case_gallery, pca, select_feature_layer, write_gallery};
use crate::layers::{build_model, FeatureTap, Model};
use crate::trainer::{fit_split, stratified_split};

pub const MANIFEST_FILE: &str = "manifest.txt";
const CONFIG_FILE: &str = "config.txt";
const CHECKPOINT_FILE: &str = "checkpoint.pfnn";
const HISTORY_FILE: &str = "history.csv";
const LOG_FILE: &str = "train.log";

pub(super) fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Gradcam(a) => gradcam(cli, a),
        Command::Pca(a) => pca_cmd(cli, a),
        Command::Report(a) => report(cli, a),
    }
}

pub fn file_sha256(path: &Path) -> std::io::Result<String> {
    let digest = Sha256::digest(fs::read(path)?);
    Ok(digest.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    }))
}

/// `sha256  bytes  name` for every regular file in `dir` (not recursive),
/// sorted by name, skipping the manifest itself and `.log` files.
pub fn run_dir_manifest(dir: &Path) -> std::io::Result<String> {
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n != MANIFEST_FILE && !n.ends_with(".log"))
        .collect();
    names.sort();
    let mut out = String::new();
    for n in names {
        let path = dir.join(&n);
        let _ = writeln!(out, "{}  {}  {n}", file_sha256(&path)?, fs::metadata(&path)?.len());
    }
    Ok(out)
}

fn write_manifest(dir: &Path) -> Result<()> {
    let text = run_dir_manifest(dir).with_context(|| format!("listing {}", dir.display()))?;
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(())
}

fn require_out(cli: &Cli) -> Result<&Path> {
    cli.out
        .as_deref()
        .ok_or_else(|| anyhow!("--out is required for this command"))
}

fn summary(set: &LabeledImageSet) -> Result<String> {
    let dist = class_distribution(set)?;
    let parts: Vec<String> = set
        .class_names
        .iter()
        .zip(dist.counts.iter().zip(&dist.shares))
        .map(|(n, (c, s))| format!("{n} {c} ({:.1}%)", 100.0 * s))
        .collect();
    Ok(format!("{} samples: {}", set.len(), parts.join(", ")))
}

fn blind_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = match out.extension() {
        Some(ext) => format!("{stem}.blind.{}", ext.to_string_lossy()),
        None => format!("{stem}.blind"),
    };
    out.with_file_name(name)
}

fn gen_data(cli: &Cli, a: &GenDataArgs) -> Result<()> {
    let out = require_out(cli)?;
    let counts: Vec<usize> = a
        .counts
        .split(',')
        .map(|c| c.trim().parse().with_context(|| format!("bad count `{c}`")))
        .collect::<Result<_>>()?;
    let counts: [usize; 3] = counts
        .try_into()
        .map_err(|v: Vec<usize>| anyhow!("--counts needs 3 values, got {}", v.len()))?;
    let seed = cli.seed.unwrap_or(0);
    let spec = GenSpec {
        counts,
        side: a.side,
        seed,
        ..GenSpec::default()
    };
    let threads = a
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let mut set = generate_parallel(&spec, threads)?;
    eprintln!("generated {}", summary(&set)?);
    if let Some(share) = a.augment_share {
        set = augment_to_share(&set, NORMAL, share, seed)?;
        eprintln!("augmented {}", summary(&set)?);
    }
    if let Some(n) = a.holdout {
        let (blind, rest) = holdout_extract(&set, n, seed)?;
        let path = blind_path(out);
        blind
            .save(&path)
            .with_context(|| format!("writing {}", path.display()))?;
        eprintln!("blind {} -> {}", summary(&blind)?, path.display());
        set = rest;
    }
    set.save(out).with_context(|| format!("writing {}", out.display()))?;
    println!("{} -> {}", summary(&set)?, out.display());
    Ok(())
}

fn parse_pair(s: &str) -> Result<(&str, &str)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{s}`"))
}

fn experiment_config(cli: &Cli, flags: Option<&ModelFlags>) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ExperimentConfig::from_text(&text).with_context(|| format!("in {}", path.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(f) = flags {
        for pair in &f.set {
            let (k, v) = parse_pair(pair)?;
            cfg.set(k, v)?;
        }
        if let Some(s) = f.gagm {
            cfg.set("enable_gagm", s.as_str())?;
        }
        if let Some(s) = f.sevector {
            cfg.set("enable_sevector", s.as_str())?;
        }
        if let Some(l) = f.lambda_fs {
            cfg.set("lambda_fs", &l.to_string())?;
        }
        if let Some(e) = f.epochs {
            cfg.set("max_epochs", &e.to_string())?;
        }
        if let Some(n) = &f.name {
            cfg.set("name", n)?;
        }
    }
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(path: &Path, cfg: &ExperimentConfig) -> Result<LabeledImageSet> {
    let set = LabeledImageSet::load(path).with_context(|| format!("reading dataset {}", path.display()))?;
    if set.classes() != cfg.model.classes {
        bail!(
            "dataset has {} classes but the model expects {}",
            set.classes(),
            cfg.model.classes
        );
    }
    Ok(set)
}

/// Train/test partition used by every command for a given config.
fn partition(set: &LabeledImageSet, cfg: &ExperimentConfig) -> Result<(LabeledImageSet, LabeledImageSet)> {
    Ok(stratified_split(set, cfg.test_fraction, cfg.train.seed)?)
}

fn select_split(set: &LabeledImageSet, cfg: &ExperimentConfig, split: Split) -> Result<LabeledImageSet> {
    Ok(match split {
        Split::All => set.subset(&(0..set.len()).collect::<Vec<_>>(), Provenance::Split("all".into())),
        Split::Train => partition(set, cfg)?.0,
        Split::Test => partition(set, cfg)?.1,
    })
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let out = require_out(cli)?;
    let mut cfg = experiment_config(cli, Some(&a.flags))?;
    if let Some(d) = &a.data {
        cfg.data = Some(d.clone());
    }
    let data_path = cfg
        .data
        .clone()
        .ok_or_else(|| anyhow!("no dataset: pass --data or set `data`"))?;
    let data = load_data(&data_path, &cfg)?;
    let (train_part, _) = partition(&data, &cfg)?;
    let (fit_set, val_set) = stratified_split(&train_part, cfg.train.val_fraction, cfg.train.seed)?;
    let spec = build_model(&cfg.model, (data.height, data.width))?;
    let mut model = Model::new(spec, cfg.model.seed);

    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_text())?;
    let mut log = fs::File::create(out.join(LOG_FILE))?;
    let stamp = || SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    writeln!(log, "{} start {}", stamp(), cfg.model_name())?;
    eprintln!(
        "training {} on {} samples ({} validation)",
        cfg.model_name(),
        fit_set.len(),
        val_set.len()
    );
    let result = fit_split(&mut model, &fit_set, &val_set, &cfg.train, |r| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  acc {:.4}  val_loss {:.4}  val_acc {:.4}  lr {:e}",
            r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.lr
        );
        let _ = writeln!(log, "{} epoch {}", stamp(), r.epoch);
    });
    match result {
        Ok(run) => {
            fs::write(out.join(HISTORY_FILE), run.history_csv())?;
            model.params.save(out.join(CHECKPOINT_FILE))?;
            write_manifest(out)?;
            println!(
                "best epoch {} of {}{} -> {}",
                run.best_epoch,
                run.history.len(),
                if run.stopped_early { " (stopped early)" } else { "" },
                out.display()
            );
            Ok(())
        }
        Err(Error::Diverged { epoch, reason, partial }) => {
            fs::write(out.join(HISTORY_FILE), partial.history_csv())?;
            write_manifest(out)?;
            bail!(
                "training diverged at epoch {epoch}: {reason}; partial history kept in {}",
                out.display()
            )
        }
        Err(e) => Err(e.into()),
    }
}

struct LoadedRun {
    cfg: ExperimentConfig,
    model: Model,
    data: LabeledImageSet,
}

fn load_run(a: &RunArgs) -> Result<LoadedRun> {
    let cfg_path = a.run.join(CONFIG_FILE);
    let text = fs::read_to_string(&cfg_path).with_context(|| format!("reading {}", cfg_path.display()))?;
    let cfg = ExperimentConfig::from_text(&text)?;
    let data_path = a
        .data
        .clone()
        .or_else(|| cfg.data.clone())
        .ok_or_else(|| anyhow!("no dataset recorded in the run; pass --data"))?;
    let data = load_data(&data_path, &cfg)?;
    let spec = build_model(&cfg.model, (data.height, data.width))?;
    let params = ParamStore::load(a.run.join(CHECKPOINT_FILE))
        .with_context(|| format!("reading checkpoint in {}", a.run.display()))?;
    let model = Model::with_params(spec, params)?;
    Ok(LoadedRun { cfg, model, data })
}

fn evaluate(run: &LoadedRun, split: Split) -> Result<EvalReport> {
    let set = select_split(&run.data, &run.cfg, split)?;
    let inf = run.model.infer(&set.pixels, set.len())?;
    let name = match split {
        Split::Train => "train",
        Split::Test => "test",
        Split::All => "all",
    };
    Ok(EvalReport::from_probs(
        run.cfg.model_name(),
        name,
        &set.labels,
        &inf.probs,
        &set.class_names,
    )?)
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let run = load_run(&a.run)?;
    let out = cli.out.clone().unwrap_or_else(|| a.run.run.join("eval"));
    let mut splits = a.split.clone();
    splits.dedup();
    let train_report = if splits.contains(&Split::Train) && splits.len() > 1 {
        Some(evaluate(&run, Split::Train)?)
    } else {
        None
    };
    let primary = if splits.contains(&Split::Test) {
        Split::Test
    } else {
        splits[0]
    };
    let mut report = evaluate(&run, primary)?;
    if let Some(train) = &train_report {
        if primary != Split::Train {
            report.set_overfit(train);
        }
        emit_report(train, &out.join("train"))?;
    }
    emit_report(&report, &out)?;
    write_manifest(&out)?;
    println!(
        "{} {}: accuracy {:.4}  macro_f1 {:.4}  recall_min {:.4}  loss {:.4} -> {}",
        report.model,
        report.split,
        report.accuracy,
        report.macro_f1,
        report.recall_min,
        report.loss,
        out.display()
    );
    Ok(())
}

fn class_index(data: &LabeledImageSet, class: &str) -> Result<usize> {
    if let Some(i) = data.class_names.iter().position(|n| n == class) {
        return Ok(i);
    }
    match class.parse::<usize>() {
        Ok(i) if i < data.classes() => Ok(i),
        _ => bail!("unknown class `{class}` (classes: {})", data.class_names.join(", ")),
    }
}

fn gradcam(cli: &Cli, a: &GradcamArgs) -> Result<()> {
    let run = load_run(&a.run)?;
    let out = cli.out.clone().unwrap_or_else(|| a.run.run.join("gradcam"));
    let class = class_index(&run.data, &a.class)?;
    let set = select_split(&run.data, &run.cfg, a.split)?;
    let gallery = cam_case_gallery(&run.model, &set, class, a.correct, a.wrong)?;
    write_gallery(&gallery, &set, &out)?;
    write_manifest(&out)?;
    if let Some(note) = &gallery.note {
        eprintln!("note: {note}");
    }
    println!(
        "{} correct and {} misclassified {} cases -> {}",
        gallery.correct.len(),
        gallery.wrong.len(),
        set.class_names[class],
        out.display()
    );
    Ok(())
}

fn pca_cmd(cli: &Cli, a: &PcaArgs) -> Result<()> {
    let run = load_run(&a.run)?;
    let out = cli.out.clone().unwrap_or_else(|| a.run.run.join("pca"));
    let set = select_split(&run.data, &run.cfg, a.split)?;
    let (tap, selection) = select_feature_layer(&run.model, &set)?;
    let (tap, mode) = match a.layer.as_str() {
        "auto" => (tap, "auto"),
        name => {
            let t: FeatureTap = name.parse()?;
            if !run.model.spec.has_tap(t) {
                bail!("model has no `{t}` layer");
            }
            (t, "fixed")
        }
    };
    let inf = run.model.infer(&set.pixels, set.len())?;
    let (d, features) = inf.tap(tap).expect("tap presence checked");
    let mut result = pca(features, set.len(), d, a.components)?;
    result.layer = tap.name().to_owned();

    fs::create_dir_all(&out)?;
    let names = |v: &[usize]| -> Vec<String> { v.iter().map(|&c| set.class_names[c].clone()).collect() };
    fs::write(
        out.join("projections.csv"),
        result.projections_csv(&names(&set.labels), &names(&inf.predictions())),
    )?;
    fs::write(out.join("variance.csv"), result.variance_csv())?;
    fs::write(out.join("layers.csv"), selection.to_csv())?;
    fs::write(
        out.join("pca_meta.txt"),
        format!(
            "layer={}\nselection={mode}\ncriterion=cumulative explained variance of the first 3 components, first layer wins ties\nsamples={}\ncomponents={}\n",
            result.layer,
            set.len(),
            a.components
        ),
    )?;
    write_manifest(&out)?;
    let cum = result.cumulative(a.components);
    println!(
        "layer {} ({mode}): cumulative variance {:.4} over {} components -> {}",
        result.layer,
        cum.last().copied().unwrap_or(0.0),
        a.components,
        out.display()
    );
    Ok(())
}

fn report(cli: &Cli, a: &ReportArgs) -> Result<()> {
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("comparison"));
    let mut reports = Vec::new();
    for dir in &a.compare {
        let candidates = [dir.join("report.json"), dir.join("eval").join("report.json")];
        let path = candidates
            .iter()
            .find(|p| p.is_file())
            .ok_or_else(|| anyhow!("no report.json in {} (run `eval` first)", dir.display()))?;
        reports.push(read_report(path)?);
    }
    let (t1, t2, scatter) = comparison_tables(&reports);
    fs::create_dir_all(&out)?;
    fs::write(out.join("table1.csv"), &t1)?;
    fs::write(out.join("table2.csv"), t2)?;
    fs::write(out.join("scatter_pairs.csv"), scatter)?;
    write_manifest(&out)?;
    print!("{t1}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blind_file_name() {
        assert_eq!(blind_path(Path::new("x/d.mids")), Path::new("x/d.blind.mids"));
        assert_eq!(blind_path(Path::new("data")), Path::new("data.blind"));
    }
}
