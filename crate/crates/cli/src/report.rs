use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde_json::json;
use subdistill::analysis::{average_maps, lrp_attribute, pooled_patch_correlation, LrpRule, RelevanceMap};
use subdistill::model::load_checkpoint;
use subdistill::numerics::io::load_matrix;
use subdistill::svg::{kernel_panels, line_chart, scatter};
use subdistill::trainer::{mean_and_stderr, RunSummary, TrainingMode};
use subdistill::Error;

use crate::config::RunConfigFile;
use crate::error::CliError;
use crate::pipeline::{timestamp, write_text, Context};

struct Run {
    dir: PathBuf,
    summary: RunSummary,
}

/// Runs that differ only in their seed.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct GroupKey {
    label: String,
    mode: String,
    layers: String,
    fraction: String,
    alpha: String,
    epochs: usize,
}

impl GroupKey {
    fn of(s: &RunSummary) -> Self {
        let layers: Vec<String> = s.bindings.iter().map(|(l, _)| l.to_string()).collect();
        Self {
            label: s.label.clone(),
            mode: match s.config.training_mode {
                TrainingMode::Joint => "joint".into(),
                TrainingMode::Decoupled => "decoupled".into(),
            },
            layers: if layers.is_empty() {
                "none".into()
            } else {
                layers.join("_")
            },
            fraction: s.config.training_fraction.to_string(),
            alpha: if s.bindings.is_empty() {
                "0".into()
            } else {
                s.config.alpha.to_string()
            },
            epochs: s.config.epochs,
        }
    }

    fn csv_prefix(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.label, self.mode, self.layers, self.fraction, self.alpha, self.epochs
        )
    }

    fn file_stem(&self) -> String {
        format!(
            "{}_{}_l{}_f{}_a{}_e{}",
            self.label.replace('+', "-"),
            self.mode,
            self.layers,
            self.fraction,
            self.alpha,
            self.epochs
        )
    }
}

fn collect_dirs(root: &Path, runs: &mut Vec<PathBuf>, synth: &mut Vec<PathBuf>) -> Result<(), CliError> {
    if root.join("run.json").is_file() {
        runs.push(root.to_path_buf());
    }
    if root.join("kernels_teacher.sdmx").is_file() {
        synth.push(root.to_path_buf());
    }
    let mut children: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| CliError::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    children.sort();
    for c in children {
        collect_dirs(&c, runs, synth)?;
    }
    Ok(())
}

fn groups(runs: &[Run]) -> Vec<(GroupKey, Vec<&Run>)> {
    let keys: BTreeSet<GroupKey> = runs.iter().map(|r| GroupKey::of(&r.summary)).collect();
    keys.into_iter()
        .map(|k| {
            let members = runs.iter().filter(|r| GroupKey::of(&r.summary) == k).collect();
            (k, members)
        })
        .collect()
}

fn stats(members: &[&Run], f: impl Fn(&RunSummary) -> f64) -> (f64, f64) {
    mean_and_stderr(&members.iter().map(|r| f(&r.summary)).collect::<Vec<_>>())
}

fn summary_csv(groups: &[(GroupKey, Vec<&Run>)]) -> String {
    let mut out = String::from(
        "label,mode,layers,training_fraction,alpha,epochs,runs,val_accuracy_mean,val_accuracy_stderr,test_accuracy_mean,test_accuracy_stderr,largest_stderr\n",
    );
    for (k, members) in groups {
        let (vm, vs) = stats(members, |s| s.val_accuracy);
        let (tm, ts) = stats(members, |s| s.test_accuracy);
        out.push_str(&format!(
            "{},{},{vm},{vs},{tm},{ts},{}\n",
            k.csv_prefix(),
            members.len(),
            vs.max(ts)
        ));
    }
    out
}

fn runs_csv(runs: &[Run], root: &Path) -> String {
    let mut out = String::from(
        "dir,label,mode,layers,training_fraction,alpha,epochs,seed,train_accuracy,val_accuracy,test_accuracy,max_orthogonality_defect\n",
    );
    for r in runs {
        let s = &r.summary;
        let dir = r.dir.strip_prefix(root).unwrap_or(&r.dir);
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            dir.display(),
            GroupKey::of(s).csv_prefix(),
            s.config.seed,
            s.train_accuracy,
            s.val_accuracy,
            s.test_accuracy,
            s.max_orthogonality_defect
        ));
    }
    out
}

/// Test accuracy over the values of one key field, one series per remaining fields.
fn accuracy_chart(
    groups: &[(GroupKey, Vec<&Run>)],
    title: &str,
    x: impl Fn(&GroupKey) -> String,
    series_name: impl Fn(&GroupKey) -> String,
    order: impl Fn(&String) -> (usize, String),
    ts: Option<String>,
) -> String {
    let mut categories: Vec<String> = groups.iter().map(|(k, _)| x(k)).collect::<BTreeSet<_>>().into_iter().collect();
    categories.sort_by_key(|c| order(c));
    let names: BTreeSet<String> = groups.iter().map(|(k, _)| series_name(k)).collect();
    let series: Vec<(String, Vec<f64>, Vec<f64>)> = names
        .into_iter()
        .map(|name| {
            let mut means = vec![f64::NAN; categories.len()];
            let mut errs = vec![0.0; categories.len()];
            for (k, members) in groups.iter().filter(|(k, _)| series_name(k) == name) {
                let i = categories.iter().position(|c| *c == x(k)).unwrap();
                let (m, e) = stats(members, |s| s.test_accuracy);
                means[i] = m;
                errs[i] = e;
            }
            (name, means, errs)
        })
        .collect();
    line_chart(title, &categories, &series, "test accuracy", ts)
}

fn render_synth(dir: &Path, out: &Path, index: usize, ts: Option<String>) -> Result<(), CliError> {
    let teacher = load_matrix(dir.join("kernels_teacher.sdmx"))?;
    let sd = load_matrix(dir.join("kernels_subdistill.sdmx"))?;
    let wb = load_matrix(dir.join("kernels_wb.sdmx"))?;
    if sd.rows() != teacher.rows() || wb.rows() != teacher.rows() {
        return Err(CliError::Aggregation(format!(
            "{}: kernel matrices differ in size",
            dir.display()
        )));
    }
    // The relevant band is the middle third of the curve.
    let n = teacher.rows();
    let svg = kernel_panels(
        &[("teacher", &teacher), ("subdistill", &sd), ("wb baseline", &wb)],
        Some(n / 3..2 * n / 3),
        ts,
    );
    write_text(&out.join(format!("kernels_{index}.svg")), &svg)
}

fn attribution(
    cfg: &RunConfigFile,
    groups: &[(GroupKey, Vec<&Run>)],
    digest: Option<&str>,
    out: &Path,
    ts: Option<String>,
) -> Result<(), CliError> {
    let ctx = Context::load(cfg)?;
    if let Some(d) = digest {
        if d != ctx.dataset.source_digest {
            return Err(CliError::Aggregation(
                "runs were trained on a different dataset than the configured one".into(),
            ));
        }
    }
    let grid = ctx.dataset.image_shape.ok_or_else(|| {
        CliError::Input("attribution needs image data with a known (height, width)".into())
    })?;
    let rows: Vec<usize> = ctx.split.test.iter().copied().take(cfg.analysis.samples).collect();
    if rows.is_empty() {
        return Err(CliError::Input("no test rows to attribute".into()));
    }
    let teacher_rules = LrpRule::composite(ctx.teacher.depth());
    let teacher_maps: Vec<RelevanceMap> = rows
        .iter()
        .map(|&i| {
            let target = ctx.subtask.class_ids[ctx.dataset.labels[i]];
            lrp_attribute(&ctx.teacher, ctx.dataset.inputs.row(i), target, &teacher_rules)
        })
        .collect::<Result<_, _>>()?;

    let mut csv = String::from("label,mode,layers,training_fraction,alpha,epochs,runs,samples,patch,pearson\n");
    for (k, members) in groups {
        let students = members
            .iter()
            .map(|r| load_checkpoint(r.dir.join(&r.summary.student_checkpoint)))
            .collect::<Result<Vec<_>, _>>()?;
        let rules = LrpRule::composite(students[0].depth());
        let mut student_maps = Vec::with_capacity(rows.len());
        for &i in &rows {
            let per_seed = students
                .iter()
                .map(|s| lrp_attribute(s, ctx.dataset.inputs.row(i), ctx.dataset.labels[i], &rules))
                .collect::<Result<Vec<_>, _>>()?;
            student_maps.push(average_maps(&per_seed)?);
        }
        let pairs: Vec<(&RelevanceMap, &RelevanceMap)> = teacher_maps.iter().zip(&student_maps).collect();
        let corr = match pooled_patch_correlation(&pairs, grid, cfg.analysis.patch) {
            Ok(c) => c,
            // A collapsed student attributes nothing; its correlation is undefined.
            Err(Error::DegenerateInput(_)) => {
                csv.push_str(&format!(
                    "{},{},{},{},\n",
                    k.csv_prefix(),
                    members.len(),
                    rows.len(),
                    cfg.analysis.patch
                ));
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            k.csv_prefix(),
            members.len(),
            rows.len(),
            cfg.analysis.patch,
            corr.pearson
        ));
        let svg = scatter(
            &corr.points,
            &format!("patch relevance, {}", k.file_stem()),
            ("teacher", "student"),
            &format!("r = {:.3}", corr.pearson),
            ts.clone(),
        );
        write_text(&out.join(format!("attribution_{}.svg", k.file_stem())), &svg)?;
    }
    write_text(&out.join("attribution.csv"), &csv)
}

pub fn report_cmd(
    inputs: &[PathBuf],
    out: &Path,
    config: Option<&Path>,
    deterministic: bool,
) -> Result<(), CliError> {
    let mut run_dirs = Vec::new();
    let mut synth_dirs = Vec::new();
    for root in inputs {
        if !root.is_dir() {
            return Err(CliError::input_path(root, "input directory not found"));
        }
        collect_dirs(root, &mut run_dirs, &mut synth_dirs)?;
    }
    if run_dirs.is_empty() && synth_dirs.is_empty() {
        return Err(CliError::Input(
            "no run directories (run.json) or synthetic reports found in the inputs".into(),
        ));
    }
    let runs = run_dirs
        .into_iter()
        .map(|dir| match RunSummary::load(&dir) {
            Ok(summary) => Ok(Run { dir, summary }),
            Err(e) => Err(CliError::Aggregation(format!("cannot aggregate: {e}"))),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let digests: BTreeSet<&str> = runs.iter().map(|r| r.summary.dataset_digest.as_str()).collect();
    if digests.len() > 1 {
        return Err(CliError::Aggregation(format!(
            "runs come from {} different datasets",
            digests.len()
        )));
    }
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let ts = timestamp(deterministic);
    let root = inputs.first().map(PathBuf::as_path).unwrap_or(out);

    let grouped = groups(&runs);
    if !runs.is_empty() {
        write_text(&out.join("summary.csv"), &summary_csv(&grouped))?;
        write_text(&out.join("runs.csv"), &runs_csv(&runs, root))?;
        let layers_svg = accuracy_chart(
            &grouped,
            "test accuracy by distilled layers",
            |k| k.layers.clone(),
            |k| format!("{} {} f={} a={}", k.label, k.mode, k.fraction, k.alpha),
            |c| (if c == "none" { 0 } else { c.split('_').count() }, c.clone()),
            ts.clone(),
        );
        write_text(&out.join("accuracy_vs_layers.svg"), &layers_svg)?;
        let fraction_svg = accuracy_chart(
            &grouped,
            "test accuracy by training fraction",
            |k| k.fraction.clone(),
            |k| format!("{} {} l={} a={}", k.label, k.mode, k.layers, k.alpha),
            |c| ((c.parse::<f64>().unwrap_or(0.0) * 1e6) as usize, c.clone()),
            ts.clone(),
        );
        write_text(&out.join("accuracy_vs_fraction.svg"), &fraction_svg)?;
    }
    for (i, dir) in synth_dirs.iter().enumerate() {
        render_synth(dir, out, i, ts.clone())?;
    }
    if let Some(path) = config {
        if runs.is_empty() {
            return Err(CliError::Input("attribution needs at least one run directory".into()));
        }
        let cfg = RunConfigFile::load(path)?;
        attribution(&cfg, &grouped, digests.iter().next().copied(), out, ts)?;
    }
    println!(
        "{}",
        json!({
            "runs": runs.len(),
            "groups": grouped.len(),
            "synthetic_reports": synth_dirs.len(),
            "out": out.display().to_string(),
        })
    );
    Ok(())
}
