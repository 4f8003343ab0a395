use std::path::{Path, PathBuf};

use serde_json::json;
use subdistill::data::make_split;
use subdistill::model::{save_checkpoint, NetworkSpec};
use subdistill::subspace::{save_subspace, SubspaceMethod};
use subdistill::synth::run_band_experiment;
use subdistill::trainer::{
    accuracy, alpha_sweep, distill, extract_subspaces, league_table_csv, run_ablation_suite,
    train_teacher, worker_threads, Ablation, DistillConfig, Method, SuiteCell, TrainingMode,
    ALPHA_GRID,
};

use crate::config::RunConfigFile;
use crate::error::CliError;
use crate::pipeline::{load_full_dataset, parse_layers, subspace_path, timestamp, write_text, Context};
use crate::{DistillArgs, ExtractArgs};

pub fn train_teacher_cmd(cfg: &RunConfigFile) -> Result<(), CliError> {
    let section = cfg.teacher()?;
    if section.hidden.is_empty() {
        return Err(CliError::Input("[teacher] hidden widths are required for training".into()));
    }
    let full = load_full_dataset(cfg)?;
    let split = make_split(&full, cfg.split, 1.0, cfg.split_seed)?;
    let mut widths = vec![full.input_dim()];
    widths.extend(&section.hidden);
    widths.push(full.num_classes());
    let spec = NetworkSpec::relu(widths, section.training.seed);
    let outcome = train_teacher(&spec, &full.subset(&split.train), &section.training)?;
    if let Some(parent) = section.checkpoint.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    save_checkpoint(&outcome.state, &section.checkpoint)?;

    let val = accuracy(
        &outcome.state,
        &full.inputs.select_rows(&split.val),
        &full.select_labels(&split.val),
    )?;
    let summary = json!({
        "checkpoint": section.checkpoint.display().to_string(),
        "train_accuracy": outcome.train_accuracy,
        "val_accuracy": val,
        "epochs": outcome.losses.len(),
        "dataset_digest": full.source_digest,
    });
    let out = cfg.output_dir.join("teacher");
    cfg.write_resolved(&out)?;
    write_text(&out.join("teacher.json"), &serde_json::to_string_pretty(&summary).unwrap())?;
    let mut csv = String::from("epoch,cross_entropy\n");
    for (i, l) in outcome.losses.iter().enumerate() {
        csv.push_str(&format!("{},{l}\n", i + 1));
    }
    write_text(&out.join("teacher_losses.csv"), &csv)?;
    println!("{summary}");
    Ok(())
}

fn parse_method(s: &str) -> Result<SubspaceMethod, CliError> {
    match s {
        "prca" => Ok(SubspaceMethod::Prca),
        "pca" => Ok(SubspaceMethod::Pca),
        "random" => Ok(SubspaceMethod::Random),
        other => Err(CliError::Input(format!(
            "unknown subspace method '{other}' (prca, pca, random)"
        ))),
    }
}

pub fn extract_cmd(cfg: &RunConfigFile, args: &ExtractArgs) -> Result<(), CliError> {
    let ctx = Context::load(cfg)?;
    let mut config = cfg.distill.clone();
    if let Some(l) = &args.layers {
        config.layers = parse_layers(l)?;
    }
    if config.method == Method::OutputOnly {
        config.method = Method::Subdistill;
    }
    let method = parse_method(&args.method)?;
    let requests = ctx.requests(&config)?;
    let train = ctx.split.with_fraction(config.training_fraction)?.train;
    let subspaces = extract_subspaces(
        &ctx.teacher,
        &ctx.dataset.inputs.select_rows(&train),
        &ctx.subtask,
        &requests,
        method,
        config.beta,
        config.seed,
    )?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("subspaces"));
    cfg.write_resolved(&out)?;
    let mut csv = String::from("teacher_layer,k,method,beta,top_eigenvalues\n");
    for s in &subspaces {
        save_subspace(s, subspace_path(&out, s.layer_index))?;
        let eig: Vec<String> = s.eigenvalues.iter().map(|v| v.to_string()).collect();
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            s.layer_index,
            s.k,
            s.method.name(),
            s.beta_used,
            eig.join(";")
        ));
        println!(
            "{}",
            json!({
                "teacher_layer": s.layer_index,
                "k": s.k,
                "method": s.method.name(),
                "beta": s.beta_used,
                "top_eigenvalues": s.eigenvalues.iter().take(5).collect::<Vec<_>>(),
            })
        );
    }
    write_text(&out.join("subspaces.csv"), &csv)
}

fn parse_ablations(list: &[String]) -> Result<Vec<Ablation>, CliError> {
    list.iter()
        .flat_map(|s| s.split(','))
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            Ablation::from_name(s).ok_or_else(|| CliError::Input(format!("unknown ablation '{s}'")))
        })
        .collect()
}

fn apply_overrides(mut config: DistillConfig, args: &DistillArgs) -> Result<DistillConfig, CliError> {
    if let Some(m) = &args.mode {
        config.training_mode = match m.as_str() {
            "joint" => TrainingMode::Joint,
            "decoupled" => TrainingMode::Decoupled,
            other => return Err(CliError::Input(format!("unknown mode '{other}' (joint, decoupled)"))),
        };
    }
    if let Some(m) = &args.method {
        config.method = match m.as_str() {
            "subdistill" => Method::Subdistill,
            "wb_baseline" => Method::WbBaseline,
            "output_only" => Method::OutputOnly,
            other => {
                return Err(CliError::Input(format!(
                    "unknown method '{other}' (subdistill, wb_baseline, output_only)"
                )))
            }
        };
    }
    if let Some(l) = &args.layers {
        config.layers = parse_layers(l)?;
    }
    if let Some(a) = args.alpha {
        config.alpha = a;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(e) = args.epochs {
        config.epochs = e;
    }
    if let Some(f) = args.training_fraction {
        config.training_fraction = f;
    }
    if !args.ablation.is_empty() {
        config.ablations = parse_ablations(&args.ablation)?;
    }
    config.validate()?;
    Ok(config)
}

fn run_dir_name(config: &DistillConfig) -> String {
    let mode = match config.training_mode {
        TrainingMode::Joint => "joint",
        TrainingMode::Decoupled => "decoupled",
    };
    let layers: Vec<String> = config.bound_layers().iter().map(usize::to_string).collect();
    let layers = if layers.is_empty() {
        "none".to_string()
    } else {
        layers.join("_")
    };
    format!(
        "{}_{mode}_l{layers}_a{}_f{}_seed{}",
        config.label(),
        config.alpha,
        config.training_fraction,
        config.seed
    )
}

fn context_for(cfg: &RunConfigFile, config: &DistillConfig, subspaces: Option<&Path>) -> Result<Context, CliError> {
    let mut ctx = Context::load(cfg)?;
    let dir = subspaces
        .map(Path::to_path_buf)
        .or_else(|| cfg.subspaces.as_ref().map(|s| s.dir.clone()));
    if let Some(dir) = dir {
        if config.method == Method::Subdistill && !config.bound_layers().is_empty() {
            ctx.attach_subspaces(&dir, config)?;
        }
    }
    Ok(ctx)
}

pub fn distill_cmd(cfg: &RunConfigFile, args: &DistillArgs, deterministic: bool) -> Result<(), CliError> {
    let config = apply_overrides(cfg.distill.clone(), args)?;
    let ctx = context_for(cfg, &config, args.subspaces.as_deref())?;
    let mut resolved = cfg.clone();
    resolved.distill = config.clone();

    if args.alpha_sweep {
        let out = args
            .out
            .clone()
            .unwrap_or_else(|| cfg.output_dir.join("sweeps").join(run_dir_name(&config)));
        resolved.write_resolved(&out)?;
        let sweep = alpha_sweep(&ctx.task(), &config, &ALPHA_GRID, worker_threads())?;
        let mut csv = String::from("alpha,status,val_accuracy,test_accuracy,error\n");
        for (alpha, cell) in sweep.alphas.iter().zip(&sweep.cells) {
            match &cell.outcome {
                Ok(r) => {
                    r.write_dir(out.join(format!("alpha_{alpha}")), deterministic)?;
                    csv.push_str(&format!("{alpha},ok,{},{},\n", r.val_accuracy, r.test_accuracy));
                }
                Err((kind, msg)) => {
                    csv.push_str(&format!("{alpha},failed,,,{kind}: {}\n", msg.replace(',', ";")));
                }
            }
        }
        write_text(&out.join("sweep.csv"), &csv)?;
        let selected = sweep.selected().map(|r| r.val_accuracy);
        let doc = json!({
            "selected_alpha": sweep.selected_alpha,
            "val_accuracy": selected,
            "grid": sweep.alphas,
        });
        write_text(&out.join("selected.json"), &serde_json::to_string_pretty(&doc).unwrap())?;
        println!("{doc}");
        return Ok(());
    }

    let record = distill(&ctx.task(), &config)?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("runs").join(run_dir_name(&config)));
    resolved.write_resolved(&out)?;
    let summary = record.write_dir(&out, deterministic)?;
    println!(
        "{}",
        json!({
            "run_dir": out.display().to_string(),
            "label": summary.label,
            "val_accuracy": summary.val_accuracy,
            "test_accuracy": summary.test_accuracy,
            "max_orthogonality_defect": summary.max_orthogonality_defect,
        })
    );
    Ok(())
}

fn cells_csv(cells: &[SuiteCell]) -> String {
    let mut out = String::from("row,seed,status,val_accuracy,test_accuracy,error\n");
    for c in cells {
        match &c.outcome {
            Ok(r) => out.push_str(&format!(
                "{},{},ok,{},{},\n",
                c.row, c.seed, r.val_accuracy, r.test_accuracy
            )),
            Err((kind, msg)) => out.push_str(&format!(
                "{},{},failed,,,{kind}: {}\n",
                c.row,
                c.seed,
                msg.replace(',', ";")
            )),
        }
    }
    out
}

pub fn ablation_cmd(
    cfg: &RunConfigFile,
    args: &DistillArgs,
    seeds: Option<Vec<u64>>,
    deterministic: bool,
) -> Result<(), CliError> {
    let base = apply_overrides(cfg.distill.clone(), args)?;
    let ablations = parse_ablations(&cfg.suite.ablations)?;
    let seeds = seeds.unwrap_or_else(|| cfg.suite.seeds.clone());
    if seeds.is_empty() {
        return Err(CliError::Input("the suite needs at least one seed".into()));
    }
    let ctx = context_for(cfg, &base, args.subspaces.as_deref())?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join("ablation"));
    let mut resolved = cfg.clone();
    resolved.distill = base.clone();
    resolved.write_resolved(&out)?;

    let cells = run_ablation_suite(
        &ctx.task(),
        &base,
        &ablations,
        &cfg.suite.layer_subsets,
        &seeds,
        worker_threads(),
    );
    for c in &cells {
        if let Ok(r) = &c.outcome {
            r.write_dir(out.join("cells").join(format!("{}_seed{}", c.row, c.seed)), deterministic)?;
        }
    }
    write_text(&out.join("cells.csv"), &cells_csv(&cells))?;
    let league = league_table_csv(&cells);
    write_text(&out.join("league.csv"), &league)?;
    let failed = cells.iter().filter(|c| c.outcome.is_err()).count();
    println!(
        "{}",
        json!({ "cells": cells.len(), "failed": failed, "out": out.display().to_string() })
    );
    Ok(())
}

pub fn synth_cmd(cfg: &RunConfigFile, out: Option<PathBuf>, deterministic: bool) -> Result<(), CliError> {
    let out = out.unwrap_or_else(|| cfg.output_dir.join("synth"));
    cfg.write_resolved(&out)?;
    let report = run_band_experiment(&cfg.synth)?;
    report.write_dir(&out, timestamp(deterministic))?;
    let band = report.scores.iter().filter(|s| s.subdistill_band > s.wb_band).count();
    let mass = report.scores.iter().filter(|s| s.subdistill_mass > s.wb_mass).count();
    println!(
        "{}",
        json!({
            "seeds": report.scores.len(),
            "subdistill_band_wins": band,
            "subdistill_mass_wins": mass,
            "out": out.display().to_string(),
        })
    );
    Ok(())
}
