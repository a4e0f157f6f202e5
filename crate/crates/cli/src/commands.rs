use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use stainalign::datamodel::{load_bundle, save_bundle, synth_generate};
use stainalign::encoder::{encode_slide, load_checkpoint, Mode};
use stainalign::eval::{few_shot, summarize, survival_cv, write_metrics_csv, write_summary_json, MetricRow, SurvivalRecord};
use stainalign::trainer::{best_checkpoint_dir, gradcheck, gradcheck_encoder, train, GradcheckConfig, BEST_FILE};
use stainalign::{Error, LossMode, Matrix, Rng};

use crate::config::RunConfig;
use crate::failure::{CliResult, Failure, EXIT_DIMENSION, EXIT_FAILURE};
use crate::tables::{
    encode_classes, read_embeddings, read_labels, write_attention, write_embeddings, write_labels, ATTENTION_FILE,
    EMBEDDINGS_FILE, LABELS_FILE,
};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const GRADCHECK_FILE: &str = "gradcheck.json";

pub fn synth(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let dataset = synth_generate(&cfg.synthetic)?;
    save_bundle(&dataset, out)?;
    cfg.echo(out)?;
    println!("wrote {} cases over {} stains to {}", dataset.len(), dataset.stains.len(), out.display());
    Ok(())
}

pub fn pretrain(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let dataset = load_bundle(&cfg.input("dataset", &cfg.paths.dataset)?)?;
    let pcfg = cfg.pretrain();
    pcfg.validate()?;
    cfg.echo(out)?;
    let outcome = train(&dataset, &pcfg, Some(out))?;
    match &outcome.best {
        Some((epoch, r, _)) => println!("best checkpoint: epoch {epoch}, rankme {r:.4}"),
        None => println!("no epoch was eligible for selection; {BEST_FILE} points at the final weights"),
    }
    println!("{} steps logged to {}", outcome.log.len(), out.display());
    Ok(())
}

fn checkpoint_dir(path: PathBuf) -> CliResult<PathBuf> {
    if path.join(BEST_FILE).exists() {
        Ok(best_checkpoint_dir(&path)?)
    } else {
        Ok(path)
    }
}

pub fn embed(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let ckpt = load_checkpoint(&checkpoint_dir(cfg.input("checkpoint", &cfg.paths.checkpoint)?)?)?;
    let dataset = load_bundle(&cfg.input("dataset", &cfg.paths.dataset)?)?;
    let enc = &ckpt.manifest.encoder;
    if dataset.d != enc.d_patch {
        return Err(Failure::new(
            EXIT_DIMENSION,
            format!("bundle patch width {} does not match checkpoint d_patch {}", dataset.d, enc.d_patch),
        ));
    }
    if dataset.max_stain_index() >= enc.n_stains {
        return Err(Failure::new(
            EXIT_DIMENSION,
            format!("bundle stain index {} exceeds checkpoint n_stains {}", dataset.max_stain_index(), enc.n_stains),
        ));
    }
    cfg.echo(out)?;
    let per_case = dataset
        .cases
        .par_iter()
        .map(|case| {
            case.bags()
                .map(|bag| encode_slide(&case.case_id, bag, &ckpt.params, enc, Mode::Eval))
                .collect::<stainalign::Result<Vec<_>>>()
        })
        .collect::<stainalign::Result<Vec<_>>>()?;
    let (embeddings, attention): (Vec<_>, Vec<_>) = per_case.into_iter().flatten().unzip();
    write_embeddings(&out.join(EMBEDDINGS_FILE), &embeddings)?;
    if cfg.embed.attention {
        write_attention(&out.join(ATTENTION_FILE), &attention)?;
    }
    write_labels(&out.join(LABELS_FILE), &dataset)?;
    println!("wrote {} slide embeddings of width {} to {}", embeddings.len(), enc.d_out, out.display());
    Ok(())
}

pub fn eval(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let ec = &cfg.eval;
    let rows = read_embeddings(&cfg.input("embeddings", &cfg.paths.embeddings)?)?;
    let table = read_labels(&cfg.input("labels", &cfg.paths.labels)?)?;
    let stain = match (&ec.stain, rows.first()) {
        (Some(s), _) => s.clone(),
        (None, Some(r)) => r.stain.clone(),
        (None, None) => return Err(Failure::data("embedding file has no rows")),
    };
    let mut cases: BTreeMap<&str, &[f64]> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.stain == stain) {
        if cases.insert(&r.case_id, &r.vector).is_some() {
            return Err(Failure::data(format!("case {} has two {stain} embeddings", r.case_id)));
        }
    }
    if cases.is_empty() {
        return Err(Error::UnknownStain(stain).into());
    }
    if let Some(id) = cases.keys().find(|id| !table.labels.contains_key(**id)) {
        return Err(Failure::data(format!("case {id} has an embedding but no row in the label file")));
    }
    let tasks = if ec.tasks.is_empty() { table.tasks.clone() } else { ec.tasks.clone() };
    if tasks.is_empty() && !ec.survival {
        return Err(Failure::data("no label columns to evaluate"));
    }
    cfg.echo(out)?;

    let matrix = |ids: &[&str]| Matrix::from_rows(&ids.iter().map(|id| cases[id]).collect::<Vec<_>>());
    let mut results: Vec<MetricRow> = Vec::new();
    for task in &tasks {
        let col = table
            .tasks
            .iter()
            .position(|t| t == task)
            .ok_or_else(|| Failure::data(format!("label file has no column {task}")))?;
        let labelled: Vec<(&str, &str)> = cases
            .keys()
            .filter_map(|id| table.labels[*id][col].as_deref().map(|v| (*id, v)))
            .collect();
        let ids: Vec<&str> = labelled.iter().map(|p| p.0).collect();
        let classes = encode_classes(&labelled.iter().map(|p| p.1).collect::<Vec<_>>());
        let x = matrix(&ids)?;
        let before = results.len();
        for &k in &ec.ks {
            match few_shot(task, &x, &classes, &ec.protocol(k), &ec.probe) {
                Ok(rows) => results.extend(rows),
                Err(e @ Error::InsufficientClass { .. }) => log::warn!("{task}, k={k}: skipped, {e}"),
                Err(e) => return Err(e.into()),
            }
        }
        if results.len() == before {
            return Err(Failure::data(format!("{task}: no k in {:?} fits the class sizes", ec.ks)));
        }
    }
    if ec.survival {
        let records: Vec<SurvivalRecord> = cases
            .iter()
            .filter_map(|(id, v)| {
                table.survival.get(*id).map(|&(time, event)| SurvivalRecord { embedding: v.to_vec(), time, event })
            })
            .collect();
        if records.is_empty() {
            return Err(Failure::data("survival requested but the label file has no time/event values"));
        }
        results.extend(survival_cv("survival", &records, None, &ec.survival_protocol)?);
    }

    write_metrics_csv(&results, &out.join(METRICS_FILE))?;
    let summary = summarize(&results);
    write_summary_json(&summary, &out.join(SUMMARY_FILE))?;
    for s in &summary {
        let k = s.k.map_or("-".to_string(), |k| k.to_string());
        println!("{:<12} k={:<3} {:<14} {:.4} ± {:.4} (n={})", s.task, k, s.metric, s.mean, s.std, s.n);
    }
    Ok(())
}

pub fn gradcheck_all(cfg: &RunConfig, out: Option<&Path>, flip_sign: bool) -> CliResult<bool> {
    let gc = GradcheckConfig { flip_sign, ..Default::default() };
    let enc = gradcheck_encoder();
    let mut reports = Vec::new();
    for mode in LossMode::ALL {
        let r = gradcheck(&enc, mode, &gc, &mut Rng::new(cfg.train.seed))?;
        println!(
            "{:<18} params={:<4} max_rel_error={:.3e} worst={:<22} {}",
            mode.as_str(),
            r.n_params,
            r.max_rel_error,
            r.worst,
            if r.passed { "PASS" } else { "FAIL" }
        );
        reports.push(r);
    }
    if let Some(dir) = out {
        cfg.echo(dir)?;
        let path = dir.join(GRADCHECK_FILE);
        let mut text = serde_json::to_string_pretty(&reports).expect("reports serialize");
        text.push('\n');
        fs::write(&path, text).map_err(|e| Failure::new(EXIT_FAILURE, format!("{}: {e}", path.display())))?;
    }
    Ok(reports.iter().all(|r| r.passed))
}
