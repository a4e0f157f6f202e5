use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::log::{LogRow, LogWriter};
use super::objective::batch_objective;
use super::optim::{adamw_step, OptimizerState};
use super::rankme::{rankme, rankme_embeddings};
use super::schedule::lr_at;
use super::PretrainConfig;
use crate::datamodel::{Dataset, MultistainCase};
use crate::encoder::{save_checkpoint, Checkpoint, EncoderParams};
use crate::error::{Error, Result};
use crate::numerics::Rng;

pub const LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const BEST_FILE: &str = "best.json";
pub const FINAL_DIR: &str = "final";
pub const LAST_GOOD_DIR: &str = "last_good";

/// Contents of `best.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestPointer {
    /// Checkpoint directory relative to the run directory.
    pub checkpoint: String,
    pub epoch: usize,
    pub step: usize,
    pub rankme: Option<f64>,
    /// True when no epoch was eligible and the final weights stand in.
    pub fallback: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_params: EncoderParams,
    /// `(epoch, rankme, params)` of the highest-rank eligible epoch.
    pub best: Option<(usize, f64, EncoderParams)>,
    pub log: Vec<LogRow>,
    pub rankme_history: Vec<(usize, f64)>,
    pub steps_per_epoch: usize,
}

impl TrainOutcome {
    /// Best weights, or the final ones when nothing was eligible.
    pub fn selected(&self) -> &EncoderParams {
        self.best.as_ref().map(|b| &b.2).unwrap_or(&self.final_params)
    }
}

struct Run<'a> {
    dir: Option<&'a Path>,
    cfg: &'a PretrainConfig,
}

impl Run<'_> {
    fn checkpoint(
        &self,
        name: &str,
        params: &EncoderParams,
        epoch: usize,
        step: usize,
        rankme: Option<f64>,
        history: &[(usize, f64)],
    ) -> Result<()> {
        let Some(dir) = self.dir else { return Ok(()) };
        let mut ckpt = Checkpoint::new(self.cfg.encoder.clone(), params.clone());
        ckpt.manifest.epoch = epoch;
        ckpt.manifest.step = step;
        ckpt.manifest.rankme = rankme;
        ckpt.manifest.rankme_history = history.to_vec();
        ckpt.manifest.extra = serde_json::to_value(self.cfg).map_err(|e| Error::json(dir, e))?;
        save_checkpoint(&ckpt, &dir.join(name))
    }

    fn point_best(&self, best: &BestPointer) -> Result<()> {
        let Some(dir) = self.dir else { return Ok(()) };
        let path = dir.join(BEST_FILE);
        let mut text = serde_json::to_string_pretty(best).map_err(|e| Error::json(&path, e))?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

fn check_inputs(dataset: &Dataset, cfg: &PretrainConfig) -> Result<()> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidDataset("no cases".into()));
    }
    if dataset.d != cfg.encoder.d_patch {
        return Err(Error::dims("train", format!("encoder d_patch={}", cfg.encoder.d_patch), format!("dataset d={}", dataset.d)));
    }
    if dataset.max_stain_index() >= cfg.encoder.n_stains {
        return Err(Error::dims(
            "train",
            format!("encoder n_stains={}", cfg.encoder.n_stains),
            format!("dataset stain index {}", dataset.max_stain_index()),
        ));
    }
    if cfg.train.loss_mode.is_cross_modal() && dataset.cases.iter().all(|c| c.others.is_empty()) {
        return Err(Error::InvalidDataset(format!(
            "loss_mode {} needs cases with a non-anchor stain",
            cfg.train.loss_mode
        )));
    }
    Ok(())
}

/// Pretrains an encoder on `dataset`.
///
/// Each epoch shuffles the cases and walks them in batches of `batch_size`
/// (the last batch may be smaller), taking one AdamW step per batch. After
/// every epoch past `rankme_skip_epochs` the RankMe of eval-mode slide
/// embeddings is computed and the weights are checkpointed when it beats
/// the best so far.
///
/// With `out_dir` set, writes `train_log.csv`, `checkpoints/epoch_NNNN/`,
/// `best.json` and `final/`. A non-finite loss or gradient stops training;
/// the weights from before the failing step go to `last_good/`.
pub fn train(dataset: &Dataset, cfg: &PretrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    check_inputs(dataset, cfg)?;
    let tc = &cfg.train;
    let run = Run { dir: out_dir, cfg };
    let mut log_writer = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOG_FILE);
            Some(LogWriter::new(fs::File::create(&path).map_err(|e| Error::io(&path, e))?)?)
        }
        None => None,
    };

    let mut master = Rng::new(tc.seed);
    let mut params = EncoderParams::init(&cfg.encoder, &mut master)?;
    let mut opt = OptimizerState::new(&params);
    let obj = cfg.objective();
    let n = dataset.len();
    let batch = tc.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(batch);

    let mut log = Vec::with_capacity(tc.max_epochs * steps_per_epoch);
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, EncoderParams)> = None;
    let mut step = 0;

    for epoch in 1..=tc.max_epochs {
        let first_row = log.len();
        let order = master.permutation(n);
        for idx in order.chunks(batch) {
            let cases: Vec<&MultistainCase> = idx.iter().map(|&i| &dataset.cases[i]).collect();
            let lr = lr_at(step, steps_per_epoch, tc);
            let mut stream = master.fork();
            // adamw_step validates every gradient block before touching the
            // weights, so on failure `params` still holds the last good state
            let result = batch_objective(&params, &cfg.encoder, &cases, &obj, &mut stream, None).and_then(|out| {
                if !out.report.total.is_finite() {
                    return Err(Error::Diverged { step });
                }
                adamw_step(&mut params, &out.grads, &mut opt, lr, tc)?;
                Ok(out)
            });
            let out = match result {
                Ok(out) => out,
                Err(err) => {
                    log::error!("step {step}: {err}");
                    if let Some(w) = log_writer.as_mut() {
                        w.write(&log[first_row..])?;
                    }
                    run.checkpoint(LAST_GOOD_DIR, &params, epoch, step, None, &history)?;
                    return Err(err);
                }
            };
            log.push(LogRow::new(step, epoch, &out.report, lr));
            step += 1;
        }

        if epoch > tc.rankme_skip_epochs {
            let emb = rankme_embeddings(&dataset.cases, &params, &cfg.encoder, &cfg.rankme)?;
            match rankme(&emb, &cfg.rankme) {
                Ok(r) => {
                    history.push((epoch, r));
                    if let Some(last) = log.last_mut() {
                        last.rankme = Some(r);
                    }
                    if best.as_ref().map_or(true, |b| r > b.1) {
                        let name = format!("{CHECKPOINT_DIR}/epoch_{epoch:04}");
                        run.checkpoint(&name, &params, epoch, step, Some(r), &history)?;
                        run.point_best(&BestPointer {
                            checkpoint: name,
                            epoch,
                            step,
                            rankme: Some(r),
                            fallback: false,
                        })?;
                        best = Some((epoch, r, params.clone()));
                    }
                }
                Err(Error::Degenerate(msg)) => log::warn!("epoch {epoch}: rankme skipped, {msg}"),
                Err(e) => return Err(e),
            }
        }
        if let Some(w) = log_writer.as_mut() {
            w.write(&log[first_row..])?;
        }
        let last = log.last().expect("at least one step per epoch");
        log::info!(
            "epoch {epoch}/{}: loss {:.6} (last step), rankme {}",
            tc.max_epochs,
            last.total,
            last.rankme.map_or("-".to_string(), |r| format!("{r:.4}"))
        );
    }

    let final_rankme = history.last().filter(|h| h.0 == tc.max_epochs).map(|h| h.1);
    run.checkpoint(FINAL_DIR, &params, tc.max_epochs, step, final_rankme, &history)?;
    if best.is_none() {
        run.point_best(&BestPointer {
            checkpoint: FINAL_DIR.to_string(),
            epoch: tc.max_epochs,
            step,
            rankme: final_rankme,
            fallback: true,
        })?;
    }
    Ok(TrainOutcome {
        final_params: params,
        best,
        log,
        rankme_history: history,
        steps_per_epoch,
    })
}

/// Resolves `best.json` in a run directory to a checkpoint directory.
pub fn best_checkpoint_dir(run_dir: &Path) -> Result<PathBuf> {
    let path = run_dir.join(BEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let best: BestPointer = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    Ok(run_dir.join(best.checkpoint))
}
