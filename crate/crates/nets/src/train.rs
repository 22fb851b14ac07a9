//! Mini-batch SGD training with logging, checkpointing and resume.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use intrinsic_autodiff::{sgd_step, Checkpoint, Graph, LrSchedule, Mode, RngState, Sgd};
use intrinsic_core::rng::stream;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::data::{Augmentation, Padding, TrainSample};
use crate::losses::{loss_cl, loss_imf};
use crate::model::{Architecture, Model, ModelSpec, CHECKPOINT_FILE, LOG_FILE, MODEL_FILE};
use crate::{Error, Result};

/// Sample-weighted mean losses of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: u64,
    pub step: u64,
    pub lr: f64,
    pub loss_cl: f64,
    pub loss_imf: f64,
    pub loss_total: f64,
}

impl EpochRecord {
    pub fn line(&self) -> String {
        format!(
            "epoch={} step={} lr={:.9e} loss_cl={:.9e} loss_imf={:.9e} loss_total={:.9e}",
            self.epoch, self.step, self.lr, self.loss_cl, self.loss_imf, self.loss_total
        )
    }

    pub fn parse(line: &str) -> Option<Self> {
        let mut rec = EpochRecord {
            epoch: 0,
            step: 0,
            lr: 0.0,
            loss_cl: 0.0,
            loss_imf: 0.0,
            loss_total: 0.0,
        };
        let mut seen = 0;
        for field in line.split_whitespace() {
            let (k, v) = field.split_once('=')?;
            match k {
                "epoch" => rec.epoch = v.parse().ok()?,
                "step" => rec.step = v.parse().ok()?,
                "lr" => rec.lr = v.parse().ok()?,
                "loss_cl" => rec.loss_cl = v.parse().ok()?,
                "loss_imf" => rec.loss_imf = v.parse().ok()?,
                "loss_total" => rec.loss_total = v.parse().ok()?,
                _ => return None,
            }
            seen += 1;
        }
        (seen == 6).then_some(rec)
    }
}

/// Losses over a sample set.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossSums {
    pub loss_cl: f64,
    pub loss_imf: f64,
    pub loss_total: f64,
}

/// Header comments plus one record per epoch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub header: Vec<String>,
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for h in &self.header {
            let _ = writeln!(out, "# {h}");
        }
        for r in &self.records {
            let _ = writeln!(out, "{}", r.line());
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut log = TrainLog::default();
        for (i, line) in text.lines().enumerate() {
            if let Some(h) = line.strip_prefix("# ") {
                log.header.push(h.to_string());
            } else if !line.trim().is_empty() {
                let rec = EpochRecord::parse(line)
                    .ok_or_else(|| Error::format(path, format!("line {}: malformed log record", i + 1)))?;
                log.records.push(rec);
            }
        }
        Ok(log)
    }

    pub fn initial(&self) -> Option<LossSums> {
        let line = self.header.iter().find_map(|h| h.strip_prefix("initial "))?;
        let rec = EpochRecord::parse(&format!("epoch=0 step=0 lr=0 {line}"))?;
        Some(LossSums {
            loss_cl: rec.loss_cl,
            loss_imf: rec.loss_imf,
            loss_total: rec.loss_total,
        })
    }
}

/// Drives training of one model on an in-memory dataset.
pub struct Trainer {
    pub spec: ModelSpec,
    pub model: Model,
    pub log: TrainLog,
    data: Vec<TrainSample>,
    shuffle: ChaCha8Rng,
    epoch: u64,
    step: u64,
    out_dir: Option<PathBuf>,
}

impl Trainer {
    /// Pads samples to the model's size multiple and initializes weights.
    /// A stage-2 model must already carry its stage-1 network unless it runs
    /// on ground-truth gradients.
    pub fn new(spec: ModelSpec, model: Model, samples: Vec<TrainSample>) -> Result<Self> {
        spec.validate()?;
        if samples.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let (h, w, _) = samples[0].image.shape();
        if samples.iter().any(|s| s.image.shape() != (h, w, 3)) {
            return Err(Error::Config("training samples must share one size".into()));
        }
        if let Model::Stage2 {
            stage1: None,
            gt_gradients: false,
            ..
        } = &model
        {
            return Err(Error::Usage(
                "retinet-s2 training needs a trained stage-1 model or ground-truth gradients".into(),
            ));
        }
        let pad = Padding::for_size(h, w, spec.arch.size_multiple());
        let data: Vec<TrainSample> = samples.into_iter().map(|s| s.map(|img| pad.apply(img))).collect();
        let mut log = TrainLog::default();
        log.header.push(format!(
            "model={} samples={} size={h}x{w} batch={} epochs={} seed={} imf={}",
            spec.arch.kind(),
            data.len(),
            spec.train.batch_size,
            spec.train.epochs,
            spec.train.seed,
            if spec.arch.imf_enabled() { "on" } else { "off" },
        ));
        let shuffle = stream(spec.train.seed, "data", &[]);
        let mut t = Trainer {
            spec,
            model,
            log,
            data,
            shuffle,
            epoch: 0,
            step: 0,
            out_dir: None,
        };
        let init = t.evaluate()?;
        t.log.header.push(format!(
            "initial loss_cl={:.9e} loss_imf={:.9e} loss_total={:.9e}",
            init.loss_cl, init.loss_imf, init.loss_total
        ));
        Ok(t)
    }

    /// Writes `model.json`, the checkpoint and the log into `dir` after
    /// every epoch (and once before the first).
    pub fn with_output(mut self, dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(MODEL_FILE);
        fs::write(&path, self.spec.to_json()).map_err(|e| Error::io(&path, e))?;
        self.out_dir = Some(dir);
        Ok(self)
    }

    /// Continues from the checkpoint and log in `dir`; records after the
    /// checkpoint's epoch are discarded.
    pub fn resume(mut self, dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let ckpt = Checkpoint::load(dir.join(CHECKPOINT_FILE))?;
        let log_path = dir.join(LOG_FILE);
        let text = fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?;
        let mut log = TrainLog::parse(&text, &log_path)?;
        log.records.retain(|r| r.epoch <= ckpt.epoch);
        self.model.restore(&ckpt, true)?;
        self.shuffle = ckpt.rng.restore();
        self.epoch = ckpt.epoch;
        self.step = ckpt.step;
        self.log = log;
        Ok(self)
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    fn batches_per_epoch(&self) -> usize {
        self.data.len().div_ceil(self.spec.train.batch_size)
    }

    fn schedule(&self) -> Result<LrSchedule> {
        let t = &self.spec.train;
        let total = (t.epochs * self.batches_per_epoch()).max(1) as u64;
        Ok(LrSchedule::new(t.lr0, t.lr_end, total, t.lr_power)?)
    }

    /// Losses of the current weights in eval mode, without augmentation.
    pub fn evaluate(&mut self) -> Result<LossSums> {
        let mut sums = LossSums::default();
        let bs = self.spec.train.batch_size;
        for chunk in self.data.chunks(bs) {
            let refs: Vec<&TrainSample> = chunk.iter().collect();
            let batch = self.model.prepare(&refs)?;
            let mut g = Graph::new();
            let bound = self.model.bind(&mut g, false);
            let (l, _) = batch_losses(&mut self.model, &self.spec.arch, &mut g, &bound, batch, Mode::Eval)?;
            let n = chunk.len() as f64;
            sums.loss_cl += l.loss_cl * n;
            sums.loss_imf += l.loss_imf * n;
            sums.loss_total += l.loss_total * n;
        }
        let n = self.data.len() as f64;
        Ok(LossSums {
            loss_cl: sums.loss_cl / n,
            loss_imf: sums.loss_imf / n,
            loss_total: sums.loss_total / n,
        })
    }

    /// Runs the remaining epochs up to `spec.train.epochs`.
    pub fn run(&mut self) -> Result<&TrainLog> {
        self.run_until(self.spec.train.epochs as u64)
    }

    /// Trains up to `epoch` (capped at `spec.train.epochs`).
    pub fn run_until(&mut self, epoch: u64) -> Result<&TrainLog> {
        let last = epoch.min(self.spec.train.epochs as u64);
        self.save()?;
        while self.epoch < last {
            self.train_epoch()?;
            self.save()?;
        }
        Ok(&self.log)
    }

    fn train_epoch(&mut self) -> Result<()> {
        let epoch = self.epoch + 1;
        let schedule = self.schedule()?;
        let t = self.spec.train.clone();
        let shift = t.shift_for_height(self.data[0].image.height());
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut self.shuffle);
        let mut sums = LossSums::default();
        let mut lr = 0.0;
        for (b, idx) in order.chunks(t.batch_size).enumerate() {
            let augmented: Vec<TrainSample> = idx
                .iter()
                .map(|&i| {
                    let aug = if t.augment {
                        Augmentation::draw(&mut stream(t.seed, "augment", &[epoch, i as u64]), shift)
                    } else {
                        Augmentation::IDENTITY
                    };
                    self.data[i].map(|img| aug.apply(img))
                })
                .collect();
            let refs: Vec<&TrainSample> = augmented.iter().collect();
            let diverged = |what: String| {
                Error::Diverged(format!("{what} at epoch {epoch}, batch {} (samples {idx:?})", b + 1))
            };
            let batch = self.model.prepare(&refs)?;
            let mut g = Graph::new();
            let bound = self.model.bind(&mut g, true);
            let (l, total) = match batch_losses(&mut self.model, &self.spec.arch, &mut g, &bound, batch, Mode::Train) {
                Err(Error::Engine(intrinsic_autodiff::Error::NonFinite(m))) => return Err(diverged(m)),
                other => other?,
            };
            if !(l.loss_total.is_finite() && l.loss_cl.is_finite() && l.loss_imf.is_finite()) {
                return Err(diverged(format!("non-finite loss {l:?}")));
            }
            g.backward(total)?;
            self.model.store_mut().collect_grads(&mut g, &bound);
            lr = schedule.lr(self.step);
            sgd_step(
                &mut self.model.store_mut().params,
                Sgd {
                    lr,
                    momentum: t.momentum,
                    weight_decay: t.weight_decay,
                },
            )?;
            if self.model.store().params.iter().any(|p| !p.value.is_finite()) {
                return Err(diverged("non-finite weights".into()));
            }
            self.step += 1;
            let n = idx.len() as f64;
            sums.loss_cl += l.loss_cl * n;
            sums.loss_imf += l.loss_imf * n;
            sums.loss_total += l.loss_total * n;
        }
        let n = self.data.len() as f64;
        let rec = EpochRecord {
            epoch,
            step: self.step,
            lr,
            loss_cl: sums.loss_cl / n,
            loss_imf: sums.loss_imf / n,
            loss_total: sums.loss_total / n,
        };
        log::info!("{}", rec.line());
        self.log.records.push(rec);
        self.epoch = epoch;
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = self.model.checkpoint();
        c.epoch = self.epoch;
        c.step = self.step;
        c.rng = RngState::capture(&self.shuffle);
        c
    }

    fn save(&self) -> Result<()> {
        let Some(dir) = &self.out_dir else {
            return Ok(());
        };
        self.checkpoint().save(dir.join(CHECKPOINT_FILE))?;
        let path = dir.join(LOG_FILE);
        fs::write(&path, self.log.render()).map_err(|e| Error::io(&path, e))
    }
}

fn batch_losses(
    model: &mut Model,
    arch: &Architecture,
    g: &mut Graph<f32>,
    bound: &crate::layers::Bound,
    batch: crate::model::PreparedBatch,
    mode: Mode,
) -> Result<(LossSums, intrinsic_autodiff::Var)> {
    let w = arch.loss_weights();
    let x = g.input(batch.input);
    let image = g.input(batch.image);
    let r = g.input(batch.target_r);
    let s = g.input(batch.target_s);
    let (r_hat, s_hat) = model.forward(g, bound, x, mode)?;
    let cl = loss_cl(g, r_hat, r, s_hat, s, &w)?;
    let (imf_value, total) = if matches!(model, Model::Stage1 { .. }) {
        (0.0, cl)
    } else {
        let imf = loss_imf(g, r_hat, s_hat, image, w.gamma_imf)?;
        let v = g.value(imf).item() as f64;
        (v, if arch.imf_enabled() { g.add(cl, imf)? } else { cl })
    };
    let sums = LossSums {
        loss_cl: g.value(cl).item() as f64,
        loss_imf: imf_value,
        loss_total: g.value(total).item() as f64,
    };
    Ok((sums, total))
}
