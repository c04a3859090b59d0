//! Experiment runner.
//!
//! Per task: reset the head, train, measure plasticity on the task's test
//! split, store the head, measure stability over the previous (up to) ten
//! tasks with their stored heads, advance the DBP counter, append a CSV row.
//! Histogram snapshots are taken right after training at configured tasks.

use std::collections::hash_map::DefaultHasher;
use std::collections::VecDeque;
use std::fs::{self, File};
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;

use crate::cbp::{Cbp, ResetEvent};
use crate::config::ExperimentConfig;
use crate::dbp::DbpSchedule;
use crate::error::{Error, Result};
use crate::loss::{argmax_rows, cross_entropy};
use crate::network::{HeadParams, Network, ParamKey, ParamSlot};
use crate::optim::{SgdConfig, SgdMomentum};
use crate::replay::{Replay, ReplayStats};
use crate::rng::rng_for;
use crate::taskstream::{batches, Dataset, Split, StreamConfig, TaskStream};
use crate::tensor::Tensor;

/// Tasks looked back on for stability.
pub const STABILITY_WINDOW: usize = 10;
const EVAL_CHUNK: usize = 100;

pub const HIST_BINS: usize = 201;
pub const HIST_RANGE: (f64, f64) = (-10.0, 10.0);

/// Format with six significant digits, `%g` style.
pub fn fmt_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        format!("{}e{}{:02}", trim_zeros(mantissa.to_string()), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// Share of correct argmax predictions of `net` with `head` on `split`. Pure.
pub fn evaluate(net: &Network, head: &HeadParams, split: &Split) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::Validation("evaluation on an empty split".into()));
    }
    let mut correct = 0usize;
    let n = split.len();
    let per: usize = split.images.shape()[1..].iter().product();
    let s = split.images.shape();
    for start in (0..n).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(n);
        let x = Tensor::from_vec(&[end - start, s[1], s[2], s[3]], split.images.data()[start * per..end * per].to_vec())?;
        let logits = net.forward_with_head(&x, head)?;
        correct += argmax_rows(&logits)
            .iter()
            .zip(&split.labels[start..end])
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(correct as f64 / n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerHistogram {
    pub layer: String,
    /// Underflow, `HIST_BINS` regular bins, overflow.
    pub counts: Vec<u64>,
    pub mean: f64,
    pub std: f64,
    /// Channels (conv) or features (linear) of the layer.
    pub units: usize,
    pub dormant_fraction: f64,
}

impl LayerHistogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Edges of count slot `i` (underflow and overflow are open-ended).
    pub fn bin_edges(i: usize) -> (f64, f64) {
        let (lo, hi) = HIST_RANGE;
        let w = (hi - lo) / HIST_BINS as f64;
        match i {
            0 => (f64::NEG_INFINITY, lo),
            i if i == HIST_BINS + 1 => (hi, f64::INFINITY),
            i => (lo + (i - 1) as f64 * w, lo + i as f64 * w),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistogramSnapshot {
    pub task: usize,
    pub layers: Vec<LayerHistogram>,
}

fn bin_index(v: f64) -> usize {
    let (lo, hi) = HIST_RANGE;
    if v < lo {
        0
    } else if v > hi {
        HIST_BINS + 1
    } else {
        let w = (hi - lo) / HIST_BINS as f64;
        1 + (((v - lo) / w) as usize).min(HIST_BINS - 1)
    }
}

/// Preactivation histograms and dormancy of every hidden layer on `x`.
pub fn snapshot_histograms(net: &Network, x: &Tensor, task: usize) -> Result<HistogramSnapshot> {
    let probe = net.probe(x)?;
    let names = net.layer_names();
    let mut layers = Vec::new();
    for (t, (pre, post)) in probe.preactivations.iter().zip(&probe.postactivations).enumerate() {
        let mut counts = vec![0u64; HIST_BINS + 2];
        let n = pre.len() as f64;
        let mut sum = 0.0;
        for &v in pre.data() {
            counts[bin_index(v)] += 1;
            sum += v;
        }
        let mean = sum / n;
        let var = pre.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let s = post.shape();
        let (b, units) = (s[0], s[1]);
        let spatial: usize = s[2..].iter().product();
        let dormant = (0..units)
            .filter(|&u| {
                (0..b).all(|i| {
                    let start = (i * units + u) * spatial;
                    post.data()[start..start + spatial].iter().all(|&v| v == 0.0)
                })
            })
            .count();
        layers.push(LayerHistogram {
            layer: names[t].clone(),
            counts,
            mean,
            std: var.sqrt(),
            units,
            dormant_fraction: dormant as f64 / units as f64,
        });
    }
    Ok(HistogramSnapshot { task, layers })
}

/// Write `hist_<task>.csv`: bin rows, then `mean`, `std`, `dormant_fraction`
/// rows per layer with the statistic's name in `bin_lo` and its value in `count`.
pub fn write_histogram(path: &Path, snap: &HistogramSnapshot) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["layer", "bin_lo", "bin_hi", "count"])?;
    for l in &snap.layers {
        for (i, c) in l.counts.iter().enumerate() {
            let (lo, hi) = LayerHistogram::bin_edges(i);
            w.write_record([l.layer.clone(), fmt_sig6(lo), fmt_sig6(hi), c.to_string()])?;
        }
    }
    for l in &snap.layers {
        for (name, v) in [("mean", l.mean), ("std", l.std), ("dormant_fraction", l.dormant_fraction)] {
            w.write_record([l.layer.clone(), name.to_string(), String::new(), fmt_sig6(v)])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskRecord {
    pub task: usize,
    pub method: String,
    pub plasticity_acc: f64,
    /// Absent for the first task.
    pub stability_acc: Option<f64>,
    /// Per-head accuracies behind `stability_acc`, oldest first.
    pub stability_parts: Vec<(usize, f64)>,
    pub wall_time_s: f64,
    /// Parameter digest unchanged across every evaluation of this task.
    pub eval_pure: bool,
    pub mean_loss_last_epoch: f64,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub records: Vec<TaskRecord>,
    pub heads: Vec<HeadParams>,
    pub histograms: Vec<HistogramSnapshot>,
    pub cbp_resets: Vec<ResetEvent>,
    /// Eligible unit-steps per hidden layer (CBP only).
    pub cbp_eligible_steps: Vec<u64>,
    pub replay: Option<ReplayStats>,
    /// Generated samples per training batch, in order (replay only).
    pub replay_counts: Vec<usize>,
    pub network: Network,
    /// Parameters and optimizer velocity at the end of the run.
    pub training_digest: u64,
    /// `training_digest` plus DBP and CBP bookkeeping.
    pub state_digest: u64,
}

/// Output files of a run.
#[derive(Debug, Clone)]
pub struct RunFiles {
    pub dir: PathBuf,
}

impl RunFiles {
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }
    pub fn timing(&self) -> PathBuf {
        self.dir.join("timing.csv")
    }
    pub fn histogram(&self, task: usize) -> PathBuf {
        self.dir.join(format!("hist_{task}.csv"))
    }
}

struct CsvSink {
    metrics: csv::Writer<File>,
    timing: Option<csv::Writer<File>>,
    paths: RunFiles,
}

impl CsvSink {
    fn open(files: RunFiles, deterministic: bool) -> Result<Self> {
        fs::create_dir_all(&files.dir).map_err(|e| Error::io(&files.dir, e))?;
        let mut metrics = csv::Writer::from_path(files.metrics())?;
        metrics.write_record(["task", "method", "plasticity_acc", "stability_acc", "wall_time_s"])?;
        let timing = if deterministic {
            let mut t = csv::Writer::from_path(files.timing())?;
            t.write_record(["task", "method", "wall_time_s"])?;
            Some(t)
        } else {
            None
        };
        Ok(CsvSink { metrics, timing, paths: files })
    }

    fn append(&mut self, r: &TaskRecord) -> Result<()> {
        let stab = r.stability_acc.map(fmt_sig6).unwrap_or_default();
        let wall = fmt_sig6(r.wall_time_s);
        let shown = if self.timing.is_some() { String::new() } else { wall.clone() };
        self.metrics.write_record([
            r.task.to_string(),
            r.method.clone(),
            fmt_sig6(r.plasticity_acc),
            stab,
            shown,
        ])?;
        self.metrics.flush().map_err(|e| Error::io(self.paths.metrics(), e))?;
        if let Some(t) = &mut self.timing {
            t.write_record([r.task.to_string(), r.method.clone(), wall])?;
            t.flush().map_err(|e| Error::io(self.paths.timing(), e))?;
        }
        Ok(())
    }
}

/// Parameters and optimizer velocity, hashed.
fn training_digest(net: &Network, opt: &SgdMomentum) -> u64 {
    let mut h = DefaultHasher::new();
    net.param_digest().hash(&mut h);
    for b in opt.velocity_bits() {
        b.hash(&mut h);
    }
    h.finish()
}

/// Everything that changes during training, hashed.
fn state_digest(net: &Network, opt: &SgdMomentum, dbp: Option<&DbpSchedule>, cbp: Option<&Cbp>) -> u64 {
    let mut h = DefaultHasher::new();
    training_digest(net, opt).hash(&mut h);
    if let Some(d) = dbp {
        d.task_index().hash(&mut h);
    }
    if let Some(c) = cbp {
        for s in c.stats() {
            s.age.hash(&mut h);
            for u in &s.utility {
                u.to_bits().hash(&mut h);
            }
            s.eligible_steps.hash(&mut h);
            s.resets.hash(&mut h);
        }
    }
    h.finish()
}

/// Run the full protocol on `dataset`. With `out` set, CSV files are written
/// there as the run progresses.
pub fn run_experiment(cfg: &ExperimentConfig, dataset: &Dataset, out: Option<&Path>) -> Result<Outcome> {
    if dataset.height != dataset.width {
        return Err(Error::Config(format!(
            "images must be square, dataset has {}x{}",
            dataset.height, dataset.width
        )));
    }
    let arch = cfg.validate_for(dataset.height)?;
    let stream = TaskStream::new(
        dataset,
        StreamConfig {
            seed: cfg.seed,
            n_tasks: cfg.n_tasks,
            epochs: cfg.epochs,
            batch_size: cfg.batch,
        },
    )?;
    let method = cfg.method_label();
    let mut net = Network::new(arch, dataset.channels, cfg.activation_kind(), &mut rng_for(cfg.seed, "init", &[]))?;
    let mut opt = SgdMomentum::new(SgdConfig {
        step_size: cfg.lr,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    });
    let mut dbp = if cfg.dbp_enabled {
        Some(DbpSchedule::new(cfg.dbp, net.num_trainable())?)
    } else {
        None
    };
    let mut cbp = if cfg.cbp_enabled {
        Some(Cbp::new(cfg.cbp.clone(), &mut net)?)
    } else {
        None
    };
    let mut cbp_rng = rng_for(cfg.seed, "cbp", &[]);
    let mut replay_rng = rng_for(cfg.seed, "replay", &[]);
    let mut replay = if cfg.replay_enabled {
        Some(Replay::new(cfg.replay, dataset.channels, dataset.height, &mut replay_rng)?)
    } else {
        None
    };
    let mut sink = match out {
        Some(dir) => Some(CsvSink::open(RunFiles { dir: dir.to_path_buf() }, cfg.deterministic)?),
        None => None,
    };
    let ones = vec![1.0; net.num_trainable()];

    let mut records = Vec::with_capacity(stream.len());
    let mut heads: Vec<HeadParams> = Vec::with_capacity(stream.len());
    let mut recent_tests: VecDeque<Split> = VecDeque::with_capacity(STABILITY_WINDOW);
    let mut histograms = Vec::new();
    let mut replay_counts = Vec::new();

    for n in 0..stream.len() {
        let started = Instant::now();
        let task = stream.task(n);
        net.reset_head(&mut rng_for(cfg.seed, "head", &[n as u64]));
        for slot in [ParamSlot::Weight, ParamSlot::Bias] {
            opt.reset(ParamKey { layer: net.head_index(), slot });
        }
        let scales = dbp.as_ref().map(DbpSchedule::factors).unwrap_or_else(|| ones.clone());

        let mut last_epoch_loss = f64::NAN;
        for epoch in 0..cfg.epochs {
            let mut loss_sum = 0.0;
            let mut n_batches = 0;
            for (bi, (x, y)) in batches(&task, epoch, cfg.seed, cfg.batch).enumerate() {
                let (x, y) = match &mut replay {
                    Some(r) => {
                        let (x, y, k) = r.mix_batch(x, y, n > 0, &mut replay_rng)?;
                        replay_counts.push(k);
                        (x, y)
                    }
                    None => (x, y),
                };
                let logits = net.forward_train(&x)?;
                let (loss, grad) = cross_entropy(&logits, &y)?;
                if !loss.is_finite() {
                    return Err(Error::NumericalFault(format!(
                        "{method}: loss {loss} at task {n}, epoch {epoch}, batch {bi}"
                    )));
                }
                net.backward(&grad)?;
                opt.step(&mut net, &scales)?;
                if let Some(c) = &mut cbp {
                    c.update_utility(&mut net)?;
                    c.reinit_step(&mut net, &mut opt, &mut cbp_rng);
                }
                if let Some(r) = &mut replay {
                    r.train(&x, &y, &mut replay_rng)?;
                }
                loss_sum += loss;
                n_batches += 1;
            }
            last_epoch_loss = loss_sum / n_batches.max(1) as f64;
        }

        let digest = net.param_digest();
        let head = net.head();
        let plasticity = evaluate(&net, &head, &task.test)?;
        if cfg.hist_tasks.contains(&n) {
            let snap = snapshot_histograms(&net, &task.test.images, n)?;
            if let Some(s) = &sink {
                write_histogram(&s.paths.histogram(n), &snap)?;
            }
            histograms.push(snap);
        }
        heads.push(head);
        let first = n.saturating_sub(STABILITY_WINDOW);
        let mut parts = Vec::new();
        for (j, test) in (first..n).zip(&recent_tests) {
            parts.push((j, evaluate(&net, &heads[j], test)?));
        }
        let stability = (!parts.is_empty()).then(|| parts.iter().map(|p| p.1).sum::<f64>() / parts.len() as f64);
        let eval_pure = net.param_digest() == digest;
        if recent_tests.len() == STABILITY_WINDOW {
            recent_tests.pop_front();
        }
        recent_tests.push_back(task.test);
        if let Some(d) = &mut dbp {
            d.advance_task();
        }
        let record = TaskRecord {
            task: n,
            method: method.clone(),
            plasticity_acc: plasticity,
            stability_acc: stability,
            stability_parts: parts,
            wall_time_s: started.elapsed().as_secs_f64(),
            eval_pure,
            mean_loss_last_epoch: last_epoch_loss,
        };
        info!(
            "{method} task {n}: plasticity {:.4}, stability {}, loss {:.4}, {:.1}s",
            record.plasticity_acc,
            record.stability_acc.map(|s| format!("{s:.4}")).unwrap_or_else(|| "-".into()),
            last_epoch_loss,
            record.wall_time_s
        );
        if let Some(s) = &mut sink {
            s.append(&record)?;
        }
        records.push(record);
    }
    let state = state_digest(&net, &opt, dbp.as_ref(), cbp.as_ref());
    let training = training_digest(&net, &opt);
    Ok(Outcome {
        records,
        heads,
        histograms,
        cbp_resets: cbp.as_ref().map(|c| c.reset_log().to_vec()).unwrap_or_default(),
        cbp_eligible_steps: cbp
            .as_ref()
            .map(|c| c.stats().iter().map(|s| s.eligible_steps).collect())
            .unwrap_or_default(),
        replay: replay.as_ref().map(Replay::stats),
        replay_counts,
        network: net,
        training_digest: training,
        state_digest: state,
    })
}
