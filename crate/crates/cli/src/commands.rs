use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rcm_core::analysis::{capture_task_gradients, delta_m, rsa_correlation, DropReport};
use rcm_core::data::{
    export_dataset, generate_dataset, load_checkpoint, load_dataset, save_checkpoint, stack_images, MultiTaskSample,
    SceneConfig,
};
use rcm_core::layers::ModulatorInit;
use rcm_core::reparam::{
    from_factored, response_initialize, verify_equivalence, EquivalenceReport, ProbeSet, RiOptions,
};
use rcm_core::tasks::{
    evaluate, parameter_count, pretrain, train_task, AdaptationMode, Direction, TaskSpec, TrainConfig,
};
use rcm_core::{BackboneSpec, Error, Network32, Tensor32};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use crate::manifest::{io_error, Recorder};
use crate::CliError;

type Outcome = Result<(), CliError>;

// ---------------------------------------------------------------- helpers

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<(T, Value), CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let raw: Value = serde_json::from_str(&text).map_err(Error::from)?;
    let parsed = serde_json::from_value(raw.clone()).map_err(Error::from)?;
    Ok((parsed, raw))
}

fn write_text(path: &Path, text: &str) -> Outcome {
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

fn to_json<T: Serialize>(v: &T) -> Result<String, CliError> {
    Ok(serde_json::to_string_pretty(v).map_err(Error::from)?)
}

fn guard(path: &Path, force: bool) -> Outcome {
    if path.exists() && !force {
        return Err(Error::InvalidArgument(format!("{} exists; pass --force to overwrite", path.display())).into());
    }
    Ok(())
}

fn load_net(path: &Path) -> Result<Network32, CliError> {
    Ok(load_checkpoint(path)?)
}

fn dataset(dir: &Path) -> Result<Vec<MultiTaskSample>, CliError> {
    let (_, samples) = load_dataset(dir)?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument(format!("dataset {} is empty", dir.display())).into());
    }
    Ok(samples)
}

fn train_config(path: &Option<PathBuf>, seed: Option<u64>, rec: &mut Recorder) -> Result<TrainConfig, CliError> {
    let mut cfg = match path {
        Some(p) => {
            let (cfg, raw) = read_json::<TrainConfig>(p)?;
            rec.config("train", raw);
            cfg
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    rec.seed(cfg.seed);
    Ok(cfg)
}

fn preset(name: &str) -> Option<TaskSpec> {
    Some(match name {
        "edge" => TaskSpec::edge(),
        "semseg" => TaskSpec::semseg(),
        "parts" => TaskSpec::parts(),
        "normals" => TaskSpec::normals(),
        "saliency" => TaskSpec::saliency(),
        "depth" => TaskSpec::depth(),
        "class" | "classification" => TaskSpec::classification(),
        _ => return None,
    })
}

fn single_input(s: &MultiTaskSample) -> Result<Tensor32, CliError> {
    Ok(stack_images::<f32>(&[s])?)
}

/// Where an in-place command writes, after the overwrite check.
fn in_place_target(ckpt: &Path, out: &Option<PathBuf>, force: bool) -> Result<PathBuf, CliError> {
    match out {
        Some(o) => {
            guard(o, force)?;
            Ok(o.clone())
        }
        None => Ok(ckpt.to_path_buf()),
    }
}

// ---------------------------------------------------------------- gen-data

#[derive(Args, Debug)]
pub struct GenData {
    /// Scene config JSON; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: usize,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Replace existing outputs.
    #[arg(long)]
    force: bool,
}

impl GenData {
    pub fn run(self, threads: Option<usize>) -> Outcome {
        let mut rec = Recorder::new("gen-data", threads);
        let mut cfg = match &self.config {
            Some(p) => {
                let (cfg, raw) = read_json::<SceneConfig>(p)?;
                rec.config("scene", raw);
                cfg
            }
            None => SceneConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        rec.seed(cfg.seed);
        if self.count == 0 {
            return Err(CliError::Usage("--count must be positive".into()));
        }
        let samples = generate_dataset(&cfg, self.count)?;
        export_dataset(&self.out, &cfg, &samples, self.force)?;
        rec.output(&self.out);
        rec.finish(&self.out, "gen-data", json!({ "count": self.count, "size": cfg.size }))?;
        println!(
            "wrote {} samples ({}x{}) to {}",
            self.count,
            cfg.size,
            cfg.size,
            self.out.display()
        );
        Ok(())
    }
}

// ---------------------------------------------------------------- pretrain

#[derive(Args, Debug)]
pub struct Pretrain {
    #[arg(long)]
    data: PathBuf,
    /// Backbone JSON.
    #[arg(long)]
    arch: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Training config JSON.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Pretrain the factored form and save it as a filter-bank model.
    #[arg(long)]
    factored: bool,
    /// With --factored, keep unconstrained modulators.
    #[arg(long)]
    no_nff: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    force: bool,
}

impl Pretrain {
    pub fn run(self, threads: Option<usize>) -> Outcome {
        guard(&self.out, self.force)?;
        let mut rec = Recorder::new("pretrain", threads);
        let (arch, raw) = read_json::<BackboneSpec>(&self.arch)?;
        arch.validate()?;
        rec.config("arch", raw);
        let cfg = train_config(&self.train, self.seed, &mut rec)?;
        let data = dataset(&self.data)?;
        let shape = if self.factored { arch.factored() } else { arch.clone() };
        let mut net = Network32::new(shape, cfg.seed)?;
        let spec = TaskSpec::classification();
        let id = spec.id.clone();
        net.register_task(spec, AdaptationMode::FreezeEncoder, &ModulatorInit::Identity)?;
        let history = pretrain(&mut net, &id, &data, &cfg)?;
        if self.factored {
            net = from_factored(&net, &arch, !self.no_nff)?;
        }
        save_checkpoint(&net, &self.out)?;
        rec.output(&self.out);
        let last = history.last().expect("at least one epoch");
        println!(
            "pretrained {} epochs: loss {:.4}, accuracy {:.4}",
            history.len(),
            last.loss,
            last.metric
        );
        rec.finish(
            &self.out,
            "pretrain",
            json!({ "history": history, "factored": self.factored }),
        )?;
        Ok(())
    }
}

// ---------------------------------------------------------------- decompose

#[derive(Args, Debug)]
pub struct Decompose {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory whose images probe the layer responses.
    #[arg(long)]
    probe: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Keep only the leading eigenvectors of every layer.
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    no_nff: bool,
    /// Use at most this many probe images.
    #[arg(long)]
    probe_count: Option<usize>,
    /// Images, taken from the end of the probe directory, used for the gate.
    #[arg(long, default_value_t = 16)]
    verify_count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    force: bool,
}

impl Decompose {
    pub fn run(self, threads: Option<usize>) -> Outcome {
        guard(&self.out, self.force)?;
        let mut rec = Recorder::new("decompose", threads);
        rec.seed(self.seed);
        let src = load_net(&self.ckpt)?;
        if src.tasks().is_empty() {
            return Err(Error::InvalidArgument("checkpoint has no task to verify the decomposition on".into()).into());
        }
        let data = dataset(&self.probe)?;
        let n = self.probe_count.unwrap_or(data.len()).min(data.len());
        let probe = ProbeSet::new(data[..n].iter().map(|s| s.image.clone()).collect(), self.seed);
        let opts = RiOptions {
            rank: self.rank,
            nff: !self.no_nff,
        };
        let (ri, layers) = response_initialize(&src, &probe, &opts)?;
        let inputs = data[data.len() - self.verify_count.min(data.len())..]
            .iter()
            .map(single_input)
            .collect::<Result<Vec<_>, _>>()?;
        let mut reports = BTreeMap::new();
        for task in src.task_ids() {
            let rep = verify_equivalence(&src, &ri, &task, &inputs, self.tol)?;
            println!("{task}: max deviation {:.3e} (tol {:.1e})", rep.global_max, self.tol);
            reports.insert(task, rep);
        }
        for d in &layers {
            println!("{}: rank {}, reconstruction {:.3e}", d.layer, d.rank, d.reconstruction);
        }
        if let Some((task, rep)) = reports.iter().find(|(_, r)| !r.pass) {
            return Err(CliError::Gate(format!(
                "task `{task}` deviates by {:.3e} > {:.1e}; nothing written",
                rep.global_max, self.tol
            )));
        }
        save_checkpoint(&ri, &self.out)?;
        rec.output(&self.out);
        rec.finish(&self.out, "decompose", json!({ "layers": layers, "verify": reports }))?;
        Ok(())
    }
}

// ---------------------------------------------------------------- add-task

#[derive(Args, Debug)]
pub struct AddTask {
    #[arg(long)]
    ckpt: PathBuf,
    /// Task spec JSON, or a preset: edge, semseg, parts, normals, saliency, depth, class.
    #[arg(long)]
    task: String,
    /// rcm, series-ra, parallel-ra, freeze, bn-only, conv-only or single.
    #[arg(long)]
    mode: String,
    /// Rename the task.
    #[arg(long)]
    id: Option<String>,
    /// Modulator start on filter-bank layers: basis or identity.
    #[arg(long, default_value = "basis")]
    init: String,
    /// Write here instead of updating the checkpoint in place.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

impl AddTask {
    pub fn run(self, threads: Option<usize>) -> Outcome {
        let target = in_place_target(&self.ckpt, &self.out, self.force)?;
        let mut rec = Recorder::new("add-task", threads);
        let mode: AdaptationMode = self.mode.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?;
        let init = match self.init.as_str() {
            "basis" => ModulatorInit::Basis,
            "identity" => ModulatorInit::Identity,
            other => return Err(CliError::Usage(format!("unknown --init `{other}` (basis or identity)"))),
        };
        let mut spec = match preset(&self.task) {
            Some(s) => s,
            None => {
                let (spec, raw) = read_json::<TaskSpec>(Path::new(&self.task))?;
                rec.config("task", raw);
                spec
            }
        };
        if let Some(id) = &self.id {
            spec = spec.with_id(id.clone());
        }
        let id = spec.id.clone();
        let mut net = load_net(&self.ckpt)?;
        net.register_task(spec, mode, &init)?;
        save_checkpoint(&net, &target)?;
        rec.output(&target);
        rec.finish(&target, &format!("add-task.{id}"), json!({ "task": id, "mode": mode }))?;
        println!("registered `{id}` ({mode}); tasks now {:?}", net.task_ids());
        Ok(())
    }
}

// ---------------------------------------------------------------- train

#[derive(Args, Debug)]
pub struct Train {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    task: String,
    /// Training config JSON.
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

impl Train {
    pub fn run(self, threads: Option<usize>) -> Outcome {
        let target = in_place_target(&self.ckpt, &self.out, self.force)?;
        let mut rec = Recorder::new("train", threads);
        let cfg = train_config(&self.train, self.seed, &mut rec)?;
        let data = dataset(&self.data)?;
        let mut net = load_net(&self.ckpt)?;
        let history = train_task(&mut net, &self.task, &data, &cfg)?;
        save_checkpoint(&net, &target)?;
        rec.output(&target);
        for e in &history {
            println!("epoch {:>3}: loss {:.5}, metric {:.4}", e.epoch, e.loss, e.metric);
        }
        rec.finish(
            &target,
            &format!("train.{}", self.task),
            json!({ "task": self.task, "history": history }),
        )?;
        Ok(())
    }
}

// ---------------------------------------------------------------- eval

#[derive(Args, Debug)]
pub struct Eval {
    #[arg(long)]
    ckpt: PathBuf,
    /// Comma-separated task ids; all tasks when omitted.
    #[arg(long, value_delimiter = ',')]
    tasks: Vec<String>,
    #[arg(long)]
    data: PathBuf,
    /// JSON map of task to metric, or an earlier eval report.
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Serialize)]
struct EvalReport {
    metrics: BTreeMap<String, f64>,
    directions: BTreeMap<String, Direction>,
    drop: Option<DropReport>,
}

fn baseline_metrics(path: &Path, rec: &mut Recorder) -> Result<BTreeMap<String, f64>, CliError> {
    let (raw, _) = read_json::<Value>(path)?;
    rec.config("baseline", raw.clone());
    let map = raw.get("metrics").cloned().unwrap_or(raw);
    Ok(serde_json::from_value(map).map_err(Error::from)?)
}

impl Eval {
    pub fn run(self, threads: Option<usize>) -> Outcome {
        guard(&self.out, self.force)?;
        let mut rec = Recorder::new("eval", threads);
        let net = load_net(&self.ckpt)?;
        let data = dataset(&self.data)?;
        let tasks = if self.tasks.is_empty() {
            net.task_ids()
        } else {
            self.tasks.clone()
        };
        let mut metrics = BTreeMap::new();
        let mut directions = BTreeMap::new();
        for t in &tasks {
            let entry = net.task(t)?;
            metrics.insert(t.clone(), evaluate(&net, t, &data)?);
            directions.insert(t.clone(), entry.spec.direction);
        }
        let drop = match &self.baseline {
            Some(p) => {
                let all = baseline_metrics(p, &mut rec)?;
                let mut base = BTreeMap::new();
                for t in &tasks {
                    let v = all
                        .get(t)
                        .ok_or_else(|| Error::InvalidArgument(format!("baseline has no metric for `{t}`")))?;
                    base.insert(t.clone(), *v);
                }
                Some(delta_m(&metrics, &base, &directions)?)
            }
            None => None,
        };
        for (t, m) in &metrics {
            let dir = if directions[t] == Direction::LowerBetter {
                "lower"
            } else {
                "higher"
            };
            match drop.as_ref().and_then(|d| d.tasks.iter().find(|x| &x.task == t)) {
                Some(d) => println!("{t:<12} {m:>10.4} ({dir} is better) drop {:+.2}%", d.drop_pct),
                None => println!("{t:<12} {m:>10.4} ({dir} is better)"),
            }
        }
        if let Some(d) = &drop {
            println!("delta_m {:+.3}%", d.delta_m);
        }
        let report = EvalReport {
            metrics,
            directions,
            drop,
        };
        write_text(&self.out, &to_json(&report)?)?;
        rec.output(&self.out);
        rec.finish(&self.out, "eval", json!({ "tasks": tasks }))?;
        Ok(())
    }
}

// ---------------------------------------------------------------- rsa

#[derive(Args, Debug)]
pub struct Rsa {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    layer: String,
    #[arg(long)]
    data: PathBuf,
    /// Number of minibatch gradients per task.
    #[arg(long, default_value_t = 16)]
    m: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    /// Comma-separated task ids; all tasks when omitted.
    #[arg(long, value_delimiter = ',')]
    tasks: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

impl Rsa {
    pub fn run(self, threads: Option<usize>) -> Outcome {
        guard(&self.out, self.force)?;
        let mut rec = Recorder::new("rsa", threads);
        if self.m < 2 || self.batch == 0 {
            return Err(CliError::Usage("--m must be at least 2 and --batch positive".into()));
        }
        let net = load_net(&self.ckpt)?;
        let data = dataset(&self.data)?;
        let need = self.m * self.batch;
        if data.len() < need {
            return Err(Error::InvalidArgument(format!(
                "{} minibatches of {} need {need} samples, dataset has {}",
                self.m,
                self.batch,
                data.len()
            ))
            .into());
        }
        let batches: Vec<Vec<&MultiTaskSample>> = data[..need].chunks(self.batch).map(|c| c.iter().collect()).collect();
        let tasks = if self.tasks.is_empty() {
            net.task_ids()
        } else {
            self.tasks.clone()
        };
        let sets = tasks
            .iter()
            .map(|t| capture_task_gradients(&net, t, &self.layer, &batches))
            .collect::<rcm_core::Result<Vec<_>>>()?;
        let matrix = rsa_correlation(&sets)?;
        let csv = matrix.to_csv();
        print!("{csv}");
        write_text(&self.out, &csv)?;
        rec.output(&self.out);
        rec.finish(
            &self.out,
            "rsa",
            json!({ "layer": self.layer, "m": self.m, "batch": self.batch }),
        )?;
        Ok(())
    }
}

// ---------------------------------------------------------------- params

#[derive(Args, Debug)]
pub struct Params {
    /// Backbone JSON.
    #[arg(long)]
    arch: PathBuf,
    /// A mode name, or `all`.
    #[arg(long, default_value = "all")]
    mode: String,
    #[arg(long)]
    tasks: usize,
    /// Also write the table as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

impl Params {
    pub fn run(self, threads: Option<usize>) -> Outcome {
        if let Some(o) = &self.out {
            guard(o, self.force)?;
        }
        let mut rec = Recorder::new("params", threads);
        let (arch, raw) = read_json::<BackboneSpec>(&self.arch)?;
        rec.config("arch", raw);
        let modes: Vec<AdaptationMode> = if self.mode == "all" {
            AdaptationMode::ALL.to_vec()
        } else {
            vec![self.mode.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?]
        };
        let mut table = format!(
            "{:<12} {:<9} {:>12} {:>10} {:>10} {:>12}\n",
            "mode", "part", "weights", "bias", "bn", "total"
        );
        let mut csv = String::from("mode,part,weights,bias,bn,total\n");
        for mode in modes {
            let c = parameter_count(&arch, self.tasks, mode)?;
            for (part, b) in [("shared", c.shared), ("per-task", c.per_task), ("total", c.total)] {
                let _ = writeln!(
                    table,
                    "{:<12} {:<9} {:>12} {:>10} {:>10} {:>12}",
                    mode.cli_name(),
                    part,
                    b.weights,
                    b.bias,
                    b.bn,
                    b.total()
                );
                let _ = writeln!(
                    csv,
                    "{},{part},{},{},{},{}",
                    mode.cli_name(),
                    b.weights,
                    b.bias,
                    b.bn,
                    b.total()
                );
            }
        }
        print!("{table}");
        if let Some(o) = &self.out {
            write_text(o, &csv)?;
            rec.output(o);
            rec.finish(o, "params", json!({ "tasks": self.tasks }))?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- verify

#[derive(Args, Debug)]
pub struct Verify {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long)]
    task: String,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Dataset directory of inputs; Gaussian inputs when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Number of inputs.
    #[arg(long, default_value_t = 16)]
    count: usize,
    /// Side of the Gaussian inputs.
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

impl Verify {
    pub fn run(self, threads: Option<usize>) -> Outcome {
        if let Some(o) = &self.out {
            guard(o, self.force)?;
        }
        let mut rec = Recorder::new("verify", threads);
        rec.seed(self.seed);
        let a = load_net(&self.a)?;
        let b = load_net(&self.b)?;
        let in_channels = a.layout.arch.in_channels;
        let inputs: Vec<Tensor32> = match &self.data {
            Some(dir) => dataset(dir)?
                .iter()
                .take(self.count)
                .map(single_input)
                .collect::<Result<_, _>>()?,
            None => {
                let mut r = ChaCha8Rng::seed_from_u64(self.seed);
                (0..self.count)
                    .map(|_| Tensor32::randn([1, in_channels, self.size, self.size], 1.0, &mut r))
                    .collect()
            }
        };
        if inputs.is_empty() {
            return Err(CliError::Usage("--count must be positive".into()));
        }
        let rep: EquivalenceReport = verify_equivalence(&a, &b, &self.task, &inputs, self.tol)?;
        for (layer, dev) in &rep.layers {
            println!("{layer:<12} {dev:.3e}");
        }
        println!(
            "max {:.3e} tol {:.1e}: {}",
            rep.global_max,
            self.tol,
            if rep.pass { "PASS" } else { "FAIL" }
        );
        if let Some(o) = &self.out {
            write_text(o, &to_json(&rep)?)?;
            rec.output(o);
            rec.finish(o, "verify", json!({ "pass": rep.pass, "global_max": rep.global_max }))?;
        }
        if !rep.pass {
            return Err(CliError::Gate(format!(
                "max deviation {:.3e} exceeds {:.1e}",
                rep.global_max, self.tol
            )));
        }
        Ok(())
    }
}
