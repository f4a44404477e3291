//! Stage orchestration. Every stage reads its inputs from the output
//! directory and writes its own artifacts there, plus a `<stage>.jsonl` log,
//! so stages can be rerun or resumed individually:
//!
//! | stage            | reads                             | writes                               |
//! |------------------|-----------------------------------|--------------------------------------|
//! | `train-supernet` | dataset                           | `supernet.ckpt`                      |
//! | `search`         | `supernet.ckpt`                   | `search.json`, `search-trace.jsonl`  |
//! | `train-subnet`   | `search.json` (or mask), supernet | `subnet.ckpt`, `subnet.json`         |
//! | `merge`          | `subnet.ckpt`                     | `merged.ckpt`, `merge.json`          |
//! | `verify`         | `subnet.ckpt`, `merged.ckpt`      | `verify.json`                        |
//! | `flops`          |                                   | `flops.json`, `flops.txt`            |
//! | `report`         | the above                         | `report.json`, `report.txt`          |

mod config;
mod report;

pub use config::{stage_seed, DatasetSpec, PipelineConfig, Stage};
pub use report::{bench_report, flops_table, human, render_table, BenchReport, BenchRow, FlopsRow, FlopsTable};

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use updp_tensor::ParamStore;

use crate::error::{Error, Result};
use crate::graph::{read_checkpoint, write_checkpoint, Model};
use crate::merge::{merge_model, verify_equivalence, EquivalenceReport, MergePlan};
use crate::progressive::{train_subnet, EpochLog};
use crate::search::search_supernet;
use crate::supernet::{train_supernet, PruneMask, Supernet};
use crate::train::accuracy;
use crate::zoo::build_model;

pub const SUPERNET_CKPT: &str = "supernet.ckpt";
pub const SEARCH_JSON: &str = "search.json";
pub const SUBNET_CKPT: &str = "subnet.ckpt";
pub const SUBNET_JSON: &str = "subnet.json";
pub const MERGED_CKPT: &str = "merged.ckpt";
pub const MERGE_JSON: &str = "merge.json";
pub const VERIFY_JSON: &str = "verify.json";
pub const FLOPS_JSON: &str = "flops.json";
pub const REPORT_JSON: &str = "report.json";

const EVAL_BATCH: usize = 100;
const BENCH_BATCH: usize = 8;
const BENCH_REPS: usize = 5;

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub stage: Stage,
    pub artifacts: Vec<PathBuf>,
    /// Human-readable table, for stages that produce one.
    pub table: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub mask: PruneMask,
    pub fitness: f64,
    pub evaluations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubnetSummary {
    pub mask: PruneMask,
    /// The supernet stages were skipped in favour of an explicit mask.
    pub explicit_mask: bool,
    pub progressive_acc: f64,
    pub progressive_log: Vec<EpochLog>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direct_acc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direct_log: Option<Vec<EpochLog>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifySummary {
    pub equivalence: EquivalenceReport,
    pub subnet_acc: f64,
    pub merged_acc: f64,
    /// Merged minus unmerged accuracy, in percentage points.
    pub acc_delta_pp: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub arch: String,
    pub mask: PruneMask,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub search_fitness: Option<f64>,
    pub progressive_acc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direct_acc: Option<f64>,
    pub merged_acc: f64,
    pub interior_error: f64,
    pub border_error: f64,
    pub bench: BenchReport,
}

/// JSON-lines sink: every record goes to the stage log file and `echo`.
struct Log<'a> {
    file: BufWriter<File>,
    stage: Stage,
    echo: &'a mut dyn FnMut(&Value),
}

impl Log<'_> {
    fn emit(&mut self, mut rec: Value) -> Result<()> {
        if let Value::Object(m) = &mut rec {
            m.insert("stage".into(), json!(self.stage.name()));
        }
        serde_json::to_writer(&mut self.file, &rec)?;
        self.file.write_all(b"\n")?;
        self.file.flush()?;
        (self.echo)(&rec);
        Ok(())
    }
}

fn stage_err(stage: Stage) -> impl Fn(Error) -> Error {
    move |e| match e {
        e @ Error::Stage { .. } => e,
        e => Error::Stage {
            stage: stage.name().into(),
            msg: e.to_string(),
        },
    }
}

/// Path of an input artifact, or an error naming the stage that produces it.
fn require(out: &Path, file: &str, stage: Stage, producer: Stage) -> Result<PathBuf> {
    let p = out.join(file);
    if p.exists() {
        Ok(p)
    } else {
        Err(Error::Stage {
            stage: stage.name().into(),
            msg: format!("missing {}; run the `{producer}` stage first", p.display()),
        })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Runs one stage. `echo` receives every JSON log record as it is written.
pub fn run_stage(cfg: &PipelineConfig, stage: Stage, echo: &mut dyn FnMut(&Value)) -> Result<StageOutcome> {
    let wrap = stage_err(stage);
    cfg.validate().map_err(&wrap)?;
    let out = cfg.out_dir.as_path();
    std::fs::create_dir_all(out).map_err(|e| wrap(e.into()))?;
    let file = File::create(out.join(format!("{stage}.jsonl"))).map_err(|e| wrap(e.into()))?;
    let mut log = Log {
        file: BufWriter::new(file),
        stage,
        echo,
    };
    let result = match stage {
        Stage::TrainSupernet => stage_train_supernet(cfg, &mut log),
        Stage::Search => stage_search(cfg, &mut log),
        Stage::TrainSubnet => stage_train_subnet(cfg, &mut log),
        Stage::Merge => stage_merge(cfg, &mut log),
        Stage::Verify => stage_verify(cfg, &mut log),
        Stage::Flops => stage_flops(cfg, &mut log),
        Stage::Report => stage_report(cfg, &mut log),
    };
    let result = result.and_then(|(artifacts, table)| {
        log.emit(json!({"event": "done", "artifacts": artifacts}))?;
        log.file.flush()?;
        Ok(StageOutcome { stage, artifacts, table })
    });
    result.map_err(wrap)
}

/// Runs the training stages through `verify`, then `report`. With an
/// explicit mask the supernet and search stages are skipped.
pub fn run_all(cfg: &PipelineConfig, echo: &mut dyn FnMut(&Value)) -> Result<Vec<StageOutcome>> {
    let stages: Vec<Stage> = if cfg.mask.is_some() {
        vec![Stage::TrainSubnet, Stage::Merge, Stage::Verify, Stage::Report]
    } else {
        vec![Stage::TrainSupernet, Stage::Search, Stage::TrainSubnet, Stage::Merge, Stage::Verify, Stage::Report]
    };
    stages.into_iter().map(|s| run_stage(cfg, s, echo)).collect()
}

type StageResult = Result<(Vec<PathBuf>, Option<String>)>;

fn supernet_of(cfg: &PipelineConfig) -> Result<Supernet> {
    Supernet::new(build_model(&cfg.arch)?)
}

fn stage_train_supernet(cfg: &PipelineConfig, log: &mut Log) -> StageResult {
    let (train, _) = cfg.load_data()?;
    let net = supernet_of(cfg)?;
    let mut params = net.init_params::<f32>(stage_seed(cfg.seed, "init"))?;
    let scfg = cfg.supernet_config();
    let mut failed = None;
    train_supernet(&net, &mut params, &train, &scfg, |r| {
        if let Err(e) = log.emit(json!({"event": "epoch", "epoch": r.epoch, "losses": r.losses})) {
            failed.get_or_insert(e);
        }
    })?;
    if let Some(e) = failed {
        return Err(e);
    }
    let path = cfg.out_dir.join(SUPERNET_CKPT);
    write_checkpoint(&path, &net, &params, &json!({"stage": Stage::TrainSupernet, "epochs": scfg.epochs}))?;
    Ok((vec![path], None))
}

fn stage_search(cfg: &PipelineConfig, log: &mut Log) -> StageResult {
    let ckpt = require(&cfg.out_dir, SUPERNET_CKPT, Stage::Search, Stage::TrainSupernet)?;
    let (_, val) = cfg.load_data()?;
    let c = read_checkpoint::<Supernet, f32>(ckpt)?;
    let outcome = search_supernet(&c.graph, &c.params, &val, &cfg.search_config())?;
    for g in &outcome.trace {
        log.emit(json!({"event": "generation", "generation": g.generation, "best_fitness": g.best_fitness, "best_mask": g.best_mask}))?;
    }
    let trace = cfg.out_dir.join("search-trace.jsonl");
    outcome.write_trace(BufWriter::new(File::create(&trace)?))?;
    let summary = SearchSummary {
        mask: outcome.best.mask.clone(),
        fitness: outcome.best.fitness,
        evaluations: outcome.evaluations,
    };
    let path = cfg.out_dir.join(SEARCH_JSON);
    write_json(&path, &summary)?;
    Ok((vec![path, trace], None))
}

fn stage_train_subnet(cfg: &PipelineConfig, log: &mut Log) -> StageResult {
    let explicit = cfg.mask.is_some();
    let mask = match &cfg.mask {
        Some(m) => m.clone(),
        None => read_json::<SearchSummary>(&require(&cfg.out_dir, SEARCH_JSON, Stage::TrainSubnet, Stage::Search)?)?.mask,
    };
    let supernet_path = cfg.out_dir.join(SUPERNET_CKPT);
    let (net, params) = if explicit && !supernet_path.exists() {
        let net = supernet_of(cfg)?;
        let params = net.init_params::<f32>(stage_seed(cfg.seed, "init"))?;
        (net, params)
    } else {
        let c = read_checkpoint::<Supernet, f32>(require(&cfg.out_dir, SUPERNET_CKPT, Stage::TrainSubnet, Stage::TrainSupernet)?)?;
        (c.graph, c.params)
    };
    let (train, val) = cfg.load_data()?;
    let run = |direct: bool, log: &mut Log| -> Result<(Model, ParamStore<f32>, Vec<EpochLog>)> {
        let mut failed = None;
        let t = train_subnet(&net, &params, &mask, &train, &val, &cfg.subnet_config(direct), |e| {
            let rec = json!({"event": "epoch", "direct": direct, "epoch": e.epoch, "lambda": e.lambda, "lr": e.lr,
                "train_loss": e.train_loss, "eval_acc": e.eval_acc});
            if let Err(e) = log.emit(rec) {
                failed.get_or_insert(e);
            }
        })?;
        match failed {
            Some(e) => Err(e),
            None => Ok((t.model, t.params, t.log)),
        }
    };
    let (model, trained, progressive_log) = run(false, log)?;
    let progressive_acc = accuracy(&val, EVAL_BATCH, |x| model.forward(&trained, x))?;
    let (direct_acc, direct_log) = if cfg.compare_direct {
        let (m, p, l) = run(true, log)?;
        (Some(accuracy(&val, EVAL_BATCH, |x| m.forward(&p, x))?), Some(l))
    } else {
        (None, None)
    };
    let ckpt = cfg.out_dir.join(SUBNET_CKPT);
    write_checkpoint(&ckpt, &model, &trained, &json!({"stage": Stage::TrainSubnet, "mask": mask}))?;
    let summary = SubnetSummary {
        mask,
        explicit_mask: explicit,
        progressive_acc,
        progressive_log,
        direct_acc,
        direct_log,
    };
    let path = cfg.out_dir.join(SUBNET_JSON);
    write_json(&path, &summary)?;
    Ok((vec![ckpt, path], None))
}

fn stage_merge(cfg: &PipelineConfig, log: &mut Log) -> StageResult {
    let c = read_checkpoint::<Model, f32>(require(&cfg.out_dir, SUBNET_CKPT, Stage::Merge, Stage::TrainSubnet)?)?;
    // Folding in double precision keeps the single-precision result within
    // one rounding of the exact merge.
    let merged = merge_model(&c.graph, &c.params.cast::<f64>(), cfg.exact_mode)?;
    for p in &merged.plans {
        log.emit(json!({"event": "block", "block": p.block, "form": p.form, "macs_before": p.macs_before,
            "macs_after": p.macs_after, "border_exact": p.border_exact}))?;
    }
    let ckpt = cfg.out_dir.join(MERGED_CKPT);
    write_checkpoint(&ckpt, &merged.model, &merged.params.cast::<f32>(), &json!({"stage": Stage::Merge, "exact_mode": cfg.exact_mode}))?;
    let path = cfg.out_dir.join(MERGE_JSON);
    write_json::<Vec<MergePlan>>(&path, &merged.plans)?;
    Ok((vec![ckpt, path], None))
}

fn stage_verify(cfg: &PipelineConfig, log: &mut Log) -> StageResult {
    let sub = read_checkpoint::<Model, f32>(require(&cfg.out_dir, SUBNET_CKPT, Stage::Verify, Stage::TrainSubnet)?)?;
    let merged = read_checkpoint::<Model, f32>(require(&cfg.out_dir, MERGED_CKPT, Stage::Verify, Stage::Merge)?)?;
    let (_, val) = cfg.load_data()?;
    let idx: Vec<usize> = (0..cfg.verify_samples.min(val.len())).collect();
    let (x, _) = val.batch::<f32>(&idx);
    let equivalence = verify_equivalence(&sub.graph, &sub.params, &merged.graph, &merged.params, &x)?;
    let subnet_acc = accuracy(&val, EVAL_BATCH, |x| sub.graph.forward(&sub.params, x))?;
    let merged_acc = accuracy(&val, EVAL_BATCH, |x| merged.graph.forward(&merged.params, x))?;
    let summary = VerifySummary {
        equivalence,
        subnet_acc,
        merged_acc,
        acc_delta_pp: 100.0 * (merged_acc - subnet_acc),
    };
    log.emit(json!({"event": "verify", "interior_max": summary.equivalence.interior_max,
        "border_max": summary.equivalence.border_max, "subnet_acc": subnet_acc, "merged_acc": merged_acc}))?;
    let path = cfg.out_dir.join(VERIFY_JSON);
    write_json(&path, &summary)?;
    Ok((vec![path], None))
}

fn stage_flops(cfg: &PipelineConfig, log: &mut Log) -> StageResult {
    let table = flops_table(&build_model(&cfg.arch)?)?;
    log.emit(json!({"event": "flops", "model": table.model, "macs": table.total_macs, "params": table.total_params}))?;
    let text = table.render();
    let json_path = cfg.out_dir.join(FLOPS_JSON);
    let txt_path = cfg.out_dir.join("flops.txt");
    write_json(&json_path, &table)?;
    std::fs::write(&txt_path, &text)?;
    Ok((vec![json_path, txt_path], Some(text)))
}

fn stage_report(cfg: &PipelineConfig, log: &mut Log) -> StageResult {
    let out = &cfg.out_dir;
    let verify: VerifySummary = read_json(&require(out, VERIFY_JSON, Stage::Report, Stage::Verify)?)?;
    let subnet: SubnetSummary = read_json(&require(out, SUBNET_JSON, Stage::Report, Stage::TrainSubnet)?)?;
    let merged = read_checkpoint::<Model, f32>(require(out, MERGED_CKPT, Stage::Report, Stage::Merge)?)?;
    let search: Option<SearchSummary> = match out.join(SEARCH_JSON) {
        p if p.exists() && !subnet.explicit_mask => Some(read_json(&p)?),
        _ => None,
    };
    let baseline = build_model(&cfg.arch)?;
    let bench = bench_report(&baseline, &merged.graph, BENCH_BATCH, BENCH_REPS)?;
    let report = Report {
        arch: baseline.name.clone(),
        mask: subnet.mask.clone(),
        search_fitness: search.map(|s| s.fitness),
        progressive_acc: subnet.progressive_acc,
        direct_acc: subnet.direct_acc,
        merged_acc: verify.merged_acc,
        interior_error: verify.equivalence.interior_max,
        border_error: verify.equivalence.border_max,
        bench,
    };
    let pct = |v: f64| format!("{:.2}%", 100.0 * v);
    let mut rows = vec![
        vec!["architecture".into(), report.arch.clone()],
        vec!["mask".into(), report.mask.to_string()],
    ];
    if let Some(f) = report.search_fitness {
        rows.push(vec!["search fitness".into(), pct(f)]);
    }
    rows.push(vec!["subnet accuracy (progressive)".into(), pct(report.progressive_acc)]);
    if let Some(d) = report.direct_acc {
        rows.push(vec!["subnet accuracy (direct)".into(), pct(d)]);
    }
    rows.push(vec!["merged accuracy".into(), pct(report.merged_acc)]);
    rows.push(vec!["interior max error".into(), format!("{:.3e}", report.interior_error)]);
    rows.push(vec!["border max error".into(), format!("{:.3e}", report.border_error)]);
    let text = format!("{}\n{}", render_table(&["metric", "value"], &rows), report.bench.render());
    log.emit(serde_json::to_value(&report)?)?;
    let json_path = out.join(REPORT_JSON);
    let txt_path = out.join("report.txt");
    write_json(&json_path, &report)?;
    std::fs::write(&txt_path, &text)?;
    Ok((vec![json_path, txt_path], Some(text)))
}
