use crate::config::RunConfig;
use crate::error::{CliError, CliResult, EXIT_NUMERIC};
use serde::Serialize;
use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};
use volfuse_core::datapipe::{read_case, CorpusManifest, HuWindow, Split, TrainingSet, SCORE_FILES, VIEWS};
use volfuse_core::fusion::{binarize, majority_vote, vfn_fuse, FusionInput, TestRoi};
use volfuse_core::gradsuite::{full_suite, SuiteEntry};
use volfuse_core::protocol::{cca_plan, EvalReport, FoldPlan, Tail};
use volfuse_core::vfn::{build, receptive_field, train, ModelManifest, TrainReport, TrainSchedule, VfnConfig, VfnModel};
use volfuse_core::volgrid::{dsc, read_volume, write_volume, LabelMask, Volume};

/// Exclusive claim on an output directory, released on drop.
pub struct OutLock {
    path: PathBuf,
    _file: File,
}

impl OutLock {
    pub fn acquire(out: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(out)?;
        let path = out.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(file) => Ok(Self { path, _file: file }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::config(format!(
                "{} is in use by another command (remove {} if no command is running)",
                out.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Wall-clock facts go to a sidecar so result files stay reproducible.
fn write_timing(out: &Path, command: &str, started: SystemTime, clock: Instant) -> CliResult<()> {
    let unix = started.duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let v = serde_json::json!({ "command": command, "started_unix": unix, "seconds": clock.elapsed().as_secs_f64() });
    write_json(&out.join(format!("{command}.timing.json")), &v)
}

struct Timer(SystemTime, Instant);

impl Timer {
    fn start() -> Self {
        Self(SystemTime::now(), Instant::now())
    }

    fn finish(&self, out: &Path, command: &str) -> CliResult<()> {
        write_timing(out, command, self.0, self.1)
    }
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

#[derive(Clone, Debug, Serialize)]
pub struct CaseQuality {
    pub id: String,
    pub view_dsc: [f64; 3],
    pub mv_dsc: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GenOutput {
    pub corpus: PathBuf,
    pub n_train: usize,
    pub n_test: usize,
    pub mean_view_dsc: [f64; 3],
    pub mean_mv_dsc: f64,
    pub cases: Vec<CaseQuality>,
}

impl GenOutput {
    pub fn summary(&self) -> String {
        let v = self.mean_view_dsc;
        format!(
            "generated {} train + {} test phantoms in {}\nmean DSC: coronal {:.4}, sagittal {:.4}, axial {:.4}, majority vote {:.4}",
            self.n_train,
            self.n_test,
            self.corpus.display(),
            v[0],
            v[1],
            v[2],
            self.mean_mv_dsc
        )
    }
}

pub fn cmd_gen(cfg: &RunConfig) -> CliResult<GenOutput> {
    let _lock = OutLock::acquire(&cfg.out)?;
    let timer = Timer::start();
    let m = CorpusManifest::generate(&cfg.corpus, &cfg.phantom, cfg.n_train, cfg.n_test, cfg.seed)?;
    let mut cases = Vec::with_capacity(m.cases.len());
    for e in &m.cases {
        let text = std::fs::read_to_string(cfg.corpus.join(&e.id).join("case.json"))?;
        let meta: volfuse_core::datapipe::CaseMeta = serde_json::from_str(&text)?;
        cases.push(CaseQuality { id: meta.id, view_dsc: meta.view_dsc, mv_dsc: meta.mv_dsc });
    }
    let out = GenOutput {
        corpus: cfg.corpus.clone(),
        n_train: cfg.n_train,
        n_test: cfg.n_test,
        mean_view_dsc: [0, 1, 2].map(|v| mean(cases.iter().map(|c| c.view_dsc[v]))),
        mean_mv_dsc: mean(cases.iter().map(|c| c.mv_dsc)),
        cases,
    };
    write_json(&cfg.out.join("gen.json"), &out)?;
    timer.finish(&cfg.out, "gen")?;
    Ok(out)
}

/// Command-line adjustments to the configured schedule.
#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOverrides {
    pub iterations: Option<usize>,
    pub batch: Option<usize>,
}

impl TrainOverrides {
    pub fn apply(&self, s: &TrainSchedule) -> TrainSchedule {
        let mut s = match self.iterations {
            Some(n) => s.with_iterations(n),
            None => s.clone(),
        };
        if let Some(b) = self.batch {
            s.batch = b;
        }
        s
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainOutput {
    /// Always `model.ckpt` under `out`; left out of the JSON so that runs in
    /// different directories compare equal.
    #[serde(skip)]
    pub checkpoint: PathBuf,
    pub config: VfnConfig,
    pub param_count: usize,
    pub schedule: TrainSchedule,
    pub init_seed: u64,
    pub sample_seed: u64,
    pub train_cases: usize,
    pub report: TrainReport,
}

impl TrainOutput {
    pub fn summary(&self) -> String {
        format!(
            "trained {} iterations (batch {}) on {} cases, {} parameters\nloss {:.4} -> {:.4}\ncheckpoint {}",
            self.schedule.iterations,
            self.schedule.batch,
            self.train_cases,
            self.param_count,
            self.report.first_loss().unwrap_or(f64::NAN),
            self.report.last_loss().unwrap_or(f64::NAN),
            self.checkpoint.display()
        )
    }
}

fn manifest(cfg: &RunConfig) -> CliResult<CorpusManifest> {
    if !CorpusManifest::path(&cfg.corpus).is_file() {
        return Err(CliError::data(format!("no corpus at {} (run `volfuse gen` first)", cfg.corpus.display())));
    }
    Ok(CorpusManifest::load(&cfg.corpus)?)
}

pub fn cmd_train(cfg: &RunConfig, overrides: TrainOverrides) -> CliResult<TrainOutput> {
    let schedule = overrides.apply(&cfg.train);
    schedule.validate()?;
    let _lock = OutLock::acquire(&cfg.out)?;
    let timer = Timer::start();
    let m = manifest(cfg)?;
    let ids = m.ids(Split::Train);
    let cases = ids.iter().map(|id| read_case(&cfg.corpus, id)).collect::<Result<Vec<_>, _>>()?;
    let set = TrainingSet::new(cases, &cfg.hu_window, cfg.channels(), cfg.augment)?;
    let config = cfg.vfn_config();
    let mut model = build::<f32>(config)?;
    model.init_random(cfg.init_seed());
    log::info!("training {} parameters on {} cases", config.param_count(), ids.len());
    let report = train(&mut model, &set, &schedule, cfg.sample_seed())?;
    let checkpoint = cfg.checkpoint();
    model.save(&checkpoint, cfg.init_seed(), &schedule)?;
    let out = TrainOutput {
        checkpoint,
        config,
        param_count: config.param_count(),
        schedule,
        init_seed: cfg.init_seed(),
        sample_seed: cfg.sample_seed(),
        train_cases: ids.len(),
        report,
    };
    write_json(&cfg.out.join("train.json"), &out)?;
    timer.finish(&cfg.out, "train")?;
    Ok(out)
}

/// Loads a checkpoint and checks it against the run config.
pub fn load_model(cfg: &RunConfig, path: &Path) -> CliResult<(VfnModel<f32>, ModelManifest)> {
    if !path.is_file() {
        return Err(CliError::data(format!("no checkpoint at {} (run `volfuse train` first)", path.display())));
    }
    let (model, manifest) = VfnModel::<f32>::load(path)?;
    let want = cfg.vfn_config();
    if manifest.config != want {
        return Err(CliError::config(format!(
            "checkpoint has in_channels {} and base_channels {}, config asks for {} and {}",
            manifest.config.in_channels, manifest.config.base_channels, want.in_channels, want.base_channels
        )));
    }
    Ok((model, manifest))
}

/// The four fusion inputs of a case directory, plus its truth if present.
pub fn load_inputs(dir: &Path) -> CliResult<(FusionInput, Option<LabelMask>)> {
    if !dir.is_dir() {
        return Err(CliError::data(format!("case directory {} is missing", dir.display())));
    }
    let image = read_volume::<f32>(dir.join("image.vgf"))?;
    let [c, s, a] = SCORE_FILES.map(|f| read_volume::<f32>(dir.join(f)));
    let input = FusionInput::new(image, [c?, s?, a?])?;
    let gt_path = dir.join("gt.vgf");
    let gt = if gt_path.is_file() { Some(read_volume::<u8>(gt_path)?) } else { None };
    Ok((input, gt))
}

/// Majority vote and VFN masks of one case.
pub struct Fused {
    pub view_masks: [LabelMask; 3],
    pub mv: LabelMask,
    pub vfn_score: Volume<f32>,
    pub vfn: LabelMask,
    pub roi: TestRoi,
    pub windows: usize,
}

pub fn fuse_case(input: &FusionInput, model: &VfnModel<f32>, window: &HuWindow) -> CliResult<Fused> {
    let [c, s, a] = input.scores.each_ref().map(|v| binarize(v, 0.5));
    let view_masks = [c?, s?, a?];
    let mv = majority_vote(&view_masks[0], &view_masks[1], &view_masks[2])?;
    let out = vfn_fuse(input, model, window)?;
    Ok(Fused { view_masks, mv, vfn_score: out.score, vfn: out.mask, roi: out.report.test_roi, windows: out.report.windows })
}

#[derive(Clone, Debug, Serialize)]
pub struct CaseDsc {
    pub views: [f64; 3],
    pub mv: f64,
    pub vfn: f64,
}

impl CaseDsc {
    fn of(f: &Fused, gt: &LabelMask) -> CliResult<Self> {
        let [c, s, a] = f.view_masks.each_ref().map(|m| dsc(m, gt));
        Ok(Self { views: [c?, s?, a?], mv: dsc(&f.mv, gt)?, vfn: dsc(&f.vfn, gt)? })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct FuseOutput {
    pub case: String,
    pub dir: PathBuf,
    pub roi: TestRoi,
    pub windows: usize,
    pub channels: usize,
    pub dsc: Option<CaseDsc>,
}

impl FuseOutput {
    pub fn summary(&self) -> String {
        let r = self.roi.roi;
        let mut s = format!("fused {} over ROI {:?}..={:?} with {} windows\nwrote {}", self.case, r.lo, r.hi, self.windows, self.dir.display());
        if let Some(d) = &self.dsc {
            s += &format!("\nDSC: majority vote {:.4}, VFN {:.4}", d.mv, d.vfn);
        }
        s
    }
}

/// `case` is a corpus id or a directory holding `image.vgf` and the three
/// score files.
pub fn cmd_fuse(cfg: &RunConfig, case: &str, checkpoint: Option<&Path>) -> CliResult<FuseOutput> {
    let _lock = OutLock::acquire(&cfg.out)?;
    let timer = Timer::start();
    let default_ckpt = cfg.checkpoint();
    let (model, _) = load_model(cfg, checkpoint.unwrap_or(&default_ckpt))?;
    let as_dir = Path::new(case);
    let (dir, name) = if as_dir.join("image.vgf").is_file() {
        let name = as_dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "case".into());
        (as_dir.to_path_buf(), name)
    } else {
        (cfg.corpus.join(case), case.to_string())
    };
    let (input, gt) = load_inputs(&dir)?;
    let f = fuse_case(&input, &model, &cfg.hu_window)?;
    let dest = cfg.out.join("fused").join(&name);
    std::fs::create_dir_all(&dest)?;
    write_volume(&f.vfn_score, dest.join("vfn_score.vgf"))?;
    write_volume(&f.vfn, dest.join("vfn_mask.vgf"))?;
    write_volume(&f.mv, dest.join("mv_mask.vgf"))?;
    let out = FuseOutput {
        case: name,
        dsc: gt.as_ref().map(|g| CaseDsc::of(&f, g)).transpose()?,
        dir: dest,
        roi: f.roi,
        windows: f.windows,
        channels: model.config.in_channels,
    };
    write_json(&out.dir.join("fuse.json"), &out)?;
    timer.finish(&out.dir, "fuse")?;
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalOutput {
    pub checkpoint: PathBuf,
    pub cases: Vec<String>,
    pub views: [EvalReport; 3],
    pub mv: EvalReport,
    /// Carries the paired test against majority voting.
    pub vfn: EvalReport,
    /// Mean VFN Dice minus mean majority-vote Dice.
    pub gain: f64,
    pub tail: Tail,
}

impl EvalOutput {
    pub fn table(&self) -> String {
        let mut lines = vec![EvalReport::header()];
        for (r, name) in self.views.iter().zip(VIEWS) {
            lines.push(r.row(name));
        }
        lines.push(self.mv.row("majority vote"));
        lines.push(self.vfn.row("VFN"));
        lines.join("\n")
    }

    pub fn summary(&self) -> String {
        let mut s = format!("{}\n\n{} test cases, VFN gain over majority vote {:+.2} points", self.table(), self.cases.len(), 100.0 * self.gain);
        if let Some(t) = &self.vfn.vs_baseline {
            s += &format!(" (paired t = {:.3}, p = {:.4}, {:?} tail)", t.t, t.p, t.tail);
        }
        s
    }
}

/// Majority voting against the trained VFN over the test split. Reads the
/// corpus and writes only under `out`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> CliResult<EvalOutput> {
    let _lock = OutLock::acquire(&cfg.out)?;
    let timer = Timer::start();
    let ckpt = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| cfg.checkpoint());
    let (model, _) = load_model(cfg, &ckpt)?;
    let ids = manifest(cfg)?.ids(Split::Test);
    if ids.is_empty() {
        return Err(CliError::data("corpus has no test cases"));
    }
    let mut per_case = Vec::with_capacity(ids.len());
    for id in &ids {
        let (input, gt) = load_inputs(&cfg.corpus.join(id))?;
        let gt = gt.ok_or_else(|| CliError::data(format!("test case {id} has no gt.vgf")))?;
        let d = CaseDsc::of(&fuse_case(&input, &model, &cfg.hu_window)?, &gt)?;
        log::info!("{id}: majority vote {:.4}, VFN {:.4}", d.mv, d.vfn);
        per_case.push(d);
    }
    let [c, s, a] = [0, 1, 2].map(|v| EvalReport::from_scores(per_case.iter().map(|d| d.views[v]).collect()));
    let mv = EvalReport::from_scores(per_case.iter().map(|d| d.mv).collect())?;
    let vfn = EvalReport::from_scores(per_case.iter().map(|d| d.vfn).collect())?.compare(&mv, cfg.tail)?;
    let out = EvalOutput { checkpoint: ckpt, cases: ids, views: [c?, s?, a?], gain: vfn.mean - mv.mean, mv, vfn, tail: cfg.tail };
    write_json(&cfg.out.join("eval.json"), &out)?;
    std::fs::write(cfg.out.join("eval.txt"), out.table() + "\n")?;
    timer.finish(&cfg.out, "eval")?;
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct PlanOutput {
    pub plan: FoldPlan,
}

impl PlanOutput {
    pub fn summary(&self) -> String {
        let sizes: Vec<usize> = self.plan.folds.iter().map(Vec::len).collect();
        format!("K = {}: fold sizes {sizes:?}, {} extra models, {} generation jobs", self.plan.k, self.plan.models.len(), self.plan.jobs.len())
    }
}

/// Co-training plan over every corpus case.
pub fn cmd_plan(cfg: &RunConfig) -> CliResult<PlanOutput> {
    let _lock = OutLock::acquire(&cfg.out)?;
    let m = manifest(cfg)?;
    let ids: Vec<String> = m.cases.iter().map(|c| c.id.clone()).collect();
    let out = PlanOutput { plan: cca_plan(cfg.cca_k, &ids, cfg.seed)? };
    write_json(&cfg.out.join("plan.json"), &out.plan)?;
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct RfOutput {
    pub config: VfnConfig,
    pub receptive_field: usize,
    pub param_count: usize,
}

impl RfOutput {
    pub fn summary(&self) -> String {
        format!("receptive_field: {}\nparameters: {}", self.receptive_field, self.param_count)
    }
}

/// Without a run config this reports the canonical network.
pub fn cmd_rf(cfg: Option<&RunConfig>) -> CliResult<RfOutput> {
    let config = cfg.map(RunConfig::vfn_config).unwrap_or_default();
    let out = RfOutput { config, receptive_field: receptive_field(&config), param_count: config.param_count() };
    if let Some(cfg) = cfg {
        let _lock = OutLock::acquire(&cfg.out)?;
        write_json(&cfg.out.join("rf.json"), &out)?;
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckOutput {
    pub entries: Vec<SuiteEntry>,
    pub passed: bool,
}

impl GradcheckOutput {
    pub fn summary(&self) -> String {
        let mut lines: Vec<String> = self
            .entries
            .iter()
            .map(|e| {
                let mark = if e.passed { "ok  " } else { "FAIL" };
                format!("{mark} {:<32} max rel {:.2e} ({} checked, {} skipped)", e.name, e.report.max_rel_error, e.report.checked, e.report.skipped)
            })
            .collect();
        lines.push(if self.passed { "all gradients match".into() } else { "gradient check failed".into() });
        lines.join("\n")
    }
}

/// Runs the gradient suite; a failing entry is a numeric failure after the
/// report is written.
pub fn cmd_gradcheck(out: Option<&Path>) -> CliResult<GradcheckOutput> {
    let entries = full_suite()?;
    let passed = entries.iter().all(|e| e.passed);
    let res = GradcheckOutput { entries, passed };
    if let Some(dir) = out {
        let _lock = OutLock::acquire(dir)?;
        write_json(&dir.join("gradcheck.json"), &res)?;
    }
    Ok(res)
}

/// Exit code for a finished gradient check.
pub fn gradcheck_status(res: &GradcheckOutput) -> CliResult<()> {
    if res.passed {
        Ok(())
    } else {
        Err(CliError { code: EXIT_NUMERIC, message: "gradient check failed".into() })
    }
}
