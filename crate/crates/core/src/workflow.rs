//! Run configuration and the end-to-end subcommands.
//!
//! A run lives in one output directory:
//!
//! ```text
//! out/data/{train,eval}.dpds
//! out/teacher/{teacher.dpck,losses.csv,config.txt}
//! out/search/{schedule.csv,schedule.raw.csv,search.log,student.dpck,config.txt}
//! out/retrain/{student.dpck,report.txt,curve.csv,evals.csv,config.txt}
//! out/eval/{report.txt,config.txt}
//! out/export/{schedule.csv,schedule.raw.csv,interpolated.csv,interpolated.raw.csv,summary.txt,heatmap.csv,config.txt}
//! out/check-hypergrad/{report.txt,config.txt}
//! ```
//!
//! Every subcommand creates what it needs first (data, teacher, schedule)
//! when it is missing, and writes the fully resolved configuration next to
//! its outputs. Nothing written depends on wall-clock time.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::data::{self, Dataset, SynthTask};
use crate::error::{Error, Result};
use crate::losses::{LossSpec, Normalization, StudentState};
use crate::meta_search::{self, DistillProblem, EpsilonMode, SearchConfig, SearchOutcome};
use crate::networks::{self, Network, NetworkSpec, TrainConfig};
use crate::oracle::{self, OracleReport};
use crate::pathways::{FeatureDistance, PathwaySet, TransformKind};
use crate::retrain::{self, Guidance, RetrainConfig, RetrainReport};
use crate::rng::{self, Stream};
use crate::schedule::Schedule;

/// Which schedule a retrain follows.
#[derive(Clone, Debug, PartialEq)]
pub enum GuidanceChoice {
    /// The schedule produced by `search` in the same output directory.
    Searched,
    /// Every pathway weighted `1/P` at every step.
    Equal,
    /// No distillation.
    None,
    /// A schedule CSV at the given path (columns remapped by id).
    File(PathBuf),
}

impl GuidanceChoice {
    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "searched" => GuidanceChoice::Searched,
            "equal" => GuidanceChoice::Equal,
            "none" => GuidanceChoice::None,
            _ => match s.strip_prefix("file:") {
                Some(p) if !p.is_empty() => GuidanceChoice::File(PathBuf::from(p)),
                _ => {
                    return Err(Error::Config(format!(
                        "retrain.guidance {s:?} must be searched, equal, none or file:<path>"
                    )))
                }
            },
        })
    }
}

impl std::fmt::Display for GuidanceChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GuidanceChoice::Searched => f.write_str("searched"),
            GuidanceChoice::Equal => f.write_str("equal"),
            GuidanceChoice::None => f.write_str("none"),
            GuidanceChoice::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

/// Flat run configuration. Text form is one `key = value` per line with
/// `#` comments; see [`RunConfig::to_text`] for every key.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Import a DPDS file instead of generating data.
    pub data_train: Option<PathBuf>,
    pub data_eval: Option<PathBuf>,
    pub data_n: usize,
    pub data_eval_n: usize,
    pub data_classes: usize,
    pub data_size: usize,
    pub data_noise: f64,
    pub data_cycles: f64,
    pub teacher_channels: Vec<usize>,
    pub teacher: TrainConfig,
    /// Samples of the training set the teacher is trained on (0: all).
    pub teacher_subset: usize,
    pub student_channels: Vec<usize>,
    pub kinds: Vec<TransformKind>,
    pub search: SearchConfig,
    /// Samples of the training set visible to search and retrain (0: all).
    pub student_subset: usize,
    pub retrain: RetrainConfig,
    pub guidance: GuidanceChoice,
    pub hypergrad_h: f64,
    pub hypergrad_tol: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let search = SearchConfig::default();
        RunConfig {
            seed: 0,
            data_train: None,
            data_eval: None,
            data_n: 4096,
            data_eval_n: 1024,
            data_classes: 4,
            data_size: 16,
            data_noise: 0.05,
            data_cycles: 3.0,
            teacher_channels: vec![16, 32, 64],
            teacher: TrainConfig::default(),
            teacher_subset: 0,
            student_channels: vec![8, 16, 32],
            kinds: TransformKind::ALL.to_vec(),
            student_subset: 0,
            retrain: RetrainConfig {
                steps: search.retrain_steps,
                loss: search.loss_spec(),
                ..Default::default()
            },
            search,
            guidance: GuidanceChoice::Searched,
            hypergrad_h: 1e-4,
            hypergrad_tol: OracleReport::DEFAULT_TOL,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, found {v:?}"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|x| parse_num(key, x.trim())).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    /// Sets one key. The search and retrain seeds follow `seed`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let k = key.trim();
        match k {
            "seed" => self.seed = parse_num(k, v)?,
            "data.train" => self.data_train = opt_path(v),
            "data.eval" => self.data_eval = opt_path(v),
            "data.n" => self.data_n = parse_num(k, v)?,
            "data.eval_n" => self.data_eval_n = parse_num(k, v)?,
            "data.classes" => self.data_classes = parse_num(k, v)?,
            "data.size" => self.data_size = parse_num(k, v)?,
            "data.noise" => self.data_noise = parse_num(k, v)?,
            "data.cycles" => self.data_cycles = parse_num(k, v)?,
            "teacher.channels" => self.teacher_channels = parse_list(k, v)?,
            "teacher.epochs" => self.teacher.epochs = parse_num(k, v)?,
            "teacher.lr" => self.teacher.lr = parse_num(k, v)?,
            "teacher.momentum" => self.teacher.momentum = parse_num(k, v)?,
            "teacher.batch" => self.teacher.batch_size = parse_num(k, v)?,
            "teacher.subset" => self.teacher_subset = parse_num(k, v)?,
            "student.channels" => self.student_channels = parse_list(k, v)?,
            "student.subset" => self.student_subset = parse_num(k, v)?,
            "pathways.kinds" => self.kinds = parse_list(k, v)?,
            "search.gamma" => self.search.gamma = parse_num(k, v)?,
            "search.xi" => self.search.xi = parse_num(k, v)?,
            "search.epsilon" => self.search.epsilon = v.parse::<EpsilonMode>()?,
            "search.bias" => self.search.bias = parse_num(k, v)?,
            "search.tau" => self.search.tau = parse_num(k, v)?,
            "search.steps" => self.search.search_steps = parse_num(k, v)?,
            "search.split" => self.search.split_ratio = parse_num(k, v)?,
            "search.normalization" => self.search.normalization = v.parse::<Normalization>()?,
            "search.feature" => self.search.feature = v.parse::<FeatureDistance>()?,
            "search.clip" => self.search.clip = parse_bool(k, v)?,
            "search.batch" => self.search.batch_size = parse_num(k, v)?,
            "search.init_raw" => self.search.init_raw = parse_num(k, v)?,
            "retrain.steps" => self.retrain.steps = parse_num(k, v)?,
            "retrain.lr" => self.retrain.lr = parse_num(k, v)?,
            "retrain.momentum" => self.retrain.momentum = parse_num(k, v)?,
            "retrain.batch" => self.retrain.batch_size = parse_num(k, v)?,
            "retrain.clip" => self.retrain.loss.clip = parse_bool(k, v)?,
            "retrain.eval_every" => self.retrain.eval_every = parse_num(k, v)?,
            "retrain.guidance" => self.guidance = GuidanceChoice::parse(v)?,
            "hypergrad.h" => self.hypergrad_h = parse_num(k, v)?,
            "hypergrad.tol" => self.hypergrad_tol = parse_num(k, v)?,
            _ => return Err(Error::Config(format!("unknown key {k:?}"))),
        }
        self.sync();
        Ok(())
    }

    /// Propagates shared settings into the nested configs.
    fn sync(&mut self) {
        self.search.seed = self.seed;
        self.search.retrain_steps = self.retrain.steps;
        self.teacher.seed = self.seed;
        self.retrain.seed = self.seed;
        let clip = self.retrain.loss.clip;
        self.retrain.loss = LossSpec {
            clip,
            ..self.search.loss_spec()
        };
    }

    /// Parses `key = value` lines over the defaults.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(origin, Some(i + 1), "expected key = value"))?;
            cfg.set(k, v).map_err(|e| match e {
                Error::Config(msg) => Error::format(origin, Some(i + 1), msg),
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides(&mut self, sets: &[String]) -> Result<()> {
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {s:?} must be key=value")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.teacher_channels.is_empty() || self.student_channels.is_empty() {
            return Err(Error::Config("teacher.channels and student.channels must be non-empty".into()));
        }
        if self.kinds.is_empty() {
            return Err(Error::Config("pathways.kinds must be non-empty".into()));
        }
        if !(self.hypergrad_h > 0.0) {
            return Err(Error::Config(format!("hypergrad.h = {} must be positive", self.hypergrad_h)));
        }
        self.search.validate()?;
        self.retrain.validate()
    }

    /// Every key with its resolved value.
    pub fn to_text(&self) -> String {
        let s = &self.search;
        let r = &self.retrain;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let entries: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("data.train", path(&self.data_train)),
            ("data.eval", path(&self.data_eval)),
            ("data.n", self.data_n.to_string()),
            ("data.eval_n", self.data_eval_n.to_string()),
            ("data.classes", self.data_classes.to_string()),
            ("data.size", self.data_size.to_string()),
            ("data.noise", format!("{:?}", self.data_noise)),
            ("data.cycles", format!("{:?}", self.data_cycles)),
            ("teacher.channels", join(&self.teacher_channels)),
            ("teacher.epochs", self.teacher.epochs.to_string()),
            ("teacher.lr", format!("{:?}", self.teacher.lr)),
            ("teacher.momentum", format!("{:?}", self.teacher.momentum)),
            ("teacher.batch", self.teacher.batch_size.to_string()),
            ("teacher.subset", self.teacher_subset.to_string()),
            ("student.channels", join(&self.student_channels)),
            ("student.subset", self.student_subset.to_string()),
            ("pathways.kinds", join(&self.kinds)),
            ("search.gamma", format!("{:?}", s.gamma)),
            ("search.xi", format!("{:?}", s.xi)),
            ("search.epsilon", s.epsilon.to_string()),
            ("search.bias", format!("{:?}", s.bias)),
            ("search.tau", format!("{:?}", s.tau)),
            ("search.steps", s.search_steps.to_string()),
            ("search.split", format!("{:?}", s.split_ratio)),
            ("search.normalization", s.normalization.to_string()),
            ("search.feature", s.feature.to_string()),
            ("search.clip", s.clip.to_string()),
            ("search.batch", s.batch_size.to_string()),
            ("search.init_raw", format!("{:?}", s.init_raw)),
            ("retrain.steps", r.steps.to_string()),
            ("retrain.lr", format!("{:?}", r.lr)),
            ("retrain.momentum", format!("{:?}", r.momentum)),
            ("retrain.batch", r.batch_size.to_string()),
            ("retrain.clip", r.loss.clip.to_string()),
            ("retrain.eval_every", r.eval_every.to_string()),
            ("retrain.guidance", self.guidance.to_string()),
            ("hypergrad.h", format!("{:?}", self.hypergrad_h)),
            ("hypergrad.tol", format!("{:?}", self.hypergrad_tol)),
        ];
        let mut out = String::new();
        for (k, v) in entries {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }

    pub fn synth_task(&self, n: usize, seed: u64) -> SynthTask {
        SynthTask {
            n,
            num_classes: self.data_classes,
            size: self.data_size,
            noise: self.data_noise,
            cycles: self.data_cycles,
            seed,
        }
    }

    /// `(train, eval)` datasets, loaded or generated.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let train = match &self.data_train {
            Some(p) => Dataset::load(p)?,
            None => self.synth_task(self.data_n, self.seed).generate()?,
        };
        let eval = match &self.data_eval {
            Some(p) => Dataset::load(p)?,
            None => {
                let eval_seed = rng::stream(self.seed, Stream::EvalData).random::<u64>();
                self.synth_task(self.data_eval_n, eval_seed).generate()?
            }
        };
        if train.image_shape() != eval.image_shape() || train.num_classes() != eval.num_classes() {
            return Err(Error::Config("train and eval datasets disagree on image shape or classes".into()));
        }
        Ok((train, eval))
    }

    fn network_spec(channels: &[usize], data: &Dataset) -> NetworkSpec {
        let [_, h, _] = data.image_shape();
        let mut spec = NetworkSpec::staged(channels, h, data.num_classes());
        spec.input = data.image_shape();
        spec
    }

    pub fn teacher_spec(&self, data: &Dataset) -> NetworkSpec {
        Self::network_spec(&self.teacher_channels, data)
    }

    pub fn student_spec(&self, data: &Dataset) -> NetworkSpec {
        Self::network_spec(&self.student_channels, data)
    }

    /// The initial student and transform blocks. Search and retrain both
    /// start here.
    pub fn fresh_student(&self, data: &Dataset) -> Result<StudentState> {
        let s = self.student_spec(data);
        let t = self.teacher_spec(data);
        let net = Network::build(s.clone(), self.seed, Stream::StudentInit)?;
        let pathways = PathwaySet::enumerate(&s, &t, &self.kinds, self.seed)?;
        Ok(StudentState { net, pathways })
    }

    /// Leading `n` samples (`0`: all) of `data`.
    pub fn subset(data: &Dataset, n: usize) -> Result<Dataset> {
        if n == 0 || n >= data.len() {
            return Ok(data.clone());
        }
        data.subset(&(0..n).collect::<Vec<_>>())
    }
}

/// In-memory pipeline stages, used by the subcommands and directly by
/// tests and examples.
pub mod stages {
    use super::*;

    pub fn pretrain_teacher(cfg: &RunConfig, train: &Dataset) -> Result<(Network, Vec<f64>)> {
        let data = RunConfig::subset(train, cfg.teacher_subset)?;
        let net = Network::build(cfg.teacher_spec(train), cfg.seed, Stream::TeacherInit)?;
        networks::pretrain(net, &data, &cfg.teacher)
    }

    pub fn search(cfg: &RunConfig, train: &Dataset, teacher: &Network) -> Result<SearchOutcome> {
        let data = RunConfig::subset(train, cfg.student_subset)?;
        let split = data::split(&data, cfg.search.split_ratio, cfg.seed)?;
        meta_search::search(&cfg.search, &split, teacher, cfg.fresh_student(train)?)
    }

    pub fn equal_schedule(cfg: &RunConfig, student: &StudentState) -> Result<Schedule> {
        let p = student.pathways.len();
        // raw weights sit above any sensible clip threshold so nothing is skipped
        let raw = cfg.search.tau.max(0.0) + 1.0;
        Schedule::constant(student.pathways.ids(), 1.0 / p as f64, raw, cfg.retrain.steps)
    }

    pub fn retrain(
        cfg: &RunConfig,
        schedule: Option<&Schedule>,
        train: &Dataset,
        eval: &Dataset,
        teacher: &Network,
    ) -> Result<(StudentState, RetrainReport)> {
        let data = RunConfig::subset(train, cfg.student_subset)?;
        let student = cfg.fresh_student(train)?;
        let guidance = match schedule {
            Some(s) => Guidance::Schedule(s),
            None => Guidance::None,
        };
        retrain::retrain(guidance, &data, eval, teacher, student, &cfg.retrain)
    }

    /// Oracle comparison on the first search batch pair at the initial
    /// student with every raw weight at `cfg.search.init_raw`.
    pub fn check_hypergrad(cfg: &RunConfig, train: &Dataset, teacher: &Network) -> Result<OracleReport> {
        let data = RunConfig::subset(train, cfg.student_subset)?;
        let split = data::split(&data, cfg.search.split_ratio, cfg.seed)?;
        let student = cfg.fresh_student(train)?;
        let mut tb = data::BatchCycler::new(
            split.train.len(),
            cfg.search.batch_size,
            rng::stream(cfg.seed, Stream::SearchBatches),
        );
        let mut vb = data::BatchCycler::new(
            split.val.len(),
            cfg.search.batch_size,
            rng::stream(cfg.seed, Stream::SearchValBatches),
        );
        let tbatch = split.train.batch(&tb.next_indices());
        let vbatch = split.val.batch(&vb.next_indices());
        let mut problem = DistillProblem::new(&student, teacher, cfg.search.loss_spec(), tbatch, vbatch)?;
        let theta = student.theta();
        let raw = vec![cfg.search.init_raw; student.pathways.len()];
        let hg = meta_search::hypergradient(&mut problem, &theta, &raw, cfg.search.xi, cfg.search.epsilon)?;
        let oracle = oracle::brute_force_hypergradient(&mut problem, &theta, &raw, cfg.search.xi, cfg.hypergrad_h)?;
        OracleReport::compare_with(
            &hg.grad,
            &oracle,
            cfg.hypergrad_tol,
            OracleReport::DEFAULT_FLOOR,
            OracleReport::DEFAULT_MIN_COSINE,
        )
    }
}

/// Paths inside an output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn dir(&self, sub: &str) -> PathBuf {
        self.root.join(sub)
    }

    pub fn train_data(&self) -> PathBuf {
        self.dir("data").join("train.dpds")
    }

    pub fn eval_data(&self) -> PathBuf {
        self.dir("data").join("eval.dpds")
    }

    pub fn teacher(&self) -> PathBuf {
        self.dir("teacher").join("teacher.dpck")
    }

    pub fn schedule(&self) -> PathBuf {
        self.dir("search").join("schedule.csv")
    }

    pub fn student(&self) -> PathBuf {
        self.dir("retrain").join("student.dpck")
    }
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn prepare(cfg: &RunConfig, layout: &Layout, sub: &str) -> Result<PathBuf> {
    let dir = layout.dir(sub);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write(&dir.join("config.txt"), cfg.to_text())?;
    Ok(dir)
}

/// What a subcommand produced, for the caller to print.
#[derive(Clone, Debug, Default)]
pub struct Summary {
    pub lines: Vec<String>,
    /// `false` when a check ran to completion but did not pass.
    pub ok: bool,
}

impl Summary {
    fn new() -> Self {
        Summary {
            lines: Vec::new(),
            ok: true,
        }
    }

    fn line(&mut self, s: impl Into<String>) {
        self.lines.push(s.into());
    }
}

/// Writes the train and eval datasets.
pub fn gen_data(cfg: &RunConfig, layout: &Layout) -> Result<Summary> {
    cfg.validate()?;
    prepare(cfg, layout, "data")?;
    let (train, eval) = cfg.datasets()?;
    train.save(&layout.train_data())?;
    eval.save(&layout.eval_data())?;
    let mut s = Summary::new();
    s.line(format!("train={} samples={}", layout.train_data().display(), train.len()));
    s.line(format!("eval={} samples={}", layout.eval_data().display(), eval.len()));
    Ok(s)
}

fn load_data(cfg: &RunConfig, layout: &Layout) -> Result<(Dataset, Dataset)> {
    if !layout.train_data().exists() || !layout.eval_data().exists() {
        gen_data(cfg, layout)?;
    }
    Ok((Dataset::load(&layout.train_data())?, Dataset::load(&layout.eval_data())?))
}

/// Trains the teacher on the training set.
pub fn pretrain(cfg: &RunConfig, layout: &Layout) -> Result<Summary> {
    cfg.validate()?;
    let (train, eval) = load_data(cfg, layout)?;
    let dir = prepare(cfg, layout, "teacher")?;
    let (teacher, losses) = stages::pretrain_teacher(cfg, &train)?;
    teacher.save(&layout.teacher())?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(csv, "{i},{l:?}").unwrap();
    }
    write(&dir.join("losses.csv"), csv)?;
    let (acc, loss) = retrain::evaluate(&teacher, &eval)?;
    let report = format!("accuracy={acc:?}\nloss={loss:?}\nparams={}\nsteps={}\n", teacher.num_params(), losses.len());
    write(&dir.join("report.txt"), &report)?;
    let mut s = Summary::new();
    s.line(format!("teacher={} eval_accuracy={acc:.4} eval_loss={loss:.4}", layout.teacher().display()));
    Ok(s)
}

fn load_teacher(cfg: &RunConfig, layout: &Layout) -> Result<Network> {
    if !layout.teacher().exists() {
        pretrain(cfg, layout)?;
    }
    Network::load(&layout.teacher())
}

/// Runs the search and writes the schedule and the step log. On failure the
/// partial schedule is still written.
pub fn search(cfg: &RunConfig, layout: &Layout) -> Result<Summary> {
    cfg.validate()?;
    let (train, _) = load_data(cfg, layout)?;
    let teacher = load_teacher(cfg, layout)?;
    let dir = prepare(cfg, layout, "search")?;
    let outcome = match stages::search(cfg, &train, &teacher) {
        Ok(o) => o,
        Err(Error::Search { step, partial, source }) => {
            partial.save(&layout.schedule())?;
            return Err(Error::Search { step, partial, source });
        }
        Err(e) => return Err(e),
    };
    outcome.schedule.save(&layout.schedule())?;
    let log: String = outcome.log.iter().map(|l| format!("{l}\n")).collect();
    write(&dir.join("search.log"), log)?;
    outcome.student.net.save(&dir.join("student.dpck"))?;
    let mut s = Summary::new();
    s.line(format!(
        "schedule={} rows={} pathways={}",
        layout.schedule().display(),
        outcome.schedule.len(),
        outcome.schedule.num_pathways()
    ));
    if let Some(last) = outcome.log.last() {
        s.line(last.to_string());
    }
    Ok(s)
}

fn resolve_schedule(cfg: &RunConfig, layout: &Layout, student: &StudentState) -> Result<Option<Schedule>> {
    let ids = student.pathways.ids();
    let stretch = |s: Schedule| -> Result<Schedule> {
        if s.len() == cfg.retrain.steps {
            Ok(s)
        } else {
            s.interpolate(cfg.retrain.steps)
        }
    };
    Ok(match &cfg.guidance {
        GuidanceChoice::None => None,
        GuidanceChoice::Equal => Some(stages::equal_schedule(cfg, student)?),
        GuidanceChoice::Searched => {
            if !layout.schedule().exists() {
                search(cfg, layout)?;
            }
            // column order must already match; a mismatch is a config error
            Some(stretch(Schedule::load(&layout.schedule())?)?)
        }
        GuidanceChoice::File(p) => Some(stretch(Schedule::load_for(p, &ids)?)?),
    })
}

/// Retrains a fresh student under the configured guidance.
pub fn retrain(cfg: &RunConfig, layout: &Layout) -> Result<Summary> {
    cfg.validate()?;
    let (train, eval) = load_data(cfg, layout)?;
    let teacher = if cfg.guidance == GuidanceChoice::None {
        None
    } else {
        Some(load_teacher(cfg, layout)?)
    };
    let student = cfg.fresh_student(&train)?;
    let schedule = resolve_schedule(cfg, layout, &student)?;
    if let Some(s) = &schedule {
        retrain::check_schedule(s, &student, cfg.retrain.steps)?;
    }
    let dir = prepare(cfg, layout, "retrain")?;
    // without guidance the teacher is never run; any network satisfies the signature
    let teacher = match teacher {
        Some(t) => t,
        None => student.net.clone(),
    };
    let (trained, report) = stages::retrain(cfg, schedule.as_ref(), &train, &eval, &teacher)?;
    trained.net.save(&layout.student())?;
    report.save(&dir)?;
    let mut s = Summary::new();
    s.line(format!(
        "student={} guidance={} accuracy={:.4} loss={:.4}",
        layout.student().display(),
        cfg.guidance,
        report.accuracy,
        report.loss
    ));
    Ok(s)
}

/// Evaluates the teacher and, when present, the retrained student.
pub fn eval(cfg: &RunConfig, layout: &Layout) -> Result<Summary> {
    cfg.validate()?;
    let (_, eval) = load_data(cfg, layout)?;
    let teacher = load_teacher(cfg, layout)?;
    let dir = prepare(cfg, layout, "eval")?;
    let mut report = String::new();
    let mut s = Summary::new();
    let mut nets = vec![("teacher", teacher)];
    if layout.student().exists() {
        nets.push(("student", Network::load(&layout.student())?));
    }
    for (name, net) in &nets {
        let (acc, loss) = retrain::evaluate(net, &eval)?;
        writeln!(report, "{name}.accuracy={acc:?}\n{name}.loss={loss:?}").unwrap();
        s.line(format!("{name} accuracy={acc:.4} loss={loss:.4}"));
    }
    write(&dir.join("report.txt"), report)?;
    Ok(s)
}

/// Copies the searched schedule, its interpolation to the retrain length,
/// a per-pathway summary and heat-map data.
pub fn export_schedule(cfg: &RunConfig, layout: &Layout) -> Result<Summary> {
    cfg.validate()?;
    if !layout.schedule().exists() {
        search(cfg, layout)?;
    }
    let sched = Schedule::load(&layout.schedule())?;
    let dir = prepare(cfg, layout, "export")?;
    sched.save(&dir.join("schedule.csv"))?;
    if !sched.is_empty() {
        sched.interpolate(cfg.retrain.steps)?.save(&dir.join("interpolated.csv"))?;
    }
    let table = sched.summary_table();
    write(&dir.join("summary.txt"), &table)?;
    write(&dir.join("heatmap.csv"), sched.heatmap_csv())?;
    let mut s = Summary::new();
    s.lines.extend(table.lines().map(str::to_string));
    Ok(s)
}

/// Compares the finite-difference hypergradient with the brute-force
/// oracle and writes the report.
pub fn check_hypergrad(cfg: &RunConfig, layout: &Layout) -> Result<Summary> {
    cfg.validate()?;
    let (train, _) = load_data(cfg, layout)?;
    let teacher = load_teacher(cfg, layout)?;
    let dir = prepare(cfg, layout, "check-hypergrad")?;
    let report = stages::check_hypergrad(cfg, &train, &teacher)?;
    write(&dir.join("report.txt"), format!("{report}\n"))?;
    let mut s = Summary::new();
    s.lines.extend(report.to_string().lines().map(str::to_string));
    s.ok = report.passed();
    Ok(s)
}

/// The subcommands by name.
pub const SUBCOMMANDS: [&str; 7] = [
    "gen-data",
    "pretrain",
    "search",
    "retrain",
    "eval",
    "export-schedule",
    "check-hypergrad",
];

pub fn run(subcommand: &str, cfg: &RunConfig, layout: &Layout) -> Result<Summary> {
    match subcommand {
        "gen-data" => gen_data(cfg, layout),
        "pretrain" => pretrain(cfg, layout),
        "search" => search(cfg, layout),
        "retrain" => retrain(cfg, layout),
        "eval" => eval(cfg, layout),
        "export-schedule" => export_schedule(cfg, layout),
        "check-hypergrad" => check_hypergrad(cfg, layout),
        other => Err(Error::Config(format!("unknown subcommand {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&["search.steps=7".into(), "retrain.guidance=file:a/b.csv".into()])
            .unwrap();
        let back = RunConfig::parse(&cfg.to_text(), "cfg").unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.search.search_steps, 7);
    }

    #[test]
    fn rejects_unknown_keys_with_line() {
        let err = RunConfig::parse("seed = 1\n# note\nsearch.gama = 0.1\n", "toy.cfg").unwrap_err();
        match err {
            Error::Format { line: Some(3), msg, .. } => assert!(msg.contains("search.gama")),
            other => panic!("{other:?}"),
        }
        assert!(RunConfig::parse("seed 1\n", "x").is_err());
        assert!(RunConfig::default().apply_overrides(&["nokey".into()]).is_err());
    }

    #[test]
    fn seed_propagates() {
        let mut cfg = RunConfig::default();
        cfg.set("seed", "9").unwrap();
        assert_eq!(cfg.search.seed, 9);
        assert_eq!(cfg.retrain.seed, 9);
        cfg.set("search.feature", "l1").unwrap();
        assert_eq!(cfg.retrain.loss.feature, FeatureDistance::L1);
    }
}
