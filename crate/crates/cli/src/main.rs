use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Stdio};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use neutral_residues::backbone::LanguageModel;
use neutral_residues::eval::EvalReport;
use neutral_residues::experiment::{self, RunConfig};
use neutral_residues::extension::{ExtensionConfig, GateKind, InitScheme, Method};
use neutral_residues::report::{self, RunInfo, METRICS_FILE, RUN_FILE};
use neutral_residues::spectral::{backbone_spectra, gating_spectra, SpectrumReport};
use neutral_residues::training::checkpoint::{load_checkpoint, save_backbone, save_extended, LoadedModel};
use neutral_residues::training::{default_lr, evaluate};

const CHECKPOINT_FILE: &str = "model.ckpt";
const SPECTRA_FILE: &str = "spectra.csv";
const TRADEOFF_FILE: &str = "tradeoff.csv";
const CONFIG_FILE: &str = "config.json";
const EVAL_FILE: &str = "eval.json";
const SEED_ENV: &str = "NRES_SEED";

#[derive(Parser)]
#[command(
    name = "nres",
    version,
    about = "Extend a pretrained language model without forgetting"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pretrain a backbone on the original-domain corpus.
    TrainBackbone {
        #[command(flatten)]
        common: Common,
    },
    /// Extend a backbone toward the new domain.
    Extend {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ext: ExtendFlags,
    },
    /// Held-out NLL of a checkpoint on both domains.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Singular values of the gating matrices of a checkpoint.
    Spectra {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-product grid of extension runs followed by a tradeoff table.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Backbone checkpoint shared by every run.
        #[arg(long)]
        backbone: PathBuf,
        /// JSON grid: lists under method, lr, alpha, p and budget.
        #[arg(long)]
        grid: PathBuf,
        /// Parallel worker processes; defaults to the number of cores.
        #[arg(long)]
        jobs: Option<usize>,
    },
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for initialization and batch sampling. NRES_SEED is used when
    /// this flag is absent.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the number of optimizer steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Text file replacing the original-domain language.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Text file replacing the new-domain language.
    #[arg(long)]
    new_corpus: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct ExtendFlags {
    /// Backbone checkpoint written by train-backbone.
    #[arg(long)]
    backbone: Option<PathBuf>,
    /// Resets the extension to a bare configuration of this method before
    /// the other flags apply.
    #[arg(long)]
    method: Option<Method>,
    /// Block gate on each adapter.
    #[arg(long)]
    gate: Option<GateKind>,
    /// Adds the l1 local loss on original-domain tokens.
    #[arg(long)]
    l1: bool,
    /// Adds the gate cross-entropy loss (sigmoid gate only).
    #[arg(long)]
    ce: bool,
    /// Weight of the local losses.
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f64>,
    /// Fraction of training sequences drawn from the original domain.
    #[arg(long, allow_negative_numbers = true)]
    p: Option<f64>,
    /// Peak learning rate; defaults per method.
    #[arg(long, allow_negative_numbers = true)]
    lr: Option<f64>,
    /// Extra trainable weights as a fraction of the backbone size.
    #[arg(long)]
    budget: Option<f64>,
    /// Adapter initialization.
    #[arg(long)]
    init: Option<InitScheme>,
}

/// Failure classes mapped onto exit codes.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
}

impl From<neutral_residues::Error> for Failure {
    fn from(e: neutral_residues::Error) -> Self {
        use neutral_residues::Error as E;
        match e {
            E::Config(_) | E::Parse { .. } => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::TrainBackbone { common } => train_backbone(&common),
        Cmd::Extend { common, ext } => extend(&common, &ext),
        Cmd::Eval { common, model } => eval(&common, &model),
        Cmd::Spectra { model, out } => spectra(&model, &out),
        Cmd::Sweep {
            common,
            backbone,
            grid,
            jobs,
        } => sweep(&common, &backbone, &grid, jobs),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Usage(msg) | Failure::Runtime(msg)) = &f;
            eprintln!("error: {msg}");
            ExitCode::from(f.code())
        }
    }
}

fn read_config(path: Option<&Path>) -> CliResult<(RunConfig, bool)> {
    let Some(path) = path else {
        return Ok((RunConfig::default(), false));
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let cfg = RunConfig::from_json(&text)
        .map_err(|e| Failure::Usage(format!("{}: invalid key `{}`: {}", path.display(), e.path(), e.inner())))?;
    let lr_given = serde_json::from_str::<serde_json::Value>(&text)
        .ok()
        .is_some_and(|v| v.pointer("/train/lr").is_some());
    Ok((cfg, lr_given))
}

/// Applies the flags shared by every command, then `NRES_SEED` and
/// `--seed` in that order.
fn resolve(common: &Common) -> CliResult<(RunConfig, bool)> {
    let (mut cfg, lr_given) = read_config(common.config.as_deref())?;
    if let Some(steps) = common.steps {
        cfg.pretrain.total_steps = steps;
        cfg.train.total_steps = steps;
        cfg.pretrain.warmup_steps = cfg.pretrain.warmup_steps.min(steps);
        cfg.train.warmup_steps = cfg.train.warmup_steps.min(steps);
        cfg.pretrain.eval_interval = cfg.pretrain.eval_interval.min(steps).max(1);
        cfg.train.eval_interval = cfg.train.eval_interval.min(steps).max(1);
    }
    if let Some(path) = &common.corpus {
        cfg.data.original_path = Some(path.clone());
    }
    if let Some(path) = &common.new_corpus {
        cfg.data.new_path = Some(path.clone());
    }
    let env_seed = match std::env::var(SEED_ENV) {
        Ok(s) => Some(
            s.trim()
                .parse::<u64>()
                .map_err(|_| Failure::Usage(format!("{SEED_ENV}={s} is not an unsigned integer")))?,
        ),
        Err(_) => None,
    };
    if let Some(seed) = common.seed.or(env_seed) {
        cfg.pretrain.seed = seed;
        cfg.train.seed = seed;
    }
    Ok((cfg, lr_given))
}

fn bare_extension(method: Method) -> ExtensionConfig {
    match method {
        Method::Finetune => ExtensionConfig::finetune(),
        Method::Lora => ExtensionConfig::lora(),
        Method::Adapter => ExtensionConfig {
            method,
            gate: GateKind::None,
            use_l1_loss: false,
            use_ce_loss: false,
            ..ExtensionConfig::neutral_residues()
        },
    }
}

fn apply_extension_flags(cfg: &mut RunConfig, flags: &ExtendFlags, mut lr_given: bool) -> CliResult<()> {
    if let Some(method) = flags.method {
        cfg.extension = bare_extension(method);
    }
    let ext = &mut cfg.extension;
    if let Some(gate) = flags.gate {
        ext.gate = gate;
    }
    ext.use_l1_loss |= flags.l1;
    ext.use_ce_loss |= flags.ce;
    match flags.alpha {
        Some(alpha) => ext.alpha = alpha,
        None if flags.method.is_some() && !ext.use_l1_loss && !ext.use_ce_loss => ext.alpha = 0.0,
        None => {}
    }
    if let Some(budget) = flags.budget {
        ext.budget_fraction = budget;
    }
    if let Some(init) = flags.init {
        ext.init_scheme = init;
    }
    if let Some(p) = flags.p {
        cfg.train.p = p;
    }
    if let Some(lr) = flags.lr {
        cfg.train.lr = lr;
        lr_given = true;
    }
    if !lr_given {
        cfg.train.lr = default_lr(cfg.extension.method);
    }
    cfg.extension.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(())
}

fn out_dir(common: &Common) -> CliResult<&Path> {
    let out = common
        .out
        .as_deref()
        .ok_or_else(|| Failure::Usage("--out is required".into()))?;
    std::fs::create_dir_all(out).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", out.display())))?;
    Ok(out)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn write_config(out: &Path, cfg: &RunConfig) -> CliResult<()> {
    let text = serde_json::to_string_pretty(cfg).expect("config serializes");
    write_file(&out.join(CONFIG_FILE), text + "\n")
}

fn progress(label: &str) -> impl FnMut(&EvalReport) -> neutral_residues::Result<()> + '_ {
    move |r| {
        eprintln!(
            "[{label}] step {:>6}  lr {:.2e}  loss {:.4}  nll_old {:.4}  nll_new {:.4}",
            r.step, r.lr, r.lm_loss, r.nll_old, r.nll_new
        );
        Ok(())
    }
}

fn load(path: &Path) -> CliResult<(LoadedModel<f32>, usize)> {
    if !path.exists() {
        return Err(Failure::Usage(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(load_checkpoint(path)?)
}

fn train_backbone(common: &Common) -> CliResult<()> {
    let (cfg, _) = resolve(common)?;
    cfg.validate()?;
    let out = out_dir(common)?;
    write_config(out, &cfg)?;
    let data = cfg.data.build(cfg.pretrain.seq_len)?;
    let (model, reports) = experiment::pretrain::<f32>(&cfg.model, &cfg.pretrain, &data, &mut progress("pretrain"))?;
    save_backbone(&model, cfg.pretrain.total_steps, &out.join(CHECKPOINT_FILE))?;
    write_file(&out.join(METRICS_FILE), report::metrics_jsonl(&reports))?;
    write_file(&out.join(SPECTRA_FILE), backbone_spectra(&model)?.to_csv())?;
    Ok(())
}

fn extend(common: &Common, flags: &ExtendFlags) -> CliResult<()> {
    let (mut cfg, lr_given) = resolve(common)?;
    apply_extension_flags(&mut cfg, flags, lr_given)?;
    let backbone_path = flags
        .backbone
        .as_deref()
        .ok_or_else(|| Failure::Usage("--backbone is required".into()))?;
    let (loaded, _) = load(backbone_path)?;
    let backbone = loaded.into_backbone()?;
    cfg.model = backbone.config.clone();
    cfg.validate()?;
    let out = out_dir(common)?;
    write_config(out, &cfg)?;
    let info = RunInfo {
        method: cfg.extension.label(),
        lr: cfg.train.lr,
        p: cfg.train.p,
        alpha: cfg.extension.alpha,
        budget: cfg.extension.budget_fraction,
    };
    write_file(
        &out.join(RUN_FILE),
        serde_json::to_string_pretty(&info).expect("run info serializes") + "\n",
    )?;
    let data = cfg.data.build(cfg.train.seq_len)?;
    let label = cfg.extension.label();
    let (model, reports) = experiment::extend(&backbone, &cfg.extension, &cfg.train, &data, &mut progress(&label))?;
    save_extended(&model, cfg.train.total_steps, &out.join(CHECKPOINT_FILE))?;
    write_file(&out.join(METRICS_FILE), report::metrics_jsonl(&reports))?;
    write_file(
        &out.join(SPECTRA_FILE),
        spectra_of(&LoadedModel::Extended(model))?.to_csv(),
    )?;
    Ok(())
}

fn eval(common: &Common, model_path: &Path) -> CliResult<()> {
    let (mut cfg, _) = resolve(common)?;
    let (model, step) = load(model_path)?;
    cfg.model = model.model_config().clone();
    cfg.validate()?;
    let data = cfg.data.build(cfg.train.seq_len)?;
    let (nll_old, nll_new) = evaluate(&model, &data, &cfg.train)?;
    let report = EvalReport {
        step,
        lr: 0.0,
        nll_old,
        nll_new,
        ppl_old: nll_old.exp(),
        ppl_new: nll_new.exp(),
        lm_loss: 0.0,
        local_l1: 0.0,
        local_ce: 0.0,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    match &common.out {
        Some(_) => write_file(&out_dir(common)?.join(EVAL_FILE), &json)?,
        None => print!("{json}"),
    }
    Ok(())
}

fn spectra_of(model: &LoadedModel<f32>) -> CliResult<SpectrumReport> {
    Ok(match model {
        LoadedModel::Backbone(m) => backbone_spectra(m)?,
        LoadedModel::Extended(m) => gating_spectra(m)?,
    })
}

fn spectra(model_path: &Path, out: &Path) -> CliResult<()> {
    let (model, _) = load(model_path)?;
    let report = spectra_of(&model)?;
    std::fs::create_dir_all(out).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", out.display())))?;
    write_file(&out.join(SPECTRA_FILE), report.to_csv())
}

/// Axes of a sweep. Absent axes take the value of the base configuration;
/// an absent `lr` takes the default of each method.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Grid {
    method: Vec<Preset>,
    lr: Vec<f64>,
    alpha: Vec<f64>,
    p: Vec<f64>,
    budget: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Preset {
    Finetune,
    Lora,
    VanillaAdapter,
    NeutralResidues,
}

impl Preset {
    fn flags(self) -> Vec<String> {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
        match self {
            Preset::Finetune => s(&["--method", "finetune"]),
            Preset::Lora => s(&["--method", "lora"]),
            Preset::VanillaAdapter => s(&["--method", "adapter", "--gate", "none", "--init", "he"]),
            Preset::NeutralResidues => s(&["--method", "adapter", "--gate", "relu", "--l1"]),
        }
    }
}

fn axis(values: &[f64], fallback: Option<f64>) -> Vec<Option<f64>> {
    if values.is_empty() {
        vec![fallback]
    } else {
        values.iter().map(|&v| Some(v)).collect()
    }
}

fn sweep(common: &Common, backbone: &Path, grid_path: &Path, jobs: Option<usize>) -> CliResult<()> {
    let text = std::fs::read_to_string(grid_path)
        .map_err(|e| Failure::Usage(format!("cannot read grid {}: {e}", grid_path.display())))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let grid: Grid = serde_path_to_error::deserialize(de).map_err(|e| {
        Failure::Usage(format!(
            "{}: invalid key `{}`: {}",
            grid_path.display(),
            e.path(),
            e.inner()
        ))
    })?;
    if !backbone.exists() {
        return Err(Failure::Usage(format!(
            "checkpoint {} does not exist",
            backbone.display()
        )));
    }
    // Validates the base configuration before any worker starts.
    resolve(common)?;
    let out = out_dir(common)?;

    let methods: Vec<Option<Preset>> = if grid.method.is_empty() {
        vec![None]
    } else {
        grid.method.iter().map(|&m| Some(m)).collect()
    };
    let mut runs: Vec<Vec<String>> = Vec::new();
    for &method in &methods {
        for &lr in &axis(&grid.lr, None) {
            for &alpha in &axis(&grid.alpha, None) {
                for &p in &axis(&grid.p, None) {
                    for &budget in &axis(&grid.budget, None) {
                        let mut args = method.map(Preset::flags).unwrap_or_default();
                        for (flag, v) in [("--lr", lr), ("--alpha", alpha), ("--p", p), ("--budget", budget)] {
                            if let Some(v) = v {
                                args.push(flag.into());
                                args.push(v.to_string());
                            }
                        }
                        runs.push(args);
                    }
                }
            }
        }
    }

    let exe = std::env::current_exe().map_err(|e| Failure::Runtime(format!("cannot locate executable: {e}")))?;
    let jobs = jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1);
    let dirs: Vec<PathBuf> = (0..runs.len()).map(|i| out.join(format!("run-{i:03}"))).collect();
    let mut pending = runs.iter().zip(&dirs).enumerate();
    let mut active: Vec<(usize, std::process::Child)> = Vec::new();
    let mut failed: Vec<String> = Vec::new();
    loop {
        while active.len() < jobs {
            let Some((i, (args, dir))) = pending.next() else { break };
            std::fs::create_dir_all(dir)
                .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))?;
            let log = std::fs::File::create(dir.join("log.txt"))
                .map_err(|e| Failure::Runtime(format!("cannot create log in {}: {e}", dir.display())))?;
            let mut cmd = Command::new(&exe);
            cmd.arg("extend").arg("--backbone").arg(backbone).arg("--out").arg(dir);
            if let Some(c) = &common.config {
                cmd.arg("--config").arg(c);
            }
            if let Some(s) = common.seed {
                cmd.arg("--seed").arg(s.to_string());
            }
            if let Some(s) = common.steps {
                cmd.arg("--steps").arg(s.to_string());
            }
            if let Some(c) = &common.corpus {
                cmd.arg("--corpus").arg(c);
            }
            if let Some(c) = &common.new_corpus {
                cmd.arg("--new-corpus").arg(c);
            }
            cmd.args(args);
            let stderr = log
                .try_clone()
                .map_err(|e| Failure::Runtime(format!("cannot share log handle: {e}")))?;
            let child = cmd
                .stdout(Stdio::from(log))
                .stderr(Stdio::from(stderr))
                .spawn()
                .map_err(|e| Failure::Runtime(format!("cannot start worker: {e}")))?;
            eprintln!("[sweep] started {} ({})", dir.display(), runs[i].join(" "));
            active.push((i, child));
        }
        if active.is_empty() {
            break;
        }
        let (i, mut child) = active.remove(0);
        let status = child
            .wait()
            .map_err(|e| Failure::Runtime(format!("worker {i} lost: {e}")))?;
        if !status.success() {
            failed.push(format!("{} ({status})", dirs[i].display()));
        }
    }
    if !failed.is_empty() {
        return Err(Failure::Runtime(format!("sweep runs failed: {}", failed.join(", "))));
    }
    let rows = report::tradeoff_table(&dirs)?;
    write_file(&out.join(TRADEOFF_FILE), report::tradeoff_csv(&rows))?;
    print!("{}", report::tradeoff_text(&rows));
    Ok(())
}
