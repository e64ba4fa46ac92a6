use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pcbench::attack::{load_adv_set, save_adv_set};
use pcbench::bench::{
    ablation_run, attack_phase, emit_reports, evaluate_sets, run_grid_with, summarize_set, train_phase,
    AttackSet, BenchConfig, Data, GridResult, ReportFormat, Store,
};
use pcbench::model::save_model;
use pcbench::Error;

/// Environment variable naming the default output directory.
const OUT_ENV: &str = "PCBENCH_OUT";

#[derive(Parser)]
#[command(name = "pcbench", version, about = "Adversarial robustness benchmark for point-cloud classifiers")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args, Clone)]
struct Common {
    /// Grid configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [default: config `out`, then $PCBENCH_OUT, then ./pcbench-out].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report formats to write (repeatable) [default: all].
    #[arg(long, value_parser = ["csv", "records", "table"])]
    format: Vec<String>,
    /// Worker threads.
    #[arg(long)]
    jobs: Option<usize>,
    /// Config override `key.path=value` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Do not read or write the on-disk cache under <out>/cache.
    #[arg(long)]
    no_cache: bool,
}

#[derive(Subcommand)]
enum Verb {
    /// Train the surrogates and every victim under every defense recipe.
    Train(Common),
    /// Generate the attack sets against the surrogate.
    Attack(Common),
    /// Evaluate defenses and victims on attack sets written by `attack`.
    DefendEval {
        #[command(flatten)]
        common: Common,
        /// Directory of attack sets [default: <out>/attacks].
        #[arg(long)]
        attacks: Option<PathBuf>,
    },
    /// Run the whole protocol and write grid.json plus reports.
    Grid(Common),
    /// One grid per combination of removed defense components.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Component to toggle (a stage name or a training recipe name).
        #[arg(long = "toggle")]
        toggles: Vec<String>,
    },
    /// Render reports from a saved grid.json.
    Report {
        #[command(flatten)]
        common: Common,
        /// Saved result [default: <out>/grid.json].
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

struct Ctx {
    config: Option<BenchConfig>,
    out: PathBuf,
    formats: Vec<ReportFormat>,
    store: Store,
}

impl Ctx {
    fn new(c: &Common, needs_config: bool) -> Result<Self, Error> {
        if let Some(n) = c.jobs {
            if n == 0 {
                return Err(Error::Config("--jobs must be at least 1".into()));
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        }
        let config = match &c.config {
            Some(path) => {
                let mut overrides = c.overrides.clone();
                if let Some(seed) = c.seed {
                    overrides.push(format!("seed={seed}"));
                }
                Some(BenchConfig::load(path, &overrides)?)
            }
            None if needs_config => return Err(Error::Config("--config is required for this verb".into())),
            None => None,
        };
        let out = c
            .out
            .clone()
            .or_else(|| config.as_ref().and_then(|cfg| cfg.out.clone()))
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("pcbench-out"));
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let formats = if c.format.is_empty() {
            ReportFormat::ALL.to_vec()
        } else {
            c.format.iter().map(|f| f.parse()).collect::<Result<_, _>>()?
        };
        let store = if c.no_cache {
            Store::memory()
        } else {
            Store::on_disk(out.join("cache"))
        };
        Ok(Self {
            config,
            out,
            formats,
            store,
        })
    }

    fn config(&self) -> &BenchConfig {
        self.config.as_ref().expect("checked in Ctx::new")
    }

    fn write(&self, name: &str, text: &str) -> Result<PathBuf, Error> {
        let path = self.out.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    fn finish(&self, result: &GridResult, dir: &Path) -> Result<(), Error> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("grid.json");
        fs::write(&json, result.to_json()?).map_err(|e| Error::io(&json, e))?;
        println!("{}", json.display());
        for p in emit_reports(result, &self.formats, dir)? {
            println!("{}", p.display());
        }
        Ok(())
    }
}

fn train(ctx: &Ctx) -> Result<(), Error> {
    let cfg = ctx.config();
    let data = Data::load(cfg)?;
    let trained = train_phase(cfg, &data, &ctx.store, true)?;
    let dir = ctx.out.join("models");
    for (id, model) in &trained.surrogates {
        save_model(model, &dir.join(format!("{id}.model")))?;
    }
    for v in &trained.victims {
        v.save(&dir.join(format!("{}.{}.model", v.id(), v.recipe().name())))?;
    }
    for r in &trained.records {
        let line = serde_json::json!({
            "id": r.id,
            "role": r.role,
            "recipe": r.recipe.name(),
            "test_accuracy": r.test_accuracy,
            "key": r.key,
        });
        println!("{line}");
    }
    Ok(())
}

fn attack(ctx: &Ctx) -> Result<(), Error> {
    let cfg = ctx.config();
    let data = Data::load(cfg)?;
    let mut only = cfg.clone();
    only.victims.clear();
    let trained = train_phase(&only, &data, &ctx.store, true)?;
    let key = &trained.records.iter().find(|r| r.id == cfg.surrogate).expect("trained").key;
    let surrogate = trained.surrogate(&cfg.surrogate)?;
    let sets = attack_phase(surrogate, key, &cfg.attacks, &data.test.items, cfg.seed, &ctx.store)?;
    let dir = ctx.out.join("attacks");
    let mut summary = Vec::new();
    for set in &sets {
        save_adv_set(&dir.join(&set.name), &set.examples)?;
        summary.push(summarize_set(set));
    }
    let path = ctx.write("attacks/summary.json", &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    println!("{}", path.display());
    Ok(())
}

fn defend_eval(ctx: &Ctx, attacks: Option<&Path>) -> Result<(), Error> {
    let cfg = ctx.config();
    let dir = attacks.map_or_else(|| ctx.out.join("attacks"), Path::to_path_buf);
    let sets = cfg
        .attacks
        .iter()
        .map(|a| {
            Ok(AttackSet {
                name: a.name.clone(),
                examples: load_adv_set(&dir.join(&a.name))?,
            })
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let result = evaluate_sets(cfg, &sets, &ctx.store)?;
    ctx.finish(&result, &ctx.out)
}

fn grid(ctx: &Ctx) -> Result<(), Error> {
    let run = run_grid_with(ctx.config(), &ctx.store)?;
    ctx.finish(&run.result, &ctx.out)
}

fn ablate(ctx: &Ctx, toggles: &[String]) -> Result<(), Error> {
    let grids = ablation_run(ctx.config(), toggles, &ctx.store)?;
    for g in &grids {
        let name = &g.cells[0].defense;
        ctx.finish(g, &ctx.out.join("ablation").join(name))?;
    }
    Ok(())
}

fn report(ctx: &Ctx, input: Option<&Path>) -> Result<(), Error> {
    let path = input.map_or_else(|| ctx.out.join("grid.json"), Path::to_path_buf);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let result = GridResult::from_json(&text)?;
    result.check_complete()?;
    for p in emit_reports(&result, &ctx.formats, &ctx.out)? {
        println!("{}", p.display());
    }
    if ctx.formats.contains(&ReportFormat::Table) {
        print!("{}", ReportFormat::Table.render(&result)?);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match &cli.verb {
        Verb::Train(c) => train(&Ctx::new(c, true)?),
        Verb::Attack(c) => attack(&Ctx::new(c, true)?),
        Verb::DefendEval { common, attacks } => defend_eval(&Ctx::new(common, true)?, attacks.as_deref()),
        Verb::Grid(c) => grid(&Ctx::new(c, true)?),
        Verb::Ablate { common, toggles } => ablate(&Ctx::new(common, true)?, toggles),
        Verb::Report { common, input } => report(&Ctx::new(common, false)?, input.as_deref()),
    }
}

fn error_line(kind: &str, message: &str) {
    eprintln!("{}", serde_json::json!({ "error": { "kind": kind, "message": message } }));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            error_line("usage", e.to_string().lines().next().unwrap_or("invalid arguments"));
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error_line(e.kind(), &e.to_string());
            ExitCode::from(if e.kind() == "config" { 2 } else { 1 })
        }
    }
}
