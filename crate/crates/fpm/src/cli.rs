//! The `fpm` command.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use regex::Regex;

use crate::buildlang::ModuleSearch;
use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::gc;
use crate::packages::{Compiler, PackageRegistry};
use crate::profiles::{self, Action, Outcome, Profile};
use crate::store::Store;
use fpm_core::StorePath;

#[derive(Debug, Parser)]
#[command(name = "fpm", version, about = "A small purely functional package manager")]
pub struct Cli {
    /// Store directory
    #[arg(long, env = "FPM_STORE", global = true, help_heading = "Global options", value_name = "DIR")]
    store: Option<PathBuf>,
    /// Directory for profiles, logs and GC roots
    #[arg(long, env = "FPM_STATE", global = true, help_heading = "Global options", value_name = "DIR")]
    state: Option<PathBuf>,
    /// System type to build for, such as x86_64-linux
    #[arg(long, env = "FPM_SYSTEM", global = true, help_heading = "Global options")]
    system: Option<String>,
    /// Number of builds to run at once
    #[arg(long, short = 'j', env = "FPM_MAX_JOBS", global = true, help_heading = "Global options", value_name = "N")]
    max_jobs: Option<usize>,
    /// Colon-separated directories searched for package files
    #[arg(long, env = "FPM_PKG_PATH", global = true, help_heading = "Global options", value_name = "DIRS")]
    pkg_path: Option<String>,
    /// Colon-separated directories searched for build modules
    #[arg(long, env = "FPM_MODULE_PATH", global = true, help_heading = "Global options", value_name = "DIRS")]
    module_path: Option<String>,
    /// Whose profile to operate on
    #[arg(long, env = "FPM_USER", global = true, help_heading = "Global options")]
    user: Option<String>,
    /// Print more diagnostics; repeat for more
    #[arg(long, short, action = clap::ArgAction::Count, global = true, help_heading = "Global options")]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Install, remove, upgrade and list packages in a profile
    Package(PackageArgs),
    /// Build packages or derivations and print their output paths
    Build {
        /// Package names (NAME or NAME@VERSION) or .drv store paths
        #[arg(required = true)]
        targets: Vec<String>,
    },
    /// Delete store paths no profile or root refers to
    Gc {
        /// Only list what would be deleted
        #[arg(long)]
        dry_run: bool,
    },
    /// Print the derivation graph of a package in DOT format
    Graph {
        /// Package name (NAME or NAME@VERSION)
        package: String,
    },
    /// Print the settings in effect
    Config,
}

#[derive(Debug, Args)]
struct PackageArgs {
    /// Install a package (NAME or NAME@VERSION)
    #[arg(long, short = 'i', value_name = "PACKAGE")]
    install: Vec<String>,
    /// Remove an installed package
    #[arg(long, short = 'r', value_name = "NAME")]
    remove: Vec<String>,
    /// Upgrade installed packages whose name matches REGEX, or all of them
    #[arg(long, short = 'u', value_name = "REGEX", num_args = 0..=1, default_missing_value = "")]
    upgrade: Option<String>,
    /// Switch to the previous generation
    #[arg(long, conflicts_with_all = ["install", "remove", "upgrade"])]
    roll_back: bool,
    /// Delete all generations except the current one
    #[arg(long, conflicts_with_all = ["install", "remove", "upgrade", "roll_back"])]
    delete_generations: bool,
    /// List installed packages whose name matches REGEX
    #[arg(long, short = 'I', value_name = "REGEX", num_args = 0..=1, default_missing_value = "")]
    list_installed: Option<String>,
    /// List available packages whose name matches REGEX
    #[arg(long, short = 'A', value_name = "REGEX", num_args = 0..=1, default_missing_value = "")]
    list_available: Option<String>,
    /// List the generations of the profile
    #[arg(long)]
    list_generations: bool,
}

/// Settings resolved from flags, the environment and defaults, in that order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Config {
    pub store: PathBuf,
    pub state: PathBuf,
    pub system: String,
    pub max_jobs: usize,
    pub pkg_path: String,
    pub module_path: String,
    pub user: String,
}

/// The system type of the running machine.
pub fn host_system() -> String {
    format!("{}-{}", std::env::consts::ARCH, std::env::consts::OS)
}

impl Config {
    fn resolve(cli: &Cli) -> Config {
        let home = std::env::var_os("HOME").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
        let base = home.join(".fpm");
        Config {
            store: cli.store.clone().unwrap_or_else(|| base.join("store")),
            state: cli.state.clone().unwrap_or_else(|| base.join("state")),
            system: cli.system.clone().unwrap_or_else(host_system),
            max_jobs: cli
                .max_jobs
                .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
                .max(1),
            pkg_path: cli.pkg_path.clone().unwrap_or_default(),
            module_path: cli.module_path.clone().unwrap_or_default(),
            user: cli
                .user
                .clone()
                .or_else(|| std::env::var("USER").ok())
                .filter(|u| !u.is_empty())
                .unwrap_or_else(|| "default".into()),
        }
    }
}

impl std::fmt::Display for Config {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "store = {}", self.store.display())?;
        writeln!(f, "state = {}", self.state.display())?;
        writeln!(f, "system = {}", self.system)?;
        writeln!(f, "max-jobs = {}", self.max_jobs)?;
        writeln!(f, "pkg-path = {}", self.pkg_path)?;
        writeln!(f, "module-path = {}", self.module_path)?;
        writeln!(f, "user = {}", self.user)
    }
}

struct Context {
    config: Config,
    store: Arc<Store>,
}

impl Context {
    fn new(config: Config) -> Result<Context> {
        let store = Store::open(&config.store)?;
        Ok(Context { config, store })
    }

    fn registry(&self) -> Result<Arc<PackageRegistry>> {
        Ok(Arc::new(PackageRegistry::load_path(&self.config.pkg_path)?))
    }

    fn compiler(&self) -> Result<Compiler> {
        Ok(Compiler::new(self.store.clone(), self.registry()?)
            .with_module_search(ModuleSearch::from_path_list(&self.config.module_path)))
    }

    fn engine(&self) -> Engine {
        Engine::new(self.store.clone(), &self.config.state, &self.config.system).with_max_jobs(self.config.max_jobs)
    }

    fn profile(&self) -> Result<Profile> {
        Profile::open(self.store.clone(), &self.config.state, &self.config.user)
    }
}

fn pattern(s: &str) -> Result<Option<Regex>> {
    if s.is_empty() {
        return Ok(None);
    }
    Ok(Some(Regex::new(s)?))
}

fn out(text: &str) -> Result<()> {
    let mut stdout = io::stdout().lock();
    stdout.write_all(text.as_bytes()).and_then(|()| stdout.flush()).map_err(|e| Error::io("<stdout>", e))
}

fn cmd_package(cx: &Context, args: &PackageArgs) -> Result<()> {
    let mut actions: Vec<Action> = Vec::new();
    actions.extend(args.install.iter().cloned().map(Action::Install));
    actions.extend(args.remove.iter().cloned().map(Action::Remove));
    if let Some(re) = &args.upgrade {
        actions.push(Action::Upgrade(pattern(re)?));
    }
    let listing = args.list_installed.is_some() || args.list_available.is_some() || args.list_generations;
    let profile = cx.profile()?;

    if !actions.is_empty() {
        let compiler = cx.compiler()?;
        let engine = cx.engine();
        match profile.transact(&compiler, &engine, &actions)? {
            Outcome::Committed { generation, .. } => eprintln!("switched to generation {generation}"),
            Outcome::Unchanged => eprintln!("nothing to be done"),
        }
    } else if args.roll_back {
        let from = profile.current()?;
        let to = profile.roll_back()?;
        eprintln!("switched from generation {from} to {to}");
    } else if args.delete_generations {
        let deleted = profile.delete_generations()?;
        eprintln!("deleted {} generations", deleted.len());
    } else if !listing {
        return Err(Error::EmptyTransaction);
    }

    if let Some(re) = &args.list_installed {
        let mut text = String::new();
        for e in profile.list_installed(pattern(re)?.as_ref())? {
            let _ = writeln!(text, "{}\t{}\t{}", e.name, e.version, e.output);
        }
        out(&text)?;
    }
    if let Some(re) = &args.list_available {
        let registry = cx.registry()?;
        let mut text = String::new();
        for (name, version, location) in profiles::list_available(&registry, pattern(re)?.as_ref()) {
            let _ = writeln!(text, "{name}\t{version}\t{location}");
        }
        out(&text)?;
    }
    if args.list_generations {
        let current = profile.current()?;
        let mut text = String::new();
        for n in profile.generations()? {
            let mark = if n == current { "\t(current)" } else { "" };
            let _ = writeln!(text, "{n}{mark}");
        }
        out(&text)?;
    }
    Ok(())
}

/// Derivations for `targets`, which name packages or `.drv` files.
fn resolve_targets(cx: &Context, targets: &[String]) -> Result<Vec<StorePath>> {
    let mut compiler = None;
    let mut drvs = Vec::new();
    for t in targets {
        if t.ends_with(".drv") && t.contains('/') {
            let p = cx.store.parse_path(t)?;
            if !cx.store.is_valid(&p)? {
                return Err(Error::Usage(format!("{t} is not a valid store path")));
            }
            drvs.push(p);
        } else {
            if compiler.is_none() {
                compiler = Some(cx.compiler()?);
            }
            let c = compiler.as_ref().expect("just set");
            let pkg = c.registry().lookup(t)?;
            drvs.push(c.package_derivation(&pkg, &cx.config.system)?.0);
        }
    }
    Ok(drvs)
}

fn cmd_build(cx: &Context, targets: &[String]) -> Result<()> {
    // Keeps a concurrent collection from deleting fresh derivations.
    let _guard = cx.store.build_guard()?;
    let drvs = resolve_targets(cx, targets)?;
    let engine = cx.engine();
    let results = engine.build_derivations(&drvs)?;
    for r in &results {
        if let Some(e) = &r.error {
            let log = match e {
                Error::BuildFailed { log: Some(l), .. } => Some(l.clone()),
                _ => Some(engine.log_path(&r.drv_path)).filter(|l| l.exists()),
            };
            if let Some(l) = log {
                eprintln!("build log: {}", l.display());
            }
        }
    }
    let mut text = String::new();
    for drv in &drvs {
        if let Some(r) = results.iter().find(|r| &r.drv_path == drv && r.error.is_none()) {
            let _ = writeln!(text, "{}", r.output);
        }
    }
    out(&text)?;
    eprintln!("{} builders executed", engine.builder_launches());
    // Results come in build order, so the first error is the root cause.
    match results.into_iter().find_map(|r| r.error) {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn cmd_gc(cx: &Context, dry_run: bool) -> Result<()> {
    let report = gc::collect_garbage(&cx.store, &cx.config.state, dry_run)?;
    for (p, why) in &report.failures {
        eprintln!("could not delete {p}: {why}");
    }
    let mut text = String::new();
    if dry_run {
        for p in &report.deleted {
            let _ = writeln!(text, "{p}");
        }
    }
    let _ = writeln!(text, "{report}");
    out(&text)
}

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

/// DOT text for the derivation graph rooted at `root`.
pub fn graph_dot(store: &Store, root: &StorePath) -> Result<String> {
    let g = store.derivation_graph(std::slice::from_ref(root))?;
    let mut text = format!("digraph {} {{\n", quote(root.name()));
    for n in g.nodes() {
        let _ = writeln!(text, "  {} [label={}];", quote(n.base_name()), quote(n.name()));
    }
    for n in g.nodes() {
        for d in g.deps(n) {
            let _ = writeln!(text, "  {} -> {};", quote(n.base_name()), quote(d.base_name()));
        }
    }
    text.push_str("}\n");
    Ok(text)
}

fn cmd_graph(cx: &Context, package: &str) -> Result<()> {
    let drv = resolve_targets(cx, &[package.to_string()])?.remove(0);
    out(&graph_dot(&cx.store, &drv)?)
}

fn exit_code(e: &Error) -> u8 {
    if e.is_build_failure() {
        2
    } else {
        1
    }
}

/// Runs the command line `args`, the program name included.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_env("FPM_LOG").format_timestamp(None).try_init();

    let config = Config::resolve(&cli);
    let result = match &cli.command {
        Command::Config => out(&config.to_string()),
        command => Context::new(config).and_then(|cx| match command {
            Command::Package(args) => cmd_package(&cx, args),
            Command::Build { targets } => cmd_build(&cx, targets),
            Command::Gc { dry_run } => cmd_gc(&cx, *dry_run),
            Command::Graph { package } => cmd_graph(&cx, package),
            Command::Config => unreachable!(),
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fpm: error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
