use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use microfold::archive::Archive;
use microfold::bootstrap;
use microfold::carc::Tree;
use microfold::channel::{self, PackageDef, PackageSet, PinFile, Repo};
use microfold::derivation::{BuildOptions, Builder, Derivation};
use microfold::error::{Classify, ErrorClass};
use microfold::hash::ContentHash;
use microfold::manifest::{self, Profile, Provenance};
use microfold::store::{Content, Store, StorePath, Verification};
use microfold::substitute;
use microfold::transport::Location;

mod graph;

#[derive(Parser, Debug)]
#[command(name = "microfold", version, about = "Functional package management on a content-addressed store")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Global {
    /// Store directory.
    #[arg(long, global = true, env = "MICROFOLD_STORE")]
    store: Option<PathBuf>,
    /// Channel repository directory.
    #[arg(long, global = true, env = "MICROFOLD_CHANNEL_REPO")]
    channel_repo: Option<PathBuf>,
    /// Source archive directory.
    #[arg(long, global = true, env = "MICROFOLD_ARCHIVE")]
    archive: Option<PathBuf>,
    /// Substitute cache to try before building; repeatable.
    #[arg(long = "substitute-url", global = true, value_name = "URL")]
    substitute_urls: Vec<String>,
    /// Never use substitutes.
    #[arg(long, global = true)]
    no_substitutes: bool,
    /// Parallel build jobs.
    #[arg(long, short = 'j', global = true)]
    jobs: Option<usize>,
}

impl Global {
    /// Fills anything unset here from `outer`.
    fn inherit(mut self, outer: &Global) -> Global {
        self.store = self.store.or_else(|| outer.store.clone());
        self.channel_repo = self.channel_repo.or_else(|| outer.channel_repo.clone());
        self.archive = self.archive.or_else(|| outer.archive.clone());
        if self.substitute_urls.is_empty() {
            self.substitute_urls = outer.substitute_urls.clone();
        }
        self.no_substitutes |= outer.no_substitutes;
        self.jobs = self.jobs.or(outer.jobs);
        self
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a derivation file or a package spec.
    Build {
        #[arg(required = true)]
        targets: Vec<String>,
        /// Build N times in scratch stores and compare instead.
        #[arg(long, value_name = "N")]
        check: Option<usize>,
    },
    /// Build a manifest into a new profile generation.
    Package {
        #[arg(short = 'm', long)]
        manifest: PathBuf,
        #[arg(short = 'p', long, env = "MICROFOLD_PROFILE")]
        profile: Option<PathBuf>,
    },
    /// Fetch channel revisions and move HEAD.
    Pull {
        #[arg(long)]
        url: Option<String>,
    },
    /// Show the channel revision in use.
    Describe {
        #[arg(short = 'f', long, value_parser = ["channels", "human"], default_value = "human")]
        format: String,
        #[arg(short = 'p', long, env = "MICROFOLD_PROFILE")]
        profile: Option<PathBuf>,
    },
    /// Run a command against the channel revisions of a pin file.
    TimeMachine {
        #[arg(short = 'C', long = "channels")]
        channels: PathBuf,
        #[arg(last = true, required = true)]
        command: Vec<String>,
    },
    /// Compare output hashes across the local store, caches and rebuilds.
    Challenge {
        #[arg(required = true)]
        specs: Vec<String>,
        #[arg(long)]
        rebuild: bool,
    },
    /// Print the derivation graph of a package.
    Graph {
        spec: String,
        #[arg(long)]
        dot: bool,
    },
    /// Store and retrieve source trees by content hash.
    #[command(subcommand)]
    Archive(ArchiveCommand),
    /// Manage bootstrap seeds and trust audits.
    #[command(subcommand)]
    Seed(SeedCommand),
    /// Switch the active profile generation.
    Rollback {
        #[arg(short = 'p', long, env = "MICROFOLD_PROFILE")]
        profile: Option<PathBuf>,
        generation: u64,
    },
    /// Record package definition files as a new channel revision.
    Commit {
        #[arg(short = 'm', long)]
        message: String,
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Copy built closures into a substitute cache.
    Publish {
        #[arg(long, value_name = "URL")]
        to: String,
        #[arg(required = true)]
        targets: Vec<String>,
    },
    /// Re-hash store items against their records.
    Verify { paths: Vec<String> },
}

#[derive(Subcommand, Debug)]
enum ArchiveCommand {
    /// Add a file tree to the archive.
    Ingest {
        path: PathBuf,
        #[arg(long)]
        origin: Option<String>,
    },
    /// Look up archived content by hash.
    Lookup {
        hash: String,
        /// Unpack the content here.
        #[arg(long)]
        extract: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
enum SeedCommand {
    /// Register a file tree as a bootstrap seed.
    Add {
        path: PathBuf,
        #[arg(long)]
        label: Option<String>,
        #[arg(long, default_value = "")]
        description: String,
    },
    /// Audit a package or store item back to its seeds.
    Audit { target: String },
}

/// A failure with the exit class it reports.
struct Failure {
    class: ErrorClass,
    message: String,
}

impl<E: Classify + fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure {
            class: e.class(),
            message: e.to_string(),
        }
    }
}

fn user_error(message: impl Into<String>) -> Failure {
    Failure {
        class: ErrorClass::User,
        message: message.into(),
    }
}

fn io_failure(what: &Path, e: io::Error) -> Failure {
    Failure {
        class: ErrorClass::Environment,
        message: format!("{}: {e}", what.display()),
    }
}

type Outcome = Result<u8, Failure>;

fn default_dir(name: &str) -> PathBuf {
    let base = std::env::var_os("HOME").map_or_else(|| PathBuf::from("."), PathBuf::from);
    base.join(".microfold").join(name)
}

/// Resolved configuration for one invocation.
struct Ctx {
    store: Store,
    repo_dir: PathBuf,
    archive_dir: PathBuf,
    caches: Vec<Location>,
    options: BuildOptions,
    /// Set inside `time-machine`.
    pin: Option<PinFile>,
}

impl Ctx {
    fn new(g: &Global, pin: Option<PinFile>) -> Result<Ctx, Failure> {
        let store = Store::open(g.store.clone().unwrap_or_else(|| default_dir("store")))?;
        let mut options = BuildOptions::default();
        if let Some(j) = g.jobs {
            options.jobs = j.max(1);
        }
        options.use_substitutes = !g.no_substitutes;
        options.archive_fallback = true;
        Ok(Ctx {
            store,
            repo_dir: g.channel_repo.clone().unwrap_or_else(|| default_dir("channel")),
            archive_dir: g.archive.clone().unwrap_or_else(|| default_dir("archive")),
            caches: g.substitute_urls.iter().map(|u| Location::parse(u)).collect(),
            options,
            pin,
        })
    }

    fn repo(&self) -> Result<Repo, Failure> {
        Ok(Repo::open(&self.repo_dir)?)
    }

    fn builder(&self) -> Result<Builder<'_>, Failure> {
        let archive = Archive::open_dir(&self.archive_dir)?;
        Ok(Builder::new(&self.store)
            .with_options(self.options.clone())
            .with_caches(self.caches.clone())
            .with_archive(Some(archive)))
    }

    /// The channel revisions in effect.
    fn channels(&self, repo: &Repo) -> Result<PinFile, Failure> {
        match &self.pin {
            Some(p) => Ok(p.clone()),
            None => Ok(channel::describe_pin(repo)?),
        }
    }

    /// Runs `f` against the package set in effect.
    fn with_packages<T>(&self, f: impl FnOnce(&PackageSet, &PinFile) -> Result<T, Failure>) -> Result<T, Failure> {
        let repo = self.repo()?;
        let pin = self.channels(&repo)?;
        channel::time_machine(&pin, &repo, |pkgs| f(pkgs, &pin))
    }

    /// Lowers the packages named by `specs`.
    fn derivations(&self, pkgs: &PackageSet, specs: &[String]) -> Result<Vec<Derivation>, Failure> {
        let mut defs = Vec::new();
        for s in specs {
            let spec = manifest::parse_spec(s)?;
            defs.push(manifest::resolve_spec(&spec, pkgs)?.clone());
        }
        Ok(manifest::lower(&self.store, &defs, pkgs)?)
    }
}

fn flush_warnings(builder: &Builder<'_>) {
    for w in builder.warnings() {
        eprintln!("warning: {w}");
    }
}

fn print(out: &str) -> Result<(), Failure> {
    let mut stdout = io::stdout().lock();
    stdout
        .write_all(out.as_bytes())
        .and_then(|_| stdout.flush())
        .map_err(|e| io_failure(Path::new("<stdout>"), e))
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => user_error(format!("{}: no such file", path.display())),
        _ => io_failure(path, e),
    })
}

fn profile_dir(p: &Option<PathBuf>) -> PathBuf {
    p.clone().unwrap_or_else(|| default_dir("profile"))
}

fn run(command: Command, g: &Global, pin: Option<PinFile>) -> Outcome {
    let ctx = Ctx::new(g, pin)?;
    match command {
        Command::Build { targets, check } => build(&ctx, &targets, check),
        Command::Package { manifest, profile } => package(&ctx, &manifest, &profile_dir(&profile)),
        Command::Pull { url } => pull(&ctx, url),
        Command::Describe { format, profile } => describe(&ctx, &format, &profile_dir(&profile)),
        Command::TimeMachine { channels, command } => {
            if ctx.pin.is_some() {
                return Err(user_error("time-machine cannot be nested"));
            }
            let pin = channel::parse_pin(&read_text(&channels)?)?;
            let inner = Cli::try_parse_from(std::iter::once("microfold".to_string()).chain(command))
                .map_err(|e| user_error(e.to_string()))?;
            if matches!(inner.command, Command::TimeMachine { .. }) {
                return Err(user_error("time-machine cannot be nested"));
            }
            let g = inner.global.inherit(g);
            run(inner.command, &g, Some(pin))
        }
        Command::Challenge { specs, rebuild } => challenge(&ctx, &specs, rebuild),
        Command::Graph { spec, dot } => ctx.with_packages(|pkgs, _| {
            let drv = ctx.derivations(pkgs, &[spec])?.remove(0);
            let nodes = ctx.store.derivation_graph(&drv).map_err(Failure::from)?;
            print(&if dot { graph::dot(&nodes) } else { graph::text(&nodes) })?;
            Ok(0)
        }),
        Command::Archive(a) => archive(&ctx, a),
        Command::Seed(s) => seed(&ctx, s),
        Command::Rollback { profile, generation } => {
            let profile = Profile::open(profile_dir(&profile))?;
            let gen = manifest::rollback(&profile, generation)?;
            print(&format!("switched to generation {}\n", gen.number))?;
            Ok(0)
        }
        Command::Commit { message, files } => {
            let repo = ctx.repo()?;
            let mut defs = Vec::new();
            for f in &files {
                defs.push(PackageDef::parse(&read_text(f)?)?);
            }
            let rev = repo.commit(defs, repo.head()?, &message)?;
            print(&format!("commit {}\n", rev.id))?;
            Ok(0)
        }
        Command::Publish { to, targets } => {
            let cache = Location::parse(&to);
            let roots = resolve_items(&ctx, &targets)?;
            let mut out = String::new();
            for r in roots {
                for info in substitute::publish_closure(&ctx.store, &r, &cache)? {
                    out.push_str(&format!("{} {}\n", info.store_path, info.output_hash));
                }
            }
            print(&out)?;
            Ok(0)
        }
        Command::Verify { paths } => {
            let paths = if paths.is_empty() {
                ctx.store.list()?
            } else {
                paths.iter().map(|p| p.parse::<StorePath>()).collect::<Result<_, _>>()?
            };
            let mut bad = false;
            let mut out = String::new();
            for p in paths {
                let v = ctx.store.verify_item(&p);
                bad |= !v.is_ok();
                let word = match v {
                    Verification::Ok(_) => "ok",
                    Verification::Mismatch { .. } => "corrupt",
                    Verification::Missing => "missing",
                };
                out.push_str(&format!("{word} {p}\n"));
            }
            print(&out)?;
            Ok(if bad { 2 } else { 0 })
        }
    }
}

/// Store paths for targets that are either store paths or package specs.
/// Packages are built first if needed.
fn resolve_items(ctx: &Ctx, targets: &[String]) -> Result<Vec<StorePath>, Failure> {
    let mut out = Vec::new();
    let mut specs = Vec::new();
    for t in targets {
        match t.parse::<StorePath>() {
            Ok(p) if ctx.store.contains(&p) => out.push(p),
            _ => specs.push(t.clone()),
        }
    }
    if !specs.is_empty() {
        let drvs = ctx.with_packages(|pkgs, _| ctx.derivations(pkgs, &specs))?;
        let builder = ctx.builder()?;
        let built = builder.build_all(&drvs);
        flush_warnings(&builder);
        out.extend(built?);
    }
    Ok(out)
}

fn build(ctx: &Ctx, targets: &[String], check: Option<usize>) -> Outcome {
    let mut drvs = Vec::new();
    let mut specs = Vec::new();
    for t in targets {
        let p = Path::new(t);
        if p.is_file() {
            let drv = Derivation::parse(&read_text(p)?)?;
            ctx.store.put_derivation(&drv)?;
            drvs.push(drv);
        } else {
            specs.push(t.clone());
        }
    }
    if !specs.is_empty() {
        drvs.extend(ctx.with_packages(|pkgs, _| ctx.derivations(pkgs, &specs))?);
    }
    let builder = ctx.builder()?;
    if let Some(rounds) = check {
        let mut out = String::new();
        let mut code = 0;
        for d in &drvs {
            let report = builder.check_rebuild(d, rounds);
            flush_warnings(&builder);
            let report = report?;
            if !report.is_deterministic() {
                code = 2;
            }
            out.push_str(&report.render());
        }
        print(&out)?;
        return Ok(code);
    }
    let built = builder.build_all(&drvs);
    flush_warnings(&builder);
    let mut out = String::new();
    for p in built? {
        out.push_str(&format!("{}\n", ctx.store.item_path(&p).display()));
    }
    print(&out)?;
    Ok(0)
}

fn package(ctx: &Ctx, manifest_file: &Path, profile_dir: &Path) -> Outcome {
    let text = read_text(manifest_file)?;
    let m = manifest::parse_manifest(&text)?;
    let profile = Profile::open(profile_dir)?;
    let builder = ctx.builder()?;
    let gen = ctx.with_packages(|pkgs, pin| {
        let defs = manifest::resolve(&m, pkgs)?;
        let drvs = manifest::lower(&ctx.store, &defs, pkgs)?;
        let provenance = Provenance {
            channels: pin.render(),
            manifest: text.clone(),
        };
        let gen = manifest::build_profile(&builder, &drvs, &profile, provenance);
        flush_warnings(&builder);
        Ok(gen?)
    })?;
    let record = ctx.store.require_record(&gen.tree)?;
    let mut out = format!("generation {}\n", gen.number);
    for r in gen.roots() {
        out.push_str(&format!("  {r}\n"));
    }
    out.push_str(&format!("profile {}\n", gen.tree));
    out.push_str(&format!("output-hash {}\n", record.output_hash));
    print(&out)?;
    Ok(0)
}

fn pull(ctx: &Ctx, url: Option<String>) -> Outcome {
    let repo = ctx.repo()?;
    let url = match url {
        Some(u) => {
            repo.set_url(&u)?;
            u
        }
        None => repo.url()?,
    };
    let head = repo.pull(&Location::parse(&url))?;
    print(&format!("commit {head}\n"))?;
    Ok(0)
}

fn describe(ctx: &Ctx, format: &str, profile_dir: &Path) -> Outcome {
    let repo = ctx.repo()?;
    let pin = ctx.channels(&repo)?;
    if format == "channels" {
        print(&pin.render())?;
        return Ok(0);
    }
    let mut out = String::new();
    let profile = Profile::open(profile_dir)?;
    if let Some(n) = profile.current()? {
        let gen = profile.generation(n)?;
        let date = chrono::DateTime::from_timestamp(gen.created_at as i64, 0)
            .map(|d| d.format("%b %d %Y %H:%M:%S").to_string())
            .unwrap_or_default();
        out.push_str(&format!("Generation {n}\t{date}\t(current)\n"));
    }
    for c in &pin.channels {
        out.push_str(&format!(
            "  {} {}\n    repository URL: {}\n    commit: {}\n",
            c.name, c.commit, c.url, c.commit
        ));
    }
    print(&out)?;
    Ok(0)
}

fn challenge(ctx: &Ctx, specs: &[String], rebuild: bool) -> Outcome {
    let drvs = ctx.with_packages(|pkgs, _| ctx.derivations(pkgs, specs))?;
    let mut paths = Vec::new();
    for d in &drvs {
        paths.push(d.output_path()?);
    }
    let builder = ctx.builder()?;
    let report = substitute::challenge(&paths, &ctx.caches, &ctx.store, rebuild.then_some(&builder));
    flush_warnings(&builder);
    print(&report.render())?;
    Ok(if report.has_disagreement() { 2 } else { 0 })
}

fn archive(ctx: &Ctx, cmd: ArchiveCommand) -> Outcome {
    let archive = Archive::open_dir(&ctx.archive_dir)?;
    match cmd {
        ArchiveCommand::Ingest { path, origin } => {
            let tree = Tree::from_path(&path)?;
            let hash = archive.ingest(&tree, origin.as_deref())?;
            print(&format!("{hash}\n"))?;
            Ok(0)
        }
        ArchiveCommand::Lookup { hash, extract } => {
            let hash: ContentHash = hash.parse()?;
            let Some(bytes) = archive.lookup(&hash)? else {
                return Err(user_error(format!("{hash} is not archived")));
            };
            let mut out = format!("{hash} {}\n", bytes.len());
            for o in archive.origins(&hash)? {
                out.push_str(&format!("origin {o}\n"));
            }
            if let Some(dest) = extract {
                microfold::carc::unpack(&bytes, &dest)?;
            }
            print(&out)?;
            Ok(0)
        }
    }
}

fn seed(ctx: &Ctx, cmd: SeedCommand) -> Outcome {
    match cmd {
        SeedCommand::Add { path, label, description } => {
            let label = match label {
                Some(l) => l,
                None => path
                    .file_name()
                    .and_then(|n| n.to_str())
                    .ok_or_else(|| user_error(format!("{}: give a --label", path.display())))?
                    .to_string(),
            };
            let rec = bootstrap::register_seed(&ctx.store, Content::Path(&path), &label, &description)?;
            print(&format!("{} {}\n", rec.path, rec.size))?;
            Ok(0)
        }
        SeedCommand::Audit { target } => {
            let report = match target.parse::<StorePath>() {
                Ok(p) if ctx.store.contains(&p) => bootstrap::audit_trust(&p, &ctx.store)?,
                _ => {
                    let drv = ctx.with_packages(|pkgs, _| ctx.derivations(pkgs, &[target]))?.remove(0);
                    bootstrap::audit_derivation(&drv, &ctx.store)?
                }
            };
            print(&report.to_text())?;
            Ok(if report.is_trusted() { 0 } else { 2 })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command, &cli.global, None) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.class.exit_code() as u8)
        }
    }
}
