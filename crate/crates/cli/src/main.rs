//! `keyspread`: command-line front end to the key-spreading toolkit.
//!
//! Exit status: 0 on success, 1 on domain errors (refusals, capacity, parse
//! errors), 2 on usage errors. Diagnostics are a single line on stderr and
//! outputs are only written when the command succeeds.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use keyspread_core::genealogy::parse_timestamp;
use keyspread_core::integrity::{self, IntegrityManifest, TrustSimConfig};
use keyspread_core::replicator::{self, ClonePlan};
use keyspread_core::spreadsim::{self, SimConfig, SimResult};
use keyspread_core::units::{self, Sig6};
use keyspread_core::{
    DeviceId, Genealogy, GenealogyError, ImageManifest, Inventory, PlanOptions, ProvenanceHeader, Rational,
};

#[derive(Parser)]
#[command(name = "keyspread", version, about = "Model self-replicating live USB keys")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a genealogy log and print it in canonical form.
    GenealogyParse {
        file: PathBuf,
        #[command(flatten)]
        out: Output,
    },
    /// Count births, spawns, upgrades and provenance headers in a genealogy.
    GenealogyStats {
        file: PathBuf,
        #[command(flatten)]
        out: Output,
    },
    /// Plan a clone or upgrade from the booted key onto the other USB device.
    ClonePlan {
        #[command(flatten)]
        clone: CloneArgs,
        #[command(flatten)]
        out: Output,
    },
    /// Plan and apply a clone, writing the resulting inventory.
    CloneExec {
        #[command(flatten)]
        clone: CloneArgs,
        /// Time stamped into the genealogies, e.g. "2013-04-07 11:58:04+02:00".
        #[arg(long)]
        now: String,
        #[command(flatten)]
        out: Output,
    },
    /// Simulate deploying an image to a room of blank keys.
    SimRoom(SimRoomArgs),
    /// Simulate upgrading a room of keys as new releases come out.
    SimRedeploy {
        /// SimConfig JSON with at least one release.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        out: Output,
    },
    /// Simulate random meetings between key owners under a checking protocol.
    TrustSim(TrustSimArgs),
    /// Print the integrity manifest of a key or of a freshly built image.
    Manifest(ManifestArgs),
    /// Boot one key to check another against a reference manifest.
    Verify {
        #[arg(long)]
        inventory: PathBuf,
        #[arg(long)]
        verifier: String,
        #[arg(long)]
        subject: String,
        /// Reference manifest in text form.
        #[arg(long)]
        reference: PathBuf,
        #[command(flatten)]
        out: Output,
    },
}

#[derive(Args)]
struct Output {
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Write here instead of stdout.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
    Text,
}

impl Format {
    fn name(self) -> &'static str {
        match self {
            Format::Json => "json",
            Format::Csv => "csv",
            Format::Text => "text",
        }
    }
}

#[derive(Args)]
struct CloneArgs {
    /// Inventory JSON of the attached devices.
    #[arg(long)]
    inventory: PathBuf,
    /// Write speed in MB/s.
    #[arg(long, default_value = "4.5", value_parser = decimal)]
    bandwidth: Rational,
    /// Fraction of the image rewritten by an upgrade.
    #[arg(long, default_value = "0.8", value_parser = decimal)]
    upgrade_ratio: Rational,
    /// Allow wiping non-key data on the target.
    #[arg(long)]
    confirm_overwrite: bool,
}

#[derive(Args)]
struct SimRoomArgs {
    /// SimConfig JSON; flags given on the command line override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<u32>,
    #[arg(long)]
    seeds: Option<u32>,
    #[arg(long)]
    ports: Option<u32>,
    /// Image size in GB.
    #[arg(long, value_parser = decimal, conflicts_with = "image")]
    image_gb: Option<Rational>,
    /// Image size with a unit, e.g. 2.7GB or 700MB.
    #[arg(long, value_parser = size)]
    image: Option<u64>,
    /// Write speed in MB/s.
    #[arg(long, value_parser = decimal)]
    bandwidth: Option<Rational>,
    /// Seconds spent booting and setting up before each clone starts.
    #[arg(long, value_parser = decimal)]
    setup_s: Option<Rational>,
    #[arg(long)]
    seed: Option<u64>,
    /// Skip per-key genealogies (same schedule, smaller output).
    #[arg(long)]
    no_genealogies: bool,
    #[command(flatten)]
    out: Output,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    NewestBoots,
    RandomDraw,
    TwoKeyOwner,
}

#[derive(Clone, Copy, ValueEnum)]
enum AttackArg {
    ModifyFile,
    ShadowBoot,
}

#[derive(Args)]
struct TrustSimArgs {
    /// TrustSimConfig JSON; flags given on the command line override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    population: Option<u32>,
    #[arg(long)]
    tampered: Option<u32>,
    #[arg(long)]
    meetings: Option<u32>,
    #[arg(long, value_enum)]
    protocol: Option<ProtocolArg>,
    #[arg(long, value_enum)]
    attack: Option<AttackArg>,
    #[arg(long)]
    seed: Option<u64>,
    /// Let keys that failed a check keep meeting others.
    #[arg(long)]
    no_quarantine: bool,
    #[command(flatten)]
    out: Output,
}

#[derive(Args)]
struct ManifestArgs {
    /// Inventory JSON holding the key.
    #[arg(long, requires = "device", conflicts_with_all = ["version", "image"])]
    inventory: Option<PathBuf>,
    #[arg(long)]
    device: Option<String>,
    /// Image descriptor, e.g. "Sage 5.8 Debian Live 2013-04-06 en_US.UTF-8 - wheezy - 686-pae".
    #[arg(long, requires = "image")]
    version: Option<String>,
    /// Image size with a unit, e.g. 2.7GB.
    #[arg(long, value_parser = size, requires = "version")]
    image: Option<u64>,
    #[command(flatten)]
    out: Output,
}

fn decimal(s: &str) -> Result<Rational, String> {
    units::parse_decimal(s).map_err(|e| e.to_string())
}

fn size(s: &str) -> Result<u64, String> {
    units::parse_size(s).map_err(|e| e.to_string())
}

enum Failure {
    Usage(String),
    Domain(String),
}

type Outcome<T> = Result<T, Failure>;

fn domain(msg: impl Into<String>) -> Failure {
    Failure::Domain(msg.into())
}

fn read(path: &Path) -> Outcome<Vec<u8>> {
    fs::read(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Outcome<String> {
    String::from_utf8(read(path)?)
        .map_err(|e| domain(format!("{}: not valid UTF-8 (byte {})", path.display(), e.utf8_error().valid_up_to())))
}

fn json_error(path: &Path, e: serde_json::Error) -> Failure {
    domain(format!("{}:{}:{}: {e}", path.display(), e.line(), e.column()))
}

fn load_inventory(path: &Path) -> Outcome<Inventory> {
    Inventory::from_json(&read_text(path)?).map_err(|e| json_error(path, e))
}

fn pick_format(out: &Output, command: &str, allowed: &[Format]) -> Outcome<Format> {
    let f = out.format.unwrap_or(allowed[0]);
    if allowed.contains(&f) {
        Ok(f)
    } else {
        Err(Failure::Usage(format!("{command} does not support --format {}", f.name())))
    }
}

fn emit(out: &Output, text: &str) -> Outcome<()> {
    match &out.output {
        Some(path) => fs::write(path, text).map_err(|e| domain(format!("{}: {e}", path.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s
}

fn load_genealogy(path: &Path) -> Outcome<Genealogy> {
    Genealogy::parse_bytes(&read(path)?).map_err(|e| match e {
        GenealogyError::Parse { line, message } => domain(format!("{}:{line}: {message}", path.display())),
        other => domain(format!("{}: {other}", path.display())),
    })
}

fn genealogy_parse(file: &Path, out: &Output) -> Outcome<()> {
    let format = pick_format(out, "genealogy-parse", &[Format::Text, Format::Json])?;
    let g = load_genealogy(file)?;
    for w in g.lint() {
        eprintln!("keyspread: warning: {}: {w}", file.display());
    }
    match format {
        Format::Json => emit(out, &to_json(&g)),
        _ => emit(out, &g.serialize()),
    }
}

fn genealogy_stats(file: &Path, out: &Output) -> Outcome<()> {
    let format = pick_format(out, "genealogy-stats", &[Format::Text, Format::Json])?;
    let s = load_genealogy(file)?.stats();
    match format {
        Format::Json => emit(out, &to_json(&s)),
        _ => emit(
            out,
            &format!(
                "births={} spawns={} upgrades={} provenance={} depth={}\n",
                s.birth_count, s.spawn_count, s.upgrade_count, s.provenance_count, s.max_embedding_depth
            ),
        ),
    }
}

fn make_plan(args: &CloneArgs, inventory: &Inventory) -> Outcome<ClonePlan> {
    let fail = |e: replicator::ReplicatorError| domain(format!("{}: {e}", args.inventory.display()));
    let target_id = replicator::select_target(inventory).map_err(fail)?;
    let source = inventory.boot_source().map_err(fail)?;
    let target = inventory.get(&target_id).expect("selected target exists");
    let opts = PlanOptions {
        bandwidth_mb_s: args.bandwidth,
        upgrade_ratio: args.upgrade_ratio,
        confirm_overwrite: args.confirm_overwrite,
        allow_internal_target: false,
    };
    replicator::plan_auto(source, target, &opts).map_err(fail)
}

fn plan_text(p: &ClonePlan) -> String {
    let mode = match p.mode {
        keyspread_core::PlanMode::Fresh => "fresh",
        keyspread_core::PlanMode::Upgrade => "upgrade",
    };
    format!(
        "mode={mode} source={} target={} bytes={} transfer_bytes={} duration_s={} copy={} preserve={}\n",
        p.source,
        p.target,
        p.bytes_total,
        p.transfer_bytes,
        Sig6(&p.duration_s),
        p.copy_set.len(),
        p.preserve_set.len()
    )
}

fn clone_plan(args: &CloneArgs, out: &Output) -> Outcome<()> {
    let format = pick_format(out, "clone-plan", &[Format::Json, Format::Text])?;
    let inventory = load_inventory(&args.inventory)?;
    let plan = make_plan(args, &inventory)?;
    match format {
        Format::Text => emit(out, &plan_text(&plan)),
        _ => emit(out, &to_json(&plan)),
    }
}

fn clone_exec(args: &CloneArgs, now: &str, out: &Output) -> Outcome<()> {
    pick_format(out, "clone-exec", &[Format::Json])?;
    let now = parse_timestamp(now).ok_or_else(|| Failure::Usage(format!("--now: invalid timestamp {now:?}")))?;
    let mut inventory = load_inventory(&args.inventory)?;
    let plan = make_plan(args, &inventory)?;
    replicator::execute_plan(&plan, &mut inventory, now)
        .map_err(|e| domain(format!("{}: {e}", args.inventory.display())))?;
    emit(out, &(inventory.to_json() + "\n"))
}

fn load_sim_config(path: &Path) -> Outcome<SimConfig> {
    SimConfig::from_json(&read_text(path)?).map_err(|e| json_error(path, e))
}

fn sim_output(result: &SimResult, out: &Output, format: Format) -> Outcome<()> {
    match format {
        Format::Csv => emit(out, &result.to_csv()),
        Format::Text => emit(out, &spreadsim::render_summary(&spreadsim::summarize(std::slice::from_ref(result)))),
        Format::Json => emit(out, &(result.to_json() + "\n")),
    }
}

fn sim_room(a: &SimRoomArgs) -> Outcome<()> {
    let format = pick_format(&a.out, "sim-room", &[Format::Json, Format::Csv, Format::Text])?;
    let mut cfg = match &a.config {
        Some(path) => load_sim_config(path)?,
        None => {
            let n = a.n.ok_or_else(|| Failure::Usage("sim-room needs --n or --config".into()))?;
            SimConfig::room(n, 2_700_000_000, Rational::new(9, 2), Rational::from_integer(300))
        }
    };
    if let Some(n) = a.n {
        cfg.n_participants = n;
    }
    if let Some(s) = a.seeds {
        cfg.seeds = s;
    }
    if let Some(p) = a.ports {
        cfg.ports_per_host = p;
    }
    if let Some(gb) = a.image_gb {
        let bytes = gb * Rational::from_integer(units::GB as i128);
        if !bytes.is_integer() || bytes <= Rational::from_integer(0) {
            return Err(Failure::Usage(format!("--image-gb {} is not a whole number of bytes", Sig6(&gb))));
        }
        cfg.image_bytes = *bytes.numer() as u64;
    }
    if let Some(b) = a.image {
        cfg.image_bytes = b;
    }
    if let Some(b) = a.bandwidth {
        cfg.bandwidth_mb_s = b;
    }
    if let Some(s) = a.setup_s {
        cfg.setup_delay_s = s;
    }
    if let Some(s) = a.seed {
        cfg.rng_seed = s;
    }
    if a.no_genealogies {
        cfg.record_genealogies = false;
    }
    let result = spreadsim::run_room(&cfg).map_err(|e| domain(e.to_string()))?;
    sim_output(&result, &a.out, format)
}

fn sim_redeploy(config: &Path, seed: Option<u64>, out: &Output) -> Outcome<()> {
    let format = pick_format(out, "sim-redeploy", &[Format::Json, Format::Csv])?;
    let mut cfg = load_sim_config(config)?;
    if let Some(s) = seed {
        cfg.rng_seed = s;
    }
    let result = spreadsim::run_redeployment(&cfg).map_err(|e| domain(format!("{}: {e}", config.display())))?;
    sim_output(&result, out, format)
}

fn trust_sim(a: &TrustSimArgs) -> Outcome<()> {
    let format = pick_format(&a.out, "trust-sim", &[Format::Json, Format::Csv])?;
    let mut cfg = match &a.config {
        Some(path) => serde_json::from_str::<TrustSimConfig>(&read_text(path)?).map_err(|e| json_error(path, e))?,
        None => {
            let missing = |flag: &str| Failure::Usage(format!("trust-sim needs --{flag} or --config"));
            TrustSimConfig::new(
                a.population.ok_or_else(|| missing("population"))?,
                a.tampered.unwrap_or(0),
                a.meetings.ok_or_else(|| missing("meetings"))?,
                integrity::Protocol::RandomDraw,
                0,
            )
        }
    };
    if let Some(v) = a.population {
        cfg.population = v;
    }
    if let Some(v) = a.tampered {
        cfg.tampered_initial = v;
    }
    if let Some(v) = a.meetings {
        cfg.meetings = v;
    }
    if let Some(p) = a.protocol {
        cfg.protocol = match p {
            ProtocolArg::NewestBoots => integrity::Protocol::NewestBoots,
            ProtocolArg::RandomDraw => integrity::Protocol::RandomDraw,
            ProtocolArg::TwoKeyOwner => integrity::Protocol::TwoKeyOwner,
        };
    }
    if let Some(k) = a.attack {
        cfg.attack = match k {
            AttackArg::ModifyFile => integrity::TamperKind::ModifyFile,
            AttackArg::ShadowBoot => integrity::TamperKind::ShadowBoot,
        };
    }
    if let Some(s) = a.seed {
        cfg.rng_seed = s;
    }
    if a.no_quarantine {
        cfg.quarantine = false;
    }
    let result = integrity::run_trust_sim(&cfg).map_err(|e| domain(e.to_string()))?;
    match format {
        Format::Csv => {
            let mut csv = String::from("meeting,infected\n");
            for (i, n) in result.infected_over_time.iter().enumerate() {
                csv.push_str(&format!("{i},{n}\n"));
            }
            emit(&a.out, &csv)
        }
        _ => emit(&a.out, &(result.to_json() + "\n")),
    }
}

fn key_of<'a>(inventory: &'a Inventory, path: &Path, id: &str) -> Outcome<&'a keyspread_core::KeyState> {
    let dev = inventory
        .get(&DeviceId(id.to_string()))
        .ok_or_else(|| domain(format!("{}: unknown device {id}", path.display())))?;
    dev.contents.as_ref().ok_or_else(|| domain(format!("{}: device {id} does not hold a key", path.display())))
}

fn manifest(a: &ManifestArgs) -> Outcome<()> {
    let format = pick_format(&a.out, "manifest", &[Format::Text, Format::Json])?;
    let m = match (&a.inventory, &a.device, &a.version, a.image) {
        (Some(path), Some(id), _, _) => {
            let inventory = load_inventory(path)?;
            integrity::build_manifest(key_of(&inventory, path, id)?)
                .map_err(|e| domain(format!("{}: {id}: {e}", path.display())))?
        }
        (None, _, Some(version), Some(bytes)) => {
            let header: ProvenanceHeader = version.parse().map_err(|e| Failure::Usage(format!("--version: {e}")))?;
            let key = ImageManifest::standard(header, bytes).build_key(0, Genealogy::default());
            integrity::build_manifest(&key).map_err(|e| domain(e.to_string()))?
        }
        _ => return Err(Failure::Usage("manifest needs --inventory and --device, or --version and --image".into())),
    };
    match format {
        Format::Json => emit(&a.out, &to_json(&m)),
        _ => emit(&a.out, &m.to_text()),
    }
}

fn verify(inventory: &Path, verifier: &str, subject: &str, reference: &Path, out: &Output) -> Outcome<()> {
    let format = pick_format(out, "verify", &[Format::Text, Format::Json])?;
    if verifier == subject {
        return Err(domain(format!("refusing to verify: a key cannot check itself ({verifier})")));
    }
    let inv = load_inventory(inventory)?;
    let reference_manifest = IntegrityManifest::from_text(&read_text(reference)?).map_err(|e| match e {
        integrity::IntegrityError::ManifestSyntax { line, message } => {
            domain(format!("{}:{line}: {message}", reference.display()))
        }
        other => domain(format!("{}: {other}", reference.display())),
    })?;
    let verdict =
        integrity::verify(key_of(&inv, inventory, verifier)?, key_of(&inv, inventory, subject)?, &reference_manifest);
    match format {
        Format::Json => emit(out, &to_json(&verdict)),
        _ => emit(out, &format!("{verdict}\n")),
    }
}

fn run(cli: Cli) -> Outcome<()> {
    match &cli.command {
        Command::GenealogyParse { file, out } => genealogy_parse(file, out),
        Command::GenealogyStats { file, out } => genealogy_stats(file, out),
        Command::ClonePlan { clone, out } => clone_plan(clone, out),
        Command::CloneExec { clone, now, out } => clone_exec(clone, now, out),
        Command::SimRoom(a) => sim_room(a),
        Command::SimRedeploy { config, seed, out } => sim_redeploy(config, *seed, out),
        Command::TrustSim(a) => trust_sim(a),
        Command::Manifest(a) => manifest(a),
        Command::Verify { inventory, verifier, subject, reference, out } => {
            verify(inventory, verifier, subject, reference, out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Domain(msg)) => {
            eprintln!("keyspread: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("keyspread: {msg}");
            ExitCode::from(2)
        }
    }
}
