use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ccnx_migrate::harness::{run_scenario, HarnessError};
use ccnx_migrate::report::render_text;
use ccnx_migrate::scenario::Scenario;
use ccnx_migrate_core::machine::ResourceKind;
use ccnx_migrate_core::machine::{
    build_vm_with, enumerate_locators, object_count, BuildOptions, Locator, ObjectCount, VmConfig,
};
use ccnx_migrate_core::manifest::{
    build_manifest, compare_naming, ManifestPlan, NamingMode, Phase,
};
use ccnx_migrate_core::store::{CheckpointId, ContentStore};
use ccnx_migrate_core::wire::encode_content_object;
use ccnx_migrate_core::{ContentObject, Name};
use clap::{Parser, Subcommand};

const EXIT_USAGE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_MIGRATION: u8 = 3;

#[derive(Parser)]
#[command(
    name = "ccnx-migrate",
    version,
    about = "VM migration over CCNx: simulator and tools"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a VM image as a stream of encoded Content Objects plus a name listing.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.0)]
        dup_fraction: f64,
        /// Output directory; receives image.ccnx and names.txt.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print how many Content Objects name every resource of a VM.
    Count {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Run a migration scenario and write its metrics report.
    Migrate {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a metrics report as text.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Compare hash naming with metadata and link naming for checkpoint 0.
    CompareNaming {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.0)]
        dup_fraction: f64,
        #[arg(long)]
        json: bool,
    },
    /// Print the checkpoint 0 manifest of a VM.
    Manifest {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        weak: bool,
        /// Routing prefix; defaults to the VM name.
        #[arg(long)]
        base: Option<Name>,
    },
}

struct Failure {
    code: u8,
    message: String,
}

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure {
        code,
        message: message.into(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path)
        .map_err(|e| fail(EXIT_USAGE, format!("cannot read {}: {e}", path.display())))
}

fn load_config(path: &Path) -> Result<VmConfig, Failure> {
    let config: VmConfig = serde_json::from_str(&read(path)?)
        .map_err(|e| fail(EXIT_VALIDATION, format!("{}: {e}", path.display())))?;
    config
        .validate()
        .map_err(|e| fail(EXIT_VALIDATION, format!("{}: {e}", path.display())))?;
    Ok(config)
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    fs::write(path, bytes)
        .map_err(|e| fail(EXIT_USAGE, format!("cannot write {}: {e}", path.display())))
}

fn grouped(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn print_count(config: &VmConfig, c: &ObjectCount) {
    println!("vm {}", config.vm_name);
    for d in &c.disks {
        println!(
            "disk {}: data_blocks={} control={} config={} total={}",
            d.disk_name,
            grouped(d.data_blocks),
            d.control_structures,
            d.config,
            grouped(d.total)
        );
    }
    println!("disk={}", grouped(c.disk_total));
    println!("ram={}", grouped(c.ram_pages));
    println!(
        "cpu={} config={} net={}",
        c.cpu_objects, c.config_objects, c.net_objects
    );
    println!("disk+ram={}", grouped(c.disk_total + c.ram_pages));
    println!("total={}", grouped(c.total));
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Gen {
            config,
            seed,
            dup_fraction,
            out,
        } => {
            let config = load_config(&config)?;
            let image = build_vm_with(&config, seed, &BuildOptions { dup_fraction })
                .map_err(|e| fail(EXIT_VALIDATION, e.to_string()))?;
            fs::create_dir_all(&out)
                .map_err(|e| fail(EXIT_USAGE, format!("cannot create {}: {e}", out.display())))?;
            let mut stream = Vec::new();
            let mut names = String::new();
            for loc in enumerate_locators(&config) {
                let name = config.vm_name.join(&loc.relative_name(&config));
                let data = image
                    .read(&loc)
                    .expect("generated image holds every resource");
                let obj = ContentObject::named(name.clone(), data.clone());
                let bytes = encode_content_object(&obj)
                    .map_err(|e| fail(EXIT_VALIDATION, e.to_string()))?;
                stream.extend_from_slice(&bytes);
                names.push_str(&name.to_string());
                names.push('\n');
            }
            write(&out.join("image.ccnx"), &stream)?;
            write(&out.join("names.txt"), names.as_bytes())?;
            println!(
                "wrote {} objects ({} bytes) to {}",
                names.lines().count(),
                stream.len(),
                out.display()
            );
        }
        Command::Count { config, json } => {
            let config = load_config(&config)?;
            let c = object_count(&config);
            if json {
                println!(
                    "{}",
                    serde_json::to_string_pretty(&c).expect("count serializes")
                );
            } else {
                print_count(&config, &c);
            }
        }
        Command::Migrate {
            scenario,
            seed,
            out,
        } => {
            let mut s = Scenario::load(&scenario).map_err(|e| match e {
                ccnx_migrate::scenario::ScenarioError::Io { .. } => fail(EXIT_USAGE, e.to_string()),
                _ => fail(EXIT_VALIDATION, e.to_string()),
            })?;
            if let Some(seed) = seed {
                s.seed = seed;
            }
            let run = run_scenario(&s).map_err(|e| match e {
                HarnessError::Sim(_) => fail(EXIT_MIGRATION, e.to_string()),
                _ => fail(EXIT_VALIDATION, e.to_string()),
            })?;
            let json = run.report.to_json();
            match &out {
                Some(path) => write(path, json.as_bytes())?,
                None => {
                    let _ = std::io::stdout().write_all(json.as_bytes());
                }
            }
            match run.report.exit_code() {
                0 => {}
                EXIT_MIGRATION => {
                    let causes: Vec<_> = run
                        .report
                        .migrations
                        .iter()
                        .filter_map(|m| m.abort_cause.clone())
                        .collect();
                    return Err(fail(
                        EXIT_MIGRATION,
                        format!("migration aborted: {}", causes.join("; ")),
                    ));
                }
                code => return Err(fail(code, "destination differs from the frozen source")),
            }
            if out.is_some() {
                let m = &run.report.migrations;
                eprintln!("{} migration(s) completed; equivalence PASS", m.len());
            }
        }
        Command::Report { input } => {
            let value: serde_json::Value = serde_json::from_str(&read(&input)?)
                .map_err(|e| fail(EXIT_VALIDATION, format!("{}: {e}", input.display())))?;
            let text = render_text(&value).map_err(|e| fail(EXIT_VALIDATION, e))?;
            print!("{text}");
        }
        Command::CompareNaming {
            config,
            seed,
            dup_fraction,
            json,
        } => {
            let config = load_config(&config)?;
            let mut image = build_vm_with(&config, seed, &BuildOptions { dup_fraction })
                .map_err(|e| fail(EXIT_VALIDATION, e.to_string()))?;
            let snap = image
                .snapshot(0)
                .map_err(|e| fail(EXIT_VALIDATION, e.to_string()))?;
            let selection = push_selection(&snap.data.locators());
            let rows = compare_naming(&snap, &selection, &config.vm_name)
                .map_err(|e| fail(EXIT_VALIDATION, e.to_string()))?;
            if json {
                println!(
                    "{}",
                    serde_json::to_string_pretty(&rows).expect("rows serialize")
                );
            } else {
                println!(
                    "{:<16} {:>10} {:>10} {:>14} {:>14} {:>12} {:>14} {:>14}",
                    "scheme",
                    "resources",
                    "objects",
                    "payload",
                    "objects_bytes",
                    "manifest",
                    "total",
                    "overhead"
                );
                for r in rows {
                    let scheme = serde_json::to_value(r.scheme).expect("scheme serializes");
                    println!(
                        "{:<16} {:>10} {:>10} {:>14} {:>14} {:>12} {:>14} {:>14}",
                        scheme.as_str().unwrap_or("?"),
                        r.resources,
                        r.objects,
                        r.payload_bytes,
                        r.object_bytes,
                        r.manifest_bytes,
                        r.total_bytes,
                        r.overhead_bytes
                    );
                }
            }
        }
        Command::Manifest {
            config,
            seed,
            weak,
            base,
        } => {
            let config = load_config(&config)?;
            let mut image = build_vm_with(&config, seed, &BuildOptions::default())
                .map_err(|e| fail(EXIT_VALIDATION, e.to_string()))?;
            let snap = image
                .snapshot(0)
                .map_err(|e| fail(EXIT_VALIDATION, e.to_string()))?;
            let base = base.unwrap_or_else(|| config.vm_name.clone());
            let mut plan = ManifestPlan::new(base, 0, Phase::Push);
            if weak {
                plan.modes.insert(ResourceKind::RamPage, NamingMode::Weak);
                for d in 0..config.disks.len() as u16 {
                    plan.modes
                        .insert(ResourceKind::DiskBlock { disk: d }, NamingMode::Weak);
                }
            }
            let selection = push_selection(&snap.data.locators());
            let mut store = ContentStore::new();
            let owner = CheckpointId::new(config.vm_name.clone(), 0);
            let built = build_manifest(&snap, &selection, &plan, &mut store, &owner)
                .map_err(|e| fail(EXIT_VALIDATION, e.to_string()))?;
            print!("{}", built.manifest.render());
        }
    }
    Ok(())
}

/// Everything except CPU state, which only moves at stop-and-copy.
fn push_selection(all: &[Locator]) -> std::collections::BTreeSet<Locator> {
    all.iter()
        .filter(|l| !matches!(l.kind, ResourceKind::CpuRegfile | ResourceKind::CpuTlb))
        .copied()
        .collect()
}
