//! Command-line front end for the smartstore engine.
//!
//! Every command opens a store (`mem` or `file:PATH`) with the heart-rate
//! demo schemas loaded, so file stores written by `demo` or `init` can be
//! inspected afterwards with `history`, `show`, `origin`, and `verify`,
//! revoked from, and cascaded over.
//!
//! Exit codes: 0 success, 1 usage or operational error, 2 integrity
//! violations found, 3 a transaction conflict, 4 storage corruption.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};

use smartstore::codec::render_debug;
use smartstore::demo::{bootstrap_demo_store, demo_registry, run_demo, DemoConfig, DemoError};
use smartstore::engine::{SmartStore, TxMode, TxStatus};
use smartstore::ids::{NominativeId, VersionedId};
use smartstore::integrity::{
    CascadeStrategy, IntegrityReport, RevocationError, ViolationCategory,
};
use smartstore::schema::ConcreteRole;
use smartstore::store::{BackendConfig, RecordStatus};

#[derive(Parser)]
#[command(
    name = "smartstore",
    version,
    about = "Versioned object store with origin tracking and integrity verification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    /// Reject write-write conflicts, first committer wins
    Acid,
    /// Absorb conflicts into conflict sets for later resolution
    Base,
}

impl From<ModeArg> for TxMode {
    fn from(mode: ModeArg) -> TxMode {
        match mode {
            ModeArg::Acid => TxMode::Acid,
            ModeArg::Base => TxMode::Base,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the concurrent heart-rate monitoring demo and write its CSV
    Demo {
        /// How long the scenario runs, in seconds
        #[arg(long, default_value_t = 10)]
        duration: u64,
        /// Sensor sample rate in Hz
        #[arg(long, default_value_t = 10)]
        rate: u64,
        /// Samples per batch commit
        #[arg(long, default_value_t = 50)]
        batch: usize,
        /// Liveness poll period in milliseconds
        #[arg(long = "poll-ms", default_value_t = 500)]
        poll_ms: u64,
        /// Seed for the synthetic signal's jitter
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = ModeArg::Acid)]
        mode: ModeArg,
        /// Backend: "mem" or "file:PATH"
        #[arg(long, default_value = "mem")]
        store: String,
        /// Where the sampled series is written as CSV
        #[arg(long, default_value = "samples.csv")]
        out: PathBuf,
        /// Drive time with a virtual clock (reproducible, runs in
        /// milliseconds) instead of real time
        #[arg(long)]
        virtual_clock: bool,
    },
    /// Create a store and bootstrap the demo objects into it
    Init {
        /// Backend: "mem" or "file:PATH"
        store: String,
    },
    /// List every version of an object, newest first
    History { store: String, id: String },
    /// Print one record version in full
    Show { store: String, id: String },
    /// Who wrote a record version, when, and in which transaction
    Origin {
        store: String,
        id: String,
        /// Report the version that last changed this slot instead
        #[arg(long)]
        slot: Option<String>,
    },
    /// Check bit-level, structural, and domain integrity of the heads
    Verify {
        store: String,
        /// Restrict the check to these objects
        ids: Vec<String>,
    },
    /// Append an invalidated version of a record, keeping its history
    Revoke {
        store: String,
        id: String,
        #[arg(long)]
        reason: String,
        /// Act as this role's object instead of the super-user
        #[arg(long)]
        role: Option<String>,
    },
    /// Revalidate everything that depends on the given revoked objects
    Cascade {
        store: String,
        /// Comma-separated nominative ids to cascade from
        ids: String,
        #[arg(long, default_value = "lazy")]
        strategy: String,
        #[arg(long = "max-rounds", default_value_t = 5)]
        max_rounds: usize,
        #[arg(long)]
        role: Option<String>,
    },
}

struct Failure {
    code: u8,
    message: String,
}

fn fail(code: u8, message: impl ToString) -> Failure {
    Failure {
        code,
        message: message.to_string(),
    }
}

fn main() -> ExitCode {
    // die quietly when the reader of a pipe goes away, like cat does
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            if !failure.message.is_empty() {
                eprintln!("error: {}", failure.message);
            }
            ExitCode::from(failure.code)
        }
    }
}

fn open_engine(store: &str) -> Result<SmartStore, Failure> {
    let config = BackendConfig::parse(store)
        .ok_or_else(|| fail(1, format!("store must be \"mem\" or \"file:PATH\", got {store:?}")))?;
    let engine = SmartStore::open(&config, demo_registry()).map_err(|e| fail(1, e))?;
    if let Some(report) = engine.corruption() {
        eprintln!(
            "warning: log corruption at offset {}: {} ({} records recovered)",
            report.offset, report.detail, report.records_recovered
        );
    }
    Ok(engine)
}

fn role_for(engine: &SmartStore, flag: &Option<String>) -> Result<ConcreteRole, Failure> {
    let Some(name) = flag else {
        return Ok(ConcreteRole::super_user());
    };
    let nominative = NominativeId::parse(name).map_err(|e| fail(1, e))?;
    let head = engine
        .store()
        .head(&nominative)
        .ok_or_else(|| fail(1, format!("role object {nominative} not found")))?;
    Ok(ConcreteRole::from_record(head))
}

fn parse_versioned(text: &str) -> Result<VersionedId, Failure> {
    VersionedId::parse(text).map_err(|e| fail(1, e))
}

fn status_text(status: &RecordStatus) -> String {
    match status {
        RecordStatus::Valid => "valid".to_string(),
        RecordStatus::Invalid { reason } => format!("invalid: {reason}"),
    }
}

fn category_name(category: ViolationCategory) -> &'static str {
    match category {
        ViolationCategory::Structural => "structural",
        ViolationCategory::Domain => "domain",
        ViolationCategory::BitLevel => "bit-level",
    }
}

fn integrity_failure(report: &IntegrityReport) -> Failure {
    let corrupted = report
        .violations
        .iter()
        .any(|v| v.category == ViolationCategory::BitLevel && v.id.is_none());
    fail(
        if corrupted { 4 } else { 2 },
        format!("integrity check failed with {} violations", report.violations.len()),
    )
}

fn print_violations(report: &IntegrityReport) {
    for violation in &report.violations {
        let subject = violation
            .id
            .as_ref()
            .map(|id| id.to_string())
            .unwrap_or_else(|| "store".to_string());
        println!(
            "violation  {:10} {}: {}",
            category_name(violation.category),
            subject,
            violation.detail
        );
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Demo {
            duration,
            rate,
            batch,
            poll_ms,
            seed,
            mode,
            store,
            out,
            virtual_clock,
        } => {
            let engine = open_engine(&store)?;
            let config = DemoConfig {
                duration_secs: duration,
                sample_rate_hz: rate,
                batch_size: batch,
                poll_period_ms: poll_ms,
                seed,
                mode: mode.into(),
                use_virtual_clock: virtual_clock,
                output_path: Some(out.clone()),
            };
            let report = run_demo(&engine, &config).map_err(|e| match e {
                DemoError::SensorCommit(ref outcome)
                    if outcome.status == TxStatus::Conflicted =>
                {
                    fail(3, e)
                }
                other => fail(1, other),
            })?;
            println!("samples written    {}", report.samples_written);
            println!("batches committed  {}", report.batches_committed);
            println!("conflicts          {}", report.conflicts);
            println!(
                "son polls          {} ({} before data arrived)",
                report.polls_performed, report.polls_empty
            );
            println!("medic fetches      {}", report.medic_fetches);
            println!("patient versions   {}", report.patient_versions);
            println!("csv rows           {} -> {}", report.medic_rows, out.display());
            if report.integrity.passed() {
                println!(
                    "integrity          pass ({} heads checked)",
                    report.integrity.checked
                );
                Ok(())
            } else {
                print_violations(&report.integrity);
                Err(integrity_failure(&report.integrity))
            }
        }
        Command::Init { store } => {
            let engine = open_engine(&store)?;
            let cast = bootstrap_demo_store(&engine).map_err(|e| fail(1, e))?;
            println!("created {}", engine.store().head(&cast.patient).unwrap());
            println!(
                "created {}",
                cast.son.backing().map(|b| b.to_string()).unwrap_or_default()
            );
            println!(
                "created {}",
                cast.medic.backing().map(|b| b.to_string()).unwrap_or_default()
            );
            println!("created {}", engine.store().head(&cast.sensor).unwrap());
            Ok(())
        }
        Command::History { store, id } => {
            let engine = open_engine(&store)?;
            let nominative = NominativeId::parse(&id).map_err(|e| fail(1, e))?;
            let history = engine
                .store()
                .history(&nominative)
                .map_err(|e| fail(1, e))?;
            for record in history {
                let origin = record.origin();
                println!(
                    "{}  txn {}  role {}  t_us {}  {}",
                    record.id(),
                    origin.transaction_id,
                    origin.role,
                    origin.timestamp,
                    status_text(record.status())
                );
            }
            Ok(())
        }
        Command::Show { store, id } => {
            let engine = open_engine(&store)?;
            let id = parse_versioned(&id)?;
            let record = engine.store().get_record(&id).map_err(|e| fail(1, e))?;
            let origin = record.origin();
            println!("id        {}", record.id());
            match record.previous() {
                Some(previous) => println!("previous  {previous}"),
                None => println!("previous  none"),
            }
            println!("status    {}", status_text(record.status()));
            println!("role      {}", origin.role);
            println!("txn       {}", origin.transaction_id);
            println!("t_us      {}", origin.timestamp);
            println!("token     {}", origin.permission_token);
            println!("hash      {}", record.hash().to_hex());
            println!("payload   {}", render_debug(record.payload()));
            Ok(())
        }
        Command::Origin { store, id, slot } => {
            let engine = open_engine(&store)?;
            match slot {
                None => {
                    let id = parse_versioned(&id)?;
                    let origin = engine.origin_of(&id).map_err(|e| fail(1, e))?;
                    println!("role   {}", origin.role);
                    println!("txn    {}", origin.transaction_id);
                    println!("t_us   {}", origin.timestamp);
                    println!("token  {}", origin.permission_token);
                }
                Some(slot) => {
                    // the slot query is about the object; a version suffix
                    // is accepted but ignored
                    let name = id.split_once('@').map(|(n, _)| n).unwrap_or(&id);
                    let nominative = NominativeId::parse(name).map_err(|e| fail(1, e))?;
                    let origin = engine
                        .slot_originator(&nominative, &slot)
                        .map_err(|e| fail(1, e))?;
                    println!("slot   {slot:?}");
                    println!("role   {}", origin.role);
                    println!("txn    {}", origin.transaction_id);
                    println!("t_us   {}", origin.timestamp);
                    println!("token  {}", origin.permission_token);
                }
            }
            Ok(())
        }
        Command::Verify { store, ids } => {
            let engine = open_engine(&store)?;
            let report = if ids.is_empty() {
                engine.verify_integrity(None)
            } else {
                let mut subset = BTreeSet::new();
                for id in &ids {
                    subset.insert(NominativeId::parse(id).map_err(|e| fail(1, e))?);
                }
                engine.verify_integrity(Some(&subset))
            };
            print_violations(&report);
            println!(
                "checked {} heads, {} violations",
                report.checked,
                report.violations.len()
            );
            if report.passed() {
                Ok(())
            } else {
                Err(integrity_failure(&report))
            }
        }
        Command::Revoke {
            store,
            id,
            reason,
            role,
        } => {
            let engine = open_engine(&store)?;
            let role = role_for(&engine, &role)?;
            let id = parse_versioned(&id)?;
            let appended = engine
                .revoke(&role, &id, &reason)
                .map_err(|e| fail(1, e))?;
            println!("revoked {id}; appended {appended}");
            Ok(())
        }
        Command::Cascade {
            store,
            ids,
            strategy,
            max_rounds,
            role,
        } => {
            let engine = open_engine(&store)?;
            let role = role_for(&engine, &role)?;
            let strategy = CascadeStrategy::parse(&strategy)
                .ok_or_else(|| fail(1, format!("unknown strategy {strategy:?}")))?;
            let mut seeds = Vec::new();
            for id in ids.split(',') {
                seeds.push(NominativeId::parse(id.trim()).map_err(|e| fail(1, e))?);
            }
            let outcome = engine
                .cascade_revalidate(&role, &seeds, strategy, max_rounds)
                .map_err(|e| match e {
                    RevocationError::Contended(_) => fail(3, e),
                    other => fail(1, other),
                })?;
            let names = |set: &BTreeSet<NominativeId>| {
                set.iter()
                    .map(|n| n.to_string())
                    .collect::<Vec<_>>()
                    .join(", ")
            };
            println!(
                "visited     {}",
                outcome
                    .order
                    .iter()
                    .map(|n| n.to_string())
                    .collect::<Vec<_>>()
                    .join(", ")
            );
            println!("repaired    [{}]", names(&outcome.repaired));
            println!("invalidated [{}]", names(&outcome.invalidated));
            println!("unresolved  [{}]", names(&outcome.unresolved));
            println!(
                "rounds      {}{}",
                outcome.rounds_used,
                if outcome.cyclic { " (cyclic)" } else { "" }
            );
            Ok(())
        }
    }
}
