//! A concurrent heart-rate monitoring scenario exercising the whole stack.
//!
//! A cardiologist sets up a patient record and straps a sensor to the
//! patient's wrist. Three workers then run against the same store: the
//! sensor samples a synthetic heart-rate signal at a fixed rate and commits
//! the samples in batches, the patient's son polls the record to see data
//! arriving, and the medic fetches the full series periodically. Readers
//! only ever abort their transactions; the sensor is the only writer.
//!
//! Time is injectable. With a virtual clock the driver advances time in
//! fixed steps, so a run takes milliseconds of wall time and the sampled
//! series is reproducible byte for byte. With the wall clock the same
//! workers run in real time.

use std::f64::consts::PI;
use std::path::PathBuf;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::clock::{VirtualClock, WaitOutcome, WallClock, WorkerClock};
use crate::codec::DocumentValue;
use crate::engine::{EngineError, Outcome, SmartStore, TxMode, TxStatus};
use crate::ids::NominativeId;
use crate::integrity::IntegrityReport;
use crate::schema::{
    AtomicType, CompositeType, ConcreteRole, EntitySchema, SchemaRegistry,
};

pub const PATIENT: &str = "Patient";
pub const SON: &str = "PatientSon";
pub const MEDIC: &str = "Cardiologist";
pub const SENSOR: &str = "Patient/watch";

/// Schemas for the monitoring scenario: a `Patient` and a `Medic` are both
/// `Individual`s, reference each other, and the patient accumulates
/// `HeartRateSample` values fed by a `HeartRateSensor`.
pub fn demo_registry() -> SchemaRegistry {
    let registry = SchemaRegistry::new();
    let sample = CompositeType::new(
        "HeartRateSample",
        [
            ("beatsPerMinute", AtomicType::Float),
            ("timestamp", AtomicType::DateAndTime),
        ],
    );
    registry
        .register(
            EntitySchema::builder("Individual")
                .slot("names", AtomicType::set_of(AtomicType::Text))
                .slot("surnames", AtomicType::set_of(AtomicType::Text))
                .role()
                .build(),
        )
        .unwrap();
    registry
        .register(
            EntitySchema::builder("Patient")
                .parent("Individual")
                .slot("medics", AtomicType::set_of(AtomicType::ref_to("Medic")))
                .slot(
                    "heartRateSamples",
                    AtomicType::set_of(AtomicType::Composite(sample)),
                )
                .constraint("heart rate is physiologically plausible", |slots, _| {
                    let Some(samples) = slots["heartRateSamples"].as_array() else {
                        return true;
                    };
                    samples.iter().all(|sample| {
                        sample
                            .as_map()
                            .and_then(|m| m.get("beatsPerMinute"))
                            .and_then(|b| b.as_float())
                            .map(|bpm| (20.0..=250.0).contains(&bpm))
                            .unwrap_or(false)
                    })
                })
                .role()
                .build(),
        )
        .unwrap();
    registry
        .register(
            EntitySchema::builder("Medic")
                .parent("Individual")
                .slot("patients", AtomicType::set_of(AtomicType::ref_to("Patient")))
                .role()
                .build(),
        )
        .unwrap();
    registry
        .register(
            EntitySchema::builder("HeartRateSensor")
                .slot("patient", AtomicType::ref_to("Patient"))
                .role()
                .build(),
        )
        .unwrap();
    registry
}

/// The objects and roles the scenario runs with.
#[derive(Debug, Clone)]
pub struct DemoCast {
    pub patient: NominativeId,
    pub sensor: NominativeId,
    pub son: ConcreteRole,
    pub medic: ConcreteRole,
    pub sensor_role: ConcreteRole,
}

/// Creates the patient, the roles, and the sensor, and wires them to each
/// other. The store must be empty: bootstrapping twice is an error.
pub fn bootstrap_demo_store(engine: &SmartStore) -> Result<DemoCast, EngineError> {
    let su = ConcreteRole::super_user();
    let patient = NominativeId::parse(PATIENT)?;
    let sensor = NominativeId::parse(SENSOR)?;
    if engine.store().record_count() != 0 {
        return Err(EngineError::AlreadyExists(patient));
    }

    let son = engine.get_or_create_role(&su, "Individual", &NominativeId::parse(SON)?)?;
    let medic = engine.get_or_create_role(&su, "Medic", &NominativeId::parse(MEDIC)?)?;

    let outcome = engine.in_transaction(&medic, |tx| {
        tx.create("Patient", patient.clone())?;
        tx.commit()
    });
    if !outcome.is_committed() {
        return Err(outcome
            .error
            .unwrap_or(EngineError::AlreadyExists(patient.clone())));
    }

    let outcome = engine.in_transaction(&medic, |tx| {
        let patient_handle = tx.read(&patient)?;
        let watch = tx.create("HeartRateSensor", sensor.clone())?;
        watch.set("patient", patient_handle.reference())?;
        patient_handle.add_to_set(
            "medics",
            DocumentValue::Reference(medic.backing().unwrap().clone()),
        )?;
        let medic_handle = tx.read(medic.backing().unwrap().nominative())?;
        medic_handle.add_to_set("patients", patient_handle.reference())?;
        tx.commit()
    });
    if !outcome.is_committed() {
        return Err(outcome
            .error
            .unwrap_or(EngineError::AlreadyExists(sensor.clone())));
    }

    let sensor_head = engine.store().head(&sensor).expect("sensor just created");
    Ok(DemoCast {
        patient,
        sensor,
        son,
        medic,
        sensor_role: ConcreteRole::from_record(sensor_head),
    })
}

/// The noiseless part of the synthetic signal: a 70 bpm baseline plus two
/// slow oscillations, amplitude 5 over a minute and 2 over seven seconds.
pub fn synth_wave(elapsed_secs: f64) -> f64 {
    70.0 + 5.0 * (2.0 * PI * elapsed_secs / 60.0).sin()
        + 2.0 * (2.0 * PI * elapsed_secs / 7.0).sin()
}

/// Synthetic heart rate at `elapsed_secs` into the run: [`synth_wave`]
/// plus jitter in [-1, 1]. The jitter depends only on `(seed, index)`,
/// never on scheduling, so runs are reproducible.
pub fn synth_bpm(elapsed_secs: f64, seed: u64, index: u64) -> f64 {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&index.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    let jitter: f64 = rng.gen_range(-1.0..=1.0);
    synth_wave(elapsed_secs) + jitter
}

#[derive(Debug, Clone)]
pub struct DemoConfig {
    pub duration_secs: u64,
    pub sample_rate_hz: u64,
    pub batch_size: usize,
    pub poll_period_ms: u64,
    pub seed: u64,
    pub mode: TxMode,
    pub use_virtual_clock: bool,
    /// Where to write the fetched series as CSV, if anywhere.
    pub output_path: Option<PathBuf>,
}

impl Default for DemoConfig {
    fn default() -> Self {
        DemoConfig {
            duration_secs: 10,
            sample_rate_hz: 10,
            batch_size: 50,
            poll_period_ms: 500,
            seed: 42,
            mode: TxMode::Acid,
            use_virtual_clock: true,
            output_path: None,
        }
    }
}

#[derive(Debug)]
pub struct DemoReport {
    pub samples_written: u64,
    pub batches_committed: u64,
    /// Conflict sets the sensor's commits produced (base mode) plus
    /// conflicted retries it had to absorb (acid mode).
    pub conflicts: u64,
    pub polls_performed: u64,
    pub polls_empty: u64,
    /// How many polls saw a different newest sample than the poll before.
    pub son_status_changes: u64,
    /// The newest sample the son had seen when the run ended.
    pub son_status: Option<(i64, f64)>,
    pub medic_fetches: u64,
    /// Sample count in the medic's final fetch.
    pub medic_rows: usize,
    pub patient_versions: usize,
    /// The fetched series as CSV text, one row per sample.
    pub csv: String,
    pub integrity: IntegrityReport,
}

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{0} worker panicked")]
    WorkerPanicked(&'static str),
    #[error("sensor commit failed after retry: {0:?}")]
    SensorCommit(Outcome),
    #[error("writing csv: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

struct SensorStats {
    samples: u64,
    batches: u64,
    conflicts: u64,
}

struct PollStats {
    polls: u64,
    empty: u64,
    status_changes: u64,
    status: Option<(i64, f64)>,
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn sample_document(timestamp_us: i64, bpm: f64) -> DocumentValue {
    DocumentValue::map_from_pairs([
        ("beatsPerMinute".to_string(), DocumentValue::Float(bpm)),
        ("timestamp".to_string(), DocumentValue::Timestamp(timestamp_us)),
    ])
    .expect("distinct keys")
}

fn samples_of(value: &DocumentValue) -> Vec<(i64, f64)> {
    let Some(samples) = value.as_array() else {
        return Vec::new();
    };
    samples
        .iter()
        .filter_map(|sample| {
            let map = sample.as_map()?;
            let ts = map.get("timestamp")?.as_timestamp()?;
            let bpm = map.get("beatsPerMinute")?.as_float()?;
            Some((ts, bpm))
        })
        .collect()
}

/// One read of the patient's sample series, without committing anything.
/// This is the son's view: straight at the patient record.
pub fn patient_series(
    engine: &SmartStore,
    role: &ConcreteRole,
    patient: &NominativeId,
) -> Result<Vec<(i64, f64)>, EngineError> {
    let mut rows = Vec::new();
    let outcome = engine.in_transaction(role, |tx| {
        let handle = tx.read(patient)?;
        rows = samples_of(&handle.get("heartRateSamples")?);
        tx.abort()
    });
    match outcome.error {
        Some(e) => Err(e),
        None => Ok(rows),
    }
}

/// The medic's view: resolve the medic's own record, follow its first
/// patient, and copy the whole series. A medic with no patients gets an
/// empty result. Read-only, always aborts.
pub fn medic_fetch_dataset(
    engine: &SmartStore,
    medic: &ConcreteRole,
) -> Result<Vec<(i64, f64)>, EngineError> {
    let Some(backing) = medic.backing() else {
        return Err(EngineError::NotFound(NominativeId::parse(MEDIC)?));
    };
    let medic_nominative = backing.nominative().clone();
    let mut rows = Vec::new();
    let outcome = engine.in_transaction(medic, |tx| {
        let me = tx.read(&medic_nominative)?;
        let patients = me.get("patients")?;
        let first = patients
            .as_array()
            .and_then(|list| list.first())
            .and_then(|value| value.as_reference().cloned());
        let Some(patient_ref) = first else {
            return tx.abort();
        };
        let patient = tx.read(patient_ref.nominative())?;
        rows = samples_of(&patient.get("heartRateSamples")?);
        tx.abort()
    });
    match outcome.error {
        Some(e) => Err(e),
        None => Ok(rows),
    }
}

pub fn build_csv(rows: &[(i64, f64)]) -> String {
    let mut csv = String::from("timestamp_us,beats_per_minute\n");
    for (ts, bpm) in rows {
        csv.push_str(&format!("{ts},{bpm}\n"));
    }
    csv
}

fn sensor_worker(
    engine: SmartStore,
    clock: Arc<dyn WorkerClock>,
    cast: DemoCast,
    config: DemoConfig,
    start: i64,
) -> Result<SensorStats, DemoError> {
    let total = config.duration_secs * config.sample_rate_hz;
    let period = 1_000_000 / config.sample_rate_hz as i64;
    let mut stats = SensorStats {
        samples: 0,
        batches: 0,
        conflicts: 0,
    };
    let mut pending: Vec<(i64, f64)> = Vec::with_capacity(config.batch_size);
    for index in 0..total {
        let deadline = start + index as i64 * period;
        if clock.wait_until(deadline) == WaitOutcome::Halted {
            break;
        }
        let elapsed = (deadline - start) as f64 / 1_000_000.0;
        pending.push((deadline, synth_bpm(elapsed, config.seed, index)));
        if pending.len() >= config.batch_size || index + 1 == total {
            commit_batch(&engine, &cast, &config, &mut pending, &mut stats)?;
        }
    }
    if !pending.is_empty() {
        commit_batch(&engine, &cast, &config, &mut pending, &mut stats)?;
    }
    Ok(stats)
}

fn commit_batch(
    engine: &SmartStore,
    cast: &DemoCast,
    config: &DemoConfig,
    pending: &mut Vec<(i64, f64)>,
    stats: &mut SensorStats,
) -> Result<(), DemoError> {
    let batch = std::mem::take(pending);
    for attempt in 0..2 {
        let outcome = engine.in_transaction_with(&cast.sensor_role, config.mode, |tx| {
            let watch = tx.read(&cast.sensor)?;
            let Some(patient_ref) = watch.get("patient")?.as_reference().cloned() else {
                return Err(EngineError::NotFound(cast.sensor.clone()).into());
            };
            let patient = tx.read(patient_ref.nominative())?;
            for (ts, bpm) in &batch {
                patient.add_to_set("heartRateSamples", sample_document(*ts, *bpm))?;
            }
            tx.commit()
        });
        match outcome.status {
            TxStatus::Committed => {
                stats.samples += batch.len() as u64;
                stats.batches += 1;
                stats.conflicts += outcome.conflict_sets.len() as u64;
                return Ok(());
            }
            TxStatus::Conflicted if attempt == 0 => {
                stats.conflicts += 1;
                continue;
            }
            _ => return Err(DemoError::SensorCommit(outcome)),
        }
    }
    unreachable!("loop either returns or errors");
}

fn poller_worker<F>(
    clock: Arc<dyn WorkerClock>,
    period_us: i64,
    start: i64,
    end: i64,
    fetch: F,
) -> Result<PollStats, DemoError>
where
    F: Fn() -> Result<Vec<(i64, f64)>, EngineError>,
{
    let mut stats = PollStats {
        polls: 0,
        empty: 0,
        status_changes: 0,
        status: None,
    };
    let mut tick = 1i64;
    loop {
        let deadline = start + tick * period_us;
        if deadline > end || clock.wait_until(deadline) == WaitOutcome::Halted {
            break;
        }
        let rows = fetch()?;
        stats.polls += 1;
        match rows.last() {
            None => stats.empty += 1,
            Some(&newest) => {
                if stats.status != Some(newest) {
                    stats.status_changes += 1;
                    stats.status = Some(newest);
                }
            }
        }
        tick += 1;
    }
    Ok(stats)
}

/// Runs the scenario against `base`'s store and schemas: bootstraps the
/// cast, runs the sensor, son, and medic workers for the configured
/// duration, then fetches the final series as the medic, renders it to
/// CSV, and verifies store integrity.
pub fn run_demo(base: &SmartStore, config: &DemoConfig) -> Result<DemoReport, DemoError> {
    if config.sample_rate_hz == 0 || config.duration_secs == 0 {
        return Err(DemoError::Config(
            "duration and sample rate must be positive".to_string(),
        ));
    }
    if config.batch_size == 0 || config.poll_period_ms == 0 {
        return Err(DemoError::Config(
            "batch size and poll period must be positive".to_string(),
        ));
    }
    if 1_000_000 % config.sample_rate_hz != 0 {
        return Err(DemoError::Config(
            "sample rate must divide one million microseconds".to_string(),
        ));
    }

    let virtual_clock = config
        .use_virtual_clock
        .then(|| Arc::new(VirtualClock::new(0)));
    let worker_clock: Arc<dyn WorkerClock> = match &virtual_clock {
        Some(v) => v.clone(),
        None => Arc::new(WallClock::new()),
    };
    let engine = base.clone().with_clock(worker_clock.clone());

    let cast = bootstrap_demo_store(&engine)?;
    let start = worker_clock.now_micros();
    let end = start + config.duration_secs as i64 * 1_000_000;
    let sample_period = 1_000_000 / config.sample_rate_hz as i64;
    let poll_period = config.poll_period_ms as i64 * 1000;
    let medic_period = poll_period * 4;

    let sensor = {
        let engine = engine.clone();
        let clock = worker_clock.clone();
        let cast = cast.clone();
        let config = config.clone();
        thread::spawn(move || sensor_worker(engine, clock, cast, config, start))
    };
    let son = {
        let engine = engine.clone();
        let clock = worker_clock.clone();
        let role = cast.son.clone();
        let patient = cast.patient.clone();
        thread::spawn(move || {
            poller_worker(clock, poll_period, start, end, move || {
                patient_series(&engine, &role, &patient)
            })
        })
    };
    let medic = {
        let engine = engine.clone();
        let clock = worker_clock.clone();
        let role = cast.medic.clone();
        thread::spawn(move || {
            poller_worker(clock, medic_period, start, end, move || {
                medic_fetch_dataset(&engine, &role)
            })
        })
    };

    match &virtual_clock {
        Some(clock) => {
            let step = gcd(
                gcd(sample_period as u64, poll_period as u64),
                medic_period as u64,
            ) as i64;
            let steps = (end - start) / step;
            let pacing = Duration::from_micros((2_000_000 / steps.max(1) as u64).min(2_000));
            let mut now = start;
            while now < end {
                thread::sleep(pacing);
                now += step;
                clock.advance_to(now);
            }
            // workers with deadlines at or before `end` still complete them:
            // waiting on a past deadline succeeds even after a halt
            clock.halt();
        }
        None => {
            thread::sleep(Duration::from_secs(config.duration_secs));
            thread::sleep(Duration::from_millis(50));
            worker_clock.halt();
        }
    }

    let sensor_stats = sensor
        .join()
        .map_err(|_| DemoError::WorkerPanicked("sensor"))??;
    let son_stats = son
        .join()
        .map_err(|_| DemoError::WorkerPanicked("son"))??;
    let medic_stats = medic
        .join()
        .map_err(|_| DemoError::WorkerPanicked("medic"))??;

    let rows = medic_fetch_dataset(&engine, &cast.medic)?;
    let csv = build_csv(&rows);
    if let Some(path) = &config.output_path {
        std::fs::write(path, &csv)?;
    }
    let patient_versions = engine
        .store()
        .history(&cast.patient)
        .map(|h| h.len())
        .unwrap_or(0);
    let integrity = engine.verify_integrity(None);

    Ok(DemoReport {
        samples_written: sensor_stats.samples,
        batches_committed: sensor_stats.batches,
        conflicts: sensor_stats.conflicts,
        polls_performed: son_stats.polls,
        polls_empty: son_stats.empty,
        son_status_changes: son_stats.status_changes,
        son_status: son_stats.status,
        medic_fetches: medic_stats.polls,
        medic_rows: rows.len(),
        patient_versions,
        csv,
        integrity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::BackendConfig;

    fn fresh_engine() -> SmartStore {
        SmartStore::open(&BackendConfig::Memory, demo_registry()).unwrap()
    }

    #[test]
    fn bootstrap_wires_the_cast_once() {
        let engine = fresh_engine();
        let cast = bootstrap_demo_store(&engine).unwrap();

        assert_eq!(cast.patient.to_string(), "Patient");
        assert_eq!(cast.sensor.to_string(), "Patient/watch");
        assert_eq!(cast.son.role_id(), "PatientSon");
        assert_eq!(cast.medic.role_id(), "Cardiologist");
        assert_eq!(cast.sensor_role.role_id(), "Patient/watch");
        assert_eq!(
            cast.son.backing(),
            Some(&NominativeId::parse(SON).unwrap().versioned(1))
        );

        // patient@1 bare, patient@2 wired to the medic
        assert_eq!(engine.store().history(&cast.patient).unwrap().len(), 2);
        assert_eq!(engine.store().history(&cast.sensor).unwrap().len(), 1);

        // the wiring version names the medic as its originator
        let wiring = engine
            .origin_of(&cast.patient.versioned(2))
            .unwrap();
        assert_eq!(wiring.role, "Cardiologist");

        // a second bootstrap refuses to touch the populated store
        assert!(matches!(
            bootstrap_demo_store(&engine),
            Err(EngineError::AlreadyExists(_))
        ));

        // the sensor depends on the patient, the patient on the medic
        assert!(engine.dependents_of(&cast.patient).contains(&cast.sensor));
        assert!(engine
            .dependents_of(&NominativeId::parse(MEDIC).unwrap())
            .contains(&cast.patient));
        assert!(engine.verify_integrity(None).passed());
    }

    #[test]
    fn synthetic_signal_is_deterministic_and_plausible() {
        assert_eq!(synth_wave(0.0), 70.0);
        assert_eq!(synth_bpm(3.0, 42, 30), synth_bpm(3.0, 42, 30));
        assert_ne!(synth_bpm(3.0, 42, 30), synth_bpm(3.0, 43, 30));
        assert_ne!(synth_bpm(3.0, 42, 30), synth_bpm(3.0, 42, 31));
        // ten simulated minutes at 10 Hz stay inside 70 +/- (5 + 2 + 1)
        for index in 0..6000 {
            let bpm = synth_bpm(index as f64 / 10.0, 7, index);
            assert!((62.0..=78.0).contains(&bpm), "sample {index} was {bpm}");
        }
    }

    #[test]
    fn short_virtual_run_reports_expected_counts() {
        let engine = fresh_engine();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("samples.csv");
        let config = DemoConfig {
            duration_secs: 2,
            sample_rate_hz: 10,
            batch_size: 10,
            poll_period_ms: 500,
            seed: 42,
            mode: TxMode::Acid,
            use_virtual_clock: true,
            output_path: Some(out.clone()),
        };
        let report = run_demo(&engine, &config).unwrap();

        assert_eq!(report.samples_written, 20);
        assert_eq!(report.batches_committed, 2);
        assert_eq!(report.conflicts, 0);
        assert_eq!(report.medic_rows, 20);
        // create, wiring, then one version per batch
        assert_eq!(report.patient_versions, 4);
        assert_eq!(report.polls_performed, 4);
        assert_eq!(report.medic_fetches, 1);
        assert!(report.integrity.passed());

        let lines: Vec<&str> = report.csv.lines().collect();
        assert_eq!(lines.len(), 21);
        assert_eq!(lines[0], "timestamp_us,beats_per_minute");
        assert!(lines[1].starts_with("0,"));
        assert!(lines[20].starts_with("1900000,"));
        assert_eq!(std::fs::read_to_string(&out).unwrap(), report.csv);

        // the son's last status is one of the written samples
        if let Some((ts, bpm)) = report.son_status {
            assert!(report.csv.contains(&format!("{ts},{bpm}")));
        }
    }

    #[test]
    fn virtual_runs_are_byte_reproducible() {
        let config = DemoConfig {
            duration_secs: 2,
            sample_rate_hz: 10,
            batch_size: 10,
            poll_period_ms: 500,
            seed: 42,
            mode: TxMode::Acid,
            use_virtual_clock: true,
            output_path: None,
        };
        let first = run_demo(&fresh_engine(), &config).unwrap();
        let second = run_demo(&fresh_engine(), &config).unwrap();
        assert_eq!(first.csv, second.csv);

        let reseeded = DemoConfig {
            seed: 43,
            ..config.clone()
        };
        let third = run_demo(&fresh_engine(), &reseeded).unwrap();
        assert_ne!(first.csv, third.csv);
    }

    #[test]
    fn base_mode_run_is_equally_clean() {
        let engine = fresh_engine();
        let config = DemoConfig {
            duration_secs: 1,
            sample_rate_hz: 10,
            batch_size: 5,
            poll_period_ms: 250,
            seed: 9,
            mode: TxMode::Base,
            use_virtual_clock: true,
            output_path: None,
        };
        let report = run_demo(&engine, &config).unwrap();
        assert_eq!(report.samples_written, 10);
        assert_eq!(report.batches_committed, 2);
        assert_eq!(report.conflicts, 0);
        assert!(report.integrity.passed());
    }

    #[test]
    fn wall_clock_run_works_in_real_time() {
        let engine = fresh_engine();
        let config = DemoConfig {
            duration_secs: 1,
            sample_rate_hz: 5,
            batch_size: 5,
            poll_period_ms: 250,
            seed: 1,
            mode: TxMode::Acid,
            use_virtual_clock: false,
            output_path: None,
        };
        let report = run_demo(&engine, &config).unwrap();
        assert_eq!(report.samples_written, 5);
        assert_eq!(report.batches_committed, 1);
        assert!(report.medic_rows >= 5);
        assert!(report.integrity.passed());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let engine = fresh_engine();
        let bad_rate = DemoConfig {
            sample_rate_hz: 0,
            ..DemoConfig::default()
        };
        assert!(matches!(
            run_demo(&engine, &bad_rate),
            Err(DemoError::Config(_))
        ));
        let odd_rate = DemoConfig {
            sample_rate_hz: 7,
            ..DemoConfig::default()
        };
        assert!(matches!(
            run_demo(&engine, &odd_rate),
            Err(DemoError::Config(_))
        ));
    }
}
