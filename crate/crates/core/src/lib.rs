//! Batch alignment pipeline engine and spot-fleet simulator.
//!
//! * [`progress`]: progress-log parsing and the early-stop rule.
//! * [`queue`], [`ledger`], [`manifest`]: at-least-once delivery with an
//!   exactly-once completion ledger.
//! * [`worker`], [`executor`]: the per-instance pipeline state machine and its
//!   stage backends.
//! * [`perf`]: thread scaling, duration and cost models.
//! * [`sim`]: deterministic discrete-event fleet simulation.

pub mod clock;
pub mod executor;
pub mod ledger;
pub mod manifest;
pub mod perf;
pub mod progress;
pub mod queue;
pub mod sim;
pub mod sweep;
pub mod worker;

pub use clock::{Clock, ManualClock, SystemClock};
pub use executor::{Executor, KillSwitch, SyntheticConfig, SyntheticExecutor, TrajectorySpec};
pub use ledger::{Ledger, LedgerRecord, RecordStatus};
pub use manifest::{AdmissionRange, Manifest, TaskSpec};
pub use perf::{InstanceType, ScalingModel};
pub use progress::{EarlyStopPolicy, ProgressSample, StopDecision, Verdict};
pub use queue::{QueueId, QueueMessage, QueueSet, WorkQueue};
pub use worker::{ResourceEnvelope, Stage, Worker, WorkerConfig, WorkerReport};
