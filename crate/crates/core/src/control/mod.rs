//! Fault-tolerant control plane: heartbeat anomaly detection, the recovery
//! state machine, the spare pool, and the driver/executor protocol over
//! in-process or socket transports.

pub mod campaign;
pub mod driver;
pub mod executor;
pub mod heartbeat;
pub mod live;
pub mod local;
pub mod pool;
pub mod recovery;
pub mod tcp;
pub mod wire;

pub use campaign::{effective_time_rate, run_campaign, CampaignConfig, CampaignFault, CampaignReport, FaultRecord};
pub use driver::{ControlEvent, Driver, DriverStatus, ResumePoint};
pub use executor::{Executor, Telemetry};
pub use heartbeat::{Action, Anomaly, AnomalyRule, Detector, Heartbeat, ProcStatus, RuleKind};
pub use live::{LiveCluster, LiveConfig, LiveHandle, LiveView};
pub use local::{Batch, LocalCluster, PhaseDurations, PumpReport};
pub use pool::NodePool;
pub use recovery::{Evidence, RecoveryMachine, RecoveryPhase, Transition, Trigger};
pub use tcp::{DriverHandle, DriverServer, ExecutorClient};
pub use wire::{ExecState, Message};

#[cfg(test)]
mod tests;
