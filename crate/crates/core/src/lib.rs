//! Modeling toolkit for software distribution by self-replicating live USB
//! keys: genealogy logs, clone planning, room-deployment simulation and
//! cross-verification integrity checks.

pub mod genealogy;
pub mod integrity;
pub mod replicator;
pub mod spreadsim;
pub mod units;

pub use genealogy::{
    Entry, EventKind, Genealogy, GenealogyError, GenealogyEvent, LineageStats, ProvenanceHeader, Timestamp,
    UpgradeEvent,
};
pub use integrity::{
    build_manifest, verify, Digest256, IntegrityError, IntegrityManifest, Outcome, Protocol, TamperAction, TamperKind,
    TrustSimConfig, TrustSimResult, Verdict,
};
pub use replicator::{
    Bus, ClonePlan, DeviceId, FileClass, FileEntry, ImageManifest, Inventory, KeyState, PlanMode, PlanOptions,
    ReplicatorError, VirtualDevice,
};
pub use units::Rational;
