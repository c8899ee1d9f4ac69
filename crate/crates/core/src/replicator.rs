//! Clone and upgrade state machine over a virtual device bus.
//!
//! A key is cloned by copying the whitelisted system files plus everything
//! under the share directory. Personal files never leave a key. Upgrading an
//! existing key replaces its system files, merges share files and keeps the
//! personal files and genealogy of the upgraded key.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::genealogy::{self, Genealogy, GenealogyEvent, ProvenanceHeader, Timestamp};
use crate::units::{self, Rational, KIB};

pub const DEFAULT_SHARE_PREFIX: &str = "/share/";
pub const DEFAULT_BOOT_TARGET: &str = "/live/vmlinuz";
pub const SQUASHFS_PATH: &str = "/live/filesystem.squashfs";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ReplicatorError {
    #[error("refusing to clone: expected exactly 2 USB devices, found {found}")]
    RefusalNotTwoUsb { found: usize },
    #[error("refusing to clone: target {0} is the boot source")]
    RefusalTargetIsSource(DeviceId),
    #[error("refusing to clone: target {0} is an internal device and hard-disk installation is disabled")]
    RefusalInternalTarget(DeviceId),
    #[error("refusing to clone: target {0} already holds a key (plan an upgrade instead)")]
    TargetNotBlank(DeviceId),
    #[error("refusing to clone: target {id} holds {bytes} bytes of non-key data and overwrite was not confirmed")]
    OverwriteNotConfirmed { id: DeviceId, bytes: u64 },
    #[error("refusing to clone: boot source {0} is not on the USB bus")]
    SourceNotUsb(DeviceId),
    #[error("inventory is empty")]
    EmptyInventory,
    #[error("inventory must have exactly one boot source, found {0}")]
    BootSourceCount(usize),
    #[error("duplicate device id {0}")]
    DuplicateDevice(DeviceId),
    #[error("unknown device {0}")]
    UnknownDevice(DeviceId),
    #[error("device {0} does not hold a key")]
    NotAKey(DeviceId),
    #[error("capacity exceeded on {id}: needs {needed_bytes} bytes, device holds {capacity_bytes}")]
    CapacityExceeded { id: DeviceId, needed_bytes: u64, capacity_bytes: u64 },
    #[error("plan no longer matches the inventory: {0}")]
    StalePlan(String),
    #[error("bandwidth and upgrade ratio must be positive")]
    InvalidOptions,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DeviceId(pub String);

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for DeviceId {
    fn from(s: &str) -> Self {
        DeviceId(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bus {
    Usb,
    Internal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileClass {
    System,
    Share,
    Personal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub size_bytes: u64,
    pub class: FileClass,
    /// Opaque content fingerprint standing in for the file's bytes.
    #[serde(default)]
    pub content: String,
}

impl FileEntry {
    pub fn new(size_bytes: u64, class: FileClass, content: impl Into<String>) -> Self {
        Self { size_bytes, class, content: content.into() }
    }
}

/// The system image a key is built from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageManifest {
    pub version: ProvenanceHeader,
    /// System files to copy, with their sizes in bytes.
    pub whitelist: BTreeMap<String, u64>,
    #[serde(default = "default_share_prefix")]
    pub share_prefix: String,
    #[serde(default = "default_boot_target")]
    pub boot_target: String,
}

fn default_share_prefix() -> String {
    DEFAULT_SHARE_PREFIX.to_string()
}

fn default_boot_target() -> String {
    DEFAULT_BOOT_TARGET.to_string()
}

impl ImageManifest {
    /// Live-system layout: one squashfs holding nearly everything, plus the
    /// kernel and initrd the boot sector loads. Sizes add up to `image_bytes`.
    pub fn standard(version: ProvenanceHeader, image_bytes: u64) -> Self {
        let kernel = image_bytes / 200;
        let initrd = image_bytes / 100;
        let whitelist = BTreeMap::from([
            (SQUASHFS_PATH.to_string(), image_bytes - kernel - initrd),
            (DEFAULT_BOOT_TARGET.to_string(), kernel),
            ("/live/initrd.img".to_string(), initrd),
        ]);
        Self { version, whitelist, share_prefix: default_share_prefix(), boot_target: default_boot_target() }
    }

    pub fn image_bytes(&self) -> u64 {
        self.whitelist.values().sum()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.whitelist.is_empty() {
            return Err("whitelist is empty".into());
        }
        if let Some(p) = self.whitelist.keys().find(|p| p.starts_with(&self.share_prefix)) {
            return Err(format!("whitelisted path {p} lies inside the share prefix"));
        }
        if !self.whitelist.contains_key(&self.boot_target) {
            return Err(format!("boot target {} is not whitelisted", self.boot_target));
        }
        Ok(())
    }

    /// Content fingerprint of an untouched file of this image.
    pub fn pristine_content(&self, path: &str) -> String {
        format!("{} :: {path}", self.version)
    }

    /// A key freshly written from this image.
    pub fn build_key(&self, capacity_kib: u64, genealogy: Genealogy) -> KeyState {
        let files = self
            .whitelist
            .iter()
            .map(|(path, &size)| (path.clone(), FileEntry::new(size, FileClass::System, self.pristine_content(path))))
            .collect();
        KeyState {
            version: self.version.clone(),
            files,
            image_bytes: self.image_bytes(),
            boot_pointer: self.boot_target.clone(),
            genealogy,
            capacity_kib,
            compromised: false,
        }
    }
}

/// A live key as seen by the replicator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyState {
    pub version: ProvenanceHeader,
    pub files: BTreeMap<String, FileEntry>,
    pub image_bytes: u64,
    /// File the boot sector loads.
    #[serde(default = "default_boot_target")]
    pub boot_pointer: String,
    #[serde(with = "genealogy::as_text")]
    pub genealogy: Genealogy,
    pub capacity_kib: u64,
    /// The key's own checking tools have been altered.
    #[serde(default)]
    pub compromised: bool,
}

impl KeyState {
    pub fn files_of(&self, class: FileClass) -> BTreeMap<String, FileEntry> {
        self.files.iter().filter(|(_, f)| f.class == class).map(|(p, f)| (p.clone(), f.clone())).collect()
    }

    pub fn paths_of(&self, class: FileClass) -> BTreeSet<String> {
        self.files.iter().filter(|(_, f)| f.class == class).map(|(p, _)| p.clone()).collect()
    }

    pub fn bytes_of(&self, class: FileClass) -> u64 {
        self.files.values().filter(|f| f.class == class).map(|f| f.size_bytes).sum()
    }

    pub fn used_bytes(&self) -> u64 {
        self.files.values().map(|f| f.size_bytes).sum()
    }

    /// Locale used when this key writes genealogy events: the locale of its
    /// latest event, else the image locale.
    pub fn session_locale(&self) -> String {
        self.genealogy
            .top_level_events()
            .last()
            .map(|e| e.locale.clone())
            .unwrap_or_else(|| self.version.locale.clone())
    }

    pub fn validate(&self, share_prefix: &str) -> Result<(), String> {
        let capacity = self.capacity_kib.saturating_mul(KIB);
        if self.used_bytes() > capacity {
            return Err(format!("files use {} bytes, capacity is {capacity}", self.used_bytes()));
        }
        if let Some((p, _)) =
            self.files.iter().find(|(p, f)| p.starts_with(share_prefix) && f.class != FileClass::Share)
        {
            return Err(format!("{p} lies under {share_prefix} but is not classified as share"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VirtualDevice {
    pub id: DeviceId,
    pub bus: Bus,
    pub capacity_kib: u64,
    /// Bytes of data on the device that do not belong to a key.
    #[serde(default)]
    pub foreign_bytes: u64,
    #[serde(default)]
    pub is_boot_source: bool,
    #[serde(default)]
    pub contents: Option<KeyState>,
}

impl VirtualDevice {
    pub fn blank(id: impl Into<String>, bus: Bus, capacity_kib: u64) -> Self {
        Self { id: DeviceId(id.into()), bus, capacity_kib, foreign_bytes: 0, is_boot_source: false, contents: None }
    }

    pub fn with_key(id: impl Into<String>, key: KeyState) -> Self {
        Self {
            id: DeviceId(id.into()),
            bus: Bus::Usb,
            capacity_kib: key.capacity_kib,
            foreign_bytes: 0,
            is_boot_source: false,
            contents: Some(key),
        }
    }

    pub fn booted(mut self) -> Self {
        self.is_boot_source = true;
        self
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.capacity_kib.saturating_mul(KIB)
    }

    fn key(&self) -> Result<&KeyState, ReplicatorError> {
        self.contents.as_ref().ok_or_else(|| ReplicatorError::NotAKey(self.id.clone()))
    }
}

/// All devices attached to the machine running the clone.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Inventory {
    pub devices: Vec<VirtualDevice>,
}

impl Inventory {
    pub fn new(devices: Vec<VirtualDevice>) -> Self {
        Self { devices }
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("inventory serializes")
    }

    pub fn get(&self, id: &DeviceId) -> Option<&VirtualDevice> {
        self.devices.iter().find(|d| &d.id == id)
    }

    fn index_of(&self, id: &DeviceId) -> Result<usize, ReplicatorError> {
        self.devices.iter().position(|d| &d.id == id).ok_or_else(|| ReplicatorError::UnknownDevice(id.clone()))
    }

    pub fn boot_source(&self) -> Result<&VirtualDevice, ReplicatorError> {
        let mut boots = self.devices.iter().filter(|d| d.is_boot_source);
        match (boots.next(), boots.count()) {
            (Some(d), 0) => Ok(d),
            (None, _) => Err(ReplicatorError::BootSourceCount(0)),
            (Some(_), rest) => Err(ReplicatorError::BootSourceCount(rest + 1)),
        }
    }

    fn check_ids(&self) -> Result<(), ReplicatorError> {
        let mut seen = BTreeSet::new();
        for d in &self.devices {
            if !seen.insert(&d.id) {
                return Err(ReplicatorError::DuplicateDevice(d.id.clone()));
            }
        }
        Ok(())
    }
}

/// Picks the clone target, applying the strict device test: exactly two USB
/// devices must be present, the booted key and the target. Anything else may
/// mean an internal device is being reported as USB, so the clone refuses.
pub fn select_target(inventory: &Inventory) -> Result<DeviceId, ReplicatorError> {
    if inventory.devices.is_empty() {
        return Err(ReplicatorError::EmptyInventory);
    }
    inventory.check_ids()?;
    let source = inventory.boot_source()?;
    let usb: Vec<&VirtualDevice> = inventory.devices.iter().filter(|d| d.bus == Bus::Usb).collect();
    if usb.len() != 2 {
        return Err(ReplicatorError::RefusalNotTwoUsb { found: usb.len() });
    }
    if source.bus != Bus::Usb {
        return Err(ReplicatorError::SourceNotUsb(source.id.clone()));
    }
    let target = usb.iter().find(|d| !d.is_boot_source).expect("two USB devices, one boot source");
    Ok(target.id.clone())
}

pub fn classify_path(path: &str, manifest: &ImageManifest) -> FileClass {
    if manifest.whitelist.contains_key(path) {
        FileClass::System
    } else if path.starts_with(&manifest.share_prefix) {
        FileClass::Share
    } else {
        FileClass::Personal
    }
}

pub fn classify_paths(files: &BTreeMap<String, u64>, manifest: &ImageManifest) -> BTreeMap<String, FileClass> {
    files.keys().map(|p| (p.clone(), classify_path(p, manifest))).collect()
}

/// Union of two share sets; the booted key's copy wins on collisions.
pub fn share_merge(
    source_share: &BTreeMap<String, FileEntry>,
    target_share: &BTreeMap<String, FileEntry>,
) -> BTreeMap<String, FileEntry> {
    let mut merged = target_share.clone();
    merged.extend(source_share.iter().map(|(p, f)| (p.clone(), f.clone())));
    merged
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanMode {
    Fresh,
    Upgrade,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanOptions {
    #[serde(with = "units::serde_rational")]
    pub bandwidth_mb_s: Rational,
    /// Fraction of the copied bytes actually rewritten by an upgrade.
    #[serde(with = "units::serde_rational")]
    pub upgrade_ratio: Rational,
    /// Allow wiping non-key data on the target.
    #[serde(default)]
    pub confirm_overwrite: bool,
    /// Hard-disk installation. Off in distributed keys.
    #[serde(default)]
    pub allow_internal_target: bool,
}

impl Default for PlanOptions {
    fn default() -> Self {
        Self {
            bandwidth_mb_s: Rational::new(9, 2),
            upgrade_ratio: Rational::new(4, 5),
            confirm_overwrite: false,
            allow_internal_target: false,
        }
    }
}

impl PlanOptions {
    pub fn with_bandwidth(bandwidth_mb_s: Rational) -> Self {
        Self { bandwidth_mb_s, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClonePlan {
    pub mode: PlanMode,
    pub source: DeviceId,
    pub target: DeviceId,
    pub copy_set: BTreeSet<String>,
    pub preserve_set: BTreeSet<String>,
    /// Size of everything in the copy set.
    pub bytes_total: u64,
    /// Bytes actually written; equals `bytes_total` for a fresh clone.
    pub transfer_bytes: u64,
    #[serde(with = "units::serde_rational")]
    pub duration_s: Rational,
    pub overwrites_foreign_data: bool,
    pub options: PlanOptions,
}

fn check_pair(source: &VirtualDevice, target: &VirtualDevice, opts: &PlanOptions) -> Result<(), ReplicatorError> {
    use num_traits::Signed;
    if !opts.bandwidth_mb_s.is_positive() || !opts.upgrade_ratio.is_positive() {
        return Err(ReplicatorError::InvalidOptions);
    }
    if source.id == target.id || target.is_boot_source {
        return Err(ReplicatorError::RefusalTargetIsSource(target.id.clone()));
    }
    if target.bus == Bus::Internal && !opts.allow_internal_target {
        return Err(ReplicatorError::RefusalInternalTarget(target.id.clone()));
    }
    Ok(())
}

fn copy_files(source: &KeyState) -> BTreeMap<String, FileEntry> {
    source.files.iter().filter(|(_, f)| f.class != FileClass::Personal).map(|(p, f)| (p.clone(), f.clone())).collect()
}

/// Plans writing `source`'s key onto blank (or confirmed-wipeable) media.
pub fn plan_clone(
    source: &VirtualDevice,
    target: &VirtualDevice,
    opts: &PlanOptions,
) -> Result<ClonePlan, ReplicatorError> {
    check_pair(source, target, opts)?;
    let key = source.key()?;
    if target.contents.is_some() {
        return Err(ReplicatorError::TargetNotBlank(target.id.clone()));
    }
    if target.foreign_bytes > 0 && !opts.confirm_overwrite {
        return Err(ReplicatorError::OverwriteNotConfirmed { id: target.id.clone(), bytes: target.foreign_bytes });
    }
    let copy = copy_files(key);
    let bytes_total: u64 = copy.values().map(|f| f.size_bytes).sum();
    if bytes_total > target.capacity_bytes() {
        return Err(ReplicatorError::CapacityExceeded {
            id: target.id.clone(),
            needed_bytes: bytes_total,
            capacity_bytes: target.capacity_bytes(),
        });
    }
    Ok(ClonePlan {
        mode: PlanMode::Fresh,
        source: source.id.clone(),
        target: target.id.clone(),
        copy_set: copy.into_keys().collect(),
        preserve_set: BTreeSet::new(),
        bytes_total,
        transfer_bytes: bytes_total,
        duration_s: units::transfer_seconds(bytes_total, &opts.bandwidth_mb_s),
        overwrites_foreign_data: target.foreign_bytes > 0,
        options: opts.clone(),
    })
}

/// Plans installing `source`'s system over an existing key, keeping the
/// target's personal files. The new system is staged next to the old one
/// before the swap, so both must fit at once.
pub fn plan_upgrade(
    source: &VirtualDevice,
    target: &VirtualDevice,
    opts: &PlanOptions,
) -> Result<ClonePlan, ReplicatorError> {
    check_pair(source, target, opts)?;
    let key = source.key()?;
    let existing = target.key()?;
    let copy = copy_files(key);
    let bytes_total: u64 = copy.values().map(|f| f.size_bytes).sum();
    let merged_share = share_merge(&key.files_of(FileClass::Share), &existing.files_of(FileClass::Share));
    let peak = existing.bytes_of(FileClass::Personal)
        + existing.bytes_of(FileClass::System)
        + key.bytes_of(FileClass::System)
        + merged_share.values().map(|f| f.size_bytes).sum::<u64>();
    if peak > target.capacity_bytes() {
        return Err(ReplicatorError::CapacityExceeded {
            id: target.id.clone(),
            needed_bytes: peak,
            capacity_bytes: target.capacity_bytes(),
        });
    }
    let transfer = opts.upgrade_ratio * Rational::from_integer(bytes_total as i128);
    let duration_s = transfer / (opts.bandwidth_mb_s * Rational::from_integer(units::MB as i128));
    Ok(ClonePlan {
        mode: PlanMode::Upgrade,
        source: source.id.clone(),
        target: target.id.clone(),
        copy_set: copy.into_keys().collect(),
        preserve_set: existing.paths_of(FileClass::Personal),
        bytes_total,
        transfer_bytes: transfer.ceil().to_integer() as u64,
        duration_s,
        overwrites_foreign_data: false,
        options: opts.clone(),
    })
}

/// Fresh clone for blank targets, upgrade for targets that already hold a key.
pub fn plan_auto(
    source: &VirtualDevice,
    target: &VirtualDevice,
    opts: &PlanOptions,
) -> Result<ClonePlan, ReplicatorError> {
    if target.contents.is_some() {
        plan_upgrade(source, target, opts)
    } else {
        plan_clone(source, target, opts)
    }
}

/// Applies a plan. The source records a spawn at `now`; the target is born
/// (fresh clone) or reborn after an embedded donor record (upgrade). Nothing
/// changes if the plan no longer fits the inventory.
pub fn execute_plan(plan: &ClonePlan, inventory: &mut Inventory, now: Timestamp) -> Result<(), ReplicatorError> {
    let si = inventory.index_of(&plan.source)?;
    let ti = inventory.index_of(&plan.target)?;
    let (source, target) = (&inventory.devices[si], &inventory.devices[ti]);
    let current = match plan.mode {
        PlanMode::Fresh => plan_clone(source, target, &plan.options)?,
        PlanMode::Upgrade => plan_upgrade(source, target, &plan.options)?,
    };
    if &current != plan {
        return Err(ReplicatorError::StalePlan(format!(
            "{} plan from {} to {} was computed against a different device state",
            match plan.mode {
                PlanMode::Fresh => "fresh",
                PlanMode::Upgrade => "upgrade",
            },
            plan.source,
            plan.target
        )));
    }

    // Everything below is infallible.
    let source_key = source.key()?;
    let locale = source_key.session_locale();
    let donor_genealogy =
        source_key.genealogy.record_spawn(GenealogyEvent::spawn(now, locale.clone(), source.capacity_kib));
    let copied: BTreeMap<String, FileEntry> =
        plan.copy_set.iter().map(|p| (p.clone(), source_key.files[p].clone())).collect();
    let target_capacity = target.capacity_kib;
    let rebirth = GenealogyEvent::birth(now, locale, target_capacity);

    let new_target = match plan.mode {
        PlanMode::Fresh => KeyState {
            version: source_key.version.clone(),
            files: copied,
            image_bytes: source_key.image_bytes,
            boot_pointer: source_key.boot_pointer.clone(),
            genealogy: donor_genealogy.child_genealogy(rebirth),
            capacity_kib: target_capacity,
            compromised: source_key.compromised,
        },
        PlanMode::Upgrade => {
            let existing = target.key()?;
            let mut files = existing.files_of(FileClass::Personal);
            let source_share: BTreeMap<_, _> = copied
                .iter()
                .filter(|(_, f)| f.class == FileClass::Share)
                .map(|(p, f)| (p.clone(), f.clone()))
                .collect();
            files.extend(share_merge(&source_share, &existing.files_of(FileClass::Share)));
            files.extend(copied.into_iter().filter(|(_, f)| f.class == FileClass::System));
            KeyState {
                version: source_key.version.clone(),
                files,
                image_bytes: source_key.image_bytes,
                boot_pointer: source_key.boot_pointer.clone(),
                genealogy: existing.genealogy.record_upgrade(&donor_genealogy, rebirth),
                capacity_kib: existing.capacity_kib,
                compromised: source_key.compromised,
            }
        }
    };

    inventory.devices[si].contents.as_mut().expect("source holds a key").genealogy = donor_genealogy;
    let target = &mut inventory.devices[ti];
    target.contents = Some(new_target);
    target.foreign_bytes = 0;
    Ok(())
}
