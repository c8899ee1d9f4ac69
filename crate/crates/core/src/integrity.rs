//! Integrity manifests and cross-verification between keys.
//!
//! A key cannot vouch for itself: if it was tampered with, its checking tools
//! may be tampered with too. Verification is therefore always done by booting
//! one key and checking another against a reference manifest obtained
//! out-of-band. A compromised verifier is modeled as answering "pass" no
//! matter what it inspects.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::genealogy::{Genealogy, GenealogyEvent, ProvenanceHeader, Timestamp};
use crate::replicator::{self, FileClass, FileEntry, ImageManifest, Inventory, KeyState, PlanOptions, VirtualDevice};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IntegrityError {
    #[error("{path}: no such system file on the key")]
    PathNotFound { path: String },
    #[error("{path}: shadow boot target must be a path not already listed as a system file")]
    ShadowPathListed { path: String },
    #[error("manifest line {line}: {message}")]
    ManifestSyntax { line: usize, message: String },
    #[error("key has no system files")]
    NoSystemFiles,
    #[error("invalid trust simulation config: {0}")]
    InvalidConfig(String),
}

/// 256-bit content digest.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest256(pub [u8; 32]);

impl Digest256 {
    pub fn of_file(entry: &FileEntry) -> Self {
        let mut h = Sha256::new();
        h.update(entry.size_bytes.to_be_bytes());
        h.update(entry.content.as_bytes());
        Digest256(h.finalize().into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s).ok()?;
        Some(Digest256(bytes.try_into().ok()?))
    }
}

impl fmt::Debug for Digest256 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest256({})", self.to_hex())
    }
}

impl Serialize for Digest256 {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest256 {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Digest256::from_hex(&s).ok_or_else(|| serde::de::Error::custom("expected 64 hex digits"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegrityManifest {
    pub version: Option<ProvenanceHeader>,
    pub file_digests: BTreeMap<String, Digest256>,
    pub boot_pointer: String,
}

/// Digests of a key's system files, plus the file its boot sector loads.
pub fn build_manifest(key: &KeyState) -> Result<IntegrityManifest, IntegrityError> {
    let file_digests: BTreeMap<String, Digest256> = key
        .files
        .iter()
        .filter(|(_, f)| f.class == FileClass::System)
        .map(|(p, f)| (p.clone(), Digest256::of_file(f)))
        .collect();
    if file_digests.is_empty() {
        return Err(IntegrityError::NoSystemFiles);
    }
    Ok(IntegrityManifest { version: Some(key.version.clone()), file_digests, boot_pointer: key.boot_pointer.clone() })
}

impl IntegrityManifest {
    /// `sha256sum`-style text: `# <descriptor>` (optional), one
    /// `<digest>  <path>` line per file, then `boot=<path>`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(v) = &self.version {
            out.push_str(&format!("# {v}\n"));
        }
        for (path, digest) in &self.file_digests {
            out.push_str(&format!("{}  {path}\n", digest.to_hex()));
        }
        out.push_str(&format!("boot={}\n", self.boot_pointer));
        out
    }

    pub fn from_text(text: &str) -> Result<Self, IntegrityError> {
        let err = |line: usize, message: &str| IntegrityError::ManifestSyntax { line, message: message.to_string() };
        let mut version = None;
        let mut file_digests = BTreeMap::new();
        let mut boot_pointer = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim_end();
            if line.is_empty() {
                continue;
            }
            if boot_pointer.is_some() {
                return Err(err(line_no, "content after the boot= trailer"));
            }
            if let Some(desc) = line.strip_prefix("# ") {
                if !file_digests.is_empty() || version.is_some() {
                    return Err(err(line_no, "version comment must come first"));
                }
                version = Some(desc.parse().map_err(|_| err(line_no, "malformed version descriptor"))?);
            } else if let Some(path) = line.strip_prefix("boot=") {
                if path.is_empty() {
                    return Err(err(line_no, "empty boot pointer"));
                }
                boot_pointer = Some(path.to_string());
            } else {
                let (hex, path) = line.split_once("  ").ok_or_else(|| err(line_no, "expected \"<digest>  <path>\""))?;
                let digest = Digest256::from_hex(hex).ok_or_else(|| err(line_no, "digest must be 64 hex digits"))?;
                if file_digests.insert(path.to_string(), digest).is_some() {
                    return Err(err(line_no, "duplicate path"));
                }
            }
        }
        let boot_pointer = boot_pointer.ok_or_else(|| err(text.lines().count(), "missing boot= trailer"))?;
        let manifest = IntegrityManifest { version, file_digests, boot_pointer };
        if !manifest.file_digests.contains_key(&manifest.boot_pointer) {
            return Err(err(text.lines().count(), "boot pointer is not a listed file"));
        }
        Ok(manifest)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TamperKind {
    /// Alter a listed file's content.
    ModifyFile,
    /// Leave listed files alone and point the boot sector at a new,
    /// unlisted file.
    ShadowBoot,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TamperAction {
    pub kind: TamperKind,
    pub path: String,
}

impl TamperAction {
    pub fn modify(path: impl Into<String>) -> Self {
        Self { kind: TamperKind::ModifyFile, path: path.into() }
    }

    pub fn shadow_boot(path: impl Into<String>) -> Self {
        Self { kind: TamperKind::ShadowBoot, path: path.into() }
    }
}

/// Returns the attacker's version of `key`. The attacker also replaces the
/// key's checking tools, so the result is marked compromised. The shadow boot
/// file is added to the system set so that it travels with clones.
pub fn tamper(key: &KeyState, action: &TamperAction) -> Result<KeyState, IntegrityError> {
    let mut out = key.clone();
    match action.kind {
        TamperKind::ModifyFile => {
            let entry = out
                .files
                .get_mut(&action.path)
                .filter(|f| f.class == FileClass::System)
                .ok_or_else(|| IntegrityError::PathNotFound { path: action.path.clone() })?;
            entry.content.push_str(" [modified]");
        }
        TamperKind::ShadowBoot => {
            if out.files.get(&action.path).is_some_and(|f| f.class == FileClass::System) {
                return Err(IntegrityError::ShadowPathListed { path: action.path.clone() });
            }
            out.files.insert(action.path.clone(), FileEntry::new(4096, FileClass::System, "malicious system"));
            out.boot_pointer = action.path.clone();
        }
    }
    out.compromised = true;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Pass,
    FailDigest,
    FailBootPointer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub outcome: Outcome,
    pub offending_path: Option<String>,
}

impl Verdict {
    pub fn pass() -> Self {
        Self { outcome: Outcome::Pass, offending_path: None }
    }

    pub fn is_pass(&self) -> bool {
        self.outcome == Outcome::Pass
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.outcome, &self.offending_path) {
            (Outcome::Pass, _) => f.write_str("PASS"),
            (Outcome::FailDigest, Some(p)) => write!(f, "FAIL digest mismatch: {p}"),
            (Outcome::FailBootPointer, Some(p)) => write!(f, "FAIL boot pointer: {p}"),
            (Outcome::FailDigest, None) => f.write_str("FAIL digest mismatch"),
            (Outcome::FailBootPointer, None) => f.write_str("FAIL boot pointer"),
        }
    }
}

/// What a clean verifier reports for `subject`: every listed file must be
/// present with its reference digest, and the boot pointer must land on a
/// listed, digest-valid file.
pub fn inspect(subject: &KeyState, reference: &IntegrityManifest) -> Verdict {
    for (path, expected) in &reference.file_digests {
        let ok = subject.files.get(path).is_some_and(|f| Digest256::of_file(f) == *expected);
        if !ok {
            return Verdict { outcome: Outcome::FailDigest, offending_path: Some(path.clone()) };
        }
    }
    if !reference.file_digests.contains_key(&subject.boot_pointer) {
        return Verdict { outcome: Outcome::FailBootPointer, offending_path: Some(subject.boot_pointer.clone()) };
    }
    Verdict::pass()
}

/// Boots `verifier` to check `subject`.
///
/// # Panics
/// If `verifier` and `subject` are the same value: a key cannot check itself.
pub fn verify(verifier: &KeyState, subject: &KeyState, reference: &IntegrityManifest) -> Verdict {
    assert!(!std::ptr::eq(verifier, subject), "a key cannot verify itself");
    if verifier.compromised {
        return Verdict::pass();
    }
    inspect(subject, reference)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// The newer key boots and upgrades the other; nothing is checked.
    NewestBoots,
    /// A fair coin picks the booting key, which checks the other before any
    /// upgrade happens.
    RandomDraw,
    /// The older key is upgraded, then its owner boots a second, private key
    /// to check it.
    TwoKeyOwner,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    A,
    B,
}

/// A participant: the key they carry around and, optionally, a spare key
/// that never leaves home.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Party {
    pub key: KeyState,
    pub spare: Option<KeyState>,
    pub flagged: bool,
}

impl Party {
    pub fn new(key: KeyState) -> Self {
        Self { key, spare: None, flagged: false }
    }
}

/// Reference manifests per image version, distributed out-of-band.
#[derive(Debug, Clone, Default)]
pub struct References {
    by_version: BTreeMap<ProvenanceHeader, IntegrityManifest>,
}

impl References {
    pub fn insert(&mut self, manifest: IntegrityManifest) {
        if let Some(v) = manifest.version.clone() {
            self.by_version.insert(v, manifest);
        }
    }

    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a ImageManifest>) -> Self {
        let mut refs = Self::default();
        for image in images {
            let key = image.build_key(u64::MAX / 1024, Genealogy::default());
            refs.insert(build_manifest(&key).expect("image has system files"));
        }
        refs
    }

    pub fn get(&self, version: &ProvenanceHeader) -> Option<&IntegrityManifest> {
        self.by_version.get(version)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MeetingOutcome {
    /// `None` when the protocol performed no check.
    pub verdict: Option<Verdict>,
    pub booter: Side,
    pub upgraded: Option<Side>,
    /// The verdict was a pass although the checked key deviates from its
    /// reference manifest.
    pub false_negative: bool,
}

fn newer(a: &KeyState, b: &KeyState) -> Option<Side> {
    if a.version.is_newer_than(&b.version) {
        Some(Side::A)
    } else if b.version.is_newer_than(&a.version) {
        Some(Side::B)
    } else {
        None
    }
}

fn check(verifier: &KeyState, subject: &KeyState, refs: &References) -> (Verdict, bool) {
    let Some(reference) = refs.get(&subject.version) else {
        // No reference for this version: nothing to compare against.
        return (Verdict { outcome: Outcome::FailDigest, offending_path: None }, false);
    };
    let verdict = verify(verifier, subject, reference);
    let false_negative = verdict.is_pass() && !inspect(subject, reference).is_pass();
    (verdict, false_negative)
}

/// Upgrades `to` from `from` through the replicator, stamping both genealogies.
pub fn upgrade_key(from: &KeyState, to: &KeyState, now: Timestamp) -> KeyState {
    let source = VirtualDevice::with_key("booted", from.clone());
    let mut target = VirtualDevice::with_key("upgraded", to.clone());
    // Meeting upgrades are modeled without capacity pressure.
    target.capacity_kib = target.capacity_kib.max(from.used_bytes() / 1024 + to.used_bytes() / 1024 + 1);
    let mut inventory = Inventory::new(vec![source, target]);
    let opts = PlanOptions::default();
    let plan = replicator::plan_upgrade(&inventory.devices[0], &inventory.devices[1], &opts)
        .expect("meeting upgrades always fit");
    replicator::execute_plan(&plan, &mut inventory, now).expect("fresh plan applies");
    let mut upgraded = inventory.devices.pop().and_then(|d| d.contents).expect("target holds a key");
    upgraded.capacity_kib = to.capacity_kib;
    upgraded
}

/// Two parties meet and follow `protocol`.
pub fn meeting<R: Rng>(
    a: &mut Party,
    b: &mut Party,
    protocol: Protocol,
    refs: &References,
    now: Timestamp,
    rng: &mut R,
) -> MeetingOutcome {
    let newer_side = newer(&a.key, &b.key);
    let do_upgrade = |from: Side, a: &mut Party, b: &mut Party| match from {
        Side::A => b.key = upgrade_key(&a.key, &b.key, now),
        Side::B => a.key = upgrade_key(&b.key, &a.key, now),
    };
    let other = |s: Side| match s {
        Side::A => Side::B,
        Side::B => Side::A,
    };
    match protocol {
        Protocol::NewestBoots => {
            let booter = newer_side.unwrap_or(Side::A);
            if let Some(from) = newer_side {
                do_upgrade(from, a, b);
            }
            MeetingOutcome { verdict: None, booter, upgraded: newer_side.map(other), false_negative: false }
        }
        Protocol::RandomDraw => {
            let booter = if rng.gen_bool(0.5) { Side::A } else { Side::B };
            let (verdict, false_negative) = match booter {
                Side::A => check(&a.key, &b.key, refs),
                Side::B => check(&b.key, &a.key, refs),
            };
            let mut upgraded = None;
            if verdict.is_pass() {
                if let Some(from) = newer_side {
                    do_upgrade(from, a, b);
                    upgraded = Some(other(from));
                }
            } else {
                match other(booter) {
                    Side::A => a.flagged = true,
                    Side::B => b.flagged = true,
                }
            }
            MeetingOutcome { verdict: Some(verdict), booter, upgraded, false_negative }
        }
        Protocol::TwoKeyOwner => {
            let Some(from) = newer_side else {
                return MeetingOutcome { verdict: None, booter: Side::A, upgraded: None, false_negative: false };
            };
            do_upgrade(from, a, b);
            let subject_side = other(from);
            let subject = match subject_side {
                Side::A => &mut *a,
                Side::B => &mut *b,
            };
            let (verdict, false_negative) = match &subject.spare {
                Some(spare) => check(spare, &subject.key, refs),
                None => {
                    return MeetingOutcome {
                        verdict: None,
                        booter: from,
                        upgraded: Some(subject_side),
                        false_negative: false,
                    }
                }
            };
            if !verdict.is_pass() {
                subject.flagged = true;
            }
            MeetingOutcome { verdict: Some(verdict), booter: from, upgraded: Some(subject_side), false_negative }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrustSimConfig {
    pub population: u32,
    pub tampered_initial: u32,
    pub meetings: u32,
    pub protocol: Protocol,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default = "default_attack")]
    pub attack: TamperKind,
    /// Parties whose key failed a check stop meeting others.
    #[serde(default = "default_quarantine")]
    pub quarantine: bool,
}

fn default_attack() -> TamperKind {
    TamperKind::ModifyFile
}

fn default_quarantine() -> bool {
    true
}

impl TrustSimConfig {
    pub fn new(population: u32, tampered_initial: u32, meetings: u32, protocol: Protocol, rng_seed: u64) -> Self {
        Self {
            population,
            tampered_initial,
            meetings,
            protocol,
            rng_seed,
            attack: default_attack(),
            quarantine: default_quarantine(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrustSimResult {
    pub protocol: Protocol,
    /// Compromised keys before the first meeting and after each meeting.
    pub infected_over_time: Vec<u32>,
    pub detections: u32,
    pub false_negatives: u32,
    pub checks: u32,
    pub upgrades: u32,
    pub meetings_held: u32,
    pub flagged: u32,
}

impl TrustSimResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serializes")
    }
}

const OLD_RELEASE: &str = "Sage 5.8 Debian Live ejcim 2013-04-06 fr_FR.UTF-8 - wheezy - 686-pae";
const NEW_RELEASE: &str = "Sage 5.9 Debian wheezy Live 3.0.5-1 2013-05-09 en_US.UTF-8 - wheezy - 686-pae";

/// Random pairwise meetings in a population where the first
/// `tampered_initial` parties carry an attacker's key advertised as the newest
/// release, and everybody else carries the previous release. Every party owns
/// a clean spare key of the release they started with.
pub fn run_trust_sim(config: &TrustSimConfig) -> Result<TrustSimResult, IntegrityError> {
    if config.tampered_initial > config.population {
        return Err(IntegrityError::InvalidConfig("tampered_initial exceeds population".into()));
    }
    let image_bytes = 2_700_000_000;
    let old_image = ImageManifest::standard(OLD_RELEASE.parse().expect("valid descriptor"), image_bytes);
    let new_image = ImageManifest::standard(NEW_RELEASE.parse().expect("valid descriptor"), image_bytes);
    let refs = References::from_images([&old_image, &new_image]);
    let epoch = crate::spreadsim::default_epoch();
    let capacity = 7_692_288;
    let attack = match config.attack {
        TamperKind::ModifyFile => TamperAction::modify(replicator::SQUASHFS_PATH),
        TamperKind::ShadowBoot => TamperAction::shadow_boot("/.hidden/vmlinuz"),
    };

    let mut parties: Vec<Party> = (0..config.population)
        .map(|i| {
            let image = if i < config.tampered_initial { &new_image } else { &old_image };
            let g = Genealogy::new(Some(image.version.clone())).record_birth(GenealogyEvent::birth(
                epoch,
                image.version.locale.clone(),
                capacity,
            ));
            let clean = image.build_key(capacity, g);
            let key = if i < config.tampered_initial { tamper(&clean, &attack)? } else { clean.clone() };
            Ok(Party { key, spare: Some(clean), flagged: false })
        })
        .collect::<Result<_, IntegrityError>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let infected = |parties: &[Party]| parties.iter().filter(|p| p.key.compromised).count() as u32;
    let mut result = TrustSimResult {
        protocol: config.protocol,
        infected_over_time: vec![infected(&parties)],
        detections: 0,
        false_negatives: 0,
        checks: 0,
        upgrades: 0,
        meetings_held: 0,
        flagged: 0,
    };
    for m in 0..config.meetings {
        let eligible: Vec<usize> = (0..parties.len()).filter(|&i| !(config.quarantine && parties[i].flagged)).collect();
        if eligible.len() < 2 {
            result.infected_over_time.push(infected(&parties));
            continue;
        }
        let pick = index::sample(&mut rng, eligible.len(), 2);
        let (i, j) = (eligible[pick.index(0)], eligible[pick.index(1)]);
        let (lo, hi) = (i.min(j), i.max(j));
        let (left, right) = parties.split_at_mut(hi);
        let (a, b) = (&mut left[lo], &mut right[0]);
        let now = epoch + chrono::Duration::minutes(i64::from(m) + 1);
        let outcome = meeting(a, b, config.protocol, &refs, now, &mut rng);
        result.meetings_held += 1;
        if let Some(v) = &outcome.verdict {
            result.checks += 1;
            if !v.is_pass() {
                result.detections += 1;
            }
        }
        result.false_negatives += u32::from(outcome.false_negative);
        result.upgrades += u32::from(outcome.upgraded.is_some());
        result.infected_over_time.push(infected(&parties));
    }
    result.flagged = parties.iter().filter(|p| p.flagged).count() as u32;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::replicator::SQUASHFS_PATH;

    fn image() -> ImageManifest {
        ImageManifest::standard(OLD_RELEASE.parse().unwrap(), 2_700_000_000)
    }

    fn clean_key() -> KeyState {
        let mut k = image().build_key(7_692_288, Genealogy::default());
        k.files.insert("/home/user/notes.sws".into(), FileEntry::new(10, FileClass::Personal, "mine"));
        k.files.insert("/share/slides.pdf".into(), FileEntry::new(10, FileClass::Share, "slides"));
        k
    }

    #[test]
    fn manifest_covers_system_files_only() {
        let m = build_manifest(&clean_key()).unwrap();
        assert_eq!(m.file_digests.len(), 3);
        assert!(m.file_digests.keys().all(|p| !p.starts_with("/home") && !p.starts_with("/share")));
        assert_eq!(m.boot_pointer, "/live/vmlinuz");
        assert_eq!(build_manifest(&image().build_key(1, Genealogy::default())).unwrap(), m);
    }

    #[test]
    fn manifest_text_roundtrip() {
        let m = build_manifest(&clean_key()).unwrap();
        let text = m.to_text();
        assert!(text.ends_with("boot=/live/vmlinuz\n"));
        assert_eq!(text.lines().filter(|l| l.len() > 66 && l.as_bytes()[64] == b' ').count(), 3);
        assert_eq!(IntegrityManifest::from_text(&text).unwrap(), m);
        let no_version: String = text.lines().skip(1).map(|l| format!("{l}\n")).collect();
        assert_eq!(IntegrityManifest::from_text(&no_version).unwrap().version, None);
    }

    #[test]
    fn manifest_text_errors() {
        let m = build_manifest(&clean_key()).unwrap();
        let text = m.to_text();
        let no_trailer = text.replace("boot=/live/vmlinuz\n", "");
        assert!(matches!(IntegrityManifest::from_text(&no_trailer), Err(IntegrityError::ManifestSyntax { .. })));
        let bad_boot = text.replace("boot=/live/vmlinuz", "boot=/elsewhere");
        assert!(IntegrityManifest::from_text(&bad_boot).is_err());
        let bad_hex = text.replacen(&text.lines().nth(1).unwrap()[..4], "zzzz", 1);
        assert!(matches!(IntegrityManifest::from_text(&bad_hex), Err(IntegrityError::ManifestSyntax { line: 2, .. })));
    }

    #[test]
    fn modify_then_restore() {
        let key = clean_key();
        let reference = build_manifest(&key).unwrap();
        let verifier = clean_key();
        let bad = tamper(&key, &TamperAction::modify(SQUASHFS_PATH)).unwrap();
        let v = verify(&verifier, &bad, &reference);
        assert_eq!(v.outcome, Outcome::FailDigest);
        assert_eq!(v.offending_path.as_deref(), Some(SQUASHFS_PATH));
        let mut restored = bad.clone();
        restored.files.insert(SQUASHFS_PATH.into(), key.files[SQUASHFS_PATH].clone());
        assert!(verify(&verifier, &restored, &reference).is_pass());
    }

    #[test]
    fn shadow_boot_passes_digests_but_fails_boot_pointer() {
        let key = clean_key();
        let reference = build_manifest(&key).unwrap();
        let bad = tamper(&key, &TamperAction::shadow_boot("/.cache/evil")).unwrap();
        for (path, entry) in &key.files {
            assert_eq!(&bad.files[path], entry);
        }
        let v = verify(&clean_key(), &bad, &reference);
        assert_eq!(v.outcome, Outcome::FailBootPointer);
        assert_eq!(v.offending_path.as_deref(), Some("/.cache/evil"));
    }

    #[test]
    fn tamper_errors() {
        let key = clean_key();
        assert!(matches!(tamper(&key, &TamperAction::modify("/nope")), Err(IntegrityError::PathNotFound { .. })));
        assert!(matches!(
            tamper(&key, &TamperAction::modify("/home/user/notes.sws")),
            Err(IntegrityError::PathNotFound { .. })
        ));
        assert!(matches!(
            tamper(&key, &TamperAction::shadow_boot(SQUASHFS_PATH)),
            Err(IntegrityError::ShadowPathListed { .. })
        ));
    }

    #[test]
    fn compromised_verifier_always_passes() {
        let key = clean_key();
        let reference = build_manifest(&key).unwrap();
        let bad = tamper(&key, &TamperAction::modify(SQUASHFS_PATH)).unwrap();
        let bad_verifier = tamper(&key, &TamperAction::shadow_boot("/x")).unwrap();
        assert!(verify(&bad_verifier, &bad, &reference).is_pass());
        assert!(verify(&clean_key(), &key, &reference).is_pass());
    }

    #[test]
    fn newest_boots_spreads_tampering() {
        let refs = References::from_images([&image()]);
        let newer = ImageManifest::standard(NEW_RELEASE.parse().unwrap(), 2_700_000_000);
        let bad =
            tamper(&newer.build_key(7_692_288, Genealogy::default()), &TamperAction::modify(SQUASHFS_PATH)).unwrap();
        let mut a = Party::new(bad);
        let mut b = Party::new(clean_key());
        let now = crate::spreadsim::default_epoch();
        let out = meeting(&mut a, &mut b, Protocol::NewestBoots, &refs, now, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(out.verdict, None);
        assert_eq!(out.booter, Side::A);
        assert_eq!(out.upgraded, Some(Side::B));
        assert!(b.key.compromised);
        assert_eq!(b.key.version, a.key.version);
        assert_eq!(b.key.files_of(FileClass::Personal).len(), 1);
    }

    #[test]
    fn two_key_owner_catches_tampered_upgrade() {
        let newer = ImageManifest::standard(NEW_RELEASE.parse().unwrap(), 2_700_000_000);
        let refs = References::from_images([&image(), &newer]);
        let bad =
            tamper(&newer.build_key(7_692_288, Genealogy::default()), &TamperAction::shadow_boot("/evil")).unwrap();
        let mut a = Party::new(bad);
        let mut b = Party { key: clean_key(), spare: Some(clean_key()), flagged: false };
        let now = crate::spreadsim::default_epoch();
        let out = meeting(&mut a, &mut b, Protocol::TwoKeyOwner, &refs, now, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(out.verdict.unwrap().outcome, Outcome::FailBootPointer);
        assert!(b.flagged);
    }

    #[test]
    fn trust_sim_without_tampering_is_quiet() {
        for protocol in [Protocol::NewestBoots, Protocol::RandomDraw, Protocol::TwoKeyOwner] {
            let r = run_trust_sim(&TrustSimConfig::new(16, 0, 50, protocol, 3)).unwrap();
            assert_eq!(r.detections, 0);
            assert_eq!(r.false_negatives, 0);
            assert!(r.infected_over_time.iter().all(|&x| x == 0));
            assert_eq!(r.infected_over_time.len(), 51);
        }
        assert!(run_trust_sim(&TrustSimConfig::new(2, 3, 1, Protocol::RandomDraw, 0)).is_err());
    }
}
