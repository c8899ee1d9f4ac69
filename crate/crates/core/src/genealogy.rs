//! Genealogy log carried by every key.
//!
//! The text format is line oriented. Each line is an indentation prefix, a
//! one-letter tag and a payload:
//!
//! ```text
//! p Sage 5.6 Debian Live beta4 2013-01-25 en_US.UTF-8 - wheezy - 686-pae
//! i 2013-02-17 13:01:38+00:00 - fr_FR.UTF-8 - 4023296 -          1
//! s 2013-02-17 13:15:19+00:00 - fr_FR.UTF-8 - 4023296 -          1
//! u p Sage 5.8 Debian Live ejcim 2013-04-06 fr_FR.UTF-8 - wheezy - 686-pae
//!   i 2013-04-07 08:44:13+00:00 - fr_FR.UTF-8 - 7692288 -          1
//!   s 2013-04-07 11:58:04+00:00 - fr_FR.UTF-8 - 7692288 -          1
//! i 2013-04-07 11:58:04+00:00 - fr_FR.UTF-8 - 7692288 -          1
//! ```
//!
//! * `p` describes the image the key was built from.
//! * `i` is a birth (the key was written), `s` a spawn (the key wrote another).
//! * `u` marks an upgrade: the record of the donor key is embedded below it,
//!   indented deeper. The donor's image descriptor sits on the `u` line itself,
//!   with or without a `p` marker.
//!
//! The parser is lenient about indentation. After a `u` line at indent `L`,
//! the first following line that is indented deeper than `L` fixes the donor
//! indent `D`; every following line at indent `>= D` belongs to the donor and
//! the first shallower line hands control back to the enclosing record.
//! Serialization is canonical: two spaces per nesting level, host events at
//! the record's own level.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, FixedOffset, NaiveDate};
use serde::{Deserialize, Serialize};

const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M:%S%:z";
const DATE_FORMAT: &str = "%Y-%m-%d";
const FIELD_SEP: &str = " - ";
const INDENT: &str = "  ";

pub type Timestamp = DateTime<FixedOffset>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GenealogyError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("genealogy is not valid UTF-8 (byte {0})")]
    InvalidUtf8(usize),
    #[error("invalid image descriptor {0:?}")]
    Descriptor(String),
}

impl GenealogyError {
    fn at(line: usize, message: impl Into<String>) -> Self {
        GenealogyError::Parse { line, message: message.into() }
    }
}

/// Parses a timestamp in the log's own format (`2013-04-07 11:58:04+02:00`)
/// or as RFC 3339.
pub fn parse_timestamp(text: &str) -> Option<Timestamp> {
    DateTime::parse_from_str(text.trim(), TIMESTAMP_FORMAT).or_else(|_| DateTime::parse_from_rfc3339(text.trim())).ok()
}

/// Image descriptor: product label and version tag, build date, locale,
/// distribution suite and architecture.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ProvenanceHeader {
    pub label: String,
    pub build_date: NaiveDate,
    pub locale: String,
    pub suite: String,
    pub arch: String,
}

impl ProvenanceHeader {
    pub fn new(
        label: impl Into<String>,
        build_date: NaiveDate,
        locale: impl Into<String>,
        suite: impl Into<String>,
        arch: impl Into<String>,
    ) -> Self {
        Self { label: label.into(), build_date, locale: locale.into(), suite: suite.into(), arch: arch.into() }
    }

    /// Ordering used to decide which of two keys carries the newer image.
    pub fn is_newer_than(&self, other: &ProvenanceHeader) -> bool {
        (self.build_date, &self.label) > (other.build_date, &other.label)
    }
}

impl fmt::Display for ProvenanceHeader {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {}{FIELD_SEP}{}{FIELD_SEP}{}",
            self.label,
            self.build_date.format(DATE_FORMAT),
            self.locale,
            self.suite,
            self.arch
        )
    }
}

impl FromStr for ProvenanceHeader {
    type Err = GenealogyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || GenealogyError::Descriptor(s.to_string());
        let parts: Vec<&str> = s.trim().split(FIELD_SEP).collect();
        if parts.len() < 3 {
            return Err(bad());
        }
        let arch = parts[parts.len() - 1].trim();
        let suite = parts[1..parts.len() - 1].join(FIELD_SEP);
        let mut head = parts[0].trim().rsplitn(3, ' ');
        let locale = head.next().ok_or_else(bad)?;
        let date = head.next().ok_or_else(bad)?;
        let label = head.next().ok_or_else(bad)?.trim();
        if label.is_empty() || locale.is_empty() {
            return Err(bad());
        }
        let build_date = NaiveDate::parse_from_str(date, DATE_FORMAT).map_err(|_| bad())?;
        Ok(Self::new(label, build_date, locale, suite.trim(), arch))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Birth,
    Spawn,
}

impl EventKind {
    fn tag(self) -> char {
        match self {
            EventKind::Birth => 'i',
            EventKind::Spawn => 's',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenealogyEvent {
    pub kind: EventKind,
    pub timestamp: Timestamp,
    pub locale: String,
    /// Device capacity in 1 KiB blocks.
    pub capacity: u64,
    /// Keys written by the same clone operation.
    pub batch_count: u32,
}

impl GenealogyEvent {
    pub fn birth(timestamp: Timestamp, locale: impl Into<String>, capacity: u64) -> Self {
        Self { kind: EventKind::Birth, timestamp, locale: locale.into(), capacity, batch_count: 1 }
    }

    pub fn spawn(timestamp: Timestamp, locale: impl Into<String>, capacity: u64) -> Self {
        Self { kind: EventKind::Spawn, timestamp, locale: locale.into(), capacity, batch_count: 1 }
    }

    fn write_line(&self, out: &mut String) {
        out.push(self.kind.tag());
        out.push(' ');
        out.push_str(&format!(
            "{}{FIELD_SEP}{}{FIELD_SEP}{}{FIELD_SEP}{:>10}",
            self.timestamp.format(TIMESTAMP_FORMAT),
            self.locale,
            self.capacity,
            self.batch_count
        ));
    }

    fn parse_payload(kind: EventKind, payload: &str, line: usize) -> Result<Self, GenealogyError> {
        let fields: Vec<&str> = payload.split(FIELD_SEP).map(str::trim).collect();
        if fields.len() != 4 {
            return Err(GenealogyError::at(
                line,
                format!("expected 4 event fields separated by \" - \", found {}", fields.len()),
            ));
        }
        let timestamp = DateTime::parse_from_str(fields[0], TIMESTAMP_FORMAT)
            .map_err(|_| GenealogyError::at(line, format!("malformed timestamp {:?}", fields[0])))?;
        let capacity: u64 =
            fields[2].parse().map_err(|_| GenealogyError::at(line, format!("malformed capacity {:?}", fields[2])))?;
        let batch_count: u32 = fields[3]
            .parse()
            .map_err(|_| GenealogyError::at(line, format!("malformed batch count {:?}", fields[3])))?;
        if capacity == 0 {
            return Err(GenealogyError::at(line, "capacity must be positive"));
        }
        if batch_count == 0 {
            return Err(GenealogyError::at(line, "batch count must be at least 1"));
        }
        Ok(Self { kind, timestamp, locale: fields[1].to_string(), capacity, batch_count })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpgradeEvent {
    pub donor: Genealogy,
    /// Whether the donor descriptor is written with a `p` marker on the `u`
    /// line. Meaningless when the donor has no descriptor.
    pub donor_has_provenance: bool,
}

impl UpgradeEvent {
    pub fn new(donor: Genealogy) -> Self {
        let donor_has_provenance = donor.provenance.is_some();
        Self { donor, donor_has_provenance }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Entry {
    Event(GenealogyEvent),
    Upgrade(UpgradeEvent),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Genealogy {
    pub provenance: Option<ProvenanceHeader>,
    pub events: Vec<Entry>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineageStats {
    pub birth_count: u64,
    pub spawn_count: u64,
    pub upgrade_count: u64,
    pub provenance_count: u64,
    pub max_embedding_depth: u64,
    pub first_event: Option<Timestamp>,
    pub last_event: Option<Timestamp>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LintWarning {
    /// Position of the offending entry, e.g. `"3"` or `"9/u/1"` for the second
    /// entry of the donor embedded at top-level entry 9.
    pub location: String,
    pub message: String,
}

impl fmt::Display for LintWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "entry {}: {}", self.location, self.message)
    }
}

impl Genealogy {
    pub fn new(provenance: Option<ProvenanceHeader>) -> Self {
        Self { provenance, events: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_none() && self.events.is_empty()
    }

    pub fn parse(text: &str) -> Result<Self, GenealogyError> {
        let lines = scan_lines(text);
        let mut pos = 0;
        let g = parse_block(&lines, &mut pos, 0, Genealogy::default())?;
        debug_assert_eq!(pos, lines.len());
        Ok(g)
    }

    pub fn parse_bytes(bytes: &[u8]) -> Result<Self, GenealogyError> {
        let text = std::str::from_utf8(bytes).map_err(|e| GenealogyError::InvalidUtf8(e.valid_up_to()))?;
        Self::parse(text)
    }

    /// Canonical text form.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        if let Some(p) = &self.provenance {
            out.push_str("p ");
            out.push_str(&p.to_string());
            out.push('\n');
        }
        write_entries(&self.events, 0, &mut out);
        out
    }

    /// # Panics
    /// If `ev` is not a birth.
    #[must_use]
    pub fn record_birth(&self, ev: GenealogyEvent) -> Genealogy {
        assert_eq!(ev.kind, EventKind::Birth, "record_birth takes a birth event");
        self.appended(Entry::Event(ev))
    }

    /// # Panics
    /// If `ev` is not a spawn.
    #[must_use]
    pub fn record_spawn(&self, ev: GenealogyEvent) -> Genealogy {
        assert_eq!(ev.kind, EventKind::Spawn, "record_spawn takes a spawn event");
        self.appended(Entry::Event(ev))
    }

    /// Embeds a snapshot of `donor` followed by the host's rebirth.
    ///
    /// # Panics
    /// If `rebirth` is not a birth.
    #[must_use]
    pub fn record_upgrade(&self, donor: &Genealogy, rebirth: GenealogyEvent) -> Genealogy {
        assert_eq!(rebirth.kind, EventKind::Birth, "an upgrade ends with a rebirth");
        let mut g = self.appended(Entry::Upgrade(UpgradeEvent::new(donor.clone())));
        g.events.push(Entry::Event(rebirth));
        g
    }

    /// Genealogy of a fresh clone: the parent's history plus the clone's birth.
    ///
    /// # Panics
    /// If `birth` is not a birth.
    #[must_use]
    pub fn child_genealogy(&self, birth: GenealogyEvent) -> Genealogy {
        self.record_birth(birth)
    }

    fn appended(&self, entry: Entry) -> Genealogy {
        let mut g = self.clone();
        g.events.push(entry);
        g
    }

    /// Top-level events, skipping upgrade entries.
    pub fn top_level_events(&self) -> impl Iterator<Item = &GenealogyEvent> {
        self.events.iter().filter_map(|e| match e {
            Entry::Event(ev) => Some(ev),
            Entry::Upgrade(_) => None,
        })
    }

    pub fn upgrades(&self) -> impl Iterator<Item = &UpgradeEvent> {
        self.events.iter().filter_map(|e| match e {
            Entry::Upgrade(u) => Some(u),
            Entry::Event(_) => None,
        })
    }

    pub fn last_birth(&self) -> Option<&GenealogyEvent> {
        self.top_level_events().filter(|e| e.kind == EventKind::Birth).last()
    }

    /// Spawns recorded after the key's latest top-level birth, i.e. the clones
    /// this key wrote itself rather than ones inherited from its ancestry.
    pub fn own_spawns(&self) -> Vec<&GenealogyEvent> {
        let start = self
            .events
            .iter()
            .rposition(|e| matches!(e, Entry::Event(ev) if ev.kind == EventKind::Birth))
            .map_or(0, |i| i + 1);
        self.events[start..]
            .iter()
            .filter_map(|e| match e {
                Entry::Event(ev) if ev.kind == EventKind::Spawn => Some(ev),
                _ => None,
            })
            .collect()
    }

    /// Counts over this record and every embedded donor record.
    pub fn stats(&self) -> LineageStats {
        let mut stats = LineageStats::default();
        accumulate(self, self.provenance.is_some(), 0, &mut stats);
        stats
    }

    /// Soft consistency checks: timestamps must not go backwards within a run
    /// of consecutive events. Clocks on offline machines drift, so these are
    /// warnings only.
    pub fn lint(&self) -> Vec<LintWarning> {
        let mut out = Vec::new();
        lint_into(self, "", &mut out);
        out
    }
}

impl fmt::Display for Genealogy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.serialize())
    }
}

impl FromStr for Genealogy {
    type Err = GenealogyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Genealogy::parse(s)
    }
}

fn accumulate(g: &Genealogy, count_header: bool, depth: u64, stats: &mut LineageStats) {
    if count_header {
        stats.provenance_count += 1;
    }
    stats.max_embedding_depth = stats.max_embedding_depth.max(depth);
    for entry in &g.events {
        match entry {
            Entry::Event(ev) => {
                match ev.kind {
                    EventKind::Birth => stats.birth_count += 1,
                    EventKind::Spawn => stats.spawn_count += 1,
                }
                let ts = ev.timestamp;
                stats.first_event = Some(stats.first_event.map_or(ts, |t| t.min(ts)));
                stats.last_event = Some(stats.last_event.map_or(ts, |t| t.max(ts)));
            }
            Entry::Upgrade(u) => {
                stats.upgrade_count += 1;
                let header = u.donor_has_provenance && u.donor.provenance.is_some();
                accumulate(&u.donor, header, depth + 1, stats);
            }
        }
    }
}

fn lint_into(g: &Genealogy, prefix: &str, out: &mut Vec<LintWarning>) {
    let mut previous: Option<&GenealogyEvent> = None;
    for (i, entry) in g.events.iter().enumerate() {
        let location = format!("{prefix}{i}");
        match entry {
            Entry::Event(ev) => {
                if let Some(prev) = previous {
                    if ev.timestamp < prev.timestamp {
                        out.push(LintWarning {
                            location,
                            message: format!(
                                "timestamp {} is earlier than the preceding {}",
                                ev.timestamp.format(TIMESTAMP_FORMAT),
                                prev.timestamp.format(TIMESTAMP_FORMAT)
                            ),
                        });
                    }
                }
                previous = Some(ev);
            }
            Entry::Upgrade(u) => {
                previous = None;
                lint_into(&u.donor, &format!("{location}/u/"), out);
            }
        }
    }
}

fn write_entries(entries: &[Entry], level: usize, out: &mut String) {
    for entry in entries {
        for _ in 0..level {
            out.push_str(INDENT);
        }
        match entry {
            Entry::Event(ev) => ev.write_line(out),
            Entry::Upgrade(u) => {
                out.push('u');
                if let Some(p) = &u.donor.provenance {
                    out.push_str(if u.donor_has_provenance { " p " } else { " " });
                    out.push_str(&p.to_string());
                }
            }
        }
        out.push('\n');
        if let Entry::Upgrade(u) = entry {
            write_entries(&u.donor.events, level + 1, out);
        }
    }
}

struct Line<'a> {
    number: usize,
    indent: usize,
    body: &'a str,
}

fn scan_lines(text: &str) -> Vec<Line<'_>> {
    let mut lines = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let trimmed = raw.trim_end();
        if trimmed.is_empty() {
            continue;
        }
        let body = trimmed.trim_start_matches(' ');
        lines.push(Line { number: i + 1, indent: trimmed.len() - body.len(), body });
    }
    lines
}

/// Parses lines into `record` until a line shallower than `base` appears.
fn parse_block(
    lines: &[Line<'_>],
    pos: &mut usize,
    base: usize,
    mut record: Genealogy,
) -> Result<Genealogy, GenealogyError> {
    while let Some(line) = lines.get(*pos) {
        if line.indent < base {
            break;
        }
        let (tag, payload) = match line.body.split_once(' ') {
            Some((t, p)) => (t, p.trim()),
            None => (line.body, ""),
        };
        *pos += 1;
        match tag {
            "p" => {
                if record.provenance.is_some() || !record.events.is_empty() {
                    return Err(GenealogyError::at(line.number, "image descriptor must open its record"));
                }
                record.provenance = Some(parse_descriptor(payload, line.number)?);
            }
            "i" => {
                record.events.push(Entry::Event(GenealogyEvent::parse_payload(EventKind::Birth, payload, line.number)?))
            }
            "s" => {
                record.events.push(Entry::Event(GenealogyEvent::parse_payload(EventKind::Spawn, payload, line.number)?))
            }
            "u" => {
                // A label whose first word is "p" is ambiguous with the marker;
                // the marked reading is tried first.
                let (descriptor, marked) = match payload.strip_prefix("p ") {
                    Some(rest) => match rest.parse::<ProvenanceHeader>() {
                        Ok(p) => (Some(p), true),
                        Err(_) => (Some(parse_descriptor(payload, line.number)?), false),
                    },
                    None if payload == "p" => return Err(GenealogyError::at(line.number, "empty donor descriptor")),
                    None if payload.is_empty() => (None, false),
                    None => (Some(parse_descriptor(payload, line.number)?), false),
                };
                let has_descriptor = descriptor.is_some();
                let donor_seed = Genealogy::new(descriptor);
                let donor = match lines.get(*pos) {
                    Some(next) if next.indent > line.indent => parse_block(lines, pos, next.indent, donor_seed)?,
                    _ => donor_seed,
                };
                if donor.is_empty() {
                    return Err(GenealogyError::at(
                        line.number,
                        "upgrade has neither a donor descriptor nor donor events",
                    ));
                }
                // A descriptor given as a nested `p` line counts as marked.
                let donor_has_provenance = if has_descriptor { marked } else { donor.provenance.is_some() };
                record.events.push(Entry::Upgrade(UpgradeEvent { donor, donor_has_provenance }));
            }
            other => {
                return Err(GenealogyError::at(line.number, format!("unknown line tag {other:?}")));
            }
        }
    }
    Ok(record)
}

fn parse_descriptor(payload: &str, line: usize) -> Result<ProvenanceHeader, GenealogyError> {
    payload.parse().map_err(|_| GenealogyError::at(line, format!("malformed image descriptor {payload:?}")))
}

/// Serde adapter embedding a genealogy as its canonical text.
pub mod as_text {
    use super::Genealogy;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(g: &Genealogy, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&g.serialize())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Genealogy, D::Error> {
        let text = String::deserialize(d)?;
        Genealogy::parse(&text).map_err(serde::de::Error::custom)
    }
}
