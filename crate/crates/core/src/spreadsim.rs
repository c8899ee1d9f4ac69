//! Synchronous-round simulation of room deployments and redeployments.
//!
//! Every key that holds the image at the start of a round boots, the
//! participant plays around for `setup_delay_s`, then the key clones itself
//! onto up to `ports_per_host` blank keys. All clones of a round start and end
//! together, and every cloned key seeds the next round.

use std::collections::BTreeMap;

use chrono::{Duration, TimeZone};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::genealogy::{Genealogy, GenealogyEvent, ProvenanceHeader, Timestamp};
use crate::replicator::{self, Bus, DeviceId, ImageManifest, Inventory, PlanOptions, ReplicatorError, VirtualDevice};
use crate::units::{self, Rational, KIB, MB};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Replicator(#[from] ReplicatorError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Release {
    #[serde(with = "units::serde_rational")]
    pub time_s: Rational,
    pub version: ProvenanceHeader,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_participants: u32,
    #[serde(default = "one")]
    pub seeds: u32,
    #[serde(default = "one")]
    pub ports_per_host: u32,
    pub image_bytes: u64,
    #[serde(with = "units::serde_rational")]
    pub bandwidth_mb_s: Rational,
    /// Boot-and-play time before each clone is launched.
    #[serde(with = "units::serde_rational")]
    pub setup_delay_s: Rational,
    #[serde(with = "units::serde_rational", default = "default_upgrade_ratio")]
    pub upgrade_ratio: Rational,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default)]
    pub releases: Vec<Release>,
    /// Image every participant starts from (seeders, or the whole room when
    /// redeploying).
    #[serde(default = "default_base_version")]
    pub base_version: ProvenanceHeader,
    #[serde(default = "default_capacity_kib")]
    pub capacity_kib: u64,
    /// Releases later than this are never delivered.
    #[serde(default, with = "units::serde_rational_opt", skip_serializing_if = "Option::is_none")]
    pub horizon_s: Option<Rational>,
    #[serde(default = "default_epoch")]
    pub epoch: Timestamp,
    /// Replay every clone through the replicator and keep per-key genealogies.
    /// Turning this off only skips the bookkeeping; the schedule is identical.
    #[serde(default = "yes")]
    pub record_genealogies: bool,
}

fn one() -> u32 {
    1
}

fn yes() -> bool {
    true
}

fn default_upgrade_ratio() -> Rational {
    Rational::new(4, 5)
}

pub fn default_base_version() -> ProvenanceHeader {
    "Sage 5.6 Debian Live beta4 2013-01-25 en_US.UTF-8 - wheezy - 686-pae".parse().expect("valid descriptor")
}

fn default_capacity_kib() -> u64 {
    7_692_288
}

pub fn default_epoch() -> Timestamp {
    chrono::FixedOffset::east_opt(0).expect("utc").with_ymd_and_hms(2013, 2, 17, 9, 0, 0).unwrap()
}

impl SimConfig {
    /// A room of `n` participants with one seed key on single-port hosts.
    pub fn room(n_participants: u32, image_bytes: u64, bandwidth_mb_s: Rational, setup_delay_s: Rational) -> Self {
        Self {
            n_participants,
            seeds: 1,
            ports_per_host: 1,
            image_bytes,
            bandwidth_mb_s,
            setup_delay_s,
            upgrade_ratio: default_upgrade_ratio(),
            rng_seed: 0,
            releases: Vec::new(),
            base_version: default_base_version(),
            capacity_kib: default_capacity_kib(),
            horizon_s: None,
            epoch: default_epoch(),
            record_genealogies: true,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        use num_traits::Signed;
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        if self.n_participants == 0 {
            return bad("n_participants must be at least 1");
        }
        if self.seeds == 0 || self.seeds > self.n_participants {
            return bad("seeds must be between 1 and n_participants");
        }
        if self.ports_per_host == 0 {
            return bad("ports_per_host must be at least 1");
        }
        if self.image_bytes == 0 {
            return bad("image_bytes must be positive");
        }
        if !self.bandwidth_mb_s.is_positive() || !self.upgrade_ratio.is_positive() {
            return bad("bandwidth and upgrade ratio must be positive");
        }
        if self.setup_delay_s.is_negative() {
            return bad("setup delay must not be negative");
        }
        if self.record_genealogies && self.image_bytes > self.capacity_kib.saturating_mul(KIB) {
            return bad("image does not fit on the configured key capacity");
        }
        Ok(())
    }

    fn plan_options(&self) -> PlanOptions {
        PlanOptions { bandwidth_mb_s: self.bandwidth_mb_s, upgrade_ratio: self.upgrade_ratio, ..PlanOptions::default() }
    }

    fn at(&self, seconds: &Rational) -> Timestamp {
        self.epoch + Duration::seconds(seconds.floor().to_integer() as i64)
    }

    fn key_id(&self, i: usize) -> String {
        let width = self.n_participants.to_string().len();
        format!("key-{i:0width$}")
    }
}

/// One row of the per-round time series.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    #[serde(with = "units::serde_rational")]
    pub end_s: Rational,
    pub seeded_count: u32,
    pub cumulative_bytes: u64,
}

/// Spread of one release through the room.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Wave {
    pub version: String,
    #[serde(with = "units::serde_rational")]
    pub start_s: Rational,
    pub first_holder: String,
    pub rounds: u32,
    pub per_round_seeded: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimResult {
    pub n_participants: u32,
    pub ports_per_host: u32,
    pub rounds: u32,
    #[serde(with = "units::serde_rational")]
    pub makespan_s: Rational,
    /// Clone payload written to new keys.
    pub bytes_delivered: u64,
    /// Bytes rewritten by upgrades, reported apart from `bytes_delivered`.
    pub upgrade_bytes: u64,
    #[serde(with = "units::serde_rational")]
    pub amortized_mb_s: Rational,
    /// Keys holding the image after each round (for redeployments, keys
    /// holding the latest release after each round of the final wave).
    pub per_round_seeded: Vec<u32>,
    pub waves: Vec<Wave>,
    pub timeline: Vec<RoundRecord>,
    pub version_coverage: BTreeMap<String, u32>,
    #[serde(serialize_with = "genealogies_as_text", deserialize_with = "genealogies_from_text")]
    pub genealogies: BTreeMap<String, Genealogy>,
}

fn genealogies_as_text<S: serde::Serializer>(g: &BTreeMap<String, Genealogy>, s: S) -> Result<S::Ok, S::Error> {
    use serde::ser::SerializeMap;
    let mut map = s.serialize_map(Some(g.len()))?;
    for (k, v) in g {
        map.serialize_entry(k, &v.serialize())?;
    }
    map.end()
}

fn genealogies_from_text<'de, D: serde::Deserializer<'de>>(d: D) -> Result<BTreeMap<String, Genealogy>, D::Error> {
    let raw = BTreeMap::<String, String>::deserialize(d)?;
    raw.into_iter().map(|(k, v)| Genealogy::parse(&v).map(|g| (k, g)).map_err(serde::de::Error::custom)).collect()
}

impl SimResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serializes")
    }

    /// `round,seeded_count,cumulative_bytes` time series.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,seeded_count,cumulative_bytes\n");
        for r in &self.timeline {
            out.push_str(&format!("{},{},{}\n", r.round, r.seeded_count, r.cumulative_bytes));
        }
        out
    }
}

/// Smallest `r` with `seeds * (1 + ports)^r >= n`.
pub fn rounds_closed_form(n: u64, seeds: u64, ports: u64) -> u32 {
    assert!(seeds >= 1 && ports >= 1, "seeds and ports must be positive");
    let mut reach = seeds;
    let mut r = 0;
    while reach < n {
        reach = reach.saturating_mul(1 + ports);
        r += 1;
    }
    r
}

/// Who clones whom in one round: each holder takes up to `ports` of the
/// waiting keys. When demand is short, a random subset of holders clones.
fn pair_round(
    holders: &mut [usize],
    waiting: &mut Vec<usize>,
    ports: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize)> {
    let capacity = holders.len().saturating_mul(ports);
    if waiting.len() < capacity {
        holders.shuffle(rng);
    }
    let mut pairs = Vec::with_capacity(capacity.min(waiting.len()));
    'outer: for &h in holders.iter() {
        for _ in 0..ports {
            match waiting.pop() {
                Some(t) => pairs.push((h, t)),
                None => break 'outer,
            }
        }
    }
    pairs
}

struct Room {
    inventory: Inventory,
}

impl Room {
    fn device(&self, i: usize) -> &VirtualDevice {
        &self.inventory.devices[i]
    }
}

/// Deploys the image from `seeds` keys to a room of blank keys.
pub fn run_room(config: &SimConfig) -> Result<SimResult, SimError> {
    config.validate()?;
    let n = config.n_participants as usize;
    let seeds = config.seeds as usize;
    let ports = config.ports_per_host as usize;
    let opts = config.plan_options();
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);

    let manifest = ImageManifest::standard(config.base_version.clone(), config.image_bytes);
    let mut room = config.record_genealogies.then(|| {
        let devices = (0..n)
            .map(|i| {
                let id = DeviceId(config.key_id(i));
                if i < seeds {
                    let g = Genealogy::new(Some(config.base_version.clone())).record_birth(GenealogyEvent::birth(
                        config.epoch,
                        config.base_version.locale.clone(),
                        config.capacity_kib,
                    ));
                    VirtualDevice::with_key(id.0.clone(), manifest.build_key(config.capacity_kib, g))
                } else {
                    VirtualDevice::blank(id.0.clone(), Bus::Usb, config.capacity_kib)
                }
            })
            .collect();
        Room { inventory: Inventory::new(devices) }
    });

    let clone_s = units::transfer_seconds(config.image_bytes, &config.bandwidth_mb_s);
    let mut holders: Vec<usize> = (0..seeds).collect();
    let mut waiting: Vec<usize> = (seeds..n).rev().collect();
    let mut now = Rational::from_integer(0);
    let mut per_round_seeded = Vec::new();
    let mut timeline = vec![RoundRecord { round: 0, end_s: now, seeded_count: seeds as u32, cumulative_bytes: 0 }];
    let mut bytes_delivered: u64 = 0;

    while !waiting.is_empty() {
        let pairs = pair_round(&mut holders, &mut waiting, ports, &mut rng);
        let launch = now + config.setup_delay_s;
        let mut round_clone_s = clone_s;
        if let Some(room) = room.as_mut() {
            let stamp = config.at(&launch);
            round_clone_s = Rational::from_integer(0);
            for &(h, t) in &pairs {
                let plan = replicator::plan_clone(room.device(h), room.device(t), &opts)?;
                round_clone_s = round_clone_s.max(plan.duration_s);
                bytes_delivered += plan.bytes_total;
                replicator::execute_plan(&plan, &mut room.inventory, stamp)?;
            }
        } else {
            bytes_delivered += config.image_bytes * pairs.len() as u64;
        }
        now = launch + round_clone_s;
        holders.extend(pairs.iter().map(|&(_, t)| t));
        per_round_seeded.push(holders.len() as u32);
        timeline.push(RoundRecord {
            round: per_round_seeded.len() as u32,
            end_s: now,
            seeded_count: holders.len() as u32,
            cumulative_bytes: bytes_delivered,
        });
    }

    let genealogies = room.map(collect_genealogies).unwrap_or_default();
    Ok(SimResult {
        n_participants: config.n_participants,
        ports_per_host: config.ports_per_host,
        rounds: per_round_seeded.len() as u32,
        makespan_s: now,
        bytes_delivered,
        upgrade_bytes: 0,
        amortized_mb_s: amortized(bytes_delivered, &now),
        per_round_seeded,
        waves: Vec::new(),
        timeline,
        version_coverage: BTreeMap::from([(config.base_version.to_string(), config.n_participants)]),
        genealogies,
    })
}

fn amortized(bytes: u64, makespan: &Rational) -> Rational {
    if *makespan == Rational::from_integer(0) {
        return Rational::from_integer(0);
    }
    Rational::from_integer(bytes as i128) / (makespan * Rational::from_integer(MB as i128))
}

fn collect_genealogies(room: Room) -> BTreeMap<String, Genealogy> {
    room.inventory.devices.into_iter().filter_map(|d| d.contents.map(|k| (d.id.0, k.genealogy))).collect()
}

/// Spreads each release through a room where every participant already holds
/// a key. At a release, one key picked at random is upgraded out-of-band from
/// the maintainer's master key; it then upgrades the others in rounds. Waves
/// run one after another: a release that lands mid-wave starts when the
/// previous wave has finished.
pub fn run_redeployment(config: &SimConfig) -> Result<SimResult, SimError> {
    config.validate()?;
    if config.releases.is_empty() {
        return Err(SimError::InvalidConfig("redeployment needs at least one release".into()));
    }
    let n = config.n_participants as usize;
    let ports = config.ports_per_host as usize;
    let opts = config.plan_options();
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);

    let base = ImageManifest::standard(config.base_version.clone(), config.image_bytes);
    let ids: Vec<String> = (0..n).map(|i| config.key_id(i)).collect();
    let devices = ids
        .iter()
        .map(|id| {
            let g = Genealogy::new(Some(config.base_version.clone())).record_birth(GenealogyEvent::birth(
                config.epoch,
                config.base_version.locale.clone(),
                config.capacity_kib,
            ));
            VirtualDevice::with_key(id.clone(), base.build_key(config.capacity_kib, g))
        })
        .collect();
    let mut inventory = Inventory::new(devices);

    let mut releases = config.releases.clone();
    releases.sort_by_key(|r| r.time_s);
    let mut now = Rational::from_integer(0);
    let mut waves = Vec::new();
    let mut timeline = vec![RoundRecord { round: 0, end_s: now, seeded_count: n as u32, cumulative_bytes: 0 }];
    let mut upgrade_bytes: u64 = 0;
    let mut total_rounds = 0u32;

    for (k, release) in releases.iter().enumerate() {
        if config.horizon_s.is_some_and(|h| release.time_s > h) {
            continue;
        }
        let start = now.max(release.time_s);
        let stamp = config.at(&start);

        // Out-of-band upgrade from the maintainer's freshly built master key.
        let master_id = format!("master-{k}");
        let master_genealogy = Genealogy::new(Some(release.version.clone())).record_birth(GenealogyEvent::birth(
            stamp,
            release.version.locale.clone(),
            config.capacity_kib,
        ));
        let image = ImageManifest::standard(release.version.clone(), config.image_bytes);
        inventory
            .devices
            .push(VirtualDevice::with_key(master_id.clone(), image.build_key(config.capacity_kib, master_genealogy)));
        let first = rng.gen_range(0..n);
        let master = inventory.devices.len() - 1;
        let plan = replicator::plan_upgrade(&inventory.devices[master], &inventory.devices[first], &opts)?;
        replicator::execute_plan(&plan, &mut inventory, stamp)?;
        inventory.devices.pop();

        let mut holders = vec![first];
        let mut waiting: Vec<usize> = (0..n).filter(|&i| i != first).rev().collect();
        waiting.shuffle(&mut rng);
        let mut per_round = Vec::new();
        let mut t = start;
        while !waiting.is_empty() {
            let pairs = pair_round(&mut holders, &mut waiting, ports, &mut rng);
            let launch = t + config.setup_delay_s;
            let stamp = config.at(&launch);
            let mut round_s = Rational::from_integer(0);
            for &(h, target) in &pairs {
                let plan = replicator::plan_upgrade(&inventory.devices[h], &inventory.devices[target], &opts)?;
                round_s = round_s.max(plan.duration_s);
                upgrade_bytes += plan.transfer_bytes;
                replicator::execute_plan(&plan, &mut inventory, stamp)?;
            }
            t = launch + round_s;
            holders.extend(pairs.iter().map(|&(_, target)| target));
            per_round.push(holders.len() as u32);
            total_rounds += 1;
            timeline.push(RoundRecord {
                round: total_rounds,
                end_s: t,
                seeded_count: holders.len() as u32,
                cumulative_bytes: upgrade_bytes,
            });
        }
        now = t;
        waves.push(Wave {
            version: release.version.to_string(),
            start_s: start,
            first_holder: ids[first].clone(),
            rounds: per_round.len() as u32,
            per_round_seeded: per_round,
        });
    }

    let mut version_coverage = BTreeMap::new();
    for d in &inventory.devices {
        if let Some(k) = &d.contents {
            *version_coverage.entry(k.version.to_string()).or_insert(0) += 1;
        }
    }
    let per_round_seeded = waves.last().map(|w| w.per_round_seeded.clone()).unwrap_or_default();
    let genealogies = inventory.devices.into_iter().filter_map(|d| d.contents.map(|k| (d.id.0, k.genealogy))).collect();
    Ok(SimResult {
        n_participants: config.n_participants,
        ports_per_host: config.ports_per_host,
        rounds: total_rounds,
        makespan_s: now,
        bytes_delivered: 0,
        upgrade_bytes,
        amortized_mb_s: Rational::from_integer(0),
        per_round_seeded,
        waves,
        timeline,
        version_coverage,
        genealogies,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub n: u32,
    pub ports: u32,
    pub rounds: u32,
    #[serde(with = "units::serde_rational")]
    pub makespan_s: Rational,
    #[serde(with = "units::serde_rational")]
    pub amortized_mb_s: Rational,
}

pub const SUMMARY_HEADER: &str = "n,ports,rounds,makespan_s,amortized_mb_s";

/// One row per result, ordered by `(n, ports)`.
pub fn summarize(results: &[SimResult]) -> Vec<SummaryRow> {
    let mut rows: Vec<SummaryRow> = results
        .iter()
        .map(|r| SummaryRow {
            n: r.n_participants,
            ports: r.ports_per_host,
            rounds: r.rounds,
            makespan_s: r.makespan_s,
            amortized_mb_s: r.amortized_mb_s,
        })
        .collect();
    rows.sort_by_key(|r| (r.n, r.ports));
    rows
}

pub fn render_summary(rows: &[SummaryRow]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.n,
            r.ports,
            r.rounds,
            units::Sig6(&r.makespan_s),
            units::Sig6(&r.amortized_mb_s)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lecture_room() -> SimConfig {
        SimConfig::room(60, 2_700_000_000, Rational::new(9, 2), Rational::from_integer(300))
    }

    #[test]
    fn closed_form_examples() {
        assert_eq!(rounds_closed_form(60, 1, 1), 6);
        assert_eq!(rounds_closed_form(1, 1, 1), 0);
        assert_eq!(rounds_closed_form(60, 1, 3), 3);
    }

    #[test]
    fn lecture_room_deployment() {
        let r = run_room(&lecture_room()).unwrap();
        assert_eq!(r.rounds, 6);
        assert_eq!(r.makespan_s, Rational::from_integer(5400));
        assert_eq!(r.bytes_delivered, 59 * 2_700_000_000);
        assert_eq!(r.amortized_mb_s, Rational::new(59, 2));
        assert_eq!(r.per_round_seeded, vec![2, 4, 8, 16, 32, 60]);
        assert_eq!(r.genealogies.len(), 60);
    }

    #[test]
    fn two_participants_one_clone() {
        let mut c = lecture_room();
        c.n_participants = 2;
        let r = run_room(&c).unwrap();
        assert_eq!(r.rounds, 1);
        assert_eq!(r.makespan_s, Rational::from_integer(900));
    }

    #[test]
    fn single_participant_needs_no_round() {
        let mut c = lecture_room();
        c.n_participants = 1;
        let r = run_room(&c).unwrap();
        assert_eq!(r.rounds, 0);
        assert_eq!(r.makespan_s, Rational::from_integer(0));
        assert_eq!(r.amortized_mb_s, Rational::from_integer(0));
    }

    #[test]
    fn invalid_configs() {
        let mut c = lecture_room();
        c.seeds = 61;
        assert!(matches!(run_room(&c), Err(SimError::InvalidConfig(_))));
        let mut c = lecture_room();
        c.ports_per_host = 0;
        assert!(run_room(&c).is_err());
        let mut c = lecture_room();
        c.bandwidth_mb_s = Rational::from_integer(0);
        assert!(run_room(&c).is_err());
        assert!(run_redeployment(&lecture_room()).is_err());
    }

    #[test]
    fn summary_sorted_and_formatted() {
        assert_eq!(render_summary(&summarize(&[])), format!("{SUMMARY_HEADER}\n"));
        let mut c = lecture_room();
        c.record_genealogies = false;
        let a = run_room(&c).unwrap();
        c.ports_per_host = 2;
        let b = run_room(&c).unwrap();
        c.n_participants = 10;
        let d = run_room(&c).unwrap();
        let rows = summarize(&[b, a, d]);
        assert_eq!(rows.iter().map(|r| (r.n, r.ports)).collect::<Vec<_>>(), vec![(10, 2), (60, 1), (60, 2)]);
        let text = render_summary(&rows);
        assert!(text.lines().nth(2).unwrap() == "60,1,6,5400,29.5");
    }

    #[test]
    fn csv_timeline() {
        let mut c = lecture_room();
        c.n_participants = 4;
        let r = run_room(&c).unwrap();
        assert_eq!(r.to_csv(), "round,seeded_count,cumulative_bytes\n0,1,0\n1,2,2700000000\n2,4,8100000000\n");
    }
}
