#![allow(dead_code)]

use std::collections::BTreeMap;

use chrono::{FixedOffset, TimeZone};
use keyspread_core::{
    Bus, FileClass, FileEntry, Genealogy, GenealogyEvent, ImageManifest, Inventory, KeyState, ProvenanceHeader,
    Timestamp, VirtualDevice,
};
use rand::Rng;

pub const OLD: &str = "Sage 5.8 Debian Live ejcim 2013-04-06 fr_FR.UTF-8 - wheezy - 686-pae";
pub const NEW: &str = "Sage 5.9 Debian wheezy Live 3.0.5-1 2013-05-09 en_US.UTF-8 - wheezy - 686-pae";

pub fn header(s: &str) -> ProvenanceHeader {
    s.parse().unwrap()
}

pub fn at(minute: u32) -> Timestamp {
    FixedOffset::east_opt(3600).unwrap().with_ymd_and_hms(2013, 5, 12, 10, minute, 0).unwrap()
}

pub fn image(version: &str) -> ImageManifest {
    ImageManifest::standard(header(version), 2_700_000_000)
}

/// Path classes computed from the path alone, without the library.
pub fn oracle_class(path: &str, image: &ImageManifest) -> FileClass {
    if image.whitelist.contains_key(path) {
        FileClass::System
    } else if path.starts_with("/share/") {
        FileClass::Share
    } else {
        FileClass::Personal
    }
}

const PERSONAL_DIRS: &[&str] = &["/home/sage/", "/root/", "/sharex/", "/live/extra/", "/tmp/", "/share", "/etc/"];

fn name<R: Rng>(rng: &mut R) -> String {
    let len = rng.gen_range(1..8);
    (0..len).map(|_| rng.gen_range(b'a'..=b'z') as char).collect()
}

/// A key of `image` carrying random personal and share files. Personal paths
/// include near-misses of the share prefix and of whitelisted directories.
pub fn random_key<R: Rng>(rng: &mut R, image: &ImageManifest, tag: &str) -> KeyState {
    let genealogy = Genealogy::new(Some(image.version.clone())).record_birth(GenealogyEvent::birth(
        at(0),
        image.version.locale.clone(),
        62_500_000,
    ));
    let mut key = image.build_key(62_500_000, genealogy);
    for _ in 0..rng.gen_range(0..12) {
        let dir = PERSONAL_DIRS[rng.gen_range(0..PERSONAL_DIRS.len())];
        let path = format!("{dir}{}", name(rng));
        let class = oracle_class(&path, image);
        let size = rng.gen_range(0..50_000_000);
        key.files.insert(path.clone(), FileEntry::new(size, class, format!("{tag} {path} {}", rng.gen::<u32>())));
    }
    for _ in 0..rng.gen_range(0..6) {
        let path = format!("/share/{}", name(rng));
        let size = rng.gen_range(0..50_000_000);
        key.files.insert(path.clone(), FileEntry::new(size, FileClass::Share, format!("{tag} {path}")));
    }
    key
}

pub fn files_of(key: &KeyState, class: FileClass) -> BTreeMap<String, FileEntry> {
    key.files.iter().filter(|(_, f)| f.class == class).map(|(p, f)| (p.clone(), f.clone())).collect()
}

/// Up to 6 devices with random buses, boot flags and contents; ids may
/// collide.
pub fn random_inventory<R: Rng>(rng: &mut R) -> Inventory {
    let img = image(OLD);
    let count = rng.gen_range(0..=6);
    let devices = (0..count)
        .map(|i| {
            let id = if rng.gen_bool(0.05) { "sdz".to_string() } else { format!("sd{}", (b'a' + i as u8) as char) };
            let bus = if rng.gen_bool(0.6) { Bus::Usb } else { Bus::Internal };
            let mut d = if rng.gen_bool(0.4) {
                let mut d = VirtualDevice::with_key(id, img.build_key(7_692_288, Genealogy::default()));
                d.bus = bus;
                d
            } else {
                VirtualDevice::blank(id, bus, rng.gen_range(1..100_000_000))
            };
            d.is_boot_source = rng.gen_bool(0.3);
            d.foreign_bytes = if rng.gen_bool(0.2) { rng.gen_range(1..1_000_000) } else { 0 };
            d
        })
        .collect();
    Inventory::new(devices)
}
