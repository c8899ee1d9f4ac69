mod common;

use std::collections::BTreeSet;

use common::*;
use keyspread_core::replicator::{execute_plan, plan_clone, plan_upgrade, select_target};
use keyspread_core::{Bus, DeviceId, FileClass, Inventory, PlanOptions, ReplicatorError, VirtualDevice};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Which device a correct strict test picks, derived from the rule alone.
fn expected_target(inv: &Inventory) -> Option<DeviceId> {
    let ids: BTreeSet<_> = inv.devices.iter().map(|d| &d.id).collect();
    if inv.devices.is_empty() || ids.len() != inv.devices.len() {
        return None;
    }
    let boots: Vec<_> = inv.devices.iter().filter(|d| d.is_boot_source).collect();
    let usb: Vec<_> = inv.devices.iter().filter(|d| d.bus == Bus::Usb).collect();
    if boots.len() != 1 || boots[0].bus != Bus::Usb || usb.len() != 2 {
        return None;
    }
    usb.into_iter().find(|d| !d.is_boot_source).map(|d| d.id.clone())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn selection_follows_the_strict_device_test(seed in any::<u64>()) {
        let inv = random_inventory(&mut ChaCha8Rng::seed_from_u64(seed));
        let got = select_target(&inv);
        let usb = inv.devices.iter().filter(|d| d.bus == Bus::Usb).count();
        if usb != 2 {
            prop_assert!(got.is_err());
        }
        if let Ok(id) = &got {
            let d = inv.get(id).unwrap();
            prop_assert_eq!(d.bus, Bus::Usb);
            prop_assert!(!d.is_boot_source);
        }
        prop_assert_eq!(got.ok(), expected_target(&inv));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn fresh_clone_copies_system_and_share_only(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = image(OLD);
        let key = random_key(&mut rng, &img, "src");
        let mut inv = Inventory::new(vec![
            VirtualDevice::with_key("sdb", key.clone()).booted(),
            VirtualDevice::blank("sdc", Bus::Usb, 62_500_000),
        ]);
        let plan = plan_clone(&inv.devices[0], &inv.devices[1], &PlanOptions::default()).unwrap();
        for p in &plan.copy_set {
            prop_assert_ne!(oracle_class(p, &img), FileClass::Personal, "{} copied", p);
        }
        execute_plan(&plan, &mut inv, at(5)).unwrap();
        let cloned = inv.devices[1].contents.as_ref().unwrap();
        prop_assert!(files_of(cloned, FileClass::Personal).is_empty());
        prop_assert_eq!(files_of(cloned, FileClass::Share), files_of(&key, FileClass::Share));
        prop_assert_eq!(files_of(cloned, FileClass::System), files_of(&key, FileClass::System));
    }

    #[test]
    fn upgrade_keeps_personal_files_and_merges_share(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let donor = random_key(&mut rng, &image(NEW), "donor");
        let host = random_key(&mut rng, &image(OLD), "host");
        let mut inv = Inventory::new(vec![
            VirtualDevice::with_key("sdb", donor.clone()).booted(),
            VirtualDevice::with_key("sdc", host.clone()),
        ]);
        let plan = plan_upgrade(&inv.devices[0], &inv.devices[1], &PlanOptions::default()).unwrap();
        for p in &plan.copy_set {
            prop_assert_ne!(oracle_class(p, &image(NEW)), FileClass::Personal, "{} copied", p);
        }
        prop_assert_eq!(&plan.preserve_set, &files_of(&host, FileClass::Personal).into_keys().collect());
        execute_plan(&plan, &mut inv, at(5)).unwrap();
        let upgraded = inv.devices[1].contents.as_ref().unwrap();
        prop_assert_eq!(files_of(upgraded, FileClass::Personal), files_of(&host, FileClass::Personal));
        prop_assert_eq!(files_of(upgraded, FileClass::System), files_of(&donor, FileClass::System));
        let share = files_of(upgraded, FileClass::Share);
        for (p, f) in files_of(&donor, FileClass::Share) {
            prop_assert_eq!(share.get(&p), Some(&f));
        }
        for p in files_of(&host, FileClass::Share).keys() {
            prop_assert!(share.contains_key(p));
        }
        // The donor is untouched apart from its genealogy.
        let after = inv.devices[0].contents.as_ref().unwrap();
        prop_assert_eq!(&after.files, &donor.files);
        prop_assert_eq!(after.genealogy.stats().spawn_count, donor.genealogy.stats().spawn_count + 1);
    }

    #[test]
    fn failed_execution_leaves_inventory_untouched(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = image(OLD);
        let mut inv = Inventory::new(vec![
            VirtualDevice::with_key("sdb", random_key(&mut rng, &img, "a")).booted(),
            VirtualDevice::blank("sdc", Bus::Usb, 62_500_000),
        ]);
        let plan = plan_clone(&inv.devices[0], &inv.devices[1], &PlanOptions::default()).unwrap();
        execute_plan(&plan, &mut inv, at(1)).unwrap();
        let snapshot = inv.clone();
        let again = execute_plan(&plan, &mut inv, at(2));
        prop_assert!(matches!(again, Err(ReplicatorError::TargetNotBlank(_))));
        prop_assert_eq!(inv, snapshot);
    }
}

#[test]
fn internal_target_is_never_selected_even_when_it_is_the_only_other_device() {
    let img = image(OLD);
    let inv = Inventory::new(vec![
        VirtualDevice::with_key("sdb", img.build_key(7_692_288, Default::default())).booted(),
        VirtualDevice::blank("sda", Bus::Internal, 250_000_000),
    ]);
    assert!(matches!(select_target(&inv), Err(ReplicatorError::RefusalNotTwoUsb { found: 1 })));
}
