mod common;

use common::*;
use keyspread_core::integrity::{
    build_manifest, inspect, meeting, run_trust_sim, tamper, verify, Outcome, Party, Protocol, References, Side,
    TamperAction, TamperKind, TrustSimConfig,
};
use keyspread_core::replicator::SQUASHFS_PATH;
use keyspread_core::{FileClass, KeyState};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Does `subject` deviate from the image it claims, judged straight from the
/// file contents rather than through digests.
fn deviates(subject: &KeyState, pristine: &KeyState) -> bool {
    let system = |k: &KeyState| files_of(k, FileClass::System);
    let expected = system(pristine);
    expected.iter().any(|(p, f)| subject.files.get(p) != Some(f)) || !expected.contains_key(&subject.boot_pointer)
}

fn random_tamper<R: Rng>(rng: &mut R, key: &KeyState) -> TamperAction {
    let system: Vec<_> = files_of(key, FileClass::System).into_keys().collect();
    if rng.gen_bool(0.5) {
        TamperAction::modify(system[rng.gen_range(0..system.len())].clone())
    } else {
        TamperAction::shadow_boot(format!("/.{}/{}", rng.gen::<u32>(), rng.gen::<u16>()))
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn clean_verifier_is_sound_and_complete(seed in any::<u64>(), rounds in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = image(OLD);
        let pristine = random_key(&mut rng, &img, "owner");
        let reference = build_manifest(&pristine).unwrap();
        let verifier = random_key(&mut rng, &img, "friend");

        prop_assert!(verify(&verifier, &pristine, &reference).is_pass());
        let mut subject = pristine.clone();
        for _ in 0..rounds {
            let action = random_tamper(&mut rng, &subject);
            subject = tamper(&subject, &action).unwrap();
        }
        let verdict = verify(&verifier, &subject, &reference);
        prop_assert_eq!(verdict.is_pass(), !deviates(&subject, &pristine));
        prop_assert_eq!(rounds == 0, verdict.is_pass());
        if !verdict.is_pass() {
            prop_assert!(verdict.offending_path.is_some());
        }
    }

    #[test]
    fn shadow_boot_hides_from_digests_but_not_from_the_boot_rule(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = image(OLD);
        let key = random_key(&mut rng, &img, "k");
        let reference = build_manifest(&key).unwrap();
        let path = format!("/{}/{}", rng.gen::<u64>(), rng.gen::<u32>());
        let bad = tamper(&key, &TamperAction::shadow_boot(path.clone())).unwrap();
        let digests_alone = reference
            .file_digests
            .iter()
            .all(|(p, d)| keyspread_core::Digest256::of_file(&bad.files[p]) == *d);
        prop_assert!(digests_alone);
        let v = verify(&random_key(&mut rng, &img, "v"), &bad, &reference);
        prop_assert_eq!(v.outcome, Outcome::FailBootPointer);
        prop_assert_eq!(v.offending_path, Some(path));
    }

    #[test]
    fn manifest_text_roundtrips(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let key = random_key(&mut rng, &image(NEW), "k");
        let m = build_manifest(&key).unwrap();
        prop_assert_eq!(keyspread_core::IntegrityManifest::from_text(&m.to_text()).unwrap(), m);
    }

    #[test]
    fn random_draw_never_spreads_when_the_clean_party_boots(seed in any::<u64>(), kind in 0u8..2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let refs = References::from_images([&image(OLD), &image(NEW)]);
        let (mut a, mut b) = pair(kind);
        let out = meeting(&mut a, &mut b, Protocol::RandomDraw, &refs, at(1), &mut rng);
        if out.booter == Side::B {
            prop_assert!(!b.key.compromised);
            prop_assert!(!out.verdict.unwrap().is_pass());
            prop_assert!(a.flagged);
            prop_assert_eq!(out.upgraded, None);
        } else {
            prop_assert!(b.key.compromised);
            prop_assert!(!out.false_negative);
            prop_assert_eq!(out.upgraded, Some(Side::B));
        }
    }
}

/// A tampered key of the newer release against a clean key of the older one.
fn pair(kind: u8) -> (Party, Party) {
    let action = if kind == 0 { TamperAction::modify(SQUASHFS_PATH) } else { TamperAction::shadow_boot("/boot/evil") };
    let bad = tamper(&image(NEW).build_key(7_692_288, Default::default()), &action).unwrap();
    (Party::new(bad), Party::new(image(OLD).build_key(7_692_288, Default::default())))
}

#[test]
fn random_draw_detects_on_the_first_meeting_half_the_time() {
    let refs = References::from_images([&image(OLD), &image(NEW)]);
    let trials = 10_000;
    let mut detected = 0;
    for seed in 0..trials {
        let (mut a, mut b) = pair((seed % 2) as u8);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = meeting(&mut a, &mut b, Protocol::RandomDraw, &refs, at(1), &mut rng);
        detected += u32::from(!out.verdict.unwrap().is_pass());
    }
    let rate = f64::from(detected) / trials as f64;
    assert!((rate - 0.5).abs() <= 0.05, "rate {rate}");
}

#[test]
fn newest_boots_infection_only_grows() {
    for seed in 0..10 {
        let mut cfg = TrustSimConfig::new(64, 1, 400, Protocol::NewestBoots, seed);
        for attack in [TamperKind::ModifyFile, TamperKind::ShadowBoot] {
            cfg.attack = attack;
            let res = run_trust_sim(&cfg).unwrap();
            assert_eq!(res.infected_over_time[0], 1);
            assert!(res.infected_over_time.windows(2).all(|w| w[0] <= w[1]));
            assert!(*res.infected_over_time.last().unwrap() > 1);
            assert_eq!(res.detections, 0);
        }
    }
}

#[test]
fn checking_protocols_contain_the_attack() {
    let mut spread = Vec::new();
    for protocol in [Protocol::NewestBoots, Protocol::RandomDraw, Protocol::TwoKeyOwner] {
        let res = run_trust_sim(&TrustSimConfig::new(64, 2, 400, protocol, 9)).unwrap();
        assert_eq!(res.infected_over_time.len(), 401);
        spread.push(*res.infected_over_time.last().unwrap());
        if protocol != Protocol::NewestBoots {
            assert!(res.detections > 0);
        }
    }
    assert!(spread[1] < spread[0]);
    assert!(spread[2] < spread[0]);
}

#[test]
fn two_key_owner_with_clean_spare_always_detects() {
    let refs = References::from_images([&image(OLD), &image(NEW)]);
    for kind in 0..2 {
        let (mut a, mut b) = pair(kind);
        b.spare = Some(image(OLD).build_key(7_692_288, Default::default()));
        let out = meeting(&mut a, &mut b, Protocol::TwoKeyOwner, &refs, at(2), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(!out.verdict.unwrap().is_pass());
        assert!(b.flagged);
        assert_eq!(out.upgraded, Some(Side::B));
    }
}

#[test]
fn trust_sim_is_deterministic() {
    for protocol in [Protocol::NewestBoots, Protocol::RandomDraw, Protocol::TwoKeyOwner] {
        let cfg = TrustSimConfig::new(40, 3, 200, protocol, 1234);
        assert_eq!(run_trust_sim(&cfg).unwrap().to_json(), run_trust_sim(&cfg).unwrap().to_json());
    }
}

#[test]
fn clean_subject_from_the_same_image_passes_regardless_of_personal_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let img = image(NEW);
    let reference = build_manifest(&img.build_key(1, Default::default())).unwrap();
    for _ in 0..200 {
        let subject = random_key(&mut rng, &img, "s");
        assert!(inspect(&subject, &reference).is_pass());
    }
}
