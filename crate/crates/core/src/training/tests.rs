use super::*;
use crate::networks::Norm;
use crate::phantom::generate_triplets;

fn tiny(phases: Vec<u32>, sg: bool) -> (Config, Vec<Triplet>) {
    let mut cfg = Config::default();
    cfg.seed = 11;
    cfg.phantom.size = 16;
    cfg.phantom.count = 4;
    cfg.phantom.test_fraction = 0.0;
    cfg.model.sg = sg;
    cfg.model.critic_channels = [4, 8, 8, 8];
    cfg.model.seg_channels = [4, 8, 8];
    cfg.train.phases = phases;
    let data = generate_triplets(&cfg.phantom, cfg.model.rois, cfg.seed).unwrap();
    (cfg, data)
}

#[test]
fn schedule_boundaries() {
    let s = Schedule::alternating(&[60, 5, 15, 5]);
    assert_eq!(s.boundaries(), vec![60, 65, 80, 85]);
    assert_eq!(s.total(), 85);
    assert_eq!(s.phases[1].0, PhaseKind::Seg);
    let mut cfg = Config::default();
    cfg.train.phases = vec![60, 5, 15, 5];
    cfg.model.sg = false;
    assert_eq!(Schedule::from_config(&cfg).boundaries(), vec![60, 60, 75, 75]);
    cfg.train.scale = 10;
    cfg.model.sg = true;
    assert_eq!(Schedule::from_config(&cfg).boundaries(), vec![6, 7, 8, 9]);
}

#[test]
fn phases_touch_only_their_networks() {
    let (cfg, data) = tiny(vec![1, 1, 1, 1], true);
    let mut t = Trainer::new(cfg, &data, &[]).unwrap();
    let digests = |t: &Trainer| (t.generator.params.digest(), t.critic.params.digest(), t.segnet.params.digest());
    let d0 = digests(&t);
    let s1 = t.run_epoch().unwrap();
    let d1 = digests(&t);
    assert_eq!(s1.kind, PhaseKind::Gan);
    assert_eq!(s1.loss_seg, 0.0);
    assert!(d1.0 != d0.0 && d1.1 != d0.1);
    assert_eq!(d1.2, d0.2);
    let s2 = t.run_epoch().unwrap();
    let d2 = digests(&t);
    assert_eq!(s2.kind, PhaseKind::Seg);
    assert_eq!((&d2.0, &d2.1), (&d1.0, &d1.1));
    assert_ne!(d2.2, d1.2);
    let s3 = t.run_epoch().unwrap();
    assert!(s3.loss_seg > 0.0);
    assert_eq!(digests(&t).2, d2.2);
    assert!(s1.critic_max_abs <= 0.01 && s3.critic_max_abs <= 0.01);
    assert_eq!(s1.clip_events, 2);
}

#[test]
fn no_guidance_skips_segmentation_phases() {
    let (cfg, data) = tiny(vec![1, 3, 1, 3], false);
    let mut t = Trainer::new(cfg, &data, &[]).unwrap();
    let s = t.segnet.params.digest();
    let stats = t.run_schedule(None, None, |_| {}).unwrap();
    assert_eq!(stats.len(), 2);
    assert!(stats.iter().all(|e| e.kind == PhaseKind::Gan && e.loss_seg == 0.0));
    assert_eq!(t.segnet.params.digest(), s);
    assert!(t.done());
}

#[test]
fn seeded_runs_are_identical() {
    let (mut cfg, data) = tiny(vec![2, 1], true);
    cfg.model.norm = Norm::AdaIn;
    let run = || {
        let mut t = Trainer::new(cfg.clone(), &data[..2], &data[2..]).unwrap();
        let mut log = Vec::new();
        t.run_schedule(None, Some(&mut log), |_| {}).unwrap();
        (String::from_utf8(log).unwrap(), t.generator.params.digest())
    };
    let a = run();
    assert_eq!(a, run());
    assert_eq!(a.0.lines().count(), 3);
}

#[test]
fn resume_continues_bitwise() {
    let (cfg, data) = tiny(vec![1, 1, 2], true);
    let dir = tempfile::tempdir().unwrap();
    let mut full = Trainer::new(cfg.clone(), &data, &[]).unwrap();
    let mut log_full = Vec::new();
    full.run_schedule(Some(dir.path()), Some(&mut log_full), |_| {}).unwrap();

    let ck = Checkpoint::load(dir.path().join("phase2.sgck")).unwrap();
    assert_eq!((ck.schedule.phase, ck.schedule.epoch), (2, 0));
    let mut resumed = Trainer::resume(&ck, cfg.clone(), &data, &[]).unwrap();
    let mut log_tail = Vec::new();
    resumed.run_schedule(None, Some(&mut log_tail), |_| {}).unwrap();
    let full_log = String::from_utf8(log_full).unwrap();
    let tail: Vec<&str> = full_log.lines().skip(2).collect();
    assert_eq!(String::from_utf8(log_tail).unwrap().lines().collect::<Vec<_>>(), tail);
    assert_eq!(resumed.checkpoint().encode(), full.checkpoint().encode());

    let mut mid = Trainer::new(cfg.clone(), &data, &[]).unwrap();
    for _ in 0..3 {
        mid.run_epoch().unwrap();
    }
    let bytes = mid.checkpoint().encode();
    let mut again = Trainer::resume(&Checkpoint::decode(&bytes).unwrap(), cfg, &data, &[]).unwrap();
    again.run_epoch().unwrap();
    assert_eq!(again.checkpoint().encode(), full.checkpoint().encode());
}

#[test]
fn empty_training_set_is_rejected() {
    let (cfg, _) = tiny(vec![1], true);
    assert!(Trainer::new(cfg, &[], &[]).is_err());
}

#[test]
fn log_line_layout() {
    let e = EpochStats {
        epoch: 3,
        phase: 1,
        kind: PhaseKind::Seg,
        loss_adv: None,
        loss_content: None,
        loss_seg: 0.5,
        loss_critic: None,
        psnr_val: Some(21.0),
        clip_events: 0,
        critic_max_abs: 0.0,
    };
    assert_eq!(e.log_line(), "3 seg2 - - 0.500000 21.000000");
    assert_eq!(LOG_HEADER.split(' ').count(), e.log_line().split(' ').count());
}
