mod common;

use common::{search_cfg, tiny};
use distpro::data::{split, BatchCycler, SynthTask};
use distpro::losses::StudentState;
use distpro::meta_search::search;
use distpro::retrain::{retrain, Guidance, RetrainConfig};
use distpro::schedule::Schedule;
use proptest::prelude::*;

fn retrain_cfg(steps: usize, seed: u64) -> RetrainConfig {
    RetrainConfig {
        steps,
        batch_size: 16,
        seed,
        eval_every: 5,
        ..RetrainConfig::default()
    }
}

#[test]
fn saved_schedule_retrains_like_the_in_memory_one() {
    let t = tiny(11);
    let cfg = distpro::meta_search::SearchConfig {
        gamma: 100.0,
        ..search_cfg(6, 11)
    };
    let out = search(&cfg, &t.data, &t.teacher, t.student.clone()).unwrap();
    let sched = out.schedule.interpolate(15).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("alpha.csv");
    sched.save(&path).unwrap();
    let loaded = Schedule::load_for(&path, &t.student.pathways.ids()).unwrap();

    let rc = retrain_cfg(15, 11);
    let (a, ra) = retrain(Guidance::Schedule(&sched), &t.data.train, &t.data.val, &t.teacher, t.student.clone(), &rc).unwrap();
    let (b, rb) = retrain(Guidance::Schedule(&loaded), &t.data.train, &t.data.val, &t.teacher, t.student.clone(), &rc).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    assert_eq!(ra.to_text(), rb.to_text());
    assert_eq!(ra.curve_csv(), rb.curve_csv());
}

#[test]
fn reordered_file_columns_are_put_back() {
    let t = tiny(12);
    let out = search(&search_cfg(4, 12), &t.data, &t.teacher, t.student.clone()).unwrap();
    let mut reversed: Vec<String> = out.schedule.pathway_ids().to_vec();
    reversed.reverse();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("alpha.csv");
    out.schedule.remap(&reversed).unwrap().save(&path).unwrap();
    let loaded = Schedule::load_for(&path, &t.student.pathways.ids()).unwrap();
    assert_eq!(loaded, out.schedule);
}

#[test]
fn schedule_for_other_pathways_is_refused() {
    let t = tiny(13);
    let sched = Schedule::constant(vec!["t0-s0-k0".into(), "t0-s0-k1".into()], 0.3, 1.0, 10).unwrap();
    let err = retrain(
        Guidance::Schedule(&sched),
        &t.data.train,
        &t.data.val,
        &t.teacher,
        t.student.clone(),
        &retrain_cfg(10, 13),
    )
    .unwrap_err();
    assert_eq!(err.category(), "config");
}

fn fresh(t: &common::Tiny) -> StudentState {
    t.student.clone()
}

#[test]
fn guidance_changes_training_but_not_the_teacher() {
    let t = tiny(14);
    let teacher_before = t.teacher.clone();
    let eq = Schedule::constant(t.student.pathways.ids(), 0.05, 1.0, 10).unwrap();
    let rc = retrain_cfg(10, 14);
    let (plain, rp) = retrain(Guidance::None, &t.data.train, &t.data.val, &t.teacher, fresh(&t), &rc).unwrap();
    let (kd, rk) = retrain(Guidance::Schedule(&eq), &t.data.train, &t.data.val, &t.teacher, fresh(&t), &rc).unwrap();
    assert_eq!(rp.teacher_forwards, 0);
    assert_eq!(rk.teacher_forwards, 10);
    assert_ne!(plain.net, kd.net);
    assert_eq!(t.teacher, teacher_before);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn splits_partition_the_data(n in 2usize..200, ratio in 0.01f64..0.99, seed in any::<u64>()) {
        let d = SynthTask { n, size: 4, seed: 1, ..SynthTask::default() }.generate().unwrap();
        let s = split(&d, ratio, seed).unwrap();
        prop_assert!(!s.train.is_empty() && !s.val.is_empty());
        prop_assert_eq!(s.train.len() + s.val.len(), n);
        let mut all: Vec<usize> = s.train_indices.iter().chain(&s.val_indices).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let again = split(&d, ratio, seed).unwrap();
        prop_assert_eq!(again.train_indices, s.train_indices);
    }

    #[test]
    fn cycler_visits_every_sample_each_pass(n in 1usize..120, batch in 1usize..40, seed in any::<u64>()) {
        let mut c = BatchCycler::new(n, batch, distpro::rng::stream(seed, distpro::rng::Stream::RetrainBatches));
        let per = c.batches_per_epoch();
        let mut seen = Vec::new();
        for _ in 0..per {
            let idx = c.next_indices();
            prop_assert!(idx.len() == batch.min(n));
            seen.extend(idx);
        }
        seen.sort_unstable();
        seen.dedup();
        prop_assert_eq!(seen.len(), (per * batch.min(n)).min(n));
    }
}
