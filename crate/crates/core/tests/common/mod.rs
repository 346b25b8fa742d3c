#![allow(dead_code)]

pub mod ops;

use distpro::data::{split, DatasetSplit, SynthTask};
use distpro::losses::StudentState;
use distpro::meta_search::SearchConfig;
use distpro::networks::{Network, NetworkSpec};
use distpro::pathways::{PathwaySet, TransformKind};
use distpro::rng::Stream;

/// A small two-tap problem: 8x8 inputs, teacher 4/8 channels, student 2/4.
pub struct Tiny {
    pub data: DatasetSplit,
    pub teacher: Network,
    pub student: StudentState,
}

pub fn tiny(seed: u64) -> Tiny {
    tiny_with(seed, &TransformKind::ALL)
}

pub fn tiny_with(seed: u64, kinds: &[TransformKind]) -> Tiny {
    let data = SynthTask {
        n: 96,
        size: 8,
        cycles: 2.0,
        noise: 0.3,
        seed,
        ..SynthTask::default()
    }
    .generate()
    .unwrap();
    let data = split(&data, 0.75, seed).unwrap();
    let ts = NetworkSpec::staged(&[4, 8], 8, 4);
    let ss = NetworkSpec::staged(&[2, 4], 8, 4);
    let teacher = Network::build(ts.clone(), seed, Stream::TeacherInit).unwrap();
    let net = Network::build(ss.clone(), seed, Stream::StudentInit).unwrap();
    let pathways = PathwaySet::enumerate(&ss, &ts, kinds, seed).unwrap();
    Tiny {
        data,
        teacher,
        student: StudentState { net, pathways },
    }
}

pub fn search_cfg(steps: usize, seed: u64) -> SearchConfig {
    SearchConfig {
        search_steps: steps,
        retrain_steps: steps.max(1),
        batch_size: 16,
        seed,
        ..SearchConfig::default()
    }
}

pub fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}
