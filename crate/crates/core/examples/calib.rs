use modhifi_core::data::SyntheticSource;
use modhifi_core::model::{builders, train, Layout, TrainConfig};
use modhifi_core::modify::{modhifi_prune, PrunePlan};

fn main() {
    let image = Layout::Image { channels: 2, height: 6, width: 6 };
    for (blocks, keep, seed) in [
        (vec![(6usize, 3usize), (2, 3)], 0.4, 71u64),
        (vec![(6, 3), (2, 3)], 0.5, 71),
        (vec![(6, 3), (3, 3)], 0.5, 71),
        (vec![(6, 3), (2, 3)], 0.4, 72),
    ] {
        let src = SyntheticSource::gaussian_blobs(image, 3, 6.0, 1.0, seed);
        let data = src.sample(40, None, seed).unwrap();
        let model = builders::conv_net(image, &blocks, false, 3, seed);
        let trained = train(&model, &data, &TrainConfig { epochs: 8, learning_rate: 0.02, seed, ..Default::default() }).unwrap().model;
        let plan = PrunePlan { layers: vec![2], keep_fraction: keep, recalibrate: false, samples_per_class: 60, seed, ..Default::default() };
        let (_, rep) = modhifi_prune(&trained, &plan, &src).unwrap();
        println!("blocks {blocks:?} keep {keep} seed {seed}: kept {} of {}", rep.per_layer[0].kept, rep.per_layer[0].in_components);
    }
}
