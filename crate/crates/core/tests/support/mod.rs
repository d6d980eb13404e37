#![allow(dead_code)]

pub mod oracle;

use btmtrack::config::ModelConfig;
use btmtrack::image::Image;
use btmtrack::nn::ParamStore;
use btmtrack::rng::{seeded, trunc_normal};
use rand::Rng;

/// Depth 2, one template token, four search tokens; prunes and bridges
/// after block 1.
pub fn micro_config(dim: usize) -> ModelConfig {
    ModelConfig {
        patch_size: 2,
        dim,
        heads: 2,
        depth: 2,
        mlp_ratio: 2,
        prune_layers: vec![1],
        tdtb_layers: vec![1],
        keep_ratio: 0.5,
        template_size: 2,
        search_size: 4,
        seed: 5,
        ..Default::default()
    }
}

pub fn random_image(seed: u64, size: usize, channels: usize) -> Image {
    let mut rng = seeded(seed);
    Image::new(size, size, channels, (0..size * size * channels).map(|_| rng.gen()).collect()).unwrap()
}

/// `[static, dynamic, search]` crops for both modalities.
pub fn random_inputs(cfg: &ModelConfig, seed: u64) -> ([Image; 3], [Image; 3]) {
    let (t, s) = (cfg.template_size, cfg.search_size);
    (
        [random_image(seed, t, 3), random_image(seed + 1, t, 3), random_image(seed + 2, s, 3)],
        [random_image(seed + 3, t, 1), random_image(seed + 4, t, 1), random_image(seed + 5, s, 1)],
    )
}

/// Random non-trivial weights everywhere, so that no stage is close to an
/// identity and the comparison exercises every parameter.
pub fn scramble(store: &mut ParamStore, seed: u64, std: f64) {
    let mut rng = seeded(seed);
    for id in store.ids().collect::<Vec<_>>() {
        let t = store.get_mut(id);
        let ones = t.data().iter().all(|&v| v == 1.0);
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = if ones { 1.0 } else { 0.0 } + trunc_normal(&mut rng, std));
    }
}
