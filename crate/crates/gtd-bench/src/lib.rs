//! Shared fixtures for the benchmark suite: a small model, dataset, and
//! trainer so the benches measure steady-state work rather than setup.

use gtd_core::data::generate_dataset;
use gtd_core::trainer::{prepare_train_item, TrainItem};
use gtd_core::{
    DataGenConfig, Dataset, DiffusionConfig, GatingMode, GrammarPreset, GtanConfig, LabelScaling,
    LossKind, SamplerKind, ScheduleKind, TrainConfig, TrainMode, Trainer,
};

/// Architecture sized so one forward pass is work, not noise.
pub fn bench_gtan() -> GtanConfig {
    GtanConfig {
        num_stages: 2,
        blocks_per_stage: 4,
        channels: 16,
        kernel_size: 3,
        num_classes: 7,
        cond_dim: 8,
        embed_dim: 8,
        dropout: 0.1,
        gating_mode: GatingMode::Gated,
    }
}

pub fn bench_diffusion() -> DiffusionConfig {
    DiffusionConfig {
        t_max: 50,
        schedule: ScheduleKind::Cosine,
        sampler: SamplerKind::Ddim,
        num_steps: 10,
        label_scaling: LabelScaling::ZeroOne,
    }
}

pub fn bench_train(seed: u64) -> TrainConfig {
    TrainConfig {
        mode: TrainMode::Stochastic,
        loss: LossKind::Mse,
        obs_loss_weight: 1.0,
        learning_rate: 1e-3,
        batch_size: 8,
        epochs: 1,
        self_cond_zero_prob: 0.5,
        seed,
        alpha: 0.2,
        beta: 0.3,
    }
}

pub fn bench_dataset() -> Dataset {
    let (dataset, _) = generate_dataset(&DataGenConfig {
        grammar: GrammarPreset::SharedPrefix,
        num_sequences: 16,
        feature_dim: 8,
        noise_sigma: 0.1,
        ambiguous_fraction: 0.0,
        ambiguity_window: 0.35,
        ambiguity_extra_sigma: 3.0,
        seed: 1,
    })
    .expect("fixture dataset generates");
    dataset
}

pub fn bench_items(dataset: &Dataset) -> Vec<TrainItem> {
    dataset
        .records
        .iter()
        .map(|r| prepare_train_item(r, 0.2, 0.3).expect("fixture windows"))
        .collect()
}

pub fn bench_trainer() -> (Trainer, Vec<TrainItem>) {
    let trainer =
        Trainer::new(bench_gtan(), bench_diffusion(), bench_train(3)).expect("fixture trainer");
    let items = bench_items(&bench_dataset());
    (trainer, items)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_build_and_step() {
        let (mut trainer, items) = bench_trainer();
        assert_eq!(items.len(), 16);
        let losses = trainer.run_steps(&items, 1, |_, _| {}).unwrap();
        assert!(losses[0].is_finite());
    }
}
