use gmrw::backbone::BackboneConfig;
use gmrw::data::{fixtures, generate_sprite_clip, load_frame_directory, save_frames, SpriteSceneConfig, SpriteSource};
use gmrw::matcher::MatcherConfig;
use gmrw::metrics::{evaluate, sample_queries_strided, zero_motion_tracks, MetricsConfig};
use gmrw::model::{Model, ModelConfig};
use gmrw::tracker::{track, TrackMode, TrackerConfig};
use gmrw::train::{TrainConfig, Trainer};

fn tiny_model() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig { feature_dim: 8, base_channels: 4, ..Default::default() },
        matcher: MatcherConfig { num_layers: 1, ffn_expansion: 1, ..Default::default() },
    }
}

fn tiny_scene(seed: u64) -> SpriteSceneConfig {
    SpriteSceneConfig { canvas_size: [32, 32], sprite_size_range: [8, 12], num_frames: 5, seed, ..Default::default() }
}

fn trained(steps: usize) -> Model {
    let mut config = TrainConfig { crop_size: 32, ..Default::default() };
    config.optimizer.steps = steps;
    config.optimizer.batch_size = 1;
    config.optimizer.seed = 4;
    let mut trainer = Trainer::new(Model::new(&tiny_model(), 4).unwrap(), &config).unwrap();
    let mut losses = Vec::new();
    trainer
        .run(&mut SpriteSource { config: tiny_scene(0) }, |_, r, _| {
            losses.push(r.total);
            Ok(())
        })
        .unwrap();
    assert_eq!(losses.len(), steps);
    assert!(losses.iter().all(|l| l.is_finite()));
    trainer.model
}

#[test]
fn training_is_reproducible_from_the_seed() {
    let (a, b) = (trained(3), trained(3));
    assert!(a.params.iter().eq(b.params.iter()));
}

#[test]
fn trained_model_tracks_saved_frames() {
    let model = trained(2);
    let sample = generate_sprite_clip(&tiny_scene(9)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_frames(&sample.clip, dir.path()).unwrap();
    let clip = load_frame_directory(dir.path(), None).unwrap();
    assert_eq!((clip.len(), clip.height(), clip.width()), (5, 32, 32));

    let gt = sample_queries_strided(&sample.tracks, 2).unwrap();
    for mode in [TrackMode::Chained, TrackMode::Direct] {
        let config = TrackerConfig { mode, eval_stride: Some(4), ..Default::default() };
        let tracks = track(&clip, &gt.queries, &model, &config).unwrap();
        assert_eq!(tracks.len(), gt.queries.len());
        let report = evaluate(&tracks, &gt, (32, 32), &MetricsConfig::default()).unwrap();
        for v in [report.aj, report.delta_avg, report.oa] {
            assert!((0.0..=1.0).contains(&v));
        }
    }
}

#[test]
fn frozen_queries_are_exact_on_static_scenes() {
    let sample = fixtures::static_scene(32, 4, 2).unwrap();
    let gt = sample_queries_strided(&sample.tracks, 1).unwrap();
    let report = evaluate(&zero_motion_tracks(&gt), &gt, (32, 32), &MetricsConfig::default()).unwrap();
    assert_eq!((report.aj, report.delta_avg, report.oa), (1.0, 1.0, 1.0));
}
