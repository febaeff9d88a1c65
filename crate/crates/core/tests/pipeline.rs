use outdreamer_core::codec::{decode, encode, LatentVideo, PixelVideo, PATCH};
use outdreamer_core::diffusion::{Conditioning, Denoiser, Guidance, LatentNorm, NoiseSchedule, SamplerConfig};
use outdreamer_core::dit::BackboneConfig;
use outdreamer_core::model::{ModelConfig, OutDreamer};
use outdreamer_core::pipeline::{make_eval_mask, outpaint, outpaint_long, EvalMaskSpec, LongVideoConfig};
use outdreamer_core::refiner::ByteVideo;
use outdreamer_core::rng::Rng;
use outdreamer_core::training::{synth_video, MaskDirection, TrainConfig, Trainer};
use outdreamer_core::{Result, Tensor};

/// Knows the clean video and returns the exact noise that produced `z_t`.
struct Oracle {
    frame: LatentVideo,
    norm: LatentNorm,
    schedule: NoiseSchedule,
}

impl Denoiser for Oracle {
    fn latent_norm(&self) -> LatentNorm {
        self.norm
    }

    fn predict_noise(&self, z_t: &LatentVideo, t: usize, _: &Conditioning, _: Guidance) -> Result<Tensor> {
        // Every frame of the clean video equals `self.frame`.
        let frames = z_t.frames();
        let clean = LatentVideo::concat_frames(&vec![&self.frame; frames])?;
        let ab = self.schedule.alpha_bar(t);
        let z0 = self.norm.normalize(&clean)?;
        z_t.tensor().zip_map(z0.tensor(), |z, c| (z - ab.sqrt() * c) / (1.0 - ab).sqrt())
    }
}

fn static_video(rows: usize, cols: usize, frames: usize, seed: u64) -> PixelVideo {
    let mut rng = Rng::seed(seed);
    let one = synth_video(rows, cols, 1, &mut rng).unwrap();
    let one = ByteVideo::from_pixels(&one).to_pixels();
    PixelVideo::concat_frames(&vec![&one; frames]).unwrap()
}

fn oracle_for(video: &PixelVideo, norm: LatentNorm) -> Oracle {
    Oracle {
        frame: encode(&video.frame_range(0, 1).unwrap(), PATCH).unwrap(),
        norm,
        schedule: NoiseSchedule::default_linear(),
    }
}

fn tiny_model(seed: u64) -> OutDreamer {
    let config = ModelConfig {
        backbone: BackboneConfig {
            n_blocks: 2,
            d_model: 16,
            n_heads: 2,
            ..BackboneConfig::default()
        },
        ..ModelConfig::default()
    };
    OutDreamer::new(config, seed).unwrap()
}

fn horizontal(ratio: f64) -> EvalMaskSpec {
    EvalMaskSpec {
        ratio,
        direction: MaskDirection::Horizontal,
    }
}

#[test]
fn codec_round_trip_is_exact() {
    let mut rng = Rng::seed(4);
    let x = PixelVideo::new(rng.uniform_tensor(&[8, 12, 3, 3], 0.0, 1.0)).unwrap();
    let back = decode(&encode(&x, PATCH).unwrap(), PATCH).unwrap();
    assert_eq!(back, x);
}

#[test]
fn oracle_denoiser_recovers_the_whole_video() {
    let schedule = NoiseSchedule::default_linear();
    let video = static_video(16, 16, 4, 1);
    let mask = make_eval_mask(horizontal(0.25), 16, 16, 4).unwrap();
    for norm in [LatentNorm::IDENTITY, ModelConfig::default().latent_norm] {
        let sampler = SamplerConfig {
            steps: 20,
            seed: 3,
            clip_z0: Some((0.0, 1.0)),
            ..SamplerConfig::default()
        };
        let out = outpaint(&oracle_for(&video, norm), &schedule, &sampler, &video, &mask.pixel).unwrap();
        assert!(out.generated.tensor().max_abs_diff(video.tensor()) < 1e-9, "{norm:?}");
        assert!(out.blended.tensor().max_abs_diff(video.tensor()) < 1e-9, "{norm:?}");
    }
}

#[test]
fn oracle_long_video_survives_refinement() {
    let schedule = NoiseSchedule::default_linear();
    let video = static_video(8, 16, 11, 2);
    let mask = make_eval_mask(horizontal(0.5), 8, 16, 11).unwrap();
    let oracle = oracle_for(&video, ModelConfig::default().latent_norm);
    let sampler = SamplerConfig {
        steps: 10,
        ..SamplerConfig::default()
    };
    let config = LongVideoConfig {
        clip_len: 5,
        overlap: 2,
        ..LongVideoConfig::default()
    };
    let out = outpaint_long(&oracle, &schedule, &sampler, &video, &mask.pixel, &config).unwrap();
    assert_eq!(out.shape(), video.shape());
    assert!(out.tensor().max_abs_diff(video.tensor()) < 1e-9);
}

#[test]
fn untrained_model_keeps_the_given_region() {
    let schedule = NoiseSchedule::default_linear();
    let model = tiny_model(5);
    let mut rng = Rng::seed(6);
    let video = synth_video(16, 16, 3, &mut rng).unwrap();
    let mask = make_eval_mask(horizontal(0.25), 16, 16, 3).unwrap();
    let run = |seed| {
        let sampler = SamplerConfig {
            steps: 4,
            seed,
            ..SamplerConfig::default()
        };
        outpaint(&model, &schedule, &sampler, &video, &mask.pixel).unwrap()
    };
    let (a, b, c) = (run(1), run(1), run(2));
    assert_eq!(a, b);
    assert_ne!(a.generated, c.generated);
    for r in 0..16 {
        for col in 0..16 {
            for f in 0..3 {
                for ch in 0..3 {
                    let (given, out) = (video.at(r, col, f, ch), a.blended.at(r, col, f, ch));
                    if mask.pixel.is_given(r, col, f) {
                        assert_eq!(given.to_bits(), out.to_bits());
                    } else {
                        assert_eq!(out, a.generated.at(r, col, f, ch));
                    }
                }
            }
        }
    }
}

#[test]
fn training_is_reproducible() {
    let config = TrainConfig {
        rows: 8,
        cols: 8,
        frames: 2,
        steps: 6,
        lr: 0.01,
        seed: 11,
        ..TrainConfig::default()
    };
    let run = || {
        let mut model = tiny_model(0);
        let mut trainer = Trainer::new(config.clone(), NoiseSchedule::default_linear()).unwrap();
        let log = trainer.run(&mut model, |_| {}).unwrap();
        (model, log)
    };
    let (m1, log1) = run();
    let (m2, log2) = run();
    assert_eq!(log1, log2);
    assert!(log1.iter().all(|l| l.losses.l_total.is_finite()));
    for ((_, p), (_, q)) in m1.params.iter().zip(m2.params.iter()) {
        assert_eq!(p.value, q.value, "{}", p.name);
    }
    let fresh = tiny_model(0);
    let moved = m1.params.iter().zip(fresh.params.iter()).any(|((_, p), (_, q))| p.value != q.value);
    assert!(moved);
}
