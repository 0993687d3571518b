//! Frozen golden values: the zero-denoiser sampler path and untrained greedy
//! decodes are pure functions of the seed, locked here against regression.

use deskvla_autodiff::rng::DetRng;
use deskvla_autodiff::Tensor;
use deskvla_model::backbone::{self, BackboneConfig};
use deskvla_model::diffusion::{default_schedule, sample_chunk};
use deskvla_model::embodiment::EmbodimentId;
use deskvla_model::image::ObsImage;
use deskvla_model::vocab::Vocabulary;

#[test]
fn zero_denoiser_sampler_matches_golden_values() {
    let schedule = default_schedule();
    let emb = EmbodimentId::new("e");
    let golden: [(u64, [f32; 4]); 2] = [
        (7, [-0.35535347, 0.72523904, -1.2854712, -0.21463674]),
        (8, [-0.5462372, -0.86946005, 0.73796314, 1.2836626]),
    ];
    for (seed, expect) in golden {
        let mut rng = DetRng::new(seed);
        let chunk = sample_chunk(
            |a_t, _| Ok(Tensor::zeros(a_t.values.shape().to_vec())),
            &emb,
            2,
            2,
            &schedule,
            &mut rng,
        )
        .unwrap();
        for (got, want) in chunk.values.data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-6, "seed {seed}: {got} vs {want}");
        }
    }
}

#[test]
fn untrained_greedy_decode_matches_golden_sequences() {
    let vocab = Vocabulary::build([
        "sort the objects",
        "reach red disc",
        "place red disc in bin a",
        "grasp blue rect",
    ]);
    let cfg = BackboneConfig {
        layers: 2,
        width: 32,
        heads: 2,
        context: 96,
        vocab: vocab.len(),
        view_res: 16,
        views: 2,
        patch: 8,
        queries: 4,
        reason_cap: 6,
        connector_width: 32,
        ffn_mult: 2,
    };
    let golden: [(u64, &[u32]); 2] = [(11, &[10, 3, 11, 14, 1]), (12, &[16, 16, 16, 16, 7, 2])];
    for (seed, expect) in golden {
        let mut rng = DetRng::new(seed);
        let params = backbone::init_backbone_params(&cfg, &mut rng).unwrap();
        let views: Vec<ObsImage> = (0..2)
            .map(|i| {
                let mut r = DetRng::new(1000 + i);
                ObsImage::new(
                    16,
                    16,
                    (0..16 * 16 * 3).map(|_| r.unit() as f32).collect(),
                )
                .unwrap()
            })
            .collect();
        let instr = vocab.encode("sort the objects").unwrap();
        let (reasoning, _) =
            backbone::forward_multimodal(&cfg, &params, &vocab, &views, &instr).unwrap();
        assert_eq!(reasoning.token_ids, expect, "seed {seed}");
    }
}
