use spectral_bridge::data::{BandSpec, HyperCube};
use spectral_bridge::experiment::degrade_all;
use spectral_bridge::mae::checkpoint::Stage;
use spectral_bridge::mae::*;
use spectral_bridge::nn::Parameterized;
use spectral_bridge::preprocess::BandStats;
use spectral_bridge::synth::{broadband_sensor, gen_dataset, gen_sensor, SceneConfig, SyntheticScene};
use spectral_bridge::Checkpoint;

fn cubes(n: usize) -> Vec<HyperCube<f32>> {
    let cfg = SceneConfig { bands: 16, height: 4, width: 4, ..Default::default() };
    let scenes: Vec<SyntheticScene<f32>> = gen_dataset(&cfg, n).unwrap();
    scenes.into_iter().map(|s| s.cube).collect()
}

fn tiny(steps: usize) -> ModelConfig {
    ModelConfig {
        embed_dim: 8,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        spatial_patch: 2,
        batch_size: 4,
        steps,
        eval_every: 2,
        ..Default::default()
    }
}

fn pairs(hs: &[HyperCube<f32>]) -> Vec<CubePair<f32>> {
    let srf = gen_sensor(&broadband_sensor()).unwrap();
    degrade_all(hs, &srf).unwrap().into_iter().zip(hs.iter().cloned()).collect()
}

fn bits(ckpt: &Checkpoint) -> Vec<u32> {
    ckpt.model.params().iter().flat_map(|(_, p)| p.value.iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
}

fn moments(s: &BandStats) -> (Vec<BandSpec>, Vec<f64>, Vec<f64>) {
    (s.bands().to_vec(), s.means(), s.stds())
}

#[test]
fn pretraining_is_deterministic() {
    let data = cubes(8);
    let a = pretrain(&data[..6], &data[6..], &tiny(4)).unwrap();
    let b = pretrain(&data[..6], &data[6..], &tiny(4)).unwrap();
    assert_eq!(bits(&a.last), bits(&b.last));
    assert_eq!(a.log.rows, b.log.rows);
    assert_eq!(a.last.stage, Stage::Pretrained);
    assert_eq!(a.log.train_losses().len(), 4);
    assert_eq!(a.log.val_losses().len(), 2);
    let c = pretrain(&data[..6], &data[6..], &ModelConfig { seed: 1, ..tiny(4) }).unwrap();
    assert_ne!(bits(&a.last), bits(&c.last));
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let data = cubes(6);
    let pre = pretrain(&data, &[], &tiny(2)).unwrap().last;
    let ft = finetune(&pairs(&data), &[], Some(&pre), &tiny(2)).unwrap().last;
    let dir = tempfile::tempdir().unwrap();
    for (ckpt, name) in [(&pre, "pre.sbck"), (&ft, "ft.sbck")] {
        let path = dir.path().join(name);
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(bits(&back), bits(ckpt));
        assert_eq!((&back.model.config, back.stage), (&ckpt.model.config, ckpt.stage));
        assert_eq!(moments(&back.hs_stats), moments(&ckpt.hs_stats));
        assert_eq!(back.ms_stats.as_ref().map(moments), ckpt.ms_stats.as_ref().map(moments));
        let again = dir.path().join(format!("again-{name}"));
        back.save(&again).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }
    let ms = &pairs(&data[..1])[0].0;
    let loaded = Checkpoint::load(dir.path().join("ft.sbck")).unwrap();
    assert_eq!(reconstruct(ms, &ft).unwrap(), reconstruct(ms, &loaded).unwrap());
}

#[test]
fn zero_step_finetune_returns_the_initialization() {
    let data = cubes(4);
    let pre = pretrain(&data, &[], &tiny(2)).unwrap().last;
    let out = finetune(&pairs(&data), &[], Some(&pre), &tiny(0)).unwrap();
    assert_eq!(out.last, pre);
    assert!(out.best.is_none() && out.log.rows.is_empty());
}

#[test]
fn reconstruction_requires_a_finetuned_checkpoint() {
    let data = cubes(4);
    let pre = pretrain(&data, &[], &tiny(1)).unwrap().last;
    let ms = &pairs(&data[..1])[0].0;
    assert!(reconstruct(ms, &pre).unwrap_err().is_validation());
    let ft = finetune(&pairs(&data), &[], Some(&pre), &tiny(1)).unwrap().last;
    assert_eq!(ft.stage, Stage::Finetuned);
    let out = reconstruct(ms, &ft).unwrap();
    assert_eq!(out.bands(), data[0].bands());
    assert_eq!((out.height(), out.width()), (4, 4));
    assert!(reconstruct(&data[0], &ft).unwrap_err().is_validation());
}

#[test]
fn finetune_rejects_other_hyperspectral_bands() {
    let data = cubes(4);
    let pre = pretrain(&data, &[], &tiny(1)).unwrap().last;
    let cfg = SceneConfig { bands: 8, height: 4, width: 4, ..Default::default() };
    let other: Vec<HyperCube<f32>> = gen_dataset::<f32>(&cfg, 4).unwrap().into_iter().map(|s| s.cube).collect();
    assert!(finetune(&pairs(&other), &[], Some(&pre), &tiny(1)).is_err());
}

#[test]
fn attention_rows_are_distributions() {
    let data = cubes(2);
    let pre = pretrain(&data, &[], &tiny(1)).unwrap().last;
    let model = &pre.model;
    let p: Vec<_> = data.iter().map(|c| tokens::patchify(c, 1, 2).unwrap()).collect();
    let refs: Vec<_> = p.iter().collect();
    let plan = model.plan_masked(&refs, &[vec![0, 3, 5], vec![1, 9, 15]], false).unwrap();
    let (_, cache) = model.forward(&plan);
    for block in cache.encoder.blocks.iter().chain(&cache.decoder.blocks) {
        for map in block.attention().attention_maps() {
            for row in map.rows() {
                let s: f32 = row.sum();
                assert!((s - 1.0).abs() < 1e-5, "row sums to {s}");
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }
}
