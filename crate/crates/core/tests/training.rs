mod common;

use common::{tiny_encoder, tiny_model, tiny_synth, train_batch};
use sci_core::autodiff::{Graph, Tensor};
use sci_core::checkpoint::{self, Checkpoint};
use sci_core::config::RunConfig;
use sci_core::model::Variant;
use sci_core::pipeline;
use sci_core::sim::{self, extract_embedding, train_stage2};
use sci_core::sse::train_stage1;
use sci_core::synthdata::Split;
use sci_core::Error;

fn tiny_run(seed: u64, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig {
        synth: tiny_synth(seed),
        encoder: tiny_encoder(seed),
        ..RunConfig::default()
    };
    cfg.stage1.epochs = epochs;
    cfg.stage2.epochs = epochs;
    cfg.stage2.milestones = vec![1];
    cfg.sampler.p = 2;
    cfg.sampler.k = 2;
    cfg.resolve(Some(seed)).unwrap()
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = tiny_run(4, 2);
    let ds = pipeline::obtain_dataset(&cfg).unwrap();
    let out = pipeline::train(&cfg, &ds).unwrap();
    let ckpt = checkpoint::from_model(&out.model, pipeline::checkpoint_record(&cfg)).unwrap();
    let bytes = ckpt.to_bytes();
    let (back, run) = checkpoint::to_model(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(run, pipeline::checkpoint_record(&cfg));
    let ids: Vec<_> = out.model.store.ids().collect();
    assert_eq!(out.model.store.checksum(&ids), back.store.checksum(&ids));
    assert_eq!(checkpoint::from_model(&back, run).unwrap().to_bytes(), bytes);
    for i in ds.indices(Split::Query) {
        let a = extract_embedding(&out.model, &ds.samples[i].image).unwrap();
        let b = extract_embedding(&back, &ds.samples[i].image).unwrap();
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn clothes_classifier_gets_no_gradient_from_main_step() {
    let (mut model, ds) = tiny_model(Variant::FULL, 2);
    model.prepare_stage2();
    let batch = train_batch(&ds, 4);
    let (pids, clothes) = model.batch_labels(&ds, &batch).unwrap();
    let images: Vec<&Tensor> = batch.iter().map(|i| &ds.samples[*i].image).collect();
    let mut g = Graph::new();
    let (loss, parts) = sim::stage2_loss(&mut g, &model, &images, &pids, &clothes).unwrap();
    assert!(parts.cal > 0.0);
    model.store.zero_grad();
    g.backward_into(loss, &mut model.store).unwrap();
    let w = model.store.get(model.cal_head.weight());
    assert!(w.grad().is_none_or(|gr| gr.iter().all(|x| *x == 0.0)));
    let visual = model.visual.param_ids(&model.store);
    let moved = visual
        .iter()
        .any(|id| model.store.get(*id).grad().is_some_and(|gr| gr.iter().any(|x| *x != 0.0)));
    assert!(moved);
}

#[test]
fn stage2_leaves_the_text_side_untouched() {
    let cfg = tiny_run(5, 2);
    let ds = pipeline::obtain_dataset(&cfg).unwrap();
    let mut model = sci_core::model::SciModel::for_dataset(cfg.model_config(), &ds).unwrap();
    model.prepare_stage1();
    train_stage1(&mut model, &ds, &cfg.stage1_settings()).unwrap();
    let text = model.text_side_params();
    let before = model.store.checksum(&text);
    let cache = model.text_cache.clone().unwrap();
    let head = model.store.get(model.cal_head.weight()).clone();
    train_stage2(&mut model, &ds, &cfg.stage2_settings()).unwrap();
    assert_eq!(model.store.checksum(&text), before);
    assert_eq!(model.text_cache.as_ref().unwrap().f_ort, cache.f_ort);
    assert_ne!(model.store.get(model.cal_head.weight()).data(), head.data());
}

#[test]
fn zero_epochs_change_nothing() {
    let cfg = tiny_run(6, 0);
    let ds = pipeline::obtain_dataset(&cfg).unwrap();
    let mut model = sci_core::model::SciModel::for_dataset(cfg.model_config(), &ds).unwrap();
    let ids: Vec<_> = model.store.ids().collect();
    let before = model.store.checksum(&ids);
    model.prepare_stage1();
    assert!(train_stage1(&mut model, &ds, &cfg.stage1_settings()).unwrap().is_empty());
    assert!(train_stage2(&mut model, &ds, &cfg.stage2_settings()).unwrap().is_empty());
    assert_eq!(model.store.checksum(&ids), before);
}

#[test]
fn stages_enforce_their_freeze_contracts() {
    let cfg = tiny_run(7, 1);
    let ds = pipeline::obtain_dataset(&cfg).unwrap();
    let mut model = sci_core::model::SciModel::for_dataset(cfg.model_config(), &ds).unwrap();
    model.visual.set_frozen(&mut model.store, false);
    assert!(matches!(
        train_stage1(&mut model, &ds, &cfg.stage1_settings()),
        Err(Error::Contract(_))
    ));
    model.text_cache = None;
    assert!(matches!(
        train_stage2(&mut model, &ds, &cfg.stage2_settings()),
        Err(Error::Contract(_))
    ));
}

#[test]
fn training_is_deterministic() {
    let cfg = tiny_run(8, 2);
    let ds = pipeline::obtain_dataset(&cfg).unwrap();
    let a = pipeline::train(&cfg, &ds).unwrap();
    let b = pipeline::train(&cfg, &ds).unwrap();
    let run = pipeline::checkpoint_record(&cfg);
    assert_eq!(
        checkpoint::from_model(&a.model, run.clone()).unwrap().to_bytes(),
        checkpoint::from_model(&b.model, run).unwrap().to_bytes()
    );
}

#[test]
fn mismatched_image_size_is_a_contract_error() {
    let mut cfg = tiny_run(9, 1);
    let ds = pipeline::obtain_dataset(&cfg).unwrap();
    cfg.encoder.height = 12;
    assert!(matches!(pipeline::train(&cfg, &ds), Err(Error::Contract(_))));
}
