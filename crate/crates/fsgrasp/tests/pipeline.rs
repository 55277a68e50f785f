//! Cross-module integration: the CLI command chain, file-ingestion backends
//! inside the benchmark, and trained-head behavior on whole scenes.

use fsgrasp::cli::dispatch;
use fsgrasp::codec::CodecConfig;
use fsgrasp::evalsuite::eval_grasp;
use fsgrasp::heads::{build_training_samples, train_head, GraspHead, HeadConfig, HeadKind, TrainConfig, TrainedHeads};
use fsgrasp::synthdata::{gen_dataset, gen_scene, GenConfig, Shape, SynthClass};
use std::path::Path;

fn run(args: &[&str]) -> i32 {
    dispatch(std::iter::once("fsgrasp").chain(args.iter().copied()))
}

#[test]
fn cli_chain_gen_precompute_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let data_s = data.to_str().unwrap();

    assert_eq!(
        run(&["gen-scenes", "--classes", "8", "--scenes", "25", "--objects", "2", "--seed", "7", "--out", data_s]),
        0
    );
    assert!(data.join("manifest.json").exists());
    assert!(data.join("split.json").exists());
    assert!(data.join("run.json").exists());

    let masks = dir.path().join("masks.jsonl");
    assert_eq!(
        run(&["precompute-masks", "--data", data_s, "--backend", "oracle", "--seed", "3",
              "--cache", masks.to_str().unwrap(), "--out", dir.path().join("pm").to_str().unwrap()]),
        0
    );
    assert!(masks.exists());

    let embeddings = dir.path().join("embeddings.jsonl");
    assert_eq!(
        run(&["precompute-embeddings", "--data", data_s, "--embedder", "histogram",
              "--masks", masks.to_str().unwrap(),
              "--cache", embeddings.to_str().unwrap(), "--out", dir.path().join("pe").to_str().unwrap()]),
        0
    );
    assert!(embeddings.exists());

    // evaluate entirely through the file-ingestion backends
    let out = dir.path().join("eval");
    assert_eq!(
        run(&["eval-grasp", "--data", data_s,
              "--backend", &format!("file:{}", masks.display()),
              "--embedder", &format!("file:{}", embeddings.display()),
              "--grasp-source", "gt-encode",
              "--iterations", "30", "--seed", "1",
              "--csv",
              "--out", out.to_str().unwrap()]),
        0
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["episodes"], 30);
    assert!(report["a_sem"].as_f64().unwrap() > 0.5);
    assert!(out.join("episodes.csv").exists());
    assert!(out.join("run.json").exists());

    // eval-fss leaves grasp metrics undefined
    let fss_out = dir.path().join("fss");
    assert_eq!(
        run(&["eval-fss", "--data", data_s, "--backend", "oracle", "--embedder", "oracle",
              "--iterations", "20", "--seed", "2", "--out", fss_out.to_str().unwrap()]),
        0
    );
    let fss: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fss_out.join("report.json")).unwrap()).unwrap();
    assert!(fss["a_sem"].is_null());
    assert!(fss["miou"].as_f64().unwrap() > 0.5);
}

#[test]
fn cli_infer_select_and_grasp_on_one_scene() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let data_s = data.to_str().unwrap();
    assert_eq!(
        run(&["gen-scenes", "--classes", "8", "--scenes", "6", "--objects", "2", "--seed", "19", "--out", data_s]),
        0
    );
    // find a scene containing a test class and its support directory
    let split: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data.join("split.json")).unwrap()).unwrap();
    let test_class = split["test_classes"][0].as_u64().unwrap();
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    let mut chosen_scene = None;
    for scene in manifest["scenes"].as_array().unwrap() {
        let ann_path = data.join(scene["annotation"].as_str().unwrap());
        let ann: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&ann_path).unwrap()).unwrap();
        if ann["instances"].as_array().unwrap().iter().any(|i| i["class_id"].as_u64() == Some(test_class)) {
            chosen_scene = Some(ann_path);
            break;
        }
    }
    let Some(scene_path) = chosen_scene else {
        // tiny dataset without the class in any scene: regenerate deterministically is overkill here
        panic!("no scene contains test class {test_class}");
    };
    let support = data.join("support").join(test_class.to_string());
    let out = dir.path().join("select");
    assert_eq!(
        run(&["infer-select", "--scene", scene_path.to_str().unwrap(), "--support", support.to_str().unwrap(),
              "--backend", "oracle", "--embedder", "histogram", "--out", out.to_str().unwrap()]),
        0
    );
    let record: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("selection.json")).unwrap()).unwrap();
    assert!(record["chosen_index"].is_u64());
    assert!(record["scores"].as_array().unwrap().len() >= 2);
    assert!(Path::new(record["heatmap_png16"].as_str().unwrap()).exists());
    assert!(record["mask_rle"]["counts"].as_array().is_some());

    let gout = dir.path().join("grasp");
    assert_eq!(
        run(&["infer-grasp", "--scene", scene_path.to_str().unwrap(), "--support", support.to_str().unwrap(),
              "--backend", "oracle", "--embedder", "histogram", "--shots", "2",
              "--out", gout.to_str().unwrap()]),
        0
    );
    let grasp: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(gout.join("grasp.json")).unwrap()).unwrap();
    assert!(grasp["grasp"]["x"].is_number());
    assert_eq!(grasp["grasp"]["width_unit"], "px");
}

#[test]
fn cli_unit_mismatch_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(
        run(&["gen-scenes", "--classes", "8", "--scenes", "8", "--objects", "2", "--seed", "3",
              "--out", data.to_str().unwrap()]),
        0
    );
    // heads carrying a millimeter quantizer against a pixel-annotated dataset
    let heads_dir = dir.path().join("mm_heads");
    TrainedHeads::init(CodecConfig::graspnet_style(), 1).save_all(&heads_dir).unwrap();
    let code = run(&["eval-grasp", "--data", data.to_str().unwrap(),
                     "--backend", "oracle", "--embedder", "oracle",
                     "--grasp-source", &format!("heads:{}", heads_dir.display()),
                     "--iterations", "5", "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code, 1);
}

#[test]
fn training_loss_decreases_over_epochs() {
    // 100 single-object scenes; quality head refuses to plateau immediately
    let classes = fsgrasp::synthdata::standard_suite_classes();
    let cfg = GenConfig::default();
    let (scenes, _) = gen_dataset(&classes, 100, 1, 0.75, 31, &cfg).unwrap();
    let codec = CodecConfig::ocid_style();
    let samples = build_training_samples(&scenes, &codec, HeadKind::Quality, None).unwrap();
    assert_eq!(samples.len(), 100);
    let mut head = GraspHead::init(HeadConfig::new(HeadKind::Quality, &codec, 5));
    let outcome = train_head(
        &mut head,
        &samples,
        &TrainConfig {
            epochs: 10,
            batch_size: 8,
            learning_rate: 1e-3,
            background_weight: 0.1,
            seed: 2,
        },
    )
    .unwrap();
    assert!(
        outcome.epoch_losses[9] < outcome.epoch_losses[0],
        "losses: {:?}",
        outcome.epoch_losses
    );
}

#[test]
fn trained_heads_grasp_a_lone_bar() {
    let bar = vec![SynthClass {
        class_id: 0,
        shape: Shape::Bar,
        hue_deg: 200.0,
        size_range: (1.0, 1.2),
    }];
    let cfg = GenConfig::default();
    let scenes: Vec<_> = (0..40).map(|i| gen_scene(&bar, 1, 400 + i, &cfg).unwrap()).collect();
    let codec = CodecConfig::ocid_style();
    let mut heads = TrainedHeads::init(codec.clone(), 7);
    let train_cfg = TrainConfig {
        epochs: 6,
        batch_size: 8,
        learning_rate: 2e-3,
        background_weight: 0.1,
        seed: 0,
    };
    for kind in HeadKind::ALL {
        let samples = build_training_samples(&scenes, &codec, kind, None).unwrap();
        train_head(heads.head_mut(kind), &samples, &train_cfg).unwrap();
    }
    // a fresh bar scene with an oracle heatmap
    let (image, ann) = gen_scene(&bar, 1, 999, &cfg).unwrap();
    let inst = &ann.instances[0];
    let heatmap: Vec<f32> = inst.mask.pixels().iter().map(|&p| if p { 1.0 } else { 0.0 }).collect();
    let a = heads.synthesize(&image, &heatmap, 3).unwrap();
    let b = heads.synthesize(&image, &heatmap, 3).unwrap();
    assert_eq!((a.grasp.x, a.grasp.y, a.grasp.theta, a.grasp.width), (b.grasp.x, b.grasp.y, b.grasp.theta, b.grasp.width));
    let (sem, _) = eval_grasp(&a.grasp, &ann, 0, None).unwrap();
    assert!(sem, "grasp center ({}, {}) missed the bar's grasp region", a.grasp.x, a.grasp.y);

    // an absent target flags low confidence
    let zero = vec![0.0f32; image.height() * image.width()];
    let ex = heads.synthesize(&image, &zero, 3).unwrap();
    assert!(ex.low_confidence);
}
