mod common;

use common::{bake_views, ring_guidance, toy_head, BG};
use gsmakeup::avatar::AvatarModel;
use gsmakeup::guidance::{make_mask, refinement_drift, MaskSpec, ProceduralProvider, GuidanceRequest, ViewContext, GuidanceProvider, Stage};
use gsmakeup::io::encode_avatar;
use gsmakeup::metrics::{evaluate, identity_drift, uv_consistency};
use gsmakeup::render::{rasterize_mesh, render_avatar};
use gsmakeup::synth::{default_makeup, default_mask, LIPS};
use gsmakeup::train::{run_coarse, run_refine, TrainConfig};

fn config(coarse: usize, refine: usize) -> TrainConfig {
    TrainConfig {
        lr: 0.05,
        coarse_iters: coarse,
        refine_iters: refine,
        seed: 3,
        background: BG,
        ..TrainConfig::default()
    }
}

fn mean_drift(original: &AvatarModel, edited: &AvatarModel, head: &gsmakeup::synth::SynthHead) -> f64 {
    let labels = default_mask().labels();
    let mut total = 0.0;
    for pose in &head.poses {
        for cam in &head.eval_cameras {
            let gb = rasterize_mesh(&original.mesh, pose, cam).unwrap();
            let a = render_avatar(original, pose, cam, BG).unwrap();
            let b = render_avatar(edited, pose, cam, BG).unwrap();
            total += identity_drift(&a, &b, &gb.label_mask(&labels), &gb.coverage()).unwrap();
        }
    }
    total / (head.poses.len() * head.eval_cameras.len()) as f64
}

#[test]
fn zero_iterations_leave_the_model_unchanged() {
    let head = toy_head(32);
    let tex = bake_views(&ring_guidance(&head), 64);
    let cfg = config(0, 0);
    let mask = default_mask();
    let coarse = run_coarse(&head.model, &tex, &head.poses, &head.eval_cameras, &mask, &cfg).unwrap();
    assert!(coarse.log.is_empty());
    assert_eq!(encode_avatar(&coarse.model), encode_avatar(&head.model));
    let stub = ProceduralProvider::new(default_makeup());
    let refined = run_refine(&head.model, &head.model, &stub, &head.poses, &head.eval_cameras, &mask, &cfg).unwrap();
    assert_eq!(encode_avatar(&refined.model), encode_avatar(&head.model));
}

#[test]
fn training_freezes_geometry_and_is_seeded() {
    let head = toy_head(32);
    let tex = bake_views(&ring_guidance(&head), 64);
    let mask = default_mask();
    let cfg = config(15, 15);
    let coarse = run_coarse(&head.model, &tex, &head.poses, &head.eval_cameras, &mask, &cfg).unwrap();
    assert_eq!(coarse.model.geometry_values(), head.model.geometry_values());
    assert_eq!(coarse.model.binding, head.model.binding);
    assert_ne!(encode_avatar(&coarse.model), encode_avatar(&head.model));

    let stub = ProceduralProvider::new(default_makeup());
    let run = |seed: u64| {
        let cfg = TrainConfig { seed, ..cfg.clone() };
        run_refine(&coarse.model, &head.model, &stub, &head.poses, &head.eval_cameras, &mask, &cfg).unwrap()
    };
    let (a, b, c) = (run(3), run(3), run(4));
    assert_eq!(encode_avatar(&a.model), encode_avatar(&b.model));
    assert_eq!(a.log, b.log);
    assert_eq!(a.model.geometry_values(), head.model.geometry_values());
    assert!(a.log.iter().all(|r| r.stage == Stage::Refine && r.timestep.is_some_and(|t| (20..=400).contains(&t))));
    let views = |o: &gsmakeup::train::TrainOutcome| o.log.iter().map(|r| (r.pose_id.clone(), r.camera_id.clone(), r.timestep)).collect::<Vec<_>>();
    assert_ne!(views(&a), views(&c));
}

#[test]
fn restriction_weight_reduces_identity_drift() {
    let head = toy_head(32);
    let tex = bake_views(&ring_guidance(&head), 64);
    let mask = default_mask();
    let train = |lambda2: f64| {
        let cfg = TrainConfig { lambda2, ..config(60, 0) };
        run_coarse(&head.model, &tex, &head.poses, &head.eval_cameras, &mask, &cfg).unwrap().model
    };
    let free = mean_drift(&head.model, &train(0.0), &head);
    let restricted = mean_drift(&head.model, &train(10.0), &head);
    assert!(restricted < free, "lambda2=10 drift {restricted} vs lambda2=0 drift {free}");
}

#[test]
fn masks_match_label_lookup() {
    let head = toy_head(48);
    let pose = &head.poses[1];
    let cam = &head.eval_cameras[1];
    let lips = make_mask(&head.model, pose, cam, &MaskSpec::new([LIPS]), BG).unwrap();
    assert!(lips.mask.count() > 0);
    for (m, g) in lips.mask.data.iter().zip(&lips.gbuffer.pixels) {
        assert_eq!(*m, g.triangle.is_some_and(|t| head.model.mesh.region_labels[t as usize] == LIPS));
    }
    assert_eq!(lips.identity, render_avatar(&head.model, pose, cam, BG).unwrap());
    let none = make_mask(&head.model, pose, cam, &MaskSpec::new([]), BG).unwrap();
    assert_eq!(none.mask.count(), 0);
}

#[test]
fn stub_refinement_keeps_non_mask_pixels() {
    let head = toy_head(48);
    let tex = bake_views(&ring_guidance(&head), 64);
    let mask = default_mask();
    let coarse = run_coarse(&head.model, &tex, &head.poses, &head.eval_cameras, &mask, &config(20, 0)).unwrap().model;
    let stub = ProceduralProvider::new(default_makeup());
    for cam in &head.eval_cameras {
        let pose = &head.poses[2];
        let view = make_mask(&head.model, pose, cam, &mask, BG).unwrap();
        let base = render_avatar(&coarse, pose, cam, BG).unwrap();
        let request = GuidanceRequest::refine(pose.pose_id.clone(), cam.camera_id.clone(), 200, &base);
        let ctx = ViewContext {
            identity: &view.identity,
            gbuffer: &view.gbuffer,
        };
        let refined = stub.provide(&request, &ctx).unwrap();
        let drift = refinement_drift(&base, &refined, &view.mask, &view.gbuffer.coverage()).unwrap();
        assert!(drift < 0.02, "{drift}");
    }
}

#[test]
fn consistency_ignores_view_order_and_reports_cover_views() {
    let head = toy_head(48);
    let tex = bake_views(&ring_guidance(&head), 64);
    let mask = default_mask();
    let model = run_coarse(&head.model, &tex, &head.poses, &head.eval_cameras, &mask, &config(20, 0)).unwrap().model;
    let poses = &head.poses[..3];
    let forward = uv_consistency(&model, poses, &head.eval_cameras, 64, Some(&mask), BG).unwrap();
    let rev_poses: Vec<_> = poses.iter().rev().cloned().collect();
    let rev_cams: Vec<_> = head.eval_cameras.iter().rev().cloned().collect();
    let backward = uv_consistency(&model, &rev_poses, &rev_cams, 64, Some(&mask), BG).unwrap();
    assert_eq!(forward, backward);

    let report = evaluate(&head.model, &model, &tex, poses, &head.eval_cameras, &mask, BG, Some(64)).unwrap();
    assert_eq!(report.views.len(), 9);
    assert_eq!(report.uv_consistency, Some(forward));
    assert!(report.views.iter().all(|v| v.psnr.is_finite() && v.drift >= 0.0));
}
