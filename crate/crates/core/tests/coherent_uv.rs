mod common;

use common::{bake_views, ring_guidance, toy_head, BG};
use gsmakeup::render::rasterize_mesh;
use gsmakeup::uv::{query, query_gbuffer};

#[test]
fn query_from_a_bake_camera_reproduces_its_input() {
    let head = toy_head(96);
    let views = ring_guidance(&head);
    let tex = bake_views(&views, 256);
    for (_, image, gb) in views.iter().step_by(3) {
        let (queried, valid) = query_gbuffer(&tex, gb, BG).unwrap();
        let l1 = queried.mean_abs_diff(image, Some(&valid)).unwrap();
        assert!(l1 < 0.05, "L1 {l1}");
    }
}

#[test]
fn constant_guidance_queries_constant_at_any_pose() {
    let head = toy_head(48);
    let mut views = ring_guidance(&head);
    let c = [0.25f32, 0.5, 0.75];
    for (_, image, _) in &mut views {
        image.data.iter_mut().for_each(|p| *p = c);
    }
    let tex = bake_views(&views, 64);
    for pose in &head.poses {
        for cam in &head.eval_cameras {
            let (img, valid) = query(&tex, &head.model.mesh, pose, cam, BG).unwrap();
            assert!(valid.count() > 0);
            for (p, v) in img.data.iter().zip(&valid.data) {
                if *v {
                    assert_eq!(*p, c);
                }
            }
            let gb = rasterize_mesh(&head.model.mesh, pose, cam).unwrap();
            assert!(valid.is_subset_of(&gb.coverage()));
        }
    }
}
