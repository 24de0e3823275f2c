#![allow(dead_code)]

use gsmakeup::image::ImageBuffer;
use gsmakeup::render::{rasterize_mesh, render_avatar, GBuffer};
use gsmakeup::synth::{default_makeup, synth_head, SynthConfig, SynthHead};
use gsmakeup::uv::{bake, BakeConfig, BakeView, UvTexture};
use gsmakeup::guidance::provide_procedural;

pub const BG: [f64; 3] = [1.0; 3];

pub fn toy_head(resolution: usize) -> SynthHead {
    synth_head(&SynthConfig {
        n_lon: 24,
        n_lat: 16,
        density: 2,
        resolution,
        ..SynthConfig::default()
    })
    .unwrap()
}

/// Procedural makeup over identity renders from the bake ring at the
/// canonical pose.
pub fn ring_guidance(head: &SynthHead) -> Vec<(String, ImageBuffer, GBuffer)> {
    let canon = &head.poses[0];
    let makeup = default_makeup();
    head.ring_cameras
        .iter()
        .map(|cam| {
            let gb = rasterize_mesh(&head.model.mesh, canon, cam).unwrap();
            let identity = render_avatar(&head.model, canon, cam, BG).unwrap();
            (cam.camera_id.clone(), provide_procedural(&makeup, &identity, &gb).unwrap(), gb)
        })
        .collect()
}

pub fn bake_views(views: &[(String, ImageBuffer, GBuffer)], resolution: usize) -> UvTexture {
    let bv: Vec<BakeView> = views
        .iter()
        .map(|(id, image, gbuffer)| BakeView {
            camera_id: id,
            image,
            gbuffer,
        })
        .collect();
    let cfg = BakeConfig {
        resolution,
        ..BakeConfig::new("neutral", views.iter().map(|v| v.0.clone()).collect())
    };
    bake(&bv, &cfg).unwrap()
}
