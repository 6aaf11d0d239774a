use warp4d::config::hop_warp_options;
use warp4d::raster::ImageFrame;
use warp4d::raster::Mask;
use warp4d::scene::{bundled_scene, bundled_scenes_with, render, BUNDLED_NAMES};
use warp4d::warp::{forward_warp_with, WarpOptions};

fn masked_psnr(a: &ImageFrame, b: &ImageFrame, mask: &Mask) -> f64 {
    let c = a.channels;
    let (mut se, mut n) = (0.0, 0usize);
    for (i, &m) in mask.data.iter().enumerate() {
        if m {
            for ch in 0..c {
                se += (a.data[i * c + ch] - b.data[i * c + ch]).powi(2);
            }
            n += c;
        }
    }
    if se == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (1.0 / (se / n as f64)).log10()
}

#[test]
fn warp_matches_direct_render_on_observed_pixels() {
    for (i, spec) in bundled_scenes_with(128, 128, 3).into_iter().enumerate() {
        let src = spec.render_source(1);
        let k = spec.cameras[1].intrinsics;
        for yaw in [-10.0, 5.0, 10.0] {
            let target = spec.cameras[1].orbit_yaw(&spec.pivot.into(), f64::to_radians(yaw));
            let truth = render(&spec, &target, 1);
            let t = spec.cameras[1].relative_to(&target);
            for (label, opts) in [("default", WarpOptions::default()), ("hop", hop_warp_options())] {
                let w = forward_warp_with(&src.image, &src.depth, &k, &k, &t, &opts).unwrap();
                let p = masked_psnr(&w.image, &truth.image, &w.mask);
                println!("{} yaw {yaw:>5}: {label} {p:.2} dB, β {:.3}", BUNDLED_NAMES[i], w.density());
                assert!(p >= 30.0, "{} yaw {yaw} {label}: {p:.2} dB", spec.name);
            }
        }
    }
}

#[test]
fn occlusion_scene_disoccludes_at_ten_degrees() {
    let spec = bundled_scene("spin", 128, 128, 2, 1003).unwrap();
    let src = spec.render_source(0);
    let k = spec.cameras[0].intrinsics;
    let target = spec.yaw_target(10.0);
    let w = forward_warp_with(&src.image, &src.depth, &k, &k, &spec.cameras[0].relative_to(&target), &WarpOptions::default())
        .unwrap();
    println!("spin β at 10° = {:.4}", w.density());
    assert!(w.density() < 0.95);
}
