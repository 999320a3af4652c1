//! Analytic rasterizer gradients against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spikesplat::se3::{se3_exp, Pose, TrajectorySegment, Twist, Vec3, Vec6};
use spikesplat::splat::{
    camera_to_world_gradient, rasterize, rasterize_backward, segment_gradients, Camera, GaussianSet,
    Intrinsics,
};
use spikesplat::Image;

const EPS: f64 = 1e-6;

fn scene(seed: u64, n: usize) -> GaussianSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = GaussianSet::empty();
    for _ in 0..n {
        let q = [0; 4].map(|_| rng.gen_range(-1.0..1.0));
        g.push(
            Vec3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(1.6..2.4)),
            Vec3::new(rng.gen_range(-2.4..-1.6), rng.gen_range(-2.4..-1.6), rng.gen_range(-2.4..-1.6)),
            q,
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.5..1.5),
        );
    }
    g
}

fn weights(seed: u64, n: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    Image::new(n, n, (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn loss(g: &GaussianSet, cam: &Camera, w: &Image) -> f64 {
    let r = rasterize(g, cam).unwrap();
    r.image.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

struct Tally {
    worst: f64,
    compared: usize,
}

impl Tally {
    fn new() -> Self {
        Self { worst: 0.0, compared: 0 }
    }

    fn add(&mut self, analytic: f64, fd: f64) {
        if fd.abs() <= 1e-8 {
            return;
        }
        self.compared += 1;
        self.worst = self.worst.max((analytic - fd).abs() / fd.abs());
    }
}

fn camera(w2c: Pose) -> Camera {
    Camera::new(Intrinsics::centered(16.0, 16, 16), w2c).unwrap()
}

#[test]
fn gaussian_parameter_gradients_match_finite_differences() {
    let mut tally = Tally::new();
    for seed in 0..4 {
        let g = scene(seed, 5);
        let cam = camera(se3_exp(&Twist::new(Vec3::new(0.02, -0.03, 0.01), Vec3::new(0.03, 0.0, 0.05))));
        let w = weights(seed, 16);
        let grads = rasterize_backward(&g, &cam, &w).unwrap();
        let fields: [(fn(&mut GaussianSet) -> &mut Vec<f64>, &Vec<f64>); 5] = [
            (|g| &mut g.positions, &grads.positions),
            (|g| &mut g.log_scales, &grads.log_scales),
            (|g| &mut g.rotations, &grads.rotations),
            (|g| &mut g.opacity_logits, &grads.opacity_logits),
            (|g| &mut g.color_logits, &grads.color_logits),
        ];
        for (field, analytic) in fields {
            for i in 0..analytic.len() {
                let mut plus = g.clone();
                field(&mut plus)[i] += EPS;
                let mut minus = g.clone();
                field(&mut minus)[i] -= EPS;
                let fd = (loss(&plus, &cam, &w) - loss(&minus, &cam, &w)) / (2.0 * EPS);
                tally.add(analytic[i], fd);
            }
        }
    }
    assert!(tally.compared > 100);
    assert!(tally.worst <= 1e-3, "worst relative error {:e}", tally.worst);
}

#[test]
fn camera_twist_gradient_matches_finite_differences() {
    let mut tally = Tally::new();
    for seed in 10..14 {
        let g = scene(seed, 5);
        let w2c = se3_exp(&Twist::new(Vec3::new(-0.01, 0.04, 0.02), Vec3::new(0.0, 0.02, 0.1)));
        let cam = camera(w2c);
        let w = weights(seed, 16);
        let grads = rasterize_backward(&g, &cam, &w).unwrap();
        for k in 0..6 {
            let mut d = Vec6::zeros();
            d[k] = EPS;
            let plus = camera(se3_exp(&Twist::from_vector(&d)).compose(&w2c));
            let minus = camera(se3_exp(&Twist::from_vector(&-d)).compose(&w2c));
            let fd = (loss(&g, &plus, &w) - loss(&g, &minus, &w)) / (2.0 * EPS);
            tally.add(grads.camera[k], fd);
        }
    }
    assert!(tally.compared >= 20);
    assert!(tally.worst <= 1e-3, "worst relative error {:e}", tally.worst);
}

#[test]
fn trajectory_endpoint_gradients_match_finite_differences() {
    let mut tally = Tally::new();
    let intr = Intrinsics::centered(16.0, 16, 16);
    for seed in 20..23 {
        let g = scene(seed, 5);
        let start = se3_exp(&Twist::new(Vec3::new(0.01, -0.02, 0.0), Vec3::new(-0.05, 0.0, 0.0)));
        let end = se3_exp(&Twist::new(Vec3::new(-0.02, 0.03, 0.01), Vec3::new(0.06, 0.02, -0.03)));
        let seg = TrajectorySegment::new(start, end, 96.0).unwrap();
        let w = weights(seed, 16);
        for t in [0.0, 40.0, 96.0] {
            let render_loss = |s: &TrajectorySegment| {
                let cam = Camera::from_camera_to_world(intr, &s.interpolate(t).unwrap()).unwrap();
                loss(&g, &cam, &w)
            };
            let c2w = seg.interpolate(t).unwrap();
            let cam = Camera::from_camera_to_world(intr, &c2w).unwrap();
            let gw = rasterize_backward(&g, &cam, &w).unwrap().camera;
            let gp = camera_to_world_gradient(&cam.world_to_camera, &gw);
            let (ga, gb) = segment_gradients(&seg, t, &gp).unwrap();
            for k in 0..6 {
                let mut d = Vec6::zeros();
                d[k] = EPS;
                for (which, analytic) in [(0, ga[k]), (1, gb[k])] {
                    let bump = |sign: f64| {
                        let e = se3_exp(&Twist::from_vector(&(d * sign)));
                        let mut s = seg;
                        if which == 0 {
                            s.start = e.compose(&seg.start);
                        } else {
                            s.end = e.compose(&seg.end);
                        }
                        render_loss(&s)
                    };
                    let fd = (bump(1.0) - bump(-1.0)) / (2.0 * EPS);
                    tally.add(analytic, fd);
                }
            }
        }
    }
    assert!(tally.compared >= 30);
    assert!(tally.worst <= 1e-3, "worst relative error {:e}", tally.worst);
}

#[test]
fn permuting_primitives_leaves_the_render_unchanged() {
    let g = scene(42, 5);
    let mut rev = GaussianSet::empty();
    for i in (0..g.len()).rev() {
        rev.push(g.position(i), g.log_scale(i), g.rotation(i), g.opacity_logits[i], g.color_logits[i]);
    }
    let cam = camera(Pose::identity());
    assert_eq!(rasterize(&g, &cam).unwrap(), rasterize(&rev, &cam).unwrap());
}
