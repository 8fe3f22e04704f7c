//! Deterministic synthetic episodic tasks with a controllable domain shift.
//!
//! Each episode draws fresh class prototypes (low-pass-filtered Gaussian
//! noise fields), then renders support and query samples by translating the
//! prototype, scaling its contrast, and adding pixel noise; every pixel lands
//! in `[0, 1]`. The shift knob monotonically moves smoothness, contrast, and
//! noise away from the base domain, standing in for a cross-domain benchmark.

use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;

/// Rendering amplitude of a standardized prototype field around mid-gray.
const PROTO_AMPLITUDE: f64 = 0.25;

/// Knobs of one synthetic domain.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DomainParams {
    /// Image shape as `(channels, height, width)`.
    pub image_size: (usize, usize, usize),
    /// Low-pass cutoff of the class prototype fields; the Gaussian blur
    /// applied to the white-noise field has std `height / (2 * cutoff)`,
    /// so a lower cutoff means smoother prototypes.
    pub cutoff: f64,
    /// Std of the per-pixel within-class noise.
    pub noise_sigma: f64,
    /// Per-sample contrast is drawn uniformly from this range.
    pub contrast: (f64, f64),
    /// Maximum translation jitter in pixels (rounded to an integer).
    pub jitter: f64,
    /// Stream id separating this domain's draws from other domains.
    pub stream_id: u64,
}

impl DomainParams {
    /// The base toy domain.
    pub fn base() -> DomainParams {
        DomainParams {
            image_size: (1, 16, 16),
            cutoff: 4.0,
            noise_sigma: 0.2,
            contrast: (0.7, 1.1),
            jitter: 1.0,
            stream_id: 0,
        }
    }
}

/// Move a domain away from `base` by `shift` in `[0, 1]`.
///
/// The shipped schedule is linear in `shift`: at `shift = 1` the within-class
/// noise doubles, the prototype cutoff halves (smoother fields), and the
/// contrast range drops to `(0.6 lo, 0.8 hi)`. Jitter and the stream id are
/// unchanged, so an episode seed renders the *same* classes under shifted
/// statistics.
pub fn shifted_domain(base: &DomainParams, shift: f64) -> DomainParams {
    assert!((0.0..=1.0).contains(&shift), "shift must be in [0, 1], got {shift}");
    DomainParams {
        image_size: base.image_size,
        cutoff: base.cutoff * (1.0 - 0.5 * shift),
        noise_sigma: base.noise_sigma * (1.0 + shift),
        contrast: (base.contrast.0 * (1.0 - 0.4 * shift), base.contrast.1 * (1.0 - 0.2 * shift)),
        jitter: base.jitter,
        stream_id: base.stream_id,
    }
}

/// One n-way k-shot task: labeled support set and query set.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    pub support_x: Tensor,
    pub support_y: Vec<usize>,
    pub query_x: Tensor,
    pub query_y: Vec<usize>,
    pub task_seed: u64,
}

impl Episode {
    pub fn support_size(&self) -> usize {
        self.support_y.len()
    }

    pub fn query_size(&self) -> usize {
        self.query_y.len()
    }
}

/// Separable Gaussian blur with clamp-to-edge sampling.
fn gaussian_blur(field: &mut [f64], h: usize, w: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut norm = 0.0;
    for d in -radius..=radius {
        let v = (-0.5 * (d as f64 / sigma) * (d as f64 / sigma)).exp();
        kernel.push(v);
        norm += v;
    }
    for v in kernel.iter_mut() {
        *v /= norm;
    }
    let mut tmp = vec![0.0; field.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, d) in (-radius..=radius).enumerate() {
                let xx = (x as i64 + d).clamp(0, w as i64 - 1) as usize;
                acc += kernel[ki] * field[y * w + xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, d) in (-radius..=radius).enumerate() {
                let yy = (y as i64 + d).clamp(0, h as i64 - 1) as usize;
                acc += kernel[ki] * tmp[yy * w + x];
            }
            field[y * w + x] = acc;
        }
    }
}

/// Class prototype: blurred, standardized noise field mapped around 0.5 and
/// clamped into `[0, 1]`.
fn prototype(domain: &DomainParams, seed: u64, class: u64) -> Vec<f64> {
    let (c, h, w) = domain.image_size;
    let mut rng = stream(seed, Purpose::Prototype, &[domain.stream_id, class]);
    let mut field: Vec<f64> = (0..c * h * w).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let sigma = h as f64 / (2.0 * domain.cutoff);
    for chan in field.chunks_exact_mut(h * w) {
        gaussian_blur(chan, h, w, sigma);
    }
    let n = field.len() as f64;
    let mean: f64 = field.iter().sum::<f64>() / n;
    let var: f64 = field.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 0.0 };
    for v in field.iter_mut() {
        *v = (0.5 + PROTO_AMPLITUDE * (*v - mean) * inv).clamp(0.0, 1.0);
    }
    field
}

/// Render one sample from a prototype: integer translation with
/// clamp-to-edge, contrast scaling around 0.5, pixel noise, clamp to [0, 1].
fn render(
    proto: &[f64],
    domain: &DomainParams,
    rng: &mut impl Rng,
    out: &mut Vec<f64>,
) {
    let (c, h, w) = domain.image_size;
    let jmax = domain.jitter.round() as i64;
    let (dy, dx) = if jmax > 0 {
        (rng.random_range(-jmax..=jmax), rng.random_range(-jmax..=jmax))
    } else {
        (0, 0)
    };
    let (lo, hi) = domain.contrast;
    let contrast = if hi > lo { rng.random_range(lo..hi) } else { lo };
    for chan in 0..c {
        let plane = &proto[chan * h * w..(chan + 1) * h * w];
        for y in 0..h {
            let sy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
            for x in 0..w {
                let sx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                let noise: f64 = if domain.noise_sigma > 0.0 {
                    domain.noise_sigma * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                let v = 0.5 + contrast * (plane[sy * w + sx] - 0.5) + noise;
                out.push(v.clamp(0.0, 1.0));
            }
        }
    }
}

/// Sample one episode, deterministic in `(domain, seed)`.
///
/// Class prototypes are freshly drawn per episode; support holds `n * k`
/// examples and the query `n * q_per_class`, both in class-major order with
/// labels in `[0, n)`.
pub fn sample_episode(
    domain: &DomainParams,
    n_way: usize,
    k_shot: usize,
    q_per_class: usize,
    seed: u64,
) -> Episode {
    assert!(n_way >= 2, "need at least 2 ways, got {n_way}");
    assert!(k_shot >= 1, "need at least 1 shot, got {k_shot}");
    assert!(q_per_class >= 1, "need at least 1 query per class, got {q_per_class}");
    let (c, h, w) = domain.image_size;
    let protos: Vec<Vec<f64>> =
        (0..n_way).map(|class| prototype(domain, seed, class as u64)).collect();

    let mut rng = stream(seed, Purpose::Render, &[domain.stream_id]);
    let mut support = Vec::with_capacity(n_way * k_shot * c * h * w);
    let mut support_y = Vec::with_capacity(n_way * k_shot);
    for (class, proto) in protos.iter().enumerate() {
        for _ in 0..k_shot {
            render(proto, domain, &mut rng, &mut support);
            support_y.push(class);
        }
    }
    let mut query = Vec::with_capacity(n_way * q_per_class * c * h * w);
    let mut query_y = Vec::with_capacity(n_way * q_per_class);
    for (class, proto) in protos.iter().enumerate() {
        for _ in 0..q_per_class {
            render(proto, domain, &mut rng, &mut query);
            query_y.push(class);
        }
    }
    Episode {
        n_way,
        k_shot,
        support_x: Tensor::from_vec(vec![n_way * k_shot, c, h, w], support)
            .expect("support batch shape"),
        support_y,
        query_x: Tensor::from_vec(vec![n_way * q_per_class, c, h, w], query)
            .expect("query batch shape"),
        query_y,
        task_seed: seed,
    }
}
