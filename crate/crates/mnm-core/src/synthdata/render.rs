//! Image synthesis: gradient background with smooth clutter and pixel noise,
//! plus one anisotropic Gaussian blob per finding. Suspicious findings carry
//! a bright halo ring; its strength is the per-view texture cue.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use super::{DatasetConfig, Finding, View, ViewImage};

/// Halo ring location and width, in units of the Gaussian radius.
const RING_CENTER: f64 = 2.2;
const RING_SIGMA: f64 = 0.35;
/// Halo amplitude as a fraction of lesion contrast at texture 1.
const RING_GAIN: f64 = 0.6;

/// Cut-off (in radius units) beyond which a blob's contribution is skipped.
const BLOB_SUPPORT: f64 = 3.4;

/// Background plus noise for one view. Consuming the rng in a fixed order is
/// what makes negatives reproducible pixel-for-pixel.
pub(crate) fn render_background(rng: &mut ChaCha8Rng, cfg: &DatasetConfig) -> ViewImage {
    let size = cfg.image_size;
    let mut img = ViewImage::zeros(size, size);

    let b0: f64 = rng.gen_range(0.25..0.40);
    let bx: f64 = rng.gen_range(-0.12..0.12);
    let by: f64 = rng.gen_range(-0.12..0.12);
    for y in 0..size {
        for x in 0..size {
            img.pixels[y * size + x] =
                (b0 + bx * x as f64 / size as f64 + by * y as f64 / size as f64) as f32;
        }
    }

    // smooth parenchyma-like clumps, present on every image category
    let clutter_count = if cfg.clutter_rate > 0.0 {
        Poisson::new(cfg.clutter_rate).expect("rate > 0").sample(rng) as usize
    } else {
        0
    };
    for _ in 0..clutter_count {
        let cx = rng.gen_range(0.08 * size as f64..0.92 * size as f64);
        let cy = rng.gen_range(0.08 * size as f64..0.92 * size as f64);
        let r = rng.gen_range(4.0..11.0);
        let amp = rng.gen_range(cfg.clutter_contrast.0..cfg.clutter_contrast.1);
        splat_blob(&mut img, cx, cy, r, r, 0.0, amp, 0.0);
    }

    if cfg.noise_level > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_level).expect("noise level finite");
        for p in &mut img.pixels {
            *p += noise.sample(rng) as f32;
        }
    }
    img
}

/// Add one rotated Gaussian blob with an optional halo ring.
fn splat_blob(
    img: &mut ViewImage,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    angle: f64,
    amplitude: f64,
    ring: f64,
) {
    let size = img.width;
    let reach = BLOB_SUPPORT * rx.max(ry);
    let x0 = ((cx - reach).floor().max(0.0)) as usize;
    let x1 = ((cx + reach).ceil().min(size as f64 - 1.0)) as usize;
    let y0 = ((cy - reach).floor().max(0.0)) as usize;
    let y1 = ((cy + reach).ceil().min(size as f64 - 1.0)) as usize;
    let (sin, cos) = angle.sin_cos();
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let u = (cos * dx + sin * dy) / rx;
            let v = (-sin * dx + cos * dy) / ry;
            let q = u * u + v * v;
            if q > BLOB_SUPPORT * BLOB_SUPPORT {
                continue;
            }
            let core = amplitude * (-q / 2.0).exp();
            let s = q.sqrt();
            let halo = ring
                * RING_GAIN
                * amplitude
                * (-((s - RING_CENTER) * (s - RING_CENTER)) / (2.0 * RING_SIGMA * RING_SIGMA))
                    .exp();
            img.pixels[y * size + x] += (core + halo) as f32;
        }
    }
}

fn render_findings(img: &mut ViewImage, findings: &[Finding], view: View) {
    for f in findings {
        let (b, texture, angle) = match view {
            View::Cc => (&f.box_cc, f.texture_cc, f.angle_cc),
            View::Mlo => (&f.box_mlo, f.texture_mlo, f.angle_mlo),
        };
        let (cx, cy) = b.center();
        splat_blob(img, cx, cy, f.radius_x, f.radius_y, angle, f.contrast, texture);
    }
}

/// Render both views of one breast. Findings must already be placed; the
/// rngs drive only the background realizations.
pub fn render_views(
    findings: &[Finding],
    rng_cc: &mut ChaCha8Rng,
    rng_mlo: &mut ChaCha8Rng,
    cfg: &DatasetConfig,
) -> (ViewImage, ViewImage) {
    let mut cc = render_background(rng_cc, cfg);
    let mut mlo = render_background(rng_mlo, cfg);
    render_findings(&mut cc, findings, View::Cc);
    render_findings(&mut mlo, findings, View::Mlo);
    (cc, mlo)
}
