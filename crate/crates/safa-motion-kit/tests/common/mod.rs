//! Fixtures and independent oracles shared by the integration suites.
//!
//! The oracles deliberately take a different route than the library:
//! exhaustive per-pixel loops instead of bounding boxes, Cramer
//! barycentrics instead of reusing edge values, plain softmax instead of
//! the max-subtracted one, explicit 2D windows instead of separable
//! filters. Agreement is then evidence rather than tautology.
#![allow(dead_code)]

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use safa_motion_kit::{Camera, Mesh};

/// Exhaustive rasterization result: interpolated attributes, binary
/// coverage, and the index of the face that won each pixel (-1 uncovered).
pub struct OracleRaster {
    pub data: Array3<f64>,
    pub coverage: Array2<f64>,
    pub winner: Array2<i64>,
}

/// Every pixel against every face, no bounding boxes, no row partition,
/// no prepared state. The inside test and the depth used for the z-buffer
/// repeat the pinned contract formulas (inclusive edge functions, strict
/// nearer-wins comparison, ascending face order on ties) so the winning
/// face is determined identically; the attribute values are recomputed
/// through Cramer's rule on the 2x2 barycentric system, a genuinely
/// different arithmetic path.
pub fn rasterize_brute_force(
    mesh: &Mesh,
    camera: &Camera,
    attributes: &Array2<f64>,
    face_mask: &[bool],
    h: usize,
    w: usize,
) -> OracleRaster {
    let a_dim = attributes.ncols();
    let mut data = Array3::zeros((h, w, a_dim));
    let mut coverage = Array2::zeros((h, w));
    let mut winner = Array2::from_elem((h, w), -1i64);

    // p = s (x, y) + t, depth = camera-space z.
    let n_v = mesh.vertices.nrows();
    let mut proj = vec![[0.0f64; 3]; n_v];
    for (v, slot) in proj.iter_mut().enumerate() {
        *slot = [
            camera.scale * mesh.vertices[[v, 0]] + camera.translation[0],
            camera.scale * mesh.vertices[[v, 1]] + camera.translation[1],
            mesh.vertices[[v, 2]],
        ];
    }

    for i in 0..h {
        let y = (2 * i + 1) as f64 / h as f64 - 1.0;
        for j in 0..w {
            let x = (2 * j + 1) as f64 / w as f64 - 1.0;
            let mut best_depth = f64::NEG_INFINITY;
            for (fi, face) in mesh.faces.outer_iter().enumerate() {
                if !face_mask[fi] {
                    continue;
                }
                let ia = face[0] as usize;
                let ib = face[1] as usize;
                let ic = face[2] as usize;
                let (va, vb, vc) = (proj[ia], proj[ib], proj[ic]);
                let area2 =
                    (vb[0] - va[0]) * (vc[1] - va[1]) - (vc[0] - va[0]) * (vb[1] - va[1]);
                if !(area2 > 0.0) {
                    continue;
                }
                let w0 = (vb[0] - x) * (vc[1] - y) - (vc[0] - x) * (vb[1] - y);
                let w1 = (vc[0] - x) * (va[1] - y) - (va[0] - x) * (vc[1] - y);
                let w2 = (va[0] - x) * (vb[1] - y) - (vb[0] - x) * (va[1] - y);
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                let l0 = w0 / area2;
                let l1 = w1 / area2;
                let l2 = w2 / area2;
                let depth = l0 * va[2] + l1 * vb[2] + l2 * vc[2];
                if depth > best_depth {
                    best_depth = depth;
                    winner[[i, j]] = fi as i64;
                    coverage[[i, j]] = 1.0;
                    // Barycentrics by Cramer's rule relative to vertex c.
                    let det = (vb[1] - vc[1]) * (va[0] - vc[0])
                        + (vc[0] - vb[0]) * (va[1] - vc[1]);
                    let g0 = ((vb[1] - vc[1]) * (x - vc[0]) + (vc[0] - vb[0]) * (y - vc[1]))
                        / det;
                    let g1 = ((vc[1] - va[1]) * (x - vc[0]) + (va[0] - vc[0]) * (y - vc[1]))
                        / det;
                    let g2 = 1.0 - g0 - g1;
                    for ch in 0..a_dim {
                        data[[i, j, ch]] = g0 * attributes[[ia, ch]]
                            + g1 * attributes[[ib, ch]]
                            + g2 * attributes[[ic, ch]];
                    }
                }
            }
        }
    }
    OracleRaster {
        data,
        coverage,
        winner,
    }
}

pub struct RasterScene {
    pub mesh: Mesh,
    pub attributes: Array2<f64>,
    pub face_mask: Vec<bool>,
    pub camera: Camera,
}

/// Random scene of at most 20 triangles. Faces whose projected area
/// magnitude falls under 1e-2 are rejected so the Cramer cross-check stays
/// comfortably inside its 1e-12 budget on sliver-free geometry; negative
/// area (back-facing) triangles are kept to exercise culling. The last
/// attribute channel is an independent random witness: two different faces
/// interpolate it to visibly different values at the same pixel, so
/// attribute agreement pins the winning face even though the rasterizer
/// does not report indices.
pub fn random_raster_scene(rng: &mut ChaCha8Rng) -> RasterScene {
    let scale = rng.random_range(0.7..1.3);
    let translation = [rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15)];
    let camera = Camera::new(scale, translation).unwrap();

    let n_v = rng.random_range(4..=10);
    let vertices = Array2::from_shape_fn((n_v, 3), |(_, c)| {
        if c == 2 {
            rng.random_range(-0.5..0.5)
        } else {
            rng.random_range(-0.9..0.9)
        }
    });

    let mut face_rows: Vec<[u32; 3]> = Vec::new();
    let mut attempts = 0;
    while face_rows.len() < 20 && attempts < 400 {
        attempts += 1;
        let a = rng.random_range(0..n_v);
        let b = rng.random_range(0..n_v);
        let c = rng.random_range(0..n_v);
        if a == b || b == c || a == c {
            continue;
        }
        let p = |v: usize| {
            [
                scale * vertices[[v, 0]] + translation[0],
                scale * vertices[[v, 1]] + translation[1],
            ]
        };
        let (pa, pb, pc) = (p(a), p(b), p(c));
        let area2 = (pb[0] - pa[0]) * (pc[1] - pa[1]) - (pc[0] - pa[0]) * (pb[1] - pa[1]);
        if area2.abs() < 1e-2 {
            continue;
        }
        face_rows.push([a as u32, b as u32, c as u32]);
    }
    assert!(!face_rows.is_empty(), "scene generation starved");

    let faces = Array2::from_shape_fn((face_rows.len(), 3), |(i, j)| face_rows[i][j]);
    let mut face_mask: Vec<bool> = (0..face_rows.len())
        .map(|_| rng.random_range(0.0..1.0) < 0.85)
        .collect();
    if face_mask.iter().all(|&m| !m) {
        face_mask[0] = true;
    }

    let a_dim = rng.random_range(2..=5);
    let attributes = Array2::from_shape_fn((n_v, a_dim), |_| rng.random_range(-1.0..1.0));

    RasterScene {
        mesh: Mesh { vertices, faces },
        attributes,
        face_mask,
        camera,
    }
}

/// Plain loop over mask channels: background times the pixel center, the
/// rendered 3D field, then the K affine fields, channel by channel.
pub fn fuse_brute_force(
    masks: &Array3<f64>,
    motion_3d: &Array3<f64>,
    affine: &[Array3<f64>],
    h: usize,
    w: usize,
) -> Array3<f64> {
    let mut out = Array3::zeros((h, w, 2));
    for i in 0..h {
        let y = (2 * i + 1) as f64 / h as f64 - 1.0;
        for j in 0..w {
            let x = (2 * j + 1) as f64 / w as f64 - 1.0;
            let z = [x, y];
            for ch in 0..2 {
                let mut acc =
                    masks[[0, i, j]] * z[ch] + masks[[1, i, j]] * motion_3d[[i, j, ch]];
                for (k, field) in affine.iter().enumerate() {
                    acc += masks[[2 + k, i, j]] * field[[i, j, ch]];
                }
                out[[i, j, ch]] = acc;
            }
        }
    }
    out
}

/// Quadruple-loop contextual attention: every query patch against every
/// candidate patch, scored by a plain (unshifted) softmax of scale * NCC
/// with the visibility factor multiplied straight in, overlap-add with
/// explicit counts, then the occlusion-gated blend. Matches the pinned
/// 1e-12 norm floor and the rule that exactly-zero-visibility patches are
/// excluded rather than weighted away.
pub fn attention_brute_force(
    features: &Array3<f64>,
    occlusion: &Array2<f64>,
    patch: usize,
    scale: f64,
) -> Array3<f64> {
    let (h, w, c) = features.dim();
    let mut positions = Vec::new();
    for r in 0..=h - patch {
        for col in 0..=w - patch {
            positions.push((r, col));
        }
    }
    let n = positions.len();
    let dim = patch * patch * c;

    let mut bank = vec![vec![0.0f64; dim]; n];
    let mut vis = vec![0.0f64; n];
    let mut norm = vec![0.0f64; n];
    for (idx, &(r, col)) in positions.iter().enumerate() {
        let mut k = 0;
        let mut occ_sum = 0.0;
        for dr in 0..patch {
            for dc in 0..patch {
                occ_sum += occlusion[[r + dr, col + dc]];
                for ch in 0..c {
                    bank[idx][k] = features[[r + dr, col + dc, ch]];
                    k += 1;
                }
            }
        }
        vis[idx] = occ_sum / (patch * patch) as f64;
        let mut sq = 0.0;
        for v in &bank[idx] {
            sq += v * v;
        }
        norm[idx] = sq.sqrt().max(1e-12);
    }

    let mut canvas = Array3::<f64>::zeros((h, w, c));
    let mut counts = Array2::<f64>::zeros((h, w));
    for q in 0..n {
        let mut weights = vec![0.0f64; n];
        let mut denom = 0.0;
        for b in 0..n {
            if vis[b] == 0.0 {
                continue;
            }
            let mut dot = 0.0;
            for k in 0..dim {
                dot += bank[q][k] * bank[b][k];
            }
            let wgt = vis[b] * (scale * dot / (norm[q] * norm[b])).exp();
            weights[b] = wgt;
            denom += wgt;
        }
        let mut rebuilt = vec![0.0f64; dim];
        for b in 0..n {
            if weights[b] == 0.0 {
                continue;
            }
            for k in 0..dim {
                rebuilt[k] += weights[b] / denom * bank[b][k];
            }
        }
        let (r, col) = positions[q];
        let mut k = 0;
        for dr in 0..patch {
            for dc in 0..patch {
                counts[[r + dr, col + dc]] += 1.0;
                for ch in 0..c {
                    canvas[[r + dr, col + dc, ch]] += rebuilt[k];
                    k += 1;
                }
            }
        }
    }

    let mut out = Array3::zeros((h, w, c));
    for i in 0..h {
        for j in 0..w {
            let o = occlusion[[i, j]];
            for ch in 0..c {
                let rebuilt = canvas[[i, j, ch]] / counts[[i, j]];
                out[[i, j, ch]] = o * features[[i, j, ch]] + (1.0 - o) * rebuilt;
            }
        }
    }
    out
}

/// SSIM by the direct formula: an explicit 2D 11x11 Gaussian window
/// (sigma 1.5, K1 0.01, K2 0.03, unit dynamic range), statistics
/// accumulated per valid window position, no separable shortcut.
pub fn ssim_reference(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    let (h, w, channels) = a.dim();
    assert_eq!(a.dim(), b.dim());
    assert!(h >= 11 && w >= 11);

    let mut g = [0.0f64; 11];
    let mut sum = 0.0;
    for (i, slot) in g.iter_mut().enumerate() {
        let d = i as f64 - 5.0;
        *slot = (-d * d / 4.5).exp();
        sum += *slot;
    }
    for slot in g.iter_mut() {
        *slot /= sum;
    }
    let c1 = 0.0001;
    let c2 = 0.0009;

    let hv = h - 10;
    let wv = w - 10;
    let mut total = 0.0;
    for ch in 0..channels {
        let mut acc = 0.0;
        for i0 in 0..hv {
            for j0 in 0..wv {
                let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for di in 0..11 {
                    for dj in 0..11 {
                        let wgt = g[di] * g[dj];
                        let x = a[[i0 + di, j0 + dj, ch]];
                        let y = b[[i0 + di, j0 + dj, ch]];
                        mx += wgt * x;
                        my += wgt * y;
                        mxx += wgt * x * x;
                        myy += wgt * y * y;
                        mxy += wgt * x * y;
                    }
                }
                let vx = mxx - mx * mx;
                let vy = myy - my * my;
                let cov = mxy - mx * my;
                acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
        total += acc / (hv * wv) as f64;
    }
    total / channels as f64
}

pub fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Array3<f64> {
    Array3::from_shape_fn((h, w, c), |_| rng.random_range(0.0..1.0))
}

pub fn max_abs_diff(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
